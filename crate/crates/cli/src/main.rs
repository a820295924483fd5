//! `mobinet`: train, evaluate, ablate, count, benchmark, export and
//! inspect 1-bit MobileNet-style networks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mobinet::config::KeyValues;
use mobinet::model_io::{self, CHECKPOINT_MAGIC, MODEL_MAGIC};
use mobinet::network::{Network, NetworkConfig, NETWORK_KEYS};
use mobinet::perf::{self, BenchCase, BenchKernel};
use mobinet::svg::LineChart;
use mobinet::train::trainer::threads_from_env;
use mobinet::train::{evaluate, Ablation, Suite, TrainConfig, Trainer};
use mobinet::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mobinet",
    version,
    about = "1-bit MobileNet-style networks: training, accounting and export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write history, checkpoint and 1-bit model.
    Train(TrainArgs),
    /// Evaluate a model file or checkpoint on the test split.
    Eval(EvalArgs),
    /// Run ablation suites and write summary CSV, curves CSV and SVG charts.
    Ablate(AblateArgs),
    /// Count ops, parameters and serialized size.
    Flops(FlopsArgs),
    /// Time the float and packed binary convolution kernels.
    Bench(BenchArgs),
    /// Convert a training checkpoint into a 1-bit model file.
    Export(ExportArgs),
    /// Print the manifest of a model file or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// File of `key = value` lines (network and training keys, plus `preset = desk|imagenet`).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving every artifact.
    #[arg(long, value_name = "DIR", default_value = "mobinet-out")]
    out: PathBuf,
    /// Seed for initialisation and shuffling; overrides the `seed` key.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Model file (MOBI) or checkpoint (MOBC) to evaluate.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Suite to run.
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    /// Comma-separated seeds; curves are averaged over them. Defaults to --seed or the `seed` key.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Skip,
    Block,
    Prelu,
    K,
    All,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    common: Common,
    /// Input resolution; defaults to the config's `resolution`.
    #[arg(long, value_name = "PX")]
    resolution: Option<usize>,
    /// Also report the full-precision MobileNet v1 reference.
    #[arg(long)]
    reference: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Directory receiving bench.csv.
    #[arg(long, value_name = "DIR", default_value = "mobinet-out")]
    out: PathBuf,
    /// Kernel to time.
    #[arg(long, value_enum, default_value_t = KernelArg::Both)]
    kernel: KernelArg,
    /// Input and output channels.
    #[arg(long, value_name = "C", default_value_t = 256)]
    channels: usize,
    /// Spatial extent of the square input.
    #[arg(long, value_name = "PX", default_value_t = 14)]
    size: usize,
    /// Square kernel size.
    #[arg(long, value_name = "N", default_value_t = 3)]
    kernel_size: usize,
    /// Group structure with 2^K channels per group; dense when omitted.
    #[arg(long, value_name = "K")]
    k: Option<u32>,
    /// Timed repetitions per kernel.
    #[arg(long, value_name = "N", default_value_t = 20)]
    reps: usize,
    /// Seed for inputs and weights.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    Float,
    Binary,
    Both,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint to convert.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Directory receiving model.mobi.
    #[arg(long, value_name = "DIR", default_value = "mobinet-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Model file or checkpoint.
    file: PathBuf,
}

/// Failure with its exit code: 2 for usage and configuration, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Flops(a) => flops(a),
        Command::Bench(a) => bench(a),
        Command::Export(a) => export(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// Merges the config file, `--set` overrides and `--seed` on top of the
/// preset named by the `preset` key (or `default_preset`).
fn load_config(common: &Common, default_preset: &str) -> CliResult<(NetworkConfig, TrainConfig)> {
    let mut kv = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::new(),
    };
    for s in &common.set {
        kv.set_assignment(s)?;
    }
    if let Some(seed) = common.seed {
        kv.set("seed", &seed.to_string());
    }
    let mut net = match kv.get("preset").unwrap_or(default_preset) {
        "desk" => NetworkConfig::desk(),
        "imagenet" => NetworkConfig::default(),
        other => return Err(usage(format!("unknown preset `{other}` (desk, imagenet)"))),
    };
    let (net_kv, rest) = kv.partition(&NETWORK_KEYS);
    let (_, train_kv) = rest.partition(&["preset"]);
    for (key, value) in net_kv.iter() {
        net.apply(key, value)?;
    }
    net.validate()?;
    let train = TrainConfig::from_kv(&train_kv)?.with_classes(net.num_classes);
    Ok((net, train))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    model_io::write_file(path, contents.as_ref())?;
    Ok(())
}

fn loss_chart(title: &str, history: &mobinet::train::History) -> String {
    let mut chart = LineChart::new(title, "epoch", "training loss");
    chart.add_series(
        "train loss",
        history
            .records
            .iter()
            .map(|r| (r.epoch as f64, r.train_loss as f64))
            .collect(),
    );
    chart.to_svg()
}

fn train(a: TrainArgs) -> CliResult<()> {
    let (net_cfg, train_cfg) = load_config(&a.common, "desk")?;
    let out = &a.common.out;
    let (train_set, test_set) = train_cfg.dataset.load()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = model_io::load_checkpoint(&model_io::read_file(path)?)?;
            if ck.network.config() != &net_cfg {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different network config",
                    path.display()
                )));
            }
            Trainer::resume(ck.network, train_cfg.clone(), ck.optimizer, ck.history)?
        }
        None => Trainer::new(Network::new(&net_cfg, train_cfg.seed)?, train_cfg.clone())?,
    };
    write(&out.join("config.txt"), net_cfg.to_text())?;
    let checkpoint = out.join("checkpoint.mobc");
    let history_path = out.join("history.csv");
    trainer.fit(&train_set, &test_set, |t, r| {
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  top1 {:.2}%  top5 {:.2}%",
            r.epoch, r.lr, r.train_loss, r.test_top1, r.test_top5
        );
        model_io::write_file(
            &checkpoint,
            &model_io::save_checkpoint(t.network(), t.optimizer(), t.history()),
        )?;
        model_io::write_file(&history_path, t.history().to_csv().as_bytes())
    })?;
    let history = trainer.history().clone();
    write(&history_path, history.to_csv())?;
    write(&out.join("loss.svg"), loss_chart("training loss", &history))?;
    let model = model_io::export_binary(trainer.network())?;
    write(&out.join("model.mobi"), &model)?;
    println!("wrote {} ({} bytes)", out.join("model.mobi").display(), model.len());
    Ok(())
}

fn load_any(path: &Path) -> CliResult<Network> {
    let bytes = model_io::read_file(path)?;
    if bytes.starts_with(&MODEL_MAGIC) {
        Ok(model_io::load_binary(&bytes)?)
    } else if bytes.starts_with(&CHECKPOINT_MAGIC) {
        Ok(model_io::load_checkpoint(&bytes)?.network)
    } else {
        Err(Failure {
            code: 1,
            message: format!("{} is neither a model file nor a checkpoint", path.display()),
        })
    }
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let net = load_any(&a.model)?;
    // The network comes from the file; only the data keys are used here.
    let (_, train_cfg) = load_config(&a.common, "desk")?;
    let train_cfg = train_cfg.with_classes(net.config().num_classes);
    let (_, test) = train_cfg.dataset.load()?;
    let r = evaluate(&net, &test, train_cfg.batch_size.max(64), threads_from_env())?;
    let report = format!(
        "samples {}\nloss {:.6}\ntop1 {:.2}%\ntop5 {:.2}%\n",
        test.len(),
        r.loss,
        r.top1,
        r.top5
    );
    print!("{report}");
    write(&a.common.out.join("eval.txt"), report)
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let (net_cfg, train_cfg) = load_config(&a.common, "desk")?;
    let seeds = if a.seeds.is_empty() {
        vec![train_cfg.seed]
    } else {
        a.seeds.clone()
    };
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::Skip => vec![Suite::Skip],
        SuiteArg::Block => vec![Suite::Block],
        SuiteArg::Prelu => vec![Suite::Prelu],
        SuiteArg::K => vec![Suite::K],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let (train_set, test_set) = train_cfg.dataset.load()?;
    let mut ablation = Ablation::new(net_cfg, train_cfg, seeds, &train_set, &test_set)?;
    let dir = a.common.out.join("ablation");
    for suite in suites {
        let report = ablation.run_suite(suite, &mut |spec, seed, r| {
            println!(
                "{suite} {} seed {seed} epoch {:>3} loss {:.4} top1 {:.2}%",
                spec.label(),
                r.epoch,
                r.train_loss,
                r.test_top1
            )
        })?;
        write(&dir.join(format!("{suite}_summary.csv")), report.summary_csv())?;
        write(&dir.join(format!("{suite}_curves.csv")), report.curves_csv())?;
        write(&dir.join(format!("{suite}_loss.svg")), report.loss_chart())?;
        write(&dir.join(format!("{suite}_top1.svg")), report.accuracy_chart())?;
        for run in &report.runs {
            println!(
                "{suite} {:<18} smoothed loss {:.4}  tail top1 {:.2}%  eff. FLOPs {:.3}M{}",
                run.spec.label(),
                run.final_smoothed_loss().unwrap_or(f32::NAN),
                run.tail_top1,
                run.effective_flops / 1e6,
                if run.diverged.is_empty() { "" } else { "  (diverged)" }
            );
        }
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> CliResult<()> {
    let (net_cfg, _) = load_config(&a.common, "imagenet")?;
    let resolution = a.resolution.unwrap_or(net_cfg.resolution);
    let report = perf::count_config(&net_cfg, resolution)?;
    let mut text = report.to_text();
    let mut csv = report.to_csv();
    if a.reference {
        let reference = perf::mobilenet_v1_reference(resolution, net_cfg.num_classes)?;
        text.push('\n');
        text.push_str(&reference.to_text());
        csv.push_str(&reference.to_csv());
    }
    print!("{text}");
    write(&a.common.out.join("flops.txt"), text)?;
    write(&a.common.out.join("flops.csv"), csv)
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let case = BenchCase {
        channels: a.channels,
        size: a.size,
        kernel: a.kernel_size,
        k: a.k,
    };
    let kernels = match a.kernel {
        KernelArg::Float => vec![BenchKernel::FloatConv],
        KernelArg::Binary => vec![BenchKernel::BinaryConv],
        KernelArg::Both => vec![BenchKernel::FloatConv, BenchKernel::BinaryConv],
    };
    let stats = perf::bench(&kernels, case, a.reps, a.seed)?;
    print!("{}", perf::bench_table(&stats));
    if let [f, b] = stats.as_slice() {
        println!(
            "binary speedup over float: {:.2}x",
            f.median_ns as f64 / b.median_ns as f64
        );
    }
    let mut csv = format!("{}\n", perf::BENCH_CSV_HEADER);
    for s in &stats {
        csv.push_str(&perf::bench_csv_row(s));
        csv.push('\n');
    }
    write(&a.out.join("bench.csv"), csv)
}

fn export(a: ExportArgs) -> CliResult<()> {
    let ck = model_io::load_checkpoint(&model_io::read_file(&a.checkpoint)?)?;
    let bytes = model_io::export_binary(&ck.network)?;
    let path = a.out.join("model.mobi");
    write(&path, &bytes)?;
    println!("wrote {} ({} bytes)", path.display(), bytes.len());
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let bytes = model_io::read_file(&a.file)?;
    if bytes.starts_with(&CHECKPOINT_MAGIC) {
        let ck = model_io::load_checkpoint(&bytes)?;
        println!("format   MOBC checkpoint");
        print!("{}", ck.network.config().to_text());
        println!("epochs   {}", ck.history.len());
        println!("adam t   {}", ck.optimizer.steps());
        for e in ck.network.manifest() {
            println!("{:<28} {:<7} {:?}", e.name, e.kind.label(), e.shape);
        }
        println!("params   {}", ck.network.param_count());
    } else {
        print!("{}", model_io::inspect(&bytes)?);
    }
    Ok(())
}
