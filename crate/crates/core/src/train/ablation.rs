//! Ablation suites: skip connections, the Pre-block, PReLU and K.
//!
//! Every run is keyed by `(variant, K, activation, seed)` and cached, so
//! suites that share a configuration train it once.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::blocks::BlockVariant;
use crate::error::{Error, Result};
use crate::layers::ActivationKind;
use crate::network::{Network, NetworkConfig};
use crate::perf;
use crate::svg::LineChart;
use crate::train::data::Dataset;
use crate::train::trainer::{History, TrainConfig, Trainer};

/// Trailing window used to smooth per-epoch curves.
pub const SMOOTHING_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    /// Vanilla binary MobileNet against the Mid-block, both K = 0.
    Skip,
    /// Vanilla against the Pre-block, both K = 0.
    Block,
    /// Mid-block with PReLU against ReLU at the base K.
    Prelu,
    /// Mid-block over K = 0..=3.
    K,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Skip, Suite::Block, Suite::Prelu, Suite::K];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Skip => "skip",
            Suite::Block => "block",
            Suite::Prelu => "prelu",
            Suite::K => "k",
        }
    }

    /// Runs of the suite, relative to the base network config.
    pub fn runs(self, base: &NetworkConfig) -> Vec<RunSpec> {
        let mid = |k, activation| RunSpec {
            variant: BlockVariant::Mid,
            k,
            activation,
        };
        let prelu = ActivationKind::PRelu;
        match self {
            Suite::Skip => vec![RunSpec::new(BlockVariant::Vanilla, 0), mid(0, prelu)],
            Suite::Block => vec![
                RunSpec::new(BlockVariant::Vanilla, 0),
                RunSpec::new(BlockVariant::Pre, 0),
            ],
            Suite::Prelu => vec![mid(base.k, prelu), mid(base.k, ActivationKind::Relu)],
            Suite::K => (0..=3).map(|k| mid(k, prelu)).collect(),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown suite `{s}` (skip, block, prelu, k)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunSpec {
    pub variant: BlockVariant,
    pub k: u32,
    pub activation: ActivationKind,
}

impl RunSpec {
    pub fn new(variant: BlockVariant, k: u32) -> Self {
        Self {
            variant,
            k,
            activation: ActivationKind::PRelu,
        }
    }

    pub fn label(&self) -> String {
        let act = match self.activation {
            ActivationKind::PRelu => "prelu",
            ActivationKind::Relu => "relu",
        };
        format!("{}-k{}-{act}", self.variant, self.k)
    }

    pub fn network_config(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            variant: self.variant,
            k: self.k,
            activation: self.activation,
            ..base.clone()
        }
    }
}

/// One trained run. `diverged` holds the reason when training stopped
/// early; `history` then covers the completed epochs only.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub spec: RunSpec,
    pub seed: u64,
    pub history: History,
    pub diverged: Option<String>,
}

/// Trailing mean over `window` points (shorter at the start).
pub fn smooth(values: &[f32], window: usize) -> Vec<f32> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f32>() / s.len() as f32
        })
        .collect()
}

/// Per-epoch mean over seeds, truncated to the shortest history.
fn mean_curve(runs: &[&RunResult], f: impl Fn(&crate::train::EpochRecord) -> f32) -> Vec<f32> {
    let len = runs.iter().map(|r| r.history.len()).min().unwrap_or(0);
    (0..len)
        .map(|e| runs.iter().map(|r| f(&r.history.records[e])).sum::<f32>() / runs.len() as f32)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub spec: RunSpec,
    pub seeds: usize,
    pub epochs: usize,
    /// Seed-mean training loss per epoch.
    pub loss: Vec<f32>,
    pub smoothed_loss: Vec<f32>,
    /// Seed-mean test top-1 per epoch, percent.
    pub top1: Vec<f32>,
    /// Mean test top-1 over the last [`SMOOTHING_WINDOW`] epochs.
    pub tail_top1: f32,
    pub final_top1: f32,
    pub diverged: Vec<String>,
    pub effective_flops: f64,
}

impl RunSummary {
    fn new(spec: RunSpec, runs: &[&RunResult], effective_flops: f64) -> Self {
        let loss = mean_curve(runs, |r| r.train_loss);
        let top1 = mean_curve(runs, |r| r.test_top1);
        let tail = &top1[top1.len().saturating_sub(SMOOTHING_WINDOW)..];
        Self {
            spec,
            seeds: runs.len(),
            epochs: loss.len(),
            smoothed_loss: smooth(&loss, SMOOTHING_WINDOW),
            tail_top1: if tail.is_empty() {
                0.0
            } else {
                tail.iter().sum::<f32>() / tail.len() as f32
            },
            final_top1: top1.last().copied().unwrap_or(0.0),
            loss,
            top1,
            diverged: runs.iter().filter_map(|r| r.diverged.clone()).collect(),
            effective_flops,
        }
    }

    pub fn final_smoothed_loss(&self) -> Option<f32> {
        self.smoothed_loss.last().copied()
    }

    /// Smoothed loss at 1-based `epoch`.
    pub fn smoothed_loss_at(&self, epoch: usize) -> Option<f32> {
        epoch.checked_sub(1).and_then(|i| self.smoothed_loss.get(i)).copied()
    }

    /// Whether the smoothed loss never increases from one epoch to the next.
    pub fn smoothed_monotone(&self) -> bool {
        self.smoothed_loss.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub runs: Vec<RunSummary>,
    pub results: Vec<RunResult>,
}

impl SuiteReport {
    pub fn get(&self, spec: &RunSpec) -> Option<&RunSummary> {
        self.runs.iter().find(|r| &r.spec == spec)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "suite,run,variant,k,activation,seeds,epochs,final_loss,final_smoothed_loss,final_top1,tail_top1,effective_flops,diverged\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.suite,
                r.spec.label(),
                r.spec.variant,
                r.spec.k,
                r.spec.label().rsplit('-').next().unwrap_or(""),
                r.seeds,
                r.epochs,
                r.loss.last().copied().unwrap_or(f32::NAN),
                r.final_smoothed_loss().unwrap_or(f32::NAN),
                r.final_top1,
                r.tail_top1,
                r.effective_flops,
                r.diverged.len()
            );
        }
        s
    }

    /// Long format: one row per run, seed and epoch.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("suite,run,seed,epoch,lr,train_loss,smoothed_loss,test_top1,test_top5\n");
        for res in &self.results {
            let sm = smooth(&res.history.losses(), SMOOTHING_WINDOW);
            for (r, sl) in res.history.records.iter().zip(sm) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:e},{},{},{},{}",
                    self.suite,
                    res.spec.label(),
                    res.seed,
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    sl,
                    r.test_top1,
                    r.test_top5
                );
            }
        }
        s
    }

    pub fn loss_chart(&self) -> String {
        let mut chart = LineChart::new(
            &format!("{} ablation: training loss", self.suite),
            "epoch",
            "smoothed training loss",
        );
        for r in &self.runs {
            chart.add_series(&r.spec.label(), enumerate(&r.smoothed_loss));
        }
        chart.to_svg()
    }

    pub fn accuracy_chart(&self) -> String {
        let mut chart = LineChart::new(
            &format!("{} ablation: test top-1", self.suite),
            "epoch",
            "test top-1 (%)",
        );
        for r in &self.runs {
            chart.add_series(&r.spec.label(), enumerate(&r.top1));
        }
        chart.to_svg()
    }
}

fn enumerate(values: &[f32]) -> Vec<(f64, f64)> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64, v as f64))
        .collect()
}

/// Trains and caches ablation runs on one dataset.
pub struct Ablation<'a> {
    pub base: NetworkConfig,
    pub train_cfg: TrainConfig,
    pub seeds: Vec<u64>,
    train: &'a Dataset,
    test: &'a Dataset,
    cache: BTreeMap<(RunSpec, u64), RunResult>,
}

impl<'a> Ablation<'a> {
    pub fn new(
        base: NetworkConfig,
        train_cfg: TrainConfig,
        seeds: Vec<u64>,
        train: &'a Dataset,
        test: &'a Dataset,
    ) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed"));
        }
        base.validate()?;
        train_cfg.validate()?;
        Ok(Self {
            base,
            train_cfg,
            seeds,
            train,
            test,
            cache: BTreeMap::new(),
        })
    }

    /// Trains `spec` with `seed` unless cached. Divergence is recorded,
    /// not propagated.
    pub fn run(
        &mut self,
        spec: RunSpec,
        seed: u64,
        on_epoch: &mut dyn FnMut(&RunSpec, u64, &crate::train::EpochRecord),
    ) -> Result<&RunResult> {
        if !self.cache.contains_key(&(spec, seed)) {
            let net = Network::new(&spec.network_config(&self.base), seed)?;
            let cfg = TrainConfig {
                seed,
                ..self.train_cfg.clone()
            };
            let mut trainer = Trainer::new(net, cfg)?;
            let outcome = trainer.fit(self.train, self.test, |_, rec| {
                on_epoch(&spec, seed, rec);
                Ok(())
            });
            let diverged = match outcome {
                Ok(()) => None,
                Err(Error::Diverged { epoch, reason }) => Some(format!("epoch {epoch}: {reason}")),
                Err(e) => return Err(e),
            };
            self.cache.insert(
                (spec, seed),
                RunResult {
                    spec,
                    seed,
                    history: trainer.history().clone(),
                    diverged,
                },
            );
        }
        Ok(&self.cache[&(spec, seed)])
    }

    pub fn run_suite(
        &mut self,
        suite: Suite,
        on_epoch: &mut dyn FnMut(&RunSpec, u64, &crate::train::EpochRecord),
    ) -> Result<SuiteReport> {
        let specs = suite.runs(&self.base);
        let mut results = Vec::new();
        for spec in &specs {
            for &seed in &self.seeds.clone() {
                results.push(self.run(*spec, seed, on_epoch)?.clone());
            }
        }
        let runs = specs
            .iter()
            .map(|spec| {
                let mine: Vec<&RunResult> = results.iter().filter(|r| &r.spec == spec).collect();
                let layers = perf::layer_costs(&spec.network_config(&self.base), self.base.resolution)?;
                let f = layers.iter().map(|l| l.float_ops).sum();
                let b = layers.iter().map(|l| l.binary_ops).sum();
                Ok(RunSummary::new(*spec, &mine, perf::effective_flops(f, b)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SuiteReport { suite, runs, results })
    }
}
