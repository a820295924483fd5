//! Op, parameter and size accounting, plus single-threaded kernel timing.
//!
//! One multiply-accumulate is one op. Binary convolutions count their
//! xnor-popcount lanes as binary ops and contribute `binary_ops / 64` to
//! the effective FLOPs. Batch norm, activations and pools cost one float
//! op per element they produce; skip additions and sign() are free.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::BlockConfig;
use crate::conv::{binary_conv, float_conv, BinaryConvLayer, ConvGeometry, KDependency};
use crate::error::{Error, Result};
use crate::layers::ActivationKind;
use crate::model_io;
use crate::network::{Network, NetworkConfig, MOBILENET_V1_SCHEDULE, MOBILENET_V1_STEM};
use crate::param::ParamKind;
use crate::tensor::FloatTensor;

/// Effective FLOPs of full-precision MobileNet v1 at 224×224.
pub const REFERENCE_FLOPS: f64 = 569e6;
/// Binary ops per effective FLOP.
pub const BINARY_DISCOUNT: f64 = 64.0;

pub fn effective_flops(float_ops: u64, binary_ops: u64) -> f64 {
    float_ops as f64 + binary_ops as f64 / BINARY_DISCOUNT
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub float_ops: u64,
    pub binary_ops: u64,
    pub params_float: u64,
    pub params_binary: u64,
    /// Output extent `(channels, height, width)`.
    pub output: (usize, usize, usize),
}

impl LayerCost {
    pub fn effective_flops(&self) -> f64 {
        effective_flops(self.float_ops, self.binary_ops)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfReport {
    pub label: String,
    pub resolution: usize,
    pub float_ops: u64,
    pub binary_ops: u64,
    pub effective_flops: f64,
    pub params_float: u64,
    pub params_binary: u64,
    pub serialized_bytes: u64,
    pub speedup_vs_reference: f64,
    pub layers: Vec<LayerCost>,
}

impl PerfReport {
    fn from_layers(label: String, resolution: usize, layers: Vec<LayerCost>, serialized_bytes: u64) -> Self {
        let float_ops = layers.iter().map(|l| l.float_ops).sum();
        let binary_ops = layers.iter().map(|l| l.binary_ops).sum();
        let eff = effective_flops(float_ops, binary_ops);
        Self {
            label,
            resolution,
            float_ops,
            binary_ops,
            effective_flops: eff,
            params_float: layers.iter().map(|l| l.params_float).sum(),
            params_binary: layers.iter().map(|l| l.params_binary).sum(),
            serialized_bytes,
            speedup_vs_reference: if eff > 0.0 { REFERENCE_FLOPS / eff } else { 0.0 },
            layers,
        }
    }

    pub fn params(&self) -> u64 {
        self.params_float + self.params_binary
    }

    /// Aligned per-layer table followed by the totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} @ {}x{}", self.label, self.resolution, self.resolution);
        let _ = writeln!(
            s,
            "{:<22} {:>14} {:>14} {:>12} {:>10} {:>10}  output",
            "layer", "float ops", "binary ops", "eff. FLOPs", "float par", "bin par"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<22} {:>14} {:>14} {:>12.0} {:>10} {:>10}  {}x{}x{}",
                l.name,
                l.float_ops,
                l.binary_ops,
                l.effective_flops(),
                l.params_float,
                l.params_binary,
                l.output.0,
                l.output.1,
                l.output.2
            );
        }
        let _ = writeln!(s, "float ops          {}", self.float_ops);
        let _ = writeln!(s, "binary ops         {}", self.binary_ops);
        let _ = writeln!(s, "effective FLOPs    {:.2}M", self.effective_flops / 1e6);
        let _ = writeln!(
            s,
            "params             {:.3}M ({} float, {} binary)",
            self.params() as f64 / 1e6,
            self.params_float,
            self.params_binary
        );
        let _ = writeln!(
            s,
            "serialized size    {} B ({:.2} MB)",
            self.serialized_bytes,
            self.serialized_bytes as f64 / 1e6
        );
        let _ = writeln!(s, "speedup vs 569M    {:.2}x", self.speedup_vs_reference);
        s
    }

    /// Per-layer rows plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,float_ops,binary_ops,effective_flops,params_float,params_binary\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l.name,
                l.float_ops,
                l.binary_ops,
                l.effective_flops(),
                l.params_float,
                l.params_binary
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{},{},{}",
            self.float_ops, self.binary_ops, self.effective_flops, self.params_float, self.params_binary
        );
        s
    }
}

fn act_params(kind: ActivationKind, c: usize) -> u64 {
    match kind {
        ActivationKind::PRelu => c as u64,
        ActivationKind::Relu => 0,
    }
}

fn conv_params(g: &ConvGeometry) -> u64 {
    (g.out_c * g.filter_len()) as u64
}

/// Per-layer costs of `cfg` at `resolution`, straight from the config.
pub fn layer_costs(cfg: &NetworkConfig, resolution: usize) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let sizes = cfg.block_input_sizes(resolution)?;
    let mut layers = Vec::new();
    let stem = cfg.stem_geometry()?;
    let mut size = stem.out_extent(resolution)?;
    let c = stem.out_c;
    let elems = |c: usize, s: usize| (c * s * s) as u64;
    layers.push(LayerCost {
        name: "stem".into(),
        float_ops: stem.macs(resolution, resolution)? + 2 * elems(c, size),
        binary_ops: 0,
        params_float: conv_params(&stem) + 2 * c as u64 + act_params(cfg.activation, c),
        params_binary: 0,
        output: (c, size, size),
    });
    if cfg.stem_pooled() {
        size /= 2;
        layers.push(LayerCost {
            name: "stem.pool".into(),
            float_ops: elems(c, size),
            binary_ops: 0,
            params_float: 0,
            params_binary: 0,
            output: (c, size, size),
        });
    }
    for (i, (block, &input)) in cfg.block_configs()?.iter().zip(&sizes).enumerate() {
        debug_assert_eq!(input, size);
        let layout = block.layout()?;
        for (j, seg) in layout.segments.iter().enumerate() {
            if layout.pool_after == Some(j) {
                size /= 2;
                layers.push(LayerCost {
                    name: format!("block{i:02}.pool"),
                    float_ops: elems(seg.in_c, size),
                    binary_ops: 0,
                    params_float: 0,
                    params_binary: 0,
                    output: (seg.in_c, size, size),
                });
            }
            let geom = seg.geometry()?;
            layers.push(LayerCost {
                name: format!("block{i:02}.{}", seg.name),
                float_ops: 2 * elems(seg.out_c, size),
                binary_ops: geom.macs(size, size)?,
                params_float: 2 * seg.out_c as u64 + act_params(block.activation, seg.out_c),
                params_binary: conv_params(&geom),
                output: (seg.out_c, size, size),
            });
        }
        if layout.pool_after == Some(layout.segments.len()) {
            let c = block.out_c;
            size /= 2;
            layers.push(LayerCost {
                name: format!("block{i:02}.pool"),
                float_ops: elems(c, size),
                binary_ops: 0,
                params_float: 0,
                params_binary: 0,
                output: (c, size, size),
            });
        }
    }
    let f = cfg.final_width();
    layers.push(LayerCost {
        name: "global_pool".into(),
        float_ops: elems(f, size),
        binary_ops: 0,
        params_float: 0,
        params_binary: 0,
        output: (f, 1, 1),
    });
    layers.push(LayerCost {
        name: "classifier".into(),
        float_ops: (f * cfg.num_classes) as u64,
        binary_ops: 0,
        params_float: (f * cfg.num_classes + cfg.num_classes) as u64,
        params_binary: 0,
        output: (cfg.num_classes, 1, 1),
    });
    Ok(layers)
}

fn label_of(cfg: &NetworkConfig) -> String {
    format!(
        "MoBiNet {} K={} width={} ({})",
        cfg.variant,
        cfg.k,
        cfg.width_mult,
        match cfg.activation {
            ActivationKind::PRelu => "PReLU",
            ActivationKind::Relu => "ReLU",
        }
    )
}

/// Full report for a built network. Parameter totals are taken from the
/// network's manifest and the size from the actual export.
pub fn count(net: &Network, resolution: usize) -> Result<PerfReport> {
    let cfg = net.config();
    let layers = layer_costs(cfg, resolution)?;
    let bytes = model_io::export_len(net)? as u64;
    let mut report = PerfReport::from_layers(label_of(cfg), resolution, layers, bytes);
    let (mut pf, mut pb) = (0u64, 0u64);
    for e in net.manifest() {
        match e.kind {
            ParamKind::Binary => pb += e.count() as u64,
            _ => pf += e.count() as u64,
        }
    }
    if (pf, pb) != (report.params_float, report.params_binary) {
        return Err(Error::State(format!(
            "closed-form params ({}, {}) disagree with the manifest ({pf}, {pb})",
            report.params_float, report.params_binary
        )));
    }
    report.params_float = pf;
    report.params_binary = pb;
    Ok(report)
}

/// Builds the network described by `cfg` and counts it.
pub fn count_config(cfg: &NetworkConfig, resolution: usize) -> Result<PerfReport> {
    count(&Network::new(cfg, 0)?, resolution)
}

/// Full-precision MobileNet v1 (width 1): stride-2 stem, stride-2
/// depth-wise layers where the schedule downsamples, BN and ReLU after
/// every conv, global pool and a 1024→`classes` FC. Size is f32 weights.
pub fn mobilenet_v1_reference(resolution: usize, classes: usize) -> Result<PerfReport> {
    let mut layers = Vec::new();
    let stem = ConvGeometry::new(3, MOBILENET_V1_STEM, 3, 2, 1, 1)?;
    let mut size = stem.out_extent(resolution)?;
    let elems = |c: usize, s: usize| (c * s * s) as u64;
    let bn_relu = |c: usize, s: usize| 2 * elems(c, s);
    layers.push(LayerCost {
        name: "conv1".into(),
        float_ops: stem.macs(resolution, resolution)? + bn_relu(stem.out_c, size),
        binary_ops: 0,
        params_float: conv_params(&stem) + 2 * stem.out_c as u64,
        params_binary: 0,
        output: (stem.out_c, size, size),
    });
    let mut c = MOBILENET_V1_STEM;
    for (i, &(out, down)) in MOBILENET_V1_SCHEDULE.iter().enumerate() {
        let dw = ConvGeometry::new(c, c, 3, if down { 2 } else { 1 }, 1, c)?;
        let input = size;
        size = dw.out_extent(input)?;
        layers.push(LayerCost {
            name: format!("dw{}", i + 1),
            float_ops: dw.macs(input, input)? + bn_relu(c, size),
            binary_ops: 0,
            params_float: conv_params(&dw) + 2 * c as u64,
            params_binary: 0,
            output: (c, size, size),
        });
        let pw = ConvGeometry::new(c, out, 1, 1, 0, 1)?;
        layers.push(LayerCost {
            name: format!("pw{}", i + 1),
            float_ops: pw.macs(size, size)? + bn_relu(out, size),
            binary_ops: 0,
            params_float: conv_params(&pw) + 2 * out as u64,
            params_binary: 0,
            output: (out, size, size),
        });
        c = out;
    }
    layers.push(LayerCost {
        name: "global_pool".into(),
        float_ops: elems(c, size),
        binary_ops: 0,
        params_float: 0,
        params_binary: 0,
        output: (c, 1, 1),
    });
    layers.push(LayerCost {
        name: "fc".into(),
        float_ops: (c * classes) as u64,
        binary_ops: 0,
        params_float: (c * classes + classes) as u64,
        params_binary: 0,
        output: (classes, 1, 1),
    });
    let params: u64 = layers.iter().map(|l| l.params_float).sum();
    Ok(PerfReport::from_layers(
        "MobileNet v1 (float)".into(),
        resolution,
        layers,
        4 * params,
    ))
}

/// Effective FLOPs of `cfg` for each K in `ks`, everything else fixed.
pub fn k_sweep(cfg: &NetworkConfig, ks: &[u32], resolution: usize) -> Result<Vec<(u32, f64)>> {
    ks.iter()
        .map(|&k| {
            let c = NetworkConfig { k, ..cfg.clone() };
            let layers = layer_costs(&c, resolution)?;
            let f = layers.iter().map(|l| l.float_ops).sum();
            let b = layers.iter().map(|l| l.binary_ops).sum();
            Ok((k, effective_flops(f, b)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKernel {
    /// im2col + sgemm on full-precision operands.
    FloatConv,
    /// Sign, pack and xnor-popcount.
    BinaryConv,
}

impl BenchKernel {
    pub fn name(self) -> &'static str {
        match self {
            Self::FloatConv => "float",
            Self::BinaryConv => "binary",
        }
    }
}

impl std::str::FromStr for BenchKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::FloatConv),
            "binary" => Ok(Self::BinaryConv),
            _ => Err(Error::config(format!("unknown kernel `{s}` (float, binary)"))),
        }
    }
}

/// One convolution problem: `channels → channels`, `size × size` input,
/// batch 1, stride 1, same padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub k: Option<u32>,
}

impl BenchCase {
    pub fn dense(channels: usize, size: usize, kernel: usize) -> Self {
        Self {
            channels,
            size,
            kernel,
            k: None,
        }
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        let groups = match self.k {
            Some(k) => KDependency::new(k, self.channels)?.groups(),
            None => 1,
        };
        ConvGeometry::new(self.channels, self.channels, self.kernel, 1, self.kernel / 2, groups)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchStats {
    pub kernel: BenchKernel,
    pub case: BenchCase,
    pub reps: usize,
    pub median_ns: u64,
    pub min_ns: u64,
    pub macs: u64,
    /// Convolutions per second at the median.
    pub throughput: f64,
    /// Effective FLOPs of one call (binary MACs discounted) per second.
    pub effective_flops_per_s: f64,
}

/// Times `reps` calls of each kernel on `case` with seeded inputs and
/// weights, on the calling thread only. Repetitions of the kernels are
/// interleaved so that machine noise hits them alike.
pub fn bench(kernels: &[BenchKernel], case: BenchCase, reps: usize, seed: u64) -> Result<Vec<BenchStats>> {
    if reps == 0 {
        return Err(Error::config("bench needs at least one repetition"));
    }
    let geom = case.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = geom.in_c * case.size * case.size;
    let input = FloatTensor::from_vec(
        vec![1, geom.in_c, case.size, case.size],
        (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let n_w: usize = geom.weight_shape().iter().product();
    let weight = FloatTensor::from_vec(
        geom.weight_shape(),
        (0..n_w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let layer = BinaryConvLayer::new(geom, weight.clone())?;
    let run = |kernel: BenchKernel| match kernel {
        BenchKernel::FloatConv => float_conv(&input, &weight, &geom),
        BenchKernel::BinaryConv => binary_conv(&input, &layer),
    };
    for &k in kernels {
        run(k)?;
    }
    let mut times = vec![Vec::with_capacity(reps); kernels.len()];
    for _ in 0..reps {
        for (&k, t_k) in kernels.iter().zip(&mut times) {
            let t = Instant::now();
            std::hint::black_box(run(k)?);
            t_k.push(t.elapsed().as_nanos() as u64);
        }
    }
    let macs = geom.macs(case.size, case.size)?;
    let stats = kernels
        .iter()
        .zip(times)
        .map(|(&kernel, mut times)| {
            times.sort_unstable();
            let median_ns = times[reps / 2].max(1);
            let eff = match kernel {
                BenchKernel::FloatConv => macs as f64,
                BenchKernel::BinaryConv => macs as f64 / BINARY_DISCOUNT,
            };
            let secs = median_ns as f64 * 1e-9;
            BenchStats {
                kernel,
                case,
                reps,
                median_ns,
                min_ns: times[0],
                macs,
                throughput: 1.0 / secs,
                effective_flops_per_s: eff / secs,
            }
        })
        .collect();
    Ok(stats)
}

pub const BENCH_CSV_HEADER: &str =
    "kernel,channels,size,kernel_size,groups,reps,median_ns,min_ns,macs,throughput,effective_flops_per_s";

pub fn bench_csv_row(s: &BenchStats) -> String {
    let groups = s.case.geometry().map(|g| g.groups).unwrap_or(0);
    format!(
        "{},{},{},{},{},{},{},{},{},{:.3},{:.3e}",
        s.kernel.name(),
        s.case.channels,
        s.case.size,
        s.case.kernel,
        groups,
        s.reps,
        s.median_ns,
        s.min_ns,
        s.macs,
        s.throughput,
        s.effective_flops_per_s
    )
}

pub fn bench_table(stats: &[BenchStats]) -> String {
    let mut s = format!(
        "{:<7} {:>8} {:>5} {:>3} {:>7} {:>12} {:>12} {:>12} {:>14}\n",
        "kernel", "channels", "size", "k", "groups", "median ns", "min ns", "calls/s", "eff. FLOP/s"
    );
    for b in stats {
        let groups = b.case.geometry().map(|g| g.groups).unwrap_or(0);
        let _ = writeln!(
            s,
            "{:<7} {:>8} {:>5} {:>3} {:>7} {:>12} {:>12} {:>12.1} {:>14.3e}",
            b.kernel.name(),
            b.case.channels,
            b.case.size,
            b.case.kernel,
            groups,
            b.median_ns,
            b.min_ns,
            b.throughput,
            b.effective_flops_per_s
        );
    }
    s
}

/// `(float_ops, binary_ops)` of one block whose input is `size × size`.
pub fn block_costs(block: &BlockConfig, size: usize) -> Result<(u64, u64)> {
    let layout = block.layout()?;
    let (mut f, mut b, mut s) = (0u64, 0u64, size);
    for (j, seg) in layout.segments.iter().enumerate() {
        if layout.pool_after == Some(j) {
            s /= 2;
            f += (seg.in_c * s * s) as u64;
        }
        b += seg.geometry()?.macs(s, s)?;
        f += 2 * (seg.out_c * s * s) as u64;
    }
    Ok((f, b))
}
