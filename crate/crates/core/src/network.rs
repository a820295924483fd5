//! Full networks: float stem, binary block stack, global pooling and a
//! float classifier.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{build_block, Block, BlockConfig, BlockVariant};
use crate::config::KeyValues;
use crate::conv::{avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, ConvGeometry, KDependency};
use crate::error::{Error, Result};
use crate::layers::{Activation, ActivationKind, BatchNorm, FloatConv, Linear};
use crate::param::{join, ParamKind, Parameterized, SlotMut, SlotRef};
use crate::tensor::FloatTensor;

/// MobileNet v1 block outputs; `true` marks the stride-2 positions.
pub const MOBILENET_V1_SCHEDULE: [(usize, bool); 13] = [
    (64, false),
    (128, true),
    (128, false),
    (256, true),
    (256, false),
    (512, true),
    (512, false),
    (512, false),
    (512, false),
    (512, false),
    (512, false),
    (1024, true),
    (1024, false),
];

pub const MOBILENET_V1_STEM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: BlockVariant,
    pub k: u32,
    pub width_mult: f32,
    pub num_classes: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub activation: ActivationKind,
    /// Unscaled stem width.
    pub stem_channels: usize,
    /// 2: strided stem conv. 1: stride-1 stem conv followed by a 2x2 pool.
    pub stem_stride: usize,
    /// Unscaled `(out_channels, downsample)` per block.
    pub schedule: Vec<(usize, bool)>,
}

impl Default for NetworkConfig {
    /// Full-width ImageNet layout: Mid-block, K = 0, 224 px, 1000 classes.
    fn default() -> Self {
        Self {
            variant: BlockVariant::Mid,
            k: 0,
            width_mult: 1.0,
            num_classes: 1000,
            resolution: 224,
            in_channels: 3,
            activation: ActivationKind::PRelu,
            stem_channels: MOBILENET_V1_STEM,
            stem_stride: 2,
            schedule: MOBILENET_V1_SCHEDULE.to_vec(),
        }
    }
}

/// Keys accepted in a network config file.
pub const NETWORK_KEYS: [&str; 10] = [
    "variant",
    "k",
    "width_mult",
    "classes",
    "resolution",
    "in_channels",
    "activation",
    "stem_channels",
    "stem_stride",
    "schedule",
];

impl NetworkConfig {
    /// The desk preset: width 0.25, 32 px, 10 classes, single channel input.
    pub fn desk() -> Self {
        Self {
            variant: BlockVariant::Mid,
            k: 2,
            width_mult: 0.25,
            num_classes: 10,
            resolution: 32,
            in_channels: 1,
            ..Self::default()
        }
    }

    /// Scales a base width and rounds to the nearest positive multiple of `2^K`.
    pub fn scale_channels(&self, base: usize) -> usize {
        let unit = 1usize << self.k.min(20);
        let scaled = base as f64 * self.width_mult as f64;
        let units = (scaled / unit as f64).round().max(1.0) as usize;
        units * unit
    }

    pub fn stem_width(&self) -> usize {
        self.scale_channels(self.stem_channels)
    }

    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        let mut in_c = self.stem_width();
        self.schedule
            .iter()
            .map(|&(base, downsample)| {
                let out_c = self.scale_channels(base);
                let cfg = BlockConfig {
                    variant: self.variant,
                    in_c,
                    out_c,
                    k: self.k,
                    downsample,
                    activation: self.activation,
                };
                cfg.validate()?;
                in_c = out_c;
                Ok(cfg)
            })
            .collect()
    }

    pub fn final_width(&self) -> usize {
        self.schedule
            .last()
            .map_or_else(|| self.stem_width(), |&(c, _)| self.scale_channels(c))
    }

    pub fn stem_geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(self.in_channels, self.stem_width(), 3, self.stem_stride, 1, 1)
    }

    pub fn stem_pooled(&self) -> bool {
        self.stem_stride == 1
    }

    /// Spatial extent entering each block for input `resolution`.
    pub fn block_input_sizes(&self, resolution: usize) -> Result<Vec<usize>> {
        let mut size = self.stem_geometry()?.out_extent(resolution)?;
        if self.stem_pooled() {
            if size % 2 != 0 {
                return Err(Error::config(format!(
                    "stem pool needs an even map, resolution {resolution} gives {size}"
                )));
            }
            size /= 2;
        }
        let mut sizes = Vec::with_capacity(self.schedule.len());
        for (i, &(_, downsample)) in self.schedule.iter().enumerate() {
            sizes.push(size);
            if downsample {
                if size < 2 || size % 2 != 0 {
                    return Err(Error::config(format!(
                        "block {i} downsamples a {size}x{size} map; resolution {resolution} is incompatible"
                    )));
                }
                size /= 2;
            }
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult <= 1.0) {
            return Err(Error::config(format!("width_mult {} outside (0, 1]", self.width_mult)));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.resolution == 0 {
            return Err(Error::config("classes, in_channels and resolution must be positive"));
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::config(format!(
                "stem_stride must be 1 or 2, got {}",
                self.stem_stride
            )));
        }
        if self.schedule.is_empty() {
            return Err(Error::config("schedule must list at least one block"));
        }
        KDependency::new(self.k, self.stem_width())?;
        self.block_configs()?;
        self.block_input_sizes(self.resolution)?;
        Ok(())
    }

    /// Exact trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let act = |c: usize| match self.activation {
            ActivationKind::PRelu => c,
            ActivationKind::Relu => 0,
        };
        let stem = self.stem_geometry()?;
        let stem_c = stem.out_c;
        let mut total = stem.out_c * stem.filter_len() + 2 * stem_c + act(stem_c);
        for cfg in self.block_configs()? {
            total += cfg.param_count()?;
        }
        total += self.final_width() * self.num_classes + self.num_classes;
        Ok(total)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("invalid {what} `{value}`"));
        match key {
            "variant" => self.variant = value.parse()?,
            "k" => self.k = value.parse().map_err(|_| bad("k"))?,
            "width_mult" => self.width_mult = value.parse().map_err(|_| bad("width_mult"))?,
            "classes" => self.num_classes = value.parse().map_err(|_| bad("classes"))?,
            "resolution" => self.resolution = value.parse().map_err(|_| bad("resolution"))?,
            "in_channels" => self.in_channels = value.parse().map_err(|_| bad("in_channels"))?,
            "stem_channels" => self.stem_channels = value.parse().map_err(|_| bad("stem_channels"))?,
            "stem_stride" => self.stem_stride = value.parse().map_err(|_| bad("stem_stride"))?,
            "activation" => {
                self.activation = match value.to_ascii_lowercase().as_str() {
                    "prelu" => ActivationKind::PRelu,
                    "relu" => ActivationKind::Relu,
                    _ => return Err(bad("activation")),
                }
            }
            "schedule" => self.schedule = parse_schedule(value)?,
            _ => return Err(Error::config(format!("unknown network key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in kv.iter() {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let act = match self.activation {
            ActivationKind::PRelu => "prelu",
            ActivationKind::Relu => "relu",
        };
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "width_mult = {}", self.width_mult);
        let _ = writeln!(s, "classes = {}", self.num_classes);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "activation = {act}");
        let _ = writeln!(s, "stem_channels = {}", self.stem_channels);
        let _ = writeln!(s, "stem_stride = {}", self.stem_stride);
        let _ = writeln!(s, "schedule = {}", format_schedule(&self.schedule));
        s
    }
}

/// `64, 128/2, 128`, where a `/2` suffix marks a downsampling block.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, bool)>> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let (num, downsample) = match item.strip_suffix("/2") {
                Some(n) => (n.trim(), true),
                None => (item, false),
            };
            num.parse::<usize>()
                .ok()
                .filter(|&c| c > 0)
                .map(|c| (c, downsample))
                .ok_or_else(|| Error::config(format!("invalid schedule entry `{item}`")))
        })
        .collect()
}

pub fn format_schedule(schedule: &[(usize, bool)]) -> String {
    schedule
        .iter()
        .map(|&(c, d)| if d { format!("{c}/2") } else { c.to_string() })
        .collect::<Vec<_>>()
        .join(",")
}

/// One row of the parameter manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ManifestEntry {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    stem: FloatConv,
    stem_bn: BatchNorm,
    stem_act: Activation,
    blocks: Vec<Block>,
    classifier: Linear,
    stem_pool_shape: Option<Vec<usize>>,
    pooled_shape: Option<Vec<usize>>,
}

pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    Network::new(cfg, seed)
}

impl Network {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_geom = cfg.stem_geometry()?;
        let stem = FloatConv::new(stem_geom, &mut rng);
        let blocks = cfg
            .block_configs()?
            .into_iter()
            .map(|b| build_block(b, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(cfg.final_width(), cfg.num_classes, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_bn: BatchNorm::new(stem_geom.out_c),
            stem_act: Activation::new(cfg.activation, stem_geom.out_c),
            blocks,
            classifier,
            stem_pool_shape: None,
            pooled_shape: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn stem(&self) -> &FloatConv {
        &self.stem
    }

    /// Re-derives binary weights and scales of every block.
    pub fn sync(&mut self) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.sync())
    }

    fn check_input(&self, x: &FloatTensor) -> Result<()> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Features entering the classifier, `(n, final_width)`.
    pub fn features(&self, x: &FloatTensor) -> Result<FloatTensor> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?;
        h = self.stem_bn.forward(&h)?;
        h = self.stem_act.forward(&h)?;
        if self.cfg.stem_pooled() {
            h = avg_pool(&h, 2, 2)?;
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        global_avg_pool(&h)
    }

    /// Inference-mode forward: running BN statistics, no state changes.
    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let f = self.features(x)?;
        self.classifier.forward(&f)
    }

    /// Training-mode forward; caches what [`Network::backward`] needs.
    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        self.check_input(x)?;
        let mut h = self.stem.forward_train(x)?;
        h = self.stem_bn.forward_train(&h)?;
        h = self.stem_act.forward_train(&h)?;
        if self.cfg.stem_pooled() {
            self.stem_pool_shape = Some(h.shape().to_vec());
            h = avg_pool(&h, 2, 2)?;
        }
        for block in &mut self.blocks {
            h = block.forward_train(&h)?;
        }
        self.pooled_shape = Some(h.shape().to_vec());
        let f = global_avg_pool(&h)?;
        self.classifier.forward_train(&f)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &FloatTensor) -> Result<FloatTensor> {
        let shape = self
            .pooled_shape
            .take()
            .ok_or_else(|| Error::State("network backward without forward".into()))?;
        let g = self.classifier.backward(grad_logits)?;
        let mut g = global_avg_pool_backward(&shape, &g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        if let Some(shape) = self.stem_pool_shape.take() {
            g = avg_pool_backward(&shape, &g, 2, 2)?;
        }
        g = self.stem_act.backward(&g)?;
        g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)
    }

    /// Trainable tensors in traversal order, each flagged float or binary.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        self.visit("", &mut |name, slot| {
            if slot.kind().is_trainable() {
                out.push(ManifestEntry {
                    name: name.to_string(),
                    shape: slot.shape().to_vec(),
                    kind: slot.kind(),
                });
            }
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(ManifestEntry::count).sum()
    }

    /// Clamps every latent binary weight into `[-bound, bound]`.
    pub fn clamp_latent(&mut self, bound: f32) {
        self.visit_mut("", &mut |_, slot| {
            if let SlotMut::Binary { layer, .. } = slot {
                layer
                    .latent_mut()
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = w.clamp(-bound, bound));
            }
        });
    }
}

impl Parameterized for Network {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        self.stem_act.visit(&join(prefix, "stem"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("block{i:02}")), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.stem.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        self.stem_act.visit_mut(&join(prefix, "stem"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("block{i:02}")), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
