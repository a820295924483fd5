//! Binary conv segments and the four block topologies.
//!
//! A segment is `sign → binary conv → PReLU → batch norm`. Blocks chain
//! segments and add identity skips around every segment whose input and
//! output shapes match:
//!
//! | variant | stages |
//! |---------|--------|
//! | vanilla | dw → [pool] → pw |
//! | pre     | pre+x → dw+x → [pool] → pw(+x if in = out) |
//! | mid     | dw+x → [pool] → mid+x → pw(+x if in = out) |
//! | post    | dw+x → [pool] → pw → post+x |
//!
//! `dw` is the 3×3 grouped conv with `in_c / 2^K` groups, `pw` the dense
//! 1×1 in→out conv, and `pre`/`mid`/`post` the extra dense 1×1 conv. When a
//! block downsamples, a 2×2/2 average pool follows the depth-wise segment.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::conv::{
    avg_pool, avg_pool_backward, binary_conv, binary_conv_backward, BinaryConvLayer, ConvGeometry, KDependency,
};
use crate::error::{Error, Result};
use crate::layers::{kaiming_uniform, Activation, ActivationKind, BatchNorm};
use crate::param::{join, Parameterized, SlotMut, SlotRef};
use crate::tensor::FloatTensor;

/// Bound on latent binary weights, also applied after every update.
/// Initial BN scale of segments that carry an identity skip. Starting the
/// residual branches at zero makes every block an identity map at init;
/// with unit scale, single sign flips cascade through the stack and a
/// deep binary net cannot fit even one batch.
pub const SKIP_BRANCH_GAMMA: f32 = 0.0;

pub const LATENT_CLAMP: f32 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockVariant {
    Vanilla,
    Pre,
    Mid,
    Post,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] = [Self::Vanilla, Self::Pre, Self::Mid, Self::Post];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Pre => "pre",
            Self::Mid => "mid",
            Self::Post => "post",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Self::Vanilla),
            "pre" => Ok(Self::Pre),
            "mid" => Ok(Self::Mid),
            "post" => Ok(Self::Post),
            other => Err(Error::config(format!("unknown block variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub in_c: usize,
    pub out_c: usize,
    pub k: u32,
    pub downsample: bool,
    pub activation: ActivationKind,
}

/// Shape of one segment inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub name: &'static str,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub groups: usize,
    pub skip: bool,
}

impl SegmentSpec {
    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(self.in_c, self.out_c, self.kernel, 1, self.kernel / 2, self.groups)
    }

    pub fn param_count(&self, activation: ActivationKind) -> usize {
        let conv = self.out_c * (self.in_c / self.groups) * self.kernel * self.kernel;
        let act = match activation {
            ActivationKind::PRelu => self.out_c,
            ActivationKind::Relu => 0,
        };
        conv + act + 2 * self.out_c
    }
}

/// Layout of a block: segments in order, with the pool after `pool_after`
/// segments when the block downsamples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub segments: Vec<SegmentSpec>,
    pub pool_after: Option<usize>,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.out_c == 0 {
            return Err(Error::config("block channels must be positive"));
        }
        KDependency::new(self.k, self.in_c).map(|_| ())
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        self.validate()?;
        let (i, o) = (self.in_c, self.out_c);
        let groups = KDependency::new(self.k, i)?.groups();
        let seg = |name, in_c, out_c, kernel, groups, skip| SegmentSpec {
            name,
            in_c,
            out_c,
            kernel,
            groups,
            skip,
        };
        let dw = |skip| seg("dw", i, i, 3, groups, skip);
        let pw = |skip| seg("pw", i, o, 1, 1, skip);
        let same = i == o;
        let (segments, dw_index) = match self.variant {
            BlockVariant::Vanilla => (vec![dw(false), pw(false)], 0),
            BlockVariant::Pre => (vec![seg("pre", i, i, 1, 1, true), dw(true), pw(same)], 1),
            BlockVariant::Mid => (vec![dw(true), seg("mid", i, i, 1, 1, true), pw(same)], 0),
            BlockVariant::Post => (vec![dw(true), pw(false), seg("post", o, o, 1, 1, true)], 0),
        };
        Ok(BlockLayout {
            segments,
            pool_after: self.downsample.then_some(dw_index + 1),
        })
    }

    /// Exact trainable parameter count of the block.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .layout()?
            .segments
            .iter()
            .map(|s| s.param_count(self.activation))
            .sum())
    }
}

/// `sign → binary conv → activation → batch norm`.
#[derive(Clone, Debug)]
pub struct ConvSegment {
    conv: BinaryConvLayer,
    conv_grad: Vec<f32>,
    act: Activation,
    bn: BatchNorm,
    input: Option<FloatTensor>,
}

impl ConvSegment {
    pub fn new(geom: ConvGeometry, activation: ActivationKind, rng: &mut impl Rng) -> Result<Self> {
        let mut latent = kaiming_uniform(rng, &geom.weight_shape(), geom.filter_len());
        latent
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(-LATENT_CLAMP, LATENT_CLAMP));
        Self::from_layer(BinaryConvLayer::new(geom, latent)?, activation)
    }

    pub fn from_layer(conv: BinaryConvLayer, activation: ActivationKind) -> Result<Self> {
        let out_c = conv.geometry().out_c;
        Ok(Self {
            conv_grad: vec![0.0; conv.latent().len()],
            conv,
            act: Activation::new(activation, out_c),
            bn: BatchNorm::new(out_c),
            input: None,
        })
    }

    pub fn conv(&self) -> &BinaryConvLayer {
        &self.conv
    }

    pub fn conv_mut(&mut self) -> &mut BinaryConvLayer {
        &mut self.conv
    }

    pub fn conv_grad(&self) -> &[f32] {
        &self.conv_grad
    }

    pub fn activation_mut(&mut self) -> &mut Activation {
        &mut self.act
    }

    pub fn bn_mut(&mut self) -> &mut BatchNorm {
        &mut self.bn
    }

    pub fn sync(&mut self) -> Result<()> {
        self.conv.sync()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let y = binary_conv(x, &self.conv)?;
        let y = self.act.forward(&y)?;
        self.bn.forward(&y)
    }

    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        self.conv.sync()?;
        let y = binary_conv(x, &self.conv)?;
        let y = self.act.forward_train(&y)?;
        let y = self.bn.forward_train(&y)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::State("segment backward without forward".into()))?;
        let g = self.bn.backward(grad)?;
        let g = self.act.backward(&g)?;
        let grads = binary_conv_backward(&x, &self.conv, &g)?;
        self.conv_grad
            .iter_mut()
            .zip(grads.grad_latent.data())
            .for_each(|(a, b)| *a += b);
        Ok(grads.grad_input)
    }
}

impl Parameterized for ConvSegment {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&join(prefix, "conv"), SlotRef::Binary(&self.conv));
        self.act.visit(prefix, f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(
            &join(prefix, "conv"),
            SlotMut::Binary {
                layer: &mut self.conv,
                grad: &mut self.conv_grad,
            },
        );
        self.act.visit_mut(prefix, f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Segment {
        name: &'static str,
        seg: Box<ConvSegment>,
        skip: bool,
    },
    Pool {
        input_shape: Option<Vec<usize>>,
    },
}

/// A composable forward/backward unit built from a [`BlockConfig`].
#[derive(Clone, Debug)]
pub struct Block {
    cfg: BlockConfig,
    stages: Vec<Stage>,
}

pub fn build_block(cfg: BlockConfig, rng: &mut impl Rng) -> Result<Block> {
    let layout = cfg.layout()?;
    let mut stages = Vec::new();
    for (i, spec) in layout.segments.iter().enumerate() {
        if layout.pool_after == Some(i) {
            stages.push(Stage::Pool { input_shape: None });
        }
        let mut seg = Box::new(ConvSegment::new(spec.geometry()?, cfg.activation, rng)?);
        if spec.skip {
            seg.bn_mut().gamma_mut().fill(SKIP_BRANCH_GAMMA);
        }
        stages.push(Stage::Segment {
            name: spec.name,
            seg,
            skip: spec.skip,
        });
    }
    if layout.pool_after == Some(layout.segments.len()) {
        stages.push(Stage::Pool { input_shape: None });
    }
    Ok(Block { cfg, stages })
}

impl Block {
    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    /// Segments in forward order with their names and skip flags.
    pub fn segments(&self) -> impl Iterator<Item = (&'static str, &ConvSegment, bool)> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Segment { name, seg, skip } => Some((*name, seg.as_ref(), *skip)),
            Stage::Pool { .. } => None,
        })
    }

    pub fn segments_mut(&mut self) -> impl Iterator<Item = &mut ConvSegment> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Segment { seg, .. } => Some(seg.as_mut()),
            Stage::Pool { .. } => None,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segments().count()
    }

    pub fn sync(&mut self) -> Result<()> {
        self.segments_mut().try_for_each(|s| s.sync())
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let mut x = x.clone();
        for stage in &self.stages {
            x = match stage {
                Stage::Segment { seg, skip, .. } => {
                    let y = seg.forward(&x)?;
                    if *skip {
                        y.add(&x)?
                    } else {
                        y
                    }
                }
                Stage::Pool { .. } => avg_pool(&x, 2, 2)?,
            };
        }
        Ok(x)
    }

    pub fn forward_train(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        let mut x = x.clone();
        for stage in &mut self.stages {
            x = match stage {
                Stage::Segment { seg, skip, .. } => {
                    let y = seg.forward_train(&x)?;
                    if *skip {
                        y.add(&x)?
                    } else {
                        y
                    }
                }
                Stage::Pool { input_shape } => {
                    *input_shape = Some(x.shape().to_vec());
                    avg_pool(&x, 2, 2)?
                }
            };
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let mut g = grad.clone();
        for stage in self.stages.iter_mut().rev() {
            g = match stage {
                Stage::Segment { seg, skip, .. } => {
                    let gx = seg.backward(&g)?;
                    if *skip {
                        gx.add(&g)?
                    } else {
                        gx
                    }
                }
                Stage::Pool { input_shape } => {
                    let shape = input_shape
                        .take()
                        .ok_or_else(|| Error::State("pool backward without forward".into()))?;
                    avg_pool_backward(&shape, &g, 2, 2)?
                }
            };
        }
        Ok(g)
    }
}

impl Parameterized for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        for (name, seg, _) in self.segments() {
            seg.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        for stage in &mut self.stages {
            if let Stage::Segment { name, seg, .. } = stage {
                seg.visit_mut(&join(prefix, name), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: BlockVariant, in_c: usize, out_c: usize, k: u32, downsample: bool) -> BlockConfig {
        BlockConfig {
            variant,
            in_c,
            out_c,
            k,
            downsample,
            activation: ActivationKind::PRelu,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> FloatTensor {
        let n = shape.iter().product();
        FloatTensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
    }

    #[test]
    fn segment_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in BlockVariant::ALL {
            let b = build_block(cfg(v, 8, 8, 1, false), &mut rng).unwrap();
            let expected = if v == BlockVariant::Vanilla { 2 } else { 3 };
            assert_eq!(b.segment_count(), expected, "{v}");
        }
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input(&mut rng, &[2, 8, 4, 4]);
        for v in BlockVariant::ALL {
            let b = build_block(cfg(v, 8, 8, 2, false), &mut rng).unwrap();
            assert_eq!(b.forward(&x).unwrap().shape(), &[2, 8, 4, 4]);
            let b = build_block(cfg(v, 8, 16, 2, true), &mut rng).unwrap();
            assert_eq!(b.forward(&x).unwrap().shape(), &[2, 16, 2, 2]);
        }
    }

    #[test]
    fn incompatible_k_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            build_block(cfg(BlockVariant::Mid, 12, 12, 3, false), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in BlockVariant::ALL {
            for (i, o, k) in [(8, 8, 0), (8, 16, 1), (16, 32, 3), (4, 4, 2)] {
                for act in [ActivationKind::PRelu, ActivationKind::Relu] {
                    let c = BlockConfig {
                        activation: act,
                        ..cfg(v, i, o, k, false)
                    };
                    let b = build_block(c, &mut rng).unwrap();
                    let mut counted = 0;
                    b.visit("", &mut |_, slot| {
                        if slot.kind().is_trainable() {
                            counted += slot.values().len();
                        }
                    });
                    assert_eq!(counted, c.param_count().unwrap(), "{v} {i}->{o} K={k} {act:?}");
                }
            }
        }
    }

    /// Forward of the block when every conv contributes nothing: the skip
    /// structure alone.
    fn skip_only_reduction(c: &BlockConfig, x: &FloatTensor) -> FloatTensor {
        let layout = c.layout().unwrap();
        let mut cur = x.clone();
        for (i, s) in layout.segments.iter().enumerate() {
            if layout.pool_after == Some(i) {
                cur = avg_pool(&cur, 2, 2).unwrap();
            }
            let [n, _, h, w] = cur.dims4().unwrap();
            let zero = FloatTensor::zeros(&[n, s.out_c, h, w]);
            cur = if s.skip { cur } else { zero };
        }
        cur
    }

    #[test]
    fn vanishing_convs_reduce_to_skip_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in BlockVariant::ALL {
            for (o, ds) in [(8, false), (8, true), (16, false)] {
                let c = cfg(v, 8, o, 1, ds);
                let mut b = build_block(c, &mut rng).unwrap();
                for seg in b.segments_mut() {
                    seg.conv_mut()
                        .latent_mut()
                        .data_mut()
                        .iter_mut()
                        .for_each(|w| *w *= 1e-8);
                }
                // slope 1 makes the activation the identity
                b.visit_mut("", &mut |name, slot| {
                    if let SlotMut::Float { value, .. } = slot {
                        if name.ends_with("slope") {
                            value.data_mut().fill(1.0);
                        }
                    }
                });
                b.sync().unwrap();
                let x = random_input(&mut rng, &[2, 8, 4, 4]);
                let y = b.forward(&x).unwrap();
                let expected = skip_only_reduction(&c, &x);
                assert_eq!(y.shape(), expected.shape());
                for (a, e) in y.data().iter().zip(expected.data()) {
                    assert!((a - e).abs() < 1e-4, "{v} {o} {ds}: {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn gradient_flows_through_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Post-blocks route the dw output through the skip-less pw segment,
        // so only pre/mid keep an end-to-end identity path.
        for v in [BlockVariant::Pre, BlockVariant::Mid] {
            let mut b = build_block(cfg(v, 8, 8, 1, false), &mut rng).unwrap();
            // saturated input: the first sign's straight-through mask is 0
            let x = FloatTensor::full(&[2, 8, 3, 3], 5.0);
            b.forward_train(&x).unwrap();
            let g = FloatTensor::full(&[2, 8, 3, 3], 1.0);
            let gx = b.backward(&g).unwrap();
            assert!(gx.data().iter().any(|&v| v != 0.0), "{v}");
        }
    }
}
