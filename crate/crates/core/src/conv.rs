//! Convolution and pooling kernels.
//!
//! Float convolution goes through im2col + sgemm over the whole batch.
//! Binary convolution packs one row per output pixel spanning
//! (channels-in-group × k × k), LSB-first in that order, and reduces each
//! row against the packed filter with xnor-popcount. Binary inputs are
//! padded with −1 (bit 0) after the sign.

use crate::binarize::{mean_abs, sign, weight_gradient_into, STE_THRESHOLD};
use crate::error::{Error, Result};
use crate::tensor::{dot_words, dot_words_block, words_for, BitTensor, FloatTensor, WORD_BITS};

/// Padding value of the binarized input plane.
pub const BINARY_PAD: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if in_c == 0 || out_c == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::dim("convolution extents must be positive"));
        }
        if !in_c.is_multiple_of(groups) || !out_c.is_multiple_of(groups) {
            return Err(Error::dim(format!(
                "channels {in_c}->{out_c} not divisible by {groups} groups"
            )));
        }
        Ok(Self {
            in_c,
            out_c,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Elements per filter, `k·k·(in_c/groups)`.
    pub fn filter_len(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn out_extent(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::dim(format!(
                "spatial extent {size} (+2·{}) smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn check_input(&self, input: &FloatTensor) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[1] != self.in_c {
            return Err(Error::dim(format!(
                "input has {} channels, layer expects {}",
                dims[1], self.in_c
            )));
        }
        Ok(dims)
    }

    fn check_weight(&self, weight: &FloatTensor) -> Result<()> {
        if weight.shape() != self.weight_shape().as_slice() {
            return Err(Error::dim(format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok(())
    }

    /// Multiply-accumulates for one sample of `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let oh = self.out_extent(h)?;
        let ow = self.out_extent(w)?;
        Ok((oh * ow * self.out_c * self.filter_len()) as u64)
    }
}

/// Group structure where each group mixes `2^K` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KDependency {
    pub k: u32,
    pub channels: usize,
}

impl KDependency {
    pub fn new(k: u32, channels: usize) -> Result<Self> {
        let width = 1usize
            .checked_shl(k)
            .ok_or_else(|| Error::config(format!("K = {k} is too large")))?;
        if channels == 0 || !channels.is_multiple_of(width) {
            return Err(Error::config(format!(
                "2^K = {width} does not divide {channels} channels"
            )));
        }
        Ok(Self { k, channels })
    }

    /// `c / 2^K`; K = 0 is depth-wise, `2^K = c` is dense.
    pub fn groups(&self) -> usize {
        self.channels >> self.k
    }
}

/// Output spatial extents of `geom` applied to `[n, c, h, w]`.
fn out_dims(geom: &ConvGeometry, dims: [usize; 4]) -> Result<(usize, usize)> {
    Ok((geom.out_extent(dims[2])?, geom.out_extent(dims[3])?))
}

/// Batch im2col for group `g`: a `[filter_len, n·oh·ow]` row-major matrix.
/// `map` transforms each in-bounds input value; out-of-bounds taps get `pad`.
fn im2col(
    input: &FloatTensor,
    geom: &ConvGeometry,
    g: usize,
    pad: f32,
    map: impl Fn(f32) -> f32,
) -> Result<(Vec<f32>, usize, usize)> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = out_dims(geom, [n, c, h, w])?;
    let k = geom.kernel;
    let cpg = geom.in_per_group();
    let cols = n * oh * ow;
    let mut out = vec![pad; geom.filter_len() * cols];
    let data = input.data();
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for ci in 0..cpg {
        let ch = g * cpg + ci;
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = map(src_row[ix as usize]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, oh, ow))
}

/// Scatter-adds a `[filter_len, n·oh·ow]` column matrix of group `g` back
/// into an NCHW gradient, dropping padded taps.
fn col2im_add(
    cols_grad: &[f32],
    grad_input: &mut [f32],
    dims: [usize; 4],
    geom: &ConvGeometry,
    g: usize,
    oh: usize,
    ow: usize,
) {
    let [n, c, h, w] = dims;
    let k = geom.kernel;
    let cpg = geom.in_per_group();
    let cols = n * oh * ow;
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for ci in 0..cpg {
        let ch = g * cpg + ci;
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &mut grad_input[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m×n] = a[m×k] · b[k×n]` (overwrites `c`). Transposition
/// is expressed through the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: callers pass slices that cover every strided element:
    // `a` spans (m-1)·rsa + (k-1)·csa, `b` spans (k-1)·rsb + (n-1)·csb and
    // `c` holds m·n contiguous row-major values.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies `[og, n·p]` group results into the NCHW output.
fn scatter_group(tmp: &[f32], out: &mut [f32], n: usize, out_c: usize, p: usize, g: usize, og: usize) {
    for o in 0..og {
        let ch = g * og + o;
        for b in 0..n {
            let src = &tmp[o * n * p + b * p..o * n * p + (b + 1) * p];
            out[(b * out_c + ch) * p..(b * out_c + ch + 1) * p].copy_from_slice(src);
        }
    }
}

/// Gathers the group-`g` slice of an NCHW gradient into `[og, n·p]`.
fn gather_group(src: &[f32], n: usize, out_c: usize, p: usize, g: usize, og: usize) -> Vec<f32> {
    let mut tmp = vec![0.0; og * n * p];
    for o in 0..og {
        let ch = g * og + o;
        for b in 0..n {
            tmp[o * n * p + b * p..o * n * p + (b + 1) * p]
                .copy_from_slice(&src[(b * out_c + ch) * p..(b * out_c + ch + 1) * p]);
        }
    }
    tmp
}

fn conv_with_pad(
    input: &FloatTensor,
    weight: &[f32],
    geom: &ConvGeometry,
    pad: f32,
    map: impl Fn(f32) -> f32 + Copy,
) -> Result<FloatTensor> {
    let [n, _, _, _] = geom.check_input(input)?;
    let (og, flen) = (geom.out_per_group(), geom.filter_len());
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for g in 0..geom.groups {
        let (cols, oh, ow) = im2col(input, geom, g, pad, map)?;
        let p = oh * ow;
        if out.is_empty() {
            out = vec![0.0; n * geom.out_c * p];
            shape = vec![n, geom.out_c, oh, ow];
        }
        let mut tmp = vec![0.0; og * n * p];
        gemm(
            og,
            flen,
            n * p,
            &weight[g * og * flen..],
            (flen, 1),
            &cols,
            (n * p, 1),
            &mut tmp,
        );
        scatter_group(&tmp, &mut out, n, geom.out_c, p, g, og);
    }
    Ok(FloatTensor::from_vec(shape, out))
}

/// Grouped cross-correlation with zero padding (no bias).
pub fn float_conv(input: &FloatTensor, weight: &FloatTensor, geom: &ConvGeometry) -> Result<FloatTensor> {
    geom.check_weight(weight)?;
    conv_with_pad(input, weight.data(), geom, 0.0, |v| v)
}

/// Returns `(grad_input, grad_weight)` of [`float_conv`].
pub fn float_conv_backward(
    input: &FloatTensor,
    weight: &FloatTensor,
    grad_out: &FloatTensor,
    geom: &ConvGeometry,
) -> Result<(FloatTensor, FloatTensor)> {
    geom.check_weight(weight)?;
    let dims = geom.check_input(input)?;
    let (oh, ow) = out_dims(geom, dims)?;
    let n = dims[0];
    if grad_out.shape() != [n, geom.out_c, oh, ow] {
        return Err(Error::dim(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, geom.out_c, oh, ow]
        )));
    }
    let (og, flen, p) = (geom.out_per_group(), geom.filter_len(), oh * ow);
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_w = vec![0.0; weight.len()];
    for g in 0..geom.groups {
        let (cols, _, _) = im2col(input, geom, g, 0.0, |v| v)?;
        let gout = gather_group(grad_out.data(), n, geom.out_c, p, g, og);
        gemm(
            og,
            n * p,
            flen,
            &gout,
            (n * p, 1),
            &cols,
            (1, n * p),
            &mut grad_w[g * og * flen..(g + 1) * og * flen],
        );
        let mut gcols = vec![0.0; flen * n * p];
        gemm(
            flen,
            og,
            n * p,
            &weight.data()[g * og * flen..],
            (1, flen),
            &gout,
            (n * p, 1),
            &mut gcols,
        );
        col2im_add(&gcols, &mut grad_in, dims, geom, g, oh, ow);
    }
    Ok((
        FloatTensor::from_vec(input.shape().to_vec(), grad_in),
        FloatTensor::from_vec(weight.shape().to_vec(), grad_w),
    ))
}

/// Binary convolution layer: latent float weights plus the derived packed
/// signs and per-filter scales.
#[derive(Clone, Debug)]
pub struct BinaryConvLayer {
    geom: ConvGeometry,
    latent: FloatTensor,
    binary: BitTensor,
    /// The same signs with taps outermost, `(ky, kx, ci)`, one row of
    /// `words_for(filter_len)` words per filter. The packed kernel reads these.
    tap_major: Vec<u64>,
    scales: Vec<f32>,
    in_sync: bool,
    frozen: bool,
}

impl BinaryConvLayer {
    /// Builds a layer from latent weights of shape `(out_c, in_c/groups, k, k)`.
    /// Only stride 1 is supported; downsampling is done by pooling.
    pub fn new(geom: ConvGeometry, latent: FloatTensor) -> Result<Self> {
        if geom.stride != 1 {
            return Err(Error::config("binary convolution supports stride 1 only"));
        }
        geom.check_weight(&latent)?;
        let row_len = geom.filter_len();
        let mut layer = Self {
            geom,
            binary: BitTensor::pack_sign_of(latent.shape().to_vec(), latent.data(), row_len),
            tap_major: Vec::new(),
            scales: vec![0.0; geom.out_c],
            latent,
            in_sync: false,
            frozen: false,
        };
        layer.sync()?;
        Ok(layer)
    }

    /// Inference layer from packed signs and stored scales. The latent
    /// weights become the ±1 values and the scales stay frozen.
    pub fn from_binary(geom: ConvGeometry, binary: BitTensor, scales: Vec<f32>) -> Result<Self> {
        if geom.stride != 1 {
            return Err(Error::config("binary convolution supports stride 1 only"));
        }
        if binary.logical_shape() != geom.weight_shape().as_slice() || binary.row_len() != geom.filter_len() {
            return Err(Error::dim("packed weights do not match the layer geometry"));
        }
        if scales.len() != geom.out_c || scales.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::format("scales must be one positive value per filter"));
        }
        let latent = FloatTensor::from_vec(geom.weight_shape(), binary.to_signs());
        let tap_major = tap_major_signs(&geom, &latent);
        Ok(Self {
            geom,
            latent,
            binary,
            tap_major,
            scales,
            in_sync: true,
            frozen: true,
        })
    }

    /// Re-derives packed signs and scales from the latent weights.
    pub fn sync(&mut self) -> Result<()> {
        if self.in_sync {
            return Ok(());
        }
        let flen = self.geom.filter_len();
        if !self.frozen {
            for (i, filter) in self.latent.data().chunks_exact(flen).enumerate() {
                let alpha = mean_abs(filter);
                if alpha <= 0.0 {
                    return Err(Error::DegenerateFilter { filter: i });
                }
                self.scales[i] = alpha;
            }
        }
        self.binary = BitTensor::pack_sign_of(self.latent.shape().to_vec(), self.latent.data(), flen);
        self.tap_major = tap_major_signs(&self.geom, &self.latent);
        self.in_sync = true;
        Ok(())
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn latent(&self) -> &FloatTensor {
        &self.latent
    }

    /// Mutable latent weights; marks the layer stale.
    pub fn latent_mut(&mut self) -> &mut FloatTensor {
        self.in_sync = false;
        &mut self.latent
    }

    pub fn binary_weights(&self) -> &BitTensor {
        &self.binary
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn is_in_sync(&self) -> bool {
        self.in_sync
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `α_i · sign(W_i)` as dense floats.
    pub fn approx_weights(&self) -> FloatTensor {
        let flen = self.geom.filter_len();
        let data = self
            .latent
            .data()
            .chunks_exact(flen)
            .zip(&self.scales)
            .flat_map(|(f, &a)| f.iter().map(move |&v| a * sign(v)))
            .collect();
        FloatTensor::from_vec(self.latent.shape().to_vec(), data)
    }
}

/// Packs `sign(W)` with bit `(ky·k + kx)·cpg + ci` for tap `(ci, ky, kx)`.
fn tap_major_signs(geom: &ConvGeometry, latent: &FloatTensor) -> Vec<u64> {
    let (k, cpg, flen) = (geom.kernel, geom.in_per_group(), geom.filter_len());
    let wpr = words_for(flen);
    let mut words = vec![0u64; geom.out_c * wpr];
    for (filter, row) in latent.data().chunks_exact(flen).zip(words.chunks_exact_mut(wpr)) {
        for ci in 0..cpg {
            for t in 0..k * k {
                if filter[ci * k * k + t] >= 0.0 {
                    let bit = t * cpg + ci;
                    row[bit / WORD_BITS] |= 1u64 << (bit % WORD_BITS);
                }
            }
        }
    }
    words
}

/// Packs sign-binarized input patches of group `g` in the tap-major order
/// of [`tap_major_signs`]: one row per output pixel, `n·oh·ow` rows of
/// `filter_len` bits. Padded taps are bit 0.
fn pack_patches(input: &FloatTensor, geom: &ConvGeometry, g: usize) -> Result<(Vec<u64>, usize, usize)> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = out_dims(geom, [n, c, h, w])?;
    let k = geom.kernel;
    let cpg = geom.in_per_group();
    let wpr = words_for(geom.filter_len());
    let pad = geom.padding;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let wpc = words_for(cpg);

    // Channel signs of every padded pixel in the group, padding as 0.
    let mut pixels = vec![0u64; n * ph * pw * wpc];
    let data = input.data();
    // One 64-channel word per pixel at a time, built over contiguous planes
    // so the compare-and-shift vectorizes.
    let mut acc = vec![0u64; h * w];
    for b in 0..n {
        for wi in 0..wpc {
            acc.fill(0);
            for ci in wi * WORD_BITS..cpg.min((wi + 1) * WORD_BITS) {
                let plane = &data[(b * c + g * cpg + ci) * h * w..][..h * w];
                let bit = ci % WORD_BITS;
                for (a, &v) in acc.iter_mut().zip(plane) {
                    *a |= ((v >= 0.0) as u64) << bit;
                }
            }
            for (y, row) in acc.chunks_exact(w).enumerate() {
                let base = (b * ph + y + pad) * pw + pad;
                for (x, &word) in row.iter().enumerate() {
                    pixels[(base + x) * wpc + wi] = word;
                }
            }
        }
    }

    let mut words = vec![0u64; n * oh * ow * wpr];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut words[((b * oh + oy) * ow + ox) * wpr..][..wpr];
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &pixels[((b * ph + oy + ky) * pw + ox + kx) * wpc..][..wpc];
                        let at = (ky * k + kx) * cpg;
                        let mut done = 0;
                        while done < cpg {
                            let len = (cpg - done).min(WORD_BITS);
                            write_bits(dst, at + done, len, read_bits(src, done, len));
                            done += len;
                        }
                    }
                }
            }
        }
    }
    Ok((words, oh, ow))
}

/// `len ≤ 64` bits of `row` starting at bit `off`.
#[inline(always)]
fn read_bits(row: &[u64], off: usize, len: usize) -> u64 {
    let (wi, sh) = (off / WORD_BITS, off % WORD_BITS);
    let mut v = row[wi] >> sh;
    if sh + len > WORD_BITS {
        v |= row[wi + 1] << (WORD_BITS - sh);
    }
    if len < WORD_BITS {
        v &= (1u64 << len) - 1;
    }
    v
}

/// ORs the low `len` bits of `v` into `row` at bit `off`.
#[inline(always)]
fn write_bits(row: &mut [u64], off: usize, len: usize, v: u64) {
    let (wi, sh) = (off / WORD_BITS, off % WORD_BITS);
    row[wi] |= v << sh;
    if sh + len > WORD_BITS {
        row[wi + 1] |= v >> (WORD_BITS - sh);
    }
}

/// Packed xnor-popcount convolution: `α_i · (sign(I) ⊙ sign(W_i))`.
///
/// Rows shorter than one word take a word-free ±1 accumulation path; both
/// paths produce the same integer dot products.
pub fn binary_conv(input: &FloatTensor, layer: &BinaryConvLayer) -> Result<FloatTensor> {
    if !layer.in_sync {
        return Err(Error::StaleLayer);
    }
    let geom = &layer.geom;
    geom.check_input(input)?;
    if geom.filter_len() < WORD_BITS {
        binary_conv_small(input, layer)
    } else {
        binary_conv_packed(input, layer)
    }
}

/// Filters sharing one pass over the patch rows.
const BLOCK: usize = 8;

/// Always the word path, whatever the row length.
pub fn binary_conv_packed(input: &FloatTensor, layer: &BinaryConvLayer) -> Result<FloatTensor> {
    if !layer.in_sync {
        return Err(Error::StaleLayer);
    }
    let geom = &layer.geom;
    let [n, ..] = geom.check_input(input)?;
    let og = geom.out_per_group();
    let row_len = geom.filter_len();
    let wpr = words_for(row_len);
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for g in 0..geom.groups {
        let (patches, oh, ow) = pack_patches(input, geom, g)?;
        let p = oh * ow;
        if out.is_empty() {
            out = vec![0.0f32; n * geom.out_c * p];
            shape = vec![n, geom.out_c, oh, ow];
        }
        let rows_of = |ch: usize| &layer.tap_major[ch * wpr..(ch + 1) * wpr];
        for b in 0..n {
            let prow = &patches[b * p * wpr..(b + 1) * p * wpr];
            let plane = |ch: usize| (b * geom.out_c + ch) * p;
            let mut o = 0;
            while o + BLOCK <= og {
                let ch = g * og + o;
                let w: [&[u64]; BLOCK] = std::array::from_fn(|r| rows_of(ch + r));
                let mut pairs = prow.chunks_exact(2 * wpr);
                for (i, two) in pairs.by_ref().enumerate() {
                    let d = dot_words_block(w, [&two[..wpr], &two[wpr..]], row_len);
                    for (j, dj) in d.iter().enumerate() {
                        for r in 0..BLOCK {
                            out[plane(ch + r) + 2 * i + j] = layer.scales[ch + r] * dj[r] as f32;
                        }
                    }
                }
                if !pairs.remainder().is_empty() {
                    let [d] = dot_words_block(w, [pairs.remainder()], row_len);
                    for r in 0..BLOCK {
                        out[plane(ch + r) + p - 1] = layer.scales[ch + r] * d[r] as f32;
                    }
                }
                o += BLOCK;
            }
            for o in o..og {
                let ch = g * og + o;
                let (wrow, alpha) = (rows_of(ch), layer.scales[ch]);
                for (px, xrow) in prow.chunks_exact(wpr).enumerate() {
                    out[plane(ch) + px] = alpha * dot_words(wrow, xrow, row_len) as f32;
                }
            }
        }
    }
    Ok(FloatTensor::from_vec(shape, out))
}

/// Word-free path for rows under 64 bits: ±1 products accumulated as
/// integers directly from the sign planes.
pub fn binary_conv_small(input: &FloatTensor, layer: &BinaryConvLayer) -> Result<FloatTensor> {
    if !layer.in_sync {
        return Err(Error::StaleLayer);
    }
    let geom = &layer.geom;
    let [n, c, h, w] = geom.check_input(input)?;
    let (oh, ow) = out_dims(geom, [n, c, h, w])?;
    let k = geom.kernel;
    let (cpg, og, flen) = (geom.in_per_group(), geom.out_per_group(), geom.filter_len());
    let pad = geom.padding;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    // Padded sign planes, −1 outside the image.
    let mut planes = vec![-1i8; n * c * ph * pw];
    for (plane, src) in planes.chunks_exact_mut(ph * pw).zip(input.data().chunks_exact(h * w)) {
        for y in 0..h {
            for x in 0..w {
                plane[(y + pad) * pw + x + pad] = if src[y * w + x] >= 0.0 { 1 } else { -1 };
            }
        }
    }
    let wsigns: Vec<i8> = layer
        .latent
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1 } else { -1 })
        .collect();
    let p = oh * ow;
    let mut out = vec![0.0f32; n * geom.out_c * p];
    for b in 0..n {
        for ch in 0..geom.out_c {
            let g = ch / og;
            let filt = &wsigns[ch * flen..(ch + 1) * flen];
            let alpha = layer.scales[ch];
            let dst = &mut out[(b * geom.out_c + ch) * p..(b * geom.out_c + ch + 1) * p];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i32;
                    for ci in 0..cpg {
                        let plane = &planes[(b * c + g * cpg + ci) * ph * pw..];
                        for ky in 0..k {
                            let prow = &plane[(oy + ky) * pw + ox..];
                            let frow = &filt[(ci * k + ky) * k..];
                            for kx in 0..k {
                                acc += (prow[kx] * frow[kx]) as i32;
                            }
                        }
                    }
                    dst[oy * ow + ox] = alpha * acc as f32;
                }
            }
        }
    }
    Ok(FloatTensor::from_vec(vec![n, geom.out_c, oh, ow], out))
}

/// Gradients of one binary convolution.
#[derive(Debug)]
pub struct BinaryConvGrads {
    pub grad_input: FloatTensor,
    /// Gradient w.r.t. the latent weights (through `ŵ = α·sign(w)`).
    pub grad_latent: FloatTensor,
    /// Gradient w.r.t. `ŵ` before the latent-weight mapping.
    pub grad_approx: FloatTensor,
}

/// Backward pass of [`binary_conv`] given the forward input.
///
/// The weight path maps `∂L/∂ŵ` to latent gradients per filter; the input
/// path is the transposed convolution with `ŵ` masked by the
/// straight-through window of the input sign.
pub fn binary_conv_backward(
    input: &FloatTensor,
    layer: &BinaryConvLayer,
    grad_out: &FloatTensor,
) -> Result<BinaryConvGrads> {
    if !layer.in_sync {
        return Err(Error::StaleLayer);
    }
    let geom = &layer.geom;
    let dims = geom.check_input(input)?;
    let (oh, ow) = out_dims(geom, dims)?;
    let n = dims[0];
    if grad_out.shape() != [n, geom.out_c, oh, ow] {
        return Err(Error::dim(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, geom.out_c, oh, ow]
        )));
    }
    let approx = layer.approx_weights();
    let (og, flen, p) = (geom.out_per_group(), geom.filter_len(), oh * ow);
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_what = vec![0.0; approx.len()];
    for g in 0..geom.groups {
        let (cols, _, _) = im2col(input, geom, g, BINARY_PAD, sign)?;
        let gout = gather_group(grad_out.data(), n, geom.out_c, p, g, og);
        gemm(
            og,
            n * p,
            flen,
            &gout,
            (n * p, 1),
            &cols,
            (1, n * p),
            &mut grad_what[g * og * flen..(g + 1) * og * flen],
        );
        let mut gcols = vec![0.0; flen * n * p];
        gemm(
            flen,
            og,
            n * p,
            &approx.data()[g * og * flen..],
            (1, flen),
            &gout,
            (n * p, 1),
            &mut gcols,
        );
        col2im_add(&gcols, &mut grad_in, dims, geom, g, oh, ow);
    }
    for (gi, &x) in grad_in.iter_mut().zip(input.data()) {
        if x.abs() > STE_THRESHOLD {
            *gi = 0.0;
        }
    }
    let mut grad_latent = vec![0.0; approx.len()];
    for ((w, gw), out) in layer
        .latent
        .data()
        .chunks_exact(flen)
        .zip(grad_what.chunks_exact(flen))
        .zip(grad_latent.chunks_exact_mut(flen))
    {
        weight_gradient_into(w, gw, STE_THRESHOLD, out);
    }
    let wshape = approx.shape().to_vec();
    Ok(BinaryConvGrads {
        grad_input: FloatTensor::from_vec(input.shape().to_vec(), grad_in),
        grad_latent: FloatTensor::from_vec(wshape.clone(), grad_latent),
        grad_approx: FloatTensor::from_vec(wshape, grad_what),
    })
}

/// Sign-binarizes `input` and pads it with [`BINARY_PAD`]; the dense
/// operand that [`binary_conv`] implicitly convolves.
pub fn binarized_padded_input(input: &FloatTensor, padding: usize) -> Result<FloatTensor> {
    let [n, c, h, w] = input.dims4()?;
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![BINARY_PAD; n * c * ph * pw];
    for (plane, src) in out.chunks_exact_mut(ph * pw).zip(input.data().chunks_exact(h * w)) {
        for y in 0..h {
            for x in 0..w {
                plane[(y + padding) * pw + x + padding] = sign(src[y * w + x]);
            }
        }
    }
    Ok(FloatTensor::from_vec(vec![n, c, ph, pw], out))
}

/// Window-mean pooling. The window must tile the input exactly.
pub fn avg_pool(input: &FloatTensor, window: usize, stride: usize) -> Result<FloatTensor> {
    let [n, c, h, w] = input.dims4()?;
    let (oh, ow) = pool_dims(h, w, window, stride)?;
    let inv = 1.0 / (window * window) as f32;
    let mut out = vec![0.0; n * c * oh * ow];
    for (dst, src) in out.chunks_exact_mut(oh * ow).zip(input.data().chunks_exact(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..window {
                    for dx in 0..window {
                        acc += src[(oy * stride + dy) * w + ox * stride + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(FloatTensor::from_vec(vec![n, c, oh, ow], out))
}

pub fn avg_pool_backward(
    input_shape: &[usize],
    grad_out: &FloatTensor,
    window: usize,
    stride: usize,
) -> Result<FloatTensor> {
    let [n, c, h, w] = match *input_shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::dim("avg_pool_backward expects a 4-d input shape")),
    };
    let (oh, ow) = pool_dims(h, w, window, stride)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::dim(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, c, oh, ow]
        )));
    }
    let inv = 1.0 / (window * window) as f32;
    let mut grad = vec![0.0; n * c * h * w];
    for (dst, src) in grad.chunks_exact_mut(h * w).zip(grad_out.data().chunks_exact(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = src[oy * ow + ox] * inv;
                for dy in 0..window {
                    for dx in 0..window {
                        dst[(oy * stride + dy) * w + ox * stride + dx] += gv;
                    }
                }
            }
        }
    }
    Ok(FloatTensor::from_vec(input_shape.to_vec(), grad))
}

fn pool_dims(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 || h < window || w < window {
        return Err(Error::dim(format!(
            "cannot pool {h}x{w} with window {window}, stride {stride}"
        )));
    }
    if !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "pool window {window}/stride {stride} does not tile {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Mean over the spatial extent: `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(input: &FloatTensor) -> Result<FloatTensor> {
    let [n, c, h, w] = input.dims4()?;
    let inv = 1.0 / (h * w) as f32;
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f32>() * inv)
        .collect();
    Ok(FloatTensor::from_vec(vec![n, c], data))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &FloatTensor) -> Result<FloatTensor> {
    let (h, w) = match *input_shape {
        [_, _, h, w] => (h, w),
        _ => return Err(Error::dim("global pool expects a 4-d input shape")),
    };
    let inv = 1.0 / (h * w) as f32;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, h * w))
        .collect();
    Ok(FloatTensor::from_vec(input_shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> FloatTensor {
        let n = shape.iter().product();
        FloatTensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5f32..1.5)).collect())
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = FloatTensor::full(&[1, 1, 3, 3], 1.0);
        let w = FloatTensor::full(&[1, 1, 3, 3], 1.0);
        let g = ConvGeometry::new(1, 1, 3, 1, 0, 1).unwrap();
        let y = float_conv(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[2, 1, 4, 5]);
        let w = FloatTensor::full(&[1, 1, 1, 1], 1.0);
        let g = ConvGeometry::new(1, 1, 1, 1, 0, 1).unwrap();
        assert_eq!(float_conv(&x, &w, &g).unwrap(), x);
    }

    #[test]
    fn geometry_errors() {
        assert!(ConvGeometry::new(6, 4, 3, 1, 1, 4).is_err());
        let g = ConvGeometry::new(2, 2, 3, 1, 0, 1).unwrap();
        let x = FloatTensor::zeros(&[1, 3, 4, 4]);
        let w = FloatTensor::zeros(&[2, 2, 3, 3]);
        assert!(matches!(float_conv(&x, &w, &g), Err(Error::Dimension(_))));
        assert_eq!(g.out_extent(7).unwrap(), 5);
        assert!(g.out_extent(2).is_err());
    }

    #[test]
    fn k_dependency_groups() {
        assert_eq!(KDependency::new(0, 8).unwrap().groups(), 8);
        assert_eq!(KDependency::new(3, 8).unwrap().groups(), 1);
        assert_eq!(KDependency::new(1, 4).unwrap().groups(), 2);
        assert!(KDependency::new(2, 6).is_err());
        assert!(KDependency::new(4, 8).is_err());
    }

    #[test]
    fn all_ones_binary_conv() {
        let g = ConvGeometry::new(2, 3, 3, 1, 0, 1).unwrap();
        let w = FloatTensor::from_vec(g.weight_shape(), (0..54).map(|i| 0.1 + i as f32 * 0.01).collect());
        let layer = BinaryConvLayer::new(g, w).unwrap();
        let x = FloatTensor::full(&[1, 2, 3, 3], 1.0);
        let y = binary_conv(&x, &layer).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, 18.0 * layer.scales()[i]);
        }
    }

    #[test]
    fn stale_layer_rejected() {
        let g = ConvGeometry::new(1, 1, 1, 1, 0, 1).unwrap();
        let mut layer = BinaryConvLayer::new(g, FloatTensor::full(&[1, 1, 1, 1], 0.5)).unwrap();
        layer.latent_mut().data_mut()[0] = -0.5;
        let x = FloatTensor::full(&[1, 1, 2, 2], 1.0);
        assert!(matches!(binary_conv(&x, &layer), Err(Error::StaleLayer)));
        layer.sync().unwrap();
        assert_eq!(binary_conv(&x, &layer).unwrap().data(), &[-0.5; 4]);
    }

    #[test]
    fn degenerate_filter_rejected() {
        let g = ConvGeometry::new(1, 2, 1, 1, 0, 1).unwrap();
        let w = FloatTensor::from_vec(vec![2, 1, 1, 1], vec![0.3, 0.0]);
        assert!(matches!(
            BinaryConvLayer::new(g, w),
            Err(Error::DegenerateFilter { filter: 1 })
        ));
        let g = ConvGeometry::new(1, 1, 1, 2, 0, 1).unwrap();
        assert!(BinaryConvLayer::new(g, FloatTensor::full(&[1, 1, 1, 1], 1.0)).is_err());
    }

    #[test]
    fn word_and_word_free_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c, k, groups) in [(4, 3, 4), (4, 3, 2), (6, 1, 1), (8, 3, 1), (3, 3, 1)] {
            let g = ConvGeometry::new(c, c, k, 1, k / 2, groups).unwrap();
            let layer = BinaryConvLayer::new(g, random_tensor(&mut rng, &g.weight_shape())).unwrap();
            let x = random_tensor(&mut rng, &[2, c, 5, 4]);
            assert_eq!(
                binary_conv_small(&x, &layer).unwrap(),
                binary_conv_packed(&x, &layer).unwrap()
            );
        }
    }

    #[test]
    fn avg_pool_examples() {
        let x = FloatTensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = FloatTensor::full(&[2, 3, 4, 4], 2.5);
        assert!(avg_pool(&c, 2, 2).unwrap().data().iter().all(|&v| v == 2.5));
        assert!(avg_pool(&FloatTensor::zeros(&[1, 1, 3, 3]), 2, 2).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeometry::new(4, 4, 3, 1, 1, 2).unwrap();
        let layer = BinaryConvLayer::new(g, random_tensor(&mut rng, &g.weight_shape())).unwrap();
        let x = random_tensor(&mut rng, &[2, 4, 3, 3]);
        let zero = FloatTensor::zeros(&[2, 4, 3, 3]);
        let grads = binary_conv_backward(&x, &layer, &zero).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_latent.data().iter().all(|&v| v == 0.0));
        let (gi, gw) = float_conv_backward(&x, layer.latent(), &zero, &g).unwrap();
        assert!(gi.data().iter().chain(gw.data()).all(|&v| v == 0.0));
    }
}
