//! Conditional 3D residual convolutional denoiser with hand-derived
//! reverse-mode gradients.
//!
//! The network consumes 16 channels (8 noisy subbands concatenated with 8
//! condition subbands) and predicts the 8 clean subbands directly. Encoder
//! levels use stride-2 convolutions for downsampling; the decoder uses
//! nearest-neighbor upsampling, a channel-reducing convolution, and additive
//! skip connections. A sinusoidal embedding of the timestep goes through a
//! two-layer perceptron and is injected per-channel as a bias in every
//! residual block. All convolutions are 3x3x3 with zero padding.

use rand::Rng;

use crate::error::{PowdrError, Result};
use crate::wavelet::{SubbandTensor, NUM_SUBBANDS};

pub const IN_CHANNELS: usize = 16;
pub const OUT_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Test-only mode for translation-equivariance checks.
    Periodic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub dropout_rate: f64,
    pub time_embed_dim: usize,
    pub padding: Padding,
}

impl DenoiserConfig {
    /// Small configuration exercised by tests and desk-scale experiments.
    pub fn desk_default() -> Self {
        DenoiserConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            dropout_rate: 0.1,
            time_embed_dim: 32,
            padding: Padding::Zero,
        }
    }

    /// Full-scale configuration reported for the reference setup. Recorded
    /// for completeness; not exercised at desk scale.
    pub fn full_scale() -> Self {
        DenoiserConfig {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 2, 4, 4],
            blocks_per_level: 2,
            dropout_rate: 0.1,
            time_embed_dim: 256,
            padding: Padding::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(PowdrError::argument("base_channels must be positive"));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(PowdrError::argument("channel_multipliers must be non-empty positives"));
        }
        if self.blocks_per_level == 0 {
            return Err(PowdrError::argument("blocks_per_level must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PowdrError::argument("dropout_rate must be in [0, 1)"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(PowdrError::argument("time_embed_dim must be a positive even integer"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }
}

/// Dense 4D activation tensor, channel-major then x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, nx: usize, ny: usize, nz: usize) -> Self {
        Tensor {
            c,
            nx,
            ny,
            nz,
            data: vec![0.0; c * nx * ny * nz],
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

#[derive(Debug, Clone)]
struct LayoutEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

impl LayoutEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Layer-name -> (offset, shape) table over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.entries.push(LayoutEntry {
            name,
            offset: self.total,
            shape,
        });
        self.total += len;
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn find(&self, name: &str) -> &LayoutEntry {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no layout entry {name}"))
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let e = self.find(name);
        e.offset..e.offset + e.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }
}

fn build_layout(cfg: &DenoiserConfig) -> ParamLayout {
    let mut l = ParamLayout {
        entries: Vec::new(),
        total: 0,
    };
    let d = cfg.time_embed_dim;
    let levels = cfg.levels();
    l.push("temb.fc1.weight".into(), vec![d, d]);
    l.push("temb.fc1.bias".into(), vec![d]);
    l.push("temb.fc2.weight".into(), vec![d, d]);
    l.push("temb.fc2.bias".into(), vec![d]);
    l.push("stem.weight".into(), vec![cfg.channels_at(0), IN_CHANNELS, 3, 3, 3]);
    l.push("stem.bias".into(), vec![cfg.channels_at(0)]);
    let block = |l: &mut ParamLayout, prefix: &str, ch: usize| {
        l.push(format!("{prefix}.conv1.weight"), vec![ch, ch, 3, 3, 3]);
        l.push(format!("{prefix}.conv1.bias"), vec![ch]);
        l.push(format!("{prefix}.temb.weight"), vec![ch, d]);
        l.push(format!("{prefix}.temb.bias"), vec![ch]);
        l.push(format!("{prefix}.conv2.weight"), vec![ch, ch, 3, 3, 3]);
        l.push(format!("{prefix}.conv2.bias"), vec![ch]);
    };
    for i in 0..levels {
        for b in 0..cfg.blocks_per_level {
            block(&mut l, &format!("enc.{i}.{b}"), cfg.channels_at(i));
        }
        if i < levels - 1 {
            l.push(
                format!("down.{i}.weight"),
                vec![cfg.channels_at(i + 1), cfg.channels_at(i), 3, 3, 3],
            );
            l.push(format!("down.{i}.bias"), vec![cfg.channels_at(i + 1)]);
        }
    }
    for i in (0..levels.saturating_sub(1)).rev() {
        l.push(
            format!("up.{i}.weight"),
            vec![cfg.channels_at(i), cfg.channels_at(i + 1), 3, 3, 3],
        );
        l.push(format!("up.{i}.bias"), vec![cfg.channels_at(i)]);
        for b in 0..cfg.blocks_per_level {
            block(&mut l, &format!("dec.{i}.{b}"), cfg.channels_at(i));
        }
    }
    l.push("out.weight".into(), vec![OUT_CHANNELS, cfg.channels_at(0), 3, 3, 3]);
    l.push("out.bias".into(), vec![OUT_CHANNELS]);
    l
}

/// Total parameter count implied by a configuration.
pub fn param_count(cfg: &DenoiserConfig) -> usize {
    build_layout(cfg).total()
}

/// Flat parameter store plus the layout describing it.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub cfg: DenoiserConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl DenoiserParams {
    pub fn slice(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }
}

/// Uniform fan-in initialization; biases zero; final output convolution
/// zero-initialized so the initial prediction is identically zero.
pub fn init_params(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<DenoiserParams> {
    cfg.validate()?;
    let layout = build_layout(cfg);
    let mut data = vec![0.0f64; layout.total()];
    for e in &layout.entries {
        let is_weight = e.name.ends_with(".weight");
        if !is_weight || e.name == "out.weight" {
            continue; // biases and the output conv stay zero
        }
        let fan_in: usize = if e.shape.len() == 5 {
            e.shape[1] * 27
        } else {
            e.shape[1]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut data[e.offset..e.offset + e.len()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(DenoiserParams { cfg: cfg.clone(), layout, data })
}

// ---------------------------------------------------------------------------
// convolution kernels
// ---------------------------------------------------------------------------

fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// 3x3x3 convolution, zero padding 1, stride 1 or 2.
fn conv3d(inp: &Tensor, w: &[f64], b: &[f64], out_c: usize, stride: usize, padding: Padding) -> Tensor {
    let (nx, ny, nz) = (inp.nx, inp.ny, inp.nz);
    let (ox, oy, oz) = (
        conv_out_dim(nx, stride),
        conv_out_dim(ny, stride),
        conv_out_dim(nz, stride),
    );
    let mut out = Tensor::zeros(out_c, ox, oy, oz);
    let isp = inp.spatial();
    let osp = out.spatial();
    if padding == Padding::Periodic {
        // slow reference path, used only in tests
        for oc in 0..out_c {
            for z in 0..oz {
                for y in 0..oy {
                    for x in 0..ox {
                        let mut acc = b[oc];
                        for ic in 0..inp.c {
                            for kz in 0..3usize {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iz = (z * stride + kz + nz - 1) % nz;
                                        let iy = (y * stride + ky + ny - 1) % ny;
                                        let ix = (x * stride + kx + nx - 1) % nx;
                                        acc += w[(((oc * inp.c + ic) * 3 + kz) * 3 + ky) * 3 + kx]
                                            * inp.data[ic * isp + iz * ny * nx + iy * nx + ix];
                                    }
                                }
                            }
                        }
                        out.data[oc * osp + z * oy * ox + y * ox + x] = acc;
                    }
                }
            }
        }
        return out;
    }
    for oc in 0..out_c {
        let oslice = &mut out.data[oc * osp..(oc + 1) * osp];
        oslice.fill(b[oc]);
        for ic in 0..inp.c {
            let islice = &inp.data[ic * isp..(ic + 1) * isp];
            let wbase = (oc * inp.c + ic) * 27;
            if stride == 1 {
                for kz in 0..3usize {
                    let dz = kz as i64 - 1;
                    for ky in 0..3usize {
                        let dy = ky as i64 - 1;
                        for kx in 0..3usize {
                            let dx = kx as i64 - 1;
                            let wv = w[wbase + (kz * 3 + ky) * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let z0 = (-dz).max(0) as usize;
                            let z1 = nz - dz.max(0) as usize;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ny - dy.max(0) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = nx - dx.max(0) as usize;
                            for z in z0..z1 {
                                let iz = (z as i64 + dz) as usize;
                                for y in y0..y1 {
                                    let iy = (y as i64 + dy) as usize;
                                    let orow = z * ny * nx + y * nx;
                                    let irow = (iz * ny * nx + iy * nx) as i64 + dx;
                                    let olane = &mut oslice[orow + x0..orow + x1];
                                    let ilane = &islice[(irow + x0 as i64) as usize..(irow + x1 as i64) as usize];
                                    for (o, i) in olane.iter_mut().zip(ilane) {
                                        *o += wv * i;
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for z in 0..oz {
                    for y in 0..oy {
                        for x in 0..ox {
                            let mut acc = 0.0;
                            for kz in 0..3usize {
                                let iz = (z * stride + kz) as i64 - 1;
                                if iz < 0 || iz >= nz as i64 {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let iy = (y * stride + ky) as i64 - 1;
                                    if iy < 0 || iy >= ny as i64 {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = (x * stride + kx) as i64 - 1;
                                        if ix < 0 || ix >= nx as i64 {
                                            continue;
                                        }
                                        acc += w[wbase + (kz * 3 + ky) * 3 + kx]
                                            * islice[iz as usize * ny * nx + iy as usize * nx + ix as usize];
                                    }
                                }
                            }
                            oslice[z * oy * ox + y * ox + x] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse-mode pass of [`conv3d`]: accumulates weight/bias gradients into
/// `gw`/`gb` and optionally returns the gradient with respect to the input.
fn conv3d_backward(
    inp: &Tensor,
    w: &[f64],
    grad_out: &Tensor,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_grad_input: bool,
) -> Option<Tensor> {
    let (nx, ny, nz) = (inp.nx, inp.ny, inp.nz);
    let (ox, oy, oz) = (grad_out.nx, grad_out.ny, grad_out.nz);
    let isp = inp.spatial();
    let osp = grad_out.spatial();
    let mut grad_in = if need_grad_input {
        Some(Tensor::zeros(inp.c, nx, ny, nz))
    } else {
        None
    };
    for oc in 0..grad_out.c {
        let goslice = &grad_out.data[oc * osp..(oc + 1) * osp];
        gb[oc] += goslice.iter().sum::<f64>();
        for ic in 0..inp.c {
            let islice = &inp.data[ic * isp..(ic + 1) * isp];
            let wbase = (oc * inp.c + ic) * 27;
            if stride == 1 {
                for kz in 0..3usize {
                    let dz = kz as i64 - 1;
                    for ky in 0..3usize {
                        let dy = ky as i64 - 1;
                        for kx in 0..3usize {
                            let dx = kx as i64 - 1;
                            let wv = w[wbase + (kz * 3 + ky) * 3 + kx];
                            let z0 = (-dz).max(0) as usize;
                            let z1 = nz - dz.max(0) as usize;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ny - dy.max(0) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = nx - dx.max(0) as usize;
                            let mut wacc = 0.0;
                            for z in z0..z1 {
                                let iz = (z as i64 + dz) as usize;
                                for y in y0..y1 {
                                    let iy = (y as i64 + dy) as usize;
                                    let orow = z * ny * nx + y * nx;
                                    let irow = (iz * ny * nx + iy * nx) as i64 + dx;
                                    let ilo = (irow + x0 as i64) as usize;
                                    let ihi = (irow + x1 as i64) as usize;
                                    let golane = &goslice[orow + x0..orow + x1];
                                    let ilane = &islice[ilo..ihi];
                                    for (g, i) in golane.iter().zip(ilane) {
                                        wacc += g * i;
                                    }
                                    if let Some(gi) = grad_in.as_mut() {
                                        let gislice = &mut gi.data[ic * isp..(ic + 1) * isp];
                                        let gilane = &mut gislice[ilo..ihi];
                                        for (gi_v, g) in gilane.iter_mut().zip(golane) {
                                            *gi_v += wv * g;
                                        }
                                    }
                                }
                            }
                            gw[wbase + (kz * 3 + ky) * 3 + kx] += wacc;
                        }
                    }
                }
            } else {
                for z in 0..oz {
                    for y in 0..oy {
                        for x in 0..ox {
                            let g = goslice[z * oy * ox + y * ox + x];
                            if g == 0.0 {
                                continue;
                            }
                            for kz in 0..3usize {
                                let iz = (z * stride + kz) as i64 - 1;
                                if iz < 0 || iz >= nz as i64 {
                                    continue;
                                }
                                for ky in 0..3usize {
                                    let iy = (y * stride + ky) as i64 - 1;
                                    if iy < 0 || iy >= ny as i64 {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = (x * stride + kx) as i64 - 1;
                                        if ix < 0 || ix >= nx as i64 {
                                            continue;
                                        }
                                        let ii = iz as usize * ny * nx + iy as usize * nx + ix as usize;
                                        let wi = wbase + (kz * 3 + ky) * 3 + kx;
                                        gw[wi] += g * islice[ii];
                                        if let Some(gi) = grad_in.as_mut() {
                                            gi.data[ic * isp + ii] += g * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

fn upsample2(inp: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(inp.c, inp.nx * 2, inp.ny * 2, inp.nz * 2);
    let isp = inp.spatial();
    let osp = out.spatial();
    for c in 0..inp.c {
        for z in 0..out.nz {
            for y in 0..out.ny {
                for x in 0..out.nx {
                    out.data[c * osp + z * out.ny * out.nx + y * out.nx + x] =
                        inp.data[c * isp + (z / 2) * inp.ny * inp.nx + (y / 2) * inp.nx + x / 2];
                }
            }
        }
    }
    out
}

fn upsample2_backward(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.c, grad.nx / 2, grad.ny / 2, grad.nz / 2);
    let gsp = grad.spatial();
    let osp = out.spatial();
    for c in 0..grad.c {
        for z in 0..grad.nz {
            for y in 0..grad.ny {
                for x in 0..grad.nx {
                    out.data[c * osp + (z / 2) * out.ny * out.nx + (y / 2) * out.nx + x / 2] +=
                        grad.data[c * gsp + z * grad.ny * grad.nx + y * grad.nx + x];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
    /// block input (residual branch source, conv1 input)
    x: Tensor,
    /// post-ReLU activations
    a: Tensor,
    /// inverted-dropout multipliers, present only in train mode with rate > 0
    dropmul: Option<Vec<f64>>,
    /// conv2 input (post-dropout)
    d: Tensor,
}

pub struct ActivationCache {
    param_len: usize,
    mode: Mode,
    emb_basis: Vec<f64>,
    mlp_a1: Vec<f64>,
    emb_out: Vec<f64>,
    input: Tensor,
    enc_blocks: Vec<Vec<BlockCache>>,
    down_inputs: Vec<Tensor>,
    up_inputs: Vec<Tensor>,
    dec_blocks: Vec<Vec<BlockCache>>,
    out_input: Tensor,
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for k in 0..half {
        let freq = (10000.0f64).powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        e[k] = arg.sin();
        e[k + half] = arg.cos();
    }
    e
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            b[o]
                + w[o * in_dim..(o + 1) * in_dim]
                    .iter()
                    .zip(x)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect()
}

struct BlockRun<'a> {
    params: &'a DenoiserParams,
    prefix: String,
    emb: Vec<f64>,
}

impl<'a> BlockRun<'a> {
    fn forward(
        &self,
        x: Tensor,
        emb_out: &[f64],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> (Tensor, BlockCache) {
        let p = self.params;
        let pad = p.cfg.padding;
        let ch = x.c;
        let h1 = conv3d(
            &x,
            p.slice(&format!("{}.conv1.weight", self.prefix)),
            p.slice(&format!("{}.conv1.bias", self.prefix)),
            ch,
            1,
            pad,
        );
        let tb = matvec(
            p.slice(&format!("{}.temb.weight", self.prefix)),
            emb_out,
            p.slice(&format!("{}.temb.bias", self.prefix)),
            ch,
        );
        let sp = h1.spatial();
        let mut a = h1;
        for c in 0..ch {
            let bias = tb[c];
            for v in &mut a.data[c * sp..(c + 1) * sp] {
                *v = (*v + bias).max(0.0);
            }
        }
        let rate = p.cfg.dropout_rate;
        let (d, dropmul) = if mode == Mode::Train && rate > 0.0 {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let mul: Vec<f64> = a
                .data
                .iter()
                .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                .collect();
            let mut d = a.clone();
            for (v, m) in d.data.iter_mut().zip(&mul) {
                *v *= m;
            }
            (d, Some(mul))
        } else {
            (a.clone(), None)
        };
        let h2 = conv3d(
            &d,
            p.slice(&format!("{}.conv2.weight", self.prefix)),
            p.slice(&format!("{}.conv2.bias", self.prefix)),
            ch,
            1,
            pad,
        );
        let mut y = h2;
        for (v, xv) in y.data.iter_mut().zip(&x.data) {
            *v += xv;
        }
        (y, BlockCache { x, a, dropmul, d })
    }

    fn backward(
        &self,
        cache: &BlockCache,
        grad_y: &Tensor,
        grads: &mut [f64],
        layout: &ParamLayout,
        grad_emb: &mut [f64],
    ) -> Tensor {
        let p = self.params;
        let ch = cache.x.c;
        // conv2
        let (gw2, gb2) = (
            layout.range(&format!("{}.conv2.weight", self.prefix)),
            layout.range(&format!("{}.conv2.bias", self.prefix)),
        );
        let mut gw2v = vec![0.0; gw2.len()];
        let mut gb2v = vec![0.0; gb2.len()];
        let grad_d = conv3d_backward(
            &cache.d,
            p.slice(&format!("{}.conv2.weight", self.prefix)),
            grad_y,
            1,
            &mut gw2v,
            &mut gb2v,
            true,
        )
        .unwrap();
        add_into(&mut grads[gw2], &gw2v);
        add_into(&mut grads[gb2], &gb2v);
        // dropout + relu
        let mut grad_h1b = grad_d;
        if let Some(mul) = &cache.dropmul {
            for (g, m) in grad_h1b.data.iter_mut().zip(mul) {
                *g *= m;
            }
        }
        for (g, a) in grad_h1b.data.iter_mut().zip(&cache.a.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        // time bias
        let sp = grad_h1b.spatial();
        let mut grad_tb = vec![0.0; ch];
        for c in 0..ch {
            grad_tb[c] = grad_h1b.data[c * sp..(c + 1) * sp].iter().sum();
        }
        let wt = p.slice(&format!("{}.temb.weight", self.prefix));
        let d = grad_emb.len();
        {
            let r = layout.range(&format!("{}.temb.weight", self.prefix));
            let gwt = &mut grads[r];
            for c in 0..ch {
                for k in 0..d {
                    gwt[c * d + k] += grad_tb[c] * self.cached_emb()[k];
                }
            }
        }
        {
            let r = layout.range(&format!("{}.temb.bias", self.prefix));
            add_into(&mut grads[r], &grad_tb);
        }
        for k in 0..d {
            let mut acc = 0.0;
            for c in 0..ch {
                acc += wt[c * d + k] * grad_tb[c];
            }
            grad_emb[k] += acc;
        }
        // conv1
        let (gw1, gb1) = (
            layout.range(&format!("{}.conv1.weight", self.prefix)),
            layout.range(&format!("{}.conv1.bias", self.prefix)),
        );
        let mut gw1v = vec![0.0; gw1.len()];
        let mut gb1v = vec![0.0; gb1.len()];
        let mut grad_x = conv3d_backward(
            &cache.x,
            p.slice(&format!("{}.conv1.weight", self.prefix)),
            &grad_h1b,
            1,
            &mut gw1v,
            &mut gb1v,
            true,
        )
        .unwrap();
        add_into(&mut grads[gw1], &gw1v);
        add_into(&mut grads[gb1], &gb1v);
        // residual skip
        for (g, gy) in grad_x.data.iter_mut().zip(&grad_y.data) {
            *g += gy;
        }
        grad_x
    }

    fn set_emb(&mut self, emb: &[f64]) {
        self.emb = emb.to_vec();
    }

    fn cached_emb(&self) -> &[f64] {
        &self.emb
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn subbands_to_tensor(s: &SubbandTensor) -> Tensor {
    Tensor {
        c: NUM_SUBBANDS,
        nx: s.dims.0,
        ny: s.dims.1,
        nz: s.dims.2,
        data: s.data.clone(),
    }
}

fn tensor_to_subbands(t: &Tensor) -> SubbandTensor {
    debug_assert_eq!(t.c, NUM_SUBBANDS);
    SubbandTensor {
        dims: (t.nx, t.ny, t.nz),
        data: t.data.clone(),
    }
}

/// Predict the clean subbands from noisy subbands, conditioning subbands, and
/// the timestep. Returns the prediction plus the activation cache consumed by
/// [`backward`].
pub fn forward(
    params: &DenoiserParams,
    x_t: &SubbandTensor,
    c: &SubbandTensor,
    t: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(SubbandTensor, ActivationCache)> {
    if !x_t.same_shape(c) {
        return Err(PowdrError::argument("x_t/condition shape mismatch"));
    }
    let cfg = &params.cfg;
    let levels = cfg.levels();
    let div = 1usize << (levels - 1);
    let (nx, ny, nz) = x_t.dims;
    if nx % div != 0 || ny % div != 0 || nz % div != 0 {
        return Err(PowdrError::argument(format!(
            "subband dims {nx}x{ny}x{nz} not divisible by 2^(levels-1) = {div}"
        )));
    }
    // time embedding through the two-layer perceptron
    let emb_basis = sinusoidal_embedding(t, cfg.time_embed_dim);
    let h1 = matvec(
        params.slice("temb.fc1.weight"),
        &emb_basis,
        params.slice("temb.fc1.bias"),
        cfg.time_embed_dim,
    );
    let mlp_a1: Vec<f64> = h1.iter().map(|v| v.max(0.0)).collect();
    let emb_out = matvec(
        params.slice("temb.fc2.weight"),
        &mlp_a1,
        params.slice("temb.fc2.bias"),
        cfg.time_embed_dim,
    );

    // concat [x_t, c] -> 16 channels
    let mut input = Tensor::zeros(IN_CHANNELS, nx, ny, nz);
    input.data[..x_t.data.len()].copy_from_slice(&x_t.data);
    input.data[x_t.data.len()..].copy_from_slice(&c.data);

    let mut h = conv3d(
        &input,
        params.slice("stem.weight"),
        params.slice("stem.bias"),
        cfg.channels_at(0),
        1,
        cfg.padding,
    );

    let mut enc_blocks = Vec::with_capacity(levels);
    let mut down_inputs = Vec::new();
    let mut skips: Vec<Option<Tensor>> = Vec::new();
    for i in 0..levels {
        let mut caches = Vec::with_capacity(cfg.blocks_per_level);
        for b in 0..cfg.blocks_per_level {
            let mut run = BlockRun {
                params,
                prefix: format!("enc.{i}.{b}"),
                emb: Vec::new(),
            };
            run.set_emb(&emb_out);
            let (y, cache) = run.forward(h, &emb_out, mode, rng);
            h = y;
            caches.push(cache);
        }
        enc_blocks.push(caches);
        if i < levels - 1 {
            skips.push(Some(h.clone()));
            down_inputs.push(h.clone());
            h = conv3d(
                &h,
                params.slice(&format!("down.{i}.weight")),
                params.slice(&format!("down.{i}.bias")),
                cfg.channels_at(i + 1),
                2,
                cfg.padding,
            );
        }
    }

    let mut up_inputs = vec![None; levels.saturating_sub(1)];
    let mut dec_blocks: Vec<Vec<BlockCache>> = (0..levels.saturating_sub(1)).map(|_| Vec::new()).collect();
    for i in (0..levels.saturating_sub(1)).rev() {
        let up = upsample2(&h);
        let mut hh = conv3d(
            &up,
            params.slice(&format!("up.{i}.weight")),
            params.slice(&format!("up.{i}.bias")),
            cfg.channels_at(i),
            1,
            cfg.padding,
        );
        up_inputs[i] = Some(up);
        let skip = skips[i].take().expect("skip consumed once");
        for (v, s) in hh.data.iter_mut().zip(&skip.data) {
            *v += s;
        }
        h = hh;
        let mut caches = Vec::with_capacity(cfg.blocks_per_level);
        for b in 0..cfg.blocks_per_level {
            let mut run = BlockRun {
                params,
                prefix: format!("dec.{i}.{b}"),
                emb: Vec::new(),
            };
            run.set_emb(&emb_out);
            let (y, cache) = run.forward(h, &emb_out, mode, rng);
            h = y;
            caches.push(cache);
        }
        dec_blocks[i] = caches;
    }

    let out_input = h;
    let out = conv3d(
        &out_input,
        params.slice("out.weight"),
        params.slice("out.bias"),
        OUT_CHANNELS,
        1,
        cfg.padding,
    );
    let pred = tensor_to_subbands(&out);
    Ok((
        pred,
        ActivationCache {
            param_len: params.data.len(),
            mode,
            emb_basis,
            mlp_a1,
            emb_out,
            input,
            enc_blocks,
            down_inputs,
            up_inputs: up_inputs.into_iter().map(|t| t.unwrap()).collect(),
            dec_blocks,
            out_input,
        },
    ))
}

/// Exact reverse-mode gradient of `sum_i grad_out[i] * output[i]` with respect
/// to every parameter, replaying the dropout masks recorded in the cache.
pub fn backward(
    params: &DenoiserParams,
    cache: &ActivationCache,
    grad_out: &SubbandTensor,
) -> Result<Vec<f64>> {
    if cache.param_len != params.data.len() {
        return Err(PowdrError::contract("cache does not match parameter store"));
    }
    if cache.mode != Mode::Train {
        return Err(PowdrError::contract("backward requires a train-mode cache"));
    }
    if grad_out.dims != (cache.input.nx, cache.input.ny, cache.input.nz) {
        return Err(PowdrError::contract("grad_out shape mismatch"));
    }
    let cfg = &params.cfg;
    let levels = cfg.levels();
    let layout = &params.layout;
    let mut grads = vec![0.0f64; params.data.len()];
    let mut grad_emb = vec![0.0f64; cfg.time_embed_dim];

    let go = subbands_to_tensor(grad_out);
    // output conv
    let mut g = {
        let rw = layout.range("out.weight");
        let rb = layout.range("out.bias");
        let mut gw = vec![0.0; rw.len()];
        let mut gb = vec![0.0; rb.len()];
        let gi = conv3d_backward(
            &cache.out_input,
            params.slice("out.weight"),
            &go,
            1,
            &mut gw,
            &mut gb,
            true,
        )
        .unwrap();
        add_into(&mut grads[rw], &gw);
        add_into(&mut grads[rb], &gb);
        gi
    };

    // decoder, reverse of execution order (executed L-2 .. 0, so undo 0 .. L-2)
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; levels.saturating_sub(1)];
    for i in 0..levels.saturating_sub(1) {
        for b in (0..cfg.blocks_per_level).rev() {
            let mut run = BlockRun {
                params,
                prefix: format!("dec.{i}.{b}"),
                emb: Vec::new(),
            };
            run.set_emb(&cache.emb_out);
            g = run.backward(&cache.dec_blocks[i][b], &g, &mut grads, layout, &mut grad_emb);
        }
        skip_grads[i] = Some(g.clone());
        let rw = layout.range(&format!("up.{i}.weight"));
        let rb = layout.range(&format!("up.{i}.bias"));
        let mut gw = vec![0.0; rw.len()];
        let mut gb = vec![0.0; rb.len()];
        let g_up = conv3d_backward(
            &cache.up_inputs[i],
            params.slice(&format!("up.{i}.weight")),
            &g,
            1,
            &mut gw,
            &mut gb,
            true,
        )
        .unwrap();
        add_into(&mut grads[rw], &gw);
        add_into(&mut grads[rb], &gb);
        g = upsample2_backward(&g_up);
    }

    // encoder, deepest level first
    for i in (0..levels).rev() {
        for b in (0..cfg.blocks_per_level).rev() {
            let mut run = BlockRun {
                params,
                prefix: format!("enc.{i}.{b}"),
                emb: Vec::new(),
            };
            run.set_emb(&cache.emb_out);
            g = run.backward(&cache.enc_blocks[i][b], &g, &mut grads, layout, &mut grad_emb);
        }
        if i > 0 {
            let rw = layout.range(&format!("down.{}.weight", i - 1));
            let rb = layout.range(&format!("down.{}.bias", i - 1));
            let mut gw = vec![0.0; rw.len()];
            let mut gb = vec![0.0; rb.len()];
            let gi = conv3d_backward(
                &cache.down_inputs[i - 1],
                params.slice(&format!("down.{}.weight", i - 1)),
                &g,
                2,
                &mut gw,
                &mut gb,
                true,
            )
            .unwrap();
            add_into(&mut grads[rw], &gw);
            add_into(&mut grads[rb], &gb);
            g = gi;
            if let Some(sg) = skip_grads[i - 1].take() {
                for (a, b) in g.data.iter_mut().zip(&sg.data) {
                    *a += b;
                }
            }
        }
    }

    // stem (no grad wrt the network input needed)
    {
        let rw = layout.range("stem.weight");
        let rb = layout.range("stem.bias");
        let mut gw = vec![0.0; rw.len()];
        let mut gb = vec![0.0; rb.len()];
        conv3d_backward(&cache.input, params.slice("stem.weight"), &g, 1, &mut gw, &mut gb, false);
        add_into(&mut grads[rw], &gw);
        add_into(&mut grads[rb], &gb);
    }

    // time-embedding perceptron
    {
        let d = cfg.time_embed_dim;
        let rw2 = layout.range("temb.fc2.weight");
        let rb2 = layout.range("temb.fc2.bias");
        let w2 = params.slice("temb.fc2.weight").to_vec();
        {
            let gw2 = &mut grads[rw2];
            for o in 0..d {
                for k in 0..d {
                    gw2[o * d + k] += grad_emb[o] * cache.mlp_a1[k];
                }
            }
        }
        add_into(&mut grads[rb2], &grad_emb);
        let mut grad_a1 = vec![0.0; d];
        for k in 0..d {
            for o in 0..d {
                grad_a1[k] += w2[o * d + k] * grad_emb[o];
            }
        }
        let grad_h1: Vec<f64> = grad_a1
            .iter()
            .zip(&cache.mlp_a1)
            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
            .collect();
        let rw1 = layout.range("temb.fc1.weight");
        let rb1 = layout.range("temb.fc1.bias");
        {
            let gw1 = &mut grads[rw1];
            for o in 0..d {
                for k in 0..d {
                    gw1[o * d + k] += grad_h1[o] * cache.emb_basis[k];
                }
            }
        }
        add_into(&mut grads[rb1], &grad_h1);
    }

    Ok(grads)
}

/// Verification utility: central finite-difference check of the hand-written
/// backward pass. Returns the max relative error over `n_params` randomly
/// chosen parameters on a synthetic conditioned input.
pub fn finite_difference_max_rel_err(
    cfg: &DenoiserConfig,
    dims: (usize, usize, usize),
    n_params: usize,
    seed: u64,
) -> f64 {
    let mut params = init_params(cfg, &mut crate::rng::derive_rng(seed, crate::rng::stream::INIT, 0)).unwrap();
    // nudge the zero-initialized output layer so its gradients are generic
    {
        let r = params.layout.range("out.weight");
        let mut rng = crate::rng::derive_rng(seed, crate::rng::stream::INIT, 1);
        for v in &mut params.data[r] {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let x = fd_random_subbands(dims, seed + 10);
    let c = fd_random_subbands(dims, seed + 20);
    let t = 37usize;
    let gcoef = fd_random_subbands(dims, seed + 30);
    // ReLU on/off pattern: central differences are only valid while the
    // perturbation stays on one smooth piece, so parameters whose +/-h
    // probes flip any unit are resampled
    fn relu_pattern(cache: &ActivationCache) -> Vec<bool> {
        let mut p: Vec<bool> = cache.mlp_a1.iter().map(|&v| v > 0.0).collect();
        for blocks in cache.enc_blocks.iter().chain(cache.dec_blocks.iter()) {
            for b in blocks {
                p.extend(b.a.data.iter().map(|&v| v > 0.0));
            }
        }
        p
    }
    let eval = |p: &DenoiserParams| -> (f64, Vec<bool>) {
        let mut rng = crate::rng::derive_rng(seed, crate::rng::stream::INIT, 2);
        let (out, cache) = forward(p, &x, &c, t, Mode::Train, &mut rng).unwrap();
        let loss = out.data.iter().zip(&gcoef.data).map(|(o, g)| o * g).sum();
        (loss, relu_pattern(&cache))
    };
    let (analytic, base_pattern) = {
        let mut rng = crate::rng::derive_rng(seed, crate::rng::stream::INIT, 2);
        let (_, cache) = forward(&params, &x, &c, t, Mode::Train, &mut rng).unwrap();
        let g = backward(&params, &cache, &gcoef).unwrap();
        (g, relu_pattern(&cache))
    };
    let mut pick = crate::rng::derive_rng(seed, crate::rng::stream::INIT, 3);
    let h = 1e-3;
    let mut max_rel: f64 = 0.0;
    let mut tested = 0usize;
    let mut attempts = 0usize;
    while tested < n_params {
        attempts += 1;
        assert!(attempts < n_params * 50, "too many kink-adjacent parameters");
        let idx = pick.gen_range(0..params.data.len());
        let orig = params.data[idx];
        params.data[idx] = orig + h;
        let (lp, pat_p) = eval(&params);
        params.data[idx] = orig - h;
        let (lm, pat_m) = eval(&params);
        params.data[idx] = orig;
        if pat_p != base_pattern || pat_m != base_pattern {
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let an = analytic[idx];
        let denom = fd.abs().max(an.abs()).max(1e-4);
        max_rel = max_rel.max((fd - an).abs() / denom);
        tested += 1;
    }
    max_rel
}

fn fd_random_subbands(dims: (usize, usize, usize), seed: u64) -> SubbandTensor {
    let mut rng = crate::rng::derive_rng(seed, crate::rng::stream::INIT, 99);
    let mut s = SubbandTensor::zeros(dims);
    for v in s.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    s
}
