//! The convolutional embedding network: deterministic forward pass, exact
//! reverse-mode gradients, SGD updates, and a bit-exact checkpoint format.
//!
//! Architecture: `n_blocks` of (same-padded conv, ReLU, 2x2 max-pool with
//! stride 2), then global average pooling per channel and a dense layer to
//! the 1024-dimensional embedding. Five blocks require five halvings of the
//! patch width, so widths below 32 get four blocks.
//!
//! Compute is generic over [`Scalar`] (f32 in production, f64 in gradient
//! checks); parameters are stored and checkpointed as f32 either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectrogram::SpectrogramPatch;

/// Embedding dimensionality produced by every network.
pub const EMBEDDING_DIM: usize = 1024;

/// Standard per-block channel plan; a config uses the first `n_blocks`.
pub const CHANNEL_PLAN: [usize; 5] = [16, 32, 64, 128, 256];

/// Narrowest patch the pooling chain supports.
pub const MIN_INPUT_WIDTH: usize = 16;

/// Shrink factor for the dense layer's initialization.
const DENSE_INIT_SCALE: f32 = 0.02;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input width {0} is below the minimum of {MIN_INPUT_WIDTH}")]
    WidthTooSmall(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no cached activations for this batch (expected {expected}, got {got})")]
    NoCachedActivations { expected: usize, got: usize },
    #[error("non-finite value produced at {0}")]
    NonFinite(String),
    #[error("checkpoint has bad magic")]
    BadMagic,
    #[error("checkpoint version {0} is not supported")]
    VersionMismatch(u16),
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

/// Network hyperparameters. `n_blocks` and `channels` are normally derived
/// from the input width via [`NetConfig::for_width`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub n_blocks: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub init_seed: u64,
}

impl NetConfig {
    /// Depth rule: five blocks exactly when five 2x halvings fit the width.
    pub fn blocks_for_width(input_width: usize) -> usize {
        if input_width >= 32 {
            5
        } else {
            4
        }
    }

    pub fn for_width(input_width: usize, init_seed: u64) -> Result<Self, NetError> {
        if input_width < MIN_INPUT_WIDTH {
            return Err(NetError::WidthTooSmall(input_width));
        }
        let n_blocks = Self::blocks_for_width(input_width);
        Ok(NetConfig {
            input_width,
            input_height: crate::spectrogram::N_BINS,
            n_blocks,
            channels: CHANNEL_PLAN[..n_blocks].to_vec(),
            kernel: 3,
            embedding_dim: EMBEDDING_DIM,
            learning_rate: 1e-3,
            optimizer: Optimizer::Sgd,
            init_seed,
        })
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_width < MIN_INPUT_WIDTH {
            return Err(NetError::WidthTooSmall(self.input_width));
        }
        if self.n_blocks != Self::blocks_for_width(self.input_width) {
            return Err(NetError::InvalidConfig(format!(
                "width {} requires {} blocks, config says {}",
                self.input_width,
                Self::blocks_for_width(self.input_width),
                self.n_blocks
            )));
        }
        if self.channels.len() != self.n_blocks {
            return Err(NetError::InvalidConfig(format!(
                "{} channel entries for {} blocks",
                self.channels.len(),
                self.n_blocks
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(NetError::InvalidConfig("zero-channel block".into()));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(NetError::InvalidConfig(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(NetError::InvalidConfig(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.input_height == 0 {
            return Err(NetError::InvalidConfig("zero input height".into()));
        }
        Ok(())
    }
}

/// Float type the network computes in. f32 for production storage and speed,
/// f64 for high-precision verification; both share the same code paths.
pub trait Scalar: Copy + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    const ZERO: Self;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn is_finite_s(self) -> bool;
    /// Row-major GEMM `C = alpha * A * B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// `a`, `b`, `c` must point to allocations covering every element
    /// addressed by the given dimensions and strides, and `c` must not alias
    /// `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn add(self, o: Self) -> Self {
                self + o
            }
            fn sub(self, o: Self) -> Self {
                self - o
            }
            fn mul(self, o: Self) -> Self {
                self * o
            }
            fn is_finite_s(self) -> bool {
                self.is_finite()
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A 1024-dimensional point in the learned space, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    /// (recording id, patch offset in ms) when known.
    pub source: Option<(String, u64)>,
    pub speaker_id: Option<String>,
}

impl Embedding {
    pub fn from_values(values: Vec<f64>) -> Self {
        Embedding {
            values,
            source: None,
            speaker_id: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockDims {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
}

fn block_dims(config: &NetConfig) -> Vec<BlockDims> {
    let mut dims = Vec::with_capacity(config.n_blocks);
    let mut h = config.input_width;
    let mut w = config.input_height;
    let mut in_c = 1usize;
    for &out_c in &config.channels {
        let (ph, pw) = (h / 2, w / 2);
        dims.push(BlockDims {
            in_c,
            out_c,
            h,
            w,
            ph,
            pw,
        });
        h = ph;
        w = pw;
        in_c = out_c;
    }
    dims
}

/// One parameter tensor with its shape, stored row-major.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub data: Vec<T>,
    pub dims: Vec<usize>,
}

/// Gradients in parameter declaration order.
pub type Gradients<T> = Vec<Vec<T>>;

/// The embedding network. Parameters are ordered: per block conv weight
/// `[out_c, in_c, k, k]` then bias `[out_c]`, then the dense weight
/// `[embedding_dim, last_c]` and bias `[embedding_dim]`.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    pub config: NetConfig,
    pub params: Vec<Parameter<T>>,
    dims: Vec<BlockDims>,
}

/// Construct a network with fan-in-scaled uniform initialization drawn from
/// `config.init_seed`. Initial values are generated in f32 so that f32 and
/// f64 networks built from the same config start bit-equivalent.
pub fn build<T: Scalar>(config: NetConfig) -> Result<Network<T>, NetError> {
    config.validate()?;
    let dims = block_dims(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut params = Vec::new();

    let mut uniform = |count: usize, bound: f32, shape: Vec<usize>| -> Parameter<T> {
        let data = (0..count)
            .map(|_| T::from_f32(rng.gen_range(-bound..bound)))
            .collect();
        Parameter { data, dims: shape }
    };

    let kk = config.kernel * config.kernel;
    for d in &dims {
        let fan_in = (d.in_c * kk) as f32;
        let w_bound = (6.0 / fan_in).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        params.push(uniform(
            d.out_c * d.in_c * kk,
            w_bound,
            vec![d.out_c, d.in_c, config.kernel, config.kernel],
        ));
        params.push(uniform(d.out_c, b_bound, vec![d.out_c]));
    }
    // The dense output layer starts small so initial embeddings sit near the
    // origin: every mined triplet is then active (loss ~ margin) and the
    // hinge drives the space open instead of starting saturated.
    let last_c = *config.channels.last().unwrap();
    let fan_in = last_c as f32;
    params.push(uniform(
        config.embedding_dim * last_c,
        (6.0 / fan_in).sqrt() * DENSE_INIT_SCALE,
        vec![config.embedding_dim, last_c],
    ));
    params.push(uniform(
        config.embedding_dim,
        DENSE_INIT_SCALE / fan_in.sqrt(),
        vec![config.embedding_dim],
    ));

    Ok(Network {
        config,
        params,
        dims,
    })
}

/// Per-batch activations retained for the backward pass.
pub struct TrainingCache<T> {
    batch: usize,
    /// per block: conv input, post-ReLU output, pool argmax indices
    inputs: Vec<Vec<T>>,
    post_relu: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    /// dense input (global average pooled), per item
    dense_in: Vec<T>,
}

impl<T: Scalar> TrainingCache<T> {
    /// ReLU activity pattern of a block over the whole batch. A perturbation
    /// that leaves every mask and every pool argmax unchanged stays on one
    /// affine piece of the network, which is what finite-difference checks
    /// need to be valid.
    pub fn relu_mask(&self, block: usize) -> Vec<bool> {
        self.post_relu[block].iter().map(|v| v.to_f64() > 0.0).collect()
    }

    /// Pool argmax indices of a block over the whole batch.
    pub fn pool_argmax(&self, block: usize) -> &[u32] {
        &self.argmax[block]
    }

    /// Post-ReLU activations of a block over the whole batch, as f64.
    pub fn post_relu_values(&self, block: usize) -> Vec<f64> {
        self.post_relu[block].iter().map(|v| v.to_f64()).collect()
    }
}

fn im2col<T: Scalar>(
    input: &[T],
    d: BlockDims,
    kernel: usize,
    cols: &mut [T],
) {
    let pad = kernel / 2;
    let n = d.h * d.w;
    debug_assert_eq!(cols.len(), d.in_c * kernel * kernel * n);
    let mut row = 0usize;
    for ic in 0..d.in_c {
        let plane = &input[ic * n..(ic + 1) * n];
        for kr in 0..kernel {
            for kc in 0..kernel {
                let base = row * n;
                row += 1;
                for r in 0..d.h {
                    let ir = r as isize + kr as isize - pad as isize;
                    let out_off = base + r * d.w;
                    if ir < 0 || ir >= d.h as isize {
                        cols[out_off..out_off + d.w].fill(T::ZERO);
                        continue;
                    }
                    let in_off = ir as usize * d.w;
                    for c in 0..d.w {
                        let icol = c as isize + kc as isize - pad as isize;
                        cols[out_off + c] = if icol < 0 || icol >= d.w as isize {
                            T::ZERO
                        } else {
                            plane[in_off + icol as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: BlockDims, kernel: usize, out: &mut [T]) {
    let pad = kernel / 2;
    let n = d.h * d.w;
    let mut row = 0usize;
    for ic in 0..d.in_c {
        let plane_off = ic * n;
        for kr in 0..kernel {
            for kc in 0..kernel {
                let base = row * n;
                row += 1;
                for r in 0..d.h {
                    let ir = r as isize + kr as isize - pad as isize;
                    if ir < 0 || ir >= d.h as isize {
                        continue;
                    }
                    let in_off = plane_off + ir as usize * d.w;
                    for c in 0..d.w {
                        let icol = c as isize + kc as isize - pad as isize;
                        if icol >= 0 && icol < d.w as isize {
                            out[in_off + icol as usize] =
                                out[in_off + icol as usize].add(cols[base + r * d.w + c]);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn input_width(&self) -> usize {
        self.config.input_width
    }

    fn last_channels(&self) -> usize {
        *self.config.channels.last().unwrap()
    }

    /// Run one block forward. Returns (post_relu, pooled, argmax).
    fn block_forward(
        &self,
        b: usize,
        input: &[T],
        cols: &mut Vec<T>,
    ) -> (Vec<T>, Vec<T>, Vec<u32>) {
        let d = self.dims[b];
        let kernel = self.config.kernel;
        let kk = kernel * kernel;
        let n = d.h * d.w;
        let k_dim = d.in_c * kk;
        cols.resize(k_dim * n, T::ZERO);
        im2col(input, d, kernel, cols);

        let weight = &self.params[2 * b].data;
        let bias = &self.params[2 * b + 1].data;
        let mut conv = vec![T::ZERO; d.out_c * n];
        unsafe {
            T::gemm(
                d.out_c,
                k_dim,
                n,
                T::from_f64(1.0),
                weight.as_ptr(),
                k_dim as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::ZERO,
                conv.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        // bias + ReLU
        for oc in 0..d.out_c {
            let bv = bias[oc];
            for v in &mut conv[oc * n..(oc + 1) * n] {
                let x = v.add(bv);
                *v = if x.to_f64() > 0.0 { x } else { T::ZERO };
            }
        }

        // 2x2 max pool, stride 2, first occurrence wins ties (row-major scan)
        let pn = d.ph * d.pw;
        let mut pooled = vec![T::ZERO; d.out_c * pn];
        let mut argmax = vec![0u32; d.out_c * pn];
        for oc in 0..d.out_c {
            let plane = &conv[oc * n..(oc + 1) * n];
            for pr in 0..d.ph {
                for pc in 0..d.pw {
                    let mut best_idx = (2 * pr) * d.w + 2 * pc;
                    let mut best = plane[best_idx];
                    for (dr, dc) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (2 * pr + dr) * d.w + (2 * pc + dc);
                        if plane[idx].to_f64() > best.to_f64() {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    pooled[oc * pn + pr * d.pw + pc] = best;
                    argmax[oc * pn + pr * d.pw + pc] = best_idx as u32;
                }
            }
        }
        (conv, pooled, argmax)
    }

    fn forward_one(&self, input: Vec<T>, mut collect: Option<&mut TrainingCache<T>>) -> Vec<T> {
        let mut cols = Vec::new();
        let mut act = input;
        for b in 0..self.config.n_blocks {
            if let Some(cache) = collect.as_mut() {
                cache.inputs[b].extend_from_slice(&act);
            }
            let (post_relu, pooled, argmax) = self.block_forward(b, &act, &mut cols);
            if let Some(cache) = collect.as_mut() {
                cache.post_relu[b].extend_from_slice(&post_relu);
                cache.argmax[b].extend_from_slice(&argmax);
            }
            act = pooled;
        }

        // global average pool per channel
        let last = *self.dims.last().unwrap();
        let pn = last.ph * last.pw;
        let inv = T::from_f64(1.0 / pn as f64);
        let mut gap = vec![T::ZERO; last.out_c];
        for (oc, g) in gap.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &act[oc * pn..(oc + 1) * pn] {
                acc = acc.add(v);
            }
            *g = acc.mul(inv);
        }
        if let Some(cache) = collect.as_mut() {
            cache.dense_in.extend_from_slice(&gap);
        }

        // dense
        let last_c = self.last_channels();
        let weight = &self.params[self.params.len() - 2].data;
        let bias = &self.params[self.params.len() - 1].data;
        let mut out = vec![T::ZERO; self.config.embedding_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &weight[j * last_c..(j + 1) * last_c];
            let mut acc = bias[j];
            for (wv, xv) in row.iter().zip(&gap) {
                acc = acc.add(wv.mul(*xv));
            }
            *o = acc;
        }
        out
    }

    fn check_width(&self, values_len: usize, width: usize) -> Result<(), NetError> {
        if width != self.config.input_width
            || values_len != self.config.input_width * self.config.input_height
        {
            return Err(NetError::ShapeMismatch(format!(
                "patch is {}x{} values={}, network expects {}x{}",
                width,
                if width > 0 { values_len / width } else { 0 },
                values_len,
                self.config.input_width,
                self.config.input_height
            )));
        }
        Ok(())
    }

    /// Inference forward pass for a single patch.
    pub fn forward(&self, patch: &SpectrogramPatch) -> Result<Embedding, NetError> {
        self.check_width(patch.values.len(), patch.width)?;
        let input: Vec<T> = patch.values.iter().map(|&v| T::from_f32(v)).collect();
        let out = self.forward_one(input, None);
        let values: Vec<f64> = out.iter().map(|v| v.to_f64()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("embedding output".into()));
        }
        Ok(Embedding {
            values,
            source: Some((patch.source_id.clone(), patch.start_ms)),
            speaker_id: patch.speaker_id.clone(),
        })
    }

    /// Training-mode forward over a batch of raw patch values; retains the
    /// activations needed by [`Network::backward`].
    pub fn forward_training(
        &self,
        batch: &[&[f32]],
    ) -> Result<(Vec<Vec<T>>, TrainingCache<T>), NetError> {
        let expect = self.config.input_width * self.config.input_height;
        let mut cache = TrainingCache {
            batch: batch.len(),
            inputs: vec![Vec::new(); self.config.n_blocks],
            post_relu: vec![Vec::new(); self.config.n_blocks],
            argmax: vec![Vec::new(); self.config.n_blocks],
            dense_in: Vec::new(),
        };
        let mut outs = Vec::with_capacity(batch.len());
        for (i, values) in batch.iter().enumerate() {
            if values.len() != expect {
                return Err(NetError::ShapeMismatch(format!(
                    "batch item {i} has {} values, expected {expect}",
                    values.len()
                )));
            }
            let input: Vec<T> = values.iter().map(|&v| T::from_f32(v)).collect();
            outs.push(self.forward_one(input, Some(&mut cache)));
        }
        Ok((outs, cache))
    }

    /// Exact reverse-mode gradients for every parameter given upstream
    /// gradients on each embedding in the batch.
    pub fn backward(
        &self,
        cache: &TrainingCache<T>,
        upstream: &[Vec<T>],
    ) -> Result<Gradients<T>, NetError> {
        if upstream.len() != cache.batch {
            return Err(NetError::NoCachedActivations {
                expected: cache.batch,
                got: upstream.len(),
            });
        }
        let mut grads: Gradients<T> = self
            .params
            .iter()
            .map(|p| vec![T::ZERO; p.data.len()])
            .collect();

        let kernel = self.config.kernel;
        let kk = kernel * kernel;
        let last = *self.dims.last().unwrap();
        let last_c = self.last_channels();
        let emb = self.config.embedding_dim;
        let dense_w = self.params.len() - 2;
        let dense_b = self.params.len() - 1;
        let mut cols = Vec::new();

        for item in 0..cache.batch {
            let g_out = &upstream[item];
            if g_out.len() != emb {
                return Err(NetError::ShapeMismatch(format!(
                    "upstream gradient {item} has {} entries, expected {emb}",
                    g_out.len()
                )));
            }
            let gap = &cache.dense_in[item * last_c..(item + 1) * last_c];

            // dense backward
            let weight = &self.params[dense_w].data;
            let mut d_gap = vec![T::ZERO; last_c];
            for j in 0..emb {
                let gj = g_out[j];
                grads[dense_b][j] = grads[dense_b][j].add(gj);
                let w_row = &weight[j * last_c..(j + 1) * last_c];
                let gw_row = &mut grads[dense_w][j * last_c..(j + 1) * last_c];
                for c in 0..last_c {
                    gw_row[c] = gw_row[c].add(gj.mul(gap[c]));
                    d_gap[c] = d_gap[c].add(gj.mul(w_row[c]));
                }
            }

            // global average pool backward
            let pn = last.ph * last.pw;
            let inv = T::from_f64(1.0 / pn as f64);
            let mut d_pooled = vec![T::ZERO; last_c * pn];
            for oc in 0..last_c {
                let dv = d_gap[oc].mul(inv);
                for v in &mut d_pooled[oc * pn..(oc + 1) * pn] {
                    *v = dv;
                }
            }

            // blocks, last to first
            for b in (0..self.config.n_blocks).rev() {
                let d = self.dims[b];
                let n = d.h * d.w;
                let pn = d.ph * d.pw;
                let conv_len = d.out_c * n;
                let post_relu =
                    &cache.post_relu[b][item * conv_len..(item + 1) * conv_len];
                let argmax = &cache.argmax[b][item * d.out_c * pn..(item + 1) * d.out_c * pn];
                let in_len = d.in_c * n;
                let input = &cache.inputs[b][item * in_len..(item + 1) * in_len];

                // pool backward: gradient flows to the argmax entry
                let mut d_conv = vec![T::ZERO; conv_len];
                for oc in 0..d.out_c {
                    for p in 0..pn {
                        let src = oc * pn + p;
                        let dst = oc * n + argmax[src] as usize;
                        d_conv[dst] = d_conv[dst].add(d_pooled[src]);
                    }
                }
                // ReLU backward
                for (dv, &a) in d_conv.iter_mut().zip(post_relu) {
                    if a.to_f64() <= 0.0 {
                        *dv = T::ZERO;
                    }
                }

                // conv backward
                let k_dim = d.in_c * kk;
                cols.resize(k_dim * n, T::ZERO);
                im2col(input, d, kernel, &mut cols);
                let one = T::from_f64(1.0);
                unsafe {
                    // grad_weight += d_conv [out_c x n] * cols^T [n x k_dim]
                    T::gemm(
                        d.out_c,
                        n,
                        k_dim,
                        one,
                        d_conv.as_ptr(),
                        n as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        n as isize,
                        one,
                        grads[2 * b].as_mut_ptr(),
                        k_dim as isize,
                        1,
                    );
                }
                for oc in 0..d.out_c {
                    let mut acc = T::ZERO;
                    for &v in &d_conv[oc * n..(oc + 1) * n] {
                        acc = acc.add(v);
                    }
                    grads[2 * b + 1][oc] = grads[2 * b + 1][oc].add(acc);
                }

                if b > 0 {
                    // d_cols = W^T [k_dim x out_c] * d_conv [out_c x n]
                    let weight = &self.params[2 * b].data;
                    let mut d_cols = vec![T::ZERO; k_dim * n];
                    unsafe {
                        T::gemm(
                            k_dim,
                            d.out_c,
                            n,
                            one,
                            weight.as_ptr(),
                            1,
                            k_dim as isize,
                            d_conv.as_ptr(),
                            n as isize,
                            1,
                            T::ZERO,
                            d_cols.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    let mut d_input = vec![T::ZERO; in_len];
                    col2im_add(&d_cols, d, kernel, &mut d_input);
                    d_pooled = d_input;
                }
            }
        }
        Ok(grads)
    }

    /// Apply one optimizer update. Plain SGD writes `p -= lr * g`; the
    /// momentum variant keeps `v = 0.9 v + g` and applies `p -= lr * v`.
    pub fn step(&mut self, grads: &Gradients<T>, state: &mut OptimizerState<T>) -> Result<(), NetError> {
        if grads.len() != self.params.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.data.len() != g.len() {
                return Err(NetError::ShapeMismatch(format!(
                    "gradient of {} entries for parameter of {}",
                    g.len(),
                    p.data.len()
                )));
            }
        }
        let lr = T::from_f64(self.config.learning_rate);
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data.iter_mut().zip(g) {
                        *pv = pv.sub(lr.mul(*gv));
                    }
                }
            }
            Optimizer::SgdMomentum => {
                state.ensure_like(&self.params);
                for ((p, g), v) in self.params.iter_mut().zip(grads).zip(&mut state.velocity) {
                    for ((pv, gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vv = T::from_f64(0.9).mul(*vv).add(*gv);
                        *pv = pv.sub(lr.mul(*vv));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Momentum buffers; empty until the first momentum step.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            velocity: Vec::new(),
        }
    }

    fn ensure_like(&mut self, params: &[Parameter<T>]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect();
        }
    }
}

// --- checkpoint format -------------------------------------------------------
//
// All integers little-endian. Layout:
//   magic        4 bytes  "TLFV"
//   version      u16      currently 1
//   input_width  u32
//   input_height u32
//   n_blocks     u32
//   n_channels   u32, then that many u32 channel counts
//   kernel       u32
//   embedding    u32
//   lr           f64
//   optimizer    u8       0 = sgd, 1 = sgd_momentum
//   init_seed    u64
//   n_tensors    u32
//   per tensor:  rank u32, dims u32 each, then product(dims) f32 values
// The same layout is documented for external consumers in
// docs/checkpoint_format.md.

const CHECKPOINT_MAGIC: &[u8; 4] = b"TLFV";
const CHECKPOINT_VERSION: u16 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or(NetError::TruncatedFile)?;
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, NetError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64, NetError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NetError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
}

/// Serialize the network (f32 parameter images) to the checkpoint format.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &std::path::Path) -> Result<(), NetError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &net.config;
    out.extend_from_slice(&(c.input_width as u32).to_le_bytes());
    out.extend_from_slice(&(c.input_height as u32).to_le_bytes());
    out.extend_from_slice(&(c.n_blocks as u32).to_le_bytes());
    out.extend_from_slice(&(c.channels.len() as u32).to_le_bytes());
    for &ch in &c.channels {
        out.extend_from_slice(&(ch as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.kernel as u32).to_le_bytes());
    out.extend_from_slice(&(c.embedding_dim as u32).to_le_bytes());
    out.extend_from_slice(&c.learning_rate.to_le_bytes());
    out.push(match c.optimizer {
        Optimizer::Sgd => 0,
        Optimizer::SgdMomentum => 1,
    });
    out.extend_from_slice(&c.init_seed.to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`]. Round-trips are bit-exact
/// for f32 networks.
pub fn load_checkpoint(path: &std::path::Path) -> Result<Network<f32>, NetError> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader {
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic);
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch(version));
    }
    let input_width = r.u32()? as usize;
    let input_height = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    let n_channels = r.u32()? as usize;
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        channels.push(r.u32()? as usize);
    }
    let kernel = r.u32()? as usize;
    let embedding_dim = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let optimizer = match r.u8()? {
        0 => Optimizer::Sgd,
        1 => Optimizer::SgdMomentum,
        other => {
            return Err(NetError::InvalidConfig(format!(
                "unknown optimizer code {other}"
            )))
        }
    };
    let init_seed = r.u64()?;
    let config = NetConfig {
        input_width,
        input_height,
        n_blocks,
        channels,
        kernel,
        embedding_dim,
        learning_rate,
        optimizer,
        init_seed,
    };
    config.validate()?;

    let n_tensors = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let b = r.take(4)?;
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        params.push(Parameter { data, dims });
    }
    if r.at != bytes.len() {
        return Err(NetError::InvalidConfig(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.at
        )));
    }

    let reference = build::<f32>(config.clone())?;
    if reference.params.len() != params.len()
        || reference
            .params
            .iter()
            .zip(&params)
            .any(|(a, b)| a.dims != b.dims)
    {
        return Err(NetError::InvalidConfig(
            "tensor shapes do not match the config".into(),
        ));
    }
    let dims = block_dims(&config);
    Ok(Network {
        config,
        params,
        dims,
    })
}
