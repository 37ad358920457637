//! Residual MLP internals shared by the reconstruction and contrastive
//! models.
//!
//! The trunk is the same for both objectives: an input projection to
//! `width`, then `n_blocks` residual blocks `h ← h + relu(W h + b)`, then an
//! affine map to `out_dim` logits. The objective-specific heads (softmax
//! cross-entropy, sigmoid squared loss) live in the public modules.
//!
//! Parameters are stored in one flat buffer in a fixed, documented order —
//! input weights (row-major, `in_dim x width`), input bias, then per block
//! weights (`width x width`) and bias, then output weights
//! (`width x out_dim`) and output bias. Checkpoints, the AMSGrad state, and
//! finite-difference tests all address parameters through this layout.
//!
//! Initialization is symmetric uniform `±1/√fan_in` for the input and block
//! weights, zero biases, and a zero output layer, so the initial softmax
//! predictor is exactly uniform and the initial pair classifier outputs
//! exactly ½.

use rand::distributions::{Distribution, Uniform};

use crate::linalg::gemm;
use crate::rng::stream_rng;

/// Shape of a residual MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MlpDims {
    pub in_dim: usize,
    pub width: usize,
    pub n_blocks: usize,
    pub out_dim: usize,
}

impl MlpDims {
    pub fn param_count(&self) -> usize {
        self.in_dim * self.width
            + self.width
            + self.n_blocks * (self.width * self.width + self.width)
            + self.width * self.out_dim
            + self.out_dim
    }

    /// Offset of the input weight matrix (always zero; here for symmetry).
    fn input_w(&self) -> usize {
        0
    }

    fn input_b(&self) -> usize {
        self.in_dim * self.width
    }

    /// Offsets of block `i`'s weights and bias.
    fn block(&self, i: usize) -> (usize, usize) {
        let base = self.input_b() + self.width + i * (self.width * self.width + self.width);
        (base, base + self.width * self.width)
    }

    fn out_w(&self) -> usize {
        self.block(self.n_blocks).0
    }

    fn out_b(&self) -> usize {
        self.out_w() + self.width * self.out_dim
    }
}

/// Flat-parameter residual MLP trunk with batched forward/backward.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MlpCore {
    pub dims: MlpDims,
    pub params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct BatchCache {
    batch: usize,
    /// Input batch, `batch x in_dim`.
    x: Vec<f64>,
    /// Hidden states entering each block plus the final one: `n_blocks + 1`
    /// buffers of `batch x width`.
    hs: Vec<Vec<f64>>,
    /// Pre-activations of each block: `n_blocks` buffers of `batch x width`.
    zs: Vec<Vec<f64>>,
    /// Output logits, `batch x out_dim`.
    pub logits: Vec<f64>,
}

impl MlpCore {
    /// Fresh model with the documented initialization, deterministic in
    /// `seed`.
    pub fn init(dims: MlpDims, seed: u64) -> Self {
        let mut params = vec![0.0; dims.param_count()];
        let mut rng = stream_rng(seed, 0);
        let input_bound = 1.0 / (dims.in_dim as f64).sqrt();
        let input = Uniform::new_inclusive(-input_bound, input_bound);
        for p in &mut params[dims.input_w()..dims.input_w() + dims.in_dim * dims.width] {
            *p = input.sample(&mut rng);
        }
        let block_bound = 1.0 / (dims.width as f64).sqrt();
        let block = Uniform::new_inclusive(-block_bound, block_bound);
        for i in 0..dims.n_blocks {
            let (w_off, _) = dims.block(i);
            for p in &mut params[w_off..w_off + dims.width * dims.width] {
                *p = block.sample(&mut rng);
            }
        }
        // Output weights and all biases stay zero.
        Self { dims, params }
    }

    pub fn from_params(dims: MlpDims, params: Vec<f64>) -> Option<Self> {
        (params.len() == dims.param_count()).then_some(Self { dims, params })
    }

    /// Forward pass over a `batch x in_dim` row-major input, retaining the
    /// activations needed for [`Self::backward`].
    pub fn forward(&self, x: &[f64], batch: usize) -> BatchCache {
        let d = &self.dims;
        debug_assert_eq!(x.len(), batch * d.in_dim);
        let mut hs = Vec::with_capacity(d.n_blocks + 1);
        let mut zs = Vec::with_capacity(d.n_blocks);

        // Input projection.
        let mut h = vec![0.0; batch * d.width];
        gemm(
            batch,
            d.in_dim,
            d.width,
            x,
            [d.in_dim as isize, 1],
            &self.params[d.input_w()..],
            [d.width as isize, 1],
            &mut h,
        );
        add_bias(&mut h, &self.params[d.input_b()..d.input_b() + d.width]);
        hs.push(h);

        // Residual blocks.
        for i in 0..d.n_blocks {
            let (w_off, b_off) = d.block(i);
            let h_in = hs.last().expect("nonempty");
            let mut z = vec![0.0; batch * d.width];
            gemm(
                batch,
                d.width,
                d.width,
                h_in,
                [d.width as isize, 1],
                &self.params[w_off..],
                [d.width as isize, 1],
                &mut z,
            );
            add_bias(&mut z, &self.params[b_off..b_off + d.width]);
            let mut h_out = h_in.clone();
            for (h, &zv) in h_out.iter_mut().zip(&z) {
                if zv > 0.0 {
                    *h += zv;
                }
            }
            zs.push(z);
            hs.push(h_out);
        }

        // Output head.
        let mut logits = vec![0.0; batch * d.out_dim];
        gemm(
            batch,
            d.width,
            d.out_dim,
            hs.last().expect("nonempty"),
            [d.width as isize, 1],
            &self.params[d.out_w()..],
            [d.out_dim as isize, 1],
            &mut logits,
        );
        add_bias(&mut logits, &self.params[d.out_b()..d.out_b() + d.out_dim]);

        BatchCache { batch, x: x.to_vec(), hs, zs, logits }
    }

    /// Backward pass from `d(loss)/d(logits)`, returning flat gradients in
    /// the parameter layout. `dlogits` must already include any batch-mean
    /// scaling.
    pub fn backward(&self, cache: &BatchCache, dlogits: &[f64]) -> Vec<f64> {
        let d = &self.dims;
        let batch = cache.batch;
        debug_assert_eq!(dlogits.len(), batch * d.out_dim);
        let mut grads = vec![0.0; d.param_count()];

        // Output head: dW_out = H_lastᵀ · dL, db_out = column sums.
        let h_last = cache.hs.last().expect("nonempty");
        gemm(
            d.width,
            batch,
            d.out_dim,
            h_last,
            [1, d.width as isize],
            dlogits,
            [d.out_dim as isize, 1],
            &mut grads[d.out_w()..d.out_w() + d.width * d.out_dim],
        );
        column_sums(dlogits, batch, d.out_dim, &mut grads[d.out_b()..d.out_b() + d.out_dim]);

        // dH entering the block stack from above.
        let mut dh = vec![0.0; batch * d.width];
        gemm(
            batch,
            d.out_dim,
            d.width,
            dlogits,
            [d.out_dim as isize, 1],
            &self.params[d.out_w()..],
            [1, d.out_dim as isize],
            &mut dh,
        );

        let mut dz = vec![0.0; batch * d.width];
        let mut dh_extra = vec![0.0; batch * d.width];
        for i in (0..d.n_blocks).rev() {
            let (w_off, b_off) = d.block(i);
            // dZ = dH ⊙ relu'(Z).
            for ((dzv, &dhv), &zv) in dz.iter_mut().zip(&dh).zip(&cache.zs[i]) {
                *dzv = if zv > 0.0 { dhv } else { 0.0 };
            }
            // dW_i = H_inᵀ · dZ, db_i = column sums of dZ.
            gemm(
                d.width,
                batch,
                d.width,
                &cache.hs[i],
                [1, d.width as isize],
                &dz,
                [d.width as isize, 1],
                &mut grads[w_off..w_off + d.width * d.width],
            );
            column_sums(&dz, batch, d.width, &mut grads[b_off..b_off + d.width]);
            // dH_in = dH (residual path) + dZ · Wᵀ.
            dh_extra.iter_mut().for_each(|v| *v = 0.0);
            gemm(
                batch,
                d.width,
                d.width,
                &dz,
                [d.width as isize, 1],
                &self.params[w_off..],
                [1, d.width as isize],
                &mut dh_extra,
            );
            for (dhv, &ev) in dh.iter_mut().zip(&dh_extra) {
                *dhv += ev;
            }
        }

        // Input projection.
        gemm(
            d.in_dim,
            batch,
            d.width,
            &cache.x,
            [1, d.in_dim as isize],
            &dh,
            [d.width as isize, 1],
            &mut grads[d.input_w()..d.input_w() + d.in_dim * d.width],
        );
        column_sums(&dh, batch, d.width, &mut grads[d.input_b()..d.input_b() + d.width]);
        grads
    }
}

fn add_bias(buf: &mut [f64], bias: &[f64]) {
    for row in buf.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(buf: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(buf.len(), rows * cols);
    debug_assert_eq!(out.len(), cols);
    for row in buf.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// AMSGrad optimizer over a flat parameter buffer, with bias correction
/// (the common deep-learning-framework variant): the second-moment estimate
/// is clamped to its running maximum before the denominator is formed.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub vhat: Vec<f64>,
}

impl AmsGrad {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: vec![0.0; n], v: vec![0.0; n], vhat: vec![0.0; n] }
    }

    /// One update; `weight_decay` adds an L2 term to the gradient.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = lr / bc1;
        for i in 0..params.len() {
            let g = grads[i] + weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.v[i] > self.vhat[i] {
                self.vhat[i] = self.v[i];
            }
            let denom = (self.vhat[i] / bc2).sqrt() + self.eps;
            params[i] -= lr_t * self.m[i] / denom;
        }
    }
}

/// Optimizer-and-schedule state stored alongside parameters so training can
/// resume bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CoreTrainerState {
    pub epoch: u64,
    pub lr: f64,
    pub best_val: f64,
    pub since_best: u64,
    /// First-epoch training loss (NaN while unset); divergence reference.
    pub initial_loss: f64,
    pub diverged_streak: u64,
    pub opt: AmsGrad,
}

pub(crate) const CKPT_MAGIC: &[u8; 8] = b"TSSLCKPT";
pub(crate) const CKPT_VERSION: u32 = 1;
pub(crate) const CKPT_KIND_RECONSTRUCT: u8 = 0;
pub(crate) const CKPT_KIND_CONTRASTIVE: u8 = 1;

/// Writes a checkpoint: magic, version, model kind, shape header
/// (`vocab`, `k`, `t`, `in_dim`, `width`, `n_blocks`, `out_dim`), the flat
/// little-endian `f64` parameter block in layout order, and optionally the
/// trainer state (schedule scalars plus the AMSGrad moment buffers).
pub(crate) fn write_core_checkpoint(
    w: &mut impl std::io::Write,
    kind: u8,
    vocab: u64,
    k: u64,
    t: u64,
    core: &MlpCore,
    trainer: Option<&CoreTrainerState>,
) -> std::io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    for value in [
        vocab,
        k,
        t,
        core.dims.in_dim as u64,
        core.dims.width as u64,
        core.dims.n_blocks as u64,
        core.dims.out_dim as u64,
        core.params.len() as u64,
    ] {
        w.write_all(&value.to_le_bytes())?;
    }
    write_f64s(w, &core.params)?;
    match trainer {
        None => w.write_all(&[0u8])?,
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.epoch.to_le_bytes())?;
            w.write_all(&state.lr.to_le_bytes())?;
            w.write_all(&state.best_val.to_le_bytes())?;
            w.write_all(&state.since_best.to_le_bytes())?;
            w.write_all(&state.initial_loss.to_le_bytes())?;
            w.write_all(&state.diverged_streak.to_le_bytes())?;
            w.write_all(&state.opt.step.to_le_bytes())?;
            w.write_all(&state.opt.beta1.to_le_bytes())?;
            w.write_all(&state.opt.beta2.to_le_bytes())?;
            w.write_all(&state.opt.eps.to_le_bytes())?;
            write_f64s(w, &state.opt.m)?;
            write_f64s(w, &state.opt.v)?;
            write_f64s(w, &state.opt.vhat)?;
        }
    }
    Ok(())
}

pub(crate) struct CoreCheckpoint {
    pub kind: u8,
    pub vocab: u64,
    pub k: u64,
    pub t: u64,
    pub core: MlpCore,
    pub trainer: Option<CoreTrainerState>,
}

/// Reads a checkpoint written by [`write_core_checkpoint`]. Returns a
/// string describing the problem on malformed input.
pub(crate) fn read_core_checkpoint(r: &mut impl std::io::Read) -> Result<CoreCheckpoint, String> {
    let io = |e: std::io::Error| format!("checkpoint read failed: {e}");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let version = read_u32(r).map_err(io)?;
    if version != CKPT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(io)?;
    let vocab = read_u64(r).map_err(io)?;
    let k = read_u64(r).map_err(io)?;
    let t = read_u64(r).map_err(io)?;
    let in_dim = read_u64(r).map_err(io)? as usize;
    let width = read_u64(r).map_err(io)? as usize;
    let n_blocks = read_u64(r).map_err(io)? as usize;
    let out_dim = read_u64(r).map_err(io)? as usize;
    let param_count = read_u64(r).map_err(io)? as usize;
    let dims = MlpDims { in_dim, width, n_blocks, out_dim };
    if dims.param_count() != param_count {
        return Err(format!(
            "parameter count {param_count} does not match shape header ({} expected)",
            dims.param_count()
        ));
    }
    let params = read_f64s(r, param_count).map_err(io)?;
    let core = MlpCore::from_params(dims, params).ok_or("inconsistent parameter block")?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(io)?;
    let trainer = match flag[0] {
        0 => None,
        1 => {
            let epoch = read_u64(r).map_err(io)?;
            let lr = read_f64(r).map_err(io)?;
            let best_val = read_f64(r).map_err(io)?;
            let since_best = read_u64(r).map_err(io)?;
            let initial_loss = read_f64(r).map_err(io)?;
            let diverged_streak = read_u64(r).map_err(io)?;
            let step = read_u64(r).map_err(io)?;
            let beta1 = read_f64(r).map_err(io)?;
            let beta2 = read_f64(r).map_err(io)?;
            let eps = read_f64(r).map_err(io)?;
            let m = read_f64s(r, param_count).map_err(io)?;
            let v = read_f64s(r, param_count).map_err(io)?;
            let vhat = read_f64s(r, param_count).map_err(io)?;
            Some(CoreTrainerState {
                epoch,
                lr,
                best_val,
                since_best,
                initial_loss,
                diverged_streak,
                opt: AmsGrad { beta1, beta2, eps, step, m, v, vhat },
            })
        }
        other => return Err(format!("bad trainer-state flag {other}")),
    };
    Ok(CoreCheckpoint { kind: kind[0], vocab, k, t, core, trainer })
}

fn write_f64s(w: &mut impl std::io::Write, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32(r: &mut impl std::io::Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl std::io::Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl std::io::Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl std::io::Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}
