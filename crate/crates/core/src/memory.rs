//! Online reconstruction memory.
//!
//! A two-layer GELU MLP `z -> W2 gelu(W1 z + b1) + b2` trained on the tile
//! stream itself. Each tile is scored by the Frobenius norm of the Huber
//! reconstruction gradient *before* the memory is touched; the score then
//! decides between one clipped SGD step and a multiplicative decay.
//!
//! For this architecture every parameter gradient is a rank-1 outer product,
//! so the squared gradient norm factors as
//!
//! ```text
//! |g_out|^2 (1 + |h|^2) + |g_hidden|^2 (1 + |z|^2)
//! ```
//!
//! and scoring needs only two passes over the weights.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::rng::DeterministicRng;

const SNAPSHOT_MAGIC: &[u8; 4] = b"PNMS";
const SNAPSHOT_VERSION: u32 = 1;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    gelu_pair(x).0
}

/// d/dx GELU(x) = Phi(x) + x phi(x).
#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    gelu_pair(x).1
}

/// (GELU(x), GELU'(x)) from a single erf evaluation.
#[inline]
pub fn gelu_pair(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    (x * cdf, cdf + x * pdf)
}

#[inline]
fn scale_row(row: &mut [f64], alpha: f64) -> &[f64] {
    for x in row.iter_mut() {
        *x *= alpha;
    }
    row
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Huber loss with mean reduction and its gradient with respect to `output`.
pub fn huber_loss(output: &[f64], target: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(NavError::InvalidArgument(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    if output.len() != target.len() {
        return Err(NavError::DimensionMismatch {
            expected: output.len(),
            got: target.len(),
        });
    }
    let mut grad = vec![0.0; output.len()];
    let loss = huber_into(output, target, delta, &mut grad);
    Ok((loss, grad))
}

fn huber_into(output: &[f64], target: &[f64], delta: f64, grad: &mut [f64]) -> f64 {
    let inv_d = 1.0 / output.len() as f64;
    let mut total = 0.0;
    for ((o, t), g) in output.iter().zip(target).zip(grad.iter_mut()) {
        let (h, dh) = huber_term(o - t, delta);
        total += h;
        *g = dh * inv_d;
    }
    total * inv_d
}

#[inline]
fn huber_term(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// Everything the scoring pass produces for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SurpriseResult {
    pub sigma: f64,
    pub loss: f64,
    /// dL/d(output).
    pub residual_grad: Vec<f64>,
    /// dL/d(pre-activation), backpropagated through W2 and GELU.
    pub hidden_grad: Vec<f64>,
    pub hidden_act: Vec<f64>,
    pub input_norm_sq: f64,
    pub hidden_norm_sq: f64,
}

/// Fully materialized parameter gradient, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradient {
    pub fn frobenius_norm(&self) -> f64 {
        (norm_sq(&self.w1) + norm_sq(&self.b1) + norm_sq(&self.w2) + norm_sq(&self.b2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    WarmupUpdate,
    Update,
    Decay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub high_fraction: f64,
}

#[derive(Debug, Default)]
struct Scratch {
    /// GELU'(pre-activation).
    dact: Vec<f64>,
    hidden: Vec<f64>,
    back: Vec<f64>,
    residual_grad: Vec<f64>,
    /// Decay deferred into the next scoring pass of a stream.
    pending_decay: Option<f64>,
}

/// Per-slide (or per-ROI) online memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    d: usize,
    hidden: usize,
    /// hidden x d, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// d x hidden, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
    step_count: usize,
    warmup_scores: Vec<f64>,
    threshold: Option<f64>,
    surprise_history: Vec<f64>,
    update_count: usize,
    decay_count: usize,
}

/// Fresh memory with PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
///
/// Draw order: W1 (row-major), b1, W2 (row-major), b2.
pub fn init_memory(cfg: &EngineConfig, rng: &mut DeterministicRng) -> MemoryState {
    let (d, hidden) = (cfg.d, cfg.hidden);
    assert!(d > 0 && hidden > 0, "memory dimensions must be positive");
    let bound1 = 1.0 / (d as f64).sqrt();
    let bound2 = 1.0 / (hidden as f64).sqrt();
    let mut draw = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng.uniform(-b, b)).collect() };
    let w1 = draw(hidden * d, bound1);
    let b1 = draw(hidden, bound1);
    let w2 = draw(d * hidden, bound2);
    let b2 = draw(d, bound2);
    MemoryState::from_params(d, hidden, w1, b1, w2, b2).expect("shapes are consistent")
}

/// Scoring pass over the given weight rows. Leaves GELU', hidden activation,
/// hidden gradient (in `back`) and output gradient in `s`; returns (sigma, loss).
fn score_kernel<'a>(
    w1_rows: impl Iterator<Item = &'a [f64]>,
    b1: &[f64],
    w2_rows: impl Iterator<Item = &'a [f64]>,
    b2: &[f64],
    z: &[f64],
    delta: f64,
    s: &mut Scratch,
) -> (f64, f64) {
    let (d, hdim) = (b2.len(), b1.len());
    s.dact.resize(hdim, 0.0);
    s.hidden.resize(hdim, 0.0);
    s.back.clear();
    s.back.resize(hdim, 0.0);
    s.residual_grad.resize(d, 0.0);

    for (((row, b), dp), h) in w1_rows.zip(b1).zip(s.dact.iter_mut()).zip(s.hidden.iter_mut()) {
        (*h, *dp) = gelu_pair(dot(row, z) + b);
    }

    // One pass over W2: output row, residual, and W2^T g accumulation.
    let inv_d = 1.0 / d as f64;
    let mut loss = 0.0;
    for (j, row) in w2_rows.enumerate() {
        let out = dot(row, &s.hidden) + b2[j];
        let (h, dh) = huber_term(out - z[j], delta);
        loss += h;
        let g = dh * inv_d;
        s.residual_grad[j] = g;
        if g != 0.0 {
            axpy(g, row, &mut s.back);
        }
    }
    loss *= inv_d;

    for (b, dp) in s.back.iter_mut().zip(&s.dact) {
        *b *= dp;
    }

    let sigma_sq = norm_sq(&s.residual_grad) * (1.0 + norm_sq(&s.hidden)) + norm_sq(&s.back) * (1.0 + norm_sq(z));
    (sigma_sq.sqrt(), loss)
}

impl MemoryState {
    pub fn from_params(
        d: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let checks = [
            (w1.len(), hidden * d),
            (b1.len(), hidden),
            (w2.len(), d * hidden),
            (b2.len(), d),
        ];
        for (got, expected) in checks {
            if got != expected {
                return Err(NavError::DimensionMismatch { expected, got });
            }
        }
        if d == 0 || hidden == 0 {
            return Err(NavError::InvalidArgument("memory dimensions must be positive".into()));
        }
        Ok(Self {
            d,
            hidden,
            w1,
            b1,
            w2,
            b2,
            step_count: 0,
            warmup_scores: Vec::new(),
            threshold: None,
            surprise_history: Vec::new(),
            update_count: 0,
            decay_count: 0,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn w1(&self) -> &[f64] {
        &self.w1
    }
    pub fn b1(&self) -> &[f64] {
        &self.b1
    }
    pub fn w2(&self) -> &[f64] {
        &self.w2
    }
    pub fn b2(&self) -> &[f64] {
        &self.b2
    }
    pub fn step_count(&self) -> usize {
        self.step_count
    }
    pub fn warmup_scores(&self) -> &[f64] {
        &self.warmup_scores
    }
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }
    pub fn surprise_history(&self) -> &[f64] {
        &self.surprise_history
    }
    /// Post-warm-up SGD steps (warm-up steps are counted by `warmup_scores().len()`).
    pub fn update_count(&self) -> usize {
        self.update_count
    }
    pub fn decay_count(&self) -> usize {
        self.decay_count
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * self.hidden + self.d + self.hidden
    }

    /// All parameters concatenated in (W1, b1, W2, b2) order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn all_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d {
            return Err(NavError::DimensionMismatch {
                expected: self.d,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Returns (output, hidden activation).
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(z)?;
        let hidden_act: Vec<f64> = self
            .w1
            .chunks_exact(self.d)
            .zip(&self.b1)
            .map(|(row, b)| gelu(dot(row, z) + b))
            .collect();
        let output = self
            .w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, &hidden_act) + b)
            .collect();
        Ok((output, hidden_act))
    }

    fn score_into(&self, z: &[f64], delta: f64, s: &mut Scratch) -> (f64, f64) {
        let (d, hdim) = (self.d, self.hidden);
        score_kernel(
            self.w1.chunks_exact(d),
            &self.b1,
            self.w2.chunks_exact(hdim),
            &self.b2,
            z,
            delta,
            s,
        )
    }

    /// Applies a decay and scores `z` in the same sweep over the weights.
    /// Bitwise identical to `decay` followed by `score_into`.
    fn decay_and_score(&mut self, alpha_f: f64, z: &[f64], delta: f64, s: &mut Scratch) -> (f64, f64) {
        let (d, hdim) = (self.d, self.hidden);
        for x in self.b1.iter_mut().chain(self.b2.iter_mut()) {
            *x *= alpha_f;
        }
        score_kernel(
            self.w1.chunks_exact_mut(d).map(|r| scale_row(r, alpha_f)),
            &self.b1,
            self.w2.chunks_exact_mut(hdim).map(|r| scale_row(r, alpha_f)),
            &self.b2,
            z,
            delta,
            s,
        )
    }

    /// Pre-update surprise of `z`. Does not modify the state.
    pub fn score_surprise(&self, z: &[f64], delta: f64) -> Result<SurpriseResult> {
        self.check_len(z)?;
        check_delta(delta)?;
        let mut s = Scratch::default();
        let (sigma, loss) = self.score_into(z, delta, &mut s);
        Ok(SurpriseResult {
            sigma,
            loss,
            input_norm_sq: norm_sq(z),
            hidden_norm_sq: norm_sq(&s.hidden),
            residual_grad: s.residual_grad,
            hidden_grad: s.back,
            hidden_act: s.hidden,
        })
    }

    /// Materializes the full Huber-loss gradient at the current parameters.
    pub fn full_gradient(&self, z: &[f64], delta: f64) -> Result<Gradient> {
        self.check_len(z)?;
        check_delta(delta)?;
        let mut s = Scratch::default();
        self.score_into(z, delta, &mut s);
        let mut w1 = Vec::with_capacity(self.w1.len());
        for &g in &s.back {
            w1.extend(z.iter().map(|&zi| g * zi));
        }
        let mut w2 = Vec::with_capacity(self.w2.len());
        for &g in &s.residual_grad {
            w2.extend(s.hidden.iter().map(|&h| g * h));
        }
        Ok(Gradient {
            w1,
            b1: s.back,
            w2,
            b2: s.residual_grad,
        })
    }

    /// Scores a row-major batch of inputs (n x d) against the frozen state.
    ///
    /// Uses matrix-matrix products, so results agree with `score_surprise`
    /// to rounding but not bit for bit.
    pub fn score_batch(&self, inputs: &[f64], delta: f64) -> Result<Vec<f64>> {
        check_delta(delta)?;
        if inputs.len() % self.d != 0 {
            return Err(NavError::DimensionMismatch {
                expected: self.d,
                got: inputs.len() % self.d,
            });
        }
        const CHUNK: usize = 256;
        let (d, hdim) = (self.d, self.hidden);
        let n_total = inputs.len() / d;
        let mut sigmas = Vec::with_capacity(n_total);
        let mut pre = vec![0.0; CHUNK * hdim];
        let mut act = vec![0.0; CHUNK * hdim];
        let mut out = vec![0.0; CHUNK * d];
        let mut back = vec![0.0; CHUNK * hdim];
        let inv_d = 1.0 / d as f64;

        for zs in inputs.chunks(CHUNK * d) {
            let n = zs.len() / d;
            // pre = Z W1^T
            unsafe {
                matrixmultiply::dgemm(
                    n, d, hdim, 1.0,
                    zs.as_ptr(), d as isize, 1,
                    self.w1.as_ptr(), 1, d as isize,
                    0.0,
                    pre.as_mut_ptr(), hdim as isize, 1,
                );
            }
            // pre is overwritten with GELU' once the activation is taken.
            for r in 0..n {
                let p = &mut pre[r * hdim..(r + 1) * hdim];
                let a = &mut act[r * hdim..(r + 1) * hdim];
                for ((pk, ak), b) in p.iter_mut().zip(a.iter_mut()).zip(&self.b1) {
                    let (g, gp) = gelu_pair(*pk + b);
                    *ak = g;
                    *pk = gp;
                }
            }
            // out = H W2^T
            unsafe {
                matrixmultiply::dgemm(
                    n, hdim, d, 1.0,
                    act.as_ptr(), hdim as isize, 1,
                    self.w2.as_ptr(), 1, hdim as isize,
                    0.0,
                    out.as_mut_ptr(), d as isize, 1,
                );
            }
            for r in 0..n {
                let o = &mut out[r * d..(r + 1) * d];
                let z = &zs[r * d..(r + 1) * d];
                for ((oj, zj), b) in o.iter_mut().zip(z).zip(&self.b2) {
                    let (_, dh) = huber_term(*oj + b - zj, delta);
                    *oj = dh * inv_d;
                }
            }
            // back = G_out W2
            unsafe {
                matrixmultiply::dgemm(
                    n, d, hdim, 1.0,
                    out.as_ptr(), d as isize, 1,
                    self.w2.as_ptr(), hdim as isize, 1,
                    0.0,
                    back.as_mut_ptr(), hdim as isize, 1,
                );
            }
            for r in 0..n {
                let g_out = &out[r * d..(r + 1) * d];
                let h = &act[r * hdim..(r + 1) * hdim];
                let z = &zs[r * d..(r + 1) * d];
                let mut gh_sq = 0.0;
                for (bk, gp) in back[r * hdim..(r + 1) * hdim].iter().zip(&pre[r * hdim..]) {
                    let g = bk * gp;
                    gh_sq += g * g;
                }
                let s2 = norm_sq(g_out) * (1.0 + norm_sq(h)) + gh_sq * (1.0 + norm_sq(z));
                sigmas.push(s2.sqrt());
            }
        }
        Ok(sigmas)
    }

    /// Scores `z`, records the score, then applies the warm-up / update /
    /// decay rule. The warm-up length is `cfg.t_w`.
    pub fn observe_tile(&mut self, z: &[f64], cfg: &EngineConfig) -> Result<(f64, StepAction)> {
        let mut scratch = Scratch::default();
        let result = self.observe_with(z, cfg, &mut scratch);
        self.flush_decay(&mut scratch);
        result
    }

    fn flush_decay(&mut self, s: &mut Scratch) {
        if let Some(alpha_f) = s.pending_decay.take() {
            self.decay(alpha_f);
        }
    }

    fn observe_with(
        &mut self,
        z: &[f64],
        cfg: &EngineConfig,
        s: &mut Scratch,
    ) -> Result<(f64, StepAction)> {
        self.check_len(z)?;
        check_delta(cfg.huber_delta)?;
        let (sigma, _) = match s.pending_decay.take() {
            Some(alpha_f) => self.decay_and_score(alpha_f, z, cfg.huber_delta, s),
            None => self.score_into(z, cfg.huber_delta, s),
        };
        self.surprise_history.push(sigma);

        let action = if self.step_count < cfg.t_w {
            self.warmup_scores.push(sigma);
            self.sgd_step(z, sigma, cfg, s);
            StepAction::WarmupUpdate
        } else {
            match self.threshold {
                Some(tau) if sigma > tau => {
                    self.sgd_step(z, sigma, cfg, s);
                    self.update_count += 1;
                    StepAction::Update
                }
                _ => {
                    s.pending_decay = Some(cfg.alpha_f);
                    self.decay_count += 1;
                    StepAction::Decay
                }
            }
        };
        self.step_count += 1;
        if self.step_count == cfg.t_w && self.threshold.is_none() {
            self.threshold = Some(threshold_from(&self.warmup_scores, cfg.lambda));
        }
        Ok((sigma, action))
    }

    /// Streams tiles given as f32 features, reusing one scratch buffer.
    pub(crate) fn observe_f32<'a, I>(&mut self, tiles: I, cfg: &EngineConfig) -> Result<Vec<(f64, StepAction)>>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut s = Scratch::default();
        let mut z = Vec::with_capacity(self.d);
        let mut out = Vec::new();
        let mut result = Ok(());
        for feature in tiles {
            z.clear();
            z.extend(feature.iter().map(|&v| v as f64));
            match self.observe_with(&z, cfg, &mut s) {
                Ok(step) => out.push(step),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        self.flush_decay(&mut s);
        result.map(|()| out)
    }

    /// Sets the threshold from whatever warm-up scores exist, if it was never
    /// set (streams shorter than the warm-up window). Returns true if it fired.
    pub fn finalize_threshold(&mut self, lambda: f64) -> bool {
        if self.threshold.is_none() && !self.warmup_scores.is_empty() {
            self.threshold = Some(threshold_from(&self.warmup_scores, lambda));
            true
        } else {
            false
        }
    }

    /// One clipped SGD step using the gradient left in `s` by `score_into`.
    fn sgd_step(&mut self, z: &[f64], grad_norm: f64, cfg: &EngineConfig, s: &Scratch) {
        if grad_norm == 0.0 {
            return;
        }
        let scale = if grad_norm > cfg.clip { cfg.clip / grad_norm } else { 1.0 };
        let step = cfg.lr * scale;
        let (d, hdim) = (self.d, self.hidden);
        for (j, row) in self.w2.chunks_exact_mut(hdim).enumerate() {
            let g = s.residual_grad[j];
            if g != 0.0 {
                axpy(-step * g, &s.hidden, row);
            }
        }
        for (b, g) in self.b2.iter_mut().zip(&s.residual_grad) {
            *b -= step * g;
        }
        for (k, row) in self.w1.chunks_exact_mut(d).enumerate() {
            let g = s.back[k];
            if g != 0.0 {
                axpy(-step * g, z, row);
            }
        }
        for (b, g) in self.b1.iter_mut().zip(&s.back) {
            *b -= step * g;
        }
    }

    fn decay(&mut self, alpha_f: f64) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for x in v.iter_mut() {
                *x *= alpha_f;
            }
        }
    }

    /// Mean and population std of the full surprise history plus the fraction
    /// of post-warm-up scores strictly above the threshold.
    pub fn summary_stats(&self) -> Result<SummaryStats> {
        if self.surprise_history.is_empty() {
            return Err(NavError::Empty("surprise history"));
        }
        let (mean, std) = mean_std(&self.surprise_history);
        let high_fraction = match self.threshold {
            None => 0.0,
            Some(tau) => {
                let post = &self.surprise_history[self.warmup_scores.len()..];
                let above = post.iter().filter(|&&s| s > tau).count();
                above as f64 / post.len().max(1) as f64
            }
        };
        Ok(SummaryStats {
            mean,
            std,
            high_fraction,
        })
    }

    /// SHA-256 over every parameter and all bookkeeping, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d as u64).to_le_bytes());
        h.update((self.hidden as u64).to_le_bytes());
        for v in [&self.w1, &self.b1, &self.w2, &self.b2, &self.warmup_scores, &self.surprise_history] {
            h.update((v.len() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        for c in [self.step_count, self.update_count, self.decay_count] {
            h.update((c as u64).to_le_bytes());
        }
        h.update(self.threshold.map_or(u64::MAX, f64::to_bits).to_le_bytes());
        h.update([self.threshold.is_some() as u8]);
        hex::encode(h.finalize())
    }

    /// Diagnostic snapshot: every parameter plus history, little-endian.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(self.d as u32)?;
        w.write_u32::<LittleEndian>(self.hidden as u32)?;
        for v in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for &x in v.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        for c in [self.step_count, self.update_count, self.decay_count] {
            w.write_u64::<LittleEndian>(c as u64)?;
        }
        w.write_u8(self.threshold.is_some() as u8)?;
        w.write_f64::<LittleEndian>(self.threshold.unwrap_or(0.0))?;
        for v in [&self.warmup_scores, &self.surprise_history] {
            w.write_u64::<LittleEndian>(v.len() as u64)?;
            for &x in v.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(NavError::Format("not a memory snapshot".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SNAPSHOT_VERSION {
            return Err(NavError::Format(format!("unsupported snapshot version {version}")));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let hidden = r.read_u32::<LittleEndian>()? as usize;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let w1 = read_vec(hidden * d)?;
        let b1 = read_vec(hidden)?;
        let w2 = read_vec(d * hidden)?;
        let b2 = read_vec(d)?;
        let mut state = Self::from_params(d, hidden, w1, b1, w2, b2)?;
        state.step_count = r.read_u64::<LittleEndian>()? as usize;
        state.update_count = r.read_u64::<LittleEndian>()? as usize;
        state.decay_count = r.read_u64::<LittleEndian>()? as usize;
        let has_threshold = r.read_u8()? != 0;
        let tau = r.read_f64::<LittleEndian>()?;
        state.threshold = has_threshold.then_some(tau);
        for target in [&mut state.warmup_scores, &mut state.surprise_history] {
            let n = r.read_u64::<LittleEndian>()? as usize;
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            *target = v;
        }
        Ok(state)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 {
        Ok(())
    } else {
        Err(NavError::InvalidArgument(format!(
            "huber delta must be positive, got {delta}"
        )))
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn threshold_from(scores: &[f64], lambda: f64) -> f64 {
    let (mu, s) = mean_std(scores);
    mu + lambda * s
}
