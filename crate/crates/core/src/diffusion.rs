//! Pixel-space conditional diffusion.
//!
//! Images live in data space `2x − 1`. The forward process is
//! `x_t = α_t x_0 + β_t ε` with `α_t² + β_t² = 1`; sampling is DDIM with
//! `σ_t = 0`, optionally strided and with classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::datakit::DatasetRecord;
use crate::encoders::{merge_conditioning, merge_conditioning_var, merge_plan, patch_indices, ConditioningSequence, ImageShape, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::params::{grads_finite, Adam, AdamConfig, Bound, ParamSet};
use crate::rng::{self, tags};
use crate::segmentation::{segment_prompt, RawPrompt, TokenizedSegment, Vocabulary};
use crate::tensor::Tensor;

/// Smallest α the cosine constructor will produce.
pub const MIN_ALPHA: f64 = 1e-3;
/// Denoiser patch side for the toy image size.
pub const DEFAULT_PATCH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    /// `α_T`; the cosine runs from angle 0 to `acos(alpha_end)`.
    pub alpha_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 100, alpha_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl DiffusionSchedule {
    /// `α_t = cos(t/T · acos(α_T))`, clamped below at [`MIN_ALPHA`].
    pub fn cosine(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.t_max == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(MIN_ALPHA..1.0).contains(&cfg.alpha_end) {
            return Err(Error::Config(format!("alpha_end must lie in [{MIN_ALPHA}, 1), got {}", cfg.alpha_end)));
        }
        let end = cfg.alpha_end.acos();
        let alpha = (0..=cfg.t_max)
            .map(|t| if t == 0 { 1.0 } else { (end * t as f64 / cfg.t_max as f64).cos().max(MIN_ALPHA) })
            .collect();
        Self::from_alphas(alpha)
    }

    /// Arbitrary table; `alpha[0]` must be 1 and the sequence non-increasing in `[0, 1]`.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 || alpha[0] != 1.0 {
            return Err(Error::Config("schedule needs alpha_0 = 1 and at least one further step".into()));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) || alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alphas must be non-increasing within [0, 1]".into()));
        }
        let beta = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self { alpha, beta })
    }

    pub fn t_max(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::InvalidTimestep { t, max: self.t_max() });
        }
        Ok(())
    }

    /// `steps + 1` evenly spaced timesteps from `T` down to 0.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidArgument(format!("sampling steps must lie in 1..={t_max}, got {steps}")));
        }
        Ok((0..=steps).rev().map(|i| (i * t_max + steps / 2) / steps).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Option<Tensor>,
}

pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<NoisyState> {
    sched.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::InvalidArgument(format!("x0 is {:?} but noise is {:?}", x0.shape(), eps.shape())));
    }
    let (a, b) = (sched.alpha(t), sched.beta(t));
    let x_t = x0.zip_map(eps, |x, e| a * x + b * e);
    Ok(NoisyState { x_t, t, eps: Some(eps.clone()) })
}

/// One deterministic DDIM update from `t` to `s < t` given `ε̂`.
/// Returns `(x_s, x0*)`.
pub fn ddim_update(x_t: &Tensor, t: usize, s: usize, eps_hat: &Tensor, sched: &DiffusionSchedule) -> Result<(Tensor, Tensor)> {
    sched.check(t)?;
    if s >= t {
        return Err(Error::InvalidArgument(format!("DDIM target {s} must precede {t}")));
    }
    let a_t = sched.alpha(t);
    if a_t <= 0.0 {
        return Err(Error::ZeroAlpha(t));
    }
    let (b_t, a_s, b_s) = (sched.beta(t), sched.alpha(s), sched.beta(s));
    let x0 = x_t.zip_map(eps_hat, |x, e| (x - b_t * e) / a_t);
    let xs = x0.zip_map(eps_hat, |x, e| a_s * x + b_s * e);
    Ok((xs, x0))
}

/// `(x_s, ε̂)` weights of the DDIM update written as `x_s = p·x_t + q·ε̂`.
pub fn ddim_coefficients(t: usize, s: usize, sched: &DiffusionSchedule) -> (f64, f64) {
    let (a_t, b_t, a_s, b_s) = (sched.alpha(t), sched.beta(t), sched.alpha(s), sched.beta(s));
    (a_s / a_t, b_s - a_s * b_t / a_t)
}

/// `ε_θ(x_t, t, c)` over a batch.
pub trait NoisePredictor {
    fn params(&self) -> &ParamSet;

    /// ε̂ for the rows of `x` (`B × n`); row `b` uses timestep `t[b]` and
    /// conditioning `cond[b]` (`N_cond × d`).
    fn predict_var(&self, g: &mut Graph, bound: &Bound, x: Var, t: &[usize], cond: &[Var]) -> Var;

    fn predict(&self, x: &Tensor, t: &[usize], cond: &[&Tensor]) -> Tensor {
        let mut g = Graph::new();
        let bound = self.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let cv: Vec<Var> = cond.iter().map(|c| g.constant((*c).clone())).collect();
        let out = self.predict_var(&mut g, &bound, xv, t, &cv);
        g.value(out).clone()
    }
}

/// `ε̂ = c·x_t`, ignoring `t` and the condition. Closed-form oracle for
/// the sampler and trajectory gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDenoiser {
    params: ParamSet,
}

impl LinearDenoiser {
    pub fn new(c: f64) -> Self {
        let mut params = ParamSet::new();
        params.push("c", Tensor::scalar(c));
        Self { params }
    }

    pub fn c(&self) -> f64 {
        self.params.get(0).get(0, 0)
    }
}

impl NoisePredictor for LinearDenoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn predict_var(&self, g: &mut Graph, bound: &Bound, x: Var, _t: &[usize], _cond: &[Var]) -> Var {
        g.scale_by(x, bound.var(0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub shape: ImageShape,
    pub patch: usize,
    pub hidden: usize,
    /// Attention width for both self- and cross-attention.
    pub attn: usize,
    /// Width of the conditioning rows.
    pub cond_dim: usize,
    /// Number of sinusoid frequencies in the time embedding.
    pub t_freqs: usize,
    pub schedule: ScheduleConfig,
}

impl DenoiserConfig {
    pub fn toy(shape: ImageShape, patch: usize, cond_dim: usize, schedule: ScheduleConfig) -> Self {
        Self { shape, patch, hidden: 64, attn: 32, cond_dim, t_freqs: 8, schedule }
    }

    pub fn num_patches(&self) -> usize {
        (self.shape.h / self.patch) * (self.shape.w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.shape.c
    }
}

mod den_slot {
    pub const IN_W: usize = 0;
    pub const IN_B: usize = 1;
    pub const POS: usize = 2;
    pub const T_W1: usize = 3;
    pub const T_B1: usize = 4;
    pub const T_W2: usize = 5;
    pub const SA_Q: usize = 6;
    pub const SA_K: usize = 7;
    pub const SA_V: usize = 8;
    pub const SA_O: usize = 9;
    pub const CA_Q: usize = 10;
    pub const CA_K: usize = 11;
    pub const CA_V: usize = 12;
    pub const CA_O: usize = 13;
    pub const M_W1: usize = 14;
    pub const M_B1: usize = 15;
    pub const M_W2: usize = 16;
    pub const M_B2: usize = 17;
    pub const OUT_W: usize = 18;
    pub const OUT_B: usize = 19;
}

/// `ε̂ = β_t x_t + α_t F(x_t, t, c)`, so that `x0* = α_t x_t − β_t F`
/// stays bounded at high noise. `F` embeds patch tokens plus a time
/// embedding, runs one block of self-attention over patches,
/// cross-attention over the conditioning rows and an MLP, then maps
/// linearly back to pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamSet,
    patch_idx: Vec<usize>,
    unpatch_idx: Vec<usize>,
    skip: Vec<(f64, f64)>,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.patch == 0 || !cfg.shape.h.is_multiple_of(cfg.patch) || !cfg.shape.w.is_multiple_of(cfg.patch) {
            return Err(Error::Config(format!("patch {} must divide the {}x{} image", cfg.patch, cfg.shape.h, cfg.shape.w)));
        }
        let sched = DiffusionSchedule::cosine(cfg.schedule)?;
        let mut r = rng::rng_from(seed);
        let (pd, h, a, np) = (cfg.patch_dim(), cfg.hidden, cfg.attn, cfg.num_patches());
        let tf = 2 * cfg.t_freqs;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamSet::new();
        p.push_normal("in_w", pd, h, inv(pd), &mut r);
        p.push_zeros("in_b", 1, h);
        p.push_normal("pos", np, h, 0.1, &mut r);
        p.push_normal("t_w1", tf, h, inv(tf), &mut r);
        p.push_zeros("t_b1", 1, h);
        p.push_normal("t_w2", h, h, inv(h), &mut r);
        for name in ["sa_q", "sa_k", "sa_v"] {
            p.push_normal(name, h, a, inv(h), &mut r);
        }
        p.push_normal("sa_o", a, h, inv(a), &mut r);
        p.push_normal("ca_q", h, a, inv(h), &mut r);
        p.push_normal("ca_k", cfg.cond_dim, a, inv(cfg.cond_dim), &mut r);
        p.push_normal("ca_v", cfg.cond_dim, a, inv(cfg.cond_dim), &mut r);
        p.push_normal("ca_o", a, h, inv(a), &mut r);
        p.push_normal("mlp_w1", h, 2 * h, inv(h), &mut r);
        p.push_zeros("mlp_b1", 1, 2 * h);
        p.push_normal("mlp_w2", 2 * h, h, inv(2 * h), &mut r);
        p.push_zeros("mlp_b2", 1, h);
        p.push_normal("out_w", h, pd, 0.01, &mut r);
        p.push_zeros("out_b", 1, pd);
        let patch_idx = patch_indices(cfg.shape, cfg.patch);
        let mut unpatch_idx = vec![0; patch_idx.len()];
        for (k, &j) in patch_idx.iter().enumerate() {
            unpatch_idx[j] = k;
        }
        let skip = (0..=sched.t_max()).map(|t| (sched.beta(t), sched.alpha(t))).collect();
        Ok(Self { cfg, params: p, patch_idx, unpatch_idx, skip })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sinusoid features of `t / T`, one row per timestep.
    fn time_features(&self, t: &[usize]) -> Tensor {
        let k = self.cfg.t_freqs;
        let mut f = Tensor::zeros(t.len(), 2 * k);
        for (b, &ti) in t.iter().enumerate() {
            let u = ti as f64 / self.cfg.schedule.t_max as f64;
            for j in 0..k {
                let w = std::f64::consts::PI * (1u64 << j) as f64 * u;
                f.set(b, 2 * j, w.sin());
                f.set(b, 2 * j + 1, w.cos());
            }
        }
        f
    }
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, width: usize) -> Var {
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, 1.0 / (width as f64).sqrt());
    let a = g.softmax_rows(s);
    g.matmul(a, v)
}

impl NoisePredictor for Denoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn predict_var(&self, g: &mut Graph, bound: &Bound, x: Var, t: &[usize], cond: &[Var]) -> Var {
        use den_slot::*;
        let (b, n) = g.value(x).shape();
        assert_eq!(n, self.cfg.shape.numel(), "image width mismatch");
        assert!(t.len() == b && cond.len() == b, "one timestep and one condition per row");
        let (np, pd, a) = (self.cfg.num_patches(), self.cfg.patch_dim(), self.cfg.attn);
        let p = |s| bound.var(s);

        let col = g.reshape(x, b * n, 1);
        let idx: Vec<usize> = (0..b).flat_map(|i| self.patch_idx.iter().map(move |&j| i * n + j)).collect();
        let patches = g.gather_rows(col, &idx);
        let patches = g.reshape(patches, b * np, pd);
        let h = g.matmul(patches, p(IN_W));
        let h = g.add_row(h, p(IN_B));
        let pos = g.concat_rows(&vec![p(POS); b]);
        let h = g.add(h, pos);

        let tf = g.constant(self.time_features(t));
        let te = g.matmul(tf, p(T_W1));
        let te = g.add_row(te, p(T_B1));
        let te = g.silu(te);
        let te = g.matmul(te, p(T_W2));
        let spread: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, np)).collect();
        let te = g.gather_rows(te, &spread);
        let mut h = g.add(h, te);

        let (q, k, v) = (g.matmul(h, p(SA_Q)), g.matmul(h, p(SA_K)), g.matmul(h, p(SA_V)));
        let cq = g.matmul(h, p(CA_Q));
        let mut sa = Vec::with_capacity(b);
        let mut ca = Vec::with_capacity(b);
        for (i, &c) in cond.iter().enumerate().take(b) {
            let (qi, ki, vi) = (g.slice_rows(q, i * np, np), g.slice_rows(k, i * np, np), g.slice_rows(v, i * np, np));
            sa.push(attend(g, qi, ki, vi, a));
            let ck = g.matmul(c, p(CA_K));
            let cv = g.matmul(c, p(CA_V));
            let cqi = g.slice_rows(cq, i * np, np);
            ca.push(attend(g, cqi, ck, cv, a));
        }
        let sa = g.concat_rows(&sa);
        let sa = g.matmul(sa, p(SA_O));
        h = g.add(h, sa);
        let ca = g.concat_rows(&ca);
        let ca = g.matmul(ca, p(CA_O));
        h = g.add(h, ca);

        let m = g.matmul(h, p(M_W1));
        let m = g.add_row(m, p(M_B1));
        let m = g.silu(m);
        let m = g.matmul(m, p(M_W2));
        let m = g.add_row(m, p(M_B2));
        h = g.add(h, m);

        let o = g.matmul(h, p(OUT_W));
        let o = g.add_row(o, p(OUT_B));
        let o = g.reshape(o, b * n, 1);
        let back: Vec<usize> = (0..b).flat_map(|i| self.unpatch_idx.iter().map(move |&j| i * n + j)).collect();
        let o = g.gather_rows(o, &back);
        let o = g.reshape(o, b, n);
        let mut gain = Tensor::zeros(b, n);
        let mut scale = Tensor::zeros(b, n);
        for (i, &ti) in t.iter().enumerate() {
            gain.data_mut()[i * n..(i + 1) * n].fill(self.skip[ti].0);
            scale.data_mut()[i * n..(i + 1) * n].fill(self.skip[ti].1);
        }
        let (gain, scale) = (g.constant(gain), g.constant(scale));
        let skip = g.mul(x, gain);
        let o = g.mul(o, scale);
        g.add(skip, o)
    }
}

/// Pixels in `[0, 1]` to data space.
pub fn to_data_space(pixels: &Tensor) -> Tensor {
    pixels.map(|x| 2.0 * x - 1.0)
}

/// Data space back to pixels, clamped to `[0, 1]`.
pub fn to_pixels(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Standard-normal `x_T` for one item, derived from its seed.
pub fn initial_noise(seed: u64, numel: usize) -> Tensor {
    rng::normal_tensor(1, numel, &mut rng::sub_rng(seed, tags::SAMPLE, 0))
}

/// Guided ε̂ at one shared timestep. `g = 1` and `g = 0` evaluate only
/// the conditional or unconditional branch.
pub fn guided_eps(model: &impl NoisePredictor, x: &Tensor, t: usize, cond: &[&Tensor], uncond: &Tensor, guidance: f64) -> Tensor {
    let ts = vec![t; x.rows()];
    let nulls = vec![uncond; x.rows()];
    if guidance == 1.0 {
        return model.predict(x, &ts, cond);
    }
    if guidance == 0.0 {
        return model.predict(x, &ts, &nulls);
    }
    let ec = model.predict(x, &ts, cond);
    let eu = model.predict(x, &ts, &nulls);
    eu.zip_map(&ec, |u, c| u + guidance * (c - u))
}

/// Strided DDIM from the given `x_T` rows down to `x_0` (data space).
pub fn sample_from(
    model: &impl NoisePredictor,
    x_t: Tensor,
    cond: &[&Tensor],
    uncond: &Tensor,
    sched: &DiffusionSchedule,
    steps: usize,
    guidance: f64,
) -> Result<Tensor> {
    let ts = sched.timesteps(steps)?;
    let mut x = x_t;
    for w in ts.windows(2) {
        let eps = guided_eps(model, &x, w[0], cond, uncond, guidance);
        x = ddim_update(&x, w[0], w[1], &eps, sched)?.0;
    }
    Ok(x)
}

/// One image per seed; results match per-item calls exactly.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch(
    model: &impl NoisePredictor,
    cond: &[&Tensor],
    uncond: &Tensor,
    sched: &DiffusionSchedule,
    steps: usize,
    guidance: f64,
    seeds: &[u64],
    numel: usize,
) -> Result<Tensor> {
    if cond.len() != seeds.len() {
        return Err(Error::InvalidArgument("one condition per seed".into()));
    }
    let mut out = Vec::with_capacity(seeds.len());
    for (c, &s) in cond.iter().zip(seeds) {
        out.push(sample_from(model, initial_noise(s, numel), std::slice::from_ref(c), uncond, sched, steps, guidance)?);
    }
    Ok(Tensor::from_rows(&out))
}

/// Mean over the batch of `‖ε − ε̂‖²` with `t ~ U{1..T}`.
pub fn epsilon_loss(
    model: &impl NoisePredictor,
    x0: &[Tensor],
    cond: &[&Tensor],
    sched: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if x0.is_empty() || x0.len() != cond.len() {
        return Err(Error::InvalidArgument("epsilon_loss needs a non-empty batch with one condition per image".into()));
    }
    let n = x0[0].cols();
    let mut t = Vec::with_capacity(x0.len());
    let mut eps = Vec::with_capacity(x0.len());
    let mut xt = Vec::with_capacity(x0.len());
    for x in x0 {
        let ti = rng.random_range(1..=sched.t_max());
        let e = rng::normal_tensor(1, n, rng);
        xt.push(forward_noise(x, ti, &e, sched)?.x_t);
        t.push(ti);
        eps.push(e);
    }
    let pred = model.predict(&Tensor::from_rows(&xt), &t, cond);
    let loss = pred.sub(&Tensor::from_rows(&eps)).norm_sq() / x0.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    Ok(loss)
}

/// Denoiser plus its own conditioning text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub cond_encoder: TextEncoder,
    pub vocab: Vocabulary,
    pub n_cond: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    denoiser: DenoiserConfig,
    text: TextEncoderConfig,
    n_cond: usize,
    vocab: Vec<String>,
}

impl DiffusionModel {
    pub fn new(vocab: Vocabulary, text: TextEncoderConfig, image: ImageShape, patch: usize, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        if text.vocab_size != vocab.size() {
            return Err(Error::InvalidArgument("conditioning encoder vocabulary size disagrees".into()));
        }
        let den = DenoiserConfig::toy(image, patch, text.d, schedule);
        Ok(Self {
            denoiser: Denoiser::new(den, rng::derive_seed(seed, tags::INIT, 20))?,
            cond_encoder: TextEncoder::new(text, rng::derive_seed(seed, tags::INIT, 21)),
            vocab,
            n_cond: 3 * text.l_seg,
        })
    }

    pub fn sched(&self) -> DiffusionSchedule {
        DiffusionSchedule::cosine(self.denoiser.cfg.schedule).expect("validated at construction")
    }

    pub fn numel(&self) -> usize {
        self.denoiser.cfg.shape.numel()
    }

    fn segments(&self, p: &RawPrompt) -> Result<Vec<TokenizedSegment>> {
        Ok(segment_prompt(p, &self.vocab, self.cond_encoder.config().l_seg)?.segments)
    }

    pub fn conditioning(&self, p: &RawPrompt) -> Result<ConditioningSequence> {
        let segs = self.segments(p)?;
        let refs: Vec<&TokenizedSegment> = segs.iter().collect();
        let embs = self.cond_encoder.encode_segments(&refs);
        let pairs: Vec<_> = segs.iter().zip(&embs).collect();
        merge_conditioning(&pairs, &self.cond_encoder.pad_star_embedding(&self.vocab), self.n_cond)
    }

    pub fn null_conditioning(&self) -> ConditioningSequence {
        ConditioningSequence::null(&self.cond_encoder.pad_star_embedding(&self.vocab), self.n_cond)
    }

    /// Data-space samples, one per prompt and seed.
    pub fn sample(&self, prompts: &[RawPrompt], steps: usize, guidance: f64, seeds: &[u64]) -> Result<Tensor> {
        let conds = prompts.iter().map(|p| self.conditioning(p).map(|c| c.embeddings)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = conds.iter().collect();
        let null = self.null_conditioning().embeddings;
        sample_batch(&self.denoiser, &refs, &null, &self.sched(), steps, guidance, seeds, self.numel())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(Manifest {
            kind: "diffusion".into(),
            denoiser: self.denoiser.cfg,
            text: *self.cond_encoder.config(),
            n_cond: self.n_cond,
            vocab: self.vocab.tokens().to_vec(),
        })?;
        ck.push_params("denoiser", &self.denoiser.params);
        ck.push_params("cond", self.cond_encoder.params());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Manifest = ck.manifest_as()?;
        if m.kind != "diffusion" {
            return Err(Error::IncompatibleCheckpoint(format!("expected a diffusion checkpoint, found '{}'", m.kind)));
        }
        let bad = |e: Error| Error::IncompatibleCheckpoint(e.to_string());
        let mut denoiser = Denoiser::new(m.denoiser, 0).map_err(bad)?;
        let mut cond_encoder = TextEncoder::new(m.text, 0);
        ck.load_params("denoiser", &mut denoiser.params)?;
        ck.load_params("cond", cond_encoder.params_mut())?;
        Ok(Self { denoiser, cond_encoder, vocab: Vocabulary::new(m.vocab)?, n_cond: m.n_cond })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Probability of replacing a caption by the all-pad* condition.
    pub cond_dropout: f64,
    pub train_cond_encoder: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 16,
            adam: AdamConfig { lr: 2e-3, clip_norm: 0.0, ..AdamConfig::default() },
            cond_dropout: 0.1,
            train_cond_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftReport {
    pub losses: Vec<f64>,
}

struct SftItem {
    x0: Tensor,
    segments: Vec<TokenizedSegment>,
}

/// Supervised ε-loss training on (image, long caption) records.
pub fn train_sft(model: &mut DiffusionModel, data: &[DatasetRecord], cfg: &SftConfig, mut on_step: impl FnMut(usize, f64)) -> Result<SftReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("SFT dataset is empty".into()));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Config("batch_size must be positive and cond_dropout within [0, 1]".into()));
    }
    let items = data
        .iter()
        .map(|r| {
            let segments = model.segments(&RawPrompt::new(r.caption_long.clone())?)?;
            merge_plan(&segments.iter().collect::<Vec<_>>(), model.cond_encoder.config().l_seg, model.n_cond)?;
            Ok(SftItem { x0: to_data_space(&r.image), segments })
        })
        .collect::<Result<Vec<_>>>()?;
    let sched = model.sched();
    let l_seg = model.cond_encoder.config().l_seg;
    let mut opt_d = Adam::new(&model.denoiser.params, cfg.adam);
    let mut opt_c = Adam::new(model.cond_encoder.params(), cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rb = rng::sub_rng(cfg.seed, tags::BATCH, step as u64);
        let mut rn = rng::sub_rng(cfg.seed, tags::NOISE, step as u64);
        let mut rd = rng::sub_rng(cfg.seed, tags::DROPOUT, step as u64);
        let batch: Vec<&SftItem> = (0..cfg.batch_size).map(|_| &items[rb.random_range(0..items.len())]).collect();
        let dropped: Vec<bool> = batch.iter().map(|_| rd.random_bool(cfg.cond_dropout)).collect();
        let t: Vec<usize> = batch.iter().map(|_| rn.random_range(1..=sched.t_max())).collect();
        let eps = rng::normal_tensor(batch.len(), model.numel(), &mut rn);
        let mut xt = Vec::with_capacity(batch.len());
        for (i, it) in batch.iter().enumerate() {
            xt.push(forward_noise(&it.x0, t[i], &eps.row_tensor(i), &sched)?.x_t);
        }

        let mut g = Graph::new();
        let cb = model.cond_encoder.params().bind(&mut g, cfg.train_cond_encoder);
        let db = model.denoiser.params.bind(&mut g, true);
        let pad = model.cond_encoder.pad_star_var(&mut g, &cb, &model.vocab);
        let null = g.concat_rows(&vec![pad; model.n_cond]);
        let kept: Vec<&TokenizedSegment> = batch.iter().zip(&dropped).filter(|(_, d)| !**d).flat_map(|(it, _)| &it.segments).collect();
        let per_token = (!kept.is_empty()).then(|| model.cond_encoder.forward(&mut g, &cb, &kept).per_token);
        let mut conds = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for (it, &d) in batch.iter().zip(&dropped) {
            if d {
                conds.push(null);
                continue;
            }
            let k = it.segments.len();
            let rows = g.slice_rows(per_token.expect("kept segments"), offset * l_seg, k * l_seg);
            let plan = merge_plan(&it.segments.iter().collect::<Vec<_>>(), l_seg, model.n_cond)?;
            conds.push(merge_conditioning_var(&mut g, rows, &plan, pad));
            offset += k;
        }
        let xv = g.constant(Tensor::from_rows(&xt));
        let pred = model.denoiser.predict_var(&mut g, &db, xv, &t, &conds);
        let target = g.constant(eps);
        let diff = g.sub(pred, target);
        let sq = g.dot(diff, diff);
        let loss_v = g.scale(sq, 1.0 / batch.len() as f64);
        let loss = g.scalar(loss_v);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = g.backward(loss_v);
        let gd = db.grads(&g, &grads);
        if !grads_finite(&gd) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        opt_d.step(&mut model.denoiser.params, &gd);
        if cfg.train_cond_encoder {
            let gc = cb.grads(&g, &grads);
            if !grads_finite(&gc) {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            opt_c.step(model.cond_encoder.params_mut(), &gc);
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(SftReport { losses })
}
