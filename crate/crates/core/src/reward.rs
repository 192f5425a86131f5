//! Reward fine-tuning through the DDIM trajectory.
//!
//! Rollouts detach every denoiser input, so parameter gradients reach the
//! final sample only through the ε̂ outputs of a random subset of steps.
//! The reward `1 − C_X(x̂_0)·c̃` uses `c̃ = C⊥ + ωηV`, which scales the
//! text-irrelevant part of the gradient by ω.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decomposition::{decompose, CommonDirection};
use crate::diffusion::{ddim_coefficients, initial_noise, DiffusionModel, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::params::{grads_finite, Adam, AdamConfig, Bound};
use crate::preference::{PreferenceModel, ScoreMode};
use crate::rng::{self, tags};
use crate::segmentation::RawPrompt;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub omega: f64,
    /// Trajectory steps whose ε̂ outputs keep their gradient.
    pub steps_subset_size: usize,
    pub sample_steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub total_updates: usize,
    pub batch_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            omega: 0.3,
            steps_subset_size: 2,
            sample_steps: 10,
            seed: 0,
            adam: AdamConfig { lr: 1e-3, clip_norm: 0.0, ..AdamConfig::default() },
            total_updates: 300,
            batch_size: 8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        if self.steps_subset_size == 0 || self.steps_subset_size > self.sample_steps {
            return Err(Error::Config(format!(
                "steps_subset_size must lie in 1..={}, got {}",
                self.sample_steps, self.steps_subset_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReweightedTextEmbedding {
    pub c_tilde: Tensor,
    pub c_perp: Tensor,
    pub eta: f64,
    pub omega: f64,
    pub v: Tensor,
}

/// `c̃ = C⊥ + ωηV`, not re-normalized.
pub fn reweight(c_p: &Tensor, v: &Tensor, omega: f64) -> ReweightedTextEmbedding {
    let d = decompose(c_p, v);
    let c_tilde = if omega == 1.0 {
        c_p.clone()
    } else {
        let mut c = d.c_perp.clone();
        c.axpy(omega * d.eta, v);
        c
    };
    ReweightedTextEmbedding { c_tilde, c_perp: d.c_perp, eta: d.eta, omega, v: v.clone() }
}

pub fn reweighted_text_embedding(p: &RawPrompt, m: &PreferenceModel, dir: &CommonDirection, omega: f64) -> Result<ReweightedTextEmbedding> {
    Ok(reweight(&m.prompt_embedding(p, ScoreMode::SegmentAvg)?, &dir.v, omega))
}

/// Data-space sample to the pixel scale the preference model reads,
/// without clamping.
pub fn reward_view(g: &mut Graph, x0: Var) -> Var {
    let (r, c) = g.value(x0).shape();
    let half = g.scale(x0, 0.5);
    let off = g.constant(Tensor::filled(r, c, 0.5));
    g.add(half, off)
}

/// Per-row `C_X` of data-space samples.
pub fn sample_embeddings_var(g: &mut Graph, m: &PreferenceModel, image_bound: &Bound, x0: Var) -> Var {
    let px = reward_view(g, x0);
    m.image.forward(g, image_bound, px)
}

/// `mean_b (1 − C_X(x̂_0,b)·c̃_b)` as a graph node.
pub fn reward_loss_var(g: &mut Graph, m: &PreferenceModel, image_bound: &Bound, x0: Var, targets: &Tensor) -> Var {
    let cx = sample_embeddings_var(g, m, image_bound, x0);
    let t = g.constant(targets.clone());
    let s = g.dot(cx, t);
    let b = targets.rows() as f64;
    let s = g.scale(s, -1.0 / b);
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, s)
}

/// `1 − C_X(x̂_0)·c̃` for one data-space sample.
pub fn reward_loss(x0_star: &Tensor, c_tilde: &Tensor, m: &PreferenceModel) -> Result<f64> {
    m.image.check_image(x0_star)?;
    if c_tilde.shape() != (1, m.d_e()) {
        return Err(Error::InvalidArgument(format!("target embedding must be 1x{}", m.d_e())));
    }
    let mut g = Graph::new();
    let ib = m.image.params().bind(&mut g, false);
    let x = g.constant(x0_star.clone());
    let l = reward_loss_var(&mut g, m, &ib, x, c_tilde);
    Ok(g.scalar(l))
}

/// Step indices (into the transition list) whose outputs keep gradient.
pub fn draw_subset(sample_steps: usize, k: usize, r: &mut impl Rng) -> Vec<usize> {
    rng::sample_subset(sample_steps, k, r)
}

/// DDIM rollout over `timesteps` on `g`. Denoiser inputs are always
/// constants; transition `i` contributes its ε̂ to the graph only when
/// `keep[i]`. Returns `x̂_0` rows.
#[allow(clippy::too_many_arguments)]
pub fn drtune_rollout(
    g: &mut Graph,
    model: &impl NoisePredictor,
    bound: &Bound,
    x_t: &Tensor,
    cond: &[&Tensor],
    sched: &DiffusionSchedule,
    timesteps: &[usize],
    keep: &[bool],
) -> Result<Var> {
    if keep.len() + 1 != timesteps.len() {
        return Err(Error::InvalidArgument("one keep flag per transition".into()));
    }
    let b = x_t.rows();
    let cond_vars: Vec<Var> = cond.iter().map(|c| g.constant((*c).clone())).collect();
    let mut x = g.constant(x_t.clone());
    for (i, w) in timesteps.windows(2).enumerate() {
        let (t, s) = (w[0], w[1]);
        if sched.alpha(t) <= 0.0 {
            return Err(Error::ZeroAlpha(t));
        }
        let input = g.value(x).clone();
        let eps = if keep[i] {
            let xi = g.constant(input);
            model.predict_var(g, bound, xi, &vec![t; b], &cond_vars)
        } else {
            g.constant(model.predict(&input, &vec![t; b], cond))
        };
        let (p, q) = ddim_coefficients(t, s, sched);
        let a = g.scale(x, p);
        let e = g.scale(eps, q);
        x = g.add(a, e);
    }
    Ok(x)
}

/// Rollout with a uniformly drawn subset of `cfg.steps_subset_size`
/// gradient-carrying steps. Returns `(x̂_0, subset)`.
#[allow(clippy::too_many_arguments)]
pub fn drtune_trajectory(
    g: &mut Graph,
    model: &impl NoisePredictor,
    bound: &Bound,
    x_t: &Tensor,
    cond: &[&Tensor],
    sched: &DiffusionSchedule,
    cfg: &RewardConfig,
    r: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    cfg.validate()?;
    let ts = sched.timesteps(cfg.sample_steps)?;
    let subset = draw_subset(cfg.sample_steps, cfg.steps_subset_size, r);
    let mut keep = vec![false; cfg.sample_steps];
    for &i in &subset {
        keep[i] = true;
    }
    Ok((drtune_rollout(g, model, bound, x_t, cond, sched, &ts, &keep)?, subset))
}

/// Everything RFT needs per prompt: the denoiser condition, the reward
/// direction and the two components used for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct RftTarget {
    pub cond: Tensor,
    pub reward_dir: Tensor,
    pub c_perp: Tensor,
    pub irrelevant: Tensor,
}

pub fn rft_targets(model: &DiffusionModel, prompts: &[RawPrompt], m: &PreferenceModel, dir: &CommonDirection, omega: f64) -> Result<Vec<RftTarget>> {
    let cps = m.prompt_embeddings(prompts, ScoreMode::SegmentAvg)?;
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rw = reweight(&cps.row_tensor(i), &dir.v, omega);
            Ok(RftTarget {
                cond: model.conditioning(p)?.embeddings,
                irrelevant: rw.v.scale(rw.eta),
                reward_dir: rw.c_tilde,
                c_perp: rw.c_perp,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RftMetrics {
    pub step: usize,
    pub reward_loss: f64,
    pub mean_relevant: f64,
    pub mean_irrelevant: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RftStep {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub mean_relevant: f64,
    pub mean_irrelevant: f64,
}

/// Reward loss and denoiser gradient for update `update` (batch, noise and
/// subset all derived from `cfg.seed` and `update`).
pub fn rft_gradient(
    model: &DiffusionModel,
    targets: &[RftTarget],
    m: &PreferenceModel,
    sched: &DiffusionSchedule,
    cfg: &RewardConfig,
    update: usize,
) -> Result<RftStep> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("RFT needs at least one prompt".into()));
    }
    let mut rb = rng::sub_rng(cfg.seed, tags::BATCH, update as u64);
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rb.random_range(0..targets.len())).collect();
    let batch: Vec<&RftTarget> = idx.iter().map(|&i| &targets[i]).collect();
    let seeds: Vec<u64> = (0..batch.len()).map(|j| rng::derive_seed(cfg.seed, tags::NOISE, (update * cfg.batch_size + j) as u64)).collect();
    let x_t = Tensor::from_rows(&seeds.iter().map(|&s| initial_noise(s, model.numel())).collect::<Vec<_>>());
    let cond: Vec<&Tensor> = batch.iter().map(|t| &t.cond).collect();

    let mut g = Graph::new();
    let db = model.denoiser.params().bind(&mut g, true);
    let ib = m.image.params().bind(&mut g, false);
    let mut rs = rng::sub_rng(cfg.seed, tags::SUBSET, update as u64);
    let (x0, _) = drtune_trajectory(&mut g, &model.denoiser, &db, &x_t, &cond, sched, cfg, &mut rs)?;
    let cx = sample_embeddings_var(&mut g, m, &ib, x0);
    let dirs = Tensor::from_rows(&batch.iter().map(|t| t.reward_dir.clone()).collect::<Vec<_>>());
    let tv = g.constant(dirs);
    let s = g.dot(cx, tv);
    let s = g.scale(s, -1.0 / batch.len() as f64);
    let one = g.constant(Tensor::scalar(1.0));
    let lv = g.add(one, s);
    let loss = g.scalar(lv);
    if !loss.is_finite() {
        return Err(Error::Divergence { step: update, loss });
    }
    let grads = db.grads(&g, &g.backward(lv));
    if !grads_finite(&grads) {
        return Err(Error::Divergence { step: update, loss: f64::NAN });
    }
    let cxv = g.value(cx);
    let n = batch.len() as f64;
    let mean_relevant = batch.iter().enumerate().map(|(j, t)| cxv.row_tensor(j).dot(&t.c_perp)).sum::<f64>() / n;
    let mean_irrelevant = batch.iter().enumerate().map(|(j, t)| cxv.row_tensor(j).dot(&t.irrelevant)).sum::<f64>() / n;
    Ok(RftStep { loss, grads, mean_relevant, mean_irrelevant })
}

/// RFT against explicit per-prompt targets; the preference model is frozen.
pub fn train_rft_with_targets(
    model: &mut DiffusionModel,
    targets: &[RftTarget],
    m: &PreferenceModel,
    cfg: &RewardConfig,
    mut on_step: impl FnMut(&RftMetrics),
) -> Result<Vec<RftMetrics>> {
    cfg.validate()?;
    let sched = model.sched();
    let mut opt = Adam::new(model.denoiser.params(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.total_updates);
    for update in 0..cfg.total_updates {
        let st = rft_gradient(model, targets, m, &sched, cfg, update)?;
        opt.step(model.denoiser.params_mut(), &st.grads);
        let row = RftMetrics { step: update, reward_loss: st.loss, mean_relevant: st.mean_relevant, mean_irrelevant: st.mean_irrelevant, omega: cfg.omega };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

pub fn train_rft(
    model: &mut DiffusionModel,
    prompts: &[RawPrompt],
    m: &PreferenceModel,
    dir: &CommonDirection,
    cfg: &RewardConfig,
    on_step: impl FnMut(&RftMetrics),
) -> Result<Vec<RftMetrics>> {
    cfg.validate()?;
    dir.check_encoder(m)?;
    let targets = rft_targets(model, prompts, m, dir, cfg.omega)?;
    train_rft_with_targets(model, &targets, m, cfg, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit;
    use crate::decomposition::{estimate_common_direction, PromptCorpus};
    use crate::diffusion::{LinearDenoiser, ScheduleConfig};
    use crate::encoders::{ImageEncoderConfig, ImageShape, TextEncoderConfig};
    use crate::preference::DEFAULT_TAU;
    use approx::assert_relative_eq;

    fn micro_pref() -> PreferenceModel {
        let vocab = datakit::grammar_vocabulary();
        let t = TextEncoderConfig { vocab_size: vocab.size(), d: 8, d_e: 6, l_seg: 12, mlp_hidden: 8, layers: 1 };
        let i = ImageEncoderConfig { shape: ImageShape { h: 4, w: 4, c: 1 }, patch: 2, patch_hidden: 5, hidden: 4, d_e: 6 };
        PreferenceModel::new(vocab, t, i, DEFAULT_TAU, 3).unwrap()
    }

    #[test]
    fn reweighting_identities() {
        let v = Tensor::row_vector(vec![1.0, 0.0]);
        let cp = Tensor::row_vector(vec![0.6, 0.8]);
        assert!(reweight(&cp, &v, 0.5).c_tilde.max_abs_diff(&Tensor::row_vector(vec![0.3, 0.8])) < 1e-15);
        let mut r = rng::rng_from(0);
        for _ in 0..20 {
            let cp = rng::normal_tensor(1, 5, &mut r);
            let v = rng::normal_tensor(1, 5, &mut r);
            let v = v.scale(1.0 / v.norm());
            assert!(reweight(&cp, &v, 1.0).c_tilde.max_abs_diff(&cp) < 1e-7);
            let z = reweight(&cp, &v, 0.0);
            assert_eq!(z.c_tilde, z.c_perp);
            let w = reweight(&cp, &v, 0.3);
            let mut rebuilt = w.c_perp.clone();
            rebuilt.axpy(0.3 * w.eta, &v);
            assert!(w.c_tilde.max_abs_diff(&rebuilt) < 1e-15);
        }
    }

    #[test]
    fn reward_loss_endpoints_and_gradient() {
        let m = micro_pref();
        let mut r = rng::rng_from(1);
        let x = rng::normal_tensor(1, 16, &mut r).scale(0.5);
        let mut pg = Graph::new();
        let ib = m.image.params().bind(&mut pg, false);
        let xv = pg.constant(x.clone());
        let cx_v = sample_embeddings_var(&mut pg, &m, &ib, xv);
        let cx = pg.value(cx_v).clone();
        assert!(reward_loss(&x, &cx, &m).unwrap().abs() < 1e-12);
        let mut perp = rng::normal_tensor(1, 6, &mut r);
        perp.axpy(-perp.dot(&cx), &cx);
        assert_relative_eq!(reward_loss(&x, &perp, &m).unwrap(), 1.0, epsilon = 1e-12);

        let c = rng::normal_tensor(1, 6, &mut r);
        let mut g = Graph::new();
        let ib = m.image.params().bind(&mut g, false);
        let xv = g.variable(x.clone());
        let l = reward_loss_var(&mut g, &m, &ib, xv, &c);
        let grad = g.backward(l).get(xv).unwrap().clone();
        for i in [0, 3, 7, 12, 15] {
            let h = 1e-5;
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let fd = (reward_loss(&up, &c, &m).unwrap() - reward_loss(&down, &c, &m).unwrap()) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() <= 1e-3 * grad.data()[i].abs().max(1e-4), "pixel {i}: fd {fd} ad {}", grad.data()[i]);
        }
    }

    fn scalar_grad(lin: &LinearDenoiser, sched: &DiffusionSchedule, x_t: &Tensor, w: &Tensor, steps: usize, keep: &[bool]) -> (f64, Tensor) {
        let mut g = Graph::new();
        let b = lin.params().bind(&mut g, true);
        let cond = Tensor::zeros(1, 1);
        let ts = sched.timesteps(steps).unwrap();
        let x0 = drtune_rollout(&mut g, lin, &b, x_t, &[&cond], sched, &ts, keep).unwrap();
        let wv = g.constant(w.clone());
        let l = g.dot(x0, wv);
        let grads = b.grads(&g, &g.backward(l));
        (grads[0].get(0, 0), g.value(x0).clone())
    }

    #[test]
    fn drtune_matches_telescoping_coefficients() {
        let sched = DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.6, 0.25]).unwrap();
        let lin = LinearDenoiser::new(0.4);
        let c = lin.c();
        let x_t = Tensor::row_vector(vec![0.7, -1.1]);
        let w = Tensor::row_vector(vec![0.3, 0.5]);
        let ab = |t: usize| sched.beta(t) / sched.alpha(t);
        let factor = |t: usize| {
            let (a_p, a_t, b_p, b_t) = (sched.alpha(t - 1), sched.alpha(t), sched.beta(t - 1), sched.beta(t));
            a_p / a_t + c * (b_p - a_p * b_t / a_t)
        };
        // states x_3, x_2, x_1 along the trajectory
        let states = [x_t.clone(), x_t.scale(factor(3)), x_t.scale(factor(3) * factor(2))];
        for mask in 0u32..8 {
            let keep: Vec<bool> = (0..3).map(|i| mask & (1 << i) != 0).collect();
            let (ad, _) = scalar_grad(&lin, &sched, &x_t, &w, 3, &keep);
            let mut expected = 0.0;
            for (i, t) in [3usize, 2, 1].into_iter().enumerate() {
                if keep[i] {
                    expected += (ab(t - 1) - ab(t)) * w.dot(&states[i]);
                }
            }
            assert!((ad - expected).abs() < 1e-6, "mask {mask}: {ad} vs {expected}");
            if mask == 0 {
                assert_eq!(ad, 0.0);
            }
        }
        let one = DiffusionSchedule::from_alphas(vec![1.0, 0.6]).unwrap();
        let (ad, x0) = scalar_grad(&lin, &one, &x_t, &w, 1, &[true]);
        let q = -one.beta(1) / one.alpha(1);
        assert!((ad - q * w.dot(&x_t)).abs() < 1e-12);
        let direct = x_t.scale(1.0 / one.alpha(1) + c * q);
        assert!(x0.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn subset_draws_are_uniform() {
        let mut r = rng::rng_from(5);
        let (steps, k, draws) = (10, 3, 10_000);
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let s = draw_subset(steps, k, &mut r);
            assert_eq!(s.len(), k);
            for i in s {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.3).abs() < 0.02);
        }
        let bad = RewardConfig { steps_subset_size: 0, ..RewardConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RewardConfig { steps_subset_size: 11, sample_steps: 10, ..RewardConfig::default() };
        assert!(bad.validate().is_err());
        assert!(RewardConfig { omega: 1.5, ..RewardConfig::default() }.validate().is_err());
    }

    fn rft_fixture() -> (DiffusionModel, PreferenceModel, CommonDirection, Vec<RawPrompt>) {
        let vocab = datakit::grammar_vocabulary();
        let recs = datakit::generate_records(6, 2).unwrap();
        let prompts: Vec<RawPrompt> = recs.iter().map(|r| RawPrompt::new(r.caption_long.clone()).unwrap()).collect();
        let t = TextEncoderConfig { vocab_size: vocab.size(), d: 8, d_e: 8, l_seg: 12, mlp_hidden: 8, layers: 1 };
        let i = ImageEncoderConfig { shape: datakit::IMAGE_SHAPE, patch: datakit::CELL_PX, patch_hidden: 6, hidden: 4, d_e: 8 };
        let pref = PreferenceModel::new(vocab.clone(), t, i, DEFAULT_TAU, 1).unwrap();
        let dir = estimate_common_direction(&PromptCorpus::new(prompts.clone(), "t").unwrap(), &pref, ScoreMode::SegmentAvg).unwrap();
        let mut dm = DiffusionModel::new(vocab, t, datakit::IMAGE_SHAPE, datakit::CELL_PX, ScheduleConfig { t_max: 10, alpha_end: 0.05 }, 2).unwrap();
        let small = crate::diffusion::DenoiserConfig { hidden: 8, attn: 4, t_freqs: 2, ..*dm.denoiser.config() };
        dm.denoiser = crate::diffusion::Denoiser::new(small, 4).unwrap();
        (dm, pref, dir, prompts)
    }

    fn small_cfg(omega: f64) -> RewardConfig {
        RewardConfig { omega, sample_steps: 4, steps_subset_size: 2, batch_size: 3, total_updates: 1, ..RewardConfig::default() }
    }

    fn rel_close(a: &[Tensor], b: &[Tensor], tol: f64) -> bool {
        let scale = a.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt().max(1e-12);
        let diff = a.iter().zip(b).map(|(x, y)| x.sub(y).norm_sq()).sum::<f64>().sqrt();
        diff / scale < tol
    }

    #[test]
    fn gradient_is_affine_in_omega_and_splits_by_component() {
        let (dm, pref, dir, prompts) = rft_fixture();
        let sched = dm.sched();
        let cfg = small_cfg(0.3);
        let grad = |omega: f64| {
            let t = rft_targets(&dm, &prompts, &pref, &dir, omega).unwrap();
            rft_gradient(&dm, &t, &pref, &sched, &cfg, 0).unwrap().grads
        };
        let (g0, g1, gw) = (grad(0.0), grad(1.0), grad(0.3));
        let affine: Vec<Tensor> = g0.iter().zip(&g1).map(|(a, b)| a.add(&b.sub(a).scale(0.3))).collect();
        assert!(rel_close(&gw, &affine, 1e-5));

        let base = rft_targets(&dm, &prompts, &pref, &dir, 0.3).unwrap();
        let with_dir = |f: &dyn Fn(&RftTarget) -> Tensor| {
            let t: Vec<RftTarget> = base.iter().map(|t| RftTarget { reward_dir: f(t), ..t.clone() }).collect();
            rft_gradient(&dm, &t, &pref, &sched, &cfg, 0).unwrap().grads
        };
        let g_perp = with_dir(&|t| t.c_perp.clone());
        let g_irr = with_dir(&|t| t.irrelevant.clone());
        let two_term: Vec<Tensor> = g_perp.iter().zip(&g_irr).map(|(p, i)| p.add(&i.scale(0.3))).collect();
        assert!(rel_close(&gw, &two_term, 1e-5));
    }

    #[test]
    fn omega_one_matches_unreweighted_update() {
        let (dm, pref, dir, prompts) = rft_fixture();
        let cfg = small_cfg(1.0);
        let mut a = dm.clone();
        train_rft(&mut a, &prompts, &pref, &dir, &cfg, |_| {}).unwrap();
        let cps = pref.prompt_embeddings(&prompts, ScoreMode::SegmentAvg).unwrap();
        let raw: Vec<RftTarget> = rft_targets(&dm, &prompts, &pref, &dir, 1.0)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, t)| RftTarget { reward_dir: cps.row_tensor(i), ..t })
            .collect();
        let mut b = dm.clone();
        train_rft_with_targets(&mut b, &raw, &pref, &cfg, |_| {}).unwrap();
        let delta_a = a.denoiser.params().tensors().iter().zip(dm.denoiser.params().tensors()).map(|(x, y)| x.sub(y)).collect::<Vec<_>>();
        let delta_b = b.denoiser.params().tensors().iter().zip(dm.denoiser.params().tensors()).map(|(x, y)| x.sub(y)).collect::<Vec<_>>();
        let worst = delta_a.iter().zip(&delta_b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
        assert!(worst <= 1e-7, "parameter deltas differ by {worst}");
        assert_ne!(a.denoiser.params(), dm.denoiser.params());
    }

    #[test]
    fn zero_updates_and_determinism() {
        let (dm, pref, dir, prompts) = rft_fixture();
        let mut z = dm.clone();
        let log = train_rft(&mut z, &prompts, &pref, &dir, &RewardConfig { total_updates: 0, ..small_cfg(0.3) }, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(z, dm);
        let cfg = RewardConfig { total_updates: 2, ..small_cfg(0.3) };
        let (mut a, mut b) = (dm.clone(), dm.clone());
        let la = train_rft(&mut a, &prompts, &pref, &dir, &cfg, |_| {}).unwrap();
        let lb = train_rft(&mut b, &prompts, &pref, &dir, &cfg, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la[1].step, 1);
        assert_eq!(la[0].omega, 0.3);
    }

    #[test]
    fn direction_must_match_encoder() {
        let (mut dm, pref, mut dir, prompts) = rft_fixture();
        dir.info.encoder_version = "0000".into();
        assert!(matches!(train_rft(&mut dm, &prompts, &pref, &dir, &small_cfg(0.3), |_| {}), Err(Error::IncompatibleCheckpoint(_))));
    }
}
