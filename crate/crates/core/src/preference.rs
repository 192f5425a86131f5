//! Dot-product preference scoring `R(x, p) = C_X(x) · C_P(p)` and
//! Bradley-Terry training with single, segment and orthogonal variants.

use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::datakit::PreferencePair;
use crate::encoders::{ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::params::{cosine_lr, grads_finite, Adam, AdamConfig, Bound};
use crate::rng::{self, tags};
use crate::segmentation::{segment_prompt, tokenize_truncated, RawPrompt, TokenizedSegment, Vocabulary};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 10.0;
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    Single,
    Seg,
    SegA,
    SegO,
}

impl LossVariant {
    pub fn needs_short_text(self) -> bool {
        matches!(self, LossVariant::SegA | LossVariant::SegO)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// One pass over the prompt, truncated to the first segment's capacity.
    Single,
    SegmentAvg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceModel {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub vocab: Vocabulary,
    pub tau: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    tau: f64,
    text: TextEncoderConfig,
    image: ImageEncoderConfig,
    vocab: Vec<String>,
}

impl PreferenceModel {
    pub fn new(vocab: Vocabulary, text: TextEncoderConfig, image: ImageEncoderConfig, tau: f64, seed: u64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        if text.d_e != image.d_e || text.vocab_size != vocab.size() {
            return Err(Error::InvalidArgument("text/image embedding widths or vocabulary size disagree".into()));
        }
        Ok(Self {
            text: TextEncoder::new(text, rng::derive_seed(seed, tags::INIT, 10)),
            image: ImageEncoder::new(image, rng::derive_seed(seed, tags::INIT, 11)),
            vocab,
            tau,
        })
    }

    pub fn l_seg(&self) -> usize {
        self.text.config().l_seg
    }

    pub fn d_e(&self) -> usize {
        self.text.config().d_e
    }

    pub fn single_segment(&self, text: &str) -> Result<TokenizedSegment> {
        tokenize_truncated(text, &self.vocab, self.l_seg())
    }

    pub fn segments(&self, p: &RawPrompt) -> Result<Vec<TokenizedSegment>> {
        Ok(segment_prompt(p, &self.vocab, self.l_seg())?.segments)
    }

    /// Pooled embedding of each segment, `K × d_e`.
    pub fn segment_embeddings(&self, p: &RawPrompt) -> Result<Tensor> {
        let segs = self.segments(p)?;
        let refs: Vec<&TokenizedSegment> = segs.iter().collect();
        Ok(Tensor::from_rows(&self.text.encode_segments(&refs).into_iter().map(|e| e.pooled).collect::<Vec<_>>()))
    }

    /// `C_P(p)` (single) or `C_P^seg(p)` (segment average), `1 × d_e`.
    pub fn prompt_embedding(&self, p: &RawPrompt, mode: ScoreMode) -> Result<Tensor> {
        Ok(self.prompt_embeddings(std::slice::from_ref(p), mode)?.row_tensor(0))
    }

    /// Batched [`Self::prompt_embedding`], `N × d_e`.
    pub fn prompt_embeddings(&self, prompts: &[RawPrompt], mode: ScoreMode) -> Result<Tensor> {
        let mut per_prompt: Vec<Vec<TokenizedSegment>> = Vec::with_capacity(prompts.len());
        for p in prompts {
            per_prompt.push(match mode {
                ScoreMode::Single => vec![self.single_segment(&p.text)?],
                ScoreMode::SegmentAvg => self.segments(p)?,
            });
        }
        let flat: Vec<&TokenizedSegment> = per_prompt.iter().flatten().collect();
        let mut pooled = Vec::with_capacity(flat.len());
        for chunk in flat.chunks(CHUNK) {
            pooled.extend(self.text.encode_segments(chunk).into_iter().map(|e| e.pooled));
        }
        let mut out = Vec::with_capacity(prompts.len());
        let mut i = 0;
        for segs in &per_prompt {
            out.push(mean_of(&pooled[i..i + segs.len()]));
            i += segs.len();
        }
        Ok(Tensor::from_rows(&out))
    }

    pub fn image_embedding(&self, x: &Tensor) -> Result<Tensor> {
        self.image.encode_image(x)
    }

    /// `N × d_e`.
    pub fn image_embeddings(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let e = self.image.encode_batch(chunk)?;
            rows.extend((0..e.rows()).map(|r| e.row_tensor(r)));
        }
        Ok(Tensor::from_rows(&rows))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(Manifest {
            kind: "preference".into(),
            tau: self.tau,
            text: *self.text.config(),
            image: *self.image.config(),
            vocab: self.vocab.tokens().to_vec(),
        })?;
        ck.push_params("text", self.text.params());
        ck.push_params("image", self.image.params());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m: Manifest = ck.manifest_as()?;
        if m.kind != "preference" {
            return Err(Error::IncompatibleCheckpoint(format!("expected a preference checkpoint, found '{}'", m.kind)));
        }
        let vocab = Vocabulary::new(m.vocab)?;
        let mut model = Self::new(vocab, m.text, m.image, m.tau, 0)
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        ck.load_params("text", model.text.params_mut())?;
        ck.load_params("image", model.image.params_mut())?;
        Ok(model)
    }
}

/// Mean of rows; a single row is returned unchanged.
fn mean_of(rows: &[Tensor]) -> Tensor {
    if rows.len() == 1 {
        return rows[0].clone();
    }
    let mut acc = Tensor::zeros(1, rows[0].cols());
    for r in rows {
        acc.add_assign(r);
    }
    acc.scale(1.0 / rows.len() as f64)
}

pub fn score(x: &Tensor, p: &RawPrompt, m: &PreferenceModel, mode: ScoreMode) -> Result<f64> {
    let cx = m.image_embedding(x)?;
    Ok(cx.dot(&m.prompt_embedding(p, mode)?))
}

/// One score per segment, in prompt order.
pub fn score_segments(x: &Tensor, p: &RawPrompt, m: &PreferenceModel) -> Result<Vec<f64>> {
    let cx = m.image_embedding(x)?;
    let pooled = m.segment_embeddings(p)?;
    Ok((0..pooled.rows()).map(|k| cx.dot(&pooled.row_tensor(k))).collect())
}

/// `−log σ(τ·Δ)`.
pub fn bt_nll(tau: f64, delta: f64) -> f64 {
    softplus(-tau * delta)
}

/// `v` with its component along unit `dir` removed.
pub fn remove_direction(v: &Tensor, dir: &Tensor) -> Tensor {
    let eta = v.dot(dir);
    let mut out = v.clone();
    out.axpy(-eta, dir);
    out
}

/// Score margin of the segment term given pooled segment rows `K × d_e`;
/// with `dir` the projection onto it is removed first.
pub fn segment_margin(cx_win: &Tensor, cx_lose: &Tensor, pooled: &Tensor, dir: Option<&Tensor>) -> f64 {
    let rows: Vec<Tensor> = (0..pooled.rows())
        .map(|k| {
            let r = pooled.row_tensor(k);
            dir.map_or(r.clone(), |d| remove_direction(&r, d))
        })
        .collect();
    let c = mean_of(&rows);
    cx_win.dot(&c) - cx_lose.dot(&c)
}

/// Tokenized inputs for one pair under a loss variant.
#[derive(Clone, Debug)]
struct Prepared {
    text_segs: Vec<TokenizedSegment>,
    short: Option<TokenizedSegment>,
}

fn prepare(pair: &PreferencePair, m: &PreferenceModel, variant: LossVariant) -> Result<Prepared> {
    let text_segs = match variant {
        LossVariant::Single => vec![m.single_segment(&pair.prompt.text)?],
        _ => m.segments(&pair.prompt)?,
    };
    let short = if variant.needs_short_text() {
        let s = pair
            .prompt
            .short_text
            .as_deref()
            .ok_or_else(|| Error::InvalidRecord("loss variant needs short_text but the record has none".into()))?;
        Some(m.single_segment(s)?)
    } else {
        None
    };
    Ok(Prepared { text_segs, short })
}

fn row_dot(g: &mut Graph, a: Var, b: Var) -> Var {
    let cols = g.value(a).cols();
    let prod = g.mul(a, b);
    let ones = g.constant(Tensor::filled(cols, 1, 1.0));
    g.matmul(prod, ones)
}

/// Mean BT NLL over rows of `B × d_e` text embeddings `c` against image
/// embeddings `cx` (`2B × d_e`, winners first).
fn bt_mean(g: &mut Graph, cx: Var, c: Var, tau: f64) -> Var {
    let b = g.value(c).rows();
    let win = g.slice_rows(cx, 0, b);
    let lose = g.slice_rows(cx, b, b);
    let sw = row_dot(g, win, c);
    let sl = row_dot(g, lose, c);
    let delta = g.sub(sl, sw);
    let z = g.scale(delta, tau);
    let nll = g.softplus(z);
    g.mean(nll)
}

struct BatchGraph {
    loss: Var,
    /// Batch `C_P^seg` before any projection, `B × d_e`.
    c_seg: Var,
}

fn averaging_matrix(counts: &[usize]) -> Tensor {
    let total: usize = counts.iter().sum();
    let mut a = Tensor::zeros(counts.len(), total);
    let mut col = 0;
    for (r, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            a.set(r, col, 1.0 / k as f64);
            col += 1;
        }
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    m: &PreferenceModel,
    tb: &Bound,
    ib: &Bound,
    prepared: &[&Prepared],
    images: &[(&Tensor, &Tensor)],
    variant: LossVariant,
    dir: &mut dyn FnMut(&Tensor) -> Option<Tensor>,
) -> Result<BatchGraph> {
    let b = prepared.len();
    let mut cx_rows: Vec<Tensor> = images.iter().map(|(w, _)| (*w).clone()).collect();
    cx_rows.extend(images.iter().map(|(_, l)| (*l).clone()));
    for x in &cx_rows {
        m.image.check_image(x)?;
    }
    let imgs = g.constant(Tensor::from_rows(&cx_rows));
    let cx = m.image.forward(g, ib, imgs);

    let segs: Vec<&TokenizedSegment> = prepared.iter().flat_map(|p| p.text_segs.iter()).collect();
    let counts: Vec<usize> = prepared.iter().map(|p| p.text_segs.len()).collect();
    let fwd = m.text.forward(g, tb, &segs);
    let c_seg = if segs.len() == b {
        fwd.pooled
    } else {
        let a = g.constant(averaging_matrix(&counts));
        g.matmul(a, fwd.pooled)
    };
    let v = dir(g.value(c_seg));
    let c_term = match (variant, v) {
        (LossVariant::SegO, None) => return Err(Error::MissingDirection),
        (LossVariant::SegO, Some(v)) => {
            let vt = g.constant(v.transpose());
            let vr = g.constant(v);
            let eta = g.matmul(fwd.pooled, vt);
            let along = g.matmul(eta, vr);
            let perp = g.sub(fwd.pooled, along);
            if segs.len() == b {
                perp
            } else {
                let a = g.constant(averaging_matrix(&counts));
                g.matmul(a, perp)
            }
        }
        _ => c_seg,
    };
    let mut loss = bt_mean(g, cx, c_term, m.tau);
    if variant.needs_short_text() {
        let shorts: Vec<&TokenizedSegment> = prepared.iter().map(|p| p.short.as_ref().expect("prepared with short text")).collect();
        let sf = m.text.forward(g, tb, &shorts);
        let short_term = bt_mean(g, cx, sf.pooled, m.tau);
        loss = g.add(loss, short_term);
    }
    Ok(BatchGraph { loss, c_seg })
}

/// Loss of one pair under `variant`. `SEG_O` needs the unit direction `v`.
pub fn preference_loss(pair: &PreferencePair, m: &PreferenceModel, variant: LossVariant, v: Option<&Tensor>) -> Result<f64> {
    if variant == LossVariant::SegO && v.is_none() {
        return Err(Error::MissingDirection);
    }
    let prep = prepare(pair, m, variant)?;
    let mut g = Graph::new();
    let tb = m.text.params().bind(&mut g, false);
    let ib = m.image.params().bind(&mut g, false);
    let out = build_loss(&mut g, m, &tb, &ib, &[&prep], &[(&pair.image_win, &pair.image_lose)], variant, &mut |_| v.cloned())?;
    Ok(g.scalar(out.loss))
}

/// Parameter gradients of [`preference_loss`] for text then image slots.
pub fn preference_loss_grads(
    pair: &PreferencePair,
    m: &PreferenceModel,
    variant: LossVariant,
    v: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let prep = prepare(pair, m, variant)?;
    let mut g = Graph::new();
    let tb = m.text.params().bind(&mut g, true);
    let ib = m.image.params().bind(&mut g, true);
    let out = build_loss(&mut g, m, &tb, &ib, &[&prep], &[(&pair.image_win, &pair.image_lose)], variant, &mut |_| v.cloned())?;
    let grads = g.backward(out.loss);
    Ok((g.scalar(out.loss), tb.grads(&g, &grads), ib.grads(&g, &grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefTrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub variant: LossVariant,
    pub adam: AdamConfig,
    /// EMA decay of the common direction tracked during `SEG_O` training.
    pub ema_decay: f64,
    /// Cosine learning-rate decay over `steps`.
    pub cosine: bool,
}

impl Default for PrefTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            batch_size: 32,
            variant: LossVariant::SegO,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            ema_decay: 0.99,
            cosine: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub n: usize,
    /// Mean BT NLL at the model temperature.
    pub nll: f64,
    /// Fraction of pairs with `S_win > S_lose`.
    pub accuracy: f64,
}

/// Held-out metrics scored with `mode`; `dir` switches to the
/// projection-removed (relevant) score.
pub fn evaluate_pairs(m: &PreferenceModel, pairs: &[PreferencePair], mode: ScoreMode, dir: Option<&Tensor>) -> Result<PairMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let prompts: Vec<RawPrompt> = pairs.iter().map(|p| p.prompt.clone()).collect();
    let mut c = m.prompt_embeddings(&prompts, mode)?;
    if let Some(d) = dir {
        let rows: Vec<Tensor> = (0..c.rows()).map(|r| remove_direction(&c.row_tensor(r), d)).collect();
        c = Tensor::from_rows(&rows);
    }
    let wins: Vec<Tensor> = pairs.iter().map(|p| p.image_win.clone()).collect();
    let loses: Vec<Tensor> = pairs.iter().map(|p| p.image_lose.clone()).collect();
    let (ew, el) = (m.image_embeddings(&wins)?, m.image_embeddings(&loses)?);
    let (mut nll, mut hits) = (0.0, 0usize);
    for i in 0..pairs.len() {
        let ci = c.row_tensor(i);
        let delta = ew.row_tensor(i).dot(&ci) - el.row_tensor(i).dot(&ci);
        nll += bt_nll(m.tau, delta);
        hits += usize::from(delta > 0.0);
    }
    let n = pairs.len();
    Ok(PairMetrics { n, nll: nll / n as f64, accuracy: hits as f64 / n as f64 })
}

pub fn heldout_mode(variant: LossVariant) -> ScoreMode {
    if variant == LossVariant::Single { ScoreMode::Single } else { ScoreMode::SegmentAvg }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefTrainReport {
    pub losses: Vec<f64>,
    /// Final EMA direction, `SEG_O` only.
    pub ema_direction: Option<Tensor>,
    pub heldout_before: Option<PairMetrics>,
    pub heldout_after: Option<PairMetrics>,
}

fn normalized(v: &Tensor) -> Option<Tensor> {
    let n = v.norm();
    (n > 1e-12).then(|| v.scale(1.0 / n))
}

/// Trains `model` in place. With a non-empty `heldout` set the run fails
/// unless the held-out NLL ends strictly below its initial value.
pub fn train_preference_model(
    model: &mut PreferenceModel,
    pairs: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &PrefTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PrefTrainReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("preference dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let prepared = pairs.iter().map(|p| prepare(p, model, cfg.variant)).collect::<Result<Vec<_>>>()?;
    let mode = heldout_mode(cfg.variant);
    let heldout_before = if heldout.is_empty() || cfg.steps == 0 { None } else { Some(evaluate_pairs(model, heldout, mode, None)?) };

    let mut opt_t = Adam::new(model.text.params(), cfg.adam);
    let mut opt_i = Adam::new(model.image.params(), cfg.adam);
    let mut ema: Option<Tensor> = None;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::sub_rng(cfg.seed, tags::BATCH, step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rand::Rng::random_range(&mut r, 0..pairs.len())).collect();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &prepared[i]).collect();
        let images: Vec<(&Tensor, &Tensor)> = idx.iter().map(|&i| (&pairs[i].image_win, &pairs[i].image_lose)).collect();

        let mut g = Graph::new();
        let tb = model.text.params().bind(&mut g, true);
        let ib = model.image.params().bind(&mut g, true);
        let decay = cfg.ema_decay;
        let track = cfg.variant == LossVariant::SegO;
        let mut update_dir = |c: &Tensor| -> Option<Tensor> {
            if !track {
                return None;
            }
            let mean = c.mean_rows();
            let next = match &ema {
                None => normalized(&mean),
                Some(prev) => normalized(&prev.scale(decay).add(&mean.scale(1.0 - decay))).or_else(|| Some(prev.clone())),
            };
            ema = next.or_else(|| Some(Tensor::basis(c.cols(), 0)));
            ema.clone()
        };
        let out = build_loss(&mut g, model, &tb, &ib, &batch, &images, cfg.variant, &mut update_dir)?;
        let _ = out.c_seg;
        let loss = g.scalar(out.loss);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = g.backward(out.loss);
        let (gt, gi) = (tb.grads(&g, &grads), ib.grads(&g, &grads));
        if !grads_finite(&gt) || !grads_finite(&gi) {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        if cfg.cosine {
            let lr = cosine_lr(cfg.adam.lr, step, cfg.steps);
            opt_t.set_lr(lr);
            opt_i.set_lr(lr);
        }
        opt_t.step(model.text.params_mut(), &gt);
        opt_i.step(model.image.params_mut(), &gi);
        losses.push(loss);
        on_step(step, loss);
    }

    let heldout_after = match heldout_before {
        Some(before) => {
            let after = evaluate_pairs(model, heldout, mode, None)?;
            if after.nll >= before.nll {
                return Err(Error::TrainingFailure(format!(
                    "held-out NLL did not improve: {:.4} at init, {:.4} after {} steps",
                    before.nll, after.nll, cfg.steps
                )));
            }
            Some(after)
        }
        None => None,
    };
    Ok(PrefTrainReport { losses, ema_direction: ema, heldout_before, heldout_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{self, Corruption};
    use crate::encoders::ImageShape;
    use approx::assert_relative_eq;

    fn toy_model(seed: u64) -> PreferenceModel {
        let vocab = datakit::grammar_vocabulary();
        let t = TextEncoderConfig::toy(vocab.size());
        let i = ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX);
        PreferenceModel::new(vocab, t, i, DEFAULT_TAU, seed).unwrap()
    }

    fn pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
        let recs = datakit::generate_records(n, seed).unwrap();
        datakit::derive_preference_pairs(&recs, seed, Corruption::Mixed).unwrap().0
    }

    #[test]
    fn closed_form_nll_values() {
        assert_relative_eq!(bt_nll(1.0, 0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(bt_nll(1.0, 1.0), 0.31326168751822286, epsilon = 1e-12);
        // probabilities of the two orderings sum to one
        for d in [-0.7, 0.0, 0.2, 1.3] {
            let s = (-bt_nll(3.0, d)).exp() + (-bt_nll(3.0, -d)).exp();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn segment_avg_is_mean_of_segment_scores() {
        let m = toy_model(1);
        let rec = &datakit::generate_records(8, 2).unwrap()[7];
        let per = score_segments(&rec.image, &rec.prompt(), &m).unwrap();
        let avg = score(&rec.image, &rec.prompt(), &m, ScoreMode::SegmentAvg).unwrap();
        assert!((per.iter().sum::<f64>() / per.len() as f64 - avg).abs() < 1e-7);
        assert!(avg.abs() <= 1.0);
    }

    #[test]
    fn single_segment_prompt_matches_single_score() {
        let m = toy_model(1);
        let x = datakit::generate_records(1, 0).unwrap().remove(0).image;
        let p = RawPrompt::new("A red circle in the center.").unwrap();
        let per = score_segments(&x, &p, &m).unwrap();
        assert_eq!(per, vec![score(&x, &p, &m, ScoreMode::Single).unwrap()]);
    }

    #[test]
    fn seg_at_k1_equals_single_bitwise() {
        let m = toy_model(4);
        for p in pairs(30, 5).into_iter().filter(|p| p.prompt.short_text.as_deref() == Some(p.prompt.text.as_str())) {
            let a = preference_loss(&p, &m, LossVariant::Seg, None).unwrap();
            let b = preference_loss(&p, &m, LossVariant::Single, None).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn loss_variant_errors() {
        let m = toy_model(0);
        let mut p = pairs(4, 1).remove(0);
        assert!(matches!(preference_loss(&p, &m, LossVariant::SegO, None), Err(Error::MissingDirection)));
        p.prompt.short_text = None;
        let v = Tensor::basis(m.d_e(), 0);
        assert!(matches!(preference_loss(&p, &m, LossVariant::SegA, None), Err(Error::InvalidRecord(_))));
        assert!(matches!(preference_loss(&p, &m, LossVariant::SegO, Some(&v)), Err(Error::InvalidRecord(_))));
    }

    #[test]
    fn identical_images_give_ln2() {
        let m = toy_model(0);
        let mut p = pairs(2, 3).remove(0);
        p.image_lose = p.image_win.clone();
        let l = preference_loss(&p, &m, LossVariant::Seg, None).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn graph_loss_matches_closed_form() {
        let m = toy_model(2);
        let p = pairs(3, 8).remove(2);
        let v = normalized(&Tensor::filled(1, m.d_e(), 1.0)).unwrap();
        let cw = m.image_embedding(&p.image_win).unwrap();
        let cl = m.image_embedding(&p.image_lose).unwrap();
        let pooled = m.segment_embeddings(&p.prompt).unwrap();
        let short = m.prompt_embedding(&RawPrompt::new(p.prompt.short_text.clone().unwrap()).unwrap(), ScoreMode::Single).unwrap();
        let want = bt_nll(m.tau, segment_margin(&cw, &cl, &pooled, Some(&v))) + bt_nll(m.tau, cw.dot(&short) - cl.dot(&short));
        let got = preference_loss(&p, &m, LossVariant::SegO, Some(&v)).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn seg_o_margin_ignores_shifts_along_direction() {
        let mut r = rng::rng_from(9);
        let v = normalized(&rng::normal_tensor(1, 6, &mut r)).unwrap();
        let pooled = rng::normal_tensor(3, 6, &mut r);
        let (cw, cl) = (rng::normal_tensor(1, 6, &mut r), rng::normal_tensor(1, 6, &mut r));
        let base = segment_margin(&cw, &cl, &pooled, Some(&v));
        for shift in [-2.0, 0.5, 7.0] {
            let mut moved = pooled.clone();
            for k in 0..3 {
                for c in 0..6 {
                    moved.set(k, c, moved.get(k, c) + shift * v.get(0, c));
                }
            }
            assert!((segment_margin(&cw, &cl, &moved, Some(&v)) - base).abs() < 1e-12);
        }
    }

    fn micro_model() -> PreferenceModel {
        let vocab = Vocabulary::from_words(["a", "b", "c", "."]);
        let t = TextEncoderConfig { vocab_size: vocab.size(), d: 4, d_e: 3, l_seg: 5, mlp_hidden: 4, layers: 2 };
        let i = ImageEncoderConfig { shape: ImageShape { h: 2, w: 2, c: 1 }, patch: 1, patch_hidden: 2, hidden: 3, d_e: 3 };
        PreferenceModel::new(vocab, t, i, 2.0, 3).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let m = micro_model();
        let pair = PreferencePair {
            prompt: RawPrompt::with_short("a b. c a.", "a b.").unwrap(),
            image_win: Tensor::row_vector(vec![0.9, 0.1, 0.4, 0.7]),
            image_lose: Tensor::row_vector(vec![0.2, 0.8, 0.6, 0.3]),
            lose_scene: datakit::SceneSpec { objects: vec![], seed: 0 },
        };
        let v = normalized(&Tensor::row_vector(vec![1.0, 0.5, -0.3])).unwrap();
        for variant in [LossVariant::Single, LossVariant::Seg, LossVariant::SegA, LossVariant::SegO] {
            let (_, gt, gi) = preference_loss_grads(&pair, &m, variant, Some(&v)).unwrap();
            // ten scalars spread over both encoders
            let picks = [(true, 0, 5), (true, 1, 2), (true, 2, 7), (true, 4, 3), (true, 9, 1), (true, 14, 4), (false, 0, 1), (false, 2, 3), (false, 4, 2), (false, 3, 0)];
            for (text, slot, idx) in picks {
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut mm = m.clone();
                    let ps = if text { mm.text.params_mut() } else { mm.image.params_mut() };
                    ps.perturb(slot, idx, delta);
                    preference_loss(&pair, &mm, variant, Some(&v)).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if text { gt[slot].data()[idx] } else { gi[slot].data()[idx] };
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-3, "{variant:?} slot {slot} idx {idx}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn zero_steps_leave_parameters_and_runs_are_deterministic() {
        let data = pairs(40, 1);
        let cfg = PrefTrainConfig { steps: 0, ..PrefTrainConfig::default() };
        let mut m = toy_model(3);
        let init = m.clone();
        train_preference_model(&mut m, &data, &[], &cfg, |_, _| {}).unwrap();
        assert_eq!(m, init);

        let cfg = PrefTrainConfig { steps: 5, batch_size: 8, ..PrefTrainConfig::default() };
        let (mut a, mut b) = (toy_model(3), toy_model(3));
        let ra = train_preference_model(&mut a, &data, &[], &cfg, |_, _| {}).unwrap();
        let rb = train_preference_model(&mut b, &data, &[], &cfg, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.losses, rb.losses);
        let v = ra.ema_direction.unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model(5);
        let back = PreferenceModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
