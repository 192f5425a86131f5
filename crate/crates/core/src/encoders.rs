//! Toy dual encoder and the two segment merge rules.
//!
//! Segments are encoded independently. For diffusion conditioning the
//! per-token outputs are concatenated as `<sot> Text1 <sot> Text2 … <pad*>`,
//! dropping every `<eot>` and per-segment `<pad>` row. For preference
//! scoring the pooled segment embeddings are averaged.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::segmentation::{tokenize_segment, TokenizedSegment, Vocabulary};
use crate::tensor::Tensor;

const MASK: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Token width `d`.
    pub d: usize,
    /// Pooled embedding width `d_e`.
    pub d_e: usize,
    pub l_seg: usize,
    pub mlp_hidden: usize,
    /// Attention + MLP blocks.
    #[serde(default = "one")]
    pub layers: usize,
}

fn one() -> usize {
    1
}

impl TextEncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self { vocab_size, d: 32, d_e: 32, l_seg: 12, mlp_hidden: 64, layers: 1 }
    }
}

mod text_slot {
    pub const TOK: usize = 0;
    pub const POS: usize = 1;
    pub const PROJ: usize = 2;
    pub const PER_LAYER: usize = 8;
    pub const WQ: usize = 0;
    pub const WK: usize = 1;
    pub const WV: usize = 2;
    pub const WO: usize = 3;
    pub const W1: usize = 4;
    pub const B1: usize = 5;
    pub const W2: usize = 6;
    pub const B2: usize = 7;

    pub fn in_layer(l: usize, offset: usize) -> usize {
        3 + l * PER_LAYER + offset
    }
}

/// Token embedding, one causal self-attention block with an MLP, and a
/// projection head for pooling.
#[derive(Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    params: ParamSet,
    pad_star: Mutex<Option<(u64, Tensor)>>,
}

impl Clone for TextEncoder {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg, params: self.params.clone(), pad_star: Mutex::new(None) }
    }
}

impl PartialEq for TextEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

/// Graph outputs of a batched text forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TextForward {
    /// `(S·L_seg) × d`, segment-major.
    pub per_token: Var,
    /// `S × d_e`, unit rows.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEmbeddings {
    /// `L_seg × d`.
    pub per_token: Tensor,
    /// `1 × d_e`, unit norm.
    pub pooled: Tensor,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, seed: u64) -> Self {
        let mut r = rng::sub_rng(seed, rng::tags::INIT, 0);
        let (d, h) = (cfg.d, cfg.mlp_hidden);
        let s = 1.0 / (d as f64).sqrt();
        let mut p = ParamSet::new();
        p.push_normal("tok_emb", cfg.vocab_size, d, 1.0, &mut r);
        p.push_normal("pos_emb", cfg.l_seg, d, 0.1, &mut r);
        p.push_normal("proj", d, cfg.d_e, s, &mut r);
        for l in 0..cfg.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                p.push_normal(&format!("l{l}.{name}"), d, d, s, &mut r);
            }
            p.push_normal(&format!("l{l}.mlp_w1"), d, h, s, &mut r);
            p.push_zeros(&format!("l{l}.mlp_b1"), 1, h);
            p.push_normal(&format!("l{l}.mlp_w2"), h, d, 1.0 / (h as f64).sqrt(), &mut r);
            p.push_zeros(&format!("l{l}.mlp_b2"), 1, d);
        }
        Self::from_params(cfg, p)
    }

    /// Every parameter zero.
    pub fn zeroed(cfg: TextEncoderConfig) -> Self {
        let mut enc = Self::new(cfg, 0);
        for slot in 0..enc.params.len() {
            let (r, c) = enc.params.get(slot).shape();
            enc.params.set(slot, Tensor::zeros(r, c));
        }
        enc
    }

    pub fn from_params(cfg: TextEncoderConfig, params: ParamSet) -> Self {
        Self { cfg, params, pad_star: Mutex::new(None) }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Batched forward over `segs` with parameters bound in `bound`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, segs: &[&TokenizedSegment]) -> TextForward {
        use text_slot::*;
        let l = self.cfg.l_seg;
        let ids: Vec<usize> = segs
            .iter()
            .flat_map(|s| {
                assert_eq!(s.token_ids.len(), l, "segment length must equal L_seg");
                s.token_ids.iter().copied()
            })
            .collect();
        let tok = g.gather_rows(bound.var(TOK), &ids);
        let pos = g.concat_rows(&vec![bound.var(POS); segs.len()]);
        let mask = g.constant(causal_mask(l));
        let mut x = g.add(tok, pos);
        for layer in 0..self.cfg.layers {
            x = self.block(g, bound, x, mask, segs.len(), layer);
        }
        let per_token = x;

        let pool = g.constant(pooling_matrix(segs, l));
        let pooled = g.matmul(pool, per_token);
        let pooled = g.matmul(pooled, bound.var(PROJ));
        let pooled = g.normalize_rows(pooled);
        TextForward { per_token, pooled }
    }

    fn block(&self, g: &mut Graph, bound: &Bound, x: Var, mask: Var, n: usize, layer: usize) -> Var {
        use text_slot::*;
        let (l, d) = (self.cfg.l_seg, self.cfg.d);
        let p = |o| bound.var(in_layer(layer, o));
        let q = g.matmul(x, p(WQ));
        let k = g.matmul(x, p(WK));
        let v = g.matmul(x, p(WV));
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(n);
        for s in 0..n {
            let (qs, ks, vs) = (g.slice_rows(q, s * l, l), g.slice_rows(k, s * l, l), g.slice_rows(v, s * l, l));
            let sc = g.matmul_nt(qs, ks);
            let sc = g.scale(sc, scale);
            let sc = g.add(sc, mask);
            let a = g.softmax_rows(sc);
            heads.push(g.matmul(a, vs));
        }
        let att = g.concat_rows(&heads);
        let att = g.matmul(att, p(WO));
        let hdn = g.add(x, att);

        let m = g.matmul(hdn, p(W1));
        let m = g.add_row(m, p(B1));
        let m = g.silu(m);
        let m = g.matmul(m, p(W2));
        let m = g.add_row(m, p(B2));
        g.add(hdn, m)
    }

    pub fn encode_segments(&self, segs: &[&TokenizedSegment]) -> Vec<SegmentEmbeddings> {
        if segs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, segs);
        let l = self.cfg.l_seg;
        let (pt, pooled) = (g.value(out.per_token), g.value(out.pooled));
        (0..segs.len())
            .map(|s| SegmentEmbeddings { per_token: pt.slice_rows(s * l, l), pooled: pooled.row_tensor(s) })
            .collect()
    }

    pub fn encode_segment(&self, seg: &TokenizedSegment) -> SegmentEmbeddings {
        self.encode_segments(&[seg]).pop().expect("one segment in, one out")
    }

    /// Mean of the `<pad>` outputs of the empty segment, `1 × d`. Cached
    /// until the parameters change.
    pub fn pad_star_embedding(&self, vocab: &Vocabulary) -> Tensor {
        let version = self.params.version();
        let mut cache = self.pad_star.lock().expect("pad* cache poisoned");
        if let Some((v, t)) = cache.as_ref() {
            if *v == version {
                return t.clone();
            }
        }
        let empty = self.empty_segment(vocab);
        let emb = self.encode_segment(&empty);
        let t = emb.per_token.slice_rows(2, self.cfg.l_seg - 2).mean_rows();
        *cache = Some((version, t.clone()));
        t
    }

    /// pad* as a graph node, differentiable w.r.t. the bound parameters.
    pub fn pad_star_var(&self, g: &mut Graph, bound: &Bound, vocab: &Vocabulary) -> Var {
        let empty = self.empty_segment(vocab);
        let out = self.forward(g, bound, &[&empty]);
        let pads = g.slice_rows(out.per_token, 2, self.cfg.l_seg - 2);
        g.mean_rows(pads)
    }

    fn empty_segment(&self, vocab: &Vocabulary) -> TokenizedSegment {
        assert!(self.cfg.l_seg >= 3, "L_seg must leave room for a <pad>");
        tokenize_segment("", vocab, self.cfg.l_seg).expect("empty segment always fits")
    }
}

fn causal_mask(l: usize) -> Tensor {
    let mut m = Tensor::zeros(l, l);
    for i in 0..l {
        for j in i + 1..l {
            m.set(i, j, MASK);
        }
    }
    m
}

/// Row `s` averages the content rows of segment `s`, or takes its `<sot>`
/// row when the segment is empty.
fn pooling_matrix(segs: &[&TokenizedSegment], l: usize) -> Tensor {
    let mut p = Tensor::zeros(segs.len(), segs.len() * l);
    for (s, seg) in segs.iter().enumerate() {
        if seg.content_len == 0 {
            p.set(s, s * l, 1.0);
        } else {
            let w = 1.0 / seg.content_len as f64;
            for j in 1..=seg.content_len {
                p.set(s, s * l + j, w);
            }
        }
    }
    p
}

/// Which source produced a row of the merged conditioning sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondTag {
    Sot,
    Content,
    PadStar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence {
    /// `N_cond × d`.
    pub embeddings: Tensor,
    pub layout: Vec<CondTag>,
}

impl ConditioningSequence {
    /// Every row pad* (the unconditional branch for guidance).
    pub fn null(pad_star: &Tensor, n_cond: usize) -> Self {
        let rows = vec![pad_star.clone(); n_cond];
        Self { embeddings: Tensor::from_rows(&rows), layout: vec![CondTag::PadStar; n_cond] }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn sot_count(&self) -> usize {
        self.layout.iter().filter(|t| **t == CondTag::Sot).count()
    }
}

/// Row selection for a merged sequence: indices into the stacked
/// per-token rows, then `pad_count` pad* rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    pub rows: Vec<usize>,
    pub layout: Vec<CondTag>,
    pub pad_count: usize,
}

pub fn merge_plan(segs: &[&TokenizedSegment], l_seg: usize, n_cond: usize) -> Result<MergePlan> {
    let required: usize = segs.iter().map(|s| 1 + s.content_len).sum();
    if required > n_cond {
        return Err(Error::ConditioningOverflow { required, available: n_cond });
    }
    let mut rows = Vec::with_capacity(required);
    let mut layout = Vec::with_capacity(n_cond);
    for (s, seg) in segs.iter().enumerate() {
        rows.push(s * l_seg);
        layout.push(CondTag::Sot);
        for j in 1..=seg.content_len {
            rows.push(s * l_seg + j);
            layout.push(CondTag::Content);
        }
    }
    let pad_count = n_cond - required;
    layout.extend(std::iter::repeat_n(CondTag::PadStar, pad_count));
    Ok(MergePlan { rows, layout, pad_count })
}

/// Concatenates `<sot>` and content rows of each segment in order and
/// fills the tail with pad*.
pub fn merge_conditioning(
    segments: &[(&TokenizedSegment, &SegmentEmbeddings)],
    pad_star: &Tensor,
    n_cond: usize,
) -> Result<ConditioningSequence> {
    let l_seg = segments.first().map_or(0, |(s, _)| s.len());
    let segs: Vec<&TokenizedSegment> = segments.iter().map(|(s, _)| *s).collect();
    let plan = merge_plan(&segs, l_seg, n_cond)?;
    let mut rows: Vec<Tensor> = plan
        .rows
        .iter()
        .map(|&r| segments[r / l_seg].1.per_token.row_tensor(r % l_seg))
        .collect();
    rows.extend(std::iter::repeat_n(pad_star.clone(), plan.pad_count));
    let embeddings = if rows.is_empty() { Tensor::zeros(0, pad_star.cols()) } else { Tensor::from_rows(&rows) };
    Ok(ConditioningSequence { embeddings, layout: plan.layout })
}

/// Graph version of [`merge_conditioning`] over a batched forward.
pub fn merge_conditioning_var(g: &mut Graph, per_token: Var, plan: &MergePlan, pad_star: Var) -> Var {
    let kept = g.gather_rows(per_token, &plan.rows);
    let mut parts = vec![kept];
    parts.extend(std::iter::repeat_n(pad_star, plan.pad_count));
    g.concat_rows(&parts)
}

/// `C_P^seg`: mean of pooled segment embeddings, not re-normalized.
pub fn average_segment_embedding(segments: &[SegmentEmbeddings]) -> Result<Tensor> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("cannot average zero segment embeddings".into()));
    }
    let mut acc = Tensor::zeros(1, segments[0].pooled.cols());
    for s in segments {
        acc.add_assign(&s.pooled);
    }
    Ok(acc.scale(1.0 / segments.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub shape: ImageShape,
    /// Square patch side; must divide `h` and `w`.
    pub patch: usize,
    pub patch_hidden: usize,
    /// Width of the second patch layer.
    pub hidden: usize,
    pub d_e: usize,
}

impl ImageEncoderConfig {
    pub fn toy(shape: ImageShape, patch: usize) -> Self {
        Self { shape, patch, patch_hidden: 48, hidden: 32, d_e: 32 }
    }

    pub fn num_patches(&self) -> usize {
        (self.shape.h / self.patch) * (self.shape.w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.shape.c
    }
}

/// Pixel index permutation turning an HWC image into patch-major rows.
pub fn patch_indices(shape: ImageShape, patch: usize) -> Vec<usize> {
    let (ph, pw) = (shape.h / patch, shape.w / patch);
    let mut idx = Vec::with_capacity(shape.numel());
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                for x in 0..patch {
                    for c in 0..shape.c {
                        idx.push(((py * patch + y) * shape.w + px * patch + x) * shape.c + c);
                    }
                }
            }
        }
    }
    idx
}

/// Two-layer patch MLP shared across positions (with a learned position
/// embedding). The embedding adds a readout of the patch-summed features
/// to a per-position readout of the concatenated ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    params: ParamSet,
    patch_idx: Vec<usize>,
}

mod image_slot {
    pub const PW: usize = 0;
    pub const PB: usize = 1;
    pub const W1: usize = 2;
    pub const B1: usize = 3;
    pub const W2: usize = 4;
    pub const POS: usize = 5;
    pub const W3: usize = 6;
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig, seed: u64) -> Self {
        assert!(cfg.shape.h.is_multiple_of(cfg.patch) && cfg.shape.w.is_multiple_of(cfg.patch), "patch must tile the image");
        let mut r = rng::sub_rng(seed, rng::tags::INIT, 1);
        let mut p = ParamSet::new();
        p.push_normal("patch_w", cfg.patch_dim(), cfg.patch_hidden, 1.0 / (cfg.patch_dim() as f64).sqrt(), &mut r);
        p.push_zeros("patch_b", 1, cfg.patch_hidden);
        p.push_normal("patch_w2", cfg.patch_hidden, cfg.hidden, 1.0 / (cfg.patch_hidden as f64).sqrt(), &mut r);
        p.push_zeros("patch_b2", 1, cfg.hidden);
        p.push_normal("readout", cfg.hidden, cfg.d_e, 1.0 / (cfg.hidden as f64).sqrt(), &mut r);
        p.push_normal("patch_pos", cfg.num_patches(), cfg.patch_hidden, 1.0, &mut r);
        let flat = cfg.num_patches() * cfg.hidden;
        p.push_normal("readout_pos", flat, cfg.d_e, 1.0 / (flat as f64).sqrt(), &mut r);
        Self::from_params(cfg, p)
    }

    pub fn zeroed(cfg: ImageEncoderConfig) -> Self {
        let mut enc = Self::new(cfg, 0);
        for slot in 0..enc.params.len() {
            let (r, c) = enc.params.get(slot).shape();
            enc.params.set(slot, Tensor::zeros(r, c));
        }
        enc
    }

    pub fn from_params(cfg: ImageEncoderConfig, params: ParamSet) -> Self {
        let patch_idx = patch_indices(cfg.shape, cfg.patch);
        Self { cfg, params, patch_idx }
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `images` is `B × (H·W·C)` with values in `[0, 1]`; returns `B × d_e`
    /// unit rows.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: Var) -> Var {
        use image_slot::*;
        let (b, n) = g.value(images).shape();
        assert_eq!(n, self.cfg.shape.numel(), "image width mismatch");
        let np = self.cfg.num_patches();
        let c = g.scale(images, 2.0);
        let minus_one = g.constant(Tensor::filled(b, n, -1.0));
        let centered = g.add(c, minus_one);
        let col = g.reshape(centered, b * n, 1);
        let idx: Vec<usize> = (0..b).flat_map(|i| self.patch_idx.iter().map(move |&j| i * n + j)).collect();
        let patches = g.gather_rows(col, &idx);
        let patches = g.reshape(patches, b * np, self.cfg.patch_dim());
        let h = g.matmul(patches, bound.var(PW));
        let h = g.add_row(h, bound.var(PB));
        let pos = g.concat_rows(&vec![bound.var(POS); b]);
        let h = g.add(h, pos);
        let h = g.silu(h);
        let h = g.matmul(h, bound.var(W1));
        let h = g.add_row(h, bound.var(B1));
        let h = g.silu(h);
        let mut sum = Tensor::zeros(b, b * np);
        for i in 0..b {
            for j in 0..np {
                sum.set(i, i * np + j, 1.0);
            }
        }
        let sum = g.constant(sum);
        let pooled = g.matmul(sum, h);
        let shared = g.matmul(pooled, bound.var(W2));
        let flat = g.reshape(h, b, np * self.cfg.hidden);
        let per_pos = g.matmul(flat, bound.var(W3));
        let e = g.add(shared, per_pos);
        g.normalize_rows(e)
    }

    pub fn check_image(&self, x: &Tensor) -> Result<()> {
        let n = self.cfg.shape.numel();
        if x.rows() != 1 || x.cols() != n {
            return Err(Error::InvalidImage(format!("expected 1x{n} image, got {}x{}", x.rows(), x.cols())));
        }
        Ok(())
    }

    /// `C_X(x)` for one image row.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        Ok(self.encode_batch(std::slice::from_ref(x))?.row_tensor(0))
    }

    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Tensor> {
        for x in images {
            self.check_image(x)?;
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(images));
        let out = self.forward(&mut g, &bound, x);
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "b", "c", "cat", "dog", "."])
    }

    fn text_cfg(l_seg: usize) -> TextEncoderConfig {
        TextEncoderConfig { vocab_size: vocab().size(), d: 8, d_e: 6, l_seg, mlp_hidden: 12, layers: 2 }
    }

    fn img_cfg() -> ImageEncoderConfig {
        ImageEncoderConfig { shape: ImageShape { h: 4, w: 4, c: 3 }, patch: 2, patch_hidden: 5, hidden: 7, d_e: 6 }
    }

    #[test]
    fn encode_is_deterministic_and_unit_norm() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(6), 3);
        let seg = tokenize_segment("a cat .", &v, 6).unwrap();
        let a = enc.encode_segment(&seg);
        let b = enc.encode_segment(&seg);
        assert_eq!(a, b);
        assert_eq!(a.per_token.shape(), (6, 8));
        assert!((a.pooled.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_segment_pools_from_sot() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(6), 3);
        let seg = tokenize_segment("", &v, 6).unwrap();
        let e = enc.encode_segment(&seg);
        let proj = enc.params().get(text_slot::PROJ);
        let want = e.per_token.row_tensor(0).matmul(proj);
        let want = want.scale(1.0 / want.norm());
        assert!(e.pooled.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn batched_equals_single() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(6), 9);
        let s1 = tokenize_segment("a b", &v, 6).unwrap();
        let s2 = tokenize_segment("dog c a cat", &v, 6).unwrap();
        let both = enc.encode_segments(&[&s1, &s2]);
        assert!(both[1].pooled.max_abs_diff(&enc.encode_segment(&s2).pooled) < 1e-12);
        assert!(both[0].per_token.max_abs_diff(&enc.encode_segment(&s1).per_token) < 1e-12);
    }

    #[test]
    fn pad_star_zero_params_is_zero() {
        let enc = TextEncoder::zeroed(text_cfg(6));
        let p = enc.pad_star_embedding(&vocab());
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pad_star_is_mean_of_empty_pads() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(4), 5);
        let empty = tokenize_segment("", &v, 4).unwrap();
        let rows = enc.encode_segment(&empty).per_token;
        let want: Vec<f64> = (0..8).map(|c| (rows.get(2, c) + rows.get(3, c)) / 2.0).collect();
        let got = enc.pad_star_embedding(&v);
        assert!(got.max_abs_diff(&Tensor::row_vector(want)) < 1e-12);
    }

    #[test]
    fn pad_star_cache_invalidates_on_update() {
        let v = vocab();
        let mut enc = TextEncoder::new(text_cfg(6), 5);
        let before = enc.pad_star_embedding(&v);
        assert_eq!(before, enc.pad_star_embedding(&v));
        enc.params_mut().perturb(text_slot::TOK, v.pad() * 8, 0.5);
        let after = enc.pad_star_embedding(&v);
        assert!(after.max_abs_diff(&before) > 1e-6);
    }

    #[test]
    fn merge_layout_matches_format() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(5), 1);
        let s1 = tokenize_segment("a b", &v, 5).unwrap();
        let s2 = tokenize_segment("c", &v, 5).unwrap();
        let e = enc.encode_segments(&[&s1, &s2]);
        let pad = enc.pad_star_embedding(&v);
        let seq = merge_conditioning(&[(&s1, &e[0]), (&s2, &e[1])], &pad, 7).unwrap();
        use CondTag::*;
        assert_eq!(seq.layout, vec![Sot, Content, Content, Sot, Content, PadStar, PadStar]);
        assert_eq!(seq.embeddings.row(0), e[0].per_token.row(0));
        assert_eq!(seq.embeddings.row(2), e[0].per_token.row(2));
        assert_eq!(seq.embeddings.row(3), e[1].per_token.row(0));
        assert_eq!(seq.embeddings.row(4), e[1].per_token.row(1));
        assert_eq!(seq.embeddings.row(6), pad.data());
    }

    #[test]
    fn merge_exact_fit_and_overflow() {
        let v = vocab();
        let enc = TextEncoder::new(text_cfg(6), 1);
        let s = tokenize_segment("a b c", &v, 6).unwrap();
        let e = enc.encode_segment(&s);
        let pad = enc.pad_star_embedding(&v);
        let seq = merge_conditioning(&[(&s, &e)], &pad, 4).unwrap();
        assert!(!seq.layout.contains(&CondTag::PadStar));
        let three = [(&s, &e), (&s, &e), (&s, &e)];
        let err = merge_conditioning(&three, &pad, 11).unwrap_err();
        assert!(matches!(err, Error::ConditioningOverflow { required: 12, available: 11 }));
    }

    #[test]
    fn average_embedding_cases() {
        let e1 = SegmentEmbeddings { per_token: Tensor::zeros(1, 1), pooled: Tensor::row_vector(vec![1.0, 0.0]) };
        let e2 = SegmentEmbeddings { per_token: Tensor::zeros(1, 1), pooled: Tensor::row_vector(vec![0.0, 1.0]) };
        let avg = average_segment_embedding(&[e1.clone(), e2.clone()]).unwrap();
        assert_eq!(avg.data(), &[0.5, 0.5]);
        assert!((avg.norm() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(average_segment_embedding(std::slice::from_ref(&e1)).unwrap(), e1.pooled);
        assert_eq!(average_segment_embedding(&[e2.clone(), e2.clone(), e2.clone()]).unwrap(), e2.pooled);
        assert!(matches!(average_segment_embedding(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn image_encoder_norm_and_guard() {
        let enc = ImageEncoder::new(img_cfg(), 2);
        let x = Tensor::from_vec(1, 48, (0..48).map(|i| (i % 7) as f64 / 7.0).collect());
        let e = enc.encode_image(&x).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, enc.encode_image(&x).unwrap());
        assert!(matches!(enc.encode_image(&Tensor::zeros(1, 47)), Err(Error::InvalidImage(_))));

        let zero = ImageEncoder::zeroed(img_cfg());
        let e = zero.encode_image(&Tensor::zeros(1, 48)).unwrap();
        assert_eq!(e, Tensor::basis(6, 0));
    }

    #[test]
    fn patch_indices_cover_every_pixel_once() {
        let shape = ImageShape { h: 6, w: 4, c: 3 };
        let mut idx = patch_indices(shape, 2);
        assert_eq!(idx[..6], [0, 1, 2, 3, 4, 5]);
        // second row of the first patch starts at pixel (1, 0)
        assert_eq!(idx[6], 4 * 3);
        idx.sort_unstable();
        assert_eq!(idx, (0..72).collect::<Vec<_>>());
    }
}
