//! Text→image retrieval, per-segment alignment and sentence-cap sweeps.
//!
//! Ties always resolve to the lowest image index.

use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose, CommonDirection};
use crate::error::{Error, Result};
use crate::preference::{PreferenceModel, ScoreMode};
use crate::segmentation::{first_sentences, segment_prompt, RawPrompt};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Full,
    Relevant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r_at_1: f64,
    pub n: usize,
    pub mode: ScoreMode,
    pub embedding: EmbeddingKind,
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows (texts) whose own column (image) scores highest.
pub fn r_at_1_from_scores(scores: &Tensor) -> Result<f64> {
    if scores.rows() != scores.cols() || scores.rows() < 2 {
        return Err(Error::InvalidArgument(format!("retrieval needs a square score matrix with N >= 2, got {:?}", scores.shape())));
    }
    let hits = (0..scores.rows()).filter(|&i| argmax(scores.row(i)) == i).count();
    Ok(hits as f64 / scores.rows() as f64)
}

/// Texts × images score matrix from `N × d_e` embeddings, optionally
/// with `V` removed from every text embedding.
pub fn retrieval_scores(cx: &Tensor, cp: &Tensor, v: Option<&Tensor>) -> Tensor {
    let texts = match v {
        Some(v) => Tensor::from_rows(&(0..cp.rows()).map(|i| decompose(&cp.row_tensor(i), v).c_perp).collect::<Vec<_>>()),
        None => cp.clone(),
    };
    texts.matmul_nt(cx)
}

pub fn retrieval_r_at_1(
    images: &[Tensor],
    prompts: &[RawPrompt],
    m: &PreferenceModel,
    dir: Option<&CommonDirection>,
    mode: ScoreMode,
    embedding: EmbeddingKind,
) -> Result<RetrievalReport> {
    if images.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} prompts", images.len(), prompts.len())));
    }
    let v = match (embedding, dir) {
        (EmbeddingKind::Full, _) => None,
        (EmbeddingKind::Relevant, Some(d)) => Some(&d.v),
        (EmbeddingKind::Relevant, None) => return Err(Error::MissingDirection),
    };
    if images.len() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least two pairs".into()));
    }
    let cx = m.image_embeddings(images)?;
    let cp = m.prompt_embeddings(prompts, mode)?;
    let r_at_1 = r_at_1_from_scores(&retrieval_scores(&cx, &cp, v))?;
    Ok(RetrievalReport { r_at_1, n: images.len(), mode, embedding })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub segments: Vec<String>,
    /// `K × N_images`.
    pub scores: Vec<Vec<f64>>,
    pub best: Vec<usize>,
}

pub fn alignment_from_scores(segments: Vec<String>, scores: &Tensor) -> AlignmentReport {
    let rows: Vec<Vec<f64>> = (0..scores.rows()).map(|r| scores.row(r).to_vec()).collect();
    let best = rows.iter().map(|r| argmax(r)).collect();
    AlignmentReport { segments, scores: rows, best }
}

/// Scores every segment of `prompt` against every candidate image.
pub fn segment_alignment_report(prompt: &RawPrompt, candidates: &[Tensor], m: &PreferenceModel) -> Result<AlignmentReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("alignment report needs at least one candidate".into()));
    }
    let texts = segment_prompt(prompt, &m.vocab, m.l_seg())?.texts;
    let seg = m.segment_embeddings(prompt)?;
    let cx = m.image_embeddings(candidates)?;
    Ok(alignment_from_scores(texts, &seg.matmul_nt(&cx)))
}

/// Retrieval with prompts capped at their first `n` sentences, per cap.
pub fn length_sweep(
    images: &[Tensor],
    prompts: &[RawPrompt],
    m: &PreferenceModel,
    dir: Option<&CommonDirection>,
    caps: &[usize],
    mode: ScoreMode,
    embedding: EmbeddingKind,
) -> Result<Vec<(usize, RetrievalReport)>> {
    let mut out = Vec::with_capacity(caps.len());
    for &cap in caps {
        if cap == 0 {
            return Err(Error::InvalidArgument("sentence cap must be at least 1".into()));
        }
        let capped = prompts.iter().map(|p| RawPrompt::new(first_sentences(&p.text, cap))).collect::<Result<Vec<_>>>()?;
        out.push((cap, retrieval_r_at_1(images, &capped, m, dir, mode, embedding)?));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub full: f64,
    pub relevant: f64,
    pub irrelevant: f64,
}

/// Mean decomposed scores of data-space samples (rows of `x`, read as
/// `(x + 1) / 2` without clamping) against their prompts' `C_P^seg`.
pub fn generation_scores(x: &Tensor, prompts: &[RawPrompt], m: &PreferenceModel, dir: &CommonDirection) -> Result<GenerationScores> {
    if x.rows() != prompts.len() || prompts.is_empty() {
        return Err(Error::InvalidArgument(format!("{} samples for {} prompts", x.rows(), prompts.len())));
    }
    let images: Vec<Tensor> = (0..x.rows()).map(|r| x.row_tensor(r).map(|v| 0.5 * v + 0.5)).collect();
    let cx = m.image_embeddings(&images)?;
    let cp = m.prompt_embeddings(prompts, ScoreMode::SegmentAvg)?;
    let mut acc = GenerationScores { full: 0.0, relevant: 0.0, irrelevant: 0.0 };
    for i in 0..prompts.len() {
        let s = crate::decomposition::split_score(&cx.row_tensor(i), &cp.row_tensor(i), &dir.v);
        acc.full += s.full;
        acc.relevant += s.relevant;
        acc.irrelevant += s.irrelevant;
    }
    let n = prompts.len() as f64;
    Ok(GenerationScores { full: acc.full / n, relevant: acc.relevant / n, irrelevant: acc.irrelevant / n })
}
