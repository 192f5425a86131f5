//! Common text direction `V`, the split `C_P = C⊥ + ηV`, and the
//! full / relevant / irrelevant score tables built on it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::preference::{PreferenceModel, ScoreMode};
use crate::segmentation::{normalize_text, RawPrompt};
use crate::tensor::Tensor;

const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptCorpus {
    prompts: Vec<RawPrompt>,
    pub source: String,
}

impl PromptCorpus {
    /// Deduplicates by normalized text, keeping first occurrences.
    pub fn new(prompts: Vec<RawPrompt>, source: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        let prompts: Vec<RawPrompt> = prompts.into_iter().filter(|p| seen.insert(normalize_text(&p.text).to_lowercase())).collect();
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("prompt corpus is empty".into()));
        }
        Ok(Self { prompts, source: source.into() })
    }

    pub fn prompts(&self) -> &[RawPrompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionInfo {
    pub corpus_size: usize,
    /// Fingerprint of the text encoder parameters `V` was fitted with.
    pub encoder_version: String,
    pub mode: ScoreMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommonDirection {
    /// `1 × d_e`, unit norm.
    pub v: Tensor,
    pub info: DirectionInfo,
}

impl CommonDirection {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "direction", "info": self.info }))?;
        ck.push("direction/v", self.v.clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.get("kind").and_then(|k| k.as_str()) != Some("direction") {
            return Err(Error::IncompatibleCheckpoint("not a direction checkpoint".into()));
        }
        let info = serde_json::from_value(ck.manifest["info"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("direction manifest: {e}")))?;
        let v = ck.section("direction/v")?.clone();
        if (v.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::IncompatibleCheckpoint(format!("stored V has norm {}", v.norm())));
        }
        Ok(Self { v, info })
    }

    /// Errors unless `V` was fitted with this model's text encoder.
    pub fn check_encoder(&self, m: &PreferenceModel) -> Result<()> {
        let fp = encoder_fingerprint(m);
        if fp != self.info.encoder_version {
            return Err(Error::IncompatibleCheckpoint(format!(
                "direction fitted for encoder {}, model is {fp}",
                self.info.encoder_version
            )));
        }
        Ok(())
    }
}

pub fn encoder_fingerprint(m: &PreferenceModel) -> String {
    let mut h = Sha256::new();
    for x in m.text.params().flatten() {
        h.update((x as f32).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Normalized mean of the rows of `embeddings`.
pub fn direction_from_embeddings(embeddings: &Tensor) -> Result<Tensor> {
    let mean = embeddings.mean_rows();
    let n = mean.norm();
    if n.is_nan() || n <= DEGENERATE_NORM {
        return Err(Error::DegenerateCorpus(n));
    }
    Ok(mean.scale(1.0 / n))
}

pub fn estimate_common_direction(corpus: &PromptCorpus, m: &PreferenceModel, mode: ScoreMode) -> Result<CommonDirection> {
    let emb = m.prompt_embeddings(corpus.prompts(), mode)?;
    Ok(CommonDirection {
        v: direction_from_embeddings(&emb)?,
        info: DirectionInfo { corpus_size: corpus.len(), encoder_version: encoder_fingerprint(m), mode },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedEmbedding {
    pub c_perp: Tensor,
    pub eta: f64,
}

pub fn decompose(c_p: &Tensor, v: &Tensor) -> DecomposedEmbedding {
    let eta = c_p.dot(v);
    let mut c_perp = c_p.clone();
    c_perp.axpy(-eta, v);
    DecomposedEmbedding { c_perp, eta }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub full: f64,
    pub relevant: f64,
    pub irrelevant: f64,
}

pub fn split_score(cx: &Tensor, c_p: &Tensor, v: &Tensor) -> ScoreTriple {
    let d = decompose(c_p, v);
    ScoreTriple { full: cx.dot(c_p), relevant: cx.dot(&d.c_perp), irrelevant: d.eta * cx.dot(v) }
}

/// Scores against `C_P^seg`.
pub fn decomposed_scores(x: &Tensor, p: &RawPrompt, m: &PreferenceModel, dir: &CommonDirection) -> Result<ScoreTriple> {
    let cx = m.image_embedding(x)?;
    let cp = m.prompt_embedding(p, ScoreMode::SegmentAvg)?;
    Ok(split_score(&cx, &cp, &dir.v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &x in values {
            let b = if width > 0.0 { (((x - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

pub fn eta_stats_from(etas: &[f64], bins: usize) -> Result<EtaStats> {
    if etas.is_empty() {
        return Err(Error::InvalidArgument("no projection values".into()));
    }
    let h = Histogram::new(etas, bins);
    Ok(EtaStats { mean: etas.iter().sum::<f64>() / etas.len() as f64, min: h.lo, max: h.hi, histogram: h })
}

pub fn eta_statistics(corpus: &PromptCorpus, m: &PreferenceModel, dir: &CommonDirection, bins: usize) -> Result<EtaStats> {
    let emb = m.prompt_embeddings(corpus.prompts(), dir.info.mode)?;
    let etas: Vec<f64> = (0..emb.rows()).map(|r| emb.row_tensor(r).dot(&dir.v)).collect();
    eta_stats_from(&etas, bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub diagonal_mean: f64,
    /// Absent when the table is 1 × 1.
    pub off_diagonal_mean: Option<f64>,
}

impl DiagSummary {
    fn of(t: &Tensor) -> Self {
        let n = t.rows();
        let diag: f64 = (0..n).map(|i| t.get(i, i)).sum();
        let off = if n > 1 { Some((t.sum() - diag) / (n * n - n) as f64) } else { None };
        Self { diagonal_mean: diag / n as f64, off_diagonal_mean: off }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub n: usize,
    pub full: DiagSummary,
    pub relevant: DiagSummary,
    pub irrelevant: DiagSummary,
}

/// Row `i` is image `i`, column `j` is prompt `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub full: Tensor,
    pub relevant: Tensor,
    pub irrelevant: Tensor,
    pub summary: TableSummary,
}

/// Tables from image embeddings `cx` and prompt embeddings `cp`, both `N × d_e`.
pub fn score_table_from_embeddings(cx: &Tensor, cp: &Tensor, v: &Tensor) -> Result<ScoreTable> {
    if cx.rows() != cp.rows() || cx.rows() == 0 {
        return Err(Error::InvalidArgument(format!("score table needs N images and N prompts, got {} and {}", cx.rows(), cp.rows())));
    }
    let n = cx.rows();
    let full = cx.matmul_nt(cp);
    let eta = cp.matmul_nt(v);
    let cxv = cx.matmul_nt(v);
    let mut irrelevant = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            irrelevant.set(i, j, eta.get(j, 0) * cxv.get(i, 0));
        }
    }
    let perp = cp.sub(&eta.matmul(v));
    let relevant = cx.matmul_nt(&perp);
    let summary = TableSummary { n, full: DiagSummary::of(&full), relevant: DiagSummary::of(&relevant), irrelevant: DiagSummary::of(&irrelevant) };
    Ok(ScoreTable { full, relevant, irrelevant, summary })
}

pub fn score_table(images: &[Tensor], prompts: &[RawPrompt], m: &PreferenceModel, dir: &CommonDirection) -> Result<ScoreTable> {
    if images.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} prompts", images.len(), prompts.len())));
    }
    let cx = m.image_embeddings(images)?;
    let cp = m.prompt_embeddings(prompts, ScoreMode::SegmentAvg)?;
    score_table_from_embeddings(&cx, &cp, &dir.v)
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|x| format!("{x:.9}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

impl ScoreTable {
    /// Writes `scores_{full,relevant,irrelevant}.csv` and `summary.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scores_full.csv"), matrix_csv(&self.full))?;
        std::fs::write(dir.join("scores_relevant.csv"), matrix_csv(&self.relevant))?;
        std::fs::write(dir.join("scores_irrelevant.csv"), matrix_csv(&self.irrelevant))?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn e(n: usize, i: usize) -> Tensor {
        Tensor::basis(n, i)
    }

    #[test]
    fn direction_from_known_embeddings() {
        let v = Tensor::row_vector(vec![0.6, 0.8, 0.0]);
        let same = Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]);
        assert!(direction_from_embeddings(&same).unwrap().max_abs_diff(&v) < 1e-15);
        let two = Tensor::from_rows(&[e(3, 0), e(3, 1)]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(direction_from_embeddings(&two).unwrap().max_abs_diff(&Tensor::row_vector(vec![h, h, 0.0])) < 1e-15);
        let opp = Tensor::from_rows(&[e(3, 0), e(3, 0).scale(-1.0)]);
        assert!(matches!(direction_from_embeddings(&opp), Err(Error::DegenerateCorpus(_))));
    }

    #[test]
    fn decompose_examples() {
        let cp = Tensor::row_vector(vec![0.6, 0.8]);
        let d = decompose(&cp, &e(2, 0));
        assert_relative_eq!(d.eta, 0.6);
        assert!(d.c_perp.max_abs_diff(&Tensor::row_vector(vec![0.0, 0.8])) < 1e-15);
        let d = decompose(&Tensor::row_vector(vec![-2.0, 0.0]), &e(2, 0));
        assert_eq!((d.eta, d.c_perp.norm()), (-2.0, 0.0));
        let d = decompose(&e(2, 1), &e(2, 0));
        assert_eq!(d.eta, 0.0);
        assert_eq!(d.c_perp, e(2, 1));
        let s = split_score(&e(2, 1), &cp, &e(2, 0));
        assert_relative_eq!(s.full, 0.8);
        assert_relative_eq!(s.relevant, 0.8);
        assert_eq!(s.irrelevant, 0.0);
    }

    #[test]
    fn eta_for_orthonormal_pair() {
        let two = Tensor::from_rows(&[e(4, 0), e(4, 1)]);
        let v = direction_from_embeddings(&two).unwrap();
        let etas: Vec<f64> = (0..2).map(|r| two.row_tensor(r).dot(&v)).collect();
        let st = eta_stats_from(&etas, 4).unwrap();
        assert_relative_eq!(st.mean, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_eq!(st.histogram.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn engineered_table_is_identity() {
        let n = 4;
        let basis = Tensor::from_rows(&(0..n).map(|i| e(n + 1, i)).collect::<Vec<_>>());
        let t = score_table_from_embeddings(&basis, &basis, &e(n + 1, n)).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(t.relevant.get(i, j), if i == j { 1.0 } else { 0.0 });
                assert_eq!(t.irrelevant.get(i, j), 0.0);
            }
        }
        assert_eq!(t.summary.relevant.off_diagonal_mean, Some(0.0));
        let one = score_table_from_embeddings(&basis.slice_rows(0, 1), &basis.slice_rows(0, 1), &e(n + 1, n)).unwrap();
        assert_eq!(one.summary.full.off_diagonal_mean, None);
        assert!(matches!(score_table_from_embeddings(&basis, &basis.slice_rows(0, 2), &e(n + 1, n)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corpus_dedups_and_rejects_empty() {
        let ps = vec![RawPrompt::new("A b.").unwrap(), RawPrompt::new("a  B.").unwrap(), RawPrompt::new("c.").unwrap()];
        assert_eq!(PromptCorpus::new(ps, "t").unwrap().len(), 2);
        assert!(PromptCorpus::new(vec![], "t").is_err());
    }

    #[test]
    fn export_writes_matrices_and_summary() {
        let mut r = rng::rng_from(1);
        let cx = rng::normal_tensor(3, 4, &mut r);
        let cp = rng::normal_tensor(3, 4, &mut r);
        let v = direction_from_embeddings(&cp).unwrap();
        let t = score_table_from_embeddings(&cx, &cp, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.export(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("scores_full.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);
        let s: TableSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s, t.summary);
    }

    fn unit(v: Vec<f64>) -> Tensor {
        let t = Tensor::row_vector(v);
        let n = t.norm().max(1e-3);
        t.scale(1.0 / n)
    }

    proptest! {
        #[test]
        fn reconstruction_and_orthogonality(
            cp in prop::collection::vec(-1.0f64..1.0, 8),
            vraw in prop::collection::vec(-1.0f64..1.0, 8).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2),
        ) {
            let v = unit(vraw);
            let c = Tensor::row_vector(cp);
            let d = decompose(&c, &v);
            prop_assert!(d.c_perp.dot(&v).abs() < 1e-12);
            let mut back = d.c_perp.clone();
            back.axpy(d.eta, &v);
            prop_assert!(back.max_abs_diff(&c) < 1e-12);
        }

        #[test]
        fn relevant_ranking_is_scale_invariant(seed in 0u64..500, s in 0.01f64..100.0) {
            let mut r = rng::rng_from(seed);
            let cx = rng::normal_tensor(5, 6, &mut r);
            let cp = rng::normal_tensor(1, 6, &mut r);
            let v = unit(rng::normal_tensor(1, 6, &mut r).into_vec());
            let perp = decompose(&cp, &v).c_perp;
            let rank = |c: &Tensor| {
                let scores = cx.matmul_nt(c);
                (0..5).max_by(|&a, &b| scores.get(a, 0).total_cmp(&scores.get(b, 0))).unwrap()
            };
            prop_assert_eq!(rank(&perp), rank(&perp.scale(s)));
        }

        #[test]
        fn direction_is_permutation_invariant(seed in 0u64..500) {
            let mut r = rng::rng_from(seed);
            let rows = rng::normal_tensor(6, 5, &mut r).map(|x| x + 0.5);
            let rev = Tensor::from_rows(&(0..6).rev().map(|i| rows.row_tensor(i)).collect::<Vec<_>>());
            prop_assert!(direction_from_embeddings(&rows).unwrap().max_abs_diff(&direction_from_embeddings(&rev).unwrap()) < 1e-12);
        }
    }
}
