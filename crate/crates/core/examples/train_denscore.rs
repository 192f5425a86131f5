//! Train the segment-level preference model on synthetic pairs, then report
//! held-out pair accuracy, retrieval R@1 and score-table statistics.
//!
//!     cargo run --release --example train_denscore -- [steps] [single|seg|seg-a|seg-o]

use std::time::Instant;

use longalign::datakit::{self, Corruption};
use longalign::decomposition::{estimate_common_direction, score_table, PromptCorpus};
use longalign::encoders::{ImageEncoderConfig, TextEncoderConfig};
use longalign::evalkit::{retrieval_r_at_1, EmbeddingKind};
use longalign::preference::{evaluate_pairs, train_preference_model, LossVariant, PrefTrainConfig, PreferenceModel, ScoreMode, DEFAULT_TAU};

fn main() -> longalign::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let variant = match args.get(2).map(String::as_str) {
        Some("single") => LossVariant::Single,
        Some("seg") => LossVariant::Seg,
        Some("seg-a") => LossVariant::SegA,
        _ => LossVariant::SegO,
    };

    let splits = datakit::generate_dataset(2600, 1, (2000.0, 0.0, 600.0))?;
    let (train, _) = datakit::derive_preference_pairs(&splits.train, 11, Corruption::Mixed)?;
    let (test, _) = datakit::derive_preference_pairs(&splits.test, 12, Corruption::Mixed)?;
    let vocab = datakit::grammar_vocabulary();
    let mut model = PreferenceModel::new(
        vocab.clone(),
        TextEncoderConfig::toy(vocab.size()),
        ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX),
        DEFAULT_TAU,
        0,
    )?;
    let cfg = PrefTrainConfig { steps, variant, ..PrefTrainConfig::default() };
    let t0 = Instant::now();
    let report = train_preference_model(&mut model, &train, &test, &cfg, |step, loss| {
        if step % 50 == 0 {
            println!("step {step:4}  loss {loss:.4}");
        }
    })?;
    println!("trained {steps} steps ({variant:?}) in {:.1}s", t0.elapsed().as_secs_f64());
    if let (Some(b), Some(a)) = (report.heldout_before, report.heldout_after) {
        println!("held-out  nll {:.4} -> {:.4}   accuracy {:.3} -> {:.3}   (ln 2 = {:.4})", b.nll, a.nll, b.accuracy, a.accuracy, std::f64::consts::LN_2);
    }

    let corpus = PromptCorpus::new(splits.train.iter().map(|r| r.prompt()).collect(), "train")?;
    let dir = estimate_common_direction(&corpus, &model, ScoreMode::SegmentAvg)?;
    let rel = evaluate_pairs(&model, &test, ScoreMode::SegmentAvg, Some(&dir.v))?;
    println!("held-out relevant-score accuracy {:.3}", rel.accuracy);

    let images: Vec<_> = splits.test.iter().map(|r| r.image.clone()).collect();
    let prompts: Vec<_> = splits.test.iter().map(|r| r.prompt()).collect();
    println!("R@1 over {} test pairs", images.len());
    for mode in [ScoreMode::Single, ScoreMode::SegmentAvg] {
        for emb in [EmbeddingKind::Full, EmbeddingKind::Relevant] {
            let r = retrieval_r_at_1(&images, &prompts, &model, Some(&dir), mode, emb)?;
            println!("  {mode:?} {emb:?}: {:.4}", r.r_at_1);
        }
    }
    let table = score_table(&images, &prompts, &model, &dir)?;
    let s = table.summary;
    for (name, d) in [("full", s.full), ("relevant", s.relevant), ("irrelevant", s.irrelevant)] {
        println!("  {name:10} diagonal {:+.4}  off-diagonal {:+.4}", d.diagonal_mean, d.off_diagonal_mean.unwrap_or(f64::NAN));
    }
    Ok(())
}
