//! Fit the common text direction of a briefly trained preference model,
//! split prompt embeddings against it and export decomposed score tables.
//!
//!     cargo run --release --example decompose_scores -- [out_dir]

use std::path::PathBuf;

use longalign::datakit::{self, Corruption};
use longalign::decomposition::{decomposed_scores, estimate_common_direction, eta_statistics, score_table, PromptCorpus};
use longalign::encoders::{ImageEncoderConfig, TextEncoderConfig};
use longalign::preference::{train_preference_model, PrefTrainConfig, PreferenceModel, ScoreMode, DEFAULT_TAU};

fn main() -> longalign::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("longalign-scores"));
    let splits = datakit::generate_dataset(1200, 2, (1000.0, 0.0, 200.0))?;
    let (pairs, _) = datakit::derive_preference_pairs(&splits.train, 1, Corruption::Mixed)?;
    let vocab = datakit::grammar_vocabulary();
    let mut m = PreferenceModel::new(
        vocab.clone(),
        TextEncoderConfig::toy(vocab.size()),
        ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX),
        DEFAULT_TAU,
        0,
    )?;
    train_preference_model(&mut m, &pairs, &[], &PrefTrainConfig { steps: 300, ..PrefTrainConfig::default() }, |_, _| {})?;

    let corpus = PromptCorpus::new(splits.train.iter().map(|r| r.prompt()).collect(), "train")?;
    let dir = estimate_common_direction(&corpus, &m, ScoreMode::SegmentAvg)?;
    let eta = eta_statistics(&corpus, &m, &dir, 10)?;
    println!("eta over {} prompts: mean {:.3}, range [{:.3}, {:.3}]", corpus.len(), eta.mean, eta.min, eta.max);
    for (i, c) in eta.histogram.counts.iter().enumerate() {
        println!("  bin {i}: {}", "#".repeat(c * 60 / corpus.len().max(1)));
    }

    for r in splits.test.iter().take(3) {
        let s = decomposed_scores(&r.image, &r.prompt(), &m, &dir)?;
        println!("full {:+.4} = relevant {:+.4} + irrelevant {:+.4}   {}", s.full, s.relevant, s.irrelevant, r.caption_long);
    }

    let test = &splits.test[..64];
    let images: Vec<_> = test.iter().map(|r| r.image.clone()).collect();
    let prompts: Vec<_> = test.iter().map(|r| r.prompt()).collect();
    let table = score_table(&images, &prompts, &m, &dir)?;
    table.export(&out)?;
    let s = table.summary;
    for (name, d) in [("full", s.full), ("relevant", s.relevant), ("irrelevant", s.irrelevant)] {
        println!("{name:10} diagonal {:+.4}  off-diagonal {:+.4}", d.diagonal_mean, d.off_diagonal_mean.unwrap_or(f64::NAN));
    }
    println!("tables written to {}", out.display());
    Ok(())
}
