//! Text-to-image retrieval with full and relevant embeddings, a sweep over
//! the number of caption sentences, and per-segment alignment reports.

use longalign::datakit::{self, Corruption};
use longalign::decomposition::{estimate_common_direction, PromptCorpus};
use longalign::encoders::{ImageEncoderConfig, TextEncoderConfig};
use longalign::evalkit::{length_sweep, retrieval_r_at_1, segment_alignment_report, EmbeddingKind};
use longalign::preference::{train_preference_model, PrefTrainConfig, PreferenceModel, ScoreMode, DEFAULT_TAU};

fn main() -> longalign::Result<()> {
    let splits = datakit::generate_dataset(2500, 1, (2000.0, 0.0, 500.0))?;
    let (pairs, _) = datakit::derive_preference_pairs(&splits.train, 11, Corruption::Mixed)?;
    let vocab = datakit::grammar_vocabulary();
    let mut m = PreferenceModel::new(
        vocab.clone(),
        TextEncoderConfig::toy(vocab.size()),
        ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX),
        DEFAULT_TAU,
        0,
    )?;
    train_preference_model(&mut m, &pairs, &[], &PrefTrainConfig::default(), |_, _| {})?;
    let dir = estimate_common_direction(&PromptCorpus::new(splits.train.iter().map(|r| r.prompt()).collect(), "train")?, &m, ScoreMode::SegmentAvg)?;

    let images: Vec<_> = splits.test.iter().map(|r| r.image.clone()).collect();
    let prompts: Vec<_> = splits.test.iter().map(|r| r.prompt()).collect();
    println!("R@1 over {} test pairs", images.len());
    for mode in [ScoreMode::Single, ScoreMode::SegmentAvg] {
        for emb in [EmbeddingKind::Full, EmbeddingKind::Relevant] {
            println!("  {mode:?} {emb:?}: {:.4}", retrieval_r_at_1(&images, &prompts, &m, Some(&dir), mode, emb)?.r_at_1);
        }
    }
    for (cap, r) in length_sweep(&images, &prompts, &m, Some(&dir), &[1, 2, 3, 4], ScoreMode::SegmentAvg, EmbeddingKind::Relevant)? {
        println!("  first {cap} sentences: {:.4}", r.r_at_1);
    }

    let rec = splits.test.iter().find(|r| r.scene.objects.len() >= 3).expect("a multi-object scene");
    let others: Vec<_> = splits.test.iter().filter(|r| r.caption_long != rec.caption_long).take(3).map(|r| r.image.clone()).collect();
    let mut candidates = vec![rec.image.clone()];
    candidates.extend(others);
    let report = segment_alignment_report(&rec.prompt(), &candidates, &m)?;
    println!("alignment of '{}' against its image (0) and three others", rec.caption_long);
    for ((seg, row), best) in report.segments.iter().zip(&report.scores).zip(&report.best) {
        let cells: Vec<String> = row.iter().map(|s| format!("{s:+.3}")).collect();
        println!("  {seg:38} {}  best {best}", cells.join(" "));
    }
    Ok(())
}
