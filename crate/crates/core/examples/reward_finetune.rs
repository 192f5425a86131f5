//! Supervised fine-tuning followed by reward fine-tuning at two ω values,
//! scored on held-out prompts by the frozen preference model.
//!
//!     cargo run --release --example reward_finetune -- [sft_steps] [rft_updates]

use std::time::Instant;

use longalign::datakit::{self, Corruption};
use longalign::decomposition::{estimate_common_direction, PromptCorpus};
use longalign::diffusion::{train_sft, DiffusionModel, ScheduleConfig, SftConfig, DEFAULT_PATCH};
use longalign::encoders::{ImageEncoderConfig, TextEncoderConfig};
use longalign::preference::{train_preference_model, PrefTrainConfig, PreferenceModel, ScoreMode, DEFAULT_TAU};
use longalign::reward::{train_rft, RewardConfig};
use longalign::evalkit::generation_scores;
use longalign::segmentation::RawPrompt;

fn main() -> longalign::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let sft_steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let updates = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);

    let splits = datakit::generate_dataset(2600, 1, (2000.0, 0.0, 600.0))?;
    let (train_pairs, _) = datakit::derive_preference_pairs(&splits.train, 11, Corruption::Mixed)?;
    let vocab = datakit::grammar_vocabulary();
    let t0 = Instant::now();
    let mut pref = PreferenceModel::new(
        vocab.clone(),
        TextEncoderConfig::toy(vocab.size()),
        ImageEncoderConfig::toy(datakit::IMAGE_SHAPE, datakit::CELL_PX),
        DEFAULT_TAU,
        0,
    )?;
    train_preference_model(&mut pref, &train_pairs, &[], &PrefTrainConfig::default(), |_, _| {})?;
    let corpus = PromptCorpus::new(splits.train.iter().map(|r| r.prompt()).collect(), "train")?;
    let dir = estimate_common_direction(&corpus, &pref, ScoreMode::SegmentAvg)?;
    println!("preference model ready in {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let mut sft = DiffusionModel::new(vocab.clone(), TextEncoderConfig::toy(vocab.size()), datakit::IMAGE_SHAPE, DEFAULT_PATCH, ScheduleConfig::default(), 0)?;
    let cfg = SftConfig { steps: sft_steps, ..SftConfig::default() };
    let rep = train_sft(&mut sft, &splits.train, &cfg, |s, l| {
        if s % 250 == 0 {
            println!("sft step {s:5}  eps-loss {l:9.2}");
        }
    })?;
    let tail = &rep.losses[rep.losses.len().saturating_sub(100)..];
    println!("sft done in {:.1}s, last-100 mean loss {:.2} (zero model {})", t0.elapsed().as_secs_f64(), tail.iter().sum::<f64>() / tail.len() as f64, sft.numel());

    let held: Vec<RawPrompt> = splits.test.iter().take(64).map(|r| RawPrompt::new(r.caption_long.clone())).collect::<Result<_, _>>()?;
    let train_prompts: Vec<RawPrompt> = splits.train.iter().take(512).map(|r| RawPrompt::new(r.caption_long.clone())).collect::<Result<_, _>>()?;
    let steps = RewardConfig::default().sample_steps;
    let seeds: Vec<u64> = (0..held.len() as u64).map(|i| 10_000 + i).collect();
    let score = |m: &DiffusionModel| -> longalign::Result<_> {
        let x = m.sample(&held, steps, 1.0, &seeds)?;
        generation_scores(&x, &held, &pref, &dir)
    };
    let base = score(&sft)?;
    println!("SFT        relevant {:.4}  irrelevant {:.4}  full {:.4}", base.relevant, base.irrelevant, base.full);

    for omega in [0.3, 1.0] {
        let t0 = Instant::now();
        let mut m = sft.clone();
        let rc = RewardConfig { omega, total_updates: updates, ..RewardConfig::default() };
        train_rft(&mut m, &train_prompts, &pref, &dir, &rc, |r| {
            if r.step % 50 == 0 {
                println!("  w={omega} step {:4} loss {:.4} rel {:.4} irr {:.4}", r.step, r.reward_loss, r.mean_relevant, r.mean_irrelevant);
            }
        })?;
        let s = score(&m)?;
        println!(
            "RFT w={omega}  relevant {:.4} ({:+.4})  irrelevant {:.4} ({:+.4})  [{:.1}s]",
            s.relevant,
            s.relevant - base.relevant,
            s.irrelevant,
            s.irrelevant - base.irrelevant,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
