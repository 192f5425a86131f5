//! Deterministic DDIM: a scalar linear denoiser against its closed-form
//! trajectory, then guided sampling from a freshly initialised toy model.

use longalign::datakit;
use longalign::diffusion::{sample_from, DiffusionModel, DiffusionSchedule, LinearDenoiser, ScheduleConfig, DEFAULT_PATCH};
use longalign::encoders::TextEncoderConfig;
use longalign::segmentation::RawPrompt;
use longalign::Tensor;

fn main() -> longalign::Result<()> {
    let sched = DiffusionSchedule::cosine(ScheduleConfig::default())?;
    for t in [0, 25, 50, 75, 100] {
        println!("t {t:3}  alpha {:.4}  beta {:.4}", sched.alpha(t), sched.beta(t));
    }

    let lin = LinearDenoiser::new(0.3);
    let x_t = Tensor::row_vector(vec![1.0, -0.5]);
    let cond = Tensor::zeros(1, 1);
    for steps in [1, 4, 20, 100] {
        let ts = sched.timesteps(steps)?;
        let x0 = sample_from(&lin, x_t.clone(), &[&cond], &cond, &sched, steps, 1.0)?;
        let mut factor = 1.0;
        for w in ts.windows(2) {
            let (t, s) = (w[0], w[1]);
            let (a_s, a_t, b_s, b_t) = (sched.alpha(s), sched.alpha(t), sched.beta(s), sched.beta(t));
            factor *= a_s / a_t + lin.c() * (b_s - a_s * b_t / a_t);
        }
        println!("{steps:3} steps: simulated {:+.6}  closed form {:+.6}", x0.get(0, 0), factor * x_t.get(0, 0));
    }

    let vocab = datakit::grammar_vocabulary();
    let model = DiffusionModel::new(vocab.clone(), TextEncoderConfig::toy(vocab.size()), datakit::IMAGE_SHAPE, DEFAULT_PATCH, ScheduleConfig::default(), 0)?;
    let prompts = vec![RawPrompt::new("A red circle in the center.")?, RawPrompt::new("A blue square in the top left. A green triangle in the bottom right.")?];
    for g in [0.0, 1.0, 3.0] {
        let a = model.sample(&prompts, 10, g, &[1, 2])?;
        let b = model.sample(&prompts, 10, g, &[1, 2])?;
        println!("guidance {g}: sample norms {:.3} {:.3}, repeat identical: {}", a.row_tensor(0).norm(), a.row_tensor(1).norm(), a == b);
    }
    Ok(())
}
