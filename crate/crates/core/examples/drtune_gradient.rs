//! Gradient of a reward through a DDIM rollout where every denoiser input
//! is detached. On a scalar linear denoiser each kept step contributes
//! `(β_{s}/α_{s} − β_t/α_t)·w·x_t`.

use longalign::autograd::Graph;
use longalign::diffusion::{DiffusionSchedule, LinearDenoiser, NoisePredictor};
use longalign::reward::drtune_rollout;
use longalign::Tensor;

fn main() -> longalign::Result<()> {
    let sched = DiffusionSchedule::from_alphas(vec![1.0, 0.9, 0.6, 0.25])?;
    let lin = LinearDenoiser::new(0.4);
    let x_t = Tensor::row_vector(vec![0.7, -1.1]);
    let w = Tensor::row_vector(vec![0.3, 0.5]);
    let cond = Tensor::zeros(1, 1);
    let ts = sched.timesteps(3)?;
    let ab = |t: usize| sched.beta(t) / sched.alpha(t);

    let mut x = x_t.clone();
    let mut terms = Vec::new();
    for win in ts.windows(2) {
        let (t, s) = (win[0], win[1]);
        terms.push((ab(s) - ab(t)) * w.dot(&x));
        let f = sched.alpha(s) / sched.alpha(t) + lin.c() * (sched.beta(s) - sched.alpha(s) * ab(t));
        x = x.scale(f);
    }
    for mask in 0u32..8 {
        let keep: Vec<bool> = (0..3).map(|i| mask & (1 << i) != 0).collect();
        let mut g = Graph::new();
        let b = lin.params().bind(&mut g, true);
        let x0 = drtune_rollout(&mut g, &lin, &b, &x_t, &[&cond], &sched, &ts, &keep)?;
        let wv = g.constant(w.clone());
        let r = g.dot(x0, wv);
        let grad = b.grads(&g, &g.backward(r))[0].get(0, 0);
        let hand = terms.iter().zip(&keep).filter(|(_, k)| **k).fold(0.0, |acc, (t, _)| acc + t);
        println!("keep {keep:?}: autodiff {grad:+.9}  telescoping {hand:+.9}");
    }
    Ok(())
}
