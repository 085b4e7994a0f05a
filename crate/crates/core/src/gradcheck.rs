//! Finite-difference verification of the hand-written backward passes.
//!
//! Runs in `f64` on the tiny architecture. Each check compares analytic
//! gradients `a` against central differences `n` over a set of coordinates
//! and reports the relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of the checked
//! gradient vector, along with the worst single coordinate for reference.
//! Per-coordinate ratios are dominated by rounding noise of the objective
//! wherever a partial derivative is tiny, so they are informational only.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    adversarial_loss_g, adversarial_loss_g_grad, discriminator_loss, discriminator_loss_grad,
    generative_loss, generative_loss_grad,
};
use crate::model::{ArchConfig, Discriminator, Generator};
use crate::nn::{Mode, Module, Tensor};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked coordinates.
    pub rel_error: f64,
    /// Largest per-coordinate `|a − n| / max(|a|, |n|)`.
    pub max_coord_rel_error: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

#[derive(Default)]
struct Accum {
    diff2: f64,
    a2: f64,
    n2: f64,
    worst: f64,
    count: usize,
}

impl Accum {
    fn push(&mut self, a: f64, n: f64) {
        self.diff2 += (a - n) * (a - n);
        self.a2 += a * a;
        self.n2 += n * n;
        self.worst = self.worst.max(rel_error(a, n));
        self.count += 1;
    }

    fn finish(self, name: &str) -> GradCheck {
        GradCheck {
            name: name.into(),
            checked: self.count,
            rel_error: self.diff2.sqrt() / self.a2.sqrt().max(self.n2.sqrt()).max(FLOOR),
            max_coord_rel_error: self.worst,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect())
}

/// Checks `grad` of `f` at every coordinate of `x`.
fn check_tensor(
    name: &str,
    x: &Tensor<f64>,
    grad: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> f64,
) -> GradCheck {
    let mut acc = Accum::default();
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let numeric = (f(&p) - f(&m)) / (2.0 * STEP);
        acc.push(grad.data()[i], numeric);
    }
    acc.finish(name)
}

/// Checks parameter gradients already accumulated in `module` against
/// central differences of `objective`, at up to `per_tensor` coordinates of
/// every parameter tensor.
fn check_params<M: Module<f64>>(
    name: &str,
    module: &mut M,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    objective: impl Fn(&mut M) -> f64,
) -> GradCheck {
    let analytic: Vec<Vec<f64>> = module.params_mut().into_iter().map(|(_, p)| p.grad.clone()).collect();
    let mut acc = Accum::default();
    for (k, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        for i in sample(rng, n, per_tensor.min(n)) {
            let orig = module.params_mut()[k].1.value[i];
            module.params_mut()[k].1.value[i] = orig + STEP;
            let jp = objective(module);
            module.params_mut()[k].1.value[i] = orig - STEP;
            let jm = objective(module);
            module.params_mut()[k].1.value[i] = orig;
            acc.push(grads[i], (jp - jm) / (2.0 * STEP));
        }
    }
    acc.finish(name)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Runs every gradient check on the tiny architecture.
pub fn run_gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cfg = ArchConfig::tiny();
    let s = cfg.image_size;
    let batch = 2;

    // losses
    let gen = random_tensor(&mut rng, [batch, 3, 4, 4], 0.0, 1.0);
    let tgt = random_tensor(&mut rng, [batch, 3, 4, 4], 0.0, 1.0);
    let g = generative_loss_grad(&gen, &tgt)?;
    out.push(check_tensor("generative loss", &gen, &g, |x| {
        generative_loss(x, &tgt).expect("same shape")
    }));
    let scores = random_tensor(&mut rng, [batch, 1, 2, 2], 0.05, 0.95);
    out.push(check_tensor(
        "adversarial loss",
        &scores,
        &adversarial_loss_g_grad(&scores),
        adversarial_loss_g,
    ));
    let real = random_tensor(&mut rng, [batch, 1, 2, 2], 0.05, 0.95);
    let fake = random_tensor(&mut rng, [batch, 1, 2, 2], 0.05, 0.95);
    let (gr, gf) = discriminator_loss_grad(&real, &fake)?;
    out.push(check_tensor("discriminator loss (real)", &real, &gr, |x| {
        discriminator_loss(x, &fake).expect("same shape")
    }));
    out.push(check_tensor("discriminator loss (fake)", &fake, &gf, |x| {
        discriminator_loss(&real, x).expect("same shape")
    }));

    // generator forward: J = Σ r ⊙ G(x)
    let x = random_tensor(&mut rng, [batch, 6, s, s], 0.0, 1.0);
    let r = random_tensor(&mut rng, [batch, 3, s, s], -1.0, 1.0);
    let mut gnet = Generator::<f64>::new(&cfg, rng.random())?;
    gnet.zero_grad();
    gnet.forward(&x, Mode::Train)?;
    let dx = gnet.backward(&r);
    let g_obj = |net: &mut Generator<f64>, input: &Tensor<f64>| {
        dot(&net.forward(input, Mode::Train).expect("valid input"), &r)
    };
    out.push(check_params("generator parameters", &mut gnet, 8, &mut rng, |n| g_obj(n, &x)));
    out.push(check_tensor("generator input", &x, &dx, |xi| g_obj(&mut gnet.clone(), xi)));

    // discriminator forward: J = Σ q ⊙ D(c, ctx)
    let cand = random_tensor(&mut rng, [batch, 3, s, s], 0.0, 1.0);
    let ctx = random_tensor(&mut rng, [batch, 3, s, s], 0.0, 1.0);
    let q = random_tensor(&mut rng, [batch, 1, cfg.score_size(), cfg.score_size()], -1.0, 1.0);
    let mut dnet = Discriminator::<f64>::new(&cfg, rng.random())?;
    dnet.zero_grad();
    dnet.forward(&cand, &ctx, Mode::Train)?;
    let dc = dnet.backward(&q);
    let d_obj = |net: &mut Discriminator<f64>, c: &Tensor<f64>| {
        dot(&net.forward(c, &ctx, Mode::Train).expect("valid input"), &q)
    };
    out.push(check_params("discriminator parameters", &mut dnet, 8, &mut rng, |n| d_obj(n, &cand)));
    out.push(check_tensor("discriminator candidate", &cand, &dc, |c| d_obj(&mut dnet.clone(), c)));

    // full generator objective through the discriminator:
    // J = λ_mse·L_mse(G(x), t) + λ_adv·L_adv(D(G(x), ctx))
    let (l_mse, l_adv) = (100.0, 1.0);
    let target = random_tensor(&mut rng, [batch, 3, s, s], 0.0, 1.0);
    gnet.zero_grad();
    let y = gnet.forward(&x, Mode::Train)?;
    let sc = dnet.forward(&y, &ctx, Mode::Train)?;
    let mut dy = generative_loss_grad(&y, &target)?.map(|v| v * l_mse);
    dy.add_assign(&dnet.backward(&adversarial_loss_g_grad(&sc).map(|v| v * l_adv)));
    gnet.backward(&dy);
    let critic = dnet.clone();
    out.push(check_params("generator objective", &mut gnet, 8, &mut rng, |n| {
        let y = n.forward(&x, Mode::Train).expect("valid input");
        let sc = critic.clone().forward(&y, &ctx, Mode::Train).expect("valid input");
        l_mse * generative_loss(&y, &target).expect("same shape") + l_adv * adversarial_loss_g(&sc)
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn vector_error_is_norm_ratio() {
        let mut a = Accum::default();
        a.push(3.0, 3.0);
        a.push(4.0, 4.5);
        let c = a.finish("x");
        assert!((c.rel_error - 0.5 / (9.0f64 + 20.25).sqrt()).abs() < 1e-12);
        assert_eq!(c.checked, 2);
    }
}
