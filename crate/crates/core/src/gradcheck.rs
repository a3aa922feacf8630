//! Directional finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub directions: usize,
    /// Largest `|fd - analytic| / max(|fd|, |analytic|)` over all directions.
    pub max_rel_err: f64,
    pub worst_fd: f64,
    pub worst_analytic: f64,
}

fn input_name(i: usize) -> String {
    format!("__input.{i}")
}

/// Compares the analytic directional derivative of the scalar `f` against a
/// central difference with step `step`, along `n_dirs` random unit-norm
/// directions over every input tensor and every trainable parameter.
///
/// `f` runs in training mode (batch statistics) for both evaluations.
pub fn check_directional<F>(
    inputs: &[Tensor],
    params: &ParamSet,
    f: F,
    n_dirs: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let mut ctx = Ctx::train(params);
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| ctx.g.param(&input_name(i), t))
        .collect();
    let loss = f(&mut ctx, &vars)?;
    let grads = ctx.g.backward(loss)?;
    let registered: Vec<(String, Var)> = ctx.g.params().to_vec();
    let lookup = |name: &str| {
        registered
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| grads.get(*v))
    };

    let trainable: Vec<String> = params
        .iter()
        .filter(|(k, _)| !ParamSet::is_buffer(k))
        .map(|(k, _)| k.clone())
        .collect();

    let eval = |ins: &[Tensor], ps: &ParamSet| -> Result<f64> {
        let mut c = Ctx {
            g: Graph::inference(),
            params: ps,
            train: true,
        };
        let vs: Vec<Var> = ins.iter().map(|t| c.g.constant(t.clone())).collect();
        let l = f(&mut c, &vs)?;
        Ok(c.g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |t: &Tensor| gaussian_like(t, &mut rng);
    let mut report = GradCheckReport {
        directions: n_dirs,
        max_rel_err: 0.0,
        worst_fd: 0.0,
        worst_analytic: 0.0,
    };
    for _ in 0..n_dirs {
        let mut din: Vec<Tensor> = inputs.iter().map(&mut gauss).collect();
        let mut dpar: Vec<Tensor> = trainable
            .iter()
            .map(|k| gauss(params.get(k).expect("listed")))
            .collect();
        let norm = din
            .iter()
            .chain(&dpar)
            .map(|t| dot(t, t))
            .sum::<f64>()
            .sqrt();
        for t in din.iter_mut().chain(dpar.iter_mut()) {
            t.scale(1.0 / norm);
        }
        let mut analytic = 0.0;
        for (i, d) in din.iter().enumerate() {
            if let Some(g) = lookup(&input_name(i)) {
                analytic += dot(g, d);
            }
        }
        for (k, d) in trainable.iter().zip(&dpar) {
            if let Some(g) = lookup(k) {
                analytic += dot(g, d);
            }
        }
        let shifted = |sign: f64| -> Result<f64> {
            let ins: Vec<Tensor> = inputs
                .iter()
                .zip(&din)
                .map(|(t, d)| axpy(t, sign * step, d))
                .collect();
            let mut ps = params.clone();
            for (k, d) in trainable.iter().zip(&dpar) {
                let t = ps.get_mut(k)?;
                *t = axpy(t, sign * step, d);
            }
            eval(&ins, &ps)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
        if !fd.is_finite() || !analytic.is_finite() {
            return Err(Error::invalid("non-finite value in gradient check"));
        }
        let scale = fd.abs().max(analytic.abs()).max(1e-8);
        let rel = (fd - analytic).abs() / scale;
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_fd = fd;
            report.worst_analytic = analytic;
        }
    }
    Ok(report)
}

fn gaussian_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..t.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn axpy(t: &Tensor, a: f64, d: &Tensor) -> Tensor {
    let data = t.data().iter().zip(d.data()).map(|(x, y)| x + a * y).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Weighted sum `Σ w ⊙ y` with fixed pseudo-random weights, turning any
/// tensor output into a scalar whose gradient touches every element.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian_like(g.value(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}
