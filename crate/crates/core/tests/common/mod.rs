#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toklen_core::{GradTape, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error used by every gradient check. Gradients whose magnitude is
/// below `floor` are compared on an absolute scale instead.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds `build(inputs)` on a fresh tape and reduces the output to a scalar
/// with fixed random weights, so non-scalar ops are checked in every entry.
fn scalar_loss<F>(build: &F, inputs: &[Tensor], weights: &Option<Tensor>) -> Result<(GradTape, Vec<Var>, Var)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = match weights {
        Some(w) => {
            let w = tape.constant(w.clone());
            let prod = tape.mul(out, w)?;
            tape.sum(prod)?
        }
        None => out,
    };
    Ok((tape, vars, loss))
}

/// Largest relative error between the tape gradient and central finite
/// differences over every entry of every input.
pub fn max_grad_error<F>(build: F, inputs: Vec<Tensor>, seed: u64) -> f64
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let probe = scalar_loss(&build, &inputs, &None).expect("forward");
    let out_shape = probe.0.shape(probe.2).to_vec();
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        Some(uniform(&out_shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed)))
    };
    let (mut tape, vars, loss) = scalar_loss(&build, &inputs, &weights).unwrap();
    tape.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| {
        let (tape, _, loss) = scalar_loss(&build, inputs, &weights).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zeros(*var);
        for e in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric, 1e-6));
        }
    }
    worst
}

use toklen_core::encoder::{ImageConfig, TextConfig};

/// A text tower small enough for finite differences and short runs.
pub fn tiny_text() -> TextConfig {
    TextConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        projection_dim: 8,
        ..TextConfig::default()
    }
}

pub fn tiny_image() -> ImageConfig {
    ImageConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        projection_dim: 8,
        ..ImageConfig::default()
    }
}
