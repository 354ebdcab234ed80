//! Analytic gradients of every differentiable tape op against central finite
//! differences on random inputs in [-2, 2].

mod common;

use common::{max_grad_error, rng, uniform};
use rand::Rng;
use toklen_core::posenc::RotaryFrequencies;
use toklen_core::tensor::LAYER_NORM_EPS;
use toklen_core::{AttnMask, GradTape, Result, Tensor, Var};

const TRIALS: u64 = 100;
const TOL: f64 = 1e-4;

fn check<F>(name: &str, mut make_inputs: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>, build: F)
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var> + Copy,
{
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut r = rng(trial * 7919 + name.len() as u64);
        let inputs = make_inputs(&mut r);
        worst = worst.max(max_grad_error(build, inputs, trial));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn u(shape: &[usize], r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    uniform(shape, -2.0, 2.0, r)
}

#[test]
fn matmul_family() {
    check("matmul", |r| vec![u(&[3, 4], r), u(&[4, 2], r)], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", |r| vec![u(&[3, 4], r), u(&[5, 4], r)], |t, v| t.matmul_nt(v[0], v[1]));
    check(
        "linear",
        |r| vec![u(&[3, 4], r), u(&[4, 2], r), u(&[2], r)],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn elementwise() {
    check("add", |r| vec![u(&[2, 3], r), u(&[2, 3], r)], |t, v| t.add(v[0], v[1]));
    check("sub", |r| vec![u(&[2, 3], r), u(&[2, 3], r)], |t, v| t.sub(v[0], v[1]));
    check("mul", |r| vec![u(&[2, 3], r), u(&[2, 3], r)], |t, v| t.mul(v[0], v[1]));
    check("add_row", |r| vec![u(&[3, 4], r), u(&[4], r)], |t, v| t.add_row(v[0], v[1]));
    check("scale", |r| vec![u(&[5], r)], |t, v| t.scale(v[0], -1.7));
    check("gelu", |r| vec![u(&[6], r)], |t, v| t.gelu(v[0]));
    check("square", |r| vec![u(&[6], r)], |t, v| t.square(v[0]));
    check("sqrt", |r| vec![uniform(&[6], 0.5, 2.0, r)], |t, v| t.sqrt(v[0]));
    check(
        "div_scalar",
        |r| {
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            vec![u(&[2, 3], r), Tensor::scalar(sign * r.gen_range(0.5..2.0))]
        },
        |t, v| t.div_scalar(v[0], v[1]),
    );
}

#[test]
fn reductions_and_selection() {
    check("sum", |r| vec![u(&[3, 2], r)], |t, v| t.sum(v[0]));
    check("mean", |r| vec![u(&[3, 2], r)], |t, v| t.mean(v[0]));
    check("mean_rows", |r| vec![u(&[4, 3], r)], |t, v| t.mean_rows(v[0]));
    check("select_row", |r| vec![u(&[4, 3], r)], |t, v| t.select_row(v[0], 2));
    check("diagonal", |r| vec![u(&[4, 4], r)], |t, v| t.diagonal(v[0]));
    check("embedding", |r| vec![u(&[6, 3], r)], |t, v| t.embedding(v[0], &[5, 0, 5, 2]));
}

#[test]
fn normalizations() {
    check("softmax_last", |r| vec![u(&[3, 4], r)], |t, v| t.softmax(v[0], 1));
    check("softmax_first", |r| vec![u(&[3, 4], r)], |t, v| t.softmax(v[0], 0));
    check("log_softmax", |r| vec![u(&[3, 4], r)], |t, v| t.log_softmax(v[0], 1));
    check("log_softmax_first", |r| vec![u(&[3, 4], r)], |t, v| t.log_softmax(v[0], 0));
    check(
        "layer_norm",
        |r| vec![u(&[3, 5], r), u(&[5], r), u(&[5], r)],
        |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS),
    );
    check("l2_normalize_rows", |r| vec![u(&[3, 4], r)], |t, v| t.l2_normalize_rows(v[0]));
}

#[test]
fn rotary() {
    check(
        "rope",
        |r| vec![u(&[4, 8], r)],
        |t, v| {
            let f = RotaryFrequencies::new(4, 10_000.0)?;
            t.rope(v[0], 2, &f, &[0, 3, 9, 40])
        },
    );
}

#[test]
fn attention_variants() {
    let qkv = |r: &mut rand_chacha::ChaCha8Rng| vec![u(&[5, 4], r), u(&[5, 4], r), u(&[5, 4], r)];
    check("attention_causal", qkv, |t, v| t.attention(v[0], v[1], v[2], 2, AttnMask::CAUSAL));
    check("attention_full", qkv, |t, v| t.attention(v[0], v[1], v[2], 2, AttnMask::FULL));
    check("attention_padded", qkv, |t, v| {
        t.attention(v[0], v[1], v[2], 2, AttnMask { causal: true, key_start: 2 })
    });
}

#[test]
fn cope_attention() {
    // Table of 4 positions per head: longer rows saturate and exercise the clamp.
    let inputs = |r: &mut rand_chacha::ChaCha8Rng| {
        vec![u(&[6, 4], r), u(&[6, 4], r), u(&[6, 4], r), u(&[2, 4, 2], r)]
    };
    check("cope_attention", inputs, |t, v| {
        t.cope_attention(v[0], v[1], v[2], v[3], 2, AttnMask::CAUSAL)
    });
    check("cope_attention_padded", inputs, |t, v| {
        t.cope_attention(v[0], v[1], v[2], v[3], 2, AttnMask { causal: true, key_start: 1 })
    });
}

#[test]
fn cosine_of_random_vectors() {
    check(
        "cosine",
        |r| vec![uniform(&[1, 8], -1.0, 1.0, r), uniform(&[1, 8], -1.0, 1.0, r)],
        |t, v| {
            let a = t.l2_normalize_rows(v[0])?;
            let b = t.l2_normalize_rows(v[1])?;
            let p = t.mul(a, b)?;
            t.sum(p)
        },
    );
}
