//! Training: loss oracles, the joint objective's gradient against finite
//! differences, optimizer-run bookkeeping, and freeze/determinism contracts.

mod common;

use common::{rel_err, rng, tiny_image, tiny_text, uniform, FD_STEP};
use rand::Rng;
use toklen_core::data::{
    generate_synthetic_corpus, make_batch, tokenize, truncate, AttrOffset, ImageCaptionPair, SynthConfig,
};
use toklen_core::encoder::{Checkpoint, DualEncoder, ImageConfig, Phase, TextConfig};
use toklen_core::pipeline::sha256_hex;
use toklen_core::posenc::{PositionalScheme, SchemeKind, TEACHER_WINDOW};
use toklen_core::training::{
    contrastive_loss_value, distill_loss_and_grads, distill_loss_value, flatten_gradients, joint_loss,
    joint_loss_and_grads, batch_embeddings, pretrain_teacher, run_distillation, run_expansion,
    set_trainable_values, student_from_teacher, trainable_values, DistillConfig, DistillKind, ExpandConfig,
    TeacherConfig, Trainable,
};
use toklen_core::{Error, Tensor};

fn corpus(seed: u64, count: usize, long_fraction: f64, attr_offset: AttrOffset) -> Vec<ImageCaptionPair> {
    generate_synthetic_corpus(&SynthConfig {
        seed,
        count,
        long_fraction,
        attr_offset,
    })
    .unwrap()
}

fn untrained_teacher(text: TextConfig, image: ImageConfig, seed: u64) -> DualEncoder {
    DualEncoder::init(text, image, seed).unwrap()
}

#[test]
fn contrastive_two_pair_orthogonal_case() {
    let text = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let got = contrastive_loss_value(&text, &text, 1.0).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    assert!((expected - 0.313262).abs() < 1e-6);
}

#[test]
fn contrastive_single_pair_is_zero_and_permutation_invariant() {
    let mut r = rng(3);
    let t = uniform(&[1, 5], -1.0, 1.0, &mut r);
    let i = uniform(&[1, 5], -1.0, 1.0, &mut r);
    assert!(contrastive_loss_value(&t, &i, 0.07).unwrap().abs() < 1e-12);

    let t = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let i = uniform(&[4, 5], -1.0, 1.0, &mut r);
    let base = contrastive_loss_value(&t, &i, 0.5).unwrap();
    assert!(base > 0.0);
    let perm = [2usize, 0, 3, 1];
    let permute = |x: &Tensor| {
        let rows: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * 5..(p + 1) * 5].to_vec()).collect();
        Tensor::new(vec![4, 5], rows).unwrap()
    };
    let permuted = contrastive_loss_value(&permute(&t), &permute(&i), 0.5).unwrap();
    assert!((base - permuted).abs() < 1e-12);
}

#[test]
fn contrastive_rejects_nonpositive_temperature() {
    let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(contrastive_loss_value(&t, &t, 0.0), Err(Error::Contract(_))));
}

#[test]
fn distill_cosine_endpoints() {
    let z = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    let orth = [1.2, 0.3, 0.0];
    assert!(distill_loss_value(&z, &z, DistillKind::Cosine).unwrap().abs() < 1e-12);
    assert!((distill_loss_value(&z, &orth, DistillKind::Cosine).unwrap() - 1.0).abs() < 1e-12);
    assert!((distill_loss_value(&z, &neg, DistillKind::Cosine).unwrap() - 2.0).abs() < 1e-12);
    assert!(matches!(
        distill_loss_value(&z, &[0.0; 3], DistillKind::Cosine),
        Err(Error::DegenerateInput(_))
    ));
    // l2 and mse against hand values.
    let other = [0.3, 0.8, 2.0];
    assert!((distill_loss_value(&z, &other, DistillKind::L2).unwrap() - 2.0).abs() < 1e-12);
    assert!((distill_loss_value(&z, &other, DistillKind::Mse).unwrap() - 4.0 / 3.0).abs() < 1e-12);
}

#[test]
fn joint_loss_is_affine_in_lambda() {
    let mut r = rng(11);
    let short = uniform(&[4, 6], -1.0, 1.0, &mut r);
    let long = uniform(&[4, 6], -1.0, 1.0, &mut r);
    let image = uniform(&[4, 6], -1.0, 1.0, &mut r);
    let l_short = contrastive_loss_value(&short, &image, 0.2).unwrap();
    let l_long = contrastive_loss_value(&long, &image, 0.2).unwrap();
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let j = joint_loss(&short, &long, &image, 0.2, lambda).unwrap();
        let expected = lambda * l_short + (1.0 - lambda) * l_long;
        assert!((j.total - expected).abs() < 1e-12, "λ={lambda}");
    }
    let mid = joint_loss(&short, &long, &image, 0.2, 0.5).unwrap();
    assert!((mid.total - 0.5 * (l_short + l_long)).abs() < 1e-12);
    assert!(joint_loss(&short, &long, &image, 0.2, 1.5).is_err());
}

/// Central finite differences of the batch joint loss with respect to a
/// sample of entries of every trainable tensor, compared with the gradients
/// assembled across the per-example tapes.
#[test]
fn joint_loss_gradients_match_finite_differences() {
    let pairs = corpus(5, 3, 1.0, AttrOffset::Mixed);
    let refs: Vec<&ImageCaptionPair> = pairs.iter().collect();
    let t_g = 2 * TEACHER_WINDOW;
    let text = tiny_text().with_scheme(PositionalScheme::default_for(SchemeKind::RopeNtk, 8.0), t_g);
    let mut model = DualEncoder::init(text, tiny_image(), 2).unwrap();
    model.temperature = 0.3;
    let batch = make_batch(&refs, TEACHER_WINDOW, t_g).unwrap();
    let lambda = 0.3;
    let which = Trainable {
        text: true,
        image: true,
        temperature: true,
    };
    let (_, grads) = joint_loss_and_grads(&model, &batch, lambda, true).unwrap();
    let analytic = flatten_gradients(grads, which);
    let (values, _) = trainable_values(&model, which);
    assert_eq!(analytic.len(), values.len());

    let loss_at = |values: Vec<Tensor>| {
        let mut m = model.clone();
        set_trainable_values(&mut m, which, values).unwrap();
        let e = batch_embeddings(&m, &batch).unwrap();
        joint_loss(&e.short, &e.long, &e.image, m.temperature, lambda).unwrap().total
    };
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for (t, tensor) in values.iter().enumerate() {
        let picks: Vec<usize> = if tensor.len() <= 6 {
            (0..tensor.len()).collect()
        } else {
            (0..6).map(|_| r.gen_range(0..tensor.len())).collect()
        };
        for e in picks {
            let mut plus = values.clone();
            plus[t].data_mut()[e] += FD_STEP;
            let mut minus = values.clone();
            minus[t].data_mut()[e] -= FD_STEP;
            let numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[t].data()[e], numeric, 1e-6));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn vision_gradients_present_only_when_trainable() {
    let pairs = corpus(6, 4, 0.5, AttrOffset::Mixed);
    let refs: Vec<&ImageCaptionPair> = pairs.iter().collect();
    let model = DualEncoder::init(tiny_text(), tiny_image(), 1).unwrap();
    let batch = make_batch(&refs, TEACHER_WINDOW, TEACHER_WINDOW).unwrap();

    let (_, trainable) = joint_loss_and_grads(&model, &batch, 0.5, true).unwrap();
    assert_eq!(trainable.image.len(), model.image.slots().len());
    let norm: f64 = trainable.image.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    assert!(norm > 0.0);

    let (_, frozen) = joint_loss_and_grads(&model, &batch, 0.5, false).unwrap();
    assert!(frozen.image.is_empty());
    assert_eq!(frozen.text.len(), trainable.text.len());
}

#[test]
fn frozen_vision_expansion_keeps_image_tower() {
    let pairs = corpus(7, 24, 1.0, AttrOffset::Late);
    let teacher = untrained_teacher(tiny_text(), tiny_image(), 3);
    let student = student_from_teacher(&teacher, PositionalScheme::default_for(SchemeKind::Rope, 8.0)).unwrap();
    let config = ExpandConfig {
        t_g: 154,
        batch_size: 8,
        vision_trainable: false,
        ..ExpandConfig::default()
    };
    let out = run_expansion(&student, &pairs, &config).unwrap();
    for ((_, a), (_, b)) in out.model.image.slots().into_iter().zip(student.image.slots()) {
        assert_eq!(a.data(), b.data());
    }
    assert_ne!(out.model.text.token_embedding.data(), student.text.token_embedding.data());
}

#[test]
fn warm_started_student_starts_below_half_cosine_loss() {
    let pairs = corpus(0, 32, 0.5, AttrOffset::Mixed);
    let teacher = DualEncoder::init(TextConfig::default(), ImageConfig::default(), 0).unwrap();
    let student = student_from_teacher(&teacher, PositionalScheme::default_for(SchemeKind::Rope, 8.0)).unwrap();
    let views: Vec<_> = pairs
        .iter()
        .map(|p| truncate(&tokenize(&p.caption), TEACHER_WINDOW).unwrap())
        .collect();
    let targets: Vec<Vec<f64>> = views.iter().map(|v| teacher.encode_text(v).unwrap().vector).collect();
    let tokens: Vec<_> = views.iter().collect();
    let z_t: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    let (loss, _) = distill_loss_and_grads(&student, &tokens, &z_t, DistillKind::Cosine).unwrap();
    assert!(loss < 0.5, "initial cosine distill loss {loss}");
}

#[test]
fn zero_epochs_leaves_student_untouched_and_teacher_frozen() {
    let pairs = corpus(8, 20, 0.5, AttrOffset::Mixed);
    let teacher = untrained_teacher(tiny_text(), tiny_image(), 4);
    let teacher_hash = sha256_hex(&Checkpoint::new(Phase::Teacher, teacher.clone()).to_bytes());
    let student = student_from_teacher(&teacher, PositionalScheme::default_for(SchemeKind::Rope, 8.0)).unwrap();
    let before = Checkpoint::new(Phase::Distilled, student.clone()).to_bytes();

    let idle = DistillConfig {
        epochs: 0,
        ..DistillConfig::default()
    };
    let out = run_distillation(&teacher, student.clone(), &pairs, &idle).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(Checkpoint::new(Phase::Distilled, out.model).to_bytes(), before);

    let busy = DistillConfig {
        epochs: 2,
        batch_size: 8,
        ..DistillConfig::default()
    };
    let out = run_distillation(&teacher, student, &pairs, &busy).unwrap();
    assert_ne!(Checkpoint::new(Phase::Distilled, out.model).to_bytes(), before);
    assert_eq!(sha256_hex(&Checkpoint::new(Phase::Teacher, teacher).to_bytes()), teacher_hash);
}

#[test]
fn distillation_rejects_mismatched_dims() {
    let teacher = untrained_teacher(tiny_text(), tiny_image(), 4);
    let wider = TextConfig {
        d_model: 16,
        projection_dim: 8,
        ..tiny_text()
    }
    .rope_student();
    let student = DualEncoder::init(wider, tiny_image(), 4).unwrap();
    let pairs = corpus(8, 4, 0.5, AttrOffset::Mixed);
    let err = run_distillation(&teacher, student, &pairs, &DistillConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn history_has_one_record_per_step() {
    let pairs = corpus(9, 21, 0.5, AttrOffset::Mixed);
    let teacher = untrained_teacher(tiny_text(), tiny_image(), 5);
    let student = student_from_teacher(&teacher, PositionalScheme::default_for(SchemeKind::Rope, 8.0)).unwrap();
    let config = ExpandConfig {
        t_g: 154,
        epochs: 2,
        batch_size: 8,
        ..ExpandConfig::default()
    };
    let out = run_expansion(&student, &pairs, &config).unwrap();
    assert_eq!(out.history.len(), 21usize.div_ceil(8) * 2);
    for (i, rec) in out.history.iter().enumerate() {
        assert_eq!(rec.step, i + 1);
        let (s, l) = (rec.loss_short.unwrap(), rec.loss_long.unwrap());
        assert!((rec.loss - (0.5 * s + 0.5 * l)).abs() < 1e-12);
    }

    let distilled = run_distillation(
        &teacher,
        student,
        &pairs,
        &DistillConfig {
            epochs: 3,
            batch_size: 5,
            ..DistillConfig::default()
        },
    )
    .unwrap();
    assert_eq!(distilled.history.len(), 21usize.div_ceil(5) * 3);
}

#[test]
fn unit_factor_expansion_keeps_frequencies() {
    let teacher = untrained_teacher(tiny_text(), tiny_image(), 6);
    let student = student_from_teacher(&teacher, PositionalScheme::default_for(SchemeKind::Rope, 8.0)).unwrap();
    let config = ExpandConfig {
        t_g: TEACHER_WINDOW,
        alpha: 1.0,
        epochs: 0,
        ..ExpandConfig::default()
    };
    let out = run_expansion(&student, &corpus(1, 4, 0.0, AttrOffset::Early), &config).unwrap();
    let before = student.frequencies().unwrap().unwrap();
    let after = out.model.frequencies().unwrap().unwrap();
    assert_eq!(before.theta(), after.theta());
}

#[test]
fn teacher_training_is_deterministic() {
    let pairs = corpus(12, 24, 0.5, AttrOffset::Mixed);
    let config = TeacherConfig {
        epochs: 1,
        batch_size: 8,
        seed: 12,
        ..TeacherConfig::default()
    };
    let a = pretrain_teacher(tiny_text(), tiny_image(), &pairs, &config).unwrap();
    let b = pretrain_teacher(tiny_text(), tiny_image(), &pairs, &config).unwrap();
    assert_eq!(
        Checkpoint::new(Phase::Teacher, a.model).to_bytes(),
        Checkpoint::new(Phase::Teacher, b.model).to_bytes()
    );
    assert_eq!(a.history, b.history);
    assert!(pretrain_teacher(tiny_text().rope_student(), tiny_image(), &pairs, &config).is_err());
}
