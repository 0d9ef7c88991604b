//! Decoder shapes and gradients, soft dice and the hierarchical loss.

use gradkit::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use partprompt::config::{ModelDims, Variant};
use partprompt::decoder::{
    decode, decode_hierarchical, dice, empty_target_loss, hierarchical_loss, HierarchicalPrediction, LabelEmbeddings,
    PartPrompts, WholePrompt,
};
use partprompt::model::init_params;
use partprompt::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: usize = 3;
const D: usize = 8;

fn dims() -> ModelDims {
    ModelDims { height: 32, width: 32, d: D, ..ModelDims::default() }
}

fn store(seed: u64) -> ParamStore<f64> {
    let binary = Tensor::from_f64(vec![2, P], &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    init_params(Variant::F, &dims(), &binary, seed).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn to_gradkit(e: partprompt::Error) -> gradkit::Error {
    match e {
        partprompt::Error::Tensor(t) => t,
        other => gradkit::Error::Usage(other.to_string()),
    }
}

#[test]
fn hierarchical_decode_yields_whole_and_part_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = store(1);
    let tape = Tape::new();
    let p = s.bind_frozen(&tape);
    let f_i = tape.constant(random(&mut rng, &[D, 8, 8]));
    let whole = WholePrompt {
        sparse: tape.constant(random(&mut rng, &[P, 2, D])),
        dense: tape.constant(random(&mut rng, &[D, 8, 8])),
    };
    let parts = PartPrompts {
        sparse: tape.constant(random(&mut rng, &[P, 2, D])),
        dense: tape.constant(random(&mut rng, &[P, D, 8, 8])),
    };
    let labels = LabelEmbeddings::from_bound(&p).unwrap();
    let pos = decode_hierarchical(&p, f_i, whole, parts, &labels, true, 32, 32).unwrap();
    assert_eq!(pos.whole.shape(), vec![32, 32]);
    assert_eq!(pos.parts.unwrap().shape(), vec![P, 32, 32]);
    let neg = decode_hierarchical(&p, f_i, whole, parts, &labels, false, 32, 32).unwrap();
    assert_ne!(pos.whole.to_tensor(), neg.whole.to_tensor());

    let single = PartPrompts {
        sparse: tape.constant(random(&mut rng, &[1, 2, D])),
        dense: tape.constant(random(&mut rng, &[1, D, 8, 8])),
    };
    let one = decode_hierarchical(&p, f_i, whole, single, &labels, true, 32, 32).unwrap();
    assert_eq!(one.parts.unwrap().shape(), vec![1, 32, 32]);
}

#[test]
fn zero_query_gives_zero_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store(2);
    s.get_mut("decoder.output_mlp.fc2.weight").unwrap().data_mut().fill(0.0);
    let tape = Tape::new();
    let p = s.bind_frozen(&tape);
    let f_i = tape.constant(random(&mut rng, &[D, 8, 8]));
    let tokens = tape.constant(random(&mut rng, &[2, 3, D]));
    let dense = tape.constant(random(&mut rng, &[2, D, 8, 8]));
    let out = decode(&p, f_i, tokens, dense, 16, 16).unwrap().to_tensor();
    assert_eq!(out.shape(), &[2, 16, 16]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn logits_scale_with_the_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = store(3);
    let mut doubled = base.clone();
    for name in ["decoder.output_mlp.fc2.weight", "decoder.output_mlp.fc2.bias"] {
        doubled.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 2.0);
    }
    let f = random(&mut rng, &[D, 8, 8]);
    let t = random(&mut rng, &[1, 4, D]);
    let dn = random(&mut rng, &[D, 8, 8]);
    let run = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        decode(&p, tape.constant(f.clone()), tape.constant(t.clone()), tape.constant(dn.clone()), 8, 8)
            .unwrap()
            .to_tensor()
    };
    let (a, b) = (run(&base), run(&doubled));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((2.0 * x - y).abs() < 1e-12);
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let s = store(4);
    let tape = Tape::new();
    let p = s.bind_frozen(&tape);
    let f_i = tape.constant(Tensor::zeros(vec![D, 8, 8]));
    let bad_tokens = tape.constant(Tensor::zeros(vec![1, 2, D + 1]));
    let dense = tape.constant(Tensor::zeros(vec![D, 8, 8]));
    assert!(decode(&p, f_i, bad_tokens, dense, 8, 8).is_err());
    let tokens = tape.constant(Tensor::zeros(vec![2, 2, D]));
    let bad_dense = tape.constant(Tensor::zeros(vec![3, D, 8, 8]));
    assert!(decode(&p, f_i, tokens, bad_dense, 8, 8).is_err());
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = store(5);
    let checked = [
        "decoder.attn.wq",
        "decoder.attn.wk",
        "decoder.attn.wv",
        "decoder.attn.wo",
        "labels.positive",
    ];
    let mut params: Vec<(String, Tensor<f64>)> =
        checked.iter().map(|n| (n.to_string(), s.get(n).unwrap().clone())).collect();
    params.push(("tokens".into(), random(&mut rng, &[P, 2, D])));
    params.push(("dense".into(), random(&mut rng, &[P, D, 8, 8])));
    let f_i = random(&mut rng, &[D, 8, 8]);
    let target = Tensor::from_fn(vec![P, 16, 16], |i| if i % 7 < 3 { 1.0 } else { 0.0 });
    let report = grad_check(
        |tape, v| {
            let mut vars: Vec<(String, Var<'_, f64>)> =
                checked.iter().zip(v).map(|(n, var)| (n.to_string(), *var)).collect();
            vars.extend(
                s.iter()
                    .filter(|p| !checked.contains(&p.name.as_str()))
                    .map(|p| (p.name.clone(), tape.constant(p.tensor.clone()))),
            );
            let bound = Bound::from_vars(vars);
            let tokens = v[5].add(v[4])?;
            let logits = decode(&bound, tape.constant(f_i.clone()), tokens, v[6], 16, 16).map_err(to_gradkit)?;
            Ok(dice(logits, &target).map_err(to_gradkit)?.sum())
        },
        &params,
        &GradCheckOptions { tolerance: 1e-4, ..GradCheckOptions::default() },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn dice_of(logits: &[f64], target: &[f64]) -> f64 {
    let tape = Tape::new();
    let n = logits.len();
    let l = tape.constant(Tensor::new(vec![1, n], logits.to_vec()).unwrap());
    dice(l, &Tensor::new(vec![1, n], target.to_vec()).unwrap()).unwrap().to_tensor().data()[0]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn dice_hand_values() {
    // p = 0.5 everywhere: 2 (0.5 k) / (0.25 N + k).
    let g: Vec<f64> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
    assert!((dice_of(&[0.0; 16], &g) - 0.5).abs() < 1e-12);
    let g9: Vec<f64> = (0..10).map(|i| if i < 9 { 1.0 } else { 0.0 }).collect();
    assert!((dice_of(&[0.0; 10], &g9) - 9.0 / (2.5 + 9.0)).abs() < 1e-12);

    // Single pixel.
    let p = sigmoid(1.3);
    assert!((dice_of(&[1.3], &[1.0]) - 2.0 * p / (p * p + 1.0)).abs() < 1e-12);

    // Empty target: the epsilon keeps an all-underflowed prediction finite.
    assert_eq!(dice_of(&[-800.0; 4], &[0.0; 4]), 0.0);

    let perfect: Vec<f64> = g.iter().map(|&v| if v > 0.0 { 40.0 } else { -40.0 }).collect();
    assert!((1.0 - dice_of(&perfect, &g)) < 1e-5);
    assert_eq!(dice_of(&perfect, &[0.0; 16]), 0.0);
}

fn loss_of(whole: &[f64], parts: &[f64], gw: &[f64], gp: &[f64], w: &[f64]) -> f64 {
    let tape = Tape::new();
    let n = whole.len();
    let pred = HierarchicalPrediction {
        whole: tape.constant(Tensor::new(vec![1, n], whole.to_vec()).unwrap()),
        parts: Some(tape.constant(Tensor::new(vec![w.len(), 1, n], parts.to_vec()).unwrap())),
    };
    let gw = Tensor::new(vec![1, n], gw.to_vec()).unwrap();
    let gp = Tensor::new(vec![w.len(), 1, n], gp.to_vec()).unwrap();
    hierarchical_loss(&pred, &gw, &gp, w).unwrap().item()
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let gw = [1.0, 1.0, 1.0, 0.0];
    let gp = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let logit = |g: &[f64]| g.iter().map(|&v| if v > 0.0 { 40.0 } else { -40.0 }).collect::<Vec<_>>();
    assert!(loss_of(&logit(&gw), &logit(&gp), &gw, &gp, &[1.0, 1.0]) < 1e-4);
}

#[test]
fn zero_weight_parts_do_not_contribute() {
    let gw = [1.0, 1.0, 0.0, 0.0];
    let gp = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let whole = [2.0, 2.0, -2.0, -2.0];
    let good = [2.0, -2.0, -2.0, -2.0];
    let a = loss_of(&whole, &[good, [0.3, -0.7, 0.1, 0.9]].concat(), &gw, &gp, &[1.0, 0.0]);
    let b = loss_of(&whole, &[good, [-5.0, 5.0, 5.0, -1.0]].concat(), &gw, &gp, &[1.0, 0.0]);
    assert_eq!(a, b);
}

#[test]
fn empty_targets_give_constant_loss_and_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let whole = tape.variable(random(&mut rng, &[6, 6]));
    let parts = tape.variable(random(&mut rng, &[P, 6, 6]));
    let pred = HierarchicalPrediction { whole, parts: Some(parts) };
    let weights = [1.0, 0.0, 1.0];
    let loss = hierarchical_loss(&pred, &Tensor::zeros(vec![6, 6]), &Tensor::zeros(vec![P, 6, 6]), &weights).unwrap();
    assert_eq!(loss.item(), empty_target_loss(Some(&weights[..])));
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(whole).unwrap().iter().all(|&g| g == 0.0));
    assert!(grads.get(parts).unwrap().iter().all(|&g| g == 0.0));
}

proptest! {
    #[test]
    fn dice_is_bounded_and_permutation_symmetric(
        pairs in prop::collection::vec((-6.0f64..6.0, prop::bool::ANY), 1..40),
        shift in 0usize..40,
    ) {
        let logits: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
        let v = dice_of(&logits, &target);
        prop_assert!((0.0..=1.0).contains(&v));
        let k = shift % logits.len();
        let (mut l2, mut t2) = (logits.clone(), target.clone());
        l2.rotate_left(k);
        t2.rotate_left(k);
        prop_assert!((dice_of(&l2, &t2) - v).abs() < 1e-12);
    }

    #[test]
    fn raising_foreground_logits_lowers_the_loss(
        pairs in prop::collection::vec((-4.0f64..4.0, prop::bool::ANY), 2..30),
        bump in 0.01f64..2.0,
    ) {
        let target: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
        prop_assume!(target.iter().any(|&t| t > 0.0));
        let logits: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let raised: Vec<f64> = logits.iter().zip(&target).map(|(&l, &t)| l + bump * t).collect();
        prop_assert!(1.0 - dice_of(&raised, &target) <= 1.0 - dice_of(&logits, &target) + 1e-12);
    }

    #[test]
    fn hierarchical_loss_stays_in_range(
        whole in prop::collection::vec(-5.0f64..5.0, 8),
        parts in prop::collection::vec(-5.0f64..5.0, 16),
        gw in prop::collection::vec(prop::bool::ANY, 8),
        gp in prop::collection::vec(prop::bool::ANY, 16),
        w in prop::collection::vec(prop::bool::ANY, 2),
    ) {
        let f = |b: &[bool]| b.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>();
        let weights = f(&w);
        let loss = loss_of(&whole, &parts, &f(&gw), &f(&gp), &weights);
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= 1.0 + weights.iter().sum::<f64>());
    }
}
