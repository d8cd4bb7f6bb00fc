mod common;

use common::{random_tracklet, LossProblem};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcpl::autodiff::{AutodiffError, Graph, NodeId, Sgd, Tensor};
use tcpl::corpus::Tracklet;
use tcpl::losses::{
    cross_entropy_loss, exclusive_baseline_loss, inter_consistency_loss, intra_consistency_loss, joint_loss,
    LossVariant, LossWeights, MemoryBank, Objective, Supervision,
};
use tcpl::model::{init_model, ModelDims};
use tcpl::sampling::SamplerConfig;

fn leaf(g: &mut Graph<f64>, v: &[f64]) -> NodeId {
    g.leaf(Tensor::vector(v.to_vec()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn joint_loss_gradients_match_differences() {
    for seed in 0..20 {
        let problem = LossProblem::random(seed);
        let err = problem.gradient_error();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn lambda_zero_is_cross_entropy_only() {
    let mut problem = LossProblem::random(11);
    problem.objective.weights.lambda = 0.0;
    let model = init_model::<f64>(2, problem.dims, 3);
    let batch: Vec<(&Tracklet, Supervision)> = problem.batch.iter().map(|(t, s)| (t, *s)).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = joint_loss(&mut g, &bound, &batch, &problem.objective, &problem.sampler, &mut rng, None).unwrap();
    let ce = full.breakdown.ce_labeled + full.breakdown.ce_pseudo;
    assert!((full.breakdown.total - ce).abs() < 1e-12);
    let by_member: f64 = full.per_tracklet.iter().map(|(_, b)| b.ce_labeled + b.ce_pseudo).sum();
    assert!((by_member - ce).abs() < 1e-12);
}

#[test]
fn unlabeled_batch_has_only_consistency_terms() {
    let mut problem = LossProblem::random(5);
    for (_, s) in problem.batch.iter_mut() {
        *s = Supervision::None;
    }
    problem.objective.weights.lambda = 1.0;
    let model = init_model::<f64>(2, problem.dims, 3);
    let batch: Vec<(&Tracklet, Supervision)> = problem.batch.iter().map(|(t, s)| (t, *s)).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = joint_loss(&mut g, &bound, &batch, &problem.objective, &problem.sampler, &mut rng, None).unwrap();
    assert_eq!(out.breakdown.ce_labeled, 0.0);
    assert_eq!(out.breakdown.ce_pseudo, 0.0);
    assert!((out.breakdown.total - out.breakdown.intra - out.breakdown.inter).abs() < 1e-9);
}

#[test]
fn short_tracklets_skip_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = ModelDims { input: 3, hidden: 4, embed: 2 };
    let model = init_model::<f64>(1, dims, 2);
    let short = random_tracklet(&mut rng, 0, 3, 1);
    let long = random_tracklet(&mut rng, 1, 3, 10);
    let batch = vec![(&short, Supervision::Labeled(0)), (&long, Supervision::None)];
    let objective = Objective { variant: LossVariant::IntraOnly, weights: LossWeights::default() };
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = joint_loss(&mut g, &bound, &batch, &objective, &SamplerConfig::default(), &mut rng, None).unwrap();
    assert_eq!(out.skipped, 1);
    assert!(out.breakdown.ce_labeled > 0.0);
    assert!(out.breakdown.intra > 0.0);
}

#[test]
fn joint_loss_is_additive_over_members() {
    for seed in 0..10 {
        let problem = LossProblem::random(100 + seed);
        let model = init_model::<f64>(seed, problem.dims, 3);
        let batch: Vec<(&Tracklet, Supervision)> = problem.batch.iter().map(|(t, s)| (t, *s)).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = joint_loss(&mut g, &bound, &batch, &problem.objective, &problem.sampler, &mut rng, None).unwrap();
        let summed: f64 = out.per_tracklet.iter().map(|(_, b)| b.total).sum();
        assert!((summed - out.breakdown.total).abs() < 1e-9, "{summed} vs {}", out.breakdown.total);
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(0..5);
        let mut g = Graph::new();
        let zn = leaf(&mut g, &z);
        let l = cross_entropy_loss(&mut g, zn, y).unwrap();
        g.backward(l).unwrap();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for (i, gi) in g.grad(zn).data().iter().enumerate() {
            let expected = (z[i] - m).exp() / s - if i == y { 1.0 } else { 0.0 };
            assert!((gi - expected).abs() < 1e-8);
        }
    }
}

#[test]
fn intra_gradient_is_unit_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let an = leaf(&mut g, &a);
    let pn = leaf(&mut g, &p);
    let l = intra_consistency_loss(&mut g, an, pn).unwrap();
    g.backward(l).unwrap();
    let d = diff(&a, &p);
    let n = norm(&d);
    for (gi, di) in g.grad(an).data().iter().zip(&d) {
        assert!((gi - di / n).abs() < 1e-6);
    }
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn consistency_losses_are_bounded(a in vec_strategy(4), p in vec_strategy(4), n in vec_strategy(4), alpha in 0.01f64..1.0) {
        let mut g = Graph::new();
        let (an, pn, nn) = (leaf(&mut g, &a), leaf(&mut g, &p), leaf(&mut g, &n));
        let intra = intra_consistency_loss(&mut g, an, pn).unwrap();
        let inter = inter_consistency_loss(&mut g, an, pn, nn, alpha).unwrap();
        let li = g.value(intra).item();
        let le = g.value(inter).item();
        prop_assert!(li >= 0.0 && le >= 0.0);
        let ap = norm(&diff(&a, &p));
        let an_dist = norm(&diff(&a, &n));
        prop_assert!(le <= ap + alpha + 1e-9);
        if an_dist >= ap + alpha + 1e-6 {
            prop_assert_eq!(le, 0.0);
            g.backward(inter).unwrap();
            prop_assert!(g.grad(an).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn consistency_losses_ignore_common_shifts(
        a in vec_strategy(4), p in vec_strategy(4), n in vec_strategy(4), shift in vec_strategy(4),
    ) {
        let shifted = |v: &[f64]| -> Vec<f64> { v.iter().zip(&shift).map(|(x, s)| x + s).collect() };
        let eval = |a: &[f64], p: &[f64], n: &[f64]| {
            let mut g = Graph::new();
            let (an, pn, nn) = (leaf(&mut g, a), leaf(&mut g, p), leaf(&mut g, n));
            let intra = intra_consistency_loss(&mut g, an, pn).unwrap();
            let inter = inter_consistency_loss(&mut g, an, pn, nn, 0.3).unwrap();
            (g.value(intra).item(), g.value(inter).item())
        };
        let (i0, e0) = eval(&a, &p, &n);
        let (i1, e1) = eval(&shifted(&a), &shifted(&p), &shifted(&n));
        prop_assert!((i0 - i1).abs() < 1e-9);
        prop_assert!((e0 - e1).abs() < 1e-9);
    }
}

#[test]
fn intra_descent_on_linear_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xa: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xp: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut w = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut opt = Sgd::new(&[&w], 1e-3, 0.0, 0.0);
    let mut previous = f64::INFINITY;
    for _ in 0..100 {
        let mut g = Graph::new();
        let wn = g.leaf(w.clone());
        let a = leaf(&mut g, &xa);
        let p = leaf(&mut g, &xp);
        let ea = g.matmul(a, wn).unwrap();
        let ep = g.matmul(p, wn).unwrap();
        let l = intra_consistency_loss(&mut g, ea, ep).unwrap();
        let value = g.value(l).item();
        assert!(value < previous, "{value} !< {previous}");
        previous = value;
        g.backward(l).unwrap();
        let grad = g.grad(wn).clone();
        opt.step(&mut [&mut w], &[grad]).unwrap();
    }
}

#[test]
fn exclusive_loss_descends_after_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let bank_vectors: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut bank = MemoryBank::new(&[0, 1, 2], 0.1);
    for (i, v) in bank_vectors.iter().enumerate() {
        bank.initialize(i, v.clone());
    }
    let mut e = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let eval = |e: &Tensor<f64>| -> (f64, Tensor<f64>) {
        let mut g = Graph::new();
        let b = bank.bind(&mut g).unwrap();
        let en = g.leaf(e.clone());
        let l = exclusive_baseline_loss(&mut g, &b, 1, en).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item(), g.grad(en).clone())
    };
    let (before, grad) = eval(&e);
    let mut opt = Sgd::new(&[&e], 0.01, 0.5, 0.0);
    opt.step(&mut [&mut e], &[grad]).unwrap();
    let (after, _) = eval(&e);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g = Graph::<f64>::new();
    let big = leaf(&mut g, &[1e200, -1e200]);
    let zero = leaf(&mut g, &[0.0, 0.0]);
    assert!(matches!(
        intra_consistency_loss(&mut g, big, zero),
        Err(tcpl::LossError::Autodiff(AutodiffError::NonFiniteValue(_)))
    ));
}

/// Without cross-entropy members the consistency terms are invariant to a common
/// embedding shift, so bias gradients vanish identically and only absolute error is meaningful.
#[test]
fn unsupervised_batch_gradients() {
    use tcpl::model::BoundModel;
    for seed in 0..10 {
        let mut problem = LossProblem::random(300 + seed);
        for (_, s) in problem.batch.iter_mut() {
            *s = Supervision::None;
        }
        let eval = |params: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
            let bound = BoundModel::from_ids(ids.clone().try_into().unwrap(), problem.dims, false);
            let batch: Vec<(&Tracklet, Supervision)> = problem.batch.iter().map(|(t, s)| (t, *s)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(problem.sample_seed);
            let out = joint_loss(&mut g, &bound, &batch, &problem.objective, &problem.sampler, &mut rng, None).unwrap();
            g.backward(out.root).unwrap();
            (g.value(out.root).item(), ids.iter().map(|&i| g.grad(i).clone()).collect())
        };
        let (_, grads) = eval(&problem.params);
        let mut p = problem.params.clone();
        for (pi, gt) in grads.iter().enumerate() {
            for ei in 0..gt.len() {
                let o = p[pi].data()[ei];
                p[pi].data_mut()[ei] = o + 1e-5;
                let lp = eval(&p).0;
                p[pi].data_mut()[ei] = o - 1e-5;
                let lm = eval(&p).0;
                p[pi].data_mut()[ei] = o;
                let numeric = (lp - lm) / 2e-5;
                let analytic = gt.data()[ei];
                assert!(
                    (analytic - numeric).abs() < 1e-4 * analytic.abs().max(1e-5),
                    "seed {seed} param {pi}[{ei}]: {analytic:e} vs {numeric:e}"
                );
            }
        }
    }
}
