use super::*;
use crate::diffusion::{per_item_loss, DenoiserArch};
use crate::numerics::{relative_error, Bound, ParamSet};

/// Predicts a fixed tensor regardless of input: zero Jacobian.
struct Fixed(Tensor);

impl EpsModel for Fixed {
    fn bind<T: Elem>(&self, g: &Graph<T>, _: &dyn Fn(&str) -> bool) -> Bound {
        ParamSet::new().bind(g, |_| false)
    }

    fn eps<T: Elem>(&self, g: &Graph<T>, _: &Bound, _: Var, _: &[f32], _: &[usize]) -> Var {
        g.lift(&self.0)
    }
}

fn arch() -> DefenderArch {
    DefenderArch {
        layers: 1,
        hidden: 8,
        patch: 4,
        heads: 2,
        res: 8,
    }
}

/// A defender whose zero-initialised layers are randomised so every
/// parameter influences the output.
fn live_net(seed: u64) -> DefenderNet {
    let mut net = DefenderNet::init(arch(), 0.1, seed).unwrap();
    let mut rng = Rng::new(seed, 42);
    let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        if name.contains("ada.") || name.starts_with("final.") {
            let shape = net.params.get(&name).unwrap().shape().to_vec();
            net.params.insert(name, rng.gaussian(&shape).scale(0.3));
        }
    }
    net
}

fn images(b: usize, seed: u64) -> ImageBatch {
    let t = Rng::new(seed, 9)
        .gaussian(&[b, 1, 8, 8])
        .map(|v| (0.5 * v).tanh());
    ImageBatch::new(t, (0..b).collect()).unwrap()
}

fn tiny() -> Denoiser {
    Denoiser::init(DenoiserArch::Tiny { hidden: 4, emb: 8 }, 8, 2, 5)
}

fn shared_t_draw(b: usize, t: f32, seed: u64) -> NoiseDraw {
    let eps = Rng::new(seed, 3).gaussian(&[b, 1, 8, 8]);
    NoiseDraw { t: vec![t; b], eps }
}

#[test]
fn defend_output_strictly_inside_budget_even_when_saturated() {
    let mut net = live_net(1);
    let w = net.params.get("final.w").unwrap().scale(1e4);
    net.params.insert("final.w", w);
    let x = images(6, 2);
    let (p, defended) = defend(&net, &x).unwrap();
    assert!(p.delta.abs_max() < net.eps_budget);
    assert!(p.delta.abs_max() > 0.99 * net.eps_budget);
    assert_eq!(defended.images().shape(), x.images().shape());
    assert!(defended.images().abs_max() <= 1.0);
}

#[test]
fn zero_output_projection_gives_zero_perturbation() {
    let net = DefenderNet::init(arch(), 0.1, 3).unwrap();
    let (p, defended) = defend(&net, &images(3, 4)).unwrap();
    assert!(p.delta.data().iter().all(|&v| v == 0.0));
    assert_eq!(defended.images(), images(3, 4).images());
}

#[test]
fn defend_is_a_pure_function() {
    let net = live_net(5);
    let x = images(2, 6);
    let first = defend(&net, &x).unwrap().0;
    for _ in 0..10 {
        assert_eq!(defend(&net, &x).unwrap().0, first);
    }
}

#[test]
fn trace_length_ignores_content() {
    let net = live_net(7);
    assert_eq!(
        trace_len(&net, &images(1, 1)),
        trace_len(&net, &images(1, 2))
    );
}

#[test]
fn rejects_wrong_resolution_and_bad_arch() {
    let net = live_net(1);
    let x = ImageBatch::new(Tensor::zeros(&[1, 1, 4, 4]), vec![0]).unwrap();
    assert!(matches!(defend(&net, &x), Err(Error::Shape(_))));
    let mut a = arch();
    a.heads = 3;
    assert!(matches!(
        DefenderNet::init(a, 0.1, 0),
        Err(Error::Config(_))
    ));
    let mut a = arch();
    a.patch = 3;
    assert!(matches!(
        DefenderNet::init(a, 0.1, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn surrogate_value_is_reweighted_diffusion_loss() {
    let net = live_net(2);
    let model = tiny();
    let sched = Schedule::default();
    let x = images(4, 3);
    let mut rng = Rng::new(4, 0);
    let draw = NoiseDraw::sample(&mut rng, x.images().shape(), &sched);
    let sur = sur_adv_sds_loss::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let (p, _) = defend(&net, &x).unwrap();
    let x_def = x.images().add(&p.delta).unwrap();
    let direct: f64 = per_item_loss(&model, &x_def, &draw, &[0; 4], &sched)
        .iter()
        .sum::<f64>()
        / 4.0;
    assert!(
        ((sur.value as f64 - direct) / direct).abs() < 1e-6,
        "{} vs {direct}",
        sur.value
    );
}

#[test]
fn perfect_prediction_gives_zero_loss_and_gradient() {
    let net = live_net(3);
    let sched = Schedule::default();
    let x = images(2, 1);
    let draw = shared_t_draw(2, 0.4, 1);
    let model = Fixed(draw.eps.clone());
    let sur = sur_adv_sds_loss::<f32, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    assert_eq!(sur.value, 0.0);
    assert!(sur.flatten().iter().all(|&v| v == 0.0));
    let r = advsds_grad_reference::<f32, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    assert!(r.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn surrogate_gradient_is_two_alpha_times_reference() {
    let sched = Schedule::default();
    let model = tiny();
    for seed in 0..4 {
        let net = live_net(seed);
        let x = images(3, seed + 10);
        let t = 0.1 + 0.25 * seed as f32;
        let draw = shared_t_draw(3, t, seed);
        let sur = sur_adv_sds_loss::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
        let r = advsds_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
        let want = r.scale(2.0 * sched.alpha(t)).flatten();
        let err = relative_error(&sur.flatten(), &want);
        assert!(err < 1e-5, "t={t}: {err}");
    }
}

/// `ε̂ = x_t + c`: identity Jacobian, so the surrogate drops nothing.
struct Shift(Tensor);

impl EpsModel for Shift {
    fn bind<T: Elem>(&self, g: &Graph<T>, _: &dyn Fn(&str) -> bool) -> Bound {
        ParamSet::new().bind(g, |_| false)
    }

    fn eps<T: Elem>(&self, g: &Graph<T>, _: &Bound, x_t: Var, _: &[f32], _: &[usize]) -> Var {
        let c = g.lift(&self.0);
        g.add(x_t, c)
    }
}

#[test]
fn identity_jacobian_model_makes_full_gradient_equal_surrogate() {
    let sched = Schedule::default();
    let net = live_net(4);
    let x = images(2, 5);
    let draw = shared_t_draw(2, 0.3, 7);
    let model = Shift(Rng::new(8, 8).gaussian(&[2, 1, 8, 8]));
    let full = full_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let r = advsds_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let err = relative_error(&full.flatten(), &r.scale(2.0 * sched.alpha(0.3)).flatten());
    assert!(err < 1e-6, "{err}");
    let jac = jacobian_path_term::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    assert!(jac.flatten().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn constant_model_has_zero_full_gradient() {
    // The loss no longer depends on the input, so the Jacobian path cancels
    // the surrogate exactly.
    let sched = Schedule::default();
    let net = live_net(4);
    let x = images(2, 5);
    let draw = shared_t_draw(2, 0.3, 7);
    let model = Fixed(Rng::new(8, 8).gaussian(&[2, 1, 8, 8]));
    let full = full_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    assert!(full.flatten().iter().all(|&v| v == 0.0));
    let sur = sur_adv_sds_loss::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let jac = jacobian_path_term::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    assert!(sur
        .axpy(1.0, &jac)
        .flatten()
        .iter()
        .all(|&v| v.abs() < 1e-7));
}

#[test]
fn full_gradient_decomposes_into_surrogate_plus_jacobian_path() {
    let sched = Schedule::default();
    let model = tiny();
    let net = live_net(6);
    let x = images(3, 6);
    let mut rng = Rng::new(9, 0);
    let draw = NoiseDraw::sample(&mut rng, x.images().shape(), &sched);
    let full = full_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let sur = sur_adv_sds_loss::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let jac = jacobian_path_term::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let err = relative_error(&sur.axpy(1.0, &jac).flatten(), &full.flatten());
    assert!(err < 1e-4, "{err}");
    assert!(relative_error(&sur.flatten(), &full.flatten()) > 1e-3);
}

#[test]
fn full_gradient_matches_finite_differences() {
    let sched = Schedule::default();
    let model = tiny();
    let net = live_net(8);
    let x = images(2, 8);
    let draw = shared_t_draw(2, 0.35, 2);
    let full = full_grad_reference::<f64, _>(&net, &model, x.images(), &draw, &sched).unwrap();
    let objective = |n: &DefenderNet| -> f64 {
        let g = Graph::<f64>::default();
        let p = n.bind(&g, false);
        let xv = g.lift(x.images());
        let d = n.forward(&g, &p, xv);
        let xd = g.add(xv, d);
        g.value(neg_diffusion_loss(&g, &model, xd, &draw, &sched))
            .item()
    };
    let h = 1e-3;
    let mut rng = Rng::new(3, 3);
    for name in ["final.w", "blk0.fc1.w", "patch.w", "blk0.ada.b"] {
        let base = net.params.get(name).unwrap().clone();
        for i in rng.choose_indices(base.numel(), 4) {
            let bump = |s: f32| {
                let mut n = net.clone();
                let mut t = base.clone();
                t.data_mut()[i] += s;
                n.params.insert(name, t);
                objective(&n)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
            let an = full.grads[name].data()[i] as f64;
            assert!(
                (an - fd).abs() / (fd.abs() + 1e-3) < 1e-3,
                "{name}[{i}]: {an} vs {fd}"
            );
        }
    }
}

#[test]
fn reg_loss_cases() {
    let net = DefenderNet::init(arch(), 0.1, 0).unwrap();
    let x = images(2, 1);
    let same = reg_loss(&net, &x, &Tensor::zeros(&[2, 1, 8, 8]), RegNorm::L1).unwrap();
    assert_eq!(same.value, 0.0);
    let full = Tensor::full(&[2, 1, 8, 8], 0.1);
    let l1 = reg_loss(&net, &x, &full, RegNorm::L1).unwrap();
    assert!((l1.value - 0.1 * 64.0).abs() < 1e-4);
    let l2 = reg_loss(&net, &x, &full, RegNorm::L2).unwrap();
    assert!((l2.value - 0.01 * 64.0).abs() < 1e-5);
}

#[test]
fn reg_loss_subgradient_is_zero_at_ties() {
    let net = live_net(2);
    let x = images(1, 3);
    let (p, _) = defend(&net, &x).unwrap();
    let b = reg_loss(&net, &x, &p.delta, RegNorm::L1).unwrap();
    assert_eq!(b.value, 0.0);
    assert!(b.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn pair_lookup_reports_missing_ids() {
    let data = images(4, 1);
    let mut pairs = PairStore::default();
    pairs.pairs.insert(1, Tensor::zeros(&[1, 1, 8, 8]));
    assert!(pair_batch(&data, &pairs, &[1]).is_ok());
    assert!(matches!(
        pair_batch(&data, &pairs, &[2]),
        Err(Error::MissingPair(2))
    ));
}

#[test]
fn ensemble_term_is_mean_of_members() {
    let sched = Schedule::default();
    let net = live_net(1);
    let x = images(3, 2);
    let mut rng = Rng::new(1, 0);
    let draw = NoiseDraw::sample(&mut rng, x.images().shape(), &sched);
    let cfg = RidTrainConfig {
        ablation: Ablation::AdvSdsOnly,
        ..Default::default()
    };
    let a = tiny();
    let b = Denoiser::init(DenoiserArch::Tiny { hidden: 3, emb: 8 }, 8, 2, 9);
    let one = objective(&net, &[a.clone()], x.images(), &draw, None, &cfg, &sched).unwrap();
    let copies = objective(
        &net,
        &[a.clone(), a.clone(), a.clone()],
        x.images(),
        &draw,
        None,
        &cfg,
        &sched,
    )
    .unwrap();
    assert!(((copies.log.sur - one.log.sur) / one.log.sur).abs() < 1e-6);
    let mixed = objective(
        &net,
        &[a.clone(), b.clone()],
        x.images(),
        &draw,
        None,
        &cfg,
        &sched,
    )
    .unwrap();
    let mean = mixed.log.per_model.iter().sum::<f32>() / 2.0;
    assert!(((mixed.log.sur - mean) / mean).abs() < 1e-6);
    let solo = sur_adv_sds_loss::<f32, _>(&net, &b, x.images(), &draw, &sched).unwrap();
    assert_eq!(mixed.log.per_model[1], solo.value);
    // A single target is the plain surrogate, bit for bit.
    let plain = sur_adv_sds_loss::<f32, _>(&net, &a, x.images(), &draw, &sched).unwrap();
    assert_eq!(one.bundle, plain);
}

fn train_fixture() -> (ImageBatch, PairStore, Vec<Denoiser>) {
    let data = images(6, 11);
    let mut pairs = PairStore {
        eps_budget: 0.1,
        ..Default::default()
    };
    let mut rng = Rng::new(2, 2);
    for id in [0, 3] {
        let d = rng.gaussian(&[1, 1, 8, 8]).map(|v| 0.05 * v.signum());
        pairs.pairs.insert(id, d);
    }
    (data, pairs, vec![tiny()])
}

#[test]
fn training_is_deterministic_and_leaves_targets_alone() {
    let (data, pairs, targets) = train_fixture();
    let before: Vec<String> = targets.iter().map(Denoiser::fingerprint).collect();
    let cfg = RidTrainConfig {
        steps: 5,
        batch: 2,
        pair_batch: 2,
        eval_every: 2,
        ..Default::default()
    };
    let holdout = images(2, 99);
    let inputs = RidInputs {
        data: &data,
        pairs: &pairs,
        targets: &targets,
        holdout: Some(&holdout),
    };
    let mut a = live_net(0);
    let mut b = live_net(0);
    let la = train_rid(&mut a, &cfg, &inputs).unwrap();
    let lb = train_rid(&mut b, &cfg, &inputs).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.steps.len(), 5);
    assert_eq!(la.heldout.len(), 4);
    assert_ne!(a, live_net(0));
    let after: Vec<String> = targets.iter().map(Denoiser::fingerprint).collect();
    assert_eq!(before, after);
    for s in &la.steps {
        assert!((s.total - (s.sur + 3.0 * s.reg)).abs() <= 1e-4 * s.total.abs().max(1.0));
    }
}

#[test]
fn divergence_keeps_last_parameters() {
    let (data, pairs, targets) = train_fixture();
    let cfg = RidTrainConfig {
        steps: 3,
        batch: 2,
        max_grad_norm: 1e-12,
        ..Default::default()
    };
    let inputs = RidInputs {
        data: &data,
        pairs: &pairs,
        targets: &targets,
        holdout: None,
    };
    let mut net = live_net(1);
    let err = train_rid(&mut net, &cfg, &inputs).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }));
    assert_eq!(net, live_net(1));
}

#[test]
fn ablation_modes_switch_terms() {
    let (data, pairs, targets) = train_fixture();
    let base = RidTrainConfig {
        steps: 2,
        batch: 2,
        pair_batch: 2,
        eval_every: 0,
        ..Default::default()
    };
    let inputs = RidInputs {
        data: &data,
        pairs: &pairs,
        targets: &targets,
        holdout: None,
    };
    let run = |ablation| {
        let mut net = live_net(2);
        train_rid(
            &mut net,
            &RidTrainConfig {
                ablation,
                ..base.clone()
            },
            &inputs,
        )
        .unwrap()
    };
    assert!(run(Ablation::AdvSdsOnly)
        .steps
        .iter()
        .all(|s| s.reg == 0.0 && s.sur > 0.0));
    assert!(run(Ablation::RegOnly)
        .steps
        .iter()
        .all(|s| s.sur == 0.0 && s.reg > 0.0));
    let bad = RidTrainConfig {
        lambda: -1.0,
        ..base.clone()
    };
    assert!(matches!(
        train_rid(&mut live_net(0), &bad, &inputs),
        Err(Error::Config(_))
    ));
    let empty = PairStore::default();
    let no_pairs = RidInputs {
        pairs: &empty,
        ..inputs
    };
    assert!(matches!(
        train_rid(&mut live_net(0), &base, &no_pairs),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rid.ridc");
    let net = live_net(3);
    net.save(&path, &["abc".into(), "def".into()]).unwrap();
    assert_eq!(DefenderNet::load(&path).unwrap(), net);
    let b = Bundle::load(&path).unwrap();
    assert_eq!(b.meta("targets").unwrap(), "abc,def");
}
