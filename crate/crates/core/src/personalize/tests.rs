use super::*;
use crate::diffusion::{DenoiserArch, Schedule};

fn base() -> Denoiser {
    let mut m = Denoiser::init(
        DenoiserArch::Unet {
            widths: [4, 6, 6],
            emb: 8,
        },
        8,
        3,
        5,
    );
    m.params
        .insert("out.w", Rng::new(1, 1).gaussian(&[1, 36]).scale(0.2));
    m
}

fn refs() -> ImageBatch {
    let t = Rng::new(3, 9)
        .gaussian(&[5, 1, 8, 8])
        .map(|v| (0.5 * v).tanh());
    ImageBatch::new(t, vec![9; 5]).unwrap()
}

fn eps_of<M: EpsModel>(m: &M, x: &Tensor, cond: &[usize]) -> Tensor {
    let g = Graph::new();
    let p = m.bind(&g, &|_| false);
    let xv = g.constant(x.clone());
    let out = m.eps(&g, &p, xv, &vec![0.4; x.batch()], cond);
    (*g.value(out)).clone()
}

#[test]
fn fresh_adapters_are_an_exact_no_op() {
    let base = base();
    let adapters = AdapterSet::init(&base, 2, 1.0, 0).unwrap();
    let token = LearnedToken::from_null(&base).unwrap();
    let adapted = AdaptedDenoiser {
        base: &base,
        adapters: &adapters,
        token: &token,
    };
    let x = refs().images().clone();
    let cond = [0, 1, 2, 4, 1];
    // Slot 4 is the token, itself a copy of the null row.
    let want = eps_of(&base, &x, &[0, 1, 2, 0, 1]);
    assert_eq!(eps_of(&adapted, &x, &cond), want);
}

#[test]
fn adapters_cover_multichannel_convs_only() {
    let base = base();
    let a = AdapterSet::init(&base, 2, 1.0, 0).unwrap();
    let layers = a.layers();
    assert!(layers.contains(&"b0.c1.w".to_string()));
    assert!(!layers.contains(&"out.w".to_string()));
    for l in &layers {
        let w = base.params.get(l).unwrap();
        assert_eq!(
            a.params.get(&format!("{l}.a")).unwrap().shape(),
            &[2, w.shape()[1]]
        );
        assert_eq!(
            a.params.get(&format!("{l}.b")).unwrap().shape(),
            &[w.shape()[0], 2]
        );
    }
    assert!(matches!(
        AdapterSet::init(&base, 5, 1.0, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn lora_ti_leaves_base_untouched_and_is_repeatable() {
    let base = base();
    let before = base.fingerprint();
    let cfg = PersonalizeConfig {
        steps: 6,
        rank: 2,
        lr: 1e-2,
        ..Default::default()
    };
    let (a1, t1, l1) = finetune_lora_ti(&base, &refs(), &cfg).unwrap();
    let (a2, t2, l2) = finetune_lora_ti(&base, &refs(), &cfg).unwrap();
    assert_eq!(base.fingerprint(), before);
    assert_eq!((a1.clone(), t1.clone(), l1), (a2, t2, l2));
    // Something actually trained.
    assert!(a1
        .params
        .iter()
        .any(|(n, t)| n.ends_with(".b") && t.abs_max() > 0.0));
    assert_ne!(t1, LearnedToken::from_null(&base).unwrap());
}

#[test]
fn full_finetune_with_zero_steps_matches_base() {
    let base = base();
    let cfg = PersonalizeConfig {
        steps: 0,
        ..PersonalizeConfig::full()
    };
    let (tuned, slot, log) = finetune_full(&base, &refs(), &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(slot, 4);
    for (n, t) in base.params.iter() {
        if n != "cond" {
            assert_eq!(tuned.params.get(n).unwrap(), t);
        }
    }
    let x = refs().images().clone();
    assert_eq!(
        eps_of(&tuned, &x, &[0, 1, 2, 3, 0]),
        eps_of(&base, &x, &[0, 1, 2, 3, 0])
    );
    assert_eq!(eps_of(&tuned, &x, &[4; 5]), eps_of(&base, &x, &[0; 5]));
}

#[test]
fn adapter_gradients_pass_grad_check() {
    use crate::diffusion::loss_graph;
    use crate::numerics::{grad_check, GradCheck};
    let base = base();
    let mut adapters = AdapterSet::init(&base, 2, 1.0, 0).unwrap();
    // Non-zero B so the A-gradient is not trivially zero.
    let names: Vec<String> = adapters.params.iter().map(|(n, _)| n.clone()).collect();
    for n in names.iter().filter(|n| n.ends_with(".b")) {
        let shape = adapters.params.get(n).unwrap().shape().to_vec();
        adapters
            .params
            .insert(n.clone(), Rng::new(2, 2).gaussian(&shape).scale(0.1));
    }
    let token = LearnedToken::from_null(&base).unwrap();
    let model = AdaptedDenoiser {
        base: &base,
        adapters: &adapters,
        token: &token,
    };
    let refs = refs();
    let s = Schedule::default();
    let draw = NoiseDraw::sample(&mut Rng::new(4, 0), refs.images().shape(), &s);
    for name in ["lora.b0.c1.w.a", "lora.u0.c2.w.b", "token"] {
        let value = model.trainables().get(name).unwrap().clone();
        let err = grad_check(
            |g, v| {
                let mut p = model.bind(g, &|_| false);
                // Rebuild the adapted weight from the probed factor.
                if let Some(layer) = name
                    .strip_prefix("lora.")
                    .and_then(|n| n.strip_suffix(".a"))
                {
                    let b = p.var(&format!("lora.{layer}.b"));
                    let w = g.add(g.lift(base.params.get(layer).unwrap()), g.matmul(b, v));
                    p.rebind(layer, w);
                } else if let Some(layer) = name
                    .strip_prefix("lora.")
                    .and_then(|n| n.strip_suffix(".b"))
                {
                    let a = p.var(&format!("lora.{layer}.a"));
                    let w = g.add(g.lift(base.params.get(layer).unwrap()), g.matmul(v, a));
                    p.rebind(layer, w);
                } else {
                    let table = g.concat(g.lift(base.params.get("cond").unwrap()), v, 0);
                    p.rebind("cond", table);
                }
                let x = g.lift(refs.images());
                loss_graph(g, &model, &p, x, &draw, &[4; 5], &s)
            },
            &value,
            &GradCheck::default(),
            &mut Rng::new(5, 0),
        )
        .unwrap();
        assert!(err <= 1e-3, "{name}: {err}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = base();
    let cfg = PersonalizeConfig {
        images_per_id: 0,
        ..Default::default()
    };
    assert!(finetune_lora_ti(&base, &refs(), &cfg).is_err());
}
