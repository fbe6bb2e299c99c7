//! Invariants checked over generated inputs.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use rid_core::diffusion::ImageBatch;
use rid_core::error::Error;
use rid_core::harness::checkpoint::{decode, encode};
use rid_core::imagewise::{gaussian_baseline, GaussianSize, Perturbation};
use rid_core::metrics::{fid, ism_from_embeddings, probe_grid, FeatureStats};
use rid_core::numerics::{Rng, Tensor};
use rid_core::postprocess::{jpeg_like, JpegConfig};
use rid_core::rid::{defend, DefenderArch, DefenderNet};

fn arch() -> DefenderArch {
    DefenderArch {
        layers: 1,
        hidden: 8,
        patch: 4,
        heads: 2,
        res: 8,
    }
}

/// Defender with every layer randomised at `gain`, so large gains saturate.
fn random_net(seed: u64, gain: f32, eps: f32) -> DefenderNet {
    let mut net = DefenderNet::init(arch(), eps, seed).unwrap();
    let mut rng = Rng::new(seed, 5);
    let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let shape = net.params.get(&name).unwrap().shape().to_vec();
        net.params.insert(name, rng.gaussian(&shape).scale(gain));
    }
    net
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(
        prop_oneof![-1.0f32..=1.0, Just(-1.0f32), Just(1.0f32), Just(0.0f32)],
        n,
    )
}

fn batch(px: Vec<f32>, res: usize) -> ImageBatch {
    let b = px.len() / (res * res);
    ImageBatch::new(Tensor::new(vec![b, 1, res, res], px).unwrap(), vec![0; b]).unwrap()
}

fn psd(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, dim * dim).prop_map(move |v| {
        let a = DMatrix::from_vec(dim, dim, v);
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    })
}

fn stats(dim: usize) -> impl Strategy<Value = FeatureStats> {
    (prop::collection::vec(-3.0f64..3.0, dim), psd(dim))
        .prop_map(|(mu, s)| FeatureStats::new(DVector::from_vec(mu), s, 50).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn defender_output_strictly_inside_budget(
        seed in 0u64..1000,
        gain in prop_oneof![Just(0.1f32), Just(1.0), Just(30.0)],
        eps in 0.001f32..0.2,
        px in pixels(2 * 64),
    ) {
        let net = random_net(seed, gain, eps);
        let x = batch(px, 8);
        let (p, y) = defend(&net, &x).unwrap();
        prop_assert!(p.delta.abs_max() < eps);
        prop_assert!(y.images().abs_max() <= 1.0);
    }

    #[test]
    fn applying_a_perturbation_stays_in_image_range(px in pixels(64), d in prop::collection::vec(-0.5f32..0.5, 64)) {
        let x = batch(px, 8);
        let p = Perturbation { delta: Tensor::new(vec![1, 1, 8, 8], d).unwrap(), eps_budget: 0.5 };
        prop_assert!(p.within_budget());
        let y = p.apply(&x).unwrap();
        prop_assert!(y.images().abs_max() <= 1.0);
    }

    #[test]
    fn gaussian_baselines_respect_the_budget(seed in 0u64..10_000, eps in 0.001f32..0.2, large in any::<bool>()) {
        let size = if large { GaussianSize::Large } else { GaussianSize::Small };
        let g = gaussian_baseline(&[2, 1, 8, 8], eps, size, &mut Rng::new(seed, 1));
        prop_assert!(g.perturbation.delta.abs_max() <= eps);
    }

    #[test]
    fn fid_is_symmetric_nonnegative_and_zero_on_itself(a in stats(3), b in stats(3)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn aism_is_ism_times_detection_rate(
        g in prop::collection::vec(-1.0f32..1.0, 12),
        r in prop::collection::vec(-1.0f32..1.0, 12),
        gc in prop::collection::vec(0.0f32..1.0, 4),
        rc in prop::collection::vec(0.0f32..1.0, 4),
    ) {
        let s = ism_from_embeddings(
            &Tensor::new(vec![4, 3], g).unwrap(), &gc,
            &Tensor::new(vec![4, 3], r).unwrap(), &rc, 0.5,
        );
        prop_assert!((0.0..=1.0).contains(&s.dr));
        match s.ism {
            Some(i) => {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&i));
                prop_assert_eq!(s.aism, i * s.dr);
            }
            None => prop_assert_eq!(s.aism, 0.0),
        }
    }

    #[test]
    fn jpeg_keeps_range_and_flat_images_flat(px in pixels(256), q in 1u8..=100, c in -1.0f32..=1.0) {
        let y = jpeg_like(&batch(px, 16), &JpegConfig { quality: q }).unwrap();
        prop_assert!(y.images().abs_max() <= 1.0);
        let flat = batch(vec![c; 256], 16);
        let cfg = JpegConfig { quality: q };
        let back = jpeg_like(&flat, &cfg).unwrap();
        // Only the DC coefficient is non-zero; it moves by at most half a step.
        let half_step = (cfg.table()[0] / 2.0 / 8.0 / 127.5) as f32 + 1e-5;
        let first = back.images().data()[0];
        for v in back.images().data() {
            prop_assert!((v - first).abs() <= 1e-5);
            prop_assert!((v - c).abs() <= half_step, "{v} vs {c}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(
        entries in prop::collection::btree_map(
            "[a-z][a-z0-9._]{0,12}",
            prop::collection::vec(any::<f32>(), 1..20),
            0..6,
        )
    ) {
        let map: BTreeMap<String, Tensor> = entries
            .into_iter()
            .map(|(k, v)| { let n = v.len(); (k, Tensor::new(vec![n], v).unwrap()) })
            .collect();
        let bytes = encode(&map);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), map.len());
        for (k, t) in &map {
            let b = &back[k];
            prop_assert_eq!(b.shape(), t.shape());
            prop_assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn any_flipped_byte_is_rejected(values in prop::collection::vec(-10.0f32..10.0, 1..40), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::new(vec![values.len()], values).unwrap());
        let mut bytes = encode(&map);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let err = decode(&bytes, Path::new("mem")).unwrap_err();
        let distinct = match i {
            0..=3 => matches!(err, Error::BadMagic(_)),
            4..=7 => matches!(err, Error::Version { .. }),
            _ => matches!(err, Error::Checksum { .. }),
        };
        prop_assert!(distinct, "byte {i}: {err}");
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes, Path::new("mem"));
        // Same bytes behind a valid header and checksum.
        let mut framed = b"RIDC".to_vec();
        framed.extend_from_slice(&1u32.to_le_bytes());
        framed.extend_from_slice(&bytes);
        let crc = crc32fast::hash(&framed);
        framed.extend_from_slice(&crc.to_le_bytes());
        let _ = decode(&framed, Path::new("mem"));
    }

    #[test]
    fn probe_grid_is_sorted_inside_the_unit_interval(n in 1usize..64) {
        let g = probe_grid(n);
        prop_assert_eq!(g.len(), n);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.iter().all(|&t| t > 0.0 && t < 1.0));
    }
}
