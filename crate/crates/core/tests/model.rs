//! Whole-model properties: gradients, masking, shapes, checkpoints, sizes.

mod common;

use femba::data::Scheme;
use femba::graph::Graph;
use femba::model::{
    extract_patches, load_checkpoint, sample_mask, save_checkpoint, Femba, HeadKind, ModelConfig, Parts, Variant,
};
use femba::profile;
use femba::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn end_to_end_gradient_check() {
    let err = common::end_to_end_gradient();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn masked_patch_content_does_not_reach_encoder() {
    let cfg = ModelConfig::custom(1, 8, 4).with_input(8, 128);
    let mut store = ParamStore::<f64>::new();
    let model = Femba::new(&cfg, Parts::PRETRAIN, &mut store, &mut common::rng(0)).unwrap();
    let mut r = common::rng(1);
    let x = common::random_tensor(&mut r, &[8, 128], 1.0);
    let mask = sample_mask(cfg.num_tokens(), 0.6, 7).unwrap();
    // token k = t′·C′ + c′ covers rows c′·p.. and columns t′·q..
    let mut y = x.clone();
    for &k in &mask.indices {
        let (tp, cp) = (k / cfg.grid_c(), k % cfg.grid_c());
        for i in 0..cfg.patch_c {
            for j in 0..cfg.patch_t {
                y.data_mut()[(cp * cfg.patch_c + i) * 128 + tp * cfg.patch_t + j] = r.random_range(-50.0..50.0);
            }
        }
    }
    assert_ne!(x, y);
    let encoder_input = |x: &Tensor<f64>| {
        let mut g = Graph::inference();
        let tok = model.tokenize(&mut g, &store, x).unwrap();
        let tok = model.apply_mask(&mut g, tok, &mask).unwrap();
        g.value(tok).clone()
    };
    let (a, b) = (encoder_input(&x), encoder_input(&y));
    assert_eq!(a, b);
    for &k in &mask.indices {
        assert!(a.row(k).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn checkpoint_reproduces_forward_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (parts, head) in [
        (Parts::PRETRAIN, HeadKind::Linear),
        (Parts::classifier(Scheme::Mmc), HeadKind::MambaEnhanced),
    ] {
        let cfg = ModelConfig {
            head,
            ..ModelConfig::custom(2, 12, 6).with_input(8, 96)
        };
        let mut store = ParamStore::<f32>::new();
        let model = Femba::new(&cfg, parts, &mut store, &mut common::rng(2)).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &store, "test", &path).unwrap();
        let (loaded, lstore, _) = load_checkpoint::<f32>(&path).unwrap();
        let x = Tensor::<f32>::from_f64(vec![8, 96], &(0..768).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let run = |m: &Femba, s: &ParamStore<f32>| {
            let mut g = Graph::inference();
            let out = profile::forward(m, &mut g, s, &x).unwrap();
            out.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(&model, &store), run(&loaded, &lstore));
        assert!(!a.is_empty());
        for (u, v) in a.iter().zip(&b) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(u), bits(v));
        }
    }
}

#[test]
fn mamba_head_adds_parameters() {
    for v in Variant::PRESETS {
        for scheme in [Scheme::Bc, Scheme::Mc] {
            let lin = profile::count_params(&ModelConfig::preset(v), Parts::classifier(scheme));
            let mam = profile::count_params(
                &ModelConfig {
                    head: HeadKind::MambaEnhanced,
                    ..ModelConfig::preset(v)
                },
                Parts::classifier(scheme),
            );
            assert!(mam > lin, "{v:?} {scheme:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn token_count_matches_padded_grid(c in 4usize..=13, t in 32usize..=200) {
        let cfg = ModelConfig::custom(1, 4, 2).with_input(c, t);
        let mut store = ParamStore::<f32>::new();
        let model = Femba::new(&cfg, Parts::ENCODER, &mut store, &mut common::rng(3)).unwrap();
        let x = Tensor::<f32>::ones(vec![c, t]);
        let mut g = Graph::inference();
        let tok = model.tokenize(&mut g, &store, &x).unwrap();
        let enc = model.encode(&mut g, &store, tok).unwrap();
        let n = c.div_ceil(4) * t.div_ceil(32);
        prop_assert_eq!(g.shape(enc), &[n, 4][..]);
        prop_assert_eq!(extract_patches(&x, &cfg).unwrap().dim(0), n);
    }

    #[test]
    fn params_grow_with_depth_and_width(blocks in 1usize..6, d in 4usize..48, n in 1usize..16) {
        let count = |b: usize, d: usize| profile::count_params(&ModelConfig::custom(b, d, n), Parts::PRETRAIN);
        prop_assert!(count(blocks + 1, d) > count(blocks, d));
        prop_assert!(count(blocks, d + 1) > count(blocks, d));
    }
}
