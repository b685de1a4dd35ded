//! Profiler estimates against instantiated models.

use femba::data::Scheme;
use femba::model::{Femba, HeadKind, ModelConfig, Parts, Variant};
use femba::profile::{self, attention::attention_flops, AttentionDims};
use femba::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn encoder_memory_grows_linearly_in_length() {
    let cfg = ModelConfig::preset(Variant::Tiny);
    let a = profile::peak_memory(&cfg, Parts::ENCODER, 8, 20, 1600).unwrap();
    let b = profile::peak_memory(&cfg, Parts::ENCODER, 8, 20, 3200).unwrap();
    let r = b as f64 / a as f64;
    assert!(r <= 2.1 && r > 1.5, "ratio {r}");
}

#[test]
fn attention_score_memory_is_quadratic() {
    let dims = AttentionDims::matched(&ModelConfig::preset(Variant::Tiny).ssm_dims(), 1).unwrap();
    let mut t1 = profile::Trace::default();
    profile::attention::trace_attention(&mut t1, &dims, 2048);
    let mut t2 = profile::Trace::default();
    profile::attention::trace_attention(&mut t2, &dims, 4096);
    assert_eq!(t2.largest_value_bytes(), 4 * t1.largest_value_bytes());
}

#[test]
fn encoder_flops_double_with_length() {
    for v in Variant::PRESETS {
        let cfg = ModelConfig::preset(v);
        let a = profile::count_flops(&cfg, Parts::ENCODER, 1, 20, 1600).unwrap() as f64;
        let b = profile::count_flops(&cfg, Parts::ENCODER, 1, 20, 3200).unwrap() as f64;
        assert!((1.95..=2.05).contains(&(b / a)), "{v:?}: {}", b / a);
    }
}

#[test]
fn attention_flops_approach_quadratic() {
    let dims = AttentionDims::matched(&ModelConfig::preset(Variant::Tiny).ssm_dims(), 1).unwrap();
    let r = attention_flops(&dims, 8192) as f64 / attention_flops(&dims, 4096) as f64;
    // Linear terms keep the ratio below 4; it tends to 4 from below.
    let r_small = attention_flops(&dims, 512) as f64 / attention_flops(&dims, 256) as f64;
    assert!(r > 3.6 && r < 4.0, "{r}");
    assert!(r > r_small);
}

#[test]
fn param_counts_are_exact_for_presets() {
    for v in Variant::PRESETS {
        for head in [HeadKind::Linear, HeadKind::MambaEnhanced] {
            let cfg = ModelConfig {
                head,
                ..ModelConfig::preset(v)
            };
            for parts in [Parts::PRETRAIN, Parts::classifier(Scheme::Bc), Parts::classifier(Scheme::Mc)] {
                let mut store = ParamStore::<f32>::new();
                Femba::new(&cfg, parts, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(profile::count_params(&cfg, parts), store.num_elements(), "{v:?} {head:?} {parts:?}");
            }
        }
    }
}

#[test]
fn block_subtotal_is_linear_in_depth() {
    let blocks = |n: usize| {
        let cfg = ModelConfig::custom(n, 35, 80);
        profile::param_breakdown(&cfg, Parts::ENCODER)
            .into_iter()
            .find(|(c, _)| *c == profile::Component::Blocks)
            .unwrap()
            .1
    };
    assert_eq!(blocks(4), 2 * blocks(2));
}
