use kvdirect::cache::{memory_report, CheckpointMode, KvCache, StrategyKind};
use kvdirect::model::{byte_tokens, ArchitectureShape, Model, ModelConfig};
use proptest::prelude::*;

fn kvd(budget: usize, checkpoint: CheckpointMode) -> StrategyKind {
    StrategyKind::KvDirect { budget, checkpoint }
}

#[test]
fn kvdirect_matches_full_cache_at_every_budget() {
    let prompt = byte_tokens(b"A bounded cache that forgets nothing at all.");
    for config in [ModelConfig::toy(), ModelConfig::toy_mixed()] {
        let model = Model::from_config(config).unwrap();
        let mut full = KvCache::new(StrategyKind::Full, model.config()).unwrap();
        let reference = model.greedy_decode(&prompt, 24, &mut full).unwrap();
        let t = prompt.len() + 24;
        for budget in [0, 4, 8, 16, 32, t] {
            for mode in [CheckpointMode::Replay, CheckpointMode::PerLayer] {
                let mut cache = KvCache::new(kvd(budget, mode), model.config()).unwrap();
                let got = model.greedy_decode(&prompt, 24, &mut cache).unwrap();
                assert_eq!(got, reference, "budget {budget} {mode:?}");
            }
        }
    }
}

#[test]
fn logits_are_bitwise_equal_step_by_step() {
    let model = Model::from_config(ModelConfig::toy_mixed()).unwrap();
    let tokens = byte_tokens(b"logits compared bit for bit at each position");
    let mut full = KvCache::new(StrategyKind::Full, model.config()).unwrap();
    let mut kv = KvCache::new(kvd(3, CheckpointMode::Replay), model.config()).unwrap();
    for &t in &tokens {
        let a = model.forward(&[t], &mut full, false).unwrap();
        let b = model.forward(&[t], &mut kv, false).unwrap();
        let (a, b): (Vec<u32>, Vec<u32>) = (
            a.logits.data().iter().map(|x| x.to_bits()).collect(),
            b.logits.data().iter().map(|x| x.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
}

#[test]
fn held_bytes_follow_closed_form_every_step() {
    let model = Model::from_config(ModelConfig::toy()).unwrap();
    let cfg = model.config();
    let shape = ArchitectureShape::from(cfg);
    let budget = 6;
    let mut cache = KvCache::new(kvd(budget, CheckpointMode::Replay), cfg).unwrap();
    let tokens = byte_tokens(b"memory grows by one residual per evicted token");
    for (i, &t) in tokens.iter().enumerate() {
        model.forward(&[t], &mut cache, false).unwrap();
        let seen = i + 1;
        let usage = cache.memory_usage(cfg);
        if seen >= budget {
            let expected =
                memory_report(&shape, seen, &kvd(budget, CheckpointMode::Replay)).unwrap();
            assert_eq!(usage.bytes, expected.total_bytes, "after {seen} tokens");
        } else {
            assert_eq!(usage.checkpoint_vectors, 0);
        }
    }
}

#[test]
fn per_layer_mode_stores_one_residual_per_layer() {
    let model = Model::from_config(ModelConfig::toy()).unwrap();
    let cfg = model.config();
    let mut cache = KvCache::new(kvd(4, CheckpointMode::PerLayer), cfg).unwrap();
    let tokens = byte_tokens(b"twenty tokens here..");
    model.forward(&tokens, &mut cache, false).unwrap();
    assert_eq!(cache.checkpoint_count(), (tokens.len() - 4) * cfg.n_layers);
    let report =
        memory_report(&cfg.into(), tokens.len(), &kvd(4, CheckpointMode::PerLayer)).unwrap();
    assert_eq!(cache.memory_usage(cfg).bytes, report.total_bytes);
}

#[test]
fn sessions_are_independent() {
    let model = Model::from_config(ModelConfig::toy()).unwrap();
    let mut a = KvCache::new(kvd(2, CheckpointMode::Replay), model.config()).unwrap();
    let mut b = KvCache::new(kvd(2, CheckpointMode::Replay), model.config()).unwrap();
    let ga = model
        .greedy_decode(&byte_tokens(b"first session"), 10, &mut a)
        .unwrap();
    let _ = model
        .greedy_decode(&byte_tokens(b"an unrelated one"), 10, &mut b)
        .unwrap();
    let mut c = KvCache::new(kvd(2, CheckpointMode::Replay), model.config()).unwrap();
    assert_eq!(
        model
            .greedy_decode(&byte_tokens(b"first session"), 10, &mut c)
            .unwrap(),
        ga
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kvdirect_is_exact_for_random_prompts(
        prompt in proptest::collection::vec(0u32..256, 1..24),
        budget in 0usize..20,
        per_layer in any::<bool>(),
        mixed in any::<bool>(),
    ) {
        let config = if mixed { ModelConfig::toy_mixed() } else { ModelConfig::toy() };
        let model = Model::from_config(config).unwrap();
        let mode = if per_layer { CheckpointMode::PerLayer } else { CheckpointMode::Replay };
        let mut full = KvCache::new(StrategyKind::Full, model.config()).unwrap();
        let mut kv = KvCache::new(kvd(budget, mode), model.config()).unwrap();
        let a = model.greedy_decode(&prompt, 8, &mut full).unwrap();
        let b = model.greedy_decode(&prompt, 8, &mut kv).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn baselines_never_exceed_budget(
        prompt in proptest::collection::vec(0u32..256, 1..40),
        budget in 1usize..12,
        which in 0usize..5,
    ) {
        let kind = match which {
            0 => StrategyKind::WindowOnly { budget },
            1 => StrategyKind::H2O { budget },
            2 => StrategyKind::StreamingLlm { budget: budget + 1, sinks: 1 },
            3 => StrategyKind::SnapKv { budget, obs_window: 4 },
            _ => StrategyKind::Tova { budget },
        };
        let model = Model::from_config(ModelConfig::toy()).unwrap();
        let mut cache = KvCache::new(kind, model.config()).unwrap();
        model.forward(&prompt, &mut cache, false).unwrap();
        for layer in 0..model.config().n_layers {
            let pos = cache.resident_positions(layer);
            prop_assert!(pos.len() <= kind.budget().unwrap());
            prop_assert_eq!(pos.len(), prompt.len().min(kind.budget().unwrap()));
        }
    }
}
