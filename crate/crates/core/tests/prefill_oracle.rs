mod support;

use kvbudget::importance::{importance, select_top_tokens, Scorer};
use kvbudget::prefill::{memory_footprint, run_chunked_prefill_with_counts, AttentionMode, PrefillConfig};
use kvbudget::trace::generate_synthetic_trace;
use proptest::prelude::*;
use support::reference_prefill;

fn scorer_norm(s: Scorer) -> u32 {
    match s {
        Scorer::H2o => 0,
        Scorer::ValueAwareL1 => 1,
        Scorer::ValueAwareL2 => 2,
    }
}

fn scorer() -> impl Strategy<Value = Scorer> {
    prop_oneof![Just(Scorer::H2o), Just(Scorer::ValueAwareL1), Just(Scorer::ValueAwareL2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_reference_simulator(
        l in 1usize..=3,
        h in 1usize..=3,
        n in 1usize..=64,
        chunk in 1usize..=24,
        seed in any::<u64>(),
        fracs in proptest::collection::vec(0.0f64..=1.0, 3),
        scorer in scorer(),
    ) {
        let t = generate_synthetic_trace(l, h, n, 4, 3, seed).unwrap();
        let counts: Vec<usize> = fracs[..l].iter().map(|f| (f * n as f64).round() as usize).collect();
        let config = PrefillConfig { chunk_size: chunk, scorer, attention: AttentionMode::VisibleSet };
        let cache = run_chunked_prefill_with_counts(&t, &counts, &config).unwrap();
        for layer in 0..l {
            let history = reference_prefill(&t, layer, counts[layer], chunk, scorer_norm(scorer));
            prop_assert_eq!(&cache.layers[layer].retained, history.last().unwrap());
            prop_assert_eq!(cache.layers[layer].retained.len(), counts[layer].min(n));
        }
        let header = t.header();
        let expected: usize = cache.layers.iter().map(|c| c.retained.len()).sum::<usize>() * header.num_heads * (header.key_dim + header.value_dim);
        prop_assert_eq!(memory_footprint(&cache, header), expected);
        prop_assert_eq!(cache.kv_entries.iter().sum::<usize>(), expected);
    }

    #[test]
    fn retained_sets_only_shrink_or_admit_new_tokens(
        n in 2usize..=48,
        chunk in 1usize..=12,
        budget_frac in 0.0f64..=1.0,
        seed in any::<u64>(),
        full_replay in any::<bool>(),
    ) {
        let t = generate_synthetic_trace(1, 2, n, 3, 3, seed).unwrap();
        let budget = (budget_frac * n as f64).round() as usize;
        let attention = if full_replay { AttentionMode::FullContextReplay } else { AttentionMode::VisibleSet };
        let config = PrefillConfig { chunk_size: chunk, scorer: Scorer::H2o, attention };
        // The state after chunk c equals the final state on the length-(c·chunk) prefix.
        let mut previous: Vec<usize> = Vec::new();
        let mut boundary = chunk.min(n);
        loop {
            let prefix = t.prefix(boundary).unwrap();
            let state = run_chunked_prefill_with_counts(&prefix, &[budget.min(boundary)], &config).unwrap();
            let now = &state.layers[0].retained;
            let start = boundary - ((boundary - 1) % chunk + 1);
            for &j in now {
                prop_assert!(previous.contains(&j) || j >= start, "token {} re-entered", j);
            }
            previous = now.clone();
            if boundary == n {
                break;
            }
            boundary = (boundary + chunk).min(n);
        }
    }

    #[test]
    fn single_chunk_equals_full_sequence_top_k(
        l in 1usize..=3,
        n in 1usize..=64,
        seed in any::<u64>(),
        budget_frac in 0.0f64..=1.0,
        scorer in scorer(),
    ) {
        let t = generate_synthetic_trace(l, 2, n, 4, 4, seed).unwrap();
        let b = (budget_frac * n as f64).round() as usize;
        let config = PrefillConfig { chunk_size: n + 5, scorer, attention: AttentionMode::VisibleSet };
        let cache = run_chunked_prefill_with_counts(&t, &vec![b; l], &config).unwrap();
        for layer in 0..l {
            let expected = select_top_tokens(&importance(&t, layer, scorer).unwrap(), b).unwrap();
            prop_assert_eq!(&cache.layers[layer].retained, &expected.indices);
        }
    }
}

#[test]
fn two_chunk_hand_case() {
    // N=8, chunk 4, one layer and head, B=4: nothing is evicted after the
    // first chunk, and the final set is the reference top-4.
    let t = generate_synthetic_trace(1, 1, 8, 4, 4, 17).unwrap();
    let config = PrefillConfig {
        chunk_size: 4,
        ..PrefillConfig::default()
    };
    let history = reference_prefill(&t, 0, 4, 4, 0);
    assert_eq!(history[0], vec![0, 1, 2, 3]);
    let cache = run_chunked_prefill_with_counts(&t, &[4], &config).unwrap();
    assert_eq!(cache.layers[0].retained, history[1]);
    let after_first = run_chunked_prefill_with_counts(&t.prefix(4).unwrap(), &[4], &config).unwrap();
    assert_eq!(after_first.layers[0].retained, vec![0, 1, 2, 3]);
}

#[test]
fn replay_mode_differs_from_visible_set() {
    let t = generate_synthetic_trace(1, 2, 40, 4, 4, 3).unwrap();
    let visible = PrefillConfig {
        chunk_size: 8,
        ..PrefillConfig::default()
    };
    let replay = PrefillConfig {
        attention: AttentionMode::FullContextReplay,
        ..visible
    };
    let a = run_chunked_prefill_with_counts(&t, &[10], &visible).unwrap();
    let b = run_chunked_prefill_with_counts(&t, &[10], &replay).unwrap();
    assert_eq!(b.layers[0].retained.len(), 10);
    assert_ne!(a.layers[0].scores, b.layers[0].scores);
}
