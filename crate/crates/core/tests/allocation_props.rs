use kvbudget::allocation::{
    capped_proportional, mga_plan, mlma_plan, mlp_plan, ratios_to_counts, uniform_plan, LayerBudgetPlan, Strategy,
};
use kvbudget::Error;
use proptest::prelude::*;

fn check_plan(plan: &LayerBudgetPlan, rho: f64, n: usize) -> Result<(), TestCaseError> {
    prop_assert!((plan.mean_ratio() - rho).abs() < 1e-9);
    for &p in &plan.protected {
        prop_assert_eq!(plan.ratios[p], 0.0);
    }
    prop_assert!(plan.ratios.iter().all(|&r| (0.0..=1.0).contains(&r)));
    let counts = ratios_to_counts(plan, n);
    prop_assert_eq!(counts.counts.iter().sum::<usize>(), counts.total);
    prop_assert!(counts.counts.iter().all(|&b| (1..=n).contains(&b)));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn budget_identity_all_strategies(
        layers in 4usize..=64,
        rho in 0.0f64..=0.65,
        n in 1usize..5000,
        metric in proptest::collection::vec(-5.0f64..5.0, 64),
    ) {
        let metric = &metric[..layers];
        let plans = [
            uniform_plan(layers, rho),
            mlp_plan(layers, rho),
            mga_plan(layers, rho, metric, 0.7),
            mlma_plan(layers, rho, metric, 2, 0.7),
            mlma_plan(layers, rho, metric, 4, 0.7),
            mlma_plan(layers, rho, metric, 6, 0.7),
        ];
        for plan in plans {
            match plan {
                Ok(p) => {
                    check_plan(&p, rho, n)?;
                    if p.strategy != Strategy::Uniform {
                        prop_assert_eq!(p.ratios[0], 0.0);
                    }
                    if matches!(p.strategy, Strategy::Mga | Strategy::Mlma { .. }) {
                        prop_assert!(p.ratios.iter().all(|&r| r <= 0.7 + 1e-12));
                    }
                }
                Err(e) => prop_assert!(matches!(e, Error::Infeasible(_) | Error::InvalidArgument(_)), "{e}"),
            }
        }
    }

    #[test]
    fn capped_split_conserves_mass(
        weights in proptest::collection::vec(1e-9f64..10.0, 1..40),
        fill in 0.0f64..=1.0,
        cap in 0.05f64..=1.0,
    ) {
        let total = fill * cap * weights.len() as f64;
        let out = capped_proportional(total, &weights, cap);
        prop_assert!((out.iter().sum::<f64>() - total).abs() < 1e-9);
        prop_assert!(out.iter().all(|&x| x <= cap + 1e-12 && x >= 0.0));
        // Unsaturated entries stay proportional to their weights.
        let free: Vec<usize> = (0..out.len()).filter(|&i| out[i] < cap - 1e-12).collect();
        for w in free.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!((out[a] * weights[b] - out[b] * weights[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn mga_monotone_without_saturation(layers in 3usize..30, metric in proptest::collection::vec(0.0f64..1.0, 30)) {
        let metric = &metric[..layers];
        // Small ρ keeps every layer below the cap.
        let plan = mga_plan(layers, 0.01, metric, 0.7).unwrap();
        for a in 1..layers {
            for b in 1..layers {
                if metric[a] > metric[b] + 1e-9 {
                    prop_assert!(plan.ratios[a] > plan.ratios[b]);
                }
            }
        }
    }
}

#[test]
fn mga_saturated_example_is_exact() {
    let plan = mga_plan(5, 0.56, &[0.0, 4.0, 1.0, 1.0, 1.0], 0.7).unwrap();
    for r in &plan.ratios[1..] {
        assert!((r - 0.7).abs() < 1e-9);
    }
}
