use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use epistasis::genotype::Phenotype;
use epistasis::grouplasso::{fit, lambda_max, objective_trace, Group, GroupKind, GroupedDesign};
use epistasis::interaction::Method;
use epistasis::screen_clean::{benjamini_hochberg, split};
use epistasis::simulation::{hw_probabilities, PhenotypeModel};
use epistasis::study::{heat_color, PowerRow, PowerTable};

fn design(n: usize, widths: &[usize], data: &[f64]) -> GroupedDesign {
    let k: usize = widths.iter().sum();
    let x = DMatrix::from_fn(n, k, |i, j| data[(i * k + j) % data.len()] + (i * j) as f64 * 1e-3);
    let mut at = 0;
    let groups = widths
        .iter()
        .enumerate()
        .map(|(g, &w)| {
            at += w;
            Group {
                id: format!("g{g}"),
                kind: GroupKind::Main,
                columns: (at - w..at).collect(),
                weight: (w as f64).sqrt(),
            }
        })
        .collect();
    GroupedDesign::new(x, groups, (0..k).map(|j| format!("c{j}")).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bh_dominates_raw_and_preserves_order(p in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let adj = benjamini_hochberg(&p);
        prop_assert_eq!(adj.len(), p.len());
        for i in 0..p.len() {
            prop_assert!(adj[i] >= p[i] - 1e-15 && adj[i] <= 1.0);
            for j in 0..p.len() {
                if p[i] <= p[j] {
                    prop_assert!(adj[i] <= adj[j] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn split_is_a_balanced_partition(n in 4usize..500, seed: u64) {
        let plan = split(n, seed).unwrap();
        prop_assert_eq!(plan.screen_rows.len(), n / 2);
        let mut all: Vec<usize> = plan.screen_rows.iter().chain(&plan.clean_rows).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.screen_rows.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn hw_probabilities_sum_to_one(p in 0.001f64..=0.5) {
        let h = hw_probabilities(p);
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(h[0] <= h[2]);
    }

    #[test]
    fn colormap_darkens_monotonically(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let lum = |t: f64| {
            let c = heat_color(t);
            (1..7).step_by(2).map(|i| u32::from_str_radix(&c[i..i + 2], 16).unwrap()).sum::<u32>()
        };
        if a <= b {
            prop_assert!(lum(a) >= lum(b));
        }
    }

    #[test]
    fn power_table_csv_round_trips(
        cells in prop::collection::vec((1u8..=5, 0usize..3, 0.01f64..0.99, 0usize..50, 0usize..50, 0usize..5, 0.0f64..1.0, 0.0f64..1.0), 0..12)
    ) {
        let rows = cells
            .into_iter()
            .map(|(setting, m, r2, a, b, failed, pi, pm)| {
                let (detected, iterations) = (a.min(b), a.max(b));
                PowerRow {
                    setting,
                    name: "X".into(),
                    model: if m % 2 == 0 { PhenotypeModel::WangPathway } else { PhenotypeModel::PcaModel },
                    method: Method::ALL[m],
                    r2,
                    power: if iterations == 0 { 0.0 } else { detected as f64 / iterations as f64 },
                    detected,
                    iterations,
                    failed,
                    mean_p_i: pi,
                    mean_p_m: pm,
                    cell_failed: failed * 10 > iterations + failed,
                }
            })
            .collect();
        let t = PowerTable { rows };
        prop_assert_eq!(PowerTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn group_lasso_objective_is_monotone_and_zero_above_lambda_max(
        widths in prop::collection::vec(1usize..4, 1..5),
        data in prop::collection::vec(-3.0f64..3.0, 37..80),
        noise in prop::collection::vec(-1.0f64..1.0, 30),
        ratio in 0.01f64..0.9,
    ) {
        let n = 30;
        let d = design(n, &widths, &data);
        let rows: Vec<usize> = (0..n).collect();
        let Some(d) = d.standardized_rows(&rows).0 else { return Ok(()) };
        let y = DVector::from_fn(n, |i, _| d.design[(i, 0)] + noise[i]);
        let Ok(y) = Phenotype::new(y) else { return Ok(()) };
        let lmax = lambda_max(&d, &y).unwrap();
        let trace = objective_trace(&d, &y, lmax * ratio).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        let zero = fit(&d, &y, lmax * 1.0001).unwrap();
        prop_assert!(zero.coefficients.iter().all(|&b| b == 0.0));
    }
}
