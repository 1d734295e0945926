//! Screen-and-clean inference.
//!
//! The rows are split in two halves. The group lasso, tuned by
//! cross-validation, screens groups on the first half. On the second half a
//! ridge regression restricted to the screened groups (penalty `μ w_g²` per
//! group, `μ` by generalized cross-validation) gives, for each group, the drop
//! in residual sum of squares when the group joins the others. Its null
//! distribution comes from permuting the rows of that group's columns.
//! Benjamini–Hochberg controls the FDR across the tested groups.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{EpistasisError, Result};
use crate::exec::{derive_seed, map_range, stream_rng, Execution};
use crate::genotype::{standardize_columns, GeneIndex, GenotypeMatrix, Phenotype};
use crate::grouplasso::{cv_select_lambda, CvOptions, GroupKind, GroupSpec, GroupedDesign, InteractionWeight};
use crate::interaction::{build_interaction_design, pair_label, InteractionOptions, Method, PairBlock, ProductScale};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub screen_rows: Vec<usize>,
    pub clean_rows: Vec<usize>,
    pub seed: u64,
}

/// Uniformly random balanced split; the screen half gets `⌊n/2⌋` rows.
pub fn split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < 4 {
        return Err(EpistasisError::Invalid(format!("need at least 4 subjects to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[0x5b17]));
    let mut screen_rows = order[..n / 2].to_vec();
    let mut clean_rows = order[n / 2..].to_vec();
    screen_rows.sort_unstable();
    clean_rows.sort_unstable();
    Ok(SplitPlan {
        screen_rows,
        clean_rows,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub selected: Vec<String>,
    pub lambda: Option<f64>,
}

/// Cross-validated group lasso on the screen rows (re-standardized).
pub fn screen(design: &GroupedDesign, y: &Phenotype, plan: &SplitPlan, cv: &CvOptions) -> Result<Screening> {
    check_plan(design.n(), plan)?;
    let (sub, emptied) = design.standardized_rows(&plan.screen_rows);
    for id in &emptied {
        log::warn!("group {id} is constant on the screen half and cannot be selected");
    }
    let Some(sub) = sub else {
        return Ok(Screening {
            selected: Vec::new(),
            lambda: None,
        });
    };
    let fit = cv_select_lambda(&sub, &y.select_rows(&plan.screen_rows), cv)?;
    Ok(Screening {
        selected: fit.selected_groups,
        lambda: Some(fit.lambda),
    })
}

fn check_plan(n: usize, plan: &SplitPlan) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in plan.screen_rows.iter().chain(&plan.clean_rows) {
        if i >= n || seen[i] {
            return Err(EpistasisError::Invalid(format!(
                "split plan does not partition {n} rows (row {i})"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(EpistasisError::Invalid(format!("split plan does not cover all {n} rows")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanOptions {
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for CleanOptions {
    fn default() -> Self {
        CleanOptions {
            permutations: 999,
            alpha: 0.05,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub group_id: String,
    pub kind: GroupKind,
    /// `None` for groups that were not tested.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub fdr_adjusted_p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Option<Method>,
    pub q: Option<usize>,
    pub lambda: Option<f64>,
    pub ridge_mu: Option<f64>,
    pub seed: u64,
    pub degenerate_pairs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub entries: Vec<ReportEntry>,
    pub alpha: f64,
    pub permutations: usize,
    pub plan: SplitPlan,
    pub provenance: Provenance,
}

impl InferenceReport {
    pub fn entry(&self, id: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.group_id == id)
    }

    pub fn is_significant(&self, id: &str) -> bool {
        self.entry(id).is_some_and(|e| e.significant)
    }

    pub fn significant_ids(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.significant).map(|e| e.group_id.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per group.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group_id\tkind\tstatistic\tp_value\tfdr_adjusted_p\tsignificant\n");
        for e in &self.entries {
            let kind = match e.kind {
                GroupKind::Main => "main",
                GroupKind::Interaction => "interaction",
            };
            let stat = e.statistic.map_or_else(|| "NA".to_string(), |s| format!("{s:?}"));
            let _ = writeln!(
                out,
                "{}\t{kind}\t{stat}\t{:?}\t{:?}\t{}",
                e.group_id, e.p_value, e.fdr_adjusted_p, e.significant
            );
        }
        out
    }
}

/// Benjamini–Hochberg adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adj[i] = running.min(1.0);
    }
    adj
}

/// Ridge regression on centered `y` with block penalty `μ D`, solved on the
/// Gram matrix.
struct Ridge {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yy: f64,
    penalty: DVector<f64>,
    n: usize,
}

impl Ridge {
    fn rss(&self, gram: &DMatrix<f64>, xty: &DVector<f64>, mu: f64, cols: Option<&[usize]>) -> Option<f64> {
        let (g, b, d) = match cols {
            Some(c) => (
                gram.select_rows(c).select_columns(c),
                DVector::from_iterator(c.len(), c.iter().map(|&j| xty[j])),
                DVector::from_iterator(c.len(), c.iter().map(|&j| self.penalty[j])),
            ),
            None => (gram.clone(), xty.clone(), self.penalty.clone()),
        };
        if g.nrows() == 0 {
            return Some(self.yy);
        }
        let mut a = g.clone();
        for j in 0..a.nrows() {
            a[(j, j)] += mu * d[j];
        }
        let beta = Cholesky::new(a)?.solve(&b);
        // ‖y − Xβ‖² = yᵀy − 2βᵀXᵀy + βᵀXᵀXβ
        Some((self.yy - 2.0 * beta.dot(&b) + beta.dot(&(&g * &beta))).max(0.0))
    }

    /// GCV score `n RSS / (n − 1 − df)²`; the extra 1 is the intercept.
    fn gcv(&self, mu: f64) -> Option<f64> {
        let mut a = self.gram.clone();
        for j in 0..a.nrows() {
            a[(j, j)] += mu * self.penalty[j];
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(a)?;
        let beta = chol.solve(&self.xty);
        let rss = (self.yy - 2.0 * beta.dot(&self.xty) + beta.dot(&(&self.gram * &beta))).max(0.0);
        let df = chol.solve(&self.gram).trace();
        let resid_df = self.n as f64 - 1.0 - df;
        (resid_df > 0.0).then(|| self.n as f64 * rss / (resid_df * resid_df))
    }

    fn choose_mu(&self) -> f64 {
        let n = self.n as f64;
        (0..=40)
            .map(|i| n * 10f64.powf(-4.0 + 6.0 * i as f64 / 40.0))
            .filter_map(|mu| self.gcv(mu).map(|s| (mu, s)))
            .fold((n, f64::INFINITY), |best, (mu, s)| if s < best.1 { (mu, s) } else { best })
            .0
    }
}

/// Permutation test of every selected group on the clean rows.
pub fn clean(
    design: &GroupedDesign,
    y: &Phenotype,
    plan: &SplitPlan,
    selected: &[String],
    opts: &CleanOptions,
) -> Result<(InferenceReport, Option<f64>)> {
    check_plan(design.n(), plan)?;
    if opts.permutations < 99 {
        return Err(EpistasisError::Invalid(format!(
            "at least 99 permutations are required, got {}",
            opts.permutations
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(EpistasisError::Invalid(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    let wanted: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    if let Some(bad) = wanted.iter().find(|id| design.group_index(id).is_none()) {
        return Err(EpistasisError::Invalid(format!("selected group {bad} is not in the design")));
    }
    let ids: Vec<String> = design
        .groups
        .iter()
        .filter(|g| wanted.contains(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();

    let mut tested: Vec<(String, f64, f64)> = Vec::new();
    let mut mu_used = None;
    if !ids.is_empty() {
        let (sub, emptied) = design.restrict_to(&ids)?.standardized_rows(&plan.clean_rows);
        for id in &emptied {
            log::warn!("group {id} is constant on the clean half; reported with p = 1");
        }
        if let Some(sub) = sub {
            let yc = y.select_rows(&plan.clean_rows);
            let ym = yc.values().mean();
            let yv = yc.values().map(|v| v - ym);
            let x = &sub.design;
            let mut penalty = DVector::zeros(sub.k());
            for g in &sub.groups {
                for &c in &g.columns {
                    penalty[c] = g.weight * g.weight;
                }
            }
            let ridge = Ridge {
                gram: x.transpose() * x,
                xty: x.transpose() * &yv,
                yy: yv.dot(&yv),
                penalty,
                n: x.nrows(),
            };
            let mu = ridge.choose_mu();
            mu_used = Some(mu);
            let full = ridge
                .rss(&ridge.gram, &ridge.xty, mu, None)
                .ok_or_else(|| EpistasisError::Invalid("ridge system is not positive definite".into()))?;
            let b = opts.permutations;
            let ng = sub.groups.len();
            // one job per (group, permutation); index b == permutations is the observed statistic
            let stats = map_range(opts.exec, ng, |gi| {
                let g = &sub.groups[gi];
                let others: Vec<usize> = (0..sub.k()).filter(|c| !g.columns.contains(c)).collect();
                let reduced = ridge.rss(&ridge.gram, &ridge.xty, mu, Some(&others)).unwrap_or(ridge.yy);
                let t_obs = reduced - full;
                let xg = x.select_columns(&g.columns);
                let xo = x.select_columns(&others);
                let exceed = (0..b)
                    .filter(|&r| {
                        let mut rng = stream_rng(opts.seed, &[gi as u64, r as u64]);
                        let mut perm: Vec<usize> = (0..x.nrows()).collect();
                        perm.shuffle(&mut rng);
                        let xp = xg.select_rows(&perm);
                        let mut gram = ridge.gram.clone();
                        let cross = xo.transpose() * &xp;
                        for (a, &oc) in others.iter().enumerate() {
                            for (k, &gc) in g.columns.iter().enumerate() {
                                gram[(oc, gc)] = cross[(a, k)];
                                gram[(gc, oc)] = cross[(a, k)];
                            }
                        }
                        let mut xty = ridge.xty.clone();
                        let gy = xp.transpose() * &yv;
                        for (k, &gc) in g.columns.iter().enumerate() {
                            xty[gc] = gy[k];
                        }
                        let t = ridge.rss(&gram, &xty, mu, None).map_or(0.0, |f| reduced - f);
                        t >= t_obs
                    })
                    .count();
                (g.id.clone(), t_obs, (1 + exceed) as f64 / (b + 1) as f64)
            });
            tested = stats;
        }
    }

    let adj = benjamini_hochberg(&tested.iter().map(|t| t.2).collect::<Vec<_>>());
    let entries = design
        .groups
        .iter()
        .map(|g| match tested.iter().position(|t| t.0 == g.id) {
            Some(i) => ReportEntry {
                group_id: g.id.clone(),
                kind: g.kind,
                statistic: Some(tested[i].1),
                p_value: tested[i].2,
                fdr_adjusted_p: adj[i],
                significant: adj[i] <= opts.alpha,
            },
            None => ReportEntry {
                group_id: g.id.clone(),
                kind: g.kind,
                statistic: None,
                p_value: 1.0,
                fdr_adjusted_p: 1.0,
                significant: false,
            },
        })
        .collect();
    let report = InferenceReport {
        entries,
        alpha: opts.alpha,
        permutations: opts.permutations,
        plan: plan.clone(),
        provenance: Provenance {
            method: None,
            q: None,
            lambda: None,
            ridge_mu: mu_used,
            seed: opts.seed,
            degenerate_pairs: Vec::new(),
        },
    };
    Ok((report, mu_used))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub method: Method,
    /// Components per gene for PCA and PLS.
    pub q: usize,
    pub ggee_scale: ProductScale,
    pub interaction_weight: InteractionWeight,
    pub cv: CvOptions,
    pub permutations: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Estimate supervised interaction weights (G-GEE, PLS) on the screen
    /// half only, so the clean half stays independent of them.
    pub fit_on_screen_half: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            method: Method::Ggee,
            q: 1,
            ggee_scale: ProductScale::Raw,
            interaction_weight: InteractionWeight::GroupSize,
            cv: CvOptions::default(),
            permutations: 999,
            alpha: 0.05,
            seed: 0,
            fit_on_screen_half: true,
            exec: Execution::Parallel,
        }
    }
}

impl DetectConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        DetectConfig {
            method,
            seed,
            ..Default::default()
        }
    }
}

/// Gene main-effect groups followed by gene-pair interaction groups.
/// Supervised interaction weights are estimated on `fit_rows` only.
pub fn build_design(
    g: &GenotypeMatrix,
    idx: &GeneIndex,
    y: &Phenotype,
    cfg: &DetectConfig,
    fit_rows: Option<Vec<usize>>,
) -> Result<(GroupedDesign, Vec<String>)> {
    let n = g.n();
    let mut specs = Vec::new();
    for gene in idx.genes() {
        let s = standardize_columns(&g.submatrix(gene.columns.clone()));
        if s.retained.is_empty() {
            log::warn!("gene {} has no polymorphic SNP and is left out", gene.id);
            continue;
        }
        let column_ids = s
            .retained
            .iter()
            .map(|&k| g.snp_ids()[gene.columns.start + k].clone())
            .collect();
        specs.push(GroupSpec {
            id: gene.id.clone(),
            kind: GroupKind::Main,
            columns: s.columns,
            column_ids,
            weight: None,
        });
    }
    let mut opts = InteractionOptions::new(cfg.method);
    opts.q = cfg.q;
    opts.ggee_scale = cfg.ggee_scale;
    opts.fit_rows = fit_rows;
    opts.exec = cfg.exec;
    let mut degenerate = Vec::new();
    for block in build_interaction_design(g, idx, y, &opts)? {
        match block {
            PairBlock::Built(b) => {
                let label = b.pair_label();
                let width = b.width();
                let weight = match cfg.interaction_weight {
                    InteractionWeight::GroupSize => None,
                    InteractionWeight::ProductSize => {
                        let size = |id: &str| idx.gene(idx.position(id).expect("known gene")).size();
                        Some(((size(&b.pair.0) * size(&b.pair.1)) as f64).sqrt())
                    }
                };
                specs.push(GroupSpec {
                    column_ids: (1..=width).map(|k| format!("{label}#{k}")).collect(),
                    id: label,
                    kind: GroupKind::Interaction,
                    columns: b.z,
                    weight,
                });
            }
            PairBlock::Degenerate { pair, reason } => {
                log::warn!("pair {}: {reason}", pair_label(&pair.0, &pair.1));
                degenerate.push(pair_label(&pair.0, &pair.1));
            }
        }
    }
    Ok((GroupedDesign::from_specs(n, specs)?, degenerate))
}

/// Full pipeline: build the design, split, screen, clean.
pub fn detect(g: &GenotypeMatrix, idx: &GeneIndex, y: &Phenotype, cfg: &DetectConfig) -> Result<InferenceReport> {
    y.require_variance()?;
    let plan = split(g.n(), derive_seed(cfg.seed, &[1]))?;
    let supervised = cfg.fit_on_screen_half && matches!(cfg.method, Method::Ggee | Method::Pls);
    let fit_rows = supervised.then(|| plan.screen_rows.clone());
    let (design, degenerate) = build_design(g, idx, y, cfg, fit_rows)?;
    let mut cv = cfg.cv;
    cv.seed = derive_seed(cfg.seed, &[2]);
    cv.exec = cfg.exec;
    let screening = screen(&design, y, &plan, &cv)?;
    let clean_opts = CleanOptions {
        permutations: cfg.permutations,
        alpha: cfg.alpha,
        seed: derive_seed(cfg.seed, &[3]),
        exec: cfg.exec,
    };
    let (mut report, _) = clean(&design, y, &plan, &screening.selected, &clean_opts)?;
    for label in &degenerate {
        report.entries.push(ReportEntry {
            group_id: label.clone(),
            kind: GroupKind::Interaction,
            statistic: None,
            p_value: 1.0,
            fdr_adjusted_p: 1.0,
            significant: false,
        });
    }
    report.provenance.method = Some(cfg.method);
    report.provenance.q = matches!(cfg.method, Method::Pca | Method::Pls).then_some(cfg.q);
    report.provenance.lambda = screening.lambda;
    report.provenance.seed = cfg.seed;
    report.provenance.degenerate_pairs = degenerate;
    Ok(report)
}
