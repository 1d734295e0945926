//! Group lasso over gene main-effect groups and gene-pair interaction groups.
//!
//! The objective is
//!
//! ```text
//! (1 / 2n) ‖y − ȳ − X β‖² + λ Σ_g w_g ‖β_g‖₂
//! ```
//!
//! on a column-centered design, with `w_g = √|g|` by default. It is minimized
//! by block coordinate descent. Each block update is exact: the group is set
//! to zero when `‖c_g‖ ≤ λ w_g` (group soft-thresholding), otherwise the
//! block subproblem is solved in the eigenbasis of `X_gᵀX_g / n` with a
//! one-dimensional secular equation. For single-column groups this reduces to
//! scalar soft-thresholding.
//!
//! The solver works entirely on the Gram matrix `XᵀX / n`, so a sweep costs
//! `O(k²)` regardless of `n`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{EpistasisError, Result};
use crate::exec::{map_range, stream_rng, Execution};
use crate::genotype::{standardize_columns, Phenotype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Main,
    Interaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub kind: GroupKind,
    pub columns: Vec<usize>,
    pub weight: f64,
}

/// Penalty weight convention for interaction groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionWeight {
    /// `√(number of constructed columns)`.
    #[default]
    GroupSize,
    /// `√(p_r · p_s)`, the width of the full pairwise-product matrix.
    ProductSize,
}

/// Design `[X | Z]` with its group partition.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDesign {
    pub design: DMatrix<f64>,
    pub groups: Vec<Group>,
    pub column_ids: Vec<String>,
}

/// One block of columns to append to a design.
pub struct GroupSpec {
    pub id: String,
    pub kind: GroupKind,
    pub columns: DMatrix<f64>,
    pub column_ids: Vec<String>,
    /// `None` means `√(column count)`.
    pub weight: Option<f64>,
}

impl GroupedDesign {
    pub fn new(design: DMatrix<f64>, groups: Vec<Group>, column_ids: Vec<String>) -> Result<Self> {
        let k = design.ncols();
        if column_ids.len() != k {
            return Err(EpistasisError::Dimension(format!("{} column ids for {k} columns", column_ids.len())));
        }
        let mut owner = vec![None; k];
        for (gi, g) in groups.iter().enumerate() {
            if g.columns.is_empty() {
                return Err(EpistasisError::Invalid(format!("group {} has no columns", g.id)));
            }
            if !(g.weight > 0.0) {
                return Err(EpistasisError::Invalid(format!("group {} has non-positive weight", g.id)));
            }
            for &c in &g.columns {
                if c >= k || owner[c].is_some() {
                    return Err(EpistasisError::Invalid(format!(
                        "column {c} of group {} is out of range or shared",
                        g.id
                    )));
                }
                owner[c] = Some(gi);
            }
        }
        if owner.iter().any(Option::is_none) {
            return Err(EpistasisError::Invalid("groups do not cover every design column".into()));
        }
        Ok(GroupedDesign {
            design,
            groups,
            column_ids,
        })
    }

    pub fn from_specs(n: usize, specs: Vec<GroupSpec>) -> Result<Self> {
        let k: usize = specs.iter().map(|s| s.columns.ncols()).sum();
        let mut design = DMatrix::zeros(n, k);
        let mut groups = Vec::with_capacity(specs.len());
        let mut column_ids = Vec::with_capacity(k);
        let mut at = 0;
        for s in specs {
            if s.columns.nrows() != n {
                return Err(EpistasisError::Dimension(format!(
                    "group {} has {} rows, expected {n}",
                    s.id,
                    s.columns.nrows()
                )));
            }
            let w = s.columns.ncols();
            design.view_mut((0, at), (n, w)).copy_from(&s.columns);
            column_ids.extend(s.column_ids);
            groups.push(Group {
                weight: s.weight.unwrap_or((w as f64).sqrt()),
                id: s.id,
                kind: s.kind,
                columns: (at..at + w).collect(),
            });
            at += w;
        }
        Self::new(design, groups, column_ids)
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    pub fn group_index(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.id == id)
    }

    /// Keeps the named groups (in design order) and returns the sub-design.
    pub fn restrict_to(&self, ids: &[String]) -> Result<GroupedDesign> {
        let keep: Vec<&Group> = self.groups.iter().filter(|g| ids.contains(&g.id)).collect();
        let cols: Vec<usize> = keep.iter().flat_map(|g| g.columns.iter().copied()).collect();
        let design = self.design.select_columns(&cols);
        let column_ids = cols.iter().map(|&c| self.column_ids[c].clone()).collect();
        let mut at = 0;
        let groups = keep
            .iter()
            .map(|g| {
                let w = g.columns.len();
                let out = Group {
                    id: g.id.clone(),
                    kind: g.kind,
                    columns: (at..at + w).collect(),
                    weight: g.weight,
                };
                at += w;
                out
            })
            .collect();
        GroupedDesign::new(design, groups, column_ids)
    }

    /// Rows subset, re-standardized. Constant columns are dropped; groups
    /// left without columns are removed and their ids returned.
    pub fn standardized_rows(&self, rows: &[usize]) -> (Option<GroupedDesign>, Vec<String>) {
        let sub = self.design.select_rows(rows);
        let std = standardize_columns(&sub);
        let mut new_pos = vec![None; self.k()];
        for (k, &j) in std.retained.iter().enumerate() {
            new_pos[j] = Some(k);
        }
        let mut groups = Vec::new();
        let mut emptied = Vec::new();
        for g in &self.groups {
            let cols: Vec<usize> = g.columns.iter().filter_map(|&c| new_pos[c]).collect();
            if cols.is_empty() {
                emptied.push(g.id.clone());
            } else {
                groups.push(Group {
                    id: g.id.clone(),
                    kind: g.kind,
                    columns: cols,
                    weight: g.weight,
                });
            }
        }
        if groups.is_empty() {
            return (None, emptied);
        }
        let column_ids = std.retained.iter().map(|&j| self.column_ids[j].clone()).collect();
        let d = GroupedDesign::new(std.columns, groups, column_ids).expect("partition preserved");
        (Some(d), emptied)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop when the largest coefficient change over a full sweep is below this.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_error: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoefficients {
    pub id: String,
    pub kind: GroupKind,
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Standardized-scale coefficients, one per design column.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub selected_groups: Vec<String>,
    pub cv_path: Vec<CvPoint>,
    pub groups: Vec<GroupCoefficients>,
    pub sweeps: usize,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Groups count as selected when their coefficient norm exceeds this.
pub const SELECTED_NORM: f64 = 1e-8;

struct Block {
    cols: Vec<usize>,
    weight: f64,
    eig: Option<SymmetricEigen<f64, nalgebra::Dyn>>,
    diag: f64,
}

/// Normal-equation data of a centered least-squares problem, scaled by 1/n.
pub(crate) struct GramProblem {
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    blocks: Vec<Block>,
}

impl GramProblem {
    /// `x` and `y` are centered by the caller.
    fn new(x: &DMatrix<f64>, y: &DVector<f64>, groups: &[Group]) -> Self {
        let n = x.nrows() as f64;
        let gram = x.tr_mul(x) / n;
        let xty = x.tr_mul(y) / n;
        let yty = y.dot(y) / n;
        Self::from_gram(gram, xty, yty, groups)
    }

    fn from_gram(gram: DMatrix<f64>, xty: DVector<f64>, yty: f64, groups: &[Group]) -> Self {
        let blocks = groups
            .iter()
            .map(|g| {
                let sub = gram.select_rows(&g.columns).select_columns(&g.columns);
                let (eig, diag) = if g.columns.len() == 1 {
                    (None, sub[(0, 0)])
                } else {
                    (Some(sub.symmetric_eigen()), 0.0)
                };
                Block {
                    cols: g.columns.clone(),
                    weight: g.weight,
                    eig,
                    diag,
                }
            })
            .collect();
        GramProblem {
            gram,
            xty,
            yty,
            blocks,
        }
    }

    fn k(&self) -> usize {
        self.xty.len()
    }

    /// max_g ‖X_gᵀy‖ / (n w_g)
    fn lambda_max(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.cols.iter().map(|&c| self.xty[c].powi(2)).sum::<f64>().sqrt() / b.weight)
            .fold(0.0, f64::max)
    }

    fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let gb = &self.gram * beta;
        let loss = 0.5 * (self.yty - 2.0 * beta.dot(&self.xty) + beta.dot(&gb));
        loss + lambda * self.penalty(beta)
    }

    fn penalty(&self, beta: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.weight * b.cols.iter().map(|&c| beta[c].powi(2)).sum::<f64>().sqrt())
            .sum()
    }

    fn duality_gap(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let gb = &self.gram * beta;
        let corr = &self.xty - &gb; // Xᵀr / n
        let rr = self.yty - 2.0 * beta.dot(&self.xty) + beta.dot(&gb); // ‖r‖²/n
        let yr = self.yty - beta.dot(&self.xty); // yᵀr / n
        let mut scale: f64 = 1.0;
        for b in &self.blocks {
            let norm = b.cols.iter().map(|&c| corr[c].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                scale = scale.min(lambda * b.weight / norm);
            }
        }
        let primal = 0.5 * rr + lambda * self.penalty(beta);
        // dual point θ = scale · r
        let dual = 0.5 * self.yty - 0.5 * (self.yty - 2.0 * scale * yr + scale * scale * rr);
        primal - dual
    }

    /// Exact minimizer of ½bᵀAb − cᵀb + τ‖b‖ for block `b`.
    fn block_update(block: &Block, c: &DVector<f64>, tau: f64) -> DVector<f64> {
        let cn = c.norm();
        if cn <= tau * (1.0 + 1e-12) {
            return DVector::zeros(c.len());
        }
        let Some(eig) = &block.eig else {
            if block.diag <= 0.0 {
                return DVector::zeros(1);
            }
            return c * ((cn - tau) / (cn * block.diag));
        };
        let d = &eig.eigenvalues;
        let ct = eig.eigenvectors.tr_mul(c);
        let dmax = d.max().max(0.0);
        let floor = 1e-12 * dmax.max(1e-300);
        if tau == 0.0 {
            let b = DVector::from_fn(d.len(), |i, _| if d[i] > floor { ct[i] / d[i] } else { 0.0 });
            return &eig.eigenvectors * b;
        }
        let bnorm = |mu: f64| -> f64 {
            ct.iter()
                .zip(d.iter())
                .map(|(ci, di)| (ci / (di.max(0.0) + mu)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        // f(μ) = μ‖b(μ)‖ − τ is increasing; bracket its root.
        let dmin = d.min().max(0.0);
        let mut lo = tau * dmin / (cn - tau);
        let mut hi = (tau * dmax / (cn - tau)) * (1.0 + 1e-9) + 1e-300;
        let mut mu = 0.5 * (lo + hi);
        for _ in 0..200 {
            let bn = bnorm(mu);
            let f = mu * bn - tau;
            if f.abs() <= 1e-15 * tau {
                break;
            }
            if f > 0.0 {
                hi = mu;
            } else {
                lo = mu;
            }
            // Newton step, falling back to bisection when it leaves the bracket
            let dbn = -ct
                .iter()
                .zip(d.iter())
                .map(|(ci, di)| ci * ci / (di.max(0.0) + mu).powi(3))
                .sum::<f64>()
                / bn;
            let fp = bn + mu * dbn;
            let next = mu - f / fp;
            mu = if fp > 0.0 && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        let b = DVector::from_fn(d.len(), |i, _| ct[i] / (d[i].max(0.0) + mu));
        &eig.eigenvectors * b
    }

    /// Block coordinate descent from `beta`. Returns the number of sweeps.
    fn solve(
        &self,
        lambda: f64,
        beta: &mut DVector<f64>,
        opts: &SolverOptions,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<usize> {
        let mut gb = &self.gram * &*beta;
        let mut sweeps = 0;
        let mut full = true;
        let mut history: Vec<DVector<f64>> = Vec::new();
        loop {
            if sweeps >= opts.max_sweeps {
                return Err(EpistasisError::NoConvergence {
                    sweeps,
                    gap: self.duality_gap(beta, lambda),
                });
            }
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for b in &self.blocks {
                let active = b.cols.iter().any(|&c| beta[c] != 0.0);
                if !full && !active {
                    continue;
                }
                let m = b.cols.len();
                let c = DVector::from_fn(m, |i, _| {
                    let col = b.cols[i];
                    let mut v = self.xty[col] - gb[col];
                    for &cj in &b.cols {
                        v += self.gram[(col, cj)] * beta[cj];
                    }
                    v
                });
                let new = Self::block_update(b, &c, lambda * b.weight);
                for (i, &col) in b.cols.iter().enumerate() {
                    let delta = new[i] - beta[col];
                    if delta != 0.0 {
                        max_change = max_change.max(delta.abs());
                        beta[col] = new[i];
                        gb.axpy(delta, &self.gram.column(col), 1.0);
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective(beta, lambda));
            }
            if max_change < opts.tol {
                if full {
                    return Ok(sweeps);
                }
                full = true;
                history.clear();
            } else {
                full = false;
                history.push(beta.clone());
                if sweeps % NEWTON_EVERY == 0 && self.newton_polish(beta, lambda) {
                    gb = &self.gram * &*beta;
                    history.clear();
                    history.push(beta.clone());
                } else if history.len() > ANDERSON_DEPTH {
                    if let Some(x) = self.extrapolate(&history, lambda) {
                        *beta = x;
                        gb = &self.gram * &*beta;
                    }
                    history.clear();
                    history.push(beta.clone());
                }
            }
        }
    }

    /// Damped Newton iterations on the groups that are currently nonzero,
    /// where the objective is smooth. Needed when groups span nearly the
    /// same subspace and coordinate steps crawl. Returns whether `beta` moved.
    fn newton_polish(&self, beta: &mut DVector<f64>, lambda: f64) -> bool {
        let active: Vec<&Block> = self
            .blocks
            .iter()
            .filter(|b| b.cols.iter().any(|&c| beta[c] != 0.0))
            .collect();
        let cols: Vec<usize> = active.iter().flat_map(|b| b.cols.iter().copied()).collect();
        if cols.is_empty() {
            return false;
        }
        let mut spans = Vec::with_capacity(active.len());
        let mut at = 0;
        for b in &active {
            spans.push((at..at + b.cols.len(), b.weight));
            at += b.cols.len();
        }
        let g = self.gram.select_rows(&cols).select_columns(&cols);
        let c = DVector::from_iterator(cols.len(), cols.iter().map(|&j| self.xty[j]));
        let f = |x: &DVector<f64>| -> f64 {
            0.5 * x.dot(&(&g * x)) - c.dot(x)
                + lambda * spans.iter().map(|(r, w)| w * x.rows(r.start, r.len()).norm()).sum::<f64>()
        };
        let mut x = DVector::from_iterator(cols.len(), cols.iter().map(|&j| beta[j]));
        let f0 = f(&x);
        let mut fx = f0;
        let scale = g.trace() / cols.len() as f64;
        for _ in 0..30 {
            let mut grad = &g * &x - &c;
            let mut h = g.clone();
            for (r, w) in &spans {
                let xg = x.rows(r.start, r.len()).into_owned();
                let norm = xg.norm();
                let s = lambda * w / norm;
                grad.rows_mut(r.start, r.len()).axpy(s, &xg, 1.0);
                let unit = xg / norm;
                let mut blk = h.view_mut((r.start, r.start), (r.len(), r.len()));
                blk += (DMatrix::identity(r.len(), r.len()) - &unit * unit.transpose()) * s;
            }
            if grad.amax() <= 1e-15 * scale.max(1.0) {
                break;
            }
            let mut damping = 1e-12 * scale.max(1e-300);
            let step = loop {
                let mut hd = h.clone();
                for i in 0..hd.nrows() {
                    hd[(i, i)] += damping;
                }
                if let Some(ch) = hd.cholesky() {
                    break Some(-ch.solve(&grad));
                }
                damping *= 100.0;
                if damping > scale {
                    break None;
                }
            };
            let Some(step) = step else { break };
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-8 {
                let trial = &x + &step * t;
                let ok = spans.iter().all(|(r, _)| trial.rows(r.start, r.len()).norm() > 0.0);
                if ok {
                    let ft = f(&trial);
                    if ft < fx {
                        x = trial;
                        fx = ft;
                        moved = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if fx < f0 {
            for (k, &j) in cols.iter().enumerate() {
                beta[j] = x[k];
            }
            true
        } else {
            false
        }
    }

    /// Anderson extrapolation over the last sweeps; kept only when it lowers
    /// the objective. Speeds up descent across strongly correlated groups.
    fn extrapolate(&self, history: &[DVector<f64>], lambda: f64) -> Option<DVector<f64>> {
        let m = history.len() - 1;
        let u = DMatrix::from_fn(history[0].len(), m, |i, j| history[j + 1][i] - history[j][i]);
        let mut utu = u.tr_mul(&u);
        let ridge = 1e-10 * utu.trace().max(f64::MIN_POSITIVE);
        for j in 0..m {
            utu[(j, j)] += ridge;
        }
        let z = utu.cholesky()?.solve(&DVector::from_element(m, 1.0));
        let c = &z / z.sum();
        if !c.iter().all(|v| v.is_finite()) {
            return None;
        }
        let x = history[1..].iter().zip(c.iter()).fold(DVector::zeros(history[0].len()), |acc, (h, &w)| acc + h * w);
        let last = history.last().expect("non-empty");
        (self.objective(&x, lambda) < self.objective(last, lambda)).then_some(x)
    }
}

const ANDERSON_DEPTH: usize = 5;
const NEWTON_EVERY: usize = 25;

fn centered(design: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let n = design.nrows() as f64;
    let means = DVector::from_fn(design.ncols(), |j, _| design.column(j).sum() / n);
    let mut x = design.clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let ym = y.mean();
    let yc = y.map(|v| v - ym);
    (x, yc, means, ym)
}

fn assemble(design: &GroupedDesign, beta: DVector<f64>, intercept: f64, lambda: f64, sweeps: usize) -> FitResult {
    let mut selected = Vec::new();
    let groups = design
        .groups
        .iter()
        .map(|g| {
            let values: Vec<f64> = g.columns.iter().map(|&c| beta[c]).collect();
            if values.iter().map(|v| v * v).sum::<f64>().sqrt() > SELECTED_NORM {
                selected.push(g.id.clone());
            }
            GroupCoefficients {
                id: g.id.clone(),
                kind: g.kind,
                columns: g.columns.iter().map(|&c| design.column_ids[c].clone()).collect(),
                values,
            }
        })
        .collect();
    FitResult {
        coefficients: beta.as_slice().to_vec(),
        intercept,
        lambda,
        selected_groups: selected,
        cv_path: Vec::new(),
        groups,
        sweeps,
    }
}

fn check_inputs(design: &GroupedDesign, y: &Phenotype) -> Result<()> {
    if design.n() != y.len() {
        return Err(EpistasisError::Dimension(format!(
            "design has {} rows, phenotype {}",
            design.n(),
            y.len()
        )));
    }
    Ok(())
}

pub fn lambda_max(design: &GroupedDesign, y: &Phenotype) -> Result<f64> {
    check_inputs(design, y)?;
    let (x, yc, _, _) = centered(&design.design, y.values());
    Ok(GramProblem::new(&x, &yc, &design.groups).lambda_max())
}

pub fn fit(design: &GroupedDesign, y: &Phenotype, lambda: f64) -> Result<FitResult> {
    fit_with(design, y, lambda, &SolverOptions::default())
}

pub fn fit_with(design: &GroupedDesign, y: &Phenotype, lambda: f64, opts: &SolverOptions) -> Result<FitResult> {
    check_inputs(design, y)?;
    if !(lambda >= 0.0) {
        return Err(EpistasisError::Invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let (x, yc, means, ym) = centered(&design.design, y.values());
    let prob = GramProblem::new(&x, &yc, &design.groups);
    let mut beta = DVector::zeros(prob.k());
    let sweeps = prob.solve(lambda, &mut beta, opts, None)?;
    let intercept = ym - means.dot(&beta);
    Ok(assemble(design, beta, intercept, lambda, sweeps))
}

/// Objective values after each sweep, for diagnostics.
pub fn objective_trace(design: &GroupedDesign, y: &Phenotype, lambda: f64) -> Result<Vec<f64>> {
    check_inputs(design, y)?;
    let (x, yc, _, _) = centered(&design.design, y.values());
    let prob = GramProblem::new(&x, &yc, &design.groups);
    let mut beta = DVector::zeros(prob.k());
    let mut trace = vec![prob.objective(&beta, lambda)];
    prob.solve(lambda, &mut beta, &SolverOptions::default(), Some(&mut trace))?;
    Ok(trace)
}

/// `(1/2n)‖y − ȳ − X_c β‖² + λ Σ w_g ‖β_g‖` on the centered design.
pub fn objective(design: &GroupedDesign, y: &Phenotype, beta: &[f64], lambda: f64) -> f64 {
    let (x, yc, _, _) = centered(&design.design, y.values());
    let b = DVector::from_column_slice(beta);
    let r = yc - x * &b;
    let pen: f64 = design
        .groups
        .iter()
        .map(|g| g.weight * g.columns.iter().map(|&c| beta[c].powi(2)).sum::<f64>().sqrt())
        .sum();
    r.dot(&r) / (2.0 * design.n() as f64) + lambda * pen
}

/// Largest violation of the optimality conditions of `fit`.
pub fn kkt_violation(design: &GroupedDesign, y: &Phenotype, fit: &FitResult) -> f64 {
    let (x, yc, _, _) = centered(&design.design, y.values());
    let b = DVector::from_column_slice(&fit.coefficients);
    let r = yc - &x * &b;
    let corr = x.tr_mul(&r) / design.n() as f64;
    let mut worst: f64 = 0.0;
    for g in &design.groups {
        let cg = DVector::from_iterator(g.columns.len(), g.columns.iter().map(|&c| corr[c]));
        let bg = DVector::from_iterator(g.columns.len(), g.columns.iter().map(|&c| b[c]));
        let tau = fit.lambda * g.weight;
        let v = if bg.norm() > SELECTED_NORM {
            (cg - bg.normalize() * tau).norm()
        } else {
            (cg.norm() - tau).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// How the cross-validated λ is picked from the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    #[default]
    MinError,
    /// Largest λ whose error is within one standard error of the minimum.
    OneStandardError,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvOptions {
    pub folds: usize,
    pub grid_size: usize,
    /// Smallest grid value as a fraction of λ_max.
    pub min_ratio: f64,
    pub rule: CvRule,
    pub seed: u64,
    pub solver: SolverOptions,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 10,
            grid_size: 100,
            min_ratio: 0.01,
            rule: CvRule::MinError,
            seed: 0,
            solver: SolverOptions::default(),
            exec: Execution::Parallel,
        }
    }
}

pub fn lambda_grid(lambda_max: f64, size: usize, min_ratio: f64) -> Vec<f64> {
    if size == 1 {
        return vec![lambda_max];
    }
    (0..size)
        .map(|i| lambda_max * min_ratio.powf(i as f64 / (size - 1) as f64))
        .collect()
}

/// Deterministic fold label per row.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[0xf01d]));
    let mut label = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        label[row] = pos % folds;
    }
    label
}

/// Held-out squared error along the grid for one fold (NaN where a fit failed).
fn fold_errors(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[Group],
    labels: &[usize],
    fold: usize,
    grid: &[f64],
    solver: &SolverOptions,
) -> Vec<f64> {
    let train: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != fold).collect();
    let test: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == fold).collect();
    let xt = x.select_rows(&train);
    let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
    let (xc, yc, means, ym) = centered(&xt, &yt);
    let prob = GramProblem::new(&xc, &yc, groups);
    let xh = x.select_rows(&test);
    let mut beta = DVector::zeros(prob.k());
    grid.iter()
        .map(|&lam| match prob.solve(lam, &mut beta, solver, None) {
            Ok(_) => {
                let pred = &xh * &beta;
                let off = ym - means.dot(&beta);
                test.iter()
                    .enumerate()
                    .map(|(t, &i)| (y[i] - off - pred[t]).powi(2))
                    .sum::<f64>()
                    / test.len() as f64
            }
            Err(e) => {
                log::warn!("fold {fold}, lambda {lam:.3e}: {e}");
                beta.fill(0.0);
                f64::NAN
            }
        })
        .collect()
}

/// Selects λ by K-fold cross-validation (minimum mean held-out error) and
/// refits on all rows.
pub fn cv_select_lambda(design: &GroupedDesign, y: &Phenotype, opts: &CvOptions) -> Result<FitResult> {
    check_inputs(design, y)?;
    let n = design.n();
    if opts.folds < 2 || n < 2 * opts.folds {
        return Err(EpistasisError::Invalid(format!(
            "cross-validation needs folds >= 2 and n >= 2*folds (folds = {}, n = {n})",
            opts.folds
        )));
    }
    if opts.grid_size == 0 {
        return Err(EpistasisError::Invalid("grid_size must be positive".into()));
    }
    let lmax = lambda_max(design, y)?;
    if lmax == 0.0 {
        // y is constant or orthogonal to every column: the empty model is optimal everywhere
        let mut out = fit_with(design, y, 0.0, &opts.solver)?;
        out.cv_path = vec![CvPoint {
            lambda: 0.0,
            mean_error: f64::NAN,
            se: f64::NAN,
        }];
        return Ok(out);
    }
    let grid = lambda_grid(lmax, opts.grid_size, opts.min_ratio);
    let labels = fold_assignment(n, opts.folds, opts.seed);
    let per_fold = map_range(opts.exec, opts.folds, |f| {
        fold_errors(&design.design, y.values(), &design.groups, &labels, f, &grid, &opts.solver)
    });
    let mut path = Vec::with_capacity(grid.len());
    for (i, &lam) in grid.iter().enumerate() {
        let errs: Vec<f64> = per_fold.iter().map(|e| e[i]).filter(|e| e.is_finite()).collect();
        if errs.is_empty() {
            return Err(EpistasisError::Invalid(format!(
                "every fold failed at lambda = {lam:.4e}"
            )));
        }
        let m = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / m;
        let se = if errs.len() > 1 {
            (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt()
        } else {
            0.0
        };
        path.push(CvPoint {
            lambda: lam,
            mean_error: mean,
            se,
        });
    }
    let best = path
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if p.mean_error < path[b].mean_error { i } else { b });
    let best = match opts.rule {
        CvRule::MinError => best,
        CvRule::OneStandardError => {
            let bound = path[best].mean_error + path[best].se;
            // the grid is decreasing, so the first point under the bound has the largest λ
            path.iter().position(|p| p.mean_error <= bound).unwrap_or(best)
        }
    };
    let mut out = fit_with(design, y, grid[best], &opts.solver)?;
    out.cv_path = path;
    Ok(out)
}

/// Extension point for case-control phenotypes. Not implemented: only
/// quantitative traits are supported.
pub fn fit_logistic(_design: &GroupedDesign, _cases: &[bool], _lambda: f64) -> Result<FitResult> {
    Err(EpistasisError::Invalid(
        "logistic group lasso is not implemented; only quantitative phenotypes are supported".into(),
    ))
}
