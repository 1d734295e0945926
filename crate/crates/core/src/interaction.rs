//! Interaction variables for gene pairs.
//!
//! Three constructions are supported:
//!
//! * **G-GEE** (gene-gene eigen-epistasis): the single direction `u` of the
//!   pairwise SNP-product matrix `W` whose projection has the largest squared
//!   covariance with the phenotype. The top eigenvector of `Wᵀy yᵀW` is
//!   `Wᵀy` itself, so `u = Wᵀy / ‖Wᵀy‖` and no eigensolver is needed.
//! * **PCA**: pairwise products of the leading principal-component scores of
//!   each gene.
//! * **PLS**: components of gene `r` maximizing squared covariance with
//!   `T = [y | X^s]`, extracted by NIPALS with deflation of `X^r` only.
//!
//! Supervised weights (G-GEE `u`, PLS rotations) can be estimated on a row
//! subset and then applied to every row; [`InteractionOptions::fit_rows`]
//! controls this.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EpistasisError, Result};
use crate::exec::{map_range, Execution};
use crate::genotype::{standardize_columns, GeneIndex, GenotypeMatrix, Phenotype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ggee,
    Pca,
    Pls,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ggee, Method::Pca, Method::Pls];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ggee => "G-GEE",
            Method::Pca => "PCA",
            Method::Pls => "PLS",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ggee => "ggee",
            Method::Pca => "pca",
            Method::Pls => "pls",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = EpistasisError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ggee" => Ok(Method::Ggee),
            "pca" => Ok(Method::Pca),
            "pls" => Ok(Method::Pls),
            _ => Err(EpistasisError::Invalid(format!("unknown method {s:?}"))),
        }
    }
}

/// Scale of the SNP columns entering the G-GEE product matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProductScale {
    /// Additive codes `{1, 2, 3}` as stored.
    #[default]
    Raw,
    /// Columns centered and scaled to unit sample variance first.
    Standardized,
}

/// `W[i, j·p_s + k] = X^r[i, j] · X^s[i, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProductMatrix {
    pub w: DMatrix<f64>,
    pub p_r: usize,
    pub p_s: usize,
}

impl PairProductMatrix {
    pub fn column(&self, j: usize, k: usize) -> usize {
        debug_assert!(j < self.p_r && k < self.p_s);
        j * self.p_s + k
    }

    /// Inverse of [`column`](Self::column).
    pub fn pair_of(&self, col: usize) -> (usize, usize) {
        (col / self.p_s, col % self.p_s)
    }
}

pub fn pair_product(xr: &DMatrix<f64>, xs: &DMatrix<f64>) -> Result<PairProductMatrix> {
    pair_product_by(xr, xs, |a, b| a * b)
}

/// `pair_product` with the scalar product supplied by the caller.
pub(crate) fn pair_product_by(
    xr: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    mut mul: impl FnMut(f64, f64) -> f64,
) -> Result<PairProductMatrix> {
    if xr.nrows() != xs.nrows() {
        return Err(EpistasisError::Dimension(format!(
            "gene blocks have {} and {} rows",
            xr.nrows(),
            xs.nrows()
        )));
    }
    let (n, p_r, p_s) = (xr.nrows(), xr.ncols(), xs.ncols());
    let mut w = DMatrix::zeros(n, p_r * p_s);
    for j in 0..p_r {
        let a = xr.column(j);
        for k in 0..p_s {
            let b = xs.column(k);
            let mut out = w.column_mut(j * p_s + k);
            for i in 0..n {
                out[i] = mul(a[i], b[i]);
            }
        }
    }
    Ok(PairProductMatrix { w, p_r, p_s })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionBlock {
    #[serde(skip)]
    pub z: DMatrix<f64>,
    pub method: Method,
    pub pair: (String, String),
    /// G-GEE weights over the `p_r·p_s` products.
    pub u: Option<Vec<f64>>,
    /// Component count actually used (PCA/PLS).
    pub q: Option<usize>,
}

impl InteractionBlock {
    pub fn width(&self) -> usize {
        self.z.ncols()
    }

    pub fn pair_label(&self) -> String {
        pair_label(&self.pair.0, &self.pair.1)
    }

    /// Writes `z` as TSV plus a JSON sidecar `<stem>.json`.
    pub fn dump(&self, tsv_path: &Path) -> Result<()> {
        let io = |e| EpistasisError::io(tsv_path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(tsv_path).map_err(io)?);
        let header: Vec<String> = (1..=self.z.ncols()).map(|c| format!("z{c}")).collect();
        writeln!(f, "{}", header.join("\t")).map_err(io)?;
        for row in self.z.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{}", cells.join("\t")).map_err(io)?;
        }
        f.flush().map_err(io)?;
        let side = tsv_path.with_extension("json");
        std::fs::write(&side, serde_json::to_vec_pretty(self)?).map_err(|e| EpistasisError::io(&side, e))
    }
}

pub fn pair_label(r: &str, s: &str) -> String {
    format!("{r}:{s}")
}

fn center(y: &DVector<f64>) -> DVector<f64> {
    let m = y.mean();
    y.map(|v| v - m)
}

/// `u = Wᵀy / ‖Wᵀy‖` with `y` centered; `cov(Wu, y) = ‖Wᵀy‖/(n-1) > 0`.
pub fn ggee_weights(w: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let yc = center(y);
    let wty = w.tr_mul(&yc);
    let norm = wty.norm();
    let scale = w.norm() * yc.norm();
    if !(norm > 1e-12 * scale) || scale == 0.0 {
        return None;
    }
    Some(wty / norm)
}

pub fn ggee_component(w: &PairProductMatrix, y: &Phenotype, pair: (String, String)) -> Result<InteractionBlock> {
    if w.w.nrows() != y.len() {
        return Err(EpistasisError::Dimension(format!(
            "product matrix has {} rows, phenotype {}",
            w.w.nrows(),
            y.len()
        )));
    }
    let u = ggee_weights(&w.w, y.values()).ok_or_else(|| EpistasisError::DegeneratePair {
        pair: pair_label(&pair.0, &pair.1),
    })?;
    let z = &w.w * &u;
    Ok(InteractionBlock {
        z: DMatrix::from_column_slice(z.len(), 1, z.as_slice()),
        method: Method::Ggee,
        pair,
        u: Some(u.as_slice().to_vec()),
        q: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// p_g × q principal axes (zero rows for constant SNPs).
    pub components: DMatrix<f64>,
    /// n × q scores of the standardized gene matrix.
    pub scores: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    /// Total variance of the standardized gene matrix.
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn q(&self) -> usize {
        self.components.ncols()
    }
}

const RANK_TOL: f64 = 1e-10;

/// Leading `q` principal components of the column-standardized gene matrix.
///
/// `q` is clamped to the numerical rank with a warning. Each axis is signed
/// so that its largest-magnitude loading is positive.
pub fn pca_basis(xg: &DMatrix<f64>, q: usize) -> Result<PcaBasis> {
    if xg.nrows() < 2 {
        return Err(EpistasisError::Invalid("PCA needs at least 2 rows".into()));
    }
    let q = q.max(1);
    let std = standardize_columns(xg);
    let n = xg.nrows();
    let p = xg.ncols();
    if std.retained.is_empty() {
        log::warn!("PCA on a gene with only constant SNPs; returning a zero component");
        return Ok(PcaBasis {
            components: DMatrix::zeros(p, 1),
            scores: DMatrix::zeros(n, 1),
            explained_variance: vec![0.0],
            total_variance: 0.0,
        });
    }
    let svd = std.columns.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > RANK_TOL * s_max.max(1.0))
        .count()
        .max(1);
    let q_eff = q.min(rank);
    if q_eff < q {
        log::warn!("requested {q} principal components, gene supports {q_eff} (p_g = {p}, rank = {rank})");
    }
    let mut components = DMatrix::zeros(p, q_eff);
    let mut explained = Vec::with_capacity(q_eff);
    for (c, &i) in order.iter().take(q_eff).enumerate() {
        let axis = v_t.row(i).transpose();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for (k, &orig) in std.retained.iter().enumerate() {
            components[(orig, c)] = sign * axis[k];
        }
        let s = svd.singular_values[i];
        explained.push(s * s / (n - 1) as f64);
    }
    let reduced = components.select_rows(&std.retained);
    let scores = &std.columns * reduced;
    let total_variance = std.retained.len() as f64;
    Ok(PcaBasis {
        components,
        scores,
        explained_variance: explained,
        total_variance,
    })
}

pub fn pca_interaction(cr: &PcaBasis, cs: &PcaBasis, pair: (String, String)) -> Result<InteractionBlock> {
    let w = pair_product(&cr.scores, &cs.scores)?;
    Ok(InteractionBlock {
        z: w.w,
        method: Method::Pca,
        pair,
        u: None,
        q: Some(cr.q().max(cs.q())),
    })
}

/// PLS rotations `R` such that scores `T = X^r R` for any rows of `X^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsWeights {
    pub rotations: DMatrix<f64>,
    /// Squared covariance of each extracted pair `(X^r u, T v)`.
    pub cov2: Vec<f64>,
}

const NIPALS_MAX_ITER: usize = 10_000;

/// Leading singular pair of `m` by alternating power iteration.
fn nipals_pair(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let start = (0..m.ncols())
        .max_by(|&a, &b| m.column(a).norm().total_cmp(&m.column(b).norm()))
        .unwrap_or(0);
    let mut v = DVector::zeros(m.ncols());
    v[start] = 1.0;
    let mut u = m * &v;
    u /= u.norm();
    let mut sigma = 0.0;
    for _ in 0..NIPALS_MAX_ITER {
        let mut v_new = m.tr_mul(&u);
        let s = v_new.norm();
        v_new /= s;
        let mut u_new = m * &v_new;
        u_new /= u_new.norm();
        let delta = (&u_new - &u).norm();
        u = u_new;
        v = v_new;
        let done = (s - sigma).abs() <= 1e-15 * s && delta < 1e-13;
        sigma = s;
        if done {
            break;
        }
    }
    let sigma = (m * &v).dot(&u);
    (u, v, sigma)
}

/// Fits PLS weights of `xr` against `T = [y | xs]`.
///
/// Inputs are expected column-standardized; `y` is standardized here.
/// Component `t_h = X_h u_h` where `u_h` is the leading left singular vector
/// of `X_hᵀT`, and `X_{h+1} = X_h − t_h p_hᵀ`, `p_h = X_hᵀt_h / t_hᵀt_h`.
pub fn pls_weights(xr: &DMatrix<f64>, xs: &DMatrix<f64>, y: &DVector<f64>, q: usize) -> Option<PlsWeights> {
    let n = xr.nrows();
    assert_eq!(xs.nrows(), n, "row mismatch");
    assert_eq!(y.len(), n, "row mismatch");
    let ys = crate::genotype::standardize_vector(y)?;
    let mut t_mat = DMatrix::zeros(n, 1 + xs.ncols());
    t_mat.set_column(0, &ys);
    t_mat.view_mut((0, 1), (n, xs.ncols())).copy_from(xs);

    let q = q.max(1).min(xr.ncols());
    let mut x = xr.clone();
    let mut weights = Vec::new();
    let mut loadings = Vec::new();
    let mut cov2 = Vec::new();
    let scale = xr.norm() * t_mat.norm();
    for h in 0..q {
        let m = x.tr_mul(&t_mat);
        if !(m.norm() > 1e-12 * scale) {
            if h == 0 {
                return None;
            }
            break;
        }
        let (mut u, _v, sigma) = nipals_pair(&m);
        let mut t = &x * &u;
        if t.dot(&ys) < 0.0 {
            u = -u;
            t = -t;
        }
        let tt = t.dot(&t);
        if tt <= 1e-12 * scale {
            break;
        }
        let p = x.tr_mul(&t) / tt;
        x -= &t * p.transpose();
        cov2.push((sigma / (n - 1) as f64).powi(2));
        weights.push(u);
        loadings.push(p);
    }
    let w = DMatrix::from_columns(&weights);
    let p = DMatrix::from_columns(&loadings);
    let ptw = p.tr_mul(&w);
    let rotations = &w * ptw.try_inverse()?;
    Some(PlsWeights { rotations, cov2 })
}

pub fn pls_interaction(
    xr: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    y: &Phenotype,
    q: usize,
    pair: (String, String),
) -> Result<InteractionBlock> {
    if xr.nrows() != xs.nrows() || xr.nrows() != y.len() {
        return Err(EpistasisError::Dimension(format!(
            "PLS inputs have {}, {} and {} rows",
            xr.nrows(),
            xs.nrows(),
            y.len()
        )));
    }
    let fit = pls_weights(xr, xs, y.values(), q).ok_or_else(|| EpistasisError::DegeneratePair {
        pair: pair_label(&pair.0, &pair.1),
    })?;
    let q_used = fit.rotations.ncols();
    Ok(InteractionBlock {
        z: xr * &fit.rotations,
        method: Method::Pls,
        pair,
        u: None,
        q: Some(q_used),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionOptions {
    pub method: Method,
    pub q: usize,
    pub ggee_scale: ProductScale,
    /// Rows used to estimate supervised weights; all rows when `None`.
    #[serde(skip)]
    pub fit_rows: Option<Vec<usize>>,
    #[serde(skip)]
    pub exec: Execution,
}

impl InteractionOptions {
    pub fn new(method: Method) -> Self {
        InteractionOptions {
            method,
            q: 1,
            ggee_scale: ProductScale::Raw,
            fit_rows: None,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairBlock {
    Built(InteractionBlock),
    Degenerate { pair: (String, String), reason: String },
}

impl PairBlock {
    pub fn pair(&self) -> &(String, String) {
        match self {
            PairBlock::Built(b) => &b.pair,
            PairBlock::Degenerate { pair, .. } => pair,
        }
    }

    pub fn block(&self) -> Option<&InteractionBlock> {
        match self {
            PairBlock::Built(b) => Some(b),
            PairBlock::Degenerate { .. } => None,
        }
    }
}

fn rows_of(m: &DMatrix<f64>, rows: Option<&[usize]>) -> DMatrix<f64> {
    match rows {
        Some(r) => m.select_rows(r),
        None => m.clone(),
    }
}

/// Standardizes each column of `z`, dropping constant ones.
fn standardized_block(mut b: InteractionBlock) -> std::result::Result<InteractionBlock, String> {
    let s = standardize_columns(&b.z);
    if s.retained.is_empty() {
        return Err("interaction variable is constant".into());
    }
    if !s.dropped.is_empty() {
        log::warn!("pair {}: dropping {} constant interaction columns", b.pair_label(), s.dropped.len());
    }
    b.z = s.columns;
    Ok(b)
}

/// One block per gene pair `r < s`, in lexicographic order.
pub fn build_interaction_design(
    g: &GenotypeMatrix,
    idx: &GeneIndex,
    y: &Phenotype,
    opts: &InteractionOptions,
) -> Result<Vec<PairBlock>> {
    if g.n() != y.len() {
        return Err(EpistasisError::Dimension(format!(
            "{} subjects but {} phenotype values",
            g.n(),
            y.len()
        )));
    }
    if idx.total_snps() != g.p() {
        return Err(EpistasisError::Dimension(format!(
            "gene index covers {} SNPs, matrix has {}",
            idx.total_snps(),
            g.p()
        )));
    }
    let fit_rows = opts.fit_rows.as_deref();
    let raw = g.to_f64();
    let std = standardize_columns(&raw);
    // Standardized gene blocks; constant SNPs are left out.
    let mut pos_of = vec![None; g.p()];
    for (k, &j) in std.retained.iter().enumerate() {
        pos_of[j] = Some(k);
    }
    let gene_std: Vec<DMatrix<f64>> = idx
        .genes()
        .iter()
        .map(|gene| {
            let cols: Vec<usize> = gene.columns.clone().filter_map(|j| pos_of[j]).collect();
            std.columns.select_columns(&cols)
        })
        .collect();
    let gene_raw: Vec<DMatrix<f64>> = idx.genes().iter().map(|gene| g.submatrix(gene.columns.clone())).collect();
    let y_fit = match fit_rows {
        Some(r) => y.select_rows(r).values().clone(),
        None => y.values().clone(),
    };

    let pca: Vec<Option<PcaBasis>> = if opts.method == Method::Pca {
        map_range(opts.exec, idx.len(), |gi| pca_basis(&gene_raw[gi], opts.q).ok())
    } else {
        vec![None; idx.len()]
    };

    let pairs = idx.pairs();
    let blocks = map_range(opts.exec, pairs.len(), |pi| {
        let (r, s) = pairs[pi];
        let pair = (idx.gene(r).id.clone(), idx.gene(s).id.clone());
        let built: std::result::Result<InteractionBlock, String> = match opts.method {
            Method::Ggee => {
                let (xr, xs) = match opts.ggee_scale {
                    ProductScale::Raw => (&gene_raw[r], &gene_raw[s]),
                    ProductScale::Standardized => (&gene_std[r], &gene_std[s]),
                };
                let w = pair_product(xr, xs).expect("row counts agree");
                let w_fit = rows_of(&w.w, fit_rows);
                match ggee_weights(&w_fit, &y_fit) {
                    Some(u) => {
                        let z = &w.w * &u;
                        Ok(InteractionBlock {
                            z: DMatrix::from_column_slice(z.len(), 1, z.as_slice()),
                            method: Method::Ggee,
                            pair: pair.clone(),
                            u: Some(u.as_slice().to_vec()),
                            q: None,
                        })
                    }
                    None => Err("zero cross-covariance between products and phenotype".into()),
                }
            }
            Method::Pca => match (&pca[r], &pca[s]) {
                (Some(cr), Some(cs)) => pca_interaction(cr, cs, pair.clone()).map_err(|e| e.to_string()),
                _ => Err("PCA failed for one of the genes".into()),
            },
            Method::Pls => {
                let (xr, xs) = (&gene_std[r], &gene_std[s]);
                if xr.ncols() == 0 || xs.ncols() == 0 {
                    Err("gene has only constant SNPs".into())
                } else {
                    let xr_fit = rows_of(xr, fit_rows);
                    let xs_fit = rows_of(xs, fit_rows);
                    match pls_weights(&xr_fit, &xs_fit, &y_fit, opts.q) {
                        Some(fit) => Ok(InteractionBlock {
                            z: xr * &fit.rotations,
                            method: Method::Pls,
                            pair: pair.clone(),
                            u: None,
                            q: Some(fit.rotations.ncols()),
                        }),
                        None => Err("zero cross-covariance between X^r and [y | X^s]".into()),
                    }
                }
            }
        };
        match built.and_then(standardized_block) {
            Ok(b) => PairBlock::Built(b),
            Err(reason) => {
                log::warn!("skipping degenerate pair {}: {reason}", pair_label(&pair.0, &pair.1));
                PairBlock::Degenerate { pair, reason }
            }
        }
    });
    if !blocks.is_empty() && blocks.iter().all(|b| b.block().is_none()) {
        return Err(EpistasisError::AllPairsDegenerate(blocks.len()));
    }
    Ok(blocks)
}
