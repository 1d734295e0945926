//! Synthetic genotypes and phenotypes for power studies.
//!
//! Genotypes: latent Gaussian rows with block-diagonal equicorrelation `rho`
//! within genes, each column discretized to `{1, 2, 3}` with Hardy–Weinberg
//! probabilities `(p², 2p(1−p), (1−p)²)` for its minor allele frequency `p`.
//! Code 1 is the minor homozygote.
//!
//! Phenotypes: `y = Qφ + ε`, where every effect enters as
//! `coefficient × standardized(term)`, and `σ²` is set from a target R².

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{EpistasisError, Result};
use crate::exec::stream_rng;
use crate::genotype::{standardize_vector, GeneIndex, GenotypeMatrix, Phenotype};
use crate::interaction::pca_basis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeSimConfig {
    pub n: usize,
    pub genes: usize,
    pub snps_per_gene: usize,
    pub rho: f64,
    pub maf_range: (f64, f64),
    pub causal_maf: f64,
    /// Global column indices that receive `causal_maf`.
    pub causal_columns: BTreeSet<usize>,
    pub seed: u64,
}

impl GenotypeSimConfig {
    /// Six genes of six SNPs, 600 subjects, `rho = 0.8`, MAF in [0.05, 0.5].
    pub fn simplified(seed: u64) -> Self {
        GenotypeSimConfig {
            n: 600,
            genes: 6,
            snps_per_gene: 6,
            rho: 0.8,
            maf_range: (0.05, 0.5),
            causal_maf: 0.2,
            causal_columns: BTreeSet::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.maf_range;
        let bad = |m: String| Err(EpistasisError::Invalid(m));
        if self.n < 2 || self.genes == 0 || self.snps_per_gene == 0 {
            return bad(format!(
                "need n >= 2 and at least one gene and SNP (n = {}, genes = {}, snps = {})",
                self.n, self.genes, self.snps_per_gene
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad(format!("MAF range must satisfy 0 < low <= high <= 0.5, got ({lo}, {hi})"));
        }
        if !(self.causal_maf > 0.0 && self.causal_maf <= 0.5) {
            return bad(format!("causal MAF must lie in (0, 0.5], got {}", self.causal_maf));
        }
        let p = self.genes * self.snps_per_gene;
        if let Some(c) = self.causal_columns.iter().find(|&&c| c >= p) {
            return bad(format!("causal column {c} is outside the {p} simulated SNPs"));
        }
        Ok(())
    }
}

/// Genotype category probabilities `(p², 2p(1−p), (1−p)²)` for codes 1, 2, 3.
pub fn hw_probabilities(maf: f64) -> [f64; 3] {
    let q = 1.0 - maf;
    [maf * maf, 2.0 * maf * q, q * q]
}

/// Standard-normal cut points: code 1 below the first, code 3 at or above
/// the second.
pub fn hw_thresholds(maf: f64) -> (f64, f64) {
    let z = StatNormal::standard();
    let [p1, p2, _] = hw_probabilities(maf);
    (z.inverse_cdf(p1), z.inverse_cdf(p1 + p2))
}

fn discretize(x: f64, cuts: (f64, f64)) -> u8 {
    if x < cuts.0 {
        1
    } else if x < cuts.1 {
        2
    } else {
        3
    }
}

/// Standard-normal rows with block-diagonal correlation: within block `g`
/// every off-diagonal entry is `rhos[g]`. Uses `√ρ·z₀ + √(1−ρ)·e` per block,
/// which has exactly that covariance.
pub fn latent_rows<R: Rng>(rng: &mut R, n: usize, sizes: &[usize], rhos: &[f64]) -> DMatrix<f64> {
    let p: usize = sizes.iter().sum();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut j = 0;
        for (&size, &rho) in sizes.iter().zip(rhos) {
            let z0: f64 = rng.sample(StandardNormal);
            let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
            for _ in 0..size {
                let e: f64 = rng.sample(StandardNormal);
                x[(i, j)] = a * z0 + b * e;
                j += 1;
            }
        }
    }
    x
}

/// Latent equicorrelated Gaussian genes discretized under Hardy–Weinberg.
pub fn simulate_genotypes(cfg: &GenotypeSimConfig) -> Result<(GenotypeMatrix, GeneIndex)> {
    cfg.validate()?;
    let p = cfg.genes * cfg.snps_per_gene;
    let mut rng = stream_rng(cfg.seed, &[0x6e0]);
    let mafs: Vec<f64> = (0..p)
        .map(|j| {
            let m = if cfg.maf_range.0 == cfg.maf_range.1 {
                cfg.maf_range.0
            } else {
                rng.random_range(cfg.maf_range.0..=cfg.maf_range.1)
            };
            if cfg.causal_columns.contains(&j) {
                cfg.causal_maf
            } else {
                m
            }
        })
        .collect();
    let cuts: Vec<(f64, f64)> = mafs.iter().map(|&m| hw_thresholds(m)).collect();
    let sizes = vec![cfg.snps_per_gene; cfg.genes];
    let latent = latent_rows(&mut rng, cfg.n, &sizes, &vec![cfg.rho; cfg.genes]);
    let codes = DMatrix::from_fn(cfg.n, p, |i, j| discretize(latent[(i, j)], cuts[j]));
    let ids: Vec<String> = (1..=cfg.genes).map(|g| format!("gene{g}")).collect();
    let snp_ids = (0..p)
        .map(|j| format!("gene{}_snp{}", j / cfg.snps_per_gene + 1, j % cfg.snps_per_gene + 1))
        .collect();
    let g = GenotypeMatrix::new(codes, snp_ids)?;
    let idx = GeneIndex::from_sizes(&ids, &vec![cfg.snps_per_gene; cfg.genes])?;
    Ok((g, idx))
}

/// Samples `count` distinct genes uniformly; keeps all their SNPs and subjects.
pub fn resample_real_genotypes(
    g: &GenotypeMatrix,
    idx: &GeneIndex,
    count: usize,
    seed: u64,
) -> Result<(GenotypeMatrix, GeneIndex)> {
    if count == 0 || count > idx.len() {
        return Err(EpistasisError::Invalid(format!(
            "cannot sample {count} genes from {} available",
            idx.len()
        )));
    }
    let mut rng = stream_rng(seed, &[0x5e1]);
    let all: Vec<usize> = (0..idx.len()).collect();
    let chosen: Vec<usize> = all.choose_multiple(&mut rng, count).copied().collect();
    let mut cols = Vec::new();
    let mut ids = Vec::new();
    let mut sizes = Vec::new();
    for &gi in &chosen {
        let gene = idx.gene(gi);
        cols.extend(gene.columns.clone());
        ids.push(gene.id.clone());
        sizes.push(gene.size());
    }
    Ok((g.select_columns(&cols)?, GeneIndex::from_sizes(&ids, &sizes)?))
}

pub const STANDIN_GENES: usize = 30;
pub const STANDIN_SUBJECTS: usize = 763;
pub const STANDIN_MAX_SNPS: usize = 60;
pub const STANDIN_SEED: u64 = 20_180_713;

/// Gene sizes of the stand-in corpus: log-normal around a median of 2,
/// truncated to `[1, 60]`, always containing a 1-SNP gene and a 60-SNP gene.
pub fn standin_gene_sizes(seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, &[0x512e]);
    let ln = Normal::new(2f64.ln(), 1.3).expect("valid");
    let mut sizes: Vec<usize> = (0..STANDIN_GENES)
        .map(|_| (ln.sample(&mut rng).round() as usize).clamp(1, STANDIN_MAX_SNPS))
        .collect();
    sizes[0] = 1;
    sizes[STANDIN_GENES - 1] = STANDIN_MAX_SNPS;
    sizes.shuffle(&mut rng);
    sizes
}

/// Synthetic replacement for a real genotype panel: 30 genes, 763 subjects,
/// varying gene sizes, per-gene LD level in [0.3, 0.9] and MAF in [0.05, 0.5].
pub fn standin_corpus(seed: u64) -> Result<(GenotypeMatrix, GeneIndex)> {
    let sizes = standin_gene_sizes(seed);
    let mut rng = stream_rng(seed, &[0xc0_4905]);
    let p: usize = sizes.iter().sum();
    let rhos: Vec<f64> = sizes.iter().map(|_| rng.random_range(0.3..0.9)).collect();
    let cuts: Vec<(f64, f64)> = (0..p).map(|_| hw_thresholds(rng.random_range(0.05..=0.5))).collect();
    let latent = latent_rows(&mut rng, STANDIN_SUBJECTS, &sizes, &rhos);
    let codes = DMatrix::from_fn(STANDIN_SUBJECTS, p, |i, j| discretize(latent[(i, j)], cuts[j]));
    let ids: Vec<String> = (1..=STANDIN_GENES).map(|g| format!("SG{g:02}")).collect();
    let mut snp_ids = Vec::with_capacity(p);
    for (g, &s) in sizes.iter().enumerate() {
        for k in 0..s {
            snp_ids.push(format!("SG{:02}_rs{}", g + 1, k + 1));
        }
    }
    Ok((GenotypeMatrix::new(codes, snp_ids)?, GeneIndex::from_sizes(&ids, &sizes)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhenotypeModel {
    /// Interactions as the standardized sum of raw causal SNP products.
    WangPathway,
    /// Interactions as the standardized product of first principal components.
    PcaModel,
}

impl PhenotypeModel {
    pub fn label(self) -> &'static str {
        match self {
            PhenotypeModel::WangPathway => "Wang",
            PhenotypeModel::PcaModel => "PCA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffect {
    pub gene: usize,
    /// Causal SNP positions within the gene.
    pub causal: Vec<usize>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEffect {
    pub r: usize,
    pub s: usize,
    pub causal_r: Vec<usize>,
    pub causal_s: Vec<usize>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub main_effects: Vec<MainEffect>,
    pub interactions: Vec<InteractionEffect>,
    pub model: PhenotypeModel,
    pub r2_target: f64,
}

impl EffectConfig {
    pub fn is_null(&self) -> bool {
        self.main_effects.is_empty() && self.interactions.is_empty()
    }

    fn validate(&self, idx: &GeneIndex) -> Result<()> {
        let gene_ok = |g: usize, causal: &[usize], what: &str| -> Result<()> {
            if g >= idx.len() {
                return Err(EpistasisError::Invalid(format!("{what}: gene {g} does not exist")));
            }
            if causal.is_empty() {
                return Err(EpistasisError::Invalid(format!("{what}: empty causal SNP set")));
            }
            if let Some(c) = causal.iter().find(|&&c| c >= idx.gene(g).size()) {
                return Err(EpistasisError::Invalid(format!(
                    "{what}: causal SNP {c} outside gene {} ({} SNPs)",
                    idx.gene(g).id,
                    idx.gene(g).size()
                )));
            }
            Ok(())
        };
        for m in &self.main_effects {
            gene_ok(m.gene, &m.causal, "main effect")?;
        }
        for e in &self.interactions {
            gene_ok(e.r, &e.causal_r, "interaction")?;
            gene_ok(e.s, &e.causal_s, "interaction")?;
        }
        Ok(())
    }
}

/// Standardized effect regressors, one per declared effect.
#[derive(Debug, Clone)]
pub struct TrueRegressors {
    pub mains: Vec<DVector<f64>>,
    pub interactions: Vec<DVector<f64>>,
}

fn standardized(v: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    standardize_vector(&v).ok_or_else(|| EpistasisError::Invalid(format!("{what} term is constant")))
}

pub fn true_regressors(g: &GenotypeMatrix, idx: &GeneIndex, effects: &EffectConfig) -> Result<TrueRegressors> {
    effects.validate(idx)?;
    let n = g.n();
    let col = |gene: usize, k: usize| -> DVector<f64> {
        let j = idx.gene(gene).columns.start + k;
        DVector::from_fn(n, |i, _| f64::from(g.codes()[(i, j)]))
    };
    let mains = effects
        .main_effects
        .iter()
        .map(|m| {
            let sum = m.causal.iter().fold(DVector::zeros(n), |acc, &k| acc + col(m.gene, k));
            standardized(sum, "main effect")
        })
        .collect::<Result<Vec<_>>>()?;
    let interactions = effects
        .interactions
        .iter()
        .map(|e| match effects.model {
            PhenotypeModel::WangPathway => {
                let mut sum = DVector::zeros(n);
                for &j in &e.causal_r {
                    for &k in &e.causal_s {
                        sum += col(e.r, j).component_mul(&col(e.s, k));
                    }
                }
                standardized(sum, "interaction")
            }
            PhenotypeModel::PcaModel => {
                let pr = pca_basis(&g.submatrix(idx.gene(e.r).columns.clone()), 1)?;
                let ps = pca_basis(&g.submatrix(idx.gene(e.s).columns.clone()), 1)?;
                let prod = pr.scores.column(0).component_mul(&ps.scores.column(0));
                standardized(prod, "interaction")
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrueRegressors { mains, interactions })
}

/// Noiseless signal `Qφ` (intercept 0).
pub fn build_signal(g: &GenotypeMatrix, idx: &GeneIndex, effects: &EffectConfig) -> Result<DVector<f64>> {
    let t = true_regressors(g, idx, effects)?;
    let mut q = DVector::zeros(g.n());
    for (m, x) in effects.main_effects.iter().zip(&t.mains) {
        q.axpy(m.beta, x, 1.0);
    }
    for (e, x) in effects.interactions.iter().zip(&t.interactions) {
        q.axpy(e.gamma, x, 1.0);
    }
    Ok(q)
}

/// `σ² = (R² − 1) Σ(Qφ − mean)² / (R² (2 − n))`.
pub fn sigma2_from_r2(q_phi: &DVector<f64>, r2: f64) -> Result<f64> {
    if !(r2 > 0.0 && r2 < 1.0) {
        return Err(EpistasisError::Invalid(format!("R\u{b2} must lie in (0, 1), got {r2}")));
    }
    let n = q_phi.len();
    if n <= 2 {
        return Err(EpistasisError::Invalid(format!("need more than 2 subjects, got {n}")));
    }
    let m = q_phi.mean();
    let ss: f64 = q_phi.iter().map(|v| (v - m) * (v - m)).sum();
    if !(ss > 1e-12 * (1.0 + m * m) * n as f64) {
        return Err(EpistasisError::ConstantSignal);
    }
    Ok((r2 - 1.0) * ss / (r2 * (2.0 - n as f64)))
}

/// `Σ(Qφ − ȳ)² / Σ(y − ȳ)²`.
pub fn empirical_r2(q_phi: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let ybar = y.mean();
    let num: f64 = q_phi.iter().map(|v| (v - ybar).powi(2)).sum();
    let den: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    num / den
}

/// OLS R² of `y` on an intercept plus `xs`.
pub fn ols_r2(y: &DVector<f64>, xs: &[&DVector<f64>]) -> f64 {
    let n = y.len();
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if xs.is_empty() || tss == 0.0 {
        return 0.0;
    }
    let mut a = DMatrix::from_element(n, xs.len() + 1, 1.0);
    for (j, x) in xs.iter().enumerate() {
        a.set_column(j + 1, x);
    }
    let svd = a.clone().svd(true, true);
    let beta = svd.solve(y, 1e-12).expect("SVD solve");
    let r = y - &a * beta;
    1.0 - r.dot(&r) / tss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialR2 {
    pub p_i: f64,
    pub p_m: f64,
    pub r2_total: f64,
    /// Set when no effects were declared; ratios are reported as 0.
    pub no_effects: bool,
}

/// Shares of the total R² reached by the interaction-only and main-only
/// regressor sets: `p_I = R²_I / R²_T`, `p_M = R²_M / R²_T`.
pub fn partial_r2(y: &Phenotype, g: &GenotypeMatrix, idx: &GeneIndex, truth: &EffectConfig) -> Result<PartialR2> {
    if truth.is_null() {
        return Ok(PartialR2 {
            p_i: 0.0,
            p_m: 0.0,
            r2_total: 0.0,
            no_effects: true,
        });
    }
    let t = true_regressors(g, idx, truth)?;
    let mains: Vec<&DVector<f64>> = t.mains.iter().collect();
    let inters: Vec<&DVector<f64>> = t.interactions.iter().collect();
    let all: Vec<&DVector<f64>> = mains.iter().chain(inters.iter()).copied().collect();
    let yv = y.values();
    let r2_t = ols_r2(yv, &all);
    let r2_i = if inters.is_empty() {
        0.0
    } else if mains.is_empty() {
        r2_t
    } else {
        ols_r2(yv, &inters)
    };
    let r2_m = if mains.is_empty() {
        0.0
    } else if inters.is_empty() {
        r2_t
    } else {
        ols_r2(yv, &mains)
    };
    Ok(PartialR2 {
        p_i: r2_i / r2_t,
        p_m: r2_m / r2_t,
        r2_total: r2_t,
        no_effects: false,
    })
}

/// Setting ids 1–5 of the two simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting(pub u8);

impl Setting {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=5).contains(&id) {
            Ok(Setting(id))
        } else {
            Err(EpistasisError::Invalid(format!("setting must be 1..=5, got {id}")))
        }
    }

    /// Zero-based genes with main effects.
    pub fn main_genes(self) -> &'static [usize] {
        match self.0 {
            1 | 2 | 4 => &[0, 1],
            _ => &[],
        }
    }

    /// Zero-based causal interaction pair.
    pub fn interaction(self) -> Option<(usize, usize)> {
        match self.0 {
            1 | 3 => Some((0, 1)),
            2 => Some((2, 3)),
            _ => None,
        }
    }

    /// The pair whose detection rate is reported as power. Without a
    /// simulated interaction this is the pair of the main-effect genes, so
    /// the rate is a false-positive frequency.
    pub fn target_pair(self) -> (usize, usize) {
        self.interaction().unwrap_or((0, 1))
    }

    pub fn has_interaction(self) -> bool {
        self.interaction().is_some()
    }

    pub fn name(self, model: PhenotypeModel) -> &'static str {
        use PhenotypeModel::*;
        match (self.0, model) {
            (1, WangPathway) => "A",
            (1, PcaModel) => "B",
            (2, WangPathway) => "C",
            (2, PcaModel) => "D",
            (3, WangPathway) => "E",
            (3, PcaModel) => "F",
            (4, _) => "OME",
            _ => "NE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Fully simulated genotypes.
    Simplified,
    /// Genes resampled from the stand-in corpus.
    Realistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub study: Study,
    pub setting: Setting,
    pub model: PhenotypeModel,
    pub r2: f64,
    pub coefficient: f64,
}

impl Scenario {
    pub fn new(study: Study, setting: Setting, model: PhenotypeModel, r2: f64) -> Self {
        Scenario {
            study,
            setting,
            model,
            r2,
            coefficient: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub study: Study,
    pub setting: u8,
    pub name: String,
    pub model: PhenotypeModel,
    pub seed: u64,
    pub main_effects: Vec<ManifestMain>,
    pub interactions: Vec<ManifestInteraction>,
    pub sigma2: f64,
    pub r2_target: f64,
    pub r2_empirical: f64,
    pub p_i: f64,
    pub p_m: f64,
    /// Gene ids of the source panel, for resampled genotypes.
    pub source_genes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMain {
    pub gene: String,
    pub causal_snps: Vec<String>,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInteraction {
    pub gene_r: String,
    pub gene_s: String,
    pub causal_snps_r: Vec<String>,
    pub causal_snps_s: Vec<String>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub genotypes: GenotypeMatrix,
    pub index: GeneIndex,
    pub y: Phenotype,
    pub truth: EffectConfig,
    pub sigma2: f64,
    pub q_phi: DVector<f64>,
    pub source_genes: Vec<String>,
    pub seed: u64,
}

impl SimulatedDataset {
    pub fn empirical_r2(&self) -> f64 {
        empirical_r2(&self.q_phi, self.y.values())
    }

    pub fn manifest(&self, scenario: &Scenario) -> Result<TruthManifest> {
        let pr = partial_r2(&self.y, &self.genotypes, &self.index, &self.truth)?;
        let snp = |gene: usize, ks: &[usize]| -> Vec<String> {
            let start = self.index.gene(gene).columns.start;
            ks.iter().map(|&k| self.genotypes.snp_ids()[start + k].clone()).collect()
        };
        Ok(TruthManifest {
            study: scenario.study,
            setting: scenario.setting.0,
            name: scenario.setting.name(scenario.model).to_string(),
            model: scenario.model,
            seed: self.seed,
            main_effects: self
                .truth
                .main_effects
                .iter()
                .map(|m| ManifestMain {
                    gene: self.index.gene(m.gene).id.clone(),
                    causal_snps: snp(m.gene, &m.causal),
                    beta: m.beta,
                })
                .collect(),
            interactions: self
                .truth
                .interactions
                .iter()
                .map(|e| ManifestInteraction {
                    gene_r: self.index.gene(e.r).id.clone(),
                    gene_s: self.index.gene(e.s).id.clone(),
                    causal_snps_r: snp(e.r, &e.causal_r),
                    causal_snps_s: snp(e.s, &e.causal_s),
                    gamma: e.gamma,
                })
                .collect(),
            sigma2: self.sigma2,
            r2_target: self.truth.r2_target,
            r2_empirical: self.empirical_r2(),
            p_i: pr.p_i,
            p_m: pr.p_m,
            source_genes: self.source_genes.clone(),
        })
    }
}

/// Adds `N(0, σ²)` noise calibrated to `r2`. A null signal yields pure
/// standard-normal noise.
pub fn simulate_phenotype<R: Rng>(q_phi: &DVector<f64>, r2: f64, rng: &mut R) -> Result<(Phenotype, f64)> {
    let sigma2 = if q_phi.iter().all(|&v| v == 0.0) {
        1.0
    } else {
        sigma2_from_r2(q_phi, r2)?
    };
    let noise = Normal::new(0.0, sigma2.sqrt()).map_err(|e| EpistasisError::Invalid(e.to_string()))?;
    let y = DVector::from_fn(q_phi.len(), |i, _| q_phi[i] + noise.sample(rng));
    Ok((Phenotype::new(y)?, sigma2))
}

/// Causal SNP positions for a gene: the first two in the simplified study,
/// a random pair (or the single SNP) in the realistic one.
fn causal_snps<R: Rng>(study: Study, size: usize, rng: &mut R) -> Vec<usize> {
    match study {
        Study::Simplified => (0..size.min(2)).collect(),
        Study::Realistic => {
            let all: Vec<usize> = (0..size).collect();
            let mut c: Vec<usize> = all.choose_multiple(rng, size.min(2)).copied().collect();
            c.sort_unstable();
            c
        }
    }
}

/// One replicate of a scenario. `corpus` is required for the realistic study.
pub fn simulate_scenario(
    scenario: &Scenario,
    seed: u64,
    corpus: Option<(&GenotypeMatrix, &GeneIndex)>,
) -> Result<SimulatedDataset> {
    let setting = scenario.setting;
    let mut rng = stream_rng(seed, &[0x5ce]);
    let (genotypes, index, source_genes) = match scenario.study {
        Study::Simplified => {
            let mut cfg = GenotypeSimConfig::simplified(seed);
            let causal_genes: BTreeSet<usize> = setting
                .main_genes()
                .iter()
                .copied()
                .chain(setting.interaction().into_iter().flat_map(|(r, s)| [r, s]))
                .collect();
            for g in causal_genes {
                for k in 0..2 {
                    cfg.causal_columns.insert(g * cfg.snps_per_gene + k);
                }
            }
            let (g, i) = simulate_genotypes(&cfg)?;
            (g, i, Vec::new())
        }
        Study::Realistic => {
            let (cg, ci) = corpus.ok_or_else(|| {
                EpistasisError::Invalid("the realistic study needs a genotype corpus".into())
            })?;
            let (g, i) = resample_real_genotypes(cg, ci, 6, seed)?;
            let source: Vec<String> = i.genes().iter().map(|g| g.id.clone()).collect();
            let ids: Vec<String> = (1..=i.len()).map(|k| format!("gene{k}")).collect();
            let sizes: Vec<usize> = i.genes().iter().map(|g| g.size()).collect();
            (g, GeneIndex::from_sizes(&ids, &sizes)?, source)
        }
    };
    let mut causal: Vec<Option<Vec<usize>>> = vec![None; index.len()];
    let mut causal_for = |gene: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        causal[gene]
            .get_or_insert_with(|| causal_snps(scenario.study, index.gene(gene).size(), rng))
            .clone()
    };
    let main_effects = setting
        .main_genes()
        .iter()
        .map(|&g| MainEffect {
            gene: g,
            causal: causal_for(g, &mut rng),
            beta: scenario.coefficient,
        })
        .collect();
    let interactions = setting
        .interaction()
        .map(|(r, s)| InteractionEffect {
            r,
            s,
            causal_r: causal_for(r, &mut rng),
            causal_s: causal_for(s, &mut rng),
            gamma: scenario.coefficient,
        })
        .into_iter()
        .collect();
    let truth = EffectConfig {
        main_effects,
        interactions,
        model: scenario.model,
        r2_target: scenario.r2,
    };
    let q_phi = build_signal(&genotypes, &index, &truth)?;
    let (y, sigma2) = simulate_phenotype(&q_phi, scenario.r2, &mut rng)?;
    Ok(SimulatedDataset {
        genotypes,
        index,
        y,
        truth,
        sigma2,
        q_phi,
        source_genes,
        seed,
    })
}

pub const STANDIN_R2: f64 = 0.5;

/// The stand-in corpus with a setting-C style phenotype: main effects on the
/// first two genes of 2 to 10 SNPs, an interaction between the next two.
/// Causal SNPs are the first two of each gene; Wang model; R² 0.5.
pub fn standin_dataset(seed: u64) -> Result<(SimulatedDataset, Scenario)> {
    let (genotypes, index) = standin_corpus(seed)?;
    let picks: Vec<usize> = (0..index.len())
        .filter(|&g| (2..=10).contains(&index.gene(g).size()))
        .take(4)
        .collect();
    if picks.len() < 4 {
        return Err(EpistasisError::Invalid("stand-in corpus has fewer than four mid-sized genes".into()));
    }
    let scenario = Scenario::new(Study::Realistic, Setting(2), PhenotypeModel::WangPathway, STANDIN_R2);
    let c = scenario.coefficient;
    let truth = EffectConfig {
        main_effects: picks[..2]
            .iter()
            .map(|&gene| MainEffect {
                gene,
                causal: vec![0, 1],
                beta: c,
            })
            .collect(),
        interactions: vec![InteractionEffect {
            r: picks[2],
            s: picks[3],
            causal_r: vec![0, 1],
            causal_s: vec![0, 1],
            gamma: c,
        }],
        model: scenario.model,
        r2_target: scenario.r2,
    };
    let q_phi = build_signal(&genotypes, &index, &truth)?;
    let (y, sigma2) = simulate_phenotype(&q_phi, scenario.r2, &mut stream_rng(seed, &[0x9e7]))?;
    let source_genes = index.genes().iter().map(|g| g.id.clone()).collect();
    let ds = SimulatedDataset {
        genotypes,
        index,
        y,
        truth,
        sigma2,
        q_phi,
        source_genes,
        seed,
    };
    Ok((ds, scenario))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hw_probabilities_and_thresholds() {
        let p = hw_probabilities(0.2);
        assert_abs_diff_eq!(p[0], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.32, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], 0.64, epsilon = 1e-15);
        let (a, b) = hw_thresholds(0.2);
        // Φ⁻¹(0.04), Φ⁻¹(0.36) by bisection on the erf-based CDF
        let oracle = |target: f64| {
            let cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
            let (mut lo, mut hi) = (-10.0, 10.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        assert_abs_diff_eq!(a, oracle(0.04), epsilon = 1e-9);
        assert_abs_diff_eq!(b, oracle(0.36), epsilon = 1e-9);
        assert_abs_diff_eq!(a, -1.7507, epsilon = 1e-4);
        assert_abs_diff_eq!(b, -0.3585, epsilon = 1e-4);
    }

    #[test]
    fn discretization_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for maf in [0.05, 0.2, 0.5] {
            let cuts = hw_thresholds(maf);
            let mut counts = [0usize; 3];
            let draws = 100_000;
            for _ in 0..draws {
                let x: f64 = rng.sample(StandardNormal);
                counts[(discretize(x, cuts) - 1) as usize] += 1;
            }
            let probs = hw_probabilities(maf);
            for c in 0..3 {
                assert!((counts[c] as f64 / draws as f64 - probs[c]).abs() < 0.01);
            }
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (crate::genotype::mean(a), crate::genotype::mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn independent_genes_when_rho_zero() {
        let mut cfg = GenotypeSimConfig::simplified(4);
        cfg.n = 10_000;
        cfg.rho = 0.0;
        cfg.genes = 2;
        let (g, _) = simulate_genotypes(&cfg).unwrap();
        let x = g.to_f64();
        let mut cors = Vec::new();
        for a in 0..6 {
            for b in a + 1..6 {
                cors.push(pearson(x.column(a).as_slice(), x.column(b).as_slice()));
            }
        }
        assert!(crate::genotype::mean(&cors).abs() < 0.05);
    }

    #[test]
    fn latent_within_gene_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = latent_rows(&mut rng, 10_000, &[6, 6], &[0.8, 0.8]);
        for g in 0..2 {
            for a in 0..6 {
                for b in a + 1..6 {
                    let r = pearson(x.column(6 * g + a).as_slice(), x.column(6 * g + b).as_slice());
                    assert!((0.75..=0.85).contains(&r), "{r}");
                }
            }
        }
        let across = pearson(x.column(0).as_slice(), x.column(6).as_slice());
        assert!(across.abs() < 0.05);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GenotypeSimConfig::simplified(0);
        cfg.rho = 1.0;
        assert!(simulate_genotypes(&cfg).is_err());
        let mut cfg = GenotypeSimConfig::simplified(0);
        cfg.maf_range = (0.3, 0.2);
        assert!(simulate_genotypes(&cfg).is_err());
        let mut cfg = GenotypeSimConfig::simplified(0);
        cfg.causal_columns.insert(36);
        assert!(simulate_genotypes(&cfg).is_err());
    }

    #[test]
    fn genotype_seed_determinism() {
        let cfg = GenotypeSimConfig::simplified(99);
        assert_eq!(simulate_genotypes(&cfg).unwrap(), simulate_genotypes(&cfg).unwrap());
    }

    #[test]
    fn causal_columns_get_causal_maf() {
        let mut cfg = GenotypeSimConfig::simplified(5);
        cfg.n = 20_000;
        cfg.genes = 1;
        cfg.causal_columns.insert(0);
        let (g, _) = simulate_genotypes(&cfg).unwrap();
        let ones = g.codes().column(0).iter().filter(|&&c| c == 1).count() as f64 / 20_000.0;
        let twos = g.codes().column(0).iter().filter(|&&c| c == 2).count() as f64 / 20_000.0;
        assert!((ones - 0.04).abs() < 0.01);
        assert!((twos - 0.32).abs() < 0.01);
    }

    fn simplified_data(seed: u64) -> (GenotypeMatrix, GeneIndex) {
        simulate_genotypes(&GenotypeSimConfig::simplified(seed)).unwrap()
    }

    #[test]
    fn no_effects_gives_zero_signal() {
        let (g, idx) = simplified_data(1);
        let eff = EffectConfig {
            main_effects: vec![],
            interactions: vec![],
            model: PhenotypeModel::WangPathway,
            r2_target: 0.5,
        };
        let q = build_signal(&g, &idx, &eff).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_main_effect_has_variance_four() {
        let (g, idx) = simplified_data(2);
        let eff = EffectConfig {
            main_effects: vec![MainEffect {
                gene: 0,
                causal: vec![0, 1],
                beta: 2.0,
            }],
            interactions: vec![],
            model: PhenotypeModel::WangPathway,
            r2_target: 0.5,
        };
        let q = build_signal(&g, &idx, &eff).unwrap();
        let sum = g.submatrix(0..2).column_sum();
        let z = standardize_vector(&sum).unwrap();
        assert!((&q - &z * 2.0).amax() < 1e-12);
        assert_abs_diff_eq!(crate::genotype::sample_variance(q.as_slice()), 4.0, epsilon = 1e-10);
    }

    #[test]
    fn empty_causal_set_is_rejected() {
        let (g, idx) = simplified_data(3);
        let eff = EffectConfig {
            main_effects: vec![MainEffect {
                gene: 0,
                causal: vec![],
                beta: 2.0,
            }],
            interactions: vec![],
            model: PhenotypeModel::WangPathway,
            r2_target: 0.5,
        };
        assert!(build_signal(&g, &idx, &eff).is_err());
    }

    #[test]
    fn ols_recovers_setting_a_coefficients() {
        let sc = Scenario::new(Study::Simplified, Setting(1), PhenotypeModel::WangPathway, 0.5);
        let ds = simulate_scenario(&sc, 17, None).unwrap();
        let t = true_regressors(&ds.genotypes, &ds.index, &ds.truth).unwrap();
        let n = ds.q_phi.len();
        let mut a = DMatrix::from_element(n, 4, 1.0);
        a.set_column(1, &t.mains[0]);
        a.set_column(2, &t.mains[1]);
        a.set_column(3, &t.interactions[0]);
        let beta = a.clone().svd(true, true).solve(&ds.q_phi, 1e-14).unwrap();
        for j in 1..4 {
            assert_abs_diff_eq!(beta[j], 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn sigma2_formula() {
        let q = DVector::<f64>::from_vec(vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.0]);
        let ss: f64 = {
            let m = q.mean();
            q.iter().map(|v| (v - m).powi(2)).sum()
        };
        assert_abs_diff_eq!(sigma2_from_r2(&q, 0.5).unwrap(), ss / 4.0, epsilon = 1e-12);
        let vals: Vec<f64> = [0.1, 0.3, 0.6, 0.9, 0.999].iter().map(|&r| sigma2_from_r2(&q, r).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(vals[4] > 0.0 && vals[4] < 1e-2);
        assert!(sigma2_from_r2(&DVector::from_element(5, 2.0), 0.5).is_err());
        assert!(sigma2_from_r2(&q, 1.0).is_err());
    }

    #[test]
    fn calibration_single_draw_noise() {
        let sc = Scenario::new(Study::Simplified, Setting(1), PhenotypeModel::WangPathway, 0.3);
        let ds = simulate_scenario(&sc, 3, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r2s: Vec<f64> = (0..500)
            .map(|_| {
                let (y, _) = simulate_phenotype(&ds.q_phi, 0.3, &mut rng).unwrap();
                empirical_r2(&ds.q_phi, y.values())
            })
            .collect();
        assert!((crate::genotype::mean(&r2s) - 0.3).abs() < 0.02);
    }

    #[test]
    fn partial_r2_edge_settings() {
        for (setting, p_i, p_m) in [(3u8, 1.0, 0.0), (4, 0.0, 1.0)] {
            let sc = Scenario::new(Study::Simplified, Setting(setting), PhenotypeModel::WangPathway, 0.4);
            let ds = simulate_scenario(&sc, 8, None).unwrap();
            let pr = partial_r2(&ds.y, &ds.genotypes, &ds.index, &ds.truth).unwrap();
            assert_eq!(pr.p_i, p_i);
            assert_eq!(pr.p_m, p_m);
        }
        let sc = Scenario::new(Study::Simplified, Setting(5), PhenotypeModel::WangPathway, 0.4);
        let ds = simulate_scenario(&sc, 8, None).unwrap();
        let pr = partial_r2(&ds.y, &ds.genotypes, &ds.index, &ds.truth).unwrap();
        assert!(pr.no_effects);
        assert_eq!((pr.p_i, pr.p_m), (0.0, 0.0));
    }

    #[test]
    fn setting_names() {
        use PhenotypeModel::*;
        let names: Vec<&str> = [
            (1, WangPathway),
            (1, PcaModel),
            (2, WangPathway),
            (2, PcaModel),
            (3, WangPathway),
            (3, PcaModel),
            (4, WangPathway),
            (4, PcaModel),
            (5, WangPathway),
            (5, PcaModel),
        ]
        .iter()
        .map(|&(s, m)| Setting(s).name(m))
        .collect();
        assert_eq!(names, ["A", "B", "C", "D", "E", "F", "OME", "OME", "NE", "NE"]);
        assert!(Setting::new(0).is_err() && Setting::new(6).is_err());
    }

    #[test]
    fn resample_identity_and_determinism() {
        let (g, idx) = simplified_data(6);
        let (g2, idx2) = resample_real_genotypes(&g, &idx, 6, 1).unwrap();
        let mut ids: Vec<String> = idx2.genes().iter().map(|x| x.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, (1..=6).map(|k| format!("gene{k}")).collect::<Vec<_>>());
        assert_eq!(g2.p(), g.p());
        assert_eq!(
            resample_real_genotypes(&g, &idx, 3, 9).unwrap(),
            resample_real_genotypes(&g, &idx, 3, 9).unwrap()
        );
        assert!(resample_real_genotypes(&g, &idx, 7, 1).is_err());
    }

    #[test]
    fn standin_sizes_shape() {
        let sizes = standin_gene_sizes(STANDIN_SEED);
        assert_eq!(sizes.len(), 30);
        assert_eq!(*sizes.iter().min().unwrap(), 1);
        assert_eq!(*sizes.iter().max().unwrap(), 60);
        let mut s = sizes.clone();
        s.sort_unstable();
        let median = (s[14] + s[15]) as f64 / 2.0;
        assert!((1.0..=4.0).contains(&median), "median {median}");
    }

    #[test]
    fn wang_and_pca_terms_share_interaction_part_for_single_snp_genes() {
        // Two one-SNP genes: the PCA product equals the standardized product
        // of standardized SNPs, while the raw product additionally carries
        // additive parts; after projecting out intercept and both SNPs the
        // two terms coincide up to scale and sign.
        let mut cfg = GenotypeSimConfig::simplified(31);
        cfg.snps_per_gene = 1;
        cfg.genes = 2;
        let (g, idx) = simulate_genotypes(&cfg).unwrap();
        let eff = |model| EffectConfig {
            main_effects: vec![],
            interactions: vec![InteractionEffect {
                r: 0,
                s: 1,
                causal_r: vec![0],
                causal_s: vec![0],
                gamma: 1.0,
            }],
            model,
            r2_target: 0.5,
        };
        let wang = true_regressors(&g, &idx, &eff(PhenotypeModel::WangPathway)).unwrap().interactions[0].clone();
        let pca = true_regressors(&g, &idx, &eff(PhenotypeModel::PcaModel)).unwrap().interactions[0].clone();
        let x = g.to_f64();
        let s0 = standardize_vector(&x.column(0).into_owned()).unwrap();
        let s1 = standardize_vector(&x.column(1).into_owned()).unwrap();
        let expected_pca = standardize_vector(&s0.component_mul(&s1)).unwrap();
        assert!((&pca - &expected_pca).amax() < 1e-10 || (&pca + &expected_pca).amax() < 1e-10);
        let n = x.nrows();
        let mut basis = DMatrix::from_element(n, 3, 1.0);
        basis.set_column(1, &x.column(0));
        basis.set_column(2, &x.column(1));
        let resid = |v: &DVector<f64>| {
            let svd = basis.clone().svd(true, true);
            let b = svd.solve(v, 1e-14).unwrap();
            v - &basis * b
        };
        let (rw, rp) = (resid(&wang), resid(&pca));
        let cos = rw.dot(&rp) / (rw.norm() * rp.norm());
        assert_abs_diff_eq!(cos.abs(), 1.0, epsilon = 1e-10);
    }
}
