//! Genotype matrices, gene grouping, phenotypes and their on-disk formats.
//!
//! Genotypes stay in the additive `{1, 2, 3}` coding everywhere in this
//! module. Standardization to mean 0 / sample sd 1 only happens in
//! [`standardize_columns`], which model-facing code calls explicitly.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EpistasisError, FilePos, Result};

/// n × p additive-coded SNP matrix. Every entry is 1, 2 or 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenotypeMatrix {
    codes: DMatrix<u8>,
    snp_ids: Vec<String>,
}

impl GenotypeMatrix {
    pub fn new(codes: DMatrix<u8>, snp_ids: Vec<String>) -> Result<Self> {
        if codes.nrows() < 2 {
            return Err(EpistasisError::Invalid(format!(
                "genotype matrix needs at least 2 subjects, got {}",
                codes.nrows()
            )));
        }
        if codes.ncols() == 0 {
            return Err(EpistasisError::Invalid("genotype matrix has no SNPs".into()));
        }
        if snp_ids.len() != codes.ncols() {
            return Err(EpistasisError::Dimension(format!(
                "{} SNP ids for {} columns",
                snp_ids.len(),
                codes.ncols()
            )));
        }
        if let Some((i, &v)) = codes.iter().enumerate().find(|(_, &v)| !(1..=3).contains(&v)) {
            let (r, c) = (i % codes.nrows(), i / codes.nrows());
            return Err(EpistasisError::Invalid(format!(
                "genotype code {v} at subject {r}, SNP {c} is not one of 1, 2, 3"
            )));
        }
        Ok(GenotypeMatrix { codes, snp_ids })
    }

    /// Builds a matrix with generated SNP ids `snp1..snpP`.
    pub fn from_codes(codes: DMatrix<u8>) -> Result<Self> {
        let ids = (1..=codes.ncols()).map(|j| format!("snp{j}")).collect();
        Self::new(codes, ids)
    }

    pub fn n(&self) -> usize {
        self.codes.nrows()
    }

    pub fn p(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> &DMatrix<u8> {
        &self.codes
    }

    pub fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    /// Raw codes of a column range as reals.
    pub fn submatrix(&self, cols: Range<usize>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, cols.len(), |i, j| f64::from(self.codes[(i, cols.start + j)]))
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.submatrix(0..self.p())
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let codes = self.codes.select_columns(cols);
        let ids = cols.iter().map(|&c| self.snp_ids[c].clone()).collect();
        Self::new(codes, ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gene {
    pub id: String,
    pub columns: Range<usize>,
}

impl Gene {
    pub fn size(&self) -> usize {
        self.columns.len()
    }
}

/// Ordered genes, each owning a contiguous half-open column range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneIndex {
    genes: Vec<Gene>,
}

impl GeneIndex {
    pub fn new(genes: Vec<Gene>) -> Result<Self> {
        if genes.is_empty() {
            return Err(EpistasisError::Invalid("gene index is empty".into()));
        }
        let mut next = 0;
        let mut seen = HashSet::new();
        for g in &genes {
            if g.columns.start != next || g.columns.is_empty() {
                return Err(EpistasisError::Invalid(format!(
                    "gene {} has range {:?}; ranges must be non-empty and contiguous from 0",
                    g.id, g.columns
                )));
            }
            if !seen.insert(g.id.as_str()) {
                return Err(EpistasisError::Invalid(format!("duplicate gene id {}", g.id)));
            }
            next = g.columns.end;
        }
        Ok(GeneIndex { genes })
    }

    /// Consecutive genes with the given sizes.
    pub fn from_sizes<S: AsRef<str>>(ids: &[S], sizes: &[usize]) -> Result<Self> {
        if ids.len() != sizes.len() {
            return Err(EpistasisError::Dimension(format!(
                "{} gene ids for {} sizes",
                ids.len(),
                sizes.len()
            )));
        }
        let mut start = 0;
        let genes = ids
            .iter()
            .zip(sizes)
            .map(|(id, &s)| {
                let g = Gene {
                    id: id.as_ref().to_string(),
                    columns: start..start + s,
                };
                start += s;
                g
            })
            .collect();
        Self::new(genes)
    }

    pub fn genes(&self) -> &[Gene] {
        &self.genes
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn total_snps(&self) -> usize {
        self.genes.last().map_or(0, |g| g.columns.end)
    }

    pub fn gene(&self, i: usize) -> &Gene {
        &self.genes[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.genes.iter().position(|g| g.id == id)
    }

    /// All pairs `(r, s)` with `r < s`, lexicographic.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let g = self.len();
        (0..g).flat_map(|r| (r + 1..g).map(move |s| (r, s))).collect()
    }

    fn check_against(&self, geno: &GenotypeMatrix) -> Result<()> {
        if self.total_snps() != geno.p() {
            return Err(EpistasisError::Dimension(format!(
                "gene index covers {} SNPs, genotype matrix has {}",
                self.total_snps(),
                geno.p()
            )));
        }
        Ok(())
    }
}

/// Length-n trait vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Phenotype {
    y: DVector<f64>,
}

impl Phenotype {
    pub fn new(y: DVector<f64>) -> Result<Self> {
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(EpistasisError::Invalid(format!("phenotype value {i} is not finite")));
        }
        Ok(Phenotype { y })
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn variance(&self) -> f64 {
        sample_variance(self.y.as_slice())
    }

    /// Errors when the phenotype is constant.
    pub fn require_variance(&self) -> Result<()> {
        if self.len() < 2 || self.variance() <= 0.0 {
            return Err(EpistasisError::ConstantPhenotype);
        }
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Phenotype {
        Phenotype {
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
        }
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Column-standardized matrix; constant columns are dropped and recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDesign {
    /// Retained columns, standardized.
    pub columns: DMatrix<f64>,
    /// Means of every input column.
    pub means: Vec<f64>,
    /// Sample standard deviations of every input column (0 for dropped).
    pub sds: Vec<f64>,
    /// Input indices of the columns in `columns`.
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
}

const CONSTANT_SD: f64 = 1e-12;

pub fn standardize_columns(m: &DMatrix<f64>) -> StandardizedDesign {
    let n = m.nrows();
    let mut means = Vec::with_capacity(m.ncols());
    let mut sds = Vec::with_capacity(m.ncols());
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in m.column_iter().enumerate() {
        let mu = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|x| (x - mu) * (x - mu)).sum();
        let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
        means.push(mu);
        if sd > CONSTANT_SD * (1.0 + mu.abs()) {
            sds.push(sd);
            retained.push(j);
        } else {
            sds.push(0.0);
            dropped.push(j);
        }
    }
    let mut columns = DMatrix::zeros(n, retained.len());
    for (k, &j) in retained.iter().enumerate() {
        let (mu, sd) = (means[j], sds[j]);
        for i in 0..n {
            columns[(i, k)] = (m[(i, j)] - mu) / sd;
        }
    }
    StandardizedDesign {
        columns,
        means,
        sds,
        retained,
        dropped,
    }
}

/// Standardizes a single vector; `None` if it is constant.
pub fn standardize_vector(v: &DVector<f64>) -> Option<DVector<f64>> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let s = standardize_columns(&m);
    if s.retained.is_empty() {
        None
    } else {
        Some(s.columns.column(0).into_owned())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Keep the first gene assignment of a SNP listed under several genes
    /// instead of rejecting the map.
    pub drop_duplicate_snps: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub genotypes: GenotypeMatrix,
    pub index: GeneIndex,
    pub phenotype: Phenotype,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| EpistasisError::io(path, e))
}

fn pos(path: &Path, line: usize, column: Option<usize>) -> FilePos {
    FilePos {
        path: path.to_path_buf(),
        line,
        column,
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Reads the genotype TSV: header of SNP ids, one row per subject.
pub fn read_genotypes(path: &Path) -> Result<GenotypeMatrix> {
    let text = read(path)?;
    let mut lines = content_lines(&text);
    let (_, header) = lines.next().ok_or_else(|| EpistasisError::Malformed {
        pos: pos(path, 1, None),
        msg: "empty genotype file".into(),
    })?;
    let ids: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for (c, id) in ids.iter().enumerate() {
        if id.is_empty() || !seen.insert(id.as_str()) {
            return Err(EpistasisError::Malformed {
                pos: pos(path, 1, Some(c + 1)),
                msg: format!("SNP id {id:?} is empty or duplicated"),
            });
        }
    }
    let p = ids.len();
    let mut data: Vec<u8> = Vec::new();
    let mut n = 0;
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != p {
            return Err(EpistasisError::Malformed {
                pos: pos(path, line_no, None),
                msg: format!("expected {p} cells, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v = match cell.trim() {
                "1" => 1,
                "2" => 2,
                "3" => 3,
                other => {
                    return Err(EpistasisError::CodeOutOfRange {
                        pos: pos(path, line_no, Some(c + 1)),
                        value: other.to_string(),
                    })
                }
            };
            data.push(v);
        }
        n += 1;
    }
    let codes = DMatrix::from_row_slice(n, p, &data);
    GenotypeMatrix::new(codes, ids).map_err(|e| EpistasisError::Malformed {
        pos: pos(path, 1, None),
        msg: e.to_string(),
    })
}

/// Gene map rows in file order: `(snp_id, gene_id, line)`.
fn read_gene_map(path: &Path) -> Result<Vec<(String, String, usize)>> {
    let text = read(path)?;
    let mut lines = content_lines(&text);
    let (_, header) = lines.next().ok_or_else(|| EpistasisError::GeneMap {
        pos: pos(path, 1, None),
        msg: "empty gene map".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != ["snp_id", "gene_id"] {
        return Err(EpistasisError::GeneMap {
            pos: pos(path, 1, None),
            msg: format!("header must be `snp_id<TAB>gene_id`, found {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cells.len() != 2 || cells.iter().any(|c| c.is_empty()) {
            return Err(EpistasisError::GeneMap {
                pos: pos(path, line_no, None),
                msg: format!("expected 2 non-empty cells, found {:?}", cells),
            });
        }
        rows.push((cells[0].to_string(), cells[1].to_string(), line_no));
    }
    Ok(rows)
}

pub fn read_phenotype(path: &Path) -> Result<Phenotype> {
    let text = read(path)?;
    let mut y = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let v: f64 = line.trim().parse().map_err(|_| EpistasisError::Malformed {
            pos: pos(path, line_no, Some(1)),
            msg: format!("{:?} is not a real number", line.trim()),
        })?;
        if !v.is_finite() {
            return Err(EpistasisError::Malformed {
                pos: pos(path, line_no, Some(1)),
                msg: "non-finite phenotype value".into(),
            });
        }
        y.push(v);
    }
    Phenotype::from_vec(y)
}

pub fn load_dataset(genotype_path: &Path, gene_map_path: &Path, phenotype_path: &Path) -> Result<Dataset> {
    load_dataset_with(genotype_path, gene_map_path, phenotype_path, LoadOptions::default())
}

/// Loads and cross-validates the three input files. Columns are reordered so
/// that each gene's SNPs are contiguous, genes in order of first appearance
/// in the map and SNPs in map order within a gene.
pub fn load_dataset_with(
    genotype_path: &Path,
    gene_map_path: &Path,
    phenotype_path: &Path,
    opts: LoadOptions,
) -> Result<Dataset> {
    let raw = read_genotypes(genotype_path)?;
    let map = read_gene_map(gene_map_path)?;
    let phenotype = read_phenotype(phenotype_path)?;

    let column_of: HashMap<&str, usize> =
        raw.snp_ids().iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
    let mut assigned: HashMap<&str, &str> = HashMap::new();
    let mut gene_order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (snp, gene, line) in &map {
        let Some(&col) = column_of.get(snp.as_str()) else {
            return Err(EpistasisError::GeneMap {
                pos: pos(gene_map_path, *line, Some(1)),
                msg: format!("SNP {snp} is not a column of {}", genotype_path.display()),
            });
        };
        if let Some(prev) = assigned.get(snp.as_str()) {
            if opts.drop_duplicate_snps {
                log::warn!("SNP {snp} listed under {prev} and {gene}; keeping {prev}");
                continue;
            }
            return Err(EpistasisError::GeneMap {
                pos: pos(gene_map_path, *line, Some(2)),
                msg: format!("SNP {snp} already assigned to gene {prev}"),
            });
        }
        assigned.insert(snp, gene);
        if !members.contains_key(gene.as_str()) {
            gene_order.push(gene);
        }
        members.entry(gene).or_default().push(col);
    }
    if let Some(missing) = raw.snp_ids().iter().find(|id| !assigned.contains_key(id.as_str())) {
        let col = column_of[missing.as_str()];
        return Err(EpistasisError::GeneMap {
            pos: pos(genotype_path, 1, Some(col + 1)),
            msg: format!("SNP {missing} has no entry in {}", gene_map_path.display()),
        });
    }

    let mut order = Vec::with_capacity(raw.p());
    let mut sizes = Vec::with_capacity(gene_order.len());
    for g in &gene_order {
        let cols = &members[g];
        order.extend_from_slice(cols);
        sizes.push(cols.len());
    }
    let genotypes = raw.select_columns(&order)?;
    let index = GeneIndex::from_sizes(&gene_order, &sizes)?;

    if phenotype.len() != genotypes.n() {
        return Err(EpistasisError::PhenotypeLength {
            path: phenotype_path.to_path_buf(),
            expected: genotypes.n(),
            got: phenotype.len(),
        });
    }
    Ok(Dataset {
        genotypes,
        index,
        phenotype,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| EpistasisError::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EpistasisError + '_ {
    move |e| EpistasisError::io(path, e)
}

pub fn write_genotypes(path: &Path, g: &GenotypeMatrix) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "{}", g.snp_ids().join("\t")).map_err(&e)?;
    let mut line = String::with_capacity(2 * g.p());
    for i in 0..g.n() {
        line.clear();
        for j in 0..g.p() {
            if j > 0 {
                line.push('\t');
            }
            line.push(char::from(b'0' + g.codes()[(i, j)]));
        }
        writeln!(w, "{line}").map_err(&e)?;
    }
    w.flush().map_err(&e)
}

pub fn write_gene_map(path: &Path, g: &GenotypeMatrix, idx: &GeneIndex) -> Result<()> {
    idx.check_against(g)?;
    let mut w = create(path)?;
    let e = io_err(path);
    writeln!(w, "snp_id\tgene_id").map_err(&e)?;
    for gene in idx.genes() {
        for j in gene.columns.clone() {
            writeln!(w, "{}\t{}", g.snp_ids()[j], gene.id).map_err(&e)?;
        }
    }
    w.flush().map_err(&e)
}

pub fn write_phenotype(path: &Path, y: &Phenotype) -> Result<()> {
    let mut w = create(path)?;
    let e = io_err(path);
    for v in y.values().iter() {
        // `{:?}` prints the shortest string that parses back to the same f64
        writeln!(w, "{v:?}").map_err(&e)?;
    }
    w.flush().map_err(&e)
}

/// Standard file names inside a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub genotypes: PathBuf,
    pub gene_map: PathBuf,
    pub phenotype: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            genotypes: dir.join("genotypes.tsv"),
            gene_map: dir.join("gene_map.tsv"),
            phenotype: dir.join("phenotype.txt"),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        load_dataset(&self.genotypes, &self.gene_map, &self.phenotype)
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| EpistasisError::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    write_genotypes(&paths.genotypes, &ds.genotypes)?;
    write_gene_map(&paths.gene_map, &ds.genotypes, &ds.index)?;
    write_phenotype(&paths.phenotype, &ds.phenotype)?;
    Ok(paths)
}
