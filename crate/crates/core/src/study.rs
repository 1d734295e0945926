//! Power studies: replicate simulate → detect, aggregate power and
//! per-variable discovery frequencies, emit CSV tables and SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EpistasisError, Result};
use crate::exec::{derive_seed, map_range, Execution};
use crate::genotype::{GeneIndex, GenotypeMatrix};
use crate::interaction::{pair_label, Method};
use crate::screen_clean::{detect, DetectConfig};
use crate::simulation::{
    partial_r2, simulate_scenario, standin_corpus, PhenotypeModel, Scenario, Setting, Study, STANDIN_SEED,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub study: Study,
    pub settings: Vec<u8>,
    pub models: Vec<PhenotypeModel>,
    pub methods: Vec<Method>,
    pub r2_grid: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
    /// Effect size shared by every simulated main and interaction effect.
    pub coefficient: f64,
    pub detect: DetectConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            study: Study::Simplified,
            settings: vec![1, 2, 3, 4, 5],
            models: vec![PhenotypeModel::WangPathway, PhenotypeModel::PcaModel],
            methods: Method::ALL.to_vec(),
            r2_grid: vec![0.1, 0.2, 0.4, 0.7],
            iterations: 100,
            seed: 1,
            coefficient: 2.0,
            detect: DetectConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EpistasisError::Invalid(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.settings.is_empty() || self.methods.is_empty() || self.models.is_empty() || self.r2_grid.is_empty() {
            return bad("settings, models, methods and r2_grid must be non-empty".into());
        }
        for &s in &self.settings {
            Setting::new(s)?;
        }
        if let Some(r) = self.r2_grid.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return bad(format!("r2 values must lie in (0, 1), got {r}"));
        }
        Ok(())
    }

    /// Distinct (setting, model) pairs; settings without an interaction are
    /// run under the first model only.
    pub fn scenarios(&self) -> Vec<(Setting, PhenotypeModel)> {
        let mut out = Vec::new();
        for &s in &self.settings {
            let s = Setting(s);
            if s.has_interaction() {
                out.extend(self.models.iter().map(|&m| (s, m)));
            } else {
                out.push((s, self.models[0]));
            }
        }
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub significant: Vec<String>,
    pub error: Option<String>,
}

/// Everything kept from one simulated dataset, enough to re-aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub setting: u8,
    pub name: String,
    pub model: PhenotypeModel,
    pub r2: f64,
    pub replicate: usize,
    pub seed: u64,
    pub target: String,
    pub variables: Vec<String>,
    pub p_i: f64,
    pub p_m: f64,
    pub r2_empirical: f64,
    pub outcomes: Vec<MethodOutcome>,
}

impl ReplicateRecord {
    pub fn file_name(&self) -> String {
        format!("{}_r2-{}_rep{:04}.json", self.name, self.r2, self.replicate)
    }
}

fn variables(idx: &GeneIndex) -> Vec<String> {
    let mut v: Vec<String> = idx.genes().iter().map(|g| g.id.clone()).collect();
    v.extend(idx.pairs().iter().map(|&(r, s)| pair_label(&idx.gene(r).id, &idx.gene(s).id)));
    v
}

/// One replicate: one dataset analysed by every method.
pub fn run_replicate(
    cfg: &StudyConfig,
    setting: Setting,
    model: PhenotypeModel,
    r2: f64,
    replicate: usize,
    corpus: Option<(&GenotypeMatrix, &GeneIndex)>,
) -> Result<ReplicateRecord> {
    let model_id = PhenotypeModel::index(model);
    let seed = derive_seed(
        cfg.seed,
        &[u64::from(setting.0), model_id, r2.to_bits(), replicate as u64],
    );
    let mut scenario = Scenario::new(cfg.study, setting, model, r2);
    scenario.coefficient = cfg.coefficient;
    let ds = simulate_scenario(&scenario, seed, corpus)?;
    let pr = partial_r2(&ds.y, &ds.genotypes, &ds.index, &ds.truth)?;
    let (r, s) = setting.target_pair();
    let target = pair_label(&ds.index.gene(r).id, &ds.index.gene(s).id);
    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let mut dc = cfg.detect.clone();
            dc.method = method;
            dc.seed = derive_seed(seed, &[0xde7]);
            dc.exec = Execution::Sequential;
            match detect(&ds.genotypes, &ds.index, &ds.y, &dc) {
                Ok(rep) => MethodOutcome {
                    method,
                    significant: rep.significant_ids().iter().map(|s| s.to_string()).collect(),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{} {} r2={r2} rep {replicate}: {e}", setting.name(model), method);
                    MethodOutcome {
                        method,
                        significant: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    Ok(ReplicateRecord {
        setting: setting.0,
        name: setting.name(model).to_string(),
        model,
        r2,
        replicate,
        seed,
        target,
        variables: variables(&ds.index),
        p_i: pr.p_i,
        p_m: pr.p_m,
        r2_empirical: ds.empirical_r2(),
        outcomes,
    })
}

impl PhenotypeModel {
    fn index(self) -> u64 {
        match self {
            PhenotypeModel::WangPathway => 0,
            PhenotypeModel::PcaModel => 1,
        }
    }
}

/// Runs every replicate of the study. Replicates run on `exec`; when
/// `replicate_dir` is given each record is written there as JSON.
pub fn run_study(cfg: &StudyConfig, exec: Execution, replicate_dir: Option<&Path>) -> Result<Vec<ReplicateRecord>> {
    cfg.validate()?;
    let corpus = match cfg.study {
        Study::Realistic => Some(standin_corpus(STANDIN_SEED)?),
        Study::Simplified => None,
    };
    let corpus_ref = corpus.as_ref().map(|(g, i)| (g, i));
    let mut jobs = Vec::new();
    for (setting, model) in cfg.scenarios() {
        for &r2 in &cfg.r2_grid {
            for rep in 0..cfg.iterations {
                jobs.push((setting, model, r2, rep));
            }
        }
    }
    if let Some(dir) = replicate_dir {
        fs::create_dir_all(dir).map_err(|e| EpistasisError::io(dir, e))?;
    }
    let results = map_range(exec, jobs.len(), |j| {
        let (setting, model, r2, rep) = jobs[j];
        let rec = run_replicate(cfg, setting, model, r2, rep, corpus_ref)?;
        if let Some(dir) = replicate_dir {
            let path = dir.join(rec.file_name());
            fs::write(&path, serde_json::to_string_pretty(&rec)?).map_err(|e| EpistasisError::io(&path, e))?;
        }
        Ok(rec)
    });
    results.into_iter().collect()
}

/// Reads every `*.json` replicate record in `dir`, sorted by file name.
pub fn load_replicates(dir: &Path) -> Result<Vec<ReplicateRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| EpistasisError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let s = fs::read_to_string(p).map_err(|e| EpistasisError::io(p, e))?;
            serde_json::from_str(&s).map_err(|e| EpistasisError::Invalid(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub setting: u8,
    pub name: String,
    pub model: PhenotypeModel,
    pub method: Method,
    pub r2: f64,
    pub power: f64,
    pub detected: usize,
    /// Replicates that completed; `power = detected / iterations`.
    pub iterations: usize,
    pub failed: usize,
    pub mean_p_i: f64,
    pub mean_p_m: f64,
    /// More than 10% of the cell's replicates failed.
    pub cell_failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

const POWER_HEADER: &str = "setting,name,model,method,r2,power,detected,iterations,failed,mean_p_i,mean_p_m,cell_failed";

fn model_key(m: PhenotypeModel) -> &'static str {
    match m {
        PhenotypeModel::WangPathway => "wang_pathway",
        PhenotypeModel::PcaModel => "pca_model",
    }
}

impl PowerTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{POWER_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?},{},{},{},{:?},{:?},{}",
                r.setting,
                r.name,
                model_key(r.model),
                r.method,
                r.r2,
                r.power,
                r.detected,
                r.iterations,
                r.failed,
                r.mean_p_i,
                r.mean_p_m,
                r.cell_failed
            );
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        if lines.next() != Some(POWER_HEADER) {
            return Err(EpistasisError::Invalid("power table: unexpected header".into()));
        }
        let bad = |line: usize, what: &str| EpistasisError::Invalid(format!("power table line {line}: bad {what}"));
        let rows = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let line = i + 2;
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 12 {
                    return Err(bad(line, "field count"));
                }
                let num = |k: usize, what: &str| f[k].parse::<f64>().map_err(|_| bad(line, what));
                let int = |k: usize, what: &str| f[k].parse::<usize>().map_err(|_| bad(line, what));
                Ok(PowerRow {
                    setting: f[0].parse().map_err(|_| bad(line, "setting"))?,
                    name: f[1].to_string(),
                    model: match f[2] {
                        "wang_pathway" => PhenotypeModel::WangPathway,
                        "pca_model" => PhenotypeModel::PcaModel,
                        _ => return Err(bad(line, "model")),
                    },
                    method: f[3].parse().map_err(|_| bad(line, "method"))?,
                    r2: num(4, "r2")?,
                    power: num(5, "power")?,
                    detected: int(6, "detected")?,
                    iterations: int(7, "iterations")?,
                    failed: int(8, "failed")?,
                    mean_p_i: num(9, "mean_p_i")?,
                    mean_p_m: num(10, "mean_p_m")?,
                    cell_failed: f[11].parse().map_err(|_| bad(line, "cell_failed"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PowerTable { rows })
    }

    /// Rows of one (setting, model) curve for `method`, ordered by R².
    pub fn curve(&self, name: &str, method: Method) -> Vec<&PowerRow> {
        let mut v: Vec<&PowerRow> = self.rows.iter().filter(|r| r.name == name && r.method == method).collect();
        v.sort_by(|a, b| a.r2.total_cmp(&b.r2));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryHeatmap {
    pub setting: u8,
    pub name: String,
    pub r2: f64,
    pub variables: Vec<String>,
    pub methods: Vec<Method>,
    /// `freq[v][m]`: share of completed replicates where variable `v` was
    /// significant under method `m`.
    pub freq: Vec<Vec<f64>>,
}

impl DiscoveryHeatmap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for m in &self.methods {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for (v, row) in self.variables.iter().zip(&self.freq) {
            out.push_str(v);
            for x in row {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn file_stem(&self) -> String {
        format!("heatmap_{}_r2-{}", self.name, self.r2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    setting: u8,
    model: u64,
    r2: u64,
}

fn cell_key(r: &ReplicateRecord) -> CellKey {
    CellKey {
        setting: r.setting,
        model: PhenotypeModel::index(r.model),
        r2: r.r2.to_bits(),
    }
}

/// Aggregates replicate records into the power table and one heatmap per
/// (setting, model, R²). Order of `records` does not matter.
pub fn aggregate(records: &[ReplicateRecord]) -> (PowerTable, Vec<DiscoveryHeatmap>) {
    let mut cells: BTreeMap<CellKey, Vec<&ReplicateRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(cell_key(r)).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for recs in cells.values_mut() {
        recs.sort_by_key(|r| r.replicate);
        let first = recs[0];
        let mut methods: Vec<Method> = recs.iter().flat_map(|r| r.outcomes.iter().map(|o| o.method)).collect();
        methods.sort_by_key(|m| Method::ALL.iter().position(|x| x == m));
        methods.dedup();
        let mut vars: Vec<String> = Vec::new();
        for r in recs.iter() {
            for v in &r.variables {
                if !vars.contains(v) {
                    vars.push(v.clone());
                }
            }
        }
        let total = recs.len();
        let mean = |f: fn(&ReplicateRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / total as f64;
        let (mean_p_i, mean_p_m) = (mean(|r| r.p_i), mean(|r| r.p_m));
        let mut freq = vec![vec![0.0; methods.len()]; vars.len()];
        for (mi, &m) in methods.iter().enumerate() {
            let done: Vec<&MethodOutcome> = recs
                .iter()
                .filter_map(|r| r.outcomes.iter().find(|o| o.method == m && o.error.is_none()))
                .collect();
            let failed = total - done.len();
            let detected = recs
                .iter()
                .filter(|r| {
                    r.outcomes
                        .iter()
                        .any(|o| o.method == m && o.error.is_none() && o.significant.contains(&r.target))
                })
                .count();
            let iterations = done.len();
            for (vi, v) in vars.iter().enumerate() {
                let hits = done.iter().filter(|o| o.significant.contains(v)).count();
                freq[vi][mi] = if iterations == 0 { 0.0 } else { hits as f64 / iterations as f64 };
            }
            rows.push(PowerRow {
                setting: first.setting,
                name: first.name.clone(),
                model: first.model,
                method: m,
                r2: first.r2,
                power: if iterations == 0 { 0.0 } else { detected as f64 / iterations as f64 },
                detected,
                iterations,
                failed,
                mean_p_i,
                mean_p_m,
                cell_failed: failed * 10 > total,
            });
        }
        maps.push(DiscoveryHeatmap {
            setting: first.setting,
            name: first.name.clone(),
            r2: first.r2,
            variables: vars,
            methods,
            freq,
        });
    }
    (PowerTable { rows }, maps)
}

/// Sequential white-to-navy colormap: `t = 0` is `#ffffff`, `t = 1` is
/// `#08306b`, linear in sRGB between them.
pub fn heat_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn heatmap_svg(h: &DiscoveryHeatmap) -> String {
    let cell = 28.0;
    let left = 110.0;
    let top = 50.0;
    let w = left + cell * h.methods.len().max(1) as f64 + 120.0;
    let hgt = top + cell * h.variables.len().max(1) as f64 + 40.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{hgt}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"18\" font-size=\"13\">{} (R\u{b2} = {})</text>",
        svg_escape(&h.name),
        h.r2
    );
    if h.variables.is_empty() || h.methods.is_empty() {
        let _ = writeln!(s, "<text x=\"{left}\" y=\"{}\">no data</text>", top + 14.0);
    }
    for (mi, m) in h.methods.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{m}</text>",
            left + cell * (mi as f64 + 0.5),
            top - 6.0
        );
    }
    for (vi, v) in h.variables.iter().enumerate() {
        let y = top + cell * vi as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + cell * 0.65,
            svg_escape(v)
        );
        for (mi, x) in h.freq[vi].iter().enumerate() {
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"#999999\"><title>{x:.3}</title></rect>",
                left + cell * mi as f64,
                heat_color(*x)
            );
        }
    }
    // legend
    let lx = left + cell * h.methods.len().max(1) as f64 + 30.0;
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let _ = writeln!(
            s,
            "<rect x=\"{lx}\" y=\"{}\" width=\"16\" height=\"10\" fill=\"{}\"/>",
            top + 10.0 * (10 - k) as f64,
            heat_color(t)
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">1</text>", lx + 20.0, top + 9.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">0</text>", lx + 20.0, top + 109.0);
    s.push_str("</svg>\n");
    s
}

const METHOD_COLORS: [&str; 3] = ["#d62728", "#1f77b4", "#2ca02c"];

/// Power against R² for each method of one named setting.
pub fn power_curve_svg(table: &PowerTable, name: &str) -> String {
    let (w, h) = (420.0, 300.0);
    let (x0, y0, x1, y1) = (50.0, 250.0, 400.0, 30.0);
    let px = |r2: f64| x0 + (x1 - x0) * r2;
    let py = |p: f64| y0 - (y0 - y1) * p;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<text x=\"{x0}\" y=\"18\" font-size=\"13\">{}</text>", svg_escape(name));
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=5 {
        let t = k as f64 / 5.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t:.1}</text>", px(t), y0 + 15.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>", x0 - 5.0, py(t) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">R\u{b2}</text>", (x0 + x1) / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">power</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let mut any = false;
    for (mi, m) in Method::ALL.iter().enumerate() {
        let pts = table.curve(name, *m);
        if pts.is_empty() {
            continue;
        }
        any = true;
        let color = METHOD_COLORS[mi];
        let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.r2), py(r.power))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            coords.join(" ")
        );
        for r in &pts {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", px(r.r2), py(r.power));
        }
        let ly = y1 + 14.0 * mi as f64;
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", x1 - 60.0, ly);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{m}</text>", x1 - 45.0, ly + 9.0);
    }
    if !any {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no data</text>", (x0 + x1) / 2.0, (y0 + y1) / 2.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `power.csv`, one power-curve SVG per setting name, and one CSV +
/// SVG pair per heatmap into `dir`. Returns the written paths.
pub fn write_outputs(dir: &Path, table: &PowerTable, heatmaps: &[DiscoveryHeatmap]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| EpistasisError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| EpistasisError::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("power.csv".into(), table.to_csv())?;
    let mut names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for name in names {
        put(format!("power_{name}.svg"), power_curve_svg(table, name))?;
    }
    for h in heatmaps {
        put(format!("{}.csv", h.file_stem()), h.to_csv())?;
        put(format!("{}.svg", h.file_stem()), heatmap_svg(h))?;
    }
    Ok(written)
}
