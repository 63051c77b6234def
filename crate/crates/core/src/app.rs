//! Data ingestion, pipeline orchestration and reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::design::ColumnMatrix;
use crate::error::{Result, SurfError};
use crate::forward::{forward_select, ForwardConfig};
use crate::glm::{Family, GlmSpec};
use crate::ranking::{rank_variables, RankingConfig};
use crate::rng::{self, tag};
use crate::sim::{run_scenario, Method, ScenarioMetrics, ScenarioSpec};
use crate::stability::{stability_select, StabilityConfig};
use crate::table::read_table;
use crate::tree::{
    build_augmented_design, map_design_selection, parse_taxonomy, read_taxonomy_tsv, AugmentedDesign,
    TaxonomyTree,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    #[default]
    None,
    Proportions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub normalize: Normalize,
    /// Covariates kept out of normalisation and aggregation.
    pub passthrough: Vec<String>,
    pub center: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            normalize: Normalize::None,
            passthrough: Vec::new(),
            center: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x p`, value columns in table order with the response removed.
    pub x: Array2<f64>,
    pub column_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub y: Vec<f64>,
    pub response: String,
    pub family: Family,
    /// Leaf `k` of the tree is column `taxon_columns[k]`.
    pub taxonomy: Option<TaxonomyTree>,
    pub taxon_columns: Vec<usize>,
    pub passthrough: Vec<String>,
    pub normalized: Normalize,
    pub centered: bool,
    /// Column means removed by centering (zeros when not centred).
    pub column_means: Vec<f64>,
}

impl Dataset {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Builds a dataset from in-memory parts. Proportion normalisation,
    /// centering and taxonomy attachment follow `options`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        x: Array2<f64>,
        column_names: Vec<String>,
        sample_ids: Vec<String>,
        y: Vec<f64>,
        response: &str,
        family: Family,
        taxonomy: Option<(Vec<String>, Vec<String>)>,
        options: &LoadOptions,
    ) -> Result<Dataset> {
        let (n, p) = x.dim();
        if column_names.len() != p || sample_ids.len() != n || y.len() != n {
            return Err(SurfError::DimensionMismatch(format!(
                "{n} x {p} matrix with {} names, {} sample ids and {} responses",
                column_names.len(),
                sample_ids.len(),
                y.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = column_names.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(SurfError::InvalidConfig(format!("duplicate column name `{dup}`")));
        }
        family.validate_response(&y)?;
        let index: HashMap<&str, usize> = column_names
            .iter()
            .enumerate()
            .map(|(j, c)| (c.as_str(), j))
            .collect();
        let mut is_passthrough = vec![false; p];
        for name in &options.passthrough {
            match index.get(name.as_str()) {
                Some(&j) => is_passthrough[j] = true,
                None => {
                    return Err(SurfError::InvalidConfig(format!(
                        "passthrough column `{name}` is not in the table"
                    )))
                }
            }
        }

        let mut x = x;
        if options.normalize == Normalize::Proportions {
            for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
                let mut total = 0.0;
                for (j, v) in row.iter().enumerate() {
                    if is_passthrough[j] {
                        continue;
                    }
                    if *v < 0.0 {
                        return Err(SurfError::Parse {
                            row: i + 2,
                            column: column_names[j].clone(),
                            message: "negative abundance cannot be normalised".into(),
                        });
                    }
                    total += v;
                }
                if !(total > 0.0) {
                    return Err(SurfError::InvalidConfig(format!(
                        "sample `{}` has zero total abundance",
                        sample_ids[i]
                    )));
                }
                for (j, v) in row.iter_mut().enumerate() {
                    if !is_passthrough[j] {
                        *v /= total;
                    }
                }
            }
        }

        let column_means = if options.center {
            let means: Vec<f64> = x.mean_axis(Axis(0)).map_or(vec![0.0; p], |m| m.to_vec());
            for mut row in x.axis_iter_mut(Axis(0)) {
                row.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
            }
            means
        } else {
            vec![0.0; p]
        };

        let (tree, taxon_columns) = match taxonomy {
            None => (None, Vec::new()),
            Some((ids, lineages)) => {
                let mut unknown = Vec::new();
                let mut cols = Vec::with_capacity(ids.len());
                for id in &ids {
                    match index.get(id.as_str()) {
                        Some(&j) if !is_passthrough[j] && id != response => cols.push(j),
                        _ => unknown.push(id.clone()),
                    }
                }
                if !unknown.is_empty() {
                    return Err(SurfError::Taxonomy(format!(
                        "taxonomy lists OTUs absent from the table: {}",
                        unknown.join(", ")
                    )));
                }
                // leaves follow table column order
                let mut pairs: Vec<(usize, String, String)> = cols
                    .into_iter()
                    .zip(ids)
                    .zip(lineages)
                    .map(|((c, i), l)| (c, i, l))
                    .collect();
                pairs.sort_by_key(|t| t.0);
                let cols: Vec<usize> = pairs.iter().map(|t| t.0).collect();
                let ids: Vec<String> = pairs.iter().map(|t| t.1.clone()).collect();
                let lineages: Vec<String> = pairs.into_iter().map(|t| t.2).collect();
                (Some(parse_taxonomy(&ids, &lineages)?), cols)
            }
        };

        Ok(Dataset {
            x,
            column_names,
            sample_ids,
            y,
            response: response.to_string(),
            family,
            taxonomy: tree,
            taxon_columns,
            passthrough: options.passthrough.clone(),
            normalized: options.normalize,
            centered: options.center,
            column_means,
        })
    }
}

/// Reads an abundance table (and optionally a taxonomy TSV) into a dataset.
pub fn load_dataset(
    table_path: &Path,
    taxonomy_path: Option<&Path>,
    response: &str,
    family: Family,
    options: &LoadOptions,
) -> Result<Dataset> {
    let table = read_table(table_path)?;
    let r = table.column_index(response).ok_or_else(|| {
        SurfError::InvalidConfig(format!("response column `{response}` not found in the table"))
    })?;
    let y = table.numeric_column(r)?;
    let keep: Vec<usize> = (0..table.columns.len()).filter(|&j| j != r).collect();
    let mut x = Array2::zeros((table.nrows(), keep.len()));
    for (k, &j) in keep.iter().enumerate() {
        for (i, v) in table.numeric_column(j)?.into_iter().enumerate() {
            x[[i, k]] = v;
        }
    }
    let names = keep.iter().map(|&j| table.columns[j].clone()).collect();
    let taxonomy = match taxonomy_path {
        Some(p) => Some(read_taxonomy_tsv(BufReader::new(File::open(p)?))?),
        None => None,
    };
    Dataset::from_parts(x, names, table.row_ids, y, response, family, taxonomy, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Select,
    Rank,
    Stability,
    Simulate,
    Aggregate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Select => "select",
            Mode::Rank => "rank",
            Mode::Stability => "stability",
            Mode::Simulate => "simulate",
            Mode::Aggregate => "aggregate",
        }
    }
}

/// Everything a run needs besides the data. Stage seeds are derived from
/// `seed`; the seeds inside the stage sections are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ranking: RankingConfig,
    pub forward: ForwardConfig,
    pub stability: StabilityConfig,
    pub scenario: Option<ScenarioSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            ranking: RankingConfig::default(),
            forward: ForwardConfig::default(),
            stability: StabilityConfig::default(),
            scenario: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SurfError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(s), Some(dir)) = (cfg.scenario.as_mut(), path.parent()) {
            for f in [&mut s.design_file, &mut s.test_design_file].into_iter().flatten() {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    /// Copies with stage seeds derived from the run seed.
    pub fn seeded(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.ranking.seed = rng::derive_seed(self.seed, &[tag::RANKING]);
        c.forward.seed = rng::derive_seed(self.seed, &[tag::FORWARD]);
        c.stability.seed = rng::derive_seed(self.seed, &[tag::STABILITY]);
        if let Some(s) = c.scenario.as_mut() {
            s.seed = rng::derive_seed(self.seed, &[tag::SIMULATION]);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub p: usize,
    pub response: String,
    pub normalized: Normalize,
    pub centered: bool,
    pub passthrough: Vec<String>,
    pub taxonomy_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub node: String,
    pub equal_to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub columns: Vec<String>,
    pub dropped: Vec<DroppedColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVariable {
    pub column: usize,
    pub name: String,
    pub frequency: usize,
    pub tie_break: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTrace {
    pub completed: usize,
    pub skipped: usize,
    /// Best first.
    pub order: Vec<RankedVariable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub column: usize,
    pub name: String,
    pub llr: f64,
    pub critical_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub candidate: Option<String>,
    pub p_value: Option<f64>,
    pub critical_value: Option<f64>,
    pub hit_max_steps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCoefficient {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModel {
    /// Intercept on the centred columns.
    pub intercept: f64,
    /// Intercept for the uncentred columns.
    pub intercept_original: f64,
    /// Coefficients of the selected design columns.
    pub augmented: Vec<NamedCoefficient>,
    /// Effective coefficient of every table column touched by the model.
    pub original: Vec<NamedCoefficient>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Leaf-level equalities imposed by selected taxa.
    pub constraints: Vec<String>,
    pub leaf_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub q: usize,
    pub cutoff: f64,
    pub completed: usize,
    pub skipped: usize,
    pub selected: Vec<String>,
    pub frequency: Vec<NamedCoefficient>,
}

/// Deterministic part of a report: a function of data, config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub mode: Mode,
    pub seed: u64,
    pub family: Family,
    pub config: PipelineConfig,
    pub dataset: Option<DatasetSummary>,
    pub design: Option<DesignSummary>,
    pub ranking: Option<RankingTrace>,
    pub steps: Vec<StepReport>,
    pub termination: Option<Termination>,
    pub model: Option<FinalModel>,
    pub stability: Option<StabilityReport>,
    pub simulation: Option<ScenarioMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub body: ReportBody,
    pub meta: ReportMeta,
}

impl Report {
    /// Canonical JSON of the body alone.
    pub fn body_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.body)?)
    }
}

/// The design the selection runs on: the augmented design when a taxonomy
/// is attached (non-taxon columns appended unchanged), otherwise `x`.
pub fn augment(dataset: &Dataset) -> Result<Option<AugmentedDesign>> {
    let Some(tree) = &dataset.taxonomy else {
        return Ok(None);
    };
    let taxa = dataset.x.select(Axis(1), &dataset.taxon_columns);
    let in_tree: HashSet<usize> = dataset.taxon_columns.iter().copied().collect();
    let rest: Vec<usize> = (0..dataset.ncols()).filter(|j| !in_tree.contains(j)).collect();
    let names: Vec<String> = rest.iter().map(|&j| dataset.column_names[j].clone()).collect();
    let design = build_augmented_design(taxa.view(), tree)?;
    let mut design = design.with_passthrough(dataset.x.select(Axis(1), &rest).view(), &names)?;
    // leaf columns carry table names rather than lineage labels
    for (k, &j) in dataset.taxon_columns.iter().enumerate() {
        design.labels[k] = dataset.column_names[j].clone();
    }
    Ok(Some(design))
}

struct Working {
    matrix: ColumnMatrix,
    labels: Vec<String>,
    /// Mean of each working column on the original (uncentred) scale.
    means: Vec<f64>,
    augmented: Option<AugmentedDesign>,
    /// Table column behind each passthrough/non-taxon working column.
    rest: Vec<usize>,
}

fn working_design(dataset: &Dataset) -> Result<Working> {
    match augment(dataset)? {
        None => Ok(Working {
            matrix: ColumnMatrix::from_view(dataset.x.view()),
            labels: dataset.column_names.clone(),
            means: dataset.column_means.clone(),
            augmented: None,
            rest: (0..dataset.ncols()).collect(),
        }),
        Some(design) => {
            let tree = dataset.taxonomy.as_ref().expect("augmented designs need a tree");
            let in_tree: HashSet<usize> = dataset.taxon_columns.iter().copied().collect();
            let rest: Vec<usize> = (0..dataset.ncols()).filter(|j| !in_tree.contains(j)).collect();
            let leaf_means: Vec<f64> = dataset
                .taxon_columns
                .iter()
                .map(|&j| dataset.column_means[j])
                .collect();
            let means = design
                .column_map
                .iter()
                .map(|src| match src {
                    crate::tree::ColumnSource::Leaf { otu, .. } => leaf_means[*otu],
                    crate::tree::ColumnSource::Internal { node } => {
                        tree.leaves_under(*node).iter().map(|&o| leaf_means[o]).sum()
                    }
                    crate::tree::ColumnSource::Passthrough { index } => dataset.column_means[rest[*index]],
                })
                .collect();
            Ok(Working {
                matrix: ColumnMatrix::from_view(design.matrix.view()),
                labels: design.labels.clone(),
                means,
                augmented: Some(design),
                rest,
            })
        }
    }
}

fn dataset_summary(d: &Dataset) -> DatasetSummary {
    DatasetSummary {
        n: d.nrows(),
        p: d.ncols(),
        response: d.response.clone(),
        normalized: d.normalized,
        centered: d.centered,
        passthrough: d.passthrough.clone(),
        taxonomy_leaves: d.taxonomy.as_ref().map_or(0, |t| t.leaf_count()),
    }
}

fn design_summary(design: &AugmentedDesign, tree: &TaxonomyTree) -> DesignSummary {
    DesignSummary {
        columns: design.labels.clone(),
        dropped: design
            .dropped
            .iter()
            .map(|&(node, dup)| DroppedColumn {
                node: tree.nodes[node].label.clone(),
                equal_to: design.labels[dup].clone(),
            })
            .collect(),
    }
}

fn final_model(
    dataset: &Dataset,
    work: &Working,
    selected: &[usize],
    fit: &crate::glm::GlmFit,
) -> FinalModel {
    let coefs: Vec<(usize, f64)> = selected.iter().copied().zip(fit.coefficients.iter().copied()).collect();
    let intercept_original = fit.intercept - coefs.iter().map(|&(j, b)| b * work.means[j]).sum::<f64>();
    let augmented = coefs
        .iter()
        .map(|&(j, b)| NamedCoefficient {
            name: work.labels[j].clone(),
            value: b,
        })
        .collect();
    let (original, constraints, leaf_terms) = match (&work.augmented, &dataset.taxonomy) {
        (Some(design), Some(tree)) => {
            let leaf = map_design_selection(design, &coefs, tree);
            let mut original: Vec<(usize, f64)> = leaf
                .effective
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(otu, v)| (dataset.taxon_columns[otu], *v))
                .collect();
            for &(j, b) in &coefs {
                if let Some(crate::tree::ColumnSource::Passthrough { index }) = design.column_map.get(j) {
                    original.push((work.rest[*index], b));
                }
            }
            original.sort_by_key(|t| t.0);
            (original, leaf.constraints, leaf.leaf_terms)
        }
        _ => {
            let mut original = coefs.clone();
            original.sort_by_key(|t| t.0);
            (original, Vec::new(), Vec::new())
        }
    };
    FinalModel {
        intercept: fit.intercept,
        intercept_original,
        augmented,
        original: original
            .into_iter()
            .map(|(j, v)| NamedCoefficient {
                name: dataset.column_names[j].clone(),
                value: v,
            })
            .collect(),
        deviance: fit.deviance,
        log_likelihood: fit.log_likelihood,
        converged: fit.converged,
        constraints,
        leaf_terms,
    }
}

/// Runs one pipeline mode. `simulate` needs `config.scenario` and ignores
/// `dataset`; every other mode needs a dataset.
pub fn run_pipeline(dataset: Option<&Dataset>, mode: Mode, config: &PipelineConfig) -> Result<Report> {
    let start = Instant::now();
    let seeded = config.seeded();
    let family = match (mode, dataset, &config.scenario) {
        (Mode::Simulate, _, Some(s)) => s.family,
        (Mode::Simulate, _, None) => {
            return Err(SurfError::InvalidConfig("simulate mode needs a [scenario] section".into()))
        }
        (_, Some(d), _) => d.family,
        (_, None, _) => {
            return Err(SurfError::InvalidConfig(format!("{} mode needs a dataset", mode.name())))
        }
    };
    let mut body = ReportBody {
        mode,
        seed: config.seed,
        family,
        config: config.clone(),
        dataset: dataset.filter(|_| mode != Mode::Simulate).map(dataset_summary),
        design: None,
        ranking: None,
        steps: Vec::new(),
        termination: None,
        model: None,
        stability: None,
        simulation: None,
    };

    if mode == Mode::Simulate {
        let spec = seeded.scenario.expect("checked above");
        let methods = if spec.methods.is_empty() { vec![Method::Surf] } else { spec.methods.clone() };
        body.simulation = Some(run_scenario(&spec, &methods).map_err(|e| e.at_stage("simulate"))?);
        return Ok(finish(body, start));
    }

    let dataset = dataset.expect("checked above");
    let work = working_design(dataset).map_err(|e| e.at_stage("aggregate"))?;
    if let (Some(design), Some(tree)) = (&work.augmented, &dataset.taxonomy) {
        body.design = Some(design_summary(design, tree));
    }
    let spec = GlmSpec::new(dataset.family);
    let y = &dataset.y;

    match mode {
        Mode::Aggregate => {
            if work.augmented.is_none() {
                return Err(SurfError::InvalidConfig("aggregate mode needs a taxonomy".into())
                    .at_stage("aggregate"));
            }
        }
        Mode::Stability => {
            let r = stability_select(&work.matrix, y, &spec, &seeded.stability)
                .map_err(|e| e.at_stage("stability"))?;
            body.stability = Some(StabilityReport {
                q: r.q,
                cutoff: seeded.stability.cutoff,
                completed: r.completed,
                skipped: r.skipped,
                selected: r.selected.iter().map(|&j| work.labels[j].clone()).collect(),
                frequency: r
                    .frequency
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| **f > 0.0)
                    .map(|(j, f)| NamedCoefficient {
                        name: work.labels[j].clone(),
                        value: *f,
                    })
                    .collect(),
            });
        }
        Mode::Rank | Mode::Select => {
            let ranking =
                rank_variables(&work.matrix, y, &spec, &seeded.ranking).map_err(|e| e.at_stage("ranking"))?;
            body.ranking = Some(RankingTrace {
                completed: ranking.completed,
                skipped: ranking.skipped,
                order: ranking
                    .order
                    .iter()
                    .map(|&j| RankedVariable {
                        column: j,
                        name: work.labels[j].clone(),
                        frequency: ranking.frequency[j],
                        tie_break: ranking.tie_break[j],
                    })
                    .collect(),
            });
            if mode == Mode::Select {
                let result = forward_select(&work.matrix, y, &spec, &ranking, &seeded.forward)
                    .map_err(|e| e.at_stage("forward selection"))?;
                body.steps = result
                    .steps
                    .iter()
                    .map(|s| StepReport {
                        column: s.variable,
                        name: work.labels[s.variable].clone(),
                        llr: s.llr,
                        critical_value: s.critical_value,
                        p_value: s.p_value,
                    })
                    .collect();
                body.termination = Some(Termination {
                    candidate: result.terminal_candidate.map(|j| work.labels[j].clone()),
                    p_value: result.terminal_p_value,
                    critical_value: result.terminal_critical_value,
                    hit_max_steps: result.hit_max_steps,
                });
                body.model = Some(final_model(dataset, &work, &result.selected(), &result.final_model));
            }
        }
        Mode::Simulate => unreachable!(),
    }
    Ok(finish(body, start))
}

fn finish(body: ReportBody, start: Instant) -> Report {
    Report {
        body,
        meta: ReportMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Text,
}

/// Human-readable summary.
pub fn render_text(report: &Report) -> String {
    let b = &report.body;
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}  family: {:?}  seed: {}", b.mode.name(), b.family, b.seed);
    if let Some(d) = &b.dataset {
        let _ = writeln!(
            s,
            "data: {} samples, {} columns, response `{}`{}",
            d.n,
            d.p,
            d.response,
            if d.centered { ", centred" } else { "" }
        );
    }
    if let Some(d) = &b.design {
        let _ = writeln!(s, "augmented design: {} columns", d.columns.len());
        for dr in &d.dropped {
            let _ = writeln!(s, "  dropped {} (equal to {})", dr.node, dr.equal_to);
        }
    }
    if let Some(r) = &b.ranking {
        let _ = writeln!(s, "ranking over {} subsamples ({} skipped), top 10:", r.completed, r.skipped);
        for (k, v) in r.order.iter().take(10).enumerate() {
            let _ = writeln!(s, "  {:>3}. {} (selected {} times)", k + 1, v.name, v.frequency);
        }
    }
    if b.mode == Mode::Select {
        if b.steps.is_empty() {
            let _ = writeln!(s, "selected variables: none");
        } else {
            let _ = writeln!(s, "selected variables:");
            for st in &b.steps {
                let _ = writeln!(
                    s,
                    "  {}  LLR {:.4}  critical value {:.4}  p-value {:.4}",
                    st.name, st.llr, st.critical_value, st.p_value
                );
            }
        }
        if let Some(t) = &b.termination {
            if let (Some(c), Some(p)) = (&t.candidate, t.p_value) {
                let _ = writeln!(s, "stopped at {c} (p-value {p:.4})");
            }
        }
    }
    if let Some(m) = &b.model {
        let _ = writeln!(s, "intercept: {}", m.intercept_original);
        for c in &m.original {
            let _ = writeln!(s, "  {} = {}", c.name, c.value);
        }
        for c in &m.constraints {
            let _ = writeln!(s, "  {c}");
        }
    }
    if let Some(st) = &b.stability {
        let _ = writeln!(s, "stability selection (q = {}, cutoff {}):", st.q, st.cutoff);
        if st.selected.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for v in &st.selected {
            let _ = writeln!(s, "  {v}");
        }
    }
    if let Some(sim) = &b.simulation {
        let _ = writeln!(s, "scenario {} ({} replicates)", sim.scenario, sim.n_reps);
        for m in &sim.methods {
            let _ = writeln!(
                s,
                "  {}: tp mean {:.3}, fp mean {:.3}, none selected in {}",
                m.method.name(),
                m.tp_mean,
                m.fp_mean,
                m.zero_selected
            );
        }
    }
    let _ = writeln!(s, "wall clock: {:.2}s", report.meta.wall_clock_seconds);
    s
}

pub fn write_report_to<W: Write>(report: &Report, mut writer: W, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut writer, report)?;
            writeln!(writer)?;
        }
        ReportFormat::Text => writer.write_all(render_text(report).as_bytes())?,
    }
    writer.flush()?;
    Ok(())
}

pub fn write_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    write_report_to(report, BufWriter::new(File::create(path)?), format)
}

pub fn read_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
