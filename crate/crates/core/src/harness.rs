//! Experiment runner: config, per-seed data preparation, the (regime, seed)
//! worker pool, paired t-tests and result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::aggregation::RoundTrace;
use crate::baselines::{run_regime, RegimeId, TrainConfig};
use crate::client::local_accuracy;
use crate::data::{
    load_csv, partition, split_train_test, CategoryMode, Dataset, DatasetSchema, PartitionSpec, Shard,
    Standardizer, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fairness::{FairnessNotion, FairnessReport};
use crate::numeric::RngState;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// hyperparameter grid for the projection rate.
pub const BETA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
/// hyperparameter grid for the EMA decay.
pub const DELTA_GRID: [f64; 3] = [0.001, 0.01, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Csv {
        schema: PathBuf,
        path: PathBuf,
        #[serde(default)]
        category_mode: CategoryMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub partition: PartitionSpec,
    pub regimes: Vec<RegimeId>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub test_fraction: f64,
    /// Regime the significance marks compare against.
    pub reference: RegimeId,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// The five-client high-heterogeneity ratios.
pub fn high_heterogeneity() -> PartitionSpec {
    PartitionSpec::two_groups(&[0.5, 0.1, 0.1, 0.2, 0.1], &[0.1, 0.4, 0.3, 0.1, 0.1])
}

/// The five-client low-heterogeneity ratios.
pub fn low_heterogeneity() -> PartitionSpec {
    PartitionSpec::two_groups(&[0.3, 0.3, 0.2, 0.1, 0.1], &[0.1, 0.2, 0.2, 0.2, 0.3])
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-high-heterogeneity".into(),
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec::default(),
            },
            partition: high_heterogeneity(),
            regimes: RegimeId::ALL.to_vec(),
            seeds: (1..=5).collect(),
            train: TrainConfig::default(),
            test_fraction: 0.2,
            reference: RegimeId::Mfairfl,
            out_dir: None,
        }
    }
}

fn on_grid(v: f64, grid: &[f64]) -> bool {
    grid.iter().any(|g| (g - v).abs() < 1e-12)
}

impl ExperimentConfig {
    /// Reads a config and resolves relative CSV paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { schema, path, .. } = &mut cfg.dataset {
            for p in [schema, path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.regimes.is_empty() {
            return Err(Error::Empty("no regimes".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("no seeds".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if self.train.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if let DatasetSource::Synthetic { spec } = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    /// Hyperparameters outside the hyperparameter grid. Allowed, but worth a look.
    pub fn grid_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !on_grid(self.train.beta, &BETA_GRID) {
            out.push(format!("beta = {} is off the grid {BETA_GRID:?}", self.train.beta));
        }
        if !on_grid(self.train.delta, &DELTA_GRID) {
            out.push(format!("delta = {} is off the grid {DELTA_GRID:?}", self.train.delta));
        }
        out
    }

    /// SHA-256 of the config as JSON with sorted keys, output dir excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        let value = serde_json::to_value(&c)?;
        let bytes = serde_json::to_vec(&value)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Train/test data and shards for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
    pub test_shards: Vec<Shard>,
}

pub fn load_dataset(source: &DatasetSource, seed: RngState) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic { spec } => spec.generate(seed),
        DatasetSource::Csv {
            schema,
            path,
            category_mode,
        } => {
            let schema = DatasetSchema::from_json_file(schema)?;
            let (data, report) = load_csv(path, &schema, *category_mode)?;
            log::info!(
                "{}: {} rows read, {} dropped for missing values",
                data.name,
                report.rows_read,
                report.rows_dropped_missing
            );
            Ok(data)
        }
    }
}

/// Split, standardize with training statistics, and partition both halves
/// with the same spec. The test shards give per-client accuracy.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let rs = RngState::new(seed);
    let data = load_dataset(&config.dataset, rs)?;
    let (mut train, mut test) = split_train_test(&data, config.test_fraction, rs)?;
    let st = Standardizer::fit(&train)?;
    st.apply(&mut train);
    st.apply(&mut test);
    let shards = partition(&train, &config.partition, rs)?;
    let test_shards = partition(&test, &config.partition, rs.derive("test"))?;
    Ok(Prepared {
        train,
        test,
        shards,
        test_shards,
    })
}

/// Trains one regime and evaluates it on the test split.
pub fn evaluate_cell(
    prepared: &Prepared,
    regime: RegimeId,
    train: &TrainConfig,
    seed: u64,
) -> Result<(FairnessReport, Vec<RoundTrace>)> {
    let obj = train.objective(prepared.train.input_dim(), &prepared.train.domain())?;
    let out = run_regime(regime, &prepared.shards, train, RngState::new(seed))?;
    let probs = out.model.predict(&obj.spec, &prepared.test.samples)?;
    let client_acc = prepared
        .test_shards
        .iter()
        .enumerate()
        .map(|(k, s)| local_accuracy(&obj.spec, out.model.for_client(k)?, s))
        .collect::<Result<Vec<_>>>()?;
    let report = FairnessReport::evaluate(&probs, &prepared.test.samples, &prepared.test.attributes, client_acc)?;
    Ok((report, out.trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub regime: RegimeId,
    pub report: Option<FairnessReport>,
    pub error: Option<String>,
    pub trace_path: Option<PathBuf>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.report.is_some()
    }
}

fn write_trace(path: &Path, trace: &[RoundTrace]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in trace {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Runs every (regime, seed) cell. A failing cell is recorded and the rest
/// continue. Traces go to `out/trace/` when `out` is given.
pub fn run(config: &ExperimentConfig, out: Option<&Path>, threads: Option<usize>) -> Result<Vec<RunRecord>> {
    config.validate()?;
    for w in config.grid_warnings() {
        log::warn!("{w}");
    }
    let hash = config.hash()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("trace"))?;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let prepared: Vec<(u64, std::result::Result<Prepared, String>)> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| (s, prepare(config, s).map_err(|e| e.to_string())))
            .collect()
    });
    let cells: Vec<(usize, RegimeId)> = (0..prepared.len())
        .flat_map(|i| config.regimes.iter().map(move |&r| (i, r)))
        .collect();
    let records = pool.install(|| {
        cells
            .par_iter()
            .map(|&(i, regime)| {
                let (seed, prep) = &prepared[i];
                let start = Instant::now();
                let mut rec = RunRecord {
                    config_hash: hash.clone(),
                    version: VERSION.into(),
                    seed: *seed,
                    regime,
                    report: None,
                    error: None,
                    trace_path: None,
                    wall_time_s: 0.0,
                };
                let result = match prep {
                    Ok(p) => evaluate_cell(p, regime, &config.train, *seed).map_err(|e| e.to_string()),
                    Err(e) => Err(format!("data preparation failed: {e}")),
                };
                match result {
                    Ok((report, trace)) => {
                        rec.report = Some(report);
                        if let Some(dir) = out {
                            let rel = PathBuf::from("trace").join(format!("{}-{}.jsonl", regime, seed));
                            match write_trace(&dir.join(&rel), &trace) {
                                Ok(()) => rec.trace_path = Some(rel),
                                Err(e) => log::warn!("trace for {regime}/{seed} not written: {e}"),
                            }
                        }
                    }
                    Err(e) => {
                        log::error!("{regime} seed {seed}: {e}");
                        rec.error = Some(e);
                    }
                }
                rec.wall_time_s = start.elapsed().as_secs_f64();
                rec
            })
            .collect::<Vec<_>>()
    });
    Ok(records)
}

/// Outcome of a paired two-sided t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TTest {
    Regular { t: f64, p: f64, significant: bool },
    /// Every paired difference is zero.
    Identical,
    /// Every paired difference equals the same non-zero `shift`. The t
    /// statistic is infinite; the difference is treated as significant.
    ConstantShift { shift: f64 },
}

impl TTest {
    pub fn significant(&self) -> bool {
        match self {
            TTest::Regular { significant, .. } => *significant,
            TTest::Identical => false,
            TTest::ConstantShift { .. } => true,
        }
    }

}

impl fmt::Display for TTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TTest::Regular { t, p, significant } => {
                write!(f, "t = {t:.4}, p = {p:.4}{}", if *significant { " *" } else { "" })
            }
            TTest::Identical => write!(f, "degenerate: identical"),
            TTest::ConstantShift { shift } => write!(f, "degenerate: constant shift {shift}"),
        }
    }
}

/// Paired two-sided Student t-test at the 95% level.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    // Rounding in the differences of equal shifts leaves ~1e-17 of spread.
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    if sd <= 1e-12 * scale.max(1.0) {
        return Ok(if mean.abs() <= 1e-12 {
            TTest::Identical
        } else {
            TTest::ConstantShift { shift: mean }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest::Regular {
        t,
        p,
        significant: p < 0.05,
    })
}

pub const METRICS: [&str; 5] = ["Acc", "DP", "EO", "AP", "CF"];

fn metric(report: &FairnessReport, attr: usize, m: &str) -> f64 {
    match m {
        "Acc" => report.accuracy,
        "DP" => report.attributes[attr].dp,
        "EO" => report.attributes[attr].eo,
        "AP" => report.attributes[attr].ap,
        _ => report.cf,
    }
}

/// Mean and spread of one metric for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub regime: RegimeId,
    pub attribute: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with one value.
    pub std: Option<f64>,
    pub test: Option<TTest>,
    /// `•` when the reference is significantly better, `∘` when worse.
    pub mark: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub version: String,
    pub reference: RegimeId,
    pub cells: Vec<SummaryCell>,
    pub failed_cells: usize,
}

/// Aggregates successful records per (regime, attribute, metric). Marks
/// compare each regime with `reference` over the seeds both completed.
pub fn summarize(records: &[RunRecord], reference: RegimeId) -> Result<Summary> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.ok()).collect();
    let first = ok
        .first()
        .ok_or_else(|| Error::Empty("no successful records to summarize".into()))?;
    let attrs: Vec<String> = first
        .report
        .as_ref()
        .map(|r| r.attributes.iter().map(|a| a.name.clone()).collect())
        .unwrap_or_default();
    let mut by_regime: BTreeMap<RegimeId, BTreeMap<u64, &FairnessReport>> = BTreeMap::new();
    for r in &ok {
        by_regime
            .entry(r.regime)
            .or_default()
            .insert(r.seed, r.report.as_ref().expect("filtered"));
    }
    let mut order: Vec<RegimeId> = Vec::new();
    for r in records {
        if by_regime.contains_key(&r.regime) && !order.contains(&r.regime) {
            order.push(r.regime);
        }
    }
    let mut cells = Vec::new();
    for regime in order {
        let runs = &by_regime[&regime];
        for (ai, aname) in attrs.iter().enumerate() {
            for m in METRICS {
                let vals: Vec<f64> = runs.values().map(|rep| metric(rep, ai, m)).collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let std = (n > 1).then(|| {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                });
                let mut test = None;
                let mut mark = String::new();
                if regime != reference {
                    if let Some(refs) = by_regime.get(&reference) {
                        let seeds: Vec<u64> = runs.keys().filter(|s| refs.contains_key(s)).copied().collect();
                        if seeds.len() >= 2 {
                            let a: Vec<f64> = seeds.iter().map(|s| metric(refs[s], ai, m)).collect();
                            let b: Vec<f64> = seeds.iter().map(|s| metric(runs[s], ai, m)).collect();
                            let t = paired_ttest(&a, &b)?;
                            if t.significant() {
                                let diff: f64 = a.iter().zip(&b).map(|(x, y)| x - y).sum();
                                let reference_better = if m == "Acc" { diff > 0.0 } else { diff < 0.0 };
                                mark = if reference_better { "•" } else { "∘" }.into();
                            }
                            test = Some(t);
                        }
                    }
                }
                cells.push(SummaryCell {
                    regime,
                    attribute: aname.clone(),
                    metric: m.into(),
                    n,
                    mean,
                    std,
                    test,
                    mark,
                });
            }
        }
    }
    Ok(Summary {
        config_hash: first.config_hash.clone(),
        version: first.version.clone(),
        reference,
        cells,
        failed_cells: records.len() - ok.len(),
    })
}

impl Summary {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "config_hash", "version", "regime", "attribute", "metric", "n", "mean", "std", "p", "mark",
        ])?;
        for c in &self.cells {
            let p = match c.test {
                Some(TTest::Regular { p, .. }) => format!("{p:.6}"),
                Some(TTest::ConstantShift { .. }) => "0".into(),
                Some(TTest::Identical) => "1".into(),
                None => String::new(),
            };
            w.write_record([
                self.config_hash.clone(),
                self.version.clone(),
                c.regime.to_string(),
                c.attribute.clone(),
                c.metric.clone(),
                c.n.to_string(),
                format!("{:.6}", c.mean),
                c.std.map(|s| format!("{s:.6}")).unwrap_or_default(),
                p,
                c.mark.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// One block per sensitive attribute with Acc/DP/EO/AP/CF columns.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "config {} (v{}), marks vs {}: • reference better, ∘ reference worse (paired t-test, 95%)\n",
            &self.config_hash[..12.min(self.config_hash.len())],
            self.version,
            self.reference
        );
        if self.failed_cells > 0 {
            s += &format!("{} cell(s) failed and are excluded\n", self.failed_cells);
        }
        let mut attrs: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !attrs.contains(&c.attribute.as_str()) {
                attrs.push(&c.attribute);
            }
        }
        for a in attrs {
            s += &format!("\n[{a}]\n{:<12}", "regime");
            for m in METRICS {
                s += &format!(" {m:>16}");
            }
            s += "\n";
            let mut regimes: Vec<RegimeId> = Vec::new();
            for c in self.cells.iter().filter(|c| c.attribute == a) {
                if !regimes.contains(&c.regime) {
                    regimes.push(c.regime);
                }
            }
            for r in regimes {
                s += &format!("{:<12}", r.as_str());
                for m in METRICS {
                    let c = self
                        .cells
                        .iter()
                        .find(|c| c.attribute == a && c.regime == r && c.metric == m)
                        .expect("every metric summarized");
                    let cell = match c.std {
                        Some(sd) => format!("{:.3}±{:.3}{}", c.mean, sd, c.mark),
                        None => format!("{:.3}{}", c.mean, c.mark),
                    };
                    s += &format!(" {cell:>16}");
                }
                s += "\n";
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub cells: usize,
    pub failed_cells: usize,
    pub wall_times_s: BTreeMap<String, f64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `config.json`, `records.json`, `results.csv`, `results.txt` and
/// `meta.json` into `dir`. Only `meta.json` carries timestamps.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    records: &[RunRecord],
    started_unix_s: u64,
) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    fs::write(dir.join("records.json"), serde_json::to_string_pretty(records)?)?;
    let summary = write_report(dir, records, config.reference)?;
    let meta = Meta {
        config_hash: config.hash()?,
        version: VERSION.into(),
        started_unix_s,
        finished_unix_s: unix_now(),
        cells: records.len(),
        failed_cells: records.iter().filter(|r| !r.ok()).count(),
        wall_times_s: records
            .iter()
            .map(|r| (format!("{}-{}", r.regime, r.seed), r.wall_time_s))
            .collect(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(summary)
}

/// Writes `results.csv` and `results.txt` from records.
pub fn write_report(dir: &Path, records: &[RunRecord], reference: RegimeId) -> Result<Summary> {
    let summary = summarize(records, reference)?;
    fs::write(dir.join("results.csv"), summary.to_csv()?)?;
    fs::write(dir.join("results.txt"), summary.to_text())?;
    Ok(summary)
}

pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("records.json"))?)?)
}

/// One point of the β × δ grid, scored on a validation split of train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub delta: f64,
    pub accuracy: f64,
    /// Largest violation of the configured notion over the attributes.
    pub violation: f64,
}

/// Enumerates the hyperparameter grid for `regime` on `seed`, holding out 0.2 of
/// the training split for validation. The pick is the most accurate point
/// whose violation is within `alpha + 0.05`, or the least violating point if
/// none is.
pub fn grid_search(config: &ExperimentConfig, regime: RegimeId, seed: u64) -> Result<(GridPoint, Vec<GridPoint>)> {
    config.validate()?;
    let rs = RngState::new(seed);
    let data = load_dataset(&config.dataset, rs)?;
    let (train, _) = split_train_test(&data, config.test_fraction, rs)?;
    let (mut fit, mut val) = split_train_test(&train, 0.2, rs.derive("validation"))?;
    let st = Standardizer::fit(&fit)?;
    st.apply(&mut fit);
    st.apply(&mut val);
    let prepared = Prepared {
        shards: partition(&fit, &config.partition, rs)?,
        test_shards: partition(&val, &config.partition, rs.derive("test"))?,
        train: fit,
        test: val,
    };
    let grid: Vec<(f64, f64)> = BETA_GRID
        .iter()
        .flat_map(|&b| DELTA_GRID.iter().map(move |&d| (b, d)))
        .collect();
    let points = grid
        .par_iter()
        .map(|&(beta, delta)| {
            let mut t = config.train.clone();
            t.beta = beta;
            t.delta = delta;
            let (rep, _) = evaluate_cell(&prepared, regime, &t, seed)?;
            let violation = rep
                .attributes
                .iter()
                .map(|a| match t.notion {
                    FairnessNotion::DemographicParity => a.dp,
                    FairnessNotion::EqualizedOdds => a.eo,
                    FairnessNotion::AccuracyParity => a.ap,
                })
                .fold(0.0, f64::max);
            Ok(GridPoint {
                beta,
                delta,
                accuracy: rep.accuracy,
                violation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let limit = config.train.alpha + 0.05;
    let best = points
        .iter()
        .filter(|p| p.violation <= limit)
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .or_else(|| points.iter().min_by(|a, b| a.violation.total_cmp(&b.violation)))
        .cloned()
        .ok_or_else(|| Error::Empty("empty grid".into()))?;
    Ok((best, points))
}
