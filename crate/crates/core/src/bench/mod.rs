//! Benchmark harness: experiment grid, RMSE against the analytic oracle,
//! bootstrap intervals, report emission and the portable file format.

pub mod format;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize};

use crate::baselines::{ipw_estimate, train_propensity, train_unet_plus, IpwConfig, Propensities};
use crate::dgp::{build_test_set, simulate_factual, DgpParams, TestCase, TestSetSpec, Trajectory};
use crate::error::{invalid_arg, Error, Result};
use crate::gcomp::{train_gst_unet, CurriculumSchedule, TrainConfig};
use crate::lattice::{Field, RngStream};
use crate::nets::NetConfig;

pub use format::{
    load_checkpoint, load_test_set, load_trajectory, save_checkpoint, save_test_set, save_trajectory, Bundle,
    TrainedModel, SCHEMA_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    GstUnet,
    GstUnetNoAttention,
    GstUnetNoCurriculum,
    UnetPlus,
    Ipw,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::GstUnet,
        ModelKind::GstUnetNoAttention,
        ModelKind::GstUnetNoCurriculum,
        ModelKind::UnetPlus,
        ModelKind::Ipw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::GstUnet => "gst_unet",
            ModelKind::GstUnetNoAttention => "gst_unet_no_attention",
            ModelKind::GstUnetNoCurriculum => "gst_unet_no_curriculum",
            ModelKind::UnetPlus => "unet_plus",
            ModelKind::Ipw => "ipw",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// (N_X, N_Y).
    pub grid: (usize, usize),
    pub t_len: usize,
    pub tau: usize,
    pub beta1: Vec<f64>,
    pub models: Vec<ModelKind>,
    pub n_test: usize,
    pub history_len: usize,
    pub n_rollouts: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// 0 skips the bootstrap; the interval columns are then NaN.
    pub n_boot: usize,
    pub ci_level: f64,
    /// When false every runtime is reported as 0 so reports are byte-stable.
    pub timing: bool,
    pub dgp: DgpParams,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSchedule,
    pub ipw: IpwConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BenchConfig {
    pub fn desk() -> Self {
        let tau = 5;
        Self {
            grid: (32, 32),
            t_len: 200,
            tau,
            beta1: vec![0.0, 1.0, 2.0],
            models: vec![ModelKind::GstUnet, ModelKind::UnetPlus],
            n_test: 20,
            history_len: 10,
            n_rollouts: 100,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("bench_out"),
            n_boot: 40,
            ci_level: 0.95,
            timing: true,
            dgp: DgpParams::default(),
            net: NetConfig::desk(tau),
            train: TrainConfig::desk(),
            curriculum: CurriculumSchedule { tau, ..CurriculumSchedule::default() },
            ipw: IpwConfig { horizon: tau, ..IpwConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        if let Some(b) = self.beta1.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return bad(format!("beta1 values must be finite and >= 0, got {b}"));
        }
        if self.beta1.is_empty() || self.models.is_empty() || self.seeds.is_empty() {
            return bad("at least one beta1 value, model and seed are required".into());
        }
        if self.tau == 0 || self.t_len <= self.tau {
            return bad(format!("need t_len > tau >= 1, got t_len {} and tau {}", self.t_len, self.tau));
        }
        if self.n_test == 0 || self.history_len < self.dgp.lags.max(1) {
            return bad(format!("need n_test >= 1 and history_len >= lags ({})", self.dgp.lags));
        }
        if self.n_boot == 1 || (self.n_boot > 0 && self.n_test < 2) {
            return bad("the bootstrap needs n_boot >= 2 and n_test >= 2 (or n_boot = 0)".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        self.params(0.0, 0).validate()?;
        self.net.validate()?;
        self.net.check_grid(self.grid.1, self.grid.0)?;
        self.train.validate()
    }

    /// Simulation parameters of one grid cell.
    pub fn params(&self, beta1: f64, seed: u64) -> DgpParams {
        DgpParams { seed, ..self.dgp.clone() }.with_grid(self.grid.0, self.grid.1).with_beta1(beta1)
    }

    pub fn test_spec(&self) -> TestSetSpec {
        TestSetSpec { n_test: self.n_test, history_len: self.history_len, horizon: self.tau, n_rollouts: self.n_rollouts }
    }
}

/// Mean and SD (n − 1 denominator) of the per-case RMSEs.
#[derive(Clone, Debug, PartialEq)]
pub struct RmseSummary {
    pub rmse: f64,
    pub sd: f64,
    pub per_case: Vec<f64>,
}

/// Per-case RMSE over unmasked cells, summarised across cases.
pub fn evaluate_rmse(predictions: &[Field], oracle: &[Field], mask: Option<&Field>) -> Result<RmseSummary> {
    if predictions.len() != oracle.len() || predictions.is_empty() {
        return invalid_arg(format!(
            "need one prediction per oracle field, got {} and {}",
            predictions.len(),
            oracle.len()
        ));
    }
    let mut per_case = Vec::with_capacity(oracle.len());
    for (p, o) in predictions.iter().zip(oracle) {
        if !p.same_shape(o) || mask.is_some_and(|m| !m.same_shape(o)) {
            return invalid_arg("prediction, oracle and mask shapes differ");
        }
        let (mut sse, mut n) = (0.0, 0usize);
        for i in 0..o.len() {
            if mask.is_none_or(|m| m.values()[i] != 0.0) {
                sse += (p.values()[i] - o.values()[i]).powi(2);
                n += 1;
            }
        }
        if n == 0 {
            return invalid_arg("mask excludes every cell");
        }
        per_case.push((sse / n as f64).sqrt());
    }
    let (rmse, sd) = mean_sd(&per_case);
    Ok(RmseSummary { rmse, sd, per_case })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percentile bootstrap of the mean, resampling cases with replacement.
pub fn bootstrap_ci(stats: &[f64], n_boot: usize, level: f64, rng: &mut RngStream) -> Result<(f64, f64)> {
    if stats.len() < 2 {
        return invalid_arg(format!("bootstrap needs >= 2 cases, got {}", stats.len()));
    }
    if n_boot < 2 {
        return invalid_arg(format!("bootstrap needs n_boot >= 2, got {n_boot}"));
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid_arg(format!("level must lie in (0, 1), got {level}"));
    }
    let n = stats.len();
    // offsets from stats[0] keep identical inputs exact
    let base = stats[0];
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| base + (0..n).map(|_| stats[rng.below(n)] - base).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Linear interpolation between order statistics of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn nan_if_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One grid cell. A failed cell carries NaN numbers and the error text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmseRow {
    pub model: String,
    pub beta1: f64,
    pub tau: usize,
    pub seed: u64,
    #[serde(deserialize_with = "nan_if_null")]
    pub rmse: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub sd: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub ci_lo: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub ci_hi: f64,
    pub runtime_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PartialEq for RmseRow {
    /// NaN compares equal to NaN so failed rows survive round trips.
    fn eq(&self, other: &Self) -> bool {
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits() || a == b || (a.is_nan() && b.is_nan());
        self.model == other.model
            && self.tau == other.tau
            && self.seed == other.seed
            && same(self.beta1, other.beta1)
            && same(self.rmse, other.rmse)
            && same(self.sd, other.sd)
            && same(self.ci_lo, other.ci_lo)
            && same(self.ci_hi, other.ci_hi)
            && same(self.runtime_s, other.runtime_s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rows: Vec<RmseRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

pub const CSV_COLUMNS: [&str; 9] = ["model", "beta1", "tau", "seed", "rmse", "sd", "ci_lo", "ci_hi", "runtime_s"];

impl RmseReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.beta1.to_string(),
                r.tau.to_string(),
                r.seed.to_string(),
                r.rmse.to_string(),
                r.sd.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
                r.runtime_s.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        if rd.headers()?.iter().ne(CSV_COLUMNS) {
            return invalid_arg(format!("csv header must be {}", CSV_COLUMNS.join(",")));
        }
        let rows = rd.deserialize().collect::<std::result::Result<Vec<RmseRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }

    pub fn read(path: &Path, format: ReportFormat) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match format {
            ReportFormat::Csv => Self::from_csv(&text),
            ReportFormat::Json => Self::from_json(&text),
        }
    }

    /// Mean RMSE of one (model, beta1) slice over seeds, ignoring failed
    /// rows; `None` when no row succeeded.
    pub fn mean_rmse(&self, model: &str, beta1: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.beta1 == beta1 && r.rmse.is_finite())
            .map(|r| r.rmse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Writes the whole report or nothing: an empty report is rejected before
/// the file is touched.
pub fn emit_report(report: &RmseReport, format: ReportFormat, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return invalid_arg("refusing to write an empty report");
    }
    let text = report.render(format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Simulated inputs shared by every model of one (beta1, seed) cell.
pub struct CellData {
    pub params: DgpParams,
    pub traj: Trajectory,
    pub tests: Vec<TestCase>,
}

/// Stream layout per seed: substream 1 simulates the factual trajectory,
/// 2 the test set, 3 drives the bootstrap.
pub fn simulate_cell(cfg: &BenchConfig, beta1: f64, seed: u64) -> Result<CellData> {
    let params = cfg.params(beta1, seed);
    let root = RngStream::new(seed, 0);
    let traj = simulate_factual(&params, cfg.t_len, &mut root.substream(1))?;
    let tests = build_test_set(&params, &cfg.test_spec(), &root.substream(2))?;
    Ok(CellData { params, traj, tests })
}

/// Trains `model` on the cell's factual data and predicts every test case.
pub fn fit_and_predict(cfg: &BenchConfig, model: ModelKind, cell: &CellData, seed: u64) -> Result<Vec<Field>> {
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let plan = &cell.tests[0].plan;
    let schedule = CurriculumSchedule { tau: cfg.tau, ..cfg.curriculum };
    let gst = |net: &NetConfig, train: &TrainConfig| -> Result<Vec<Field>> {
        let (m, _) = train_gst_unet(&cell.traj, plan, net, train, &schedule)?;
        cell.tests.iter().map(|c| Ok(m.infer_capo(&c.history, &c.plan)?.values)).collect()
    };
    match model {
        ModelKind::GstUnet => gst(&cfg.net, &train),
        ModelKind::GstUnetNoAttention => gst(&NetConfig { use_attention: false, ..cfg.net.clone() }, &train),
        ModelKind::GstUnetNoCurriculum => gst(&cfg.net, &TrainConfig { use_curriculum: false, ..train }),
        ModelKind::UnetPlus => {
            let (m, _) = train_unet_plus(&cell.traj, cfg.tau, &cfg.net, &train)?;
            cell.tests.iter().map(|c| Ok(m.predict(&c.history, &c.plan)?.values)).collect()
        }
        ModelKind::Ipw => {
            // population-level: one estimate over the factual segments,
            // shared by every test history
            let (pm, _) = train_propensity(&cell.traj, &cfg.net, &train, cfg.ipw.p_clip)?;
            let ipw = IpwConfig { horizon: cfg.tau, ..cfg.ipw };
            let est = ipw_estimate(&cell.traj, plan, Propensities::Model(&pm), &ipw)?;
            Ok(vec![est.capo.values; cell.tests.len()])
        }
    }
}

fn failed_row(model: ModelKind, beta1: f64, tau: usize, seed: u64, runtime_s: f64, err: &Error) -> RmseRow {
    RmseRow {
        model: model.to_string(),
        beta1,
        tau,
        seed,
        rmse: f64::NAN,
        sd: f64::NAN,
        ci_lo: f64::NAN,
        ci_hi: f64::NAN,
        runtime_s,
        error: Some(format!("{}: {err}", err.kind())),
    }
}

/// One report row; errors inside the cell become a NaN row.
pub fn run_cell(cfg: &BenchConfig, model: ModelKind, beta1: f64, seed: u64, cell: &Result<CellData>) -> RmseRow {
    let start = Instant::now();
    let outcome = cell.as_ref().map_err(|e| Error::InvalidState(format!("simulation failed: {e}"))).and_then(|cell| {
        let preds = fit_and_predict(cfg, model, cell, seed)?;
        let oracle: Vec<Field> = cell.tests.iter().map(|c| c.true_capo.clone()).collect();
        let mask = cell.tests[0].history.mask.as_ref();
        let summary = evaluate_rmse(&preds, &oracle, mask)?;
        if !summary.rmse.is_finite() {
            return Err(Error::InvalidState("non-finite predictions".into()));
        }
        let (ci_lo, ci_hi) = if cfg.n_boot > 0 {
            let mut rng = RngStream::new(seed, 0).substream(3);
            bootstrap_ci(&summary.per_case, cfg.n_boot, cfg.ci_level, &mut rng)?
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok((summary, ci_lo, ci_hi))
    });
    let runtime_s = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    match outcome {
        Ok((s, ci_lo, ci_hi)) => RmseRow {
            model: model.to_string(),
            beta1,
            tau: cfg.tau,
            seed,
            rmse: s.rmse,
            sd: s.sd,
            ci_lo,
            ci_hi,
            runtime_s,
            error: None,
        },
        Err(e) => failed_row(model, beta1, cfg.tau, seed, runtime_s, &e),
    }
}

/// Full grid in the order beta1 × seed × model. `on_row` sees each row as
/// soon as it is finished.
pub fn run_benchmark_with(cfg: &BenchConfig, mut on_row: impl FnMut(&RmseRow)) -> Result<RmseReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.beta1.len() * cfg.seeds.len() * cfg.models.len());
    for &beta1 in &cfg.beta1 {
        for &seed in &cfg.seeds {
            let cell = simulate_cell(cfg, beta1, seed);
            for &model in &cfg.models {
                let row = run_cell(cfg, model, beta1, seed, &cell);
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(RmseReport { rows })
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<RmseReport> {
    run_benchmark_with(cfg, |_| {})
}
