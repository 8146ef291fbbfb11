use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use stgcomp::baselines::{ipw_estimate, train_propensity, train_unet_plus, IpwConfig, Propensities};
use stgcomp::bench::{
    emit_report, evaluate_rmse, load_checkpoint, load_test_set, load_trajectory, run_benchmark_with, save_checkpoint,
    save_test_set, save_trajectory, BenchConfig, Bundle, ModelKind, ReportFormat, RmseReport, TrainedModel,
};
use stgcomp::dgp::{build_test_set, simulate_factual, InterventionPlan};
use stgcomp::gcomp::{train_gst_unet, CurriculumSchedule, TrainConfig, TrainLog};
use stgcomp::lattice::{Field, RngStream};
use stgcomp::nets::NetConfig;
use stgcomp::{Error, Result};

#[derive(Parser)]
#[command(name = "stgcomp", version, about = "Spatiotemporal iterative G-computation: simulate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with BenchConfig keys; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<ReportFormat>,
    /// Grid as WIDTHxHEIGHT.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long, global = true)]
    t_len: Option<usize>,
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    beta1: Option<Vec<f64>>,
    /// Comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    history_len: Option<usize>,
    #[arg(long, global = true)]
    n_rollouts: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    kernel_size: Option<usize>,
    /// Report runtime_s as 0 so output is byte-stable.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a factual dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Write a test set with analytic CAPOs.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on a saved dataset and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gst_unet")]
        model: String,
        /// Take the intervention plan from this test set instead of drawing one.
        #[arg(long)]
        test_set: Option<PathBuf>,
    },
    /// CAPO predictions of a checkpoint for every case of a test set.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_set: PathBuf,
        /// Factual dataset whose segments the IPW estimate averages over.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full experiment grid.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model names.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Re-emit saved results in another format.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    Ok((w.trim().parse().map_err(|e| format!("{e}"))?, h.trim().parse().map_err(|e| format!("{e}"))?))
}

impl Common {
    fn bench_config(&self) -> Result<BenchConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => BenchConfig::desk(),
        };
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        if let Some(t) = self.t_len {
            cfg.t_len = t;
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        cfg.curriculum.tau = cfg.tau;
        cfg.ipw.horizon = cfg.tau;
        if let Some(b) = &self.beta1 {
            cfg.beta1 = b.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
            cfg.dgp.seed = s;
        }
        if let Some(n) = self.n_test {
            cfg.n_test = n;
        }
        if let Some(n) = self.history_len {
            cfg.history_len = n;
        }
        if let Some(n) = self.n_rollouts {
            cfg.n_rollouts = n;
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(k) = self.kernel_size {
            cfg.net.kernel_size = k;
        }
        if self.no_timing {
            cfg.timing = false;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }

    fn out(&self, cfg: &BenchConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
    }

    /// The one (beta1, seed) pair a single-dataset command works on.
    fn single(&self, cfg: &BenchConfig) -> Result<(f64, u64)> {
        match cfg.beta1.as_slice() {
            [b] => Ok((*b, self.seed.unwrap_or(cfg.dgp.seed))),
            _ => Err(Error::InvalidArgument("give exactly one --beta1 value for this command".into())),
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = common.bench_config()?;
    let (beta1, seed) = common.single(&cfg)?;
    let params = cfg.params(beta1, seed);
    params.validate()?;
    let traj = simulate_factual(&params, cfg.t_len, &mut RngStream::new(seed, 0).substream(1))?;
    let out = common.out(&cfg);
    save_trajectory(&out, &traj, Some(seed), json!({ "dgp": params, "t_len": cfg.t_len }))?;
    println!("{}", json!({ "wrote": out, "kind": "trajectory", "steps": traj.len(), "seed": seed }));
    Ok(())
}

fn oracle(common: &Common) -> Result<()> {
    let cfg = common.bench_config()?;
    let (beta1, seed) = common.single(&cfg)?;
    let params = cfg.params(beta1, seed);
    let tests = build_test_set(&params, &cfg.test_spec(), &RngStream::new(seed, 0).substream(2))?;
    let out = common.out(&cfg);
    save_test_set(&out, &tests, Some(seed), json!({ "dgp": params, "spec": cfg.test_spec() }))?;
    println!("{}", json!({ "wrote": out, "kind": "test_set", "cases": tests.len(), "seed": seed }));
    Ok(())
}

fn train(common: &Common, data: &Path, model: &str, test_set: Option<&Path>) -> Result<()> {
    let cfg = common.bench_config()?;
    let seed = common.seed.unwrap_or(cfg.dgp.seed);
    let model: ModelKind = model.parse()?;
    let traj = load_trajectory(data)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let plan = || -> Result<InterventionPlan> {
        match test_set {
            Some(dir) => {
                let cases = load_test_set(dir)?;
                let first = cases.first().ok_or_else(|| Error::InvalidArgument("test set is empty".into()))?;
                Ok(first.plan.clone())
            }
            None => InterventionPlan::random(0, cfg.tau, traj.grid(), &mut RngStream::new(seed, 0).substream(4)),
        }
    };
    let gst = |net: &NetConfig, tc: &TrainConfig| -> Result<(TrainedModel, TrainLog)> {
        let schedule = CurriculumSchedule { tau: cfg.tau, ..cfg.curriculum };
        let (m, log) = train_gst_unet(&traj, &plan()?, net, tc, &schedule)?;
        Ok((TrainedModel::Gst(m), log))
    };
    let (trained, log) = match model {
        ModelKind::GstUnet => gst(&cfg.net, &train_cfg)?,
        ModelKind::GstUnetNoAttention => gst(&NetConfig { use_attention: false, ..cfg.net.clone() }, &train_cfg)?,
        ModelKind::GstUnetNoCurriculum => gst(&cfg.net, &TrainConfig { use_curriculum: false, ..train_cfg.clone() })?,
        ModelKind::UnetPlus => {
            let (m, log) = train_unet_plus(&traj, cfg.tau, &cfg.net, &train_cfg)?;
            (TrainedModel::UnetPlus(m), log)
        }
        ModelKind::Ipw => {
            let (m, log) = train_propensity(&traj, &cfg.net, &train_cfg, cfg.ipw.p_clip)?;
            (TrainedModel::Propensity(m), log)
        }
    };
    let out = common.out(&cfg);
    save_checkpoint(&out, &trained, log.best_epoch, Some(seed))?;
    std::fs::write(out.join("train_log.jsonl"), log.to_lines())?;
    println!(
        "{}",
        json!({ "wrote": out, "kind": "checkpoint", "model": trained.kind(), "best_epoch": log.best_epoch, "best_val_loss": log.best_val_loss })
    );
    Ok(())
}

fn predict(common: &Common, checkpoint: &Path, test_set: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = common.bench_config()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let cases = load_test_set(test_set)?;
    let preds: Vec<Field> = match &model {
        TrainedModel::Gst(m) => cases.iter().map(|c| Ok(m.infer_capo(&c.history, &c.plan)?.values)).collect::<Result<_>>()?,
        TrainedModel::UnetPlus(m) => cases.iter().map(|c| Ok(m.predict(&c.history, &c.plan)?.values)).collect::<Result<_>>()?,
        TrainedModel::Propensity(m) => {
            let data = data.ok_or_else(|| Error::InvalidArgument("an ipw checkpoint needs --data".into()))?;
            let traj = load_trajectory(data)?;
            let plan = &cases.first().ok_or_else(|| Error::InvalidArgument("test set is empty".into()))?.plan;
            let ipw = IpwConfig { horizon: plan.horizon(), ..cfg.ipw };
            let est = ipw_estimate(&traj, plan, Propensities::Model(m), &ipw)?;
            vec![est.capo.values; cases.len()]
        }
    };
    let oracle: Vec<Field> = cases.iter().map(|c| c.true_capo.clone()).collect();
    let summary = evaluate_rmse(&preds, &oracle, cases[0].history.mask.as_ref())?;
    let out = common.out(&cfg);
    let mut bundle = Bundle::new(
        "predictions",
        None,
        json!({ "model": model.kind(), "rmse": summary.rmse, "sd": summary.sd, "per_case_rmse": summary.per_case }),
    );
    bundle.push_fields("capo", &preds);
    bundle.write(&out)?;
    println!("{}", json!({ "wrote": out, "model": model.kind(), "rmse": summary.rmse, "sd": summary.sd }));
    Ok(())
}

fn bench(common: &Common, models: Option<&[String]>) -> Result<()> {
    let mut cfg = common.bench_config()?;
    if let Some(m) = models {
        cfg.models = m.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    let format = common.format.unwrap_or(ReportFormat::Csv);
    let out = common.out(&cfg);
    let report = run_benchmark_with(&cfg, |row| {
        eprintln!("{}", serde_json::to_string(row).unwrap_or_default());
    })?;
    emit_report(&report, ReportFormat::Json, &out.join("results.json"))?;
    let path = out.join(format!("report.{}", format.extension()));
    emit_report(&report, format, &path)?;
    write_json(&out.join("config.json"), &serde_json::to_value(&cfg)?)?;
    println!("{}", json!({ "wrote": path, "rows": report.rows.len() }));
    Ok(())
}

fn report(common: &Common, input: &Path) -> Result<()> {
    let in_format = match input.extension().and_then(|e| e.to_str()) {
        Some("csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    };
    let report = RmseReport::read(input, in_format)?;
    let format = common.format.unwrap_or(ReportFormat::Csv);
    match &common.out {
        Some(path) => emit_report(&report, format, path)?,
        None => {
            if report.rows.is_empty() {
                return Err(Error::InvalidArgument("refusing to write an empty report".into()));
            }
            print!("{}", report.render(format)?);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Oracle { common } => oracle(common),
        Command::Train { common, data, model, test_set } => train(common, data, model, test_set.as_deref()),
        Command::Predict { common, checkpoint, test_set, data } => predict(common, checkpoint, test_set, data.as_deref()),
        Command::Bench { common, models } => bench(common, models.as_deref()),
        Command::Report { common, input } => report(common, input),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
