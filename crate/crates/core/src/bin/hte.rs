use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use hte_core::config::RunConfig;
use hte_core::incremental::CadenceMode;
use hte_core::pipeline::{self, ScoreRequest};
use hte_core::HteError;

/// Uplift modelling toolkit: simulate experiment pools, select experiments,
/// train T-learners, evaluate by AUUC, score users and run weekly retraining.
#[derive(Parser, Debug)]
#[command(name = "hte", version)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every sub-seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (registry, reports, ledgers).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pool or stream directory.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pool or weekly stream into the pool directory.
    Simulate,
    /// Apply the selection criteria (and grid variants) and write audits.
    Select,
    /// Select, fit one model per scope, evaluate and register.
    Train,
    /// Evaluate registered models on held-out experiments.
    Evaluate {
        /// Model id or unique prefix; repeatable. Defaults to every registered model.
        #[arg(long = "model")]
        models: Vec<String>,
        /// Evaluation experiment id; repeatable. Defaults to the configured hold-out.
        #[arg(long = "experiment")]
        experiments: Vec<String>,
    },
    /// Score a line-delimited file of users with a registered model.
    Score {
        #[arg(long)]
        model: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Schema header; defaults to the pool's schema.json.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Defaults to the model's registration date.
        #[arg(long)]
        score_date: Option<NaiveDate>,
        /// Also write the sensitivity score (negated ITE).
        #[arg(long)]
        sensitivity: bool,
    },
    /// Run the weekly retraining cadence over a stream, resuming from ledgers.
    RunCadence {
        /// Restrict to these modes (default: the configured ones).
        #[arg(long = "mode", value_enum)]
        modes: Vec<ModeArg>,
    },
    /// Inspect the model registry.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
}

#[derive(Subcommand, Debug)]
enum RegistryAction {
    Ls,
    Show { id: String },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Incremental,
    FromScratchWeekly,
}

impl From<ModeArg> for CadenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Incremental => CadenceMode::Incremental,
            ModeArg::FromScratchWeekly => CadenceMode::FromScratchWeekly,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn load_config(cli: &Cli) -> hte_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.clone();
    }
    if let Some(p) = &cli.pool {
        cfg.paths.pool = p.clone();
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    cfg.validate()?;
    if let Some(n) = cfg.workers {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli, buf: &mut String) -> hte_core::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate => {
            let res = pipeline::simulate(&cfg)?;
            let _ = writeln!(
                buf,
                "wrote {} experiments ({} rows) to {}",
                res.n_experiments,
                res.n_rows,
                res.dir.display()
            );
        }
        Command::Select => {
            for s in pipeline::select(&cfg)? {
                let excluded: Vec<String> = s.excluded_by.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = writeln!(
                    buf,
                    "{}: kept {}/{} as of {} ({})",
                    s.name,
                    s.n_selected,
                    s.n_candidates,
                    s.as_of_date,
                    excluded.join(" ")
                );
            }
        }
        Command::Train => {
            let res = pipeline::train(&cfg)?;
            let _ = writeln!(
                buf,
                "selected {}/{} experiments as of {}; metric {}",
                res.selection.n_selected, res.selection.n_candidates, res.as_of_date, res.metric
            );
            if !res.dropped_eval_ids.is_empty() {
                eprintln!("skipped degenerate evaluation experiments: {}", res.dropped_eval_ids.join(", "));
            }
            for e in &res.entries {
                let _ = writeln!(buf, "{}  {}", e.model_id, e.scope);
            }
            if let Some(r) = &res.report {
                let _ = write!(buf, "\n{}", r.to_text());
            }
        }
        Command::Evaluate { models, experiments } => {
            let res = pipeline::evaluate(&cfg, &models, &experiments)?;
            if !res.dropped_eval_ids.is_empty() {
                eprintln!("skipped degenerate evaluation experiments: {}", res.dropped_eval_ids.join(", "));
            }
            buf.push_str(&res.report.to_text());
        }
        Command::Score {
            model,
            input,
            output,
            schema,
            score_date,
            sensitivity,
        } => {
            let req = ScoreRequest {
                model_id: model,
                input,
                output,
                schema,
                score_date,
                sensitivity,
            };
            let res = pipeline::score(&cfg, &req)?;
            let _ = writeln!(buf, "scored {} users with {} into {}", res.rows, res.model_id, req.output.display());
        }
        Command::RunCadence { modes } => {
            if !modes.is_empty() {
                cfg.cadence.modes = modes.into_iter().map(CadenceMode::from).collect();
            }
            let res = pipeline::run_cadence(&cfg)?;
            for (mode, records) in &res.records {
                let resumed = res.resumed_weeks.get(mode).copied().unwrap_or(0);
                let _ = writeln!(buf, "{} (resumed {resumed} weeks)", mode.as_str());
                for r in records {
                    let id = r.model_id.as_deref().map(|s| &s[..12]).unwrap_or("-");
                    let flags = r.drift.as_ref().map(|d| d.flagged()).unwrap_or_default();
                    let _ = writeln!(
                        buf,
                        "  week {:>2}  auuc {:>8}  model {id}{}{}",
                        r.week,
                        fmt_opt(r.eval_auuc),
                        if r.skipped { "  skipped" } else { "" },
                        if flags.is_empty() { String::new() } else { format!("  drift: {}", flags.join(", ")) }
                    );
                }
            }
        }
        Command::Registry { action } => match action {
            RegistryAction::Ls => {
                let _ = writeln!(
                    buf,
                    "{:<12}  {:<10}  {:<24}  {:>5}  {:>8}  parent",
                    "model", "created", "scope", "exps", "auuc"
                );
                for e in pipeline::registry_list(&cfg)? {
                    let _ = writeln!(
                        buf,
                        "{:<12}  {:<10}  {:<24}  {:>5}  {:>8}  {}",
                        &e.model_id[..12],
                        e.created_at,
                        e.scope.to_string(),
                        e.training_experiment_ids.len(),
                        fmt_opt(e.eval_summary.as_ref().and_then(|s| s.mean_auuc)),
                        e.parent_id.as_deref().map(|p| &p[..12]).unwrap_or("-")
                    );
                }
            }
            RegistryAction::Show { id } => {
                let e = pipeline::registry_show(&cfg, &id)?;
                let _ = writeln!(buf, "{}", serde_json::to_string_pretty(&e).map_err(HteError::from)?);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut out = String::new();
    let result = run(cli, &mut out);
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
