//! The `spectree` command-line tool.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{ale_lf_hf, ale_spectrum, inclusion_probabilities, posterior_summary, AleScale, Target};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::panel::{covariate_index, demean, load_panel, n_fourier, PanelSchema, TimeSeriesPanel};
use crate::rng::replication_seed;
use crate::sampler::{Checkpoint, MoveCounters, MoveKind, PosteriorDraws, RunTiming, Sampler};
use crate::simgen::{mse_log_scale, SimKind, SimSetting};
use crate::tree::ProportionPrior;

pub const OUTPUT_DIR_ENV: &str = "SPECTREE_OUTPUT_DIR";

pub const DRAWS_FILE: &str = "draws.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SUMMARY_FILE: &str = "run_summary.json";
pub const POSTERIOR_MEAN_FILE: &str = "posterior_mean.csv";

#[derive(Debug, Parser)]
#[command(name = "spectree", version, about = "Bayesian sum-of-trees estimation of covariate-dependent power spectra")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated panel with its true log spectra.
    Simulate(SimulateArgs),
    /// Run the sampler on a panel.
    Fit(FitArgs),
    /// Mean squared error of the posterior-mean log spectrum against a truth file.
    Evaluate(EvaluateArgs),
    /// Accumulated local effects of one ordered covariate.
    Ale(AleArgs),
    /// Posterior inclusion probability of every covariate.
    Select(SelectArgs),
    /// Per-iteration diagnostic traces.
    Diagnose(DiagnoseArgs),
    /// Export stored draws as CSV or JSON.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_setting)]
    pub setting: SimKind,
    #[arg(long = "L", default_value_t = 100)]
    pub n_series: usize,
    #[arg(long = "T", default_value_t = 100)]
    pub series_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Noise covariates for the Friedman settings (default 95 for sparse-friedman, 0 otherwise).
    #[arg(long)]
    pub n_noise: Option<usize>,
    #[arg(long, env = OUTPUT_DIR_ENV, default_value = ".")]
    pub out_dir: PathBuf,
}

fn parse_setting(s: &str) -> std::result::Result<SimKind, String> {
    s.parse::<SimKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitPriorArg {
    Uniform,
    Dirichlet,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    pub split_prior: Option<SplitPriorArg>,
    /// Keep the series means instead of subtracting them at load time.
    #[arg(long)]
    pub no_demean: bool,
    /// Continue the chain stored in a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many iterations have completed, writing a checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub replications: u32,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub draws: PathBuf,
    /// CSV of true log spectra, as written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FunctionalArg {
    Lfhf,
}

#[derive(Debug, Args)]
pub struct AleArgs {
    #[arg(long)]
    pub draws: PathBuf,
    /// Covariate name or 0-based index.
    #[arg(long)]
    pub covariate: String,
    #[arg(long = "H", default_value_t = 5)]
    pub h: usize,
    #[arg(long, value_enum)]
    pub functional: Option<FunctionalArg>,
    /// ALE of the log spectrum instead of the spectrum.
    #[arg(long)]
    pub log_scale: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportWhat {
    /// Posterior mean and variance of each subject's log spectrum.
    Mean,
    /// Posterior mean and 95% band of each subject's log spectrum, long format.
    Spectra,
    /// Stored fitted-matrix snapshots, long format.
    Fitted,
    /// Splitting proportions per kept draw.
    Weights,
    /// Forests of every kept draw as JSON.
    Forests,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn main_with_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            e.print()?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ale(a) => cmd_ale(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut setting = SimSetting::new(args.setting, args.n_series, args.series_len, args.seed);
    if let Some(n) = args.n_noise {
        setting.n_noise = n;
    }
    let (panel, truth) = setting.generate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    io::write_series_long(dir.join("series.csv"), &panel)?;
    io::write_covariates(dir.join("covariates.csv"), &panel)?;
    io::write_schema(dir.join("schema.json"), panel.schema())?;
    io::write_subject_matrix(dir.join("truth.csv"), panel.subject_ids(), &truth.freqs, &truth.log_spectra())?;
    println!(
        "setting={} L={} T={} P={} N={} seed={} out={}",
        setting.kind,
        panel.n_series(),
        panel.series_len(),
        panel.n_covariates(),
        n_fourier(panel.series_len()),
        setting.seed,
        dir.display()
    );
    Ok(())
}

fn effective_config(args: &FitArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    let s = &mut cfg.sampler;
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(s.seed, args.seed);
    set!(s.n_trees, args.n_trees);
    set!(s.n_iter, args.n_iter);
    set!(s.burn_in, args.burn_in);
    set!(s.thin, args.thin);
    set!(s.checkpoint_every, args.checkpoint_every);
    if let Some(p) = args.split_prior {
        s.split_prior = match p {
            SplitPriorArg::Uniform => ProportionPrior::Uniform,
            SplitPriorArg::Dirichlet => ProportionPrior::Dirichlet,
        };
    }
    if args.series.is_some() {
        cfg.data.series = args.series.clone();
    }
    if args.covariates.is_some() {
        cfg.data.covariates = args.covariates.clone();
    }
    if args.schema.is_some() {
        cfg.data.schema = args.schema.clone();
    }
    if args.no_demean {
        cfg.data.demean = false;
    }
    if args.out_dir.is_some() {
        cfg.output_dir = args.out_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the panel named by a validated config, demeaning it if requested.
pub fn load_configured_panel(cfg: &RunConfig) -> Result<TimeSeriesPanel> {
    let d = &cfg.data;
    let (series, covariates, schema) = match (&d.series, &d.covariates, &d.schema) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Config("data paths missing".into())),
    };
    let schema = PanelSchema::from_json_file(schema)?;
    let panel = load_panel(series, covariates, &schema)?;
    Ok(if d.demean { demean(&panel) } else { panel })
}

#[derive(Debug, Serialize)]
struct RunSummary {
    seed: u64,
    iterations: usize,
    n_iter: usize,
    kept_draws: usize,
    finished: bool,
    acceptance_rate: AcceptanceRates,
    counters: MoveCounters,
    timing: RunTiming,
}

#[derive(Debug, Serialize)]
struct AcceptanceRates {
    birth: f64,
    death: f64,
    change: f64,
}

impl AcceptanceRates {
    fn of(c: &MoveCounters) -> Self {
        Self {
            birth: c.acceptance_rate(MoveKind::Birth),
            death: c.acceptance_rate(MoveKind::Death),
            change: c.acceptance_rate(MoveKind::Change),
        }
    }
}

/// Runs (or resumes) one chain and writes its outputs into `out_dir`.
pub fn fit_chain(
    panel: &TimeSeriesPanel,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<PosteriorDraws> {
    std::fs::create_dir_all(out_dir)?;
    let mut sampler = match resume {
        Some(p) => {
            let cp = Checkpoint::read(p)?;
            if cp.draws.config != cfg.sampler {
                return Err(Error::CheckpointMismatch(
                    "sampler configuration differs from the one stored in the checkpoint".into(),
                ));
            }
            Sampler::from_checkpoint(panel, cp)?
        }
        None => Sampler::new(panel, cfg.sampler.clone())?,
    };
    let cp_path = out_dir.join(CHECKPOINT_FILE);
    sampler.run_with(stop_after, |s| s.checkpoint().write(&cp_path))?;
    sampler.checkpoint().write(&cp_path)?;
    let finished = sampler.is_finished();
    let summary = RunSummary {
        seed: cfg.sampler.seed,
        iterations: sampler.state.iteration,
        n_iter: cfg.sampler.n_iter,
        kept_draws: sampler.draws.n_draws(),
        finished,
        acceptance_rate: AcceptanceRates::of(&sampler.state.counters),
        counters: sampler.state.counters.clone(),
        timing: sampler.timing(),
    };
    std::fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let draws = sampler.into_draws();
    io::write_traces(out_dir.join(DIAGNOSTICS_FILE), &draws.traces)?;
    if finished {
        io::write_draws(out_dir.join(DRAWS_FILE), &draws)?;
        io::write_subject_matrix(
            out_dir.join(POSTERIOR_MEAN_FILE),
            &draws.subject_ids,
            &draws.freqs,
            &draws.posterior_mean(),
        )?;
    }
    eprintln!(
        "{}: {} of {} iterations, {} draws kept, acceptance birth/death/change = {:.3}/{:.3}/{:.3}, {:.4} s per tree update",
        out_dir.display(),
        summary.iterations,
        summary.n_iter,
        summary.kept_draws,
        summary.acceptance_rate.birth,
        summary.acceptance_rate.death,
        summary.acceptance_rate.change,
        summary.timing.mean_tree_update_seconds,
    );
    Ok(draws)
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    eprintln!("effective config:\n{}", cfg.to_json_pretty());
    let panel = load_configured_panel(&cfg)?;
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if args.replications <= 1 {
        fit_chain(&panel, &cfg, &out_dir, args.resume.as_deref(), args.stop_after)?;
        return Ok(());
    }
    if args.resume.is_some() {
        return Err(Error::Config("--resume applies to a single chain; point it at one replication".into()));
    }
    let next = AtomicU32::new(0);
    let failures: Mutex<Vec<(u32, Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.max(1).min(args.replications as usize) {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::SeqCst);
                if r >= args.replications {
                    break;
                }
                let mut rep = cfg.clone();
                rep.sampler.seed = replication_seed(cfg.sampler.seed, r);
                let dir = out_dir.join(format!("rep_{r:03}"));
                if let Err(e) = fit_chain(&panel, &rep, &dir, None, args.stop_after) {
                    failures.lock().expect("no poisoned lock").push((r, e));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by_key(|(r, _)| *r);
    if let Some((r, e)) = failures.into_iter().next() {
        return Err(Error::Config(format!("replication {r} failed: {e}")));
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let draws = io::read_draws(&args.draws)?;
    if draws.n_draws() == 0 {
        return Err(Error::Dimension("draws file holds no kept draws".into()));
    }
    let (_, freqs, truth) = io::read_subject_matrix(&args.truth)?;
    if freqs.len() != draws.n_freqs() {
        return Err(Error::Dimension(format!(
            "truth has {} frequencies, draws have {}",
            freqs.len(),
            draws.n_freqs()
        )));
    }
    let mse = mse_log_scale(&draws.posterior_mean(), &truth)?;
    println!("{}", serde_json::json!({ "mse_log_spectrum": mse, "n_draws": draws.n_draws() }));
    Ok(())
}

fn resolve_covariate(draws: &PosteriorDraws, key: &str) -> Result<usize> {
    covariate_index(&draws.schema, key).ok_or_else(|| Error::Config(format!("unknown covariate `{key}`")))
}

pub fn cmd_ale(args: &AleArgs) -> Result<()> {
    let draws = io::read_draws(&args.draws)?;
    let j = resolve_covariate(&draws, &args.covariate)?;
    let name = draws.schema.covariates[j].name.clone();
    let curve = match args.functional {
        Some(FunctionalArg::Lfhf) => ale_lf_hf(&draws, j, args.h)?,
        None => {
            let scale = if args.log_scale { AleScale::LogSpectrum } else { AleScale::Spectrum };
            ale_spectrum(&draws, j, args.h, scale)?
        }
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("ale_{name}.csv")));
    io::write_ale(&out, &name, &curve)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_select(args: &SelectArgs) -> Result<()> {
    let draws = io::read_draws(&args.draws)?;
    let probs = inclusion_probabilities(&draws)?;
    let names: Vec<String> = draws.schema.covariates.iter().map(|c| c.name.clone()).collect();
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("inclusion.csv"));
    io::write_inclusion(&out, &names, &probs)?;
    let mut stdout = std::io::stdout().lock();
    for (n, p) in names.iter().zip(&probs) {
        match writeln!(stdout, "{n}\t{p}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => break,
            r => r?,
        }
    }
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let draws = io::read_draws(&args.draws)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(DIAGNOSTICS_FILE));
    io::write_traces(&out, &draws.traces)?;
    let c = &draws.counters;
    let rates = AcceptanceRates::of(c);
    println!(
        "iterations={} kept={} accept_birth={} accept_death={} accept_change={} unsplittable={} min_size_rejections={} mode_failures={} clamp_events={}",
        draws.traces.len(),
        draws.n_draws(),
        rates.birth,
        rates.death,
        rates.change,
        c.unsplittable,
        c.min_size_rejections,
        c.mode_failures,
        c.clamp_events
    );
    Ok(())
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let draws = io::read_draws(&args.draws)?;
    match args.what {
        ExportWhat::Mean => {
            let mean = draws.posterior_mean();
            let var = draws.posterior_variance();
            let mut w = csv::Writer::from_path(&args.out)?;
            w.write_record(["subject_id", "frequency", "mean", "variance"])?;
            for (l, id) in draws.subject_ids.iter().enumerate() {
                for (k, f) in draws.freqs.iter().enumerate() {
                    w.write_record([id.as_str(), &f.to_string(), &mean.get(l, k).to_string(), &var.get(l, k).to_string()])?;
                }
            }
            w.flush()?;
        }
        ExportWhat::Spectra => {
            let targets: Vec<Target> = (0..draws.n_subjects()).map(Target::Subject).collect();
            let summaries = posterior_summary(&draws, &targets)?;
            let mut w = csv::Writer::from_path(&args.out)?;
            w.write_record(["subject_id", "frequency", "mean", "lo95", "hi95"])?;
            for (id, s) in draws.subject_ids.iter().zip(&summaries) {
                for (k, f) in draws.freqs.iter().enumerate() {
                    w.write_record([
                        id.as_str(),
                        &f.to_string(),
                        &s.mean[k].to_string(),
                        &s.lo95[k].to_string(),
                        &s.hi95[k].to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        ExportWhat::Fitted => {
            let mut w = csv::Writer::from_path(&args.out)?;
            w.write_record(["draw", "iteration", "subject_id", "frequency", "log_spectrum"])?;
            for (index, m) in &draws.fitted {
                let it = draws.kept_iterations[*index].to_string();
                for (l, id) in draws.subject_ids.iter().enumerate() {
                    for (k, f) in draws.freqs.iter().enumerate() {
                        w.write_record([&index.to_string(), &it, id.as_str(), &f.to_string(), &m.get(l, k).to_string()])?;
                    }
                }
            }
            w.flush()?;
        }
        ExportWhat::Weights => {
            let mut w = csv::Writer::from_path(&args.out)?;
            let mut header = vec!["iteration".to_string()];
            header.extend(draws.schema.covariates.iter().map(|c| c.name.clone()));
            w.write_record(&header)?;
            for (it, weights) in draws.kept_iterations.iter().zip(&draws.split_weights) {
                let mut rec = vec![it.to_string()];
                rec.extend(weights.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        ExportWhat::Forests => {
            let file = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
            serde_json::to_writer(file, &draws.forests)?;
        }
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}
