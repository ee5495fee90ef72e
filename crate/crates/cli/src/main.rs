use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use chips_cli::checks::{self, Scale};
use chips_cli::exit::{self, CliError};
use chips_cli::inputs::{expand, load_shards, shard_index};
use chips_core::baselines::CheckpointTrajectory;
use chips_core::datastore::manifest::save_manifest;
use chips_core::datastore::params::{decode_trajectory, encode_trajectory, load_params, save_params};
use chips_core::datastore::scores::{read_scores_any, write_scores, write_scores_text};
use chips_core::datastore::shard::encode_shard;
use chips_core::datastore::surrogate::save_surrogate;
use chips_core::datastore::{load_config, RunConfig, SelectionMethod};
use chips_core::flopsmeter::{format_exact_sci, format_sci, method_total, primitive_table, CostModel, Method};
use chips_core::pipeline::{run_score, run_select, ScoreInputs};
use chips_core::scoring::{hard_selection_overlap, Ablation};
use chips_core::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(name = "chips", version, about = "Curvature-aware data selection for dual-encoder pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clustered synthetic pool, eval set, parameters and config.
    Synth(SynthArgs),
    /// Score a pool against an evaluation set.
    Score(ScoreArgs),
    /// Keep the top fraction of a score file.
    Select(SelectArgs),
    /// Run the statistical and oracle checks; one JSON line per check.
    Verify(VerifyArgs),
    /// Print the FLOPs accounting of the reference setting.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file of generator settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    /// Method written into the generated config.
    #[arg(long, value_parser = SelectionMethod::from_str)]
    method: Option<SelectionMethod>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pool shards; paths or glob patterns.
    #[arg(long, num_args = 1.., required = true)]
    pool: Vec<String>,
    /// Evaluation shards; paths or glob patterns.
    #[arg(long, num_args = 1.., required = true)]
    eval: Vec<String>,
    /// End-point parameters (CHEP).
    #[arg(long)]
    params: PathBuf,
    /// Checkpoint trajectory (CHTJ), needed by `tracin`.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Score file (CHSC).
    #[arg(long)]
    out: PathBuf,
    /// Solved surrogate (CHCV); defaults to the score path with a `.chcv` extension.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Write the line-oriented text form instead of CHSC.
    #[arg(long)]
    text: bool,
    #[arg(long, value_parser = SelectionMethod::from_str)]
    method: Option<SelectionMethod>,
    #[arg(long, value_parser = Ablation::from_str)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the available parallelism; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    /// Score file, binary or text.
    #[arg(long)]
    scores: PathBuf,
    /// Manifest path; with `--grid`, a prefix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    retention: Option<f64>,
    /// One manifest per retention in the config grid, at `<out>.r<ratio>`.
    #[arg(long, conflicts_with = "retention")]
    grid: bool,
    /// Pool shards, for per-shard z-scoring.
    #[arg(long, num_args = 1..)]
    pool: Vec<String>,
    /// Z-normalize utilities within each pool shard.
    #[arg(long)]
    shard_zscore: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Checks to run; all when omitted.
    #[arg(long = "check")]
    checks: Vec<String>,
    /// Smaller sizes, no time budgets.
    #[arg(long)]
    quick: bool,
    /// List check names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    c_neg: Option<u64>,
    #[arg(long)]
    cg_iters: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Verify(a) => verify(a),
        Command::Flops(a) => flops(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("chips: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.pool_size {
        spec.pool = n;
    }
    if let Some(n) = a.eval_size {
        spec.eval = n;
    }
    let world = generate(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let (d_v, d_t) = (spec.d_v as u32, spec.d_t as u32);
    write_file(&a.out.join("pool.chfs"), &encode_shard(d_v, d_t, spec.tags, &world.pool)?)?;
    write_file(&a.out.join("eval.chfs"), &encode_shard(d_v, d_t, spec.tags, &world.eval)?)?;
    save_params(a.out.join("params.chep"), &world.params)?;
    write_file(&a.out.join("trajectory.chtj"), &encode_trajectory(&world.trajectory)?)?;

    let mut cfg = RunConfig {
        seed: spec.seed,
        method: a.method.unwrap_or(SelectionMethod::Chips),
        scoring_batch_size: 64,
        eval_batch_size: 64,
        ..RunConfig::default()
    };
    cfg.sketch.k = cfg.sketch.k.min(128).min(world.params.num_params());
    let text = toml::to_string(&cfg).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    write_file(&a.out.join("config.toml"), text.as_bytes())?;
    eprintln!(
        "wrote {} pool and {} eval samples to {}",
        world.pool.len(),
        world.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = ab;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let params = load_params(&a.params)?;
    let trajectory = match &a.trajectory {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            Some(CheckpointTrajectory::new(decode_trajectory(&bytes)?)?)
        }
        None => None,
    };
    let (eval, _) = load_shards(&expand(&a.eval)?)?;
    let (pool, _) = load_shards(&expand(&a.pool)?)?;
    let workers = a.workers.unwrap_or_else(chips_cli::default_workers);
    let run = run_score(
        &ScoreInputs {
            config: &cfg,
            params: &params,
            pool: &pool,
            eval: &eval,
            trajectory: trajectory.as_ref(),
        },
        workers,
    )?;
    if a.text {
        let mut buf = Vec::new();
        write_scores_text(&mut buf, &run.header, &run.records)?;
        write_file(&a.out, &buf)?;
    } else {
        write_scores(&a.out, &run.header, &run.records)?;
    }
    if let Some(s) = &run.surrogate {
        let path = a.surrogate.clone().unwrap_or_else(|| a.out.with_extension("chcv"));
        save_surrogate(&path, s)?;
    }
    eprintln!(
        "scored {} samples with {} in {} batches ({} eval samples)",
        run.records.len(),
        run.header.method,
        run.pool_batches,
        run.eval_samples
    );
    Ok(())
}

fn select(a: SelectArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let (header, records) = read_scores_any(&a.scores)?;
    let zscore = a.shard_zscore || cfg.as_ref().is_some_and(|c| c.shard_zscore);
    let shards = if zscore {
        if a.pool.is_empty() {
            return Err(CliError::Usage("shard z-scoring needs --pool".into()));
        }
        let (pool, shard_of) = load_shards(&expand(&a.pool)?)?;
        let index = shard_index(&pool, &shard_of);
        let s = records
            .iter()
            .map(|r| {
                index
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| CliError::Usage(format!("score id {} is in no pool shard", r.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(s)
    } else {
        None
    };
    let default_r = cfg.as_ref().map_or(RunConfig::default().retention, |c| c.retention);
    let grid = if a.grid {
        cfg.as_ref().map_or(RunConfig::default().retention_grid, |c| c.retention_grid.clone())
    } else {
        vec![a.retention.unwrap_or(default_r)]
    };
    for r in grid {
        let manifest = run_select(&header, &records, r, shards.as_deref())?;
        let path = if a.grid {
            let mut p = a.out.clone().into_os_string();
            p.push(format!(".r{r}"));
            PathBuf::from(p)
        } else {
            a.out.clone()
        };
        save_manifest(&path, &manifest)?;
        let drift = manifest.drift_kl_upper.map_or("none".to_string(), |kl| format!("{kl:.3e} nats"));
        let overlap = hard_selection_overlap(&records, r)?;
        eprintln!(
            "kept {} of {} at r = {r} (drift {drift}, overlap with unweighted top-n {overlap:.3}) -> {}",
            manifest.ids.len(),
            manifest.pool_size,
            path.display()
        );
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), CliError> {
    if a.list {
        for c in checks::CHECKS {
            println!("{}", c.name);
        }
        return Ok(());
    }
    let selected: Vec<&checks::Check> = if a.checks.is_empty() {
        checks::CHECKS.iter().collect()
    } else {
        a.checks
            .iter()
            .map(|n| checks::find(n).ok_or_else(|| CliError::Usage(format!("unknown check {n:?}"))))
            .collect::<Result<_, _>>()?
    };
    let scale = if a.quick { Scale::Quick } else { Scale::Full };
    let mut failed = 0;
    let stdout = std::io::stdout();
    for check in selected {
        let rep = checks::run_check(check, scale)?;
        eprintln!("{rep}");
        writeln!(stdout.lock(), "{}", rep.to_line()).map_err(|e| CliError::Io(e.to_string()))?;
        failed += usize::from(!rep.passed);
    }
    if failed > 0 {
        return Err(CliError::VerificationFailed(failed));
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<(), CliError> {
    let mut model = CostModel::biomedica();
    if let Some(c) = a.c_neg {
        model.c_neg = c;
    }
    if let Some(i) = a.cg_iters {
        model.cg_iters = i;
    }
    model.validate()?;
    println!("{:<14} {:>22} {:>22}", "primitive", "train batch", "eval batch");
    for (name, train, eval) in primitive_table(&model)? {
        let fmt = |v: u128| if v == 0 { "-".to_string() } else { format_exact_sci(v) };
        println!("{name:<14} {:>22} {:>22}", fmt(train), fmt(eval));
    }
    println!();
    println!("{:<14} {:>22}", "method", "total FLOPs");
    for m in [Method::TracIn, Method::Trak, Method::Chips] {
        println!("{:<14} {:>22}", m.as_str(), format_sci(method_total(&model, m)?, 7));
    }
    Ok(())
}
