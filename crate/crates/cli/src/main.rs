use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pdetrace::gallery::{self, RunConfig, EXAMPLES};
use pdetrace::solver::config::Config;
use pdetrace::solver::persist::{self, SignatureStatus, SigningKey, VerifyingKey};
use pdetrace::solver::tune::{evaluate_all, grid, parse_space, random_search, Assignment};
use pdetrace::solver::{render_svg, SolverError, Value};

/// Run the example gallery, tune hyperparameters and inspect saved artifacts.
#[derive(Parser)]
#[command(name = "pdetrace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or solve one gallery example.
    Run {
        example: String,
        #[command(flatten)]
        common: CommonArgs,
        /// Private key for a detached signature on state.jno.
        #[arg(long, value_name = "FILE")]
        sign_key: Option<PathBuf>,
    },
    /// Print header, manifest and signature status of an artifact.
    Inspect {
        path: PathBuf,
        #[arg(long, value_name = "FILE")]
        verify_key: Option<PathBuf>,
    },
    /// Search hyperparameters of an example over a space file.
    Tune {
        example: String,
        #[arg(long, value_name = "FILE")]
        space: PathBuf,
        /// Grid search with N points per continuous dimension.
        #[arg(long, value_name = "N", conflicts_with = "random", required_unless_present = "random")]
        grid: Option<usize>,
        /// Random search with N trials.
        #[arg(long, value_name = "N")]
        random: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Show how configuration values were resolved.
    Config,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batchsize: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.1)]
    mesh_size: f64,
    /// Output directory; defaults to `<output.dir>/<example>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Example parameter such as `width=16` or `lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    params: Vec<(String, Value)>,
}

fn parse_kv(s: &str) -> std::result::Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn parse_value(v: &str) -> Value {
    if let Ok(i) = v.parse::<i64>() {
        Value::Int(i)
    } else if let Ok(f) = v.parse::<f64>() {
        Value::Float(f)
    } else {
        Value::Str(v.to_string())
    }
}

/// Failure carrying its exit code.
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(1, e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Exit> {
    let config = Config::resolve()?;
    match cmd {
        Command::Run {
            example,
            common,
            sign_key,
        } => run(&config, &example, &common, sign_key.as_deref()),
        Command::Inspect { path, verify_key } => Ok(inspect(&config, &path, verify_key.as_deref())?),
        Command::Tune {
            example,
            space,
            grid,
            random,
            common,
        } => Ok(tune(&config, &example, &space, grid, random, &common)?),
        Command::Config => {
            print!("{}", config.diagnostics());
            Ok(())
        }
    }
}

fn check_example(name: &str) -> Result<()> {
    if !EXAMPLES.contains(&name) {
        bail!("unknown example {name:?}; available: {}", EXAMPLES.join(", "));
    }
    Ok(())
}

fn run_config(config: &Config, a: &CommonArgs) -> Result<RunConfig> {
    let seed = match a.seed {
        Some(s) => s,
        None => config
            .get("train.seed")
            .unwrap_or("0")
            .parse()
            .context("train.seed in configuration")?,
    };
    Ok(RunConfig {
        epochs: a.epochs,
        batchsize: a.batchsize,
        seed,
        mesh_size: a.mesh_size,
        params: a.params.iter().cloned().collect(),
    })
}

fn out_dir(config: &Config, a: &CommonArgs, example: &str) -> Result<PathBuf> {
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => Path::new(config.get("output.dir").unwrap_or("runs")).join(example),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn signing_key(config: &Config, flag: Option<&Path>) -> Result<Option<SigningKey>> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| config.get_nonempty("keys.signing").map(PathBuf::from));
    path.map(|p| persist::read_signing_key(&p).with_context(|| format!("signing key {}", p.display())))
        .transpose()
}

fn verifying_key(config: &Config, flag: Option<&Path>) -> Result<Option<VerifyingKey>> {
    let path = flag
        .map(Path::to_path_buf)
        .or_else(|| config.get_nonempty("keys.verifying").map(PathBuf::from));
    path.map(|p| persist::read_verifying_key(&p).with_context(|| format!("verifying key {}", p.display())))
        .transpose()
}

fn run(config: &Config, example: &str, a: &CommonArgs, sign_key: Option<&Path>) -> std::result::Result<(), Exit> {
    check_example(example)?;
    let cfg = run_config(config, a)?;
    let key = signing_key(config, sign_key)?;
    let dir = out_dir(config, a, example)?;
    let csv = dir.join("history.csv");
    let outcome = match gallery::run(example, &cfg, Some(&csv)) {
        Ok(o) => o,
        Err(SolverError::NaNLoss(step)) => {
            return Err(Exit(
                2,
                anyhow::anyhow!("loss became NaN at step {step}; history kept in {}", csv.display()),
            ))
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(dir.join("training.svg"), render_svg(&outcome.history)?)?;
    let state = dir.join("state.jno");
    persist::save(&outcome.state, &state, key.as_ref())?;
    println!("{example}: {} steps", outcome.history.rows.len());
    if let Some(l) = outcome.final_loss() {
        println!("final loss {l:.6e}");
    }
    for (k, v) in &outcome.report {
        println!("{k} {v:.6e}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn inspect(config: &Config, path: &Path, verify_key: Option<&Path>) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let s = persist::summary(&bytes)?;
    println!("kind: {}", kind_name(s.kind));
    println!("version: {}", s.version);
    println!("tensors: {}", s.manifest.len());
    for e in &s.manifest {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        println!("  {} [{}] {} bytes", e.name, shape.join(", "), e.bytes);
    }
    let intact = persist::from_bytes(&bytes).is_ok();
    println!("content hash: {}", if intact { "ok" } else { "MISMATCH" });
    let key = verifying_key(config, verify_key)?;
    let status = match persist::signature_status(path, key.as_ref())? {
        SignatureStatus::Unsigned => "unsigned",
        SignatureStatus::Valid => "valid",
        SignatureStatus::Invalid => "INVALID",
    };
    println!("signature: {status}");
    Ok(())
}

fn kind_name(k: persist::ArtifactKind) -> &'static str {
    match k {
        persist::ArtifactKind::CoreState => "core-state",
        persist::ArtifactKind::Domain => "domain",
        persist::ArtifactKind::Model => "model",
    }
}

fn tune(
    config: &Config,
    example: &str,
    space_file: &Path,
    grid_n: Option<usize>,
    random: Option<usize>,
    a: &CommonArgs,
) -> Result<()> {
    check_example(example)?;
    let text = fs::read_to_string(space_file).with_context(|| format!("reading {}", space_file.display()))?;
    let space = parse_space(&text).with_context(|| space_file.display().to_string())?;
    let base = run_config(config, a)?;
    let objective = |c: &Assignment| -> std::result::Result<f64, String> {
        let mut cfg = base.clone();
        for (k, v) in c {
            match k.as_str() {
                "epochs" => cfg.epochs = Some(v.as_i64().ok_or("epochs must be an integer")? as u64),
                "batchsize" => cfg.batchsize = Some(v.as_i64().ok_or("batchsize must be an integer")? as usize),
                _ => {
                    cfg.params.insert(k.clone(), v.clone());
                }
            }
        }
        let out = gallery::run(example, &cfg, None).map_err(|e| e.to_string())?;
        match out.final_loss() {
            Some(l) if l.is_finite() => Ok(l),
            _ => Err("no finite final loss".into()),
        }
    };
    let report = match (grid_n, random) {
        (Some(n), _) => evaluate_all(grid(&space, n)?, objective),
        (None, Some(n)) => random_search(&space, n, base.seed, objective)?,
        (None, None) => bail!("one of --grid or --random is required"),
    };
    let dir = out_dir(config, a, example)?;
    fs::write(dir.join("trials.csv"), report.to_csv(&space))?;
    let failed = report.trials.iter().filter(|t| t.error.is_some()).count();
    println!("{} trials, {failed} failed", report.trials.len());
    match report.best_trial() {
        Some(t) => {
            let parts: Vec<String> = t.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("best: {} loss {:.6e}", parts.join(" "), t.loss.unwrap_or(f64::NAN));
        }
        None => println!("best: none"),
    }
    println!("wrote {}", dir.join("trials.csv").display());
    Ok(())
}
