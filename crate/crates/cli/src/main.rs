//! `ottv`: compress token videos, generate fixtures, inspect reports.
//!
//! Exit codes: 0 success, 1 invalid flags or configuration, 2 I/O or
//! container errors, 3 numerical failure (including a failed `verify`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ottv_core::container::{self, Profile};
use ottv_core::pipeline::{self, PipelineConfig, RunReport};
use ottv_core::spatial::SpatialStrategy;
use ottv_core::transport::AlphaMode;

mod verify;

#[derive(Debug, Parser)]
#[command(
    name = "ottv",
    version,
    about = "Transport-guided token compression for video sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a container and write survivors, component map and report.
    Compress(Box<CompressArgs>),
    /// Generate a synthetic fixture container.
    Synth(SynthArgs),
    /// Print a run report as a table or CSV.
    Stats(StatsArgs),
    /// Check the solvers against exhaustive references on small instances.
    Verify(verify::VerifyArgs),
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output container; the component map goes to `<stem>.components.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON object of config keys; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target retention ratio r in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau_m: Option<f64>,
    #[arg(long)]
    tau_b: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// ours, topk, divprune, adts or scope.
    #[arg(long)]
    strategy: Option<SpatialStrategy>,
    /// position-aligned, kernel3x3, global or fixed:<alpha>.
    #[arg(long)]
    alpha_mode: Option<AlphaMode>,
    #[arg(long)]
    uniform_saliency: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "OTT_WORKERS")]
    workers: Option<usize>,
    /// Record per-stage wall-clock times in the report.
    #[arg(long)]
    timings: bool,
    /// Suppress the summary on standard output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// static, panning, scene_cut or random.
    #[arg(long)]
    profile: Profile,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    tokens: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    report: PathBuf,
    /// Emit the per-pair table as CSV.
    #[arg(long)]
    csv: bool,
    /// Write to a file instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Io(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Io(e) | Failure::Numerical(e) => e,
        }
    }
}

fn classify(err: anyhow::Error) -> Failure {
    if let Some(e) = err.downcast_ref::<ottv_core::Error>() {
        return match e.code() {
            "invalid_parameter" | "infeasible_budget" | "instance_too_large" => Failure::Usage(err),
            "numerical_failure" => Failure::Numerical(err),
            _ => Failure::Io(err),
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return Failure::Io(err);
    }
    Failure::Usage(err)
}

fn build_config(args: &CompressArgs) -> anyhow::Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let map: BTreeMap<String, serde_json::Value> =
                serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
            PipelineConfig::from_map(map)?
        }
        None => PipelineConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field.clone() { config.$field = v; })*
        };
    }
    apply!(ratio, gamma, tau_m, tau_b, tau_c, epsilon, max_iters, tol, strategy, alpha_mode, seed);
    config.uniform_saliency |= args.uniform_saliency;
    config.workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    config.validate()?;
    Ok(config)
}

fn components_path(out: &Path) -> PathBuf {
    out.with_extension("components.json")
}

fn compress(args: CompressArgs) -> Result<(), Failure> {
    let config = build_config(&args).map_err(classify)?;
    let video = container::load_container(&args.input)
        .with_context(|| format!("loading {}", args.input.display()))
        .map_err(classify)?;
    log::info!(
        "{}: {} frames x {} tokens, d = {}",
        args.input.display(),
        video.frames(),
        video.tokens_per_frame(),
        video.dim()
    );
    let runner = if args.timings {
        pipeline::run_timed
    } else {
        pipeline::run
    };
    let (sequence, report) = runner(&config, &video).map_err(|e| classify(e.into()))?;
    for p in report.pairs.iter().filter(|p| !p.converged) {
        log::warn!("pair {} did not converge in {} iterations", p.pair, p.iterations);
    }

    let write = || -> anyhow::Result<()> {
        sequence
            .to_container()?
            .save(&args.out)
            .with_context(|| format!("writing {}", args.out.display()))?;
        let components = serde_json::to_string_pretty(&sequence.component_map())? + "\n";
        let path = components_path(&args.out);
        fs::write(&path, components).with_context(|| format!("writing {}", path.display()))?;
        if let Some(path) = &args.report {
            fs::write(path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    };
    write().map_err(|e| match classify(e) {
        Failure::Usage(e) => Failure::Io(e),
        other => other,
    })?;
    if !args.quiet {
        print!("{}", report.summary());
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    // bad shapes here come from flags, not from a file
    let video = container::synthesize_video(args.profile, args.frames, args.tokens, args.dim, args.seed)
        .map_err(|e| Failure::Usage(e.into()))?;
    let write = || -> anyhow::Result<()> {
        video
            .save(&args.out)
            .with_context(|| format!("writing {}", args.out.display()))?;
        let manifest = serde_json::json!({
            "generator": "ottv synth",
            "profile": args.profile,
            "seed": args.seed,
        });
        container::write_manifest(&args.out, &manifest)?;
        Ok(())
    };
    write().map_err(Failure::Io)
}

fn stats(args: StatsArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let report = RunReport::from_json(&text)?;
    let rendered = if args.csv { report.to_csv() } else { report.summary() };
    match &args.out {
        Some(path) => fs::write(path, rendered).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Compress(args) => compress(*args),
        Command::Synth(args) => synth(args),
        Command::Stats(args) => stats(args).map_err(classify),
        Command::Verify(args) => match verify::run(&args) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Failure::Numerical(anyhow::anyhow!("verification failed"))),
            Err(e) => Err(classify(e)),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&[
            "ottv",
            "compress",
            "--input",
            "a",
            "--out",
            "b",
            "--ratio",
            "0.1",
            "--tau-b",
            "0.5",
            "--alpha-mode",
            "fixed:0.6",
            "--strategy",
            "topk",
            "--workers",
            "3",
        ]);
        let Command::Compress(args) = cli.command else { panic!() };
        let c = build_config(&args).unwrap();
        assert_eq!(c.ratio, 0.1);
        assert_eq!(c.tau_b, 0.5);
        assert_eq!(c.gamma, 0.3);
        assert_eq!(c.alpha_mode, AlphaMode::Fixed(0.6));
        assert_eq!(c.strategy, SpatialStrategy::TopK);
        assert_eq!(c.workers, 3);
    }

    #[test]
    fn out_of_range_ratio_is_a_usage_error() {
        let cli = parse(&["ottv", "compress", "--input", "a", "--out", "b", "--ratio", "1.5"]);
        let Command::Compress(args) = cli.command else { panic!() };
        let failure = classify(build_config(&args).unwrap_err());
        assert_eq!(failure.exit_code(), 1);
    }

    #[test]
    fn components_sidecar_name() {
        assert_eq!(
            components_path(Path::new("x/c.ottv")),
            PathBuf::from("x/c.components.json")
        );
    }

    #[test]
    fn missing_report_is_io() {
        let err = stats(StatsArgs {
            report: PathBuf::from("/nonexistent/r.json"),
            csv: false,
            out: None,
        })
        .unwrap_err();
        assert_eq!(classify(err).exit_code(), 2);
    }

    #[test]
    fn bail_is_usage() {
        let err: anyhow::Error = (|| -> anyhow::Result<()> { anyhow::bail!("nope") })().unwrap_err();
        assert_eq!(classify(err).exit_code(), 1);
    }
}
