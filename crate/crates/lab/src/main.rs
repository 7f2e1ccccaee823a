use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ethlab::ensembles::derive_seed;
use ethlab::harness::{self, ConfigError, ExperimentConfig, ExperimentTag, HarnessError, OutputFormat, Threads};
use ethlab::observables::ObservableRecipe;
use ethlab_core::det_approx::{m_bound, m_det_avg, ChainSpec, Decoration, ResolventFactor};
use ethlab_core::moments::{gaussian_division, match_moments};
use ethlab_core::semicircle::{quantile, SpectralPoint};
use ethlab_core::Complex64;

const EXIT_CONFIG: u8 = 2;
const EXIT_ASSERTION: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "ethlab", version, about = "Resolvent chains of Wigner matrices: deterministic approximations and Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, a positive integer or `auto`.
    #[arg(long, value_parser = parse_threads)]
    threads: Option<Threads>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Local-law quantile sweep.
    LocalLaw(RunArgs),
    /// Eigenvector overlap scaling in N.
    Eth(RunArgs),
    /// Fluctuations along the Ornstein-Uhlenbeck flow and the characteristics.
    Flow(RunArgs),
    /// Gaussian-divisible against directly moment-matched ensembles.
    Gft(RunArgs),
    /// Fluctuations far from the spectrum.
    Global(RunArgs),
    /// Any experiment, selected by the configuration.
    Run(RunArgs),
    /// Print `⟨M A⟩` of the chain `⟨G_1 A .. G_k A⟩`.
    Mcalc {
        /// Spectral parameter of each factor as `re,im`.
        #[arg(long = "z", required = true, value_parser = parse_complex)]
        z: Vec<Complex64>,
        /// 1-based indices of `Im G` factors.
        #[arg(long, value_delimiter = ',')]
        imag: Vec<usize>,
        /// Observable dimension.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// `identity`, `random-traceless`, `random-general`, `rank:R` or `diag:p1,p2,..`.
        #[arg(long, default_value = "identity", value_parser = parse_recipe)]
        observable: ObservableRecipe,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Atomic law with prescribed moments up to third order.
    Moments {
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        m02: Complex64,
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        m03: Complex64,
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        m12: Complex64,
        /// Divide out a Gaussian component of variance `gamma` first.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Semicircle quantiles `γ_i`, `i = 1..N`.
    Quantiles {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    if s == "auto" {
        return Ok(Threads::Auto);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive integer or auto, got {s}")),
        Ok(n) => Ok(Threads::Fixed(n)),
    }
}

fn parse_complex(s: &str) -> Result<Complex64, String> {
    let (re, im) = s.split_once(',').unwrap_or((s, "0"));
    let f = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t}: {e}"));
    Ok(Complex64::new(f(re)?, f(im)?))
}

fn parse_recipe(s: &str) -> Result<ObservableRecipe, String> {
    match s.split_once(':') {
        None => match s {
            "identity" => Ok(ObservableRecipe::Identity),
            "random-traceless" => Ok(ObservableRecipe::RandomTraceless),
            "random-general" => Ok(ObservableRecipe::RandomGeneral),
            _ => Err(format!("unknown observable {s}")),
        },
        Some(("rank", r)) => r.parse().map(|rank| ObservableRecipe::RankProjection { rank }).map_err(|e| e.to_string()),
        Some(("diag", p)) => p
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()
            .map(|pattern| ObservableRecipe::DiagonalPattern { pattern }),
        _ => Err(format!("unknown observable {s}")),
    }
}

enum Failure {
    Config(String),
    Assertion,
    Numerical(String),
    Io(std::io::Error),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

fn writer(out: Option<&PathBuf>) -> std::io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn load(args: &RunArgs, expected: &[ExperimentTag]) -> Result<ExperimentConfig, Failure> {
    let path = args.config.display();
    let text = std::fs::read_to_string(&args.config).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(|e: ConfigError| Failure::Config(format!("{path}: {e}")))?;
    if !expected.is_empty() && !expected.contains(&cfg.experiment) {
        return Err(Failure::Config(format!(
            "{path}: experiment {} does not belong to this subcommand",
            cfg.experiment.as_str()
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(f) = args.format {
        cfg.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Jsonl => OutputFormat::Jsonl,
        };
    }
    if let Some(o) = &args.out {
        cfg.output = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn run_experiment(args: &RunArgs, expected: &[ExperimentTag]) -> Result<(), Failure> {
    let cfg = load(args, expected)?;
    let report = harness::run(&cfg)?;
    let out = cfg.output.as_ref().map(PathBuf::from);
    let mut w = writer(out.as_ref())?;
    report.write(cfg.format, &mut w)?;
    w.flush()?;
    for c in &report.checks {
        eprintln!("{c}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Assertion)
    }
}

fn mcalc(z: &[Complex64], imag: &[usize], dim: usize, recipe: &ObservableRecipe, seed: u64) -> Result<(), Failure> {
    if imag.iter().any(|&i| i == 0 || i > z.len()) {
        return Err(Failure::Config(format!("imag indices must lie in 1..={}", z.len())));
    }
    recipe.validate(dim).map_err(Failure::Config)?;
    let factors = z
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let p = SpectralPoint::new(*z).map_err(|e| Failure::Config(e.to_string()))?;
            let d = if imag.contains(&(i + 1)) { Decoration::Imag } else { Decoration::Plain };
            Ok(ResolventFactor::new(p, d))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let a = Arc::new(recipe.build(dim, derive_seed(seed, &[1])));
    let chain = ChainSpec::averaged(factors, vec![a.clone(); z.len() - 1], a).map_err(|e| Failure::Config(e.to_string()))?;
    let m = m_det_avg(&chain).map_err(|e| Failure::Numerical(e.to_string()))?;
    let b = m_bound(&chain).map_err(|e| Failure::Numerical(e.to_string()))?;
    println!("m_re,m_im,m_bound,error_scale,ell,ell_hat");
    println!("{},{},{},{},{},{}", m.re, m.im, b.m_bound, b.error_scale, b.ell, b.ell_hat);
    Ok(())
}

fn moments(m02: Complex64, m03: Complex64, m12: Complex64, gamma: Option<f64>) -> Result<(), Failure> {
    let law = match gamma {
        Some(g) => gaussian_division(m02, m03, m12, g),
        None => match_moments(m02, m03, m12),
    }
    .map_err(|e| Failure::Numerical(e.to_string()))?;
    println!("re,im,weight");
    for (p, w) in law.points().iter().zip(law.weights()) {
        println!("{},{},{}", p.re, p.im, w);
    }
    Ok(())
}

fn quantiles(n: usize, out: Option<&PathBuf>) -> Result<(), Failure> {
    let mut w = writer(out)?;
    writeln!(w, "i,gamma")?;
    for i in 1..=n {
        let g = quantile(i, n).map_err(|e| Failure::Config(e.to_string()))?;
        writeln!(w, "{i},{g}")?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::LocalLaw(a) => run_experiment(a, &[ExperimentTag::LocalLaw]),
        Command::Eth(a) => run_experiment(a, &[ExperimentTag::EthScaling]),
        Command::Flow(a) => run_experiment(a, &[ExperimentTag::FlowDrift]),
        Command::Gft(a) => run_experiment(a, &[ExperimentTag::GftCompare]),
        Command::Global(a) => run_experiment(a, &[ExperimentTag::GlobalLaw]),
        Command::Run(a) => run_experiment(a, &[]),
        Command::Mcalc {
            z,
            imag,
            dim,
            observable,
            seed,
        } => mcalc(z, imag, *dim, observable, *seed),
        Command::Moments { m02, m03, m12, gamma } => moments(*m02, *m03, *m12, *gamma),
        Command::Quantiles { n, out } => quantiles(*n, out.as_ref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Assertion) => {
            eprintln!("assertion failed");
            ExitCode::from(EXIT_ASSERTION)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical abort: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Io(e)) => {
            eprintln!("i/o error: {e}");
            ExitCode::FAILURE
        }
    }
}
