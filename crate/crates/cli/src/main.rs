//! `seedless-di`: command-line front end for the verification laboratory.
//!
//! Exit codes: 0 on success, 1 when a verification fails, 2 on usage or
//! input errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use seedless_di::bell::{linear_s_grid, verify_shifted_bound, RoundDevices, ShiftedChshParams, TSIRELSON};
use seedless_di::extractor::{random_certified_table, search_extractor};
use seedless_di::protocol::{cache_dir_from_env, run_protocol, DeviceModel, HonestDevice, ProtocolConfig, TranscriptSummary};
use seedless_di::rates::{self, Mode};
use seedless_di::rng::{rng_for, Stream};
use seedless_di::sim::{self, default_s_grid, verify_bound, Extractor, StateFixture};
use seedless_di::Error;

#[derive(Parser, Debug)]
#[command(name = "seedless-di", version, about = "Seedless device-independent randomness extraction laboratory")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,

    /// Where to write the run manifest (default: `<out>.manifest.json` when `--out` is given).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the shifted CHSH operator inequalities for random qubit devices.
    VerifyShiftedChsh(VerifyShiftedArgs),
    /// Search for a certified m-bit extractor table.
    FindExtractor(FindExtractorArgs),
    /// Compare exact trace distances with the error bounds.
    VerifyBounds(VerifyBoundsArgs),
    /// Run the spot-checking protocol with honest devices.
    Simulate(SimulateArgs),
    /// Maximal extraction and efficiency rates over a CHSH grid.
    Rates(RatesArgs),
    /// Minimum CHSH with positive XOR yield over a p_e grid.
    MinChsh(MinChshArgs),
}

#[derive(Args, Debug)]
struct VerifyShiftedArgs {
    /// Number of random device pairs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Number of s values in [2 + 1e-6, 2 sqrt 2 - 1e-6].
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    s_grid: u64,
    #[arg(long)]
    seed: u64,
    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FindExtractorArgs {
    /// Input length n (6..=26).
    #[arg(long)]
    n: u32,
    /// Output length m (1..n).
    #[arg(long)]
    m: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    max_attempts: u64,
    /// Table file; the certificate goes to `<out>.cert.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyBoundsArgs {
    /// Fixture JSON file; without it random fixtures are generated.
    #[arg(long, conflicts_with_all = ["trials", "rounds", "dim_e"])]
    fixture: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// Number of random fixtures.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    trials: Option<u64>,
    /// Rounds per random fixture.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4))]
    rounds: Option<u64>,
    /// Eve's dimension for random fixtures.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=16))]
    dim_e: Option<u64>,
    /// Required for random fixtures and for m-bit tables.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON lines output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    pe: f64,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// CHSH value of the honest per-round state (default: 2 sqrt 2).
    #[arg(long)]
    chsh_target: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Transcript summary file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RatesArgs {
    #[arg(long, value_parser = parse_mode, default_value = "mbit")]
    mode: Mode,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    grid_size: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MinChshArgs {
    /// Number of p_e values `i/(K+1)`.
    #[arg(long, default_value_t = 99, value_parser = clap::value_parser!(u64).range(1..))]
    grid_size: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Uncertified(_) | Error::SearchExhausted { .. } => Failure::Verification(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult = Result<Outcome, Failure>;

/// What a successful run produced.
struct Outcome {
    pass: bool,
    seed: Option<u64>,
    parameters: BTreeMap<String, Value>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct RunManifest<'a> {
    subcommand: &'a str,
    parameters: &'a BTreeMap<String, Value>,
    seed: Option<u64>,
    output_paths: Vec<String>,
    tool_version: &'a str,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let name = subcommand_name(&cli.command);
    let result = match &cli.command {
        Command::VerifyShiftedChsh(a) => verify_shifted(a),
        Command::FindExtractor(a) => find_extractor(a),
        Command::VerifyBounds(a) => verify_bounds(a),
        Command::Simulate(a) => simulate(a),
        Command::Rates(a) => rates_cmd(a),
        Command::MinChsh(a) => min_chsh_cmd(a),
    };
    match result {
        Ok(outcome) => {
            if let Err(e) = write_manifest(name, cli.manifest.as_deref(), &outcome) {
                eprintln!("error: writing manifest: {e}");
                return ExitCode::from(2);
            }
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::VerifyShiftedChsh(_) => "verify-shifted-chsh",
        Command::FindExtractor(_) => "find-extractor",
        Command::VerifyBounds(_) => "verify-bounds",
        Command::Simulate(_) => "simulate",
        Command::Rates(_) => "rates",
        Command::MinChsh(_) => "min-chsh",
    }
}

fn write_manifest(name: &str, explicit: Option<&Path>, outcome: &Outcome) -> std::io::Result<()> {
    let path = match (explicit, outcome.outputs.first()) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(out)) => {
            let mut s = out.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        (None, None) => return Ok(()),
    };
    let manifest = RunManifest {
        subcommand: name,
        parameters: &outcome.parameters,
        seed: outcome.seed,
        output_paths: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        tool_version: env!("CARGO_PKG_VERSION"),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text)
}

/// Write to `out` or stdout.
fn emit(out: Option<&Path>, text: &str) -> std::io::Result<Vec<PathBuf>> {
    match out {
        Some(p) => {
            fs::write(p, text)?;
            Ok(vec![p.to_path_buf()])
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(Vec::new())
        }
    }
}

fn params(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn verify_shifted(a: &VerifyShiftedArgs) -> CliResult {
    let mut rng = rng_for(a.seed, Stream::Devices);
    let devices: Vec<RoundDevices> = (0..a.trials).map(|_| RoundDevices::random_xz(&mut rng)).collect();
    let grid: Vec<ShiftedChshParams> = linear_s_grid(a.s_grid as usize)
        .into_iter()
        .map(ShiftedChshParams::new)
        .collect::<seedless_di::Result<_>>()?;
    let results: Vec<(usize, f64, f64)> = devices
        .par_iter()
        .map(|d| {
            let mut failures = 0;
            let mut worst = f64::INFINITY;
            let mut worst_s = f64::NAN;
            for p in &grid {
                let r = verify_shifted_bound(p, d);
                let lo = r.min_eig_plus.min(r.min_eig_minus);
                if lo < worst {
                    worst = lo;
                    worst_s = p.s;
                }
                failures += usize::from(!r.pass);
            }
            (failures, worst, worst_s)
        })
        .collect();
    let failures: usize = results.iter().map(|r| r.0).sum();
    let (worst, worst_s) = results
        .iter()
        .fold((f64::INFINITY, f64::NAN), |acc, r| if r.1 < acc.0 { (r.1, r.2) } else { acc });
    let pass = failures == 0;
    let report = json!({
        "trials": a.trials,
        "sGrid": a.s_grid,
        "seed": a.seed,
        "checks": a.trials * a.s_grid,
        "failures": failures,
        "worstMinEigenvalue": worst,
        "worstS": worst_s,
        "pass": pass,
    });
    let outputs = emit(a.out.as_deref(), &format!("{report}\n"))?;
    Ok(Outcome {
        pass,
        seed: Some(a.seed),
        parameters: params(&[("trials", json!(a.trials)), ("sGrid", json!(a.s_grid))]),
        outputs,
    })
}

fn find_extractor(a: &FindExtractorArgs) -> CliResult {
    let found = search_extractor(a.n, a.m, a.max_attempts, a.seed)?;
    found.table.save(&a.out)?;
    let mut cert_path = a.out.clone().into_os_string();
    cert_path.push(".cert.json");
    let cert_path = PathBuf::from(cert_path);
    let cert = found.certificate.to_json();
    fs::write(&cert_path, format!("{cert}\n"))?;
    println!("{cert}");
    Ok(Outcome {
        pass: found.certificate.pass,
        seed: Some(a.seed),
        parameters: params(&[
            ("n", json!(a.n)),
            ("m", json!(a.m)),
            ("maxAttempts", json!(a.max_attempts)),
            ("attempts", json!(found.attempts)),
        ]),
        outputs: vec![a.out.clone(), cert_path],
    })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct BoundLine {
    index: u64,
    n_rounds: usize,
    dim_e: usize,
    mode: Mode,
    #[serde(flatten)]
    check: sim::BoundCheck,
}

fn verify_bounds(a: &VerifyBoundsArgs) -> CliResult {
    let grid = default_s_grid();
    let mut lines = String::new();
    let mut pass = true;
    let mut push = |index: u64, state: &sim::TripartiteState, devices: &[RoundDevices], table_rng: Option<&mut seedless_di::rng::Rng>| -> Result<(), Failure> {
        let table;
        let extractor = match a.mode {
            Mode::Xor => Extractor::Xor,
            Mode::Mbit => {
                let rng = table_rng.expect("seeded for m-bit mode");
                let n = state.n_rounds() as u32;
                if n < 2 {
                    return Err(Failure::Usage("m-bit bounds need at least 2 rounds".into()));
                }
                table = random_certified_table(n, 1, 64, rng)?.0;
                Extractor::Table(&table)
            }
        };
        let check = verify_bound(state, devices, extractor, &grid)?;
        pass &= check.pass;
        let line = BoundLine {
            index,
            n_rounds: state.n_rounds(),
            dim_e: state.dim_e(),
            mode: a.mode,
            check,
        };
        lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
        lines.push('\n');
        Ok(())
    };

    let mut parameters = params(&[("mode", json!(a.mode))]);
    let needs_seed = a.fixture.is_none() || a.mode == Mode::Mbit;
    if needs_seed && a.seed.is_none() {
        return Err(Failure::Usage("--seed is required for random fixtures and m-bit tables".into()));
    }
    let mut table_rng = a.seed.map(|s| rng_for(s, Stream::ExtractorSearch));
    if let Some(path) = &a.fixture {
        let text = fs::read_to_string(path)?;
        let fixture = StateFixture::from_json(&text)?;
        let state = fixture.to_state()?;
        let devices = fixture.round_devices()?;
        push(0, &state, &devices, table_rng.as_mut())?;
        parameters.insert("fixture".into(), json!(path.display().to_string()));
    } else {
        let seed = a.seed.expect("checked above");
        let trials = a.trials.unwrap_or(100);
        let rounds = a.rounds.map(|r| r as usize);
        let dim_e = a.dim_e.map(|d| d as usize);
        let mut rng = rng_for(seed, Stream::Fixtures);
        for index in 0..trials {
            let n = rounds.unwrap_or(match a.mode {
                Mode::Xor => 1 + (index % 3) as usize,
                Mode::Mbit => 2 + (index % 3) as usize,
            });
            let d_e = dim_e.unwrap_or([1, 2, 4][(index / 3 % 3) as usize]);
            let state = if rng.random::<bool>() {
                sim::random_mixed_state(n, d_e, &mut rng)?
            } else {
                sim::random_purified_state(n, d_e, &mut rng)?
            };
            let devices: Vec<RoundDevices> = (0..n).map(|_| RoundDevices::random_xz(&mut rng)).collect();
            push(index, &state, &devices, table_rng.as_mut())?;
        }
        parameters.insert("trials".into(), json!(trials));
        parameters.insert("rounds".into(), json!(rounds));
        parameters.insert("dimE".into(), json!(dim_e));
    }
    let outputs = emit(a.out.as_deref(), &lines)?;
    Ok(Outcome {
        pass,
        seed: a.seed,
        parameters,
        outputs,
    })
}

fn simulate(a: &SimulateArgs) -> CliResult {
    let chsh = a.chsh_target.unwrap_or(TSIRELSON);
    let device = if a.chsh_target.is_none() {
        HonestDevice::singlet()
    } else {
        HonestDevice::with_chsh(chsh)?
    };
    let cfg = ProtocolConfig {
        n: a.n,
        p_e: a.pe,
        epsilon: a.epsilon,
        mode: a.mode,
        seed: a.seed,
        device: DeviceModel::Honest(device),
        cache_dir: cache_dir_from_env(),
    };
    let transcript = run_protocol(&cfg)?;
    let summary = TranscriptSummary::new(&cfg, &transcript);
    let outputs = emit(a.out.as_deref(), &format!("{}\n", summary.to_json()))?;
    Ok(Outcome {
        pass: true,
        seed: Some(a.seed),
        parameters: params(&[
            ("n", json!(a.n)),
            ("pE", json!(a.pe)),
            ("epsilon", json!(a.epsilon)),
            ("mode", json!(a.mode)),
            ("chshTarget", json!(chsh)),
        ]),
        outputs,
    })
}

fn rates_cmd(a: &RatesArgs) -> CliResult {
    let grid = rates::chsh_grid(a.grid_size as usize);
    let points = rates::rate_curves(a.mode, &grid)?;
    let mut buf = Vec::new();
    rates::write_rates_csv(&mut buf, &points)?;
    fs::write(&a.out, buf)?;
    Ok(Outcome {
        pass: true,
        seed: None,
        parameters: params(&[("mode", json!(a.mode)), ("gridSize", json!(a.grid_size))]),
        outputs: vec![a.out.clone()],
    })
}

fn min_chsh_cmd(a: &MinChshArgs) -> CliResult {
    let grid = rates::p_e_grid(a.grid_size as usize);
    let points = rates::min_chsh_curve(Mode::Xor, &grid);
    let mut buf = Vec::new();
    rates::write_min_chsh_csv(&mut buf, &points)?;
    fs::write(&a.out, buf)?;
    Ok(Outcome {
        pass: true,
        seed: None,
        parameters: params(&[("mode", json!(Mode::Xor)), ("gridSize", json!(a.grid_size))]),
        outputs: vec![a.out.clone()],
    })
}
