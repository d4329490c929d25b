use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dada_core::compiler::{compile, diff_rulesets, read_rules_jsonl, write_rules_jsonl, NetworkContext, RuleSet};
use dada_core::datapath::{LatencyHistogram, VerdictRecord};
use dada_core::mud::{parse_mud, validate_profile};
use dada_core::profiler::{export_profile, SharedProfile};
use dada_core::simulator::{diff_verdicts, read_trace, replay, run_scenario, write_jsonl, RunOutput, Scenario};
use dada_core::MacAddr;
use dada_gateway::config::load_config;
use dada_gateway::gateway::{import_into_store, load_context};
use dada_gateway::serve::{serve, Playback};
use dada_gateway::store::StateStore;
use tracing_subscriber::EnvFilter;

/// Exit code for `simulate --assert` and `replay --verdicts` mismatches.
const EXIT_ASSERT: u8 = 3;
/// Exit code for `compile` when the only findings are warnings.
const EXIT_WARNINGS: u8 = 2;

#[derive(Parser)]
#[command(name = "dada", version, about = "MUD-driven home gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a MUD file into a device rule set (JSON lines).
    Compile {
        mud: PathBuf,
        #[arg(long)]
        context: PathBuf,
        /// Device to compile for; defaults to the one whose mud_url matches.
        #[arg(long)]
        device: Option<MacAddr>,
        /// Previous MUD file or rule export; prints the delta.
        #[arg(long)]
        diff: Option<PathBuf>,
        /// Write rules here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and print its metrics.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for trace, verdict, feature and report files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check the scenario's expectations; exit 3 on failure.
        #[arg(long)]
        assert: bool,
    },
    /// Feed a recorded trace through a fresh pipeline.
    Replay {
        scenario: PathBuf,
        trace: PathBuf,
        /// Recorded verdicts to compare against; exit 3 on any difference.
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gateway service.
    Serve {
        #[arg(long, default_value = "gateway.toml")]
        config: PathBuf,
        /// Packet trace to play into the datapath.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Simulated seconds per wall-clock second for --trace.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Share behaviour profiles.
    Profiles {
        #[command(subcommand)]
        command: ProfilesCommand,
    },
}

#[derive(Subcommand)]
enum ProfilesCommand {
    /// Print the pseudonymous shared form of every stored profile.
    Export {
        #[arg(long, default_value = "gateway.toml")]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge shared profiles into the store. Run while the gateway is stopped.
    Import {
        file: PathBuf,
        #[arg(long, default_value = "gateway.toml")]
        config: PathBuf,
    },
}

type CliResult = Result<ExitCode, String>;

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, String> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, String> {
    Ok(match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pick_device(ctx: &NetworkContext, mud_url: &str, device: Option<MacAddr>) -> Result<MacAddr, String> {
    if let Some(mac) = device {
        return Ok(mac);
    }
    let matches: Vec<MacAddr> = ctx
        .devices
        .iter()
        .filter(|d| d.mud_url.as_deref() == Some(mud_url))
        .map(|d| d.mac)
        .collect();
    match matches.as_slice() {
        [mac] => Ok(*mac),
        [] => Err(format!("no context device has mud_url {mud_url}; pass --device")),
        _ => Err(format!("several devices use {mud_url}; pass --device")),
    }
}

fn compile_cmd(
    mud: &Path,
    context: &Path,
    device: Option<MacAddr>,
    diff: Option<&Path>,
    out: Option<&Path>,
) -> CliResult {
    let ctx = load_context(context).map_err(io_err)?;
    let profile = parse_mud(&read(mud)?).map_err(|e| format!("{}: {e}", mud.display()))?;
    let violations = validate_profile(&profile);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {} ({:?})", v.path, v.kind);
        }
        return Err(format!("{}: {} violation(s)", mud.display(), violations.len()));
    }
    let mac = pick_device(&ctx, &profile.mud_url, device)?;
    let record = ctx
        .device(mac)
        .ok_or_else(|| format!("device {mac} is not in the context"))?;
    let (rs, warnings) = compile(&profile, &ctx, record).map_err(io_err)?;
    for w in &warnings {
        eprintln!(
            "warning: {}: {}",
            w.provenance,
            serde_json::to_string(&w.kind).map_err(io_err)?
        );
    }

    if let Some(old_path) = diff {
        let text = read(old_path)?;
        let old: RuleSet = match parse_mud(&text) {
            Ok(old_mud) => compile(&old_mud, &ctx, record).map_err(io_err)?.0,
            Err(_) => read_rules_jsonl(text.as_bytes(), mac).map_err(|e| format!("{}: {e}", old_path.display()))?,
        };
        let delta = diff_rulesets(&old, &rs).map_err(io_err)?;
        println!("{}", serde_json::to_string_pretty(&delta).map_err(io_err)?);
        if let Some(p) = out {
            write_rules_jsonl(&rs, create(p)?).map_err(io_err)?;
        }
    } else {
        write_rules_jsonl(&rs, sink(out)?).map_err(io_err)?;
    }
    eprintln!(
        "{mac}: {} rule(s) + default drop, {} warning(s)",
        rs.rules.len(),
        warnings.len()
    );
    Ok(if warnings.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_WARNINGS)
    })
}

fn write_outputs(dir: &Path, run: &RunOutput) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    write_jsonl(&run.events, create(&dir.join("trace.jsonl"))?).map_err(io_err)?;
    write_jsonl(&run.verdicts, create(&dir.join("verdicts.jsonl"))?).map_err(io_err)?;
    write_jsonl(&run.features, create(&dir.join("features.jsonl"))?).map_err(io_err)?;
    write_jsonl(&run.reports, create(&dir.join("reports.jsonl"))?).map_err(io_err)?;
    write_jsonl(&run.changes, create(&dir.join("changes.jsonl"))?).map_err(io_err)?;
    let mut m = create(&dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(&mut m, &run.metrics).map_err(io_err)?;
    m.write_all(b"\n").map_err(io_err)?;
    let mut hist = LatencyHistogram::default();
    for v in &run.verdicts {
        hist.record(v.latency_ns);
    }
    if let Ok(report) = hist.report() {
        report.write_csv(create(&dir.join("latency.csv"))?).map_err(io_err)?;
    }
    Ok(())
}

fn print_metrics(run: &RunOutput) -> Result<(), String> {
    println!("{}", serde_json::to_string_pretty(&run.metrics).map_err(io_err)?);
    Ok(())
}

fn simulate_cmd(path: &Path, seed: Option<u64>, out: Option<&Path>, assert: bool) -> CliResult {
    let mut s = Scenario::load(path).map_err(io_err)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let run = run_scenario(&s).map_err(io_err)?;
    print_metrics(&run)?;
    if let Some(dir) = out {
        write_outputs(dir, &run)?;
    }
    if assert {
        let failures = s.expect.check(&run.metrics);
        for f in &failures {
            eprintln!("expectation failed: {f}");
        }
        if !failures.is_empty() {
            return Ok(ExitCode::from(EXIT_ASSERT));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn replay_cmd(scenario: &Path, trace: &Path, verdicts: Option<&Path>, out: Option<&Path>) -> CliResult {
    let s = Scenario::load(scenario).map_err(io_err)?;
    let file = File::open(trace).map_err(|e| format!("{}: {e}", trace.display()))?;
    let events = read_trace(BufReader::new(file)).map_err(|e| format!("{}: {e}", trace.display()))?;
    let run = replay(&s, &events).map_err(io_err)?;
    print_metrics(&run)?;
    if let Some(dir) = out {
        write_outputs(dir, &run)?;
    }
    if let Some(path) = verdicts {
        let recorded: Vec<VerdictRecord> = read(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
            .collect::<Result<_, _>>()?;
        let diffs = diff_verdicts(&recorded, &run.verdicts);
        for d in diffs.iter().take(20) {
            eprintln!("verdict differs: {}", serde_json::to_string(d).map_err(io_err)?);
        }
        if !diffs.is_empty() {
            eprintln!("{} verdict(s) differ", diffs.len());
            return Ok(ExitCode::from(EXIT_ASSERT));
        }
        eprintln!("all {} verdicts match", recorded.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(config: &Path, trace: Option<PathBuf>, speed: f64) -> CliResult {
    if speed.is_nan() || speed <= 0.0 {
        return Err(format!("--speed must be > 0, got {speed}"));
    }
    let cfg = load_config(config).map_err(io_err)?;
    let playback = trace.map(|trace| Playback { trace, speed });
    let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
    rt.block_on(serve(cfg, playback)).map_err(io_err)?;
    Ok(ExitCode::SUCCESS)
}

fn profiles_cmd(cmd: ProfilesCommand) -> CliResult {
    match cmd {
        ProfilesCommand::Export { config, out } => {
            let cfg = load_config(&config).map_err(io_err)?;
            let store = StateStore::open(&cfg.state_dir).map_err(io_err)?;
            let docs: Vec<SharedProfile> = store
                .profiles()
                .values()
                .map(|p| export_profile(p, &cfg.profiler))
                .collect();
            let mut w = sink(out.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &docs).map_err(io_err)?;
            w.write_all(b"\n").map_err(io_err)?;
            eprintln!("exported {} profile(s)", docs.len());
        }
        ProfilesCommand::Import { file, config } => {
            let cfg = load_config(&config).map_err(io_err)?;
            let text = read(&file)?;
            let docs: Vec<SharedProfile> = match serde_json::from_str(&text) {
                Ok(docs) => docs,
                Err(_) => vec![serde_json::from_str(&text).map_err(|e| format!("{}: {e}", file.display()))?],
            };
            let classes = import_into_store(&cfg.state_dir, &docs).map_err(io_err)?;
            for c in classes {
                eprintln!("merged {c}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile {
            mud,
            context,
            device,
            diff,
            out,
        } => compile_cmd(&mud, &context, device, diff.as_deref(), out.as_deref()),
        Command::Simulate {
            scenario,
            seed,
            out,
            assert,
        } => simulate_cmd(&scenario, seed, out.as_deref(), assert),
        Command::Replay {
            scenario,
            trace,
            verdicts,
            out,
        } => replay_cmd(&scenario, &trace, verdicts.as_deref(), out.as_deref()),
        Command::Serve { config, trace, speed } => serve_cmd(&config, trace, speed),
        Command::Profiles { command } => profiles_cmd(command),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
