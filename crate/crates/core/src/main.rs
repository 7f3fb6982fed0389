use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nanopipe::bench::{microbench, BenchKind, MIN_ITERATIONS};
use nanopipe::cpx::RouterMode;
use nanopipe::pipeline::Mode;
use nanopipe::scenarios::{builtin_scenarios, load_scenario, run_scenario, run_sweep};
use nanopipe::trace::write_csv;
use nanopipe::Result;

/// Relative tolerance of `run --check` against the closed-form period.
const CHECK_TOLERANCE: f64 = 0.02;

#[derive(Parser)]
#[command(name = "nanopipe", version, about = "Nano-drone pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Serialized,
    Pipelined,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouterArg {
    Baseline,
    Zerocopy,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchArg {
    CtxSwitch,
    EventComplete,
    PacketEncode,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trace.csv and metrics.json.
    Run {
        /// Built-in scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        router: Option<RouterArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fail if the measured period is more than 2% off the closed form.
        #[arg(long)]
        check: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Wall-clock microbenchmarks of the runtime.
    Bench {
        /// Benchmark to run; all of them when omitted.
        #[arg(long, value_enum)]
        kind: Option<BenchArg>,
        #[arg(long, default_value_t = MIN_ITERATIONS)]
        iterations: u64,
    },
    /// List the built-in scenarios.
    ListScenarios,
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Run {
            scenario,
            mode,
            router,
            seed,
            check,
            out,
        } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(m) = mode {
                s.mode = match m {
                    ModeArg::Serialized => Mode::Serialized,
                    ModeArg::Pipelined => Mode::Pipelined,
                };
            }
            if let Some(r) = router {
                s.router = match r {
                    RouterArg::Baseline => RouterMode::Baseline,
                    RouterArg::Zerocopy => RouterMode::ZeroCopy,
                };
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let (trace, metrics) = run_scenario(&s)?;
            fs::create_dir_all(&out)?;
            write_csv(trace.events(), fs::File::create(out.join("trace.csv"))?)?;
            fs::write(out.join("metrics.json"), metrics.to_json()? + "\n")?;
            println!(
                "{}: closed loop {:.2} Hz, inference {:.2} Hz, drop {:.2}%, e2e {:.2} ms (p95 {:.2} ms){}",
                s.name,
                metrics.closed_loop_hz,
                metrics.inference_hz,
                metrics.drop_pct,
                metrics.e2e_latency_ms.mean,
                metrics.e2e_latency_ms.p95,
                metrics.rtt_ms.map(|r| format!(", rtt {r:.2} ms")).unwrap_or_default()
            );
            if !s.sweep_hz.is_empty() {
                let sweep = run_sweep(&s)?;
                let rows: Vec<_> = sweep
                    .iter()
                    .map(|(hz, m)| serde_json::json!({ "trigger_rate_hz": hz, "metrics": m }))
                    .collect();
                fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
                for (hz, m) in &sweep {
                    println!("  at {hz} Hz: closed loop {:.2} Hz, e2e {:.2} ms", m.closed_loop_hz, m.e2e_latency_ms.mean);
                }
            }
            if check {
                match s.expected_period_us() {
                    Ok(expected) => {
                        let measured = 1e6 / metrics.closed_loop_hz;
                        let rel = (measured - expected).abs() / expected;
                        if rel > CHECK_TOLERANCE {
                            eprintln!(
                                "check failed: measured period {measured:.1} µs vs closed form {expected:.1} µs ({:.2}% off)",
                                rel * 100.0
                            );
                            return Ok(Outcome::CheckFailed);
                        }
                        println!("check passed: {measured:.1} µs vs {expected:.1} µs");
                    }
                    Err(why) => eprintln!("warning: check skipped, {why}"),
                }
            }
            Ok(Outcome::Ok)
        }
        Command::Bench { kind, iterations } => {
            let kinds = match kind {
                None => BenchKind::ALL.to_vec(),
                Some(BenchArg::CtxSwitch) => vec![BenchKind::CtxSwitch],
                Some(BenchArg::EventComplete) => vec![BenchKind::EventComplete],
                Some(BenchArg::PacketEncode) => vec![BenchKind::PacketEncode],
            };
            for k in kinds {
                println!("{}", microbench(k, iterations.max(1))?);
            }
            Ok(Outcome::Ok)
        }
        Command::ListScenarios => {
            for name in builtin_scenarios() {
                let s = load_scenario(name)?;
                println!("{name:<22} {}", s.description);
            }
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
