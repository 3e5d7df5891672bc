//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::checker::{check, explain, summary, Limits, Verdict};
use crate::datagen::{generate_object, GeneratorRegistry, Rng};
use crate::executor::{reset_target, run_workload, RunConfig, DEFAULT_TIMEOUT};
use crate::fixture::{serve, BugMode, FixtureConfig};
use crate::history::{load_history, render_log, save_history, History};
use crate::spec_model::{parse_service_spec, parse_unvalidated, resolve_links, student_spec, validate_spec, ServiceSpec, SpecError};
use crate::workload::{parse_workload, Workload};

/// Exit status for malformed command lines.
pub const EXIT_USAGE: i32 = 64;
/// Exit status for unreadable or invalid inputs and other failures.
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "jeprest", version, about = "Linearizability testing for REST services")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a service spec, printing every diagnostic.
    ValidateSpec {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Show the link dependencies and sample request bodies a spec produces.
    GenPreview {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        resource: Option<String>,
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a workload and write the history.
    Run(RunArgs),
    /// Check a recorded history for linearizability.
    Check {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        limits: LimitArgs,
        /// Print the counterexample, if any.
        #[arg(long)]
        explain: bool,
    },
    /// Run a workload, then check the history it produced.
    Test {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        limits: LimitArgs,
        /// Where to write the verdict report; defaults to the history path
        /// with `.report.txt` appended.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print a history in log form.
    Render {
        #[arg(long)]
        history: PathBuf,
    },
    /// Serve the in-memory reference service.
    Fixture {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = BugMode::Atomic)]
        bug: BugMode,
        /// Expose POST /reset.
        #[arg(long)]
        allow_reset: bool,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed of the id generator; random when absent.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub workload: PathBuf,
    #[arg(long, env = "JEPREST_TARGET")]
    pub target: Option<String>,
    #[arg(long)]
    pub clients: Option<u32>,
    #[arg(long = "period-ms")]
    pub period_ms: Option<u64>,
    #[arg(long = "duration-s")]
    pub duration_s: Option<u64>,
    #[arg(long = "timeout-ms")]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-client cap on flow executions.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// POST /reset to the target before running.
    #[arg(long)]
    pub reset: bool,
    #[arg(long, default_value = "history.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LimitArgs {
    #[arg(long = "max-states")]
    pub max_states: Option<usize>,
    #[arg(long = "timeout-s")]
    pub timeout_s: Option<u64>,
}

impl LimitArgs {
    fn limits(&self) -> Limits {
        let d = Limits::default();
        Limits {
            max_states: self.max_states.unwrap_or(d.max_states),
            timeout: self.timeout_s.map_or(d.timeout, Duration::from_secs),
            memoize: true,
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))
}

fn load_spec(path: Option<&Path>) -> Result<ServiceSpec, Failure> {
    match path {
        None => Ok(student_spec()),
        Some(p) => parse_service_spec(&read(p)?).map_err(|e| fail(format!("{}: {e}", p.display()))),
    }
}

fn load_workload(path: &Path, spec: &ServiceSpec) -> Result<Workload, Failure> {
    parse_workload(&read(path)?, spec).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| fail(format!("cannot start the runtime: {e}")))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::ValidateSpec { spec } => validate(&spec, out),
        Command::GenPreview {
            spec,
            resource,
            count,
            seed,
        } => preview(spec.as_deref(), resource.as_deref(), count, seed, out),
        Command::Run(args) => {
            let (_, seed, history) = execute(&args, out)?;
            writeln!(out, "wrote {} events to {} (seed {seed})", history.len(), args.out.display()).ok();
            Ok(0)
        }
        Command::Check {
            history,
            spec,
            limits,
            explain: show,
        } => {
            let spec = load_spec(spec.as_deref())?;
            let history = load_history(&history).map_err(|e| fail(format!("{}: {e}", history.display())))?;
            let verdict = check(&history, &spec, limits.limits()).map_err(|e| fail(e.to_string()))?;
            writeln!(out, "{}", summary(&verdict)).ok();
            if show && !verdict.is_linearizable() {
                write!(out, "{}", explain(&verdict, &history)).ok();
            }
            Ok(verdict.exit_code())
        }
        Command::Test { run, limits, report } => {
            let (spec, seed, history) = execute(&run, out)?;
            let verdict = check(&history, &spec, limits.limits()).map_err(|e| fail(e.to_string()))?;
            let report = report.unwrap_or_else(|| {
                let mut p = run.out.clone().into_os_string();
                p.push(".report.txt");
                p.into()
            });
            std::fs::write(&report, report_text(seed, &verdict, &history))
                .map_err(|e| fail(format!("cannot write {}: {e}", report.display())))?;
            writeln!(out, "{}", summary(&verdict)).ok();
            writeln!(out, "history: {} ({} events), report: {}", run.out.display(), history.len(), report.display()).ok();
            Ok(verdict.exit_code())
        }
        Command::Render { history } => {
            let h = load_history(&history).map_err(|e| fail(format!("{}: {e}", history.display())))?;
            write!(out, "{}", render_log(&h)).ok();
            Ok(0)
        }
        Command::Fixture {
            port,
            host,
            bug,
            allow_reset,
            spec,
            seed,
        } => {
            let spec = load_spec(spec.as_deref())?;
            let config = FixtureConfig {
                spec,
                host,
                port,
                mode: bug,
                allow_reset,
                seed: seed.unwrap_or_else(rand::random),
            };
            let rt = runtime()?;
            rt.block_on(async {
                let handle = serve(config).await.map_err(|e| fail(format!("cannot bind: {e}")))?;
                writeln!(out, "fixture listening on {} ({} mode)", handle.addr(), handle.mode()).ok();
                out.flush().ok();
                handle.run_until_ctrl_c().await;
                Ok(0)
            })
        }
    }
}

fn validate(path: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let text = read(path)?;
    let diagnostics = match parse_unvalidated(&text) {
        Ok(spec) => validate_spec(&spec).iter().map(ToString::to_string).collect(),
        Err(SpecError::Invalid(ds)) => ds.iter().map(ToString::to_string).collect(),
        Err(e @ SpecError::Syntax { .. }) => vec![e.to_string()],
    };
    if diagnostics.is_empty() {
        writeln!(out, "{}: valid", path.display()).ok();
        return Ok(0);
    }
    for d in &diagnostics {
        writeln!(out, "{}: {d}", path.display()).ok();
    }
    Ok(1)
}

fn preview(spec: Option<&Path>, resource: Option<&str>, count: usize, seed: Option<u64>, out: &mut dyn Write) -> Result<i32, Failure> {
    let spec = load_spec(spec)?;
    let seed = seed.unwrap_or_else(rand::random);
    writeln!(out, "seed {seed}").ok();
    for (target, bindings) in resolve_links(&spec).iter() {
        for b in bindings {
            writeln!(out, "{target}.{} <- {}.{} via {}", b.parameter, b.source_operation_id, b.response_field, b.link_name).ok();
        }
    }
    let registry = GeneratorRegistry::builtin();
    let mut rng = Rng::new(seed);
    let resources: Vec<_> = spec
        .resources
        .iter()
        .filter(|r| resource.map_or(true, |name| r.name == name))
        .collect();
    if resources.is_empty() {
        return Err(fail(format!("no resource named {}", resource.unwrap_or(""))));
    }
    for r in resources {
        for _ in 0..count {
            let obj = generate_object(&registry, r, &mut rng).map_err(|e| fail(e.to_string()))?;
            writeln!(out, "{} {}", r.name, serde_json::Value::Object(obj)).ok();
        }
    }
    Ok(0)
}

/// Loads inputs, runs the workload and saves the history.
fn execute(args: &RunArgs, out: &mut dyn Write) -> Result<(ServiceSpec, u64, History), Failure> {
    let spec = load_spec(args.spec.as_deref())?;
    let workload = load_workload(&args.workload, &spec)?;
    let target = args
        .target
        .clone()
        .or_else(|| workload.target.clone())
        .ok_or_else(|| Failure {
            code: EXIT_USAGE,
            message: "no target: pass --target, set JEPREST_TARGET or name one in the workload".into(),
        })?;
    let seed = match args.seed.or(workload.seed) {
        Some(s) => s,
        None => {
            let s = rand::random();
            writeln!(out, "seed {s}").ok();
            s
        }
    };
    let config = RunConfig {
        target,
        timeout: args.timeout_ms.map_or(DEFAULT_TIMEOUT, Duration::from_millis),
        clients: args.clients.unwrap_or(workload.clients),
        period: Duration::from_millis(args.period_ms.unwrap_or(workload.period_millis)),
        duration: Duration::from_secs(args.duration_s.unwrap_or(workload.duration_secs)),
        seed,
        iterations: args.iterations.or(workload.iterations),
    };
    let rt = runtime()?;
    let history = rt.block_on(async {
        if args.reset {
            reset_target(&config.target, config.timeout)
                .await
                .map_err(|e| fail(format!("cannot reset {}: {e}", config.target)))?;
        }
        run_workload(&spec, &workload, &config).await.map_err(|e| fail(e.to_string()))
    })?;
    save_history(&history, &args.out).map_err(|e| fail(format!("cannot write {}: {e}", args.out.display())))?;
    Ok((spec, seed, history))
}

fn report_text(seed: u64, verdict: &Verdict, history: &History) -> String {
    format!("seed {seed}\n{}\n{}", summary(verdict), explain(verdict, history))
}
