//! Operator entry point: concrete runs, full concolic analysis, branch
//! inversion with accuracy scoring, and the test-suite harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand};

use predhunt_core::concolic::{
    compute_accuracy, execute_concolic, invert_branch, ConcolicOutcome, InversionResult,
    ModelMode, SessionConfig,
};
use predhunt_core::harness::{parse_manifest, run_suite};
use predhunt_core::minivm::{assemble, Mode, Program, Vm, WatchFlag, Watchpoint};
use predhunt_core::secpred::PredicateSet;
use predhunt_core::semantics::model_catalog;
use predhunt_core::solver::{SolverBackend, SolverSession};

#[derive(Parser)]
#[command(name = "predhunt", version, about = "Concolic weakness hunter for MiniVM programs")]
struct Cli {
    /// Solver backend: builtin, brute, or external:<command>
    #[arg(long, global = true)]
    solver: Option<String>,

    /// Per-query solver timeout in milliseconds
    #[arg(long, global = true, default_value_t = 10_000)]
    timeout_ms: u64,

    /// Active predicates: comma list of null-deref,div-zero,oob,int-overflow or "all"
    #[arg(long, global = true, default_value = "all")]
    predicates: String,

    /// Function-semantics mode: full or byte-trace
    #[arg(long, global = true, default_value = "full")]
    models: String,

    /// Worker threads for suite execution
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Output directory for generated inputs, reports, and metrics
    #[arg(long, global = true, default_value = "predhunt-out")]
    out: PathBuf,

    /// Dump each solved security predicate as an SMT-LIB2 file
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    emit_smt: bool,

    /// Fail the suite run when any case errors (CI mode)
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    strict: bool,

    /// List the available function-semantics models and exit
    #[arg(long, action = ArgAction::SetTrue)]
    list_models: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a program concretely and print the run result as JSON
    Run {
        program: PathBuf,
        input: PathBuf,
        /// Sanitizer-analog mode: trap on OOB, stack smash, watched overflow
        #[arg(long, action = ArgAction::SetTrue)]
        checked: bool,
        /// Overflow watchpoints, addr:flag (flags: cf, of, shiftu, shifts, lastsbbof)
        #[arg(long)]
        watch: Vec<String>,
    },
    /// Full concolic session: detect weaknesses and generate inputs
    Analyze { program: PathBuf, input: PathBuf },
    /// Invert every symbolic branch in direct order and score accuracy
    Invert {
        program: PathBuf,
        input: PathBuf,
        #[arg(long, default_value = "direct")]
        order: String,
    },
    /// Run a manifest of positive/negative cases and print the score table
    Suite { manifest: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if cli.list_models {
        for (name, what) in model_catalog() {
            println!("{name:<40} {what}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let command = match cli.command {
        Some(c) => c,
        None => bail!("no subcommand; see --help"),
    };

    let backend = solver_backend(cli.solver.as_deref())?;
    let predicates = PredicateSet::parse(&cli.predicates)
        .ok_or_else(|| anyhow!("bad --predicates list: {}", cli.predicates))?;
    let models = match cli.models.as_str() {
        "full" => ModelMode::Full,
        "byte-trace" => ModelMode::ByteTrace,
        other => bail!("bad --models value: {other}"),
    };
    let config = SessionConfig {
        predicates,
        models,
        solver_backend: backend,
        timeout_ms: cli.timeout_ms,
        emit_smt: cli.emit_smt,
        verify: true,
    };

    match command {
        Command::Run { program, input, checked, watch } => {
            cmd_run(&program, &input, checked, &watch)
        }
        Command::Analyze { program, input } => cmd_analyze(&program, &input, &config, &cli.out),
        Command::Invert { program, input, order } => {
            if order != "direct" {
                bail!("only --order direct is supported");
            }
            cmd_invert(&program, &input, &config, &cli.out)
        }
        Command::Suite { manifest } => {
            cmd_suite(&manifest, &config, cli.workers, &cli.out, cli.strict)
        }
    }
}

fn solver_backend(spec: Option<&str>) -> Result<SolverBackend> {
    let spec = std::env::var("PREDHUNT_SOLVER")
        .ok()
        .or_else(|| spec.map(str::to_string))
        .unwrap_or_else(|| "builtin".to_string());
    Ok(match spec.as_str() {
        "builtin" => SolverBackend::Builtin,
        "brute" => SolverBackend::BruteForce,
        other => match other.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => SolverBackend::External(cmd.to_string()),
            _ => bail!("bad solver spec: {other} (builtin | brute | external:<command>)"),
        },
    })
}

fn load_program(path: &Path) -> Result<Arc<Program>> {
    let source = std::fs::read_to_string(path)
        .with_context(|| format!("reading program {}", path.display()))?;
    let program = assemble(&source).with_context(|| format!("assembling {}", path.display()))?;
    Ok(Arc::new(program))
}

fn parse_watchpoints(specs: &[String]) -> Result<Vec<Watchpoint>> {
    let mut out = Vec::new();
    for spec in specs {
        let (addr_text, flag_text) = spec
            .split_once(':')
            .ok_or_else(|| anyhow!("bad --watch spec {spec}; expected addr:flag"))?;
        let addr = parse_u64(addr_text)?;
        let flag = WatchFlag::parse(flag_text)
            .ok_or_else(|| anyhow!("bad watch flag {flag_text}"))?;
        out.push(Watchpoint { addr, flag });
    }
    Ok(out)
}

fn parse_u64(text: &str) -> Result<u64> {
    let text = text.trim();
    if let Some(hex) = text.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).map_err(|e| anyhow!("bad number {text}: {e}"))
    } else {
        text.parse().map_err(|e| anyhow!("bad number {text}: {e}"))
    }
}

fn cmd_run(program: &Path, input: &Path, checked: bool, watch: &[String]) -> Result<ExitCode> {
    let program = load_program(program)?;
    let input_bytes =
        std::fs::read(input).with_context(|| format!("reading input {}", input.display()))?;
    let watchpoints = parse_watchpoints(watch)?;
    let mode = if checked { Mode::Checked } else { Mode::Plain };
    let mut vm = Vm::new(program, input_bytes, mode, watchpoints);
    let result = vm.run_to_end()?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(match result.outcome {
        predhunt_core::minivm::Outcome::Exit { .. } => ExitCode::SUCCESS,
        predhunt_core::minivm::Outcome::Trap { .. } => ExitCode::from(2),
    })
}

#[derive(serde::Serialize)]
struct SessionReport<'a> {
    input_file: String,
    path_predicate_size: usize,
    branch_constraints: usize,
    branches: Vec<BranchLine>,
    generated_inputs: Vec<String>,
    reports: &'a [predhunt_core::secpred::ErrorReport],
}

#[derive(serde::Serialize)]
struct BranchLine {
    addr: u64,
    taken: bool,
    invertible: Option<&'static str>,
}

fn write_outputs(
    out_dir: &Path,
    outcome: &mut ConcolicOutcome,
    input_path: &Path,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut input_files = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for report in &mut outcome.reports {
        let n = seen.entry(report.site_hash()).or_insert(0usize);
        let name = format!("{:016x}_{n}.bin", report.site_hash());
        *n += 1;
        std::fs::write(out_dir.join(&name), &report.input)?;
        report.input_file = Some(name.clone());
        input_files.push(name);
    }
    for (name, script) in &outcome.smt_dumps {
        std::fs::write(out_dir.join(name), script)?;
    }
    if !outcome.smt_dumps.is_empty() {
        for report in &mut outcome.reports {
            let name = format!("{:016x}.smt2", report.site_hash());
            if outcome.smt_dumps.iter().any(|(n, _)| *n == name) {
                report.smt_file = Some(name);
            }
        }
    }
    let session = SessionReport {
        input_file: input_path.display().to_string(),
        path_predicate_size: outcome.path.len(),
        branch_constraints: outcome.path.branch_count(),
        branches: outcome
            .path
            .iter()
            .filter(|c| c.is_branch())
            .map(|c| BranchLine {
                addr: c.inst_addr,
                taken: matches!(
                    c.kind,
                    predhunt_core::path::ConstraintKind::Branch { taken: true, .. }
                ),
                invertible: None,
            })
            .collect(),
        generated_inputs: input_files.clone(),
        reports: &outcome.reports,
    };
    std::fs::write(
        out_dir.join("session.json"),
        serde_json::to_string_pretty(&session)?,
    )?;
    std::fs::write(
        out_dir.join("reports.json"),
        serde_json::to_string_pretty(&outcome.reports)?,
    )?;
    Ok(input_files)
}

fn cmd_analyze(
    program_path: &Path,
    input_path: &Path,
    config: &SessionConfig,
    out_dir: &Path,
) -> Result<ExitCode> {
    let program = load_program(program_path)?;
    let input = std::fs::read(input_path)
        .with_context(|| format!("reading input {}", input_path.display()))?;
    let mut outcome = execute_concolic(&program, &input, config)?;
    let files = write_outputs(out_dir, &mut outcome, input_path)?;
    println!(
        "path predicate: {} constraints ({} branches)",
        outcome.path.len(),
        outcome.path.branch_count()
    );
    for report in &outcome.reports {
        println!(
            "{:?} source={:#x} sink={:#x} signedness={:?} precondition={} verification={:?} input={}",
            report.kind,
            report.source_addr,
            report.sink_addr,
            report.signedness_evidence,
            report.precondition_used,
            report.verification,
            report.input_file.as_deref().unwrap_or("-"),
        );
    }
    println!(
        "{} reports, {} generated inputs, outputs in {}",
        outcome.reports.len(),
        files.len(),
        out_dir.display()
    );
    Ok(if outcome.reports.is_empty() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_invert(
    program_path: &Path,
    input_path: &Path,
    config: &SessionConfig,
    out_dir: &Path,
) -> Result<ExitCode> {
    let program = load_program(program_path)?;
    let input = std::fs::read(input_path)
        .with_context(|| format!("reading input {}", input_path.display()))?;
    let outcome = execute_concolic(&program, &input, config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut solver = SolverSession::new(config.solver_backend.clone(), config.timeout_ms);
    let mut satisfiable = Vec::new();
    let mut n_unsat = 0usize;
    let mut n_unknown = 0usize;
    let mut branches = Vec::new();
    let mut generated = Vec::new();
    for c in outcome.path.iter().filter(|c| c.is_branch()) {
        let verdict = invert_branch(
            &outcome.path,
            c.index,
            &mut solver,
            &outcome.original_input,
            &outcome.input_vars,
        );
        let (verdict_name, text) = match &verdict {
            InversionResult::NewInput(bytes) => {
                let name = format!("invert_{:x}_{}.bin", c.inst_addr, c.index);
                std::fs::write(out_dir.join(&name), bytes)?;
                generated.push(name.clone());
                let rr = Vm::new(program.clone(), bytes.clone(), Mode::Plain, Vec::new())
                    .run_to_end();
                match rr {
                    Ok(rr) => {
                        satisfiable.push((c.trace_pos.unwrap(), rr.branch_trace));
                        ("sat", format!("sat -> {name}"))
                    }
                    Err(e) => ("sat", format!("sat (re-execution failed: {e})")),
                }
            }
            InversionResult::Unsat => {
                n_unsat += 1;
                ("unsat", "unsat".to_string())
            }
            InversionResult::Unknown => {
                n_unknown += 1;
                ("unknown", "unknown".to_string())
            }
        };
        branches.push(BranchLine {
            addr: c.inst_addr,
            taken: matches!(
                c.kind,
                predhunt_core::path::ConstraintKind::Branch { taken: true, .. }
            ),
            invertible: Some(verdict_name),
        });
        println!("branch {:#x} index {} -> {}", c.inst_addr, c.index, text);
    }
    match compute_accuracy(&satisfiable, &outcome.run.branch_trace) {
        Some(acc) => println!(
            "accuracy: {acc:.2}% ({} satisfiable, {} unsat, {} unknown)",
            satisfiable.len(),
            n_unsat,
            n_unknown
        ),
        None => println!("accuracy: N/A (no satisfiable queries)"),
    }
    let session = SessionReport {
        input_file: input_path.display().to_string(),
        path_predicate_size: outcome.path.len(),
        branch_constraints: outcome.path.branch_count(),
        branches,
        generated_inputs: generated,
        reports: &outcome.reports,
    };
    std::fs::write(
        out_dir.join("session.json"),
        serde_json::to_string_pretty(&session)?,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_suite(
    manifest: &Path,
    config: &SessionConfig,
    workers: usize,
    out_dir: &Path,
    strict: bool,
) -> Result<ExitCode> {
    let cases = parse_manifest(manifest)?;
    if cases.is_empty() {
        bail!("manifest {} lists no cases", manifest.display());
    }
    let (results, metrics) = run_suite(&cases, config, workers);
    print!("{}", metrics.render_table());
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    std::fs::write(
        out_dir.join("results.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    if strict && !metrics.errored.is_empty() {
        eprintln!("{} errored cases (strict mode)", metrics.errored.len());
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}
