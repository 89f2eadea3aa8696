use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rcorp_core::assembly::{assemble_global, assemble_local, GainSet, GlobalAssembly, LocalAssembly};
use rcorp_core::config::{GainsFile, GainsMeta, RunConfig, Scenario, SynthesisPath};
use rcorp_core::graph::build_graph_matrices;
use rcorp_core::lmi;
use rcorp_core::reproduce;
use rcorp_core::synthesis::{self, SynthesisError};
use rcorp_core::verification::{self, VerificationError};

#[derive(Parser)]
#[command(name = "rcorp", version, about = "Cooperative output regulation of heterogeneous multi-agent systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Args)]
struct SeedArg {
    /// Overrides the configuration seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Report the five solvability conditions for a configuration.
    Check {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Design gains and write them as gains.json.
    Synthesize {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides the configured synthesis path.
        #[arg(long, value_name = "global|local|acyclic|check")]
        path: Option<SynthesisPath>,
        /// Gains to certify (required with --path check).
        #[arg(long, value_name = "PATH")]
        gains: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Skip the condition check.
        #[arg(long)]
        force: bool,
        /// Write the LMI problem description and solver margins (global
        /// and local paths) as JSON.
        #[arg(long, value_name = "PATH")]
        dump_lmi: Option<PathBuf>,
    },
    /// Gain-set membership, regulator residuals and a simulation summary.
    Verify {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_name = "PATH")]
        gains: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Also write verify.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Simulate the closed loop and write trace.csv.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_name = "PATH")]
        gains: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Monte Carlo study of parameter perturbations.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_name = "PATH")]
        gains: PathBuf,
        /// Perturbation half-width.
        #[arg(long, value_name = "FLOAT")]
        rho: Option<f64>,
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        /// Also write robustness.json here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Re-check the bundled worked examples.
    Reproduce {
        /// 1 to 6, or "all".
        example: String,
    },
}

/// Failure classes and their exit codes.
#[derive(Debug)]
enum Failure {
    /// Usage or configuration error.
    Usage(anyhow::Error),
    /// Numerical infeasibility or a failed precondition on the numerics.
    Numerical(String),
    /// A reproduced claim does not hold.
    Assertion(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Numerical(_) => 2,
            Self::Assertion(_) => 3,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Usage(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn synthesis_failure(e: SynthesisError) -> Failure {
    match e {
        SynthesisError::NumericallyInfeasible { .. }
        | SynthesisError::LocalInfeasible { .. }
        | SynthesisError::RiccatiDiverged(_)
        | SynthesisError::NotSchur(_)
        | SynthesisError::Linalg(_) => Failure::Numerical(e.to_string()),
        other => Failure::Usage(other.into()),
    }
}

fn verification_failure(e: VerificationError) -> Failure {
    match e {
        VerificationError::NotSchur(_) | VerificationError::SpectraOverlap(_) | VerificationError::Linalg(_) => {
            Failure::Numerical(e.to_string())
        }
        other => Failure::Usage(other.into()),
    }
}

struct Loaded {
    sc: Scenario,
    ga: GlobalAssembly,
    la: Vec<LocalAssembly>,
}

fn scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.build()?)
}

fn load(path: &Path, seed: Option<u64>) -> Result<Loaded, Failure> {
    assemble(scenario(path, seed)?)
}

fn assemble(sc: Scenario) -> Result<Loaded, Failure> {
    let gm = build_graph_matrices(&sc.graph, sc.model.p())?;
    let ga = assemble_global(&sc.model, &sc.im, &gm)?;
    let la = assemble_local(&sc.model, &sc.im)?;
    Ok(Loaded { sc, ga, la })
}

fn load_gains(path: &Path, sc: &Scenario) -> Result<GainSet, Failure> {
    Ok(GainsFile::from_path(path)?.gains_for(sc)?)
}

fn out_dir(flag: Option<&Path>, sc: &Scenario) -> Result<PathBuf, Failure> {
    let dir = flag.map(Path::to_path_buf).or_else(|| sc.config.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| ".".into());
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|()| out.flush());
}

fn print_json(v: &Value) {
    emit(&serde_json::to_string_pretty(v).expect("report serializes"));
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).expect("report serializes") + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn cmd_check(cfg: &ConfigArg) -> Outcome {
    let sc = scenario(&cfg.config, None)?;
    let report = sc.check_conditions();
    print_json(&serde_json::to_value(&report)?);
    if report.all_passed {
        Ok(())
    } else {
        let failed: Vec<u8> = report.conditions.iter().filter(|c| !c.passed).map(|c| c.id).collect();
        Err(Failure::Numerical(format!("conditions {failed:?} fail")))
    }
}

fn meta(path: SynthesisPath, margins: Vec<f64>, r_i: Option<Vec<f64>>, radius: f64) -> GainsMeta {
    GainsMeta { path: Some(path.to_string()), margins, r_i, spectral_radius: Some(radius) }
}

fn cmd_synthesize(
    cfg: &ConfigArg,
    path: Option<SynthesisPath>,
    gains: Option<&Path>,
    out: Option<&Path>,
    force: bool,
    dump_lmi: Option<&Path>,
) -> Outcome {
    let sc = scenario(&cfg.config, None)?;
    if !force {
        let report = sc.check_conditions();
        if !report.all_passed {
            eprintln!("{}", serde_json::to_string_pretty(&report)?);
            let failed: Vec<u8> = report.conditions.iter().filter(|c| !c.passed).map(|c| c.id).collect();
            return Err(Failure::Numerical(format!("conditions {failed:?} fail; rerun with --force to synthesize anyway")));
        }
    }
    let Loaded { sc, ga, la } = assemble(sc)?;
    let path = path.unwrap_or(sc.config.synthesis.path);
    let r = sc.config.synthesis.r.clone();
    if let Some(target) = dump_lmi {
        write_lmi_dump(target, path, &ga, &la, r.as_deref())?;
    }
    let (gains_set, meta, extra) = match path {
        SynthesisPath::Global => {
            let res = synthesis::synthesize_global(&ga).map_err(synthesis_failure)?;
            let extra = json!({ "lmi_margin": res.lmi_margin, "recovery_residual": res.recovery_residual });
            (res.gains.clone(), meta(path, vec![res.lmi_margin], None, res.spectral_radius), extra)
        }
        SynthesisPath::Local => {
            let res = synthesis::synthesize_local(&ga, &la, r.as_deref()).map_err(synthesis_failure)?;
            if !res.a_g_schur {
                return Err(Failure::Numerical(format!("local gains give spectral radius {}", res.spectral_radius)));
            }
            let margins = res.agents.iter().map(|a| a.margin).collect();
            let r_i = res.agents.iter().map(|a| a.r).collect();
            let caps: Vec<Option<f64>> = res.agents.iter().map(|a| a.p_cap).collect();
            (res.gains.clone(), meta(path, margins, Some(r_i), res.spectral_radius), json!({ "p_caps": caps }))
        }
        SynthesisPath::Acyclic => {
            let res = synthesis::synthesize_acyclic(&ga, &la, &sc.graph).map_err(synthesis_failure)?;
            if !res.a_g_schur {
                return Err(Failure::Numerical(format!("acyclic gains give spectral radius {}", res.spectral_radius)));
            }
            let extra = json!({
                "order": res.order,
                "local_radii": res.local_radii,
                "spectrum_distance": res.spectrum_distance,
            });
            (res.gains.clone(), meta(path, Vec::new(), None, res.spectral_radius), extra)
        }
        SynthesisPath::Check => {
            let file = gains.ok_or_else(|| anyhow!("--path check needs --gains"))?;
            let k = load_gains(file, &sc)?;
            let weights = r.unwrap_or_else(|| vec![ga.gm.r_threshold; la.len()]);
            let rep = synthesis::check_certificate(&la, &k, &ga.gm, &weights).map_err(synthesis_failure)?;
            let agents: Vec<Value> = rep
                .agents
                .iter()
                .map(|a| json!({ "feasible": a.feasible, "margin": a.margin, "solver_margin": a.solver_margin, "r": a.r }))
                .collect();
            let global = rep.global.as_ref().map(|g| {
                json!({ "structured": g.structured, "lyapunov_margin": g.lyapunov_margin, "min_eig_p": g.min_eig_p })
            });
            print_json(&json!({ "path": "check", "passes": rep.passes(), "agents": agents, "global": global }));
            return if rep.passes() { Ok(()) } else { Err(Failure::Numerical("certificate check failed".into())) };
        }
    };
    let dir = out_dir(out, &sc)?;
    let file = GainsFile::new(&gains_set, meta);
    let target = dir.join("gains.json");
    fs::write(&target, file.to_json_pretty() + "\n").with_context(|| format!("cannot write {}", target.display()))?;
    print_json(&json!({
        "path": path.to_string(),
        "gains": target.display().to_string(),
        "spectral_radius": file.meta.spectral_radius,
        "margins": file.meta.margins,
        "r_i": file.meta.r_i,
        "details": extra,
    }));
    Ok(())
}

/// Solves the problem of each LMI the path would pose and records its shape,
/// status and margins. The local path dumps the uncapped per-agent problems.
fn write_lmi_dump(
    target: &Path,
    path: SynthesisPath,
    ga: &GlobalAssembly,
    la: &[LocalAssembly],
    r: Option<&[f64]>,
) -> Result<(), Failure> {
    let dump_of = |prob: &lmi::LmiProblem| -> Result<Value, Failure> {
        let sol = lmi::solve_feasibility(prob)?;
        Ok(serde_json::to_value(prob.dump(Some(&sol)))?)
    };
    let dump = match path {
        SynthesisPath::Global => json!({ "global": dump_of(&synthesis::global_problem(ga).0)? }),
        SynthesisPath::Local => {
            let weights = r.map_or_else(|| vec![ga.gm.r_threshold; la.len()], <[f64]>::to_vec);
            let mut agents = Vec::new();
            for (l, &ri) in la.iter().zip(weights.iter()) {
                agents.push(dump_of(&synthesis::local_problem(l, ri, &ga.gm).0)?);
            }
            json!({ "local": agents })
        }
        other => return Err(Failure::Usage(anyhow!("--dump-lmi applies to the global and local paths, not {other}"))),
    };
    fs::write(target, serde_json::to_string_pretty(&dump)? + "\n")
        .with_context(|| format!("cannot write {}", target.display()))?;
    Ok(())
}

fn regulator_json(ga: &GlobalAssembly, k: &GainSet, sc: &Scenario, perturbed: bool) -> Value {
    let delta = if perturbed { sc.delta.as_ref() } else { None };
    match verification::solve_regulator(ga, k, &sc.channels, delta) {
        Ok(s) => json!({
            "sylvester_residual": s.sylvester_residual,
            "output_residual": s.output_residual,
            "spectral_radius": s.spectral_radius,
        }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn run_simulation(l: &Loaded, k: &GainSet) -> Result<verification::SimulationTrace, Failure> {
    let init = l.sc.initial_state()?;
    verification::simulate(
        &l.sc.model,
        &l.sc.im,
        l.sc.graph.adjacency(),
        l.sc.graph.pinning(),
        k,
        &l.sc.channels,
        &init,
        l.sc.config.simulation.horizon,
    )
    .map_err(verification_failure)
}

fn simulation_summary(trace: &verification::SimulationTrace) -> Value {
    let last = trace.error_norm.last().copied().unwrap_or(0.0);
    let max = trace.error_norm.iter().copied().fold(0.0, f64::max);
    json!({ "horizon": trace.len().saturating_sub(1), "final_error": last, "max_error": max })
}

fn cmd_verify(cfg: &ConfigArg, gains: &Path, seed: Option<u64>, out: Option<&Path>) -> Outcome {
    let l = load(&cfg.config, seed)?;
    let k = load_gains(gains, &l.sc)?;
    let m = verification::membership(&l.ga, &l.la, &k).map_err(verification_failure)?;
    let mut report = json!({
        "membership": serde_json::to_value(&m)?,
        "chain_holds": m.chain_holds(),
        "regulator": regulator_json(&l.ga, &k, &l.sc, false),
        "simulation": simulation_summary(&run_simulation(&l, &k)?),
    });
    if l.sc.delta.is_some() {
        report["regulator_perturbed"] = regulator_json(&l.ga, &k, &l.sc, true);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_json(dir, "verify.json", &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_simulate(cfg: &ConfigArg, gains: &Path, seed: Option<u64>, out: Option<&Path>) -> Outcome {
    let l = load(&cfg.config, seed)?;
    let k = load_gains(gains, &l.sc)?;
    let trace = run_simulation(&l, &k)?;
    let dir = out_dir(out, &l.sc)?;
    let target = dir.join("trace.csv");
    let file = fs::File::create(&target).with_context(|| format!("cannot create {}", target.display()))?;
    trace.write_csv(std::io::BufWriter::new(file)).with_context(|| format!("cannot write {}", target.display()))?;
    let mut summary = simulation_summary(&trace);
    summary["trace"] = json!(target.display().to_string());
    print_json(&summary);
    Ok(())
}

fn cmd_robustness(
    cfg: &ConfigArg,
    gains: &Path,
    rho: Option<f64>,
    samples: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Outcome {
    let l = load(&cfg.config, seed)?;
    let k = load_gains(gains, &l.sc)?;
    let rho = rho.unwrap_or(l.sc.config.robustness.rho);
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Failure::Usage(anyhow!("--rho must be a finite nonnegative number, got {rho}")));
    }
    let n = samples.unwrap_or(l.sc.config.robustness.samples);
    let rep = verification::robustness_sample(&l.ga, &k, &l.sc.channels, rho, n, l.sc.config.seed)
        .map_err(verification_failure)?;
    let mut report = serde_json::to_value(&rep)?;
    report["rho"] = json!(rho);
    report["seed"] = json!(l.sc.config.seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_json(dir, "robustness.json", &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_reproduce(example: &str) -> Outcome {
    let ids: Vec<u8> = if example == "all" {
        (1..=6).collect()
    } else {
        match example.parse::<u8>() {
            Ok(id @ 1..=6) => vec![id],
            _ => return Err(Failure::Usage(anyhow!("example must be 1..6 or 'all', got '{example}'"))),
        }
    };
    let mut failed = Vec::new();
    for id in ids {
        let tr = reproduce::reproduce(id).map_err(|e| anyhow!("example {id}: {e}"))?;
        emit(&tr.to_string());
        if !tr.passed() {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(format!("claims failed for examples {failed:?}")))
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Check { cfg } => cmd_check(&cfg),
        Command::Synthesize { cfg, path, gains, out, force, dump_lmi } => {
            cmd_synthesize(&cfg, path, gains.as_deref(), out.as_deref(), force, dump_lmi.as_deref())
        }
        Command::Verify { cfg, gains, seed, out } => cmd_verify(&cfg, &gains, seed.seed, out.as_deref()),
        Command::Simulate { cfg, gains, seed, out } => cmd_simulate(&cfg, &gains, seed.seed, out.as_deref()),
        Command::Robustness { cfg, gains, rho, samples, seed, out } => {
            cmd_robustness(&cfg, &gains, rho, samples, seed.seed, out.as_deref())
        }
        Command::Reproduce { example } => cmd_reproduce(&example),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RCORP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Numerical(m) => eprintln!("infeasible: {m}"),
                Failure::Assertion(m) => eprintln!("assertion failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
