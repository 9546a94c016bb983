use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use se_verif::attack::{run_trials, AttackSummary};
use se_verif::config::{OutputMode, RunConfig};
use se_verif::crypto::{CryptoParams, Key, SaltMode, SaltSource};
use se_verif::enclaves::{build, EnclaveParams, VariantKind};
use se_verif::ift::{taint_check_with, two_trace_check_with, IftOptions, LeakReport, TwoTraceMode};
use se_verif::interp::{MachineState, RunResult, Semantics, StateSnapshot, Value};
use se_verif::lang::{Program, Syntax};
use se_verif::nicheck::{check_soundness, CheckMode, NiConfig, NiError, SoundnessVerdict};
use se_verif::suite::{check_all, parse_widths, AttackSuiteOptions, CheckAllOptions, NiSuiteOptions};
use se_verif::typecheck::{typecheck, TypeEnv};

const CONFIG_ENV: &str = "SE_VERIF_CONFIG";

#[derive(Parser)]
#[command(
    name = "se-verif",
    version,
    about = "Noninterference and information-flow checks for a sequestered-encryption enclave"
)]
struct Cli {
    /// Flat key=value config file (also read from SE_VERIF_CONFIG).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Derive the program judgment or report the first type error.
    Typecheck(ProgramArgs),
    /// Run a program and print the final registers and cycle count.
    Run(RunArgs),
    /// Check noninterference of one program over low-equivalent pairs.
    NiCheck(NiArgs),
    /// List enclave variants with parameters and expected verdicts.
    HwList(HwArgs),
    /// Print a variant's circuit, one node per line.
    HwDump(HwDumpArgs),
    /// Check a variant for secret-to-output flows.
    HwCheck(HwCheckArgs),
    /// Binary-search a secret through the comparison oracle.
    Attack(AttackArgs),
    /// Verdict matrix, ablation, checker agreement, soundness and attack suites.
    CheckAll(CheckAllArgs),
}

#[derive(Args)]
struct ProgramArgs {
    /// Program file, `;` or newline separated.
    file: PathBuf,
    /// Register-file size.
    #[arg(long)]
    r_max: Option<u8>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    program: ProgramArgs,
    /// Initial register, `reg=value[:plain|cipher]`; repeatable.
    #[arg(long = "set", value_name = "ASSIGN")]
    sets: Vec<String>,
    /// Message and salt widths `n,s`.
    #[arg(long, value_name = "N,S")]
    width: Option<String>,
    #[arg(long)]
    key_seed: Option<u64>,
    #[arg(long)]
    salt_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Salt::Fresh)]
    salt: Salt,
    /// Print every step.
    #[arg(long)]
    trace: bool,
    /// Also show what each ciphertext decrypts to (text output only).
    #[arg(long)]
    reveal: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Salt {
    Fresh,
    Reused,
}

impl From<Salt> for SaltMode {
    fn from(s: Salt) -> SaltMode {
        match s {
            Salt::Fresh => SaltMode::Fresh,
            Salt::Reused => SaltMode::Reused,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Exhaustive,
    Random,
}

#[derive(Args)]
struct NiArgs {
    #[command(flatten)]
    program: ProgramArgs,
    #[arg(long, value_enum, default_value_t = Mode::Exhaustive)]
    mode: Mode,
    #[arg(long, value_name = "N,S")]
    width: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct HwArgs {
    /// Message and salt widths `n,s` (defaults to hw.n, hw.s).
    #[arg(long, value_name = "N,S")]
    width: Option<String>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    cache_lines: Option<u32>,
    #[arg(long)]
    miss_latency: Option<u32>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct HwDumpArgs {
    variant: VariantKind,
    #[command(flatten)]
    hw: HwArgs,
    /// Dump the circuit after ciphertext declassification.
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    declassify: OnOff,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckerArg {
    Taint,
    TwoTrace,
    Both,
}

#[derive(Args)]
struct IftArgs {
    #[arg(long, value_enum, default_value_t = Mode::Exhaustive)]
    mode: Mode,
    /// Random-mode trials.
    #[arg(long, default_value_t = 2000)]
    trials: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Cycles per run (defaults to four times the worst latency).
    #[arg(long)]
    horizon: Option<u32>,
}

impl IftArgs {
    fn two_trace_mode(&self, seed: u64) -> TwoTraceMode {
        match self.mode {
            Mode::Exhaustive => TwoTraceMode::Exhaustive,
            Mode::Random => TwoTraceMode::Random {
                trials: self.trials,
                seed,
            },
        }
    }
}

#[derive(Args)]
struct HwCheckArgs {
    variant: VariantKind,
    #[command(flatten)]
    hw: HwArgs,
    #[arg(long, value_enum, default_value_t = CheckerArg::Both)]
    checker: CheckerArg,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    declassify: OnOff,
    #[command(flatten)]
    ift: IftArgs,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value_t = 8)]
    width: u32,
    #[arg(long, value_enum, default_value_t = Salt::Reused)]
    mode: Salt,
    #[arg(long, default_value_t = 100)]
    trials: u32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckAllArgs {
    /// `N[,S]`; N is a width or an inclusive range such as `2..4`.
    #[arg(long, default_value = "2..4,2")]
    widths: String,
    #[command(flatten)]
    ift: IftArgs,
    /// Skip the declassification ablation.
    #[arg(long)]
    no_ablation: bool,
    /// Skip the noninterference suites.
    #[arg(long)]
    no_ni: bool,
    /// Longest program length enumerated exhaustively (0 skips).
    #[arg(long, default_value_t = 3)]
    ni_exhaustive_len: usize,
    /// Random programs in the noninterference suite.
    #[arg(long, default_value_t = 1000)]
    ni_programs: u64,
    /// Skip the attack suite.
    #[arg(long)]
    no_attack: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] se_verif::config::ConfigError),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{source}")]
    Parse {
        path: String,
        source: se_verif::lang::ParseError,
    },
    #[error("type error: {0}")]
    Type(#[from] se_verif::typecheck::TypeError),
    #[error(transparent)]
    Crypto(#[from] se_verif::crypto::CryptoError),
    #[error(transparent)]
    State(#[from] se_verif::interp::StateError),
    #[error(transparent)]
    Ni(NiError),
    #[error(transparent)]
    Enclave(#[from] se_verif::enclaves::EnclaveError),
    #[error(transparent)]
    Ift(#[from] se_verif::ift::IftError),
    #[error(transparent)]
    Hw(#[from] se_verif::hwir::HwError),
    #[error(transparent)]
    Attack(#[from] se_verif::attack::AttackError),
    #[error(transparent)]
    Suite(#[from] se_verif::suite::SuiteError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<NiError> for CliError {
    fn from(e: NiError) -> Self {
        match e {
            NiError::IllTyped(t) => CliError::Type(t),
            e => CliError::Ni(e),
        }
    }
}

/// 0 secure/pass, 1 leak/fail.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    fn from_pass(pass: bool) -> Outcome {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
        if self.json {
            out(&(serde_json::to_string_pretty(value)? + "\n"))
        } else {
            out(&text())
        }
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.unwrap_or(self.cfg.seed)
    }

    fn crypto(&self, width: Option<&str>) -> Result<CryptoParams, CliError> {
        let mut p = self.cfg.crypto();
        if let Some(w) = width {
            let (n, s) = parse_pair(w)?;
            p.n = n;
            p.s = s;
        }
        p.validate()?;
        Ok(p)
    }

    fn hw_params(&self, a: &HwArgs) -> Result<EnclaveParams, CliError> {
        let mut cfg = self.cfg;
        if let Some(w) = &a.width {
            (cfg.hw_n, cfg.hw_s) = parse_pair(w)?;
        }
        cfg.hw_rounds = a.rounds.unwrap_or(cfg.hw_rounds);
        cfg.hw_cache_lines = a.cache_lines.unwrap_or(cfg.hw_cache_lines);
        cfg.hw_miss_latency = a.miss_latency.unwrap_or(cfg.hw_miss_latency);
        let p = cfg.hw_params();
        p.validate()?;
        Ok(p)
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn out(text: &str) -> Result<(), CliError> {
    let mut o = std::io::stdout().lock();
    match o.write_all(text.as_bytes()).and_then(|()| o.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io {
            path: "stdout".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn parse_pair(text: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::Usage(format!("expected `n,s`, got `{text}`"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    let n = a.trim().parse().map_err(|_| bad())?;
    let s = b.trim().parse().map_err(|_| bad())?;
    Ok((n, s))
}

fn load_config(flag: Option<&Path>) -> Result<RunConfig, CliError> {
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    match flag.map(Path::to_path_buf).or(env) {
        Some(p) => Ok(RunConfig::load(&p)?),
        None => Ok(RunConfig::default()),
    }
}

fn read_program(a: &ProgramArgs, cfg: &RunConfig) -> Result<(Program, u8), CliError> {
    let r_max = a.r_max.unwrap_or(cfg.r_max);
    if r_max == 0 {
        return Err(CliError::Usage("--r-max must be at least 1".into()));
    }
    let path = a.file.display().to_string();
    let text = std::fs::read_to_string(&a.file).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let p = Syntax { r_max }
        .parse(&text)
        .map_err(|source| CliError::Parse { path, source })?;
    Ok((p, r_max))
}

fn cmd_typecheck(ctx: &Ctx, a: &ProgramArgs) -> Result<Outcome, CliError> {
    let (p, r_max) = read_program(a, &ctx.cfg)?;
    let j = typecheck(&p, &TypeEnv::standard(r_max))?;
    ctx.emit(&j, || format!("{j}\n"))?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct RunReport {
    program: String,
    steps: u64,
    cycles: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    trace: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stuck: Option<se_verif::interp::Stuck>,
    registers: StateSnapshot,
}

fn cmd_run(ctx: &Ctx, a: &RunArgs) -> Result<Outcome, CliError> {
    let (p, r_max) = read_program(&a.program, &ctx.cfg)?;
    let params = ctx.crypto(a.width.as_deref())?;
    let key = Key::from_seed(params, a.key_seed.unwrap_or(ctx.cfg.key_seed))?;
    let salts = SaltSource::new(a.salt.into(), params.s, a.salt_seed.unwrap_or(ctx.cfg.salt_seed));
    let mut st = MachineState::new(params, r_max, key.material(), salts)?;
    for s in &a.sets {
        st.assign(s)?;
    }
    let sem = Semantics {
        costs: ctx.cfg.costs,
        fault: None,
    };
    let (result, trace, stuck) = match sem.run_traced(&p, &mut st) {
        Ok((r, t)) => (r, t, None),
        Err(e) => (RunResult { steps: 0, cycles: 0 }, vec![], Some(e)),
    };
    let report = RunReport {
        program: p.to_string(),
        steps: result.steps,
        cycles: result.cycles,
        trace: if a.trace {
            trace.iter().map(|o| format!("{} +{}", o.rule, o.cycles)).collect()
        } else {
            vec![]
        },
        stuck,
        registers: st.snapshot(),
    };
    ctx.emit(&report, || {
        let mut out = String::new();
        for t in &report.trace {
            let _ = writeln!(out, "  {t}");
        }
        match &report.stuck {
            Some(s) => {
                let _ = writeln!(out, "stuck: {s:?}");
            }
            None => {
                let _ = writeln!(out, "steps {} cycles {}", report.steps, report.cycles);
            }
        }
        for (r, v) in &report.registers.regs {
            match v {
                Value::Cipher(c) if a.reveal => {
                    let m = st.decrypt(*c).map_or("?".to_string(), |m| m.to_string());
                    let _ = writeln!(out, "{r} = {v}  (decrypts to {m})");
                }
                _ => {
                    let _ = writeln!(out, "{r} = {v}");
                }
            }
        }
        out
    })?;
    Ok(Outcome::from_pass(report.stuck.is_none()))
}

fn cmd_ni_check(ctx: &Ctx, a: &NiArgs) -> Result<Outcome, CliError> {
    let (p, r_max) = read_program(&a.program, &ctx.cfg)?;
    let params = ctx.crypto(a.width.as_deref())?;
    let mut cfg = NiConfig::new(params, r_max);
    cfg.semantics.costs = ctx.cfg.costs;
    let mode = match a.mode {
        Mode::Exhaustive => CheckMode::Exhaustive,
        Mode::Random => CheckMode::Random {
            trials: a.trials,
            seed: ctx.seed(a.seed),
        },
    };
    let v = check_soundness(&cfg, &p, mode)?;
    ctx.emit(&v, || render_soundness(&v))?;
    Ok(Outcome::from_pass(v.pass))
}

fn render_soundness(v: &SoundnessVerdict) -> String {
    let mut out = format!(
        "{}: {} pairs ({} completed, {} both stuck, {} one-sided stuck)\n",
        if v.pass { "noninterference holds" } else { "VIOLATION" },
        v.pairs,
        v.completed,
        v.both_stuck,
        v.one_sided_stuck
    );
    if let Some(cx) = &v.counterexample {
        let _ = writeln!(out, "program: {}", cx.program);
        let _ = writeln!(out, "violation: {:?}", cx.violation);
        let _ = writeln!(out, "after command {}, cycles {:?}", cx.after_command, cx.cycles);
        for (name, s) in [
            ("sigma1", &cx.sigma1),
            ("sigma2", &cx.sigma2),
            ("final1", &cx.final1),
            ("final2", &cx.final2),
        ] {
            let regs: Vec<String> = s.regs.iter().map(|(r, v)| format!("{r}={v}")).collect();
            let _ = writeln!(out, "{name}: {}", regs.join(" "));
        }
    }
    out
}

#[derive(Serialize)]
struct HwListRow {
    variant: &'static str,
    params: EnclaveParams,
    worst_latency: u32,
    horizon: u32,
    expected: se_verif::enclaves::ExpectedVerdict,
}

fn cmd_hw_list(ctx: &Ctx, a: &HwArgs) -> Result<Outcome, CliError> {
    let params = ctx.hw_params(a)?;
    let rows = VariantKind::ALL
        .into_iter()
        .map(|k| {
            let v = build(k, params)?;
            Ok(HwListRow {
                variant: v.name(),
                params,
                worst_latency: v.worst_latency(),
                horizon: v.default_horizon(),
                expected: v.expected.clone(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ctx.emit(&rows, || {
        let mut out = format!(
            "n={} s={} R={} cache_lines={} miss_latency={}\n",
            params.n, params.s, params.rounds, params.cache_lines, params.miss_latency
        );
        for r in &rows {
            let flows: Vec<String> = r.expected.flows.iter().map(ToString::to_string).collect();
            let _ = writeln!(
                out,
                "{:<15} latency {:>3}  horizon {:>3}  {}",
                r.variant,
                r.worst_latency,
                r.horizon,
                if flows.is_empty() {
                    "secure".to_string()
                } else {
                    flows.join(", ")
                }
            );
        }
        out
    })?;
    Ok(Outcome::Pass)
}

fn cmd_hw_dump(ctx: &Ctx, a: &HwDumpArgs) -> Result<Outcome, CliError> {
    let v = build(a.variant, ctx.hw_params(&a.hw)?)?;
    let c = v.analysis_circuit(a.declassify == OnOff::On)?;
    let dump = c.dump();
    ctx.emit(&dump, || dump.clone())?;
    Ok(Outcome::Pass)
}

fn cmd_hw_check(ctx: &Ctx, a: &HwCheckArgs) -> Result<Outcome, CliError> {
    let v = build(a.variant, ctx.hw_params(&a.hw)?)?;
    let seed = ctx.seed(a.ift.seed);
    let opts = IftOptions {
        use_declass: a.declassify == OnOff::On,
        horizon: a.ift.horizon,
        seed,
        ..IftOptions::default()
    };
    let mut reports: Vec<LeakReport> = Vec::new();
    if matches!(a.checker, CheckerArg::Taint | CheckerArg::Both) {
        reports.push(taint_check_with(&v, &opts)?);
    }
    if matches!(a.checker, CheckerArg::TwoTrace | CheckerArg::Both) {
        reports.push(two_trace_check_with(&v, a.ift.two_trace_mode(seed), &opts)?);
    }
    let secure = reports.iter().all(LeakReport::is_secure);
    let render = || reports.iter().map(LeakReport::render).collect::<String>();
    match reports.as_slice() {
        [r] => ctx.emit(r, render)?,
        _ => ctx.emit(&reports, render)?,
    }
    Ok(Outcome::from_pass(secure))
}

fn cmd_attack(ctx: &Ctx, a: &AttackArgs) -> Result<Outcome, CliError> {
    let s: AttackSummary = run_trials(a.width, a.mode.into(), a.trials, ctx.seed(a.seed))?;
    ctx.emit(&s, || {
        format!(
            "{}-bit secrets, {:?} salt: {}/{} recovered ({:.1}%), at most {} probes\n",
            s.width,
            s.mode,
            s.successes,
            s.trials,
            100.0 * s.success_rate,
            s.max_iterations
        )
    })?;
    // The attack is a demonstration; only a failed recovery under reused
    // salts is reported as a failure.
    Ok(Outcome::from_pass(a.mode == Salt::Fresh || s.successes == s.trials))
}

fn cmd_check_all(ctx: &Ctx, a: &CheckAllArgs) -> Result<Outcome, CliError> {
    let (widths, s) = parse_widths(&a.widths).map_err(CliError::Usage)?;
    let seed = ctx.seed(a.ift.seed);
    let opts = CheckAllOptions {
        widths,
        s: s.unwrap_or(ctx.cfg.hw_s),
        enclave: ctx.cfg.hw_params(),
        mode: a.ift.two_trace_mode(seed),
        ift: IftOptions {
            horizon: a.ift.horizon,
            seed,
            ..IftOptions::default()
        },
        ablation: !a.no_ablation,
        ni: (!a.no_ni).then(|| NiSuiteOptions {
            programs: a.ni_programs,
            exhaustive_len: a.ni_exhaustive_len,
            seed,
            ..NiSuiteOptions::default()
        }),
        attack: (!a.no_attack).then(|| AttackSuiteOptions {
            seed,
            ..AttackSuiteOptions::default()
        }),
    };
    let report = check_all(&opts)?;
    ctx.emit(&report, || report.render())?;
    Ok(Outcome::from_pass(report.pass))
}

fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    let ctx = Ctx {
        json: cli.json || cfg.output == OutputMode::Json,
        cfg,
    };
    match &cli.cmd {
        Cmd::Typecheck(a) => cmd_typecheck(&ctx, a),
        Cmd::Run(a) => cmd_run(&ctx, a),
        Cmd::NiCheck(a) => cmd_ni_check(&ctx, a),
        Cmd::HwList(a) => cmd_hw_list(&ctx, a),
        Cmd::HwDump(a) => cmd_hw_dump(&ctx, a),
        Cmd::HwCheck(a) => cmd_hw_check(&ctx, a),
        Cmd::Attack(a) => cmd_attack(&ctx, a),
        Cmd::CheckAll(a) => cmd_check_all(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
