//! The full check: every variant under both RTL checkers, the declassification
//! ablation, the ISA noninterference suites and the salt-reuse attack.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attack::{run_trials, AttackError, AttackSummary};
use crate::crypto::{CryptoParams, SaltMode};
use crate::enclaves::{build, EnclaveError, EnclaveParams, Flow, Sink, Source, VariantKind};
use crate::ift::{taint_check_with, two_trace_check_with, IftError, IftOptions, TwoTraceMode};
use crate::interp::Semantics;
use crate::nicheck::{
    exhaustive_single_step, exhaustive_suite, merge_verdicts, random_suite, NiConfig, NiError, SoundnessVerdict,
};

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Ift(#[from] IftError),
    #[error(transparent)]
    Ni(#[from] NiError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Crypto(#[from] crate::crypto::CryptoError),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NiSuiteOptions {
    pub n: u32,
    pub s: u32,
    pub regs: u8,
    pub programs: u64,
    pub max_len: usize,
    pub pairs: u64,
    /// Longest program length enumerated exhaustively; 0 skips the
    /// exhaustive and single-step passes.
    pub exhaustive_len: usize,
    pub seed: u64,
}

impl Default for NiSuiteOptions {
    fn default() -> Self {
        NiSuiteOptions {
            n: 2,
            s: 2,
            regs: 3,
            programs: 1000,
            max_len: 6,
            pairs: 10,
            exhaustive_len: 3,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NiSuiteReport {
    pub random: SoundnessVerdict,
    pub exhaustive: Option<SoundnessVerdict>,
    pub single_step: Option<SoundnessVerdict>,
    pub pass: bool,
    #[serde(skip)]
    pub seconds: f64,
}

/// Random and exhaustive soundness suites under `semantics`.
pub fn ni_suite(opts: &NiSuiteOptions, semantics: Semantics) -> Result<NiSuiteReport, SuiteError> {
    let t = Instant::now();
    let params = CryptoParams::new(opts.n, opts.s, 4)?;
    let mut cfg = NiConfig::new(params, opts.regs);
    cfg.semantics = semantics;
    let random = random_suite(&cfg, opts.programs, opts.max_len, opts.regs, opts.pairs, opts.seed);
    let (mut exhaustive, mut single_step) = (None, None);
    if opts.exhaustive_len > 0 && random.pass {
        let ex = exhaustive_suite(&cfg, opts.exhaustive_len, opts.regs, opts.seed);
        if ex.pass {
            single_step = Some(exhaustive_single_step(&cfg, opts.regs, opts.seed)?);
        }
        exhaustive = Some(ex);
    }
    let pass = random.pass && exhaustive.as_ref().is_none_or(|v| v.pass) && single_step.as_ref().is_none_or(|v| v.pass);
    Ok(NiSuiteReport {
        random,
        exhaustive,
        single_step,
        pass,
        seconds: t.elapsed().as_secs_f64(),
    })
}

impl NiSuiteReport {
    pub fn combined(&self) -> SoundnessVerdict {
        let mut v = self.random.clone();
        for x in [&self.exhaustive, &self.single_step].into_iter().flatten() {
            v = merge_verdicts(v, x.clone());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AttackSuiteOptions {
    pub width: u32,
    pub reused_trials: u32,
    pub fresh_trials: u32,
    /// Highest fresh-salt success rate still counted as chance.
    pub fresh_tolerance: f64,
    pub seed: u64,
}

impl Default for AttackSuiteOptions {
    fn default() -> Self {
        AttackSuiteOptions {
            width: 8,
            reused_trials: 100,
            fresh_trials: 1000,
            fresh_tolerance: 0.02,
            seed: 0xa77ac,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AttackSuiteReport {
    pub reused: AttackSummary,
    pub fresh: AttackSummary,
    pub pass: bool,
    #[serde(skip)]
    pub seconds: f64,
}

pub fn attack_suite(opts: &AttackSuiteOptions) -> Result<AttackSuiteReport, SuiteError> {
    let t = Instant::now();
    let reused = run_trials(opts.width, SaltMode::Reused, opts.reused_trials, opts.seed)?;
    let fresh = run_trials(opts.width, SaltMode::Fresh, opts.fresh_trials, opts.seed ^ 1)?;
    let pass = reused.successes == reused.trials
        && reused.max_iterations <= opts.width
        && fresh.success_rate <= opts.fresh_tolerance;
    Ok(AttackSuiteReport {
        reused,
        fresh,
        pass,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckAllOptions {
    /// Message widths `n` to sweep.
    pub widths: Vec<u32>,
    pub s: u32,
    /// Template for rounds, cache geometry and key; `n`/`s` are overridden.
    pub enclave: EnclaveParams,
    pub mode: TwoTraceMode,
    pub ift: IftOptions,
    pub ablation: bool,
    pub ni: Option<NiSuiteOptions>,
    pub attack: Option<AttackSuiteOptions>,
}

impl Default for CheckAllOptions {
    fn default() -> Self {
        CheckAllOptions {
            widths: vec![2, 3, 4],
            s: 2,
            enclave: EnclaveParams::default(),
            mode: TwoTraceMode::Exhaustive,
            ift: IftOptions::default(),
            ablation: true,
            ni: Some(NiSuiteOptions::default()),
            attack: Some(AttackSuiteOptions::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Ablation {
    pub taint_flags: bool,
    pub two_trace_flags: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixRow {
    pub variant: String,
    pub n: u32,
    pub s: u32,
    pub expected: Vec<Flow>,
    pub two_trace: Vec<Flow>,
    pub taint: Vec<(Source, Sink)>,
    /// Two-trace flows equal the expected flows, classification included.
    pub matches: bool,
    /// Every two-trace flow is also a taint flow (so taint None implies
    /// two-trace None).
    pub agree: bool,
    /// Secure variants only: both checkers flag a flow with declassification off.
    pub ablation: Option<Ablation>,
    #[serde(skip)]
    pub seconds: f64,
}

impl MatrixRow {
    pub fn pass(&self) -> bool {
        self.matches && self.agree && self.ablation.is_none_or(|a| a.taint_flags && a.two_trace_flags)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckAllReport {
    pub rows: Vec<MatrixRow>,
    pub ni: Option<NiSuiteReport>,
    pub attack: Option<AttackSuiteReport>,
    pub pass: bool,
    #[serde(skip)]
    pub seconds: f64,
}

pub fn check_variant(
    kind: VariantKind,
    params: EnclaveParams,
    opts: &CheckAllOptions,
) -> Result<MatrixRow, SuiteError> {
    let t = Instant::now();
    let v = build(kind, params)?;
    let on = IftOptions {
        use_declass: true,
        ..opts.ift
    };
    let tt = two_trace_check_with(&v, opts.mode, &on)?;
    let ta = taint_check_with(&v, &on)?;
    let taint = ta.reached();
    let two_trace = tt.flows();
    let agree = tt.reached().iter().all(|x| taint.contains(x));
    let ablation = if opts.ablation && v.expected.secure {
        let off = IftOptions {
            use_declass: false,
            ..opts.ift
        };
        Some(Ablation {
            taint_flags: !taint_check_with(&v, &off)?.is_secure(),
            two_trace_flags: !two_trace_check_with(&v, opts.mode, &off)?.is_secure(),
        })
    } else {
        None
    };
    Ok(MatrixRow {
        variant: v.name().to_string(),
        n: params.n,
        s: params.s,
        matches: two_trace == v.expected.flows,
        expected: v.expected.flows.clone(),
        two_trace,
        taint,
        agree,
        ablation,
        seconds: t.elapsed().as_secs_f64(),
    })
}

pub fn check_all(opts: &CheckAllOptions) -> Result<CheckAllReport, SuiteError> {
    let t = Instant::now();
    // The three parts are independent; results are merged in a fixed order.
    let (rows, ni, attack) = std::thread::scope(|sc| {
        let ni = sc.spawn(|| opts.ni.as_ref().map(|o| ni_suite(o, Semantics::default())).transpose());
        let attack = sc.spawn(|| opts.attack.as_ref().map(attack_suite).transpose());
        let rows = matrix(opts);
        (
            rows,
            ni.join().expect("ni suite panicked"),
            attack.join().expect("attack suite panicked"),
        )
    });
    let (rows, ni, attack) = (rows?, ni?, attack?);
    let pass = rows.iter().all(MatrixRow::pass)
        && ni.as_ref().is_none_or(|r| r.pass)
        && attack.as_ref().is_none_or(|r| r.pass);
    Ok(CheckAllReport {
        rows,
        ni,
        attack,
        pass,
        seconds: t.elapsed().as_secs_f64(),
    })
}

fn matrix(opts: &CheckAllOptions) -> Result<Vec<MatrixRow>, SuiteError> {
    let mut rows = Vec::new();
    for &n in &opts.widths {
        let params = EnclaveParams {
            n,
            s: opts.s,
            key: opts.enclave.key & crate::lang::mask(n + opts.s),
            ..opts.enclave
        };
        for kind in VariantKind::ALL {
            rows.push(check_variant(kind, params, opts)?);
        }
    }
    Ok(rows)
}

/// Parses `N[,S]` where `N` is a width or an inclusive range `A..B`.
pub fn parse_widths(text: &str) -> Result<(Vec<u32>, Option<u32>), String> {
    let (ns, s) = match text.split_once(',') {
        Some((a, b)) => (a.trim(), Some(b.trim())),
        None => (text.trim(), None),
    };
    let num = |t: &str| t.parse::<u32>().map_err(|_| format!("bad width `{t}`"));
    let widths = match ns.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
            if a > b {
                return Err(format!("empty range `{ns}`"));
            }
            (a..=b).collect()
        }
        None => vec![num(ns)?],
    };
    if widths.contains(&0) {
        return Err("widths must be at least 1".into());
    }
    let s = s.map(num).transpose()?;
    if s == Some(0) {
        return Err("salt width must be at least 1".into());
    }
    Ok((widths, s))
}

fn leakage(flows: &[Flow]) -> String {
    if flows.is_empty() {
        return "-".into();
    }
    flows.iter().map(Flow::to_string).collect::<Vec<_>>().join(", ")
}

fn soundness_line(name: &str, v: &SoundnessVerdict) -> String {
    format!(
        "  {name:<12} {} programs, {} pairs ({} completed, {} both stuck, {} one-sided stuck): {}",
        v.programs,
        v.pairs,
        v.completed,
        v.both_stuck,
        v.one_sided_stuck,
        if v.pass { "pass" } else { "FAIL" }
    )
}

impl CheckAllReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<15} {:>2} {:>2}  {:<8}  {:<5}  {:<5}  {:<8}  leakage",
            "variant", "n", "s", "result", "match", "agree", "ablation"
        );
        for r in &self.rows {
            let result = if r.two_trace.is_empty() { "secure" } else { "insecure" };
            let ablation = match r.ablation {
                None => "-".to_string(),
                Some(a) if a.taint_flags && a.two_trace_flags => "flips".to_string(),
                Some(_) => "NO FLIP".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<15} {:>2} {:>2}  {:<8}  {:<5}  {:<5}  {:<8}  {}",
                r.variant,
                r.n,
                r.s,
                result,
                if r.matches { "yes" } else { "NO" },
                if r.agree { "yes" } else { "NO" },
                ablation,
                leakage(&r.two_trace)
            );
            if !r.matches {
                let _ = writeln!(out, "{:<15} expected: {}", "", leakage(&r.expected));
            }
        }
        if let Some(ni) = &self.ni {
            let _ = writeln!(
                out,
                "\nnoninterference ({:.1}s): {}",
                ni.seconds,
                if ni.pass { "pass" } else { "FAIL" }
            );
            out.push_str(&soundness_line("random", &ni.random));
            out.push('\n');
            if let Some(v) = &ni.exhaustive {
                out.push_str(&soundness_line("exhaustive", v));
                out.push('\n');
            }
            if let Some(v) = &ni.single_step {
                out.push_str(&soundness_line("single-step", v));
                out.push('\n');
            }
            if let Some(cx) = ni.combined().counterexample {
                let _ = writeln!(out, "  counterexample: `{}` ({:?})", cx.program, cx.violation);
            }
        }
        if let Some(a) = &self.attack {
            let _ = writeln!(
                out,
                "\nattack ({:.1}s): {}\n  reused salt: {}/{} recovered, at most {} probes\n  fresh salt:  {}/{} recovered ({:.2}%)",
                a.seconds,
                if a.pass { "pass" } else { "FAIL" },
                a.reused.successes,
                a.reused.trials,
                a.reused.max_iterations,
                a.fresh.successes,
                a.fresh.trials,
                100.0 * a.fresh.success_rate
            );
        }
        let _ = writeln!(
            out,
            "\ntool metrics (verification seconds, memory, register-bit counts): not applicable at this scale"
        );
        let _ = writeln!(
            out,
            "{} in {:.1}s",
            if self.pass { "PASS" } else { "FAIL" },
            self.seconds
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::Fault;

    #[test]
    fn matrix_at_n2_without_suites() {
        let opts = CheckAllOptions {
            widths: vec![2],
            ni: None,
            attack: None,
            ..CheckAllOptions::default()
        };
        let r = check_all(&opts).unwrap();
        assert_eq!(r.rows.len(), 7);
        assert!(r.pass, "{}", r.render());
        let text = r.render();
        assert!(text.contains("VulnRSA"));
        assert!(text.contains("key → Data (functional-timing)"));
    }

    #[test]
    fn widths() {
        assert_eq!(parse_widths("2..4,2"), Ok((vec![2, 3, 4], Some(2))));
        assert_eq!(parse_widths("2..=3"), Ok((vec![2, 3], None)));
        assert_eq!(parse_widths("3, 1"), Ok((vec![3], Some(1))));
        assert!(parse_widths("4..2").is_err());
        assert!(parse_widths("0").is_err());
        assert!(parse_widths("x,2").is_err());
    }

    #[test]
    fn faulty_semantics_fail_the_random_suite() {
        let opts = NiSuiteOptions {
            programs: 200,
            exhaustive_len: 0,
            ..NiSuiteOptions::default()
        };
        let good = ni_suite(&opts, Semantics::default()).unwrap();
        assert!(good.pass);
        let bad = ni_suite(&opts, Semantics::with_fault(Fault::BopWritesPlain)).unwrap();
        assert!(!bad.pass);
        assert!(bad.combined().counterexample.is_some());
    }

    #[test]
    fn attack_suite_passes() {
        let r = attack_suite(&AttackSuiteOptions {
            fresh_trials: 200,
            ..AttackSuiteOptions::default()
        })
        .unwrap();
        assert!(r.pass, "{r:?}");
    }
}
