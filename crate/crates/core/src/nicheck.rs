//! Two-run noninterference testing for the ISA interpreter.
//!
//! A pair of low-equivalent states is run in lockstep under a well-typed
//! program. After every command both sides must still be low-equivalent and
//! must have spent the same number of cycles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoParams, SaltSource};
use crate::interp::{MachineState, Semantics, StateSnapshot, Stuck, Value};
use crate::lang::{mask, BopKind, Command, Program, Register};
use crate::typecheck::{typecheck, Label, TypeEnv, TypeError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("state domains differ: r_max {left} vs {right} (environment {env})")]
pub struct DomainMismatch {
    pub left: u8,
    pub right: u8,
    pub env: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NiError {
    #[error("program is not well typed: {0}")]
    IllTyped(#[from] TypeError),
    #[error(transparent)]
    Domain(#[from] DomainMismatch),
    #[error("exhaustive enumeration would need {0} pairs; use random mode")]
    TooLarge(u128),
}

/// `σ1 ≈_l σ2`: public registers hold equal plaintexts, or ciphertexts on
/// both sides.
pub fn low_equiv(s1: &MachineState, s2: &MachineState, env: &TypeEnv) -> Result<bool, DomainMismatch> {
    if s1.r_max() != env.r_max() || s2.r_max() != env.r_max() {
        return Err(DomainMismatch {
            left: s1.r_max(),
            right: s2.r_max(),
            env: env.r_max(),
        });
    }
    Ok(differing_public(s1, s2, env).next().is_none())
}

fn differing_public<'a>(
    s1: &'a MachineState,
    s2: &'a MachineState,
    env: &'a TypeEnv,
) -> impl Iterator<Item = Register> + 'a {
    s1.registers()
        .zip(s2.reg_values())
        .filter(|((r, _), _)| env.label(*r) == Some(Label::Public))
        .filter(|((_, a), b)| !value_equiv(*a, **b))
        .map(|((r, _), _)| r)
}

fn value_equiv(a: Value, b: Value) -> bool {
    match (a, b) {
        (Value::Plain(x), Value::Plain(y)) => x == y,
        (Value::Cipher(_), Value::Cipher(_)) => true,
        _ => false,
    }
}

/// Fast path for the hot loop; the domains are known to agree.
fn low_equiv_unchecked(s1: &MachineState, s2: &MachineState) -> bool {
    let (a, b) = (s1.reg_values(), s2.reg_values());
    let gp = a.len() - 1;
    a[..gp].iter().zip(&b[..gp]).all(|(x, y)| value_equiv(*x, *y))
}

/// A pair of initial states that agree on every public location.
#[derive(Debug, Clone)]
pub struct LowEquivWitness {
    pub sigma1: MachineState,
    pub sigma2: MachineState,
}

impl LowEquivWitness {
    /// Locations whose raw contents differ (keyReg and ciphertext bits).
    pub fn differing_locations(&self) -> Vec<Register> {
        self.sigma1
            .registers()
            .zip(self.sigma2.reg_values())
            .filter(|((_, a), b)| a != *b)
            .map(|((r, _), _)| r)
            .collect()
    }
}

/// What to do when only one side of a pair gets stuck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StuckPolicy {
    /// Count it and move on: the two runs do not both complete, so the
    /// soundness statement makes no claim about the pair.
    #[default]
    PremiseUnmet,
    /// Report it as a counterexample.
    Strict,
}

#[derive(Debug, Clone)]
pub struct NiConfig {
    pub params: CryptoParams,
    pub r_max: u8,
    pub semantics: Semantics,
    pub stuck_policy: StuckPolicy,
}

impl NiConfig {
    pub fn new(params: CryptoParams, r_max: u8) -> NiConfig {
        NiConfig {
            params,
            r_max,
            semantics: Semantics::default(),
            stuck_policy: StuckPolicy::default(),
        }
    }

    pub fn env(&self) -> TypeEnv {
        TypeEnv::standard(self.r_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    NotLowEquivalent { registers: Vec<Register> },
    CycleMismatch,
    OneSidedStuck { side: u8, stuck: Stuck },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub program: String,
    pub sigma1: StateSnapshot,
    pub sigma2: StateSnapshot,
    pub final1: StateSnapshot,
    pub final2: StateSnapshot,
    /// Cycles spent by each side up to the failing point.
    pub cycles: (u64, u64),
    /// Index of the last command executed before the check failed.
    pub after_command: usize,
    pub violation: Violation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairOutcome {
    Pass { cycles: u64 },
    BothStuck,
    OneSidedStuck,
    Fail(Box<Counterexample>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundnessVerdict {
    pub pass: bool,
    pub programs: u64,
    pub pairs: u64,
    /// Pairs where both runs reached `skip`.
    pub completed: u64,
    pub both_stuck: u64,
    pub one_sided_stuck: u64,
    pub counterexample: Option<Counterexample>,
}

impl SoundnessVerdict {
    fn new() -> Self {
        SoundnessVerdict {
            pass: true,
            ..Default::default()
        }
    }

    fn record(&mut self, outcome: PairOutcome) -> bool {
        self.pairs += 1;
        match outcome {
            PairOutcome::Pass { .. } => self.completed += 1,
            PairOutcome::BothStuck => self.both_stuck += 1,
            PairOutcome::OneSidedStuck => self.one_sided_stuck += 1,
            PairOutcome::Fail(cx) => {
                self.pass = false;
                self.counterexample = Some(*cx);
                return false;
            }
        }
        true
    }

    fn merge(&mut self, other: SoundnessVerdict) {
        self.pass &= other.pass;
        self.programs += other.programs;
        self.pairs += other.pairs;
        self.completed += other.completed;
        self.both_stuck += other.both_stuck;
        self.one_sided_stuck += other.one_sided_stuck;
        if self.counterexample.is_none() {
            self.counterexample = other.counterexample;
        }
    }
}

/// Runs `cmds` from a witness pair in lockstep, writing into `w1`/`w2`.
fn check_pair_into(
    cfg: &NiConfig,
    cmds: &[Command],
    init1: &MachineState,
    init2: &MachineState,
    w1: &mut MachineState,
    w2: &mut MachineState,
) -> PairOutcome {
    w1.clone_regs_from(init1);
    w2.clone_regs_from(init2);
    let sem = &cfg.semantics;
    let (mut c1, mut c2) = (0u64, 0u64);
    let last = cmds.len() - 1;
    for (i, c) in cmds.iter().enumerate() {
        if !c.is_skip() {
            match (sem.apply(c, w1), sem.apply(c, w2)) {
                (Ok(a), Ok(b)) => {
                    c1 += sem.costs.cost(a);
                    c2 += sem.costs.cost(b);
                }
                (Err(_), Err(_)) => return PairOutcome::BothStuck,
                (a, b) => {
                    if cfg.stuck_policy == StuckPolicy::PremiseUnmet {
                        return PairOutcome::OneSidedStuck;
                    }
                    let (side, mut stuck) = match (a, b) {
                        (Err(s), _) => (1, s),
                        (_, Err(s)) => (2, s),
                        _ => unreachable!(),
                    };
                    stuck.command_index = i;
                    return fail(
                        cmds,
                        init1,
                        init2,
                        w1,
                        w2,
                        (c1, c2),
                        i,
                        Violation::OneSidedStuck { side, stuck },
                    );
                }
            }
        }
        if i < last {
            c1 += sem.costs.seq;
            c2 += sem.costs.seq;
        }
        if !low_equiv_unchecked(w1, w2) {
            let env = cfg.env();
            let registers = differing_public(w1, w2, &env).collect();
            return fail(
                cmds,
                init1,
                init2,
                w1,
                w2,
                (c1, c2),
                i,
                Violation::NotLowEquivalent { registers },
            );
        }
        if c1 != c2 {
            return fail(cmds, init1, init2, w1, w2, (c1, c2), i, Violation::CycleMismatch);
        }
    }
    PairOutcome::Pass { cycles: c1 }
}

#[allow(clippy::too_many_arguments)]
fn fail(
    cmds: &[Command],
    init1: &MachineState,
    init2: &MachineState,
    w1: &MachineState,
    w2: &MachineState,
    cycles: (u64, u64),
    after_command: usize,
    violation: Violation,
) -> PairOutcome {
    PairOutcome::Fail(Box::new(Counterexample {
        program: Program::new(cmds.to_vec()).expect("non-empty").to_string(),
        sigma1: init1.snapshot(),
        sigma2: init2.snapshot(),
        final1: w1.snapshot(),
        final2: w2.snapshot(),
        cycles,
        after_command,
        violation,
    }))
}

/// Checks one program against one witness pair.
pub fn check_pair(cfg: &NiConfig, p: &Program, w: &LowEquivWitness) -> PairOutcome {
    let mut w1 = w.sigma1.clone();
    let mut w2 = w.sigma2.clone();
    check_pair_into(cfg, p.commands(), &w.sigma1, &w.sigma2, &mut w1, &mut w2)
}

/// One step of a single command over the supplied pairs.
pub fn check_single_step(
    cfg: &NiConfig,
    c: &Command,
    pairs: impl IntoIterator<Item = LowEquivWitness>,
) -> Result<SoundnessVerdict, NiError> {
    let p = Program::single(*c);
    typecheck(&p, &cfg.env())?;
    let mut v = SoundnessVerdict::new();
    v.programs = 1;
    for w in pairs {
        if !v.record(check_pair(cfg, &p, &w)) {
            break;
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CheckMode {
    Exhaustive,
    Random { trials: u64, seed: u64 },
}

/// Above this many pairs, exhaustive mode refuses to run.
pub const EXHAUSTIVE_PAIR_LIMIT: u128 = 50_000_000;

pub fn check_soundness(cfg: &NiConfig, p: &Program, mode: CheckMode) -> Result<SoundnessVerdict, NiError> {
    typecheck(p, &cfg.env())?;
    let regs = mentioned_registers(p);
    let mut v = SoundnessVerdict::new();
    v.programs = 1;
    match mode {
        CheckMode::Exhaustive => {
            let space = ExhaustiveSpace::new(cfg, &regs, 0);
            if space.len() > EXHAUSTIVE_PAIR_LIMIT {
                return Err(NiError::TooLarge(space.len()));
            }
            for w in space {
                if !v.record(check_pair(cfg, p, &w)) {
                    break;
                }
            }
        }
        CheckMode::Random { trials, seed } => {
            let mut gen = WitnessGen::new(cfg, seed);
            for _ in 0..trials {
                let w = gen.random(&regs);
                if !v.record(check_pair(cfg, p, &w)) {
                    break;
                }
            }
        }
    }
    Ok(v)
}

fn mentioned_registers(p: &Program) -> Vec<Register> {
    let mut regs: Vec<Register> = p
        .commands()
        .iter()
        .flat_map(|c| c.registers())
        .filter(|r| !r.is_key())
        .collect();
    regs.sort();
    regs.dedup();
    regs
}

/// Draws low-equivalent witness pairs.
///
/// Both sides share the tag of every register and the value of every public
/// plaintext. Registers are ciphertexts three times out of four. Ciphertexts are encryptions of independently drawn
/// plaintexts, half of them booleans so `cmov` conditions usually resolve.
/// Keys differ three times out of four. Each side has its own salt stream.
pub struct WitnessGen {
    params: CryptoParams,
    r_max: u8,
    rng: ChaCha8Rng,
    base1: MachineState,
    base2: MachineState,
}

impl WitnessGen {
    pub fn new(cfg: &NiConfig, seed: u64) -> WitnessGen {
        let s = cfg.params.s;
        let base = |salt_seed| {
            MachineState::new(cfg.params, cfg.r_max, 0, SaltSource::fresh(s, salt_seed)).expect("valid params")
        };
        WitnessGen {
            params: cfg.params,
            r_max: cfg.r_max,
            rng: ChaCha8Rng::seed_from_u64(seed),
            base1: base(seed ^ 0x5151_0001),
            base2: base(seed ^ 0xa2a2_0002),
        }
    }

    fn plaintext(&mut self) -> u64 {
        let n = self.params.n;
        if self.rng.gen_bool(0.5) {
            if self.rng.gen() {
                mask(n)
            } else {
                0
            }
        } else {
            self.rng.gen::<u64>() & mask(n)
        }
    }

    fn keys(&mut self) -> (u64, u64) {
        let km = mask(self.params.key_bits());
        let k1 = self.rng.gen::<u64>() & km;
        let k2 = if self.rng.gen_ratio(1, 4) {
            k1
        } else {
            self.rng.gen::<u64>() & km
        };
        (k1, k2)
    }

    /// Fills `s1`/`s2` in place. `tags` has one bit per entry of `regs`
    /// (set = ciphertext); registers outside `regs` are left as they are.
    fn fill(&mut self, regs: &[Register], tags: u64, keys: (u64, u64), s1: &mut MachineState, s2: &mut MachineState) {
        s1.set(Register::KeyReg, Value::Plain(keys.0)).expect("key width");
        s2.set(Register::KeyReg, Value::Plain(keys.1)).expect("key width");
        for (i, &r) in regs.iter().enumerate() {
            if tags >> i & 1 == 1 {
                let (m1, m2) = (self.plaintext(), self.plaintext());
                let c1 = s1.encrypt(m1).expect("key");
                let c2 = s2.encrypt(m2).expect("key");
                s1.set(r, Value::Cipher(c1)).expect("width");
                s2.set(r, Value::Cipher(c2)).expect("width");
            } else {
                let v = self.rng.gen::<u64>() & mask(self.params.n);
                s1.set(r, Value::Plain(v)).expect("width");
                s2.set(r, Value::Plain(v)).expect("width");
            }
        }
    }

    pub fn random(&mut self, regs: &[Register]) -> LowEquivWitness {
        // each register is a ciphertext with probability 3/4
        let tags = (self.rng.gen::<u64>() | self.rng.gen::<u64>()) & mask(regs.len() as u32);
        let keys = self.keys();
        let (mut s1, mut s2) = (self.base1.clone(), self.base2.clone());
        self.fill(regs, tags, keys, &mut s1, &mut s2);
        // carry salt streams forward so later witnesses draw new salts
        self.base1.salts_mut().clone_from(s1.salts());
        self.base2.salts_mut().clone_from(s2.salts());
        LowEquivWitness { sigma1: s1, sigma2: s2 }
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }
}

/// Every assignment of tags, public plaintexts and per-side secret
/// plaintexts to `regs`, under key pairs `(k, k')` for one fixed `k` and
/// every `k'` (including `k' = k`).
pub struct ExhaustiveSpace {
    params: CryptoParams,
    regs: Vec<Register>,
    k1: u64,
    base1: MachineState,
    base2: MachineState,
    /// Mixed-radix counter: key index, then one digit per register.
    digits: Vec<u64>,
    radix: Vec<u64>,
    done: bool,
}

impl ExhaustiveSpace {
    pub fn new(cfg: &NiConfig, regs: &[Register], seed: u64) -> ExhaustiveSpace {
        let p = cfg.params;
        let per_reg = (1u64 << p.n) + (1u64 << (2 * p.n));
        let mut radix = vec![1u64 << p.key_bits()];
        radix.extend(std::iter::repeat_n(per_reg, regs.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k1 = rng.gen::<u64>() & mask(p.key_bits());
        let base =
            |salt_seed| MachineState::new(p, cfg.r_max, 0, SaltSource::fresh(p.s, salt_seed)).expect("valid params");
        ExhaustiveSpace {
            params: p,
            regs: regs.to_vec(),
            k1,
            base1: base(seed ^ 0x5151_0001),
            base2: base(seed ^ 0xa2a2_0002),
            digits: vec![0; radix.len()],
            radix,
            done: false,
        }
    }

    pub fn len(&self) -> u128 {
        self.radix.iter().map(|&r| u128::from(r)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Iterator for ExhaustiveSpace {
    type Item = LowEquivWitness;

    fn next(&mut self) -> Option<LowEquivWitness> {
        if self.done {
            return None;
        }
        let n = self.params.n;
        let plain_count = 1u64 << n;
        let (mut s1, mut s2) = (self.base1.clone(), self.base2.clone());
        s1.set(Register::KeyReg, Value::Plain(self.k1)).expect("key width");
        s2.set(Register::KeyReg, Value::Plain(self.digits[0]))
            .expect("key width");
        for (i, &r) in self.regs.iter().enumerate() {
            let d = self.digits[i + 1];
            if d < plain_count {
                s1.set(r, Value::Plain(d)).expect("width");
                s2.set(r, Value::Plain(d)).expect("width");
            } else {
                let d = d - plain_count;
                let c1 = s1.encrypt(d & mask(n)).expect("key");
                let c2 = s2.encrypt(d >> n).expect("key");
                s1.set(r, Value::Cipher(c1)).expect("width");
                s2.set(r, Value::Cipher(c2)).expect("width");
            }
        }
        self.base1.salts_mut().clone_from(s1.salts());
        self.base2.salts_mut().clone_from(s2.salts());
        // advance
        self.done = true;
        for (d, &r) in self.digits.iter_mut().zip(&self.radix) {
            *d += 1;
            if *d < r {
                self.done = false;
                break;
            }
            *d = 0;
        }
        Some(LowEquivWitness { sigma1: s1, sigma2: s2 })
    }
}

/// Every well-typed command over `r1..=regs`.
pub fn all_commands(regs: u8) -> Vec<Command> {
    let rs: Vec<Register> = (1..=regs).map(Register::Gp).collect();
    let mut out = vec![Command::Skip];
    out.extend(rs.iter().map(|&r| Command::Enc(r)));
    for k in BopKind::ALL {
        for &a in &rs {
            for &b in &rs {
                out.push(Command::Bop(k, a, b));
            }
        }
    }
    for &cond in &rs {
        for &dst in &rs {
            for &src_true in &rs {
                for &src_false in &rs {
                    out.push(Command::Cmov {
                        cond,
                        dst,
                        src_true,
                        src_false,
                    });
                }
            }
        }
    }
    out
}

/// Uniform random well-typed command over `r1..=regs`.
pub fn random_command(rng: &mut impl Rng, regs: u8) -> Command {
    let mut reg = || Register::Gp(rng.gen_range(1..=regs));
    let (a, b, c, d) = (reg(), reg(), reg(), reg());
    match rng.gen_range(0..4) {
        0 => Command::Skip,
        1 => Command::Enc(a),
        2 => Command::Bop(BopKind::ALL[rng.gen_range(0..BopKind::ALL.len())], a, b),
        _ => Command::Cmov {
            cond: a,
            dst: b,
            src_true: c,
            src_false: d,
        },
    }
}

/// Random programs of length `1..=max_len` over `r1..=regs`, each checked
/// against `pairs_per_program` random witnesses.
pub fn random_suite(
    cfg: &NiConfig,
    programs: u64,
    max_len: usize,
    regs: u8,
    pairs_per_program: u64,
    seed: u64,
) -> SoundnessVerdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = WitnessGen::new(cfg, seed.wrapping_add(1));
    let reg_list: Vec<Register> = (1..=regs).map(Register::Gp).collect();
    let mut v = SoundnessVerdict::new();
    let (mut w1, mut w2) = (gen.base1.clone(), gen.base2.clone());
    for _ in 0..programs {
        let len = rng.gen_range(1..=max_len);
        let cmds: Vec<Command> = (0..len).map(|_| random_command(&mut rng, regs)).collect();
        v.programs += 1;
        for _ in 0..pairs_per_program {
            let w = gen.random(&reg_list);
            if !v.record(check_pair_into(cfg, &cmds, &w.sigma1, &w.sigma2, &mut w1, &mut w2)) {
                return v;
            }
        }
    }
    v
}

/// Every program of `1..=max_len` commands over `r1..=regs`. Each program is
/// run from one witness pair per register tag pattern, once with equal keys
/// and once with distinct keys; the remaining values are drawn at random.
pub fn exhaustive_suite(cfg: &NiConfig, max_len: usize, regs: u8, seed: u64) -> SoundnessVerdict {
    let cmds = all_commands(regs);
    let reg_list: Vec<Register> = (1..=regs).map(Register::Gp).collect();
    let mut gen = WitnessGen::new(cfg, seed);
    let km = mask(cfg.params.key_bits());
    let mut init1 = gen.base1.clone();
    let mut init2 = gen.base2.clone();
    let (mut w1, mut w2) = (init1.clone(), init2.clone());
    let mut v = SoundnessVerdict::new();
    let mut prog: Vec<Command> = Vec::with_capacity(max_len);
    for len in 1..=max_len {
        let total = cmds.len().pow(len as u32);
        for idx in 0..total {
            prog.clear();
            let mut rest = idx;
            for _ in 0..len {
                prog.push(cmds[rest % cmds.len()]);
                rest /= cmds.len();
            }
            v.programs += 1;
            for tags in 0..1u64 << regs {
                for distinct in [false, true] {
                    let k1 = gen.rng.gen::<u64>() & km;
                    let k2 = if distinct {
                        // uniform over keys other than k1
                        (k1 + gen.rng.gen_range(1..=km)) & km
                    } else {
                        k1
                    };
                    gen.fill(&reg_list, tags, (k1, k2), &mut init1, &mut init2);
                    if !v.record(check_pair_into(cfg, &prog, &init1, &init2, &mut w1, &mut w2)) {
                        return v;
                    }
                }
            }
        }
    }
    v
}

/// Every command over `r1..=regs` against its full [`ExhaustiveSpace`].
pub fn exhaustive_single_step(cfg: &NiConfig, regs: u8, seed: u64) -> Result<SoundnessVerdict, NiError> {
    let mut v = SoundnessVerdict::new();
    for c in all_commands(regs) {
        let p = Program::single(c);
        let space = ExhaustiveSpace::new(cfg, &mentioned_registers(&p), seed);
        let r = check_single_step(cfg, &c, space)?;
        let ok = r.pass;
        v.merge(r);
        if !ok {
            break;
        }
    }
    Ok(v)
}

/// Merges verdicts, keeping the first counterexample.
pub fn merge_verdicts(a: SoundnessVerdict, b: SoundnessVerdict) -> SoundnessVerdict {
    let mut a = a;
    a.merge(b);
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::Fault;
    use crate::lang::parse_program;

    fn cfg() -> NiConfig {
        NiConfig::new(CryptoParams::new(2, 2, 4).unwrap(), 3)
    }

    fn st(key: u64, seed: u64) -> MachineState {
        MachineState::new(cfg().params, 3, key, SaltSource::fresh(2, seed)).unwrap()
    }

    #[test]
    fn low_equiv_examples() {
        let env = cfg().env();
        let a = st(1, 1);
        assert!(low_equiv(&a, &a, &env).unwrap());

        let mut b = a.clone();
        let mut c = a.clone();
        b.set(Register::Gp(1), Value::Cipher(0x3)).unwrap();
        c.set(Register::Gp(1), Value::Cipher(0xc)).unwrap();
        assert!(low_equiv(&b, &c, &env).unwrap());

        let d = st(9, 1);
        assert!(low_equiv(&a, &d, &env).unwrap());

        let mut e = a.clone();
        let mut f = a.clone();
        e.set(Register::Gp(1), Value::Plain(3)).unwrap();
        f.set(Register::Gp(1), Value::Plain(2)).unwrap();
        assert!(!low_equiv(&e, &f, &env).unwrap());

        let mut g = a.clone();
        g.set(Register::Gp(1), Value::Cipher(3)).unwrap();
        e.set(Register::Gp(1), Value::Plain(3)).unwrap();
        assert!(!low_equiv(&e, &g, &env).unwrap());

        let other = MachineState::new(cfg().params, 4, 1, SaltSource::fresh(2, 0)).unwrap();
        assert!(low_equiv(&a, &other, &env).is_err());
    }

    #[test]
    fn random_witnesses_are_low_equivalent() {
        let c = cfg();
        let mut gen = WitnessGen::new(&c, 3);
        let regs: Vec<_> = (1..=3).map(Register::Gp).collect();
        let mut differing_keys = 0;
        for _ in 0..1000 {
            let w = gen.random(&regs);
            assert!(low_equiv(&w.sigma1, &w.sigma2, &c.env()).unwrap());
            if w.differing_locations().contains(&Register::KeyReg) {
                differing_keys += 1;
            }
        }
        assert!((600..900).contains(&differing_keys), "{differing_keys}");
    }

    #[test]
    fn exhaustive_space_counts_and_equivalence() {
        let c = cfg();
        let space = ExhaustiveSpace::new(&c, &[Register::Gp(1)], 0);
        // 16 keys x (4 plain + 16 cipher pairs)
        assert_eq!(space.len(), 16 * 20);
        let ws: Vec<_> = space.collect();
        assert_eq!(ws.len(), 320);
        assert!(ws.iter().all(|w| low_equiv(&w.sigma1, &w.sigma2, &c.env()).unwrap()));
    }

    #[test]
    fn enc_single_step_exhaustive() {
        let c = cfg();
        let cmd = Command::Enc(Register::Gp(1));
        let v = check_single_step(&c, &cmd, ExhaustiveSpace::new(&c, &[Register::Gp(1)], 0)).unwrap();
        assert!(v.pass);
        assert_eq!(v.pairs, 320);
        // only plain operands encrypt
        assert_eq!(v.completed, 16 * 4);
        assert_eq!(v.both_stuck, 16 * 16);
    }

    #[test]
    fn cmov_with_key_dependent_condition_still_passes() {
        // Find a ciphertext that decrypts to true under k and false under k'.
        let c = cfg();
        let (k1, k2) = (0x3, 0xa);
        let a = st(k1, 1);
        let b = st(k2, 2);
        let cond = (0..16u64)
            .find(|&ct| a.decrypt(ct) == Some(3) && b.decrypt(ct) == Some(0))
            .expect("some ciphertext flips");
        let mut s1 = a.clone();
        let mut s2 = b.clone();
        for s in [&mut s1, &mut s2] {
            s.set(Register::Gp(1), Value::Cipher(cond)).unwrap();
            s.set(Register::Gp(3), Value::Cipher(5)).unwrap();
            s.set(Register::Gp(2), Value::Cipher(9)).unwrap();
        }
        let p = parse_program("cmov r1 ? r2 <- r3 : r2 <- r2").unwrap();
        let out = check_pair(&c, &p, &LowEquivWitness { sigma1: s1, sigma2: s2 });
        assert!(matches!(out, PairOutcome::Pass { cycles: 2 }), "{out:?}");
    }

    #[test]
    fn fault_is_caught_single_step() {
        let mut c = cfg();
        c.semantics = Semantics::with_fault(Fault::BopWritesPlain);
        let cmd = Command::Bop(BopKind::Add, Register::Gp(1), Register::Gp(2));
        let space = ExhaustiveSpace::new(&c, &[Register::Gp(1), Register::Gp(2)], 0);
        let v = check_single_step(&c, &cmd, space).unwrap();
        assert!(!v.pass);
        let cx = v.counterexample.unwrap();
        assert_eq!(cx.program, "bop add r1 r2");
        assert!(
            matches!(cx.violation, Violation::NotLowEquivalent { ref registers } if registers == &[Register::Gp(1)])
        );
    }

    #[test]
    fn ill_typed_is_rejected() {
        let p = parse_program("bop add r1 keyReg").unwrap();
        assert!(matches!(
            check_soundness(&cfg(), &p, CheckMode::Random { trials: 1, seed: 0 }),
            Err(NiError::IllTyped(_))
        ));
    }

    #[test]
    fn strict_policy_reports_one_sided_stuck() {
        let mut c = cfg();
        c.stuck_policy = StuckPolicy::Strict;
        let p = parse_program("bop add r1 r2; cmov r1 ? r3 <- r2 : r3 <- r2").unwrap();
        let v = check_soundness(&c, &p, CheckMode::Exhaustive).unwrap();
        assert!(!v.pass);
        assert!(matches!(
            v.counterexample.unwrap().violation,
            Violation::OneSidedStuck { .. }
        ));
        let v = check_soundness(&cfg(), &p, CheckMode::Exhaustive).unwrap();
        assert!(v.pass);
        assert!(v.one_sided_stuck > 0);
    }

    #[test]
    fn program_exhaustive_and_random_pass() {
        let p = parse_program("enc r1; bop lt r1 r2; cmov r1 ? r3 <- r2 : r3 <- r3").unwrap();
        let v = check_soundness(&cfg(), &p, CheckMode::Exhaustive).unwrap();
        assert!(v.pass, "{v:?}");
        assert!(v.completed > 0);
        let v = check_soundness(&cfg(), &p, CheckMode::Random { trials: 2000, seed: 4 }).unwrap();
        assert!(v.pass);
        assert!(v.completed > 0);
    }

    #[test]
    fn all_commands_count() {
        assert_eq!(all_commands(3).len(), 1 + 3 + 9 * 9 + 81);
    }

    #[test]
    fn suites_smoke() {
        let c = cfg();
        let v = random_suite(&c, 200, 6, 3, 10, 1);
        assert!(v.pass, "{:?}", v.counterexample);
        assert_eq!(v.programs, 200);
        assert_eq!(v.pairs, 2000);
        let v = exhaustive_suite(&c, 1, 3, 1);
        assert!(v.pass);
        assert_eq!(v.programs, 166);
        assert_eq!(v.pairs, 166 * 16);
    }

    #[test]
    fn fault_is_caught_by_random_suite() {
        let mut c = cfg();
        c.semantics = Semantics::with_fault(Fault::BopWritesPlain);
        let v = random_suite(&c, 1000, 6, 3, 10, 7);
        assert!(!v.pass);
        assert!(v.counterexample.is_some());
    }
}
