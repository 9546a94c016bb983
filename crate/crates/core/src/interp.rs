//! Small-step interpreter for SE ISA programs, with per-rule cycle costs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, CryptoParams, Key, SaltSource};
use crate::lang::{mask, Command, Program, Register, Syntax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Value {
    Plain(u64),
    Cipher(u64),
}

impl Value {
    pub fn bits(self) -> u64 {
        match self {
            Value::Plain(b) | Value::Cipher(b) => b,
        }
    }

    pub fn is_cipher(self) -> bool {
        matches!(self, Value::Cipher(_))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Plain(b) => write!(f, "{b}"),
            Value::Cipher(b) => write!(f, "[{b:#x}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    Enc,
    Bop,
    CmovT,
    CmovF,
    /// `skip; q -> q`.
    Seq,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Enc => "ENC",
            Rule::Bop => "BOP",
            Rule::CmovT => "CMOV-T",
            Rule::CmovF => "CMOV-F",
            Rule::Seq => "SEQ",
        })
    }
}

/// Cycles charged per rule. The congruence step `c; p -> skip; p` charges
/// whatever the inner rule charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub enc: u64,
    pub bop: u64,
    pub cmov: u64,
    pub seq: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            enc: 1,
            bop: 2,
            cmov: 2,
            seq: 1,
        }
    }
}

impl CostTable {
    pub fn cost(&self, rule: Rule) -> u64 {
        match rule {
            Rule::Enc => self.enc,
            Rule::Bop => self.bop,
            Rule::CmovT | Rule::CmovF => self.cmov,
            Rule::Seq => self.seq,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.enc == 0 || self.bop == 0 || self.cmov == 0 {
            return Err("enc, bop and cmov costs must be at least 1".into());
        }
        Ok(())
    }
}

/// Deliberate semantic faults, used to check that the noninterference
/// suite actually detects broken rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// BOP writes its decrypted result back as plaintext.
    BopWritesPlain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StuckReason {
    /// The configuration is a lone `skip`.
    Terminal,
    ExpectedCipher,
    ExpectedPlain,
    /// keyReg does not hold plaintext key material.
    NoKey,
    /// A cmov condition decrypted to neither all-zeros nor all-ones.
    NonBooleanCondition,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("stuck at command {command_index} ({rule} on {register:?}): {reason:?}")]
pub struct Stuck {
    pub command_index: usize,
    pub rule: Rule,
    pub register: Option<Register>,
    pub reason: StuckReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("register {0} is outside the register file")]
    UnknownRegister(Register),
    #[error("value {value:#x} for {register} exceeds {bits} bits")]
    Width { register: Register, value: u64, bits: u32 },
    #[error("malformed assignment `{0}`, expected reg=value[:plain|cipher]")]
    Assignment(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Register file `σ` plus the crypto parameters and salt stream.
#[derive(Debug, Clone)]
pub struct MachineState {
    params: CryptoParams,
    r_max: u8,
    regs: Vec<Value>,
    key: Option<Key>,
    salts: SaltSource,
}

impl MachineState {
    /// All general-purpose registers start as `Plain(0)`.
    pub fn new(
        params: CryptoParams,
        r_max: u8,
        key_material: u64,
        salts: SaltSource,
    ) -> Result<MachineState, StateError> {
        let key = Key::new(params, key_material)?;
        let mut regs = vec![Value::Plain(0); usize::from(r_max) + 1];
        regs[usize::from(r_max)] = Value::Plain(key_material);
        Ok(MachineState {
            params,
            r_max,
            regs,
            key: Some(key),
            salts,
        })
    }

    pub fn params(&self) -> CryptoParams {
        self.params
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }

    pub fn get(&self, r: Register) -> Value {
        self.regs[r.slot(self.r_max)]
    }

    pub fn set(&mut self, r: Register, v: Value) -> Result<(), StateError> {
        if let Register::Gp(i) = r {
            if i == 0 || i > self.r_max {
                return Err(StateError::UnknownRegister(r));
            }
        }
        let bits = match (r, v) {
            (_, Value::Cipher(_)) | (Register::KeyReg, _) => self.params.block_bits(),
            (Register::Gp(_), Value::Plain(_)) => self.params.n,
        };
        if v.bits() & !mask(bits) != 0 {
            return Err(StateError::Width {
                register: r,
                value: v.bits(),
                bits,
            });
        }
        self.write(r, v);
        Ok(())
    }

    fn write(&mut self, r: Register, v: Value) {
        self.regs[r.slot(self.r_max)] = v;
        if r.is_key() {
            self.key = match v {
                Value::Plain(k) => Key::new(self.params, k).ok(),
                Value::Cipher(_) => None,
            };
        }
    }

    pub fn key(&self) -> Option<&Key> {
        self.key.as_ref()
    }

    pub fn salts(&self) -> &SaltSource {
        &self.salts
    }

    pub fn salts_mut(&mut self) -> &mut SaltSource {
        &mut self.salts
    }

    pub fn registers(&self) -> impl Iterator<Item = (Register, Value)> + '_ {
        self.regs
            .iter()
            .enumerate()
            .map(|(i, &v)| (Register::from_slot(i, self.r_max), v))
    }

    /// Encrypts `m` under the current key with the next salt.
    pub fn encrypt(&mut self, m: u64) -> Option<u64> {
        let salt = self.salts.next_salt();
        self.key.as_ref().map(|k| k.encrypt(m, salt))
    }

    pub fn decrypt(&self, c: u64) -> Option<u64> {
        self.key.as_ref().map(|k| k.decrypt(c))
    }

    /// Register contents only; salts and cached key schedule are ignored.
    pub(crate) fn reg_values(&self) -> &[Value] {
        &self.regs
    }

    /// Copies registers and key from `other`, keeping this state's salts.
    pub(crate) fn clone_regs_from(&mut self, other: &MachineState) {
        self.params = other.params;
        self.r_max = other.r_max;
        self.regs.clone_from(&other.regs);
        self.key.clone_from(&other.key);
    }

    pub fn same_registers(&self, other: &MachineState) -> bool {
        self.r_max == other.r_max && self.regs == other.regs
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            regs: self.registers().map(|(r, v)| (r.to_string(), v)).collect(),
        }
    }

    /// Applies `reg=value[:plain|cipher]`; the tag defaults to plain.
    pub fn assign(&mut self, text: &str) -> Result<(), StateError> {
        let bad = || StateError::Assignment(text.to_string());
        let (reg, rest) = text.split_once('=').ok_or_else(bad)?;
        let (value, tag) = rest.split_once(':').unwrap_or((rest, "plain"));
        let syntax = Syntax { r_max: self.r_max };
        let r = syntax
            .parse(&format!("enc {}", reg.trim()))
            .map_err(|_| bad())?
            .commands()
            .first()
            .and_then(|c| c.registers().first().copied())
            .ok_or_else(bad)?;
        let value = value.trim();
        let bits = if let Some(hex) = value.strip_prefix("0x") {
            u64::from_str_radix(hex, 16)
        } else if let Some(bin) = value.strip_prefix("0b") {
            u64::from_str_radix(bin, 2)
        } else {
            value.parse()
        }
        .map_err(|_| bad())?;
        let v = match tag.trim() {
            "plain" => Value::Plain(bits),
            "cipher" => Value::Cipher(bits),
            _ => return Err(bad()),
        };
        self.set(r, v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub regs: BTreeMap<String, Value>,
}

/// Result of one small step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub next_program: Program,
    pub rule: Rule,
    pub cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub steps: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Semantics {
    pub costs: CostTable,
    pub fault: Option<Fault>,
}

impl Semantics {
    pub fn with_fault(fault: Fault) -> Semantics {
        Semantics {
            fault: Some(fault),
            ..Semantics::default()
        }
    }

    /// Takes exactly one rule application.
    pub fn step(&self, p: &Program, state: &mut MachineState) -> Result<StepOutcome, Stuck> {
        let cmds = p.commands();
        let head = cmds[0];
        if cmds.len() == 1 {
            if head.is_skip() {
                return Err(Stuck {
                    command_index: 0,
                    rule: Rule::Seq,
                    register: None,
                    reason: StuckReason::Terminal,
                });
            }
            let rule = self.exec(&head, state).map_err(|e| e.at(0))?;
            return Ok(StepOutcome {
                next_program: Program::single(Command::Skip),
                rule,
                cycles: self.costs.cost(rule),
            });
        }
        if head.is_skip() {
            return Ok(StepOutcome {
                next_program: Program::new(cmds[1..].to_vec()).expect("non-empty tail"),
                rule: Rule::Seq,
                cycles: self.costs.seq,
            });
        }
        let rule = self.exec(&head, state).map_err(|e| e.at(0))?;
        let mut next = cmds.to_vec();
        next[0] = Command::Skip;
        Ok(StepOutcome {
            next_program: Program::new(next).expect("non-empty"),
            rule,
            cycles: self.costs.cost(rule),
        })
    }

    /// Steps to the terminal `skip`, summing cycles.
    pub fn run(&self, p: &Program, state: &mut MachineState) -> Result<RunResult, Stuck> {
        let cmds = p.commands();
        let last = cmds.len() - 1;
        let mut out = RunResult { steps: 0, cycles: 0 };
        for (i, c) in cmds.iter().enumerate() {
            if !c.is_skip() {
                let rule = self.exec(c, state).map_err(|e| e.at(i))?;
                out.steps += 1;
                out.cycles += self.costs.cost(rule);
            }
            if i < last {
                out.steps += 1;
                out.cycles += self.costs.seq;
            }
        }
        Ok(out)
    }

    /// Like [`Semantics::run`] but records every step.
    pub fn run_traced(&self, p: &Program, state: &mut MachineState) -> Result<(RunResult, Vec<StepOutcome>), Stuck> {
        let mut trace = Vec::new();
        let mut cur = p.clone();
        let mut result = RunResult { steps: 0, cycles: 0 };
        let mut consumed = 0;
        while !cur.is_terminal() {
            let before = cur.len();
            let out = self.step(&cur, state).map_err(|mut e| {
                e.command_index += consumed;
                e
            })?;
            if out.next_program.len() < before {
                consumed += 1;
            }
            result.steps += 1;
            result.cycles += out.cycles;
            cur = out.next_program.clone();
            trace.push(out);
        }
        Ok((result, trace))
    }

    /// Applies the rule for a single non-skip command, leaving the state
    /// untouched if a premise fails.
    pub fn apply(&self, c: &Command, state: &mut MachineState) -> Result<Rule, Stuck> {
        if c.is_skip() {
            return Err(Stuck {
                command_index: 0,
                rule: Rule::Seq,
                register: None,
                reason: StuckReason::Terminal,
            });
        }
        self.exec(c, state).map_err(|e| e.at(0))
    }

    fn exec(&self, c: &Command, st: &mut MachineState) -> Result<Rule, PartialStuck> {
        let n = st.params.n;
        match *c {
            Command::Skip => unreachable!("skip has no rule of its own"),
            Command::Enc(r) => {
                let m = match st.get(r) {
                    Value::Plain(v) => v & mask(n),
                    Value::Cipher(_) => return Err(PartialStuck::new(Rule::Enc, r, StuckReason::ExpectedPlain)),
                };
                let c = st
                    .encrypt(m)
                    .ok_or(PartialStuck::new(Rule::Enc, Register::KeyReg, StuckReason::NoKey))?;
                st.write(r, Value::Cipher(c));
                Ok(Rule::Enc)
            }
            Command::Bop(kind, r1, r2) => {
                let a = cipher_operand(st, Rule::Bop, r1)?;
                let b = cipher_operand(st, Rule::Bop, r2)?;
                let key = st
                    .key
                    .as_ref()
                    .ok_or(PartialStuck::new(Rule::Bop, Register::KeyReg, StuckReason::NoKey))?;
                let res = kind.apply(key.decrypt(a), key.decrypt(b), n);
                let v = match self.fault {
                    Some(Fault::BopWritesPlain) => Value::Plain(res),
                    None => Value::Cipher(st.encrypt(res).expect("key checked")),
                };
                st.write(r1, v);
                Ok(Rule::Bop)
            }
            Command::Cmov {
                cond,
                dst,
                src_true,
                src_false,
            } => {
                let cc = cipher_operand(st, Rule::CmovT, cond)?;
                let key =
                    st.key
                        .as_ref()
                        .ok_or(PartialStuck::new(Rule::CmovT, Register::KeyReg, StuckReason::NoKey))?;
                let b = key.decrypt(cc);
                let (rule, src) = if b == mask(n) {
                    (Rule::CmovT, src_true)
                } else if b == 0 {
                    (Rule::CmovF, src_false)
                } else {
                    return Err(PartialStuck::new(Rule::CmovT, cond, StuckReason::NonBooleanCondition));
                };
                let m = key.decrypt(cipher_operand(st, rule, src)?);
                let c = st.encrypt(m).expect("key checked");
                st.write(dst, Value::Cipher(c));
                Ok(rule)
            }
        }
    }
}

fn cipher_operand(st: &MachineState, rule: Rule, r: Register) -> Result<u64, PartialStuck> {
    match st.get(r) {
        Value::Cipher(c) => Ok(c),
        Value::Plain(_) => Err(PartialStuck::new(rule, r, StuckReason::ExpectedCipher)),
    }
}

struct PartialStuck {
    rule: Rule,
    register: Register,
    reason: StuckReason,
}

impl PartialStuck {
    fn new(rule: Rule, register: Register, reason: StuckReason) -> Self {
        PartialStuck { rule, register, reason }
    }

    fn at(self, command_index: usize) -> Stuck {
        Stuck {
            command_index,
            rule: self.rule,
            register: Some(self.register),
            reason: self.reason,
        }
    }
}

/// Convenience: run with default semantics.
pub fn run(p: &Program, state: &mut MachineState) -> Result<RunResult, Stuck> {
    Semantics::default().run(p, state)
}

pub fn step(p: &Program, state: &mut MachineState) -> Result<StepOutcome, Stuck> {
    Semantics::default().step(p, state)
}
