//! The seven enclave variants as FSM circuits.
//!
//! Every variant shares one port list (`start`, `op`, `in_a`, `in_b`,
//! `salt`), a `key` register that never changes, and two outputs: the 1-bit
//! `valid` flag and the `(n + s)`-bit `data` word. Decrypted operands are
//! named `dec_a` / `dec_b` so the checkers can turn them into free secret
//! inputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoParams, MAX_ROUNDS};
use crate::hwir::{declassify, inject, Circuit, CircuitBuilder, DeclassPoint, HwError, NodeId, Simulator};
use crate::lang::mask;

/// Widest block the RSA variant supports (its products need `2w` bits).
pub const MAX_RSA_BITS: u32 = 31;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnclaveError {
    #[error("invalid enclave parameters: {0}")]
    InvalidParams(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Hw(#[from] HwError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    Default,
    Rolled,
    Cache,
    VulnRolled,
    VulnMultiplier,
    VulnCache,
    VulnRsa,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Default,
        VariantKind::Rolled,
        VariantKind::Cache,
        VariantKind::VulnRolled,
        VariantKind::VulnMultiplier,
        VariantKind::VulnCache,
        VariantKind::VulnRsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Default => "Default",
            VariantKind::Rolled => "Rolled",
            VariantKind::Cache => "Cache",
            VariantKind::VulnRolled => "VulnRolled",
            VariantKind::VulnMultiplier => "VulnMultiplier",
            VariantKind::VulnCache => "VulnCache",
            VariantKind::VulnRsa => "VulnRSA",
        }
    }

    pub fn is_cache(self) -> bool {
        matches!(self, VariantKind::Cache | VariantKind::VulnCache)
    }

    pub fn expected(self) -> ExpectedVerdict {
        use LeakClass::*;
        use Sink::*;
        use Source::*;
        let flows = match self {
            VariantKind::Default | VariantKind::Rolled | VariantKind::Cache => vec![],
            VariantKind::VulnRolled => vec![Flow::new(Plaintext, Data, Functional), Flow::new(Key, Data, Functional)],
            VariantKind::VulnMultiplier | VariantKind::VulnCache => vec![Flow::new(Plaintext, Valid, Timing)],
            VariantKind::VulnRsa => vec![Flow::new(Key, Valid, Timing), Flow::new(Key, Data, FunctionalTiming)],
        };
        ExpectedVerdict::new(flows)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = EnclaveError;

    /// Case-insensitive; `-` and `_` are ignored (`vuln-rsa`, `VulnRSA`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .map(|c| c.to_ascii_lowercase())
            .collect();
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| EnclaveError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Plaintext,
    Key,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Plaintext => "plaintext",
            Source::Key => "key",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sink {
    Valid,
    Data,
}

impl fmt::Display for Sink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sink::Valid => "Valid",
            Sink::Data => "Data",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakClass {
    Functional,
    Timing,
    FunctionalTiming,
}

impl fmt::Display for LeakClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeakClass::Functional => "functional",
            LeakClass::Timing => "timing",
            LeakClass::FunctionalTiming => "functional-timing",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Flow {
    pub source: Source,
    pub sink: Sink,
    pub class: LeakClass,
}

impl Flow {
    pub fn new(source: Source, sink: Sink, class: LeakClass) -> Flow {
        Flow { source, sink, class }
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} → {} ({})", self.source, self.sink, self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedVerdict {
    pub secure: bool,
    /// Sorted.
    pub flows: Vec<Flow>,
}

impl ExpectedVerdict {
    pub fn new(mut flows: Vec<Flow>) -> ExpectedVerdict {
        flows.sort();
        flows.dedup();
        ExpectedVerdict {
            secure: flows.is_empty(),
            flows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnclaveParams {
    pub n: u32,
    pub s: u32,
    pub rounds: u32,
    pub cache_lines: u32,
    /// Extra cycles per operand that misses the cache.
    pub miss_latency: u32,
    /// Initial `key` register contents (also the RSA exponent).
    pub key: u64,
}

impl Default for EnclaveParams {
    fn default() -> Self {
        EnclaveParams {
            n: 2,
            s: 2,
            rounds: 4,
            cache_lines: 2,
            miss_latency: 2,
            key: 0b1011,
        }
    }
}

impl EnclaveParams {
    pub fn width(&self) -> u32 {
        self.n + self.s
    }

    pub fn crypto(&self) -> CryptoParams {
        CryptoParams {
            n: self.n,
            s: self.s,
            rounds: self.rounds,
        }
    }

    pub fn validate(&self) -> Result<(), EnclaveError> {
        self.crypto()
            .validate()
            .map_err(|e| EnclaveError::InvalidParams(e.to_string()))?;
        let bad = |m: String| Err(EnclaveError::InvalidParams(m));
        if self.rounds > MAX_ROUNDS {
            return bad(format!("at most {MAX_ROUNDS} rounds"));
        }
        if self.cache_lines < 2 || !self.cache_lines.is_power_of_two() || self.cache_lines > 64 {
            return bad(format!(
                "cache_lines must be a power of two in 2..=64, got {}",
                self.cache_lines
            ));
        }
        if !(1..=64).contains(&self.miss_latency) {
            return bad(format!("miss_latency must be in 1..=64, got {}", self.miss_latency));
        }
        if self.key & !mask(self.width()) != 0 {
            return bad(format!("key {:#x} exceeds {} bits", self.key, self.width()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AluOp {
    Add,
    Sub,
    And,
    Xor,
}

impl AluOp {
    pub const ALL: [AluOp; 4] = [AluOp::Add, AluOp::Sub, AluOp::And, AluOp::Xor];

    /// Value driven on the 2-bit `op` port.
    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn apply(self, a: u64, b: u64, n: u32) -> u64 {
        let r = match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Xor => a ^ b,
        };
        r & mask(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MulTermination {
    /// Always `n` iterations.
    Fixed,
    /// Stop as soon as either operand register is zero.
    EarlyExit,
}

/// A secret the checkers vary: injected signals become free inputs named
/// by [`secret_port`], registers are varied through their initial value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretSource {
    pub source: Source,
    pub signals: Vec<String>,
    pub regs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sinks {
    pub valid: String,
    pub data: String,
}

impl Sinks {
    pub fn name(&self, s: Sink) -> &str {
        match s {
            Sink::Valid => &self.valid,
            Sink::Data => &self.data,
        }
    }
}

pub fn secret_port(signal: &str) -> String {
    format!("secret_{signal}")
}

/// Public input ports, in declaration order.
pub const PUBLIC_INPUTS: [&str; 5] = ["start", "op", "in_a", "in_b", "salt"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveVariant {
    pub kind: VariantKind,
    pub params: EnclaveParams,
    pub circuit: Circuit,
    pub secrets: Vec<SecretSource>,
    pub sinks: Sinks,
    pub declass: Vec<DeclassPoint>,
    pub expected: ExpectedVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    /// Cycles from the `start` cycle to the first cycle with `valid` high.
    pub latency: u32,
    pub data: u64,
}

impl EnclaveVariant {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Cycles from an accepted `start` to `valid`, maximized over operands
    /// and cache contents.
    pub fn worst_latency(&self) -> u32 {
        let p = &self.params;
        match self.kind {
            VariantKind::Default | VariantKind::Rolled | VariantKind::VulnRolled => p.rounds,
            VariantKind::Cache | VariantKind::VulnCache => 1 + 2 * p.miss_latency + p.rounds,
            VariantKind::VulnMultiplier => 1 + p.n + p.rounds,
            VariantKind::VulnRsa => 1 + p.width(),
        }
    }

    pub fn default_horizon(&self) -> u32 {
        4 * self.worst_latency()
    }

    pub fn source(&self, s: Source) -> Option<&SecretSource> {
        self.secrets.iter().find(|x| x.source == s)
    }

    /// The circuit the checkers analyse: every secret signal replaced by a
    /// free input, then (optionally) every declassification point applied.
    pub fn analysis_circuit(&self, use_declass: bool) -> Result<Circuit, HwError> {
        let mut c = self.circuit.clone();
        for src in &self.secrets {
            for sig in &src.signals {
                c = inject(&c, sig, &secret_port(sig))?;
            }
        }
        if use_declass {
            for d in &self.declass {
                c = declassify(&c, d)?;
            }
        }
        Ok(c)
    }

    /// Issues one request from the reset state and waits for `valid`.
    pub fn request(&self, op: AluOp, in_a: u64, in_b: u64, salt: u64) -> Result<Option<RequestOutcome>, HwError> {
        let c = &self.circuit;
        let valid = c.output_index(&self.sinks.valid)?;
        let data = c.output_index(&self.sinks.data)?;
        let outs = |sim: &Simulator| {
            let o = c.outputs();
            (sim.value(o[valid].1), sim.value(o[data].1))
        };
        let mut sim = Simulator::new(c);
        let mut inputs = vec![1, op.code(), in_a, in_b, salt];
        for cycle in 0..=self.default_horizon() {
            sim.step(&inputs);
            let (v, d) = outs(&sim);
            if v == 1 && cycle > 0 {
                return Ok(Some(RequestOutcome {
                    latency: cycle,
                    data: d,
                }));
            }
            inputs[0] = 0;
        }
        Ok(None)
    }
}

/// Number of distinct public cache states (valid bits and tags); 1 for
/// variants without a cache.
pub fn initial_state_count(v: &EnclaveVariant) -> u128 {
    if !v.kind.is_cache() {
        return 1;
    }
    let bits = v.params.cache_lines * (1 + v.params.width());
    if bits >= 128 {
        u128::MAX
    } else {
        1u128 << bits
    }
}

fn cache_public_regs(v: &EnclaveVariant) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    for i in 0..v.params.cache_lines {
        for (name, w) in [(format!("lv{i}"), 1), (format!("lt{i}"), v.params.width())] {
            if let Ok(r) = v.circuit.reg_index(&name) {
                out.push((r, w));
            }
        }
    }
    out
}

/// Every public initial cache state (line valid bits and tags), data lines
/// left at their reset value. Non-cache variants yield only `S0`.
pub fn enumerate_initial_states(v: &EnclaveVariant) -> impl Iterator<Item = Vec<u64>> + '_ {
    let regs = cache_public_regs(v);
    let total: u32 = regs.iter().map(|r| r.1).sum();
    let s0 = v.circuit.initial_state();
    let count: u64 = if total >= 64 { u64::MAX } else { 1u64 << total };
    (0..count).map(move |mut code| {
        let mut s = s0.clone();
        for &(r, w) in &regs {
            s[r] = code & mask(w);
            code >>= w;
        }
        s
    })
}

/// `count` uniformly drawn initial cache states; the first is always `S0`.
pub fn sample_initial_states(v: &EnclaveVariant, count: usize, seed: u64) -> Vec<Vec<u64>> {
    let regs = cache_public_regs(v);
    let s0 = v.circuit.initial_state();
    if regs.is_empty() {
        return vec![s0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![s0.clone()];
    while out.len() < count {
        let mut s = s0.clone();
        for &(r, w) in &regs {
            s[r] = rng.gen::<u64>() & mask(w);
        }
        out.push(s);
    }
    out
}

pub fn build(kind: VariantKind, params: EnclaveParams) -> Result<EnclaveVariant, EnclaveError> {
    params.validate()?;
    let mut e = Ctx::new(params);
    match kind {
        VariantKind::Default => e.default_pipeline(),
        VariantKind::Rolled => e.rolled(false),
        VariantKind::VulnRolled => e.rolled(true),
        VariantKind::Cache => e.cache(false),
        VariantKind::VulnCache => e.cache(true),
        VariantKind::VulnMultiplier => e.multiplier(MulTermination::EarlyExit),
        VariantKind::VulnRsa => {
            if params.width() > MAX_RSA_BITS {
                return Err(EnclaveError::InvalidParams(format!(
                    "VulnRSA supports at most {MAX_RSA_BITS} block bits"
                )));
            }
            e.rsa()
        }
    }
    e.finish(kind)
}

/// The shift-add multiplier with either termination rule. The roster's
/// VulnMultiplier is `EarlyExit`.
pub fn build_multiplier(params: EnclaveParams, term: MulTermination) -> Result<EnclaveVariant, EnclaveError> {
    params.validate()?;
    let mut e = Ctx::new(params);
    e.multiplier(term);
    let mut v = e.finish(VariantKind::VulnMultiplier)?;
    if term == MulTermination::Fixed {
        v.expected = ExpectedVerdict::new(vec![]);
    }
    Ok(v)
}

pub fn build_all(params: EnclaveParams) -> Result<Vec<EnclaveVariant>, EnclaveError> {
    VariantKind::ALL.into_iter().map(|k| build(k, params)).collect()
}

fn bits_for(v: u32) -> u32 {
    (32 - v.leading_zeros()).max(1)
}

struct Ports {
    start: NodeId,
    op: NodeId,
    in_a: NodeId,
    in_b: NodeId,
    salt: NodeId,
}

struct Ctx {
    b: CircuitBuilder,
    p: EnclaveParams,
    io: Ports,
    key: NodeId,
    plaintext: SecretSource,
    declass: Vec<DeclassPoint>,
}

impl Ctx {
    fn new(p: EnclaveParams) -> Ctx {
        let w = p.width();
        let mut b = CircuitBuilder::new();
        let io = Ports {
            start: b.input("start", 1),
            op: b.input("op", 2),
            in_a: b.input("in_a", w),
            in_b: b.input("in_b", w),
            salt: b.input("salt", p.s),
        };
        let key = b.reg("key", w, p.key);
        b.set_next(key, key);
        Ctx {
            b,
            p,
            io,
            key,
            plaintext: SecretSource {
                source: Source::Plaintext,
                signals: vec![],
                regs: vec![],
            },
            declass: vec![],
        }
    }

    fn finish(self, kind: VariantKind) -> Result<EnclaveVariant, EnclaveError> {
        let circuit = self.b.build()?;
        let mut secrets = vec![];
        if !self.plaintext.signals.is_empty() || !self.plaintext.regs.is_empty() {
            secrets.push(self.plaintext);
        }
        secrets.push(SecretSource {
            source: Source::Key,
            signals: vec![],
            regs: vec!["key".into()],
        });
        Ok(EnclaveVariant {
            kind,
            params: self.p,
            circuit,
            secrets,
            sinks: Sinks {
                valid: "valid".into(),
                data: "data".into(),
            },
            declass: self.declass,
            expected: kind.expected(),
        })
    }

    fn w(&self) -> u32 {
        self.p.width()
    }

    fn konst(&mut self, v: u64, w: u32) -> NodeId {
        self.b.constant(v, w)
    }

    fn and_not(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.b.not(b);
        self.b.and(a, nb)
    }

    fn incr(&mut self, r: NodeId) -> NodeId {
        let w = self.b.width(r);
        let one = self.konst(1, w);
        self.b.add(r, one)
    }

    /// Plaintext half of a ciphertext, registered as a secret signal.
    fn decrypt(&mut self, name: &str, c: NodeId) -> NodeId {
        let mut x = c;
        for r in (0..self.p.rounds).rev() {
            x = self.b.keyed_mix_inv(r, self.key, x);
        }
        let pt = self.b.slice(x, self.p.s, self.p.n);
        self.b.name(name, pt);
        self.plaintext.signals.push(name.to_string());
        pt
    }

    fn alu(&mut self, op: NodeId, a: NodeId, c: NodeId) -> NodeId {
        let add = self.b.add(a, c);
        let sub = self.b.sub(a, c);
        let and = self.b.and(a, c);
        let xor = self.b.xor(a, c);
        let o0 = self.b.bit(op, 0);
        let o1 = self.b.bit(op, 1);
        let lo = self.b.mux(o0, sub, add);
        let hi = self.b.mux(o0, xor, and);
        self.b.mux(o1, hi, lo)
    }

    /// R pipeline stages, one round each, fed by `block` when `issue` is
    /// high. Returns (valid, ciphertext); the last stage is named `ct`.
    fn encrypt_pipeline(&mut self, issue: NodeId, block: NodeId) -> (NodeId, NodeId) {
        let w = self.w();
        let (mut x, mut v) = (block, issue);
        for i in 0..self.p.rounds {
            let st = self.b.reg(&format!("st{i}"), w, 0);
            let nx = self.b.keyed_mix(i, self.key, x);
            self.b.set_next(st, nx);
            let vr = self.b.reg(&format!("v{i}"), 1, 0);
            self.b.set_next(vr, v);
            x = st;
            v = vr;
        }
        self.b.name("ct", x);
        (v, x)
    }

    fn declassify_ct(&mut self, predicate: NodeId) {
        self.b.name("declass_p", predicate);
        self.declass.push(DeclassPoint {
            signal: "ct".into(),
            predicate: "declass_p".into(),
            free_input: "cf_ct".into(),
        });
    }

    fn outputs(&mut self, valid: NodeId, data: NodeId) {
        self.b.output("valid", valid);
        self.b.output("data", data);
    }

    fn default_pipeline(&mut self) {
        let (in_a, in_b) = (self.io.in_a, self.io.in_b);
        let a = self.decrypt("dec_a", in_a);
        let c = self.decrypt("dec_b", in_b);
        let res = self.alu(self.io.op, a, c);
        let block = self.b.concat(res, self.io.salt);
        let (valid, ct) = self.encrypt_pipeline(self.io.start, block);
        // The last stage always holds a complete ciphertext.
        let always = self.konst(1, 1);
        self.declassify_ct(always);
        self.outputs(valid, ct);
    }

    fn rolled(&mut self, vuln: bool) {
        let w = self.w();
        let r = self.p.rounds;
        let cw = bits_for(r);
        let busy = self.b.reg("busy", 1, 0);
        let ctr = self.b.reg("ctr", cw, 0);
        let st = self.b.reg("st", w, 0);
        self.b.name("ct", st);

        let complete = self.b.eq_const(ctr, u64::from(r));
        let done = self.b.and(busy, complete);
        self.b.name("done", done);
        let idle = self.b.not(busy);
        let free = self.b.or(idle, done);
        let accept = self.b.and(self.io.start, free);

        let (in_a, in_b) = (self.io.in_a, self.io.in_b);
        let a = self.decrypt("dec_a", in_a);
        let c = self.decrypt("dec_b", in_b);
        let res = self.alu(self.io.op, a, c);
        let block = self.b.concat(res, self.io.salt);
        let first = self.b.keyed_mix(0, self.key, block);

        // Round unit: round `ctr` applied to `st`.
        let mut round = st;
        for i in 1..r {
            let ki = self.b.keyed_mix(i, self.key, st);
            let sel = self.b.eq_const(ctr, u64::from(i));
            round = self.b.mux(sel, ki, round);
        }
        let limit = self.konst(u64::from(r), cw);
        let below = self.b.lt(ctr, limit);
        let stepping = self.b.and(busy, below);

        let held = self.b.mux(stepping, round, st);
        let st_next = self.b.mux(accept, first, held);
        self.b.set_next(st, st_next);
        let one_c = self.konst(1, cw);
        let ctr_inc = self.incr(ctr);
        let ctr_held = self.b.mux(stepping, ctr_inc, ctr);
        let ctr_next = self.b.mux(accept, one_c, ctr_held);
        self.b.set_next(ctr, ctr_next);
        let one = self.konst(1, 1);
        let zero = self.konst(0, 1);
        let busy_held = self.b.mux(done, zero, busy);
        let busy_next = self.b.mux(accept, one, busy_held);
        self.b.set_next(busy, busy_next);

        self.declassify_ct(complete);
        let gate = if vuln { busy } else { done };
        let zero_w = self.konst(0, w);
        let data = self.b.mux(gate, st, zero_w);
        self.outputs(done, data);
    }

    /// Hit flag and data of a fully associative lookup on `tag`.
    fn lookup(&mut self, lines: &[(NodeId, NodeId, NodeId)], tag: NodeId) -> (NodeId, NodeId) {
        let mut hit = self.konst(0, 1);
        let mut data = self.konst(0, self.p.n);
        for &(lv, lt, ld) in lines.iter().rev() {
            let same = self.b.eq(lt, tag);
            let h = self.b.and(lv, same);
            hit = self.b.or(hit, h);
            data = self.b.mux(h, ld, data);
        }
        (hit, data)
    }

    fn cache(&mut self, vuln: bool) {
        let w = self.w();
        let (n, s) = (self.p.n, self.p.s);
        let lines_n = self.p.cache_lines;
        let pw = lines_n.trailing_zeros();
        let d = self.p.miss_latency;
        let cntw = bits_for(2 * d);

        let pend = self.b.reg("pend", 1, 0);
        let cnt = self.b.reg("wait", cntw, 0);
        let ha = self.b.reg("hold_a", w, 0);
        let hb = self.b.reg("hold_b", w, 0);
        let hop = self.b.reg("hold_op", 2, 0);
        let hsalt = self.b.reg("hold_salt", s, 0);
        let ptr = self.b.reg("ptr", pw, 0);
        let mut lines = Vec::new();
        for i in 0..lines_n {
            let lv = self.b.reg(&format!("lv{i}"), 1, 0);
            let lt = self.b.reg(&format!("lt{i}"), w, 0);
            let ld = self.b.reg(&format!("ld{i}"), n, 0);
            self.plaintext.regs.push(format!("ld{i}"));
            lines.push((lv, lt, ld));
        }

        let accept = self.and_not(self.io.start, pend);
        for (r, input) in [
            (ha, self.io.in_a),
            (hb, self.io.in_b),
            (hop, self.io.op),
            (hsalt, self.io.salt),
        ] {
            let nx = self.b.mux(accept, input, r);
            self.b.set_next(r, nx);
        }

        let dec_a = self.decrypt("dec_a", ha);
        let dec_b = self.decrypt("dec_b", hb);
        let (tag_a, tag_b) = if vuln {
            (self.b.resize(dec_a, w), self.b.resize(dec_b, w))
        } else {
            (ha, hb)
        };
        let (hit_a, data_a) = self.lookup(&lines, tag_a);
        let (hit_b, data_b) = self.lookup(&lines, tag_b);
        self.b.name("hit_a", hit_a);
        self.b.name("hit_b", hit_b);
        let pt_a = self.b.mux(hit_a, data_a, dec_a);
        let pt_b = self.b.mux(hit_b, data_b, dec_b);
        let miss_a = self.b.not(hit_a);
        let miss_b = self.b.not(hit_b);

        let dc = self.konst(u64::from(d), cntw);
        let zc = self.konst(0, cntw);
        let pen_a = self.b.mux(miss_a, dc, zc);
        let pen_b = self.b.mux(miss_b, dc, zc);
        let need = self.b.add(pen_a, pen_b);
        let ready = self.b.eq(cnt, need);
        let issue = self.b.and(pend, ready);
        self.b.name("issue", issue);

        let cnt_inc = self.incr(cnt);
        let cnt_run = self.b.mux(issue, zc, cnt_inc);
        let cnt_next = self.b.mux(pend, cnt_run, zc);
        self.b.set_next(cnt, cnt_next);
        let one = self.konst(1, 1);
        let zero = self.konst(0, 1);
        let pend_held = self.b.mux(issue, zero, pend);
        let pend_next = self.b.mux(accept, one, pend_held);
        self.b.set_next(pend, pend_next);

        let res = self.alu(hop, pt_a, pt_b);
        let block = self.b.concat(res, hsalt);
        let (valid, ct) = self.encrypt_pipeline(issue, block);

        // Round-robin refill of missed operands.
        let fill_a = self.b.and(issue, miss_a);
        let fill_b = self.b.and(issue, miss_b);
        let step_a = self.b.resize(fill_a, pw);
        let step_b = self.b.resize(fill_b, pw);
        let slot_b = self.b.add(ptr, step_a);
        for (i, &(lv, lt, ld)) in lines.iter().enumerate() {
            let at_a = self.b.eq_const(ptr, i as u64);
            let at_b = self.b.eq_const(slot_b, i as u64);
            let wa = self.b.and(fill_a, at_a);
            let wb = self.b.and(fill_b, at_b);
            let lv_a = self.b.mux(wa, one, lv);
            let lv_next = self.b.mux(wb, one, lv_a);
            self.b.set_next(lv, lv_next);
            let lt_a = self.b.mux(wa, tag_a, lt);
            let lt_next = self.b.mux(wb, tag_b, lt_a);
            self.b.set_next(lt, lt_next);
            let ld_a = self.b.mux(wa, dec_a, ld);
            let ld_next = self.b.mux(wb, dec_b, ld_a);
            self.b.set_next(ld, ld_next);
        }
        let ptr_next = self.b.add(slot_b, step_b);
        self.b.set_next(ptr, ptr_next);

        let always = self.konst(1, 1);
        self.declassify_ct(always);
        self.outputs(valid, ct);
    }

    fn multiplier(&mut self, term: MulTermination) {
        let (n, s) = (self.p.n, self.p.s);
        let cw = bits_for(n);
        let busy = self.b.reg("busy", 1, 0);
        let ra = self.b.reg("reg_a", n, 0);
        let rb = self.b.reg("reg_b", n, 0);
        let o = self.b.reg("o", n, 0);
        let cnt = self.b.reg("counter", cw, 0);
        let hsalt = self.b.reg("hold_salt", s, 0);

        let accept = self.and_not(self.io.start, busy);
        let (in_a, in_b) = (self.io.in_a, self.io.in_b);
        let a = self.decrypt("dec_a", in_a);
        let c = self.decrypt("dec_b", in_b);

        let stop = match term {
            MulTermination::EarlyExit => {
                let za = self.b.eq_const(ra, 0);
                let zb = self.b.eq_const(rb, 0);
                self.b.or(za, zb)
            }
            MulTermination::Fixed => self.b.eq_const(cnt, u64::from(n)),
        };
        let finish = self.b.and(busy, stop);
        self.b.name("finish", finish);
        let working = self.and_not(busy, finish);

        // shift and add
        let shift = self.b.resize(cnt, n);
        let shifted = self.b.shl(ra, shift);
        let sum = self.b.add(o, shifted);
        let b0 = self.b.bit(rb, 0);
        let take = self.b.and(working, b0);
        let zero_n = self.konst(0, n);
        let o_held = self.b.mux(take, sum, o);
        let o_next = self.b.mux(accept, zero_n, o_held);
        self.b.set_next(o, o_next);
        let one_n = self.konst(1, n);
        let rb_sh = self.b.shr(rb, one_n);
        let rb_held = self.b.mux(working, rb_sh, rb);
        let rb_next = self.b.mux(accept, c, rb_held);
        self.b.set_next(rb, rb_next);
        let ra_next = self.b.mux(accept, a, ra);
        self.b.set_next(ra, ra_next);
        let zero_c = self.konst(0, cw);
        let cnt_inc = self.incr(cnt);
        let cnt_held = self.b.mux(working, cnt_inc, cnt);
        let cnt_next = self.b.mux(accept, zero_c, cnt_held);
        self.b.set_next(cnt, cnt_next);
        let salt_next = self.b.mux(accept, self.io.salt, hsalt);
        self.b.set_next(hsalt, salt_next);
        let one = self.konst(1, 1);
        let zero = self.konst(0, 1);
        let busy_held = self.b.mux(finish, zero, busy);
        let busy_next = self.b.mux(accept, one, busy_held);
        self.b.set_next(busy, busy_next);

        let block = self.b.concat(o, hsalt);
        let (valid, ct) = self.encrypt_pipeline(finish, block);
        let always = self.konst(1, 1);
        self.declassify_ct(always);
        self.outputs(valid, ct);
    }

    /// Right-to-left square-and-multiply of `in_a` to the `key` power,
    /// modulo `2^w - 1`.
    fn rsa(&mut self) {
        let w = self.w();
        let busy = self.b.reg("busy", 1, 0);
        let o = self.b.reg("o", w, 0);
        let on = self.b.reg("o_next", w, 0);
        let dl = self.b.reg("d_leftover", w, 0);
        self.b.name("ct", o);

        let accept = self.and_not(self.io.start, busy);
        let drained = self.b.eq_const(dl, 0);
        let finish = self.b.and(busy, drained);
        self.b.name("finish", finish);
        let working = self.and_not(busy, finish);

        let modulus = self.konst(mask(w), 2 * w);
        let o2 = self.b.resize(o, 2 * w);
        let on2 = self.b.resize(on, 2 * w);
        let prod = self.b.mul(o2, on2);
        let prod = self.b.rem(prod, modulus);
        let prod = self.b.slice(prod, 0, w);
        let sq = self.b.mul(on2, on2);
        let sq = self.b.rem(sq, modulus);
        let sq = self.b.slice(sq, 0, w);

        let d0 = self.b.bit(dl, 0);
        let take = self.b.and(working, d0);
        let one_w = self.konst(1, w);
        let o_held = self.b.mux(take, prod, o);
        let o_next = self.b.mux(accept, one_w, o_held);
        self.b.set_next(o, o_next);
        let on_held = self.b.mux(working, sq, on);
        let on_next = self.b.mux(accept, self.io.in_a, on_held);
        self.b.set_next(on, on_next);
        let dl_sh = self.b.shr(dl, one_w);
        let dl_held = self.b.mux(working, dl_sh, dl);
        let dl_next = self.b.mux(accept, self.key, dl_held);
        self.b.set_next(dl, dl_next);
        let one = self.konst(1, 1);
        let zero = self.konst(0, 1);
        let busy_held = self.b.mux(finish, zero, busy);
        let busy_next = self.b.mux(accept, one, busy_held);
        self.b.set_next(busy, busy_next);

        self.declassify_ct(finish);
        let zero_w = self.konst(0, w);
        let data = self.b.mux(finish, o, zero_w);
        self.outputs(finish, data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Key;

    fn params(n: u32, s: u32) -> EnclaveParams {
        EnclaveParams {
            n,
            s,
            key: 0b1001_0110 & mask(n + s),
            ..EnclaveParams::default()
        }
    }

    fn key_of(p: &EnclaveParams) -> Key {
        Key::new(p.crypto(), p.key).unwrap()
    }

    #[test]
    fn roster_builds_with_expected_shape() {
        for n in 2..=4 {
            for v in build_all(params(n, 2)).unwrap() {
                let c = &v.circuit;
                assert!(c.output_index("valid").is_ok());
                let d = c.output_index("data").unwrap();
                assert_eq!(c.node(c.outputs()[d].1).width, n + 2);
                assert!(!v.secrets.is_empty());
                if v.expected.secure {
                    assert!(!v.declass.is_empty(), "{}", v.name());
                }
                v.analysis_circuit(true).unwrap();
                v.analysis_circuit(false).unwrap();
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for k in VariantKind::ALL {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert_eq!("vuln-rsa".parse::<VariantKind>().unwrap(), VariantKind::VulnRsa);
        assert!("nope".parse::<VariantKind>().is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(2, 2);
        p.rounds = 0;
        assert!(matches!(
            build(VariantKind::Default, p),
            Err(EnclaveError::InvalidParams(_))
        ));
        let mut p = params(2, 2);
        p.cache_lines = 3;
        assert!(build(VariantKind::Cache, p).is_err());
    }

    #[test]
    fn expected_verdicts() {
        assert!(VariantKind::Default.expected().secure);
        let rsa = VariantKind::VulnRsa.expected();
        assert!(!rsa.secure);
        assert_eq!(rsa.flows.len(), 2);
        assert!(rsa
            .flows
            .contains(&Flow::new(Source::Key, Sink::Data, LeakClass::FunctionalTiming)));
    }

    /// Drives one request through a live simulator and waits for `valid`.
    fn drive(sim: &mut Simulator, c: &Circuit, inputs: [u64; 5], horizon: u32) -> Option<(u32, u64)> {
        let valid = c.outputs()[c.output_index("valid").unwrap()].1;
        let data = c.outputs()[c.output_index("data").unwrap()].1;
        let mut inp = inputs.to_vec();
        for cycle in 0..horizon {
            sim.step(&inp);
            if cycle > 0 && sim.value(valid) == 1 {
                return Some((cycle, sim.value(data)));
            }
            inp[0] = 0;
        }
        None
    }

    #[test]
    fn secure_variants_are_correct_and_constant_time_at_4_bits() {
        let p = params(4, 2);
        let key = key_of(&p);
        for kind in [VariantKind::Default, VariantKind::Rolled] {
            let v = build(kind, p).unwrap();
            for op in AluOp::ALL {
                for a in 0..16 {
                    for b in 0..16 {
                        let ca = key.encrypt(a, (a + b) & 3);
                        let cb = key.encrypt(b, a & 3);
                        let r = v.request(op, ca, cb, 1).unwrap().unwrap();
                        assert_eq!(r.latency, p.rounds, "{kind}");
                        assert_eq!(key.decrypt(r.data), op.apply(a, b, 4), "{kind} {op:?} {a} {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn cache_is_correct_and_latency_follows_public_hits() {
        let p = params(4, 2);
        let key = key_of(&p);
        for kind in [VariantKind::Cache, VariantKind::VulnCache] {
            let v = build(kind, p).unwrap();
            let c = &v.circuit;
            for op in AluOp::ALL {
                let mut sim = Simulator::new(c);
                let mut seen = std::collections::VecDeque::new();
                for a in 0..16u64 {
                    for b in [a, 15 - a, 3] {
                        let ca = key.encrypt(a, 0);
                        let cb = key.encrypt(b, 0);
                        let (lat, data) = drive(&mut sim, c, [1, op.code(), ca, cb, 2], 64).unwrap();
                        assert_eq!(key.decrypt(data), op.apply(a, b, 4));
                        if kind == VariantKind::Cache {
                            // Two lines, FIFO refill: model hits on the ciphertexts.
                            let hit = |x: u64, seen: &std::collections::VecDeque<u64>| seen.contains(&x);
                            let (ha, hb) = (hit(ca, &seen), hit(cb, &seen));
                            let misses = u32::from(!ha) + u32::from(!hb);
                            assert_eq!(lat, 1 + misses * p.miss_latency + p.rounds);
                            for (x, h) in [(ca, ha), (cb, hb)] {
                                if !h {
                                    seen.push_back(x);
                                    if seen.len() > 2 {
                                        seen.pop_front();
                                    }
                                }
                            }
                        }
                        // Drain the pipeline so the next request starts idle.
                        for _ in 0..p.rounds {
                            sim.step(&[0, 0, 0, 0, 0]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cold_cache_latency_is_operand_independent() {
        let p = params(3, 2);
        let v = build(VariantKind::Cache, p).unwrap();
        for a in 0..32 {
            for b in 0..32 {
                // Both lookups happen before any refill, so a == b misses twice too.
                let r = v.request(AluOp::Add, a, b, 0).unwrap().unwrap();
                assert_eq!(r.latency, 1 + 2 * p.miss_latency + p.rounds);
            }
        }
    }

    #[test]
    fn rolled_valid_rises_at_cycle_r() {
        let p = EnclaveParams {
            rounds: 10,
            ..params(2, 2)
        };
        let v = build(VariantKind::Rolled, p).unwrap();
        let mut inputs = vec![vec![0; 5]; 25];
        inputs[0] = vec![1, 0, 3, 5, 1];
        let t = v.circuit.simulate(&inputs).unwrap();
        let vi = v.circuit.output_index("valid").unwrap();
        let rises: Vec<usize> = (0..t.len()).filter(|&i| t.outputs[i][vi] == 1).collect();
        assert_eq!(rises, vec![10]);
    }

    #[test]
    fn rolled_emits_every_r_cycles_when_saturated() {
        let p = params(2, 2);
        let v = build(VariantKind::Rolled, p).unwrap();
        let t = v.circuit.simulate(&vec![vec![1, 0, 3, 5, 1]; 20]).unwrap();
        let vi = v.circuit.output_index("valid").unwrap();
        let rises: Vec<usize> = (0..t.len()).filter(|&i| t.outputs[i][vi] == 1).collect();
        assert_eq!(rises, vec![4, 8, 12, 16]);
    }

    #[test]
    fn default_emits_every_cycle_after_fill() {
        let v = build(VariantKind::Default, params(2, 2)).unwrap();
        let t = v.circuit.simulate(&vec![vec![1, 1, 3, 5, 1]; 10]).unwrap();
        let vi = v.circuit.output_index("valid").unwrap();
        let rises: Vec<usize> = (0..t.len()).filter(|&i| t.outputs[i][vi] == 1).collect();
        assert_eq!(rises, (4..10).collect::<Vec<_>>());
    }

    #[test]
    fn vuln_rolled_exposes_round_state() {
        let p = params(2, 2);
        let v = build(VariantKind::VulnRolled, p).unwrap();
        let mut inputs = vec![vec![0; 5]; 6];
        inputs[0] = vec![1, 0, 3, 5, 1];
        let t = v.circuit.simulate(&inputs).unwrap();
        let di = v.circuit.output_index("data").unwrap();
        let st = v.circuit.reg_index("st").unwrap();
        for i in 1..4 {
            assert_eq!(t.outputs[i][di], t.states[i][st]);
        }
    }

    /// Cycle of the first `finish` after a start at cycle 0, with the
    /// decrypted operands forced through the secret ports.
    fn mul_finish(term: MulTermination, a: u64, b: u64) -> (u32, u64) {
        let p = params(4, 2);
        let v = build_multiplier(p, term).unwrap();
        let c = v.analysis_circuit(false).unwrap();
        let fin = c.signal("finish").unwrap();
        let o = c.signal("o").unwrap();
        let mut sim = Simulator::new(&c);
        let mut inputs = vec![0; c.inputs().len()];
        inputs[c.input_index("start").unwrap()] = 1;
        inputs[c.input_index(&secret_port("dec_a")).unwrap()] = a;
        inputs[c.input_index(&secret_port("dec_b")).unwrap()] = b;
        for cycle in 0..32 {
            sim.step(&inputs);
            if sim.value(fin) == 1 {
                return (cycle, sim.value(o));
            }
            inputs[0] = 0;
        }
        panic!("no finish");
    }

    #[test]
    fn multiplier_early_exit() {
        for x in 0..16 {
            assert_eq!(mul_finish(MulTermination::EarlyExit, 0, x), (1, 0));
        }
        // 3 = 0b11: two shift-add steps, then reg_b is zero.
        assert_eq!(mul_finish(MulTermination::EarlyExit, 5, 3), (3, 15));
    }

    #[test]
    fn multiplier_products_and_fixed_timing() {
        for a in 0..16 {
            for b in 0..16 {
                let (t, prod) = mul_finish(MulTermination::EarlyExit, a, b);
                assert_eq!(prod, (a * b) & 15);
                let walked = if a == 0 { 0 } else { 64 - b.leading_zeros() };
                assert_eq!(t, 1 + walked);
                assert_eq!(mul_finish(MulTermination::Fixed, a, b), (5, (a * b) & 15));
            }
        }
    }

    #[test]
    fn multiplier_result_is_encrypted_product() {
        let p = params(4, 2);
        let key = key_of(&p);
        let v = build(VariantKind::VulnMultiplier, p).unwrap();
        for (a, b) in [(0, 7), (5, 3), (15, 15), (9, 1)] {
            let r = v
                .request(AluOp::Add, key.encrypt(a, 1), key.encrypt(b, 2), 3)
                .unwrap()
                .unwrap();
            assert_eq!(key.decrypt(r.data), (a * b) & 15);
        }
    }

    fn pow_mod(base: u64, exp: u64, m: u64) -> u64 {
        let (mut acc, mut b, mut e) = (1u128, u128::from(base), exp);
        let m = u128::from(m);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * b % m;
            }
            b = b * b % m;
            e >>= 1;
        }
        (acc % m) as u64
    }

    #[test]
    fn rsa_time_is_key_bit_length() {
        for key in 0..64u64 {
            let p = EnclaveParams { key, ..params(4, 2) };
            let v = build(VariantKind::VulnRsa, p).unwrap();
            let c = v.circuit.clone();
            let d = c.signal("d_leftover").unwrap();
            for base in [2u64, 7, 33, 62] {
                let mut sim = Simulator::new(&c);
                let mut inputs = vec![1, 0, base, 0, 0];
                let mut mults = 0;
                let mut cycles = 0;
                for cycle in 0..16u32 {
                    sim.step(&inputs);
                    inputs[0] = 0;
                    if cycle > 0 && sim.value(c.outputs()[0].1) == 1 {
                        cycles = cycle - 1;
                        assert_eq!(sim.value(c.outputs()[1].1), pow_mod(base, key, 63));
                        break;
                    }
                    if cycle > 0 && sim.value(d) & 1 == 1 {
                        mults += 1;
                    }
                }
                assert_eq!(cycles, 64 - key.leading_zeros(), "key {key}");
                assert_eq!(mults, key.count_ones());
            }
        }
    }

    #[test]
    fn initial_state_enumeration_counts() {
        let p = params(1, 1);
        let v = build(VariantKind::Cache, p).unwrap();
        assert_eq!(initial_state_count(&v), 64);
        let states: Vec<_> = enumerate_initial_states(&v).collect();
        assert_eq!(states.len(), 64);
        let distinct: std::collections::BTreeSet<_> = states.iter().cloned().collect();
        assert_eq!(distinct.len(), 64);
        let d = build(VariantKind::Default, p).unwrap();
        assert_eq!(enumerate_initial_states(&d).count(), 1);
        assert_eq!(initial_state_count(&d), 1);
        let s = sample_initial_states(&v, 10, 3);
        assert_eq!(s.len(), 10);
        assert_eq!(s[0], v.circuit.initial_state());
    }

    #[test]
    fn declassify_with_original_value_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in build_all(params(2, 2)).unwrap() {
            let base = v.circuit.clone();
            let dc = v
                .declass
                .iter()
                .try_fold(base.clone(), |c, d| declassify(&c, d))
                .unwrap();
            let ct = base.signal("ct").unwrap();
            for _ in 0..50 {
                let mut s0 = base.initial_state();
                let mut s1 = dc.initial_state();
                for _ in 0..20 {
                    let inp: Vec<u64> = PUBLIC_INPUTS
                        .iter()
                        .map(|p| {
                            let w = base.inputs()[base.input_index(p).unwrap()].width;
                            rng.gen::<u64>() & mask(w)
                        })
                        .collect();
                    let mut vals = vec![0; base.nodes().len()];
                    base.eval_into(&s0, &inp, &mut vals);
                    let mut inp1 = inp.clone();
                    inp1.push(vals[ct.idx()]);
                    let (n0, o0) = base.eval_cycle(&s0, &inp).unwrap();
                    let (n1, o1) = dc.eval_cycle(&s1, &inp1).unwrap();
                    assert_eq!((&n0, &o0), (&n1, &o1), "{}", v.name());
                    s0 = n0;
                    s1 = n1;
                }
            }
        }
    }
}
