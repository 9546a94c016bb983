//! RTL information-flow checks over the enclave variants.
//!
//! Both checkers work on [`EnclaveVariant::analysis_circuit`]: decrypted
//! operands are free secret inputs and, when enabled, every
//! declassification point is applied. Public stimuli, initial cache states
//! and the declassified ciphertexts `c_f` are shared by both checkers, so a
//! taint verdict of "no flow" carries over to the two-trace check on the
//! same configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclaves::{
    enumerate_initial_states, initial_state_count, sample_initial_states, EnclaveParams, EnclaveVariant,
    ExpectedVerdict, Flow, LeakClass, Sink, Source, PUBLIC_INPUTS,
};
use crate::hwir::{Circuit, HwError, NodeId, Op, Simulator, Trace};
use crate::lang::mask;

/// Value `Data` holds while no result is available.
pub const INVALID_DEFAULT: u64 = 0;

pub const CLASSIFICATION_NOTE: &str =
    "Data flows are split into functional and functional-timing by the invalid-default rule (a heuristic).";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IftError {
    #[error("horizon {given} is shorter than the worst-case latency {needed}")]
    Horizon { given: u32, needed: u32 },
    #[error(transparent)]
    Hw(#[from] HwError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checker {
    Taint,
    TwoTrace,
}

impl fmt::Display for Checker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Checker::Taint => "taint",
            Checker::TwoTrace => "two-trace",
        })
    }
}

impl FromStr for Checker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "taint" => Ok(Checker::Taint),
            "two-trace" | "twotrace" => Ok(Checker::TwoTrace),
            _ => Err(format!("unknown checker `{s}` (expected taint or two-trace)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TwoTraceMode {
    /// Every constant secret assignment (up to the budget) against a base
    /// assignment, over the fixed stimulus set and initial-state sweep.
    Exhaustive,
    /// Independent pairs with per-cycle random secrets and fresh stimuli.
    Random { trials: u64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IftOptions {
    pub use_declass: bool,
    /// Defaults to four times the variant's worst-case latency.
    pub horizon: Option<u32>,
    pub stimuli: usize,
    pub seed: u64,
    /// Cache variants enumerate every initial state when there are at most
    /// this many, and otherwise sample this many.
    pub init_states: usize,
    /// Secret assignments per source in exhaustive mode before sampling.
    pub secret_budget: usize,
}

impl Default for IftOptions {
    fn default() -> Self {
        IftOptions {
            use_declass: true,
            horizon: None,
            stimuli: 4,
            seed: 0x5eed,
            init_states: 64,
            secret_budget: 256,
        }
    }
}

impl IftOptions {
    pub fn horizon_for(&self, v: &EnclaveVariant) -> Result<u32, IftError> {
        let h = self.horizon.unwrap_or_else(|| v.default_horizon());
        if h < v.worst_latency() {
            return Err(IftError::Horizon {
                given: h,
                needed: v.worst_latency(),
            });
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StimulusKind {
    /// One request at cycle 0, then idle.
    Single,
    /// `start` held high with fresh operands every cycle.
    Saturated,
    /// Requests at random gaps with ciphertexts below `2^n`.
    SmallOperands,
    Random,
}

impl StimulusKind {
    const ALL: [StimulusKind; 4] = [
        StimulusKind::Single,
        StimulusKind::Saturated,
        StimulusKind::SmallOperands,
        StimulusKind::Random,
    ];
}

/// Public inputs (`start, op, in_a, in_b, salt` per cycle) and the
/// declassified ciphertext values, identical in both runs of a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stimulus {
    pub kind: StimulusKind,
    pub public: Vec<[u64; 5]>,
    pub cf: Vec<Vec<u64>>,
}

fn gen_stimulus(
    kind: StimulusKind,
    p: &EnclaveParams,
    cf_widths: &[u32],
    horizon: u32,
    rng: &mut ChaCha8Rng,
) -> Stimulus {
    let w = p.width();
    let mut public = Vec::with_capacity(horizon as usize);
    let mut gap = 0u32;
    for t in 0..horizon {
        let mut op = rng.gen::<u64>() & 3;
        let mut a = rng.gen::<u64>() & mask(w);
        let mut b = rng.gen::<u64>() & mask(w);
        let salt = rng.gen::<u64>() & mask(p.s);
        let start = match kind {
            StimulusKind::Single => u64::from(t == 0),
            StimulusKind::Saturated => 1,
            StimulusKind::SmallOperands => {
                a &= mask(p.n);
                b &= mask(p.n);
                if gap == 0 {
                    gap = rng.gen_range(1..=3);
                    1
                } else {
                    gap -= 1;
                    0
                }
            }
            StimulusKind::Random => rng.gen::<u64>() & 1,
        };
        if start == 0 && kind != StimulusKind::Random {
            (op, a, b) = (0, 0, 0);
        }
        public.push([start, op, a, b, salt]);
    }
    let cf = (0..horizon)
        .map(|_| cf_widths.iter().map(|&cw| rng.gen::<u64>() & mask(cw)).collect())
        .collect();
    Stimulus { kind, public, cf }
}

/// The deterministic stimulus set shared by both checkers.
pub fn stimuli(v: &EnclaveVariant, opts: &IftOptions) -> Result<Vec<Stimulus>, IftError> {
    let horizon = opts.horizon_for(v)?;
    let c = v.analysis_circuit(opts.use_declass)?;
    let lay = Layout::new(v, &c, opts.use_declass)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok((0..opts.stimuli)
        .map(|i| gen_stimulus(StimulusKind::ALL[i % 4], &v.params, &lay.cf_widths, horizon, &mut rng))
        .collect())
}

fn initial_states(v: &EnclaveVariant, opts: &IftOptions) -> (Vec<Vec<u64>>, bool) {
    if initial_state_count(v) <= opts.init_states as u128 {
        (enumerate_initial_states(v).collect(), true)
    } else {
        (sample_initial_states(v, opts.init_states, opts.seed ^ 0x1417), false)
    }
}

#[derive(Debug, Clone, Copy)]
enum DimKind {
    Port(usize),
    Reg(usize),
}

#[derive(Debug, Clone)]
struct Dim {
    source: Source,
    kind: DimKind,
    width: u32,
    name: String,
}

/// Input and register positions of everything the checkers drive.
struct Layout {
    n_inputs: usize,
    public: [usize; 5],
    cf: Vec<usize>,
    cf_widths: Vec<u32>,
    dims: Vec<Dim>,
    valid: NodeId,
    data: NodeId,
}

impl Layout {
    fn new(v: &EnclaveVariant, c: &Circuit, use_declass: bool) -> Result<Layout, HwError> {
        let mut public = [0; 5];
        for (slot, name) in public.iter_mut().zip(PUBLIC_INPUTS) {
            *slot = c.input_index(name)?;
        }
        let mut cf = Vec::new();
        let mut cf_widths = Vec::new();
        if use_declass {
            for d in &v.declass {
                let i = c.input_index(&d.free_input)?;
                cf.push(i);
                cf_widths.push(c.inputs()[i].width);
            }
        }
        let mut dims = Vec::new();
        for src in &v.secrets {
            for sig in &src.signals {
                let port = crate::enclaves::secret_port(sig);
                let i = c.input_index(&port)?;
                dims.push(Dim {
                    source: src.source,
                    kind: DimKind::Port(i),
                    width: c.inputs()[i].width,
                    name: sig.clone(),
                });
            }
            for reg in &src.regs {
                let r = c.reg_index(reg)?;
                dims.push(Dim {
                    source: src.source,
                    kind: DimKind::Reg(r),
                    width: c.regs()[r].width,
                    name: reg.clone(),
                });
            }
        }
        let out = |name: &str| c.output_index(name).map(|i| c.outputs()[i].1);
        Ok(Layout {
            n_inputs: c.inputs().len(),
            public,
            cf,
            cf_widths,
            dims,
            valid: out(&v.sinks.valid)?,
            data: out(&v.sinks.data)?,
        })
    }

    fn dims_of(&self, s: Source) -> Vec<usize> {
        (0..self.dims.len()).filter(|&d| self.dims[d].source == s).collect()
    }

    fn fill_inputs(&self, inputs: &mut [u64], stim: &Stimulus, assign: &[Vec<u64>], t: usize) {
        for (slot, &v) in self.public.iter().zip(&stim.public[t]) {
            inputs[*slot] = v;
        }
        for (slot, &v) in self.cf.iter().zip(&stim.cf[t]) {
            inputs[*slot] = v;
        }
        for (d, vals) in self.dims.iter().zip(assign) {
            if let DimKind::Port(i) = d.kind {
                inputs[i] = vals[t % vals.len()];
            }
        }
    }

    fn seed_state(&self, s0: &[u64], assign: &[Vec<u64>]) -> Vec<u64> {
        let mut s = s0.to_vec();
        for (d, vals) in self.dims.iter().zip(assign) {
            if let DimKind::Reg(r) = d.kind {
                s[r] = vals[0];
            }
        }
        s
    }
}

/// Compares one sink's traces. `Valid` differences are timing leaks;
/// `Data` differences are functional-timing when every differing cycle has
/// one side at `invalid_default`, functional otherwise.
pub fn classify(sink: Sink, a: &[u64], b: &[u64], invalid_default: u64) -> Option<(LeakClass, Vec<u32>)> {
    let diffs: Vec<u32> = a
        .iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i as u32)
        .collect();
    if diffs.is_empty() {
        return None;
    }
    let class = match sink {
        Sink::Valid => LeakClass::Timing,
        Sink::Data => {
            let defaulted = diffs
                .iter()
                .all(|&i| a[i as usize] == invalid_default || b[i as usize] == invalid_default);
            if defaulted {
                LeakClass::FunctionalTiming
            } else {
                LeakClass::Functional
            }
        }
    };
    Some((class, diffs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SecretValue {
    pub name: String,
    /// One value per cycle, or a single value held for the whole run.
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub first_cycle: u32,
    pub initial_state: Vec<u64>,
    pub stimulus: StimulusKind,
    pub secrets_a: Vec<SecretValue>,
    pub secrets_b: Vec<SecretValue>,
    pub sink_a: Vec<u64>,
    pub sink_b: Vec<u64>,
    #[serde(skip)]
    pub traces: Option<Box<(Trace, Trace)>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub source: Source,
    pub sink: Sink,
    /// `None` when no flow was found.
    pub class: Option<LeakClass>,
    pub witness_cycles: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    /// Taint only: named signals from the secret to the sink, `name@cycle`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coverage {
    pub initial_states: usize,
    pub stimuli: usize,
    pub runs: u64,
    /// Initial states and secret assignments were enumerated, not sampled.
    pub exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakReport {
    pub variant: String,
    pub params: EnclaveParams,
    pub checker: Checker,
    pub declassify: bool,
    pub horizon: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<TwoTraceMode>,
    pub coverage: Coverage,
    pub verdicts: Vec<Verdict>,
}

impl LeakReport {
    /// Found flows, sorted.
    pub fn flows(&self) -> Vec<Flow> {
        let mut f: Vec<Flow> = self
            .verdicts
            .iter()
            .filter_map(|v| v.class.map(|c| Flow::new(v.source, v.sink, c)))
            .collect();
        f.sort();
        f
    }

    /// (source, sink) pairs with a flow, ignoring classification.
    pub fn reached(&self) -> Vec<(Source, Sink)> {
        self.flows().iter().map(|f| (f.source, f.sink)).collect()
    }

    pub fn is_secure(&self) -> bool {
        self.verdicts.iter().all(|v| v.class.is_none())
    }

    pub fn verdict(&self, source: Source, sink: Sink) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.source == source && v.sink == sink)
    }

    pub fn matches(&self, expected: &ExpectedVerdict) -> bool {
        self.flows() == expected.flows
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{} [{}] n={} s={} R={} declassify={} horizon={}\n",
            self.variant,
            self.checker,
            self.params.n,
            self.params.s,
            self.params.rounds,
            if self.declassify { "on" } else { "off" },
            self.horizon
        );
        for v in &self.verdicts {
            let what = match v.class {
                None => "none".to_string(),
                Some(c) => format!(
                    "{c} (first at cycle {})",
                    v.witness_cycles.first().copied().unwrap_or(0)
                ),
            };
            out.push_str(&format!("  {} → {}: {}\n", v.source, v.sink, what));
            if let Some(p) = &v.path {
                out.push_str(&format!("    path: {}\n", p.join(" -> ")));
            }
        }
        out.push_str(&format!(
            "  {} runs over {} initial state(s) x {} stimuli{}\n",
            self.coverage.runs,
            self.coverage.initial_states,
            self.coverage.stimuli,
            if self.coverage.exhaustive { "" } else { " (sampled)" }
        ));
        out
    }
}

fn sources(v: &EnclaveVariant) -> Vec<Source> {
    v.secrets.iter().map(|s| s.source).collect()
}

fn empty_verdicts(v: &EnclaveVariant) -> Vec<Verdict> {
    let mut out = Vec::new();
    for s in sources(v) {
        for sink in [Sink::Valid, Sink::Data] {
            out.push(Verdict {
                source: s,
                sink,
                class: None,
                witness_cycles: vec![],
                witness: None,
                path: None,
            });
        }
    }
    out
}

fn sink_node(lay: &Layout, sink: Sink) -> NodeId {
    match sink {
        Sink::Valid => lay.valid,
        Sink::Data => lay.data,
    }
}

// ---------------------------------------------------------------- taint

struct TaintRun {
    /// Cycles at which each sink was tainted.
    hits: [Vec<u32>; 2],
    /// Per-cycle node values and taints, when recorded.
    history: Vec<(Vec<u64>, Vec<u64>)>,
}

fn taint_run(
    c: &Circuit,
    lay: &Layout,
    s0: &[u64],
    stim: &Stimulus,
    source: Source,
    horizon: u32,
    record: bool,
) -> TaintRun {
    let nodes = c.nodes();
    let zero_assign: Vec<Vec<u64>> = lay
        .dims
        .iter()
        .map(|d| match d.kind {
            DimKind::Reg(r) => vec![s0[r]],
            DimKind::Port(_) => vec![0],
        })
        .collect();
    let mut state = lay.seed_state(s0, &zero_assign);
    let mut st_taint = vec![0u64; c.regs().len()];
    let mut port_taint = vec![0u64; lay.n_inputs];
    for d in lay.dims.iter().filter(|d| d.source == source) {
        match d.kind {
            DimKind::Reg(r) => st_taint[r] = mask(d.width),
            DimKind::Port(i) => port_taint[i] = mask(d.width),
        }
    }
    let mut inputs = vec![0u64; lay.n_inputs];
    let mut vals = vec![0u64; nodes.len()];
    let mut taint = vec![0u64; nodes.len()];
    let mut hits: [Vec<u32>; 2] = [vec![], vec![]];
    let mut history = Vec::new();
    for t in 0..horizon as usize {
        lay.fill_inputs(&mut inputs, stim, &zero_assign, t);
        c.eval_into(&state, &inputs, &mut vals);
        for (i, node) in nodes.iter().enumerate() {
            let tt = |n: NodeId| taint[n.idx()];
            let m = mask(node.width);
            let whole = |x: u64| if x != 0 { m } else { 0 };
            let r = match node.op {
                Op::Const(_) => 0,
                Op::Input(p) => port_taint[p],
                Op::Reg(r) => st_taint[r],
                Op::Slice { a, lo } => tt(a) >> lo,
                Op::Concat { hi, lo } => (tt(hi) << nodes[lo.idx()].width) | tt(lo),
                Op::Not(a) => tt(a),
                Op::And(a, b) | Op::Or(a, b) | Op::Xor(a, b) => tt(a) | tt(b),
                Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::Rem(a, b)
                | Op::Shl(a, b)
                | Op::Shr(a, b)
                | Op::Eq(a, b)
                | Op::Lt(a, b) => whole(tt(a) | tt(b)),
                Op::Mux { sel, a, b } => {
                    if tt(sel) != 0 {
                        m
                    } else if vals[sel.idx()] & 1 == 1 {
                        tt(a)
                    } else {
                        tt(b)
                    }
                }
                Op::KeyedMix { key, data, .. } | Op::KeyedMixInv { key, data, .. } => whole(tt(key) | tt(data)),
            };
            taint[i] = r & m;
        }
        for (k, sink) in [lay.valid, lay.data].into_iter().enumerate() {
            if taint[sink.idx()] != 0 {
                hits[k].push(t as u32);
            }
        }
        if record {
            history.push((vals.clone(), taint.clone()));
        }
        for (r, def) in c.regs().iter().enumerate() {
            state[r] = vals[def.next.idx()];
            st_taint[r] = taint[def.next.idx()];
        }
    }
    TaintRun { hits, history }
}

/// Walks the recorded taint back from `sink` at `cycle` to a secret.
fn taint_path(c: &Circuit, history: &[(Vec<u64>, Vec<u64>)], sink_name: &str, sink: NodeId, cycle: u32) -> Vec<String> {
    let mut names: BTreeMap<NodeId, &str> = BTreeMap::new();
    for (name, id) in c.names() {
        names.entry(*id).or_insert(name.as_str());
    }
    let mut path = vec![format!("{sink_name}@{cycle}")];
    let (mut n, mut t) = (sink, cycle as usize);
    let budget = c.nodes().len() * (history.len() + 1);
    for _ in 0..budget {
        let (vals, taint) = &history[t];
        let node = c.node(n);
        let label = |n: NodeId| names.get(&n).map(|s| format!("{s}@{t}"));
        match node.op {
            Op::Input(p) => {
                path.push(format!("{}@{t}", c.inputs()[p].name));
                break;
            }
            Op::Reg(r) => {
                path.push(format!("{}@{t}", c.regs()[r].name));
                if t == 0 {
                    break;
                }
                n = c.regs()[r].next;
                t -= 1;
            }
            op => {
                if let Some(l) = label(n) {
                    if path.last() != Some(&l) {
                        path.push(l);
                    }
                }
                let next = match op {
                    Op::Mux { sel, a, b } => {
                        if taint[sel.idx()] != 0 {
                            sel
                        } else if vals[sel.idx()] & 1 == 1 {
                            a
                        } else {
                            b
                        }
                    }
                    _ => match op.operands().into_iter().find(|o| taint[o.idx()] != 0) {
                        Some(o) => o,
                        None => break,
                    },
                };
                n = next;
            }
        }
    }
    path.reverse();
    path
}

/// Value-aware taint tracking: a mux with an untainted select propagates
/// only the arm it actually selects, so declassified ciphertexts behind a
/// true predicate stop the flow.
pub fn taint_check(v: &EnclaveVariant, use_declass: bool, horizon: Option<u32>) -> Result<LeakReport, IftError> {
    taint_check_with(
        v,
        &IftOptions {
            use_declass,
            horizon,
            ..IftOptions::default()
        },
    )
}

pub fn taint_check_with(v: &EnclaveVariant, opts: &IftOptions) -> Result<LeakReport, IftError> {
    let horizon = opts.horizon_for(v)?;
    let c = v.analysis_circuit(opts.use_declass)?;
    let lay = Layout::new(v, &c, opts.use_declass)?;
    let stims = stimuli(v, opts)?;
    let (inits, inits_exhaustive) = initial_states(v, opts);
    let mut verdicts = empty_verdicts(v);
    let mut runs = 0u64;
    for source in sources(v) {
        'search: for s0 in &inits {
            for stim in &stims {
                runs += 1;
                let run = taint_run(&c, &lay, s0, stim, source, horizon, false);
                let mut fresh = false;
                for (k, sink) in [Sink::Valid, Sink::Data].into_iter().enumerate() {
                    let verdict = verdicts
                        .iter_mut()
                        .find(|x| x.source == source && x.sink == sink)
                        .expect("verdict slot");
                    if verdict.class.is_none() && !run.hits[k].is_empty() {
                        fresh = true;
                        verdict.class = Some(match sink {
                            Sink::Valid => LeakClass::Timing,
                            Sink::Data => LeakClass::Functional,
                        });
                        verdict.witness_cycles = run.hits[k].clone();
                    }
                }
                if fresh {
                    let rec = taint_run(&c, &lay, s0, stim, source, horizon, true);
                    for sink in [Sink::Valid, Sink::Data] {
                        let verdict = verdicts
                            .iter_mut()
                            .find(|x| x.source == source && x.sink == sink)
                            .expect("verdict slot");
                        if verdict.class.is_some() && verdict.path.is_none() {
                            verdict.path = Some(taint_path(
                                &c,
                                &rec.history,
                                v.sinks.name(sink),
                                sink_node(&lay, sink),
                                verdict.witness_cycles[0],
                            ));
                        }
                    }
                }
                let all = verdicts
                    .iter()
                    .filter(|x| x.source == source)
                    .all(|x| x.class.is_some());
                if all {
                    break 'search;
                }
            }
        }
    }
    Ok(LeakReport {
        variant: v.name().to_string(),
        params: v.params,
        checker: Checker::Taint,
        declassify: opts.use_declass,
        horizon,
        mode: None,
        coverage: Coverage {
            initial_states: inits.len(),
            stimuli: stims.len(),
            runs,
            exhaustive: inits_exhaustive,
        },
        verdicts,
    })
}

// ------------------------------------------------------------ two-trace

struct Runner<'c> {
    lay: &'c Layout,
    sim: Simulator<'c>,
    inputs: Vec<u64>,
}

impl<'c> Runner<'c> {
    fn new(c: &'c Circuit, lay: &'c Layout) -> Self {
        Runner {
            lay,
            sim: Simulator::new(c),
            inputs: vec![0; lay.n_inputs],
        }
    }

    fn run(
        &mut self,
        s0: &[u64],
        stim: &Stimulus,
        assign: &[Vec<u64>],
        horizon: u32,
        valid: &mut Vec<u64>,
        data: &mut Vec<u64>,
    ) {
        valid.clear();
        data.clear();
        self.sim.reset(&self.lay.seed_state(s0, assign));
        for t in 0..horizon as usize {
            self.lay.fill_inputs(&mut self.inputs, stim, assign, t);
            self.sim.step(&self.inputs);
            valid.push(self.sim.value(self.lay.valid));
            data.push(self.sim.value(self.lay.data));
        }
    }
}

struct Candidate {
    class: LeakClass,
    cycles: Vec<u32>,
    s0: Vec<u64>,
    stim: Stimulus,
    a: Vec<Vec<u64>>,
    b: Vec<Vec<u64>>,
}

#[derive(Default)]
struct Found {
    valid: Option<Candidate>,
    data: Option<Candidate>,
}

impl Found {
    fn offer(
        &mut self,
        sink: Sink,
        class: LeakClass,
        cycles: Vec<u32>,
        pair: impl FnOnce() -> (Vec<u64>, Stimulus, Vec<Vec<u64>>, Vec<Vec<u64>>),
    ) {
        let slot = match sink {
            Sink::Valid => &mut self.valid,
            Sink::Data => &mut self.data,
        };
        let better = match slot {
            None => true,
            Some(c) => c.class == LeakClass::FunctionalTiming && class == LeakClass::Functional,
        };
        if better {
            let (s0, stim, a, b) = pair();
            *slot = Some(Candidate {
                class,
                cycles,
                s0,
                stim,
                a,
                b,
            });
        }
    }

    fn settled(&self) -> bool {
        self.valid.is_some() && matches!(&self.data, Some(c) if c.class == LeakClass::Functional)
    }
}

fn decode(lay: &Layout, dims: &[usize], mut code: u64, assign: &mut [Vec<u64>]) {
    for &d in dims {
        let w = lay.dims[d].width;
        assign[d] = vec![code & mask(w)];
        code = if w >= 64 { 0 } else { code >> w };
    }
}

fn compare(
    found: &mut Found,
    va: &[u64],
    da: &[u64],
    vb: &[u64],
    db: &[u64],
    pair: impl Fn() -> (Vec<u64>, Stimulus, Vec<Vec<u64>>, Vec<Vec<u64>>),
) {
    if let Some((class, cycles)) = classify(Sink::Valid, va, vb, INVALID_DEFAULT) {
        found.offer(Sink::Valid, class, cycles, &pair);
    }
    if let Some((class, cycles)) = classify(Sink::Data, da, db, INVALID_DEFAULT) {
        found.offer(Sink::Data, class, cycles, &pair);
    }
}

/// Two-trace product check with declassification on and the default
/// stimulus set.
pub fn two_trace_check(v: &EnclaveVariant, mode: TwoTraceMode, horizon: Option<u32>) -> Result<LeakReport, IftError> {
    two_trace_check_with(
        v,
        mode,
        &IftOptions {
            horizon,
            ..IftOptions::default()
        },
    )
}

pub fn two_trace_check_with(v: &EnclaveVariant, mode: TwoTraceMode, opts: &IftOptions) -> Result<LeakReport, IftError> {
    let horizon = opts.horizon_for(v)?;
    let c = v.analysis_circuit(opts.use_declass)?;
    let lay = Layout::new(v, &c, opts.use_declass)?;
    let mut runner = Runner::new(&c, &lay);
    let (mut va, mut da, mut vb, mut db) = (vec![], vec![], vec![], vec![]);
    let mut verdicts = empty_verdicts(v);
    let mut runs = 0u64;
    let mut exhaustive = true;
    let (n_inits, n_stims);
    let mut found: BTreeMap<Source, Found> = BTreeMap::new();

    match mode {
        TwoTraceMode::Exhaustive => {
            let stims = stimuli(v, opts)?;
            let (inits, inits_exhaustive) = initial_states(v, opts);
            exhaustive &= inits_exhaustive;
            n_inits = inits.len();
            n_stims = stims.len();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7777);
            let base: Vec<Vec<u64>> = lay
                .dims
                .iter()
                .map(|d| vec![rng.gen::<u64>() & mask(d.width)])
                .collect();
            for source in sources(v) {
                let dims = lay.dims_of(source);
                let bits: u32 = dims.iter().map(|&d| lay.dims[d].width).sum();
                let codes: Vec<u64> = if bits < 63 && (1u64 << bits) <= opts.secret_budget as u64 + 1 {
                    (0..1u64 << bits).collect()
                } else {
                    exhaustive = false;
                    let m = if bits >= 64 { u64::MAX } else { mask(bits) };
                    let mut r = ChaCha8Rng::seed_from_u64(opts.seed ^ u64::from(bits));
                    std::iter::once(0)
                        .chain((0..opts.secret_budget).map(|_| r.gen::<u64>() & m))
                        .collect()
                };
                let f = found.entry(source).or_default();
                let mut a = base.clone();
                decode(&lay, &dims, codes[0], &mut a);
                let mut b = base.clone();
                'search: for s0 in &inits {
                    for stim in &stims {
                        runner.run(s0, stim, &a, horizon, &mut va, &mut da);
                        runs += 1;
                        for &code in &codes[1..] {
                            decode(&lay, &dims, code, &mut b);
                            runner.run(s0, stim, &b, horizon, &mut vb, &mut db);
                            runs += 1;
                            compare(f, &va, &da, &vb, &db, || {
                                (s0.clone(), stim.clone(), a.clone(), b.clone())
                            });
                            if f.settled() {
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        TwoTraceMode::Random { trials, seed } => {
            exhaustive = false;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = if v.kind.is_cache() {
                initial_states(v, opts).0
            } else {
                vec![c.initial_state()]
            };
            n_inits = pool.len();
            n_stims = trials as usize;
            let per_cycle = |rng: &mut ChaCha8Rng, d: &Dim| -> Vec<u64> {
                match d.kind {
                    DimKind::Reg(_) => vec![rng.gen::<u64>() & mask(d.width)],
                    DimKind::Port(_) => (0..horizon).map(|_| rng.gen::<u64>() & mask(d.width)).collect(),
                }
            };
            for source in sources(v) {
                let f = found.entry(source).or_default();
                for _ in 0..trials {
                    let s0 = &pool[rng.gen_range(0..pool.len())];
                    let kind = StimulusKind::ALL[rng.gen_range(0..4)];
                    let stim = gen_stimulus(kind, &v.params, &lay.cf_widths, horizon, &mut rng);
                    let a: Vec<Vec<u64>> = lay.dims.iter().map(|d| per_cycle(&mut rng, d)).collect();
                    let mut b = a.clone();
                    for d in lay.dims_of(source) {
                        b[d] = per_cycle(&mut rng, &lay.dims[d]);
                    }
                    runner.run(s0, &stim, &a, horizon, &mut va, &mut da);
                    runner.run(s0, &stim, &b, horizon, &mut vb, &mut db);
                    runs += 2;
                    compare(f, &va, &da, &vb, &db, || {
                        (s0.clone(), stim.clone(), a.clone(), b.clone())
                    });
                    if f.settled() {
                        break;
                    }
                }
            }
        }
    }

    for (source, f) in found {
        for (sink, cand) in [(Sink::Valid, f.valid), (Sink::Data, f.data)] {
            let Some(cand) = cand else { continue };
            let verdict = verdicts
                .iter_mut()
                .find(|x| x.source == source && x.sink == sink)
                .expect("verdict slot");
            verdict.class = Some(cand.class);
            verdict.witness_cycles = cand.cycles.clone();
            verdict.witness = Some(witness(&c, &lay, sink, &cand, horizon)?);
        }
    }

    Ok(LeakReport {
        variant: v.name().to_string(),
        params: v.params,
        checker: Checker::TwoTrace,
        declassify: opts.use_declass,
        horizon,
        mode: Some(mode),
        coverage: Coverage {
            initial_states: n_inits,
            stimuli: n_stims,
            runs,
            exhaustive,
        },
        verdicts,
    })
}

fn witness(c: &Circuit, lay: &Layout, sink: Sink, cand: &Candidate, horizon: u32) -> Result<Witness, HwError> {
    let trace = |assign: &[Vec<u64>]| {
        let inputs: Vec<Vec<u64>> = (0..horizon as usize)
            .map(|t| {
                let mut i = vec![0; lay.n_inputs];
                lay.fill_inputs(&mut i, &cand.stim, assign, t);
                i
            })
            .collect();
        c.simulate_from(&lay.seed_state(&cand.s0, assign), &inputs)
    };
    let ta = trace(&cand.a)?;
    let tb = trace(&cand.b)?;
    let out = c
        .outputs()
        .iter()
        .position(|(_, n)| *n == sink_node(lay, sink))
        .expect("sink is an output");
    let col = |t: &Trace| t.outputs.iter().map(|o| o[out]).collect::<Vec<u64>>();
    let secrets = |assign: &[Vec<u64>]| {
        lay.dims
            .iter()
            .zip(assign)
            .map(|(d, vals)| SecretValue {
                name: d.name.clone(),
                values: vals.clone(),
            })
            .collect()
    };
    Ok(Witness {
        first_cycle: cand.cycles[0],
        initial_state: cand.s0.clone(),
        stimulus: cand.stim.kind,
        secrets_a: secrets(&cand.a),
        secrets_b: secrets(&cand.b),
        sink_a: col(&ta),
        sink_b: col(&tb),
        traces: Some(Box::new((ta, tb))),
    })
}
