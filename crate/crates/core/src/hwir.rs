//! Synchronous circuit IR: a finite state machine `(I, O, S, S0, N, F)`
//! expressed as a combinational node DAG over input ports and registers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{feistel_round, feistel_round_inverse};
use crate::lang::mask;

pub const MAX_WIDTH: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Const(u64),
    Input(usize),
    Reg(usize),
    Slice {
        a: NodeId,
        lo: u32,
    },
    Concat {
        hi: NodeId,
        lo: NodeId,
    },
    Not(NodeId),
    And(NodeId, NodeId),
    Or(NodeId, NodeId),
    Xor(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a % b`, or `a` when `b == 0`.
    Rem(NodeId, NodeId),
    Shl(NodeId, NodeId),
    Shr(NodeId, NodeId),
    Eq(NodeId, NodeId),
    Lt(NodeId, NodeId),
    /// `sel ? a : b`
    Mux {
        sel: NodeId,
        a: NodeId,
        b: NodeId,
    },
    /// One Feistel round of the block `data` under `key`.
    KeyedMix {
        round: u32,
        key: NodeId,
        data: NodeId,
    },
    /// Inverse of the matching `KeyedMix` round.
    KeyedMixInv {
        round: u32,
        key: NodeId,
        data: NodeId,
    },
}

impl Op {
    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Const(_) | Op::Input(_) | Op::Reg(_) => vec![],
            Op::Slice { a, .. } | Op::Not(a) => vec![a],
            Op::Concat { hi, lo } => vec![hi, lo],
            Op::And(a, b)
            | Op::Or(a, b)
            | Op::Xor(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Rem(a, b)
            | Op::Shl(a, b)
            | Op::Shr(a, b)
            | Op::Eq(a, b)
            | Op::Lt(a, b) => vec![a, b],
            Op::Mux { sel, a, b } => vec![sel, a, b],
            Op::KeyedMix { key, data, .. } | Op::KeyedMixInv { key, data, .. } => vec![key, data],
        }
    }

    fn map_operands(&mut self, mut f: impl FnMut(NodeId) -> NodeId) {
        match self {
            Op::Const(_) | Op::Input(_) | Op::Reg(_) => {}
            Op::Slice { a, .. } | Op::Not(a) => *a = f(*a),
            Op::Concat { hi, lo } => {
                *hi = f(*hi);
                *lo = f(*lo);
            }
            Op::And(a, b)
            | Op::Or(a, b)
            | Op::Xor(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Rem(a, b)
            | Op::Shl(a, b)
            | Op::Shr(a, b)
            | Op::Eq(a, b)
            | Op::Lt(a, b) => {
                *a = f(*a);
                *b = f(*b);
            }
            Op::Mux { sel, a, b } => {
                *sel = f(*sel);
                *a = f(*a);
                *b = f(*b);
            }
            Op::KeyedMix { key, data, .. } | Op::KeyedMixInv { key, data, .. } => {
                *key = f(*key);
                *data = f(*data);
            }
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Input(_) => "input",
            Op::Reg(_) => "reg",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Not(_) => "not",
            Op::And(..) => "and",
            Op::Or(..) => "or",
            Op::Xor(..) => "xor",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Rem(..) => "rem",
            Op::Shl(..) => "shl",
            Op::Shr(..) => "shr",
            Op::Eq(..) => "eq",
            Op::Lt(..) => "lt",
            Op::Mux { .. } => "mux",
            Op::KeyedMix { .. } => "keyed_mix",
            Op::KeyedMixInv { .. } => "keyed_mix_inv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub name: String,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegDef {
    pub name: String,
    pub width: u32,
    pub init: u64,
    /// The node reading this register's current value.
    pub read: NodeId,
    pub next: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HwError {
    #[error("node {node}: {msg}")]
    Width { node: NodeId, msg: String },
    #[error("node {node} refers to {operand}, which does not precede it")]
    Order { node: NodeId, operand: NodeId },
    #[error("register `{0}` has no next-state function")]
    MissingNext(String),
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
    #[error("name `{0}` is already in use")]
    DuplicateName(String),
    #[error("combinational cycle through {0}")]
    Cycle(NodeId),
    #[error("expected {expected} {what} values, got {found}")]
    Arity {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} `{name}` value {value:#x} exceeds {width} bits")]
    Value {
        what: &'static str,
        name: String,
        value: u64,
        width: u32,
    },
}

/// `S0`, `N` and `F` over a topologically ordered node list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    nodes: Vec<Node>,
    inputs: Vec<Port>,
    regs: Vec<RegDef>,
    outputs: Vec<(String, NodeId)>,
    names: BTreeMap<String, NodeId>,
}

impl Circuit {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.idx()]
    }

    pub fn inputs(&self) -> &[Port] {
        &self.inputs
    }

    pub fn regs(&self) -> &[RegDef] {
        &self.regs
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn names(&self) -> &BTreeMap<String, NodeId> {
        &self.names
    }

    pub fn signal(&self, name: &str) -> Result<NodeId, HwError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| HwError::UnknownSignal(name.to_string()))
    }

    pub fn input_index(&self, name: &str) -> Result<usize, HwError> {
        self.inputs
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| HwError::UnknownSignal(name.to_string()))
    }

    pub fn reg_index(&self, name: &str) -> Result<usize, HwError> {
        self.regs
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| HwError::UnknownSignal(name.to_string()))
    }

    pub fn output_index(&self, name: &str) -> Result<usize, HwError> {
        self.outputs
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| HwError::UnknownSignal(name.to_string()))
    }

    pub fn initial_state(&self) -> Vec<u64> {
        self.regs.iter().map(|r| r.init).collect()
    }

    /// Checks ordering, operand widths and register wiring.
    pub fn validate(&self) -> Result<(), HwError> {
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            for o in node.op.operands() {
                if o.idx() >= i {
                    return Err(HwError::Order { node: id, operand: o });
                }
            }
            check_node(&self.nodes, &self.inputs, &self.regs, node).map_err(|msg| HwError::Width { node: id, msg })?;
        }
        for r in &self.regs {
            if self.nodes[r.next.idx()].width != r.width {
                return Err(HwError::Width {
                    node: r.next,
                    msg: format!("next value of `{}` must be {} bits", r.name, r.width),
                });
            }
            if r.init & !mask(r.width) != 0 {
                return Err(HwError::Value {
                    what: "register init",
                    name: r.name.clone(),
                    value: r.init,
                    width: r.width,
                });
            }
        }
        Ok(())
    }

    /// `F(s, i)` and `N(s, i)` for one cycle.
    pub fn eval_cycle(&self, state: &[u64], inputs: &[u64]) -> Result<(Vec<u64>, Vec<u64>), HwError> {
        self.check_vector("state", state, self.regs.iter().map(|r| (&r.name, r.width)))?;
        self.check_vector("input", inputs, self.inputs.iter().map(|p| (&p.name, p.width)))?;
        let mut vals = vec![0; self.nodes.len()];
        self.eval_into(state, inputs, &mut vals);
        let next = self.regs.iter().map(|r| vals[r.next.idx()]).collect();
        let outs = self.outputs.iter().map(|(_, n)| vals[n.idx()]).collect();
        Ok((next, outs))
    }

    /// Named-port form of [`Circuit::eval_cycle`].
    pub fn eval_cycle_named(
        &self,
        state: &[u64],
        inputs: &BTreeMap<String, u64>,
    ) -> Result<(Vec<u64>, BTreeMap<String, u64>), HwError> {
        let ins = self
            .inputs
            .iter()
            .map(|p| {
                inputs
                    .get(&p.name)
                    .copied()
                    .ok_or_else(|| HwError::UnknownSignal(p.name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (next, outs) = self.eval_cycle(state, &ins)?;
        let named = self
            .outputs
            .iter()
            .zip(outs)
            .map(|((n, _), v)| (n.clone(), v))
            .collect();
        Ok((next, named))
    }

    fn check_vector<'a>(
        &self,
        what: &'static str,
        vals: &[u64],
        decl: impl ExactSizeIterator<Item = (&'a String, u32)>,
    ) -> Result<(), HwError> {
        if vals.len() != decl.len() {
            return Err(HwError::Arity {
                what,
                expected: decl.len(),
                found: vals.len(),
            });
        }
        for (&v, (name, w)) in vals.iter().zip(decl) {
            if v & !mask(w) != 0 {
                return Err(HwError::Value {
                    what,
                    name: name.clone(),
                    value: v,
                    width: w,
                });
            }
        }
        Ok(())
    }

    /// Evaluates every node; `vals` must have one slot per node.
    pub(crate) fn eval_into(&self, state: &[u64], inputs: &[u64], vals: &mut [u64]) {
        for (i, node) in self.nodes.iter().enumerate() {
            let v = |n: NodeId| vals[n.idx()];
            let w = node.width;
            let m = mask(w);
            let r = match node.op {
                Op::Const(c) => c,
                Op::Input(p) => inputs[p],
                Op::Reg(r) => state[r],
                Op::Slice { a, lo } => v(a) >> lo,
                Op::Concat { hi, lo } => (v(hi) << self.nodes[lo.idx()].width) | v(lo),
                Op::Not(a) => !v(a),
                Op::And(a, b) => v(a) & v(b),
                Op::Or(a, b) => v(a) | v(b),
                Op::Xor(a, b) => v(a) ^ v(b),
                Op::Add(a, b) => v(a).wrapping_add(v(b)),
                Op::Sub(a, b) => v(a).wrapping_sub(v(b)),
                Op::Mul(a, b) => v(a).wrapping_mul(v(b)),
                Op::Rem(a, b) => {
                    let d = v(b);
                    if d == 0 {
                        v(a)
                    } else {
                        v(a) % d
                    }
                }
                Op::Shl(a, b) => {
                    let s = v(b);
                    if s >= u64::from(w) {
                        0
                    } else {
                        v(a) << s
                    }
                }
                Op::Shr(a, b) => {
                    let s = v(b);
                    if s >= u64::from(self.nodes[a.idx()].width) {
                        0
                    } else {
                        v(a) >> s
                    }
                }
                Op::Eq(a, b) => u64::from(v(a) == v(b)),
                Op::Lt(a, b) => u64::from(v(a) < v(b)),
                Op::Mux { sel, a, b } => {
                    if v(sel) & 1 == 1 {
                        v(a)
                    } else {
                        v(b)
                    }
                }
                Op::KeyedMix { round, key, data } => feistel_round(v(key), round, v(data), w, left_bits(w, round)),
                Op::KeyedMixInv { round, key, data } => {
                    feistel_round_inverse(v(key), round, v(data), w, left_bits(w, round))
                }
            };
            vals[i] = r & m;
        }
    }

    /// Runs from `S0` over `input_trace`.
    pub fn simulate(&self, input_trace: &[Vec<u64>]) -> Result<Trace, HwError> {
        self.simulate_from(&self.initial_state(), input_trace)
    }

    pub fn simulate_from(&self, s0: &[u64], input_trace: &[Vec<u64>]) -> Result<Trace, HwError> {
        let mut trace = Trace::default();
        let mut state = s0.to_vec();
        for ins in input_trace {
            let (next, outs) = self.eval_cycle(&state, ins)?;
            trace.inputs.push(ins.clone());
            trace.states.push(std::mem::replace(&mut state, next));
            trace.outputs.push(outs);
        }
        Ok(trace)
    }

    /// Debug listing: ports, registers, then one node per line in
    /// topological order.
    pub fn dump(&self) -> String {
        let mut rev: HashMap<NodeId, Vec<&str>> = HashMap::new();
        for (name, &id) in &self.names {
            rev.entry(id).or_default().push(name);
        }
        let mut out = String::new();
        for p in &self.inputs {
            let _ = writeln!(out, "input {}: u{}", p.name, p.width);
        }
        for r in &self.regs {
            let _ = writeln!(out, "reg {}: u{} = {:#x} next {}", r.name, r.width, r.init, r.next);
        }
        for (name, id) in &self.outputs {
            let _ = writeln!(out, "output {name} = {id}");
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            let args = match node.op {
                Op::Const(c) => format!("{c:#x}"),
                Op::Input(p) => self.inputs[p].name.clone(),
                Op::Reg(r) => self.regs[r].name.clone(),
                Op::Slice { a, lo } => format!("{a} [{lo}+:{}]", node.width),
                Op::KeyedMix { round, key, data } | Op::KeyedMixInv { round, key, data } => {
                    format!("round={round} {key} {data}")
                }
                op => op
                    .operands()
                    .iter()
                    .map(|o| o.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            };
            let _ = write!(out, "{id}: u{} = {} {args}", node.width, node.op.mnemonic());
            if let Some(names) = rev.get(&id) {
                let _ = write!(out, "  # {}", names.join(", "));
            }
            out.push('\n');
        }
        out
    }

    /// The transitive fan-in of `roots`.
    pub fn cone(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = roots.to_vec();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n.idx()], true) {
                continue;
            }
            stack.extend(self.nodes[n.idx()].op.operands());
        }
        seen
    }

    /// Replaces every consumer reference to `from` (node operands, register
    /// next functions, outputs) with `to`, except inside `keep`.
    fn redirect(&mut self, from: NodeId, to: NodeId, keep: NodeId) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if i != keep.idx() {
                node.op.map_operands(|o| if o == from { to } else { o });
            }
        }
        for r in &mut self.regs {
            if r.next == from {
                r.next = to;
            }
        }
        for (_, o) in &mut self.outputs {
            if *o == from {
                *o = to;
            }
        }
    }

    fn push_node(&mut self, op: Op, width: u32) -> NodeId {
        self.nodes.push(Node { op, width });
        NodeId(self.nodes.len() as u32 - 1)
    }

    fn add_input(&mut self, name: &str, width: u32) -> Result<NodeId, HwError> {
        if self.names.contains_key(name) || self.inputs.iter().any(|p| p.name == name) {
            return Err(HwError::DuplicateName(name.to_string()));
        }
        self.inputs.push(Port {
            name: name.to_string(),
            width,
        });
        let id = self.push_node(Op::Input(self.inputs.len() - 1), width);
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Restores topological order after a rewrite (Kahn's algorithm,
    /// stable on the existing order).
    fn toposort(&mut self) -> Result<(), HwError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for o in node.op.operands() {
                indeg[i] += 1;
                users[o.idx()].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(HwError::Cycle(NodeId(stuck as u32)));
        }
        let mut new_id = vec![NodeId(0); n];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = NodeId(new as u32);
        }
        let mut nodes: Vec<Node> = order.iter().map(|&i| self.nodes[i]).collect();
        for node in &mut nodes {
            node.op.map_operands(|o| new_id[o.idx()]);
        }
        self.nodes = nodes;
        for r in &mut self.regs {
            r.read = new_id[r.read.idx()];
            r.next = new_id[r.next.idx()];
        }
        for (_, o) in &mut self.outputs {
            *o = new_id[o.idx()];
        }
        for id in self.names.values_mut() {
            *id = new_id[id.idx()];
        }
        Ok(())
    }
}

/// High-half width entering Feistel round `round` of a `w`-bit block.
pub fn left_bits(w: u32, round: u32) -> u32 {
    if round.is_multiple_of(2) {
        w.div_ceil(2)
    } else {
        w / 2
    }
}

fn expected_width(op: &Op, width: impl Fn(NodeId) -> u32, inputs: &[Port], regs: &[RegDef]) -> Result<u32, String> {
    let same = |a: NodeId, b: NodeId| {
        if width(a) == width(b) {
            Ok(width(a))
        } else {
            Err(format!("operand widths differ ({} vs {})", width(a), width(b)))
        }
    };
    match *op {
        Op::Const(_) => Err("constants carry their own width".into()),
        Op::Input(p) => inputs.get(p).map(|p| p.width).ok_or_else(|| "no such input".into()),
        Op::Reg(r) => regs.get(r).map(|r| r.width).ok_or_else(|| "no such register".into()),
        Op::Slice { a, lo } => {
            if lo < width(a) {
                Err("slice widths are declared".into())
            } else {
                Err(format!("slice offset {lo} outside {} bits", width(a)))
            }
        }
        Op::Concat { hi, lo } => Ok(width(hi) + width(lo)),
        Op::Not(a) => Ok(width(a)),
        Op::And(a, b)
        | Op::Or(a, b)
        | Op::Xor(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Rem(a, b) => same(a, b),
        Op::Shl(a, _) | Op::Shr(a, _) => Ok(width(a)),
        Op::Eq(a, b) | Op::Lt(a, b) => same(a, b).map(|_| 1),
        Op::Mux { sel, a, b } => {
            if width(sel) != 1 {
                Err("mux select must be 1 bit".into())
            } else {
                same(a, b)
            }
        }
        Op::KeyedMix { data, .. } | Op::KeyedMixInv { data, .. } => {
            if width(data) < 2 {
                Err("keyed mix needs a block of at least 2 bits".into())
            } else {
                Ok(width(data))
            }
        }
    }
}

/// Width check used by both the builder and `validate`; constants and
/// slices carry a declared width that only needs to fit.
fn check_node(nodes: &[Node], inputs: &[Port], regs: &[RegDef], node: &Node) -> Result<(), String> {
    if node.width == 0 || node.width > MAX_WIDTH {
        return Err(format!("width {} out of range", node.width));
    }
    match node.op {
        Op::Const(c) => {
            if c & !mask(node.width) != 0 {
                return Err(format!("constant {c:#x} exceeds {} bits", node.width));
            }
            Ok(())
        }
        Op::Slice { a, lo } => {
            if lo + node.width > nodes[a.idx()].width {
                return Err(format!(
                    "slice [{lo}+:{}] outside {} bits",
                    node.width,
                    nodes[a.idx()].width
                ));
            }
            Ok(())
        }
        op => {
            let w = expected_width(&op, |n| nodes[n.idx()].width, inputs, regs)?;
            if w != node.width {
                return Err(format!("declared {} bits, operands give {w}", node.width));
            }
            if w > MAX_WIDTH {
                return Err(format!("width {w} exceeds {MAX_WIDTH}"));
            }
            Ok(())
        }
    }
}

/// One cycle of input, state and output vectors for `n` cycles. `states[i]`
/// is the state the circuit was in during cycle `i`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub inputs: Vec<Vec<u64>>,
    pub states: Vec<Vec<u64>>,
    pub outputs: Vec<Vec<u64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Incremental builder; records the first width error and reports it from
/// [`CircuitBuilder::build`].
#[derive(Debug, Default)]
pub struct CircuitBuilder {
    c: Circuit,
    next: Vec<Option<NodeId>>,
    error: Option<HwError>,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn fail(&mut self, e: HwError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn push(&mut self, op: Op, width: u32) -> NodeId {
        let node = Node { op, width };
        let id = NodeId(self.c.nodes.len() as u32);
        if let Err(msg) = check_node(&self.c.nodes, &self.c.inputs, &self.c.regs, &node) {
            self.fail(HwError::Width { node: id, msg });
        }
        self.c.nodes.push(node);
        id
    }

    pub fn width(&self, n: NodeId) -> u32 {
        self.c.nodes[n.idx()].width
    }

    pub fn input(&mut self, name: &str, width: u32) -> NodeId {
        match self.c.add_input(name, width) {
            Ok(id) => {
                if let Err(msg) = check_node(&self.c.nodes, &self.c.inputs, &self.c.regs, &self.c.nodes[id.idx()]) {
                    self.fail(HwError::Width { node: id, msg });
                }
                id
            }
            Err(e) => {
                self.fail(e);
                self.constant(0, width.clamp(1, MAX_WIDTH))
            }
        }
    }

    /// Declares a register and returns the node reading its value.
    pub fn reg(&mut self, name: &str, width: u32, init: u64) -> NodeId {
        let read = NodeId(self.c.nodes.len() as u32);
        self.c.regs.push(RegDef {
            name: name.to_string(),
            width,
            init,
            read,
            next: read,
        });
        self.next.push(None);
        let id = self.push(Op::Reg(self.c.regs.len() - 1), width);
        self.name(name, id);
        id
    }

    pub fn set_next(&mut self, reg: NodeId, next: NodeId) {
        match self.c.nodes[reg.idx()].op {
            Op::Reg(r) => self.next[r] = Some(next),
            _ => self.fail(HwError::Width {
                node: reg,
                msg: "set_next on a non-register node".into(),
            }),
        }
    }

    pub fn name(&mut self, name: &str, n: NodeId) {
        if self.c.names.insert(name.to_string(), n).is_some() {
            self.fail(HwError::DuplicateName(name.to_string()));
        }
    }

    pub fn output(&mut self, name: &str, n: NodeId) {
        if self.c.outputs.iter().any(|(o, _)| o == name) {
            self.fail(HwError::DuplicateName(name.to_string()));
        }
        self.c.outputs.push((name.to_string(), n));
    }

    pub fn constant(&mut self, value: u64, width: u32) -> NodeId {
        self.push(Op::Const(value), width)
    }

    pub fn slice(&mut self, a: NodeId, lo: u32, width: u32) -> NodeId {
        self.push(Op::Slice { a, lo }, width)
    }

    pub fn bit(&mut self, a: NodeId, i: u32) -> NodeId {
        self.slice(a, i, 1)
    }

    pub fn concat(&mut self, hi: NodeId, lo: NodeId) -> NodeId {
        let w = self.width(hi) + self.width(lo);
        self.push(Op::Concat { hi, lo }, w)
    }

    /// Zero-extends (or truncates) `a` to `width`.
    pub fn resize(&mut self, a: NodeId, width: u32) -> NodeId {
        let w = self.width(a);
        match w.cmp(&width) {
            std::cmp::Ordering::Equal => a,
            std::cmp::Ordering::Greater => self.slice(a, 0, width),
            std::cmp::Ordering::Less => {
                let z = self.constant(0, width - w);
                self.concat(z, a)
            }
        }
    }

    fn unary(&mut self, f: fn(NodeId) -> Op, a: NodeId) -> NodeId {
        let w = self.width(a);
        self.push(f(a), w)
    }

    fn binary(&mut self, f: fn(NodeId, NodeId) -> Op, a: NodeId, b: NodeId) -> NodeId {
        let w = self.width(a);
        self.push(f(a, b), w)
    }

    pub fn not(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Not, a)
    }

    pub fn and(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::And, a, b)
    }

    pub fn or(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Or, a, b)
    }

    pub fn xor(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Xor, a, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b)
    }

    pub fn rem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Rem, a, b)
    }

    pub fn shl(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Shl, a, b)
    }

    pub fn shr(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Shr, a, b)
    }

    pub fn eq(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Eq(a, b), 1)
    }

    pub fn lt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Lt(a, b), 1)
    }

    pub fn eq_const(&mut self, a: NodeId, c: u64) -> NodeId {
        let w = self.width(a);
        let k = self.constant(c, w);
        self.eq(a, k)
    }

    pub fn mux(&mut self, sel: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let w = self.width(a);
        self.push(Op::Mux { sel, a, b }, w)
    }

    pub fn keyed_mix(&mut self, round: u32, key: NodeId, data: NodeId) -> NodeId {
        let w = self.width(data);
        self.push(Op::KeyedMix { round, key, data }, w)
    }

    pub fn keyed_mix_inv(&mut self, round: u32, key: NodeId, data: NodeId) -> NodeId {
        let w = self.width(data);
        self.push(Op::KeyedMixInv { round, key, data }, w)
    }

    pub fn build(mut self) -> Result<Circuit, HwError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        for (r, next) in self.c.regs.iter_mut().zip(&self.next) {
            r.next = next.ok_or_else(|| HwError::MissingNext(r.name.clone()))?;
        }
        self.c.validate()?;
        Ok(self.c)
    }
}

/// Ciphertext declassification point: consumers of `signal` see
/// `predicate ? free_input : signal`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclassPoint {
    pub signal: String,
    /// Name of a 1-bit node.
    pub predicate: String,
    pub free_input: String,
}

/// Returns `SE'` with `d.free_input` added as a port and every consumer of
/// `d.signal` rerouted through the predicate mux.
pub fn declassify(c: &Circuit, d: &DeclassPoint) -> Result<Circuit, HwError> {
    let sig = c.signal(&d.signal)?;
    let p = c.signal(&d.predicate)?;
    if c.node(p).width != 1 {
        return Err(HwError::Width {
            node: p,
            msg: format!("predicate `{}` must be 1 bit", d.predicate),
        });
    }
    let mut out = c.clone();
    let w = c.node(sig).width;
    let cf = out.add_input(&d.free_input, w)?;
    let m = out.push_node(Op::Mux { sel: p, a: cf, b: sig }, w);
    out.redirect(sig, m, m);
    out.toposort()?;
    out.validate()?;
    Ok(out)
}

/// Replaces every consumer of `signal` with a fresh input `port`; the
/// original node is left dangling.
pub fn inject(c: &Circuit, signal: &str, port: &str) -> Result<Circuit, HwError> {
    let sig = c.signal(signal)?;
    let mut out = c.clone();
    let w = c.node(sig).width;
    let inp = out.add_input(port, w)?;
    out.redirect(sig, inp, inp);
    out.toposort()?;
    out.validate()?;
    Ok(out)
}

/// Reusable simulation buffers for repeated runs of one circuit.
pub struct Simulator<'c> {
    circuit: &'c Circuit,
    vals: Vec<u64>,
    state: Vec<u64>,
}

impl<'c> Simulator<'c> {
    pub fn new(circuit: &'c Circuit) -> Self {
        Simulator {
            circuit,
            vals: vec![0; circuit.nodes.len()],
            state: circuit.initial_state(),
        }
    }

    pub fn reset(&mut self, s0: &[u64]) {
        self.state.copy_from_slice(s0);
    }

    pub fn state(&self) -> &[u64] {
        &self.state
    }

    /// Evaluates one cycle, then latches the next state.
    pub fn step(&mut self, inputs: &[u64]) {
        self.circuit.eval_into(&self.state, inputs, &mut self.vals);
        for (s, r) in self.state.iter_mut().zip(&self.circuit.regs) {
            *s = self.vals[r.next.idx()];
        }
    }

    /// Node values from the most recent [`Simulator::step`].
    pub fn value(&self, n: NodeId) -> u64 {
        self.vals[n.idx()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn passthrough() {
        let mut b = CircuitBuilder::new();
        let x = b.input("in", 4);
        b.output("out", x);
        let c = b.build().unwrap();
        for v in 0..16 {
            let (next, outs) = c.eval_cycle(&[], &[v]).unwrap();
            assert!(next.is_empty());
            assert_eq!(outs, vec![v]);
        }
    }

    fn toggler() -> Circuit {
        let mut b = CircuitBuilder::new();
        let r = b.reg("t", 1, 0);
        let one = b.constant(1, 1);
        let n = b.xor(r, one);
        b.set_next(r, n);
        b.output("q", r);
        b.build().unwrap()
    }

    #[test]
    fn one_bit_counter() {
        let c = toggler();
        let t = c.simulate(&vec![vec![]; 5]).unwrap();
        assert_eq!(t.states, vec![vec![0], vec![1], vec![0], vec![1], vec![0]]);
        assert_eq!(t.outputs.iter().map(|o| o[0]).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn zero_cycle_trace() {
        let t = toggler().simulate(&[]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn eval_errors() {
        let c = toggler();
        assert!(matches!(c.eval_cycle(&[], &[]), Err(HwError::Arity { .. })));
        assert!(matches!(c.eval_cycle(&[2], &[]), Err(HwError::Value { .. })));
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 2);
        b.output("o", x);
        let c = b.build().unwrap();
        assert!(matches!(c.eval_cycle(&[], &[]), Err(HwError::Arity { .. })));
        assert!(c.eval_cycle_named(&[], &BTreeMap::new()).is_err());
    }

    #[test]
    fn builder_errors() {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 2);
        let y = b.input("y", 3);
        let s = b.add(x, y);
        b.output("o", s);
        assert!(matches!(b.build(), Err(HwError::Width { .. })));

        let mut b = CircuitBuilder::new();
        b.reg("r", 2, 0);
        assert!(matches!(b.build(), Err(HwError::MissingNext(_))));

        let mut b = CircuitBuilder::new();
        let x = b.input("x", 2);
        let sel = b.input("s", 2);
        let m = b.mux(sel, x, x);
        b.output("o", m);
        assert!(b.build().is_err());

        let mut b = CircuitBuilder::new();
        b.input("x", 2);
        b.input("x", 2);
        assert!(matches!(b.build(), Err(HwError::DuplicateName(_))));
    }

    /// Ripple-carry adder built from gates.
    fn gate_adder(b: &mut CircuitBuilder, x: NodeId, y: NodeId, w: u32) -> NodeId {
        let mut carry = b.constant(0, 1);
        let mut sum: Option<NodeId> = None;
        for i in 0..w {
            let a = b.bit(x, i);
            let c = b.bit(y, i);
            let t = b.xor(a, c);
            let s = b.xor(t, carry);
            let g = b.and(a, c);
            let p = b.and(t, carry);
            carry = b.or(g, p);
            sum = Some(match sum {
                None => s,
                Some(prev) => b.concat(s, prev),
            });
        }
        sum.unwrap()
    }

    #[test]
    fn gate_adder_matches_add_node() {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 4);
        let y = b.input("y", 4);
        let g = gate_adder(&mut b, x, y, 4);
        let a = b.add(x, y);
        b.output("gates", g);
        b.output("add", a);
        let c = b.build().unwrap();
        for xv in 0..16 {
            for yv in 0..16 {
                let (_, o) = c.eval_cycle(&[], &[xv, yv]).unwrap();
                assert_eq!(o[0], o[1]);
                assert_eq!(o[1], (xv + yv) % 16);
            }
        }
    }

    /// Reference semantics in u128 arithmetic, written independently of
    /// `eval_into`.
    fn reference(op: &str, a: u128, b: u128, w: u32) -> u128 {
        let m = (1u128 << w) - 1;
        match op {
            "and" => a & b,
            "or" => a | b,
            "xor" => a ^ b,
            "add" => (a + b) & m,
            "sub" => (a + (1 << w) - b) & m,
            "mul" => (a * b) & m,
            "rem" => {
                if b == 0 {
                    a
                } else {
                    a % b
                }
            }
            "shl" => {
                if b >= u128::from(w) {
                    0
                } else {
                    (a << b) & m
                }
            }
            "shr" => {
                if b >= u128::from(w) {
                    0
                } else {
                    a >> b
                }
            }
            "eq" => u128::from(a == b),
            "lt" => u128::from(a < b),
            "not" => !a & m,
            _ => unreachable!(),
        }
    }

    type BinOp = fn(&mut CircuitBuilder, NodeId, NodeId) -> NodeId;

    #[test]
    fn node_semantics_match_reference_exhaustively() {
        let ops: [(&str, BinOp); 12] = [
            ("and", CircuitBuilder::and),
            ("or", CircuitBuilder::or),
            ("xor", CircuitBuilder::xor),
            ("add", CircuitBuilder::add),
            ("sub", CircuitBuilder::sub),
            ("mul", CircuitBuilder::mul),
            ("rem", CircuitBuilder::rem),
            ("shl", CircuitBuilder::shl),
            ("shr", CircuitBuilder::shr),
            ("eq", CircuitBuilder::eq),
            ("lt", CircuitBuilder::lt),
            ("not", |b, a, _| b.not(a)),
        ];
        for w in 1..=8u32 {
            let mut b = CircuitBuilder::new();
            let x = b.input("x", w);
            let y = b.input("y", w);
            for (name, f) in ops {
                let n = f(&mut b, x, y);
                b.output(name, n);
            }
            let c = b.build().unwrap();
            let step = if w <= 6 { 1 } else { 3 };
            for xv in (0..1u64 << w).step_by(step) {
                for yv in (0..1u64 << w).step_by(step) {
                    let (_, outs) = c.eval_cycle(&[], &[xv, yv]).unwrap();
                    for ((name, _), o) in ops.iter().zip(outs) {
                        assert_eq!(
                            u128::from(o),
                            reference(name, xv.into(), yv.into(), w),
                            "{name} w={w} {xv} {yv}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn slices_concat_mux() {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 8);
        let s = b.input("s", 1);
        let hi = b.slice(x, 4, 4);
        let lo = b.slice(x, 0, 4);
        let sw = b.concat(lo, hi);
        let m = b.mux(s, hi, lo);
        let z = b.resize(hi, 6);
        b.output("swap", sw);
        b.output("mux", m);
        b.output("z", z);
        let c = b.build().unwrap();
        let (_, o) = c.eval_cycle(&[], &[0xa5, 1]).unwrap();
        assert_eq!(o, vec![0x5a, 0xa, 0xa]);
        let (_, o) = c.eval_cycle(&[], &[0xa5, 0]).unwrap();
        assert_eq!(o[1], 0x5);
    }

    #[test]
    fn keyed_mix_matches_crypto() {
        use crate::crypto::{CryptoParams, Key};
        let params = CryptoParams::new(3, 2, 4).unwrap();
        let key = Key::from_seed(params, 42).unwrap();
        let mut b = CircuitBuilder::new();
        let k = b.input("k", 5);
        let mut x = b.input("m", 5);
        for r in 0..4 {
            x = b.keyed_mix(r, k, x);
        }
        b.output("c", x);
        let mut y = x;
        for r in (0..4).rev() {
            y = b.keyed_mix_inv(r, k, y);
        }
        b.output("back", y);
        let c = b.build().unwrap();
        for m in 0..32 {
            let (_, o) = c.eval_cycle(&[], &[key.material(), m]).unwrap();
            assert_eq!(o[0], params.prp_forward(&key, m).unwrap());
            assert_eq!(o[1], m);
        }
    }

    /// x -> reg a -> (a + 1) -> out, with a second consumer feeding reg b.
    fn small() -> Circuit {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 4);
        let p = b.input("p", 1);
        b.name("pred", p);
        let a = b.reg("a", 4, 0);
        let one = b.constant(1, 4);
        let inc = b.add(a, one);
        b.name("inc", inc);
        let acc = b.reg("acc", 4, 3);
        let sum = b.add(acc, inc);
        b.set_next(a, x);
        b.set_next(acc, sum);
        b.output("o", inc);
        b.output("acc", acc);
        b.build().unwrap()
    }

    #[test]
    fn declassify_reroutes_consumers() {
        let c = small();
        let d = declassify(
            &c,
            &DeclassPoint {
                signal: "inc".into(),
                predicate: "pred".into(),
                free_input: "cf".into(),
            },
        )
        .unwrap();
        assert_eq!(d.inputs().len(), 3);
        let cf = d.input_index("cf").unwrap();
        let mut ins = vec![0; 3];
        ins[d.input_index("x").unwrap()] = 5;
        ins[d.input_index("p").unwrap()] = 1;
        ins[cf] = 9;
        let (next, outs) = d.eval_cycle(&[2, 3], &ins).unwrap();
        assert_eq!(outs[0], 9);
        assert_eq!(next[1], 12);
        // original untouched
        assert_eq!(c.inputs().len(), 2);
        assert!(declassify(
            &c,
            &DeclassPoint {
                signal: "nope".into(),
                predicate: "pred".into(),
                free_input: "cf".into()
            }
        )
        .is_err());
    }

    #[test]
    fn declassify_cycle_is_an_error() {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", 1);
        let y = b.not(x);
        b.name("y", y);
        b.output("o", y);
        let c = b.build().unwrap();
        let e = declassify(
            &c,
            &DeclassPoint {
                signal: "x".into(),
                predicate: "y".into(),
                free_input: "cf".into(),
            },
        );
        assert!(matches!(e, Err(HwError::Cycle(_))));
    }

    #[test]
    fn inject_replaces_signal() {
        let c = small();
        let d = inject(&c, "inc", "secret").unwrap();
        let mut ins = vec![0; 3];
        ins[d.input_index("secret").unwrap()] = 7;
        let (_, outs) = d.eval_cycle(&[0, 0], &ins).unwrap();
        assert_eq!(outs[0], 7);
    }

    #[test]
    fn dump_lists_every_node() {
        let c = small();
        let text = c.dump();
        assert_eq!(text.lines().filter(|l| l.starts_with('n')).count(), c.nodes().len());
        assert!(text.contains("# inc"));
        assert!(text.contains("reg acc: u4 = 0x3"));
    }

    fn declass_small(c: &Circuit) -> Circuit {
        declassify(
            c,
            &DeclassPoint {
                signal: "inc".into(),
                predicate: "pred".into(),
                free_input: "cf".into(),
            },
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn declassify_with_predicate_false_is_identity(xs in prop::collection::vec(0u64..16, 0..20), cfs in prop::collection::vec(0u64..16, 20)) {
            let c = small();
            let d = declass_small(&c);
            let orig: Vec<Vec<u64>> = xs.iter().map(|&x| vec![x, 0]).collect();
            let t = c.simulate(&orig).unwrap();
            let mut ins = Vec::new();
            for (i, &x) in xs.iter().enumerate() {
                let mut v = vec![0; 3];
                v[d.input_index("x").unwrap()] = x;
                v[d.input_index("cf").unwrap()] = cfs[i];
                ins.push(v);
            }
            let td = d.simulate(&ins).unwrap();
            prop_assert_eq!(t.outputs, td.outputs);
            prop_assert_eq!(t.states, td.states);
        }

        #[test]
        fn declassify_substitution_identity(xs in prop::collection::vec((0u64..16, 0u64..2), 0..20)) {
            // drive cf with the original signal's value: behaviour unchanged
            let c = small();
            let d = declass_small(&c);
            let inc = c.signal("inc").unwrap();
            let mut sim = Simulator::new(&c);
            let mut dstate = d.initial_state();
            for &(x, p) in &xs {
                let before = sim.state().to_vec();
                sim.step(&[x, p]);
                let mut v = vec![0; 3];
                v[d.input_index("x").unwrap()] = x;
                v[d.input_index("p").unwrap()] = p;
                v[d.input_index("cf").unwrap()] = sim.value(inc);
                let (orig_next, orig_out) = c.eval_cycle(&before, &[x, p]).unwrap();
                let (next, out) = d.eval_cycle(&dstate, &v).unwrap();
                prop_assert_eq!(&out, &orig_out);
                prop_assert_eq!(&next, &orig_next);
                dstate = next;
            }
        }

        #[test]
        fn trace_relations_hold(xs in prop::collection::vec(0u64..16, 1..20)) {
            let c = small();
            let ins: Vec<Vec<u64>> = xs.iter().map(|&x| vec![x, 1]).collect();
            let t = c.simulate(&ins).unwrap();
            prop_assert_eq!(&t.states[0], &c.initial_state());
            for i in 0..t.len() {
                let (next, outs) = c.eval_cycle(&t.states[i], &t.inputs[i]).unwrap();
                prop_assert_eq!(&outs, &t.outputs[i]);
                if i + 1 < t.len() {
                    prop_assert_eq!(&next, &t.states[i + 1]);
                }
            }
            prop_assert_eq!(c.simulate(&ins).unwrap(), t);
        }
    }
}
