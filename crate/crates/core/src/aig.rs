// SPDX-License-Identifier: Apache-2.0

//! And-Inverter Graphs with signed fanin edges.
//!
//! Inversions are not nodes. A complemented AIGER literal becomes a fanin
//! (or output) with sign `-1`; a plain literal carries sign `+1`. Node ids
//! are dense: primary inputs first (in file order), then AND nodes in a
//! topological order, so every fanin refers to a smaller id.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type NodeId = usize;

/// Ratio used when a circuit has no inverted fanin edge.
pub const DEFAULT_RATIO_CEILING: f64 = 32.0;

/// Width of the kind-based node feature (`[1, 0]` input, `[0, 1]` AND).
pub const NODE_FEATURE_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Input,
    And,
}

/// A signed edge into a node. `sign` is `+1` for a plain connection and
/// `-1` for an inverted one; other values only appear in unvalidated graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fanin {
    pub source: NodeId,
    pub sign: i8,
}

impl Fanin {
    pub fn new(source: NodeId, inverted: bool) -> Self {
        Fanin {
            source,
            sign: if inverted { -1 } else { 1 },
        }
    }

    pub fn is_inverted(&self) -> bool {
        self.sign < 0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AigError {
    #[error("malformed AIGER header: {0}")]
    MalformedHeader(String),
    #[error("malformed AIGER body at line {line}: {msg}")]
    MalformedBody { line: usize, msg: String },
    #[error("binary AIGER (`aig`) is not supported; convert to ASCII `aag` first")]
    BinaryUnsupported,
    #[error("latches are not supported (header declares {0})")]
    LatchesUnsupported(usize),
    #[error("literal {literal} refers to an undefined variable")]
    DanglingLiteral { literal: u64 },
    #[error("combinational cycle through AIGER variable {variable}")]
    CycleDetected { variable: u64 },
    #[error("constant literal {literal} is not supported")]
    ConstantLiteralUnsupported { literal: u64 },
    #[error("circuit has no inverted fanin edge")]
    NoNotEdges,
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("invalid AIG: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A broken structural invariant, reported by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    FaninArity { node: NodeId, found: usize },
    SignDomain { node: NodeId, sign: i8 },
    ForwardReference { node: NodeId, source: NodeId },
    InputWithFanins { node: NodeId },
    OutputOutOfRange { index: usize, node: NodeId },
    OutputSignDomain { index: usize, sign: i8 },
    KindOrder { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FaninArity { node, found } => {
                write!(f, "fanin arity: node {node} has {found} fanins, expected 2")
            }
            Violation::SignDomain { node, sign } => {
                write!(f, "sign domain: node {node} has fanin sign {sign}")
            }
            Violation::ForwardReference { node, source } => {
                write!(f, "forward reference: node {node} reads node {source}")
            }
            Violation::InputWithFanins { node } => write!(f, "input node {node} has fanins"),
            Violation::OutputOutOfRange { index, node } => {
                write!(f, "output {index} references missing node {node}")
            }
            Violation::OutputSignDomain { index, sign } => {
                write!(f, "sign domain: output {index} has sign {sign}")
            }
            Violation::KindOrder { node } => {
                write!(f, "node {node}: inputs must precede AND nodes")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Aig {
    num_inputs: usize,
    /// Fanins of each AND node, indexed by `node - num_inputs`.
    ands: Vec<Vec<Fanin>>,
    outputs: Vec<Fanin>,
}

impl Aig {
    /// Builds a graph and checks every structural invariant.
    pub fn new(
        num_inputs: usize,
        ands: Vec<[Fanin; 2]>,
        outputs: Vec<Fanin>,
    ) -> Result<Self, AigError> {
        let aig = Self::from_raw_parts(
            num_inputs,
            ands.into_iter().map(|f| f.to_vec()).collect(),
            outputs,
        );
        let violations = validate(&aig);
        if violations.is_empty() {
            Ok(aig)
        } else {
            Err(AigError::Invalid(violations))
        }
    }

    /// Builds a graph without checking it. Use [`validate`] before relying
    /// on any invariant.
    pub fn from_raw_parts(num_inputs: usize, ands: Vec<Vec<Fanin>>, outputs: Vec<Fanin>) -> Self {
        Aig {
            num_inputs,
            ands,
            outputs,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn num_ands(&self) -> usize {
        self.ands.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_inputs + self.ands.len()
    }

    pub fn kind(&self, node: NodeId) -> NodeKind {
        if node < self.num_inputs {
            NodeKind::Input
        } else {
            NodeKind::And
        }
    }

    /// Fanins of `node`; empty for inputs.
    pub fn fanins(&self, node: NodeId) -> &[Fanin] {
        if node < self.num_inputs {
            &[]
        } else {
            &self.ands[node - self.num_inputs]
        }
    }

    pub fn outputs(&self) -> &[Fanin] {
        &self.outputs
    }

    /// Iterates `(target, fanin)` over every AND fanin edge in node order.
    pub fn fanin_edges(&self) -> impl Iterator<Item = (NodeId, Fanin)> + '_ {
        self.ands
            .iter()
            .enumerate()
            .flat_map(move |(k, fs)| fs.iter().map(move |f| (self.num_inputs + k, *f)))
    }

    pub fn levels(&self) -> Result<Vec<u32>, AigError> {
        topo_levels(self)
    }
}

/// Returns every structural violation; an empty list means the graph is valid.
pub fn validate(aig: &Aig) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = aig.num_nodes();
    for (k, fanins) in aig.ands.iter().enumerate() {
        let node = aig.num_inputs + k;
        if fanins.len() != 2 {
            out.push(Violation::FaninArity {
                node,
                found: fanins.len(),
            });
        }
        for f in fanins {
            if f.sign != 1 && f.sign != -1 {
                out.push(Violation::SignDomain { node, sign: f.sign });
            }
            if f.source >= node {
                out.push(Violation::ForwardReference {
                    node,
                    source: f.source,
                });
            }
        }
    }
    for (index, o) in aig.outputs.iter().enumerate() {
        if o.source >= n {
            out.push(Violation::OutputOutOfRange {
                index,
                node: o.source,
            });
        }
        if o.sign != 1 && o.sign != -1 {
            out.push(Violation::OutputSignDomain {
                index,
                sign: o.sign,
            });
        }
    }
    out
}

/// Logic depth of every node: inputs are 0, an AND is one more than its
/// deepest fanin.
pub fn topo_levels(aig: &Aig) -> Result<Vec<u32>, AigError> {
    let mut levels = vec![0u32; aig.num_nodes()];
    for node in aig.num_inputs..aig.num_nodes() {
        let mut deepest = 0;
        for f in aig.fanins(node) {
            if f.source >= node {
                return Err(AigError::CycleDetected {
                    variable: node as u64 + 1,
                });
            }
            deepest = deepest.max(levels[f.source]);
        }
        levels[node] = deepest + 1;
    }
    Ok(levels)
}

/// Counts `(positive, negative)` AND fanin edges. Output signs are excluded.
pub fn edge_sign_counts(aig: &Aig) -> (usize, usize) {
    aig.fanin_edges().fold((0, 0), |(p, n), (_, f)| {
        if f.sign < 0 {
            (p, n + 1)
        } else {
            (p + 1, n)
        }
    })
}

/// Ratio of plain to inverted fanin edges, before any self-loop augmentation.
pub fn gate_ratio(aig: &Aig) -> Result<f64, AigError> {
    match edge_sign_counts(aig) {
        (_, 0) => Err(AigError::NoNotEdges),
        (p, n) => Ok(p as f64 / n as f64),
    }
}

/// [`gate_ratio`] with the degenerate no-inversion case mapped to `ceiling`.
pub fn gate_ratio_or(aig: &Aig, ceiling: f64) -> f64 {
    gate_ratio(aig).unwrap_or(ceiling)
}

/// Model-ready view of one circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTensors {
    pub num_nodes: usize,
    /// Row-major `num_nodes x NODE_FEATURE_DIM`.
    pub features: Vec<f64>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_sign: Vec<f64>,
    pub gate_ratio: f64,
}

impl GraphTensors {
    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }
}

pub fn node_feature(kind: NodeKind) -> [f64; NODE_FEATURE_DIM] {
    match kind {
        NodeKind::Input => [1.0, 0.0],
        NodeKind::And => [0.0, 1.0],
    }
}

pub fn to_graph_tensors(aig: &Aig, add_self_loops: bool) -> GraphTensors {
    to_graph_tensors_with_ceiling(aig, add_self_loops, DEFAULT_RATIO_CEILING)
}

pub fn to_graph_tensors_with_ceiling(
    aig: &Aig,
    add_self_loops: bool,
    ratio_ceiling: f64,
) -> GraphTensors {
    let n = aig.num_nodes();
    let e = 2 * aig.num_ands() + if add_self_loops { n } else { 0 };
    let mut features = Vec::with_capacity(n * NODE_FEATURE_DIM);
    for v in 0..n {
        features.extend_from_slice(&node_feature(aig.kind(v)));
    }
    let mut edge_src = Vec::with_capacity(e);
    let mut edge_dst = Vec::with_capacity(e);
    let mut edge_sign = Vec::with_capacity(e);
    for (target, f) in aig.fanin_edges() {
        edge_src.push(f.source);
        edge_dst.push(target);
        edge_sign.push(f.sign as f64);
    }
    if add_self_loops {
        for v in 0..n {
            edge_src.push(v);
            edge_dst.push(v);
            edge_sign.push(1.0);
        }
    }
    GraphTensors {
        num_nodes: n,
        features,
        edge_src,
        edge_dst,
        edge_sign,
        gate_ratio: gate_ratio_or(aig, ratio_ceiling),
    }
}

/// Seeded random circuit: each AND reads two distinct, uniformly chosen
/// earlier nodes and inverts each fanin with probability `invert_prob`.
/// Outputs are the nodes without fanout, uninverted.
pub fn random_aig(
    seed: u64,
    n_inputs: usize,
    n_ands: usize,
    invert_prob: f64,
) -> Result<Aig, AigError> {
    if n_inputs == 0 {
        return Err(AigError::InvalidParams("n_inputs must be >= 1".into()));
    }
    if n_inputs < 2 && n_ands > 0 {
        return Err(AigError::InvalidParams(
            "AND nodes need two distinct earlier nodes; use n_inputs >= 2".into(),
        ));
    }
    if !(0.0..=1.0).contains(&invert_prob) {
        return Err(AigError::InvalidParams(format!(
            "invert_prob {invert_prob} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ands = Vec::with_capacity(n_ands);
    let mut has_fanout = vec![false; n_inputs + n_ands];
    for k in 0..n_ands {
        let avail = n_inputs + k;
        let a = rng.random_range(0..avail);
        let mut b = rng.random_range(0..avail - 1);
        if b >= a {
            b += 1;
        }
        has_fanout[a] = true;
        has_fanout[b] = true;
        let fa = Fanin::new(a, rng.random_bool(invert_prob));
        let fb = Fanin::new(b, rng.random_bool(invert_prob));
        ands.push(vec![fa, fb]);
    }
    let outputs = (0..n_inputs + n_ands)
        .filter(|&v| !has_fanout[v])
        .map(|v| Fanin::new(v, false))
        .collect();
    Ok(Aig::from_raw_parts(n_inputs, ands, outputs))
}

fn parse_header_field(tok: &str, name: &str) -> Result<usize, AigError> {
    tok.parse::<usize>()
        .map_err(|_| AigError::MalformedHeader(format!("field {name} is not a count: '{tok}'")))
}

fn parse_literal(tok: &str, line: usize) -> Result<u64, AigError> {
    tok.parse::<u64>().map_err(|_| AigError::MalformedBody {
        line,
        msg: format!("'{tok}' is not a literal"),
    })
}

fn reject_constant(lit: u64) -> Result<u64, AigError> {
    if lit < 2 {
        Err(AigError::ConstantLiteralUnsupported { literal: lit })
    } else {
        Ok(lit)
    }
}

/// Parses ASCII AIGER (`aag`). Symbol tables and comments are ignored.
pub fn parse_aag(text: &str) -> Result<Aig, AigError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .next()
        .ok_or_else(|| AigError::MalformedHeader("empty input".into()))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    match toks.first() {
        Some(&"aag") => {}
        Some(&"aig") => return Err(AigError::BinaryUnsupported),
        _ => return Err(AigError::MalformedHeader(format!("expected 'aag', got '{header}'"))),
    }
    // AIGER 1.9 may append B C J F counts; they must be zero here.
    if toks.len() < 6 {
        return Err(AigError::MalformedHeader(format!(
            "expected 'aag M I L O A', got '{header}'"
        )));
    }
    let m = parse_header_field(toks[1], "M")?;
    let i = parse_header_field(toks[2], "I")?;
    let l = parse_header_field(toks[3], "L")?;
    let o = parse_header_field(toks[4], "O")?;
    let a = parse_header_field(toks[5], "A")?;
    for (k, extra) in toks[6..].iter().enumerate() {
        if parse_header_field(extra, "BCJF")? != 0 {
            return Err(AigError::MalformedHeader(format!(
                "extended header field {} is nonzero",
                k + 6
            )));
        }
    }
    if l != 0 {
        return Err(AigError::LatchesUnsupported(l));
    }
    if m < i + a {
        return Err(AigError::MalformedHeader(format!(
            "M = {m} is smaller than I + L + A = {}",
            i + a
        )));
    }

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut next_line = |what: &str| {
        body.next().ok_or_else(|| AigError::MalformedBody {
            line: 0,
            msg: format!("unexpected end of input while reading {what}"),
        })
    };

    // variable index -> definition
    let mut input_of_var: HashMap<u64, usize> = HashMap::new();
    let mut input_vars = Vec::with_capacity(i);
    for _ in 0..i {
        let (ln, line) = next_line("inputs")?;
        let lit = reject_constant(parse_literal(line, ln)?)?;
        if lit & 1 == 1 || lit / 2 > m as u64 {
            return Err(AigError::MalformedBody {
                line: ln,
                msg: format!("input literal {lit} must be an even literal <= 2M"),
            });
        }
        if input_of_var.insert(lit / 2, input_vars.len()).is_some() {
            return Err(AigError::MalformedBody {
                line: ln,
                msg: format!("variable {} defined twice", lit / 2),
            });
        }
        input_vars.push(lit / 2);
    }
    let mut output_lits = Vec::with_capacity(o);
    for _ in 0..o {
        let (ln, line) = next_line("outputs")?;
        output_lits.push(reject_constant(parse_literal(line, ln)?)?);
    }
    let mut and_of_var: HashMap<u64, usize> = HashMap::new();
    let mut and_defs: Vec<(u64, [u64; 2])> = Vec::with_capacity(a);
    for _ in 0..a {
        let (ln, line) = next_line("AND gates")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(AigError::MalformedBody {
                line: ln,
                msg: format!("expected 'lhs rhs0 rhs1', got '{line}'"),
            });
        }
        let lhs = reject_constant(parse_literal(toks[0], ln)?)?;
        let r0 = reject_constant(parse_literal(toks[1], ln)?)?;
        let r1 = reject_constant(parse_literal(toks[2], ln)?)?;
        if lhs & 1 == 1 || lhs / 2 > m as u64 {
            return Err(AigError::MalformedBody {
                line: ln,
                msg: format!("AND lhs {lhs} must be an even literal <= 2M"),
            });
        }
        let var = lhs / 2;
        if input_of_var.contains_key(&var) || and_of_var.insert(var, and_defs.len()).is_some() {
            return Err(AigError::MalformedBody {
                line: ln,
                msg: format!("variable {var} defined twice"),
            });
        }
        and_defs.push((var, [r0, r1]));
    }

    for &(_, rhs) in &and_defs {
        for lit in rhs {
            let v = lit / 2;
            if !input_of_var.contains_key(&v) && !and_of_var.contains_key(&v) {
                return Err(AigError::DanglingLiteral { literal: lit });
            }
        }
    }
    for &lit in &output_lits {
        let v = lit / 2;
        if !input_of_var.contains_key(&v) && !and_of_var.contains_key(&v) {
            return Err(AigError::DanglingLiteral { literal: lit });
        }
    }

    // Topological order of AND gates; file order is kept when it is already
    // topological.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; and_defs.len()];
    let mut order: Vec<usize> = Vec::with_capacity(and_defs.len());
    for root in 0..and_defs.len() {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        while let Some(&mut (gate, ref mut child)) = stack.last_mut() {
            if *child == 2 {
                mark[gate] = Mark::Done;
                order.push(gate);
                stack.pop();
                continue;
            }
            let lit = and_defs[gate].1[*child];
            *child += 1;
            if let Some(&dep) = and_of_var.get(&(lit / 2)) {
                match mark[dep] {
                    Mark::New => {
                        mark[dep] = Mark::Active;
                        stack.push((dep, 0));
                    }
                    Mark::Active => {
                        return Err(AigError::CycleDetected { variable: lit / 2 });
                    }
                    Mark::Done => {}
                }
            }
        }
    }

    let mut node_of_var: HashMap<u64, NodeId> = HashMap::with_capacity(i + a);
    for (k, &v) in input_vars.iter().enumerate() {
        node_of_var.insert(v, k);
    }
    for (pos, &gate) in order.iter().enumerate() {
        node_of_var.insert(and_defs[gate].0, i + pos);
    }
    let to_fanin = |lit: u64| Fanin::new(node_of_var[&(lit / 2)], lit & 1 == 1);
    let ands = order
        .iter()
        .map(|&gate| and_defs[gate].1.iter().map(|&l| to_fanin(l)).collect())
        .collect();
    let outputs = output_lits.iter().map(|&l| to_fanin(l)).collect();
    let aig = Aig::from_raw_parts(i, ands, outputs);
    debug_assert!(validate(&aig).is_empty());
    Ok(aig)
}

/// Writes canonical ASCII AIGER: node `k` becomes variable `k + 1`.
pub fn serialize_aag(aig: &Aig) -> String {
    use std::fmt::Write;
    let lit = |f: &Fanin| 2 * (f.source as u64 + 1) + u64::from(f.is_inverted());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "aag {} {} 0 {} {}",
        aig.num_nodes(),
        aig.num_inputs(),
        aig.outputs().len(),
        aig.num_ands()
    );
    for k in 0..aig.num_inputs() {
        let _ = writeln!(s, "{}", 2 * (k + 1));
    }
    for o in aig.outputs() {
        let _ = writeln!(s, "{}", lit(o));
    }
    for node in aig.num_inputs()..aig.num_nodes() {
        let _ = write!(s, "{}", 2 * (node + 1));
        for f in aig.fanins(node) {
            let _ = write!(s, " {}", lit(f));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_and() -> Aig {
        parse_aag("aag 3 2 0 1 1\n2\n4\n6\n6 2 4\n").unwrap()
    }

    #[test]
    fn parses_passthrough() {
        let aig = parse_aag("aag 1 1 0 1 0\n2\n2\n").unwrap();
        assert_eq!(aig.num_inputs(), 1);
        assert_eq!(aig.num_ands(), 0);
        assert_eq!(aig.outputs(), &[Fanin { source: 0, sign: 1 }]);
        assert_eq!(aig.levels().unwrap(), vec![0]);
    }

    #[test]
    fn parses_single_and() {
        let aig = single_and();
        assert_eq!(aig.num_ands(), 1);
        assert_eq!(aig.fanins(2), &[Fanin::new(0, false), Fanin::new(1, false)]);
        assert_eq!(aig.levels().unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn parses_inverted_literals() {
        let aig = parse_aag("aag 3 2 0 1 1\n2\n4\n7\n6 3 4\n").unwrap();
        let signs: Vec<i8> = aig.fanins(2).iter().map(|f| f.sign).collect();
        assert_eq!(signs, vec![-1, 1]);
        assert_eq!(aig.outputs()[0].sign, -1);
        assert_eq!(aig.outputs()[0].source, 2);
    }

    #[test]
    fn ignores_symbols_and_comments() {
        let text = "aag 3 2 0 1 1\n2\n4\n6\n6 2 4\ni0 a\ni1 b\no0 y\nc\nanything goes\n";
        assert_eq!(parse_aag(text).unwrap(), single_and());
    }

    #[test]
    fn reorders_out_of_order_gates() {
        // gate 8 is listed before the gate 6 it reads
        let aig = parse_aag("aag 4 2 0 1 2\n2\n4\n8\n8 6 2\n6 2 5\n").unwrap();
        assert!(validate(&aig).is_empty());
        assert_eq!(aig.fanins(2), &[Fanin::new(0, false), Fanin::new(1, true)]);
        assert_eq!(aig.fanins(3), &[Fanin::new(2, false), Fanin::new(0, false)]);
        assert_eq!(aig.outputs(), &[Fanin::new(3, false)]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_aag(""), Err(AigError::MalformedHeader(_))));
        assert!(matches!(parse_aag("aag 1 1 0\n"), Err(AigError::MalformedHeader(_))));
        assert!(matches!(parse_aag("aig 3 2 0 1 1\n"), Err(AigError::BinaryUnsupported)));
        assert!(matches!(
            parse_aag("aag 2 1 1 0 0\n2\n4 2\n"),
            Err(AigError::LatchesUnsupported(1))
        ));
        assert!(matches!(
            parse_aag("aag 3 2 0 1 1\n2\n4\n6\n6 2 8\n"),
            Err(AigError::DanglingLiteral { literal: 8 })
        ));
        assert!(matches!(
            parse_aag("aag 3 1 0 1 2\n2\n4\n4 6 2\n6 4 2\n"),
            Err(AigError::CycleDetected { .. })
        ));
        assert!(matches!(
            parse_aag("aag 2 1 0 1 1\n2\n4\n4 2 1\n"),
            Err(AigError::ConstantLiteralUnsupported { literal: 1 })
        ));
        assert!(matches!(
            parse_aag("aag 1 1 0 1 0\n2\n0\n"),
            Err(AigError::ConstantLiteralUnsupported { literal: 0 })
        ));
        assert!(matches!(
            parse_aag("aag 3 2 0 1 1\n2\n4\n6\n"),
            Err(AigError::MalformedBody { .. })
        ));
    }

    #[test]
    fn validate_reports_violations() {
        assert!(validate(&single_and()).is_empty());
        let arity = Aig::from_raw_parts(2, vec![vec![Fanin::new(0, false)]], vec![]);
        let v = validate(&arity);
        assert_eq!(v, vec![Violation::FaninArity { node: 2, found: 1 }]);
        assert!(v[0].to_string().starts_with("fanin arity"));

        let sign = Aig::from_raw_parts(
            2,
            vec![vec![Fanin { source: 0, sign: 0 }, Fanin::new(1, false)]],
            vec![],
        );
        let v = validate(&sign);
        assert_eq!(v, vec![Violation::SignDomain { node: 2, sign: 0 }]);
        assert!(v[0].to_string().starts_with("sign domain"));

        let fwd = Aig::from_raw_parts(2, vec![vec![Fanin::new(2, false), Fanin::new(1, false)]], vec![]);
        assert_eq!(validate(&fwd), vec![Violation::ForwardReference { node: 2, source: 2 }]);
        assert!(matches!(topo_levels(&fwd), Err(AigError::CycleDetected { .. })));
    }

    #[test]
    fn and_chain_depth() {
        // ((a & b) & c) & d
        let ands = vec![
            [Fanin::new(0, false), Fanin::new(1, false)],
            [Fanin::new(4, false), Fanin::new(2, false)],
            [Fanin::new(5, false), Fanin::new(3, true)],
        ];
        let aig = Aig::new(4, ands, vec![Fanin::new(6, false)]).unwrap();
        let levels = aig.levels().unwrap();
        assert_eq!(levels, vec![0, 0, 0, 0, 1, 2, 3]);
        assert_eq!(levels.iter().max(), Some(&3));
    }

    #[test]
    fn gate_ratio_counts_edges() {
        // 4 positive, 2 negative fanin edges; the inverted output is ignored
        let ands = vec![
            [Fanin::new(0, false), Fanin::new(1, true)],
            [Fanin::new(0, false), Fanin::new(2, false)],
            [Fanin::new(3, true), Fanin::new(4, false)],
        ];
        let aig = Aig::new(3, ands, vec![Fanin::new(5, true)]).unwrap();
        assert_eq!(gate_ratio(&aig).unwrap(), 2.0);

        let contradiction =
            Aig::new(1, vec![[Fanin::new(0, false), Fanin::new(0, true)]], vec![]).unwrap();
        assert_eq!(gate_ratio(&contradiction).unwrap(), 1.0);

        assert_eq!(gate_ratio(&single_and()), Err(AigError::NoNotEdges));
        assert_eq!(gate_ratio_or(&single_and(), DEFAULT_RATIO_CEILING), 32.0);
    }

    #[test]
    fn graph_tensors_layout() {
        let aig = single_and();
        let t = to_graph_tensors(&aig, false);
        assert_eq!(t.num_edges(), 2);
        assert_eq!(t.edge_dst, vec![2, 2]);
        let t = to_graph_tensors(&aig, true);
        assert_eq!(t.num_edges(), 5);
        assert_eq!(&t.edge_sign[2..], &[1.0, 1.0, 1.0]);
        assert_eq!(&t.edge_src[2..], &[0, 1, 2]);
        assert_eq!(&t.edge_dst[2..], &[0, 1, 2]);
        assert_eq!(t.features[0..2], t.features[2..4]);
        assert_ne!(t.features[0..2], t.features[4..6]);
    }

    #[test]
    fn random_aig_edge_cases() {
        let aig = random_aig(7, 2, 0, 0.5).unwrap();
        assert_eq!((aig.num_inputs(), aig.num_ands()), (2, 0));
        assert_eq!(
            serialize_aag(&random_aig(7, 4, 50, 0.3).unwrap()),
            serialize_aag(&random_aig(7, 4, 50, 0.3).unwrap())
        );
        assert!(random_aig(1, 0, 0, 0.5).is_err());
        assert!(random_aig(1, 1, 3, 0.5).is_err());
        assert!(random_aig(1, 3, 3, 1.5).is_err());
    }

    #[test]
    fn random_aig_invert_fraction() {
        // 100 edges at p = 0.3: sd = sqrt(100 * 0.3 * 0.7) = 4.58, so
        // [15, 45] is a +-3.3 sd window.
        let aig = random_aig(7, 4, 50, 0.3).unwrap();
        let (_, neg) = edge_sign_counts(&aig);
        let frac = neg as f64 / 100.0;
        assert!((0.15..=0.45).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn serialize_is_canonical() {
        let text = "aag 3 2 0 1 1\n2\n4\n7\n6 3 4\n";
        let aig = parse_aag(text).unwrap();
        assert_eq!(serialize_aag(&aig), text);
    }
}
