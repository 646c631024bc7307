//! Search space definition: operator vocabulary, skip topology, architecture
//! vectors and their text/JSON encodings.
//!
//! Nodes are numbered from 1 in edge labels and from 0 in `ops` storage. A
//! candidate skip edge `(t, j)` connects node `t` into node `j` for every
//! `t <= j - 2`; edges are ordered by `j`, then `t`, which is also the order in
//! which the controller makes its skip decisions.

use std::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    pub parametric: bool,
}

impl Operator {
    pub fn new(name: impl Into<String>, parametric: bool) -> Self {
        Self {
            name: name.into(),
            parametric,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("operator vocabulary needs at least 2 entries, got {0}")]
    VocabularyTooSmall(usize),
    #[error("duplicate operator name `{0}`")]
    DuplicateOperator(String),
    #[error("n_nodes must be at least 1")]
    NoNodes,
    #[error("frozen skip mask has {found} bits but the topology has {expected} candidate edges")]
    FrozenMaskLength { expected: usize, found: usize },
    #[error("invalid frozen skip mask: {0}")]
    FrozenMaskEncoding(String),
}

/// Ordered, non-empty list of operator candidates shared by every node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct OperatorVocabulary {
    entries: Vec<Operator>,
}

impl OperatorVocabulary {
    pub fn new(entries: Vec<Operator>) -> Result<Self, SpaceError> {
        if entries.len() < 2 {
            return Err(SpaceError::VocabularyTooSmall(entries.len()));
        }
        for (i, op) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == op.name) {
                return Err(SpaceError::DuplicateOperator(op.name.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// The six-candidate vocabulary: four convolutions and two pooling ops.
    pub fn standard() -> Self {
        Self::new(vec![
            Operator::new("conv3x3", true),
            Operator::new("conv5x5", true),
            Operator::new("depthwise3x3", true),
            Operator::new("depthwise5x5", true),
            Operator::new("max3x3", false),
            Operator::new("avg3x3", false),
        ])
        .expect("preset vocabulary is valid")
    }

    /// Four-candidate subset for bases built only from 3x3 convolutions: no
    /// candidate has more parameters than the base operator. Indices 0..4 are
    /// conv3x3, depthwise3x3, max3x3, avg3x3.
    pub fn compact() -> Self {
        Self::new(vec![
            Operator::new("conv3x3", true),
            Operator::new("depthwise3x3", true),
            Operator::new("max3x3", false),
            Operator::new("avg3x3", false),
        ])
        .expect("preset vocabulary is valid")
    }

    /// `k` anonymous operators `op0..op{k-1}`; the first half is parametric.
    pub fn anonymous(k: usize) -> Result<Self, SpaceError> {
        Self::new(
            (0..k)
                .map(|i| Operator::new(format!("op{i}"), i < k.div_ceil(2)))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Operator> {
        self.entries.get(index)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Operator> {
        self.entries.iter()
    }
}

impl<'de> Deserialize<'de> for OperatorVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Preset(String),
            Entries(Vec<Operator>),
        }
        match Raw::deserialize(d)? {
            Raw::Preset(name) => match name.as_str() {
                "standard" => Ok(Self::standard()),
                "compact" => Ok(Self::compact()),
                other => Err(D::Error::custom(format!(
                    "unknown operator preset `{other}` (expected `standard` or `compact`)"
                ))),
            },
            Raw::Entries(entries) => Self::new(entries).map_err(D::Error::custom),
        }
    }
}

/// A candidate skip edge from node `t` into node `j` (both 1-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub t: usize,
    pub j: usize,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.t, self.j)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipTopology {
    n_nodes: usize,
    edges: Vec<Edge>,
}

/// Builds the full candidate edge list for `n_nodes` nodes.
pub fn candidate_edges(n_nodes: usize) -> SkipTopology {
    let edges = (3..=n_nodes)
        .flat_map(|j| (1..=j - 2).map(move |t| Edge { t, j }))
        .collect();
    SkipTopology { n_nodes, edges }
}

impl SkipTopology {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Position of the first edge into node `j` (1-indexed) in canonical order.
    pub fn first_edge_into(&self, j: usize) -> usize {
        if j < 3 {
            0
        } else {
            (j - 2) * (j - 3) / 2
        }
    }

    /// Canonical positions of the edges entering node `j` (1-indexed).
    pub fn edges_into(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.first_edge_into(j);
        start..start + j.saturating_sub(2)
    }

    pub fn position(&self, edge: Edge) -> Option<usize> {
        (edge.j <= self.n_nodes && edge.j >= 3 && edge.t >= 1 && edge.t <= edge.j - 2)
            .then(|| self.first_edge_into(edge.j) + edge.t - 1)
    }
}

/// Bitset over candidate edges, indexed by canonical edge position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SkipMask {
    bits: Vec<bool>,
}

impl SkipMask {
    pub fn empty(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, position: usize) -> bool {
        self.bits.get(position).copied().unwrap_or(false)
    }

    pub fn set(&mut self, position: usize, value: bool) {
        self.bits[position] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of set bits; 0 for an empty mask.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.bits.len() as f64
        }
    }

    /// Packs bit `i` into byte `i / 8`, least significant bit first, and
    /// hex-encodes the bytes.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        hex::encode(bytes)
    }

    /// Inverse of [`SkipMask::to_hex`] for a mask of `len` bits. Padding bits
    /// in the final byte must be zero.
    pub fn from_hex(text: &str, len: usize) -> Result<Self, SpaceError> {
        let bytes =
            hex::decode(text.trim()).map_err(|e| SpaceError::FrozenMaskEncoding(e.to_string()))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(SpaceError::FrozenMaskLength {
                expected: len,
                found: bytes.len() * 8,
            });
        }
        let mask = Self {
            bits: (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect(),
        };
        if mask.to_hex() != text.trim().to_ascii_lowercase() {
            return Err(SpaceError::FrozenMaskEncoding(
                "bits set beyond the last candidate edge".into(),
            ));
        }
        Ok(mask)
    }

    /// Identity-skip chain: every node receives the output of the node two
    /// steps back, `(j-2, j)` for all `j >= 3`. Mimics residual structure.
    pub fn residual_chain(topology: &SkipTopology) -> Self {
        Self {
            bits: topology.edges().iter().map(|e| e.t + 2 == e.j).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpaceSpec {
    vocab: OperatorVocabulary,
    topology: SkipTopology,
    frozen_skips: Option<SkipMask>,
}

impl SearchSpaceSpec {
    pub fn new(
        n_nodes: usize,
        vocab: OperatorVocabulary,
        frozen_skips: Option<SkipMask>,
    ) -> Result<Self, SpaceError> {
        if n_nodes == 0 {
            return Err(SpaceError::NoNodes);
        }
        let topology = candidate_edges(n_nodes);
        if let Some(mask) = &frozen_skips {
            if mask.len() != topology.edge_count() {
                return Err(SpaceError::FrozenMaskLength {
                    expected: topology.edge_count(),
                    found: mask.len(),
                });
            }
        }
        Ok(Self {
            vocab,
            topology,
            frozen_skips,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes
    }

    pub fn n_ops(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &OperatorVocabulary {
        &self.vocab
    }

    pub fn topology(&self) -> &SkipTopology {
        &self.topology
    }

    pub fn frozen_skips(&self) -> Option<&SkipMask> {
        self.frozen_skips.as_ref()
    }

    /// Same vocabulary and nodes with a different (or no) frozen mask.
    pub fn with_frozen_skips(&self, frozen: Option<SkipMask>) -> Result<Self, SpaceError> {
        Self::new(self.n_nodes(), self.vocab.clone(), frozen)
    }

    /// Exact sizes of the operator space (`K^n`) and skip space
    /// (`2^edges`, or 1 when skips are frozen).
    pub fn cardinality(&self) -> (BigUint, BigUint) {
        let ops = BigUint::from(self.n_ops()).pow(self.n_nodes() as u32);
        let skips = if self.frozen_skips.is_some() {
            BigUint::from(1u32)
        } else {
            BigUint::from(1u32) << self.topology.edge_count()
        };
        (ops, skips)
    }
}

/// Free-function form of [`SearchSpaceSpec::cardinality`].
pub fn cardinality(spec: &SearchSpaceSpec) -> (BigUint, BigUint) {
    spec.cardinality()
}

#[derive(Serialize, Deserialize)]
struct SpaceSpecJson {
    n_nodes: usize,
    operators: OperatorVocabulary,
    #[serde(default)]
    frozen_skips: Option<String>,
}

impl Serialize for SearchSpaceSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SpaceSpecJson {
            n_nodes: self.n_nodes(),
            operators: self.vocab.clone(),
            frozen_skips: self.frozen_skips.as_ref().map(SkipMask::to_hex),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SearchSpaceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = SpaceSpecJson::deserialize(d)?;
        let edges = candidate_edges(raw.n_nodes).edge_count();
        let frozen = raw
            .frozen_skips
            .map(|h| SkipMask::from_hex(&h, edges))
            .transpose()
            .map_err(D::Error::custom)?;
        Self::new(raw.n_nodes, raw.operators, frozen).map_err(D::Error::custom)
    }
}

/// One architecture: an operator index per node plus the skip bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchitectureVector {
    pub ops: Vec<usize>,
    pub skips: SkipMask,
}

impl ArchitectureVector {
    pub fn new(ops: Vec<usize>, skips: SkipMask) -> Self {
        Self { ops, skips }
    }

    /// Bytes identifying the architecture: ops as little-endian u32, a 0xff
    /// separator, then the packed skip mask.
    pub fn encoding(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.ops.len() * 4 + 1 + self.skips.len() / 8 + 1);
        for &op in &self.ops {
            out.extend_from_slice(&(op as u32).to_le_bytes());
        }
        out.push(0xff);
        out.extend_from_slice(self.skips.to_hex().as_bytes());
        out
    }

    /// Operators-only text form, e.g. `[0,1,2,0]`.
    pub fn ops_text(&self) -> String {
        serialize_arch_vector(self)
    }
}

impl fmt::Display for ArchitectureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", serialize_arch_vector(self))?;
        if !self.skips.is_empty() {
            write!(f, "/{}", self.skips.to_hex())?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed architecture vector: {0}")]
    Malformed(String),
    #[error("operator index {index} at position {position} is out of range for {n_ops} operators")]
    IndexOutOfRange {
        position: usize,
        index: usize,
        n_ops: usize,
    },
    #[error("architecture vector has {found} entries, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Parses the bracketed operator list. Skips are taken from the frozen mask
/// (or left empty when the space has none), since the text carries operators
/// only.
pub fn parse_arch_vector(
    text: &str,
    spec: &SearchSpaceSpec,
) -> Result<ArchitectureVector, ParseError> {
    let inner = text
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| ParseError::Malformed(format!("expected `[...]`, got `{}`", text.trim())))?;
    let ops = if inner.trim().is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| ParseError::Malformed(format!("bad entry `{}`", tok.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    if let Some((position, &index)) = ops.iter().enumerate().find(|(_, &i)| i >= spec.n_ops()) {
        return Err(ParseError::IndexOutOfRange {
            position,
            index,
            n_ops: spec.n_ops(),
        });
    }
    if ops.len() != spec.n_nodes() {
        return Err(ParseError::LengthMismatch {
            expected: spec.n_nodes(),
            found: ops.len(),
        });
    }
    let skips = spec
        .frozen_skips()
        .cloned()
        .unwrap_or_else(|| SkipMask::empty(spec.topology().edge_count()));
    Ok(ArchitectureVector { ops, skips })
}

pub fn serialize_arch_vector(arch: &ArchitectureVector) -> String {
    let body: Vec<String> = arch.ops.iter().map(usize::to_string).collect();
    format!("[{}]", body.join(","))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("expected {expected} operators, found {found}")]
    OpsLength { expected: usize, found: usize },
    #[error("node {node}: operator index {index} out of range (K = {n_ops})")]
    OpOutOfRange {
        node: usize,
        index: usize,
        n_ops: usize,
    },
    #[error("illegal edge: skip bit {position} is not a candidate edge")]
    IllegalEdge { position: usize },
    #[error("skip mask has {found} bits, expected {expected}")]
    SkipLength { expected: usize, found: usize },
    #[error("skip {edge} differs from the frozen mask")]
    FrozenMismatch { edge: Edge },
}

/// Collects every invariant violation of `arch` against `spec`.
pub fn validate(arch: &ArchitectureVector, spec: &SearchSpaceSpec) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if arch.ops.len() != spec.n_nodes() {
        out.push(Violation::OpsLength {
            expected: spec.n_nodes(),
            found: arch.ops.len(),
        });
    }
    for (node, &index) in arch.ops.iter().enumerate() {
        if index >= spec.n_ops() {
            out.push(Violation::OpOutOfRange {
                node,
                index,
                n_ops: spec.n_ops(),
            });
        }
    }
    let edges = spec.topology().edge_count();
    let bits = arch.skips.bits();
    for (position, _) in bits.iter().enumerate().skip(edges).filter(|(_, &b)| b) {
        out.push(Violation::IllegalEdge { position });
    }
    if bits.len() < edges || (bits.len() > edges && !bits[edges..].iter().any(|&b| b)) {
        out.push(Violation::SkipLength {
            expected: edges,
            found: bits.len(),
        });
    }
    if let Some(frozen) = spec.frozen_skips() {
        for (position, &edge) in spec.topology().edges().iter().enumerate() {
            if arch.skips.get(position) != frozen.get(position) {
                out.push(Violation::FrozenMismatch { edge });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
