//! Molecular graph data model: atoms with valency bookkeeping, typed bonds,
//! branch decomposition for crossover, and graph utilities shared by the
//! whole pipeline.

mod canon;

pub(crate) use canon::fnv1a64;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),
    #[error("atom index {index} out of range (graph has {len} atoms)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("self-loop bonds are not allowed (atom {0})")]
    SelfLoop(usize),
    #[error("a bond between atoms {0} and {1} already exists")]
    DuplicateBond(usize, usize),
    #[error("valence limit exceeded on atom {atom} ({symbol}): {used} used + {requested} requested > {max}")]
    ValenceExceeded {
        atom: usize,
        symbol: String,
        used: u8,
        requested: u8,
        max: u8,
    },
    #[error("invalid bond order {0} (expected 1, 2 or 3)")]
    InvalidBondOrder(u8),
    #[error("graph is not connected")]
    Disconnected,
    #[error("invalid branch cut: {0}")]
    InvalidCut(String),
}

/// A chemical element with its maximum total bond order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub symbol: String,
    pub max_valence: u8,
}

impl Element {
    pub fn new(symbol: &str, max_valence: u8) -> Self {
        assert!(max_valence >= 1, "max_valence must be at least 1");
        Element {
            symbol: symbol.to_string(),
            max_valence,
        }
    }
}

/// Lookup table from element symbol to valence limit.
///
/// The standard table covers the organic subset and applies the extended
/// valences for sulfur (6) and phosphorus (5) so that sulfonamide and
/// phosphate groups found in real ligands are representable.
#[derive(Debug, Clone)]
pub struct ValencyTable {
    entries: BTreeMap<String, Element>,
}

impl ValencyTable {
    pub fn empty() -> Self {
        ValencyTable {
            entries: BTreeMap::new(),
        }
    }

    /// Organic-subset table with extended S/P valences applied.
    pub fn standard() -> Self {
        let mut t = ValencyTable::empty();
        for (sym, val) in [
            ("B", 3),
            ("C", 4),
            ("N", 3),
            ("O", 2),
            ("F", 1),
            ("Cl", 1),
            ("Br", 1),
            ("I", 1),
            // Base valences are S:2 and P:3; the extended override list
            // raises them so e.g. S(=O)(=O) and P(=O)(O)(O) parse.
            ("S", 6),
            ("P", 5),
        ] {
            t.insert(Element::new(sym, val));
        }
        t
    }

    pub fn insert(&mut self, element: Element) {
        self.entries.insert(element.symbol.clone(), element);
    }

    pub fn with_override(mut self, symbol: &str, max_valence: u8) -> Self {
        self.insert(Element::new(symbol, max_valence));
        self
    }

    pub fn get(&self, symbol: &str) -> Option<&Element> {
        self.entries.get(symbol)
    }

    /// Element symbols in sorted order; this fixes the label vocabulary used
    /// by the neural model.
    pub fn vocabulary(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One atom of a molecular graph. Explicit hydrogens from bracket SMILES
/// atoms are not stored as nodes but consume valence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub symbol: String,
    pub charge: i8,
    pub explicit_h: u8,
    pub max_valence: u8,
}

/// An undirected bond; endpoints are stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: u8,
}

/// Whether branch enumeration considers every bridge bond or only those whose
/// detached subtree is small.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Uppermost { max_atoms: usize },
    Universal,
}

/// A cuttable single-order bridge bond together with the subtree it detaches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchCut {
    /// Atom kept on the trunk side of the cut.
    pub host: usize,
    /// The bridge bond endpoints as stored (`a < b`).
    pub bridge: (usize, usize),
    /// Atom indices of the component detached by cutting the bridge,
    /// sorted ascending. The bridge endpoint inside the subtree is the
    /// reattachment point.
    pub subtree: Vec<usize>,
    pub size: usize,
}

impl BranchCut {
    /// Endpoint of the bridge bond that lies inside the subtree.
    pub fn subtree_root(&self) -> usize {
        if self.subtree.binary_search(&self.bridge.0).is_ok() {
            self.bridge.0
        } else {
            self.bridge.1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SelfLoop { bond: usize },
    DuplicateBond { a: usize, b: usize },
    IndexOutOfRange { bond: usize },
    InvalidBondOrder { bond: usize, order: u8 },
    ValenceExceeded { atom: usize, total: u32, max: u8 },
    Disconnected,
    Empty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { bond } => write!(f, "bond {bond} is a self-loop"),
            Violation::DuplicateBond { a, b } => {
                write!(f, "more than one bond between atoms {a} and {b}")
            }
            Violation::IndexOutOfRange { bond } => {
                write!(f, "bond {bond} references an atom out of range")
            }
            Violation::InvalidBondOrder { bond, order } => {
                write!(f, "bond {bond} has invalid order {order}")
            }
            Violation::ValenceExceeded { atom, total, max } => {
                write!(f, "atom {atom} carries total bond order {total} > {max}")
            }
            Violation::Disconnected => write!(f, "graph is not connected"),
            Violation::Empty => write!(f, "graph has no atoms"),
        }
    }
}

/// Outcome of [`MolecularGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// An undirected molecular graph with per-atom valence limits.
///
/// Graphs are plain values: cheap to clone, safe to share across threads
/// once built. All mutating constructors check the valence invariants, so a
/// graph assembled through them can only fail [`validate`] on connectivity.
///
/// [`validate`]: MolecularGraph::validate
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn new() -> Self {
        MolecularGraph::default()
    }

    /// Assemble a graph from raw parts without invariant checks.
    /// Callers are expected to run [`MolecularGraph::validate`].
    pub fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Self {
        MolecularGraph { atoms, bonds }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom(&self, v: usize) -> Result<&Atom, GraphError> {
        self.atoms.get(v).ok_or(GraphError::IndexOutOfRange {
            index: v,
            len: self.atoms.len(),
        })
    }

    /// Append an atom of the given element; no bonds are created.
    pub fn add_atom(&mut self, table: &ValencyTable, symbol: &str) -> Result<usize, GraphError> {
        self.add_atom_with(table, symbol, 0, 0)
    }

    /// Append an atom carrying a formal charge and explicit hydrogens.
    /// Explicit hydrogens are not graph nodes but consume valence.
    pub fn add_atom_with(
        &mut self,
        table: &ValencyTable,
        symbol: &str,
        charge: i8,
        explicit_h: u8,
    ) -> Result<usize, GraphError> {
        let element = table
            .get(symbol)
            .ok_or_else(|| GraphError::UnknownElement(symbol.to_string()))?;
        // Formal charges are carried but do not alter the valence limit.
        self.atoms.push(Atom {
            symbol: element.symbol.clone(),
            charge,
            explicit_h,
            max_valence: element.max_valence,
        });
        Ok(self.atoms.len() - 1)
    }

    /// Total bond order used at `v`, explicit hydrogens included.
    pub fn used_valence(&self, v: usize) -> u32 {
        let mut total = u32::from(self.atoms[v].explicit_h);
        for bond in &self.bonds {
            if bond.a == v || bond.b == v {
                total += u32::from(bond.order);
            }
        }
        total
    }

    /// Bond order still available at `v`.
    pub fn remaining_valence(&self, v: usize) -> u32 {
        u32::from(self.atoms[v].max_valence).saturating_sub(self.used_valence(v))
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<u8> {
        let (lo, hi) = (a.min(b), a.max(b));
        self.bonds
            .iter()
            .find(|bond| bond.a == lo && bond.b == hi)
            .map(|bond| bond.order)
    }

    /// Add a bond of the given order. Rejects self-loops, duplicates and
    /// anything that would push either endpoint past its valence limit.
    pub fn add_bond(&mut self, a: usize, b: usize, order: u8) -> Result<(), GraphError> {
        let len = self.atoms.len();
        for idx in [a, b] {
            if idx >= len {
                return Err(GraphError::IndexOutOfRange { index: idx, len });
            }
        }
        if !(1..=3).contains(&order) {
            return Err(GraphError::InvalidBondOrder(order));
        }
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        if self.bond_between(a, b).is_some() {
            return Err(GraphError::DuplicateBond(a.min(b), a.max(b)));
        }
        for idx in [a, b] {
            let used = self.used_valence(idx);
            let max = u32::from(self.atoms[idx].max_valence);
            if used + u32::from(order) > max {
                return Err(GraphError::ValenceExceeded {
                    atom: idx,
                    symbol: self.atoms[idx].symbol.clone(),
                    used: used as u8,
                    requested: order,
                    max: max as u8,
                });
            }
        }
        self.bonds.push(Bond {
            a: a.min(b),
            b: a.max(b),
            order,
        });
        Ok(())
    }

    /// Neighbors of `v` with the connecting bond order.
    pub fn neighbors(&self, v: usize) -> Vec<(usize, u8)> {
        let mut out = Vec::new();
        for bond in &self.bonds {
            if bond.a == v {
                out.push((bond.b, bond.order));
            } else if bond.b == v {
                out.push((bond.a, bond.order));
            }
        }
        out
    }

    /// Shortest bond-path length between two atoms, ignoring bond order.
    /// Returns `None` when the atoms are in different components.
    pub fn graph_distance(&self, v: usize, u: usize) -> Result<Option<u32>, GraphError> {
        let len = self.atoms.len();
        for idx in [v, u] {
            if idx >= len {
                return Err(GraphError::IndexOutOfRange { index: idx, len });
            }
        }
        if v == u {
            return Ok(Some(0));
        }
        let mut dist = vec![u32::MAX; len];
        dist[v] = 0;
        let mut queue = VecDeque::from([v]);
        while let Some(cur) = queue.pop_front() {
            for (next, _) in self.neighbors(cur) {
                if dist[next] == u32::MAX {
                    dist[next] = dist[cur] + 1;
                    if next == u {
                        return Ok(Some(dist[next]));
                    }
                    queue.push_back(next);
                }
            }
        }
        Ok(None)
    }

    /// Atom indices reachable from `start`, in BFS discovery order.
    pub fn component_of(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.atoms.len()];
        seen[start] = true;
        let mut order = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            for (next, _) in self.neighbors(cur) {
                if !seen[next] {
                    seen[next] = true;
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
        order
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return false;
        }
        self.component_of(0).len() == self.atoms.len()
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.atoms.len()];
        let mut count = 0;
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            for v in self.component_of(start) {
                seen[v] = true;
            }
        }
        count
    }

    /// Cyclomatic ring count: bonds − atoms + components.
    pub fn ring_count(&self) -> usize {
        (self.bonds.len() + self.component_count()).saturating_sub(self.atoms.len())
    }

    /// Check every structural invariant plus connectivity. Problems are
    /// reported, never panicked on, so this also serves graphs built via
    /// [`MolecularGraph::from_parts`].
    pub fn validate(&self) -> ValidityReport {
        let mut violations = Vec::new();
        if self.atoms.is_empty() {
            violations.push(Violation::Empty);
            return ValidityReport {
                ok: false,
                violations,
            };
        }
        let len = self.atoms.len();
        let mut seen_pairs = std::collections::BTreeSet::new();
        for (i, bond) in self.bonds.iter().enumerate() {
            if bond.a >= len || bond.b >= len {
                violations.push(Violation::IndexOutOfRange { bond: i });
                continue;
            }
            if bond.a == bond.b {
                violations.push(Violation::SelfLoop { bond: i });
            }
            if !(1..=3).contains(&bond.order) {
                violations.push(Violation::InvalidBondOrder {
                    bond: i,
                    order: bond.order,
                });
            }
            let key = (bond.a.min(bond.b), bond.a.max(bond.b));
            if !seen_pairs.insert(key) {
                violations.push(Violation::DuplicateBond { a: key.0, b: key.1 });
            }
        }
        if violations.is_empty() {
            for v in 0..len {
                let total = self.used_valence(v);
                let max = self.atoms[v].max_valence;
                if total > u32::from(max) {
                    violations.push(Violation::ValenceExceeded { atom: v, total, max });
                }
            }
            if !self.is_connected() {
                violations.push(Violation::Disconnected);
            }
        }
        ValidityReport {
            ok: violations.is_empty(),
            violations,
        }
    }

    /// Digest stable under atom reindexing, used to deduplicate populations.
    /// Isomorphic-by-permutation graphs always agree; unrelated graphs may
    /// collide only with hash probability, which merely over-deduplicates.
    pub fn canonical_key(&self) -> String {
        canon::canonical_key(self)
    }

    /// Per-atom refinement colors; exposed for the SMILES writer.
    pub(crate) fn canonical_colors(&self) -> Vec<u64> {
        canon::refine_colors(self)
    }

    /// Enumerate the cuttable branches of a connected graph. Only
    /// single-order bridge bonds qualify; the subtree is the smaller side
    /// (ties resolved to the higher-indexed endpoint's side).
    pub fn enumerate_branches(&self, mode: BranchMode) -> Result<Vec<BranchCut>, GraphError> {
        if !self.is_connected() {
            return Err(GraphError::Disconnected);
        }
        let mut cuts = Vec::new();
        for (i, bond) in self.bonds.iter().enumerate() {
            if bond.order != 1 {
                continue;
            }
            let side_a = self.component_without(bond.a, i);
            if side_a.len() == self.atoms.len() {
                continue; // not a bridge: removing the bond leaves one component
            }
            let side_b = self.component_without(bond.b, i);
            let (host, mut subtree) = if side_b.len() < side_a.len() {
                (bond.a, side_b)
            } else if side_a.len() < side_b.len() {
                (bond.b, side_a)
            } else {
                // Equal halves: detach the side holding the higher endpoint.
                (bond.a, side_b)
            };
            subtree.sort_unstable();
            let size = subtree.len();
            let keep = match mode {
                BranchMode::Universal => true,
                BranchMode::Uppermost { max_atoms } => size <= max_atoms,
            };
            if keep {
                cuts.push(BranchCut {
                    host,
                    bridge: (bond.a, bond.b),
                    subtree,
                    size,
                });
            }
        }
        Ok(cuts)
    }

    /// BFS component of `start` with bond `skip` removed.
    fn component_without(&self, start: usize, skip: usize) -> Vec<usize> {
        let mut seen = vec![false; self.atoms.len()];
        seen[start] = true;
        let mut order = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            for (i, bond) in self.bonds.iter().enumerate() {
                if i == skip {
                    continue;
                }
                let next = if bond.a == cur {
                    bond.b
                } else if bond.b == cur {
                    bond.a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
        order
    }

    fn check_cut(&self, cut: &BranchCut) -> Result<usize, GraphError> {
        let (a, b) = cut.bridge;
        let idx = self
            .bonds
            .iter()
            .position(|bond| bond.a == a.min(b) && bond.b == a.max(b))
            .ok_or_else(|| GraphError::InvalidCut(format!("no bond {a}-{b}")))?;
        if self.bonds[idx].order != 1 {
            return Err(GraphError::InvalidCut(format!(
                "bond {a}-{b} has order {}",
                self.bonds[idx].order
            )));
        }
        if cut.host != a && cut.host != b {
            return Err(GraphError::InvalidCut(format!(
                "host {} is not an endpoint of bond {a}-{b}",
                cut.host
            )));
        }
        let mut detached = self.component_without(cut.subtree_root(), idx);
        if detached.len() == self.atoms.len() {
            return Err(GraphError::InvalidCut(format!("bond {a}-{b} is not a bridge")));
        }
        detached.sort_unstable();
        if detached != cut.subtree {
            return Err(GraphError::InvalidCut(
                "subtree does not match the detached component".to_string(),
            ));
        }
        if cut.subtree.binary_search(&cut.host).is_ok() {
            return Err(GraphError::InvalidCut("host lies inside the subtree".to_string()));
        }
        Ok(idx)
    }

    /// Copy the atoms of `keep` (and the bonds among them) into `out`,
    /// returning old-index → new-index.
    fn copy_fragment(&self, keep: &[usize], out: &mut MolecularGraph) -> BTreeMap<usize, usize> {
        let mut map = BTreeMap::new();
        for &v in keep {
            let atom = self.atoms[v].clone();
            out.atoms.push(atom);
            map.insert(v, out.atoms.len() - 1);
        }
        for bond in &self.bonds {
            if let (Some(&na), Some(&nb)) = (map.get(&bond.a), map.get(&bond.b)) {
                out.bonds.push(Bond {
                    a: na.min(nb),
                    b: na.max(nb),
                    order: bond.order,
                });
            }
        }
        map
    }
}

/// Exchange branches between two parents. Each offspring is one parent's
/// trunk joined to the other parent's detached subtree by a single bond;
/// because a cut frees exactly one valence on each side, the offspring
/// always satisfy the valence invariants.
pub fn swap_branches(
    g1: &MolecularGraph,
    c1: &BranchCut,
    g2: &MolecularGraph,
    c2: &BranchCut,
) -> Result<(MolecularGraph, MolecularGraph), GraphError> {
    g1.check_cut(c1)?;
    g2.check_cut(c2)?;

    let build = |trunk_g: &MolecularGraph,
                 trunk_cut: &BranchCut,
                 branch_g: &MolecularGraph,
                 branch_cut: &BranchCut|
     -> Result<MolecularGraph, GraphError> {
        let trunk: Vec<usize> = (0..trunk_g.atom_count())
            .filter(|v| trunk_cut.subtree.binary_search(v).is_err())
            .collect();
        let mut out = MolecularGraph::new();
        let trunk_map = trunk_g.copy_fragment(&trunk, &mut out);
        let branch_map = branch_g.copy_fragment(&branch_cut.subtree, &mut out);
        let host = trunk_map[&trunk_cut.host];
        let root = branch_map[&branch_cut.subtree_root()];
        out.add_bond(host, root, 1)?;
        Ok(out)
    };

    Ok((build(g1, c1, g2, c2)?, build(g2, c2, g1, c1)?))
}
