//! SMILES parsing and writing for a practical kekulized subset.
//!
//! Supported: the organic subset B, C, N, O, P, S, F, Cl, Br, I; bracket
//! atoms with charge and explicit hydrogen counts; branches; ring closures
//! (including `%NN`); bond orders -, =, #. Stereo marks (`/`, `\`, `@`,
//! `@@`) and isotope digits are accepted and discarded. Aromatic lowercase
//! atoms are rejected with an error asking for kekulized input — there is
//! no aromaticity model here. Multi-fragment input (`.`) is rejected.

use crate::molgraph::{GraphError, MolecularGraph, ValencyTable};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    Empty,
    #[error("unmatched '(' at offset {offset}")]
    UnmatchedBranchOpen { offset: usize },
    #[error("unmatched ')' at offset {offset}")]
    UnmatchedBranchClose { offset: usize },
    #[error("unmatched ring-closure label {label} at offset {offset}")]
    UnmatchedRingClosure { label: u8, offset: usize },
    #[error("conflicting bond orders on ring closure {label} at offset {offset}")]
    RingBondConflict { label: u8, offset: usize },
    #[error("unknown element {symbol:?} at offset {offset}")]
    UnknownElement { symbol: String, offset: usize },
    #[error("aromatic SMILES atom/bond at offset {offset}: supply kekulized input (uppercase atoms with explicit single/double bonds)")]
    AromaticNotSupported { offset: usize },
    #[error("multi-fragment SMILES ('.') at offset {offset}: input must be a single connected molecule")]
    MultiFragment { offset: usize },
    #[error("invalid character {ch:?} at offset {offset}")]
    InvalidChar { ch: char, offset: usize },
    #[error("syntax error at offset {offset}: {msg}")]
    Syntax { offset: usize, msg: &'static str },
    #[error("chemistry error at offset {offset}: {source}")]
    Chemistry { offset: usize, source: GraphError },
    #[error("cannot write SMILES for an invalid graph: {0}")]
    InvalidGraph(String),
}

/// Parsed attributes of one atom token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomSpec {
    pub symbol: String,
    pub charge: i8,
    pub explicit_h: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Atom(AtomSpec),
    Bond(u8),
    BranchOpen,
    BranchClose,
    RingClosure(u8),
    Dot,
    StereoMark,
}

/// One lexical token; `position` is the 0-based character offset of its
/// first character and is strictly increasing across a token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmilesToken {
    pub kind: TokenKind,
    pub payload: String,
    pub position: usize,
}

const ORGANIC_ONE: &[char] = &['B', 'C', 'N', 'O', 'P', 'S', 'F', 'I'];
const AROMATIC_LOWER: &[char] = &['b', 'c', 'n', 'o', 'p', 's'];

pub fn tokenize(input: &str) -> Result<Vec<SmilesToken>, SmilesError> {
    let chars: Vec<char> = input.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        match c {
            '[' => {
                let (spec, consumed) = lex_bracket(&chars, i)?;
                tokens.push(SmilesToken {
                    kind: TokenKind::Atom(spec),
                    payload: chars[start..start + consumed].iter().collect(),
                    position: start,
                });
                i += consumed;
            }
            'C' | 'B' if i + 1 < chars.len() && matches!((c, chars[i + 1]), ('C', 'l') | ('B', 'r')) => {
                let symbol: String = chars[i..i + 2].iter().collect();
                tokens.push(SmilesToken {
                    kind: TokenKind::Atom(AtomSpec {
                        symbol: symbol.clone(),
                        charge: 0,
                        explicit_h: 0,
                    }),
                    payload: symbol,
                    position: start,
                });
                i += 2;
            }
            _ if ORGANIC_ONE.contains(&c) => {
                tokens.push(SmilesToken {
                    kind: TokenKind::Atom(AtomSpec {
                        symbol: c.to_string(),
                        charge: 0,
                        explicit_h: 0,
                    }),
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            _ if AROMATIC_LOWER.contains(&c) => {
                return Err(SmilesError::AromaticNotSupported { offset: start });
            }
            '-' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::Bond(1),
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '=' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::Bond(2),
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '#' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::Bond(3),
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            ':' => return Err(SmilesError::AromaticNotSupported { offset: start }),
            '/' | '\\' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::StereoMark,
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '(' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::BranchOpen,
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            ')' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::BranchClose,
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '.' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::Dot,
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '0'..='9' => {
                tokens.push(SmilesToken {
                    kind: TokenKind::RingClosure(c.to_digit(10).unwrap() as u8),
                    payload: c.to_string(),
                    position: start,
                });
                i += 1;
            }
            '%' => {
                if i + 2 >= chars.len()
                    || !chars[i + 1].is_ascii_digit()
                    || !chars[i + 2].is_ascii_digit()
                {
                    return Err(SmilesError::Syntax {
                        offset: start,
                        msg: "'%' must be followed by two digits",
                    });
                }
                let label = (chars[i + 1].to_digit(10).unwrap() * 10
                    + chars[i + 2].to_digit(10).unwrap()) as u8;
                tokens.push(SmilesToken {
                    kind: TokenKind::RingClosure(label),
                    payload: chars[i..i + 3].iter().collect(),
                    position: start,
                });
                i += 3;
            }
            other => {
                return Err(SmilesError::InvalidChar {
                    ch: other,
                    offset: start,
                })
            }
        }
    }
    Ok(tokens)
}

/// Lex a bracket atom starting at `chars[open]`. Returns the parsed atom
/// attributes and the number of characters consumed, brackets included.
fn lex_bracket(chars: &[char], open: usize) -> Result<(AtomSpec, usize), SmilesError> {
    let close = chars[open..]
        .iter()
        .position(|&c| c == ']')
        .map(|p| open + p)
        .ok_or(SmilesError::Syntax {
            offset: open,
            msg: "unterminated bracket atom",
        })?;
    let mut i = open + 1;

    // isotope digits: accepted and discarded
    while i < close && chars[i].is_ascii_digit() {
        i += 1;
    }

    if i >= close {
        return Err(SmilesError::Syntax {
            offset: open,
            msg: "bracket atom is missing an element symbol",
        });
    }
    if chars[i].is_ascii_lowercase() {
        return Err(SmilesError::AromaticNotSupported { offset: i });
    }
    if !chars[i].is_ascii_uppercase() {
        return Err(SmilesError::Syntax {
            offset: i,
            msg: "expected an element symbol in bracket atom",
        });
    }
    let mut symbol = chars[i].to_string();
    i += 1;
    if i < close && chars[i].is_ascii_lowercase() {
        // second letter of a two-letter symbol
        symbol.push(chars[i]);
        i += 1;
    }

    // chirality marks: accepted and discarded
    while i < close && chars[i] == '@' {
        i += 1;
    }

    let mut explicit_h: u8 = 0;
    if i < close && chars[i] == 'H' {
        i += 1;
        explicit_h = 1;
        let mut digits = String::new();
        while i < close && chars[i].is_ascii_digit() {
            digits.push(chars[i]);
            i += 1;
        }
        if !digits.is_empty() {
            explicit_h = digits.parse().map_err(|_| SmilesError::Syntax {
                offset: i,
                msg: "hydrogen count out of range",
            })?;
        }
    }

    let mut charge: i8 = 0;
    while i < close && (chars[i] == '+' || chars[i] == '-') {
        let sign: i8 = if chars[i] == '+' { 1 } else { -1 };
        i += 1;
        let mut digits = String::new();
        while i < close && chars[i].is_ascii_digit() {
            digits.push(chars[i]);
            i += 1;
        }
        if digits.is_empty() {
            charge += sign;
        } else {
            let n: i8 = digits.parse().map_err(|_| SmilesError::Syntax {
                offset: i,
                msg: "charge out of range",
            })?;
            charge += sign * n;
        }
    }

    if i != close {
        return Err(SmilesError::Syntax {
            offset: i,
            msg: "unexpected character in bracket atom",
        });
    }

    Ok((
        AtomSpec {
            symbol,
            charge,
            explicit_h,
        },
        close - open + 1,
    ))
}

/// Parse a SMILES string into a connected molecular graph.
pub fn parse(input: &str, table: &ValencyTable) -> Result<MolecularGraph, SmilesError> {
    let trimmed = input.trim();
    if trimmed.is_empty() {
        return Err(SmilesError::Empty);
    }
    let tokens = tokenize(trimmed)?;

    let mut graph = MolecularGraph::new();
    let mut prev: Option<usize> = None;
    let mut branch_stack: Vec<(usize, usize)> = Vec::new(); // (atom, '(' offset)
    let mut pending: Option<(u8, usize)> = None; // (order, offset)
    let mut rings: BTreeMap<u8, (usize, Option<u8>, usize)> = BTreeMap::new();

    for token in &tokens {
        match &token.kind {
            TokenKind::Atom(spec) => {
                if table.get(&spec.symbol).is_none() {
                    return Err(SmilesError::UnknownElement {
                        symbol: spec.symbol.clone(),
                        offset: token.position,
                    });
                }
                let v = graph
                    .add_atom_with(table, &spec.symbol, spec.charge, spec.explicit_h)
                    .map_err(|source| SmilesError::Chemistry {
                        offset: token.position,
                        source,
                    })?;
                if let Some(p) = prev {
                    let order = pending.take().map(|(o, _)| o).unwrap_or(1);
                    graph
                        .add_bond(p, v, order)
                        .map_err(|source| SmilesError::Chemistry {
                            offset: token.position,
                            source,
                        })?;
                }
                prev = Some(v);
            }
            TokenKind::Bond(order) => {
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "bond symbol must follow an atom",
                    });
                }
                pending = Some((*order, token.position));
            }
            TokenKind::StereoMark => {
                // stereo bonds are plain single bonds once marks are dropped
                if prev.is_none() || pending.is_some() {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "stereo bond mark must follow an atom",
                    });
                }
                pending = Some((1, token.position));
            }
            TokenKind::BranchOpen => {
                let Some(p) = prev else {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "branch cannot open before any atom",
                    });
                };
                if pending.is_some() {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "dangling bond symbol before '('",
                    });
                }
                branch_stack.push((p, token.position));
            }
            TokenKind::BranchClose => {
                if pending.is_some() {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "dangling bond symbol before ')'",
                    });
                }
                let Some((p, _)) = branch_stack.pop() else {
                    return Err(SmilesError::UnmatchedBranchClose {
                        offset: token.position,
                    });
                };
                prev = Some(p);
            }
            TokenKind::RingClosure(label) => {
                let Some(here) = prev else {
                    return Err(SmilesError::Syntax {
                        offset: token.position,
                        msg: "ring closure before any atom",
                    });
                };
                let order_here = pending.take().map(|(o, _)| o);
                match rings.remove(label) {
                    None => {
                        rings.insert(*label, (here, order_here, token.position));
                    }
                    Some((other, order_there, _)) => {
                        let order = match (order_here, order_there) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(SmilesError::RingBondConflict {
                                    label: *label,
                                    offset: token.position,
                                });
                            }
                            (Some(a), _) => a,
                            (None, Some(b)) => b,
                            (None, None) => 1,
                        };
                        graph
                            .add_bond(other, here, order)
                            .map_err(|source| SmilesError::Chemistry {
                                offset: token.position,
                                source,
                            })?;
                    }
                }
            }
            TokenKind::Dot => {
                return Err(SmilesError::MultiFragment {
                    offset: token.position,
                });
            }
        }
    }

    if let Some((_, offset)) = pending {
        return Err(SmilesError::Syntax {
            offset,
            msg: "dangling bond symbol at end of input",
        });
    }
    if let Some((_, offset)) = branch_stack.first() {
        return Err(SmilesError::UnmatchedBranchOpen { offset: *offset });
    }
    if let Some((label, (_, _, offset))) = rings.into_iter().next() {
        return Err(SmilesError::UnmatchedRingClosure { label, offset });
    }

    debug_assert!(graph.is_connected());
    Ok(graph)
}

/// Write a valid connected graph as SMILES. Output is deterministic:
/// traversal starts at the atom with the smallest canonical color and visits
/// neighbors in (color, index) order.
pub fn write(graph: &MolecularGraph) -> Result<String, SmilesError> {
    let report = graph.validate();
    if !report.ok {
        let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(SmilesError::InvalidGraph(msgs.join("; ")));
    }
    let colors = graph.canonical_colors();
    let start = (0..graph.atom_count())
        .min_by_key(|&v| (colors[v], v))
        .expect("validated graph is nonempty");

    let mut writer = Writer {
        graph,
        colors: &colors,
        visited: vec![false; graph.atom_count()],
        closure_digits: BTreeMap::new(),
        free_digits: (1..=99).rev().collect(),
        out: String::new(),
    };
    writer.emit(start, None)?;
    Ok(writer.out)
}

struct Writer<'a> {
    graph: &'a MolecularGraph,
    colors: &'a [u64],
    visited: Vec<bool>,
    closure_digits: BTreeMap<(usize, usize), u8>,
    free_digits: Vec<u8>,
    out: String,
}

impl Writer<'_> {
    fn emit(&mut self, v: usize, parent: Option<usize>) -> Result<(), SmilesError> {
        self.visited[v] = true;
        self.push_atom(v);

        let mut neighbors = self.graph.neighbors(v);
        neighbors.sort_by_key(|&(u, _)| (self.colors[u], u));

        // Back edges toward already-visited atoms become ring closures.
        for &(u, order) in &neighbors {
            if Some(u) == parent || !self.visited[u] {
                continue;
            }
            self.push_closure(v, u, order)?;
        }

        let children: Vec<(usize, u8)> = neighbors
            .iter()
            .copied()
            .filter(|&(u, _)| !self.visited[u])
            .collect();
        let mut remaining = children.len();
        for (u, order) in children {
            if self.visited[u] {
                // claimed by an earlier sibling subtree; close the ring here
                self.push_closure(v, u, order)?;
                remaining -= 1;
                continue;
            }
            let last = remaining == 1;
            if !last {
                self.out.push('(');
            }
            self.out.push_str(bond_text(order));
            self.emit(u, Some(v))?;
            if !last {
                self.out.push(')');
            }
            remaining -= 1;
        }
        Ok(())
    }

    fn push_atom(&mut self, v: usize) {
        let atom = &self.graph.atoms()[v];
        if atom.charge == 0 && atom.explicit_h == 0 {
            self.out.push_str(&atom.symbol);
            return;
        }
        self.out.push('[');
        self.out.push_str(&atom.symbol);
        match atom.explicit_h {
            0 => {}
            1 => self.out.push('H'),
            h => self.out.push_str(&format!("H{h}")),
        }
        match atom.charge {
            0 => {}
            1 => self.out.push('+'),
            -1 => self.out.push('-'),
            c if c > 0 => self.out.push_str(&format!("+{c}")),
            c => self.out.push_str(&format!("-{}", -c)),
        }
        self.out.push(']');
    }

    fn push_closure(&mut self, v: usize, u: usize, order: u8) -> Result<(), SmilesError> {
        let key = (v.min(u), v.max(u));
        if let Some(digit) = self.closure_digits.remove(&key) {
            // second endpoint: the opening side already carries the order
            self.push_digit(digit);
            self.free_digits.push(digit);
        } else {
            let digit = self.free_digits.pop().ok_or_else(|| {
                SmilesError::InvalidGraph("ring closure labels exhausted".to_string())
            })?;
            self.closure_digits.insert(key, digit);
            self.out.push_str(bond_text(order));
            self.push_digit(digit);
        }
        Ok(())
    }

    fn push_digit(&mut self, digit: u8) {
        if digit < 10 {
            self.out.push_str(&digit.to_string());
        } else {
            self.out.push_str(&format!("%{digit:02}"));
        }
    }
}

fn bond_text(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::BranchMode;

    fn table() -> ValencyTable {
        ValencyTable::standard()
    }

    #[test]
    fn parse_single_atom() {
        let g = parse("C", &table()).unwrap();
        assert_eq!(g.atom_count(), 1);
        assert_eq!(g.bond_count(), 0);
        assert_eq!(g.atoms()[0].symbol, "C");
    }

    #[test]
    fn parse_cyclopropane() {
        let g = parse("C1CC1", &table()).unwrap();
        assert_eq!(g.atom_count(), 3);
        assert_eq!(g.bond_count(), 3);
        assert!(g.bonds().iter().all(|b| b.order == 1));
        assert!(g.validate().ok);
    }

    #[test]
    fn parse_acetic_acid_adjacency() {
        // hand-built adjacency oracle for CC(=O)O
        let g = parse("CC(=O)O", &table()).unwrap();
        assert_eq!(g.atom_count(), 4);
        assert_eq!(g.bond_between(0, 1), Some(1));
        assert_eq!(g.bond_between(1, 2), Some(2)); // C=O
        assert_eq!(g.bond_between(1, 3), Some(1));
        assert_eq!(g.used_valence(1), 4);
        assert!(g.validate().ok);
    }

    #[test]
    fn parse_remdesivir() {
        let smiles = "CCC(CC)COC(=O)C(C)NP(=O)(OCC1C(C(C(O1)(CN)C2=CC=C3N2N=CN=C3N)O)O)OC4=CC=CC=C4";
        let g = parse(smiles, &table()).unwrap();
        assert!(g.validate().ok);
        assert!(g.is_connected());
    }

    #[test]
    fn parse_errors() {
        let t = table();
        assert_eq!(
            parse("C1CC", &t),
            Err(SmilesError::UnmatchedRingClosure { label: 1, offset: 1 })
        );
        assert!(matches!(
            parse("C(C", &t),
            Err(SmilesError::UnmatchedBranchOpen { offset: 1 })
        ));
        assert!(matches!(
            parse("CC)C", &t),
            Err(SmilesError::UnmatchedBranchClose { offset: 2 })
        ));
        assert!(matches!(
            parse("c1ccccc1", &t),
            Err(SmilesError::AromaticNotSupported { offset: 0 })
        ));
        assert!(matches!(
            parse("C.C", &t),
            Err(SmilesError::MultiFragment { offset: 1 })
        ));
        assert!(matches!(
            parse("[Xx]", &t),
            Err(SmilesError::UnknownElement { .. })
        ));
        assert!(matches!(
            parse("C=1CC#1", &t),
            Err(SmilesError::RingBondConflict { label: 1, .. })
        ));
        // valence overflow during construction: pentavalent carbon
        assert!(matches!(
            parse("C(C)(C)(C)(C)C", &t),
            Err(SmilesError::Chemistry { .. })
        ));
        assert_eq!(parse("  ", &t), Err(SmilesError::Empty));
    }

    #[test]
    fn stereo_and_isotopes_dropped() {
        let t = table();
        let g = parse("C/C=C\\C", &t).unwrap();
        assert_eq!(g.atom_count(), 4);
        assert_eq!(g.bond_between(1, 2), Some(2));
        assert_eq!(g.bond_between(0, 1), Some(1));

        let g = parse("[13CH4]", &t).unwrap();
        assert_eq!(g.atoms()[0].explicit_h, 4);

        let g = parse("[C@@H](F)(Cl)Br", &t).unwrap();
        assert_eq!(g.atoms()[0].explicit_h, 1);
        assert_eq!(g.atom_count(), 4);
    }

    #[test]
    fn bracket_charges_are_kept() {
        let t = table();
        let g = parse("[O-]C", &t).unwrap();
        assert_eq!(g.atoms()[0].charge, -1);
        assert_eq!(g.bond_between(0, 1), Some(1));
        let g = parse("[N+](C)(C)(C)C", &t);
        // charge does not raise the valence limit; quaternary N overflows
        assert!(matches!(g, Err(SmilesError::Chemistry { .. })));
    }

    #[test]
    fn explicit_h_consumes_valence() {
        let t = table();
        // [CH3] has one slot left; a double bond cannot fit
        assert!(matches!(
            parse("[CH3]=C", &t),
            Err(SmilesError::Chemistry { .. })
        ));
        let g = parse("[CH3]C", &t).unwrap();
        assert_eq!(g.used_valence(0), 4);
    }

    #[test]
    fn write_basics() {
        let t = table();
        let g = parse("C", &t).unwrap();
        assert_eq!(write(&g).unwrap(), "C");

        let g = parse("C1CC1", &t).unwrap();
        let s = write(&g).unwrap();
        let back = parse(&s, &t).unwrap();
        assert_eq!(back.atom_count(), 3);
        assert_eq!(back.bond_count(), 3);
    }

    #[test]
    fn write_rejects_invalid() {
        let mut g = MolecularGraph::new();
        let t = table();
        g.add_atom(&t, "C").unwrap();
        g.add_atom(&t, "C").unwrap();
        assert!(matches!(write(&g), Err(SmilesError::InvalidGraph(_))));
    }

    #[test]
    fn roundtrip_preserves_canonical_key() {
        let t = table();
        for smiles in [
            "C",
            "CCO",
            "CC(=O)OC1=CC=CC=C1C(=O)O",
            "C1CCCCC1",
            "C1=CC=CC=C1",
            "CC(C)CC1=CC=C(C=C1)C(C)C(=O)O",
            "NS(=O)(=O)C1=CC=CC=C1",
            "OP(=O)(O)OCC",
            "C1=CC=C2C=CC=CC2=C1",
            "[NH2]CC([O-])=O",
            "[O-]S(=O)(=O)C",
            "CN1C=NC2=C1C(=O)N(C)C(=O)N2C",
            "FC(F)(F)C1=CC=CC=C1",
            "C#N",
            "CC#CC",
            "C1CC2CCC1CC2",
        ] {
            let g = parse(smiles, &t).unwrap();
            let out = write(&g).unwrap();
            let back = parse(&out, &t).unwrap_or_else(|e| panic!("reparse {out:?}: {e}"));
            assert_eq!(
                g.canonical_key(),
                back.canonical_key(),
                "roundtrip key mismatch for {smiles} -> {out}"
            );
        }
    }

    #[test]
    fn write_fixed_point() {
        let t = table();
        let g = parse("CC(=O)OC1=CC=CC=C1C(=O)O", &t).unwrap();
        let s1 = write(&g).unwrap();
        let s2 = write(&parse(&s1, &t).unwrap()).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn swap_then_roundtrip() {
        let t = table();
        let a = parse("CC1=CC=CC=C1", &t).unwrap(); // toluene, kekulized
        let cuts = a.enumerate_branches(BranchMode::Universal).unwrap();
        assert_eq!(cuts.len(), 1);
        let s = write(&a).unwrap();
        let back = parse(&s, &t).unwrap();
        assert_eq!(a.canonical_key(), back.canonical_key());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(256))]
        /// Random character soup must never panic: either a parse error or a
        /// graph that satisfies every invariant.
        #[test]
        fn parser_fuzz_no_panic(s in "[\\[\\]()=#%@/\\\\.0-9A-Za-z+-]{0,24}") {
            let t = table();
            if let Ok(g) = parse(&s, &t) {
                let report = g.validate();
                proptest::prop_assert!(report.ok, "invalid graph from {s:?}: {:?}", report.violations);
            }
        }
    }
}
