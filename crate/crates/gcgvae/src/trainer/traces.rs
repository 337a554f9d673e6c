//! Breadth-first generation traces: extraction for Monte-Carlo supervision,
//! exhaustive enumeration for small-graph oracles, and replay.

use super::TrainError;
use crate::molgraph::MolecularGraph;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAction {
    Edge { target: usize, order: u8 },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub focus: usize,
    pub action: TraceAction,
    /// Number of still-unbuilt source-graph edges at the focus when this
    /// step was taken (|E_s|); zero exactly for stop steps.
    pub remaining_edges: usize,
}

/// One ordered edge-addition/stop sequence that rebuilds its source graph
/// from the bare node set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTrace {
    pub source_key: String,
    pub atoms: usize,
    pub first_focus: usize,
    pub steps: Vec<TraceStep>,
    /// Per focused node, in focus order: how many of its edges were still
    /// unbuilt when it came into focus. The product of factorials estimates
    /// the shuffle count along this trace.
    pub shuffle_sizes: Vec<usize>,
}

impl GenerationTrace {
    /// n_first_choices × Π (r_w!) — the enumeration-count estimate carried
    /// by this single trace.
    pub fn trace_count_estimate(&self) -> f64 {
        let mut product = self.atoms as f64;
        for &r in &self.shuffle_sizes {
            product *= factorial(r);
        }
        product
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Sample `k` breadth-first traces of a connected graph: uniform random
/// first focus, uniformly shuffled edge order within each focus.
pub fn extract_traces(
    graph: &MolecularGraph,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GenerationTrace>, TrainError> {
    if !graph.is_connected() {
        return Err(TrainError::Disconnected);
    }
    let n = graph.atom_count();
    (0..k)
        .map(|_| Ok(extract_one(graph, rng.gen_range(0..n), rng)))
        .collect()
}

fn extract_one(graph: &MolecularGraph, first: usize, rng: &mut impl Rng) -> GenerationTrace {
    let n = graph.atom_count();
    let mut built = vec![false; graph.bond_count()];
    let mut connected = vec![false; n];
    connected[first] = true;
    let mut queue = VecDeque::from([first]);
    let mut steps = Vec::new();
    let mut shuffle_sizes = Vec::new();

    while let Some(&v) = queue.front() {
        let mut rem: Vec<usize> = graph
            .bonds()
            .iter()
            .enumerate()
            .filter(|(i, b)| !built[*i] && (b.a == v || b.b == v))
            .map(|(i, _)| i)
            .collect();
        shuffle_sizes.push(rem.len());
        rem.shuffle(rng);
        let mut remaining = rem.len();
        for idx in rem {
            let bond = &graph.bonds()[idx];
            let target = if bond.a == v { bond.b } else { bond.a };
            steps.push(TraceStep {
                focus: v,
                action: TraceAction::Edge {
                    target,
                    order: bond.order,
                },
                remaining_edges: remaining,
            });
            built[idx] = true;
            remaining -= 1;
            if !connected[target] {
                connected[target] = true;
                queue.push_back(target);
            }
        }
        steps.push(TraceStep {
            focus: v,
            action: TraceAction::Stop,
            remaining_edges: 0,
        });
        queue.pop_front();
    }

    GenerationTrace {
        source_key: graph.canonical_key(),
        atoms: n,
        first_focus: first,
        steps,
        shuffle_sizes,
    }
}

/// Every distinct trace of a connected graph; exponential, intended for
/// small oracle graphs only.
pub fn enumerate_all_traces(graph: &MolecularGraph) -> Result<Vec<GenerationTrace>, TrainError> {
    if !graph.is_connected() {
        return Err(TrainError::Disconnected);
    }
    let n = graph.atom_count();
    let mut out = Vec::new();
    for first in 0..n {
        let mut built = vec![false; graph.bond_count()];
        let mut connected = vec![false; n];
        connected[first] = true;
        let mut queue = VecDeque::from([first]);
        let mut steps = Vec::new();
        enumerate_rec(
            graph,
            &mut built,
            &mut connected,
            &mut queue,
            &mut steps,
            first,
            &mut out,
        );
    }
    Ok(out)
}

fn enumerate_rec(
    graph: &MolecularGraph,
    built: &mut Vec<bool>,
    connected: &mut Vec<bool>,
    queue: &mut VecDeque<usize>,
    steps: &mut Vec<TraceStep>,
    first: usize,
    out: &mut Vec<GenerationTrace>,
) {
    let Some(&v) = queue.front() else {
        // complete: derive per-focus shuffle sizes from the step record
        let mut shuffle_sizes = Vec::new();
        let mut current_focus = None;
        let mut count = 0usize;
        for step in steps.iter() {
            if current_focus != Some(step.focus) {
                if current_focus.is_some() {
                    shuffle_sizes.push(count);
                }
                current_focus = Some(step.focus);
                count = 0;
            }
            if matches!(step.action, TraceAction::Edge { .. }) {
                count += 1;
            }
        }
        if current_focus.is_some() {
            shuffle_sizes.push(count);
        }
        out.push(GenerationTrace {
            source_key: graph.canonical_key(),
            atoms: graph.atom_count(),
            first_focus: first,
            steps: steps.clone(),
            shuffle_sizes,
        });
        return;
    };

    let rem: Vec<usize> = graph
        .bonds()
        .iter()
        .enumerate()
        .filter(|(i, b)| !built[*i] && (b.a == v || b.b == v))
        .map(|(i, _)| i)
        .collect();

    if rem.is_empty() {
        steps.push(TraceStep {
            focus: v,
            action: TraceAction::Stop,
            remaining_edges: 0,
        });
        let popped = queue.pop_front().unwrap();
        enumerate_rec(graph, built, connected, queue, steps, first, out);
        queue.push_front(popped);
        steps.pop();
        return;
    }

    for idx in rem.iter().copied() {
        let bond = &graph.bonds()[idx];
        let target = if bond.a == v { bond.b } else { bond.a };
        steps.push(TraceStep {
            focus: v,
            action: TraceAction::Edge {
                target,
                order: bond.order,
            },
            remaining_edges: rem.len(),
        });
        built[idx] = true;
        let newly = !connected[target];
        if newly {
            connected[target] = true;
            queue.push_back(target);
        }
        enumerate_rec(graph, built, connected, queue, steps, first, out);
        if newly {
            connected[target] = false;
            queue.pop_back();
        }
        built[idx] = false;
        steps.pop();
    }
}

/// Rebuild the bond multiset by replaying the trace; exact match against the
/// source graph is the trace invariant.
pub fn replay_matches(trace: &GenerationTrace, graph: &MolecularGraph) -> bool {
    let mut built: Vec<(usize, usize, u8)> = Vec::new();
    for step in &trace.steps {
        if let TraceAction::Edge { target, order } = step.action {
            let (a, b) = (step.focus.min(target), step.focus.max(target));
            built.push((a, b, order));
        }
    }
    built.sort_unstable();
    let mut expected: Vec<(usize, usize, u8)> = graph
        .bonds()
        .iter()
        .map(|b| (b.a, b.b, b.order))
        .collect();
    expected.sort_unstable();
    built == expected
}
