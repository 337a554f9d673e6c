//! Constrained sequential graph decoding: node initialization from latent
//! vectors, a breadth-first focus queue, masked edge/label distributions,
//! and sampling. The valency masks make every reachable partial graph — and
//! therefore every finished molecule — structurally valid by construction.

use crate::molgraph::{GraphError, MolecularGraph, ValencyTable};
use crate::neural::{
    self, global_aggregate, matvec, ggnn_propagate, standard_normal, ModelParams, NeuralError,
    NodeStates,
};
use rand::Rng;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("node count must be at least 1")]
    NoNodes,
    #[error("latent specification has {got} entries, expected {expected}")]
    LatentSizeMismatch { expected: usize, got: usize },
    #[error("label index {0} outside the vocabulary")]
    BadLabel(usize),
    #[error("focus queue is empty")]
    EmptyQueue,
    #[error("atom {0} is not in the focus queue")]
    NotFocused(usize),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Hop-count feature is capped here; unreachable pairs are encoded as −1.
pub const DISTANCE_CAP: u32 = 10;

/// Per-node latent vectors with their interpreted element labels.
#[derive(Debug, Clone)]
pub struct LatentSpec {
    pub latents: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Element-label scores f(z) for one latent vector.
pub fn label_scores(params: &ModelParams, z: &[f64]) -> Vec<f64> {
    let mut scores = vec![0.0; params.vocab.len()];
    matvec(
        params.slice(&params.layout.label_w),
        Some(params.slice(&params.layout.label_b)),
        z,
        &mut scores,
    );
    scores
}

/// argmax with ties broken toward the lower vocabulary index.
pub fn argmax_label(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Draw per-node latents from the standard normal and interpret labels.
pub fn sample_latents(params: &ModelParams, n: usize, rng: &mut impl Rng) -> LatentSpec {
    let mut latents = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..params.d).map(|_| standard_normal(rng)).collect();
        labels.push(argmax_label(&label_scores(params, &z)));
        latents.push(z);
    }
    LatentSpec { latents, labels }
}

/// One decoding trajectory's mutable state. The partial graph always
/// contains every seed node; never-connected surplus nodes are dropped only
/// when the finished molecule is extracted.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub graph: MolecularGraph,
    pub latents: Vec<Vec<f64>>,
    pub init_states: NodeStates,
    pub states: NodeStates,
    pub h_init: Vec<f64>,
    pub queue: VecDeque<usize>,
    pub closed: Vec<bool>,
    pub connected: Vec<bool>,
    pub first_focus: usize,
    pub step: usize,
}

/// Edge mask row M and label mask rows m for one focus atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRow {
    /// M over candidate targets u: true where an edge v↔u is permitted.
    pub edge: Vec<bool>,
    /// m over (u, order): true where that bond order fits both endpoints.
    pub label: Vec<[bool; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCandidate {
    pub target: usize,
    pub order: u8,
    pub probability: f64,
}

/// Masked joint distribution over edge candidates plus the stop action.
#[derive(Debug, Clone)]
pub struct EdgeDistribution {
    pub candidates: Vec<EdgeCandidate>,
    pub stop_probability: f64,
    pub masks: MaskRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Edge { target: usize, order: u8 },
    Stop,
}

/// Set up `n` seed nodes: latents (drawn if not supplied), interpreted
/// labels, projected initial states, and one uniformly random first focus.
pub fn init_nodes(
    params: &ModelParams,
    table: &ValencyTable,
    n: usize,
    rng: &mut impl Rng,
    latents: Option<LatentSpec>,
) -> Result<GenerationState, GeneratorError> {
    if n == 0 {
        return Err(GeneratorError::NoNodes);
    }
    let spec = match latents {
        Some(spec) => {
            if spec.latents.len() != n || spec.labels.len() != n {
                return Err(GeneratorError::LatentSizeMismatch {
                    expected: n,
                    got: spec.latents.len().min(spec.labels.len()),
                });
            }
            spec
        }
        None => sample_latents(params, n, rng),
    };

    let mut graph = MolecularGraph::new();
    let vocab_len = params.vocab.len();
    for &label in &spec.labels {
        if label >= vocab_len {
            return Err(GeneratorError::BadLabel(label));
        }
        graph.add_atom(table, &params.vocab[label])?;
    }

    let init_states = project_initial_states(params, &spec)?;
    let h_init = global_aggregate(&init_states)?;
    let first_focus = rng.gen_range(0..n);
    let mut connected = vec![false; n];
    connected[first_focus] = true;

    Ok(GenerationState {
        graph,
        latents: spec.latents,
        states: init_states.clone(),
        init_states,
        h_init,
        queue: VecDeque::from([first_focus]),
        closed: vec![false; n],
        connected,
        first_focus,
        step: 0,
    })
}

/// h_v(0) = tanh(W [z_v ‖ one-hot(τ_v)] + b).
pub fn project_initial_states(
    params: &ModelParams,
    spec: &LatentSpec,
) -> Result<NodeStates, GeneratorError> {
    let d = params.d;
    let vocab_len = params.vocab.len();
    let mut rows = Vec::with_capacity(spec.latents.len());
    for (z, &label) in spec.latents.iter().zip(&spec.labels) {
        if z.len() != d {
            return Err(GeneratorError::Neural(NeuralError::DimensionMismatch {
                expected: d,
                got: z.len(),
            }));
        }
        if label >= vocab_len {
            return Err(GeneratorError::BadLabel(label));
        }
        let mut input = vec![0.0; d + vocab_len];
        input[..d].copy_from_slice(z);
        input[d + label] = 1.0;
        let mut h = vec![0.0; d];
        matvec(
            params.slice(&params.layout.dec_init_w),
            Some(params.slice(&params.layout.dec_init_b)),
            &input,
            &mut h,
        );
        for x in &mut h {
            *x = x.tanh();
        }
        rows.push(h);
    }
    Ok(NodeStates::from_rows(&rows))
}

/// The valency masks for focus `v`: a target qualifies when both endpoints
/// have spare valence, no v↔u bond exists, u ≠ v, and u is not stop-closed;
/// a bond order additionally has to fit the remaining capacity of both
/// endpoints.
pub fn compute_masks(state: &GenerationState, v: usize) -> Result<MaskRow, GeneratorError> {
    if !state.queue.contains(&v) {
        return Err(GeneratorError::NotFocused(v));
    }
    let n = state.graph.atom_count();
    let cap_v = state.graph.remaining_valence(v);
    let mut edge = vec![false; n];
    let mut label = vec![[false; 3]; n];
    if cap_v == 0 {
        return Ok(MaskRow { edge, label });
    }
    for u in 0..n {
        if u == v || state.closed[u] {
            continue;
        }
        if state.graph.bond_between(v, u).is_some() {
            continue;
        }
        let cap_u = state.graph.remaining_valence(u);
        if cap_u == 0 {
            continue;
        }
        edge[u] = true;
        let fit = cap_v.min(cap_u).min(3);
        for l in 1..=fit {
            label[u][(l - 1) as usize] = true;
        }
    }
    Ok(MaskRow { edge, label })
}

/// φ_{v,u} = [h_v ‖ h_u ‖ d_{v,u} ‖ H_init ‖ H_t].
pub fn build_phi(state: &GenerationState, v: usize, u: usize, h_t: &[f64]) -> Vec<f64> {
    let d = state.states.dim();
    let mut phi = Vec::with_capacity(neural::phi_dim(d));
    phi.extend_from_slice(state.states.node(v));
    phi.extend_from_slice(state.states.node(u));
    phi.push(distance_feature(&state.graph, v, u));
    phi.extend_from_slice(&state.h_init);
    phi.extend_from_slice(h_t);
    phi
}

pub fn distance_feature(graph: &MolecularGraph, v: usize, u: usize) -> f64 {
    match graph.graph_distance(v, u).expect("indices in range") {
        Some(hops) => f64::from(hops.min(DISTANCE_CAP)),
        None => -1.0,
    }
}

/// Stop logit from [h_v ‖ H_t].
pub fn stop_logit(params: &ModelParams, h_v: &[f64], h_t: &[f64]) -> f64 {
    let mut input = Vec::with_capacity(2 * h_v.len());
    input.extend_from_slice(h_v);
    input.extend_from_slice(h_t);
    let mut out = [0.0];
    matvec(
        params.slice(&params.layout.stop_w),
        Some(params.slice(&params.layout.stop_b)),
        &input,
        &mut out,
    );
    out[0]
}

fn scalar_score(params: &ModelParams, w: &std::ops::Range<usize>, b: &std::ops::Range<usize>, x: &[f64]) -> f64 {
    let mut out = [0.0];
    matvec(params.slice(w), Some(params.slice(b)), x, &mut out);
    out[0]
}

/// Masked softmax over candidate targets with the stop logit appended,
/// times a masked per-order softmax. Masked candidates never appear;
/// when everything is masked the stop probability is exactly 1.
pub fn edge_distribution(
    state: &GenerationState,
    v: usize,
    params: &ModelParams,
) -> Result<EdgeDistribution, GeneratorError> {
    let masks = compute_masks(state, v)?;
    let h_t = global_aggregate(&state.states)?;

    let targets: Vec<usize> = (0..state.graph.atom_count()).filter(|&u| masks.edge[u]).collect();
    if targets.is_empty() {
        return Ok(EdgeDistribution {
            candidates: Vec::new(),
            stop_probability: 1.0,
            masks,
        });
    }

    let phis: Vec<Vec<f64>> = targets.iter().map(|&u| build_phi(state, v, u, &h_t)).collect();
    let mut logits: Vec<f64> = phis
        .iter()
        .map(|phi| scalar_score(params, &params.layout.edge_score_w, &params.layout.edge_score_b, phi))
        .collect();
    logits.push(stop_logit(params, state.states.node(v), &h_t));

    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let target_probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let stop_probability = target_probs[targets.len()];

    let mut candidates = Vec::new();
    for (i, &u) in targets.iter().enumerate() {
        let allowed: Vec<u8> = (1..=3).filter(|&l| masks.label[u][(l - 1) as usize]).collect();
        debug_assert!(!allowed.is_empty(), "edge-masked target must admit order 1");
        let label_logits: Vec<f64> = allowed
            .iter()
            .map(|&l| {
                scalar_score(
                    params,
                    &params.layout.label_score_w[(l - 1) as usize],
                    &params.layout.label_score_b[(l - 1) as usize],
                    &phis[i],
                )
            })
            .collect();
        let lmax = label_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lexps: Vec<f64> = label_logits.iter().map(|l| (l - lmax).exp()).collect();
        let lz: f64 = lexps.iter().sum();
        for (j, &order) in allowed.iter().enumerate() {
            candidates.push(EdgeCandidate {
                target: u,
                order,
                probability: target_probs[i] * lexps[j] / lz,
            });
        }
    }

    Ok(EdgeDistribution {
        candidates,
        stop_probability,
        masks,
    })
}

/// Draw one action from the distribution.
pub fn sample_action(dist: &EdgeDistribution, rng: &mut impl Rng) -> Action {
    let roll: f64 = rng.gen();
    let mut acc = 0.0;
    for cand in &dist.candidates {
        acc += cand.probability;
        if roll < acc {
            return Action::Edge {
                target: cand.target,
                order: cand.order,
            };
        }
    }
    Action::Stop
}

impl GenerationState {
    /// Apply an edge action: bond the focus to `target`, enqueue a newly
    /// connected target, and (optionally) refresh node states by message
    /// passing from the initial states over the grown graph.
    pub fn apply_edge(
        &mut self,
        target: usize,
        order: u8,
        params: &ModelParams,
        refresh_states: bool,
    ) -> Result<(), GeneratorError> {
        let v = *self.queue.front().ok_or(GeneratorError::EmptyQueue)?;
        self.graph.add_bond(v, target, order)?;
        if !self.connected[target] {
            self.connected[target] = true;
            self.queue.push_back(target);
        }
        if refresh_states {
            // discard h^(t): recompute from the initial states on the new graph
            self.states = ggnn_propagate(&self.init_states, &self.graph, params, params.steps)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Apply a stop action: retire the focus node.
    pub fn apply_stop(&mut self) -> Result<usize, GeneratorError> {
        let v = self.queue.pop_front().ok_or(GeneratorError::EmptyQueue)?;
        self.closed[v] = true;
        self.step += 1;
        Ok(v)
    }

    pub fn focus(&self) -> Option<usize> {
        self.queue.front().copied()
    }
}

/// Sample one action for the current focus and apply it.
pub fn decode_step(
    state: &mut GenerationState,
    params: &ModelParams,
    rng: &mut impl Rng,
) -> Result<Action, GeneratorError> {
    let v = state.focus().ok_or(GeneratorError::EmptyQueue)?;
    let dist = edge_distribution(state, v, params)?;
    let action = sample_action(&dist, rng);
    match action {
        Action::Edge { target, order } => {
            state.apply_edge(target, order, params, true)?;
        }
        Action::Stop => {
            state.apply_stop()?;
        }
    }
    Ok(action)
}

/// Run a whole trajectory and return the connected component containing the
/// first focus node; surplus never-connected seeds are dropped. A single
/// atom is a legal degenerate output.
pub fn generate(
    params: &ModelParams,
    table: &ValencyTable,
    n: usize,
    rng: &mut impl Rng,
) -> Result<MolecularGraph, GeneratorError> {
    let mut state = init_nodes(params, table, n, rng, None)?;
    while state.focus().is_some() {
        decode_step(&mut state, params, rng)?;
    }
    Ok(extract_component(&state.graph, state.first_focus, table))
}

/// Copy the component containing `root` into a fresh graph, preserving the
/// relative atom order.
pub fn extract_component(
    graph: &MolecularGraph,
    root: usize,
    table: &ValencyTable,
) -> MolecularGraph {
    let mut keep = graph.component_of(root);
    keep.sort_unstable();
    let mut out = MolecularGraph::new();
    let mut map = std::collections::BTreeMap::new();
    for &v in &keep {
        let atom = &graph.atoms()[v];
        let idx = out
            .add_atom_with(table, &atom.symbol, atom.charge, atom.explicit_h)
            .expect("atom symbols come from the table");
        map.insert(v, idx);
    }
    for bond in graph.bonds() {
        if let (Some(&a), Some(&b)) = (map.get(&bond.a), map.get(&bond.b)) {
            out.add_bond(a, b, bond.order).expect("copied bonds stay valid");
        }
    }
    out
}
