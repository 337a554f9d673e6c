//! Permutation-invariant graph digests via iterative neighborhood
//! refinement (Morgan-style coloring). Not a full isomorphism test: the
//! contract is invariance under atom reindexing plus a low collision rate,
//! and collisions only cause conservative deduplication.

use super::MolecularGraph;

/// FNV-1a, fixed offset/prime so digests are stable across runs and
/// platforms (std's default hasher is randomized per process).
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn mix(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Refined per-atom colors. Two atoms in symmetric environments share a
/// color; refinement runs until the partition stabilizes.
pub(crate) fn refine_colors(graph: &MolecularGraph) -> Vec<u64> {
    let n = graph.atom_count();
    let mut colors: Vec<u64> = graph
        .atoms()
        .iter()
        .map(|a| {
            mix(&[
                fnv1a64(a.symbol.as_bytes()),
                a.charge as u64,
                u64::from(a.explicit_h),
            ])
        })
        .collect();
    let mut partition_size = distinct(&colors);
    for _ in 0..n.max(1) {
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            let mut neigh: Vec<u64> = graph
                .neighbors(v)
                .iter()
                .map(|&(u, order)| mix(&[u64::from(order), colors[u]]))
                .collect();
            neigh.sort_unstable();
            let mut parts = vec![colors[v]];
            parts.extend(neigh);
            next.push(mix(&parts));
        }
        colors = next;
        let size = distinct(&colors);
        if size == partition_size {
            break;
        }
        partition_size = size;
    }
    colors
}

fn distinct(colors: &[u64]) -> usize {
    let mut sorted = colors.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

pub(crate) fn canonical_key(graph: &MolecularGraph) -> String {
    let colors = refine_colors(graph);
    let mut node_part = colors.clone();
    node_part.sort_unstable();
    let mut edge_part: Vec<u64> = graph
        .bonds()
        .iter()
        .map(|b| {
            let (lo, hi) = if colors[b.a] <= colors[b.b] {
                (colors[b.a], colors[b.b])
            } else {
                (colors[b.b], colors[b.a])
            };
            mix(&[u64::from(b.order), lo, hi])
        })
        .collect();
    edge_part.sort_unstable();
    let mut parts = vec![graph.atom_count() as u64, graph.bond_count() as u64];
    parts.extend(node_part);
    parts.extend(edge_part);
    format!("{:016x}", mix(&parts))
}
