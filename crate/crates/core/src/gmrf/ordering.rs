use std::collections::BTreeSet;

use sprs::CsMat;

/// Symmetric adjacency lists (no self loops) of a square sparsity pattern.
pub fn adjacency(pattern: &CsMat<f64>) -> Vec<Vec<usize>> {
    let n = pattern.rows();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (_, (i, j)) in pattern.iter() {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Minimum-degree elimination ordering on the explicit elimination graph.
/// Ties are broken by the lower node index, so the result is deterministic.
/// Returns `perm` with `perm[new] = old`.
pub fn minimum_degree(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut graph: Vec<BTreeSet<usize>> = adj.iter().map(|a| a.iter().copied().collect()).collect();
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (graph[v].len(), v)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, v)) = queue.pop_first() {
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut graph[v]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(graph[u].len(), u));
            graph[u].remove(&v);
            for &w in &nbrs {
                if w != u {
                    graph[u].insert(w);
                }
            }
            queue.insert((graph[u].len(), u));
        }
    }
    perm
}

/// Inverse of a permutation given as `perm[new] = old`.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}
