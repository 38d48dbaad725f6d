use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

/// Minimum-degree ordering of the symmetric pattern `A + Aᵀ`.
///
/// Eliminates the node of least current degree, turning its neighbourhood
/// into a clique, until every node is ordered. Ties go to the lowest index,
/// so the result is deterministic.
pub fn minimum_degree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for &i in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }

    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|i| Reverse((adj[i].len(), i))).collect();
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);

    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        for (a, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[a + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order
}
