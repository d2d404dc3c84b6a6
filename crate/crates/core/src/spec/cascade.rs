//! Producer/consumer dependencies between the Einsums of a cascade.
//!
//! A read binds to the closest earlier Einsum (in listed order) that writes
//! the tensor; with no earlier writer it is an external input. This lets a
//! cascade overwrite one of its inputs (`P0[v] = ...` after reading `P0`).

use serde::Serialize;

use super::ProblemSpec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("dependency cycle among Einsums: {0:?}")]
pub struct CycleError(pub Vec<String>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CascadeDag {
    /// Einsum output names, in listed order.
    pub nodes: Vec<String>,
    /// `(producer, consumer)` node indices.
    pub edges: Vec<(usize, usize)>,
    pub topo_order: Vec<usize>,
    /// Tensors read before being written.
    pub external: Vec<String>,
}

impl CascadeDag {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    pub fn producers(&self, j: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.1 == j)
            .map(|e| e.0)
            .collect()
    }

    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.0 == i)
            .map(|e| e.1)
            .collect()
    }
}

pub fn build_cascade(spec: &ProblemSpec) -> Result<CascadeDag, CycleError> {
    let nodes: Vec<String> = spec
        .expressions
        .iter()
        .map(|e| e.name().to_string())
        .collect();
    let mut edges = Vec::new();
    for (j, e) in spec.expressions.iter().enumerate() {
        for t in e.inputs() {
            if let Some(i) = nodes[..j].iter().rposition(|n| n == t) {
                if !edges.contains(&(i, j)) {
                    edges.push((i, j));
                }
            }
        }
    }
    let dag = CascadeDag {
        topo_order: Vec::new(),
        external: spec.external_inputs(),
        nodes,
        edges,
    };
    let topo =
        topo_sort(dag.nodes.len(), &dag.edges).ok_or_else(|| CycleError(dag.nodes.clone()))?;
    Ok(CascadeDag {
        topo_order: topo,
        ..dag
    })
}

/// Kahn's algorithm, breaking ties by the smallest index.
pub fn topo_sort(n: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    for &(_, j) in edges {
        indeg[j] += 1;
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        out.push(i);
        for &(a, b) in edges {
            if a == i {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    ready.insert(b);
                }
            }
        }
    }
    (out.len() == n).then_some(out)
}
