//! CSR graph storage and the batch machinery built on top of it.
//!
//! Layout: `offsets` has `num_nodes + 1` entries; the neighbors of node `i`
//! live in `neighbors[offsets[i]..offsets[i+1]]`, sorted ascending. Undirected
//! graphs store both directions, so `num_edges` counts directed slots.
//! `degrees[i]` always equals `offsets[i+1] - offsets[i]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub degrees: Vec<usize>,
}

impl Graph {
    /// Builds a CSR graph from directed edge pairs; symmetrizes and dedups.
    /// Ids must be < `num_nodes`; unused ids are legal isolated nodes.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            for id in [u, v] {
                if id >= num_nodes {
                    return Err(Error::NodeIdRange {
                        id,
                        num_nodes,
                        context: "edge list".into(),
                    });
                }
            }
            pairs.push((u, v));
            if u != v {
                pairs.push((v, u));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(u, _) in &pairs {
            offsets[u + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let neighbors: Vec<usize> = pairs.iter().map(|&(_, v)| v).collect();
        let degrees: Vec<usize> = (0..num_nodes).map(|i| offsets[i + 1] - offsets[i]).collect();
        Ok(Graph {
            num_nodes,
            num_edges: neighbors.len(),
            offsets,
            neighbors,
            degrees,
        })
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Returns a copy with `i in N(i)` for every node (idempotent).
    pub fn with_self_loops(&self) -> Graph {
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.num_edges / 2 + self.num_nodes);
        for i in 0..self.num_nodes {
            for &j in self.neighbors_of(i) {
                if i <= j {
                    edges.push((i, j));
                }
            }
            edges.push((i, i));
        }
        Graph::from_edges(self.num_nodes, &edges).expect("ids already validated")
    }
}

/// Per-edge-slot weights of D^{-1/2} A D^{-1/2}, aligned with `Graph::neighbors`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub weights: Vec<f64>,
}

/// Weight of slot (i -> j) is 1/sqrt(d_i * d_j); zero-degree nodes own no slots.
pub fn symmetric_normalize(g: &Graph) -> NormalizedAdjacency {
    let mut weights = vec![0.0; g.num_edges];
    for i in 0..g.num_nodes {
        let di = g.degrees[i] as f64;
        for e in g.offsets[i]..g.offsets[i + 1] {
            let dj = g.degrees[g.neighbors[e]] as f64;
            weights[e] = 1.0 / (di * dj).sqrt();
        }
    }
    NormalizedAdjacency { weights }
}

/// Degree centrality: c_i = deg(i), plus the graph mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Centrality {
    pub c: Vec<f64>,
    pub c_avg: f64,
}

pub fn degree_centrality(g: &Graph) -> Centrality {
    let c: Vec<f64> = g.degrees.iter().map(|&d| d as f64).collect();
    let c_avg = if c.is_empty() {
        0.0
    } else {
        c.iter().sum::<f64>() / c.len() as f64
    };
    Centrality { c, c_avg }
}

/// Node-to-cluster assignment; every cluster is nonempty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub num_clusters: usize,
    pub assignment: Vec<usize>,
}

impl Partition {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

/// Seeded BFS region growing: k seeds claim nodes round-robin along frontier
/// queues until per-cluster quotas (within one node of ceil(n/k)) are filled;
/// disconnected leftovers go to the cluster with remaining quota nearest in a
/// seeded fallback order. Deterministic for a fixed seed.
pub fn partition_greedy(g: &Graph, k: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes;
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { k, num_nodes: n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let base = n / k;
    let extra = n % k;
    let quota: Vec<usize> = (0..k).map(|c| base + usize::from(c < extra)).collect();

    let mut assignment = vec![usize::MAX; n];
    let mut queues: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); k];
    let mut sizes = vec![0usize; k];
    for (c, &s) in order.iter().take(k).enumerate() {
        assignment[s] = c;
        sizes[c] = 1;
        for &nb in g.neighbors_of(s) {
            queues[c].push_back(nb);
        }
    }
    // Fallback scan order for disconnected remainders.
    let fallback = order.clone();
    let mut fallback_pos = 0usize;
    let mut assigned = k;
    while assigned < n {
        let mut progressed = false;
        for c in 0..k {
            if sizes[c] >= quota[c] {
                continue;
            }
            let mut claimed = None;
            while let Some(u) = queues[c].pop_front() {
                if assignment[u] == usize::MAX {
                    claimed = Some(u);
                    break;
                }
            }
            if claimed.is_none() {
                while fallback_pos < n {
                    let u = fallback[fallback_pos];
                    if assignment[u] == usize::MAX {
                        claimed = Some(u);
                        break;
                    }
                    fallback_pos += 1;
                }
            }
            if let Some(u) = claimed {
                assignment[u] = c;
                sizes[c] += 1;
                assigned += 1;
                progressed = true;
                for &nb in g.neighbors_of(u) {
                    if assignment[nb] == usize::MAX {
                        queues[c].push_back(nb);
                    }
                }
            }
        }
        debug_assert!(progressed, "region growing stalled");
        if !progressed {
            break;
        }
    }
    Ok(Partition {
        num_clusters: k,
        assignment,
    })
}

/// A mini-batch: the in-batch node set, its one-hop frontier, and each in-batch
/// node's neighbor list split into in-batch and out-of-batch halves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchContext {
    /// Sorted node ids in the batch.
    pub in_batch: Vec<usize>,
    /// Sorted node ids of N(B) \ B.
    pub frontier: Vec<usize>,
    /// Positions into `in_batch`, grouped per target by `in_offsets`.
    pub in_edges: Vec<usize>,
    pub in_offsets: Vec<usize>,
    /// Positions into `frontier`, grouped per target by `out_offsets`.
    pub out_edges: Vec<usize>,
    pub out_offsets: Vec<usize>,
}

impl BatchContext {
    pub fn in_degree(&self, t: usize) -> usize {
        self.in_offsets[t + 1] - self.in_offsets[t]
    }

    pub fn out_degree(&self, t: usize) -> usize {
        self.out_offsets[t + 1] - self.out_offsets[t]
    }
}

/// Builds the context for the union of `cluster_ids`; errors on an empty set.
pub fn make_batch(g: &Graph, p: &Partition, cluster_ids: &[usize]) -> Result<BatchContext> {
    if cluster_ids.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut in_cluster = vec![false; p.num_clusters];
    for &c in cluster_ids {
        if c >= p.num_clusters {
            return Err(Error::InvalidArg {
                op: "make_batch".into(),
                details: format!("cluster {c} out of {}", p.num_clusters),
            });
        }
        in_cluster[c] = true;
    }
    let in_batch: Vec<usize> = (0..g.num_nodes)
        .filter(|&i| in_cluster[p.assignment[i]])
        .collect();
    let mut batch_pos = vec![usize::MAX; g.num_nodes];
    for (pos, &i) in in_batch.iter().enumerate() {
        batch_pos[i] = pos;
    }
    let mut on_frontier = vec![false; g.num_nodes];
    for &i in &in_batch {
        for &j in g.neighbors_of(i) {
            if batch_pos[j] == usize::MAX {
                on_frontier[j] = true;
            }
        }
    }
    let frontier: Vec<usize> = (0..g.num_nodes).filter(|&i| on_frontier[i]).collect();
    let mut frontier_pos = vec![usize::MAX; g.num_nodes];
    for (pos, &i) in frontier.iter().enumerate() {
        frontier_pos[i] = pos;
    }
    let mut in_edges = Vec::new();
    let mut out_edges = Vec::new();
    let mut in_offsets = Vec::with_capacity(in_batch.len() + 1);
    let mut out_offsets = Vec::with_capacity(in_batch.len() + 1);
    in_offsets.push(0);
    out_offsets.push(0);
    for &i in &in_batch {
        for &j in g.neighbors_of(i) {
            if batch_pos[j] != usize::MAX {
                in_edges.push(batch_pos[j]);
            } else {
                out_edges.push(frontier_pos[j]);
            }
        }
        in_offsets.push(in_edges.len());
        out_offsets.push(out_edges.len());
    }
    Ok(BatchContext {
        in_batch,
        frontier,
        in_edges,
        in_offsets,
        out_edges,
        out_offsets,
    })
}
