//! Bipartite user–item interaction graphs and edge-dropout views.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Compressed adjacency for one side of the bipartition.
///
/// Row `r` owns `indices[offsets[r]..offsets[r + 1]]`, sorted ascending;
/// `sources[e]` repeats the row id for every entry `e`. The arrays are shared
/// so that the encoder can hand them to the tape without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    offsets: Arc<[usize]>,
    indices: Arc<[u32]>,
    sources: Arc<[u32]>,
}

impl Csr {
    fn from_pairs(n_rows: usize, pairs: impl Iterator<Item = (u32, u32)>) -> Csr {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n_rows];
        for (r, c) in pairs {
            rows[r as usize].push(c);
        }
        let mut offsets = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut sources = Vec::new();
        offsets.push(0);
        for (r, mut cols) in rows.into_iter().enumerate() {
            cols.sort_unstable();
            sources.extend(std::iter::repeat_n(r as u32, cols.len()));
            indices.extend(cols);
            offsets.push(indices.len());
        }
        Csr {
            offsets: offsets.into(),
            indices: indices.into(),
            sources: sources.into(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn degree(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn offsets(&self) -> &Arc<[usize]> {
        &self.offsets
    }

    pub fn indices(&self) -> &Arc<[u32]> {
        &self.indices
    }

    pub fn sources(&self) -> &Arc<[u32]> {
        &self.sources
    }
}

/// A node of the bipartite graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    User(u32),
    Item(u32),
}

/// Read access shared by full graphs and dropout views.
pub trait GraphView {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn user_adjacency(&self) -> &Csr;
    fn item_adjacency(&self) -> &Csr;

    fn n_edges(&self) -> usize {
        self.user_adjacency().nnz()
    }

    fn user_degree(&self, u: usize) -> usize {
        self.user_adjacency().degree(u)
    }

    fn item_degree(&self, i: usize) -> usize {
        self.item_adjacency().degree(i)
    }

    /// Sorted neighbours of `node`.
    fn neighbors(&self, node: Node) -> Result<&[u32]> {
        match node {
            Node::User(u) if (u as usize) < self.n_users() => {
                Ok(self.user_adjacency().row(u as usize))
            }
            Node::Item(i) if (i as usize) < self.n_items() => {
                Ok(self.item_adjacency().row(i as usize))
            }
            _ => Err(Error::Range(format!("{node:?} not in graph"))),
        }
    }

    fn has_edge(&self, user: u32, item: u32) -> bool {
        (user as usize) < self.n_users()
            && self
                .user_adjacency()
                .row(user as usize)
                .binary_search(&item)
                .is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    edges: Vec<(u32, u32)>,
    users: Csr,
    items: Csr,
}

/// Builds a graph from deduplicated `(user, item)` pairs.
pub fn build_graph(
    edges: &[(u32, u32)],
    n_users: usize,
    n_items: usize,
) -> Result<InteractionGraph> {
    for &(u, i) in edges {
        if u as usize >= n_users || i as usize >= n_items {
            return Err(Error::GraphBuild(format!(
                "edge ({u}, {i}) outside {n_users} users x {n_items} items"
            )));
        }
    }
    let users = Csr::from_pairs(n_users, edges.iter().copied());
    for u in 0..n_users {
        if users.row(u).windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::GraphBuild(format!("duplicate edge at user {u}")));
        }
    }
    let items = Csr::from_pairs(n_items, edges.iter().map(|&(u, i)| (i, u)));
    Ok(InteractionGraph {
        n_users,
        n_items,
        edges: edges.to_vec(),
        users,
        items,
    })
}

impl InteractionGraph {
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }
}

impl GraphView for InteractionGraph {
    fn n_users(&self) -> usize {
        self.n_users
    }
    fn n_items(&self) -> usize {
        self.n_items
    }
    fn user_adjacency(&self) -> &Csr {
        &self.users
    }
    fn item_adjacency(&self) -> &Csr {
        &self.items
    }
}

/// A masked view `(V, M ⊙ E)` of a parent graph.
#[derive(Debug, Clone)]
pub struct SubGraph<'g> {
    parent: &'g InteractionGraph,
    mask: Vec<bool>,
    users: Csr,
    items: Csr,
}

impl<'g> SubGraph<'g> {
    pub fn from_mask(parent: &'g InteractionGraph, mask: Vec<bool>) -> Result<SubGraph<'g>> {
        if mask.len() != parent.edges.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} edges",
                mask.len(),
                parent.edges.len()
            )));
        }
        let kept = || {
            parent
                .edges
                .iter()
                .zip(&mask)
                .filter(|(_, &keep)| keep)
                .map(|(&e, _)| e)
        };
        let users = Csr::from_pairs(parent.n_users, kept());
        let items = Csr::from_pairs(parent.n_items, kept().map(|(u, i)| (i, u)));
        Ok(SubGraph {
            parent,
            mask,
            users,
            items,
        })
    }

    pub fn parent(&self) -> &'g InteractionGraph {
        self.parent
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn retained(&self) -> usize {
        self.users.nnz()
    }
}

impl GraphView for SubGraph<'_> {
    fn n_users(&self) -> usize {
        self.parent.n_users
    }
    fn n_items(&self) -> usize {
        self.parent.n_items
    }
    fn user_adjacency(&self) -> &Csr {
        &self.users
    }
    fn item_adjacency(&self) -> &Csr {
        &self.items
    }
}

/// Drops each edge independently with probability `rho`.
pub fn edge_dropout(g: &InteractionGraph, rho: f64, seed: u64) -> Result<SubGraph<'_>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("dropout rate {rho} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = (0..g.edges.len())
        .map(|_| rng.gen::<f64>() >= rho)
        .collect();
    SubGraph::from_mask(g, mask)
}
