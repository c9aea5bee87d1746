//! Coherence graphs and an exact maximum clique solver.
//!
//! The solver first applies optimality-preserving reductions on the
//! complement graph, then runs a branch and bound in the MCQ family on what
//! remains: candidate sets are greedily colored, and a branch is cut when the
//! current clique plus the number of colors left cannot beat the incumbent.
//! Vertices are processed in degeneracy order and the incumbent is seeded
//! with a greedy clique.

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;

const WORD: usize = 64;

/// Fixed-size bitset over vertex positions.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn empty(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(WORD)])
    }

    fn full(n: usize) -> Self {
        let mut b = Self::empty(n);
        for i in 0..n {
            b.insert(i);
        }
        b
    }

    fn insert(&mut self, i: usize) {
        self.0[i / WORD] |= 1 << (i % WORD);
    }

    fn remove(&mut self, i: usize) {
        self.0[i / WORD] &= !(1 << (i % WORD));
    }

    fn contains(&self, i: usize) -> bool {
        self.0[i / WORD] & (1 << (i % WORD)) != 0
    }

    fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn first(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, &w)| w != 0)
            .map(|(k, &w)| k * WORD + w.trailing_zeros() as usize)
    }

    fn and(&self, other: &Bits) -> Bits {
        Bits(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    fn and_not_assign(&mut self, other: &Bits) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a &= !b;
        }
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let t = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(k * WORD + t)
            })
        })
    }
}

/// Simple undirected graph on `0..n` stored as adjacency bitsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueGraph {
    n: usize,
    adj: Vec<Bits>,
}

impl CliqueGraph {
    pub fn edgeless(n: usize) -> Self {
        Self {
            n,
            adj: vec![Bits::empty(n); n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::edgeless(n);
        for i in 0..n {
            for j in (i + 1)..n {
                g.add_edge(i, j);
            }
        }
        g
    }

    /// Builds a graph from `(i, j)` pairs (0-based). Self loops and
    /// out-of-range endpoints are rejected; duplicates are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::edgeless(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Input(format!(
                    "edge ({i}, {j}) out of range for {n} vertices"
                )));
            }
            if i == j {
                return Err(Error::Input(format!("self loop on vertex {i}")));
            }
            g.add_edge(i, j);
        }
        Ok(g)
    }

    /// # Panics
    /// On a self loop or an out-of-range endpoint.
    pub fn add_edge(&mut self, i: usize, j: usize) {
        assert!(i != j, "self loop on vertex {i}");
        self.adj[i].insert(j);
        self.adj[j].insert(i);
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) {
        self.adj[i].remove(j);
        self.adj[j].remove(i);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].contains(j)
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].count()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Bits::count).sum::<usize>() / 2
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| {
                self.adj[i]
                    .iter()
                    .filter(move |&j| j > i)
                    .map(move |j| (i, j))
            })
            .collect()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.adj[v].iter().collect()
    }

    pub fn is_clique(&self, vertices: &[usize]) -> bool {
        vertices.iter().enumerate().all(|(a, &i)| {
            vertices[a + 1..]
                .iter()
                .all(|&j| i != j && i < self.n && j < self.n && self.has_edge(i, j))
        })
    }

    /// Graph with vertex `v` renamed to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut g = Self::edgeless(self.n);
        for (i, j) in self.edges() {
            g.add_edge(perm[i], perm[j]);
        }
        g
    }
}

/// A set of pairwise adjacent vertices, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clique {
    vertices: Vec<usize>,
}

impl Clique {
    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn size(&self) -> usize {
        self.vertices.len()
    }

    pub fn into_vertices(self) -> Vec<usize> {
        self.vertices
    }

    fn from_unsorted(mut vertices: Vec<usize>) -> Self {
        vertices.sort_unstable();
        Clique { vertices }
    }
}

/// Edge `(i, j)` iff `|K[i][j]| <= mu0` for `i != j`.
pub fn build_adjacency(k: &GramMatrix, mu0: f64) -> CliqueGraph {
    let n = k.len();
    let mut g = CliqueGraph::edgeless(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if k.get(i, j).abs() <= mu0 {
                g.add_edge(i, j);
            }
        }
    }
    g
}

/// Vertices ordered so that each one has the fewest neighbours among those
/// removed after it (reverse of the min-degree peeling order). Ties go to the
/// lowest index.
fn degeneracy_order(g: &CliqueGraph) -> Vec<usize> {
    let n = g.n;
    let mut degree: Vec<usize> = (0..n).map(|v| g.degree(v)).collect();
    let mut removed = vec![false; n];
    let mut peel = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| !removed[v])
            .min_by_key(|&v| (degree[v], v))
            .expect("vertices remain");
        removed[v] = true;
        for u in g.adj[v].iter() {
            if !removed[u] {
                degree[u] -= 1;
            }
        }
        peel.push(v);
    }
    peel.reverse();
    peel
}

struct Search<'a> {
    adj: &'a [Bits],
    best: Vec<usize>,
    current: Vec<usize>,
    nodes: u64,
    budget: Option<u64>,
}

impl Search<'_> {
    /// First-fit coloring of `p` in position order. Returns the vertices
    /// whose color exceeds `kmin`, listed by ascending color, with their
    /// color numbers; vertices at or below `kmin` cannot improve the
    /// incumbent and are omitted. A vertex that would open a class above
    /// `kmin` is first tried against a one-conflict swap into a lower class.
    fn color_sort(&self, p: &Bits, kmin: usize) -> (Vec<usize>, Vec<usize>) {
        let mut classes: Vec<Bits> = Vec::new();
        let n = self.adj.len();
        let fits =
            |class: &Bits, v: usize| class.0.iter().zip(&self.adj[v].0).all(|(a, b)| a & b == 0);
        for v in p.iter() {
            let mut k = classes
                .iter()
                .position(|c| fits(c, v))
                .unwrap_or(classes.len());
            if k >= kmin && kmin > 0 && self.renumber(&mut classes, v, kmin) {
                continue;
            }
            if k == classes.len() {
                classes.push(Bits::empty(n));
                k = classes.len() - 1;
            }
            classes[k].insert(v);
        }
        let mut order = Vec::new();
        let mut colors = Vec::new();
        for (k, class) in classes.iter().enumerate().skip(kmin) {
            for v in class.iter() {
                order.push(v);
                colors.push(k + 1);
            }
        }
        (order, colors)
    }

    /// Places `v` in a class below `kmin` by moving its single conflicting
    /// neighbour `w` to a later class below `kmin` that accepts it.
    fn renumber(&self, classes: &mut [Bits], v: usize, kmin: usize) -> bool {
        let kmin = kmin.min(classes.len());
        for k1 in 0..kmin {
            let conflict = classes[k1].and(&self.adj[v]);
            if conflict.count() != 1 {
                continue;
            }
            let w = conflict.first().expect("one conflict");
            for k2 in (k1 + 1)..kmin {
                if classes[k2].and(&self.adj[w]).is_empty() {
                    classes[k1].remove(w);
                    classes[k1].insert(v);
                    classes[k2].insert(w);
                    return true;
                }
            }
        }
        false
    }

    fn expand(&mut self, mut p: Bits) -> Result<()> {
        self.nodes += 1;
        if let Some(b) = self.budget {
            if self.nodes > b {
                return Err(Error::BudgetExceeded(b));
            }
        }
        let kmin = self.best.len().saturating_sub(self.current.len());
        let (order, colors) = self.color_sort(&p, kmin);
        for i in (0..order.len()).rev() {
            if self.current.len() + colors[i] <= self.best.len() {
                return Ok(());
            }
            let v = order[i];
            self.current.push(v);
            let next = p.and(&self.adj[v]);
            if next.is_empty() {
                if self.current.len() > self.best.len() {
                    self.best = self.current.clone();
                }
            } else {
                self.expand(next)?;
            }
            self.current.pop();
            p.remove(v);
        }
        Ok(())
    }
}

/// Largest clique found by growing greedily from each vertex, scanning
/// candidates in position order.
fn greedy_clique(adj: &[Bits]) -> Vec<usize> {
    let n = adj.len();
    let mut best = Vec::new();
    for start in 0..n {
        let mut clique = vec![start];
        let mut cand = adj[start].clone();
        while let Some(v) = cand.first() {
            clique.push(v);
            cand = cand.and(&adj[v]);
        }
        if clique.len() > best.len() {
            best = clique;
        }
    }
    best
}

/// Exact maximum clique, deterministic for a given graph.
pub fn maximum_clique(g: &CliqueGraph) -> Clique {
    maximum_clique_with_budget(g, None).expect("unbounded search cannot exceed its budget")
}

/// Root reductions that never lose optimality, phrased on non-neighbours
/// (the complement graph):
///
/// - a vertex with no non-neighbour joins the clique;
/// - a vertex with exactly one non-neighbour joins the clique and that
///   non-neighbour is dropped;
/// - of two non-adjacent `u`, `v`, `v` is dropped when every non-neighbour
///   of `u` is also a non-neighbour of `v` (`v` can always be swapped for `u`).
///
/// Returns the forced vertices and the vertices left to search.
fn reduce(g: &CliqueGraph) -> (Vec<usize>, Vec<usize>) {
    let n = g.n;
    let mut alive = Bits::full(n);
    let mut forced = Vec::new();
    // alive vertices not adjacent to v, v included
    let closed_non = |alive: &Bits, v: usize| {
        let mut b = alive.clone();
        b.and_not_assign(&g.adj[v]);
        b
    };
    loop {
        let mut changed = false;
        for v in 0..n {
            if !alive.contains(v) {
                continue;
            }
            let mut non = closed_non(&alive, v);
            non.remove(v);
            match non.count() {
                0 => {
                    forced.push(v);
                    alive.remove(v);
                    changed = true;
                }
                1 => {
                    forced.push(v);
                    alive.remove(v);
                    alive.remove(non.first().expect("one non-neighbour"));
                    changed = true;
                }
                _ => {}
            }
        }
        for v in 0..n {
            if !alive.contains(v) {
                continue;
            }
            let nv = closed_non(&alive, v);
            let dominated = nv.iter().filter(|&u| u != v).any(|u| {
                let mut nu = closed_non(&alive, u);
                nu.and_not_assign(&nv);
                nu.is_empty()
            });
            if dominated {
                alive.remove(v);
                changed = true;
            }
        }
        if !changed {
            return (forced, alive.iter().collect());
        }
    }
}

/// Exact maximum clique, aborting with [`Error::BudgetExceeded`] once more
/// than `budget` search nodes have been expanded.
pub fn maximum_clique_with_budget(g: &CliqueGraph, budget: Option<u64>) -> Result<Clique> {
    if g.n == 0 {
        return Ok(Clique {
            vertices: Vec::new(),
        });
    }
    let (mut forced, kept) = reduce(g);
    let n = kept.len();
    if n > 0 {
        let mut sub = CliqueGraph::edgeless(n);
        for (a, &u) in kept.iter().enumerate() {
            for (b, &v) in kept.iter().enumerate().skip(a + 1) {
                if g.has_edge(u, v) {
                    sub.add_edge(a, b);
                }
            }
        }
        let order = degeneracy_order(&sub);
        let mut pos = vec![0; n];
        for (p, &v) in order.iter().enumerate() {
            pos[v] = p;
        }
        // adjacency in position space
        let adj: Vec<Bits> = order
            .iter()
            .map(|&v| {
                let mut b = Bits::empty(n);
                for u in sub.adj[v].iter() {
                    b.insert(pos[u]);
                }
                b
            })
            .collect();
        let mut search = Search {
            adj: &adj,
            best: greedy_clique(&adj),
            current: Vec::new(),
            nodes: 0,
            budget,
        };
        search.expand(Bits::full(n))?;
        forced.extend(search.best.iter().map(|&p| kept[order[p]]));
    }
    let clique = Clique::from_unsorted(forced);
    assert!(
        g.is_clique(clique.vertices()),
        "solver returned a non-clique"
    );
    Ok(clique)
}

/// Plain include/exclude enumeration with a size bound. Exponential; meant
/// for cross-checking the branch and bound on small graphs.
pub fn exhaustive_maximum_clique(g: &CliqueGraph) -> Clique {
    fn rec(g: &CliqueGraph, start: usize, current: &mut Vec<usize>, best: &mut Vec<usize>) {
        if current.len() > best.len() {
            *best = current.clone();
        }
        for v in start..g.n {
            if current.len() + (g.n - v) <= best.len() {
                return;
            }
            if current.iter().all(|&u| g.has_edge(u, v)) {
                current.push(v);
                rec(g, v + 1, current, best);
                current.pop();
            }
        }
    }
    let mut best = Vec::new();
    if g.n > 0 {
        rec(g, 0, &mut Vec::new(), &mut best);
    }
    Clique::from_unsorted(best)
}
