//! Undirected graphs, chordal completion, junction trees and sampling of
//! immorality-free DAG I-maps.
//!
//! Vertices are dense `0..num_vars` indices. The pipeline that turns a Markov
//! network structure into a Bayesian-network structure is
//! [`min_fill_chordalize`] → [`max_cardinality_search`] →
//! [`build_junction_tree`] → [`orient_pmap`]; [`sample_imap`] composes it and
//! [`sub_imap`] produces the truncated I-map over one variable and its
//! chordal neighbourhood.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Simple undirected graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UndirectedGraph {
    adj: Vec<BTreeSet<usize>>,
}

impl UndirectedGraph {
    pub fn empty(num_vars: usize) -> Self {
        Self {
            adj: vec![BTreeSet::new(); num_vars],
        }
    }

    pub fn from_edges<I>(num_vars: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = Self::empty(num_vars);
        for (u, v) in edges {
            if u >= num_vars || v >= num_vars {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {num_vars} vertices"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at {u}")));
            }
            g.insert_edge(u, v);
        }
        Ok(g)
    }

    pub(crate) fn insert_edge(&mut self, u: usize, v: usize) -> bool {
        let fresh = self.adj[u].insert(v);
        self.adj[v].insert(u);
        fresh
    }

    pub fn num_vars(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].contains(&v)
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().copied()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.range(u + 1..).map(move |&v| (u, v)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn is_clique(&self, vertices: &[usize]) -> bool {
        vertices
            .iter()
            .enumerate()
            .all(|(i, &a)| vertices[i + 1..].iter().all(|&b| self.has_edge(a, b)))
    }

    /// Subgraph induced on `vertices`. Returns the relabelled graph and the
    /// map from local to original indices.
    pub fn induced(&self, vertices: &[usize]) -> (UndirectedGraph, Vec<usize>) {
        let mut local = vec![usize::MAX; self.num_vars()];
        for (i, &v) in vertices.iter().enumerate() {
            local[v] = i;
        }
        let mut sub = UndirectedGraph::empty(vertices.len());
        for (i, &v) in vertices.iter().enumerate() {
            for w in self.neighbors(v) {
                if local[w] != usize::MAX {
                    sub.insert_edge(i, local[w]);
                }
            }
        }
        (sub, vertices.to_vec())
    }

    /// Connected components, each sorted, ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.num_vars();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![s];
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for w in self.neighbors(v) {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Stable identifier of the edge structure.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.num_vars().hash(&mut h);
        self.edges().hash(&mut h);
        h.finish()
    }

    pub fn path(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i))).expect("valid path")
    }

    pub fn cycle(n: usize) -> Self {
        let mut g = Self::path(n);
        if n > 2 {
            g.insert_edge(n - 1, 0);
        }
        g
    }

    pub fn complete(n: usize) -> Self {
        Self::from_edges(n, (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))))
            .expect("valid complete graph")
    }

    /// `rows × cols` 4-neighbour lattice, row-major vertex numbering.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let id = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
        }
        Self::from_edges(rows * cols, edges).expect("valid grid")
    }

    /// Two-rail ladder of `2 * rungs` vertices with one diagonal per square,
    /// so every square is split into two triangles and the graph is chordal.
    /// Vertex `2i` is on the top rail, `2i + 1` on the bottom rail.
    pub fn ladder(rungs: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..rungs {
            let (t, b) = (2 * i, 2 * i + 1);
            edges.push((t, b));
            if i + 1 < rungs {
                let (t2, b2) = (2 * i + 2, 2 * i + 3);
                edges.push((t, t2));
                edges.push((b, b2));
                edges.push((t, b2));
            }
        }
        Self::from_edges(2 * rungs, edges).expect("valid ladder")
    }

    /// Parses the edge-list text format: a header line `n <num_vars>` followed
    /// by one `u v` pair per line. `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing `n <num_vars>` header".into()))?;
        let mut toks = header.split_whitespace();
        let n = match (toks.next(), toks.next(), toks.next()) {
            (Some("n"), Some(n), None) => n
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad vertex count {n:?}: {e}")))?,
            _ => return Err(Error::Parse(format!("bad header {header:?}"))),
        };
        let mut edges = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Parse(format!("expected `u v`, got {line:?}")));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad vertex {s:?}: {e}")))
            };
            edges.push((parse(parts[0])?, parse(parts[1])?));
        }
        Self::from_edges(n, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n {}\n", self.num_vars());
        for (u, v) in self.edges() {
            let _ = writeln!(s, "{u} {v}");
        }
        s
    }
}

/// Brute-force chordality via maximum cardinality search: the reverse of an
/// MCS order is a perfect elimination ordering iff the graph is chordal.
pub fn check_chordal(g: &UndirectedGraph) -> bool {
    let (order, _) = max_cardinality_search(g, 0);
    let mut pos = vec![0; g.num_vars()];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    order.iter().all(|&v| {
        let earlier: Vec<usize> = g.neighbors(v).filter(|&w| pos[w] < pos[v]).collect();
        g.is_clique(&earlier)
    })
}

fn fill_in(adj: &[BTreeSet<usize>], v: usize) -> usize {
    let ns: Vec<usize> = adj[v].iter().copied().collect();
    let mut missing = 0;
    for (i, &a) in ns.iter().enumerate() {
        for &b in &ns[i + 1..] {
            if !adj[a].contains(&b) {
                missing += 1;
            }
        }
    }
    missing
}

/// Chordal completion by the greedy min-fill elimination heuristic. Ties in
/// the fill count are broken uniformly at random.
pub fn min_fill_chordalize(g: &UndirectedGraph, seed: u64) -> UndirectedGraph {
    let n = g.num_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<BTreeSet<usize>> = g.adj.clone();
    let mut out = g.clone();
    let mut alive = vec![true; n];
    let mut fill: Vec<usize> = (0..n).map(|v| fill_in(&work, v)).collect();
    let mut ties = Vec::new();

    for _ in 0..n {
        let best = (0..n).filter(|&v| alive[v]).map(|v| fill[v]).min();
        let Some(best) = best else { break };
        ties.clear();
        ties.extend((0..n).filter(|&v| alive[v] && fill[v] == best));
        let v = *ties.choose(&mut rng).expect("non-empty tie set");

        let ns: Vec<usize> = work[v].iter().copied().collect();
        for (i, &a) in ns.iter().enumerate() {
            for &b in &ns[i + 1..] {
                if work[a].insert(b) {
                    work[b].insert(a);
                    out.insert_edge(a, b);
                }
            }
        }
        for &w in &ns {
            work[w].remove(&v);
        }
        work[v].clear();
        alive[v] = false;

        // Only the neighbours of v and their neighbours can change fill.
        let mut touched: BTreeSet<usize> = ns.iter().copied().collect();
        for &w in &ns {
            touched.extend(work[w].iter().copied());
        }
        for w in touched {
            fill[w] = fill_in(&work, w);
        }
    }
    out
}

/// Maximum cardinality search with random tie-breaking. Returns the visit
/// order and the candidate cliques `{v} ∪ (earlier neighbours of v)` reduced
/// to the inclusion-maximal ones, in discovery order. On chordal graphs the
/// reversed order is a perfect elimination ordering and the cliques are the
/// maximal cliques; on any graph the cliques cover every edge.
pub fn max_cardinality_search(g: &UndirectedGraph, seed: u64) -> (Vec<usize>, Vec<Vec<usize>>) {
    let n = g.num_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weight = vec![0usize; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut candidates: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut ties = Vec::new();

    for _ in 0..n {
        let best = (0..n).filter(|&v| !visited[v]).map(|v| weight[v]).max();
        let Some(best) = best else { break };
        ties.clear();
        ties.extend((0..n).filter(|&v| !visited[v] && weight[v] == best));
        let v = *ties.choose(&mut rng).expect("non-empty tie set");

        let mut clique: Vec<usize> = g.neighbors(v).filter(|&w| visited[w]).collect();
        clique.push(v);
        clique.sort_unstable();
        candidates.push(clique);

        visited[v] = true;
        order.push(v);
        for w in g.neighbors(v) {
            if !visited[w] {
                weight[w] += 1;
            }
        }
    }

    let mut by_size: Vec<usize> = (0..candidates.len()).collect();
    by_size.sort_by_key(|&i| std::cmp::Reverse(candidates[i].len()));
    let mut keep = vec![false; candidates.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in by_size {
        let c = &candidates[i];
        let dominated = kept.iter().any(|&k| is_subset(c, &candidates[k]));
        if !dominated {
            keep[i] = true;
            kept.push(i);
        }
    }
    let cliques = candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then_some(c))
        .collect();
    (order, cliques)
}

fn is_subset(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && small.iter().all(|x| big.binary_search(x).is_ok())
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.binary_search(x).is_ok()).count()
}

/// Clique tree over the maximal cliques of a chordal graph.
///
/// Disconnected graphs give a forest; `roots` holds one root per component,
/// i.e. the children of a virtual root joining the forest into one tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JunctionTree {
    pub cliques: Vec<Vec<usize>>,
    pub parent: Vec<Option<usize>>,
    pub roots: Vec<usize>,
}

impl JunctionTree {
    pub fn root(&self) -> Option<usize> {
        self.roots.first().copied()
    }

    pub fn children(&self, c: usize) -> Vec<usize> {
        (0..self.cliques.len())
            .filter(|&d| self.parent[d] == Some(c))
            .collect()
    }

    /// Tree edges as undirected adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.cliques.len()];
        for (c, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                adj[c].push(p);
                adj[p].push(c);
            }
        }
        adj
    }

    pub fn separator_weight(&self, a: usize, b: usize) -> usize {
        intersection_size(&self.cliques[a], &self.cliques[b])
    }

    /// For every vertex, the cliques containing it form a connected subtree.
    pub fn has_running_intersection(&self, num_vars: usize) -> bool {
        let adj = self.adjacency();
        (0..num_vars).all(|v| {
            let holders: Vec<usize> = (0..self.cliques.len())
                .filter(|&c| self.cliques[c].binary_search(&v).is_ok())
                .collect();
            let Some(&start) = holders.first() else {
                return true;
            };
            let mut seen = vec![false; self.cliques.len()];
            seen[start] = true;
            let mut stack = vec![start];
            let mut reached = 1;
            while let Some(c) = stack.pop() {
                for &d in &adj[c] {
                    if !seen[d] && self.cliques[d].binary_search(&v).is_ok() {
                        seen[d] = true;
                        reached += 1;
                        stack.push(d);
                    }
                }
            }
            reached == holders.len()
        })
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// Samples a maximum-weight spanning tree of the clique graph with separator
/// weights `|C_i ∩ C_j|` (Kruskal over randomly shuffled ties), then roots each
/// component at a uniformly chosen clique. Zero-weight pairs are never joined.
pub fn build_junction_tree(cliques: &[Vec<usize>], seed: u64) -> JunctionTree {
    let k = cliques.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cliques: Vec<Vec<usize>> = cliques.to_vec();
    for c in &mut cliques {
        c.sort_unstable();
    }

    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let w = intersection_size(&cliques[i], &cliques[j]);
            if w > 0 {
                pairs.push((w, i, j));
            }
        }
    }
    pairs.shuffle(&mut rng);
    pairs.sort_by_key(|&(w, _, _)| std::cmp::Reverse(w));

    let mut uf = UnionFind((0..k).collect());
    let mut adj = vec![Vec::new(); k];
    for (_, i, j) in pairs {
        if uf.union(i, j) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of = vec![usize::MAX; k];
    for c in 0..k {
        let r = uf.find(c);
        if group_of[r] == usize::MAX {
            group_of[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[group_of[r]].push(c);
    }

    let mut parent = vec![None; k];
    let mut roots = Vec::with_capacity(groups.len());
    let mut seen = vec![false; k];
    for group in &groups {
        let root = *group.choose(&mut rng).expect("non-empty component");
        roots.push(root);
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(c) = queue.pop_front() {
            for &d in &adj[c] {
                if !seen[d] {
                    seen[d] = true;
                    parent[d] = Some(c);
                    queue.push_back(d);
                }
            }
        }
    }
    JunctionTree {
        cliques,
        parent,
        roots,
    }
}

/// Directed acyclic graph with a topological order of its (active) vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    pub num_vars: usize,
    pub arcs: Vec<(usize, usize)>,
    pub topo_order: Vec<usize>,
}

impl Dag {
    /// Kahn's algorithm over the arc set; ignores `topo_order`.
    pub fn is_acyclic(&self) -> bool {
        let mut indeg = vec![0usize; self.num_vars];
        let mut out = vec![Vec::new(); self.num_vars];
        for &(a, b) in &self.arcs {
            indeg[b] += 1;
            out[a].push(b);
        }
        let mut stack: Vec<usize> = (0..self.num_vars).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &w in &out[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    stack.push(w);
                }
            }
        }
        seen == self.num_vars
    }

    /// Every arc goes forward in `topo_order`.
    pub fn order_is_topological(&self) -> bool {
        let mut pos = vec![usize::MAX; self.num_vars];
        for (i, &v) in self.topo_order.iter().enumerate() {
            pos[v] = i;
        }
        self.arcs
            .iter()
            .all(|&(a, b)| pos[a] != usize::MAX && pos[b] != usize::MAX && pos[a] < pos[b])
    }

    pub fn skeleton(&self) -> UndirectedGraph {
        UndirectedGraph::from_edges(self.num_vars, self.arcs.iter().copied()).expect("valid arcs")
    }

    /// Skeleton plus an edge between every pair of co-parents.
    pub fn moral_graph(&self) -> UndirectedGraph {
        let mut g = self.skeleton();
        for pa in self.parent_lists() {
            for (i, &a) in pa.iter().enumerate() {
                for &b in &pa[i + 1..] {
                    g.insert_edge(a, b);
                }
            }
        }
        g
    }

    /// First vertex with two non-adjacent parents, if any.
    pub fn find_immorality(&self) -> Option<usize> {
        let skel = self.skeleton();
        self.parent_lists()
            .iter()
            .enumerate()
            .find(|(_, pa)| !skel.is_clique(pa))
            .map(|(v, _)| v)
    }

    fn parent_lists(&self) -> Vec<Vec<usize>> {
        let mut pa = vec![Vec::new(); self.num_vars];
        for &(a, b) in &self.arcs {
            pa[b].push(a);
        }
        pa
    }
}

/// Directed I-map of an undirected graph with per-vertex parent, child and
/// blanket indices. Only the vertices in `dag.topo_order` are active; a
/// truncated I-map from [`sub_imap`] leaves the rest out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Imap {
    pub dag: Dag,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    blanket: Vec<Vec<usize>>,
    position: Vec<usize>,
    pub source_graph_id: u64,
}

impl Imap {
    /// Orients the edges of `chordal` among the vertices of `order` from
    /// earlier to later. Fails if the orientation has an immorality.
    pub fn from_order(
        chordal: &UndirectedGraph,
        order: &[usize],
        source_graph_id: u64,
    ) -> Result<Self> {
        let n = chordal.num_vars();
        let mut position = vec![usize::MAX; n];
        for (i, &v) in order.iter().enumerate() {
            if v >= n {
                return Err(Error::VariableOutOfRange(v));
            }
            if position[v] != usize::MAX {
                return Err(Error::InvalidGraph(format!("vertex {v} repeated in order")));
            }
            position[v] = i;
        }
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut arcs = Vec::new();
        for &v in order {
            for w in chordal.neighbors(v) {
                if position[w] == usize::MAX {
                    continue;
                }
                if position[w] < position[v] {
                    parents[v].push(w);
                } else {
                    children[v].push(w);
                    arcs.push((v, w));
                }
            }
        }
        for &v in order {
            if !chordal.is_clique(&parents[v]) {
                return Err(Error::Immorality(v));
            }
        }
        let mut blanket = vec![Vec::new(); n];
        for &v in order {
            let mut b: BTreeSet<usize> = parents[v].iter().copied().collect();
            for &c in &children[v] {
                b.insert(c);
                b.extend(parents[c].iter().copied());
            }
            b.remove(&v);
            blanket[v] = b.into_iter().collect();
        }
        arcs.sort_unstable();
        Ok(Self {
            dag: Dag {
                num_vars: n,
                arcs,
                topo_order: order.to_vec(),
            },
            parents,
            children,
            blanket,
            position,
            source_graph_id,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.dag.num_vars
    }

    pub fn order(&self) -> &[usize] {
        &self.dag.topo_order
    }

    pub fn len(&self) -> usize {
        self.dag.topo_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dag.topo_order.is_empty()
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn blanket(&self, v: usize) -> &[usize] {
        &self.blanket[v]
    }

    pub fn is_active(&self, v: usize) -> bool {
        self.position[v] != usize::MAX
    }

    /// Position of `v` in the topological order, `None` if inactive.
    pub fn position(&self, v: usize) -> Option<usize> {
        (self.position[v] != usize::MAX).then_some(self.position[v])
    }

    pub fn covers_all(&self) -> bool {
        self.len() == self.num_vars()
    }

    pub fn max_blanket_size(&self) -> usize {
        self.order()
            .iter()
            .map(|&v| self.blanket[v].len())
            .max()
            .unwrap_or(0)
    }

    /// Re-expresses an I-map built on an induced subgraph in the index space
    /// of the original graph with `num_vars` vertices.
    pub fn relabel(
        &self,
        local_to_global: &[usize],
        num_vars: usize,
        source_graph_id: u64,
    ) -> Result<Self> {
        let mut g = UndirectedGraph::empty(num_vars);
        for &(a, b) in &self.dag.arcs {
            g.insert_edge(local_to_global[a], local_to_global[b]);
        }
        let order: Vec<usize> = self.order().iter().map(|&v| local_to_global[v]).collect();
        Imap::from_order(&g, &order, source_graph_id)
    }
}

/// Visits the junction tree in a random topological order starting from
/// `roots`, appending unvisited vertices of each clique in random order.
/// Cliques for which `prefer` holds are expanded before all others; `stop`
/// ends the walk once every preferred clique has been expanded.
fn traverse(
    jt: &JunctionTree,
    num_vars: usize,
    roots: &[usize],
    rng: &mut ChaCha8Rng,
    prefer: &dyn Fn(usize) -> bool,
    stop_after_preferred: bool,
) -> Vec<usize> {
    let adj = jt.adjacency();
    let mut expanded = vec![false; jt.cliques.len()];
    let mut visited = vec![false; num_vars];
    let mut order = Vec::new();
    let mut frontier: Vec<usize> = roots.to_vec();
    for &r in roots {
        expanded[r] = true;
    }
    while !frontier.is_empty() {
        let preferred: Vec<usize> = (0..frontier.len())
            .filter(|&i| prefer(frontier[i]))
            .collect();
        let idx = if let Some(&i) = preferred.choose(rng) {
            i
        } else if stop_after_preferred {
            break;
        } else {
            rng.gen_range(0..frontier.len())
        };
        let c = frontier.swap_remove(idx);
        let mut fresh: Vec<usize> = jt.cliques[c]
            .iter()
            .copied()
            .filter(|&v| !visited[v])
            .collect();
        fresh.shuffle(rng);
        for v in fresh {
            visited[v] = true;
            order.push(v);
        }
        for &d in &adj[c] {
            if !expanded[d] {
                expanded[d] = true;
                frontier.push(d);
            }
        }
    }
    order
}

/// Orients a chordal graph without immoralities by walking its junction tree
/// from the roots and pointing edges at newly visited vertices.
pub fn orient_pmap(g_chordal: &UndirectedGraph, jt: &JunctionTree, seed: u64) -> Imap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = traverse(
        jt,
        g_chordal.num_vars(),
        &jt.roots,
        &mut rng,
        &|_| false,
        false,
    );
    // Isolated vertices with no clique (only possible for an empty clique list).
    let mut present = vec![false; g_chordal.num_vars()];
    for &v in &order {
        present[v] = true;
    }
    order.extend((0..g_chordal.num_vars()).filter(|&v| !present[v]));
    Imap::from_order(g_chordal, &order, g_chordal.fingerprint())
        .expect("junction-tree traversal yields an immorality-free orientation")
}

/// Chordal completion of a graph together with its junction tree, reused for
/// drawing many I-maps and sub-I-maps with the same completion.
#[derive(Debug, Clone)]
pub struct ChordalStructure {
    pub source: UndirectedGraph,
    pub chordal: UndirectedGraph,
    pub junction_tree: JunctionTree,
    source_id: u64,
}

impl ChordalStructure {
    pub fn new(g: &UndirectedGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chordal = min_fill_chordalize(g, rng.gen());
        let (_, cliques) = max_cardinality_search(&chordal, rng.gen());
        let junction_tree = build_junction_tree(&cliques, rng.gen());
        Self {
            source: g.clone(),
            chordal,
            junction_tree,
            source_id: g.fingerprint(),
        }
    }

    /// Vertices added by chordal completion, as `(u, v)` with `u < v`.
    pub fn fill_edges(&self) -> Vec<(usize, usize)> {
        self.chordal
            .edges()
            .into_iter()
            .filter(|&(u, v)| !self.source.has_edge(u, v))
            .collect()
    }

    pub fn sample_imap(&self, seed: u64) -> Imap {
        let mut imap = orient_pmap(&self.chordal, &self.junction_tree, seed);
        imap.source_graph_id = self.source_id;
        imap
    }

    /// I-map over `{u} ∪ N(u)` in the chordal completion: the top of a P-map
    /// of the whole completion in which that set is ancestral.
    pub fn sub_imap(&self, u: usize, seed: u64) -> Imap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jt = &self.junction_tree;
        let holders: Vec<usize> = (0..jt.cliques.len())
            .filter(|&c| jt.cliques[c].binary_search(&u).is_ok())
            .collect();
        let order = match holders.choose(&mut rng) {
            // The cliques holding u form a subtree, so expanding them first
            // is a valid topological walk from a root inside that subtree.
            Some(&root) => traverse(
                jt,
                self.chordal.num_vars(),
                &[root],
                &mut rng,
                &|c| jt.cliques[c].binary_search(&u).is_ok(),
                true,
            ),
            None => vec![u],
        };
        Imap::from_order(&self.chordal, &order, self.source_id)
            .expect("ancestral prefix of a P-map is immorality-free")
    }
}

/// Full pipeline: min-fill completion, MCS cliques, random junction tree and
/// random orientation.
pub fn sample_imap(g: &UndirectedGraph, seed: u64) -> Imap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = ChordalStructure::new(g, rng.gen());
    structure.sample_imap(rng.gen())
}

/// I-map over `u` and its chordal-completion neighbourhood only.
pub fn sub_imap(g: &UndirectedGraph, u: usize, seed: u64) -> Imap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = ChordalStructure::new(g, rng.gen());
    structure.sub_imap(u, rng.gen())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_chordal(g: &UndirectedGraph) -> bool {
        let n = g.num_vars();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() < 4 {
                continue;
            }
            let vs: Vec<usize> = (0..n).filter(|&v| mask >> v & 1 == 1).collect();
            let (sub, _) = g.induced(&vs);
            let all_deg2 = (0..sub.num_vars()).all(|v| sub.degree(v) == 2);
            if all_deg2 && sub.components().len() == 1 {
                return false;
            }
        }
        true
    }

    #[test]
    fn triangle_needs_no_fill() {
        let g = UndirectedGraph::complete(3);
        assert_eq!(min_fill_chordalize(&g, 7), g);
    }

    #[test]
    fn four_cycle_gets_one_chord() {
        let g = UndirectedGraph::cycle(4);
        for seed in 0..20 {
            let c = min_fill_chordalize(&g, seed);
            assert_eq!(c.num_edges(), 5);
            assert!(c.has_edge(0, 2) ^ c.has_edge(1, 3));
            assert!(check_chordal(&c));
        }
    }

    #[test]
    fn ladder_is_already_chordal() {
        let g = UndirectedGraph::ladder(8);
        assert!(check_chordal(&g));
        assert_eq!(min_fill_chordalize(&g, 3).num_edges(), g.num_edges());
    }

    #[test]
    fn chordality_examples() {
        assert!(check_chordal(&UndirectedGraph::complete(4)));
        assert!(!check_chordal(&UndirectedGraph::cycle(5)));
        let mut c4 = UndirectedGraph::cycle(4);
        c4.insert_edge(0, 2);
        assert!(check_chordal(&c4));
        assert!(brute_force_chordal(&c4));
        assert!(!brute_force_chordal(&UndirectedGraph::cycle(5)));
    }

    #[test]
    fn mcs_cliques_of_small_graphs() {
        let (_, cl) = max_cardinality_search(&UndirectedGraph::path(3), 1);
        let mut cl = cl;
        cl.sort();
        assert_eq!(cl, vec![vec![0, 1], vec![1, 2]]);
        let (_, cl) = max_cardinality_search(&UndirectedGraph::complete(3), 1);
        assert_eq!(cl, vec![vec![0, 1, 2]]);
        let (order, cl) = max_cardinality_search(&UndirectedGraph::empty(1), 1);
        assert_eq!(order, vec![0]);
        assert_eq!(cl, vec![vec![0]]);
    }

    #[test]
    fn junction_tree_of_clique_chain_is_a_path() {
        let cliques = vec![vec![0, 1], vec![1, 2], vec![2, 3]];
        for seed in 0..10 {
            let jt = build_junction_tree(&cliques, seed);
            let adj = jt.adjacency();
            // {0,1}-{2,3} share nothing and must not be joined.
            assert!(!adj[0].contains(&2));
            assert_eq!(adj[1].len(), 2);
            assert!(jt.has_running_intersection(4));
        }
        let jt = build_junction_tree(&[vec![0, 1], vec![1, 2]], 0);
        assert_eq!(jt.adjacency()[0], vec![1]);
        assert_eq!(jt.separator_weight(0, 1), 1);
    }

    #[test]
    fn disconnected_graph_gets_forest_with_one_root_per_component() {
        let g = UndirectedGraph::from_edges(5, [(0, 1), (2, 3)]).unwrap();
        let (_, cl) = max_cardinality_search(&g, 0);
        let jt = build_junction_tree(&cl, 0);
        assert_eq!(jt.roots.len(), 3);
        let imap = orient_pmap(&g, &jt, 0);
        assert!(imap.covers_all());
        assert!(imap.dag.is_acyclic());
    }

    #[test]
    fn path_orientation_trace() {
        let g = UndirectedGraph::path(3);
        let imap = Imap::from_order(&g, &[0, 1, 2], g.fingerprint()).unwrap();
        assert_eq!(imap.dag.arcs, vec![(0, 1), (1, 2)]);
        assert_eq!(imap.blanket(1), &[0, 2]);
    }

    #[test]
    fn immoral_order_is_rejected() {
        let g = UndirectedGraph::path(3);
        assert!(matches!(
            Imap::from_order(&g, &[0, 2, 1], 0),
            Err(Error::Immorality(1))
        ));
    }

    #[test]
    fn k3_orientations_are_acyclic_and_moral() {
        let g = UndirectedGraph::complete(3);
        let mut seen = BTreeSet::new();
        for seed in 0..200 {
            let imap = sample_imap(&g, seed);
            assert!(imap.dag.is_acyclic());
            assert!(imap.dag.find_immorality().is_none());
            seen.insert(imap.order().to_vec());
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn sampled_imaps_vary_with_seed() {
        let g = UndirectedGraph::path(5);
        let orders: BTreeSet<Vec<usize>> = (0..20)
            .map(|s| sample_imap(&g, s).order().to_vec())
            .collect();
        assert!(orders.len() >= 2);
    }

    #[test]
    fn four_cycle_imap_has_five_edges() {
        let imap = sample_imap(&UndirectedGraph::cycle(4), 11);
        assert_eq!(imap.dag.skeleton().num_edges(), 5);
        assert_eq!(imap.dag.moral_graph(), imap.dag.skeleton());
    }

    #[test]
    fn sub_imap_of_chain_interior() {
        let g = UndirectedGraph::path(4);
        for seed in 0..10 {
            let sub = sub_imap(&g, 1, seed);
            let mut vs = sub.order().to_vec();
            vs.sort_unstable();
            assert_eq!(vs, vec![0, 1, 2]);
            assert!(!sub.is_active(3));
        }
        let iso = sub_imap(&UndirectedGraph::empty(3), 2, 0);
        assert_eq!(iso.order(), &[2]);
    }

    #[test]
    fn sub_imap_of_lattice_center_covers_blanket() {
        let g = UndirectedGraph::grid(5, 5);
        let s = ChordalStructure::new(&g, 4);
        let u = 12;
        let nb: Vec<usize> = s.chordal.neighbors(u).collect();
        for seed in 0..10 {
            let sub = s.sub_imap(u, seed);
            assert_eq!(sub.len(), 1 + nb.len());
            assert_eq!(sub.blanket(u), nb.as_slice());
        }
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let text = "# a comment\nn 4\n0 1 # trailing\n1 2\n\n2 3\n";
        let g = UndirectedGraph::parse_edge_list(text).unwrap();
        assert_eq!(g, UndirectedGraph::path(4));
        assert_eq!(
            UndirectedGraph::parse_edge_list(&g.to_edge_list()).unwrap(),
            g
        );
        assert!(UndirectedGraph::parse_edge_list("0 1\n").is_err());
        assert!(UndirectedGraph::parse_edge_list("n 2\n0 2\n").is_err());
        assert!(UndirectedGraph::parse_edge_list("n 2\n1 1\n").is_err());
    }
}
