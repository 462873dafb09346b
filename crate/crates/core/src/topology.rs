//! Implicit Freudenthal triangulation of a pixel grid and persistence of the
//! super-level-set filtration.
//!
//! Every pixel is a vertex. Edges join horizontal and vertical neighbours
//! plus one diagonal per unit cell, from its lower-left corner `(x, y + 1)`
//! to its upper-right corner `(x + 1, y)` (image rows grow downwards). Each
//! cell therefore splits into an upper-left and a lower-right triangle.
//!
//! Vertices are totally ordered by `(value, index)`; the filtration adds
//! vertices from the top of that order down, and every edge or triangle
//! enters together with its lowest vertex. Two kinds of pairs come out of a
//! sweep:
//!
//! * max/saddle pairs: a saddle edge merges two super-level components and
//!   the younger maximum dies (elder rule);
//! * loop pairs: an edge closes a cycle around a valley, which is filled in
//!   when the valley's lowest triangle enters. These are computed with a
//!   union-find over the dual graph (triangles plus the outer face) swept in
//!   the reverse order.

use std::cmp::Ordering;

use crate::raster::DensityField;

pub(crate) const NONE: u32 = u32::MAX;

/// Disjoint sets with union by size and path halving.
#[derive(Clone, Debug)]
pub struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    #[inline]
    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    /// Links two distinct roots and returns the surviving root.
    #[inline]
    pub fn link(&mut self, a: u32, b: u32) -> u32 {
        debug_assert!(a != b);
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

/// Up to six neighbours of a grid vertex.
#[derive(Clone, Copy, Debug)]
pub struct Neighbors {
    items: [u32; 6],
    len: u8,
}

impl Neighbors {
    pub fn as_slice(&self) -> &[u32] {
        &self.items[..self.len as usize]
    }
}

/// The triangulated grid. Nothing is materialized; ids are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridComplex {
    width: usize,
    height: usize,
}

impl GridComplex {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "zero-area grid");
        GridComplex { width, height }
    }

    pub fn of(field: &DensityField) -> Self {
        GridComplex::new(field.width(), field.height())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vertex_count(&self) -> usize {
        self.width * self.height
    }

    fn horizontal_count(&self) -> usize {
        (self.width - 1) * self.height
    }

    fn vertical_count(&self) -> usize {
        self.width * (self.height - 1)
    }

    fn cell_count(&self) -> usize {
        (self.width - 1) * (self.height - 1)
    }

    pub fn edge_count(&self) -> usize {
        self.horizontal_count() + self.vertical_count() + self.cell_count()
    }

    pub fn triangle_count(&self) -> usize {
        2 * self.cell_count()
    }

    #[inline]
    fn vid(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, v: usize) -> (usize, usize) {
        (v % self.width, v / self.width)
    }

    #[inline]
    fn h_edge(&self, x: usize, y: usize) -> usize {
        y * (self.width - 1) + x
    }

    #[inline]
    fn v_edge(&self, x: usize, y: usize) -> usize {
        self.horizontal_count() + y * self.width + x
    }

    #[inline]
    fn d_edge(&self, x: usize, y: usize) -> usize {
        self.horizontal_count() + self.vertical_count() + y * (self.width - 1) + x
    }

    /// Endpoints of an edge, smaller vertex id first.
    pub fn edge_endpoints(&self, e: usize) -> (usize, usize) {
        let nh = self.horizontal_count();
        let nv = self.vertical_count();
        if e < nh {
            let (x, y) = (e % (self.width - 1), e / (self.width - 1));
            (self.vid(x, y), self.vid(x + 1, y))
        } else if e < nh + nv {
            let e = e - nh;
            let (x, y) = (e % self.width, e / self.width);
            (self.vid(x, y), self.vid(x, y + 1))
        } else {
            let e = e - nh - nv;
            assert!(e < self.cell_count(), "edge id out of range");
            let (x, y) = (e % (self.width - 1), e / (self.width - 1));
            (self.vid(x + 1, y), self.vid(x, y + 1))
        }
    }

    /// The edge joining two vertices, if they are adjacent.
    pub fn edge_between(&self, u: usize, v: usize) -> Option<usize> {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        if ay == by && bx == ax + 1 {
            Some(self.h_edge(ax, ay))
        } else if bx == ax && by == ay + 1 {
            Some(self.v_edge(ax, ay))
        } else if by == ay + 1 && ax == bx + 1 {
            Some(self.d_edge(bx, ay))
        } else {
            None
        }
    }

    pub fn neighbors(&self, v: usize) -> Neighbors {
        let (x, y) = self.coords(v);
        let (w, h) = (self.width, self.height);
        let mut n = Neighbors {
            items: [0; 6],
            len: 0,
        };
        let mut push = |u: usize| {
            n.items[n.len as usize] = u as u32;
            n.len += 1;
        };
        if x > 0 {
            push(v - 1);
        }
        if x + 1 < w {
            push(v + 1);
        }
        if y > 0 {
            push(v - w);
            if x + 1 < w {
                push(v - w + 1);
            }
        }
        if y + 1 < h {
            push(v + w);
            if x > 0 {
                push(v + w - 1);
            }
        }
        n
    }

    pub fn triangle_vertices(&self, t: usize) -> [usize; 3] {
        let c = t / 2;
        let (x, y) = (c % (self.width - 1), c / (self.width - 1));
        if t % 2 == 0 {
            [self.vid(x, y), self.vid(x + 1, y), self.vid(x, y + 1)]
        } else {
            [self.vid(x + 1, y), self.vid(x, y + 1), self.vid(x + 1, y + 1)]
        }
    }

    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        let c = t / 2;
        let (x, y) = (c % (self.width - 1), c / (self.width - 1));
        if t % 2 == 0 {
            [self.h_edge(x, y), self.v_edge(x, y), self.d_edge(x, y)]
        } else {
            [self.h_edge(x, y + 1), self.v_edge(x + 1, y), self.d_edge(x, y)]
        }
    }

    /// The (at most two) triangles sharing an edge; `None` marks the outer face.
    pub fn edge_triangles(&self, e: usize) -> [Option<usize>; 2] {
        let nh = self.horizontal_count();
        let nv = self.vertical_count();
        let cw = self.width - 1;
        if e < nh {
            let (x, y) = (e % cw, e / cw);
            let below = (y + 1 < self.height).then(|| 2 * (y * cw + x));
            let above = (y > 0).then(|| 2 * ((y - 1) * cw + x) + 1);
            [above, below]
        } else if e < nh + nv {
            let e = e - nh;
            let (x, y) = (e % self.width, e / self.width);
            let right = (x < cw).then(|| 2 * (y * cw + x));
            let left = (x > 0).then(|| 2 * (y * cw + x - 1) + 1);
            [left, right]
        } else {
            let c = e - nh - nv;
            [Some(2 * c), Some(2 * c + 1)]
        }
    }

    /// Triangles containing `v`, in increasing id order.
    pub fn vertex_triangles(&self, v: usize) -> impl Iterator<Item = usize> {
        let (items, len) = self.incident_triangles(v);
        items.into_iter().take(len)
    }

    fn incident_triangles(&self, v: usize) -> ([usize; 6], usize) {
        let (x, y) = self.coords(v);
        let cw = self.width.saturating_sub(1);
        let ch = self.height.saturating_sub(1);
        let mut out = [0usize; 6];
        let mut len = 0;
        let cell = |cx: usize, cy: usize| 2 * (cy * cw + cx);
        // v is the lower-right corner of cell (x-1, y-1), the lower-left of
        // (x, y-1), the upper-right of (x-1, y) and the upper-left of (x, y)
        if y > 0 && y - 1 < ch {
            if x > 0 && x - 1 < cw {
                out[len] = cell(x - 1, y - 1) + 1;
                len += 1;
            }
            if x < cw {
                out[len] = cell(x, y - 1);
                out[len + 1] = cell(x, y - 1) + 1;
                len += 2;
            }
        }
        if y < ch {
            if x > 0 && x - 1 < cw {
                out[len] = cell(x - 1, y);
                out[len + 1] = cell(x - 1, y) + 1;
                len += 2;
            }
            if x < cw {
                out[len] = cell(x, y);
                len += 1;
            }
        }
        (out, len)
    }
}

/// Strict total order on vertices: `u < v` iff `(f(u), u) < (f(v), v)`.
///
/// `order[k]` is the vertex of rank `k`, rank 0 being the highest vertex.
#[derive(Clone, Debug)]
pub struct VertexOrder {
    rank: Vec<u32>,
    order: Vec<u32>,
}

#[inline]
fn sortable_bits(v: f32) -> u32 {
    // -0.0 and 0.0 compare equal as values
    let bits = (v + 0.0).to_bits();
    if bits & 0x8000_0000 != 0 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

impl VertexOrder {
    pub fn new(field: &DensityField) -> Self {
        let n = field.len();
        assert!(n < NONE as usize, "field too large for 32-bit vertex ids");
        let mut keys: Vec<u64> = field
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((sortable_bits(v) as u64) << 32) | i as u64)
            .collect();
        keys.sort_unstable_by(|a, b| b.cmp(a));
        let order: Vec<u32> = keys.iter().map(|k| *k as u32).collect();
        let mut rank = vec![0u32; n];
        for (r, &v) in order.iter().enumerate() {
            rank[v as usize] = r as u32;
        }
        VertexOrder { rank, order }
    }

    /// Position in the sweep; 0 is the highest vertex.
    #[inline]
    pub fn rank(&self, v: usize) -> u32 {
        self.rank[v]
    }

    /// Vertices from highest to lowest.
    pub fn descending(&self) -> &[u32] {
        &self.order
    }

    /// Compares vertices under the total order (`Greater` means higher).
    #[inline]
    pub fn cmp(&self, u: usize, v: usize) -> Ordering {
        self.rank[v].cmp(&self.rank[u])
    }

    #[inline]
    pub fn precedes(&self, u: usize, v: usize) -> bool {
        self.rank[u] > self.rank[v]
    }
}

/// A maximum that dies when its super-level component merges into an older
/// one through `saddle_edge`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersistencePair {
    pub max_vertex: usize,
    pub saddle_edge: usize,
    /// Value at the maximum.
    pub birth: f32,
    /// Value at the saddle edge, i.e. at its lower endpoint.
    pub death: f32,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.birth as f64 - self.death as f64
    }
}

/// A loop closed by `saddle_edge` around a valley whose lowest triangle is
/// `min_triangle`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopPair {
    pub saddle_edge: usize,
    pub min_triangle: usize,
    /// Value at the edge.
    pub birth: f32,
    /// Value at the lowest vertex of the triangle.
    pub death: f32,
}

impl LoopPair {
    pub fn persistence(&self) -> f64 {
        self.birth as f64 - self.death as f64
    }
}

/// Result of the 0-dimensional super-level persistence computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Persistence {
    /// Sorted by decreasing persistence, ties by edge id.
    pub pairs: Vec<PersistencePair>,
    /// One unpaired maximum per connected component.
    pub essential: Vec<usize>,
}

impl Persistence {
    /// Diagnostic dump, one `maxVertex saddleEdge birth death` line per pair.
    pub fn diagram_lines(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            s.push_str(&format!(
                "{} {} {} {}\n",
                p.max_vertex, p.saddle_edge, p.birth, p.death
            ));
        }
        s
    }
}

/// Everything the reconstruction needs from one pass over a field.
#[derive(Clone, Debug)]
pub struct FieldTopology {
    pub grid: GridComplex,
    /// Highest neighbour above each vertex, `None` at local maxima. These
    /// edges form the steepest-ascent forest.
    steepest: Vec<u32>,
    pub persistence: Persistence,
    /// Loop pairs whose edge and triangle enter at different vertices,
    /// sorted like `persistence.pairs`.
    pub loops: Vec<LoopPair>,
}

impl FieldTopology {
    pub fn steepest(&self, v: usize) -> Option<usize> {
        let s = self.steepest[v];
        (s != NONE).then_some(s as usize)
    }

    pub fn is_local_max(&self, v: usize) -> bool {
        self.steepest[v] == NONE
    }
}

/// Higher neighbours of `v`, steepest first.
fn upper_neighbors(grid: &GridComplex, order: &VertexOrder, v: usize) -> ([u32; 6], usize) {
    let nb = grid.neighbors(v);
    let rv = order.rank(v);
    let mut up = [0u32; 6];
    let mut k = 0;
    for &u in nb.as_slice() {
        if order.rank(u as usize) < rv {
            up[k] = u;
            k += 1;
        }
    }
    up[..k].sort_unstable_by_key(|&u| order.rank(u as usize));
    (up, k)
}

fn sort_pairs<T>(items: &mut [T], pers: impl Fn(&T) -> f64, edge: impl Fn(&T) -> usize) {
    items.sort_by(|a, b| {
        pers(b)
            .partial_cmp(&pers(a))
            .unwrap_or(Ordering::Equal)
            .then_with(|| edge(a).cmp(&edge(b)))
    });
}

#[cfg_attr(not(test), allow(dead_code))]
struct PrimalSweep {
    steepest: Vec<u32>,
    persistence: Persistence,
    /// Edges that merged two components (steepest joins included).
    merging: Option<Vec<bool>>,
}

/// Plain vertex-by-vertex union-find in sweep order. Slower than the basin
/// version on large fields, but it also reports every merging edge.
fn primal_sweep(
    field: &DensityField,
    grid: &GridComplex,
    order: &VertexOrder,
    record_merges: bool,
) -> PrimalSweep {
    /// Union-find node; `max_rank` (rank of the component's oldest maximum)
    /// is kept at roots only. Younger roots are linked under elder ones.
    #[derive(Clone, Copy)]
    struct Node {
        parent: u32,
        max_rank: u32,
    }

    fn find(nodes: &mut [Node], mut x: u32) -> u32 {
        while nodes[x as usize].parent != x {
            let gp = nodes[nodes[x as usize].parent as usize].parent;
            nodes[x as usize].parent = gp;
            x = gp;
        }
        x
    }

    let n = field.len();
    let values = field.values();
    let mut nodes: Vec<Node> = (0..n as u32).map(|v| Node { parent: v, max_rank: NONE }).collect();
    let mut steepest = vec![NONE; n];
    let mut pairs = Vec::new();
    let mut merging = record_merges.then(|| vec![false; grid.edge_count()]);
    let desc = order.descending();

    for (rv, &v) in desc.iter().enumerate() {
        let v = v as usize;
        let (up, k) = upper_neighbors(grid, order, v);
        if k == 0 {
            nodes[v].max_rank = rv as u32;
            continue;
        }
        steepest[v] = up[0];
        let mut root = find(&mut nodes, up[0]);
        nodes[v].parent = root;
        if let Some(m) = merging.as_mut() {
            m[grid.edge_between(v, up[0] as usize).unwrap()] = true;
        }
        for &u in &up[1..k] {
            let ru = find(&mut nodes, u);
            if ru == root {
                continue;
            }
            // larger rank = lower in the order = younger
            let (younger, elder) = if nodes[ru as usize].max_rank > nodes[root as usize].max_rank {
                (ru, root)
            } else {
                (root, ru)
            };
            let m = desc[nodes[younger as usize].max_rank as usize] as usize;
            let edge = grid.edge_between(v, u as usize).unwrap();
            pairs.push(PersistencePair {
                max_vertex: m,
                saddle_edge: edge,
                birth: values[m],
                death: values[v],
            });
            if let Some(mm) = merging.as_mut() {
                mm[edge] = true;
            }
            nodes[younger as usize].parent = elder;
            root = elder;
        }
    }

    let mut essential: Vec<usize> = (0..n)
        .filter(|&v| nodes[v].parent == v as u32)
        .map(|r| desc[nodes[r].max_rank as usize] as usize)
        .collect();
    essential.sort_unstable_by_key(|&m| order.rank(m));
    sort_pairs(&mut pairs, |p| p.persistence(), |p| p.saddle_edge);
    PrimalSweep {
        steepest,
        persistence: Persistence { pairs, essential },
        merging,
    }
}

#[cfg_attr(not(test), allow(dead_code))]
struct DualSweep {
    loops: Vec<LoopPair>,
    merging: Option<Vec<bool>>,
}

/// Union-find over triangles plus the outer face, in reverse filtration
/// order. The outer face is the oldest node, so every loop eventually dies.
fn dual_sweep(
    field: &DensityField,
    grid: &GridComplex,
    order: &VertexOrder,
    record_merges: bool,
) -> DualSweep {
    /// Union-find node. At roots: birth clock, id and lowest vertex of the
    /// component's oldest triangle. Younger roots are linked under elder ones.
    #[derive(Clone, Copy)]
    struct Node {
        parent: u32,
        born: u32,
        oldest: u32,
        lowest: u32,
    }

    fn find(nodes: &mut [Node], mut x: u32) -> u32 {
        while nodes[x as usize].parent != x {
            let gp = nodes[nodes[x as usize].parent as usize].parent;
            nodes[x as usize].parent = gp;
            x = gp;
        }
        x
    }

    let values = field.values();
    let nt = grid.triangle_count();
    let outer = nt as u32;
    let mut nodes: Vec<Node> = (0..=nt as u32)
        .map(|t| Node {
            parent: t,
            born: NONE,
            oldest: t,
            lowest: NONE,
        })
        .collect();
    nodes[nt].born = 0;
    let mut clock = 1u32;
    let mut loops = Vec::new();
    let mut merging = record_merges.then(|| vec![false; grid.edge_count()]);

    for &v in order.descending().iter().rev() {
        let v = v as usize;
        let rv = order.rank(v);
        let (tris, len) = grid.incident_triangles(v);
        // forward order within a vertex is increasing id, so reverse it
        for &t in tris[..len].iter().rev() {
            let lowest_here = grid
                .triangle_vertices(t)
                .into_iter()
                .all(|u| u == v || order.rank(u) < rv);
            if lowest_here {
                nodes[t].born = clock;
                nodes[t].lowest = v as u32;
                clock += 1;
            }
        }

        let (up, k) = upper_neighbors(grid, order, v);
        for &u in up[..k].iter().rev() {
            let e = grid.edge_between(v, u as usize).unwrap();
            let [a, b] = grid.edge_triangles(e);
            let ra = find(&mut nodes, a.map_or(outer, |t| t as u32));
            let rb = find(&mut nodes, b.map_or(outer, |t| t as u32));
            if ra == rb {
                continue;
            }
            let (younger, elder) = if nodes[ra as usize].born > nodes[rb as usize].born {
                (ra, rb)
            } else {
                (rb, ra)
            };
            if let Some(m) = merging.as_mut() {
                m[e] = true;
            }
            let y = nodes[younger as usize];
            debug_assert!(y.oldest < outer);
            if y.lowest as usize != v {
                loops.push(LoopPair {
                    saddle_edge: e,
                    min_triangle: y.oldest as usize,
                    birth: values[v],
                    death: values[y.lowest as usize],
                });
            }
            nodes[younger as usize].parent = elder;
        }
    }
    sort_pairs(&mut loops, |p| p.persistence(), |p| p.saddle_edge);
    DualSweep { loops, merging }
}

/// Sort key matching `VertexOrder`: larger means higher.
#[inline]
fn vkey(values: &[f32], v: usize) -> u64 {
    ((sortable_bits(values[v]) as u64) << 32) | v as u64
}

/// Pointer target meaning "drains into the outer face" (basin 0).
const OUTER: u32 = NONE - 1;

/// Labels every vertex with the basin its `next` chain ends in. A vertex
/// with `next == NONE` roots a new basin, appended to `roots`. Chains are
/// followed in index order, which keeps memory access mostly local.
pub(crate) fn label_basins(next: &[u32], roots: &mut Vec<u32>) -> Vec<u32> {
    let mut basin = vec![NONE; next.len()];
    let mut stack = Vec::new();
    for v in 0..next.len() {
        if basin[v] != NONE {
            continue;
        }
        let mut x = v as u32;
        let id = loop {
            stack.push(x);
            let p = next[x as usize];
            if p == NONE {
                roots.push(x);
                break roots.len() as u32 - 1;
            }
            if p == OUTER {
                break 0;
            }
            let b = basin[p as usize];
            if b != NONE {
                break b;
            }
            x = p;
        };
        for &s in &stack {
            basin[s as usize] = id;
        }
        stack.clear();
    }
    basin
}

fn find_root(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let gp = parent[parent[x as usize] as usize];
        parent[x as usize] = gp;
        x = gp;
    }
    x
}

/// Same result as `primal_sweep`, organised around steepest-ascent basins.
/// A vertex joins the basin of its steepest neighbour; only edges to a
/// higher neighbour in another basin can merge components, and those are
/// collected in index order, then replayed in sweep order.
fn primal_basins(field: &DensityField, grid: &GridComplex) -> (Vec<u32>, Persistence) {
    /// Edge from `v` up to a neighbour in another basin.
    struct Cross {
        order: (u64, u64),
        edge: u32,
        basins: [u32; 2],
    }

    let n = field.len();
    let values = field.values();
    let key = |v: usize| vkey(values, v);

    let mut steepest = vec![NONE; n];
    for (v, s) in steepest.iter_mut().enumerate() {
        let mut best = key(v);
        for &u in grid.neighbors(v).as_slice() {
            let ku = key(u as usize);
            if ku > best {
                best = ku;
                *s = u;
            }
        }
    }
    let mut roots = Vec::new();
    let basin = label_basins(&steepest, &mut roots);

    let mut crosses = Vec::new();
    for v in 0..n {
        let (kv, b) = (key(v), basin[v]);
        for &u in grid.neighbors(v).as_slice() {
            let (u, bu) = (u as usize, basin[u as usize]);
            if bu != b && key(u) > kv {
                crosses.push(Cross {
                    // highest saddle first, then steepest neighbour first
                    order: (!kv, !key(u)),
                    edge: grid.edge_between(v, u).unwrap() as u32,
                    basins: [b, bu],
                });
            }
        }
    }
    crosses.sort_unstable_by_key(|c| c.order);

    // a root keeps its own maximum, which is the component's elder one
    let root_key: Vec<u64> = roots.iter().map(|&m| key(m as usize)).collect();
    let mut parent: Vec<u32> = (0..roots.len() as u32).collect();
    let mut pairs = Vec::new();
    for c in &crosses {
        let a = find_root(&mut parent, c.basins[0]);
        let b = find_root(&mut parent, c.basins[1]);
        if a == b {
            continue;
        }
        let (younger, elder) = if root_key[a as usize] < root_key[b as usize] { (a, b) } else { (b, a) };
        let m = roots[younger as usize] as usize;
        pairs.push(PersistencePair {
            max_vertex: m,
            saddle_edge: c.edge as usize,
            birth: values[m],
            death: values[!c.order.0 as u32 as usize],
        });
        parent[younger as usize] = elder;
    }

    let mut essential: Vec<usize> = (0..parent.len())
        .filter(|&r| parent[r] == r as u32)
        .map(|r| roots[r] as usize)
        .collect();
    essential.sort_unstable_by_key(|&m| std::cmp::Reverse(key(m)));
    sort_pairs(&mut pairs, |p| p.persistence(), |p| p.saddle_edge);
    (steepest, Persistence { pairs, essential })
}

/// Same result as `dual_sweep`. Dual components correspond to connected
/// sub-level sets, with the outer face attached to every boundary vertex,
/// so they are tracked through steepest-descent basins. Only vertices whose
/// fan touches two basins replay the triangle merges, in sweep order.
fn dual_basins(field: &DensityField, grid: &GridComplex) -> Vec<LoopPair> {
    // a side of an edge is a basin id, or a triangle born at the vertex
    // being processed, tagged with this bit and its slot in the fan
    const FRESH: u32 = 1 << 31;

    let (w, h) = (grid.width(), grid.height());
    if w < 2 || h < 2 {
        return Vec::new();
    }
    let n = field.len();
    assert!(n < FRESH as usize, "field too large for the loop sweep");
    let values = field.values();
    let key = |v: usize| vkey(values, v);

    let mut desc = vec![NONE; n];
    for (v, d) in desc.iter_mut().enumerate() {
        let (x, y) = grid.coords(v);
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            *d = OUTER;
            continue;
        }
        let mut best = key(v);
        for &u in grid.neighbors(v).as_slice() {
            let ku = key(u as usize);
            if ku < best {
                best = ku;
                *d = u;
            }
        }
    }
    let mut roots = vec![NONE];
    let basin = label_basins(&desc, &mut roots);

    // events: (key, start, len) into `steps`, each step an edge and its sides
    let mut events: Vec<(u64, u32, u32)> = Vec::new();
    let mut steps: Vec<[u32; 3]> = Vec::new();
    for v in 0..n {
        let kv = key(v);
        let (tris, len) = grid.incident_triangles(v);
        let mut low = [0usize; 6];
        let mut event = false;
        for i in 0..len {
            let [a, b, c] = grid.triangle_vertices(tris[i]);
            let l = [a, b, c].into_iter().min_by_key(|&u| key(u)).unwrap();
            low[i] = l;
            event |= l != v && basin[l] != basin[v];
        }
        if !event {
            continue;
        }
        let mut up = [0u32; 6];
        let mut k = 0;
        for &u in grid.neighbors(v).as_slice() {
            if key(u as usize) > kv {
                up[k] = u;
                k += 1;
            }
        }
        up[..k].sort_unstable_by_key(|&u| key(u as usize));
        let start = steps.len() as u32;
        let side = |t: Option<usize>| match t {
            None => 0,
            Some(t) => {
                let i = tris[..len].iter().position(|&x| x == t).unwrap();
                if low[i] == v {
                    FRESH | i as u32
                } else {
                    basin[low[i]]
                }
            }
        };
        for &u in &up[..k] {
            let e = grid.edge_between(v, u as usize).unwrap();
            let [a, b] = grid.edge_triangles(e);
            let (sa, sb) = (side(a), side(b));
            if sa != sb {
                steps.push([e as u32, sa, sb]);
            }
        }
        events.push((kv, start, steps.len() as u32 - start));
    }
    events.sort_unstable_by_key(|e| e.0);

    // younger components have larger age; the outer face is the eldest
    let age: Vec<u64> = roots
        .iter()
        .enumerate()
        .map(|(b, &m)| if b == 0 { 0 } else { key(m as usize) + 1 })
        .collect();
    let mut parent: Vec<u32> = (0..roots.len() as u32).collect();
    let mut loops = Vec::new();
    // current component of a side: a basin root, or a local root
    let resolve = |s: u32, parent: &mut [u32], lp: &[usize; 6], attached: &[u32; 6]| {
        if s & FRESH == 0 {
            return Ok(find_root(parent, s));
        }
        let mut r = (s & !FRESH) as usize;
        while lp[r] != r {
            r = lp[r];
        }
        if attached[r] != NONE {
            Ok(find_root(parent, attached[r]))
        } else {
            Err(r)
        }
    };

    for &(kv, start, len) in &events {
        let v = kv as u32 as usize;
        // triangles born at `v`: local union-find, and the basin a local
        // root has been absorbed into
        let mut lp = [0usize, 1, 2, 3, 4, 5];
        let mut attached = [NONE; 6];
        for &[e, sa, sb] in &steps[start as usize..(start + len) as usize] {
            let ra = resolve(sa, &mut parent, &lp, &attached);
            let rb = resolve(sb, &mut parent, &lp, &attached);
            match (ra, rb) {
                (Ok(x), Ok(y)) if x != y => {
                    let (younger, elder) = if age[x as usize] > age[y as usize] { (x, y) } else { (y, x) };
                    let m = roots[younger as usize] as usize;
                    // the first triangle born at a minimum has the largest id
                    let (mt, ml) = grid.incident_triangles(m);
                    loops.push(LoopPair {
                        saddle_edge: e as usize,
                        min_triangle: mt[ml - 1],
                        birth: values[v],
                        death: values[m],
                    });
                    parent[younger as usize] = elder;
                }
                (Err(r), Ok(g)) | (Ok(g), Err(r)) => attached[r] = g,
                (Err(r1), Err(r2)) if r1 != r2 => lp[r2] = r1,
                _ => {}
            }
        }
    }
    sort_pairs(&mut loops, |p| p.persistence(), |p| p.saddle_edge);
    loops
}

/// Max/saddle pairs and essential maxima of the super-level filtration.
pub fn compute_persistence(field: &DensityField) -> Persistence {
    primal_basins(field, &GridComplex::of(field)).1
}

/// Loop pairs with non-zero combinatorial lifetime.
pub fn compute_loop_persistence(field: &DensityField) -> Vec<LoopPair> {
    dual_basins(field, &GridComplex::of(field))
}

/// Both sweeps plus the steepest-ascent forest.
pub fn analyze(field: &DensityField) -> FieldTopology {
    let grid = GridComplex::of(field);
    let (steepest, persistence) = primal_basins(field, &grid);
    let loops = dual_basins(field, &grid);
    FieldTopology {
        grid,
        steepest,
        persistence,
        loops,
    }
}

/// Role of an edge in the filtration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeRole {
    /// Merges two super-level components (including a new vertex joining
    /// its steepest neighbour).
    Merging,
    /// Closes a loop; merges two dual components.
    Looping,
}

/// Classifies every edge. Each edge is exactly one of the two roles; a
/// violation means the two sweeps disagree on the filtration.
pub fn edge_roles(field: &DensityField) -> crate::Result<Vec<EdgeRole>> {
    let grid = GridComplex::of(field);
    let order = VertexOrder::new(field);
    let primal = primal_sweep(field, &grid, &order, true).merging.unwrap();
    let dual = dual_sweep(field, &grid, &order, true).merging.unwrap();
    primal
        .iter()
        .zip(&dual)
        .enumerate()
        .map(|(e, (&p, &d))| match (p, d) {
            (true, false) => Ok(EdgeRole::Merging),
            (false, true) => Ok(EdgeRole::Looping),
            _ => Err(crate::Error::Invariant(format!(
                "edge {e} is {} in both sweeps",
                if p { "merging" } else { "idle" }
            ))),
        })
        .collect()
}

/// Vertices all of whose neighbours precede them, highest first.
pub fn local_maxima(field: &DensityField) -> Vec<usize> {
    let grid = GridComplex::of(field);
    let order = VertexOrder::new(field);
    order
        .descending()
        .iter()
        .map(|&v| v as usize)
        .filter(|&v| {
            grid.neighbors(v)
                .as_slice()
                .iter()
                .all(|&u| order.precedes(u as usize, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f32]) -> DensityField {
        DensityField::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn counts_follow_freudenthal_formulas() {
        for (w, h) in [(1, 1), (1, 5), (5, 1), (3, 4), (7, 2)] {
            let g = GridComplex::new(w, h);
            assert_eq!(g.vertex_count(), w * h);
            assert_eq!(
                g.edge_count(),
                (w - 1) * h + w * (h - 1) + (w - 1) * (h - 1)
            );
            // every edge round-trips through its endpoints
            for e in 0..g.edge_count() {
                let (a, b) = g.edge_endpoints(e);
                assert!(a < b);
                assert_eq!(g.edge_between(a, b), Some(e));
                assert_eq!(g.edge_between(b, a), Some(e));
            }
            // neighbour lists agree with edges, and the 1-skeleton is connected
            let mut seen = vec![false; w * h];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut degree_sum = 0;
            for v in 0..w * h {
                for &u in g.neighbors(v).as_slice() {
                    assert!(g.edge_between(v, u as usize).is_some());
                    degree_sum += 1;
                }
            }
            assert_eq!(degree_sum, 2 * g.edge_count());
            while let Some(v) = stack.pop() {
                for &u in g.neighbors(v).as_slice() {
                    if !seen[u as usize] {
                        seen[u as usize] = true;
                        stack.push(u as usize);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn triangles_are_consistent_with_edges() {
        let g = GridComplex::new(4, 3);
        let mut incidence = vec![0; g.edge_count()];
        for t in 0..g.triangle_count() {
            let vs = g.triangle_vertices(t);
            for e in g.triangle_edges(t) {
                let (a, b) = g.edge_endpoints(e);
                assert!(vs.contains(&a) && vs.contains(&b));
                assert!(g.edge_triangles(e).contains(&Some(t)));
                incidence[e] += 1;
            }
            for v in vs {
                assert!(g.vertex_triangles(v).any(|s| s == t));
            }
        }
        for e in 0..g.edge_count() {
            let inner = g.edge_triangles(e).iter().filter(|t| t.is_some()).count();
            assert_eq!(incidence[e], inner);
        }
        // Euler characteristic of a disk
        let chi = g.vertex_count() as isize - g.edge_count() as isize + g.triangle_count() as isize;
        assert_eq!(chi, 1);
    }

    #[test]
    fn vertex_order_breaks_ties_by_index() {
        let f = row(&[0.5, 0.5, 0.2, 0.5]);
        let o = VertexOrder::new(&f);
        assert_eq!(o.descending(), &[3, 1, 0, 2]);
        assert!(o.precedes(0, 1));
        assert!(o.precedes(2, 0));
        assert_eq!(o.cmp(3, 1), Ordering::Greater);
    }

    #[test]
    fn five_vertex_row() {
        let f = row(&[0.2, 0.9, 0.3, 0.7, 0.1]);
        let p = compute_persistence(&f);
        assert_eq!(p.pairs.len(), 1);
        let pair = p.pairs[0];
        assert_eq!(pair.max_vertex, 3);
        assert_eq!(pair.death, 0.3);
        assert!((pair.persistence() - 0.4).abs() < 1e-6);
        assert_eq!(GridComplex::of(&f).edge_endpoints(pair.saddle_edge), (2, 3));
        assert_eq!(p.essential, vec![1]);
        assert_eq!(local_maxima(&f), vec![1, 3]);
    }

    #[test]
    fn constant_field_has_one_maximum() {
        let f = DensityField::filled(3, 3, 0.25);
        let p = compute_persistence(&f);
        assert!(p.pairs.is_empty());
        assert_eq!(p.essential, vec![8]);
        assert_eq!(local_maxima(&f), vec![8]);
    }

    #[test]
    fn increasing_row_has_single_maximum() {
        let f = row(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(local_maxima(&f), vec![5]);
        assert!(compute_persistence(&f).pairs.is_empty());
    }

    #[test]
    fn ring_has_one_loop() {
        // a bright square ring around a dark center
        let f = DensityField::from_fn(7, 7, |x, y| {
            let on = (1..=5).contains(&x) && (1..=5).contains(&y) && (x == 1 || x == 5 || y == 1 || y == 5);
            if on {
                0.9
            } else {
                0.1
            }
        });
        let loops = compute_loop_persistence(&f);
        let strong: Vec<_> = loops.iter().filter(|l| l.persistence() > 0.5).collect();
        assert_eq!(strong.len(), 1);
        let (cx, cy) = GridComplex::of(&f).coords(
            GridComplex::of(&f).triangle_vertices(strong[0].min_triangle)[0],
        );
        assert!((1..=5).contains(&cx) && (1..=5).contains(&cy));
        assert!(edge_roles(&f).is_ok());
    }

    #[test]
    fn diagram_dump_format() {
        let f = row(&[0.25, 1.0, 0.5, 0.75, 0.0]);
        let p = compute_persistence(&f);
        assert_eq!(p.diagram_lines(), "3 2 0.75 0.5\n");
    }

    proptest::proptest! {
        #[test]
        fn basin_sweeps_match_plain_sweeps(
            w in 1usize..14,
            h in 1usize..14,
            levels in 1u32..6,
            seed in proptest::collection::vec(0u32..1000, 196),
        ) {
            // few distinct levels, so ties are common
            let f = DensityField::new(w, h, (0..w * h).map(|i| (seed[i] % levels) as f32 / 5.0).collect()).unwrap();
            let grid = GridComplex::of(&f);
            let order = VertexOrder::new(&f);
            let plain = primal_sweep(&f, &grid, &order, false);
            let (steepest, persistence) = primal_basins(&f, &grid);
            proptest::prop_assert_eq!(plain.steepest, steepest);
            proptest::prop_assert_eq!(plain.persistence, persistence);
            proptest::prop_assert_eq!(dual_sweep(&f, &grid, &order, false).loops, dual_basins(&f, &grid));
        }
    }

    #[test]
    fn basin_sweeps_match_on_larger_fields() {
        let mut state = 12345u64;
        for (w, h) in [(97, 61), (40, 128)] {
            let f = DensityField::from_fn(w, h, |x, y| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let noise = (state >> 40) as f32 / (1u64 << 24) as f32;
                let wave = ((x as f32 / 7.0).sin() * (y as f32 / 5.0).cos() + 1.0) / 2.0;
                // coarse quantization adds plateaus
                ((0.8 * wave + 0.2 * noise) * 16.0).floor() / 16.0
            });
            let grid = GridComplex::of(&f);
            let order = VertexOrder::new(&f);
            let plain = primal_sweep(&f, &grid, &order, false);
            assert_eq!((plain.steepest, plain.persistence), primal_basins(&f, &grid));
            assert_eq!(dual_sweep(&f, &grid, &order, false).loops, dual_basins(&f, &grid));
        }
    }
}
