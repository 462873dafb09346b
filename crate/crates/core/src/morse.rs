//! Mountain-ridge extraction.
//!
//! A selected saddle contributes its edge plus an ascending path from each
//! endpoint to a maximum. Two tracing rules are available:
//!
//! * [`Tracing::Steepest`] follows plain steepest ascent, so paths stop at
//!   the first local maximum, however insignificant;
//! * [`Tracing::Simplified`] first cancels every max/saddle pair below δ.
//!   The steepest-ascent forest joined by the cancelled saddle edges is a
//!   forest whose trees each hold exactly one surviving maximum, and paths
//!   run along those trees to it. At δ = 0 both rules coincide.
//!
//! Loop pairs (an edge closing a cycle around a valley) can be selected
//! alongside max/saddle pairs; without them a connected network, whose
//! branches are all one super-level component, has no persistent saddles.

use crate::error::{Error, Result};
use crate::netgraph::GeoGraph;
use crate::raster::DensityField;
use crate::topology::{analyze, label_basins, FieldTopology, GridComplex, VertexOrder, NONE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tracing {
    Steepest,
    #[default]
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconstructOptions {
    pub tracing: Tracing,
    /// Also select loop pairs.
    pub loops: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            tracing: Tracing::Simplified,
            loops: true,
        }
    }
}

impl ReconstructOptions {
    /// Max/saddle pairs only, traced by steepest ascent.
    pub fn plain() -> Self {
        ReconstructOptions {
            tracing: Tracing::Steepest,
            loops: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaddleKind {
    /// Merges two super-level components.
    Merge,
    /// Closes a loop around a valley.
    Loop,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectedSaddle {
    pub edge: usize,
    pub kind: SaddleKind,
    pub persistence: f64,
}

#[derive(Clone, Debug)]
pub struct MorseGraphResult {
    pub graph: GeoGraph,
    pub selected: Vec<SelectedSaddle>,
    grid: GridComplex,
    /// Next vertex towards the maximum, `NONE` at maxima.
    parent: Vec<u32>,
}

impl MorseGraphResult {
    /// The two ascending paths of `selected[i]`, one per edge endpoint, each
    /// starting at the endpoint and ending at a maximum.
    pub fn ridge_paths(&self, i: usize) -> [Vec<usize>; 2] {
        let (u, v) = self.grid.edge_endpoints(self.selected[i].edge);
        [self.path_from(u), self.path_from(v)]
    }

    pub fn path_from(&self, mut v: usize) -> Vec<usize> {
        let mut path = vec![v];
        while self.parent[v] != NONE {
            v = self.parent[v] as usize;
            path.push(v);
        }
        path
    }

    pub fn grid(&self) -> &GridComplex {
        &self.grid
    }
}

/// Steepest-ascent path from `v` to a local maximum, both ends included.
pub fn ascend(field: &DensityField, v: usize) -> Result<Vec<usize>> {
    if v >= field.len() {
        return Err(Error::param(format!("vertex {v} outside a field of {} pixels", field.len())));
    }
    let grid = GridComplex::of(field);
    let order = VertexOrder::new(field);
    let mut path = vec![v];
    let mut cur = v;
    loop {
        let best = grid
            .neighbors(cur)
            .as_slice()
            .iter()
            .map(|&u| u as usize)
            .min_by_key(|&u| order.rank(u));
        match best {
            Some(u) if order.precedes(cur, u) => {
                path.push(u);
                cur = u;
            }
            _ => return Ok(path),
        }
    }
}

/// Ridge graph of all saddles with persistence at least `delta`, using the
/// default options.
pub fn reconstruct(field: &DensityField, delta: f64) -> Result<MorseGraphResult> {
    reconstruct_with(field, delta, ReconstructOptions::default())
}

pub fn reconstruct_with(
    field: &DensityField,
    delta: f64,
    opts: ReconstructOptions,
) -> Result<MorseGraphResult> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::param(format!("delta must lie in [0, 1], got {delta}")));
    }
    let topo = analyze(field);
    reconstruct_from(field, &topo, delta, opts)
}

/// Reconstruction from a precomputed analysis of `field`.
pub fn reconstruct_from(
    field: &DensityField,
    topo: &FieldTopology,
    delta: f64,
    opts: ReconstructOptions,
) -> Result<MorseGraphResult> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::param(format!("delta must lie in [0, 1], got {delta}")));
    }
    let n = field.len();
    let mut selected: Vec<SelectedSaddle> = topo
        .persistence
        .pairs
        .iter()
        .filter(|p| p.persistence() >= delta)
        .map(|p| SelectedSaddle {
            edge: p.saddle_edge,
            kind: SaddleKind::Merge,
            persistence: p.persistence(),
        })
        .collect();
    if opts.loops {
        selected.extend(topo.loops.iter().filter(|p| p.persistence() >= delta).map(|p| {
            SelectedSaddle {
                edge: p.saddle_edge,
                kind: SaddleKind::Loop,
                persistence: p.persistence(),
            }
        }));
    }

    let parent = match opts.tracing {
        Tracing::Steepest => (0..n)
            .map(|v| topo.steepest(v).map_or(NONE, |u| u as u32))
            .collect(),
        Tracing::Simplified => simplified_parents(topo, delta)?,
    };

    let values = field.values();
    let mut id = vec![NONE; n];
    let mut covered = vec![false; n];
    let mut graph = GeoGraph::new();
    let mut vertex = |g: &mut GeoGraph, v: usize| -> usize {
        if id[v] == NONE {
            let (x, y) = topo.grid.coords(v);
            id[v] = g.add_vertex_with_density(x as f64, y as f64, values[v]) as u32;
        }
        id[v] as usize
    };
    for s in &selected {
        let (a, b) = topo.grid.edge_endpoints(s.edge);
        let (ia, ib) = (vertex(&mut graph, a), vertex(&mut graph, b));
        graph.add_edge(ia, ib)?;
        for start in [a, b] {
            let mut v = start;
            while !covered[v] {
                covered[v] = true;
                let p = parent[v];
                if p == NONE {
                    break;
                }
                let (iv, ip) = (vertex(&mut graph, v), vertex(&mut graph, p as usize));
                graph.add_edge(iv, ip)?;
                v = p as usize;
            }
        }
    }

    Ok(MorseGraphResult {
        graph,
        selected,
        grid: topo.grid.clone(),
        parent,
    })
}

/// Parent pointers of the steepest-ascent forest joined by the saddle edges
/// of pairs below `delta`, rooted at the surviving maxima.
///
/// Works on basins: cancelled saddles join the steepest-ascent trees into a
/// forest of basins, which is rooted first. Inside a non-root basin only the
/// path from its entry vertex up to its maximum changes direction.
fn simplified_parents(topo: &FieldTopology, delta: f64) -> Result<Vec<u32>> {
    let n = topo.grid.vertex_count();
    let mut parent: Vec<u32> = (0..n).map(|v| topo.steepest(v).map_or(NONE, |u| u as u32)).collect();
    let mut maxima = Vec::new();
    let basin = label_basins(&parent, &mut maxima);
    let nb = maxima.len();

    // basin adjacency through cancelled saddles, in CSR form
    let cancelled: Vec<(u32, u32)> = topo
        .persistence
        .pairs
        .iter()
        .filter(|p| p.persistence() < delta)
        .map(|p| {
            let (a, b) = topo.grid.edge_endpoints(p.saddle_edge);
            (a as u32, b as u32)
        })
        .collect();
    let mut start = vec![0u32; nb + 1];
    for &(a, b) in &cancelled {
        start[basin[a as usize] as usize + 1] += 1;
        start[basin[b as usize] as usize + 1] += 1;
    }
    for i in 0..nb {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    // (neighbour basin, vertex on this side, vertex on the other side)
    let mut adj = vec![(0u32, 0u32, 0u32); start[nb] as usize];
    for &(a, b) in &cancelled {
        let (ba, bb) = (basin[a as usize], basin[b as usize]);
        adj[fill[ba as usize] as usize] = (bb, a, b);
        fill[ba as usize] += 1;
        adj[fill[bb as usize] as usize] = (ba, b, a);
        fill[bb as usize] += 1;
    }

    let roots = topo.persistence.essential.iter().copied().chain(
        topo.persistence
            .pairs
            .iter()
            .filter(|p| p.persistence() >= delta)
            .map(|p| p.max_vertex),
    );
    // the saddle edge each basin hangs from, child side first
    let mut up = vec![(NONE, NONE); nb];
    let mut seen = vec![false; nb];
    let mut queue: Vec<u32> = Vec::new();
    for r in roots {
        let rb = basin[r];
        if seen[rb as usize] {
            return Err(Error::Invariant(format!(
                "maximum {r} shares its simplified tree with another surviving maximum"
            )));
        }
        seen[rb as usize] = true;
        queue.clear();
        queue.push(rb);
        let mut head = 0;
        while head < queue.len() {
            let x = queue[head] as usize;
            head += 1;
            for &(y, here, there) in &adj[start[x] as usize..start[x + 1] as usize] {
                if !seen[y as usize] {
                    seen[y as usize] = true;
                    up[y as usize] = (there, here);
                    queue.push(y);
                    // reverse the path from the entry vertex to the maximum
                    let mut prev = here;
                    let mut v = there;
                    while v != NONE {
                        let next = parent[v as usize];
                        parent[v as usize] = prev;
                        prev = v;
                        v = next;
                    }
                } else if up[x] != (here, there) {
                    return Err(Error::Invariant(format!(
                        "simplified forest has a cycle through {here} and {there}"
                    )));
                }
            }
        }
    }
    if let Some(b) = seen.iter().position(|&s| !s) {
        return Err(Error::Invariant(format!("vertex {} reaches no surviving maximum", maxima[b])));
    }
    Ok(parent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::local_maxima;
    use std::collections::BTreeSet;

    fn row() -> DensityField {
        DensityField::new(5, 1, vec![0.2, 0.9, 0.3, 0.7, 0.1]).unwrap()
    }

    fn xs(r: &MorseGraphResult) -> BTreeSet<i64> {
        r.graph.points().iter().map(|p| p.x as i64).collect()
    }

    #[test]
    fn ascend_examples() {
        let f = row();
        assert_eq!(ascend(&f, 1).unwrap(), vec![1]);
        assert_eq!(ascend(&f, 2).unwrap(), vec![2, 1]);
        assert_eq!(ascend(&f, 4).unwrap(), vec![4, 3]);
        let inc = DensityField::from_fn(6, 1, |x, _| x as f32 / 5.0);
        assert_eq!(ascend(&inc, 1).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(ascend(&f, 5).is_err());
    }

    #[test]
    fn row_reconstruction() {
        let f = row();
        for opts in [ReconstructOptions::default(), ReconstructOptions::plain()] {
            let r = reconstruct_with(&f, 0.2, opts).unwrap();
            assert_eq!(xs(&r), BTreeSet::from([1, 2, 3]));
            assert_eq!(r.graph.edge_count(), 2);
            assert_eq!(r.selected.len(), 1);
            assert_eq!(r.ridge_paths(0), [vec![2, 1], vec![3]]);
            let r = reconstruct_with(&f, 0.5, opts).unwrap();
            assert!(r.graph.is_empty());
        }
        assert!(reconstruct(&f, 1.1).is_err());
        assert!(reconstruct(&f, -0.1).is_err());
    }

    #[test]
    fn density_tags_follow_the_field() {
        let r = reconstruct(&row(), 0.0).unwrap();
        for (i, p) in r.graph.points().iter().enumerate() {
            assert_eq!(r.graph.density(i), Some(row().get(p.x as usize, 0)));
        }
    }

    #[test]
    fn flat_field_gives_empty_graph() {
        let f = DensityField::filled(12, 9, 0.0);
        assert!(reconstruct(&f, 0.0).unwrap().graph.is_empty());
    }

    /// Two bumps on a ridge line; cancelling the small one routes its
    /// neighbourhood to the big one.
    #[test]
    fn simplified_paths_skip_cancelled_maxima() {
        // peaks at x=2 (1.0), x=6 (0.55), x=10 (0.9); valleys 0.5 at x=5, 0.1 at x=8
        let vals = [0.3, 0.6, 1.0, 0.7, 0.52, 0.5, 0.55, 0.3, 0.1, 0.6, 0.9, 0.4];
        let f = DensityField::new(12, 1, vals.to_vec()).unwrap();
        let plain = reconstruct_with(&f, 0.3, ReconstructOptions::plain()).unwrap();
        // the deep saddle at x=8 traces to x=6 and x=10
        assert_eq!(xs(&plain), (6..=10).collect());
        let simp = reconstruct(&f, 0.3).unwrap();
        assert_eq!(xs(&simp), (2..=10).collect());
        assert_eq!(reconstruct(&f, 0.0).unwrap().graph, reconstruct_with(&f, 0.0, ReconstructOptions { loops: true, tracing: Tracing::Steepest }).unwrap().graph);
        assert!(local_maxima(&f).contains(&6));
    }

    #[test]
    fn ring_is_recovered_through_its_loop() {
        // bright square ring on a dark background with a faint bump
        let f = DensityField::from_fn(21, 21, |x, y| {
            let on = (x == 4 || x == 16 || y == 4 || y == 16) && (4..=16).contains(&x) && (4..=16).contains(&y);
            if on {
                0.8 + 0.01 * ((x * 7 + y * 3) % 5) as f32
            } else {
                0.0
            }
        });
        let r = reconstruct(&f, 0.3).unwrap();
        // the diagonals cut the (4, 4) and (16, 16) corners
        assert_eq!(r.graph.vertex_count(), 46);
        assert_eq!(r.graph.edge_count(), 46);
        assert!(r.graph.points().iter().all(|p| f.get(p.x as usize, p.y as usize) >= 0.8));
        assert!(r.selected.iter().any(|s| s.kind == SaddleKind::Loop));
        let plain = reconstruct_with(&f, 0.3, ReconstructOptions::plain()).unwrap();
        assert!(plain.graph.is_empty());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::topology::local_maxima;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn field_strategy() -> impl Strategy<Value = DensityField> {
        (2usize..14, 2usize..14).prop_flat_map(|(w, h)| {
            prop::collection::vec(0u8..32, w * h).prop_map(move |v| {
                DensityField::new(w, h, v.into_iter().map(|q| q as f32 / 31.0).collect()).unwrap()
            })
        })
    }

    fn grid_edges(r: &MorseGraphResult) -> HashSet<usize> {
        let g = &r.graph;
        let w = r.grid().width();
        g.edges()
            .iter()
            .map(|&(a, b)| {
                let (pa, pb) = (g.point(a), g.point(b));
                let va = pa.y as usize * w + pa.x as usize;
                let vb = pb.y as usize * w + pb.x as usize;
                r.grid().edge_between(va, vb).expect("graph edge is a grid edge")
            })
            .collect()
    }

    proptest! {
        #[test]
        fn nested_in_delta(f in field_strategy(), loops in any::<bool>(), simplified in any::<bool>()) {
            let opts = ReconstructOptions {
                loops,
                tracing: if simplified { Tracing::Simplified } else { Tracing::Steepest },
            };
            let mut prev: Option<HashSet<usize>> = None;
            for k in 0..10 {
                let cur = grid_edges(&reconstruct_with(&f, k as f64 / 10.0, opts).unwrap());
                if let Some(p) = &prev {
                    prop_assert!(cur.is_subset(p));
                }
                prev = Some(cur);
            }
        }

        #[test]
        fn simplified_forest_is_rooted_at_survivors(f in field_strategy(), d in 0.0f64..0.6) {
            let topo = analyze(&f);
            let n = f.len();
            let parent = simplified_parents(&topo, d).unwrap();
            let mut edges: HashSet<(usize, usize)> = (0..n)
                .filter_map(|v| topo.steepest(v).map(|u| (v.min(u), v.max(u))))
                .collect();
            for p in topo.persistence.pairs.iter().filter(|p| p.persistence() < d) {
                edges.insert(topo.grid.edge_endpoints(p.saddle_edge));
            }
            // a rooted forest uses each of its edges exactly once
            let mut used = HashSet::new();
            for (v, &p) in parent.iter().enumerate().filter(|(_, &p)| p != NONE) {
                let e = (v.min(p as usize), v.max(p as usize));
                prop_assert!(edges.contains(&e));
                prop_assert!(used.insert(e));
            }
            prop_assert_eq!(used.len(), edges.len());
            let survivors: HashSet<usize> = topo.persistence.essential.iter().copied()
                .chain(topo.persistence.pairs.iter().filter(|p| p.persistence() >= d).map(|p| p.max_vertex))
                .collect();
            let roots: HashSet<usize> = (0..n).filter(|&v| parent[v] == NONE).collect();
            prop_assert_eq!(&roots, &survivors);
            for v in 0..n {
                let (mut x, mut steps) = (v, 0);
                while parent[x] != NONE {
                    x = parent[x] as usize;
                    steps += 1;
                    prop_assert!(steps <= n);
                }
            }
        }

        #[test]
        fn plain_paths_climb_to_maxima(f in field_strategy(), d in 0.0f64..0.6) {
            let r = reconstruct_with(&f, d, ReconstructOptions::plain()).unwrap();
            let order = VertexOrder::new(&f);
            let maxima: HashSet<usize> = local_maxima(&f).into_iter().collect();
            for i in 0..r.selected.len() {
                for p in r.ridge_paths(i) {
                    prop_assert!(p.windows(2).all(|w| order.precedes(w[0], w[1])));
                    prop_assert!(maxima.contains(p.last().unwrap()));
                    prop_assert_eq!(&p, &ascend(&f, p[0]).unwrap());
                }
            }
        }

        #[test]
        fn every_component_holds_a_maximum(f in field_strategy(), d in 0.0f64..0.6) {
            let r = reconstruct(&f, d).unwrap();
            let g = &r.graph;
            let maxima: HashSet<usize> = local_maxima(&f).into_iter().collect();
            let w = f.width();
            let adj = g.adjacency();
            let mut comp = vec![usize::MAX; g.vertex_count()];
            for s in 0..g.vertex_count() {
                if comp[s] != usize::MAX { continue; }
                let mut stack = vec![s];
                comp[s] = s;
                let mut has_max = false;
                while let Some(v) = stack.pop() {
                    let p = g.point(v);
                    has_max |= maxima.contains(&(p.y as usize * w + p.x as usize));
                    for &u in &adj[v] {
                        if comp[u] == usize::MAX { comp[u] = s; stack.push(u); }
                    }
                }
                prop_assert!(has_max);
            }
        }

        #[test]
        fn affine_transform_keeps_the_graph(f in field_strategy(), k in 0usize..20, simplified in any::<bool>()) {
            // levels are multiples of 1/31, so a half-step delta never ties a persistence
            let delta = (k as f64 + 0.5) / 31.0;
            let g = DensityField::new(f.width(), f.height(), f.values().iter().map(|v| 0.5 * v + 0.25).collect()).unwrap();
            let opts = ReconstructOptions {
                loops: true,
                tracing: if simplified { Tracing::Simplified } else { Tracing::Steepest },
            };
            let a = reconstruct_with(&f, delta, opts).unwrap();
            let b = reconstruct_with(&g, delta / 2.0, opts).unwrap();
            prop_assert_eq!(grid_edges(&a), grid_edges(&b));
        }
    }
}
