//! Graph similarity: APLS and average Hausdorff distance.
//!
//! APLS compares shortest-path lengths between node pairs of one graph with
//! the lengths between their snapped counterparts in the other graph. Nodes
//! are the vertices that are not interior points of a chain (degree other
//! than 2), plus one vertex of every junction-free cycle; a polyline of many
//! short segments therefore scores the same as a single straight segment.
//! With densification, every vertex of the densified graph is a node.

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;

use crate::error::{Error, Result};
use crate::netgraph::{chains, GeoGraph, Point};

pub const DEFAULT_MAX: f64 = 500.0;
pub const DEFAULT_SAMPLE_STEP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AplsOptions {
    /// Insert control vertices this far apart along every edge.
    pub densify_step: Option<f64>,
    /// Snaps farther than this count as missing paths.
    pub max_snap: f64,
    /// Keep every pair's cost in the report.
    pub keep_pairs: bool,
}

impl Default for AplsOptions {
    fn default() -> Self {
        AplsOptions {
            densify_step: None,
            max_snap: f64::INFINITY,
            keep_pairs: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCost {
    /// Node positions in the source graph (vertex ids of the possibly
    /// densified graph).
    pub a: usize,
    pub b: usize,
    pub length: f64,
    /// Length between the snapped nodes, `None` when no such path exists.
    pub snapped_length: Option<f64>,
    pub cost: f64,
}

/// One direction of APLS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Directional {
    pub c: f64,
    /// Number of node pairs joined by a path.
    pub pairs: usize,
    pub mean_snap_distance: f64,
    pub max_snap_distance: f64,
    pub costs: Vec<PairCost>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AplsReport {
    pub apls: f64,
    pub forward: Directional,
    pub backward: Directional,
}

impl AplsReport {
    pub fn c12(&self) -> f64 {
        self.forward.c
    }

    pub fn c21(&self) -> f64 {
        self.backward.c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub apls: AplsReport,
    pub avg_hausdorff: f64,
}

/// APLS of `g1` against `g2`.
pub fn apls(g1: &GeoGraph, g2: &GeoGraph, opts: &AplsOptions) -> Result<AplsReport> {
    if let Some(step) = opts.densify_step {
        if !(step > 0.0) {
            return Err(Error::param(format!("densify step must be > 0, got {step}")));
        }
    }
    if opts.max_snap.is_nan() || opts.max_snap < 0.0 {
        return Err(Error::param("max snap distance must be >= 0"));
    }
    if g1.is_empty() || g2.is_empty() {
        return Ok(AplsReport::default());
    }
    let (d1, d2);
    let (g1, g2) = match opts.densify_step {
        Some(step) => {
            d1 = densify(g1, step);
            d2 = densify(g2, step);
            (&d1, &d2)
        }
        None => (g1, g2),
    };
    let p1 = Prepared::new(g1, opts.densify_step.is_some());
    let p2 = Prepared::new(g2, opts.densify_step.is_some());
    let forward = directional(&p1, &p2, opts);
    let backward = directional(&p2, &p1, opts);
    let apls = harmonic(forward.c, backward.c);
    Ok(AplsReport {
        apls,
        forward,
        backward,
    })
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 / (1.0 / a + 1.0 / b)
    }
}

struct Prepared<'g> {
    g: &'g GeoGraph,
    graph: UnGraph<(), f64>,
    nodes: Vec<usize>,
    tree: RTree<GeomWithData<[f64; 2], usize>>,
}

impl<'g> Prepared<'g> {
    fn new(g: &'g GeoGraph, all_nodes: bool) -> Self {
        let mut graph = UnGraph::<(), f64>::with_capacity(g.vertex_count(), g.edge_count());
        for _ in 0..g.vertex_count() {
            graph.add_node(());
        }
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            graph.add_edge(NodeIndex::new(u), NodeIndex::new(v), g.edge_length(e));
        }
        let nodes = if all_nodes {
            (0..g.vertex_count()).collect()
        } else {
            apls_nodes(g)
        };
        let tree = RTree::bulk_load(
            g.points()
                .iter()
                .enumerate()
                .map(|(i, p)| GeomWithData::new([p.x, p.y], i))
                .collect(),
        );
        Prepared {
            g,
            graph,
            nodes,
            tree,
        }
    }

    /// Nearest vertex, lowest id on ties.
    fn snap(&self, p: Point) -> (usize, f64) {
        let hits = self.tree.nearest_neighbors(&[p.x, p.y]);
        let best = hits.iter().map(|h| h.data).min().expect("graph is not empty");
        (best, p.dist(&self.g.point(best)))
    }

    fn lengths_from(&self, s: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; self.g.vertex_count()];
        for (k, d) in dijkstra(&self.graph, NodeIndex::new(s), None, |e| *e.weight()) {
            out[k.index()] = d;
        }
        out
    }
}

/// Vertices of degree other than 2, plus the lowest id of each cycle that
/// has no such vertex.
pub fn apls_nodes(g: &GeoGraph) -> Vec<usize> {
    let deg = g.degrees();
    let mut nodes: Vec<usize> = (0..g.vertex_count()).filter(|&v| deg[v] != 2).collect();
    for chain in chains(g, |v| -(v as f64)) {
        if chain.len() > 2 && chain.first() == chain.last() && deg[chain[0]] == 2 {
            nodes.push(chain[0]);
        }
    }
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

fn directional(src: &Prepared, dst: &Prepared, opts: &AplsOptions) -> Directional {
    let nodes = &src.nodes;
    let snaps: Vec<(usize, f64)> = nodes.iter().map(|&a| dst.snap(src.g.point(a))).collect();
    let per_source: Vec<(f64, usize, Vec<PairCost>)> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let la = src.lengths_from(nodes[i]);
            let (a2, da) = snaps[i];
            let lb = dst.lengths_from(a2);
            let mut sum = 0.0;
            let mut count = 0;
            let mut costs = Vec::new();
            for j in i + 1..nodes.len() {
                let l = la[nodes[j]];
                if !l.is_finite() {
                    continue;
                }
                let (b2, db) = snaps[j];
                let l2 = lb[b2];
                let snapped = (l2.is_finite() && da <= opts.max_snap && db <= opts.max_snap).then_some(l2);
                let cost = match snapped {
                    Some(l2) => ((l - l2).abs() / l).min(1.0),
                    None => 1.0,
                };
                sum += cost;
                count += 1;
                if opts.keep_pairs {
                    costs.push(PairCost {
                        a: nodes[i],
                        b: nodes[j],
                        length: l,
                        snapped_length: snapped,
                        cost,
                    });
                }
            }
            (sum, count, costs)
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    let mut costs = Vec::new();
    for (s, c, mut k) in per_source {
        total += s;
        pairs += c;
        costs.append(&mut k);
    }
    let snap_sum: f64 = snaps.iter().map(|s| s.1).sum();
    Directional {
        // no paths to compare, nothing to penalize
        c: if pairs == 0 { 1.0 } else { 1.0 - total / pairs as f64 },
        pairs,
        mean_snap_distance: if snaps.is_empty() { 0.0 } else { snap_sum / snaps.len() as f64 },
        max_snap_distance: snaps.iter().map(|s| s.1).fold(0.0, f64::max),
        costs,
    }
}

/// Copy of `g` with extra vertices every `step` along each edge.
pub fn densify(g: &GeoGraph, step: f64) -> GeoGraph {
    let mut out = GeoGraph::new();
    for p in g.points() {
        out.add_vertex(p.x, p.y);
    }
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let len = g.edge_length(e);
        let (a, b) = (g.point(u), g.point(v));
        let mut prev = u;
        let mut k = 1;
        while (k as f64) * step < len {
            let t = k as f64 * step / len;
            let w = out.add_vertex(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            // sub-segments are shorter than the edge but never empty
            let _ = out.add_edge(prev, w);
            prev = w;
            k += 1;
        }
        let _ = out.add_edge(prev, v);
    }
    out
}

/// Points every `step` of arclength along each edge, plus every vertex.
pub fn sample_points(g: &GeoGraph, step: f64) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = g.points().iter().map(|p| [p.x, p.y]).collect();
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let len = g.edge_length(e);
        let (a, b) = (g.point(u), g.point(v));
        let mut k = 1;
        while (k as f64) * step < len {
            let t = k as f64 * step / len;
            pts.push([a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)]);
            k += 1;
        }
    }
    pts
}

/// Mean distance from the samples of `g1` to the samples of `g2`.
pub fn directed_hausdorff(g1: &GeoGraph, g2: &GeoGraph, step: f64, max: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::param(format!("sample step must be > 0, got {step}")));
    }
    match (g1.is_empty(), g2.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(max),
        _ => {}
    }
    let p1 = sample_points(g1, step);
    let tree = RTree::bulk_load(sample_points(g2, step));
    let total: f64 = p1
        .par_iter()
        .map(|p| {
            let q = tree.nearest_neighbor(p).expect("non-empty sample set");
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / p1.len() as f64)
}

/// Sum of both directed distances; exactly one empty graph scores `max`.
pub fn avg_hausdorff(g1: &GeoGraph, g2: &GeoGraph, step: f64, max: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::param(format!("sample step must be > 0, got {step}")));
    }
    if g1.is_empty() != g2.is_empty() {
        return Ok(max);
    }
    Ok(directed_hausdorff(g1, g2, step, max)? + directed_hausdorff(g2, g1, step, max)?)
}

/// Both metrics with `reference` as the first graph.
pub fn score(
    reference: &GeoGraph,
    proposed: &GeoGraph,
    opts: &AplsOptions,
    step: f64,
    max: f64,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        apls: apls(reference, proposed, opts)?,
        avg_hausdorff: avg_hausdorff(reference, proposed, step, max)?,
    })
}
