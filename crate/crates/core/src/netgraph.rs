//! Geometric graphs: vertices with pixel coordinates and straight edges.
//!
//! Pixel `(i, j)` has its center at coordinates `(i, j)`, so graphs traced on
//! the grid have integer vertex positions.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{encode_pgm8, DensityField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Distance from `p` to the closed segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(&a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

/// Undirected geometric graph without self-loops or parallel edges.
#[derive(Clone, Debug, Default)]
pub struct GeoGraph {
    points: Vec<Point>,
    density: Vec<Option<f32>>,
    edges: Vec<(usize, usize)>,
    edge_set: HashSet<(usize, usize)>,
}

impl PartialEq for GeoGraph {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.density == other.density && self.edges == other.edges
    }
}

fn key(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl GeoGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, x: f64, y: f64) -> usize {
        self.points.push(Point::new(x, y));
        self.density.push(None);
        self.points.len() - 1
    }

    pub fn add_vertex_with_density(&mut self, x: f64, y: f64, density: f32) -> usize {
        let id = self.add_vertex(x, y);
        self.density[id] = Some(density);
        id
    }

    /// Adds the edge `{u, v}`. Returns `Ok(false)` if it already exists.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<bool> {
        let n = self.points.len();
        if u >= n || v >= n {
            return Err(Error::param(format!("edge ({u}, {v}) references a missing vertex")));
        }
        if u == v {
            return Err(Error::param(format!("self-loop at vertex {u}")));
        }
        if self.points[u].dist(&self.points[v]) <= 0.0 {
            return Err(Error::param(format!("zero-length edge ({u}, {v})")));
        }
        let k = key(u, v);
        if !self.edge_set.insert(k) {
            return Ok(false);
        }
        self.edges.push(k);
        Ok(true)
    }

    pub fn vertex_count(&self) -> usize {
        self.points.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// A graph with no vertices.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, v: usize) -> Point {
        self.points[v]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn density(&self, v: usize) -> Option<f32> {
        self.density[v]
    }

    /// Edges as `(smaller id, larger id)`, in insertion order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edge_set.contains(&key(u, v))
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let (u, v) = self.edges[e];
        self.points[u].dist(&self.points[v])
    }

    pub fn total_length(&self) -> f64 {
        (0..self.edges.len()).map(|e| self.edge_length(e)).sum()
    }

    /// Neighbour lists, each sorted by id.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.points.len()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.points.len()];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Edge segments with endpoints in lexicographic order, sorted; a
    /// vertex-numbering-independent fingerprint of the edge set.
    pub fn segment_set(&self) -> Vec<[(f64, f64); 2]> {
        let mut out: Vec<[(f64, f64); 2]> = self
            .edges
            .iter()
            .map(|&(u, v)| {
                let a = (self.points[u].x, self.points[u].y);
                let b = (self.points[v].x, self.points[v].y);
                if a.partial_cmp(&b) == Some(std::cmp::Ordering::Greater) {
                    [b, a]
                } else {
                    [a, b]
                }
            })
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Subgraph with the kept edges. Vertices that lose all their edges are
    /// dropped; vertices that had none to begin with are kept. Ids are
    /// compacted in the original order.
    pub fn retain_edges(&self, mut keep: impl FnMut(usize) -> bool) -> GeoGraph {
        let kept: Vec<bool> = (0..self.edges.len()).map(&mut keep).collect();
        let deg = self.degrees();
        let mut used = vec![false; self.points.len()];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if kept[e] {
                used[u] = true;
                used[v] = true;
            }
        }
        let mut map = vec![usize::MAX; self.points.len()];
        let mut out = GeoGraph::new();
        for v in 0..self.points.len() {
            if used[v] || deg[v] == 0 {
                map[v] = out.points.len();
                out.points.push(self.points[v]);
                out.density.push(self.density[v]);
            }
        }
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if kept[e] {
                let k = key(map[u], map[v]);
                out.edge_set.insert(k);
                out.edges.push(k);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Arcs

/// A maximal path whose interior vertices have degree 2. For a cycle
/// without junctions the first and last vertex coincide.
#[derive(Clone, Debug, PartialEq)]
pub struct Arc {
    pub vertices: Vec<usize>,
    pub mean_intensity: f64,
}

impl Arc {
    pub fn edge_count(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn is_cycle(&self) -> bool {
        self.vertices.len() > 2 && self.vertices.first() == self.vertices.last()
    }
}

/// Splits the edge set into arcs. Junction-free cycles are broken at the
/// vertex with the highest `weight` (lowest id on ties).
pub fn chains(g: &GeoGraph, weight: impl Fn(usize) -> f64) -> Vec<Vec<usize>> {
    let adj = g.adjacency();
    let mut edge_index: HashMap<(usize, usize), usize> = HashMap::with_capacity(g.edge_count());
    for (e, &k) in g.edges().iter().enumerate() {
        edge_index.insert(k, e);
    }
    let mut used = vec![false; g.edge_count()];
    let mut out = Vec::new();

    let walk = |start: usize, next: usize, used: &mut Vec<bool>| -> Vec<usize> {
        let mut path = vec![start];
        let (mut prev, mut cur) = (start, next);
        used[edge_index[&key(prev, cur)]] = true;
        loop {
            path.push(cur);
            if adj[cur].len() != 2 || cur == start {
                break;
            }
            let nxt = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            let e = edge_index[&key(cur, nxt)];
            if used[e] {
                break;
            }
            used[e] = true;
            prev = cur;
            cur = nxt;
        }
        path
    };

    for v in 0..g.vertex_count() {
        if adj[v].len() == 2 {
            continue;
        }
        for &u in &adj[v] {
            if !used[edge_index[&key(v, u)]] {
                out.push(walk(v, u, &mut used));
            }
        }
    }
    // what is left are junction-free cycles
    for e in 0..g.edge_count() {
        if used[e] {
            continue;
        }
        let (a, _) = g.edges()[e];
        // collect the cycle to find its break vertex
        let mut cycle = vec![a];
        let (mut prev, mut cur) = (a, adj[a][0]);
        while cur != a {
            cycle.push(cur);
            let nxt = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            prev = cur;
            cur = nxt;
        }
        let start = *cycle
            .iter()
            .min_by(|&&p, &&q| {
                weight(q)
                    .partial_cmp(&weight(p))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(p.cmp(&q))
            })
            .unwrap();
        let first = adj[start][0];
        out.push(walk(start, first, &mut used));
    }
    out
}

fn sample_vertex(g: &GeoGraph, field: &DensityField, v: usize) -> Result<f64> {
    let p = g.point(v);
    let (x, y) = (p.x.round(), p.y.round());
    if x < 0.0 || y < 0.0 || x >= field.width() as f64 || y >= field.height() as f64 || !x.is_finite() || !y.is_finite() {
        return Err(Error::Bounds {
            vertex: v,
            x: p.x,
            y: p.y,
            width: field.width(),
            height: field.height(),
        });
    }
    Ok(field.get(x as usize, y as usize) as f64)
}

/// Arc decomposition with each arc's mean field value over its vertices
/// (endpoints included, a cycle's break vertex counted once).
pub fn decompose_arcs(g: &GeoGraph, field: &DensityField) -> Result<Vec<Arc>> {
    let samples: Vec<f64> = (0..g.vertex_count())
        .map(|v| sample_vertex(g, field, v))
        .collect::<Result<_>>()?;
    Ok(chains(g, |v| samples[v])
        .into_iter()
        .map(|vertices| {
            let body = if vertices.len() > 2 && vertices.first() == vertices.last() {
                &vertices[..vertices.len() - 1]
            } else {
                &vertices[..]
            };
            let mean = body.iter().map(|&v| samples[v]).sum::<f64>() / body.len() as f64;
            Arc {
                vertices,
                mean_intensity: mean,
            }
        })
        .collect())
}

/// Keeps the arcs whose mean intensity is at least `tau`.
pub fn filter_arcs(g: &GeoGraph, field: &DensityField, tau: f64) -> Result<GeoGraph> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::param(format!("tau must lie in [0, 1], got {tau}")));
    }
    let arcs = decompose_arcs(g, field)?;
    let mut keep_edge: HashSet<(usize, usize)> = HashSet::new();
    for arc in arcs.iter().filter(|a| a.mean_intensity >= tau) {
        for w in arc.vertices.windows(2) {
            keep_edge.insert(key(w[0], w[1]));
        }
    }
    Ok(g.retain_edges(|e| keep_edge.contains(&g.edges()[e])))
}

/// Douglas-Peucker straightening of every arc; endpoints and junctions are
/// always kept.
pub fn simplify_chains(g: &GeoGraph, max_deviation: f64) -> Result<GeoGraph> {
    if !(max_deviation >= 0.0) {
        return Err(Error::param("max deviation must be >= 0"));
    }
    let mut keep = vec![false; g.vertex_count()];
    let mut polylines = Vec::new();
    for chain in chains(g, |v| -(v as f64)) {
        let pts: Vec<Point> = chain.iter().map(|&v| g.point(v)).collect();
        let mut mask = vec![false; chain.len()];
        mask[0] = true;
        *mask.last_mut().unwrap() = true;
        if chain.first() == chain.last() {
            // a cycle: pin the vertex farthest from the start so it stays a polygon
            let far = (1..chain.len() - 1)
                .max_by(|&a, &b| pts[0].dist(&pts[a]).partial_cmp(&pts[0].dist(&pts[b])).unwrap())
                .unwrap();
            mask[far] = true;
            douglas_peucker(&pts, 0, far, max_deviation, &mut mask);
            douglas_peucker(&pts, far, chain.len() - 1, max_deviation, &mut mask);
            if mask.iter().filter(|&&m| m).count() < 4 {
                // keep a triangle at least
                let mid = (1..far).chain(far + 1..chain.len() - 1).next();
                if let Some(m) = mid {
                    mask[m] = true;
                }
            }
        } else {
            douglas_peucker(&pts, 0, chain.len() - 1, max_deviation, &mut mask);
        }
        let kept: Vec<usize> = chain
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        for &v in &kept {
            keep[v] = true;
        }
        polylines.push(kept);
    }
    let mut map = vec![usize::MAX; g.vertex_count()];
    let mut out = GeoGraph::new();
    let deg = g.degrees();
    for v in 0..g.vertex_count() {
        if keep[v] || deg[v] == 0 {
            let p = g.point(v);
            map[v] = out.add_vertex(p.x, p.y);
            out.density[map[v]] = g.density(v);
        }
    }
    for line in polylines {
        for w in line.windows(2) {
            out.add_edge(map[w[0]], map[w[1]])?;
        }
    }
    Ok(out)
}

fn douglas_peucker(pts: &[Point], lo: usize, hi: usize, eps: f64, mask: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = point_segment_distance(pts[i], pts[lo], pts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > eps {
        mask[best] = true;
        douglas_peucker(pts, lo, best, eps, mask);
        douglas_peucker(pts, best, hi, eps, mask);
    }
}

// ---------------------------------------------------------------------------
// Masks

/// Boolean raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_field(&self) -> DensityField {
        DensityField::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are positive")
    }

    /// 8-bit binary graymap, positive pixels 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let samples: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_pgm8(self.width, self.height, &samples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Reads any graymap; pixels at or above half the maximum are positive.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = crate::raster::load_density(path)?;
        Ok(BinaryMask {
            width: f.width(),
            height: f.height(),
            bits: f.values().iter().map(|&v| v >= 0.5).collect(),
        })
    }
}

/// Marks every pixel whose center is within `half_width` of an edge.
pub fn rasterize(g: &GeoGraph, half_width: f64, width: usize, height: usize) -> Result<BinaryMask> {
    if !(half_width >= 0.0) {
        return Err(Error::param(format!("half width must be >= 0, got {half_width}")));
    }
    let mut mask = BinaryMask::new(width, height);
    if width == 0 || height == 0 {
        return Ok(mask);
    }
    for &(u, v) in g.edges() {
        let (a, b) = (g.point(u), g.point(v));
        let x0 = (a.x.min(b.x) - half_width).ceil().max(0.0);
        let x1 = (a.x.max(b.x) + half_width).floor().min(width as f64 - 1.0);
        let y0 = (a.y.min(b.y) - half_width).ceil().max(0.0);
        let y1 = (a.y.max(b.y) + half_width).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if point_segment_distance(Point::new(x as f64, y as f64), a, b) <= half_width {
                    mask.bits[y * width + x] = true;
                }
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Serialization

pub const GRAPH_HEADER: &str = "GEOGRAPH 1";

/// Text form: `GEOGRAPH 1`, `V <n>`, `<id> <x> <y>` lines, `E <m>`,
/// `<id_u> <id_v>` lines. Ids are written as `0..n`.
pub fn encode_graph(g: &GeoGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{GRAPH_HEADER}");
    let _ = writeln!(s, "V {}", g.vertex_count());
    for (i, p) in g.points().iter().enumerate() {
        let _ = writeln!(s, "{i} {:?} {:?}", p.x, p.y);
    }
    let _ = writeln!(s, "E {}", g.edge_count());
    for &(u, v) in g.edges() {
        let _ = writeln!(s, "{u} {v}");
    }
    s
}

pub fn parse_graph(text: &str) -> Result<GeoGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::format(format!("unexpected end of graph file, expected {what}")))
    };
    let (ln, header) = next("header")?;
    if header.split_whitespace().collect::<Vec<_>>() != ["GEOGRAPH", "1"] {
        return Err(Error::format(format!("line {ln}: expected {GRAPH_HEADER:?}")));
    }
    let count = |line: (usize, &str), tag: &str| -> Result<usize> {
        let toks: Vec<&str> = line.1.split_whitespace().collect();
        match toks.as_slice() {
            [t, n] if *t == tag => n
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad {tag} count", line.0))),
            _ => Err(Error::format(format!("line {}: expected \"{tag} <count>\"", line.0))),
        }
    };
    let nv = count(next("vertex count")?, "V")?;
    let mut g = GeoGraph::new();
    let mut ids: HashMap<i64, usize> = HashMap::with_capacity(nv);
    for _ in 0..nv {
        let (ln, line) = next("vertex line")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [id, x, y] = toks.as_slice() else {
            return Err(Error::format(format!("line {ln}: expected \"<id> <x> <y>\"")));
        };
        let id: i64 = id
            .parse()
            .map_err(|_| Error::format(format!("line {ln}: bad vertex id")))?;
        let x: f64 = x.parse().map_err(|_| Error::format(format!("line {ln}: bad x")))?;
        let y: f64 = y.parse().map_err(|_| Error::format(format!("line {ln}: bad y")))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::format(format!("line {ln}: non-finite coordinate")));
        }
        if ids.insert(id, g.add_vertex(x, y)).is_some() {
            return Err(Error::format(format!("line {ln}: duplicate vertex id {id}")));
        }
    }
    let ne = count(next("edge count")?, "E")?;
    for _ in 0..ne {
        let (ln, line) = next("edge line")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [u, v] = toks.as_slice() else {
            return Err(Error::format(format!("line {ln}: expected \"<id_u> <id_v>\"")));
        };
        let lookup = |t: &str| -> Result<usize> {
            let id: i64 = t
                .parse()
                .map_err(|_| Error::format(format!("line {ln}: bad vertex id {t:?}")))?;
            ids.get(&id)
                .copied()
                .ok_or_else(|| Error::format(format!("line {ln}: undeclared vertex id {id}")))
        };
        let (u, v) = (lookup(u)?, lookup(v)?);
        match g.add_edge(u, v) {
            Ok(true) => {}
            Ok(false) => return Err(Error::format(format!("line {ln}: duplicate edge"))),
            Err(e) => return Err(Error::format(format!("line {ln}: {e}"))),
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::format(format!("line {ln}: trailing content")));
    }
    Ok(g)
}

pub fn write_graph(g: &GeoGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_graph(g)).map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<GeoGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}
