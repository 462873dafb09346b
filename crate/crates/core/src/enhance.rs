//! Road tips: detection, enhancement into local maxima, and layer
//! composition.
//!
//! A pixel is a tip candidate when it is bright and the boundary of the
//! window around it meets the road exactly once. Interior road pixels see
//! two crossings, junctions three or more.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::DensityField;
use crate::topology::DisjointSet;

pub const DEFAULT_WINDOW: usize = 21;
pub const DEFAULT_T_HIGH: f32 = 0.5;
pub const DEFAULT_T_LOW: f32 = 0.3;
pub const DEFAULT_RADIUS: f64 = 2.0;

/// Falloff from the tip across the enhanced disc, per pixel of distance.
const DISC_SLOPE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipParams {
    pub window: usize,
    pub t_high: f32,
    pub t_low: f32,
}

impl Default for TipParams {
    fn default() -> Self {
        TipParams {
            window: DEFAULT_WINDOW,
            t_high: DEFAULT_T_HIGH,
            t_low: DEFAULT_T_LOW,
        }
    }
}

impl TipParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::param(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if !(0.0 <= self.t_low && self.t_low <= self.t_high && self.t_high <= 1.0) {
            return Err(Error::param(format!(
                "need 0 <= tLow <= tHigh <= 1, got tLow = {}, tHigh = {}",
                self.t_low, self.t_high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TipSet {
    /// Pixel coordinates `(x, y)`, in row-major order.
    pub tips: Vec<(usize, usize)>,
    pub params: TipParams,
}

impl TipSet {
    pub fn empty(params: TipParams) -> Self {
        TipSet {
            tips: Vec::new(),
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.tips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tips.is_empty()
    }

    /// One `x y` line per tip.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for &(x, y) in &self.tips {
            let _ = writeln!(s, "{x} {y}");
        }
        s
    }
}

/// Clockwise offsets of the boundary ring of a `(2h+1)²` box, starting at
/// the top-left corner. Corners sit at positions `0, 2h, 4h, 6h`.
fn ring_offsets(h: isize) -> Vec<(isize, isize)> {
    let mut ring = Vec::with_capacity(8 * h as usize);
    for x in -h..h {
        ring.push((x, -h));
    }
    for y in -h..h {
        ring.push((h, y));
    }
    for x in (-h + 1..=h).rev() {
        ring.push((x, h));
    }
    for y in (-h + 1..=h).rev() {
        ring.push((-h, y));
    }
    ring
}

/// 8-connected groups of set ring positions. Returns the number of groups
/// and, when there is exactly one, the mean offset of its pixels.
fn ring_groups(on: &[bool], ring: &[(isize, isize)], h: usize) -> (usize, Option<(f64, f64)>) {
    let m = on.len();
    if on.iter().all(|&b| b) {
        return (1, None);
    }
    // runs along the cycle, started after an unset position
    let start = on.iter().position(|&b| !b).unwrap();
    let mut run_of = vec![usize::MAX; m];
    let mut runs = 0;
    for k in 1..=m {
        let i = (start + k) % m;
        if on[i] {
            let prev = (i + m - 1) % m;
            if !on[prev] {
                runs += 1;
            }
            run_of[i] = runs - 1;
        }
    }
    if runs == 0 {
        return (0, None);
    }
    // the two ring neighbours of an unset corner touch diagonally
    let mut dsu = DisjointSet::new(runs);
    for c in [0, 2 * h, 4 * h, 6 * h] {
        let (a, b) = ((c + m - 1) % m, (c + 1) % m);
        if !on[c] && on[a] && on[b] {
            let (ra, rb) = (dsu.find(run_of[a] as u32), dsu.find(run_of[b] as u32));
            if ra != rb {
                dsu.link(ra, rb);
            }
        }
    }
    let groups = (0..runs as u32).filter(|&r| dsu.find(r) == r).count();
    if groups != 1 {
        return (groups, None);
    }
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, &(dx, dy)) in ring.iter().enumerate() {
        if on[i] {
            sx += dx as f64;
            sy += dy as f64;
            n += 1.0;
        }
    }
    (1, Some((sx / n, sy / n)))
}

/// Road endpoints: bright pixels whose window boundary meets the road in a
/// single 8-connected group. Only pixels whose whole window lies inside the
/// raster are examined. Within each 8-connected cluster of candidates the
/// one farthest from the road's crossing of the boundary is kept.
pub fn detect_tips(field: &DensityField, params: TipParams) -> Result<TipSet> {
    params.validate()?;
    let (w, h) = (field.width(), field.height());
    let half = params.window / 2;
    if w < params.window || h < params.window {
        return Ok(TipSet::empty(params));
    }
    let ring = ring_offsets(half as isize);
    // per candidate: where the road crosses its window boundary
    let rows: Vec<Vec<(usize, (f64, f64))>> = (half..h - half)
        .into_par_iter()
        .map(|y| {
            let mut on = vec![false; ring.len()];
            let mut out = Vec::new();
            for x in half..w - half {
                if field.get(x, y) < params.t_high {
                    continue;
                }
                for (i, &(dx, dy)) in ring.iter().enumerate() {
                    let (px, py) = ((x as isize + dx) as usize, (y as isize + dy) as usize);
                    on[i] = field.get(px, py) >= params.t_low;
                }
                if let (1, Some((cx, cy))) = ring_groups(&on, &ring, half) {
                    out.push((y * w + x, (x as f64 + cx, y as f64 + cy)));
                }
            }
            out
        })
        .collect();
    let mut is_candidate = vec![false; w * h];
    let mut candidates = Vec::new();
    for (i, c) in rows.into_iter().flatten() {
        is_candidate[i] = true;
        candidates.push((i, c));
    }

    let mut dsu = DisjointSet::new(w * h);
    for &(i, _) in &candidates {
        let (x, y) = (i % w, i / w);
        for (dx, dy) in [(1isize, 0isize), (-1, 1), (0, 1), (1, 1)] {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if is_candidate[j] {
                let (a, b) = (dsu.find(i as u32), dsu.find(j as u32));
                if a != b {
                    dsu.link(a, b);
                }
            }
        }
    }
    // the tip is the candidate farthest from where the cluster's road enters
    let mut entry: HashMap<u32, (f64, f64, f64)> = HashMap::new();
    for &(i, (cx, cy)) in &candidates {
        let e = entry.entry(dsu.find(i as u32)).or_insert((0.0, 0.0, 0.0));
        e.0 += cx;
        e.1 += cy;
        e.2 += 1.0;
    }
    let mut best: HashMap<u32, (usize, f64)> = HashMap::new();
    for &(i, _) in &candidates {
        let r = dsu.find(i as u32);
        let (sx, sy, n) = entry[&r];
        let d = ((i % w) as f64 - sx / n).hypot((i / w) as f64 - sy / n);
        // candidates come in row-major order, so ties keep the first
        best.entry(r)
            .and_modify(|b| {
                if d > b.1 {
                    *b = (i, d);
                }
            })
            .or_insert((i, d));
    }
    let mut tips: Vec<usize> = best.into_values().map(|b| b.0).collect();
    tips.sort_unstable();
    Ok(TipSet {
        tips: tips.into_iter().map(|i| (i % w, i / w)).collect(),
        params,
    })
}

/// Raises each tip to 1 and its disc of the given radius to just below 1,
/// falling off with distance so the tip itself is the local maximum. No
/// pixel is lowered.
pub fn enhance_tips(field: &DensityField, tips: &TipSet, radius: f64) -> Result<DensityField> {
    if !(radius >= 0.0) {
        return Err(Error::param(format!("radius must be >= 0, got {radius}")));
    }
    let mut out = field.clone();
    let (w, h) = (field.width() as isize, field.height() as isize);
    let r = radius.floor() as isize;
    for &(tx, ty) in &tips.tips {
        if tx as isize >= w || ty as isize >= h {
            return Err(Error::param(format!("tip ({tx}, {ty}) outside the raster")));
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (tx as isize + dx, ty as isize + dy);
                let d = (dx as f64).hypot(dy as f64);
                if x < 0 || y < 0 || x >= w || y >= h || d > radius {
                    continue;
                }
                let target = (1.0 - DISC_SLOPE * d) as f32;
                let (x, y) = (x as usize, y as usize);
                if out.get(x, y) < target {
                    out.set(x, y, target);
                }
            }
        }
    }
    Ok(out)
}

/// What [`enhance_tips`] adds to `field`, as a separate layer.
pub fn tip_layer(field: &DensityField, tips: &TipSet, radius: f64) -> Result<DensityField> {
    let enhanced = enhance_tips(field, tips, radius)?;
    let values = enhanced
        .values()
        .iter()
        .zip(field.values())
        .map(|(e, f)| (e - f).max(0.0))
        .collect();
    DensityField::new(field.width(), field.height(), values)
}

/// Pixel-wise sum of `base` and `layers`, clamped to `[0, 1]`.
pub fn compose(base: &DensityField, layers: &[DensityField]) -> Result<DensityField> {
    let mut out = base.clone();
    for (k, layer) in layers.iter().enumerate() {
        if !layer.same_dims(base) {
            return Err(Error::param(format!(
                "layer {k} is {}x{}, base is {}x{}",
                layer.width(),
                layer.height(),
                base.width(),
                base.height()
            )));
        }
        for (o, &l) in out.values_mut().iter_mut().zip(layer.values()) {
            *o += l;
        }
    }
    for o in out.values_mut() {
        *o = o.clamp(0.0, 1.0);
    }
    Ok(out)
}
