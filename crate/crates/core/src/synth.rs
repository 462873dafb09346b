//! Synthetic scenes: street lattices, their density fields, a dead-end
//! ridge, and small RGB corpora with reference graphs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::netgraph::{point_segment_distance, rasterize, GeoGraph, Point};
use crate::raster::{gaussian_blur, DensityField, RgbRaster};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Street lattice with `count` vertical and `count` horizontal streets,
/// evenly spread between `margin` and the far margin, each shifted by up to
/// `jitter` pixels. Every street ends at the outermost cross streets, so the
/// network is closed.
pub fn street_grid(
    width: usize,
    height: usize,
    count: usize,
    margin: f64,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<GeoGraph> {
    if count < 2 {
        return Err(Error::param("a street lattice needs at least 2 streets per direction"));
    }
    let lines = |extent: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        let span = extent as f64 - 2.0 * margin;
        (0..count)
            .map(|i| {
                let base = margin + span * i as f64 / (count - 1) as f64;
                let j = if jitter > 0.0 && i > 0 && i + 1 < count {
                    rng.gen_range(-jitter..=jitter)
                } else {
                    0.0
                };
                (base + j).round()
            })
            .collect()
    };
    let xs = lines(width, rng);
    let ys = lines(height, rng);
    if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("streets overlap; reduce jitter or count"));
    }
    let mut g = GeoGraph::new();
    for &y in &ys {
        for &x in &xs {
            g.add_vertex(x, y);
        }
    }
    let id = |i: usize, j: usize| j * count + i;
    for j in 0..count {
        for i in 0..count {
            if i + 1 < count {
                g.add_edge(id(i, j), id(i + 1, j))?;
            }
            if j + 1 < count {
                g.add_edge(id(i, j), id(i, j + 1))?;
            }
        }
    }
    Ok(g)
}

/// Thickened graph plus Gaussian noise, blurred and normalized.
pub fn road_field(
    g: &GeoGraph,
    width: usize,
    height: usize,
    half_width: f64,
    noise_sigma: f64,
    blur_sigma: f64,
    rng: &mut impl Rng,
) -> Result<DensityField> {
    let mask = rasterize(g, half_width, width, height)?;
    let mut f = mask.to_field();
    add_noise(&mut f, noise_sigma, rng)?;
    let mut f = gaussian_blur(&f, blur_sigma)?;
    f.normalize();
    Ok(f)
}

/// Adds independent Gaussian noise to every pixel (values may leave [0, 1]).
pub fn add_noise(f: &mut DensityField, sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    for v in f.values_mut() {
        *v += normal.sample(rng) as f32;
    }
    Ok(())
}

/// A closed road network with one dead-end spur whose brightness fades
/// towards its free end.
#[derive(Clone, Debug)]
pub struct DeadEndScene {
    pub field: DensityField,
    /// Network and spur as drawn.
    pub graph: GeoGraph,
    /// Free end of the spur.
    pub spur_end: Point,
    /// Where the spur leaves the network.
    pub spur_start: Point,
}

/// Square ring road with a spur running from the middle of its right side
/// towards the right edge. The spur's centerline fades from `start_level`
/// to `end_level` (network level 1).
pub fn dead_end_scene(size: usize, start_level: f32, end_level: f32, seed: u64) -> Result<DeadEndScene> {
    if size < 64 {
        return Err(Error::param("dead-end scene needs at least 64 pixels"));
    }
    let s = size as f64;
    let (lo, hi) = ((s * 0.15).round(), (s * 0.55).round());
    let mid = ((lo + hi) / 2.0).round();
    let spur_start = Point::new(hi, mid);
    let spur_end = Point::new((s * 0.85).round(), mid);
    let mut g = GeoGraph::new();
    let c: Vec<usize> = [(lo, lo), (hi, lo), (hi, mid), (hi, hi), (lo, hi)]
        .iter()
        .map(|&(x, y)| g.add_vertex(x, y))
        .collect();
    for k in 0..5 {
        g.add_edge(c[k], c[(k + 1) % 5])?;
    }
    let e = g.add_vertex(spur_end.x, spur_end.y);
    g.add_edge(c[2], e)?;

    let half_width = 3.0;
    let len = spur_end.x - spur_start.x;
    let field = DensityField::from_fn(size, size, |x, y| {
        let p = Point::new(x as f64, y as f64);
        let mut v = 0.0f32;
        for &(a, b) in &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)] {
            if point_segment_distance(p, g.point(c[a]), g.point(c[b])) <= half_width {
                v = 1.0;
            }
        }
        if v == 0.0 && point_segment_distance(p, spur_start, spur_end) <= half_width {
            let t = ((p.x - spur_start.x) / len).clamp(0.0, 1.0) as f32;
            v = start_level + (end_level - start_level) * t;
        }
        v
    });
    let mut field = field;
    add_noise(&mut field, 0.02, &mut rng(seed))?;
    let mut field = gaussian_blur(&field, 1.0)?;
    for v in field.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(DeadEndScene {
        field,
        graph: g,
        spur_end,
        spur_start,
    })
}

/// One synthetic aerial image with its reference road graph.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbRaster,
    pub graph: GeoGraph,
}

/// `n` RGB images of street lattices on a textured background. Roads are
/// brighter and grayer than the greenish ground; the lattice density,
/// placement and lighting vary per image.
pub fn corpus(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < 48 {
        return Err(Error::param("corpus images need at least 48 pixels"));
    }
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|k| {
            let count = r.gen_range(2..=4);
            let margin = r.gen_range(0.12..0.2) * size as f64;
            let graph = street_grid(size, size, count, margin, size as f64 * 0.04, &mut r)?;
            let mask = rasterize(&graph, size as f64 / 100.0 + 1.5, size, size)?;
            let road = gaussian_blur(&mask.to_field(), 1.0)?;
            let light = r.gen_range(0.8..1.1);
            let mut planes = [vec![0u16; size * size], vec![0u16; size * size], vec![0u16; size * size]];
            let ground = [0.28, 0.36, 0.22];
            let pavement = [0.62, 0.62, 0.6];
            for i in 0..size * size {
                let t = road.values()[i] as f64;
                let grain = 0.06 * normal.sample(&mut r);
                for ch in 0..3 {
                    let v = (ground[ch] * (1.0 - t) + pavement[ch] * t) * light + grain;
                    planes[ch][i] = (v.clamp(0.0, 1.0) * 255.0).round() as u16;
                }
            }
            Ok(Sample {
                id: format!("img{k:03}"),
                image: RgbRaster::new(size, size, 255, planes)?,
                graph,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_shape() {
        let g = street_grid(512, 512, 5, 40.0, 0.0, &mut rng(1)).unwrap();
        assert_eq!(g.vertex_count(), 25);
        assert_eq!(g.edge_count(), 40);
        assert!(g.points().iter().all(|p| p.x >= 40.0 && p.x <= 472.0));
        assert!(street_grid(64, 64, 1, 8.0, 0.0, &mut rng(1)).is_err());
    }

    #[test]
    fn road_field_is_brightest_on_roads() {
        let g = street_grid(128, 128, 3, 20.0, 0.0, &mut rng(2)).unwrap();
        let f = road_field(&g, 128, 128, 4.0, 0.1, 2.0, &mut rng(3)).unwrap();
        assert!(f.get(20, 64) > 0.7);
        assert!(f.get(40, 40) < 0.3);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(3, 64, 9).unwrap();
        let b = corpus(3, 64, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.graph, y.graph);
        }
        assert_eq!(a[2].id, "img002");
    }

    #[test]
    fn dead_end_spur_fades() {
        let s = dead_end_scene(128, 0.75, 0.62, 4).unwrap();
        let y = s.spur_end.y as usize;
        let near = s.field.get(s.spur_start.x as usize + 6, y);
        let far = s.field.get(s.spur_end.x as usize - 6, y);
        assert!(near > far && far > 0.5);
    }
}
