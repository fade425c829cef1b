//! Scan-to-mesh metrics: p2s, recall, Chamfer distance and F-score, in millimetres.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Vec3;
use crate::surface::{triangle_area, Mesh};

pub const DEFAULT_THRESHOLD_MM: f64 = 1.0;
pub const DEFAULT_SAMPLES: usize = 100_000;
pub const CSV_HEADER: &str = "p2s_mm,chamfer_mm,recall_pct,precision_pct,f1_pct";

const LEAF_SIZE: usize = 4;

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Clone, Copy, Debug)]
struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    // leaves: `start..start + count` into `order`; inner nodes: children at `start`, `start + 1`
    start: u32,
    count: u32,
}

/// Bounding-volume hierarchy over boxed primitives.
#[derive(Clone, Debug)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

fn box_dist2(q: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    (0..3)
        .map(|k| {
            let d = (lo[k] - q[k]).max(0.0).max(q[k] - hi[k]);
            d * d
        })
        .sum()
}

impl Bvh {
    fn build(boxes: &[(Vec3, Vec3)]) -> Self {
        let mut bvh = Bvh { nodes: Vec::new(), order: (0..boxes.len() as u32).collect() };
        if boxes.is_empty() {
            return bvh;
        }
        let centers: Vec<Vec3> = boxes.iter().map(|(lo, hi)| (lo + hi) * 0.5).collect();
        bvh.nodes.push(BvhNode { lo: Vec3::zeros(), hi: Vec3::zeros(), start: 0, count: 0 });
        let mut stack = vec![(0usize, 0usize, boxes.len())];
        while let Some((node, start, end)) = stack.pop() {
            let items = &mut bvh.order[start..end];
            let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
            let (mut clo, mut chi) = (lo, hi);
            for &i in items.iter() {
                lo = lo.inf(&boxes[i as usize].0);
                hi = hi.sup(&boxes[i as usize].1);
                clo = clo.inf(&centers[i as usize]);
                chi = chi.sup(&centers[i as usize]);
            }
            let spread = chi - clo;
            if items.len() <= LEAF_SIZE || spread.max() == 0.0 {
                bvh.nodes[node] = BvhNode { lo, hi, start: start as u32, count: items.len() as u32 };
                continue;
            }
            let axis = spread.imax();
            let mid = items.len() / 2;
            items.select_nth_unstable_by(mid, |&a, &b| centers[a as usize][axis].total_cmp(&centers[b as usize][axis]));
            let left = bvh.nodes.len();
            bvh.nodes.push(BvhNode { lo, hi, start: 0, count: 0 });
            bvh.nodes.push(BvhNode { lo, hi, start: 0, count: 0 });
            bvh.nodes[node] = BvhNode { lo, hi, start: left as u32, count: 0 };
            stack.push((left, start, start + mid));
            stack.push((left + 1, start + mid, end));
        }
        bvh
    }

    /// Smallest `dist2(i)` over all primitives, with its index.
    fn nearest(&self, q: &Vec3, dist2: impl Fn(usize) -> f64) -> Option<(f64, usize)> {
        let root = self.nodes.first()?;
        let mut best = (f64::INFINITY, usize::MAX);
        let mut stack = vec![(box_dist2(q, &root.lo, &root.hi), 0usize)];
        while let Some((bound, ni)) = stack.pop() {
            if bound >= best.0 {
                continue;
            }
            let node = &self.nodes[ni];
            if node.count > 0 {
                for &i in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let d = dist2(i as usize);
                    if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                        best = (d, i as usize);
                    }
                }
            } else {
                let a = node.start as usize;
                let da = box_dist2(q, &self.nodes[a].lo, &self.nodes[a].hi);
                let db = box_dist2(q, &self.nodes[a + 1].lo, &self.nodes[a + 1].hi);
                // visit the nearer child first
                if da <= db {
                    stack.push((db, a + 1));
                    stack.push((da, a));
                } else {
                    stack.push((da, a));
                    stack.push((db, a + 1));
                }
            }
        }
        Some(best)
    }
}

/// Exact point-to-surface queries against a triangle mesh.
#[derive(Clone, Debug)]
pub struct MeshIndex {
    tris: Vec<[Vec3; 3]>,
    bvh: Bvh,
}

impl MeshIndex {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        mesh.validate()?;
        if mesh.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.triangle(t)).collect();
        let boxes: Vec<(Vec3, Vec3)> =
            tris.iter().map(|[a, b, c]| (a.inf(b).inf(c), a.sup(b).sup(c))).collect();
        Ok(Self { bvh: Bvh::build(&boxes), tris })
    }

    pub fn closest_point(&self, q: &Vec3) -> Vec3 {
        let (_, t) = self.nearest(q);
        let [a, b, c] = &self.tris[t];
        closest_point_on_triangle(q, a, b, c)
    }

    /// Distance in metres from `q` to the surface.
    pub fn distance(&self, q: &Vec3) -> f64 {
        self.nearest(q).0.sqrt()
    }

    fn nearest(&self, q: &Vec3) -> (f64, usize) {
        self.bvh
            .nearest(q, |i| {
                let [a, b, c] = &self.tris[i];
                (closest_point_on_triangle(q, a, b, c) - q).norm_squared()
            })
            .expect("index is never empty")
    }
}

/// Nearest-neighbour queries against a point set.
#[derive(Clone, Debug)]
pub struct PointIndex {
    points: Vec<Vec3>,
    bvh: Bvh,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set"));
        }
        let boxes: Vec<(Vec3, Vec3)> = points.iter().map(|p| (*p, *p)).collect();
        Ok(Self { bvh: Bvh::build(&boxes), points: points.to_vec() })
    }

    pub fn distance(&self, q: &Vec3) -> f64 {
        self.bvh.nearest(q, |i| (self.points[i] - q).norm_squared()).expect("index is never empty").0.sqrt()
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh(mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<Vec3>> {
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(Error::Empty("mesh"));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| triangle_area(&mesh.triangle(t))).collect();
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::Degenerate("mesh has no triangle with positive area".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let [a, b, c] = mesh.triangle(pick.sample(&mut rng));
            let r1: f64 = rng.gen::<f64>().sqrt();
            let r2: f64 = rng.gen();
            a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
        })
        .collect())
}

fn check_points(points: &[Vec3]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("scan points"));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("scan points".into()));
    }
    Ok(())
}

/// Scan-to-mesh distances in millimetres.
pub fn scan_distances_mm(points: &[Vec3], mesh: &Mesh) -> Result<Vec<f64>> {
    check_points(points)?;
    let index = MeshIndex::new(mesh)?;
    Ok(points.iter().map(|p| index.distance(p) * 1000.0).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn within_pct(v: &[f64], threshold_mm: f64) -> f64 {
    100.0 * v.iter().filter(|&&d| d < threshold_mm).count() as f64 / v.len() as f64
}

/// Mean scan-point-to-surface distance in millimetres.
pub fn p2s(points: &[Vec3], mesh: &Mesh) -> Result<f64> {
    Ok(mean(&scan_distances_mm(points, mesh)?))
}

/// Percentage of scan points closer than `threshold_mm` to the surface.
pub fn recall(points: &[Vec3], mesh: &Mesh, threshold_mm: f64) -> Result<f64> {
    Ok(within_pct(&scan_distances_mm(points, mesh)?, threshold_mm))
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub p2s_mm: f64,
    pub chamfer_mm: f64,
    pub recall_pct: f64,
    pub precision_pct: f64,
    pub f1_pct: f64,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.p2s_mm, self.chamfer_mm, self.recall_pct, self.precision_pct, self.f1_pct)
    }

    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Some(MetricReport {
            p2s_mm: avg(|r| r.p2s_mm),
            chamfer_mm: avg(|r| r.chamfer_mm),
            recall_pct: avg(|r| r.recall_pct),
            precision_pct: avg(|r| r.precision_pct),
            f1_pct: avg(|r| r.f1_pct),
        })
    }
}

/// Full report; the mesh side is represented by `samples` area-weighted points
/// matched against the scan as a point set.
pub fn chamfer_and_f1(points: &[Vec3], mesh: &Mesh, threshold_mm: f64, samples: usize, seed: u64) -> Result<MetricReport> {
    if samples == 0 {
        return Err(Error::Empty("mesh samples"));
    }
    let to_mesh = scan_distances_mm(points, mesh)?;
    let scan = PointIndex::new(points)?;
    let to_scan: Vec<f64> = sample_mesh(mesh, samples, seed)?.iter().map(|q| scan.distance(q) * 1000.0).collect();
    let recall_pct = within_pct(&to_mesh, threshold_mm);
    let precision_pct = within_pct(&to_scan, threshold_mm);
    let p2s_mm = mean(&to_mesh);
    Ok(MetricReport {
        p2s_mm,
        chamfer_mm: 0.5 * (p2s_mm + mean(&to_scan)),
        recall_pct,
        precision_pct,
        f1_pct: f1_score(precision_pct, recall_pct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn square(half: f64) -> Mesh {
        Mesh {
            vertices: vec![
                Vec3::new(-half, -half, 0.0),
                Vec3::new(half, -half, 0.0),
                Vec3::new(half, half, 0.0),
                Vec3::new(-half, half, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            part_ids: None,
        }
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert!((closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c), a);
        assert_eq!(closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c), Vec3::new(0.5, 0.0, 0.0));
        let p = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((p - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn height_above_plane() {
        let m = square(10.0);
        assert!((p2s(&[Vec3::new(0.3, -0.2, 0.004)], &m).unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(p2s(&[Vec3::new(1.0, 2.0, 0.0)], &m).unwrap(), 0.0);
    }

    #[test]
    fn recall_counts() {
        let m = square(1.0);
        let on: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 * 0.05, 0.0, 0.0)).collect();
        assert_eq!(recall(&on, &m, 1.0).unwrap(), 100.0);
        let off: Vec<Vec3> = on.iter().map(|p| p + Vec3::new(0.0, 0.0, 0.002)).collect();
        assert_eq!(recall(&off, &m, 1.0).unwrap(), 0.0);
        let half: Vec<Vec3> = on[..5].iter().chain(&off[5..]).copied().collect();
        assert_eq!(recall(&half, &m, 1.0).unwrap(), 50.0);
    }

    #[test]
    fn f1_edge_cases() {
        assert_eq!(f1_score(100.0, 0.0), 0.0);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert!((f1_score(50.0, 100.0) - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_uniform_over_quadrants() {
        let pts = sample_mesh(&square(1.0), 8000, 3).unwrap();
        assert_eq!(pts.len(), 8000);
        let mut counts = [0.0f64; 4];
        for p in &pts {
            counts[(p.x > 0.0) as usize + 2 * (p.y > 0.0) as usize] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 2000.0).powi(2) / 2000.0).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn sampling_rejects_empty_and_degenerate() {
        assert!(sample_mesh(&Mesh::default(), 10, 0).is_err());
        let flat = Mesh { vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0], triangles: vec![[0, 1, 2]], part_ids: None };
        assert!(sample_mesh(&flat, 10, 0).is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let m = square(0.1);
        let pts = sample_mesh(&m, 2000, 9).unwrap();
        let r = chamfer_and_f1(&pts, &m, 1.0, 2000, 9).unwrap();
        assert!(r.chamfer_mm < 1e-6 && r.f1_pct > 99.9, "{r:?}");
    }

    #[test]
    fn offset_scan_gives_chamfer_near_offset() {
        let m = square(0.01);
        let pts: Vec<Vec3> = sample_mesh(&m, 20000, 1).unwrap().iter().map(|p| p + Vec3::new(0.0, 0.0, 0.0005)).collect();
        let r = chamfer_and_f1(&pts, &m, 1.0, 5000, 2).unwrap();
        assert!((r.p2s_mm - 0.5).abs() < 1e-9, "{r:?}");
        assert!((r.chamfer_mm - 0.5).abs() < 0.02, "{r:?}");
    }

    #[test]
    fn point_index_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..500).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let idx = PointIndex::new(&pts).unwrap();
        for _ in 0..50 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 1.5;
            let brute = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(idx.distance(&q), brute);
        }
    }
}
