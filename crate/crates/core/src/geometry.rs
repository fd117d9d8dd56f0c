//! Point cloud kernels: Chamfer distances, F-score, farthest point sampling,
//! ball query, and the plain-text `x y z` file format.
//!
//! Nearest-neighbor search here expands `|a - b|² = |a|² + |b|² - 2 a·b`
//! with a matrix product to pick candidates, then recomputes the chosen
//! distance from coordinate differences. [`nn_brute`] is the exhaustive
//! difference-loop reference the metrics are tested against.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Mat};

/// Ordered set of 3-D points. Never empty; every coordinate finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    /// Interprets an `n × 3` matrix as a cloud.
    pub fn from_mat(m: &Mat) -> Result<Self> {
        if m.cols() != 3 {
            return Err(Error::invalid(format!("expected n x 3 coordinates, got {:?}", m.shape())));
        }
        Self::new((0..m.rows()).map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]).collect())
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.points.len(),
            3,
            self.points.iter().flat_map(|p| p.iter().copied()).collect(),
        )
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        let pts = idx
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range for {} points", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(pts)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Writes one `x y z` line per point. Values use shortest round-trip
    /// formatting so a reload is bit-exact.
    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_xyz_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_xyz_string(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 48);
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn read_xyz(path: &Path) -> Result<PointCloud> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text).map_err(|msg| Error::parse(path, msg))
    }

    /// Blank lines are skipped; anything else must be three finite numbers.
    pub fn parse_xyz(text: &str) -> std::result::Result<PointCloud, String> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut p = [0.0; 3];
            let mut fields = line.split_whitespace();
            for slot in p.iter_mut() {
                let field = fields
                    .next()
                    .ok_or_else(|| format!("line {}: expected 3 coordinates", lineno + 1))?;
                let v: f64 = field
                    .parse()
                    .map_err(|_| format!("line {}: cannot parse {field:?}", lineno + 1))?;
                if !v.is_finite() {
                    return Err(format!("line {}: non-finite coordinate {field:?}", lineno + 1));
                }
                *slot = v;
            }
            if fields.next().is_some() {
                return Err(format!("line {}: more than 3 coordinates", lineno + 1));
            }
            points.push(p);
        }
        PointCloud::new(points).map_err(|e| e.to_string())
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

const NN_BLOCK: usize = 256;

/// For each row of `a` (an `n × 3` matrix), the index of its nearest row in
/// `b` and the Euclidean distance to it. Ties go to the lowest index.
pub fn nearest_neighbors(a: &Mat, b: &Mat) -> (Vec<usize>, Vec<f64>) {
    assert!(a.cols() == 3 && b.cols() == 3 && b.rows() > 0);
    let b_norms: Vec<f64> = (0..b.rows()).map(|j| dist2(b.row(j), &[0.0; 3])).collect();
    let mut idx = Vec::with_capacity(a.rows());
    let mut dist = Vec::with_capacity(a.rows());
    for start in (0..a.rows()).step_by(NN_BLOCK) {
        let end = (start + NN_BLOCK).min(a.rows());
        let block = a.select_rows(&(start..end).collect::<Vec<_>>());
        let cross = matmul(&block, false, b, true);
        for r in 0..block.rows() {
            let row = cross.row(r);
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for (j, (&c, &bn)) in row.iter().zip(&b_norms).enumerate() {
                let v = bn - 2.0 * c;
                if v < best_val {
                    best_val = v;
                    best = j;
                }
            }
            idx.push(best);
            dist.push(dist2(block.row(r), b.row(best)).sqrt());
        }
    }
    (idx, dist)
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer/fscore need non-empty clouds"));
    }
    Ok(())
}

/// Symmetric l1 Chamfer distance: half the mean nearest-neighbor distance
/// from `a` to `b` plus half the mean from `b` to `a`. Each direction is
/// averaged over its own cloud, so unequal sizes are well defined.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_pair(a, b)?;
    let (am, bm) = (a.to_mat(), b.to_mat());
    let (_, dab) = nearest_neighbors(&am, &bm);
    let (_, dba) = nearest_neighbors(&bm, &am);
    Ok(0.5 * mean(&dab) + 0.5 * mean(&dba))
}

/// Squared-distance Chamfer: `mean_a min |a-b|² + mean_b min |a-b|²`.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_pair(a, b)?;
    let (am, bm) = (a.to_mat(), b.to_mat());
    let (_, dab) = nearest_neighbors(&am, &bm);
    let (_, dba) = nearest_neighbors(&bm, &am);
    let sq = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    Ok(sq(&dab) + sq(&dba))
}

/// F-score at threshold `d`: harmonic mean of the fractions of `a` and of
/// `b` whose nearest squared distance to the other cloud is below `d`.
/// Returns 0 when neither fraction is positive.
pub fn fscore(a: &PointCloud, b: &PointCloud, d: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::invalid(format!("F-score threshold must be positive, got {d}")));
    }
    check_pair(a, b)?;
    let (am, bm) = (a.to_mat(), b.to_mat());
    let (_, dab) = nearest_neighbors(&am, &bm);
    let (_, dba) = nearest_neighbors(&bm, &am);
    Ok(harmonic(within(&dab, d), within(&dba, d)))
}

fn within(dists: &[f64], d: f64) -> f64 {
    dists.iter().filter(|&&v| v * v < d).count() as f64 / dists.len() as f64
}

pub(crate) fn harmonic(x: f64, y: f64) -> f64 {
    if x + y > 0.0 {
        2.0 * x * y / (x + y)
    } else {
        0.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// All three evaluation metrics for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
    pub threshold_d: f64,
}

impl MetricReport {
    /// One nearest-neighbor pass shared by all three metrics.
    pub fn compute(pred: &PointCloud, truth: &PointCloud, d: f64) -> Result<Self> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("F-score threshold must be positive, got {d}")));
        }
        check_pair(pred, truth)?;
        let (pm, tm) = (pred.to_mat(), truth.to_mat());
        let (_, dpt) = nearest_neighbors(&pm, &tm);
        let (_, dtp) = nearest_neighbors(&tm, &pm);
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        Ok(MetricReport {
            cd_l1: 0.5 * mean(&dpt) + 0.5 * mean(&dtp),
            cd_l2: sq(&dpt) + sq(&dtp),
            fscore: harmonic(within(&dpt, d), within(&dtp, d)),
            threshold_d: d,
        })
    }
}

/// Exhaustive nearest distances in both directions: `(a → b, b → a)`.
pub fn nn_brute(a: &PointCloud, b: &PointCloud) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    let one_way = |from: &PointCloud, to: &PointCloud| {
        from.points()
            .iter()
            .map(|p| {
                to.points()
                    .iter()
                    .map(|q| dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect::<Vec<_>>()
    };
    Ok((one_way(a, b), one_way(b, a)))
}

/// Greedy farthest point sampling. Starts at `start`, then repeatedly takes
/// the point whose distance to the selected set is largest, lowest index
/// first on ties.
pub fn fps(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot sample {k} of {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range for {n} points")));
    }
    let pts = pc.points();
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        selected.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Fixed-width neighborhoods. Each list starts with its center, continues
/// with the other points within `radius` in index order, stops at `max_k`,
/// and is padded by repeating the center.
pub fn ball_query(pc: &PointCloud, centers: &[usize], radius: f64, max_k: usize) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("ball radius must be positive, got {radius}")));
    }
    if max_k == 0 {
        return Err(Error::invalid("ball query needs max_k >= 1"));
    }
    let pts = pc.points();
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let center = pts
                .get(c)
                .ok_or_else(|| Error::invalid(format!("center index {c} out of range for {} points", pts.len())))?;
            let mut members = Vec::with_capacity(max_k);
            members.push(c);
            for (i, p) in pts.iter().enumerate() {
                if members.len() == max_k {
                    break;
                }
                if i != c && dist2(p, center) <= r2 {
                    members.push(i);
                }
            }
            members.resize(max_k, c);
            Ok(members)
        })
        .collect()
}
