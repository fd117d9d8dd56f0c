//! Procedural stand-in dataset: analytic shapes, half-space occlusion and
//! orthographic point-splat renders, written to disk behind a TSV manifest.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tokenize::ImageView;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Composite,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Composite => "composite",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape family {s:?}")))
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn sphere_point(rng: &mut impl Rng, center: [f64; 3], r: f64) -> [f64; 3] {
    let u = unit_vector(rng);
    [center[0] + r * u[0], center[1] + r * u[1], center[2] + r * u[2]]
}

/// Uniform point on the surface of an axis-aligned box.
fn box_point(rng: &mut impl Rng, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
    let [a, b, c] = half;
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (i, &area) in areas.iter().enumerate() {
        if pick < area {
            axis = i;
            break;
        }
        pick -= area;
    }
    let mut p = [0.0; 3];
    for (i, v) in p.iter_mut().enumerate() {
        *v = if i == axis {
            if rng.random::<bool>() {
                half[i]
            } else {
                -half[i]
            }
        } else {
            rng.random_range(-half[i]..=half[i])
        };
    }
    [center[0] + p[0], center[1] + p[1], center[2] + p[2]]
}

fn inside_box(p: [f64; 3], center: [f64; 3], half: [f64; 3]) -> bool {
    (0..3).all(|i| (p[i] - center[i]).abs() < half[i])
}

fn inside_sphere(p: [f64; 3], center: [f64; 3], r: f64) -> bool {
    crate::geometry::dist2(&p, &center) < r * r
}

/// `n` surface points of a random member of `family`, centered at the
/// origin and inside the unit cube. Deterministic in `seed`.
pub fn sample_shape(family: ShapeFamily, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an empty shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = [0.0; 3];
    let points: Vec<[f64; 3]> = match family {
        ShapeFamily::Sphere => {
            let r = rng.random_range(0.3..0.5);
            (0..n).map(|_| sphere_point(&mut rng, origin, r)).collect()
        }
        ShapeFamily::Box => {
            let half = [rng.random_range(0.15..0.5), rng.random_range(0.15..0.5), rng.random_range(0.15..0.5)];
            (0..n).map(|_| box_point(&mut rng, origin, half)).collect()
        }
        ShapeFamily::Cylinder => {
            let r = rng.random_range(0.2..0.5);
            let h = rng.random_range(0.2..0.5);
            let side = TAU * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() * (side + caps) < side {
                        let t = rng.random_range(0.0..TAU);
                        [r * t.cos(), r * t.sin(), rng.random_range(-h..=h)]
                    } else {
                        let t = rng.random_range(0.0..TAU);
                        let s = r * rng.random::<f64>().sqrt();
                        let z = if rng.random::<bool>() { h } else { -h };
                        [s * t.cos(), s * t.sin(), z]
                    }
                })
                .collect()
        }
        ShapeFamily::Torus => {
            let big = rng.random_range(0.25..0.35);
            let small = rng.random_range(0.08..0.15);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                // area element is proportional to big + small·cos v
                if rng.random::<f64>() * (big + small) > big + small * v.cos() {
                    continue;
                }
                let ring = big + small * v.cos();
                out.push([ring * u.cos(), ring * u.sin(), small * v.sin()]);
            }
            out
        }
        ShapeFamily::Composite => {
            let half = [rng.random_range(0.1..0.25), rng.random_range(0.1..0.25), rng.random_range(0.1..0.25)];
            let r = rng.random_range(0.12..0.25);
            let box_c = [-0.5 * half[0], 0.0, 0.0];
            let ball_c = [box_c[0] + half[0] + 0.5 * r, 0.0, rng.random_range(-0.1..0.1)];
            let box_area = 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]);
            let ball_area = 4.0 * PI * r * r;
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                if rng.random::<f64>() * (box_area + ball_area) < box_area {
                    let p = box_point(&mut rng, box_c, half);
                    if !inside_sphere(p, ball_c, r) {
                        out.push(p);
                    }
                } else {
                    let p = sphere_point(&mut rng, ball_c, r);
                    if !inside_box(p, box_c, half) {
                        out.push(p);
                    }
                }
            }
            let lo: Vec<f64> = (0..3).map(|i| out.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min)).collect();
            let hi: Vec<f64> = (0..3).map(|i| out.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
            let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
            let scale = if extent > 1.0 { 1.0 / extent } else { 1.0 };
            out.iter()
                .map(|p| {
                    let mut q = [0.0; 3];
                    for i in 0..3 {
                        q[i] = (p[i] - 0.5 * (lo[i] + hi[i])) * scale;
                    }
                    q
                })
                .collect()
        }
    };
    PointCloud::new(points)
}

/// Unit vector pointing from the origin toward a viewer at the given
/// azimuth (about +z, from +x) and elevation.
pub fn view_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    [elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Index partition produced by [`occlude_view`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Occlusion {
    pub visible: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl Occlusion {
    pub fn retention(&self) -> f64 {
        self.visible.len() as f64 / (self.visible.len() + self.hidden.len()).max(1) as f64
    }
}

/// Keeps points on the viewer's side of the plane through the origin
/// facing the viewpoint (`p · v ≥ 0`).
pub fn occlude_view(pc: &PointCloud, azimuth: f64, elevation: f64) -> Occlusion {
    let v = view_direction(azimuth, elevation);
    let (visible, hidden) = (0..pc.len()).partition(|&i| dot(&pc.points()[i], &v) >= 0.0);
    Occlusion { visible, hidden }
}

/// Retention bounds a usable occlusion must satisfy.
pub const RETENTION_RANGE: (f64, f64) = (0.25, 0.75);

const ELEVATION_RANGE: (f64, f64) = (-0.35, 0.6);

/// Draws occlusion viewpoints until the retained fraction is acceptable.
pub fn occlude_random_view(pc: &PointCloud, rng: &mut impl Rng) -> Result<(Occlusion, f64, f64)> {
    for _ in 0..1000 {
        let az = rng.random_range(0.0..TAU);
        let el = rng.random_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1);
        let occ = occlude_view(pc, az, el);
        let r = occ.retention();
        if (RETENTION_RANGE.0..=RETENTION_RANGE.1).contains(&r) {
            return Ok((occ, az, el));
        }
    }
    Err(Error::invalid("no viewpoint retains between 25% and 75% of the cloud"))
}

/// Half-width of the orthographic view volume; covers the unit cube from
/// any direction.
const VIEW_HALF_EXTENT: f64 = 0.8660254037844386;

/// Orthographic, depth-shaded splat render with three equal channels.
/// Background is 0; nearer points are brighter.
pub fn render_view(pc: &PointCloud, azimuth: f64, elevation: f64, height: usize, width: usize, splat_radius: f64) -> ImageView {
    let v = view_direction(azimuth, elevation);
    let up = if v[2].abs() > 0.99 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    // right = up × v, camera up = v × right
    let mut right = [up[1] * v[2] - up[2] * v[1], up[2] * v[0] - up[0] * v[2], up[0] * v[1] - up[1] * v[0]];
    let n = dot(&right, &right).sqrt();
    right.iter_mut().for_each(|x| *x /= n);
    let cam_up = [v[1] * right[2] - v[2] * right[1], v[2] * right[0] - v[0] * right[2], v[0] * right[1] - v[1] * right[0]];

    let mut depth = vec![f64::NEG_INFINITY; height * width];
    let r2 = splat_radius * splat_radius;
    let reach = splat_radius.ceil() as i64;
    for p in pc.points() {
        let px = (dot(p, &right) / VIEW_HALF_EXTENT + 1.0) * 0.5 * width as f64;
        let py = (1.0 - dot(p, &cam_up) / VIEW_HALF_EXTENT) * 0.5 * height as f64;
        let d = dot(p, &v);
        let (cx, cy) = (px.floor() as i64, py.floor() as i64);
        for y in cy - reach..=cy + reach {
            if y < 0 || y >= height as i64 {
                continue;
            }
            for x in cx - reach..=cx + reach {
                if x < 0 || x >= width as i64 {
                    continue;
                }
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                if dx * dx + dy * dy <= r2 {
                    let slot = &mut depth[y as usize * width + x as usize];
                    *slot = slot.max(d);
                }
            }
        }
    }
    let gray: Vec<f64> = depth
        .iter()
        .map(|&d| {
            if d == f64::NEG_INFINITY {
                0.0
            } else {
                (0.55 + 0.45 * d / VIEW_HALF_EXTENT).clamp(0.05, 1.0)
            }
        })
        .collect();
    ImageView::from_gray(height, width, &gray).expect("shaded values lie in [0, 1]")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// One manifest line; paths are relative to the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub family: ShapeFamily,
    pub seed: u64,
    pub complete: PathBuf,
    pub partial: PathBuf,
    pub view: PathBuf,
    pub occlusion_azimuth: f64,
    pub occlusion_elevation: f64,
    pub view_azimuth: f64,
    pub view_elevation: f64,
}

const HEADER: &str = "id\tsplit\tfamily\tseed\tcomplete\tpartial\tview\tocclusion_azimuth\tocclusion_elevation\tview_azimuth\tview_elevation";

/// A fully loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub complete: PointCloud,
    pub partial: PointCloud,
    pub view: ImageView,
    pub view_azimuth: f64,
    pub view_elevation: f64,
    pub family: ShapeFamily,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn to_tsv_string(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.split.as_str(),
                r.family,
                r.seed,
                r.complete.display(),
                r.partial.display(),
                r.view.display(),
                r.occlusion_azimuth,
                r.occlusion_elevation,
                r.view_azimuth,
                r.view_elevation
            ));
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> std::result::Result<Manifest, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err("missing or malformed header".into()),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 11 {
                return Err(format!("line {}: expected 11 fields, found {}", i + 1, f.len()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number {s:?}", i + 1));
            records.push(ManifestRecord {
                id: f[0].to_owned(),
                split: f[1].parse().map_err(|e: Error| format!("line {}: {e}", i + 1))?,
                family: f[2].parse().map_err(|e: Error| format!("line {}: {e}", i + 1))?,
                seed: f[3].parse().map_err(|_| format!("line {}: bad seed {:?}", i + 1, f[3]))?,
                complete: f[4].into(),
                partial: f[5].into(),
                view: f[6].into(),
                occlusion_azimuth: num(f[7])?,
                occlusion_elevation: num(f[8])?,
                view_azimuth: num(f[9])?,
                view_elevation: num(f[10])?,
            });
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            records,
        })
    }

    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::parse(&text, &root).map_err(|m| Error::parse(&file, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<SampleRecord> {
        Ok(SampleRecord {
            id: record.id.clone(),
            complete: PointCloud::read_xyz(&self.root.join(&record.complete))?,
            partial: PointCloud::read_xyz(&self.root.join(&record.partial))?,
            view: ImageView::load_png(&self.root.join(&record.view))?,
            view_azimuth: record.view_azimuth,
            view_elevation: record.view_elevation,
            family: record.family,
            seed: record.seed,
        })
    }
}

/// Resamples the visible indices to exactly `count` entries: a sorted
/// subset when there are enough, otherwise all of them plus random repeats.
fn resample(visible: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if visible.len() >= count {
        let mut pick = rand::seq::index::sample(rng, visible.len(), count).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|i| visible[i]).collect()
    } else {
        let mut out = visible.to_vec();
        while out.len() < count {
            out.push(visible[rng.random_range(0..visible.len())]);
        }
        out
    }
}

/// Generates one sample in memory.
pub fn generate_sample(id: &str, family: ShapeFamily, seed: u64, cfg: &DataConfig) -> Result<(SampleRecord, f64, f64)> {
    let complete = sample_shape(family, cfg.complete_points, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (occ, occ_az, occ_el) = occlude_random_view(&complete, &mut rng)?;
    let partial = complete.select(&resample(&occ.visible, cfg.partial_points, &mut rng))?;
    let sep = cfg.min_view_separation_deg.to_radians();
    let view_az = (occ_az + rng.random_range(sep..=TAU - sep)).rem_euclid(TAU);
    let view_el = rng.random_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1);
    let view = render_view(&complete, view_az, view_el, cfg.image_height, cfg.image_width, cfg.splat_radius);
    let record = SampleRecord {
        id: id.to_owned(),
        complete,
        partial,
        view,
        view_azimuth: view_az,
        view_elevation: view_el,
        family,
        seed,
    };
    Ok((record, occ_az, occ_el))
}

/// Writes `train + val` samples under `out` and returns the manifest, which
/// is also saved as `out/manifest.tsv`. Families cycle in a fixed order.
pub fn build_dataset(out: &Path, n_train: usize, n_val: usize, cfg: &DataConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_train + n_val);
    for i in 0..n_train + n_val {
        if i == 0 {
            for sub in ["complete", "partial", "view"] {
                let d = out.join(sub);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
        let split = if i < n_train { Split::Train } else { Split::Val };
        let family = ShapeFamily::ALL[i % ShapeFamily::ALL.len()];
        let sample_seed = master.next_u64();
        let id = format!("{}{:05}", &split.as_str()[..1], i);
        let (sample, occ_az, occ_el) = generate_sample(&id, family, sample_seed, cfg)?;
        let rec = ManifestRecord {
            id: id.clone(),
            split,
            family,
            seed: sample_seed,
            complete: PathBuf::from(format!("complete/{id}.xyz")),
            partial: PathBuf::from(format!("partial/{id}.xyz")),
            view: PathBuf::from(format!("view/{id}.png")),
            occlusion_azimuth: occ_az,
            occlusion_elevation: occ_el,
            view_azimuth: sample.view_azimuth,
            view_elevation: sample.view_elevation,
        };
        sample.complete.write_xyz(&out.join(&rec.complete))?;
        sample.partial.write_xyz(&out.join(&rec.partial))?;
        sample.view.save_png(&out.join(&rec.view))?;
        records.push(rec);
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_lie_on_one_radius() {
        let pc = sample_shape(ShapeFamily::Sphere, 500, 3).unwrap();
        let norms: Vec<f64> = pc.points().iter().map(|p| dot(p, p).sqrt()).collect();
        assert!(norms.iter().all(|r| (r - norms[0]).abs() < 1e-6));
    }

    #[test]
    fn box_points_lie_on_faces() {
        let pc = sample_shape(ShapeFamily::Box, 500, 4).unwrap();
        let (lo, hi) = pc.bounds();
        for p in pc.points() {
            let on_face = (0..3).any(|i| (p[i] - lo[i]).abs() < 1e-6 || (p[i] - hi[i]).abs() < 1e-6);
            assert!(on_face, "{p:?}");
        }
    }

    #[test]
    fn shapes_are_deterministic_and_fit_the_unit_cube() {
        for family in ShapeFamily::ALL {
            let a = sample_shape(family, 300, 11).unwrap();
            assert_eq!(a, sample_shape(family, 300, 11).unwrap());
            assert_ne!(a, sample_shape(family, 300, 12).unwrap());
            let (lo, hi) = a.bounds();
            assert!(lo.iter().chain(&hi).all(|v| v.abs() <= 0.5 + 1e-12), "{family}");
        }
        assert!("cone".parse::<ShapeFamily>().is_err());
    }

    #[test]
    fn half_space_occlusion_on_the_x_axis() {
        let pc = sample_shape(ShapeFamily::Sphere, 1000, 5).unwrap();
        let occ = occlude_view(&pc, 0.0, 0.0);
        assert!(occ.visible.iter().all(|&i| pc.points()[i][0] >= 0.0));
        assert!(occ.hidden.iter().all(|&i| pc.points()[i][0] < 0.0));
        let mut all: Vec<usize> = occ.visible.iter().chain(&occ.hidden).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn random_views_respect_retention_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for family in ShapeFamily::ALL {
            let pc = sample_shape(family, 400, 6).unwrap();
            let (occ, _, _) = occlude_random_view(&pc, &mut rng).unwrap();
            assert!((0.25..=0.75).contains(&occ.retention()));
        }
    }

    #[test]
    fn render_is_bounded_with_empty_background() {
        let pc = sample_shape(ShapeFamily::Torus, 800, 7).unwrap();
        let img = render_view(&pc, 0.4, 0.3, 48, 40, 1.2);
        assert_eq!((img.height(), img.width(), img.channels()), (48, 40, 3));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert!(img.pixels().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn sphere_renders_to_a_disk() {
        let pc = sample_shape(ShapeFamily::Sphere, 40_000, 8).unwrap();
        let (h, w) = (128, 128);
        let img = render_view(&pc, 1.0, 0.2, h, w, 1.0);
        let covered: Vec<(usize, usize)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| img.get(y, x, 0) > 0.0).collect();
        let y0 = covered.iter().map(|c| c.0).min().unwrap();
        let y1 = covered.iter().map(|c| c.0).max().unwrap();
        let x0 = covered.iter().map(|c| c.1).min().unwrap();
        let x1 = covered.iter().map(|c| c.1).max().unwrap();
        let square = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        let ratio = covered.len() as f64 / square;
        assert!((ratio - PI / 4.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn manifest_round_trips() {
        let m = Manifest {
            root: PathBuf::from("/data"),
            records: vec![ManifestRecord {
                id: "t00000".into(),
                split: Split::Train,
                family: ShapeFamily::Torus,
                seed: u64::MAX,
                complete: "complete/t00000.xyz".into(),
                partial: "partial/t00000.xyz".into(),
                view: "view/t00000.png".into(),
                occlusion_azimuth: 0.1 + 0.2,
                occlusion_elevation: -1e-300,
                view_azimuth: 6.0,
                view_elevation: 0.25,
            }],
        };
        let text = m.to_tsv_string();
        assert_eq!(Manifest::parse(&text, Path::new("/data")).unwrap(), m);
        assert!(Manifest::parse("id\n", Path::new(".")).is_err());
    }

    #[test]
    fn sample_views_are_separated_and_partials_are_subsets() {
        let cfg = DataConfig::small();
        for (i, family) in ShapeFamily::ALL.into_iter().enumerate() {
            let (s, occ_az, _) = generate_sample("x", family, 100 + i as u64, &cfg).unwrap();
            let diff = (s.view_azimuth - occ_az).rem_euclid(TAU);
            assert!(diff.min(TAU - diff) >= 30f64.to_radians() - 1e-9);
            assert_eq!(s.partial.len(), cfg.partial_points);
            assert!(s.partial.points().iter().all(|p| s.complete.points().contains(p)));
        }
    }
}
