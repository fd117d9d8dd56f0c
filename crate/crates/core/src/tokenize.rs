//! Image and point cloud tokenizers.
//!
//! Both modalities become `N' × C'` token matrices with the same `N'`. The
//! image is cut into non-overlapping square patches, each projected linearly
//! to one token. The point cloud goes through cascaded farthest-point
//! sampling stages; every center gathers a ball-query neighborhood, encodes
//! member offsets (and the previous stage's features) pointwise, and
//! max-pools them into one feature. A pointwise embedding of the final
//! center coordinates is added to the pooled tokens.

use std::path::Path;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, StageConfig};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, fps, PointCloud};
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// `height × width × channels` pixel grid, values in `[0, 1]`, stored
/// row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageView {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageView {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must be finite and within [0, 1]"));
        }
        Ok(ImageView {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageView {
            height,
            width,
            channels: 3,
            pixels: vec![0.0; height * width * 3],
        }
    }

    /// Single-channel intensities replicated into three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        let pixels = gray.iter().flat_map(|&v| [v, v, v]).collect();
        Self::new(height, width, 3, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale images are widened to three channels; other channel counts
    /// are rejected.
    pub fn to_rgb(&self) -> Result<ImageView> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => ImageView::from_gray(self.height, self.width, &self.pixels),
            c => Err(Error::invalid(format!("cannot convert {c}-channel image to RGB"))),
        }
    }

    /// Row-major patch grid: one row per `patch × patch` tile, laid out as
    /// `(dy, dx, channel)`.
    pub fn patches(&self, patch: usize) -> Result<Mat> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "{}x{} image does not divide into {patch}-pixel patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let dim = patch * patch * self.channels;
        let mut out = Mat::zeros(gh * gw, dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut(gy * gw + gx);
                let mut k = 0;
                for dy in 0..patch {
                    let y = gy * patch + dy;
                    let start = (y * self.width + gx * patch) * self.channels;
                    let len = patch * self.channels;
                    row[k..k + len].copy_from_slice(&self.pixels[start..start + len]);
                    k += len;
                }
            }
        }
        Ok(out)
    }

    /// Loads an 8-bit PNG, scaling to `[0, 1]`. Grayscale is replicated to RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, 3, pixels)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let rgb = self.to_rgb().unwrap_or_else(|_| self.clone());
        rgb.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    PointCloud,
}

/// `N' × C'` token features with their modality. Point cloud sequences carry
/// the center coordinates of each token as `anchor` (`N' × 3`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub modality: Modality,
    pub anchor: Option<Mat>,
}

impl TokenSequence {
    pub fn new(tokens: Mat, modality: Modality) -> Self {
        TokenSequence {
            tokens,
            modality,
            anchor: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

/// Patch projection: a convolution whose kernel and stride both equal the patch size.
#[derive(Clone, Debug)]
pub struct ImageTokenizer {
    pub proj: Linear,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dim = cfg.patch * cfg.patch * 3;
        ImageTokenizer {
            proj: Linear::new(store, &format!("{name}.proj"), dim, cfg.channels, true, rng),
            patch: cfg.patch,
            height: cfg.image_height,
            width: cfg.image_width,
        }
    }

    /// Checks the image against the configured size and cuts it into patches.
    pub fn patches(&self, img: &ImageView) -> Result<Mat> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::config(format!(
                "expected a {}x{} image, got {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        img.to_rgb()?.patches(self.patch)
    }

    /// `patches` is the output of [`ImageTokenizer::patches`], as a tape leaf.
    pub fn forward(&self, tape: &mut Tape, patches: Var) -> Var {
        self.proj.forward(tape, patches)
    }

    pub fn tokenize(&self, store: &ParamStore, img: &ImageView) -> Result<TokenSequence> {
        let patches = self.patches(img)?;
        let mut tape = Tape::new(store);
        let p = tape.constant(patches);
        let t = self.forward(&mut tape, p);
        Ok(TokenSequence::new(tape.value(t).clone(), Modality::Image))
    }
}

/// Sampling and grouping of one tokenizer stage; independent of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGeometry {
    /// Center indices into the previous stage's point list.
    pub centers: Vec<usize>,
    /// `centers.len() * max_k` member indices, grouped per center.
    pub members: Vec<usize>,
    /// Member offsets from their center, one row per member.
    pub offsets: Mat,
    pub max_k: usize,
}

/// Everything the point tokenizer needs from the geometry of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGeometry {
    pub stages: Vec<StageGeometry>,
    /// Final centers, `N' × 3`.
    pub anchor: Mat,
}

/// Lexicographic `(x, y, z)` order; FPS always starts from the first point
/// of this order.
pub fn canonical_order(pc: &PointCloud) -> Vec<usize> {
    let pts = pc.points();
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&pts[a], &pts[b]);
        p[0].total_cmp(&q[0])
            .then(p[1].total_cmp(&q[1]))
            .then(p[2].total_cmp(&q[2]))
    });
    idx
}

/// Runs the sampling/grouping cascade. Fails when the cloud has fewer
/// points than the final token count.
pub fn prepare_geometry(pc: &PointCloud, stages: &[StageConfig], tokens: usize) -> Result<CloudGeometry> {
    if pc.len() < tokens {
        return Err(Error::invalid(format!(
            "point cloud has {} points but {tokens} tokens are required",
            pc.len()
        )));
    }
    let mut points = pc.select(&canonical_order(pc))?;
    let mut out = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let k = if i + 1 == stages.len() {
            tokens
        } else {
            stage.centers.min(points.len())
        };
        let centers = fps(&points, k, 0)?;
        let groups = ball_query(&points, &centers, stage.radius, stage.max_k)?;
        let members: Vec<usize> = groups.into_iter().flatten().collect();
        let mut offsets = Mat::zeros(members.len(), 3);
        let pts = points.points();
        for (row, &m) in members.iter().enumerate() {
            let c = pts[centers[row / stage.max_k]];
            let p = pts[m];
            offsets.row_mut(row).copy_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
        points = points.select(&centers)?;
        out.push(StageGeometry {
            centers,
            members,
            offsets,
            max_k: stage.max_k,
        });
    }
    Ok(CloudGeometry {
        stages: out,
        anchor: points.to_mat(),
    })
}

#[derive(Clone, Debug)]
struct StageLayers {
    offset_proj: Linear,
    feature_proj: Option<Linear>,
    out: Linear,
}

/// FPS/ball-query/max-pool point tokenizer with center positional embedding.
#[derive(Clone, Debug)]
pub struct PointTokenizer {
    stages: Vec<StageLayers>,
    pub pos_embed: PositionalEmbedding,
    stage_cfg: Vec<StageConfig>,
    tokens: usize,
}

impl PointTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut prev = 0;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let prefix = format!("{name}.stage{i}");
            stages.push(StageLayers {
                offset_proj: Linear::new(store, &format!("{prefix}.offset"), 3, s.width, true, rng),
                feature_proj: (prev > 0).then(|| Linear::new(store, &format!("{prefix}.feature"), prev, s.width, false, rng)),
                out: Linear::new(store, &format!("{prefix}.out"), s.width, s.width, true, rng),
            });
            prev = s.width;
        }
        PointTokenizer {
            stages,
            pos_embed: PositionalEmbedding::new(store, &format!("{name}.pos"), cfg.channels, rng),
            stage_cfg: cfg.stages.clone(),
            tokens: cfg.tokens,
        }
    }

    pub fn prepare(&self, pc: &PointCloud) -> Result<CloudGeometry> {
        prepare_geometry(pc, &self.stage_cfg, self.tokens)
    }

    pub fn forward(&self, tape: &mut Tape, geo: &CloudGeometry) -> Var {
        let mut features: Option<Var> = None;
        for (layers, g) in self.stages.iter().zip(&geo.stages) {
            let offsets = tape.constant(g.offsets.clone());
            let mut h = layers.offset_proj.forward(tape, offsets);
            if let (Some(f), Some(proj)) = (features, &layers.feature_proj) {
                let gathered = tape.gather_rows(f, &g.members);
                let fh = proj.forward(tape, gathered);
                h = tape.add(h, fh);
            }
            let h = tape.gelu(h);
            let h = layers.out.forward(tape, h);
            features = Some(tape.group_max(h, g.max_k));
        }
        let pooled = features.expect("tokenizer has at least one stage");
        let anchor = tape.constant(geo.anchor.clone());
        let pos = self.pos_embed.forward(tape, anchor);
        tape.add(pooled, pos)
    }

    pub fn tokenize(&self, store: &ParamStore, pc: &PointCloud) -> Result<TokenSequence> {
        let geo = self.prepare(pc)?;
        let mut tape = Tape::new(store);
        let t = self.forward(&mut tape, &geo);
        Ok(TokenSequence {
            tokens: tape.value(t).clone(),
            modality: Modality::PointCloud,
            anchor: Some(geo.anchor),
        })
    }
}

/// Pointwise two-layer map from center coordinates to token width.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub mlp: Mlp,
}

impl PositionalEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        PositionalEmbedding {
            mlp: Mlp::new(store, name, [3, channels, channels], rng),
        }
    }

    /// `centers` is an `N' × 3` tape value.
    pub fn forward(&self, tape: &mut Tape, centers: Var) -> Var {
        self.mlp.forward(tape, centers)
    }

    pub fn embed(&self, store: &ParamStore, centers: &Mat) -> Result<Mat> {
        if centers.cols() != 3 || !centers.is_finite() {
            return Err(Error::invalid("centers must be finite N x 3 coordinates"));
        }
        let mut tape = Tape::new(store);
        let c = tape.constant(centers.clone());
        let e = self.forward(&mut tape, c);
        Ok(tape.value(e).clone())
    }
}
