//! The completion network: tokenizers, shared encoder, shared transfer
//! network, cross-attention fusion and point decoder, wired according to the
//! selected [`Variant`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, RunConfig, Variant};
use crate::encoder::SharedStack;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::interaction::{direct_gram_loss_var, infor_loss_var, stc_loss_var, LossBundle};
use crate::nn::{Attention, LayerNorm, Mlp, TransformerStack};
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::tokenize::{CloudGeometry, ImageTokenizer, ImageView, Modality, PointTokenizer, TokenSequence};

/// Point cloud tokens attend once over image tokens; the attended values
/// are added back onto the point tokens.
#[derive(Clone, Debug)]
pub struct CrossFusion {
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub attn: Attention,
}

impl CrossFusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        CrossFusion {
            ln_query: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            ln_context: LayerNorm::new(store, &format!("{name}.ln_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, point: Var, image: Var, maps: Option<&mut Vec<Var>>) -> Var {
        let q = self.ln_query.forward(tape, point);
        let kv = self.ln_context.forward(tape, image);
        let a = self.attn.forward(tape, q, kv, maps);
        tape.add(point, a)
    }
}

/// Fused tokens plus the cross-attention weights that produced them,
/// `attention[head]` being `point tokens × image tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub tokens: Mat,
    pub attention: Vec<Mat>,
}

/// Self-attention over fused tokens, then a per-token head that emits
/// `output_points / tokens` points for every token.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stack: TransformerStack,
    pub norm: LayerNorm,
    pub head: Mlp,
    pub points_per_token: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let m = cfg.points_per_token();
        Decoder {
            stack: TransformerStack::new(store, &format!("{name}.stack"), cfg.decoder_depth, cfg.channels, cfg.heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.channels),
            head: Mlp::new(store, &format!("{name}.head"), [cfg.channels, cfg.decoder_hidden, 3 * m], rng),
            points_per_token: m,
        }
    }

    /// Returns an `(tokens · points_per_token) × 3` coordinate matrix.
    pub fn forward(&self, tape: &mut Tape, fused: Var) -> Var {
        let h = self.stack.forward(tape, fused, None);
        let h = self.norm.forward(tape, h);
        let out = self.head.forward(tape, h);
        let n = tape.shape(out).0 * self.points_per_token;
        tape.reshape(out, n, 3)
    }
}

/// Completed cloud for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionOutput {
    pub cloud: PointCloud,
}

/// Parameter-independent inputs of one sample, computed once and reused
/// across epochs.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub geometry: CloudGeometry,
    pub patches: Option<Mat>,
    pub target: Option<Mat>,
}

/// Tape handles produced by [`Model::forward_tape`].
pub struct TapeForward {
    pub output: Var,
    pub fused: Var,
    pub pc_stc: Var,
    pub pc_out: Var,
    pub img_stc: Option<Var>,
    pub img_out: Option<Var>,
    /// One weight matrix per head; empty without an image branch.
    pub cross_attention: Vec<Var>,
    pub l_infor: Var,
    pub l_stc: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub alpha: f64,
    pub params: ParamStore,
    pub image_tokenizer: Option<ImageTokenizer>,
    pub point_tokenizer: PointTokenizer,
    pub sfe: SharedStack,
    pub sft: Option<SharedStack>,
    pub fusion: Option<CrossFusion>,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the graph for `variant` with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, variant: Variant, alpha: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config;
        let with_image = variant != Variant::NoImage;
        let image_tokenizer = with_image.then(|| ImageTokenizer::new(&mut params, "tokenizer.image", c, &mut rng));
        let point_tokenizer = PointTokenizer::new(&mut params, "tokenizer.point", c, &mut rng);
        let stack = |params: &mut ParamStore, name: &str, depth: usize, rng: &mut ChaCha8Rng| {
            if variant == Variant::NoSharing {
                SharedStack::per_modality(params, name, depth, c.channels, c.heads, rng)
            } else {
                SharedStack::shared(params, name, depth, c.channels, c.heads, rng)
            }
        };
        let sfe = stack(&mut params, "sfe", c.sfe_depth, &mut rng);
        let sft = (variant != Variant::NoSftnet).then(|| stack(&mut params, "sft", c.sft_depth, &mut rng));
        let fusion = with_image.then(|| CrossFusion::new(&mut params, "fusion", c.channels, c.heads, &mut rng));
        let decoder = Decoder::new(&mut params, "decoder", c, &mut rng);
        Ok(Model {
            config: c.clone(),
            variant,
            alpha,
            params,
            image_tokenizer,
            point_tokenizer,
            sfe,
            sft,
            fusion,
            decoder,
        })
    }

    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(&cfg.model, cfg.variant, cfg.alpha, cfg.seed)
    }

    pub fn uses_image(&self) -> bool {
        self.image_tokenizer.is_some()
    }

    /// Samples, groups and patches the inputs. The image is ignored by the
    /// `no_image` variant.
    pub fn prepare(&self, partial: &PointCloud, image: &ImageView, target: Option<&PointCloud>) -> Result<PreparedSample> {
        let geometry = self.point_tokenizer.prepare(partial)?;
        let patches = match &self.image_tokenizer {
            Some(tok) => Some(tok.patches(image)?),
            None => None,
        };
        Ok(PreparedSample {
            geometry,
            patches,
            target: target.map(PointCloud::to_mat),
        })
    }

    pub fn forward_tape(&self, tape: &mut Tape, sample: &PreparedSample) -> TapeForward {
        let pc_tokens = self.point_tokenizer.forward(tape, &sample.geometry);
        let pc_stc = self.sfe.forward(tape, pc_tokens, Modality::PointCloud, None);
        let pc_out = match &self.sft {
            Some(sft) => sft.forward(tape, pc_stc, Modality::PointCloud, None),
            None => pc_stc,
        };

        let image = match (&self.image_tokenizer, &sample.patches) {
            (Some(tok), Some(p)) => {
                let patches = tape.constant(p.clone());
                let img_tokens = tok.forward(tape, patches);
                let img_stc = self.sfe.forward(tape, img_tokens, Modality::Image, None);
                let img_out = match &self.sft {
                    Some(sft) => sft.forward(tape, img_stc, Modality::Image, None),
                    None => img_stc,
                };
                Some((img_stc, img_out))
            }
            _ => None,
        };

        let (l_infor, l_stc) = match (image, self.sft.is_some()) {
            (Some((img_stc, img_out)), true) => (
                infor_loss_var(tape, img_stc, pc_stc, img_out, pc_out),
                stc_loss_var(tape, pc_stc, pc_out),
            ),
            (Some((img_stc, _)), false) => {
                let direct = direct_gram_loss_var(tape, img_stc, pc_stc);
                (direct, tape.constant(Mat::scalar(0.0)))
            }
            (None, true) => (tape.constant(Mat::scalar(0.0)), stc_loss_var(tape, pc_stc, pc_out)),
            (None, false) => (tape.constant(Mat::scalar(0.0)), tape.constant(Mat::scalar(0.0))),
        };

        let mut cross_attention = Vec::new();
        let fused = match (&self.fusion, image) {
            (Some(f), Some((_, img_out))) => f.forward(tape, pc_out, img_out, Some(&mut cross_attention)),
            _ => pc_out,
        };
        let output = self.decoder.forward(tape, fused);
        TapeForward {
            output,
            fused,
            pc_stc,
            pc_out,
            img_stc: image.map(|(s, _)| s),
            img_out: image.map(|(_, o)| o),
            cross_attention,
            l_infor,
            l_stc,
        }
    }

    /// Adds the Chamfer and total losses to the tape. Returns the objective
    /// to differentiate and the scalar bundle.
    pub fn objective(&self, tape: &mut Tape, fwd: &TapeForward, target: &Mat) -> (Var, LossBundle) {
        let l1cd = tape.chamfer_l1(fwd.output, target);
        let in_objective = self.variant != Variant::NoFtloss;
        let total = if in_objective {
            let transfer = tape.add(fwd.l_infor, fwd.l_stc);
            let weighted = tape.scale(transfer, self.alpha);
            tape.add(weighted, l1cd)
        } else {
            l1cd
        };
        let bundle = LossBundle::new(
            tape.value(fwd.l_infor).item(),
            tape.value(fwd.l_stc).item(),
            tape.value(l1cd).item(),
            self.alpha,
            in_objective,
        );
        (total, bundle)
    }

    /// Loss bundle and dense parameter gradients for one prepared sample.
    pub fn loss_and_grads(&self, sample: &PreparedSample) -> Result<(LossBundle, Vec<Mat>)> {
        let target = sample
            .target
            .as_ref()
            .ok_or_else(|| Error::invalid("sample has no ground truth for the loss"))?;
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_tape(&mut tape, sample);
        let (total, bundle) = self.objective(&mut tape, &fwd, target);
        let grads = tape.backward(total).into_param_grads(&self.params);
        Ok((bundle, grads))
    }

    pub fn predict_prepared(&self, sample: &PreparedSample) -> Result<(CompletionOutput, FusedFeature)> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_tape(&mut tape, sample);
        let cloud = PointCloud::from_mat(tape.value(fwd.output))
            .map_err(|e| Error::invalid(format!("decoder produced an invalid cloud: {e}")))?;
        let fused = FusedFeature {
            tokens: tape.value(fwd.fused).clone(),
            attention: fwd.cross_attention.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((CompletionOutput { cloud }, fused))
    }

    pub fn predict(&self, partial: &PointCloud, image: &ImageView) -> Result<CompletionOutput> {
        let sample = self.prepare(partial, image, None)?;
        Ok(self.predict_prepared(&sample)?.0)
    }

    /// Full pipeline against a ground-truth cloud.
    pub fn forward(&self, partial: &PointCloud, image: &ImageView, truth: &PointCloud) -> Result<(CompletionOutput, LossBundle)> {
        let sample = self.prepare(partial, image, Some(truth))?;
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_tape(&mut tape, &sample);
        let (_, bundle) = self.objective(&mut tape, &fwd, sample.target.as_ref().expect("target set above"));
        let cloud = PointCloud::from_mat(tape.value(fwd.output))?;
        Ok((CompletionOutput { cloud }, bundle))
    }

    /// Fuses concrete transfer outputs. Fails without an image branch.
    pub fn fuse(&self, pc_out: &TokenSequence, img_out: &TokenSequence) -> Result<FusedFeature> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("variant {} has no fusion layer", self.variant)))?;
        let c = self.config.channels;
        if pc_out.channels() != c || img_out.channels() != c || pc_out.is_empty() || img_out.is_empty() {
            return Err(Error::invalid(format!(
                "fusion expects width-{c} tokens, got {:?} and {:?}",
                pc_out.tokens.shape(),
                img_out.tokens.shape()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let p = tape.constant(pc_out.tokens.clone());
        let i = tape.constant(img_out.tokens.clone());
        let mut maps = Vec::new();
        let f = fusion.forward(&mut tape, p, i, Some(&mut maps));
        Ok(FusedFeature {
            tokens: tape.value(f).clone(),
            attention: maps.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    pub fn decode(&self, fused: &FusedFeature) -> Result<CompletionOutput> {
        if fused.tokens.cols() != self.config.channels {
            return Err(Error::invalid("fused tokens have the wrong width"));
        }
        let mut tape = Tape::new(&self.params);
        let f = tape.constant(fused.tokens.clone());
        let out = self.decoder.forward(&mut tape, f);
        Ok(CompletionOutput {
            cloud: PointCloud::from_mat(tape.value(out))?,
        })
    }

    pub fn tokenize_image(&self, image: &ImageView) -> Result<TokenSequence> {
        self.image_tokenizer
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("variant {} has no image tokenizer", self.variant)))?
            .tokenize(&self.params, image)
    }

    pub fn tokenize_pointcloud(&self, pc: &PointCloud) -> Result<TokenSequence> {
        self.point_tokenizer.tokenize(&self.params, pc)
    }

    /// Shared feature extractor applied to either modality.
    pub fn sfe_forward(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        self.sfe.apply(&self.params, seq)
    }

    /// Transfer network; the identity when it is ablated.
    pub fn sftnet_forward(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        match &self.sft {
            Some(s) => s.apply(&self.params, seq),
            None => Ok(seq.clone()),
        }
    }

    pub fn attention_maps(&self, seq: &TokenSequence) -> Result<Vec<Vec<Mat>>> {
        self.sfe.attention_maps(&self.params, seq)
    }
}

/// Builds the model graph for the configured ablation variant.
pub fn ablate_variant(cfg: &RunConfig) -> Result<Model> {
    Model::from_run_config(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect(),
        )
        .unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageView {
        ImageView::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn tiny(variant: Variant) -> Model {
        Model::new(&ModelConfig::tiny(), variant, 0.01, 7).unwrap()
    }

    #[test]
    fn fusion_rows_are_distributions_and_zero_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = tiny(Variant::Full);
        let pc = TokenSequence::new(Mat::from_vec(8, 16, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()), Modality::PointCloud);
        let img = TokenSequence::new(Mat::from_vec(8, 16, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()), Modality::Image);
        let fused = model.fuse(&pc, &img).unwrap();
        assert_eq!(fused.attention.len(), model.config.heads);
        for a in &fused.attention {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
        let fusion = model.fusion.clone().unwrap();
        for id in [fusion.attn.v.w, fusion.attn.v.b.unwrap(), fusion.attn.o.w, fusion.attn.o.b.unwrap()] {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(model.fuse(&pc, &img).unwrap().tokens, pc.tokens);

        let one = TokenSequence::new(img.tokens.select_rows(&[3]), Modality::Image);
        for a in model.fuse(&pc, &one).unwrap().attention {
            assert!(a.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn decoder_output_has_fixed_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny(Variant::Full);
        for _ in 0..3 {
            let tokens = Mat::from_vec(8, 16, (0..128).map(|_| rng.random_range(-3.0..3.0)).collect());
            let out = model.decode(&FusedFeature { tokens, attention: vec![] }).unwrap();
            assert_eq!(out.cloud.len(), model.config.output_points);
        }
        for n in [8, 32, 100] {
            let out = model.predict(&random_cloud(&mut rng, n), &random_image(&mut rng, 8, 16)).unwrap();
            assert_eq!(out.cloud.len(), 32);
        }
    }

    #[test]
    fn forward_is_deterministic_and_bundle_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny(Variant::Full);
        let pc = random_cloud(&mut rng, 40);
        let img = random_image(&mut rng, 8, 16);
        let truth = random_cloud(&mut rng, 50);
        let (a, ba) = model.forward(&pc, &img, &truth).unwrap();
        let (b, bb) = model.forward(&pc, &img, &truth).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        assert_eq!(ba.l_transfer, ba.l_infor + ba.l_stc);
        assert_eq!(ba.l_total, ba.alpha * ba.l_transfer + ba.l_l1cd);
        let l1 = crate::geometry::chamfer_l1(&a.cloud, &truth).unwrap();
        assert!((l1 - ba.l_l1cd).abs() < 1e-12);
    }

    #[test]
    fn no_image_ignores_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = tiny(Variant::NoImage);
        assert!(model.params.names().all(|n| !n.starts_with("tokenizer.image") && !n.starts_with("fusion")));
        let pc = random_cloud(&mut rng, 40);
        let a = model.predict(&pc, &random_image(&mut rng, 8, 16)).unwrap();
        let b = model.predict(&pc, &random_image(&mut rng, 8, 16)).unwrap();
        assert_eq!(a, b);
        let c = model.predict(&pc, &ImageView::zeros(3, 5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn no_sharing_duplicates_exactly_the_stacks() {
        let full = tiny(Variant::Full);
        let split = tiny(Variant::NoSharing);
        for prefix in ["sfe", "sft"] {
            assert_eq!(
                split.params.num_scalars_with_prefix(prefix),
                2 * full.params.num_scalars_with_prefix(prefix)
            );
        }
        let outside = |m: &Model| {
            m.params
                .names()
                .filter(|n| !n.starts_with("sfe") && !n.starts_with("sft"))
                .map(str::to_owned)
                .collect::<Vec<_>>()
        };
        assert_eq!(outside(&full), outside(&split));
    }

    #[test]
    fn no_ftloss_keeps_transfer_out_of_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny(Variant::NoFtloss);
        let (_, bundle) = model
            .forward(&random_cloud(&mut rng, 40), &random_image(&mut rng, 8, 16), &random_cloud(&mut rng, 30))
            .unwrap();
        assert!(bundle.l_transfer > 0.0);
        assert_eq!(bundle.l_total, bundle.l_l1cd);
    }

    #[test]
    fn no_sftnet_uses_direct_gram_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = tiny(Variant::NoSftnet);
        assert!(model.sft.is_none());
        let pc = random_cloud(&mut rng, 40);
        let img = random_image(&mut rng, 8, 16);
        let (_, bundle) = model.forward(&pc, &img, &random_cloud(&mut rng, 30)).unwrap();
        let pc_stc = model.sfe_forward(&model.tokenize_pointcloud(&pc).unwrap()).unwrap();
        let img_stc = model.sfe_forward(&model.tokenize_image(&img).unwrap()).unwrap();
        let direct = crate::interaction::loss_direct_gram(&img_stc, &pc_stc).unwrap();
        assert!((bundle.l_transfer - direct).abs() <= 1e-6 * direct.max(1.0));
        assert_eq!(bundle.l_stc, 0.0);
    }

    #[test]
    fn unknown_sizes_are_rejected() {
        let model = tiny(Variant::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = model.predict(&random_cloud(&mut rng, 40), &random_image(&mut rng, 16, 16));
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(Model::new(&ModelConfig::tiny(), Variant::Full, 0.0, 1).is_err());
    }
}
