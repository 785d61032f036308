//! Full segmentation model: 2D backbone with interleaved cross-view 3D
//! fusion, cross-scale decoder, query refinement, and mask/class heads.
//! A single code path serves pure-2D (single frames, no geometry) and
//! posed RGB-D multiview input.

use crate::backbone::{Backbone, PYRAMID_STRIDES};
use crate::decoder::{transfer_to_mesh, Decoder, DecoderConfig, PromptEncoding, ScaleTokens};
use crate::decoder::fourier_pos_2d;
use crate::fusion3d::{fusion_stage, FusionStageConfig, RelPosAttention, ViewGeometry};
use crate::geometry::{fill_depth_holes, nearest_resize_depth, Vec3};
use crate::graph::NodeId;
use crate::nn::{Ctx, Initializer, ParamStore};
use crate::scenedata::Vocabulary;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Backbone base width C (pyramid widths C/2C/4C/8C).
    pub backbone_width: usize,
    pub decoder: DecoderConfig,
    /// Voxel edge length at stride 4; scales linearly with stride.
    pub voxel_size4: f64,
    /// Neighbors per token in the 3D attention graph.
    pub knn: usize,
    /// Attention layers per 3D fusion insertion.
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    /// false disables all cross-view 3D fusion (per-view 2D even on
    /// multiview input).
    pub enable_3d_fusion: bool,
    /// false keeps 3D fusion only in the decoder scales (late fusion),
    /// skipping the insertions interleaved into the backbone.
    pub interleaved_fusion: bool,
    /// Classify via prompt-token dot products instead of the closed MLP head.
    pub open_vocab: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_width: 16,
            decoder: DecoderConfig::default(),
            voxel_size4: 0.04,
            knn: 8,
            fusion_layers: 2,
            fusion_heads: 4,
            enable_3d_fusion: true,
            interleaved_fusion: true,
            open_vocab: false,
        }
    }
}

/// Mask and class logits from one prediction tap (initial queries or after a
/// refinement round).
pub struct RoundPrediction {
    /// [N, Nt] over the concatenated 1/4-scale tokens of all views.
    pub mask_logits: NodeId,
    /// [N, classes+1]; last column no-object.
    pub class_logits: NodeId,
    /// Query state the prediction was made from.
    pub queries: NodeId,
}

pub struct Predictions {
    /// Initial-query prediction followed by one per refinement round; the
    /// last entry is the final output, earlier ones feed deep supervision.
    pub rounds: Vec<RoundPrediction>,
    /// [V·h4·w4, D] final token features (views concatenated in order).
    pub token_rows: NodeId,
    /// 3D positions of the 1/4 tokens (hole-filled depth); None in 2D mode.
    pub token_positions: Option<Vec<Vec3>>,
    /// (views, H/4, W/4).
    pub view_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub prompt: PromptEncoding,
    /// Fusion insertions interleaved after backbone stages 2/3/4.
    interleave: [RelPosAttention; 3],
    /// Fusion stages after the decoder's deformable attention, per scale.
    scale_fusion: [RelPosAttention; 3],
}

impl Model {
    pub fn new(mut cfg: ModelConfig, vocab: &Vocabulary) -> Self {
        cfg.decoder.classes = vocab.len();
        let backbone = Backbone::new(cfg.backbone_width);
        let decoder = Decoder::new(cfg.decoder, backbone.widths());
        let mk = |name: &str| RelPosAttention::new(name, cfg.decoder.d, cfg.fusion_heads, cfg.fusion_layers);
        let bw = backbone.widths();
        Model {
            backbone,
            decoder,
            prompt: PromptEncoding::new(vocab),
            // backbone-level fusion runs at the native stage widths
            interleave: [
                RelPosAttention::new("fusion.s2", bw[1], cfg.fusion_heads, cfg.fusion_layers),
                RelPosAttention::new("fusion.s3", bw[2], cfg.fusion_heads, cfg.fusion_layers),
                RelPosAttention::new("fusion.s4", bw[3], cfg.fusion_heads, cfg.fusion_layers),
            ],
            scale_fusion: [mk("fusion.d8"), mk("fusion.d16"), mk("fusion.d32")],
            cfg,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.backbone.init(store, init);
        self.decoder.init(store, init);
        for a in &self.interleave {
            a.init(store, init);
        }
        for a in &self.scale_fusion {
            a.init(store, init);
        }
        self.prompt.init(self.cfg.decoder.d, store, init);
    }

    fn voxel_size(&self, stride: usize) -> f64 {
        self.cfg.voxel_size4 * stride as f64 / 4.0
    }

    fn stage_cfg(&self, stride: usize) -> FusionStageConfig {
        FusionStageConfig { stride, voxel_size: self.voxel_size(stride), k: self.cfg.knn }
    }

    /// 3D positions of every map pixel at the given stride, raster order per
    /// view, views concatenated. Depth holes are filled by nearest valid
    /// depth so every token gets a position.
    pub fn token_positions(&self, geom: &ViewGeometry, stride: usize) -> Vec<Vec3> {
        let mut out = Vec::new();
        for v in 0..geom.views() {
            let filled = fill_depth_holes(&geom.depths[v]);
            let low = nearest_resize_depth(&filled, stride)
                .expect("stride must divide the depth resolution");
            let s = stride as f64;
            let (fx, fy) = (geom.intrinsics[v].fx / s, geom.intrinsics[v].fy / s);
            let (cx, cy) = (geom.intrinsics[v].cx / s, geom.intrinsics[v].cy / s);
            for r in 0..low.height {
                for c in 0..low.width {
                    let d = low.at(r, c);
                    let cam = [(c as f64 - cx) * d / fx, (r as f64 - cy) * d / fy, d];
                    out.push(geom.poses[v].cam_to_world(cam));
                }
            }
        }
        out
    }

    /// Runs one 3D fusion stage; when no pixel of any view can be lifted
    /// (all depth missing) the stage degenerates to identity, matching the
    /// per-pixel missing-depth passthrough.
    fn try_fusion(
        &self,
        ctx: &mut Ctx,
        attn: &RelPosAttention,
        maps: &[NodeId],
        geom: &ViewGeometry,
        stride: usize,
    ) -> Vec<NodeId> {
        match fusion_stage(ctx, attn, maps, geom, self.stage_cfg(stride)) {
            Ok(m) => m,
            Err(_) => maps.to_vec(),
        }
    }

    /// Full forward. `geom` present enables the 3D path (subject to the
    /// ablation switches); absent runs the pure per-view 2D path.
    pub fn forward(&self, ctx: &mut Ctx, views: &[NodeId], geom: Option<&ViewGeometry>) -> Predictions {
        let geom3d = if self.cfg.enable_3d_fusion { geom } else { None };

        let pyr = match geom3d {
            Some(g) if self.cfg.interleaved_fusion => {
                let mut hook = |level: usize, ctx: &mut Ctx, maps: Vec<NodeId>| {
                    self.try_fusion(ctx, &self.interleave[level - 1], &maps, g, PYRAMID_STRIDES[level])
                };
                self.backbone.forward(ctx, views, Some(&mut hook))
            }
            _ => self.backbone.forward(ctx, views, None),
        };

        let low = [pyr.maps[1].clone(), pyr.maps[2].clone(), pyr.maps[3].clone()];
        let proj = self.decoder.project_inputs(ctx, &low);
        let mut fused = self.decoder.cross_scale_fuse(ctx, &proj);
        if let Some(g) = geom3d {
            for s in 0..3 {
                fused[s] =
                    self.try_fusion(ctx, &self.scale_fusion[s], &fused[s], g, PYRAMID_STRIDES[s + 1]);
            }
        }

        let rows: Vec<NodeId> = (0..views.len())
            .map(|v| self.decoder.upsample_with_skip(ctx, fused[0][v], pyr.maps[0][v]))
            .collect();
        let token_rows = if rows.len() == 1 { rows[0] } else { ctx.g.concat_rows(&rows) };
        let (_, h4, w4) = ctx.g.value(pyr.maps[0][0]).dims3();
        let token_positions = geom.map(|g| self.token_positions(g, PYRAMID_STRIDES[0]));

        // positional signal for the mask tokens: per-view pixel coordinates,
        // identical across modes (world coordinates move under geometric
        // augmentation; pixel coordinates do not)
        let mask_pos = {
            let one = fourier_pos_2d(h4, w4, self.cfg.decoder.d);
            let mut data = Vec::with_capacity(one.len() * views.len());
            for _ in 0..views.len() {
                data.extend_from_slice(one.data());
            }
            ctx.g.constant(Tensor::new(vec![h4 * w4 * views.len(), one.shape()[1]], data))
        };
        let token_rows = self.decoder.inject_mask_positions(ctx, token_rows, mask_pos);

        // refinement context, coarse to fine (strides 32, 16, 8)
        let mut scales: Vec<ScaleTokens> = Vec::with_capacity(3);
        for s in [2usize, 1, 0] {
            let stride = PYRAMID_STRIDES[s + 1];
            let parts: Vec<NodeId> = fused[s].iter().map(|&m| ctx.g.map_to_rows(m)).collect();
            let rows = if parts.len() == 1 { parts[0] } else { ctx.g.concat_rows(&parts) };
            let pos = match geom3d {
                Some(g) => {
                    let p = self.token_positions(g, stride);
                    self.decoder.encode_positions_3d(ctx, &p)
                }
                None => {
                    let (_, h, w) = ctx.g.value(fused[s][0]).dims3();
                    let one = fourier_pos_2d(h, w, self.cfg.decoder.d);
                    let mut data = Vec::with_capacity(one.len() * views.len());
                    for _ in 0..views.len() {
                        data.extend_from_slice(one.data());
                    }
                    ctx.g.constant(Tensor::new(vec![one.shape()[0] * views.len(), one.shape()[1]], data))
                }
            };
            scales.push(ScaleTokens { rows, pos });
        }
        let scales: [ScaleTokens; 3] = match scales.try_into() {
            Ok(a) => a,
            Err(_) => unreachable!(),
        };

        let prompt_tokens = if self.cfg.open_vocab { Some(self.prompt.encode(ctx)) } else { None };
        let initial = ctx.p("decoder.queries");
        let states = self.decoder.refine_queries(ctx, &scales, prompt_tokens, self.cfg.decoder.rounds);

        let mut rounds = Vec::with_capacity(states.len() + 1);
        for q in std::iter::once(initial).chain(states) {
            let mask_logits = self.decoder.predict_masks(ctx, q, token_rows);
            let class_logits = match prompt_tokens {
                Some(pt) => self.decoder.predict_classes_open(ctx, q, &self.prompt, pt),
                None => self.decoder.predict_classes_closed(ctx, q),
            };
            rounds.push(RoundPrediction { mask_logits, class_logits, queries: q });
        }

        Predictions { rounds, token_rows, token_positions, view_shape: (views.len(), h4, w4) }
    }

    /// Mask logits of the final queries over arbitrary 3D query points,
    /// trilinearly transferred from the 1/4 token cloud.
    pub fn mask_logits_on_mesh(&self, ctx: &mut Ctx, preds: &Predictions, mesh: &[Vec3]) -> NodeId {
        let positions = preds
            .token_positions
            .as_ref()
            .expect("mesh transfer requires the 3D forward (geometry given)");
        let feats = transfer_to_mesh(ctx, positions, preds.token_rows, self.voxel_size(4), mesh);
        let last = preds.rounds.last().expect("at least the initial prediction exists");
        self.decoder.predict_masks(ctx, last.queries, feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            backbone_width: 2,
            decoder: DecoderConfig {
                d: 8,
                heads: 2,
                rounds: 1,
                num_queries: 3,
                classes: 0, // overwritten from the vocabulary
                deform_points: 2,
            },
            voxel_size4: 1e-4, // effectively one token per voxel
            knn: 4,
            fusion_layers: 1,
            fusion_heads: 2,
            enable_3d_fusion: true,
            interleaved_fusion: true,
            open_vocab: false,
        }
    }

    fn build(cfg: ModelConfig, seed: u64) -> (Model, ParamStore) {
        let vocab = Vocabulary::default_desk();
        let model = Model::new(cfg, &vocab);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init(&mut store, &mut Initializer { rng: &mut rng });
        (model, store)
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn simple_geometry(views: usize, h: usize, w: usize, seed: u64) -> ViewGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intr = CameraIntrinsics {
            fx: w as f64,
            fy: w as f64,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        };
        let mut geom = ViewGeometry { intrinsics: vec![], poses: vec![], depths: vec![] };
        for v in 0..views {
            let mut depth = DepthMap::zeros(h, w);
            for r in 0..h {
                for c in 0..w {
                    depth.set(r, c, rng.gen_range(1.0..3.0));
                }
            }
            let mut pose = CameraPose::identity();
            pose.translation = [v as f64 * 0.5, 0.0, 0.0];
            geom.intrinsics.push(intr.clone());
            geom.poses.push(pose);
            geom.depths.push(depth);
        }
        geom
    }

    #[test]
    fn mask_shape_contract() {
        let (model, store) = build(tiny_cfg(), 0);
        let (h, w) = (32, 32);

        let mut ctx = Ctx::new(&store);
        let v = ctx.g.constant(rand_image(h, w, 1));
        let preds = model.forward(&mut ctx, &[v], None);
        let last = preds.rounds.last().unwrap();
        assert_eq!(ctx.g.value(last.mask_logits).shape(), &[3, (h / 4) * (w / 4)]);
        assert_eq!(ctx.g.value(last.class_logits).shape(), &[3, 6]);
        assert_eq!(preds.rounds.len(), 2, "initial tap plus one refinement round");

        let mut ctx = Ctx::new(&store);
        let views: Vec<_> = (0..2).map(|i| ctx.g.constant(rand_image(h, w, 2 + i))).collect();
        let geom = simple_geometry(2, h, w, 3);
        let preds = model.forward(&mut ctx, &views, Some(&geom));
        let last = preds.rounds.last().unwrap();
        assert_eq!(ctx.g.value(last.mask_logits).shape(), &[3, 2 * (h / 4) * (w / 4)]);
        assert_eq!(preds.view_shape, (2, 8, 8));
    }

    #[test]
    fn structural_identity_at_init() {
        // zero-init residual fusion + singleton voxels: the multiview RGB-D
        // forward must match the per-view pure-2D forward
        let (model, store) = build(tiny_cfg(), 4);
        let (h, w) = (32, 32);
        let images = [rand_image(h, w, 5), rand_image(h, w, 6)];
        let geom = simple_geometry(2, h, w, 7);

        let mut ctx3 = Ctx::new(&store);
        let views: Vec<_> = images.iter().map(|im| ctx3.g.constant(im.clone())).collect();
        let p3 = model.forward(&mut ctx3, &views, Some(&geom));
        let m3 = ctx3.g.value(p3.rounds.last().unwrap().mask_logits).clone();
        let c3 = ctx3.g.value(p3.rounds.last().unwrap().class_logits).clone();

        let nt = (h / 4) * (w / 4);
        for (v, im) in images.iter().enumerate() {
            let mut ctx2 = Ctx::new(&store);
            let node = ctx2.g.constant(im.clone());
            let p2 = model.forward(&mut ctx2, &[node], None);
            let m2 = ctx2.g.value(p2.rounds.last().unwrap().mask_logits).clone();
            let c2 = ctx2.g.value(p2.rounds.last().unwrap().class_logits).clone();
            for q in 0..3 {
                for t in 0..nt {
                    let a = m3.at2(q, v * nt + t);
                    let b = m2.at2(q, t);
                    assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "mask {} vs {}", a, b);
                }
            }
            assert!(c3.max_abs_diff(&c2) <= 1e-6, "class logits must match");
        }
    }

    #[test]
    fn disable_3d_fusion_matches_2d_path() {
        let mut cfg = tiny_cfg();
        cfg.enable_3d_fusion = false;
        let (model, store) = build(cfg, 8);
        let (h, w) = (32, 32);
        let im = rand_image(h, w, 9);
        let geom = simple_geometry(1, h, w, 10);

        let run = |geom: Option<&ViewGeometry>| {
            let mut ctx = Ctx::new(&store);
            let v = ctx.g.constant(im.clone());
            let p = model.forward(&mut ctx, &[v], geom);
            ctx.g.value(p.rounds.last().unwrap().mask_logits).clone()
        };
        // positional encodings differ between modes but only feed residual
        // branches, which are zero-initialized
        assert!(run(Some(&geom)).max_abs_diff(&run(None)) <= 1e-12);
    }

    #[test]
    fn mesh_logits_match_pixel_logits_at_token_positions() {
        let (model, store) = build(tiny_cfg(), 11);
        let (h, w) = (32, 32);
        let geom = simple_geometry(1, h, w, 12);
        let mut ctx = Ctx::new(&store);
        let v = ctx.g.constant(rand_image(h, w, 13));
        let preds = model.forward(&mut ctx, &[v], Some(&geom));
        let positions = preds.token_positions.clone().unwrap();
        let mesh: Vec<_> = vec![positions[5], positions[40], positions[63]];
        let mesh_logits = model.mask_logits_on_mesh(&mut ctx, &preds, &mesh);
        let mesh_logits = ctx.g.value(mesh_logits).clone();
        let pix = ctx.g.value(preds.rounds.last().unwrap().mask_logits).clone();
        for (mi, &ti) in [5usize, 40, 63].iter().enumerate() {
            for q in 0..3 {
                let a = mesh_logits.at2(q, mi);
                let b = pix.at2(q, ti);
                assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn open_vocab_forward_runs() {
        let mut cfg = tiny_cfg();
        cfg.open_vocab = true;
        let (model, store) = build(cfg, 14);
        let mut ctx = Ctx::new(&store);
        let v = ctx.g.constant(rand_image(32, 32, 15));
        let preds = model.forward(&mut ctx, &[v], None);
        let last = preds.rounds.last().unwrap();
        assert_eq!(ctx.g.value(last.class_logits).shape(), &[3, 6]);
        assert!(ctx.g.value(last.class_logits).all_finite());
    }

    #[test]
    fn deterministic_forward() {
        let (model, store) = build(tiny_cfg(), 16);
        let im = rand_image(32, 32, 17);
        let geom = simple_geometry(1, 32, 32, 18);
        let run = || {
            let mut ctx = Ctx::new(&store);
            let v = ctx.g.constant(im.clone());
            let p = model.forward(&mut ctx, &[v], Some(&geom));
            ctx.g.value(p.rounds.last().unwrap().mask_logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
