//! Cross-view 3D fusion: lift per-view feature maps to a voxelized point
//! cloud, run k-NN attention with relative-position embeddings, and scatter
//! the updated features back into the per-view maps.

use std::rc::Rc;

use crate::geometry::{
    knn, nearest_resize_depth, unproject_depth, voxelize, CameraIntrinsics, CameraPose, DepthMap,
    FeaturizedPointCloud, GeometryError, KnnGraph, Provenance, Vec3, VoxelGrid,
};
use crate::graph::NodeId;
use crate::nn::{Ctx, Initializer, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Full-resolution per-view geometry; depths must already be hole-filled.
#[derive(Debug, Clone)]
pub struct ViewGeometry {
    pub intrinsics: Vec<CameraIntrinsics>,
    pub poses: Vec<CameraPose>,
    pub depths: Vec<DepthMap>,
}

impl ViewGeometry {
    pub fn views(&self) -> usize {
        self.poses.len()
    }
}

/// Voxel tokens plus everything needed to scatter them back to the maps.
pub struct Token3DSet {
    /// [M, D] pooled voxel features.
    pub features: NodeId,
    pub positions: Vec<Vec3>,
    pub knn: KnnGraph,
    pub grid: VoxelGrid,
    /// Per lifted point (cloud order): (view, row, col) at map resolution.
    pub provenance: Vec<Provenance>,
    /// (views, map height, map width).
    pub map_dims: (usize, usize, usize),
}

fn scaled_intrinsics(intr: &CameraIntrinsics, stride: usize) -> CameraIntrinsics {
    let s = stride as f64;
    CameraIntrinsics {
        fx: intr.fx / s,
        fy: intr.fy / s,
        cx: intr.cx / s,
        cy: intr.cy / s,
        width: intr.width / stride,
        height: intr.height / stride,
    }
}

/// Unprojects every valid-depth map pixel of every view, voxel mean-pools
/// positions and features, and builds the k-NN graph over the voxel tokens.
pub fn lift_to_3d(
    ctx: &mut Ctx,
    maps: &[NodeId],
    geom: &ViewGeometry,
    stride: usize,
    voxel_size: f64,
    k: usize,
) -> Result<Token3DSet, GeometryError> {
    assert_eq!(maps.len(), geom.views(), "map count must equal view count");
    let (_, h, w) = ctx.g.value(maps[0]).dims3();
    let mut positions: Vec<Vec3> = Vec::new();
    let mut provenance: Vec<Provenance> = Vec::new();
    let mut row_index: Vec<usize> = Vec::new(); // into the concatenated per-view rows
    for (v, &map) in maps.iter().enumerate() {
        let (_, mh, mw) = ctx.g.value(map).dims3();
        assert_eq!((mh, mw), (h, w), "all views must share map size");
        let intr = scaled_intrinsics(&geom.intrinsics[v], stride);
        assert_eq!((intr.height, intr.width), (h, w), "stride does not match map size");
        let coarse = nearest_resize_depth(&geom.depths[v], stride)?;
        let cloud = unproject_depth(&intr, &geom.poses[v], &coarse, v)?;
        for (&p, &(view, r, c)) in cloud.positions.iter().zip(&cloud.provenance) {
            positions.push(p);
            provenance.push((view, r, c));
            row_index.push(v * h * w + r * w + c);
        }
    }
    if positions.is_empty() {
        return Err(GeometryError::InvalidInput(
            "no 3D tokens: depth missing in every view".into(),
        ));
    }

    let assignment = voxelize(
        &FeaturizedPointCloud {
            positions: positions.clone(),
            features: Tensor::zeros(vec![positions.len(), 0]),
            provenance: provenance.clone(),
        },
        voxel_size,
    )?;
    let m = assignment.num_voxels();

    // in-graph mean pooling so gradients flow back to the maps
    let rows: Vec<NodeId> = maps.iter().map(|&mp| ctx.g.map_to_rows(mp)).collect();
    let all_rows = if rows.len() == 1 { rows[0] } else { ctx.g.concat_rows(&rows) };
    let point_feats = ctx.g.gather_rows(all_rows, Rc::new(row_index));
    let sums = ctx.g.scatter_sum_rows(point_feats, Rc::new(assignment.point_to_voxel.clone()), m);
    let inv_counts = Tensor::new(
        vec![m, 1],
        assignment.voxel_to_points.iter().map(|pts| 1.0 / pts.len() as f64).collect(),
    );
    let inv = ctx.g.constant(inv_counts);
    let features = ctx.g.mul_col(sums, inv);

    let graph = knn(&assignment.pooled_positions, k.min(m));
    Ok(Token3DSet {
        features,
        positions: assignment.pooled_positions.clone(),
        knn: graph,
        grid: assignment,
        provenance,
        map_dims: (maps.len(), h, w),
    })
}

/// One pre-norm attention layer over k-NN neighborhoods with relative
/// positional embeddings, plus a residual feed-forward block.
#[derive(Debug, Clone)]
struct RelPosLayer {
    name: String,
    d: usize,
    heads: usize,
    ln1: LayerNorm,
    ln2: LayerNorm,
    pos_mlp: Mlp,
    out: Linear,
    ff: Mlp,
}

impl RelPosLayer {
    fn new(name: String, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0);
        RelPosLayer {
            ln1: LayerNorm::new(format!("{}.ln1", name), d),
            ln2: LayerNorm::new(format!("{}.ln2", name), d),
            pos_mlp: Mlp::new(&format!("{}.pos", name), 3, d / 2, d),
            out: Linear::new(format!("{}.out", name), d, d),
            ff: Mlp::new(&format!("{}.ff", name), d, 2 * d, d),
            name,
            d,
            heads,
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.ln1.init(store, init);
        self.ln2.init(store, init);
        self.pos_mlp.init(store, init);
        let hd = self.d / self.heads;
        for h in 0..self.heads {
            for proj in ["q", "k", "v"] {
                store.insert(
                    &format!("{}.{}{}", self.name, proj, h),
                    init.kaiming(vec![self.d, hd], self.d),
                );
            }
        }
        // residual branches start as identity
        self.out.init_zero(store, init);
        self.ff.init_zero_out(store, init);
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId, graph: &KnnGraph) -> NodeId {
        let (m, d) = ctx.g.value(x).dims2();
        assert_eq!(d, self.d);
        let k = graph.k;
        let xn = self.ln1.forward(ctx, x);

        // relative positional embeddings for all (i, neighbor) pairs
        let mut off = Vec::with_capacity(m * k * 3);
        for o in &graph.relative_offset {
            off.extend_from_slice(o);
        }
        let offsets = ctx.g.constant(Tensor::new(vec![m * k, 3], off));
        let key_pos = self.pos_mlp.forward(ctx, offsets);
        let zero3 = ctx.g.constant(Tensor::zeros(vec![1, 3]));
        let query_pos = self.pos_mlp.forward(ctx, zero3);
        let query_pos = ctx.g.reshape(query_pos, vec![self.d]);

        let q_in = ctx.g.add_row(xn, query_pos);
        let neigh_idx = Rc::new(graph.neighbor_index.clone());
        let self_idx = Rc::new((0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect::<Vec<_>>());
        let xg = ctx.g.gather_rows(xn, neigh_idx.clone());
        let k_in = ctx.g.add(xg, key_pos);
        let v_in = ctx.g.gather_rows(xn, neigh_idx);

        let hd = self.d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = ctx.p(&format!("{}.q{}", self.name, h));
            let wk = ctx.p(&format!("{}.k{}", self.name, h));
            let wv = ctx.p(&format!("{}.v{}", self.name, h));
            let q = ctx.g.matmul(q_in, wq);
            let kk = ctx.g.matmul(k_in, wk);
            let vv = ctx.g.matmul(v_in, wv);
            let qg = ctx.g.gather_rows(q, self_idx.clone());
            let prod = ctx.g.mul(qg, kk);
            let scores = ctx.g.row_sum(prod); // [m*k, 1]
            let scores = ctx.g.scale(scores, scale);
            let scores = ctx.g.reshape(scores, vec![m, k]);
            let attn = ctx.g.softmax_rows(scores);
            let attn = ctx.g.reshape(attn, vec![m * k, 1]);
            let weighted = ctx.g.mul_col(vv, attn);
            head_outs.push(ctx.g.scatter_sum_rows(weighted, self_idx.clone(), m));
        }
        let cat = ctx.g.concat_cols(&head_outs);
        let branch = self.out.forward(ctx, cat);
        let x = ctx.g.add(x, branch);

        let xn2 = self.ln2.forward(ctx, x);
        let ff = self.ff.forward(ctx, xn2);
        ctx.g.add(x, ff)
    }
}

/// Stack of L k-NN attention layers (Eq. 1–2 style relative positions).
#[derive(Debug, Clone)]
pub struct RelPosAttention {
    layers: Vec<RelPosLayer>,
}

impl RelPosAttention {
    pub fn new(name: &str, d: usize, heads: usize, layers: usize) -> Self {
        RelPosAttention {
            layers: (0..layers)
                .map(|l| RelPosLayer::new(format!("{}.l{}", name, l), d, heads))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        for l in &self.layers {
            l.init(store, init);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, features: NodeId, graph: &KnnGraph) -> NodeId {
        let mut x = features;
        for l in &self.layers {
            x = l.forward(ctx, x, graph);
        }
        x
    }
}

/// Copies each voxel feature back to its member points and scatters them
/// into the per-view maps; pixels that contributed no point (missing depth)
/// keep their original feature.
pub fn project_to_2d(
    ctx: &mut Ctx,
    tokens: &Token3DSet,
    updated: NodeId,
    maps: &[NodeId],
) -> Vec<NodeId> {
    let (views, h, w) = tokens.map_dims;
    assert_eq!(maps.len(), views);
    let point_feats = ctx.g.gather_rows(updated, Rc::new(tokens.grid.point_to_voxel.clone()));
    let mut out = Vec::with_capacity(views);
    for (v, &map) in maps.iter().enumerate() {
        let cloud_idx: Vec<usize> = tokens
            .provenance
            .iter()
            .enumerate()
            .filter(|(_, &(pv, _, _))| pv == v)
            .map(|(i, _)| i)
            .collect();
        if cloud_idx.is_empty() {
            out.push(map);
            continue;
        }
        let pixel_idx: Vec<usize> = cloud_idx
            .iter()
            .map(|&i| {
                let (_, r, c) = tokens.provenance[i];
                r * w + c
            })
            .collect();
        let orig_rows = ctx.g.map_to_rows(map);
        let new_pix = ctx.g.gather_rows(point_feats, Rc::new(cloud_idx));
        let old_pix = ctx.g.gather_rows(orig_rows, Rc::new(pixel_idx.clone()));
        let delta = ctx.g.sub(new_pix, old_pix);
        let scattered = ctx.g.scatter_sum_rows(delta, Rc::new(pixel_idx), h * w);
        let rows = ctx.g.add(orig_rows, scattered);
        out.push(ctx.g.rows_to_map(rows, h, w));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct FusionStageConfig {
    pub stride: usize,
    pub voxel_size: f64,
    pub k: usize,
}

/// lift → L attention layers → project.
pub fn fusion_stage(
    ctx: &mut Ctx,
    attention: &RelPosAttention,
    maps: &[NodeId],
    geom: &ViewGeometry,
    cfg: FusionStageConfig,
) -> Result<Vec<NodeId>, GeometryError> {
    let tokens = lift_to_3d(ctx, maps, geom, cfg.stride, cfg.voxel_size, cfg.k)?;
    let updated = attention.forward(ctx, tokens.features, &tokens.knn);
    Ok(project_to_2d(ctx, &tokens, updated, maps))
}
