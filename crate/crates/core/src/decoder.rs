//! Query-based mask/class decoder shared by the 2D and 3D paths:
//! cross-scale deformable fusion, upsampling with a 1/4 skip, sensor-to-mesh
//! feature transfer, query refinement, and closed/open-vocabulary heads.

use std::rc::Rc;

use crate::geometry::{trilinear_combos, Vec3};
use crate::graph::{sigmoid, NodeId};
use crate::nn::{Ctx, Initializer, LayerNorm, Linear, Mlp, MultiheadAttention, ParamStore};
use crate::scenedata::Vocabulary;
use crate::tensor::Tensor;

pub const DEFORM_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    /// Common token width all pyramid scales project to.
    pub d: usize,
    pub heads: usize,
    /// Query refinement rounds (each cycles scales 32 -> 16 -> 8).
    pub rounds: usize,
    pub num_queries: usize,
    /// Vocabulary size; class logits get one extra no-object column.
    pub classes: usize,
    /// Deformable sampling points per level.
    pub deform_points: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { d: 64, heads: 4, rounds: 3, num_queries: 20, classes: 5, deform_points: 4 }
    }
}

/// One deformable-attention layer for a fixed query scale: every query
/// samples K learned offset locations in each of the three levels and
/// combines them with softmax weights.
#[derive(Debug, Clone)]
struct DeformLayer {
    offset: Linear,
    weight: Linear,
    out: Linear,
    k: usize,
}

impl DeformLayer {
    fn new(name: &str, d: usize, k: usize) -> Self {
        DeformLayer {
            offset: Linear::new(format!("{}.offset", name), d, DEFORM_LEVELS * k * 2),
            weight: Linear::new(format!("{}.weight", name), d, DEFORM_LEVELS * k),
            out: Linear::new(format!("{}.out", name), d, d),
            k,
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        // zero offsets: all samples start at the reference point; zero
        // weights: uniform combination; zero out: residual identity
        self.offset.init_zero(store, init);
        self.weight.init_zero(store, init);
        self.out.init_zero(store, init);
    }

    /// `q_rows` [Ns,D] with normalized reference coords `refs` [Ns,2] in
    /// [0,1]²; `values[l]` are value-projected maps [D,h_l,w_l].
    fn forward(&self, ctx: &mut Ctx, q_rows: NodeId, refs: &Tensor, values: &[NodeId]) -> NodeId {
        assert_eq!(values.len(), DEFORM_LEVELS);
        let (ns, _) = ctx.g.value(q_rows).dims2();
        let offsets = self.offset.forward(ctx, q_rows);
        let wlogits = self.weight.forward(ctx, q_rows);
        let weights = ctx.g.softmax_rows(wlogits);
        let refc = ctx.g.constant(refs.clone());
        let mut accum: Option<NodeId> = None;
        for l in 0..DEFORM_LEVELS {
            let (_, hl, wl) = ctx.g.value(values[l]).dims3();
            let scale = Tensor::new(
                vec![ns, 2],
                (0..ns).flat_map(|_| [wl as f64, hl as f64]).collect(),
            );
            for k in 0..self.k {
                let off = ctx.g.slice_cols(offsets, (l * self.k + k) * 2, 2);
                let pos = ctx.g.add(off, refc);
                let px = ctx.g.mul_const(pos, scale.clone());
                let px = ctx.g.add_scalar(px, -0.5);
                let samp = ctx.g.grid_sample(values[l], px);
                let w = ctx.g.slice_cols(weights, l * self.k + k, 1);
                let contrib = ctx.g.mul_col(samp, w);
                accum = Some(match accum {
                    Some(a) => ctx.g.add(a, contrib),
                    None => contrib,
                });
            }
        }
        let branch = self.out.forward(ctx, accum.unwrap());
        ctx.g.add(q_rows, branch)
    }
}

/// Normalized reference coordinates (pixel centers) for an h×w map.
pub fn reference_points(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            data.push((c as f64 + 0.5) / w as f64);
            data.push((r as f64 + 0.5) / h as f64);
        }
    }
    Tensor::new(vec![h * w, 2], data)
}

/// Fourier (sine/cosine) positional encodings over normalized 2D pixel
/// coordinates; d must be divisible by 4.
pub fn fourier_pos_2d(h: usize, w: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "fourier encoding width must be divisible by 4");
    let pairs = d / 4;
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let y = (r as f64 + 0.5) / h as f64;
            for i in 0..pairs {
                let f = (1 << i) as f64 * std::f64::consts::PI;
                data.push((f * x).sin());
                data.push((f * x).cos());
                data.push((f * y).sin());
                data.push((f * y).cos());
            }
        }
    }
    Tensor::new(vec![h * w, d], data)
}

/// Vocabulary class names split to words, with one embedding row per unique
/// word and per-class token spans over the flattened word list.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    /// Flattened word tokens in vocabulary order.
    pub tokens: Vec<String>,
    /// Per-class (start, len) into `tokens`.
    pub spans: Vec<(usize, usize)>,
    /// Unique-word table order; `token_word[t]` indexes into it.
    pub words: Vec<String>,
    pub token_word: Vec<usize>,
}

impl PromptEncoding {
    pub fn new(vocab: &Vocabulary) -> Self {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        let mut words: Vec<String> = Vec::new();
        let mut token_word = Vec::new();
        for (_, name) in &vocab.entries {
            let start = tokens.len();
            for word in name.split_whitespace() {
                tokens.push(word.to_string());
                let wid = match words.iter().position(|w| w == word) {
                    Some(i) => i,
                    None => {
                        words.push(word.to_string());
                        words.len() - 1
                    }
                };
                token_word.push(wid);
            }
            spans.push((start, tokens.len() - start));
        }
        PromptEncoding { tokens, spans, words, token_word }
    }

    pub fn init(&self, d: usize, store: &mut ParamStore, init: &mut Initializer) {
        store.insert("prompt.words", init.normal(vec![self.words.len(), d], 0.02));
        store.insert("prompt.noobj", Tensor::zeros(vec![1, 1]));
    }

    /// Encoded token vectors [T, D].
    pub fn encode(&self, ctx: &mut Ctx) -> NodeId {
        let table = ctx.p("prompt.words");
        ctx.g.gather_rows(table, Rc::new(self.token_word.clone()))
    }

    /// Constant [T, classes] matrix averaging token logits over class spans.
    fn span_average_matrix(&self) -> Tensor {
        let t = self.tokens.len();
        let c = self.spans.len();
        let mut m = Tensor::zeros(vec![t, c]);
        for (ci, &(start, len)) in self.spans.iter().enumerate() {
            for ti in start..start + len {
                m.data_mut()[ti * c + ci] = 1.0 / len as f64;
            }
        }
        m
    }
}

/// Tokens of one scale as refinement context.
pub struct ScaleTokens {
    /// [Nt, D] token features.
    pub rows: NodeId,
    /// [Nt, D] positional encodings added to attention keys.
    pub pos: NodeId,
}

/// One refinement slot (fixed scale position in the 32→16→8 cycle);
/// parameters are shared across rounds.
#[derive(Debug, Clone)]
struct RefineBlock {
    ln_prompt: LayerNorm,
    prompt_attn: MultiheadAttention,
    ln_cross: LayerNorm,
    cross: MultiheadAttention,
    ln_self: LayerNorm,
    self_attn: MultiheadAttention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

impl RefineBlock {
    fn new(name: &str, d: usize, heads: usize) -> Self {
        RefineBlock {
            ln_prompt: LayerNorm::new(format!("{}.lnp", name), d),
            prompt_attn: MultiheadAttention::new(format!("{}.prompt", name), d, heads),
            ln_cross: LayerNorm::new(format!("{}.lnc", name), d),
            cross: MultiheadAttention::new(format!("{}.cross", name), d, heads),
            ln_self: LayerNorm::new(format!("{}.lns", name), d),
            self_attn: MultiheadAttention::new(format!("{}.self", name), d, heads),
            ln_ff: LayerNorm::new(format!("{}.lnf", name), d),
            ff: Mlp::new(&format!("{}.ff", name), d, 2 * d, d),
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        self.ln_prompt.init(store, init);
        self.prompt_attn.init(store, init);
        self.ln_cross.init(store, init);
        self.cross.init(store, init);
        self.ln_self.init(store, init);
        self.self_attn.init(store, init);
        self.ln_ff.init(store, init);
        self.ff.init_zero_out(store, init);
    }

    fn forward(
        &self,
        ctx: &mut Ctx,
        q: NodeId,
        qpos: NodeId,
        tokens: &ScaleTokens,
        prompt: Option<NodeId>,
    ) -> NodeId {
        let mut q = q;
        if let Some(pt) = prompt {
            let qn = self.ln_prompt.forward(ctx, q);
            let qin = ctx.g.add(qn, qpos);
            let branch = self.prompt_attn.forward(ctx, qin, pt, pt);
            q = ctx.g.add(q, branch);
        }
        let qn = self.ln_cross.forward(ctx, q);
        let qin = ctx.g.add(qn, qpos);
        let keys = ctx.g.add(tokens.rows, tokens.pos);
        let branch = self.cross.forward(ctx, qin, keys, tokens.rows);
        q = ctx.g.add(q, branch);

        let qn = self.ln_self.forward(ctx, q);
        let qin = ctx.g.add(qn, qpos);
        let branch = self.self_attn.forward(ctx, qin, qin, qn);
        q = ctx.g.add(q, branch);

        let qn = self.ln_ff.forward(ctx, q);
        let branch = self.ff.forward(ctx, qn);
        ctx.g.add(q, branch)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// Pyramid widths at strides [4, 8, 16, 32].
    pub in_widths: [usize; 4],
    in_proj: [Linear; 3],
    value_proj: Linear,
    deform: [DeformLayer; 3],
    skip_proj: Linear,
    mask_pos: Linear,
    blocks: [RefineBlock; 3],
    pos3d: Mlp,
    mask_embed: Mlp,
    class_head: Mlp,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, in_widths: [usize; 4]) -> Self {
        let d = cfg.d;
        Decoder {
            in_proj: [
                Linear::new("decoder.inproj8", in_widths[1], d),
                Linear::new("decoder.inproj16", in_widths[2], d),
                Linear::new("decoder.inproj32", in_widths[3], d),
            ],
            value_proj: Linear::new("decoder.value", d, d),
            deform: [
                DeformLayer::new("decoder.deform8", d, cfg.deform_points),
                DeformLayer::new("decoder.deform16", d, cfg.deform_points),
                DeformLayer::new("decoder.deform32", d, cfg.deform_points),
            ],
            skip_proj: Linear::new("decoder.skip", in_widths[0], d),
            mask_pos: Linear::new("decoder.maskpos", d, d),
            blocks: [
                RefineBlock::new("decoder.refine32", d, cfg.heads),
                RefineBlock::new("decoder.refine16", d, cfg.heads),
                RefineBlock::new("decoder.refine8", d, cfg.heads),
            ],
            pos3d: Mlp::new("decoder.pos3d", 3, d, d),
            mask_embed: Mlp::new("decoder.maskembed", d, d, d),
            class_head: Mlp::new("decoder.classhead", d, d, cfg.classes + 1),
            cfg,
            in_widths,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) {
        for p in &self.in_proj {
            p.init(store, init);
        }
        self.value_proj.init(store, init);
        for dl in &self.deform {
            dl.init(store, init);
        }
        self.skip_proj.init(store, init);
        // starts at zero so 2D/3D forwards coincide at init even though
        // their positional encodings differ
        self.mask_pos.init_zero(store, init);
        for b in &self.blocks {
            b.init(store, init);
        }
        self.pos3d.init(store, init);
        self.mask_embed.init(store, init);
        self.class_head.init(store, init);
        // unit-scale so queries are well separated from the start; tiny init
        // collapses them onto one mode because the set matching can no longer
        // tell them apart
        store.insert("decoder.queries", init.normal(vec![self.cfg.num_queries, self.cfg.d], 1.0));
        store.insert("decoder.querypos", init.normal(vec![self.cfg.num_queries, self.cfg.d], 1.0));
    }

    /// Projects per-view maps of strides 8/16/32 to the common width D.
    /// `maps[i][v]` is view v at stride 8·2^i.
    pub fn project_inputs(&self, ctx: &mut Ctx, maps: &[Vec<NodeId>; 3]) -> [Vec<NodeId>; 3] {
        let mut out: [Vec<NodeId>; 3] = Default::default();
        for s in 0..3 {
            for &m in &maps[s] {
                let (_, h, w) = ctx.g.value(m).dims3();
                let rows = ctx.g.map_to_rows(m);
                let proj = self.in_proj[s].forward(ctx, rows);
                out[s].push(ctx.g.rows_to_map(proj, h, w));
            }
        }
        out
    }

    /// Per-view deformable fusion across the three lowest scales: each
    /// scale's pixels query sampled features from all three levels.
    /// Input and output maps are width-D, per view per scale.
    pub fn cross_scale_fuse(&self, ctx: &mut Ctx, proj: &[Vec<NodeId>; 3]) -> [Vec<NodeId>; 3] {
        let views = proj[0].len();
        let mut out: [Vec<NodeId>; 3] = Default::default();
        for v in 0..views {
            // shared value projection of each level
            let mut values = Vec::with_capacity(3);
            for l in 0..3 {
                let (_, h, w) = ctx.g.value(proj[l][v]).dims3();
                let rows = ctx.g.map_to_rows(proj[l][v]);
                let pv = self.value_proj.forward(ctx, rows);
                values.push(ctx.g.rows_to_map(pv, h, w));
            }
            for s in 0..3 {
                let (_, h, w) = ctx.g.value(proj[s][v]).dims3();
                let q_rows = ctx.g.map_to_rows(proj[s][v]);
                let refs = reference_points(h, w);
                let fused = self.deform[s].forward(ctx, q_rows, &refs, &values);
                out[s].push(ctx.g.rows_to_map(fused, h, w));
            }
        }
        out
    }

    /// 2× bilinear upsample of the fused 1/8 map plus a linear projection of
    /// the backbone 1/4 map; returns [h4·w4, D] rows.
    pub fn upsample_with_skip(&self, ctx: &mut Ctx, fused8: NodeId, bb4: NodeId) -> NodeId {
        let (_, h4, w4) = ctx.g.value(bb4).dims3();
        let (_, h8, w8) = ctx.g.value(fused8).dims3();
        assert_eq!((h4, w4), (2 * h8, 2 * w8), "skip map must be twice the fused map");
        let mut coords = Vec::with_capacity(h4 * w4 * 2);
        for r in 0..h4 {
            for c in 0..w4 {
                coords.push((c as f64 + 0.5) / 2.0 - 0.5);
                coords.push((r as f64 + 0.5) / 2.0 - 0.5);
            }
        }
        let coords = ctx.g.constant(Tensor::new(vec![h4 * w4, 2], coords));
        let up = ctx.g.grid_sample(fused8, coords);
        let bb_rows = ctx.g.map_to_rows(bb4);
        let skip = self.skip_proj.forward(ctx, bb_rows);
        ctx.g.add(up, skip)
    }

    /// Adds a learned projection of the tokens' positional encoding to the
    /// mask-token features so masks can separate identical-looking objects
    /// by location.
    pub fn inject_mask_positions(&self, ctx: &mut Ctx, rows: NodeId, pos: NodeId) -> NodeId {
        let p = self.mask_pos.forward(ctx, pos);
        ctx.g.add(rows, p)
    }

    /// 3D positional encoding of token positions (one row per token).
    pub fn encode_positions_3d(&self, ctx: &mut Ctx, positions: &[Vec3]) -> NodeId {
        let mut data = Vec::with_capacity(positions.len() * 3);
        for p in positions {
            data.extend_from_slice(p);
        }
        let xyz = ctx.g.constant(Tensor::new(vec![positions.len(), 3], data));
        self.pos3d.forward(ctx, xyz)
    }

    /// R rounds cycling scales 32→16→8; returns the query state after every
    /// round (deep supervision taps each entry; the last is the final state).
    /// `scales` are ordered [32, 16, 8].
    pub fn refine_queries(
        &self,
        ctx: &mut Ctx,
        scales: &[ScaleTokens; 3],
        prompt: Option<NodeId>,
        rounds: usize,
    ) -> Vec<NodeId> {
        let mut q = ctx.p("decoder.queries");
        let qpos = ctx.p("decoder.querypos");
        let mut states = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            for (slot, tokens) in scales.iter().enumerate() {
                q = self.blocks[slot].forward(ctx, q, qpos, tokens, prompt);
            }
            states.push(q);
        }
        states
    }

    /// Mask logits [N, Nt]: dot products of embedded queries with tokens.
    pub fn predict_masks(&self, ctx: &mut Ctx, queries: NodeId, token_rows: NodeId) -> NodeId {
        let emb = self.mask_embed.forward(ctx, queries);
        ctx.g.matmul_nt(emb, token_rows)
    }

    /// Closed-vocabulary class logits [N, classes+1]; last column no-object.
    pub fn predict_classes_closed(&self, ctx: &mut Ctx, queries: NodeId) -> NodeId {
        self.class_head.forward(ctx, queries)
    }

    /// Open-vocabulary class logits [N, classes+1]: per-token dot products
    /// averaged over each class's word span, plus a learned no-object logit.
    pub fn predict_classes_open(
        &self,
        ctx: &mut Ctx,
        queries: NodeId,
        prompt: &PromptEncoding,
        prompt_tokens: NodeId,
    ) -> NodeId {
        let token_logits = ctx.g.matmul_nt(queries, prompt_tokens);
        let avg = ctx.g.constant(prompt.span_average_matrix());
        let class_logits = ctx.g.matmul(token_logits, avg);
        let n = ctx.g.value(queries).dims2().0;
        let ones = ctx.g.constant(Tensor::full(vec![n, 1], 1.0));
        let noobj = ctx.p("prompt.noobj");
        let col = ctx.g.matmul(ones, noobj);
        ctx.g.concat_cols(&[class_logits, col])
    }
}

/// Trilinear transfer of token features to arbitrary query positions;
/// `rows` is [N, D] aligned with `positions`.
pub fn transfer_to_mesh(
    ctx: &mut Ctx,
    positions: &[Vec3],
    rows: NodeId,
    voxel_size: f64,
    mesh: &[Vec3],
) -> NodeId {
    if mesh.is_empty() {
        let d = ctx.g.value(rows).dims2().1;
        return ctx.g.constant(Tensor::zeros(vec![0, d]));
    }
    let combos = trilinear_combos(positions, voxel_size, mesh);
    ctx.g.weighted_gather_rows(rows, Rc::new(combos))
}

/// Per-token semantic class: score(t,c) = Σ_q p_q(c)·σ(mask[q,t]) over the
/// non-no-object classes, argmax with ties to the lower class id.
pub fn semantic_from_instances(mask_logits: &Tensor, class_logits: &Tensor) -> Vec<usize> {
    let (nq, nt) = mask_logits.dims2();
    let (nq2, c1) = class_logits.dims2();
    assert_eq!(nq, nq2, "query count mismatch");
    let classes = c1 - 1;
    // softmax over all columns (incl. no-object), then drop the last
    let mut probs = vec![0.0; nq * classes];
    for q in 0..nq {
        let row = class_logits.row(q);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        for c in 0..classes {
            probs[q * classes + c] = (row[c] - mx).exp() / denom;
        }
    }
    (0..nt)
        .map(|t| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..classes {
                let mut s = 0.0;
                for q in 0..nq {
                    s += probs[q * classes + c] * sigmoid(mask_logits.at2(q, t));
                }
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect()
}
