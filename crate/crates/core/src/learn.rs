//! Set-prediction training: Hungarian matching of queries to ground-truth
//! instances, class/BCE/dice losses with deep supervision, an
//! adaptive-moment optimizer, and the batch-alternating training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fusion3d::ViewGeometry;
use crate::geometry::{mat_mul, mat_vec, rotation_y};
use crate::graph::sigmoid;
use crate::model::{Model, RoundPrediction};
use crate::nn::{Ctx, ParamStore};
use crate::scenedata::{
    augment_2d_with, sample_training_frames, Augment2dParams, Augment3dParams, Frame, Scene,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("non-finite cost matrix entry at ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error("training I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Class-loss weight of queries matched to no GT instance.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class: 2.0, bce: 5.0, dice: 5.0, no_object: 0.1 }
    }
}

/// Minimum-cost partial injection of queries onto GT instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (query index, GT index) pairs, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

/// Matching/loss cost of assigning one query to one GT instance:
/// class negative log-likelihood, mean binary cross-entropy of the mask
/// logits, and soft-dice complement (smoothing constant 1).
pub fn pair_cost(
    class_logits: &[f64],
    mask_logits: &[f64],
    gt_class: usize,
    gt_mask: &[f64],
    w: &LossWeights,
) -> f64 {
    assert_eq!(mask_logits.len(), gt_mask.len(), "mask domains must agree");
    let mx = class_logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let denom: f64 = class_logits.iter().map(|&v| (v - mx).exp()).sum();
    let nll = -(class_logits[gt_class] - mx - denom.ln());

    let mut bce = 0.0;
    let mut pg = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&x, &g) in mask_logits.iter().zip(gt_mask) {
        bce += x.max(0.0) - x * g + (-x.abs()).exp().ln_1p();
        let p = sigmoid(x);
        pg += p * g;
        psum += p;
        gsum += g;
    }
    bce /= mask_logits.len().max(1) as f64;
    let dice = 1.0 - (2.0 * pg + 1.0) / (psum + gsum + 1.0);
    w.class * nll + w.bce * bce + w.dice * dice
}

/// Exact minimum-cost assignment on a square matrix (potentials method);
/// returns the column of each row and the total cost.
fn solve_square(a: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = a.len();
    if n == 0 {
        return (vec![], 0.0);
    }
    // 1-indexed internals; p[j] = row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0usize; n];
    for j in 1..=n {
        cols[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| a[i][cols[i]]).sum();
    (cols, total)
}

/// Optimal value of assigning `rows` to distinct columns from `cols`
/// (unused rows pad to zero-cost dummies when columns run short).
fn best_completion(cost: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len().max(cols.len());
    if n == 0 {
        return 0.0;
    }
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < rows.len() && j < cols.len() {
                        cost.at2(rows[i], cols[j])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    solve_square(&a).1
}

/// Minimum-total-cost injection of min(Q, G) pairs; among cost ties the
/// lexicographically smallest pair list is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult, LearnError> {
    let (q, g) = cost.dims2();
    for i in 0..q {
        for j in 0..g {
            if !cost.at2(i, j).is_finite() {
                return Err(LearnError::NonFiniteCost(i, j));
            }
        }
    }
    let all_rows: Vec<usize> = (0..q).collect();
    let all_cols: Vec<usize> = (0..g).collect();
    let best_total = best_completion(cost, &all_rows, &all_cols);

    const EPS: f64 = 1e-9;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut avail = all_cols;
    let mut fixed = 0.0;
    for i in 0..q {
        let rest: Vec<usize> = (i + 1..q).collect();
        let mut chosen = None;
        // a query must be matched whenever queries remaining ≤ columns
        // remaining is forced by optimality; prefer the smallest column
        for (ai, &j) in avail.iter().enumerate() {
            let mut rem_cols = avail.clone();
            rem_cols.remove(ai);
            let total = fixed + cost.at2(i, j) + best_completion(cost, &rest, &rem_cols);
            if total <= best_total + EPS {
                chosen = Some((ai, j));
                break;
            }
        }
        match chosen {
            Some((ai, j)) => {
                fixed += cost.at2(i, j);
                avail.remove(ai);
                pairs.push((i, j));
            }
            None => unmatched.push(i),
        }
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost.at2(i, j)).sum();
    Ok(MatchResult { pairs, unmatched_queries: unmatched, total_cost })
}

/// Ground-truth instances over the token domain of one training sample.
#[derive(Debug, Clone)]
pub struct GtInstances {
    pub classes: Vec<usize>,
    /// Per instance, a {0,1} mask over all tokens.
    pub masks: Vec<Vec<f64>>,
}

impl GtInstances {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub struct LossBreakdown {
    /// Graph node of the total loss (deep supervision summed over taps).
    pub total: NodeId,
    pub total_value: f64,
    pub class_value: f64,
    pub bce_value: f64,
    pub dice_value: f64,
}

use crate::graph::NodeId;

fn match_tap(
    ctx: &Ctx,
    tap: &RoundPrediction,
    gt: &GtInstances,
    w: &LossWeights,
) -> Result<MatchResult, LearnError> {
    let class = ctx.g.value(tap.class_logits).clone();
    let mask = ctx.g.value(tap.mask_logits).clone();
    let q = class.dims2().0;
    let g = gt.len();
    let mut cost = Tensor::zeros(vec![q, g]);
    for i in 0..q {
        for j in 0..g {
            cost.data_mut()[i * g + j] =
                pair_cost(class.row(i), mask.row(i), gt.classes[j], &gt.masks[j], w);
        }
    }
    hungarian_match(&cost)
}

/// Matches every prediction tap against the GT instances.
pub fn match_all(
    ctx: &Ctx,
    taps: &[RoundPrediction],
    gt: &GtInstances,
    w: &LossWeights,
) -> Result<Vec<MatchResult>, LearnError> {
    taps.iter()
        .map(|tap| {
            if gt.is_empty() {
                let nq = ctx.g.value(tap.class_logits).dims2().0;
                Ok(MatchResult {
                    pairs: vec![],
                    unmatched_queries: (0..nq).collect(),
                    total_cost: 0.0,
                })
            } else {
                match_tap(ctx, tap, gt, w)
            }
        })
        .collect()
}

/// Hungarian-matched set losses over every prediction tap (deep
/// supervision); matching indices are constants for differentiation.
pub fn compute_losses(
    ctx: &mut Ctx,
    taps: &[RoundPrediction],
    gt: &GtInstances,
    w: &LossWeights,
) -> Result<LossBreakdown, LearnError> {
    let matches = match_all(ctx, taps, gt, w)?;
    Ok(compute_losses_matched(ctx, taps, gt, w, &matches))
}

/// Set losses under a fixed matching (used by gradient verification so
/// finite-difference probes share the base point's assignment).
pub fn compute_losses_matched(
    ctx: &mut Ctx,
    taps: &[RoundPrediction],
    gt: &GtInstances,
    w: &LossWeights,
    matches: &[MatchResult],
) -> LossBreakdown {
    assert_eq!(taps.len(), matches.len());
    let mut total: Option<NodeId> = None;
    let (mut class_v, mut bce_v, mut dice_v) = (0.0, 0.0, 0.0);
    for (tap, m) in taps.iter().zip(matches) {
        let (nq, nc1) = ctx.g.value(tap.class_logits).dims2();
        let no_object = nc1 - 1;
        let mut targets = vec![no_object; nq];
        let mut weights = vec![w.no_object; nq];
        for &(qi, gi) in &m.pairs {
            targets[qi] = gt.classes[gi];
            weights[qi] = 1.0;
        }
        let ce = ctx.g.cross_entropy_rows(tap.class_logits, Rc::new(targets), Rc::new(weights));
        class_v += ctx.g.value(ce).item();
        let mut tap_total = ctx.g.scale(ce, w.class);

        if !m.pairs.is_empty() {
            let qs: Vec<usize> = m.pairs.iter().map(|&(qi, _)| qi).collect();
            let nt = ctx.g.value(tap.mask_logits).dims2().1;
            let picked = ctx.g.gather_rows(tap.mask_logits, Rc::new(qs));
            let mut gdata = Vec::with_capacity(m.pairs.len() * nt);
            let mut gsums = Vec::with_capacity(m.pairs.len());
            for &(_, gi) in &m.pairs {
                gdata.extend_from_slice(&gt.masks[gi]);
                gsums.push(gt.masks[gi].iter().sum::<f64>());
            }
            let gtensor = Tensor::new(vec![m.pairs.len(), nt], gdata);

            let bce = ctx.g.bce_with_logits_mean(picked, gtensor.clone());
            bce_v += ctx.g.value(bce).item();
            let bterm = ctx.g.scale(bce, w.bce);
            tap_total = ctx.g.add(tap_total, bterm);

            let p = ctx.g.sigmoid(picked);
            let gconst = ctx.g.constant(gtensor);
            let pg = ctx.g.mul(p, gconst);
            let pg = ctx.g.row_sum(pg);
            let ps = ctx.g.row_sum(p);
            let num = ctx.g.scale(pg, 2.0);
            let num = ctx.g.add_scalar(num, 1.0);
            let gs = ctx.g.constant(Tensor::new(vec![m.pairs.len(), 1], gsums));
            let den = ctx.g.add(ps, gs);
            let den = ctx.g.add_scalar(den, 1.0);
            let ratio = ctx.g.div(num, den);
            let dice_sum = ctx.g.sum_all(ratio);
            let dice_sum = ctx.g.scale(dice_sum, -1.0 / m.pairs.len() as f64);
            let dice = ctx.g.add_scalar(dice_sum, 1.0);
            dice_v += ctx.g.value(dice).item();
            let dterm = ctx.g.scale(dice, w.dice);
            tap_total = ctx.g.add(tap_total, dterm);
        }

        total = Some(match total {
            Some(t) => ctx.g.add(t, tap_total),
            None => tap_total,
        });
    }
    let total = total.expect("at least one prediction tap");
    LossBreakdown {
        total,
        total_value: ctx.g.value(total).item(),
        class_value: class_v,
        bce_value: bce_v,
        dice_value: dice_v,
    }
}

/// Maximum relative error between analytic and central finite-difference
/// gradients, per parameter block. Each block samples up to
/// `entries_per_block` coordinates; blocks not reached by any example's
/// loss are reported with error NaN. The matching of the unperturbed
/// forward is held fixed across probes.
pub fn gradient_check(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
    weights: &LossWeights,
    eps: f64,
    entries_per_block: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>, LearnError> {
    // analytic gradients and base matchings per example
    let mut analytic: Vec<BTreeMap<String, Tensor>> = Vec::with_capacity(examples.len());
    let mut matchings: Vec<Vec<MatchResult>> = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut ctx = Ctx::new(store);
        let views: Vec<NodeId> = ex.views.iter().map(|v| ctx.g.constant(v.clone())).collect();
        let preds = model.forward(&mut ctx, &views, ex.geometry.as_ref());
        let matches = match_all(&ctx, &preds.rounds, &ex.gt, weights)?;
        let losses = compute_losses_matched(&mut ctx, &preds.rounds, &ex.gt, weights, &matches);
        let all = ctx.g.backward(losses.total);
        analytic.push(ctx.g.param_grads(&all));
        matchings.push(matches);
    }

    let loss_at = |probe: &ParamStore, ei: usize| -> f64 {
        let ex = &examples[ei];
        let mut ctx = Ctx::new(probe);
        let views: Vec<NodeId> = ex.views.iter().map(|v| ctx.g.constant(v.clone())).collect();
        let preds = model.forward(&mut ctx, &views, ex.geometry.as_ref());
        compute_losses_matched(&mut ctx, &preds.rounds, &ex.gt, weights, &matchings[ei])
            .total_value
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = Vec::new();
    for name in store.names().cloned().collect::<Vec<_>>() {
        let Some(ei) = (0..examples.len()).find(|&i| analytic[i].contains_key(&name)) else {
            report.push((name, f64::NAN));
            continue;
        };
        let grad = &analytic[ei][&name];
        let n = grad.len();
        let mut worst = 0.0f64;
        for _ in 0..entries_per_block.min(n) {
            let idx = rng.gen_range(0..n);
            let orig = probe.get(&name).data()[idx];
            probe.get_mut(&name).data_mut()[idx] = orig + eps;
            let up = loss_at(&probe, ei);
            probe.get_mut(&name).data_mut()[idx] = orig - eps;
            let down = loss_at(&probe, ei);
            probe.get_mut(&name).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
        report.push((name, worst));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: Some(1.0) }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: usize,
}

/// One adaptive-moment update with bias correction; parameters without a
/// gradient entry are left untouched.
pub fn optimizer_step(
    state: &mut AdamState,
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    cfg: &OptimConfig,
) {
    let mut scale = 1.0;
    if let Some(clip) = cfg.clip {
        let norm: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, grad) in grads {
        let p = store.get_mut(name);
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        for i in 0..grad.len() {
            let g = grad.data()[i] * scale;
            m.data_mut()[i] = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            v.data_mut()[i] = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m.data()[i] / bc1;
            let vh = v.data()[i] / bc2;
            p.data_mut()[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// One prepared training sample: view tensors, optional geometry, and GT
/// instances over the concatenated 1/4-scale tokens.
#[derive(Debug, Clone)]
pub struct Example {
    pub views: Vec<Tensor>,
    pub geometry: Option<ViewGeometry>,
    pub gt: GtInstances,
    /// Per-token GT instance id (0 = background), concatenated view order.
    pub token_instances: Vec<u16>,
    /// Per-token GT class id.
    pub token_classes: Vec<usize>,
}

pub const TOKEN_STRIDE: usize = 4;

/// Downsamples the frames' GT instance maps to the token grid (top-left
/// sample, matching the feature/position downsampling convention) and
/// builds per-instance token masks. Instances invisible at token
/// resolution are dropped from the match targets.
pub fn prepare_example(frames: &[Frame], scene: &Scene, with_geometry: bool) -> Example {
    assert!(!frames.is_empty());
    let (h, w) = (frames[0].intrinsics.height, frames[0].intrinsics.width);
    let (th, tw) = (h / TOKEN_STRIDE, w / TOKEN_STRIDE);
    let mut token_instances = Vec::with_capacity(frames.len() * th * tw);
    for f in frames {
        for r in 0..th {
            for c in 0..tw {
                token_instances.push(f.gt_instance[r * TOKEN_STRIDE * w + c * TOKEN_STRIDE]);
            }
        }
    }
    let mut classes = Vec::new();
    let mut masks = Vec::new();
    // The background is a match target too (class 0): without it, tokens no
    // query claims would get arbitrary semantic labels at evaluation time.
    let bg: Vec<f64> = token_instances
        .iter()
        .map(|&id| if id == 0 { 1.0 } else { 0.0 })
        .collect();
    if bg.iter().any(|&v| v > 0.0) {
        classes.push(crate::scenedata::BACKGROUND_CLASS);
        masks.push(bg);
    }
    for label in &scene.labels {
        let mask: Vec<f64> = token_instances
            .iter()
            .map(|&id| if id == label.instance_id { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().any(|&v| v > 0.0) {
            classes.push(label.class_id);
            masks.push(mask);
        }
    }
    let token_classes = token_instances
        .iter()
        .map(|&id| scene.class_of_instance(id).unwrap_or(crate::scenedata::BACKGROUND_CLASS))
        .collect();
    let geometry = with_geometry.then(|| ViewGeometry {
        intrinsics: frames.iter().map(|f| f.intrinsics.clone()).collect(),
        poses: frames.iter().map(|f| f.pose.clone()).collect(),
        depths: frames.iter().map(|f| f.depth.clone()).collect(),
    });
    Example {
        views: frames.iter().map(|f| f.rgb.clone()).collect(),
        geometry,
        gt: GtInstances { classes, masks },
        token_instances,
        token_classes,
    }
}

/// Applies a rigid y-rotation and uniform scale to the world frame of a
/// sample: poses are transformed and depths scaled so unprojected points
/// land at the transformed positions.
pub fn augment_geometry(frames: &mut [Frame], params: &Augment3dParams) {
    let rot = rotation_y(params.angle);
    for f in frames.iter_mut() {
        f.pose.rotation = mat_mul(&rot, &f.pose.rotation);
        let t = mat_vec(&rot, f.pose.translation);
        f.pose.translation = [t[0] * params.scale, t[1] * params.scale, t[2] * params.scale];
        for v in f.depth.values.iter_mut() {
            *v *= params.scale;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Mode2d,
    Mode3d,
    Joint,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Frames sampled per 3D batch.
    pub frames_per_sample: usize,
    /// Examples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub augment: bool,
    /// Apply the 3D world-frame rotation/scale augmentation to 3D samples
    /// (2D color/scale jitter is controlled by `augment` alone).
    pub augment_3d: bool,
    /// Call the evaluation hook every this many iterations (0 = never).
    pub eval_every: usize,
    /// Write a metrics line every this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            seed: 0,
            mode: TrainMode::Mode3d,
            frames_per_sample: 2,
            batch_size: 1,
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            augment: true,
            augment_3d: true,
            eval_every: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub iter: usize,
    pub total: f64,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Draws one training sample. 2D batches are single frames without
/// geometry (the 3D layers are skipped); 3D batches are sampled frame
/// windows with geometry, optionally augmented in 2D and 3D.
pub fn draw_sample(scene: &Scene, rng: &mut ChaCha8Rng, cfg: &TrainConfig, use_3d: bool) -> Example {
    if !use_3d {
        let fi = rng.gen_range(0..scene.frames.len());
        let mut frame = scene.frames[fi].clone();
        if cfg.augment {
            frame = augment_2d_with(&frame, Augment2dParams::draw(rng));
        }
        return prepare_example(&[frame], scene, false);
    }
    let n = cfg.frames_per_sample.min(scene.frames.len()).max(1);
    let idx = sample_training_frames(scene, n, rng.gen());
    let mut frames: Vec<Frame> = idx.iter().map(|&i| scene.frames[i].clone()).collect();
    if cfg.augment {
        let p2 = Augment2dParams::draw(rng);
        frames = frames.iter().map(|f| augment_2d_with(f, p2)).collect();
        if cfg.augment_3d {
            let p3 = Augment3dParams::draw(rng);
            augment_geometry(&mut frames, &p3);
        }
    }
    prepare_example(&frames, scene, true)
}

/// One forward/backward pass on a prepared example: parameter gradients
/// plus the loss breakdown values.
pub fn example_grads(
    model: &Model,
    store: &ParamStore,
    example: &Example,
    weights: &LossWeights,
) -> Result<(BTreeMap<String, Tensor>, (f64, f64, f64, f64)), LearnError> {
    let mut ctx = Ctx::new(store);
    let views: Vec<NodeId> = example.views.iter().map(|v| ctx.g.constant(v.clone())).collect();
    let preds = model.forward(&mut ctx, &views, example.geometry.as_ref());
    let losses = compute_losses(&mut ctx, &preds.rounds, &example.gt, weights)?;
    let all = ctx.g.backward(losses.total);
    let grads = ctx.g.param_grads(&all);
    Ok((grads, (losses.total_value, losses.class_value, losses.bce_value, losses.dice_value)))
}

/// Runs one forward/backward/update step on a prepared example and returns
/// the loss breakdown values.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut AdamState,
    example: &Example,
    weights: &LossWeights,
    optim: &OptimConfig,
) -> Result<(f64, f64, f64, f64), LearnError> {
    let (grads, values) = example_grads(model, store, example, weights)?;
    optimizer_step(adam, store, &grads, optim);
    Ok(values)
}

/// Iterates training batches over the scene set. Joint mode alternates one
/// 2D batch (even iterations) and one 3D batch (odd iterations) exactly.
/// Metrics lines are `iter total_loss class_loss bce_loss dice_loss` plus
/// the evaluation hook's output when it runs.
pub fn train_loop(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[Scene],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    mut eval_hook: Option<&mut dyn FnMut(&Model, &ParamStore) -> String>,
) -> Result<Vec<IterStats>, LearnError> {
    if scenes.is_empty() {
        return Err(LearnError::Invalid("no training scenes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let use_3d = match cfg.mode {
            TrainMode::Mode2d => false,
            TrainMode::Mode3d => true,
            TrainMode::Joint => iter % 2 == 1,
        };
        // cosine decay to 10% of the base rate over the run
        let progress = iter as f64 / cfg.iterations.max(1) as f64;
        let decayed = OptimConfig {
            lr: cfg.optim.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos())),
            ..cfg.optim
        };
        // gradients averaged over a small batch of independent examples
        let b = cfg.batch_size.max(1);
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..b {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let example = draw_sample(scene, &mut rng, cfg, use_3d);
            let (grads, v) = example_grads(model, store, &example, &cfg.weights)?;
            for (name, g) in grads {
                acc.entry(name)
                    .and_modify(|a| {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    })
                    .or_insert(g);
            }
            sums.0 += v.0;
            sums.1 += v.1;
            sums.2 += v.2;
            sums.3 += v.3;
        }
        let inv = 1.0 / b as f64;
        for g in acc.values_mut() {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        optimizer_step(&mut adam, store, &acc, &decayed);
        let (total, class, bce, dice) =
            (sums.0 * inv, sums.1 * inv, sums.2 * inv, sums.3 * inv);
        history.push(IterStats { iter, total, class, bce, dice });
        let mut line = format!("{} {:.6} {:.6} {:.6} {:.6}", iter, total, class, bce, dice);
        if cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 {
            if let Some(hook) = eval_hook.as_mut() {
                line.push(' ');
                line.push_str(&hook(model, store));
            }
        }
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            writeln!(log, "{}", line)?;
        }
    }
    Ok(history)
}
