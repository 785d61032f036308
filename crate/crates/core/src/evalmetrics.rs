//! Instance-segmentation average precision (mAP / mAP50 / mAP25), semantic
//! mIoU, and mesh-domain label transfer for evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::Vec3;
use crate::graph::sigmoid;
use crate::scenedata::Frame;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask domains differ: {0} vs {1} tokens")]
    DomainMismatch(usize, usize),
}

/// One predicted instance over the evaluation token domain.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub mask: Vec<bool>,
    pub class_id: usize,
    /// Confidence in [0, 1]; ranks predictions within a class.
    pub score: f64,
}

/// One ground-truth instance over the evaluation token domain.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub mask: Vec<bool>,
    pub class_id: usize,
}

/// |a∩b| / |a∪b|; 0 when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DomainMismatch(a.len(), b.len()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// AP over (scene, prediction) pairs: predictions rank globally by score
/// but may only claim GT instances of their own scene.
fn ap_scenes(
    predictions: &[(usize, &InstancePrediction)],
    gts: &[(usize, &GtInstance)],
    iou_threshold: f64,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b].1.score.partial_cmp(&predictions[a].1.score).expect("finite scores")
    });
    let mut gt_used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &pi in &order {
        let (scene, pred) = predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gscene, gt)) in gts.iter().enumerate() {
            if gt_used[gi] || gscene != scene {
                continue;
            }
            let iou = mask_iou(&pred.mask, &gt.mask).expect("shared domain");
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    // precision at each rank, then the upper envelope from the right
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    let mut best_later = 0.0f64;
    let mut envelope = vec![0.0; precisions.len()];
    for i in (0..precisions.len()).rev() {
        best_later = best_later.max(precisions[i]);
        envelope[i] = best_later;
    }
    let mut ap = 0.0;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            ap += envelope[i] / gts.len() as f64;
        }
    }
    ap
}

/// AP for one class at one IoU threshold: predictions sorted by descending
/// score (stable in insertion order on ties) greedily claim the unmatched
/// GT with highest IoU ≥ threshold (ties to the lower GT index); the
/// precision-recall curve's monotone upper envelope is integrated.
pub fn average_precision(
    predictions: &[InstancePrediction],
    gts: &[GtInstance],
    iou_threshold: f64,
) -> f64 {
    let p: Vec<(usize, &InstancePrediction)> = predictions.iter().map(|x| (0, x)).collect();
    let g: Vec<(usize, &GtInstance)> = gts.iter().map(|x| (0, x)).collect();
    ap_scenes(&p, &g, iou_threshold)
}

/// mAP over IoU thresholds 0.50:0.05:0.95.
pub const MAP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub map: f64,
    pub map50: f64,
    pub map25: f64,
    pub per_class_ap25: BTreeMap<usize, f64>,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub miou: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// ASCII `key value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP {:.6}", self.map);
        let _ = writeln!(s, "mAP50 {:.6}", self.map50);
        let _ = writeln!(s, "mAP25 {:.6}", self.map25);
        let _ = writeln!(s, "mIoU {:.6}", self.miou);
        for (c, v) in &self.per_class_ap25 {
            let _ = writeln!(s, "AP25_class{} {:.6}", c, v);
        }
        for (c, v) in &self.per_class_ap50 {
            let _ = writeln!(s, "AP50_class{} {:.6}", c, v);
        }
        for (c, v) in &self.per_class_ap {
            let _ = writeln!(s, "AP_class{} {:.6}", c, v);
        }
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "IoU_class{} {:.6}", c, v);
        }
        s
    }

    /// Two-column `key,value` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for line in self.to_text().lines() {
            let mut it = line.split_whitespace();
            let k = it.next().unwrap_or("");
            let v = it.next().unwrap_or("");
            let _ = writeln!(s, "{},{}", k, v);
        }
        s
    }
}

/// Predictions and ground truth of one scene; token domains are shared
/// within a scene only.
#[derive(Debug, Clone, Default)]
pub struct SceneEval {
    pub predictions: Vec<InstancePrediction>,
    pub gts: Vec<GtInstance>,
}

/// Instance AP fields over a whole evaluation set: per-class AP at 0.25,
/// 0.50, and averaged 0.50:0.05:0.95, with predictions of all scenes
/// ranked jointly; classes absent from both GT and predictions are
/// excluded from the means. Empty-mask predictions are dropped first.
pub fn evaluate_instances_dataset(scenes: &[SceneEval]) -> EvalReport {
    let preds: Vec<(usize, &InstancePrediction)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.predictions
                .iter()
                .filter(|p| p.mask.iter().any(|&b| b))
                .map(move |p| (si, p))
        })
        .collect();
    let gts: Vec<(usize, &GtInstance)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.gts.iter().map(move |g| (si, g)))
        .collect();
    let mut classes: Vec<usize> = preds
        .iter()
        .map(|(_, p)| p.class_id)
        .chain(gts.iter().map(|(_, g)| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut report = EvalReport::default();
    if classes.is_empty() {
        return report;
    }
    for &c in &classes {
        let cp: Vec<(usize, &InstancePrediction)> =
            preds.iter().filter(|(_, p)| p.class_id == c).copied().collect();
        let cg: Vec<(usize, &GtInstance)> =
            gts.iter().filter(|(_, g)| g.class_id == c).copied().collect();
        let ap25 = ap_scenes(&cp, &cg, 0.25);
        let ap50 = ap_scenes(&cp, &cg, 0.50);
        let ap: f64 = MAP_THRESHOLDS.iter().map(|&t| ap_scenes(&cp, &cg, t)).sum::<f64>()
            / MAP_THRESHOLDS.len() as f64;
        report.per_class_ap25.insert(c, ap25);
        report.per_class_ap50.insert(c, ap50);
        report.per_class_ap.insert(c, ap);
    }
    let n = classes.len() as f64;
    report.map25 = report.per_class_ap25.values().sum::<f64>() / n;
    report.map50 = report.per_class_ap50.values().sum::<f64>() / n;
    report.map = report.per_class_ap.values().sum::<f64>() / n;
    report
}

/// Single-scene convenience wrapper around the dataset evaluator.
pub fn evaluate_instances(predictions: &[InstancePrediction], gts: &[GtInstance]) -> EvalReport {
    evaluate_instances_dataset(&[SceneEval {
        predictions: predictions.to_vec(),
        gts: gts.to_vec(),
    }])
}

/// Per-class IoU over tokens and the mean over classes present in GT or
/// predictions.
pub fn evaluate_semantic(pred: &[usize], gt: &[usize]) -> (f64, BTreeMap<usize, f64>) {
    assert_eq!(pred.len(), gt.len(), "equal domains required");
    let mut classes: Vec<usize> = pred.iter().chain(gt.iter()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            let pp = p == c;
            let gg = g == c;
            if pp && gg {
                inter += 1;
            }
            if pp || gg {
                union += 1;
            }
        }
        per_class.insert(c, if union == 0 { 0.0 } else { inter as f64 / union as f64 });
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (miou, per_class)
}

/// Depth-agreement tolerance (meters) for transferring frame labels to mesh
/// points with millimeter-quantized depth.
pub const MESH_LABEL_TOLERANCE: f64 = 0.02;

/// GT instance label per mesh point: each point is projected into every
/// frame; the first frame (smallest view index) where it is visible —
/// in-bounds, in front of the camera, and within `tolerance` of the stored
/// depth — supplies the label. None = never visible, excluded from scoring.
pub fn labels_to_mesh(frames: &[Frame], mesh: &[Vec3], tolerance: f64) -> Vec<Option<u16>> {
    mesh.iter()
        .map(|&p| {
            for f in frames {
                let cam = f.pose.world_to_cam(p);
                if cam[2] <= 0.0 {
                    continue;
                }
                let u = (f.intrinsics.fx * cam[0] / cam[2] + f.intrinsics.cx).round();
                let v = (f.intrinsics.fy * cam[1] / cam[2] + f.intrinsics.cy).round();
                if u < 0.0 || v < 0.0 {
                    continue;
                }
                let (ui, vi) = (u as usize, v as usize);
                if ui >= f.intrinsics.width || vi >= f.intrinsics.height {
                    continue;
                }
                let d = f.depth.at(vi, ui);
                if d > 0.0 && (d - cam[2]).abs() <= tolerance {
                    return Some(f.gt_instance[vi * f.intrinsics.width + ui]);
                }
            }
            None
        })
        .collect()
}

/// Converts final query logits to ranked instance predictions: per query,
/// the best non-background object class by softmax probability; score =
/// that probability times the mean sigmoid over the positive mask region;
/// mask threshold 0. Empty-mask queries are dropped.
pub fn predictions_from_logits(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    background_class: usize,
) -> Vec<InstancePrediction> {
    let (nq, nt) = mask_logits.dims2();
    let (nq2, c1) = class_logits.dims2();
    assert_eq!(nq, nq2);
    let classes = c1 - 1; // last column is no-object
    let mut out = Vec::new();
    for q in 0..nq {
        let row = class_logits.row(q);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        let mut best: Option<(usize, f64)> = None;
        for c in 0..classes {
            if c == background_class {
                continue;
            }
            let p = (row[c] - mx).exp() / denom;
            if best.map_or(true, |(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        let Some((class_id, prob)) = best else { continue };
        let mask: Vec<bool> = (0..nt).map(|t| mask_logits.at2(q, t) > 0.0).collect();
        let pos: Vec<f64> = (0..nt)
            .filter(|&t| mask[t])
            .map(|t| sigmoid(mask_logits.at2(q, t)))
            .collect();
        if pos.is_empty() {
            continue;
        }
        let mean_sig = pos.iter().sum::<f64>() / pos.len() as f64;
        out.push(InstancePrediction { mask, class_id, score: prob * mean_sig });
    }
    // near-duplicate suppression: drop a prediction that mostly repeats a
    // higher-scoring one of the same class
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<InstancePrediction> = Vec::with_capacity(out.len());
    for p in out {
        let dup = kept.iter().any(|k| {
            k.class_id == p.class_id && mask_iou(&k.mask, &p.mask).unwrap_or(0.0) > NMS_IOU
        });
        if !dup {
            kept.push(p);
        }
    }
    kept
}

/// Same-class mask-overlap threshold above which the lower-scoring
/// prediction is suppressed.
pub const NMS_IOU: f64 = 0.7;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b != 0).collect()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(mask_iou(&m(&[1, 0, 1]), &m(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(mask_iou(&m(&[1, 0, 0]), &m(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(mask_iou(&m(&[1, 0, 0]), &m(&[1, 1, 0])).unwrap(), 0.5);
        assert_eq!(mask_iou(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 0.0);
        assert!(mask_iou(&m(&[0]), &m(&[0, 0])).is_err());
    }

    #[test]
    fn ap_examples() {
        let gt = vec![GtInstance { mask: m(&[1, 1, 0, 0]), class_id: 1 }];
        let perfect =
            vec![InstancePrediction { mask: m(&[1, 1, 0, 0]), class_id: 1, score: 0.9 }];
        assert_eq!(average_precision(&perfect, &gt, 0.5), 1.0);

        // high-scoring miss then low-scoring hit: AP is the area of a
        // two-point PR curve, 0.5
        let two = vec![
            InstancePrediction { mask: m(&[0, 0, 1, 1]), class_id: 1, score: 0.9 },
            InstancePrediction { mask: m(&[1, 1, 0, 0]), class_id: 1, score: 0.8 },
        ];
        assert_eq!(average_precision(&two, &gt, 0.5), 0.5);

        assert_eq!(average_precision(&[], &gt, 0.5), 0.0);
    }

    /// Independent AP computation: integrate the envelope over a dense
    /// recall grid instead of summing per-TP increments.
    fn ap_oracle(preds: &[InstancePrediction], gts: &[GtInstance], thr: f64) -> f64 {
        if gts.is_empty() {
            return 0.0;
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
        let mut used = vec![false; gts.len()];
        let mut points = vec![(0.0f64, 1.0f64)];
        let mut tp = 0usize;
        for (rank, &pi) in order.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..gts.len() {
                if used[gi] {
                    continue;
                }
                let iou = mask_iou(&preds[pi].mask, &gts[gi].mask).unwrap();
                if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tp += 1;
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
        }
        // envelope precision at any recall r = max precision among points
        // with recall ≥ r; integrate over each recall step
        let mut ap = 0.0;
        let recalls: Vec<f64> = points.iter().map(|&(r, _)| r).collect();
        let mut prev_r = 0.0;
        let mut rs: Vec<f64> = recalls.clone();
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rs.dedup();
        for &r in &rs {
            if r <= prev_r {
                continue;
            }
            let env = points
                .iter()
                .filter(|&&(pr, _)| pr >= r)
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_r) * env;
            prev_r = r;
        }
        ap
    }

    fn random_case(
        rng: &mut ChaCha8Rng,
        tokens: usize,
    ) -> (Vec<InstancePrediction>, Vec<GtInstance>) {
        let np = rng.gen_range(0..=6);
        let ng = rng.gen_range(1..=4);
        let preds = (0..np)
            .map(|_| InstancePrediction {
                mask: (0..tokens).map(|_| rng.gen_bool(0.4)).collect(),
                class_id: 1,
                score: rng.gen_range(0.01..1.0),
            })
            .collect();
        let gts = (0..ng)
            .map(|_| GtInstance {
                mask: (0..tokens).map(|_| rng.gen_bool(0.4)).collect(),
                class_id: 1,
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn ap_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..300 {
            let (preds, gts) = random_case(&mut rng, 12);
            for thr in [0.25, 0.5, 0.75] {
                let a = average_precision(&preds, &gts, thr);
                let b = ap_oracle(&preds, &gts, thr);
                assert!((a - b).abs() < 1e-12, "case {} thr {}: {} vs {}", case, thr, a, b);
            }
        }
    }

    #[test]
    fn ap_score_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let (mut preds, gts) = random_case(&mut rng, 10);
            let base = average_precision(&preds, &gts, 0.5);
            for p in preds.iter_mut() {
                p.score *= 0.37;
            }
            assert_eq!(average_precision(&preds, &gts, 0.5), base);
        }
    }

    #[test]
    fn instance_report_cases_and_monotonicity() {
        let gts = vec![
            GtInstance { mask: m(&[1, 1, 0, 0, 0, 0]), class_id: 1 },
            GtInstance { mask: m(&[0, 0, 1, 1, 0, 0]), class_id: 2 },
        ];
        let perfect: Vec<InstancePrediction> = gts
            .iter()
            .map(|g| InstancePrediction { mask: g.mask.clone(), class_id: g.class_id, score: 0.9 })
            .collect();
        let r = evaluate_instances(&perfect, &gts);
        assert_eq!((r.map, r.map50, r.map25), (1.0, 1.0, 1.0));

        let r = evaluate_instances(&[], &gts);
        assert_eq!((r.map, r.map50, r.map25), (0.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let (preds, gts) = random_case(&mut rng, 12);
            let r = evaluate_instances(&preds, &gts);
            assert!(r.map <= r.map50 + 1e-12 && r.map50 <= r.map25 + 1e-12);
            for v in [r.map, r.map50, r.map25] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn classes_absent_from_both_are_excluded() {
        // only class 1 appears anywhere; the mean is over that class alone
        let gts = vec![GtInstance { mask: m(&[1, 1]), class_id: 1 }];
        let preds = vec![InstancePrediction { mask: m(&[1, 1]), class_id: 1, score: 0.5 }];
        let r = evaluate_instances(&preds, &gts);
        assert_eq!(r.map25, 1.0);
        assert_eq!(r.per_class_ap25.len(), 1);
    }

    #[test]
    fn semantic_cases() {
        assert_eq!(evaluate_semantic(&[1, 2, 1], &[1, 2, 1]).0, 1.0);
        let (miou, per) = evaluate_semantic(&[0, 1], &[1, 0]);
        assert_eq!(miou, 0.0);
        assert_eq!(per[&0], 0.0);
        assert_eq!(per[&1], 0.0);

        // 6 tokens, 3 classes: gt = [0,0,1,1,2,2], pred = [0,1,1,1,2,0]
        // class 0: inter 1, union 3; class 1: inter 2, union 3;
        // class 2: inter 1, union 2
        let (miou, per) = evaluate_semantic(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2]);
        assert!((per[&0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((per[&1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[&2] - 0.5).abs() < 1e-12);
        assert!((miou - (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_relabel_invariance() {
        let pred = [0usize, 1, 1, 2, 0, 2];
        let gt = [0usize, 1, 2, 2, 0, 1];
        let (a, _) = evaluate_semantic(&pred, &gt);
        let relabel = |v: usize| v + 10;
        let p2: Vec<usize> = pred.iter().map(|&v| relabel(v)).collect();
        let g2: Vec<usize> = gt.iter().map(|&v| relabel(v)).collect();
        let (b, _) = evaluate_semantic(&p2, &g2);
        assert_eq!(a, b);
    }

    #[test]
    fn mesh_labels_match_generating_objects() {
        use crate::scenedata::{generate_scene, SceneGenConfig};
        let cfg = SceneGenConfig {
            views: 3,
            image_width: 48,
            image_height: 48,
            object_count_min: 2,
            object_count_max: 3,
            ..SceneGenConfig::default()
        };
        let scene = generate_scene(31, &cfg).unwrap();
        let points: Vec<Vec3> = scene.gt_surface_cloud.iter().map(|p| p.position).collect();
        let labels = labels_to_mesh(&scene.frames, &points, MESH_LABEL_TOLERANCE);
        let mut labeled = 0;
        let mut correct = 0;
        for (sp, lab) in scene.gt_surface_cloud.iter().zip(&labels) {
            if let Some(id) = lab {
                labeled += 1;
                if *id == sp.instance_id {
                    correct += 1;
                }
            }
        }
        assert!(labeled > 0, "some surface points must be visible");
        // quantized depth and pixel rounding can mislabel silhouette points
        assert!(
            correct as f64 >= 0.97 * labeled as f64,
            "{} of {} labeled points correct",
            correct,
            labeled
        );

        let strict = labels_to_mesh(&scene.frames, &points, 0.0);
        let strict_count = strict.iter().filter(|l| l.is_some()).count();
        assert!(strict_count <= labeled, "tolerance 0 labels no more points");
    }

    #[test]
    fn report_serialization_round_trips_keys() {
        let gts = vec![GtInstance { mask: m(&[1, 0]), class_id: 1 }];
        let preds = vec![InstancePrediction { mask: m(&[1, 0]), class_id: 1, score: 0.9 }];
        let mut r = evaluate_instances(&preds, &gts);
        let (miou, per) = evaluate_semantic(&[1, 0], &[1, 0]);
        r.miou = miou;
        r.per_class_iou = per;
        let text = r.to_text();
        assert!(text.contains("mAP25 1.000000"));
        assert!(text.contains("mIoU 1.000000"));
        let csv = r.to_csv();
        assert!(csv.starts_with("key,value\n"));
        assert_eq!(csv.lines().count(), text.lines().count() + 1);
    }
}
