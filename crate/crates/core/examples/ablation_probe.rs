//! Scratch probe: trains fusion variants on an existing dataset and prints
//! multiview scores. Not part of the deliverable test surface.

use omniseg::cli::load_split;
use omniseg::config::Config;
use omniseg::decoder::semantic_from_instances;
use omniseg::evalmetrics::{
    evaluate_instances_dataset, evaluate_semantic, predictions_from_logits, GtInstance, SceneEval,
};
use omniseg::learn::{prepare_example, train_loop};
use omniseg::model::{Model, Predictions};
use omniseg::nn::{Ctx, Initializer, ParamStore};
use omniseg::scenedata::{Scene, BACKGROUND_CLASS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn train(data: &Path, tweak: impl FnOnce(&mut Config)) -> (Model, ParamStore, Vec<Scene>) {
    let mut config = Config::default();
    config.iterations = 2000;
    config.eval_every = 0;
    config.log_every = 0;
    tweak(&mut config);
    let train = load_split(data, "train").unwrap();
    let test = load_split(data, "test").unwrap();
    let model = Model::new(config.model_config(), &train[0].vocabulary);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    model.init(&mut store, &mut Initializer { rng: &mut rng });
    let mut sink = std::io::sink();
    train_loop(&model, &mut store, &train, &config.train_config(), &mut sink, None).unwrap();
    (model, store, test)
}

fn score(model: &Model, store: &ParamStore, scenes: &[Scene]) -> (f64, f64, f64) {
    let mut evals = Vec::new();
    let mut pred_sem = Vec::new();
    let mut gt_sem = Vec::new();
    for scene in scenes {
        let example = prepare_example(&scene.frames, scene, true);
        let mut ctx = Ctx::new(store);
        let views: Vec<_> = example.views.iter().map(|v| ctx.g.constant(v.clone())).collect();
        let preds: Predictions = model.forward(&mut ctx, &views, example.geometry.as_ref());
        let last = preds.rounds.last().unwrap();
        let mask = ctx.g.value(last.mask_logits).clone();
        let class = ctx.g.value(last.class_logits).clone();
        let predictions = predictions_from_logits(&mask, &class, BACKGROUND_CLASS);
        let gts = example
            .gt
            .classes
            .iter()
            .zip(&example.gt.masks)
            .filter(|(&c, _)| c != BACKGROUND_CLASS)
            .map(|(&c, m)| GtInstance { mask: m.iter().map(|&v| v > 0.5).collect(), class_id: c })
            .collect();
        evals.push(SceneEval { predictions, gts });
        pred_sem.extend(semantic_from_instances(&mask, &class));
        gt_sem.extend_from_slice(&example.token_classes);
    }
    let report = evaluate_instances_dataset(&evals);
    let (miou, _) = evaluate_semantic(&pred_sem, &gt_sem);
    (report.map, report.map25, miou)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = Path::new(&args[1]);
    let variants: Vec<String> = args[2..].to_vec();
    for name in &variants {
        let t0 = std::time::Instant::now();
        let (model, store, test) = train(data, |c| {
            c.frames_per_sample = 4;
            match name.as_str() {
                "full" => {}
                "full-no3daug" => c.augment_3d = false,
                "no3d" => c.disable_3d_fusion = true,
                "no3d-no3daug" => {
                    c.disable_3d_fusion = true;
                    c.augment_3d = false;
                }
                "late-no3daug" => {
                    c.late_fusion_only = true;
                    c.augment_3d = false;
                }
                "full-noaug" => c.augment = false,
                other => panic!("unknown variant {}", other),
            }
        });
        let (map, map25, miou) = score(&model, &store, &test);
        println!(
            "{}: mAP {:.4} mAP25 {:.4} mIoU {:.4} ({:.0?})",
            name,
            map,
            map25,
            miou,
            t0.elapsed()
        );
    }
}
