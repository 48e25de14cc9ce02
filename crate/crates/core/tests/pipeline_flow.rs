use silverweight::eval::evaluate;
use silverweight::pipeline::{
    generate_silver, mean_alpha, prepare_data, silver_audit, train_teacher, PipelineConfig, TeacherNoise,
};
use silverweight::scoring::{attach_scores, train_classifiers, ScoreCombiner};

#[test]
fn clean_teacher_silver_quality_and_alpha_spread() {
    let mut cfg = PipelineConfig::default();
    cfg.teacher_noise = TeacherNoise::none();
    cfg.classifier.epochs = 6;
    cfg.test_images = 64;
    // 64 gold images
    let per_class = 26;
    assert_eq!(cfg.gold_images(per_class), 65);
    let splits = prepare_data(&cfg, per_class, 200, 11).unwrap();
    let (teacher, hist) = train_teacher(&splits.gold, &cfg, 11).unwrap();
    assert!(hist.last().unwrap().total < hist[0].total);
    let report = evaluate(&teacher, &splits.test, cfg.eval_iou).unwrap();
    assert!(report.map > 0.15, "teacher mAP {}", report.map);

    let (silver, stats) = generate_silver(&teacher, &splits.unlabeled, &cfg.silver).unwrap();
    assert!(silver.len() > 20, "{stats:?}");
    let truth = splits
        .unlabeled
        .items
        .iter()
        .map(|i| i.name.clone())
        .zip(splits.unlabeled_truth.iter().cloned())
        .collect();
    let (mean_iou, _) = silver_audit(&silver, &truth);
    if report.map > 0.3 {
        assert!(mean_iou > 0.4, "silver IoU {mean_iou} with teacher mAP {}", report.map);
    }

    let (ens, _) = train_classifiers(&splits.gold, &cfg.classifier).unwrap();
    let (scored, _) = attach_scores(&silver, Some(&ens), ScoreCombiner::Max).unwrap();
    let alphas: Vec<f64> = scored.items.iter().flat_map(|i| i.labels.weighted()).map(|(_, a)| a).collect();
    let m = mean_alpha(&scored).unwrap();
    let var = alphas.iter().map(|a| (a - m).powi(2)).sum::<f64>() / alphas.len() as f64;
    assert!(var > 0.0);
    assert!(alphas.iter().all(|a| (0.0..=1.0).contains(a)));
}
