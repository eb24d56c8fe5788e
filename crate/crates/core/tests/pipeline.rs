use intrabatch::batching::{read_dataset, write_dataset, Side};
use intrabatch::config::{InferMode, RunConfig};
use intrabatch::gradcheck::GradCheckOptions;
use intrabatch::inference::RetrievalIndex;
use intrabatch::model::{param_group, Model};
use intrabatch::pipeline::{
    embed, evaluate_index, gradcheck_model, load_data, model_config, split, train,
};
use intrabatch::rng::stream;
use intrabatch::{OpKind, Rng};

#[test]
fn six_sample_model_gradients() {
    let mut cfg = RunConfig::gradcheck_default();
    cfg.classes_per_batch = 2;
    cfg.samples_per_class = 3;
    let report = gradcheck_model(&cfg, GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.render());
    assert_eq!(report.groups.len(), 19);
}

#[test]
fn corrupted_backward_rules_are_caught() {
    let cfg = RunConfig::gradcheck_default();
    for kind in [
        OpKind::MatMul,
        OpKind::RowSoftmax,
        OpKind::LayerNorm,
        OpKind::Relu,
    ] {
        let opts = GradCheckOptions {
            fault: Some(kind),
            ..GradCheckOptions::default()
        };
        let report = gradcheck_model(&cfg, opts).unwrap();
        assert!(!report.passed(), "{kind} fault went unnoticed");
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = RunConfig::gradcheck_default();
    cfg.epochs = 0;
    let ds = load_data(&cfg).unwrap();
    let sp = split(&cfg, &ds).unwrap();
    let out = train(&cfg, &ds, &sp).unwrap();
    let init = Model::init(
        model_config(&cfg, &ds, &sp),
        &mut Rng::new(cfg.seed).fork(stream::INIT),
    )
    .unwrap();
    assert_eq!(out.model, init);
    assert!(out.log.is_empty());
}

#[test]
fn default_training_reduces_loss_and_separates_classes() {
    let cfg = RunConfig::default();
    let ds = load_data(&cfg).unwrap();
    let sp = split(&cfg, &ds).unwrap();
    let out = train(&cfg, &ds, &sp).unwrap();
    assert_eq!(out.log.len(), cfg.epochs);
    assert!(out.log.last().unwrap().total < out.log[0].total);
    assert!(out.log.iter().all(|e| e.mpn.is_some() && e.aux.is_some()));

    let test = ds.side(&sp, Side::Test).unwrap();
    let bb = embed(&cfg, &out.model, &test, InferMode::Backbone).unwrap();
    let mpn = embed(&cfg, &out.model, &test, InferMode::MpnReciprocal).unwrap();
    assert_eq!(bb.len(), test.len());
    assert_eq!(mpn.dim(), cfg.mpn.dim);
    assert_ne!(bb.embeddings(), mpn.embeddings());
}

#[test]
fn noise_free_classes_stay_apart_after_training() {
    let mut cfg = RunConfig::default();
    cfg.blobs.noise = 0.0;
    cfg.epochs = 3;
    let ds = load_data(&cfg).unwrap();
    let sp = split(&cfg, &ds).unwrap();
    let model = train(&cfg, &ds, &sp).unwrap().model;
    let test = ds.side(&sp, Side::Test).unwrap();
    let idx = embed(&cfg, &model, &test, InferMode::Backbone).unwrap();
    let mut rng = Rng::new(4);
    let (mut good, trials) = (0, 2000);
    for _ in 0..trials {
        let a = rng.below(idx.len());
        let same: Vec<usize> = (0..idx.len())
            .filter(|&i| i != a && idx.labels()[i] == idx.labels()[a])
            .collect();
        let diff: Vec<usize> = (0..idx.len())
            .filter(|&i| idx.labels()[i] != idx.labels()[a])
            .collect();
        let p = same[rng.below(same.len())];
        let n = diff[rng.below(diff.len())];
        if idx.distance(a, p) < idx.distance(a, n) {
            good += 1;
        }
    }
    assert!(good as f64 / trials as f64 >= 0.99, "{good}/{trials}");
}

#[test]
fn embedding_file_round_trip_preserves_report() {
    let cfg = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let ds = load_data(&cfg).unwrap();
    let sp = split(&cfg, &ds).unwrap();
    let model = train(&cfg, &ds, &sp).unwrap().model;
    let test = ds.side(&sp, Side::Test).unwrap();
    for mode in [InferMode::Backbone, InferMode::MpnReciprocal] {
        let idx = embed(&cfg, &model, &test, mode).unwrap();
        let mut buf = Vec::new();
        write_dataset(&idx.to_dataset().unwrap(), &mut buf).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        let reloaded =
            RetrievalIndex::new(back.features().clone(), back.labels().to_vec()).unwrap();
        assert_eq!(reloaded.embeddings(), idx.embeddings());
        let a = evaluate_index(&cfg, &idx).unwrap().render();
        let b = evaluate_index(&cfg, &reloaded).unwrap().render();
        assert_eq!(a, b);
    }
}

#[test]
fn parameter_groups_cover_the_model() {
    let cfg = RunConfig::gradcheck_default();
    let ds = load_data(&cfg).unwrap();
    let sp = split(&cfg, &ds).unwrap();
    let model = Model::init(model_config(&cfg, &ds, &sp), &mut Rng::new(0)).unwrap();
    let mut groups: Vec<String> = model
        .params
        .named()
        .iter()
        .map(|(n, _)| param_group(n))
        .collect();
    groups.dedup();
    assert!(groups.contains(&"backbone".to_string()));
    assert!(groups.contains(&"mpn.1.head.1.key".to_string()));
    assert!(groups.contains(&"classifier.backbone".to_string()));
}
