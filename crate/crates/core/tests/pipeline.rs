//! End-to-end use of the public API: phantoms on disk, manifest loading,
//! cropping, splitting, training, checkpoint reload and reporting.

use volcls_core::data::{
    generate_phantom_dataset, load_dataset, split_dataset, write_phantom_dataset, AugmentationSpec, PhantomConfig,
    Preprocess,
};
use volcls_core::eval::{evaluate, render_table, ModelScorer};
use volcls_core::models::{Architecture, Model, ModelConfig};
use volcls_core::train::{load_checkpoint, Partitions, TrainConfig, Trainer, BEST_CHECKPOINT, HISTORY_FILE};

#[test]
fn phantoms_train_and_reload_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let phantom = generate_phantom_dataset(&PhantomConfig::new(16, 0.5, [8, 24, 24], 11)).unwrap();
    write_phantom_dataset(&phantom, &data_dir).unwrap();

    let dataset = load_dataset(&data_dir.join("manifest.json")).unwrap();
    assert_eq!(dataset.samples.len(), 16);
    let prep = Preprocess { zscore: true, crop_size: Some([6, 16, 16]) };
    let samples = prep.apply_all(&dataset.samples).unwrap();
    assert!(samples.iter().all(|s| s.dims() == [6, 16, 16]));

    let split = split_dataset(&dataset.labels(), [0.5, 0.25, 0.25], 11, true).unwrap();
    let parts = Partitions::from_split(&samples, &split).unwrap();
    let model_cfg = ModelConfig {
        widths: vec![4, 8],
        head_hidden: vec![8],
        dropout: 0.2,
        ..ModelConfig::reference(Architecture::Convnet3d)
    };
    let train_cfg = TrainConfig { epochs: 3, lr: 1e-3, dropout: 0.2, seed: 11, ..TrainConfig::default() };
    let run = dir.path().join("run");
    let mut trainer = Trainer::new(Model::build(&model_cfg, 11).unwrap(), train_cfg, AugmentationSpec::default(), &parts.train)
        .unwrap()
        .with_output(&run)
        .unwrap();
    let history = trainer.fit(&parts).unwrap().clone();
    assert_eq!(history.records.len(), 3);
    let log = std::fs::read_to_string(run.join(HISTORY_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);

    // The best checkpoint scores the test partition exactly like the
    // in-memory model did at that epoch.
    let selected = history.selected().expect("val partition has both classes");
    let (mut best, _, state) = load_checkpoint::<f32>(&run.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(state.epoch, selected.epoch);
    let mut scorer = ModelScorer { name: "ConvNet3D".into(), model: &mut best };
    let report = evaluate(&mut scorer, &parts.val, 0.5, "val").unwrap();
    assert_eq!(report.auc_roc, selected.value);
    assert_eq!(report.n, parts.val.len());
    let table = render_table(&[report.row()]);
    assert!(table.contains("ConvNet3D"));
}
