use collapse_lab::datasets::{gen_blobs, gen_spirals, BlobsConfig, SpiralsConfig, Split};
use collapse_lab::training::{accuracy, train, TrainConfig};
use collapse_lab::{Model, ModelConfig, RngState};

#[test]
fn desk_model_fits_close_blobs() {
    // 10 classes x 500 points, centers 3 sigma apart.
    let cfg = BlobsConfig {
        n_per_class: 500,
        num_classes: 10,
        input_dim: 20,
        separation: 3.0,
        noise_sigma: 1.0,
    };
    let data = gen_blobs(&cfg, Split::Train, 42).unwrap();
    let init = Model::init(&ModelConfig::default(), &RngState::new(42)).unwrap();
    let (model, history) = train(&init, &data, &TrainConfig::default()).unwrap();
    assert_eq!(history.len(), 30);
    let acc = accuracy(&model, &data).unwrap();
    assert!(acc >= 95.0, "train accuracy {acc}");
    assert!(history.last().unwrap().loss < history[0].loss);
}

#[test]
fn training_is_reproducible() {
    let cfg = SpiralsConfig {
        n_per_class: 60,
        num_classes: 3,
        turns: 1.0,
        noise_sigma: 0.05,
        input_dim: 4,
    };
    let data = gen_spirals(&cfg, Split::Train, 3).unwrap();
    let mcfg = ModelConfig {
        input_dim: 4,
        width: 16,
        depth: 3,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let init = Model::init(&mcfg, &RngState::new(3)).unwrap();
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (a, ha) = train(&init, &data, &tc).unwrap();
    let (b, hb) = train(&init, &data, &tc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = train(&init, &data, &TrainConfig { seed: 4, ..tc }).unwrap();
    assert_ne!(a, c);
}
