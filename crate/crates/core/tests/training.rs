use contour_spt::checkpoint;
use contour_spt::data::{dataset_split, synth_generate, SynthConfig};
use contour_spt::network::{build_model, forward_features, NetworkConfig};
use contour_spt::trainer::{train, TrainConfig};

fn small_run() -> (Vec<u8>, Vec<f64>, Vec<Vec<f64>>) {
    let data = synth_generate(&SynthConfig {
        identities: 6,
        images_per_camera: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train_ids, test_ids) = dataset_split(&data.identities(), 2.0 / 3.0, 7).unwrap();
    let set = data.restrict(&train_ids);
    let net = NetworkConfig {
        classes: train_ids.len(),
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        stage_epochs: [2, 2, 2],
        triplets_per_epoch: Some(32),
        batch_triplets: 8,
        ..TrainConfig::default()
    };
    let out = train(build_model(&net, cfg.model_seed).unwrap(), &set, &cfg, |_| Ok(())).unwrap();
    let test = data.restrict(&test_ids);
    let feats = test
        .images
        .iter()
        .map(|img| forward_features(&out.model, img.tensor()).unwrap())
        .collect();
    let losses = out.log.iter().map(|e| e.total).collect();
    (checkpoint::to_bytes(&out.model).unwrap(), losses, feats)
}

#[test]
fn training_lowers_loss_and_repeats_bit_for_bit() {
    let (bytes, losses, feats) = small_run();
    println!("losses {losses:?}");
    assert_eq!(losses.len(), 6);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[5] < losses[0]);

    let (again, losses_again, feats_again) = small_run();
    assert_eq!(bytes, again);
    assert_eq!(losses, losses_again);
    assert_eq!(feats, feats_again);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sptn");
    checkpoint::save(&path, &checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), bytes);
}
