// temporary throughput/accuracy probe; removed before finalizing
use std::path::Path;
use std::time::Instant;

use vardfs_core::concrete::{Rng, TemperatureSchedule};
use vardfs_core::dataio::{batch_pad, build_image_dataset, load_idx_images, Dataset, Instance};
use vardfs_core::dfsengine::{evaluate_random, train_random, RunConfig};
use vardfs_core::diffcore::{AdamState, Tape};
use vardfs_core::setmodel::{
    batch_token_var, grads_in_order, token_dim, MaskVar, PoolingMode, PredictorNet,
    SetEncoderConfig,
};

fn data() -> (Dataset, Dataset) {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist");
    let train_set = load_idx_images(
        Path::new(&format!("{root}/train-images-idx3-ubyte")),
        Path::new(&format!("{root}/train-labels-idx1-ubyte")),
    )
    .unwrap();
    let test_set = load_idx_images(
        Path::new(&format!("{root}/t10k-images-idx3-ubyte")),
        Path::new(&format!("{root}/t10k-labels-idx1-ubyte")),
    )
    .unwrap();
    (
        build_image_dataset(&train_set, 100, 42, Some(5_000)).unwrap(),
        build_image_dataset(&test_set, 100, 43, Some(1_000)).unwrap(),
    )
}

fn randomize(net: &mut PredictorNet, scale: f64) {
    let mut r = Rng::new(99);
    for p in net.params_mut() {
        if p.data().iter().all(|&x| x == 0.0) {
            for v in p.data_mut() {
                *v = (r.open01() - 0.5) * scale;
            }
        }
    }
}

/// plain supervised training with everything revealed: isolates the
/// predictor/optimizer from the selection machinery
fn full_reveal(name: &str, train_ds: &Dataset, test_ds: &Dataset, random_head: bool, lr: f64) {
    let mut rng = Rng::new(1);
    let td = token_dim(1, 2);
    let config = SetEncoderConfig::deepsets(32, 2);
    let mut net =
        PredictorNet::new(config, td, 10, PoolingMode::MaskedMean, &mut rng).unwrap();
    if random_head {
        randomize(&mut net, 0.2);
    }
    let mut adam = AdamState::new(lr);
    let t0 = Instant::now();
    for epoch in 0..3 {
        let mut loss_sum = 0.0;
        let mut nb = 0;
        for chunk in train_ds.instances.chunks(64) {
            let refs: Vec<&Instance> = chunk.iter().collect();
            let batch = batch_pad(&refs, 100, 1, 2).unwrap();
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let ones = vec![1.0; batch.len() * 100];
            let tokens =
                batch_token_var(&mut tape, &batch.values, &batch.descriptors, MaskVar::Hard(&ones))
                    .unwrap();
            let w = tape.leaf_from(vec![batch.len(), 100], ones.clone()).unwrap();
            let logits = net
                .logits_var(&mut tape, &vars, tokens, &batch.availability, Some(w))
                .unwrap();
            let loss = tape.cross_entropy(logits, &batch.labels).unwrap();
            loss_sum += tape.data(loss)[0];
            nb += 1;
            tape.backward(loss).unwrap();
            let grads = grads_in_order(&tape, &vars.order);
            let grefs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut net.params_mut(), &grefs).unwrap();
        }
        println!("  {name} epoch {epoch}: loss {:.4}", loss_sum / nb as f64);
    }
    // full-reveal test accuracy
    let correct: usize = test_ds
        .instances
        .iter()
        .map(|inst| {
            let mask = vec![1.0; inst.n_features()];
            let tokens = vardfs_core::dfsengine::hard_tokens(inst, &mask, 1, 2);
            let probs = net.predict(&tokens, &vec![true; inst.n_features()]).unwrap();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            usize::from(pred == inst.label)
        })
        .sum();
    println!(
        "{name}: {:.0}s, full-reveal accuracy {:.3}",
        t0.elapsed().as_secs_f64(),
        correct as f64 / test_ds.instances.len() as f64
    );
}

#[test]
#[ignore]
fn probe_learning_dynamics() {
    let (train_ds, test_ds) = data();
    full_reveal("D zero-head  lr1e-3", &train_ds, &test_ds, false, 1e-3);
    full_reveal("E rand-head  lr1e-3", &train_ds, &test_ds, true, 1e-3);
    full_reveal("E2 rand-head lr3e-3", &train_ds, &test_ds, true, 3e-3);

    // F: random-mask protocol training with a randomized head
    let config = RunConfig {
        budget: 10,
        epochs: 3,
        batch_size: 64,
        learning_rate: 1e-3,
        seed: 7,
        schedule: TemperatureSchedule::geometric(1.0, 0.1, 3).unwrap(),
        policy_encoder: SetEncoderConfig::deepsets(32, 2),
        predictor_encoder: SetEncoderConfig::deepsets(32, 2),
        validation_fraction: 0.0,
    };
    let mut rng = Rng::new(1);
    let mut net = PredictorNet::new(
        config.predictor_encoder,
        token_dim(1, 2),
        10,
        PoolingMode::MaskedMean,
        &mut rng,
    )
    .unwrap();
    randomize(&mut net, 0.2);
    let t0 = Instant::now();
    let report = train_random(&train_ds, &mut net, &config).unwrap();
    let racc = evaluate_random(&test_ds, &net, &[5, 10], 7).unwrap();
    println!(
        "F rand-head protocol: {:.0}s, losses {:?}, random-mask accuracy {racc:?}",
        t0.elapsed().as_secs_f64(),
        report.epoch_losses.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>(),
    );
}
