//! Command implementations. All outputs are plain files under the spec's
//! output directory; CSV files are header-first with `.`-decimal numbers.

use std::fs;
use std::path::Path;

use vardfs_core::concrete::Rng;
use vardfs_core::dataio::Dataset;
use vardfs_core::dfsengine::{
    self, evaluate, evaluate_random, selection_frequency, train_random, TrainReport,
};
use vardfs_core::error::{CoreError, Result};
use vardfs_core::oracle;
use vardfs_core::selfcheck;
use vardfs_core::setmodel::{
    load_checkpoint, save_checkpoint, token_dim, CheckpointMeta, PolicyNet, PredictorNet,
};

use crate::spec::{DatasetKind, RunSpecFile};

fn fresh_nets(spec: &RunSpecFile, dataset: &Dataset) -> Result<(PolicyNet, PredictorNet)> {
    let mut rng = Rng::new(spec.train.seed ^ 0x1217);
    let td = token_dim(dataset.value_dim, dataset.descriptor_dim);
    let policy = PolicyNet::new(spec.encoder_config(), td, &mut rng)?;
    let predictor = PredictorNet::new(
        spec.encoder_config(),
        td,
        dataset.n_classes,
        spec.model.pooling,
        &mut rng,
    )?;
    Ok((policy, predictor))
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = String::from("epoch,mean_loss\n");
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(path, csv)?;
    Ok(())
}

pub fn cmd_train(spec_path: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut spec = RunSpecFile::load(spec_path)?;
    if let Some(seed) = seed_override {
        spec.train.seed = seed;
    }
    let out = spec.output.dir.clone();
    fs::create_dir_all(&out)?;
    let dataset = spec.build_train_dataset()?;
    let config = spec.run_config()?;
    let (mut policy, mut predictor) = fresh_nets(&spec, &dataset)?;

    let report = if spec.dataset.resample_per_epoch {
        dfsengine::train_resampling(
            |epoch| spec.build_train_dataset_for_epoch(epoch),
            &mut policy,
            &mut predictor,
            &config,
        )?
    } else {
        dfsengine::train(&dataset, &mut policy, &mut predictor, &config)?
    };

    let meta = CheckpointMeta {
        policy_encoder: config.policy_encoder,
        predictor_encoder: config.predictor_encoder,
        pooling: spec.model.pooling,
        n_classes: dataset.n_classes,
        value_dim: dataset.value_dim,
        descriptor_dim: dataset.descriptor_dim,
    };
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &policy, &predictor, &meta)?;
    write_loss_csv(&out.join("loss.csv"), &report)?;

    let summary = serde_json::json!({
        "command": "train",
        "seed": spec.train.seed,
        "budget": config.budget,
        "epochs": config.epochs,
        "epoch_losses": report.epoch_losses,
        "val_accuracy": report.val_accuracy,
        "wall_seconds": report.wall_seconds,
        "checkpoint": ckpt,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    println!(
        "trained {} epochs in {:.1}s; final loss {:.4}; wrote {}",
        config.epochs,
        report.wall_seconds,
        report.epoch_losses.last().unwrap(),
        ckpt.display()
    );
    Ok(())
}

fn check_compat(meta: &CheckpointMeta, dataset: &Dataset) -> Result<()> {
    if meta.n_classes != dataset.n_classes
        || meta.value_dim != dataset.value_dim
        || meta.descriptor_dim != dataset.descriptor_dim
    {
        return Err(CoreError::Config(format!(
            "checkpoint expects (classes={}, value_dim={}, descriptor_dim={}), dataset has ({}, {}, {})",
            meta.n_classes,
            meta.value_dim,
            meta.descriptor_dim,
            dataset.n_classes,
            dataset.value_dim,
            dataset.descriptor_dim
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    spec_path: &Path,
    checkpoint: &Path,
    budgets: &[usize],
    with_random_baseline: bool,
) -> Result<()> {
    let spec = RunSpecFile::load(spec_path)?;
    let out = spec.output.dir.clone();
    fs::create_dir_all(&out)?;
    let (policy, predictor, meta) = load_checkpoint(checkpoint)?;
    let test = spec.build_test_dataset()?;
    check_compat(&meta, &test)?;
    let accuracy = evaluate(&test, &policy, &predictor, budgets)?;

    let random = if with_random_baseline {
        let train_ds = spec.build_train_dataset()?;
        let mut rng = Rng::new(spec.train.seed ^ 0xba5e);
        let mut rand_predictor = PredictorNet::new(
            meta.predictor_encoder,
            meta.token_dim(),
            test.n_classes,
            meta.pooling,
            &mut rng,
        )?;
        let config = spec.run_config()?;
        train_random(&train_ds, &mut rand_predictor, &config)?;
        Some(evaluate_random(&test, &rand_predictor, budgets, spec.train.seed)?)
    } else {
        None
    };

    let n = test.instances.len();
    let mut csv = String::new();
    match &random {
        Some(rand) => {
            csv.push_str("budget,accuracy,n,random_accuracy\n");
            for ((b, acc), (_, racc)) in accuracy.iter().zip(rand) {
                csv.push_str(&format!("{b},{acc},{n},{racc}\n"));
            }
        }
        None => {
            csv.push_str("budget,accuracy,n\n");
            for (b, acc) in &accuracy {
                csv.push_str(&format!("{b},{acc},{n}\n"));
            }
        }
    }
    let path = out.join("accuracy.csv");
    fs::write(&path, csv)?;
    for (b, acc) in &accuracy {
        println!("budget {b}: accuracy {acc:.4}");
    }
    if let Some(rand) = &random {
        for (b, acc) in rand {
            println!("budget {b}: random-selector accuracy {acc:.4}");
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_heatmap(spec_path: &Path, checkpoint: &Path, budget: usize) -> Result<()> {
    let spec = RunSpecFile::load(spec_path)?;
    if spec.dataset.kind != DatasetKind::ImageIdx {
        return Err(CoreError::Config("heatmap requires an image-idx dataset".into()));
    }
    let out = spec.output.dir.clone();
    fs::create_dir_all(&out)?;
    let (policy, _, meta) = load_checkpoint(checkpoint)?;
    let test = spec.build_test_dataset()?;
    check_compat(&meta, &test)?;
    let (h, w) = test.image_shape.ok_or_else(|| {
        CoreError::Config("dataset carries no image shape".into())
    })?;
    let counts = selection_frequency(&test, &policy, budget)?;

    let mut grid = vec![0u64; h * w];
    for (&id, &c) in &counts {
        grid[id as usize] += c;
    }
    let total: u64 = grid.iter().sum();

    let mut csv = String::new();
    for row in grid.chunks(w) {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    fs::write(out.join("frequency_grid.csv"), csv)?;

    // 8-bit grayscale, max-normalized: lighter = more selected
    let max = grid.iter().copied().max().unwrap_or(0).max(1);
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(grid.iter().map(|&c| ((c * 255) / max) as u8));
    fs::write(out.join("frequency.pgm"), pgm)?;

    println!(
        "{} selections over {} instances; wrote {} and {}",
        total,
        test.instances.len(),
        out.join("frequency_grid.csv").display(),
        out.join("frequency.pgm").display()
    );
    Ok(())
}

pub fn cmd_oracle_check(spec_path: &Path) -> Result<()> {
    let spec = RunSpecFile::load(spec_path)?;
    if spec.dataset.kind != DatasetKind::SyntheticOracle {
        return Err(CoreError::Config("oracle-check requires a synthetic-oracle dataset".into()));
    }
    let out = spec.output.dir.clone();
    fs::create_dir_all(&out)?;
    let train_ds = spec.build_train_dataset()?;
    let config = spec.run_config()?;
    let (mut policy, mut predictor) = fresh_nets(&spec, &train_ds)?;
    let report = dfsengine::train(&train_ds, &mut policy, &mut predictor, &config)?;
    println!(
        "trained {} epochs in {:.1}s; final loss {:.4}",
        config.epochs,
        report.wall_seconds,
        report.epoch_losses.last().unwrap()
    );

    let (_, test_specs) = spec.build_test_specs()?;
    let steps = config.budget.min(3);
    let mut spec_iter = test_specs.iter();
    let mut agree_rng = Rng::new(spec.train.seed ^ 0xa9ee);
    let rates = oracle::agreement_per_spec(
        |view| oracle::policy_pick(&policy, view).expect("policy pick"),
        |_| {
            Ok(spec_iter
                .next()
                .cloned()
                .expect("enough test specs for the trial count"))
        },
        test_specs.len(),
        steps,
        &mut agree_rng,
    )?;
    for (step, rate) in rates.iter().enumerate() {
        println!("step {}: agreement with exact-CMI oracle {:.4}", step + 1, rate);
    }

    // exact CMI table of the first test spec before any reveal
    let example = &test_specs[0];
    println!("exact CMI table (first test spec, no reveals):");
    for i in 0..example.n_features() {
        let z = &example.features[i].descriptor;
        println!(
            "  feature {i}: z = ({:.3}, {:.3}), I(y; x | ∅) = {:.6} nats",
            z[0],
            z[1],
            oracle::cmi(example, &[], i)?
        );
    }

    let summary = serde_json::json!({
        "command": "oracle-check",
        "n_trials": test_specs.len(),
        "steps": steps,
        "agreement": rates,
        "final_loss": report.epoch_losses.last(),
    });
    fs::write(out.join("oracle_summary.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    println!("wrote {}", out.join("oracle_summary.json").display());
    Ok(())
}

pub fn cmd_selfcheck(seed: u64) -> Result<bool> {
    let reports = selfcheck::run_all(seed)?;
    let mut all_passed = true;
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        all_passed &= r.passed;
    }
    Ok(all_passed)
}
