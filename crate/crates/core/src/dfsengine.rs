//! The k-step selection/prediction protocol: training with accumulated
//! per-step losses through the relaxed mask, deterministic greedy rollouts,
//! evaluation over budgets, and the jointly-trained random-selector baseline.
//!
//! Per training step j the policy sees tokens under the hard mask, the
//! relaxed mask from the shared Gumbel draw feeds the predictor's tokens and
//! pooling weights, and the cross-entropy of that prediction is added to the
//! running loss. Gradients reach the policy only through the current step's
//! relaxed mask; the hard trajectory itself is not differentiated.

use std::borrow::Cow;
use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::concrete::{self, Rng, TemperatureSchedule};
use crate::dataio::{batch_pad, Batch, Dataset, Instance};
use crate::diffcore::{AdamState, Tape, VarId};
use crate::error::{CoreError, Result};
use crate::setmodel::{
    batch_token_var, grads_in_order, FeatureToken, MaskVar, PolicyNet, PredictorNet,
    SetEncoderConfig,
};

/// Per-instance selection state: hard mask, its differentiable surrogate,
/// and the step counter. `popcount(hard) == step` at all times.
#[derive(Debug, Clone)]
pub struct SelectionState {
    /// Which positions exist (padding and out-of-instance positions are false).
    pub available: Vec<bool>,
    /// Binary mask of revealed features.
    pub hard_mask: Vec<f64>,
    /// Latest relaxed mask values; elementwise ≥ hard_mask of the prior step.
    pub relaxed_mask: Vec<f64>,
    pub step: usize,
    /// Which instance this state tracks (opaque to the state itself).
    pub instance_index: usize,
}

impl SelectionState {
    pub fn new(available: Vec<bool>, instance_index: usize) -> Self {
        let n = available.len();
        SelectionState {
            available,
            hard_mask: vec![0.0; n],
            relaxed_mask: vec![0.0; n],
            step: 0,
            instance_index,
        }
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    /// Available and not yet selected.
    pub fn selectable_mask(&self) -> Vec<bool> {
        self.available
            .iter()
            .zip(&self.hard_mask)
            .map(|(&a, &m)| a && m == 0.0)
            .collect()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.hard_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mark `chosen` revealed and record the relaxed mask that produced it.
    pub fn apply_selection(&mut self, chosen: usize, relaxed: Vec<f64>) {
        debug_assert!(self.available[chosen] && self.hard_mask[chosen] == 0.0);
        self.hard_mask[chosen] = 1.0;
        self.relaxed_mask = relaxed;
        self.step += 1;
    }
}

/// Inputs of a training run: budget, schedule, optimizer and architecture
/// settings. `budget` must not exceed the smallest instance in the dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub budget: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: TemperatureSchedule,
    pub policy_encoder: SetEncoderConfig,
    pub predictor_encoder: SetEncoderConfig,
    /// Fraction of the training set held out for reporting only.
    pub validation_fraction: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(CoreError::Config("budget must be ≥ 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(CoreError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        self.policy_encoder.validate()?;
        self.predictor_encoder.validate()?;
        Ok(())
    }
}

/// What a training run reports back.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainReport {
    /// Mean summed k-step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation accuracy per budget 1..=k after the final epoch.
    pub val_accuracy: Vec<(usize, f64)>,
    pub wall_seconds: f64,
}

// substream tags for the master generator
const STREAM_SPLIT: u64 = 0x5311;
const STREAM_GUMBEL: u64 = 0x6a6a;
const STREAM_SHUFFLE: u64 = 0x5151;

/// Tokens of one instance under a hard mask.
pub fn hard_tokens(
    instance: &Instance,
    mask: &[f64],
    value_dim: usize,
    descriptor_dim: usize,
) -> Vec<FeatureToken> {
    (0..instance.n_features())
        .map(|i| {
            FeatureToken::new(
                instance.value_row(i, value_dim),
                mask[i],
                instance.descriptor_row(i, descriptor_dim),
            )
        })
        .collect()
}

fn check_budget(dataset: &Dataset, budget: usize) -> Result<()> {
    for (i, inst) in dataset.instances.iter().enumerate() {
        if inst.n_features() < budget {
            return Err(CoreError::Config(format!(
                "instance {i} has {} features, below budget {budget}",
                inst.n_features()
            )));
        }
    }
    Ok(())
}

/// Train policy and predictor jointly on `dataset`.
pub fn train(
    dataset: &Dataset,
    policy: &mut PolicyNet,
    predictor: &mut PredictorNet,
    config: &RunConfig,
) -> Result<TrainReport> {
    train_source(|_| Ok(Cow::Borrowed(dataset)), Some(policy), predictor, config)
}

/// Train with a dataset rebuilt per epoch (e.g. resampled pixel sets).
pub fn train_resampling<F>(
    build: F,
    policy: &mut PolicyNet,
    predictor: &mut PredictorNet,
    config: &RunConfig,
) -> Result<TrainReport>
where
    F: Fn(u64) -> Result<Dataset>,
{
    train_source(|epoch| build(epoch as u64).map(Cow::Owned), Some(policy), predictor, config)
}

/// Same training loop with uniform selection logits and no policy network:
/// the predictor learns alongside a random selector.
pub fn train_random(
    dataset: &Dataset,
    predictor: &mut PredictorNet,
    config: &RunConfig,
) -> Result<TrainReport> {
    train_source(|_| Ok(Cow::Borrowed(dataset)), None, predictor, config)
}

fn train_source<'a, F>(
    mut source: F,
    mut policy: Option<&mut PolicyNet>,
    predictor: &mut PredictorNet,
    config: &RunConfig,
) -> Result<TrainReport>
where
    F: FnMut(usize) -> Result<Cow<'a, Dataset>>,
{
    config.validate()?;
    let start = Instant::now();
    let master = Rng::new(config.seed);
    let mut gumbel_rng = master.derive(STREAM_GUMBEL);
    let mut adam_policy = AdamState::new(config.learning_rate);
    let mut adam_predictor = AdamState::new(config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut val_indices: Vec<usize> = Vec::new();
    let k = config.budget;

    for epoch in 0..config.epochs {
        let dataset = source(epoch)?;
        dataset.validate()?;
        check_budget(&dataset, k)?;
        let n = dataset.instances.len();

        // the validation split is a function of the seed and dataset size only
        let mut order: Vec<usize> = (0..n).collect();
        let mut split_rng = master.derive(STREAM_SPLIT);
        split_rng.shuffle(&mut order);
        let n_val = ((n as f64) * config.validation_fraction).floor() as usize;
        val_indices = order[..n_val].to_vec();
        let mut train_indices = order[n_val..].to_vec();
        if train_indices.is_empty() {
            return Err(CoreError::Config("no training instances after split".into()));
        }

        let tau = config.schedule.at(epoch);
        let mut shuffle_rng = master.derive(STREAM_SHUFFLE ^ (epoch as u64) << 8);
        shuffle_rng.shuffle(&mut train_indices);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train_indices.chunks(config.batch_size) {
            let refs: Vec<&Instance> = chunk.iter().map(|&i| &dataset.instances[i]).collect();
            let n_max = refs.iter().map(|r| r.n_features()).max().unwrap();
            let batch = batch_pad(&refs, n_max, dataset.value_dim, dataset.descriptor_dim)?;
            let loss = train_batch(
                &batch,
                &mut policy,
                predictor,
                &mut adam_policy,
                &mut adam_predictor,
                k,
                tau,
                &mut gumbel_rng,
            )?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { epoch });
            }
            loss_sum += loss;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }

    // held-out accuracy at every budget up to k, for reporting only
    let dataset = source(config.epochs.saturating_sub(1))?;
    let val_accuracy = if val_indices.is_empty() {
        Vec::new()
    } else {
        let val: Vec<&Instance> = val_indices.iter().map(|&i| &dataset.instances[i]).collect();
        let budgets: Vec<usize> = (1..=k).collect();
        match &policy {
            Some(p) => evaluate_instances(&val, p, predictor, &budgets, &dataset)?,
            None => evaluate_random_instances(&val, predictor, &budgets, &dataset, config.seed)?,
        }
    };

    Ok(TrainReport { epoch_losses, val_accuracy, wall_seconds: start.elapsed().as_secs_f64() })
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    batch: &Batch,
    policy: &mut Option<&mut PolicyNet>,
    predictor: &mut PredictorNet,
    adam_policy: &mut AdamState,
    adam_predictor: &mut AdamState,
    k: usize,
    tau: f64,
    gumbel_rng: &mut Rng,
) -> Result<f64> {
    let b = batch.len();
    let n = batch.n_max;
    let mut tape = Tape::new();
    let policy_vars = policy.as_ref().map(|p| p.bind(&mut tape));
    let predictor_vars = predictor.bind(&mut tape);
    let mut states: Vec<SelectionState> = (0..b)
        .map(|bi| SelectionState::new(batch.avail_row(bi).to_vec(), bi))
        .collect();

    let mut loss: Option<VarId> = None;
    for _ in 0..k {
        let hard: Vec<f64> = states.iter().flat_map(|s| s.hard_mask.iter().copied()).collect();
        let alpha = match (&*policy, &policy_vars) {
            (Some(p), Some(vars)) => {
                let tokens = batch_token_var(
                    &mut tape,
                    &batch.values,
                    &batch.descriptors,
                    MaskVar::Hard(&hard),
                )?;
                p.logits_var(&mut tape, vars, tokens, &batch.availability)?
            }
            _ => tape.leaf_from(vec![b, n], vec![0.0; b * n])?,
        };
        let (relaxed, _chosen) =
            concrete::relaxed_select_batch(&mut tape, alpha, &mut states, tau, gumbel_rng)?;
        let ptokens = batch_token_var(
            &mut tape,
            &batch.values,
            &batch.descriptors,
            MaskVar::Relaxed(relaxed),
        )?;
        let logits = predictor.logits_var(
            &mut tape,
            &predictor_vars,
            ptokens,
            &batch.availability,
            Some(relaxed),
        )?;
        let ce = tape.cross_entropy(logits, &batch.labels)?;
        loss = Some(match loss {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    let loss = loss.expect("k ≥ 1");
    let loss_value = tape.data(loss)[0];
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    tape.backward(loss)?;

    if let (Some(p), Some(vars)) = (policy.as_deref_mut(), &policy_vars) {
        let grads = grads_in_order(&tape, &vars.order);
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params = p.params_mut();
        adam_policy.step(&mut params, &grad_refs)?;
    }
    let grads = grads_in_order(&tape, &predictor_vars.order);
    let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    let mut params = predictor.params_mut();
    adam_predictor.step(&mut params, &grad_refs)?;
    Ok(loss_value)
}

/// Deterministic greedy rollout: k argmax picks of the masked policy logits,
/// no noise, then one prediction from the hard mask.
pub fn rollout(
    instance: &Instance,
    policy: &PolicyNet,
    predictor: &PredictorNet,
    k: usize,
    value_dim: usize,
    descriptor_dim: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let trace = rollout_prefixes(instance, policy, predictor, &[k], value_dim, descriptor_dim)?;
    let (selected, probs) = trace.into_iter().next().map(|(_, s, p)| (s, p)).expect("one budget");
    Ok((selected, probs))
}

/// One selection pass to the largest budget, predictions at every prefix.
/// Returns (budget, selected-prefix, class distribution) per budget.
pub fn rollout_prefixes(
    instance: &Instance,
    policy: &PolicyNet,
    predictor: &PredictorNet,
    budgets: &[usize],
    value_dim: usize,
    descriptor_dim: usize,
) -> Result<Vec<(usize, Vec<usize>, Vec<f64>)>> {
    let n = instance.n_features();
    let k_max = budgets.iter().copied().max().unwrap_or(0);
    if k_max == 0 || budgets.is_empty() {
        return Err(CoreError::Config("budgets must be non-empty and ≥ 1".into()));
    }
    if k_max > n {
        return Err(CoreError::Config(format!(
            "budget {k_max} exceeds instance feature count {n}"
        )));
    }
    let avail = vec![true; n];
    let mut state = SelectionState::new(avail.clone(), 0);
    let mut picks: Vec<usize> = Vec::with_capacity(k_max);
    for _ in 0..k_max {
        let tokens = hard_tokens(instance, &state.hard_mask, value_dim, descriptor_dim);
        let selected: Vec<bool> = state.hard_mask.iter().map(|&m| m == 1.0).collect();
        let logits = policy.logits(&tokens, &avail, &selected)?;
        let chosen = concrete::argmax_valid(&logits, &state.selectable_mask())
            .ok_or(CoreError::ExhaustedBudget)?;
        let mut relaxed = state.hard_mask.clone();
        relaxed[chosen] = 1.0;
        state.apply_selection(chosen, relaxed);
        picks.push(chosen);
    }
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let mut mask = vec![0.0; n];
        for &p in &picks[..b] {
            mask[p] = 1.0;
        }
        let tokens = hard_tokens(instance, &mask, value_dim, descriptor_dim);
        let probs = predictor.predict(&tokens, &avail)?;
        out.push((b, picks[..b].to_vec(), probs));
    }
    Ok(out)
}

fn check_budgets(budgets: &[usize], dataset: &Dataset) -> Result<()> {
    if budgets.is_empty() {
        return Err(CoreError::Config("budgets list is empty".into()));
    }
    if budgets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::Config("budgets must be strictly ascending".into()));
    }
    let max = *budgets.last().unwrap();
    if max > dataset.min_feature_count() {
        return Err(CoreError::Config(format!(
            "budget {max} exceeds smallest instance ({} features)",
            dataset.min_feature_count()
        )));
    }
    Ok(())
}

/// Test accuracy per budget under the trained policy. Rollouts are pure per
/// instance and run in parallel; aggregation is order-independent counting.
pub fn evaluate(
    dataset: &Dataset,
    policy: &PolicyNet,
    predictor: &PredictorNet,
    budgets: &[usize],
) -> Result<Vec<(usize, f64)>> {
    dataset.validate()?;
    check_budgets(budgets, dataset)?;
    let refs: Vec<&Instance> = dataset.instances.iter().collect();
    evaluate_instances(&refs, policy, predictor, budgets, dataset)
}

fn evaluate_instances(
    instances: &[&Instance],
    policy: &PolicyNet,
    predictor: &PredictorNet,
    budgets: &[usize],
    dataset: &Dataset,
) -> Result<Vec<(usize, f64)>> {
    let counts: Result<Vec<Vec<usize>>> = instances
        .par_iter()
        .map(|inst| {
            let trace = rollout_prefixes(
                inst,
                policy,
                predictor,
                budgets,
                dataset.value_dim,
                dataset.descriptor_dim,
            )?;
            Ok(trace
                .iter()
                .map(|(_, _, probs)| {
                    let pred = concrete::argmax_valid(probs, &vec![true; probs.len()]).unwrap();
                    usize::from(pred == inst.label)
                })
                .collect())
        })
        .collect();
    let counts = counts?;
    let totals = counts.iter().fold(vec![0usize; budgets.len()], |mut acc, row| {
        for (a, &r) in acc.iter_mut().zip(row) {
            *a += r;
        }
        acc
    });
    Ok(budgets
        .iter()
        .zip(totals)
        .map(|(&b, t)| (b, t as f64 / instances.len() as f64))
        .collect())
}

/// Accuracy per budget with uniformly random (seeded) selection; the
/// predictor is typically one trained by [`train_random`].
pub fn evaluate_random(
    dataset: &Dataset,
    predictor: &PredictorNet,
    budgets: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    dataset.validate()?;
    check_budgets(budgets, dataset)?;
    let refs: Vec<&Instance> = dataset.instances.iter().collect();
    evaluate_random_instances(&refs, predictor, budgets, dataset, seed)
}

fn evaluate_random_instances(
    instances: &[&Instance],
    predictor: &PredictorNet,
    budgets: &[usize],
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let master = Rng::new(seed);
    let k_max = *budgets.last().unwrap();
    let counts: Result<Vec<Vec<usize>>> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = master.derive(idx as u64);
            let n = inst.n_features();
            // uniform sample of k_max distinct positions
            let mut positions: Vec<usize> = (0..n).collect();
            for i in 0..k_max {
                let j = i + rng.below(n - i);
                positions.swap(i, j);
            }
            let avail = vec![true; n];
            let mut out = Vec::with_capacity(budgets.len());
            for &b in budgets {
                let mut mask = vec![0.0; n];
                for &p in &positions[..b] {
                    mask[p] = 1.0;
                }
                let tokens = hard_tokens(inst, &mask, dataset.value_dim, dataset.descriptor_dim);
                let probs = predictor.predict(&tokens, &avail)?;
                let pred = concrete::argmax_valid(&probs, &vec![true; probs.len()]).unwrap();
                out.push(usize::from(pred == inst.label));
            }
            Ok(out)
        })
        .collect();
    let counts = counts?;
    let totals = counts.iter().fold(vec![0usize; budgets.len()], |mut acc, row| {
        for (a, &r) in acc.iter_mut().zip(row) {
            *a += r;
        }
        acc
    });
    Ok(budgets
        .iter()
        .zip(totals)
        .map(|(&b, t)| (b, t as f64 / instances.len() as f64))
        .collect())
}

/// Convenience wrapper for the ablation: train the predictor jointly with a
/// random selector on `train_set`, then measure random-selection accuracy on
/// `eval_set`.
pub fn random_selector_baseline(
    train_set: &Dataset,
    eval_set: &Dataset,
    predictor: &mut PredictorNet,
    budgets: &[usize],
    config: &RunConfig,
) -> Result<Vec<(usize, f64)>> {
    train_random(train_set, predictor, config)?;
    evaluate_random(eval_set, predictor, budgets, config.seed)
}

/// How often the trained policy picks each feature id across the dataset.
/// The total count equals |dataset|·budget.
pub fn selection_frequency(
    dataset: &Dataset,
    policy: &PolicyNet,
    budget: usize,
) -> Result<HashMap<u64, u64>> {
    dataset.validate()?;
    if budget == 0 || budget > dataset.min_feature_count() {
        return Err(CoreError::Config(format!("budget {budget} out of range")));
    }
    let maps: Result<Vec<HashMap<u64, u64>>> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let n = inst.n_features();
            let avail = vec![true; n];
            let mut state = SelectionState::new(avail.clone(), 0);
            let mut counts = HashMap::new();
            for _ in 0..budget {
                let tokens =
                    hard_tokens(inst, &state.hard_mask, dataset.value_dim, dataset.descriptor_dim);
                let selected: Vec<bool> = state.hard_mask.iter().map(|&m| m == 1.0).collect();
                let logits = policy.logits(&tokens, &avail, &selected)?;
                let chosen = concrete::argmax_valid(&logits, &state.selectable_mask())
                    .ok_or(CoreError::ExhaustedBudget)?;
                let mut relaxed = state.hard_mask.clone();
                relaxed[chosen] = 1.0;
                state.apply_selection(chosen, relaxed);
                *counts.entry(inst.feature_ids[chosen]).or_insert(0) += 1;
            }
            Ok(counts)
        })
        .collect();
    let mut merged: HashMap<u64, u64> = HashMap::new();
    for m in maps? {
        for (id, c) in m {
            *merged.entry(id).or_insert(0) += c;
        }
    }
    Ok(merged)
}

/// Seeded uniformly-random selection counts (ablation view of the frequency
/// map; no policy involved).
pub fn random_selection_frequency(
    dataset: &Dataset,
    budget: usize,
    seed: u64,
) -> Result<HashMap<u64, u64>> {
    dataset.validate()?;
    if budget == 0 || budget > dataset.min_feature_count() {
        return Err(CoreError::Config(format!("budget {budget} out of range")));
    }
    let master = Rng::new(seed);
    let mut merged: HashMap<u64, u64> = HashMap::new();
    for (idx, inst) in dataset.instances.iter().enumerate() {
        let mut rng = master.derive(idx as u64);
        let n = inst.n_features();
        let mut positions: Vec<usize> = (0..n).collect();
        for i in 0..budget {
            let j = i + rng.below(n - i);
            positions.swap(i, j);
        }
        for &p in &positions[..budget] {
            *merged.entry(inst.feature_ids[p]).or_insert(0) += 1;
        }
    }
    Ok(merged)
}
