//! Gumbel noise, tempered softmax, and the relaxed mask update.
//!
//! One Gumbel vector drives both lines of the mask update: the tempered
//! softmax produces the differentiable mask m̃ and the zero-temperature
//! argmax produces the hard pick, so the chosen index is consistent between
//! them by construction.

use rand::distributions::Open01;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dfsengine::SelectionState;
use crate::diffcore::{Tape, Tensor, VarId};
use crate::error::{CoreError, Result};

/// Deterministic counter-based generator; identical seed, identical stream.
#[derive(Debug, Clone)]
pub struct Rng {
    pub seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        // Fisher-Yates, fixed order for reproducibility
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Independent substream for parallel or per-item use. Splitmix-style
    /// finalizer keeps substreams decorrelated from each other and the parent.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut z = self.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Rng::new(z ^ (z >> 31))
    }
}

/// i.i.d. standard Gumbel draws via −log(−log u), u on the open unit interval.
pub fn sample_gumbel(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| -(-rng.open01().ln()).ln()).collect()
}

/// Temperature per epoch; positive and non-increasing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    values: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::Config("temperature schedule is empty".into()));
        }
        if values.iter().any(|&t| !(t > 0.0)) {
            return Err(CoreError::Config("temperatures must be positive".into()));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(CoreError::Config("temperatures must be non-increasing".into()));
        }
        Ok(TemperatureSchedule { values })
    }

    /// Geometric decay from `start` down to `end` over `epochs` entries.
    pub fn geometric(start: f64, end: f64, epochs: usize) -> Result<Self> {
        if !(start >= end && end > 0.0) || epochs == 0 {
            return Err(CoreError::Config(format!(
                "invalid geometric schedule: start={start} end={end} epochs={epochs}"
            )));
        }
        if epochs == 1 {
            return TemperatureSchedule::new(vec![start]);
        }
        let ratio = (end / start).powf(1.0 / (epochs - 1) as f64);
        let values = (0..epochs).map(|i| start * ratio.powi(i as i32)).collect();
        TemperatureSchedule::new(values)
    }

    pub fn constant(tau: f64, epochs: usize) -> Result<Self> {
        TemperatureSchedule::new(vec![tau; epochs.max(1)])
    }

    /// Temperature for an epoch, clamping past the end of the list.
    pub fn at(&self, epoch: usize) -> f64 {
        self.values[epoch.min(self.values.len() - 1)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// τ>0: masked softmax of logits/τ. τ=0: exact one-hot at the valid argmax,
/// ties to the lowest index.
pub fn tempered_softmax(logits: &[f64], tau: f64, valid: &[bool]) -> Result<Vec<f64>> {
    if tau < 0.0 {
        return Err(CoreError::Argument(format!("negative temperature {tau}")));
    }
    if logits.len() != valid.len() {
        return Err(CoreError::ShapeMismatch {
            op: "tempered_softmax",
            lhs: vec![logits.len()],
            rhs: vec![valid.len()],
        });
    }
    if tau == 0.0 {
        let idx = argmax_valid(logits, valid).ok_or(CoreError::DegenerateRow { row: 0 })?;
        let mut out = vec![0.0; logits.len()];
        out[idx] = 1.0;
        return Ok(out);
    }
    let mut mx = f64::NEG_INFINITY;
    for (&x, &v) in logits.iter().zip(valid) {
        if v && x > mx {
            mx = x;
        }
    }
    if mx == f64::NEG_INFINITY {
        return Err(CoreError::DegenerateRow { row: 0 });
    }
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for ((o, &x), &v) in out.iter_mut().zip(logits).zip(valid) {
        if v {
            *o = ((x - mx) / tau).exp();
            denom += *o;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

/// Argmax over valid entries, strictly-greater scan so ties go low.
pub fn argmax_valid(values: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&x, &v)) in values.iter().zip(valid).enumerate() {
        if v && best.map_or(true, |(_, bx)| x > bx) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Result of one relaxed selection step: the differentiable mask on the tape
/// and the index the zero-temperature line picked.
pub struct RelaxedSelection {
    pub relaxed: VarId,
    pub chosen: usize,
}

/// One step of the mask update. `alpha` is a rank-1 logit vector on the tape;
/// unavailable and already-selected positions are excluded by the state's
/// selectable mask (equivalently, their logits are −∞). Draws a fresh Gumbel
/// vector, shared by the tempered and zero-temperature lines.
pub fn relaxed_select(
    tape: &mut Tape,
    alpha: VarId,
    state: &mut SelectionState,
    tau: f64,
    rng: &mut Rng,
) -> Result<RelaxedSelection> {
    let n = state.len();
    if tape.data(alpha).len() != n {
        return Err(CoreError::ShapeMismatch {
            op: "relaxed_select",
            lhs: tape.shape(alpha).to_vec(),
            rhs: vec![n],
        });
    }
    let noise = sample_gumbel(n, rng);
    relaxed_select_with_noise(tape, alpha, state, tau, &noise)
}

/// Deterministic core of [`relaxed_select`]; exposed for frozen-noise tests.
pub fn relaxed_select_with_noise(
    tape: &mut Tape,
    alpha: VarId,
    state: &mut SelectionState,
    tau: f64,
    noise: &[f64],
) -> Result<RelaxedSelection> {
    let n = state.len();
    let valid = state.selectable_mask();
    if !valid.iter().any(|&v| v) {
        return Err(CoreError::ExhaustedBudget);
    }
    let scores: Vec<f64> = tape.data(alpha).iter().zip(noise).map(|(&a, &g)| a + g).collect();
    let chosen = argmax_valid(&scores, &valid).expect("checked non-empty");

    let soft = if tau > 0.0 {
        let g_leaf = tape.leaf(Tensor::from_vec(noise.to_vec()));
        let noisy = tape.add(alpha, g_leaf)?;
        let scaled = tape.scale(noisy, 1.0 / tau)?;
        tape.masked_softmax(scaled, &valid)?
    } else {
        let mut onehot = vec![0.0; n];
        onehot[chosen] = 1.0;
        tape.leaf(Tensor::from_vec(onehot))
    };
    let prev = tape.leaf(Tensor::from_vec(state.hard_mask.clone()));
    let relaxed = tape.maximum(prev, soft)?;

    state.apply_selection(chosen, tape.data(relaxed).to_vec());
    Ok(RelaxedSelection { relaxed, chosen })
}

/// Batched mask update over [b, n] logits; one fresh Gumbel vector per row,
/// drawn in row order from the single generator.
pub fn relaxed_select_batch(
    tape: &mut Tape,
    alpha: VarId,
    states: &mut [SelectionState],
    tau: f64,
    rng: &mut Rng,
) -> Result<(VarId, Vec<usize>)> {
    let shape = tape.shape(alpha).to_vec();
    if shape.len() != 2 || shape[0] != states.len() {
        return Err(CoreError::ShapeMismatch {
            op: "relaxed_select_batch",
            lhs: shape,
            rhs: vec![states.len()],
        });
    }
    let n = shape[1];
    let b = states.len();
    let mut noise = Vec::with_capacity(b * n);
    let mut valid = Vec::with_capacity(b * n);
    let mut prev_mask = Vec::with_capacity(b * n);
    for state in states.iter() {
        debug_assert_eq!(state.len(), n);
        noise.extend(sample_gumbel(n, rng));
        valid.extend(state.selectable_mask());
        prev_mask.extend_from_slice(&state.hard_mask);
    }
    let alpha_data = tape.data(alpha);
    let mut chosen = Vec::with_capacity(b);
    for (bi, state) in states.iter().enumerate() {
        let row = bi * n;
        let scores: Vec<f64> = alpha_data[row..row + n]
            .iter()
            .zip(&noise[row..row + n])
            .map(|(&a, &g)| a + g)
            .collect();
        let v = &valid[row..row + n];
        if !v.iter().any(|&x| x) {
            let _ = state;
            return Err(CoreError::ExhaustedBudget);
        }
        chosen.push(argmax_valid(&scores, v).expect("checked non-empty"));
    }

    let relaxed = if tau > 0.0 {
        let g_leaf = tape.leaf_from(vec![b, n], noise)?;
        let noisy = tape.add(alpha, g_leaf)?;
        let scaled = tape.scale(noisy, 1.0 / tau)?;
        let soft = tape.masked_softmax(scaled, &valid)?;
        let prev = tape.leaf_from(vec![b, n], prev_mask)?;
        tape.maximum(prev, soft)?
    } else {
        let mut hard = prev_mask;
        for (bi, &c) in chosen.iter().enumerate() {
            hard[bi * n + c] = 1.0;
        }
        tape.leaf_from(vec![b, n], hard)?
    };

    let relaxed_data = tape.data(relaxed).to_vec();
    for (bi, state) in states.iter_mut().enumerate() {
        state.apply_selection(chosen[bi], relaxed_data[bi * n..(bi + 1) * n].to_vec());
    }
    Ok((relaxed, chosen))
}
