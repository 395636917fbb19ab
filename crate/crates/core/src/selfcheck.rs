//! Built-in verification suites: finite-difference gradient checks over
//! random small networks, the Gumbel-max frequency identity, and the
//! permutation contracts. The CLI selfcheck command and the acceptance
//! tests both run these.

use crate::concrete::{self, Rng};
use crate::diffcore::{Tape, Tensor};
use crate::error::Result;
use crate::gradcheck;
use crate::setmodel::{
    token_dim, tokens_to_tensor, FeatureToken, PolicyNet, PoolingMode, PredictorNet,
    SetEncoderConfig,
};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckReport { name, passed, detail }
    }
}

fn flatten(params: &[&Tensor]) -> Vec<f64> {
    params.iter().flat_map(|p| p.data().iter().copied()).collect()
}

fn assign(params: &mut [&mut Tensor], flat: &[f64]) {
    let mut off = 0;
    for p in params.iter_mut() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    debug_assert_eq!(off, flat.len());
}

fn randomize_zero_params(params: &mut [&mut Tensor], rng: &mut Rng) {
    for p in params.iter_mut() {
        if p.data().iter().all(|&x| x == 0.0) {
            for v in p.data_mut() {
                *v = (rng.open01() - 0.5) * 0.5;
            }
        }
    }
}

fn random_tokens(rng: &mut Rng, n: usize, c: usize) -> (Vec<FeatureToken>, Vec<bool>) {
    let tokens = (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..c).map(|_| rng.open01()).collect();
            let m = if i == 0 || rng.open01() < 0.5 { 1.0 } else { 0.0 };
            FeatureToken::new(&[rng.open01() * 2.0 - 1.0], m, &z)
        })
        .collect();
    (tokens, vec![true; n])
}

fn trial_config(trial: usize) -> SetEncoderConfig {
    let hidden = [6, 8, 12][trial % 3];
    let blocks = 1 + trial % 2;
    if trial % 2 == 0 {
        SetEncoderConfig::deepsets(hidden, blocks)
    } else {
        SetEncoderConfig::attention(hidden, blocks, 2)
    }
}

/// Autodiff vs central finite differences (h = 1e-4) over `n_nets` random
/// policy+predictor pairs with 2..=6 tokens. Max relative error must stay
/// below 1e-4.
pub fn gradient_suite(n_nets: usize, seed: u64) -> Result<CheckReport> {
    gradient_suite_impl(n_nets, seed, false)
}

pub(crate) fn gradient_suite_impl(
    n_nets: usize,
    seed: u64,
    inject_bug: bool,
) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for trial in 0..n_nets {
        let config = trial_config(trial);
        let n = 2 + trial % 5;
        let c = 2 + trial % 2;
        let classes = 2 + trial % 3;
        let td = token_dim(1, c);

        // policy: scalar loss = Σ wᵢ·logitᵢ
        {
            let (policy, tokens, avail, analytic_raw) = loop {
                let (tokens, avail) = random_tokens(&mut rng, n, c);
                let token_tensor = tokens_to_tensor(&tokens)?;
                let mut policy = PolicyNet::new(config, td, &mut rng)?;
                randomize_zero_params(&mut policy.params_mut(), &mut rng);
                let probe: Vec<f64> = (0..n).map(|_| rng.open01() * 2.0 - 1.0).collect();
                let mut tape = Tape::new();
                let vars = policy.bind(&mut tape);
                let tok = tape.leaf(token_tensor);
                let logits = policy.logits_var(&mut tape, &vars, tok, &avail)?;
                let w = tape.leaf(Tensor::new(vec![1, n], probe.clone())?);
                let prod = tape.mul(logits, w)?;
                let loss = tape.sum(prod)?;
                if tape.relu_kink_margin() < KINK_MARGIN {
                    continue; // a kink inside the stencil would invalidate the oracle
                }
                tape.backward(loss)?;
                let analytic: Vec<f64> =
                    vars.order.iter().flat_map(|&id| tape.grad(id).unwrap().to_vec()).collect();
                break (policy, tokens, avail, (analytic, probe));
            };
            let (mut analytic, probe) = analytic_raw;
            if inject_bug && trial == 0 {
                analytic[0] += 0.75;
            }
            let token_tensor = tokens_to_tensor(&tokens)?;
            let loss_of = |net: &PolicyNet| -> f64 {
                let mut tape = Tape::new();
                let vars = net.bind(&mut tape);
                let tok = tape.leaf(token_tensor.clone());
                let logits = net.logits_var(&mut tape, &vars, tok, &avail).unwrap();
                let w = tape.leaf(Tensor::new(vec![1, n], probe.clone()).unwrap());
                let prod = tape.mul(logits, w).unwrap();
                let loss = tape.sum(prod).unwrap();
                tape.data(loss)[0]
            };
            let x0 = flatten(&policy.params());
            let numeric = gradcheck::central_difference(
                |flat| {
                    let mut net = policy.clone();
                    assign(&mut net.params_mut(), flat);
                    loss_of(&net)
                },
                &x0,
                gradcheck::DEFAULT_STEP,
            );
            let err = gradcheck::max_relative_error(&analytic, &numeric);
            if err > worst {
                worst = err;
                worst_at = format!("policy trial {trial} ({:?})", config.arch);
            }
        }

        // predictor: cross-entropy loss
        for pooling in [PoolingMode::MaskedMean, PoolingMode::AttentionPool] {
            let (predictor, tokens, avail, label, analytic) = loop {
                let (tokens, avail) = random_tokens(&mut rng, n, c);
                let token_tensor = tokens_to_tensor(&tokens)?;
                let mut predictor = PredictorNet::new(config, td, classes, pooling, &mut rng)?;
                randomize_zero_params(&mut predictor.params_mut(), &mut rng);
                let label = rng.below(classes);
                let weights: Vec<f64> = tokens.iter().map(|t| t.mask_bit).collect();
                let mut tape = Tape::new();
                let vars = predictor.bind(&mut tape);
                let tok = tape.leaf(token_tensor);
                let wv = tape.leaf(Tensor::new(vec![1, n], weights)?);
                let logits = predictor.logits_var(&mut tape, &vars, tok, &avail, Some(wv))?;
                let loss = tape.cross_entropy(logits, &[label])?;
                if tape.relu_kink_margin() < KINK_MARGIN {
                    continue;
                }
                tape.backward(loss)?;
                let analytic: Vec<f64> =
                    vars.order.iter().flat_map(|&id| tape.grad(id).unwrap().to_vec()).collect();
                break (predictor, tokens, avail, label, analytic);
            };
            let token_tensor = tokens_to_tensor(&tokens)?;
            let weights: Vec<f64> = tokens.iter().map(|t| t.mask_bit).collect();
            let loss_of = |net: &PredictorNet| -> f64 {
                let mut tape = Tape::new();
                let vars = net.bind(&mut tape);
                let tok = tape.leaf(token_tensor.clone());
                let wv = tape.leaf(Tensor::new(vec![1, n], weights.clone()).unwrap());
                let logits = net
                    .logits_var(&mut tape, &vars, tok, &avail, Some(wv))
                    .unwrap();
                let loss = tape.cross_entropy(logits, &[label]).unwrap();
                tape.data(loss)[0]
            };
            let x0 = flatten(&predictor.params());
            let numeric = gradcheck::central_difference(
                |flat| {
                    let mut net = predictor.clone();
                    assign(&mut net.params_mut(), flat);
                    loss_of(&net)
                },
                &x0,
                gradcheck::DEFAULT_STEP,
            );
            let err = gradcheck::max_relative_error(&analytic, &numeric);
            if err > worst {
                worst = err;
                worst_at = format!("predictor trial {trial} ({:?}, {:?})", config.arch, pooling);
            }
        }
    }
    Ok(CheckReport::new(
        "gradient-suite",
        worst < 1e-4,
        format!("max relative error {worst:.3e} ({worst_at}) over {n_nets} nets"),
    ))
}

/// A relu kink closer than this to zero on the forward pass invalidates the
/// central-difference oracle (h = 1e-4 would straddle it); such draws are
/// skipped and redrawn.
const KINK_MARGIN: f64 = 2e-3;

/// Empirical argmax frequencies of G + (0, ln2, ln3) over 10⁵ draws must
/// match softmax(α) = (1/6, 2/6, 3/6) within ±0.01 per coordinate.
pub fn gumbel_frequency_check(seed: u64) -> CheckReport {
    let alpha = [0.0, 2.0f64.ln(), 3.0f64.ln()];
    let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let trials = 100_000;
    let mut rng = Rng::new(seed);
    let mut counts = [0usize; 3];
    for _ in 0..trials {
        let g = concrete::sample_gumbel(3, &mut rng);
        let scores: Vec<f64> = alpha.iter().zip(&g).map(|(a, b)| a + b).collect();
        counts[concrete::argmax_valid(&scores, &[true; 3]).unwrap()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let max_dev = freqs
        .iter()
        .zip(want)
        .map(|(f, w)| (f - w).abs())
        .fold(0.0, f64::max);
    CheckReport::new(
        "gumbel-max-frequency",
        max_dev < 0.01,
        format!("frequencies {freqs:?} vs (1/6, 2/6, 3/6), max deviation {max_dev:.4}"),
    )
}

/// Policy equivariance and predictor invariance over `n_pairs` random
/// (instance, permutation) pairs at tolerance 1e-5.
pub fn permutation_suite(n_pairs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for trial in 0..n_pairs {
        let config = trial_config(trial);
        let c = 2;
        let td = token_dim(1, c);
        let n = 3 + trial % 8;
        let classes = 2 + trial % 3;
        let mut policy = PolicyNet::new(config, td, &mut rng)?;
        randomize_zero_params(&mut policy.params_mut(), &mut rng);
        let pooling = if trial % 2 == 0 {
            PoolingMode::AttentionPool
        } else {
            PoolingMode::MaskedMean
        };
        let mut predictor = PredictorNet::new(config, td, classes, pooling, &mut rng)?;
        randomize_zero_params(&mut predictor.params_mut(), &mut rng);

        let (tokens, avail) = random_tokens(&mut rng, n, c);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<FeatureToken> = perm.iter().map(|&i| tokens[i].clone()).collect();

        let selected = vec![false; n];
        let base = policy.logits(&tokens, &avail, &selected)?;
        let plog = policy.logits(&permuted, &avail, &selected)?;
        for (slot, &src) in perm.iter().enumerate() {
            worst = worst.max((plog[slot] - base[src]).abs());
        }

        let pbase = predictor.predict(&tokens, &avail)?;
        let pperm = predictor.predict(&permuted, &avail)?;
        for (a, b) in pbase.iter().zip(&pperm) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckReport::new(
        "permutation-contract",
        worst < 1e-5,
        format!("max |Δ| {worst:.3e} over {n_pairs} (instance, permutation) pairs"),
    ))
}

/// All suites at their acceptance sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        gradient_suite(20, seed)?,
        gumbel_frequency_check(seed.wrapping_add(1)),
        permutation_suite(100, seed.wrapping_add(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_on_small_sample() {
        let report = gradient_suite(4, 123).unwrap();
        assert!(report.passed, "{}", report.detail);
    }

    #[test]
    fn injected_gradient_bug_is_detected() {
        let report = gradient_suite_impl(1, 123, true).unwrap();
        assert!(!report.passed, "bug injection must fail the suite");
    }

    #[test]
    fn gumbel_and_permutation_pass() {
        assert!(gumbel_frequency_check(5).passed);
        let report = permutation_suite(10, 6).unwrap();
        assert!(report.passed, "{}", report.detail);
    }
}
