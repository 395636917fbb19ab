//! Exact discrete naive-Bayes reference: posterior and conditional mutual
//! information by enumeration, the greedy CMI selector, and agreement
//! measurement between an arbitrary selection policy and the exact greedy
//! choice. All information quantities are in nats.

use std::fmt::Write as _;
use std::path::Path;

use crate::concrete::Rng;
use crate::error::{CoreError, Result};

const SIMPLEX_TOL: f64 = 1e-12;

/// One feature of the generative model: descriptor, value arity, and the
/// K×V row-stochastic table p(x = v | y).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeature {
    pub descriptor: Vec<f64>,
    pub arity: usize,
    /// Row-major [n_classes × arity].
    pub table: Vec<f64>,
}

impl OracleFeature {
    pub fn prob(&self, class: usize, value: usize) -> f64 {
        self.table[class * self.arity + value]
    }
}

/// Exact generative model p(y)·Π p(x_λ | y, z_λ). Conditional tables are a
/// deterministic function of the descriptors when built via
/// [`NaiveBayesSpec::from_descriptors`].
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayesSpec {
    pub n_classes: usize,
    pub prior: Vec<f64>,
    pub features: Vec<OracleFeature>,
}

/// Revealed evidence: distinct feature indices with observed values.
pub type Revealed = [(usize, usize)];

/// A sample from the model: the hidden label and every feature value.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub label: usize,
    pub values: Vec<usize>,
}

impl NaiveBayesSpec {
    pub fn new(n_classes: usize, prior: Vec<f64>, features: Vec<OracleFeature>) -> Result<Self> {
        let spec = NaiveBayesSpec { n_classes, prior, features };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prior.len() != self.n_classes || self.n_classes == 0 {
            return Err(CoreError::Config("prior length must equal class count".into()));
        }
        if self.prior.iter().any(|&p| p < 0.0)
            || (self.prior.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(CoreError::Config("prior must be a simplex vector".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.arity < 2 || f.table.len() != self.n_classes * f.arity {
                return Err(CoreError::Config(format!("feature {i}: bad table shape")));
            }
            for c in 0..self.n_classes {
                let row = &f.table[c * f.arity..(c + 1) * f.arity];
                if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
                {
                    return Err(CoreError::Config(format!(
                        "feature {i}: conditional row {c} is not a distribution"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Build binary-feature tables from 2-d descriptors: z[0] selects which
    /// class pair the feature discriminates, z[1] in [0,1] its sharpness.
    /// The pair's classes get p(x=1|y) = 0.5 ± 0.45·z[1]; all others 0.5,
    /// so a descriptor fully characterizes its feature's distribution.
    pub fn from_descriptors(
        n_classes: usize,
        prior: Vec<f64>,
        descriptors: &[[f64; 2]],
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(CoreError::Config("need at least two classes".into()));
        }
        let pairs: Vec<(usize, usize)> = (0..n_classes)
            .flat_map(|a| ((a + 1)..n_classes).map(move |b| (a, b)))
            .collect();
        let features = descriptors
            .iter()
            .map(|z| {
                let idx = ((z[0].clamp(0.0, 1.0) * pairs.len() as f64) as usize).min(pairs.len() - 1);
                let (a, b) = pairs[idx];
                let sharp = 0.45 * z[1].clamp(0.0, 1.0);
                let mut table = Vec::with_capacity(n_classes * 2);
                for c in 0..n_classes {
                    let p1 = if c == a {
                        0.5 + sharp
                    } else if c == b {
                        0.5 - sharp
                    } else {
                        0.5
                    };
                    table.push(1.0 - p1);
                    table.push(p1);
                }
                OracleFeature { descriptor: z.to_vec(), arity: 2, table }
            })
            .collect();
        NaiveBayesSpec::new(n_classes, prior, features)
    }

    /// Uniform prior, uniformly random descriptors.
    pub fn random(n_classes: usize, n_features: usize, rng: &mut Rng) -> Result<Self> {
        let prior = vec![1.0 / n_classes as f64; n_classes];
        let descriptors: Vec<[f64; 2]> =
            (0..n_features).map(|_| [rng.open01(), rng.open01()]).collect();
        NaiveBayesSpec::from_descriptors(n_classes, prior, &descriptors)
    }

    // ── serialization (plain text, round-trip exact) ────────────────

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "vardfs-nb 1").unwrap();
        writeln!(s, "classes {}", self.n_classes).unwrap();
        write!(s, "prior").unwrap();
        for p in &self.prior {
            write!(s, " {p:.17e}").unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "features {}", self.features.len()).unwrap();
        for (i, f) in self.features.iter().enumerate() {
            write!(s, "feature {i} arity {} descriptor", f.arity).unwrap();
            for z in &f.descriptor {
                write!(s, " {z:.17e}").unwrap();
            }
            writeln!(s).unwrap();
            for c in 0..self.n_classes {
                write!(s, "row").unwrap();
                for v in 0..f.arity {
                    write!(s, " {:.17e}", f.prob(c, v)).unwrap();
                }
                writeln!(s).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
            for (ln, raw) in lines.by_ref() {
                let t = raw.trim();
                if !t.is_empty() {
                    return Ok((ln + 1, t.split_whitespace().map(String::from).collect()));
                }
            }
            Err(CoreError::Format(format!("unexpected end of file, wanted {what}")))
        };
        let (ln, header) = next("header")?;
        if header != ["vardfs-nb", "1"] {
            return Err(CoreError::Format(format!("line {ln}: bad header")));
        }
        let parse_usize = |ln: usize, s: &str| -> Result<usize> {
            s.parse().map_err(|_| CoreError::Format(format!("line {ln}: bad integer {s:?}")))
        };
        let parse_f64 = |ln: usize, s: &str| -> Result<f64> {
            s.parse().map_err(|_| CoreError::Format(format!("line {ln}: bad number {s:?}")))
        };
        let (ln, tok) = next("classes")?;
        if tok.len() != 2 || tok[0] != "classes" {
            return Err(CoreError::Format(format!("line {ln}: expected classes")));
        }
        let n_classes = parse_usize(ln, &tok[1])?;
        let (ln, tok) = next("prior")?;
        if tok.first().map(String::as_str) != Some("prior") {
            return Err(CoreError::Format(format!("line {ln}: expected prior")));
        }
        let prior = tok[1..].iter().map(|s| parse_f64(ln, s)).collect::<Result<Vec<_>>>()?;
        let (ln, tok) = next("features")?;
        if tok.len() != 2 || tok[0] != "features" {
            return Err(CoreError::Format(format!("line {ln}: expected features")));
        }
        let n_features = parse_usize(ln, &tok[1])?;
        let mut features = Vec::with_capacity(n_features);
        for i in 0..n_features {
            let (ln, tok) = next("feature")?;
            if tok.len() < 5 || tok[0] != "feature" || tok[2] != "arity" || tok[4] != "descriptor" {
                return Err(CoreError::Format(format!("line {ln}: expected feature {i}")));
            }
            let arity = parse_usize(ln, &tok[3])?;
            let descriptor =
                tok[5..].iter().map(|s| parse_f64(ln, s)).collect::<Result<Vec<_>>>()?;
            let mut table = Vec::with_capacity(n_classes * arity);
            for _ in 0..n_classes {
                let (ln, tok) = next("row")?;
                if tok.first().map(String::as_str) != Some("row") || tok.len() != arity + 1 {
                    return Err(CoreError::Format(format!("line {ln}: expected row of {arity}")));
                }
                for s in &tok[1..] {
                    table.push(parse_f64(ln, s)?);
                }
            }
            features.push(OracleFeature { descriptor, arity, table });
        }
        NaiveBayesSpec::new(n_classes, prior, features)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// y ~ prior, then each value independently from its class-conditional row.
pub fn sample_instance(spec: &NaiveBayesSpec, rng: &mut Rng) -> OracleInstance {
    let label = sample_categorical(&spec.prior, rng);
    let values = spec
        .features
        .iter()
        .map(|f| sample_categorical(&f.table[label * f.arity..(label + 1) * f.arity], rng))
        .collect();
    OracleInstance { label, values }
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.open01();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_revealed(spec: &NaiveBayesSpec, revealed: &Revealed) -> Result<()> {
    let mut seen = vec![false; spec.n_features()];
    for &(idx, val) in revealed {
        if idx >= spec.n_features() {
            return Err(CoreError::Argument(format!("feature index {idx} out of range")));
        }
        if val >= spec.features[idx].arity {
            return Err(CoreError::Argument(format!("value {val} out of arity for feature {idx}")));
        }
        if seen[idx] {
            return Err(CoreError::Argument(format!("feature {idx} revealed twice")));
        }
        seen[idx] = true;
    }
    Ok(())
}

/// Exact posterior p(y | x_s) ∝ p(y)·Π p(x_λ = v | y).
pub fn posterior(spec: &NaiveBayesSpec, revealed: &Revealed) -> Result<Vec<f64>> {
    check_revealed(spec, revealed)?;
    let mut post = spec.prior.clone();
    for &(idx, val) in revealed {
        let f = &spec.features[idx];
        for (c, p) in post.iter_mut().enumerate() {
            *p *= f.prob(c, val);
        }
    }
    let total: f64 = post.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::InconsistentEvidence);
    }
    for p in &mut post {
        *p /= total;
    }
    Ok(post)
}

/// Exact I(y; x_λ | x_s) at the observed conditioning set, by enumeration
/// over (class, value): Σ p(v,y|x_s) · ln [ p(v,y|x_s) / (p(v|x_s)·p(y|x_s)) ].
pub fn cmi(spec: &NaiveBayesSpec, revealed: &Revealed, candidate: usize) -> Result<f64> {
    if candidate >= spec.n_features() {
        return Err(CoreError::Argument(format!("candidate {candidate} out of range")));
    }
    if revealed.iter().any(|&(idx, _)| idx == candidate) {
        return Err(CoreError::Argument(format!("candidate {candidate} already revealed")));
    }
    let post = posterior(spec, revealed)?;
    let f = &spec.features[candidate];
    let mut info = 0.0;
    for v in 0..f.arity {
        let pv: f64 = (0..spec.n_classes).map(|c| post[c] * f.prob(c, v)).sum();
        if pv == 0.0 {
            continue;
        }
        for (c, &py) in post.iter().enumerate() {
            let joint = py * f.prob(c, v);
            if joint > 0.0 {
                info += joint * (joint / (pv * py)).ln();
            }
        }
    }
    Ok(info)
}

/// Shannon entropy in nats with the 0·ln 0 = 0 convention.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Argmax of [`cmi`] over unrevealed candidates; ties go to the lowest index.
pub fn greedy_oracle_select(spec: &NaiveBayesSpec, revealed: &Revealed) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for idx in 0..spec.n_features() {
        if revealed.iter().any(|&(r, _)| r == idx) {
            continue;
        }
        let value = cmi(spec, revealed, idx)?;
        if best.map_or(true, |(_, bv)| value > bv) {
            best = Some((idx, value));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| CoreError::Argument("no unrevealed feature remains".into()))
}

/// Everything a selection policy may look at during an agreement trial.
pub struct TrialView<'a> {
    pub spec: &'a NaiveBayesSpec,
    pub instance: &'a OracleInstance,
    pub revealed: &'a [(usize, usize)],
}

/// Fraction of trials, per step, where `pick` matches the exact greedy choice
/// while both follow the oracle's reveal trajectory. `make_spec` supplies the
/// generative model per trial (a fixed spec or per-trial descriptors).
pub fn agreement_per_spec<P, G>(
    mut pick: P,
    mut make_spec: G,
    n_trials: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    P: FnMut(&TrialView) -> usize,
    G: FnMut(&mut Rng) -> Result<NaiveBayesSpec>,
{
    let mut matches = vec![0usize; steps];
    for _ in 0..n_trials {
        let spec = make_spec(rng)?;
        let instance = sample_instance(&spec, rng);
        let mut revealed: Vec<(usize, usize)> = Vec::with_capacity(steps);
        for step_matches in matches.iter_mut().take(steps) {
            let oracle_pick = greedy_oracle_select(&spec, &revealed)?;
            let view = TrialView { spec: &spec, instance: &instance, revealed: &revealed };
            if pick(&view) == oracle_pick {
                *step_matches += 1;
            }
            revealed.push((oracle_pick, instance.values[oracle_pick]));
        }
    }
    Ok(matches.into_iter().map(|m| m as f64 / n_trials as f64).collect())
}

/// The learned policy's pick for an agreement trial: encode the revealed
/// values as hard tokens over the spec's descriptors and take the argmax of
/// the masked logits.
pub fn policy_pick(
    policy: &crate::setmodel::PolicyNet,
    view: &TrialView,
) -> Result<usize> {
    let d = view.spec.n_features();
    let mut mask = vec![0.0; d];
    for &(i, _) in view.revealed {
        mask[i] = 1.0;
    }
    let tokens: Vec<crate::setmodel::FeatureToken> = (0..d)
        .map(|i| {
            crate::setmodel::FeatureToken::new(
                &[view.instance.values[i] as f64],
                mask[i],
                &view.spec.features[i].descriptor,
            )
        })
        .collect();
    let avail = vec![true; d];
    let selected: Vec<bool> = mask.iter().map(|&m| m == 1.0).collect();
    let logits = policy.logits(&tokens, &avail, &selected)?;
    let selectable: Vec<bool> = selected.iter().map(|&s| !s).collect();
    crate::concrete::argmax_valid(&logits, &selectable).ok_or(CoreError::ExhaustedBudget)
}

/// [`agreement_per_spec`] against one fixed spec.
pub fn agreement<P>(
    pick: P,
    spec: &NaiveBayesSpec,
    n_trials: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    P: FnMut(&TrialView) -> usize,
{
    agreement_per_spec(pick, |_| Ok(spec.clone()), n_trials, steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute-force oracle: materialize the full joint table
    /// p(y, x_1..x_d), condition by filtering, and compute the conditional
    /// mutual information directly from marginalized cell masses.
    fn brute_force_cmi(spec: &NaiveBayesSpec, revealed: &Revealed, candidate: usize) -> f64 {
        let d = spec.n_features();
        let mut assignments = vec![0usize; d];
        let mut cells: Vec<(usize, Vec<usize>, f64)> = Vec::new();
        loop {
            for y in 0..spec.n_classes {
                let mut p = spec.prior[y];
                for (i, &v) in assignments.iter().enumerate() {
                    p *= spec.features[i].prob(y, v);
                }
                cells.push((y, assignments.clone(), p));
            }
            let mut carry = 0;
            loop {
                if carry == d {
                    break;
                }
                assignments[carry] += 1;
                if assignments[carry] < spec.features[carry].arity {
                    break;
                }
                assignments[carry] = 0;
                carry += 1;
            }
            if carry == d {
                break;
            }
        }
        // condition on the revealed values
        let consistent: Vec<&(usize, Vec<usize>, f64)> = cells
            .iter()
            .filter(|(_, xs, _)| revealed.iter().all(|&(i, v)| xs[i] == v))
            .collect();
        let z: f64 = consistent.iter().map(|(_, _, p)| p).sum();
        let arity = spec.features[candidate].arity;
        let mut joint = vec![0.0; spec.n_classes * arity];
        for (y, xs, p) in consistent {
            joint[y * arity + xs[candidate]] += p / z;
        }
        let mut py = vec![0.0; spec.n_classes];
        let mut pv = vec![0.0; arity];
        for y in 0..spec.n_classes {
            for v in 0..arity {
                py[y] += joint[y * arity + v];
                pv[v] += joint[y * arity + v];
            }
        }
        let mut info = 0.0;
        for y in 0..spec.n_classes {
            for v in 0..arity {
                let j = joint[y * arity + v];
                if j > 0.0 {
                    info += j * (j / (py[y] * pv[v])).ln();
                }
            }
        }
        info
    }

    fn two_class_binary() -> NaiveBayesSpec {
        NaiveBayesSpec::new(
            2,
            vec![0.5, 0.5],
            vec![OracleFeature {
                descriptor: vec![0.0, 1.0],
                arity: 2,
                table: vec![0.1, 0.9, 0.9, 0.1],
            }],
        )
        .unwrap()
    }

    #[test]
    fn sampling_respects_degenerate_prior_and_tables() {
        let spec = NaiveBayesSpec::new(
            2,
            vec![1.0, 0.0],
            vec![OracleFeature {
                descriptor: vec![0.0, 0.0],
                arity: 2,
                table: vec![0.0, 1.0, 1.0, 0.0],
            }],
        )
        .unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let inst = sample_instance(&spec, &mut rng);
            assert_eq!(inst.label, 0);
            assert_eq!(inst.values[0], 1); // forced by the one-hot row
        }
    }

    #[test]
    fn label_frequencies_match_prior() {
        let spec = NaiveBayesSpec::from_descriptors(
            3,
            vec![0.5, 0.3, 0.2],
            &[[0.1, 0.5], [0.9, 0.9]],
        )
        .unwrap();
        let mut rng = Rng::new(11);
        let trials = 100_000;
        let mut counts = vec![0usize; 3];
        for _ in 0..trials {
            counts[sample_instance(&spec, &mut rng).label] += 1;
        }
        for (c, &p) in counts.iter().zip(&spec.prior) {
            assert!((*c as f64 / trials as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn posterior_prior_uninformative_and_bayes_by_hand() {
        let spec = two_class_binary();
        assert_eq!(posterior(&spec, &[]).unwrap(), spec.prior);

        let mut uninf = spec.clone();
        uninf.features.push(OracleFeature {
            descriptor: vec![0.0, 0.0],
            arity: 2,
            table: vec![0.7, 0.3, 0.7, 0.3],
        });
        let post = posterior(&uninf, &[(1, 1)]).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-15 && (post[1] - 0.5).abs() < 1e-15);

        // p(x=1|y0)=0.9, p(x=1|y1)=0.1, uniform prior, observe x=1 → (0.9, 0.1)
        let spec = NaiveBayesSpec::new(
            2,
            vec![0.5, 0.5],
            vec![OracleFeature {
                descriptor: vec![0.0, 1.0],
                arity: 2,
                table: vec![0.1, 0.9, 0.9, 0.1],
            }],
        )
        .unwrap();
        let post = posterior(&spec, &[(0, 1)]).unwrap();
        assert!((post[0] - 0.9).abs() < 1e-12 && (post[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn impossible_evidence_is_an_error() {
        let spec = NaiveBayesSpec::new(
            2,
            vec![0.5, 0.5],
            vec![OracleFeature {
                descriptor: vec![0.0, 0.0],
                arity: 2,
                table: vec![1.0, 0.0, 1.0, 0.0],
            }],
        )
        .unwrap();
        assert!(matches!(
            posterior(&spec, &[(0, 1)]),
            Err(CoreError::InconsistentEvidence)
        ));
    }

    #[test]
    fn cmi_uninformative_and_point_mass_are_zero() {
        let mut spec = two_class_binary();
        spec.features.push(OracleFeature {
            descriptor: vec![0.0, 0.0],
            arity: 2,
            table: vec![0.6, 0.4, 0.6, 0.4],
        });
        assert!(cmi(&spec, &[], 1).unwrap().abs() < 1e-12);

        // point-mass posterior: a fully deterministic feature reveals y
        let spec = NaiveBayesSpec::new(
            2,
            vec![0.5, 0.5],
            vec![
                OracleFeature {
                    descriptor: vec![0.0, 1.0],
                    arity: 2,
                    table: vec![1.0, 0.0, 0.0, 1.0],
                },
                OracleFeature {
                    descriptor: vec![0.5, 0.5],
                    arity: 2,
                    table: vec![0.3, 0.7, 0.8, 0.2],
                },
            ],
        )
        .unwrap();
        let val = cmi(&spec, &[(0, 0)], 1).unwrap();
        assert!(val.abs() < 1e-12, "point-mass posterior leaves no information: {val}");
    }

    #[test]
    fn cmi_matches_brute_force_on_the_hand_case() {
        let spec = NaiveBayesSpec::new(
            2,
            vec![0.5, 0.5],
            vec![OracleFeature {
                descriptor: vec![0.0, 1.0],
                arity: 2,
                table: vec![0.1, 0.9, 0.9, 0.1],
            }],
        )
        .unwrap();
        let fast = cmi(&spec, &[], 0).unwrap();
        let brute = brute_force_cmi(&spec, &[], 0);
        assert!((fast - brute).abs() < 1e-14);
        // ln 2 − H_b(0.9): binary symmetric channel information
        let expected = 2f64.ln() - (-(0.9f64.ln()) * 0.9 - 0.1f64.ln() * 0.1);
        assert!((fast - expected).abs() < 1e-12);
        assert!((fast - 0.368).abs() < 5e-4, "≈0.368 nats, got {fast}");
    }

    #[test]
    fn cmi_matches_brute_force_on_random_specs() {
        let mut rng = Rng::new(31);
        for trial in 0..30 {
            let spec = NaiveBayesSpec::random(2 + trial % 3, 4, &mut rng).unwrap();
            let inst = sample_instance(&spec, &mut rng);
            let revealed = [(0, inst.values[0]), (2, inst.values[2])];
            for cand in [1usize, 3] {
                let fast = cmi(&spec, &revealed, cand).unwrap();
                let brute = brute_force_cmi(&spec, &revealed, cand);
                assert!(
                    (fast - brute).abs() < 1e-12,
                    "trial {trial} cand {cand}: {fast} vs {brute}"
                );
                assert!(fast >= -1e-12);
            }
        }
    }

    #[test]
    fn cmi_rejects_revealed_candidate() {
        let spec = two_class_binary();
        assert!(matches!(cmi(&spec, &[(0, 1)], 0), Err(CoreError::Argument(_))));
    }

    #[test]
    fn greedy_picks_informative_sharpest_and_breaks_ties_low() {
        // one informative among uninformative
        let spec = NaiveBayesSpec::from_descriptors(
            2,
            vec![0.5, 0.5],
            &[[0.0, 0.0], [0.0, 0.9], [0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(greedy_oracle_select(&spec, &[]).unwrap(), 1);

        // identical informative features → lowest index
        let spec =
            NaiveBayesSpec::from_descriptors(2, vec![0.5, 0.5], &[[0.0, 0.7], [0.0, 0.7]]).unwrap();
        assert_eq!(greedy_oracle_select(&spec, &[]).unwrap(), 0);

        // graded sharpness → sharpest wins; cross-check the full CMI table
        let descriptors: Vec<[f64; 2]> = (0..5).map(|i| [0.0, 0.1 + 0.18 * i as f64]).collect();
        let spec = NaiveBayesSpec::from_descriptors(2, vec![0.5, 0.5], &descriptors).unwrap();
        let table: Vec<f64> =
            (0..5).map(|i| brute_force_cmi(&spec, &[], i)).collect();
        let best = table
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 4);
        assert_eq!(greedy_oracle_select(&spec, &[]).unwrap(), 4);
    }

    #[test]
    fn greedy_is_permutation_covariant() {
        let mut rng = Rng::new(17);
        let spec = NaiveBayesSpec::random(3, 6, &mut rng).unwrap();
        let pick = greedy_oracle_select(&spec, &[]).unwrap();
        // rotate features by two positions
        let mut rotated = spec.clone();
        rotated.features.rotate_left(2);
        let rpick = greedy_oracle_select(&rotated, &[]).unwrap();
        assert_eq!((pick + 6 - 2) % 6, rpick);
    }

    #[test]
    fn chain_rule_consistency_of_posteriors() {
        let mut rng = Rng::new(23);
        for _ in 0..50 {
            let spec = NaiveBayesSpec::random(4, 6, &mut rng).unwrap();
            let inst = sample_instance(&spec, &mut rng);
            let s: Vec<(usize, usize)> = vec![(1, inst.values[1]), (4, inst.values[4])];
            let base = posterior(&spec, &s).unwrap();
            let lam = 2usize;
            let v = inst.values[lam];
            // single-step Bayes update of the running posterior
            let f = &spec.features[lam];
            let mut manual: Vec<f64> =
                base.iter().enumerate().map(|(c, &p)| p * f.prob(c, v)).collect();
            let z: f64 = manual.iter().sum();
            for p in &mut manual {
                *p /= z;
            }
            let mut s2 = s.clone();
            s2.push((lam, v));
            let direct = posterior(&spec, &s2).unwrap();
            for (a, b) in manual.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn information_identity_entropy_drop_equals_cmi() {
        let mut rng = Rng::new(29);
        for _ in 0..100 {
            let spec = NaiveBayesSpec::random(3, 5, &mut rng).unwrap();
            let inst = sample_instance(&spec, &mut rng);
            let revealed: Vec<(usize, usize)> = vec![(0, inst.values[0])];
            let cand = 3usize;
            let post = posterior(&spec, &revealed).unwrap();
            let h_before = entropy(&post);
            let f = &spec.features[cand];
            let mut expected_after = 0.0;
            for v in 0..f.arity {
                let pv: f64 = (0..spec.n_classes).map(|c| post[c] * f.prob(c, v)).sum();
                if pv == 0.0 {
                    continue;
                }
                let mut ext = revealed.clone();
                ext.push((cand, v));
                expected_after += pv * entropy(&posterior(&spec, &ext).unwrap());
            }
            let info = cmi(&spec, &revealed, cand).unwrap();
            assert!(
                (h_before - expected_after - info).abs() < 1e-10,
                "identity violated: {} vs {}",
                h_before - expected_after,
                info
            );
        }
    }

    #[test]
    fn agreement_oracle_policy_is_perfect_and_random_is_chance() {
        let mut rng = Rng::new(41);
        let spec = NaiveBayesSpec::random(4, 10, &mut rng).unwrap();
        let rates = agreement(
            |view| greedy_oracle_select(view.spec, view.revealed).unwrap(),
            &spec,
            50,
            3,
            &mut rng,
        )
        .unwrap();
        assert!(rates.iter().all(|&r| r == 1.0));

        let mut pick_rng = Rng::new(43);
        let rates = agreement(
            |view| {
                let remaining: Vec<usize> = (0..view.spec.n_features())
                    .filter(|i| !view.revealed.iter().any(|&(r, _)| r == *i))
                    .collect();
                remaining[pick_rng.below(remaining.len())]
            },
            &spec,
            4000,
            1,
            &mut rng,
        )
        .unwrap();
        assert!((rates[0] - 0.1).abs() < 0.02, "uniform policy ≈ 1/10, got {}", rates[0]);
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut rng = Rng::new(53);
        let spec = NaiveBayesSpec::random(4, 7, &mut rng).unwrap();
        let text = spec.to_text();
        let back = NaiveBayesSpec::from_text(&text).unwrap();
        assert_eq!(spec, back);
        assert!(NaiveBayesSpec::from_text("nonsense").is_err());
    }
}
