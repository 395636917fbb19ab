//! Set networks over feature tokens `[x·m, m, z]`: a permutation-equivariant
//! policy head producing per-feature logits and a permutation-invariant
//! predictor head producing a class distribution.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use encoder::{Linear, SetEncoder};

use crate::concrete::Rng;
use crate::diffcore::{Tape, Tensor, VarId};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderArch {
    #[serde(rename = "deepsets")]
    DeepSets,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    MaskedMean,
    AttentionPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SetEncoderConfig {
    pub arch: EncoderArch,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    /// Attention only; must divide hidden_dim.
    pub num_heads: usize,
}

impl SetEncoderConfig {
    pub fn deepsets(hidden_dim: usize, num_blocks: usize) -> Self {
        SetEncoderConfig { arch: EncoderArch::DeepSets, hidden_dim, num_blocks, num_heads: 1 }
    }

    pub fn attention(hidden_dim: usize, num_blocks: usize, num_heads: usize) -> Self {
        SetEncoderConfig { arch: EncoderArch::Attention, hidden_dim, num_blocks, num_heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_blocks == 0 {
            return Err(CoreError::Config("hidden_dim and num_blocks must be positive".into()));
        }
        if self.arch == EncoderArch::Attention
            && (self.num_heads == 0 || self.hidden_dim % self.num_heads != 0)
        {
            return Err(CoreError::Config(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.num_heads, self.hidden_dim
            )));
        }
        Ok(())
    }
}

impl Default for SetEncoderConfig {
    fn default() -> Self {
        SetEncoderConfig::attention(64, 2, 4)
    }
}

/// One feature's network input: the mask-gated value (zero while hidden),
/// the mask bit itself, and the feature descriptor. The mask bit
/// disambiguates "unrevealed" from "revealed value 0".
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureToken {
    pub masked_value: Vec<f64>,
    pub mask_bit: f64,
    pub descriptor: Vec<f64>,
}

impl FeatureToken {
    /// Token for a feature with raw value(s) `value` under mask bit `m`.
    pub fn new(value: &[f64], m: f64, descriptor: &[f64]) -> Self {
        FeatureToken {
            masked_value: value.iter().map(|v| v * m).collect(),
            mask_bit: m,
            descriptor: descriptor.to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.masked_value.len() + 1 + self.descriptor.len()
    }

    pub fn write_row(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.masked_value);
        out.push(self.mask_bit);
        out.extend_from_slice(&self.descriptor);
    }
}

pub fn token_dim(value_dim: usize, descriptor_dim: usize) -> usize {
    value_dim + 1 + descriptor_dim
}

/// Stack single-instance tokens into a [1, n, width] tensor.
pub fn tokens_to_tensor(tokens: &[FeatureToken]) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(CoreError::DegenerateInstance);
    }
    let width = tokens[0].width();
    let mut data = Vec::with_capacity(tokens.len() * width);
    for t in tokens {
        if t.width() != width {
            return Err(CoreError::ShapeMismatch {
                op: "tokens_to_tensor",
                lhs: vec![width],
                rhs: vec![t.width()],
            });
        }
        t.write_row(&mut data);
    }
    Tensor::new(vec![1, tokens.len(), width], data)
}

/// Mask source for differentiable token assembly.
pub enum MaskVar<'a> {
    /// Hard bits, constant on the tape.
    Hard(&'a [f64]),
    /// Relaxed bits already recorded on the tape, shape [b, n].
    Relaxed(VarId),
}

/// Assemble `[value·m, m, z]` tokens on the tape so gradients can flow from
/// the loss back into a relaxed mask. `values` is [b, n, value_dim] and
/// `descriptors` [b, n, c], both constants.
pub fn batch_token_var(
    tape: &mut Tape,
    values: &Tensor,
    descriptors: &Tensor,
    mask: MaskVar,
) -> Result<VarId> {
    let vsh = values.shape().to_vec();
    let dsh = descriptors.shape().to_vec();
    if vsh.len() != 3 || dsh.len() != 3 || vsh[0] != dsh[0] || vsh[1] != dsh[1] {
        return Err(CoreError::ShapeMismatch { op: "batch_token_var", lhs: vsh, rhs: dsh });
    }
    let (b, n) = (vsh[0], vsh[1]);
    let mask_id = match mask {
        MaskVar::Hard(bits) => tape.leaf_from(vec![b, n], bits.to_vec())?,
        MaskVar::Relaxed(id) => {
            if tape.shape(id) != [b, n] {
                return Err(CoreError::ShapeMismatch {
                    op: "batch_token_var",
                    lhs: tape.shape(id).to_vec(),
                    rhs: vec![b, n],
                });
            }
            id
        }
    };
    let mask3 = tape.reshape(mask_id, vec![b, n, 1])?;
    let vals = tape.leaf(values.clone());
    let masked = tape.mul(vals, mask3)?;
    let desc = tape.leaf(descriptors.clone());
    tape.concat_last(&[masked, mask3, desc])
}

// ── policy ──────────────────────────────────────────────────────────

/// Equivariant encoder plus a shared per-position scalar head.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub encoder: SetEncoder,
    pub head: Linear,
}

pub struct PolicyVars {
    encoder: encoder::EncoderVars,
    head: encoder::LinearVars,
    pub order: Vec<VarId>,
}

impl PolicyNet {
    pub fn new(config: SetEncoderConfig, token_dim: usize, rng: &mut Rng) -> Result<Self> {
        let encoder = SetEncoder::new(config, token_dim, rng)?;
        let head = Linear::zeros(config.hidden_dim, 1);
        Ok(PolicyNet { encoder, head })
    }

    pub fn bind(&self, tape: &mut Tape) -> PolicyVars {
        let mut order = Vec::new();
        let encoder = self.encoder.bind(tape, &mut order);
        let head = self.head.bind(tape, &mut order);
        PolicyVars { encoder, head, order }
    }

    /// Raw per-position logits [b, n]; masking of unavailable or selected
    /// positions is applied by the caller's valid mask.
    pub fn logits_var(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        tokens: VarId,
        avail: &[bool],
    ) -> Result<VarId> {
        let enc = self.encoder.forward(tape, &vars.encoder, tokens, avail)?;
        let raw = Linear::forward(vars.head, tape, enc)?;
        let sh = tape.shape(raw).to_vec();
        tape.reshape(raw, vec![sh[0], sh[1]])
    }

    /// Single-instance logits with already-selected and unavailable positions
    /// forced to −∞. `selected` must be a subset of `avail`.
    pub fn logits(
        &self,
        tokens: &[FeatureToken],
        avail: &[bool],
        selected: &[bool],
    ) -> Result<Vec<f64>> {
        let n = tokens.len();
        if avail.len() != n || selected.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "policy_logits",
                lhs: vec![n],
                rhs: vec![avail.len(), selected.len()],
            });
        }
        if selected.iter().zip(avail).any(|(&s, &a)| s && !a) {
            return Err(CoreError::Argument("selected position is not available".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let t = tokens_to_tensor(tokens)?;
        let tok = tape.leaf(t);
        let raw = self.logits_var(&mut tape, &vars, tok, avail)?;
        let mut out = tape.data(raw).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            if !avail[i] || selected[i] {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.encoder.param_names("policy");
        out.push("policy.head.w".into());
        out.push("policy.head.b".into());
        out
    }
}

// ── predictor ───────────────────────────────────────────────────────

/// Invariant encoder pooled into a single vector, then a two-layer head
/// producing K class logits.
#[derive(Debug, Clone)]
pub struct PredictorNet {
    pub encoder: SetEncoder,
    pub pooling: PoolingMode,
    pub n_classes: usize,
    /// Attention-pool query; present only in that mode.
    query: Option<Tensor>,
    head_hidden: Linear,
    head_out: Linear,
}

pub struct PredictorVars {
    encoder: encoder::EncoderVars,
    query: Option<VarId>,
    head_hidden: encoder::LinearVars,
    head_out: encoder::LinearVars,
    pub order: Vec<VarId>,
}

impl PredictorNet {
    pub fn new(
        config: SetEncoderConfig,
        token_dim: usize,
        n_classes: usize,
        pooling: PoolingMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(CoreError::Config("need at least two classes".into()));
        }
        let encoder = SetEncoder::new(config, token_dim, rng)?;
        let h = config.hidden_dim;
        let query = match pooling {
            PoolingMode::AttentionPool => {
                Some(Tensor::uniform_init(vec![h, 1], (1.0 / h as f64).sqrt(), rng).trainable())
            }
            PoolingMode::MaskedMean => None,
        };
        Ok(PredictorNet {
            encoder,
            pooling,
            n_classes,
            query,
            head_hidden: Linear::new(h, h, rng),
            head_out: Linear::zeros(h, n_classes),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> PredictorVars {
        let mut order = Vec::new();
        let encoder = self.encoder.bind(tape, &mut order);
        let query = self.query.as_ref().map(|q| {
            let id = tape.param(q);
            order.push(id);
            id
        });
        let head_hidden = self.head_hidden.bind(tape, &mut order);
        let head_out = self.head_out.bind(tape, &mut order);
        PredictorVars { encoder, query, head_hidden, head_out, order }
    }

    /// Class logits [b, K]. In masked-mean mode `mask_weights` carries the
    /// (possibly relaxed) mask bits [b, n]; rows whose weights sum to zero
    /// fall back to an unweighted mean over available tokens.
    pub fn logits_var(
        &self,
        tape: &mut Tape,
        vars: &PredictorVars,
        tokens: VarId,
        avail: &[bool],
        mask_weights: Option<VarId>,
    ) -> Result<VarId> {
        let enc = self.encoder.forward(tape, &vars.encoder, tokens, avail)?;
        let sh = tape.shape(enc).to_vec();
        let (b, n) = (sh[0], sh[1]);
        let pooled = match self.pooling {
            PoolingMode::MaskedMean => {
                let w = mask_weights.ok_or_else(|| {
                    CoreError::Argument("masked-mean pooling needs mask weights".into())
                })?;
                if tape.shape(w) != [b, n] {
                    return Err(CoreError::ShapeMismatch {
                        op: "predict",
                        lhs: tape.shape(w).to_vec(),
                        rhs: vec![b, n],
                    });
                }
                // rows with zero mask mass average the available tokens instead
                let mut fallback = vec![0.0; b * n];
                let mut any = false;
                for bi in 0..b {
                    let total: f64 = tape.data(w)[bi * n..(bi + 1) * n].iter().sum();
                    if total == 0.0 {
                        any = true;
                        for i in 0..n {
                            if avail[bi * n + i] {
                                fallback[bi * n + i] = 1.0;
                            }
                        }
                    }
                }
                let weights = if any {
                    let fb = tape.leaf_from(vec![b, n], fallback)?;
                    tape.add(w, fb)?
                } else {
                    w
                };
                tape.mean_pool(enc, weights)?
            }
            PoolingMode::AttentionPool => {
                let q = vars.query.expect("query bound in attention-pool mode");
                let scores = tape.matmul(enc, q)?;
                let flat = tape.reshape(scores, vec![b, n])?;
                let h = self.encoder.config.hidden_dim;
                let scaled = tape.scale(flat, 1.0 / (h as f64).sqrt())?;
                let att = tape.masked_softmax(scaled, avail)?;
                tape.mean_pool(enc, att)?
            }
        };
        let hid = Linear::forward(vars.head_hidden, tape, pooled)?;
        let hid = tape.relu(hid)?;
        Linear::forward(vars.head_out, tape, hid)
    }

    /// Single-instance class probabilities from hard-mask tokens.
    pub fn predict(&self, tokens: &[FeatureToken], avail: &[bool]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let t = tokens_to_tensor(tokens)?;
        let n = tokens.len();
        if avail.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "predict",
                lhs: vec![n],
                rhs: vec![avail.len()],
            });
        }
        let tok = tape.leaf(t);
        let weights: Vec<f64> = tokens
            .iter()
            .zip(avail)
            .map(|(t, &a)| if a { t.mask_bit } else { 0.0 })
            .collect();
        let w = tape.leaf_from(vec![1, n], weights)?;
        let logits = self.logits_var(&mut tape, &vars, tok, avail, Some(w))?;
        let probs = tape.masked_softmax(logits, &vec![true; self.n_classes])?;
        Ok(tape.data(probs).to_vec())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        if let Some(q) = &self.query {
            out.push(q);
        }
        out.extend(self.head_hidden.params());
        out.extend(self.head_out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        if let Some(q) = &mut self.query {
            out.push(q);
        }
        out.extend(self.head_hidden.params_mut());
        out.extend(self.head_out.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.encoder.param_names("predictor");
        if self.query.is_some() {
            out.push("predictor.pool_query".into());
        }
        out.push("predictor.head_hidden.w".into());
        out.push("predictor.head_hidden.b".into());
        out.push("predictor.head_out.w".into());
        out.push("predictor.head_out.b".into());
        out
    }
}

/// Pull gradients for bound parameters in binding order. Call after backward.
pub fn grads_in_order(tape: &Tape, order: &[VarId]) -> Vec<Vec<f64>> {
    order
        .iter()
        .map(|&id| tape.grad(id).expect("gradient populated by backward").to_vec())
        .collect()
}
