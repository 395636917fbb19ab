//! Permutation-equivariant set encoders: DeepSets blocks (per-token linear
//! plus pooled context broadcast) and multi-head self-attention blocks.
//! Neither uses positional information, so permuting the token axis permutes
//! the output identically; padded positions are excluded from pooled
//! statistics and attention keys.

use crate::concrete::Rng;
use crate::diffcore::{Tape, Tensor, VarId};
use crate::error::{CoreError, Result};

use super::{EncoderArch, SetEncoderConfig};

/// Fully-connected layer, Xavier-uniform weights, zero bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: VarId,
    pub b: VarId,
}

impl Linear {
    pub fn new(inp: usize, out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        Linear {
            w: Tensor::uniform_init(vec![inp, out], bound, rng).trainable(),
            b: Tensor::zeros(vec![out]).trainable(),
        }
    }

    /// Zero-initialized layer; used for output heads so fresh networks emit
    /// exactly uniform distributions.
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![inp, out]).trainable(),
            b: Tensor::zeros(vec![out]).trainable(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, order: &mut Vec<VarId>) -> LinearVars {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        order.push(w);
        order.push(b);
        LinearVars { w, b }
    }

    pub fn forward(vars: LinearVars, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let y = tape.matmul(x, vars.w)?;
        tape.add(y, vars.b)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    DeepSets { token: Linear, context: Linear },
    Attention { wq: Linear, wk: Linear, wv: Linear, wo: Linear, ff1: Linear, ff2: Linear },
}

pub enum BlockVars {
    DeepSets { token: LinearVars, context: LinearVars },
    Attention {
        wq: LinearVars,
        wk: LinearVars,
        wv: LinearVars,
        wo: LinearVars,
        ff1: LinearVars,
        ff2: LinearVars,
    },
}

impl Block {
    fn new(config: &SetEncoderConfig, rng: &mut Rng) -> Self {
        let h = config.hidden_dim;
        match config.arch {
            EncoderArch::DeepSets => Block::DeepSets {
                token: Linear::new(h, h, rng),
                context: Linear::new(h, h, rng),
            },
            EncoderArch::Attention => Block::Attention {
                wq: Linear::new(h, h, rng),
                wk: Linear::new(h, h, rng),
                wv: Linear::new(h, h, rng),
                wo: Linear::new(h, h, rng),
                ff1: Linear::new(h, 2 * h, rng),
                ff2: Linear::new(2 * h, h, rng),
            },
        }
    }

    fn bind(&self, tape: &mut Tape, order: &mut Vec<VarId>) -> BlockVars {
        match self {
            Block::DeepSets { token, context } => BlockVars::DeepSets {
                token: token.bind(tape, order),
                context: context.bind(tape, order),
            },
            Block::Attention { wq, wk, wv, wo, ff1, ff2 } => BlockVars::Attention {
                wq: wq.bind(tape, order),
                wk: wk.bind(tape, order),
                wv: wv.bind(tape, order),
                wo: wo.bind(tape, order),
                ff1: ff1.bind(tape, order),
                ff2: ff2.bind(tape, order),
            },
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Block::DeepSets { token, context } => {
                [token.params(), context.params()].concat()
            }
            Block::Attention { wq, wk, wv, wo, ff1, ff2 } => [
                wq.params(),
                wk.params(),
                wv.params(),
                wo.params(),
                ff1.params(),
                ff2.params(),
            ]
            .concat(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Block::DeepSets { token, context } => {
                let mut out = token.params_mut();
                out.extend(context.params_mut());
                out
            }
            Block::Attention { wq, wk, wv, wo, ff1, ff2 } => {
                let mut out = wq.params_mut();
                out.extend(wk.params_mut());
                out.extend(wv.params_mut());
                out.extend(wo.params_mut());
                out.extend(ff1.params_mut());
                out.extend(ff2.params_mut());
                out
            }
        }
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let leaf = |layer: &str| {
            vec![format!("{prefix}.{layer}.w"), format!("{prefix}.{layer}.b")]
        };
        match self {
            Block::DeepSets { .. } => [leaf("token"), leaf("context")].concat(),
            Block::Attention { .. } => {
                ["wq", "wk", "wv", "wo", "ff1", "ff2"].iter().flat_map(|l| leaf(l)).collect()
            }
        }
    }
}

/// Token encoder shared by policy and predictor heads (separate instances,
/// no weight sharing).
#[derive(Debug, Clone)]
pub struct SetEncoder {
    pub config: SetEncoderConfig,
    pub token_dim: usize,
    embed: Linear,
    blocks: Vec<Block>,
}

pub struct EncoderVars {
    embed: LinearVars,
    blocks: Vec<BlockVars>,
}

impl SetEncoder {
    pub fn new(config: SetEncoderConfig, token_dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if token_dim == 0 {
            return Err(CoreError::Config("token dimension must be positive".into()));
        }
        let embed = Linear::new(token_dim, config.hidden_dim, rng);
        let blocks = (0..config.num_blocks).map(|_| Block::new(&config, rng)).collect();
        Ok(SetEncoder { config, token_dim, embed, blocks })
    }

    pub fn bind(&self, tape: &mut Tape, order: &mut Vec<VarId>) -> EncoderVars {
        EncoderVars {
            embed: self.embed.bind(tape, order),
            blocks: self.blocks.iter().map(|b| b.bind(tape, order)).collect(),
        }
    }

    /// tokens: [b, n, token_dim], avail flags row-major [b*n].
    /// Returns embeddings [b, n, hidden]. Every batch row needs at least one
    /// available token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        tokens: VarId,
        avail: &[bool],
    ) -> Result<VarId> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.token_dim {
            return Err(CoreError::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.token_dim],
            });
        }
        let (b, n) = (shape[0], shape[1]);
        if avail.len() != b * n {
            return Err(CoreError::ShapeMismatch {
                op: "encode",
                lhs: vec![b, n],
                rhs: vec![avail.len()],
            });
        }
        if avail.chunks(n).any(|row| !row.iter().any(|&a| a)) {
            return Err(CoreError::DegenerateInstance);
        }

        let mut x = Linear::forward(vars.embed, tape, tokens)?;
        x = tape.relu(x)?;

        let avail_weights: Vec<f64> = avail.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        for bv in &vars.blocks {
            x = match bv {
                BlockVars::DeepSets { token, context } => {
                    let t = Linear::forward(*token, tape, x)?;
                    let w = tape.leaf_from(vec![b, n], avail_weights.clone())?;
                    let pooled = tape.mean_pool(x, w)?;
                    let c = Linear::forward(*context, tape, pooled)?;
                    let c3 = tape.reshape(c, vec![b, 1, self.config.hidden_dim])?;
                    let s = tape.add(t, c3)?;
                    let r = tape.relu(s)?;
                    tape.add(x, r)?
                }
                BlockVars::Attention { wq, wk, wv, wo, ff1, ff2 } => {
                    let heads = self.config.num_heads;
                    let dh = self.config.hidden_dim / heads;
                    let q = Linear::forward(*wq, tape, x)?;
                    let k = Linear::forward(*wk, tape, x)?;
                    let v = Linear::forward(*wv, tape, x)?;
                    let qh = tape.split_heads(q, heads)?;
                    let kh = tape.split_heads(k, heads)?;
                    let vh = tape.split_heads(v, heads)?;
                    let kt = tape.transpose_last(kh)?;
                    let scores = tape.matmul(qh, kt)?;
                    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                    // every query row attends over the same key-availability mask
                    let mut mask = Vec::with_capacity(b * heads * n * n);
                    for bi in 0..b {
                        let row = &avail[bi * n..(bi + 1) * n];
                        for _ in 0..heads * n {
                            mask.extend_from_slice(row);
                        }
                    }
                    let att = tape.masked_softmax(scaled, &mask)?;
                    let ctx = tape.matmul(att, vh)?;
                    let merged = tape.merge_heads(ctx, heads)?;
                    let o = Linear::forward(*wo, tape, merged)?;
                    let x1 = tape.add(x, o)?;
                    let f1 = Linear::forward(*ff1, tape, x1)?;
                    let f1r = tape.relu(f1)?;
                    let f2 = Linear::forward(*ff2, tape, f1r)?;
                    tape.add(x1, f2)?
                }
            };
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.embed.params();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embed.params_mut();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.embed.w"), format!("{prefix}.embed.b")];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.param_names(&format!("{prefix}.block{i}")));
        }
        out
    }
}
