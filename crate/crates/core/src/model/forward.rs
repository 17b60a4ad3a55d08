//! Graph construction for the model: tokenizer, encoder, sequence pooling
//! and classification head.

use rand_chacha::ChaCha8Rng;

use super::{CctConfig, CctParams, EncoderLayer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Nodes of one forward pass that callers may want to inspect.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, n]`
    pub logits: Var,
    /// Per encoder layer, attention probabilities `[B * heads, seq, seq]`.
    pub attn_weights: Vec<Var>,
    /// `[B, seq]`
    pub pool_weights: Var,
    /// Output of the last tokenizer block, `[B, D, h, w]`.
    pub tokenizer_features: Var,
}

/// Registers every parameter as a trainable leaf.
pub fn register_params<T: Scalar>(g: &mut Graph<T>, p: &CctParams<Tensor<T>>) -> CctParams<Var> {
    p.map(|t| g.param(t.clone()))
}

/// Registers every parameter as a constant (inference).
pub fn register_constants<T: Scalar>(g: &mut Graph<T>, p: &CctParams<Tensor<T>>) -> CctParams<Var> {
    p.map(|t| g.constant(t.clone()))
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, cfg: &CctConfig) -> Result<()> {
    let s = g.shape(x);
    let ok = s.len() == 4
        && s[1] == cfg.input_channels
        && s[2] == cfg.input_size
        && s[3] == cfg.input_size;
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "model input",
            lhs: s.to_vec(),
            rhs: vec![
                s.first().copied().unwrap_or(0),
                cfg.input_channels,
                cfg.input_size,
                cfg.input_size,
            ],
        })
    }
}

/// Conv -> ReLU -> MaxPool per block. Returns the final feature map.
pub fn tokenizer_features<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &CctParams<Var>,
    cfg: &CctConfig,
) -> Result<Var> {
    check_input(g, x, cfg)?;
    let mut h = x;
    for block in &p.tokenizer {
        h = g.conv2d(
            h,
            block.kernel,
            Some(block.bias),
            cfg.tokenizer_stride,
            cfg.tokenizer_padding,
        )?;
        h = g.relu(h)?;
        h = g.maxpool2d(h, cfg.pool_window, cfg.pool_stride)?;
    }
    Ok(h)
}

/// Flattens a `[B, D, h, w]` feature map into `[B, h*w, D]` tokens and adds
/// the positional table when present.
pub fn features_to_tokens<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    p: &CctParams<Var>,
) -> Result<Var> {
    let [b, d, h, w] = *g.shape(features) else {
        return Err(Error::InvalidShape {
            shape: g.shape(features).to_vec(),
            reason: "expected [B, D, h, w] features".into(),
        });
    };
    let flat = g.reshape(features, [b, d, h * w])?;
    let tokens = g.permute(flat, &[0, 2, 1])?;
    match p.pos_embed {
        Some(pos) => g.add_broadcast(tokens, pos),
        None => Ok(tokens),
    }
}

/// Image batch `[B, C, H, W]` to tokens `[B, seq, D]`; also returns the
/// feature map the tokens were read from.
pub fn tokenize<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &CctParams<Var>,
    cfg: &CctConfig,
) -> Result<(Var, Var)> {
    let features = tokenizer_features(g, x, p, cfg)?;
    Ok((features_to_tokens(g, features, p)?, features))
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize, transpose: bool) -> Result<Var> {
    let [b, s, d] = *g.shape(x) else {
        unreachable!("tokens are rank 3")
    };
    let dh = d / heads;
    let x = g.reshape(x, [b, s, heads, dh])?;
    if transpose {
        let x = g.permute(x, &[0, 2, 3, 1])?;
        g.reshape(x, [b * heads, dh, s])
    } else {
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, [b * heads, s, dh])
    }
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    l: &EncoderLayer<Var>,
    cfg: &CctConfig,
) -> Result<(Var, Var)> {
    let [b, s, d] = *g.shape(x) else {
        unreachable!("tokens are rank 3")
    };
    let heads = cfg.heads;
    let q = linear(g, x, l.wq, l.bq)?;
    let k = linear(g, x, l.wk, l.bk)?;
    let v = linear(g, x, l.wv, l.bv)?;
    let q = split_heads(g, q, heads, false)?;
    let kt = split_heads(g, k, heads, true)?;
    let v = split_heads(g, v, heads, false)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (cfg.head_dim() as f64).sqrt()))?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, [b, heads, s, d / heads])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, [b, s, d])?;
    Ok((linear(g, ctx, l.wo, l.bo)?, attn))
}

/// Pre-norm transformer blocks. `rng` enables dropout; `None` is inference.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    p: &CctParams<Var>,
    cfg: &CctConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let mut x = tokens;
    let mut attn_all = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let h = g.layernorm(x, l.ln1_gain, l.ln1_bias, LN_EPS)?;
        let (mut a, attn) = attention(g, h, l, cfg)?;
        if let Some(rng) = rng.as_deref_mut() {
            a = g.dropout(a, cfg.dropout, rng)?;
        }
        x = g.add(x, a)?;
        attn_all.push(attn);

        let h = g.layernorm(x, l.ln2_gain, l.ln2_bias, LN_EPS)?;
        let h = linear(g, h, l.mlp_w1, l.mlp_b1)?;
        let h = g.gelu(h)?;
        let mut m = linear(g, h, l.mlp_w2, l.mlp_b2)?;
        if let Some(rng) = rng.as_deref_mut() {
            m = g.dropout(m, cfg.dropout, rng)?;
        }
        x = g.add(x, m)?;
    }
    Ok((x, attn_all))
}

/// Attention pooling over the sequence: weights are the softmax of `z . g`
/// across tokens and the pooled vector is the weighted token sum.
/// Returns `(pooled [B, D], weights [B, seq])`.
pub fn seq_pool<T: Scalar>(g: &mut Graph<T>, z: Var, score: Var) -> Result<(Var, Var)> {
    let [b, s, d] = *g.shape(z) else {
        return Err(Error::InvalidShape {
            shape: g.shape(z).to_vec(),
            reason: "seq_pool expects [B, seq, D]".into(),
        });
    };
    let scores = g.matmul(z, score)?;
    let scores = g.reshape(scores, [b, 1, s])?;
    let weights = g.softmax(scores, 2)?;
    let pooled = g.matmul(weights, z)?;
    let pooled = g.reshape(pooled, [b, d])?;
    let weights = g.reshape(weights, [b, s])?;
    Ok((pooled, weights))
}

/// Affine map to class logits; no activation.
pub fn classify_head<T: Scalar>(g: &mut Graph<T>, pooled: Var, w: Var, b: Var) -> Result<Var> {
    linear(g, pooled, w, b)
}

/// Everything after the tokenizer feature map.
pub fn forward_from_features<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    p: &CctParams<Var>,
    cfg: &CctConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let tokens = features_to_tokens(g, features, p)?;
    let (z, attn_weights) = encode(g, tokens, p, cfg, rng)?;
    let (pooled, pool_weights) = seq_pool(g, z, p.pool_g)?;
    let logits = classify_head(g, pooled, p.head_w, p.head_b)?;
    Ok(ForwardOutput {
        logits,
        attn_weights,
        pool_weights,
        tokenizer_features: features,
    })
}

pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &CctParams<Var>,
    cfg: &CctConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    let features = tokenizer_features(g, x, p, cfg)?;
    forward_from_features(g, features, p, cfg, rng)
}

/// Inference on a batch: class probabilities `[B, n]` and argmax labels.
pub fn predict<T: Scalar>(
    params: &CctParams<Tensor<T>>,
    x: &Tensor<T>,
    cfg: &CctConfig,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut g = Graph::new();
    let p = register_constants(&mut g, params);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, xv, &p, cfg, None)?;
    let probs = g.softmax(out.logits, 1)?;
    let probs = g.value(probs).clone();
    let labels = argmax_rows(probs.data(), cfg.num_classes);
    Ok((probs, labels))
}

/// Index of the first maximum of every row.
pub fn argmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
