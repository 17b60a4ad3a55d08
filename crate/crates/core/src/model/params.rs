use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CctConfig, PositionalEmbedding};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<P> {
    /// `[D, C, k, k]`
    pub kernel: P,
    /// `[D]`
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub mlp_w1: P,
    pub mlp_b1: P,
    pub mlp_w2: P,
    pub mlp_b2: P,
}

/// Every learnable tensor of the model.
///
/// Generic over the leaf type: `CctParams<Tensor<T>>` holds values,
/// `CctParams<Var>` the matching handles inside a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CctParams<P> {
    pub tokenizer: Vec<ConvBlock<P>>,
    /// `[seq, D]`
    pub pos_embed: Option<P>,
    pub layers: Vec<EncoderLayer<P>>,
    /// Sequence-pooling score vector, `[D, 1]`.
    pub pool_g: P,
    /// `[D, n]`
    pub head_w: P,
    /// `[n]`
    pub head_b: P,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, mlp_w1, mlp_b1,
            mlp_w2, mlp_b2
        )
    };
}

impl<P> CctParams<P> {
    /// All leaves with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, b) in self.tokenizer.iter().enumerate() {
            out.push((format!("tokenizer.{i}.kernel"), &b.kernel));
            out.push((format!("tokenizer.{i}.bias"), &b.bias));
        }
        if let Some(p) = &self.pos_embed {
            out.push(("pos_embed".to_string(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push((format!("layers.{i}.{}", stringify!($f)), &l.$f)); )* };
            }
            layer_fields!(push);
        }
        out.push(("pool_g".to_string(), &self.pool_g));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    /// Mutable leaves in the same order as [`CctParams::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for b in &mut self.tokenizer {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        if let Some(p) = &mut self.pos_embed {
            out.push(p);
        }
        for l in &mut self.layers {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push(&mut l.$f); )* };
            }
            layer_fields!(push);
        }
        out.push(&mut self.pool_g);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Structure-preserving conversion of every leaf, in [`named`] order.
    ///
    /// [`named`]: CctParams::named
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> CctParams<Q> {
        CctParams {
            tokenizer: self
                .tokenizer
                .iter()
                .map(|b| ConvBlock {
                    kernel: f(&b.kernel),
                    bias: f(&b.bias),
                })
                .collect(),
            pos_embed: self.pos_embed.as_ref().map(&mut f),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    macro_rules! build {
                        ($($fl:ident),*) => { EncoderLayer { $( $fl: f(&l.$fl), )* } };
                    }
                    layer_fields!(build)
                })
                .collect(),
            pool_g: f(&self.pool_g),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }
}

impl<T: Scalar> CctParams<Tensor<T>> {
    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.all_finite())
    }

    /// Expected shape of every leaf for `cfg`, in [`CctParams::named`] order.
    pub fn shapes(cfg: &CctConfig) -> Result<CctParams<Vec<usize>>> {
        Ok(layout(cfg)?.map(|(shape, _)| shape.clone()))
    }

    /// Checks that every leaf has the shape `cfg` demands and is finite.
    pub fn check(&self, cfg: &CctConfig) -> Result<()> {
        let want = Self::shapes(cfg)?;
        let (have, want) = (self.named(), want.named());
        if have.len() != want.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config expects {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, t), (_, shape)) in have.iter().zip(want) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter shape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// Deterministic initialization: truncated normal (std 0.02, cut at
    /// three standard deviations) for projections, embeddings, pooling and
    /// head; He-uniform for convolution kernels; zeros for biases; ones for
    /// layer-norm gains.
    pub fn init(cfg: &CctConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(layout(cfg)?.map(|(shape, init)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::HeUniform => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::of(rng.gen_range(-bound..bound)))
                        .collect()
                }
                Init::TruncNormal => (0..n)
                    .map(|_| T::of(truncated_normal(&mut rng, 0.02)))
                    .collect(),
            };
            Tensor::new(shape.clone(), data).expect("shape from config")
        }))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    HeUniform,
    TruncNormal,
}

fn layout(cfg: &CctConfig) -> Result<CctParams<(Vec<usize>, Init)>> {
    use Init::*;
    cfg.validate()?;
    let d = cfg.embed_dim;
    let k = cfg.tokenizer_kernel;
    let hidden = cfg.mlp_width();
    Ok(CctParams {
        tokenizer: (0..cfg.conv_blocks)
            .map(|i| ConvBlock {
                kernel: (
                    vec![d, if i == 0 { cfg.input_channels } else { d }, k, k],
                    HeUniform,
                ),
                bias: (vec![d], Zeros),
            })
            .collect(),
        pos_embed: match cfg.positional_embedding {
            PositionalEmbedding::Learnable => Some((vec![cfg.seq_len()?, d], TruncNormal)),
            PositionalEmbedding::None => None,
        },
        layers: (0..cfg.encoder_layers)
            .map(|_| EncoderLayer {
                ln1_gain: (vec![d], Ones),
                ln1_bias: (vec![d], Zeros),
                wq: (vec![d, d], TruncNormal),
                bq: (vec![d], Zeros),
                wk: (vec![d, d], TruncNormal),
                bk: (vec![d], Zeros),
                wv: (vec![d, d], TruncNormal),
                bv: (vec![d], Zeros),
                wo: (vec![d, d], TruncNormal),
                bo: (vec![d], Zeros),
                ln2_gain: (vec![d], Ones),
                ln2_bias: (vec![d], Zeros),
                mlp_w1: (vec![d, hidden], TruncNormal),
                mlp_b1: (vec![hidden], Zeros),
                mlp_w2: (vec![hidden, d], TruncNormal),
                mlp_b2: (vec![d], Zeros),
            })
            .collect(),
        pool_g: (vec![d, 1], TruncNormal),
        head_w: (vec![d, cfg.num_classes], TruncNormal),
        head_b: (vec![cfg.num_classes], Zeros),
    })
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z * std;
        }
    }
}
