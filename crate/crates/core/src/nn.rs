//! Small layer toolkit shared by the encoder, decoder, and peripherals:
//! linear maps, embedding tables, layer-norm parameters, feed-forward
//! blocks, sinusoidal positions, and the per-forward context (train/eval
//! mode, dropout stream, ablation switches).

use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything a forward pass needs besides the inputs: mode, the dropout
/// stream, and the runtime ablation switches.
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    pub rng: Rng64,
    /// Replace the gate with all-ones (keeps spatial attention ungated).
    pub no_link_array: bool,
    /// Skip writing and reading the spatial cache entirely.
    pub no_spatial_cache: bool,
    /// When present, decoder layers push the last query's head-averaged
    /// temporal attention row here (diagnostic only).
    pub temporal_score_trace: Option<Vec<Vec<f64>>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: Rng64::new(0),
            no_link_array: false,
            no_spatial_cache: false,
            temporal_score_trace: None,
        }
    }

    pub fn train(dropout: f64, rng: Rng64) -> Self {
        ForwardCtx {
            train: true,
            dropout,
            rng,
            no_link_array: false,
            no_spatial_cache: false,
            temporal_score_trace: None,
        }
    }

    pub fn apply_dropout<S: Scalar>(&mut self, x: &Tensor<S>) -> Tensor<S> {
        if self.train && self.dropout > 0.0 {
            x.dropout(self.dropout, &mut self.rng)
        } else {
            x.clone()
        }
    }
}

/// Xavier-uniform sample for a [fan_in, fan_out] projection.
pub fn xavier_uniform<S: Scalar>(rng: &mut Rng64, fan_in: usize, fan_out: usize) -> Vec<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| S::from_f64(rng.range(-limit, limit)))
        .collect()
}

/// Embedding rows drawn from N(0, d^{-1/2}).
pub fn embedding_init<S: Scalar>(rng: &mut Rng64, rows: usize, width: usize) -> Vec<S> {
    let std = (width as f64).powf(-0.5);
    (0..rows * width).map(|_| S::from_f64(rng.normal() * std)).collect()
}

pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>, // [in, out]
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(rng: &mut Rng64, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::param(xavier_uniform(rng, fan_in, fan_out), &[fan_in, fan_out]),
            bias: bias.then(|| Tensor::param(vec![S::zero(); fan_out], &[fan_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add(b),
            None => y,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

pub struct Embedding<S: Scalar> {
    pub table: Tensor<S>, // [rows, width]
}

impl<S: Scalar> Embedding<S> {
    pub fn new(rng: &mut Rng64, rows: usize, width: usize) -> Self {
        Embedding {
            table: Tensor::param(embedding_init(rng, rows, width), &[rows, width]),
        }
    }

    pub fn lookup(&self, ids: &[u32]) -> Tensor<S> {
        self.table.embedding(ids)
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(vec![S::one(); width], &[width]),
            bias: Tensor::param(vec![S::zero(); width], &[width]),
            eps: S::from_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.g"), self.gain.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Position-wise feed-forward: Linear -> ReLU -> Linear.
pub struct FeedForward<S: Scalar> {
    pub inner: Linear<S>,
    pub outer: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(rng: &mut Rng64, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            inner: Linear::new(rng, d_model, d_ff, true),
            outer: Linear::new(rng, d_ff, d_model, true),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        self.outer.forward(&self.inner.forward(x).relu())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.inner.params(&format!("{prefix}.inner"), out);
        self.outer.params(&format!("{prefix}.outer"), out);
    }
}

/// Sinusoidal positional encodings for positions `0..len`, as a constant
/// (non-trainable) tensor of shape `[len, d_model]`.
pub fn positional_encoding<S: Scalar>(len: usize, d_model: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = S::from_f64(rate.sin());
            data[pos * d_model + 2 * i + 1] = S::from_f64(rate.cos());
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = S::from_f64(rate.sin());
        }
    }
    Tensor::from_vec(data, &[len, d_model])
}
