//! The central processor: a temporal encoder that turns per-call sequences
//! into cache rows, and a decoder stack that starts from a task embedding,
//! attends over the temporal cache, expands those scores into a gate via the
//! link array, and applies gated attention over the spatial cache. The trunk
//! (peripherals, encoder, decoder) is shared by every registered task; only
//! output embeddings, output projections, and task embeddings are per-task.

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::cache::{compute_gate, CacheState, DomainId, SpatioTemporalTensor, TaskId};
use crate::nn::{positional_encoding, Embedding, FeedForward, ForwardCtx, LayerNorm, Linear};
use crate::peripherals::{LanguagePeripheral, Peripheral, RawInput, VisionPeripheral};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{concat, no_grad, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Depth of both the temporal encoder and the decoder stack.
    pub n_layers: usize,
    pub d_ff: usize,
    /// Max number of input domains (vision, language).
    pub n_domains: usize,
    pub lang_vocab: usize,
    /// Token embedding width inside the language peripheral.
    pub d_emb: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale preset: trains all four toy tasks on a CPU in minutes.
    pub fn toy(lang_vocab: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            n_domains: 2,
            lang_vocab,
            d_emb: 32,
            dropout: 0.1,
        }
    }

    /// Transformer-base dimensions. Too large to train here; used for
    /// structural checks such as parameter accounting.
    pub fn paper_base(lang_vocab: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 2048,
            n_domains: 2,
            lang_vocab,
            d_emb: 32,
            dropout: 0.1,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_model, self.n_heads)
    }
}

/// What the model must know about one task to build its head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeadSpec {
    pub name: String,
    pub vocab_size: usize,
    pub max_out_len: usize,
}

struct EncoderLayer<S: Scalar> {
    attn: MultiHeadAttention<S>,
    norm1: LayerNorm<S>,
    ff: FeedForward<S>,
    norm2: LayerNorm<S>,
}

impl<S: Scalar> EncoderLayer<S> {
    fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(rng, cfg.attention()),
            norm1: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(rng, cfg.d_model, cfg.d_ff),
            norm2: LayerNorm::new(cfg.d_model),
        }
    }

    fn forward(&self, x: &Tensor<S>, ctx: &mut ForwardCtx) -> Tensor<S> {
        let (a, _) = self.attn.forward(x, x, None, ctx);
        let x = self.norm1.forward(&x.add(&ctx.apply_dropout(&a)));
        let f = self.ff.forward(&x);
        self.norm2.forward(&x.add(&ctx.apply_dropout(&f)))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.ff.params(&format!("{prefix}.ff"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
    }
}

/// Self-attention encoder applied to each call's spatially-averaged
/// sequence before it enters the temporal cache. Positions restart at zero
/// for every call.
pub struct TemporalEncoder<S: Scalar> {
    d_model: usize,
    layers: Vec<EncoderLayer<S>>,
}

impl<S: Scalar> TemporalEncoder<S> {
    pub fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        TemporalEncoder {
            d_model: cfg.d_model,
            layers: (0..cfg.n_layers).map(|_| EncoderLayer::new(rng, cfg)).collect(),
        }
    }

    pub fn forward(&self, seq: &Tensor<S>, ctx: &mut ForwardCtx) -> Tensor<S> {
        let t = seq.shape()[0];
        let mut x = seq.add(&positional_encoding(t, self.d_model));
        x = ctx.apply_dropout(&x);
        for layer in &self.layers {
            x = layer.forward(&x, ctx);
        }
        x
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.layer{i}"), out);
        }
    }
}

/// Domain conditioning and the temporal encoder: everything an encode call
/// needs from the model.
pub struct EncoderCore<S: Scalar> {
    pub domain_embed: Embedding<S>,
    pub input_proj: Linear<S>, // 2*d_model -> d_model
    pub temporal: TemporalEncoder<S>,
}

impl<S: Scalar> EncoderCore<S> {
    pub fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        EncoderCore {
            domain_embed: Embedding::new(rng, cfg.n_domains, cfg.d_model),
            input_proj: Linear::new(rng, 2 * cfg.d_model, cfg.d_model, true),
            temporal: TemporalEncoder::new(rng, cfg),
        }
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.domain_embed.params("cnp.domain_embed", out);
        self.input_proj.params("cnp.input_proj", out);
        self.temporal.params("cnp.tenc", out);
    }
}

struct DecoderLayer<S: Scalar> {
    self_attn: MultiHeadAttention<S>,
    norm1: LayerNorm<S>,
    temporal_attn: MultiHeadAttention<S>,
    norm2: LayerNorm<S>,
    spatial_attn: MultiHeadAttention<S>,
    norm3: LayerNorm<S>,
    ff: FeedForward<S>,
    norm4: LayerNorm<S>,
}

impl<S: Scalar> DecoderLayer<S> {
    fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(rng, cfg.attention()),
            norm1: LayerNorm::new(cfg.d_model),
            temporal_attn: MultiHeadAttention::new(rng, cfg.attention()),
            norm2: LayerNorm::new(cfg.d_model),
            spatial_attn: MultiHeadAttention::new(rng, cfg.attention()),
            norm3: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(rng, cfg.d_model, cfg.d_ff),
            norm4: LayerNorm::new(cfg.d_model),
        }
    }

    /// Masked self-attention, temporal cross-attention (whose scores feed
    /// the gate), gated spatial attention (skipped when there are no
    /// spatial rows), then feed-forward; Add&Norm after each sublayer.
    fn forward(&self, x: &Tensor<S>, state: &CacheState<S>, ctx: &mut ForwardCtx) -> Tensor<S> {
        let sa = self.self_attn.forward_causal(x, ctx);
        let x = self.norm1.forward(&x.add(&ctx.apply_dropout(&sa)));

        let c_t = state
            .temporal_cache()
            .expect("decode: encode() never called (temporal cache is empty)");
        let (ta, scores) = self.temporal_attn.forward(&x, &c_t, None, ctx);
        if let Some(trace) = ctx.temporal_score_trace.as_mut() {
            let probs = scores.probs.data();
            let (n_h, n, r) = (scores.n_heads(), scores.n_queries(), scores.n_keys());
            let mut row = vec![0.0f64; r];
            for h in 0..n_h {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += probs[(h * n + (n - 1)) * r + j].to_f64s() / n_h as f64;
                }
            }
            trace.push(row);
        }
        let x = self.norm2.forward(&x.add(&ctx.apply_dropout(&ta)));

        let x = match state.spatial_cache() {
            Some(c_s) if !ctx.no_spatial_cache => {
                let p = c_s.shape()[0];
                let gate = if ctx.no_link_array {
                    Tensor::full(&[scores.n_heads(), scores.n_queries(), p], S::one())
                } else {
                    compute_gate(state.links(), &scores)
                        .expect("spatial cache non-empty but gate came back empty")
                        .values
                };
                let sp = self.spatial_attn.forward_gated(&x, &c_s, &gate, None, ctx);
                self.norm3.forward(&x.add(&ctx.apply_dropout(&sp)))
            }
            _ => x,
        };

        let f = self.ff.forward(&x);
        self.norm4.forward(&x.add(&ctx.apply_dropout(&f)))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.norm1.params(&format!("{prefix}.norm1"), out);
        self.temporal_attn.params(&format!("{prefix}.temporal_attn"), out);
        self.norm2.params(&format!("{prefix}.norm2"), out);
        self.spatial_attn.params(&format!("{prefix}.spatial_attn"), out);
        self.norm3.params(&format!("{prefix}.norm3"), out);
        self.ff.params(&format!("{prefix}.ff"), out);
        self.norm4.params(&format!("{prefix}.norm4"), out);
    }
}

/// Per-task head: the start-of-decode task embedding, output token
/// embeddings, and the final classifier. No weight tying.
pub struct TaskHead<S: Scalar> {
    pub spec: TaskHeadSpec,
    pub task_embed: Tensor<S>, // [1, d_model]
    pub out_embed: Embedding<S>,
    pub out_proj: Linear<S>, // d_model -> vocab, with bias
}

impl<S: Scalar> TaskHead<S> {
    fn new(rng: &mut Rng64, cfg: &ModelConfig, spec: TaskHeadSpec) -> Self {
        TaskHead {
            task_embed: Tensor::param(
                crate::nn::embedding_init(rng, 1, cfg.d_model),
                &[1, cfg.d_model],
            ),
            out_embed: Embedding::new(rng, spec.vocab_size, cfg.d_model),
            out_proj: Linear::new(rng, cfg.d_model, spec.vocab_size, true),
            spec,
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.task_embed"), self.task_embed.clone()));
        self.out_embed.params(&format!("{prefix}.out_embed"), out);
        self.out_proj.params(&format!("{prefix}.out_proj"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSubset {
    All,
    Trunk,
    PerTask(TaskId),
}

pub struct OmniNetModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub vision: VisionPeripheral<S>,
    pub language: LanguagePeripheral<S>,
    pub encoder: EncoderCore<S>,
    decoder: Vec<DecoderLayer<S>>,
    pub tasks: Vec<TaskHead<S>>,
}

impl<S: Scalar> OmniNetModel<S> {
    /// Builds the full parameter set in a fixed order from one seeded
    /// stream, so equal (config, tasks, seed) yield bitwise-equal models.
    pub fn new(cfg: ModelConfig, task_specs: &[TaskHeadSpec], seed: u64) -> Self {
        assert!(!task_specs.is_empty(), "model needs at least one task head");
        let mut rng = Rng64::new(seed);
        let vision = VisionPeripheral::new(&mut rng, &cfg);
        let language = LanguagePeripheral::new(&mut rng, &cfg);
        let encoder = EncoderCore::new(&mut rng, &cfg);
        let decoder = (0..cfg.n_layers).map(|_| DecoderLayer::new(&mut rng, &cfg)).collect();
        let tasks = task_specs
            .iter()
            .map(|spec| TaskHead::new(&mut rng, &cfg, spec.clone()))
            .collect();
        OmniNetModel {
            cfg,
            vision,
            language,
            encoder,
            decoder,
            tasks,
        }
    }

    pub fn task_id(&self, name: &str) -> Option<TaskId> {
        self.tasks.iter().position(|t| t.spec.name == name).map(TaskId)
    }

    pub fn head(&self, task: TaskId) -> &TaskHead<S> {
        assert!(
            task.0 < self.tasks.len(),
            "task id {} out of range ({} tasks registered)",
            task.0,
            self.tasks.len()
        );
        &self.tasks[task.0]
    }

    /// Named parameters in a stable canonical order: peripherals, shared
    /// trunk, then per-task heads.
    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.vision.params("periph.vision", &mut out);
        self.language.params("periph.lang", &mut out);
        self.encoder.params(&mut out);
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.params(&format!("cnp.dec.layer{i}"), &mut out);
        }
        for (i, head) in self.tasks.iter().enumerate() {
            head.params(&format!("task.{i}"), &mut out);
        }
        out
    }

    pub fn count_parameters(&self, subset: ParamSubset) -> usize {
        self.parameters()
            .iter()
            .filter(|(name, _)| match subset {
                ParamSubset::All => true,
                ParamSubset::Trunk => {
                    name.starts_with("periph.") || name.starts_with("cnp.")
                }
                ParamSubset::PerTask(task) => name.starts_with(&format!("task.{}.", task.0)),
            })
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Routes a raw input through its peripheral.
    pub fn encode_raw(
        &self,
        raw: &RawInput,
        ctx: &mut ForwardCtx,
    ) -> (SpatioTemporalTensor<S>, DomainId) {
        match raw {
            RawInput::Image(_) | RawInput::Video(_) => {
                (self.vision.encode_input(raw, ctx), self.vision.domain_id())
            }
            RawInput::Text(_) => (self.language.encode_input(raw, ctx), self.language.domain_id()),
        }
    }

    /// Encodes every raw input in order into a fresh cache state.
    pub fn encode_sample(&self, inputs: &[RawInput], ctx: &mut ForwardCtx) -> CacheState<S> {
        let mut state = CacheState::new();
        for raw in inputs {
            let (x, domain) = self.encode_raw(raw, ctx);
            state.encode(&x, domain, &self.encoder, ctx);
        }
        state
    }

    /// Teacher-forced decode: the input row sequence is the task embedding
    /// followed by the output embeddings of `y_shifted`, so the logit row at
    /// position i predicts output token i. Returns `[len(y_shifted)+1, V]`.
    pub fn decode_step_logits(
        &self,
        y_shifted: &[u32],
        task: TaskId,
        state: &CacheState<S>,
        ctx: &mut ForwardCtx,
    ) -> Tensor<S> {
        let head = self.head(task);
        assert!(
            state.temporal_len() >= 1,
            "decode: encode() never called (temporal cache is empty)"
        );
        let n = y_shifted.len() + 1;
        let emb = if y_shifted.is_empty() {
            head.task_embed.clone()
        } else {
            concat(&[&head.task_embed, &head.out_embed.lookup(y_shifted)], 0)
        };
        let mut x = emb.add(&positional_encoding(n, self.cfg.d_model));
        x = ctx.apply_dropout(&x);
        for layer in &self.decoder {
            x = layer.forward(&x, state, ctx);
        }
        head.out_proj.forward(&x)
    }

    /// Fresh cache, one encode call per input in the given order, then a
    /// teacher-forced decode.
    pub fn forward_task(
        &self,
        inputs: &[(SpatioTemporalTensor<S>, DomainId)],
        y_shifted: &[u32],
        task: TaskId,
        ctx: &mut ForwardCtx,
    ) -> Tensor<S> {
        assert!(!inputs.is_empty(), "forward_task: at least one input required");
        let mut state = CacheState::new();
        for (x, domain) in inputs {
            state.encode(x, *domain, &self.encoder, ctx);
        }
        self.decode_step_logits(y_shifted, task, &state, ctx)
    }

    /// Greedy autoregressive generation: feeds its own argmax back until
    /// `end_token` or `max_len`. Runs detached from the graph. The context
    /// carries any runtime ablation switches into the decode path.
    pub fn generate_greedy(
        &self,
        task: TaskId,
        state: &CacheState<S>,
        max_len: usize,
        end_token: u32,
        ctx: &mut ForwardCtx,
    ) -> Vec<u32> {
        let head = self.head(task);
        assert!(
            max_len <= head.spec.max_out_len,
            "generate: max_len {max_len} exceeds task limit {}",
            head.spec.max_out_len
        );
        no_grad(|| {
            let mut out: Vec<u32> = Vec::new();
            for _ in 0..max_len {
                let logits = self.decode_step_logits(&out, task, state, ctx);
                let next = *logits.argmax_last().last().unwrap() as u32;
                if next == end_token {
                    break;
                }
                out.push(next);
            }
            out
        })
    }
}
