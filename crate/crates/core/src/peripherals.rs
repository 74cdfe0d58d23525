//! Domain encoders: everything entering the model becomes a
//! `[t, s, d_model]` spatio-temporal tensor.
//!
//! The vision peripheral is a three-layer strided conv stack (circular
//! padding, so feature maps shift exactly with cyclic input shifts) over
//! 32x32 RGB frames, giving a 4x4 spatial grid per frame; a learned
//! per-cell position embedding is added before the projection so the
//! decoder can tell grid cells apart. The language peripheral is a token
//! embedding plus projection with spatial extent fixed at 1.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::rc::Rc;

use crate::cache::{DomainId, SpatioTemporalTensor, DOMAIN_LANGUAGE, DOMAIN_VISION};
use crate::cnp::ModelConfig;
use crate::nn::{embedding_init, xavier_uniform, Embedding, ForwardCtx, Linear};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const CONV_CHANNELS: [usize; 3] = [16, 32, 32];
/// Side of the spatial grid after the three stride-2 convs: 32 -> 4.
pub const SPATIAL_GRID: usize = IMAGE_SIZE >> 3;
/// Spatial rows per frame (s for images and videos).
pub const SPATIAL_LEN: usize = SPATIAL_GRID * SPATIAL_GRID;

/// One RGB frame, row-major `[h, w, c]`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub pixels: Vec<f32>,
}

impl ToyImage {
    pub fn black() -> Self {
        ToyImage {
            pixels: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> [f32; 3] {
        let base = (y * IMAGE_SIZE + x) * IMAGE_CHANNELS;
        [self.pixels[base], self.pixels[base + 1], self.pixels[base + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let base = (y * IMAGE_SIZE + x) * IMAGE_CHANNELS;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideo {
    pub frames: Vec<ToyImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawInput {
    Text(TokenSequence),
    Image(ToyImage),
    Video(ToyVideo),
}

pub trait Peripheral<S: Scalar> {
    fn domain_id(&self) -> DomainId;
    fn encode_input(&self, raw: &RawInput, ctx: &mut ForwardCtx) -> SpatioTemporalTensor<S>;
    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>);
}

struct ConvLayer<S: Scalar> {
    weight: Tensor<S>, // [kernel*kernel*c_in, c_out]
    bias: Tensor<S>,   // [c_out]
    c_out: usize,
}

impl<S: Scalar> ConvLayer<S> {
    fn new(rng: &mut Rng64, c_in: usize, c_out: usize) -> Self {
        let fan_in = KERNEL * KERNEL * c_in;
        ConvLayer {
            weight: Tensor::param(xavier_uniform(rng, fan_in, c_out), &[fan_in, c_out]),
            bias: Tensor::param(vec![S::zero(); c_out], &[c_out]),

            c_out,
        }
    }
}

/// Gather map turning `[t, h, w, c_in]` into im2col rows
/// `[t*oh*ow, k*k*c_in]` for a stride-2 circular-padded 3x3 conv.
fn conv_indices(t: usize, h: usize, w: usize, c_in: usize) -> Vec<usize> {
    let (oh, ow) = (h / STRIDE, w / STRIDE);
    let mut idx = Vec::with_capacity(t * oh * ow * KERNEL * KERNEL * c_in);
    for f in 0..t {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..KERNEL {
                    let y = (oy * STRIDE + ky + h - 1) % h;
                    for kx in 0..KERNEL {
                        let x = (ox * STRIDE + kx + w - 1) % w;
                        let base = ((f * h + y) * w + x) * c_in;
                        for c in 0..c_in {
                            idx.push(base + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

pub struct VisionPeripheral<S: Scalar> {
    convs: Vec<ConvLayer<S>>,
    /// Learned embedding per spatial grid cell, added before projection.
    pub pos_embed: Tensor<S>, // [SPATIAL_LEN, d_model]
    proj: Linear<S>, // CONV_CHANNELS[2] -> d_model
    index_cache: std::cell::RefCell<HashMap<(usize, usize), Rc<Vec<usize>>>>,
}

impl<S: Scalar> VisionPeripheral<S> {
    pub fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        let mut convs = Vec::new();
        let mut c_in = IMAGE_CHANNELS;
        for &c_out in &CONV_CHANNELS {
            convs.push(ConvLayer::new(rng, c_in, c_out));
            c_in = c_out;
        }
        VisionPeripheral {
            convs,
            pos_embed: Tensor::param(
                embedding_init(rng, SPATIAL_LEN, cfg.d_model),
                &[SPATIAL_LEN, cfg.d_model],
            ),
            proj: Linear::new(rng, CONV_CHANNELS[2], cfg.d_model, false),
            index_cache: std::cell::RefCell::new(HashMap::new()),
        }
    }

    fn indices(&self, layer: usize, t: usize, h: usize, w: usize, c_in: usize) -> Rc<Vec<usize>> {
        let key = (layer, t);
        if let Some(found) = self.index_cache.borrow().get(&key) {
            return Rc::clone(found);
        }
        let built = Rc::new(conv_indices(t, h, w, c_in));
        self.index_cache.borrow_mut().insert(key, Rc::clone(&built));
        built
    }

    /// Conv-stack feature map `[t, grid, grid, c_out]` before position
    /// embeddings and projection. Circular padding makes this exactly
    /// equivariant to cyclic input shifts at stride granularity.
    pub fn features(&self, frames: &Tensor<S>) -> Tensor<S> {
        let shape = frames.shape().to_vec();
        assert_eq!(shape.len(), 4, "vision: frames must be [t, h, w, c], got {shape:?}");
        let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (mut h, mut w) = (h, w);
        assert!(
            h >= KERNEL && w >= KERNEL,
            "vision: input {h}x{w} smaller than the {KERNEL}x{KERNEL} kernel coverage"
        );
        assert!(
            h == IMAGE_SIZE && w == IMAGE_SIZE && c == IMAGE_CHANNELS,
            "vision: expected {IMAGE_SIZE}x{IMAGE_SIZE}x{IMAGE_CHANNELS} frames, got {h}x{w}x{c}"
        );
        let mut x = frames.clone();
        let mut c_in = c;
        for (li, conv) in self.convs.iter().enumerate() {
            let idx = self.indices(li, t, h, w, c_in);
            let (oh, ow) = (h / STRIDE, w / STRIDE);
            let cols = x.reshape(&[t * h * w * c_in]).gather(
                idx,
                &[t * oh * ow, KERNEL * KERNEL * c_in],
            );
            x = cols
                .matmul(&conv.weight)
                .add(&conv.bias)
                .relu()
                .reshape(&[t, oh, ow, conv.c_out]);
            h = oh;
            w = ow;
            c_in = conv.c_out;
        }
        x
    }

    fn encode_frames(&self, frames: &Tensor<S>) -> SpatioTemporalTensor<S> {
        let t = frames.shape()[0];
        let feats = self.features(frames); // [t, grid, grid, c]
        let flat = feats.reshape(&[t * SPATIAL_LEN, CONV_CHANNELS[2]]);
        let projected = self
            .proj
            .forward(&flat)
            .reshape(&[t, SPATIAL_LEN, self.pos_embed.shape()[1]])
            .add(&self.pos_embed);
        SpatioTemporalTensor::new(projected)
    }

    fn frames_tensor(images: &[&ToyImage]) -> Tensor<S> {
        let t = images.len();
        let mut data = Vec::with_capacity(t * IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS);
        for img in images {
            assert_eq!(
                img.pixels.len(),
                IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS,
                "vision: frame carries {} values, expected {IMAGE_SIZE}x{IMAGE_SIZE}x{IMAGE_CHANNELS}",
                img.pixels.len()
            );
            data.extend(img.pixels.iter().map(|&p| S::from_f64(p as f64)));
        }
        Tensor::from_vec(data, &[t, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS])
    }
}

impl<S: Scalar> Peripheral<S> for VisionPeripheral<S> {
    fn domain_id(&self) -> DomainId {
        DOMAIN_VISION
    }

    fn encode_input(&self, raw: &RawInput, _ctx: &mut ForwardCtx) -> SpatioTemporalTensor<S> {
        match raw {
            RawInput::Image(img) => self.encode_frames(&Self::frames_tensor(&[img])),
            RawInput::Video(video) => {
                assert!(!video.frames.is_empty(), "vision: empty video");
                let refs: Vec<&ToyImage> = video.frames.iter().collect();
                self.encode_frames(&Self::frames_tensor(&refs))
            }
            RawInput::Text(_) => panic!("vision peripheral fed a text input"),
        }
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("{prefix}.conv{i}.w"), conv.weight.clone()));
            out.push((format!("{prefix}.conv{i}.b"), conv.bias.clone()));
        }
        out.push((format!("{prefix}.pos"), self.pos_embed.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

pub struct LanguagePeripheral<S: Scalar> {
    pub embed: Embedding<S>, // [vocab, d_emb]
    proj: Linear<S>,         // d_emb -> d_model
    d_model: usize,
}

impl<S: Scalar> LanguagePeripheral<S> {
    pub fn new(rng: &mut Rng64, cfg: &ModelConfig) -> Self {
        LanguagePeripheral {
            embed: Embedding::new(rng, cfg.lang_vocab, cfg.d_emb),
            proj: Linear::new(rng, cfg.d_emb, cfg.d_model, false),
            d_model: cfg.d_model,
        }
    }
}

impl<S: Scalar> Peripheral<S> for LanguagePeripheral<S> {
    fn domain_id(&self) -> DomainId {
        DOMAIN_LANGUAGE
    }

    fn encode_input(&self, raw: &RawInput, _ctx: &mut ForwardCtx) -> SpatioTemporalTensor<S> {
        let RawInput::Text(seq) = raw else {
            panic!("language peripheral fed a non-text input");
        };
        assert!(!seq.ids.is_empty(), "language: empty token sequence");
        let t = seq.ids.len();
        let embedded = self.embed.lookup(&seq.ids); // bounds-checked lookup
        let projected = self.proj.forward(&embedded).reshape(&[t, 1, self.d_model]);
        SpatioTemporalTensor::new(projected)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.embed.params(&format!("{prefix}.embed"), out);
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// Token table: line number is the id in the on-disk format.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let mut index = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            let prev = index.insert(tok.clone(), i as u32);
            assert!(prev.is_none(), "vocab: duplicate token {tok:?}");
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenizer over the registered vocabulary.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = text
            .split_whitespace()
            .map(|tok| {
                self.id(tok)
                    .unwrap_or_else(|| panic!("vocab: unknown token {tok:?}"))
            })
            .collect();
        TokenSequence { ids }
    }

    pub fn text(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens: Result<Vec<String>, _> = f.lines().collect();
        Ok(Vocab::new(tokens?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy(16);
        cfg.d_model = 8;
        cfg.dropout = 0.0;
        cfg
    }

    #[test]
    fn image_encodes_to_single_timestep_grid() {
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(0), &cfg());
        let img = ToyImage::black();
        let out = v.encode_input(&RawInput::Image(img), &mut ForwardCtx::eval());
        assert_eq!(out.t(), 1);
        assert_eq!(out.s(), SPATIAL_LEN);
        assert_eq!(out.d_model(), 8);
    }

    #[test]
    fn video_timesteps_match_frame_count() {
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(0), &cfg());
        let video = ToyVideo { frames: vec![ToyImage::black(); 6] };
        let out = v.encode_input(&RawInput::Video(video), &mut ForwardCtx::eval());
        assert_eq!(out.t(), 6);
        assert_eq!(out.s(), SPATIAL_LEN);
    }

    #[test]
    fn frames_are_processed_independently() {
        // Permuting frames permutes the per-frame blocks of the output; the
        // peripheral does no temporal mixing.
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(1), &cfg());
        let mut a = ToyImage::black();
        a.set(10, 10, [1.0, 0.0, 0.0]);
        let mut b = ToyImage::black();
        b.set(20, 5, [0.0, 1.0, 0.0]);
        let ab = v.encode_input(
            &RawInput::Video(ToyVideo { frames: vec![a.clone(), b.clone()] }),
            &mut ForwardCtx::eval(),
        );
        let ba = v.encode_input(
            &RawInput::Video(ToyVideo { frames: vec![b, a] }),
            &mut ForwardCtx::eval(),
        );
        let block = SPATIAL_LEN * 8;
        let (vab, vba) = (ab.tensor().to_vec(), ba.tensor().to_vec());
        assert_eq!(&vab[0..block], &vba[block..2 * block]);
        assert_eq!(&vab[block..2 * block], &vba[0..block]);
    }

    #[test]
    fn conv_features_shift_with_the_input() {
        // Delta image shifted by the total stride must produce a feature map
        // shifted by exactly one grid row/column (circular padding keeps
        // this exact everywhere, including borders).
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(2), &cfg());
        let mut base = ToyImage::black();
        base.set(12, 12, [1.0, 1.0, 1.0]);
        let mut shifted = ToyImage::black();
        shifted.set(20, 12, [1.0, 1.0, 1.0]); // +8 rows = one output cell down
        let fa = v.features(&VisionPeripheral::frames_tensor(&[&base])).to_vec();
        let fb = v.features(&VisionPeripheral::frames_tensor(&[&shifted])).to_vec();
        let c = CONV_CHANNELS[2];
        for gy in 0..SPATIAL_GRID {
            for gx in 0..SPATIAL_GRID {
                let src = (gy * SPATIAL_GRID + gx) * c;
                let dst = (((gy + 1) % SPATIAL_GRID) * SPATIAL_GRID + gx) * c;
                assert_eq!(&fa[src..src + c], &fb[dst..dst + c], "cell ({gy},{gx})");
            }
        }
    }

    #[test]
    #[should_panic(expected = "smaller than the 3x3 kernel coverage")]
    fn undersized_input_is_a_dimension_error() {
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(3), &cfg());
        let tiny = Tensor::from_vec(vec![0.0; 2 * 2 * 3], &[1, 2, 2, 3]);
        v.features(&tiny);
    }

    #[test]
    fn text_encodes_with_unit_spatial_extent() {
        let l: LanguagePeripheral<f64> = LanguagePeripheral::new(&mut Rng64::new(4), &cfg());
        for len in [1usize, 5] {
            let seq = TokenSequence { ids: (0..len as u32).collect() };
            let out = l.encode_input(&RawInput::Text(seq), &mut ForwardCtx::eval());
            assert_eq!((out.t(), out.s(), out.d_model()), (len, 1, 8));
        }
    }

    #[test]
    fn swapping_embedding_rows_swaps_outputs() {
        let l: LanguagePeripheral<f64> = LanguagePeripheral::new(&mut Rng64::new(5), &cfg());
        let before = l
            .encode_input(&RawInput::Text(TokenSequence { ids: vec![2, 3] }), &mut ForwardCtx::eval())
            .tensor()
            .to_vec();
        // Swap vocab rows 2 and 3 in the table.
        let mut table = l.embed.table.to_vec();
        let w = table.len() / l.embed.rows();
        for c in 0..w {
            table.swap(2 * w + c, 3 * w + c);
        }
        l.embed.table.set_data(&table);
        let after = l
            .encode_input(&RawInput::Text(TokenSequence { ids: vec![3, 2] }), &mut ForwardCtx::eval())
            .tensor()
            .to_vec();
        assert_eq!(before, after);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn unknown_token_id_is_a_bounds_error() {
        let l: LanguagePeripheral<f64> = LanguagePeripheral::new(&mut Rng64::new(6), &cfg());
        l.encode_input(&RawInput::Text(TokenSequence { ids: vec![99] }), &mut ForwardCtx::eval());
    }

    #[test]
    fn peripheral_parameters_receive_gradients() {
        let v: VisionPeripheral<f64> = VisionPeripheral::new(&mut Rng64::new(7), &cfg());
        let mut img = ToyImage::black();
        img.set(8, 8, [0.9, 0.2, 0.4]);
        let out = v.encode_input(&RawInput::Image(img), &mut ForwardCtx::eval());
        out.tensor().mul(out.tensor()).sum_all().backward();
        let mut params = Vec::new();
        v.params("periph.vision", &mut params);
        for (name, p) in params {
            let grad = p.grad().unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(grad.iter().all(|g| g.is_finite()), "{name} has non-finite grad");
        }
    }

    #[test]
    fn vocab_file_roundtrip_preserves_ids() {
        let vocab = Vocab::new(vec!["<pad>".into(), "red".into(), "square".into()]);
        let dir = std::env::temp_dir().join("omninet_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.id("square"), Some(2));
        assert_eq!(loaded.token(1), "red");
        let toks = loaded.tokenize("red square");
        assert_eq!(toks.ids, vec![1, 2]);
    }
}
