//! Seeded synthetic tasks covering the four spatio-temporal input regimes:
//! sequence tagging (t>1, s=1), image captioning (t=1, s>1), two-input
//! visual question answering, and video motion classification (t>1, s>1).
//!
//! Every sample is a pure function of (task seed, sample index), computed
//! with integer-only RNG state, so datasets are bit-identical across
//! platforms and runs. Each task is exactly solvable from its inputs by a
//! closed-form rule, which the test-side oracles verify; a model that falls
//! short is limited by optimization, not label noise.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::peripherals::{RawInput, TokenSequence, ToyImage, ToyVideo, Vocab, IMAGE_SIZE};
use crate::rng::Rng64;

/// Target value marking unsupervised (padding) positions.
pub const IGNORE_INDEX: u32 = u32::MAX;
/// Output vocab id 0 pads y_shifted rows; id 1 is the end-of-sequence token.
pub const PAD: u32 = 0;
pub const EOS: u32 = 1;

// ── shared scene vocabulary ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Quadrants in canonical (row-major) caption order: top-left first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn center(self) -> (usize, usize) {
        match self {
            Quadrant::TopLeft => (8, 8),
            Quadrant::TopRight => (8, 24),
            Quadrant::BottomLeft => (24, 8),
            Quadrant::BottomRight => (24, 24),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "topleft",
            Quadrant::TopRight => "topright",
            Quadrant::BottomLeft => "bottomleft",
            Quadrant::BottomRight => "bottomright",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionClass {
    Right,
    Left,
    Up,
    Down,
    UpRight,
    UpLeft,
    DownRight,
    DownLeft,
    Still,
    Blinking,
}

impl MotionClass {
    pub const ALL: [MotionClass; 10] = [
        MotionClass::Right,
        MotionClass::Left,
        MotionClass::Up,
        MotionClass::Down,
        MotionClass::UpRight,
        MotionClass::UpLeft,
        MotionClass::DownRight,
        MotionClass::DownLeft,
        MotionClass::Still,
        MotionClass::Blinking,
    ];

    pub fn word(self) -> &'static str {
        match self {
            MotionClass::Right => "right",
            MotionClass::Left => "left",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
            MotionClass::UpRight => "upright",
            MotionClass::UpLeft => "upleft",
            MotionClass::DownRight => "downright",
            MotionClass::DownLeft => "downleft",
            MotionClass::Still => "still",
            MotionClass::Blinking => "blinking",
        }
    }

    /// Per-frame displacement (dy, dx) in pixels.
    pub fn step(self) -> (i32, i32) {
        match self {
            MotionClass::Right => (0, 2),
            MotionClass::Left => (0, -2),
            MotionClass::Up => (-2, 0),
            MotionClass::Down => (2, 0),
            MotionClass::UpRight => (-2, 2),
            MotionClass::UpLeft => (-2, -2),
            MotionClass::DownRight => (2, 2),
            MotionClass::DownLeft => (2, -2),
            MotionClass::Still | MotionClass::Blinking => (0, 0),
        }
    }
}

pub const VIDEO_FRAMES: usize = 6;

// ── rendering ───────────────────────────────────────────────────────

/// Shape pixels are strictly brighter than this; background noise stays
/// strictly below it.
pub const FOREGROUND_THRESHOLD: f32 = 0.4;
const NOISE_PIXELS: usize = 12;

/// Random brightness on the u8 grid, so exported pixels round-trip exactly.
/// Varying it keeps the sample space large enough that splits never collide.
fn shade(rng: &mut Rng64) -> f32 {
    (140 + rng.below(116)) as f32 / 255.0
}

/// Dim gray speckle drawn under the shapes. Its only purpose is entropy:
/// it puts image identity far beyond birthday-collision range across
/// splits without touching the decodable content.
fn sprinkle_noise(img: &mut ToyImage, rng: &mut Rng64) {
    for _ in 0..NOISE_PIXELS {
        let y = rng.below(IMAGE_SIZE);
        let x = rng.below(IMAGE_SIZE);
        let v = (20 + rng.below(60)) as f32 / 255.0;
        img.set(y, x, [v, v, v]);
    }
}

fn scaled(color: Color, intensity: f32) -> [f32; 3] {
    let rgb = color.rgb();
    [rgb[0] * intensity, rgb[1] * intensity, rgb[2] * intensity]
}

/// Draws a filled shape of ~9-11px extent centered at (cy, cx).
pub fn draw_shape(img: &mut ToyImage, kind: ShapeKind, rgb: [f32; 3], cy: i32, cx: i32) {
    let mut put = |y: i32, x: i32| {
        if (0..IMAGE_SIZE as i32).contains(&y) && (0..IMAGE_SIZE as i32).contains(&x) {
            img.set(y as usize, x as usize, rgb);
        }
    };
    match kind {
        ShapeKind::Square => {
            for dy in -4..=4 {
                for dx in -4..=4 {
                    put(cy + dy, cx + dx);
                }
            }
        }
        ShapeKind::Circle => {
            for dy in -5..=5i32 {
                for dx in -5..=5i32 {
                    if dy * dy + dx * dx <= 25 {
                        put(cy + dy, cx + dx);
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            // Apex up: row widths grow towards the base.
            for dy in 0..=8i32 {
                let half = dy * 5 / 8;
                for dx in -half..=half {
                    put(cy - 4 + dy, cx + dx);
                }
            }
        }
    }
}

// ── tagging grammar ─────────────────────────────────────────────────

pub const TAG_CLASSES: usize = 5;
const TAG_WORDS: [[&str; 8]; TAG_CLASSES] = [
    ["the", "a", "each", "this", "that", "some", "every", "no"],
    ["cat", "dog", "bird", "car", "tree", "house", "fish", "book"],
    ["runs", "sees", "finds", "takes", "makes", "holds", "moves", "keeps"],
    ["big", "small", "fast", "slow", "old", "new", "tall", "dark"],
    ["quickly", "slowly", "often", "never", "again", "away", "here", "there"],
];
/// Words belonging to no fixed class: their tag is the previous word's tag
/// plus one (mod 5), so context is required to tag them.
pub const AMBIGUOUS_WORDS: [&str; 4] = ["light", "back", "round", "spark"];
const QUESTION_WORDS: [&str; 11] = [
    "what", "color", "is", "the", "where", "how", "many", "shapes", "circle", "square", "triangle",
];

/// The shared language-peripheral vocabulary for the whole toy suite:
/// padding, the tagging grammar, the ambiguous words, and the question
/// words. Identical for every model so trunks are interchangeable.
pub fn suite_vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut tokens: Vec<String> = vec!["<pad>".into()];
        for class in &TAG_WORDS {
            tokens.extend(class.iter().map(|w| w.to_string()));
        }
        tokens.extend(AMBIGUOUS_WORDS.iter().map(|w| w.to_string()));
        for w in QUESTION_WORDS {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocab::new(tokens)
    })
}

fn output_vocab(words: &[&str]) -> Vocab {
    let mut tokens: Vec<String> = vec!["<pad>".into(), "<eos>".into()];
    tokens.extend(words.iter().map(|w| w.to_string()));
    Vocab::new(tokens)
}

pub fn tagging_output_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| output_vocab(&["det", "noun", "verb", "adj", "adv"]))
}

pub fn caption_output_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        output_vocab(&[
            "red", "green", "blue", "yellow", "circle", "square", "triangle", "topleft",
            "topright", "bottomleft", "bottomright", "and",
        ])
    })
}

pub fn vqa_output_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        output_vocab(&[
            "red", "green", "blue", "yellow", "topleft", "topright", "bottomleft", "bottomright",
            "one", "two",
        ])
    })
}

pub fn video_output_vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let words: Vec<&str> = MotionClass::ALL.iter().map(|c| c.word()).collect();
        output_vocab(&words)
    })
}

// ── task definitions ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Tagging,
    Captioning,
    Vqa,
    Video,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Tagging, TaskKind::Captioning, TaskKind::Vqa, TaskKind::Video];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Tagging => "tagging",
            TaskKind::Captioning => "captioning",
            TaskKind::Vqa => "vqa",
            TaskKind::Video => "video",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TaskKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn output_vocab(self) -> &'static Vocab {
        match self {
            TaskKind::Tagging => tagging_output_vocab(),
            TaskKind::Captioning => caption_output_vocab(),
            TaskKind::Vqa => vqa_output_vocab(),
            TaskKind::Video => video_output_vocab(),
        }
    }

    /// Max decode length: sequence tasks emit their tokens plus EOS;
    /// classification tasks answer in a single step.
    pub fn max_out_len(self) -> usize {
        match self {
            TaskKind::Tagging => MAX_SENTENCE + 1,
            TaskKind::Captioning => 8,
            TaskKind::Vqa | TaskKind::Video => 1,
        }
    }
}

pub const MAX_SENTENCE: usize = 12;
const MIN_SENTENCE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One supervised example: the encode-call inputs in order and the target
/// output ids (EOS-terminated for sequence tasks, a single class id for
/// single-step tasks).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<RawInput>,
    pub target: Vec<u32>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        TaskSpec {
            kind,
            seed,
            train: 8000,
            val: 1000,
            test: 1000,
        }
    }

    pub fn with_sizes(kind: TaskKind, seed: u64, train: usize, val: usize, test: usize) -> Self {
        TaskSpec { kind, seed, train, val, test }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn head_spec(&self) -> crate::cnp::TaskHeadSpec {
        crate::cnp::TaskHeadSpec {
            name: self.kind.name().to_string(),
            vocab_size: self.kind.output_vocab().len(),
            max_out_len: self.kind.max_out_len(),
        }
    }

    /// Disjoint global index ranges per split.
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.train + self.val + self.test,
        }
    }

    /// The sample at a global index: a pure function of (seed, index).
    pub fn generate(&self, index: usize) -> Sample {
        let mut rng = Rng64::for_index(self.seed ^ (self.kind as u64) << 56, index as u64);
        match self.kind {
            TaskKind::Tagging => gen_tagging(&mut rng),
            TaskKind::Captioning => gen_captioning(&mut rng).0,
            TaskKind::Vqa => gen_vqa(&mut rng),
            TaskKind::Video => gen_video(&mut rng).0,
        }
    }

    /// The captioning scene behind a sample (captioning task only).
    pub fn caption_scene(&self, index: usize) -> Scene {
        assert_eq!(self.kind, TaskKind::Captioning);
        let mut rng = Rng64::for_index(self.seed ^ (self.kind as u64) << 56, index as u64);
        gen_captioning(&mut rng).1
    }

    /// The ground-truth motion metadata behind a sample (video task only).
    pub fn video_meta(&self, index: usize) -> VideoMeta {
        assert_eq!(self.kind, TaskKind::Video);
        let mut rng = Rng64::for_index(self.seed ^ (self.kind as u64) << 56, index as u64);
        gen_video(&mut rng).1
    }
}

/// The canonical four-task suite.
pub fn suite_tasks(seed: u64) -> Vec<TaskSpec> {
    TaskKind::ALL
        .iter()
        .map(|&kind| TaskSpec::new(kind, seed.wrapping_add(kind as u64)))
        .collect()
}

// ── generators ──────────────────────────────────────────────────────

fn gen_tagging(rng: &mut Rng64) -> Sample {
    let vocab = suite_vocab();
    let out = tagging_output_vocab();
    let len = MIN_SENTENCE + rng.below(MAX_SENTENCE - MIN_SENTENCE + 1);
    let mut words: Vec<u32> = Vec::with_capacity(len);
    let mut tags: Vec<u32> = Vec::with_capacity(len + 1);
    let mut prev_tag: Option<usize> = None;
    let mut prev_ambiguous = false;
    for i in 0..len {
        let ambiguous = i > 0 && !prev_ambiguous && rng.coin(0.12);
        let (word, tag) = if ambiguous {
            let word = *rng.choose(&AMBIGUOUS_WORDS);
            let tag = (prev_tag.unwrap() + 1) % TAG_CLASSES;
            (word, tag)
        } else {
            let tag = rng.below(TAG_CLASSES);
            let word = *rng.choose(&TAG_WORDS[tag]);
            (word, tag)
        };
        words.push(vocab.id(word).unwrap());
        tags.push(out.id(out.token((tag + 2) as u32)).unwrap());
        prev_tag = Some(tag);
        prev_ambiguous = ambiguous;
    }
    tags.push(EOS);
    Sample {
        inputs: vec![RawInput::Text(TokenSequence { ids: words })],
        target: tags,
    }
}

/// What a captioning image contains, in canonical quadrant order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shapes: Vec<(Color, ShapeKind, Quadrant)>,
}

impl Scene {
    pub fn caption_ids(&self) -> Vec<u32> {
        let out = caption_output_vocab();
        let mut ids = Vec::new();
        for (i, (color, shape, quad)) in self.shapes.iter().enumerate() {
            if i > 0 {
                ids.push(out.id("and").unwrap());
            }
            ids.push(out.id(color.word()).unwrap());
            ids.push(out.id(shape.word()).unwrap());
            ids.push(out.id(quad.word()).unwrap());
        }
        ids.push(EOS);
        ids
    }
}

fn render_scene(scene: &Scene, rng: &mut Rng64) -> ToyImage {
    let mut img = ToyImage::black();
    sprinkle_noise(&mut img, rng);
    for &(color, shape, quad) in &scene.shapes {
        let (cy, cx) = quad.center();
        let jy = rng.below(5) as i32 - 2;
        let jx = rng.below(5) as i32 - 2;
        let rgb = scaled(color, shade(rng));
        draw_shape(&mut img, shape, rgb, cy as i32 + jy, cx as i32 + jx);
    }
    img
}

fn random_scene(rng: &mut Rng64, n_shapes: usize, distinct_kinds: bool) -> Scene {
    let mut quads: Vec<Quadrant> = Vec::new();
    while quads.len() < n_shapes {
        let q = *rng.choose(&Quadrant::ALL);
        if !quads.contains(&q) {
            quads.push(q);
        }
    }
    quads.sort(); // canonical caption order: top-left first
    let mut kinds: Vec<ShapeKind> = Vec::new();
    while kinds.len() < n_shapes {
        let k = *rng.choose(&ShapeKind::ALL);
        if !distinct_kinds || !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    let shapes = quads
        .into_iter()
        .zip(kinds)
        .map(|(q, k)| (*rng.choose(&Color::ALL), k, q))
        .collect();
    Scene { shapes }
}

fn gen_captioning(rng: &mut Rng64) -> (Sample, Scene) {
    // Two-shape scenes dominate so captions genuinely need spatial order.
    let n_shapes = if rng.coin(0.3) { 1 } else { 2 };
    let scene = random_scene(rng, n_shapes, false);
    let img = render_scene(&scene, rng);
    let sample = Sample {
        inputs: vec![RawInput::Image(img)],
        target: scene.caption_ids(),
    };
    (sample, scene)
}

fn gen_vqa(rng: &mut Rng64) -> Sample {
    let vocab = suite_vocab();
    let out = vqa_output_vocab();
    let n_shapes = if rng.coin(0.5) { 1 } else { 2 };
    // Distinct shape kinds so color/where questions are never ambiguous.
    let scene = random_scene(rng, n_shapes, true);
    let img = render_scene(&scene, rng);
    let (question, answer) = match rng.below(3) {
        0 => {
            let &(color, kind, _) = rng.choose(&scene.shapes);
            (
                format!("what color is the {}", kind.word()),
                out.id(color.word()).unwrap(),
            )
        }
        1 => {
            let &(_, kind, quad) = rng.choose(&scene.shapes);
            (
                format!("where is the {}", kind.word()),
                out.id(quad.word()).unwrap(),
            )
        }
        _ => {
            let word = if n_shapes == 1 { "one" } else { "two" };
            ("how many shapes".to_string(), out.id(word).unwrap())
        }
    };
    Sample {
        inputs: vec![
            RawInput::Image(img),
            RawInput::Text(vocab.tokenize(&question)),
        ],
        target: vec![answer],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub color: Color,
    pub shape: ShapeKind,
    pub class: MotionClass,
}

fn gen_video(rng: &mut Rng64) -> (Sample, VideoMeta) {
    let class = *rng.choose(&MotionClass::ALL);
    let color = *rng.choose(&Color::ALL);
    let shape = *rng.choose(&ShapeKind::ALL);
    let (dy, dx) = class.step();
    let travel = (VIDEO_FRAMES as i32 - 1) * 2;
    let start_range = |d: i32| -> (i32, i32) {
        match d.signum() {
            1 => (6, 25 - travel),
            -1 => (6 + travel, 25),
            _ => (6, 25),
        }
    };
    let (y_lo, y_hi) = start_range(dy);
    let (x_lo, x_hi) = start_range(dx);
    let cy0 = y_lo + rng.below((y_hi - y_lo + 1) as usize) as i32;
    let cx0 = x_lo + rng.below((x_hi - x_lo + 1) as usize) as i32;
    let rgb = scaled(color, shade(rng));
    let mut frames = Vec::with_capacity(VIDEO_FRAMES);
    for f in 0..VIDEO_FRAMES {
        let mut img = ToyImage::black();
        sprinkle_noise(&mut img, rng);
        let visible = class != MotionClass::Blinking || f % 2 == 0;
        if visible {
            draw_shape(&mut img, shape, rgb, cy0 + dy * f as i32, cx0 + dx * f as i32);
        }
        frames.push(img);
    }
    let out = video_output_vocab();
    let answer = out.id(class.word()).unwrap();
    (
        Sample {
            inputs: vec![RawInput::Video(ToyVideo { frames })],
            target: vec![answer],
        },
        VideoMeta { color, shape, class },
    )
}

// ── batching ────────────────────────────────────────────────────────

/// A padded mini-batch. `samples` keeps the exact per-sample content; the
/// id matrices carry the same information padded to the batch maxima, with
/// masks delimiting real positions and `IGNORE_INDEX` marking unsupervised
/// target slots.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub y_shifted: Vec<Vec<u32>>,    // [B][max_n - 1], PAD-filled
    pub targets: Vec<Vec<u32>>,      // [B][max_n], IGNORE_INDEX-filled
    pub target_mask: Vec<Vec<bool>>, // true at supervised positions
    pub text_ids: Vec<Vec<u32>>,     // padded text inputs (empty row if none)
    pub text_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn make_batch(task: &TaskSpec, indices: &[usize]) -> Batch {
    assert!(!indices.is_empty(), "make_batch: empty index list");
    let samples: Vec<Sample> = indices.iter().map(|&i| task.generate(i)).collect();
    let max_n = samples.iter().map(|s| s.target.len()).max().unwrap();
    let max_text = samples
        .iter()
        .map(|s| {
            s.inputs
                .iter()
                .map(|inp| match inp {
                    RawInput::Text(t) => t.ids.len(),
                    _ => 0,
                })
                .max()
                .unwrap_or(0)
        })
        .max()
        .unwrap();
    let mut y_shifted = Vec::new();
    let mut targets = Vec::new();
    let mut target_mask = Vec::new();
    let mut text_ids = Vec::new();
    let mut text_mask = Vec::new();
    for s in &samples {
        let n = s.target.len();
        let mut ys = vec![PAD; max_n.saturating_sub(1)];
        ys[..n - 1].copy_from_slice(&s.target[..n - 1]);
        y_shifted.push(ys);
        let mut tg = vec![IGNORE_INDEX; max_n];
        tg[..n].copy_from_slice(&s.target);
        targets.push(tg);
        let mut tm = vec![false; max_n];
        tm[..n].fill(true);
        target_mask.push(tm);

        let text = s.inputs.iter().find_map(|inp| match inp {
            RawInput::Text(t) => Some(&t.ids),
            _ => None,
        });
        let mut ids = vec![PAD; max_text];
        let mut mask = vec![false; max_text];
        if let Some(t) = text {
            ids[..t.len()].copy_from_slice(t);
            mask[..t.len()].fill(true);
        }
        text_ids.push(ids);
        text_mask.push(mask);
    }
    Batch {
        samples,
        y_shifted,
        targets,
        target_mask,
        text_ids,
        text_mask,
    }
}

// ── dataset export ──────────────────────────────────────────────────
//
// One file per split. Byte layout, little-endian throughout:
//   file  := record*
//   record := u32 payload_len, payload
//   payload := u32 n_inputs, input*, u32 target_len, u32 target_id*
//   input := u8 tag, body
//     tag 0 (text):  u32 len, u32 id*
//     tag 1 (image): 32*32*3 bytes, pixel = round(value * 255)
//     tag 2 (video): u8 n_frames, frames as image bodies
// Pixel values in this suite are exactly 0.0 or 1.0, so the u8 encoding
// round-trips losslessly.

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn image_bytes(img: &ToyImage, buf: &mut Vec<u8>) {
    buf.extend(img.pixels.iter().map(|&p| (p * 255.0).round() as u8));
}

fn encode_sample(sample: &Sample) -> Vec<u8> {
    let mut payload = Vec::new();
    put_u32(&mut payload, sample.inputs.len() as u32);
    for input in &sample.inputs {
        match input {
            RawInput::Text(t) => {
                payload.push(0);
                put_u32(&mut payload, t.ids.len() as u32);
                for &id in &t.ids {
                    put_u32(&mut payload, id);
                }
            }
            RawInput::Image(img) => {
                payload.push(1);
                image_bytes(img, &mut payload);
            }
            RawInput::Video(v) => {
                payload.push(2);
                payload.push(v.frames.len() as u8);
                for frame in &v.frames {
                    image_bytes(frame, &mut payload);
                }
            }
        }
    }
    put_u32(&mut payload, sample.target.len() as u32);
    for &t in &sample.target {
        put_u32(&mut payload, t);
    }
    payload
}

pub fn export_split(task: &TaskSpec, split: Split, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in task.split_range(split) {
        let payload = encode_sample(&task.generate(i));
        f.write_all(&(payload.len() as u32).to_le_bytes())?;
        f.write_all(&payload)?;
    }
    Ok(())
}

/// Reads an exported split back; the inverse of [`export_split`].
pub fn import_split(path: &Path) -> std::io::Result<Vec<Sample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take_u32 = |bytes: &[u8], pos: &mut usize| -> u32 {
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        v
    };
    let take_image = |bytes: &[u8], pos: &mut usize| -> ToyImage {
        let n = IMAGE_SIZE * IMAGE_SIZE * 3;
        let pixels = bytes[*pos..*pos + n].iter().map(|&b| b as f32 / 255.0).collect();
        *pos += n;
        ToyImage { pixels }
    };
    let mut samples = Vec::new();
    while pos < bytes.len() {
        let _len = take_u32(&bytes, &mut pos);
        let n_inputs = take_u32(&bytes, &mut pos);
        let mut inputs = Vec::new();
        for _ in 0..n_inputs {
            let tag = bytes[pos];
            pos += 1;
            inputs.push(match tag {
                0 => {
                    let len = take_u32(&bytes, &mut pos);
                    let ids = (0..len).map(|_| take_u32(&bytes, &mut pos)).collect();
                    RawInput::Text(TokenSequence { ids })
                }
                1 => RawInput::Image(take_image(&bytes, &mut pos)),
                2 => {
                    let n_frames = bytes[pos] as usize;
                    pos += 1;
                    let frames = (0..n_frames).map(|_| take_image(&bytes, &mut pos)).collect();
                    RawInput::Video(ToyVideo { frames })
                }
                other => panic!("import: unknown input tag {other}"),
            });
        }
        let target_len = take_u32(&bytes, &mut pos);
        let target = (0..target_len).map(|_| take_u32(&bytes, &mut pos)).collect();
        samples.push(Sample { inputs, target });
    }
    Ok(samples)
}
