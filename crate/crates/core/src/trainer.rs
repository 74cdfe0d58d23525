//! Loss, Adam with the inverse-square-root warmup schedule, and the
//! multi-task trainer.
//!
//! One worker per task. Every iteration a worker copies the global
//! parameters into its local replica, runs forward/backward on a local
//! batch, writes its gradients to the global model, and invokes the shared
//! optimizer. In sequential mode the workers take strict turns on one
//! thread, which makes runs bitwise reproducible; in async mode they run
//! concurrently and write to the shared parameter blocks without
//! cross-worker ordering (individual elements are atomic, so reads may be
//! stale but never torn).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};

use crate::cache::TaskId;
use crate::cnp::{ModelConfig, OmniNetModel};
use crate::metrics::{corpus_bleu4, token_accuracy, MetricsLog};
use crate::nn::ForwardCtx;
use crate::rng::Rng64;
use crate::scalar::{AtomicScalar, Scalar};
use crate::tasks::{make_batch, Batch, Sample, Split, TaskKind, TaskSpec, EOS, IGNORE_INDEX};
use crate::tensor::{concat, no_grad, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("gradient for parameter {param} is not finite (task {task}, step {step})")]
    NonFiniteGrad {
        param: String,
        task: String,
        step: u64,
    },
    #[error("worker for task {task} panicked; partial checkpoint retained")]
    WorkerPanic { task: String },
}

/// Training aborted: the error plus a checkpoint of the global parameters
/// at the moment of failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: TrainError,
    pub partial_checkpoint: Vec<u8>,
}

// ── optimizer ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First/second moment buffers for one parameter block.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
        }
    }
}

/// One bias-corrected Adam update in place. `step` counts from 1.
pub fn adam_update<S: Scalar>(
    values: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    step: u64,
    lr: f64,
    hp: &AdamHyper,
) {
    debug_assert!(step >= 1);
    let b1 = S::from_f64(hp.beta1);
    let b2 = S::from_f64(hp.beta2);
    let one_m_b1 = S::from_f64(1.0 - hp.beta1);
    let one_m_b2 = S::from_f64(1.0 - hp.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - hp.beta1.powi(step as i32)));
    let corr2 = S::from_f64(1.0 / (1.0 - hp.beta2.powi(step as i32)));
    let eps = S::from_f64(hp.eps);
    let lr = S::from_f64(lr);
    for i in 0..values.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + one_m_b1 * g;
        state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
        let m_hat = state.m[i] * corr1;
        let v_hat = state.v[i] * corr2;
        values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`; peaks exactly at
/// `step == warmup`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> f64 {
    assert!(step >= 1, "noam_lr: step counts from 1");
    let s = step as f64;
    let w = warmup as f64;
    (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) {
    let mut norm_sq = S::zero();
    for block in grads.iter() {
        for &g in block {
            norm_sq = norm_sq + g * g;
        }
    }
    let norm = norm_sq.sqrt().to_f64s();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for block in grads.iter_mut() {
            for g in block.iter_mut() {
                *g = *g * scale;
            }
        }
    }
}

// ── global parameter store ──────────────────────────────────────────

struct Block<S: AtomicScalar> {
    name: String,
    values: Vec<S::Atom>,
    grads: Vec<S::Atom>,
    /// Moment state is sharded per block with exclusive access; parameter
    /// values stay lock-free.
    moments: Mutex<AdamState<S>>,
}

pub struct GlobalStore<S: AtomicScalar> {
    blocks: Vec<Block<S>>,
    step: AtomicU64,
}

impl<S: AtomicScalar> GlobalStore<S> {
    pub fn from_model(model: &OmniNetModel<S>) -> Self {
        let blocks = model
            .parameters()
            .into_iter()
            .map(|(name, tensor)| {
                let data = tensor.data();
                Block {
                    name,
                    values: data.iter().map(|&v| S::atom(v)).collect(),
                    grads: data.iter().map(|_| S::atom(S::zero())).collect(),
                    moments: Mutex::new(AdamState::new(data.len())),
                }
            })
            .collect();
        GlobalStore {
            blocks,
            step: AtomicU64::new(0),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step.load(Ordering::Relaxed)
    }

    /// Copies global values into a replica's parameter tensors.
    pub fn load_into(&self, params: &[(String, Tensor<S>)]) {
        assert_eq!(params.len(), self.blocks.len());
        let mut buf: Vec<S> = Vec::new();
        for (block, (name, tensor)) in self.blocks.iter().zip(params) {
            debug_assert_eq!(&block.name, name);
            buf.clear();
            buf.extend(block.values.iter().map(S::load));
            tensor.set_data(&buf);
        }
    }

    /// Writes a worker's gradients into the shared gradient buffers.
    pub fn write_grads(&self, grads: &[Vec<S>]) {
        for (block, g) in self.blocks.iter().zip(grads) {
            for (slot, &v) in block.grads.iter().zip(g) {
                S::store(slot, v);
            }
        }
    }

    /// Shared optimizer: consumes whatever is in the gradient buffers.
    /// Concurrent callers interleave per block; element reads/writes are
    /// atomic, matching the lock-free update contract.
    pub fn optimize(&self, step: u64, lr: f64, hp: &AdamHyper) {
        for block in &self.blocks {
            let mut moments = block.moments.lock().expect("moment shard poisoned");
            let grads: Vec<S> = block.grads.iter().map(S::load).collect();
            let mut values: Vec<S> = block.values.iter().map(S::load).collect();
            adam_update(&mut values, &grads, &mut moments, step, lr, hp);
            for (slot, &v) in block.values.iter().zip(&values) {
                S::store(slot, v);
            }
        }
    }

    pub fn snapshot_into_model(&self, model: &OmniNetModel<S>) {
        self.load_into(&model.parameters());
    }
}

// ── loss ────────────────────────────────────────────────────────────

/// Cross entropy of one sample: encode all inputs, teacher-forced decode,
/// mean over the sample's target positions.
pub fn sample_loss<S: Scalar>(
    model: &OmniNetModel<S>,
    sample: &Sample,
    task: TaskId,
    ctx: &mut ForwardCtx,
) -> Tensor<S> {
    let y = &sample.target;
    let state = model.encode_sample(&sample.inputs, ctx);
    let logits = model.decode_step_logits(&y[..y.len() - 1], task, &state, ctx);
    logits.cross_entropy(y, IGNORE_INDEX)
}

/// Batch loss: mean over the per-sample losses, so padding and length mix
/// never reweight samples against each other.
pub fn batch_loss<S: Scalar>(
    model: &OmniNetModel<S>,
    batch: &Batch,
    task: TaskId,
    ctx: &mut ForwardCtx,
) -> Tensor<S> {
    let losses: Vec<Tensor<S>> = batch
        .samples
        .iter()
        .map(|s| sample_loss(model, s, task, ctx))
        .collect();
    let refs: Vec<&Tensor<S>> = losses.iter().collect();
    concat(&refs, 0).mean_all()
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoLinkArray,
    NoSpatialCache,
}

impl Ablation {
    pub fn flag_name(self) -> &'static str {
        match self {
            Ablation::NoLinkArray => "no-link-array",
            Ablation::NoSpatialCache => "no-spatial-cache",
        }
    }

    pub fn from_flag(flag: &str) -> Option<Self> {
        match flag {
            "no-link-array" => Some(Ablation::NoLinkArray),
            "no-spatial-cache" => Some(Ablation::NoSpatialCache),
            _ => None,
        }
    }
}

fn eval_ctx(ablation: Option<Ablation>) -> ForwardCtx {
    let mut ctx = ForwardCtx::eval();
    match ablation {
        Some(Ablation::NoLinkArray) => ctx.no_link_array = true,
        Some(Ablation::NoSpatialCache) => ctx.no_spatial_cache = true,
        None => {}
    }
    ctx
}

/// The headline metric per task type.
pub fn primary_metric(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Captioning => "exact_match",
        _ => "accuracy",
    }
}

/// Deterministic evaluation over (a prefix of) a split. Tagging scores
/// teacher-forced token accuracy, captioning greedy exact-match plus
/// corpus BLEU-4, the single-step tasks answer accuracy.
pub fn evaluate<S: Scalar>(
    model: &OmniNetModel<S>,
    task: &TaskSpec,
    task_id: TaskId,
    split: Split,
    limit: Option<usize>,
    ablation: Option<Ablation>,
) -> BTreeMap<String, f64> {
    let range = task.split_range(split);
    assert!(!range.is_empty(), "evaluate: split {:?} is empty", split.name());
    let end = limit.map_or(range.end, |l| range.end.min(range.start + l));
    let indices: Vec<usize> = (range.start..end).collect();
    let mut out = BTreeMap::new();
    no_grad(|| match task.kind {
        TaskKind::Tagging => {
            let (mut correct, mut total) = (0usize, 0usize);
            for &i in &indices {
                let sample = task.generate(i);
                let mut ctx = eval_ctx(ablation);
                let state = model.encode_sample(&sample.inputs, &mut ctx);
                let logits = model.decode_step_logits(
                    &sample.target[..sample.target.len() - 1],
                    task_id,
                    &state,
                    &mut ctx,
                );
                let preds: Vec<u32> = logits.argmax_last().iter().map(|&p| p as u32).collect();
                let (c, t) = token_accuracy(&preds, &sample.target, IGNORE_INDEX);
                correct += c;
                total += t;
            }
            out.insert("accuracy".into(), correct as f64 / total as f64);
        }
        TaskKind::Captioning => {
            let mut exact = 0usize;
            let mut candidates = Vec::new();
            let mut references = Vec::new();
            for &i in &indices {
                let sample = task.generate(i);
                let mut ctx = eval_ctx(ablation);
                let state = model.encode_sample(&sample.inputs, &mut ctx);
                let max_len = task.kind.max_out_len();
                let generated = model.generate_greedy(task_id, &state, max_len, EOS, &mut ctx);
                let reference: Vec<u32> = sample.target[..sample.target.len() - 1].to_vec();
                if generated == reference {
                    exact += 1;
                }
                candidates.push(generated);
                references.push(reference);
            }
            out.insert("exact_match".into(), exact as f64 / indices.len() as f64);
            out.insert("bleu4".into(), corpus_bleu4(&candidates, &references));
        }
        TaskKind::Vqa | TaskKind::Video => {
            let mut correct = 0usize;
            for &i in &indices {
                let sample = task.generate(i);
                let mut ctx = eval_ctx(ablation);
                let state = model.encode_sample(&sample.inputs, &mut ctx);
                let logits = model.decode_step_logits(&[], task_id, &state, &mut ctx);
                if logits.argmax_last()[0] as u32 == sample.target[0] {
                    correct += 1;
                }
            }
            out.insert("accuracy".into(), correct as f64 / indices.len() as f64);
        }
    });
    out
}

// ── multi-task training ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyncMode {
    /// Workers take strict turns on one thread; bitwise deterministic.
    Sequential,
    /// One thread per task, lock-free shared parameter updates.
    Hogwild,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub tasks: Vec<TaskSpec>,
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub mode: SyncMode,
    pub seed: u64,
    /// Evaluate every N worker rounds on a val prefix (0 disables).
    pub eval_every: usize,
    pub eval_samples: usize,
    pub warmup: u64,
    pub clip_norm: f64,
    pub ablation: Option<Ablation>,
}

impl TrainConfig {
    pub fn new(tasks: Vec<TaskSpec>, steps_per_task: usize, seed: u64) -> Self {
        assert!(!tasks.is_empty(), "train: at least one task required");
        TrainConfig {
            tasks,
            steps_per_task,
            batch_size: 16,
            mode: SyncMode::Sequential,
            seed,
            eval_every: 0,
            eval_samples: 200,
            warmup: 1000,
            clip_norm: 1.0,
            ablation: None,
        }
    }
}

pub struct TrainOutcome {
    /// (task name, metric name) -> final full-validation value.
    pub final_metrics: BTreeMap<(String, String), f64>,
    pub log: String,
    pub checkpoint: Vec<u8>,
    pub total_steps: u64,
}

struct Worker<S: Scalar> {
    task: TaskSpec,
    task_id: TaskId,
    model: OmniNetModel<S>,
    params: Vec<(String, Tensor<S>)>,
    batch_rng: Rng64,
    steps_done: u64,
}

impl<S: Scalar> Worker<S> {
    fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, index: usize) -> Self {
        let specs: Vec<_> = cfg.tasks.iter().map(TaskSpec::head_spec).collect();
        let model = OmniNetModel::new(model_cfg.clone(), &specs, cfg.seed);
        let params = model.parameters();
        Worker {
            task: cfg.tasks[index].clone(),
            task_id: TaskId(index),
            model,
            params,
            batch_rng: Rng64::for_index(cfg.seed ^ 0xA11C_E000, index as u64),
            steps_done: 0,
        }
    }

    fn train_ctx(&self, cfg: &TrainConfig, dropout: f64) -> ForwardCtx {
        let stream = Rng64::for_index(
            cfg.seed ^ ((self.task_id.0 as u64 + 1) << 40),
            self.steps_done,
        );
        let mut ctx = ForwardCtx::train(dropout, stream);
        match cfg.ablation {
            Some(Ablation::NoLinkArray) => ctx.no_link_array = true,
            Some(Ablation::NoSpatialCache) => ctx.no_spatial_cache = true,
            None => {}
        }
        ctx
    }

    /// One training iteration against the global store. Returns the batch
    /// loss and the global step this update was applied at.
    fn step<A>(
        &mut self,
        store: &GlobalStore<A>,
        cfg: &TrainConfig,
        hp: &AdamHyper,
        d_model: usize,
        dropout: f64,
    ) -> Result<(f64, u64), TrainError>
    where
        A: AtomicScalar,
        S: Scalar,
        Worker<S>: WorkerStore<A, S>,
    {
        <Self as WorkerStore<A, S>>::sync_from(self, store);
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.batch_rng.below(self.task.train))
            .collect();
        let batch = make_batch(&self.task, &indices);
        for (_, p) in &self.params {
            p.zero_grad();
        }
        let mut ctx = self.train_ctx(cfg, dropout);
        let loss = batch_loss(&self.model, &batch, self.task_id, &mut ctx);
        let loss_value = loss.item().to_f64s();
        loss.backward();
        let mut grads: Vec<Vec<S>> = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let g = p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    param: name.clone(),
                    task: self.task.name().to_string(),
                    step: self.steps_done,
                });
            }
            grads.push(g);
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let step = <Self as WorkerStore<A, S>>::push_update(self, store, &grads, cfg, hp, d_model);
        self.steps_done += 1;
        Ok((loss_value, step))
    }
}

/// Glue between a worker at scalar type S and a store at the same type.
/// (Separate trait so the generic worker code reads cleanly.)
trait WorkerStore<A: AtomicScalar, S: Scalar> {
    fn sync_from(&mut self, store: &GlobalStore<A>);
    fn push_update(
        &mut self,
        store: &GlobalStore<A>,
        grads: &[Vec<S>],
        cfg: &TrainConfig,
        hp: &AdamHyper,
        d_model: usize,
    ) -> u64;
}

impl<S: AtomicScalar> WorkerStore<S, S> for Worker<S> {
    fn sync_from(&mut self, store: &GlobalStore<S>) {
        store.load_into(&self.params);
    }

    fn push_update(
        &mut self,
        store: &GlobalStore<S>,
        grads: &[Vec<S>],
        cfg: &TrainConfig,
        hp: &AdamHyper,
        d_model: usize,
    ) -> u64 {
        store.write_grads(grads);
        let step = store.step.fetch_add(1, Ordering::Relaxed) + 1;
        let lr = noam_lr(step, d_model, cfg.warmup);
        store.optimize(step, lr, hp);
        step
    }
}

/// Trains one worker per task and returns the final model metrics, the
/// metrics log, and a checkpoint of the global parameters.
pub fn train_multitask<S: AtomicScalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainAbort> {
    let hp = AdamHyper::default();
    let specs: Vec<_> = cfg.tasks.iter().map(TaskSpec::head_spec).collect();
    let reference: OmniNetModel<S> = OmniNetModel::new(model_cfg.clone(), &specs, cfg.seed);
    let store = GlobalStore::from_model(&reference);
    let mut log = MetricsLog::new();

    let abort = |error: TrainError, store: &GlobalStore<S>| -> TrainAbort {
        store.snapshot_into_model(&reference);
        TrainAbort {
            error,
            partial_checkpoint: crate::checkpoint::serialize(&reference),
        }
    };

    match cfg.mode {
        SyncMode::Sequential => {
            let mut workers: Vec<Worker<S>> = (0..cfg.tasks.len())
                .map(|i| Worker::new(model_cfg, cfg, i))
                .collect();
            for round in 0..cfg.steps_per_task {
                for worker in workers.iter_mut() {
                    let (loss, step) = worker
                        .step(&store, cfg, &hp, model_cfg.d_model, model_cfg.dropout)
                        .map_err(|e| abort(e, &store))?;
                    log.record(step, worker.task.name(), "train", "loss", loss);
                }
                if cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0 {
                    store.snapshot_into_model(&reference);
                    let step = store.step_count();
                    for (i, task) in cfg.tasks.iter().enumerate() {
                        let metrics = evaluate(
                            &reference,
                            task,
                            TaskId(i),
                            Split::Val,
                            Some(cfg.eval_samples),
                            cfg.ablation,
                        );
                        for (metric, value) in metrics {
                            log.record(step, task.name(), "val", &metric, value);
                        }
                    }
                }
            }
        }
        SyncMode::Hogwild => {
            let (tx, rx) = mpsc::channel::<(u64, String, String, String, f64)>();
            let result: Result<(), TrainError> = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for i in 0..cfg.tasks.len() {
                    let store = &store;
                    let tx = tx.clone();
                    handles.push(scope.spawn(move || -> Result<(), TrainError> {
                        let mut worker: Worker<S> = Worker::new(model_cfg, cfg, i);
                        for round in 0..cfg.steps_per_task {
                            let (loss, step) =
                                worker.step(store, cfg, &hp, model_cfg.d_model, model_cfg.dropout)?;
                            let _ = tx.send((
                                step,
                                worker.task.name().to_string(),
                                "train".to_string(),
                                "loss".to_string(),
                                loss,
                            ));
                            if cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0 {
                                store.load_into(&worker.params);
                                let metrics = evaluate(
                                    &worker.model,
                                    &worker.task,
                                    worker.task_id,
                                    Split::Val,
                                    Some(cfg.eval_samples),
                                    cfg.ablation,
                                );
                                for (metric, value) in metrics {
                                    let _ = tx.send((
                                        store.step_count(),
                                        worker.task.name().to_string(),
                                        "val".to_string(),
                                        metric,
                                        value,
                                    ));
                                }
                            }
                        }
                        Ok(())
                    }));
                }
                drop(tx);
                let mut first_error: Option<TrainError> = None;
                for (handle, task) in handles.into_iter().zip(&cfg.tasks) {
                    match handle.join() {
                        Ok(Ok(())) => {}
                        Ok(Err(e)) => {
                            first_error.get_or_insert(e);
                        }
                        Err(_) => {
                            first_error.get_or_insert(TrainError::WorkerPanic {
                                task: task.name().to_string(),
                            });
                        }
                    }
                }
                match first_error {
                    Some(e) => Err(e),
                    None => Ok(()),
                }
            });
            // Arrival order is nondeterministic in async mode; records are
            // complete but unordered.
            while let Ok((step, task, split, metric, value)) = rx.try_recv() {
                log.record(step, &task, &split, &metric, value);
            }
            result.map_err(|e| abort(e, &store))?;
        }
    }

    store.snapshot_into_model(&reference);
    let total_steps = store.step_count();
    let mut final_metrics = BTreeMap::new();
    for (i, task) in cfg.tasks.iter().enumerate() {
        let metrics = evaluate(&reference, task, TaskId(i), Split::Val, None, cfg.ablation);
        for (metric, value) in metrics {
            log.record(total_steps, task.name(), "val", &metric, value);
            final_metrics.insert((task.name().to_string(), metric), value);
        }
    }
    Ok(TrainOutcome {
        final_metrics,
        log: log.render(),
        checkpoint: crate::checkpoint::serialize(&reference),
        total_steps,
    })
}
