//! The spatio-temporal cache: every encoded input appends per-time-step
//! rows to a temporal cache and (when it has a spatial extent) per-location
//! rows to a spatial cache, while a link array records each call's (t, s)
//! so temporal attention scores can later be expanded into a gate over the
//! spatial columns.
//!
//! Row bookkeeping after K calls with shapes (t_k, s_k):
//! temporal rows R = sum of all t_k; spatial rows P = sum of t_k * s_k over
//! calls with s_k > 1, grouped by call and time-major within a call.

use crate::attention::AttentionScores;
use crate::cnp::EncoderCore;
use crate::nn::ForwardCtx;
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

/// Peripheral output: features on a `[t, s, d_model]` grid. Text has s == 1,
/// a single image t == 1, video both > 1.
pub struct SpatioTemporalTensor<S: Scalar> {
    x: Tensor<S>,
}

impl<S: Scalar> SpatioTemporalTensor<S> {
    pub fn new(x: Tensor<S>) -> Self {
        assert_eq!(
            x.shape().len(),
            3,
            "spatio-temporal tensor must be [t, s, d_model], got {:?}",
            x.shape()
        );
        SpatioTemporalTensor { x }
    }

    pub fn t(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn s(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskId(pub usize);

pub const DOMAIN_VISION: DomainId = DomainId(0);
pub const DOMAIN_LANGUAGE: DomainId = DomainId(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkEntry {
    pub time_len: usize,
    pub space_len: usize,
}

/// One (t, s) record per encode call, in call order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkArray {
    entries: Vec<LinkEntry>,
}

impl LinkArray {
    pub fn new() -> Self {
        LinkArray::default()
    }

    pub fn push(&mut self, time_len: usize, space_len: usize) {
        assert!(time_len >= 1 && space_len >= 1, "link entry must be >= 1 in both extents");
        self.entries.push(LinkEntry { time_len, space_len });
    }

    pub fn entries(&self) -> &[LinkEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// R: total temporal rows recorded so far.
    pub fn total_time(&self) -> usize {
        self.entries.iter().map(|e| e.time_len).sum()
    }

    /// P: total spatial rows (calls with s > 1 contribute t * s).
    pub fn total_space(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.space_len > 1)
            .map(|e| e.time_len * e.space_len)
            .sum()
    }
}

/// Temporal-attention scores expanded over spatial positions:
/// `[n_heads, queries, P]`, values in [0, 1]. The columns of call k are the
/// call's temporal scores, each repeated s_k times contiguously.
pub struct GateTensor<S: Scalar> {
    pub values: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheKind {
    Temporal,
    Spatial,
}

/// Provenance of one cache row: which encode call produced it and where in
/// the call's (time, space) grid it sits. Spatial traces carry both indices;
/// temporal traces have space == 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub kind: CacheKind,
    pub call: usize,
    pub time: usize,
    pub space: usize,
}

pub struct CacheState<S: Scalar> {
    temporal: Vec<Tensor<S>>, // one [t_k, d_model] block per call
    spatial: Vec<Tensor<S>>,  // one [t_k * s_k, d_model] block per call with s_k > 1
    links: LinkArray,
}

impl<S: Scalar> Default for CacheState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> CacheState<S> {
    pub fn new() -> Self {
        CacheState {
            temporal: Vec::new(),
            spatial: Vec::new(),
            links: LinkArray::new(),
        }
    }

    /// Empties the caches and the link array in place.
    pub fn reset(&mut self) {
        self.temporal.clear();
        self.spatial.clear();
        self.links = LinkArray::new();
    }

    pub fn links(&self) -> &LinkArray {
        &self.links
    }

    pub fn temporal_len(&self) -> usize {
        self.temporal.iter().map(|t| t.shape()[0]).sum()
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().map(|t| t.shape()[0]).sum()
    }

    /// The temporal cache as one `[R, d_model]` tensor, or None before the
    /// first encode call.
    pub fn temporal_cache(&self) -> Option<Tensor<S>> {
        match self.temporal.len() {
            0 => None,
            1 => Some(self.temporal[0].clone()),
            _ => {
                let refs: Vec<&Tensor<S>> = self.temporal.iter().collect();
                Some(concat(&refs, 0))
            }
        }
    }

    /// The spatial cache as one `[P, d_model]` tensor, or None when no call
    /// had spatial extent.
    pub fn spatial_cache(&self) -> Option<Tensor<S>> {
        match self.spatial.len() {
            0 => None,
            1 => Some(self.spatial[0].clone()),
            _ => {
                let refs: Vec<&Tensor<S>> = self.spatial.iter().collect();
                Some(concat(&refs, 0))
            }
        }
    }

    /// Writes one input into the caches:
    /// 1. record (t, s) in the link array;
    /// 2. look up the domain embedding, broadcast it over the (t, s) grid,
    ///    concat on the feature axis and project 2*d_model -> d_model;
    /// 3. if s > 1, append the t*s unrolled rows (time-major) to the
    ///    spatial cache;
    /// 4. average over the spatial axis, run the temporal encoder, append
    ///    the t output rows to the temporal cache.
    pub fn encode(
        &mut self,
        input: &SpatioTemporalTensor<S>,
        domain: DomainId,
        core: &EncoderCore<S>,
        ctx: &mut ForwardCtx,
    ) {
        let n_domains = core.domain_embed.rows();
        assert!(
            domain.0 < n_domains,
            "domain id {} out of range (max number of domains is {n_domains})",
            domain.0
        );
        let (t, s, d) = (input.t(), input.s(), input.d_model());
        self.links.push(t, s);

        let d_emb = core.domain_embed.lookup(&[domain.0 as u32]); // [1, d]
        let broadcast = Tensor::zeros(&[t, s, d]).add(&d_emb.reshape(&[d]));
        let conditioned = concat(&[input.tensor(), &broadcast], 2) // [t, s, 2d]
            .reshape(&[t * s, 2 * d]);
        let conditioned = core.input_proj.forward(&conditioned); // [t*s, d]

        if s > 1 && !ctx.no_spatial_cache {
            self.spatial.push(conditioned.clone());
        }

        let averaged = conditioned.reshape(&[t, s, d]).mean_axis(1); // [t, d]
        let encoded = core.temporal.forward(&averaged, ctx);
        self.temporal.push(encoded);
    }

    /// One line of provenance per cache row, temporal rows first.
    pub fn trace(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        for (call, e) in self.links.entries().iter().enumerate() {
            for time in 0..e.time_len {
                rows.push(TraceRow {
                    kind: CacheKind::Temporal,
                    call,
                    time,
                    space: 0,
                });
            }
        }
        for (call, e) in self.links.entries().iter().enumerate() {
            if e.space_len <= 1 {
                continue;
            }
            for time in 0..e.time_len {
                for space in 0..e.space_len {
                    rows.push(TraceRow {
                        kind: CacheKind::Spatial,
                        call,
                        time,
                        space,
                    });
                }
            }
        }
        rows
    }
}

/// Builds the gate from the link array and the temporal attention scores.
///
/// Walks the link array with a running temporal offset. Each entry with
/// s > 1 takes its `[n_heads, N, t]` slice of the scores, repeats every
/// temporal score s times contiguously, and appends the flattened
/// `[n_heads, N, t*s]` block; entries with s == 1 advance the offset and
/// contribute nothing. Returns None when no entry has spatial extent.
pub fn compute_gate<S: Scalar>(
    links: &LinkArray,
    scores: &AttentionScores<S>,
) -> Option<GateTensor<S>> {
    let r = links.total_time();
    assert_eq!(
        scores.n_keys(),
        r,
        "gate: scores cover {} temporal rows but the link array records {r}",
        scores.n_keys()
    );
    let (n_heads, n_queries) = (scores.n_heads(), scores.n_queries());
    let mut parts: Vec<Tensor<S>> = Vec::new();
    let mut offset = 0;
    for e in links.entries() {
        if e.space_len > 1 {
            let block = scores
                .probs
                .narrow(2, offset, e.time_len) // [n_h, N, t]
                .expand_last(e.space_len) // [n_h, N, t, s]
                .reshape(&[n_heads, n_queries, e.time_len * e.space_len]);
            parts.push(block);
        }
        offset += e.time_len;
    }
    if parts.is_empty() {
        return None;
    }
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Some(GateTensor {
        values: concat(&refs, 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnp::{EncoderCore, ModelConfig};
    use crate::rng::Rng64;
    use proptest::prelude::*;

    fn tiny_core(d_model: usize) -> EncoderCore<f64> {
        let cfg = ModelConfig {
            d_model,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            n_domains: 2,
            lang_vocab: 8,
            d_emb: 4,
            dropout: 0.0,
        };
        EncoderCore::new(&mut Rng64::new(0), &cfg)
    }

    /// Core whose conditioning is the identity: zero domain embeddings and a
    /// projection that keeps the first d_model features. Lets tests trace
    /// hand-tagged inputs straight into the caches.
    fn identity_core(d_model: usize) -> EncoderCore<f64> {
        let core = tiny_core(d_model);
        core.domain_embed.table.map_data(|v| *v = 0.0);
        let mut w = vec![0.0; 2 * d_model * d_model];
        for i in 0..d_model {
            w[i * d_model + i] = 1.0;
        }
        core.input_proj.weight.set_data(&w);
        core.input_proj.bias.as_ref().unwrap().set_data(&vec![0.0; d_model]);
        core
    }

    fn stt(t: usize, s: usize, d: usize, seed: u64) -> SpatioTemporalTensor<f64> {
        let mut rng = Rng64::new(seed);
        let data: Vec<f64> = (0..t * s * d).map(|_| rng.range(-1.0, 1.0)).collect();
        SpatioTemporalTensor::new(Tensor::from_vec(data, &[t, s, d]))
    }

    #[test]
    fn text_only_input_adds_no_spatial_rows() {
        let core = tiny_core(8);
        let mut state = CacheState::new();
        state.encode(&stt(3, 1, 8, 1), DOMAIN_LANGUAGE, &core, &mut ForwardCtx::eval());
        assert_eq!(state.temporal_len(), 3);
        assert_eq!(state.spatial_len(), 0);
        assert_eq!(state.links().entries(), &[LinkEntry { time_len: 3, space_len: 1 }]);
    }

    #[test]
    fn mixed_calls_bookkeeping() {
        let core = tiny_core(8);
        let mut state = CacheState::new();
        state.encode(&stt(1, 4, 8, 2), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        state.encode(&stt(2, 1, 8, 3), DOMAIN_LANGUAGE, &core, &mut ForwardCtx::eval());
        assert_eq!(state.temporal_len(), 3);
        assert_eq!(state.spatial_len(), 4);
        assert_eq!(
            state.links().entries(),
            &[
                LinkEntry { time_len: 1, space_len: 4 },
                LinkEntry { time_len: 2, space_len: 1 }
            ]
        );
    }

    #[test]
    fn spatial_rows_are_time_major_within_a_call() {
        // Tag each (time, space) cell with a unique basis vector and replay
        // the expected row order by hand.
        let d = 8; // = t * s
        let core = identity_core(d);
        let mut x = vec![0.0; 2 * 4 * d];
        for ti in 0..2 {
            for si in 0..4 {
                x[(ti * 4 + si) * d + (ti * 4 + si)] = 1.0;
            }
        }
        let input = SpatioTemporalTensor::new(Tensor::from_vec(x, &[2, 4, d]));
        let mut state = CacheState::new();
        state.encode(&input, DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        assert_eq!(state.temporal_len(), 2);
        assert_eq!(state.spatial_len(), 8);
        let rows = state.spatial_cache().unwrap().to_vec();
        for p in 0..8 {
            for c in 0..d {
                let want = if c == p { 1.0 } else { 0.0 };
                assert_eq!(rows[p * d + c], want, "row {p} component {c}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn domain_id_out_of_bounds_is_an_error() {
        let core = tiny_core(8);
        let mut state = CacheState::new();
        state.encode(&stt(1, 1, 8, 4), DomainId(2), &core, &mut ForwardCtx::eval());
    }

    #[test]
    fn reset_restores_fresh_state_and_is_idempotent() {
        let core = tiny_core(8);
        let mut state = CacheState::new();
        for seed in 0..3 {
            state.encode(&stt(2, 3, 8, seed), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        }
        state.reset();
        assert_eq!(state.temporal_len(), 0);
        assert_eq!(state.spatial_len(), 0);
        assert!(state.links().is_empty());
        state.reset();
        assert_eq!(state.temporal_len(), 0);

        state.encode(&stt(1, 1, 8, 9), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        assert_eq!(state.temporal_len(), 1);
        assert_eq!(state.spatial_len(), 0);
    }

    fn scores_from(data: Vec<f64>, n_h: usize, n: usize, r: usize) -> AttentionScores<f64> {
        AttentionScores {
            probs: Tensor::from_vec(data, &[n_h, n, r]),
        }
    }

    #[test]
    fn gate_expands_each_temporal_score_over_space() {
        let mut links = LinkArray::new();
        links.push(2, 3);
        let scores = scores_from(vec![0.25, 0.75], 1, 1, 2);
        let gate = compute_gate(&links, &scores).unwrap();
        assert_eq!(gate.values.to_vec(), vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.75]);
    }

    #[test]
    fn gate_skips_text_calls_but_advances_the_offset() {
        let mut links = LinkArray::new();
        links.push(2, 1);
        links.push(1, 3);
        let scores = scores_from(vec![0.2, 0.3, 0.5], 1, 1, 3);
        let gate = compute_gate(&links, &scores).unwrap();
        assert_eq!(gate.values.to_vec(), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn gate_is_empty_when_every_call_is_text() {
        let mut links = LinkArray::new();
        links.push(2, 1);
        links.push(4, 1);
        let scores = scores_from(vec![1.0 / 6.0; 6], 1, 1, 6);
        assert!(compute_gate(&links, &scores).is_none());
        assert_eq!(links.total_space(), 0);
    }

    #[test]
    #[should_panic(expected = "link array records")]
    fn gate_rejects_score_width_mismatch() {
        let mut links = LinkArray::new();
        links.push(3, 2);
        let scores = scores_from(vec![0.5, 0.5], 1, 1, 2);
        compute_gate(&links, &scores);
    }

    #[test]
    fn gate_columns_align_with_spatial_rows() {
        // Tag scores with unique values; column p of the gate must carry the
        // temporal score of the (call, time) pair that produced spatial row p.
        let mut links = LinkArray::new();
        links.push(2, 4); // spatial rows 0..8
        links.push(3, 1); // text call
        links.push(1, 2); // spatial rows 8..10
        let r = links.total_time();
        let probs: Vec<f64> = (0..r).map(|i| (i + 1) as f64).collect();
        let scores = scores_from(probs, 1, 1, r);
        let gate = compute_gate(&links, &scores).unwrap().values.to_vec();

        // Brute-force oracle over explicit (call, time, space) triples.
        let mut want = Vec::new();
        let mut offset = 0;
        for e in links.entries() {
            if e.space_len > 1 {
                for time in 0..e.time_len {
                    for _space in 0..e.space_len {
                        want.push((offset + time + 1) as f64);
                    }
                }
            }
            offset += e.time_len;
        }
        assert_eq!(gate, want);

        // And the trace rows agree with the same triples.
        let core = tiny_core(4);
        let mut state = CacheState::new();
        state.encode(&stt(2, 4, 4, 1), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        state.encode(&stt(3, 1, 4, 2), DOMAIN_LANGUAGE, &core, &mut ForwardCtx::eval());
        state.encode(&stt(1, 2, 4, 3), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        let spatial: Vec<TraceRow> = state
            .trace()
            .into_iter()
            .filter(|row| row.kind == CacheKind::Spatial)
            .collect();
        assert_eq!(spatial.len(), 10);
        assert_eq!(spatial[0], TraceRow { kind: CacheKind::Spatial, call: 0, time: 0, space: 0 });
        assert_eq!(spatial[4], TraceRow { kind: CacheKind::Spatial, call: 0, time: 1, space: 0 });
        assert_eq!(spatial[8], TraceRow { kind: CacheKind::Spatial, call: 2, time: 0, space: 0 });
    }

    #[test]
    fn gate_mass_per_call_scales_temporal_mass_by_space() {
        let mut links = LinkArray::new();
        links.push(2, 3);
        links.push(1, 1);
        links.push(2, 2);
        let r = links.total_time();
        let mut rng = Rng64::new(5);
        // Random simplex rows over R keys for 2 heads x 2 queries.
        let mut probs = vec![0.0; 2 * 2 * r];
        for row in probs.chunks_mut(r) {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = rng.unit() + 1e-3;
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let scores = scores_from(probs.clone(), 2, 2, r);
        let gate = compute_gate(&links, &scores).unwrap().values.to_vec();
        let p_total = links.total_space();
        for lane in 0..4 {
            // call 0: columns 0..6, temporal rows 0..2, s = 3
            let gate_mass: f64 = gate[lane * p_total..lane * p_total + 6].iter().sum();
            let temporal_mass: f64 = probs[lane * r..lane * r + 2].iter().sum();
            assert!((gate_mass - 3.0 * temporal_mass).abs() < 1e-12);
            // call 2: columns 6..10, temporal rows 3..5, s = 2
            let gate_mass: f64 = gate[lane * p_total + 6..lane * p_total + 10].iter().sum();
            let temporal_mass: f64 = probs[lane * r + 3..lane * r + 5].iter().sum();
            assert!((gate_mass - 2.0 * temporal_mass).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_call_order_permutes_cache_blocks_exactly() {
        let core = tiny_core(8);
        let inputs: Vec<SpatioTemporalTensor<f64>> =
            vec![stt(2, 3, 8, 10), stt(1, 1, 8, 11), stt(3, 2, 8, 12)];
        let mut fwd = CacheState::new();
        for input in &inputs {
            fwd.encode(input, DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        }
        let mut rev = CacheState::new();
        for input in inputs.iter().rev() {
            rev.encode(input, DOMAIN_VISION, &core, &mut ForwardCtx::eval());
        }
        assert_eq!(fwd.temporal_len(), rev.temporal_len());
        assert_eq!(fwd.spatial_len(), rev.spatial_len());
        // Per-call blocks are bitwise equal; only their order moves.
        assert_eq!(fwd.temporal[0].to_vec(), rev.temporal[2].to_vec());
        assert_eq!(fwd.temporal[2].to_vec(), rev.temporal[0].to_vec());
        assert_eq!(fwd.spatial[0].to_vec(), rev.spatial[1].to_vec());
        assert_eq!(fwd.spatial[1].to_vec(), rev.spatial[0].to_vec());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bookkeeping_matches_closed_forms(
            calls in proptest::collection::vec((1usize..=8, 1usize..=8), 1..=6)
        ) {
            let core = tiny_core(4);
            let mut state = CacheState::new();
            for (i, &(t, s)) in calls.iter().enumerate() {
                state.encode(&stt(t, s, 4, i as u64), DOMAIN_VISION, &core, &mut ForwardCtx::eval());
            }
            let r: usize = calls.iter().map(|&(t, _)| t).sum();
            let p: usize = calls.iter().filter(|&&(_, s)| s > 1).map(|&(t, s)| t * s).sum();
            prop_assert_eq!(state.temporal_len(), r);
            prop_assert_eq!(state.spatial_len(), p);
            let recorded: Vec<(usize, usize)> = state
                .links()
                .entries()
                .iter()
                .map(|e| (e.time_len, e.space_len))
                .collect();
            prop_assert_eq!(recorded, calls);
        }
    }
}
