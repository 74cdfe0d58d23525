//! Multi-head scaled dot-product attention in the three flavors the decoder
//! needs: plain cross-attention (with score export for gate construction),
//! causally masked self-attention, and gated attention where the post-softmax
//! scores are multiplied elementwise by a `[0,1]` gate with no renormalization
//! afterwards — small gates shrink the context vector rather than rescale it.

use crate::nn::ForwardCtx;
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        assert!(d_model > 0 && n_heads > 0, "attention: zero-sized config");
        assert_eq!(
            d_model % n_heads,
            0,
            "attention: d_model {d_model} not divisible by {n_heads} heads"
        );
        AttentionConfig {
            n_heads,
            d_model,
            d_k: d_model / n_heads,
            d_v: d_model / n_heads,
        }
    }
}

/// Post-softmax attention weights per head: `[n_heads, queries, keys]`.
/// Each (head, query) row sums to one over unmasked keys; masked keys are
/// exactly zero.
pub struct AttentionScores<S: Scalar> {
    pub probs: Tensor<S>,
}

impl<S: Scalar> AttentionScores<S> {
    pub fn n_heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn n_queries(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn n_keys(&self) -> usize {
        self.probs.shape()[2]
    }
}

pub struct MultiHeadAttention<S: Scalar> {
    pub cfg: AttentionConfig,
    pub wq: Tensor<S>, // [d_model, n_heads * d_k]
    pub wk: Tensor<S>,
    pub wv: Tensor<S>, // [d_model, n_heads * d_v]
    pub wo: Tensor<S>, // [n_heads * d_v, d_model]
    /// Post-softmax dropout on the attention probabilities (train mode only).
    pub dropout_probs: bool,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(rng: &mut Rng64, cfg: AttentionConfig) -> Self {
        let (d, hk, hv) = (cfg.d_model, cfg.n_heads * cfg.d_k, cfg.n_heads * cfg.d_v);
        MultiHeadAttention {
            cfg,
            wq: Tensor::param(crate::nn::xavier_uniform(rng, d, hk), &[d, hk]),
            wk: Tensor::param(crate::nn::xavier_uniform(rng, d, hk), &[d, hk]),
            wv: Tensor::param(crate::nn::xavier_uniform(rng, d, hv), &[d, hv]),
            wo: Tensor::param(crate::nn::xavier_uniform(rng, hv, d), &[hv, d]),
            dropout_probs: true,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }

    /// Projects `x [rows, d_model]` into per-head form `[n_heads, rows, width]`.
    fn heads(&self, x: &Tensor<S>, w: &Tensor<S>, width: usize) -> Tensor<S> {
        let rows = x.shape()[0];
        x.matmul(w)
            .reshape(&[rows, self.cfg.n_heads, width])
            .permute(&[1, 0, 2])
    }

    fn probs(
        &self,
        q_in: &Tensor<S>,
        kv_in: &Tensor<S>,
        key_mask: Option<&[bool]>,
        causal: bool,
        scale_by_d_v: bool,
    ) -> Tensor<S> {
        let n = q_in.shape()[0];
        let m = kv_in.shape()[0];
        assert!(m >= 1, "attention: empty key set");
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), m, "attention: key mask length {} vs {m} keys", mask.len());
            assert!(mask.iter().any(|&b| b), "attention: key mask excludes every key");
        }
        let q = self.heads(q_in, &self.wq, self.cfg.d_k);
        let k = self.heads(kv_in, &self.wk, self.cfg.d_k);
        let scale_dim = if scale_by_d_v { self.cfg.d_v } else { self.cfg.d_k };
        let logits = q
            .matmul_nt(&k)
            .scale(S::from_f64(1.0 / (scale_dim as f64).sqrt()));
        if key_mask.is_none() && !causal {
            return logits.softmax(2);
        }
        // Full-size boolean mask over [n_heads, n, m].
        let mut full = vec![true; self.cfg.n_heads * n * m];
        for h in 0..self.cfg.n_heads {
            for i in 0..n {
                for j in 0..m {
                    let mut live = true;
                    if causal && j > i {
                        live = false;
                    }
                    if let Some(mask) = key_mask {
                        live &= mask[j];
                    }
                    full[(h * n + i) * m + j] = live;
                }
            }
        }
        logits.softmax_masked(&full)
    }

    fn project_out(&self, context: &Tensor<S>) -> Tensor<S> {
        // [n_heads, n, d_v] -> [n, n_heads * d_v] -> [n, d_model]
        let n = context.shape()[1];
        context
            .permute(&[1, 0, 2])
            .reshape(&[n, self.cfg.n_heads * self.cfg.d_v])
            .matmul(&self.wo)
    }

    /// Plain multi-head attention. Returns the output and the post-softmax
    /// scores (before probability dropout) for gate construction.
    pub fn forward(
        &self,
        q_in: &Tensor<S>,
        kv_in: &Tensor<S>,
        key_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> (Tensor<S>, AttentionScores<S>) {
        let probs = self.probs(q_in, kv_in, key_mask, false, false);
        let v = self.heads(kv_in, &self.wv, self.cfg.d_v);
        let applied = if self.dropout_probs { ctx.apply_dropout(&probs) } else { probs.clone() };
        let context = applied.matmul(&v);
        (self.project_out(&context), AttentionScores { probs })
    }

    /// Self-attention where position `i` may only attend to positions `<= i`.
    pub fn forward_causal(&self, x: &Tensor<S>, ctx: &mut ForwardCtx) -> Tensor<S> {
        let probs = self.probs(x, x, None, true, false);
        let v = self.heads(x, &self.wv, self.cfg.d_v);
        let applied = if self.dropout_probs { ctx.apply_dropout(&probs) } else { probs };
        let context = applied.matmul(&v);
        self.project_out(&context)
    }

    /// Pre-projection context of the gated flavor: softmax scores multiplied
    /// elementwise by the gate, then applied to the values. No
    /// renormalization after gating, and the scale factor is `sqrt(d_v)`.
    pub fn gated_context(
        &self,
        q_in: &Tensor<S>,
        kv_in: &Tensor<S>,
        gate: &Tensor<S>,
        key_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Tensor<S> {
        assert_eq!(
            self.cfg.d_k, self.cfg.d_v,
            "gated attention requires d_k == d_v (got {} vs {})",
            self.cfg.d_k, self.cfg.d_v
        );
        let n = q_in.shape()[0];
        let m = kv_in.shape()[0];
        assert_eq!(
            gate.shape(),
            &[self.cfg.n_heads, n, m],
            "gate shape {:?} does not match (n_heads={}, queries={n}, keys={m})",
            gate.shape(),
            self.cfg.n_heads
        );
        let probs = self.probs(q_in, kv_in, key_mask, false, true);
        let gated = probs.mul(gate);
        let applied = if self.dropout_probs { ctx.apply_dropout(&gated) } else { gated };
        let v = self.heads(kv_in, &self.wv, self.cfg.d_v);
        applied.matmul(&v)
    }

    /// Gated attention output: gated context followed by the output
    /// projection.
    pub fn forward_gated(
        &self,
        q_in: &Tensor<S>,
        kv_in: &Tensor<S>,
        gate: &Tensor<S>,
        key_mask: Option<&[bool]>,
        ctx: &mut ForwardCtx,
    ) -> Tensor<S> {
        let context = self.gated_context(q_in, kv_in, gate, key_mask, ctx);
        self.project_out(&context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mha(d_model: usize, n_heads: usize, seed: u64) -> MultiHeadAttention<f64> {
        let mut rng = Rng64::new(seed);
        let mut m = MultiHeadAttention::new(&mut rng, AttentionConfig::new(d_model, n_heads));
        m.dropout_probs = false;
        m
    }

    fn rand_mat(rng: &mut Rng64, rows: usize, cols: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(data, &[rows, cols])
    }

    #[test]
    fn single_key_scores_are_exactly_one() {
        let m = mha(4, 2, 0);
        let mut rng = Rng64::new(1);
        let q = rand_mat(&mut rng, 3, 4);
        let kv = rand_mat(&mut rng, 1, 4);
        let (out, scores) = m.forward(&q, &kv, None, &mut ForwardCtx::eval());
        assert!(scores.probs.to_vec().iter().all(|&p| p == 1.0));
        // Every query receives the same (projected) single value row.
        let o = out.to_vec();
        assert_eq!(&o[0..4], &o[4..8]);
        assert_eq!(&o[0..4], &o[8..12]);
    }

    #[test]
    fn duplicate_keys_split_weight_evenly() {
        let m = mha(4, 2, 3);
        let mut rng = Rng64::new(2);
        let q = rand_mat(&mut rng, 2, 4);
        let row: Vec<f64> = (0..4).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut kv_data = row.clone();
        kv_data.extend(&row);
        let kv = Tensor::from_vec(kv_data, &[2, 4]);
        let (_, scores) = m.forward(&q, &kv, None, &mut ForwardCtx::eval());
        for p in scores.probs.to_vec() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    /// Straight-line single-call oracle: per-head loops over plain f64
    /// buffers, no shared code with the tensor op path.
    fn naive_attention(
        q_in: &[f64],
        kv_in: &[f64],
        n: usize,
        m: usize,
        d: usize,
        n_heads: usize,
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
    ) -> Vec<f64> {
        let dk = d / n_heads;
        let proj = |x: &[f64], rows: usize, w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for c in 0..d {
                    for i in 0..d {
                        out[r * d + c] += x[r * d + i] * w[i * d + c];
                    }
                }
            }
            out
        };
        let q = proj(q_in, n, wq);
        let k = proj(kv_in, m, wk);
        let v = proj(kv_in, m, wv);
        let mut heads_out = vec![0.0; n * d];
        for h in 0..n_heads {
            for i in 0..n {
                let mut logits = vec![0.0; m];
                for j in 0..m {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += q[i * d + h * dk + c] * k[j * d + h * dk + c];
                    }
                    logits[j] = dot / (dk as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..m {
                    let w = exps[j] / denom;
                    for c in 0..dk {
                        heads_out[i * d + h * dk + c] += w * v[j * d + h * dk + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                for x in 0..d {
                    out[i * d + c] += heads_out[i * d + x] * wo[x * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_per_head_oracle() {
        let m = mha(4, 2, 11);
        let mut rng = Rng64::new(12);
        let q = rand_mat(&mut rng, 2, 4);
        let kv = rand_mat(&mut rng, 3, 4);
        let (out, _) = m.forward(&q, &kv, None, &mut ForwardCtx::eval());
        let want = naive_attention(
            &q.to_vec(),
            &kv.to_vec(),
            2,
            3,
            4,
            2,
            &m.wq.to_vec(),
            &m.wk.to_vec(),
            &m.wv.to_vec(),
            &m.wo.to_vec(),
        );
        for (g, w) in out.to_vec().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "got {g}, want {w}");
        }
    }

    #[test]
    #[should_panic(expected = "excludes every key")]
    fn all_masked_keys_is_a_contract_error() {
        let m = mha(4, 2, 0);
        let q: Tensor<f64> = Tensor::zeros(&[1, 4]);
        let kv = Tensor::zeros(&[2, 4]);
        m.forward(&q, &kv, Some(&[false, false]), &mut ForwardCtx::eval());
    }

    #[test]
    fn masked_keys_carry_exactly_zero_weight() {
        let m = mha(4, 2, 5);
        let mut rng = Rng64::new(6);
        let q = rand_mat(&mut rng, 2, 4);
        let kv = rand_mat(&mut rng, 3, 4);
        let (_, scores) = m.forward(&q, &kv, Some(&[true, false, true]), &mut ForwardCtx::eval());
        let p = scores.probs.to_vec();
        for h in 0..2 {
            for i in 0..2 {
                assert_eq!(p[(h * 2 + i) * 3 + 1], 0.0);
                let live = p[(h * 2 + i) * 3] + p[(h * 2 + i) * 3 + 2];
                assert!((live - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn causal_position_zero_ignores_the_future() {
        let m = mha(4, 2, 7);
        let mut rng = Rng64::new(8);
        let x = rand_mat(&mut rng, 3, 4);
        let base = m.forward_causal(&x, &mut ForwardCtx::eval()).to_vec();
        let mut perturbed = x.to_vec();
        for v in &mut perturbed[4..] {
            *v += 3.0;
        }
        let x2 = Tensor::from_vec(perturbed, &[3, 4]);
        let out2 = m.forward_causal(&x2, &mut ForwardCtx::eval()).to_vec();
        assert_eq!(&base[0..4], &out2[0..4]);
        assert_ne!(&base[4..8], &out2[4..8]);
    }

    #[test]
    fn causal_single_row_reduces_to_single_key() {
        let m = mha(4, 2, 9);
        let mut rng = Rng64::new(10);
        let x = rand_mat(&mut rng, 1, 4);
        let causal = m.forward_causal(&x, &mut ForwardCtx::eval()).to_vec();
        let (plain, scores) = m.forward(&x, &x, None, &mut ForwardCtx::eval());
        assert_eq!(causal, plain.to_vec());
        assert!(scores.probs.to_vec().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn causality_fuzz_later_inputs_never_leak_backwards() {
        let m = mha(8, 4, 21);
        let mut rng = Rng64::new(22);
        for trial in 0..50 {
            let n = 2 + (trial % 5);
            let x = rand_mat(&mut rng, n, 8);
            let base = m.forward_causal(&x, &mut ForwardCtx::eval()).to_vec();
            let j = rng.below(n);
            let mut bumped = x.to_vec();
            for c in 0..8 {
                bumped[j * 8 + c] += rng.range(0.5, 2.0);
            }
            let out = m
                .forward_causal(&Tensor::from_vec(bumped, &[n, 8]), &mut ForwardCtx::eval())
                .to_vec();
            for i in 0..j {
                assert_eq!(&base[i * 8..(i + 1) * 8], &out[i * 8..(i + 1) * 8], "row {i} changed");
            }
        }
    }

    #[test]
    fn all_ones_gate_matches_ungated_bitwise() {
        let m = mha(4, 2, 13);
        let mut rng = Rng64::new(14);
        let q = rand_mat(&mut rng, 2, 4);
        let kv = rand_mat(&mut rng, 3, 4);
        let gate: Tensor<f64> = Tensor::full(&[2, 2, 3], 1.0);
        let gated = m.forward_gated(&q, &kv, &gate, None, &mut ForwardCtx::eval());
        let (plain, _) = m.forward(&q, &kv, None, &mut ForwardCtx::eval());
        assert_eq!(gated.to_vec(), plain.to_vec());
    }

    #[test]
    fn zero_gate_annihilates_the_context() {
        let m = mha(4, 2, 15);
        let mut rng = Rng64::new(16);
        let q = rand_mat(&mut rng, 2, 4);
        let kv = rand_mat(&mut rng, 3, 4);
        let gate: Tensor<f64> = Tensor::zeros(&[2, 2, 3]);
        let context = m.gated_context(&q, &kv, &gate, None, &mut ForwardCtx::eval());
        assert!(context.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gated_weights_hand_computed_do_not_renormalize() {
        // softmax scores [0.6, 0.4], gate [0.5, 1.0] -> weights [0.3, 0.4]
        // (sum 0.7, deliberately not 1).
        let m = mha(2, 1, 17);
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        m.wq.set_data(&eye);
        m.wk.set_data(&eye);
        m.wo.set_data(&eye);
        // Key rows are [a, 0] and [0, 1]; with q = [1, 0] the logits are
        // (a/sqrt(2), 0), so a = sqrt(2) * ln(0.6/0.4) gives scores (.6, .4).
        let a = 2f64.sqrt() * (0.6f64 / 0.4).ln();
        m.wv.set_data(&[1.0 / a, 0.0, 0.0, 1.0]); // maps keys to basis rows
        let q = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]);
        let kv = Tensor::from_vec(vec![a, 0.0, 0.0, 1.0], &[2, 2]);
        let gate = Tensor::from_vec(vec![0.5, 1.0], &[1, 1, 2]);
        let ctxv = m.gated_context(&q, &kv, &gate, None, &mut ForwardCtx::eval()).to_vec();
        assert!((ctxv[0] - 0.3).abs() < 1e-9, "got {}", ctxv[0]);
        assert!((ctxv[1] - 0.4).abs() < 1e-9, "got {}", ctxv[1]);
    }

    #[test]
    #[should_panic(expected = "gate shape")]
    fn gate_shape_mismatch_is_a_contract_error() {
        let m = mha(4, 2, 18);
        let q: Tensor<f64> = Tensor::zeros(&[2, 4]);
        let kv = Tensor::zeros(&[3, 4]);
        let gate = Tensor::full(&[2, 2, 2], 1.0);
        m.forward_gated(&q, &kv, &gate, None, &mut ForwardCtx::eval());
    }

    #[test]
    fn gated_effective_weights_bounded_by_ungated_scores() {
        let m = mha(4, 2, 19);
        let mut rng = Rng64::new(20);
        let q = rand_mat(&mut rng, 3, 4);
        let kv = rand_mat(&mut rng, 4, 4);
        let (_, scores) = m.forward(&q, &kv, None, &mut ForwardCtx::eval());
        let g_data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.unit()).collect();
        let gate = Tensor::from_vec(g_data.clone(), &[2, 3, 4]);
        let effective = scores.probs.mul(&gate).to_vec();
        let raw = scores.probs.to_vec();
        for (e, r) in effective.iter().zip(&raw) {
            assert!(*e >= 0.0 && *e <= *r + 1e-15);
        }
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        // Perturb each parameter of each flavor and compare the analytic
        // gradient of a scalar readout against central differences.
        let n = 2;
        let m_keys = 3;
        let d = 4;
        let build = |vals: &[f64], which: usize, flavor: usize| -> f64 {
            let m = mha(d, 2, 23);
            let mats = [&m.wq, &m.wk, &m.wv, &m.wo];
            mats[which].set_data(vals);
            let mut rng = Rng64::new(24);
            let q = rand_mat(&mut rng, n, d);
            let kv = rand_mat(&mut rng, m_keys, d);
            let gate_data: Vec<f64> = (0..2 * n * m_keys).map(|_| 0.5).collect();
            let gate = Tensor::from_vec(gate_data, &[2, n, m_keys]);
            let out = match flavor {
                0 => m.forward(&q, &kv, None, &mut ForwardCtx::eval()).0,
                1 => m.forward_causal(&q, &mut ForwardCtx::eval()),
                _ => m.forward_gated(&q, &kv, &gate, None, &mut ForwardCtx::eval()),
            };
            out.mul(&out).sum_all().item()
        };
        for flavor in 0..3 {
            for which in 0..4 {
                let m = mha(d, 2, 23);
                let mats = [&m.wq, &m.wk, &m.wv, &m.wo];
                let base = mats[which].to_vec();
                // Analytic gradient.
                let mut rng = Rng64::new(24);
                let q = rand_mat(&mut rng, n, d);
                let kv = rand_mat(&mut rng, m_keys, d);
                let gate = Tensor::full(&[2, n, m_keys], 0.5);
                let out = match flavor {
                    0 => m.forward(&q, &kv, None, &mut ForwardCtx::eval()).0,
                    1 => m.forward_causal(&q, &mut ForwardCtx::eval()),
                    _ => m.forward_gated(&q, &kv, &gate, None, &mut ForwardCtx::eval()),
                };
                out.mul(&out).sum_all().backward();
                let got = mats[which].grad().unwrap();
                for i in (0..base.len()).step_by(5) {
                    let mut plus = base.clone();
                    plus[i] += 1e-5;
                    let mut minus = base.clone();
                    minus[i] -= 1e-5;
                    let fd = (build(&plus, which, flavor) - build(&minus, which, flavor)) / 2e-5;
                    let denom = fd.abs().max(got[i].abs()).max(1e-8);
                    assert!(
                        (fd - got[i]).abs() / denom < 1e-4,
                        "flavor {flavor} mat {which} coord {i}: analytic {} vs fd {fd}",
                        got[i]
                    );
                }
            }
        }
    }
}
