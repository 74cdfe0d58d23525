//! Evaluation metrics and the plain-text metrics log.
//!
//! Log schema: one tab-separated record per line,
//! `step<TAB>task<TAB>split<TAB>metric<TAB>value`, value printed with six
//! decimal places. Sequential-mode training writes records in a
//! deterministic order, so identical runs produce byte-identical logs.

use std::collections::HashMap;

/// Fraction of positions where `pred == target`, skipping `ignore`.
pub fn token_accuracy(preds: &[u32], targets: &[u32], ignore: u32) -> (usize, usize) {
    assert_eq!(preds.len(), targets.len());
    let mut correct = 0;
    let mut total = 0;
    for (&p, &t) in preds.iter().zip(targets) {
        if t == ignore {
            continue;
        }
        total += 1;
        if p == t {
            correct += 1;
        }
    }
    (correct, total)
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with a single reference per candidate: geometric
/// mean of modified 1..4-gram precisions times the brevity penalty.
/// A candidate identical to its reference scores 1.0.
pub fn corpus_bleu4(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "bleu: corpus size mismatch");
    if candidates.is_empty() {
        return 0.0;
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=4usize {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                total += count;
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    brevity * (log_precision_sum / 4.0).exp()
}

/// Accumulates log records; rendered as the documented TSV schema.
#[derive(Default, Clone)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    pub fn record(&mut self, step: u64, task: &str, split: &str, metric: &str, value: f64) {
        self.lines.push(format!("{step}\t{task}\t{split}\t{metric}\t{value:.6}"));
    }

    pub fn render(&self) -> String {
        let mut out = String::from("step\ttask\tsplit\tmetric\tvalue\n");
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.lines.extend(other.lines);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_of_identical_candidate_is_one() {
        let refs = vec![vec![2u32, 3, 4, 5, 6], vec![7, 8, 9, 10]];
        assert!((corpus_bleu4(&refs, &refs) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_decreases_with_corruption() {
        let reference = vec![vec![2u32, 3, 4, 5, 6, 7]];
        let close = vec![vec![2u32, 3, 4, 5, 6, 9]];
        let far = vec![vec![9u32, 9, 9, 9, 9, 9]];
        let b_exact = corpus_bleu4(&reference, &reference);
        let b_close = corpus_bleu4(&close, &reference);
        let b_far = corpus_bleu4(&far, &reference);
        assert!(b_exact > b_close);
        assert!(b_close > b_far);
        assert_eq!(b_far, 0.0);
    }

    #[test]
    fn bleu_applies_brevity_penalty() {
        let reference = vec![vec![2u32, 3, 4, 5, 6, 7, 8, 9]];
        let truncated = vec![vec![2u32, 3, 4, 5]];
        let b = corpus_bleu4(&truncated, &reference);
        assert!(b < 1.0 && b > 0.0);
    }

    #[test]
    fn accuracy_skips_ignored_positions() {
        let (c, t) = token_accuracy(&[1, 2, 3, 4], &[1, 9, u32::MAX, 4], u32::MAX);
        assert_eq!((c, t), (2, 3));
    }

    #[test]
    fn log_renders_documented_schema() {
        let mut log = MetricsLog::new();
        log.record(10, "tagging", "val", "accuracy", 0.5);
        let s = log.render();
        assert!(s.starts_with("step\ttask\tsplit\tmetric\tvalue\n"));
        assert!(s.contains("10\ttagging\tval\taccuracy\t0.500000\n"));
    }
}
