//! Corpus-level BLEU with clipped n-gram counts up to order 4, geometric
//! mean and brevity penalty, on the 0..100 scale.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Per-corpus BLEU statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Overall score in `[0, 100]`.
    pub score: f64,
    /// Modified n-gram precisions `p_1 .. p_4` in `[0, 1]`.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    /// Total hypothesis length.
    pub hyp_length: usize,
    /// Total reference length.
    pub ref_length: usize,
}

impl core::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let ratio = if self.ref_length == 0 {
            0.0
        } else {
            self.hyp_length as f64 / self.ref_length as f64
        };
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.score,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            ratio,
            self.hyp_length,
            self.ref_length,
        )
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU of `hypotheses` against one reference per hypothesis.
/// Matched n-gram counts are clipped to the reference count; precisions are
/// pooled over the corpus before the geometric mean. Any zero precision
/// zeroes the score. The brevity penalty is `exp(1 - r/h)` when the
/// hypothesis corpus is shorter than the reference corpus, else 1.
pub fn corpus_bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(alloc::format!(
            "corpus_bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Usage(alloc::string::String::from(
            "corpus_bleu: empty corpus",
        )));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_length = 0;
    let mut ref_length = 0;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_length += hyp.len();
        ref_length += reference.len();
        for n in 1..=MAX_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_length == 0 {
        0.0
    } else if hyp_length < ref_length {
        libm::exp(1.0 - ref_length as f64 / hyp_length as f64)
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|&p| libm::log(p)).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * libm::exp(log_mean)
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_length,
        ref_length,
    })
}
