//! Left-to-right decoding (greedy as beam width 1, beam search with
//! length-normalized final scores) and character error rate scoring.

use crate::data::{EOS, FIRST_TOKEN, SOS};
use crate::error::{Error, Result};
use crate::s2s::{s2s_forward, AcousticFeatures, S2SModel};

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// <sos> .. tokens .. [<eos>]
    pub tokens: Vec<usize>,
    /// Accumulated log-probability of everything after <sos>.
    pub score: f64,
    /// Set when decoding stopped at max_decode_len without emitting <eos>.
    pub flagged: bool,
}

impl Hypothesis {
    /// Score divided by generated length, the final ranking key.
    pub fn normalized_score(&self) -> f64 {
        let generated = self.tokens.len() - 1;
        if generated == 0 {
            self.score
        } else {
            self.score / generated as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    score: f64,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Beam search over the student. Expansion and pruning rank by accumulated
/// log-probability; the final pick among finished hypotheses is
/// length-normalized. Width 1 reproduces the greedy argmax trace exactly.
pub fn decode(
    features: &AcousticFeatures,
    model: &S2SModel,
    beam_width: usize,
) -> Result<Hypothesis> {
    if beam_width < 1 {
        return Err(Error::Contract("beam_width must be >= 1".into()));
    }
    let max_len = model.config.max_decode_len;
    let mut beams = vec![Beam {
        tokens: vec![SOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            let logits = s2s_forward(features, &beam.tokens, model)?;
            let logp = log_softmax_row(logits.row(logits.rows() - 1));
            // top beam_width continuations of this beam suffice: the global
            // prune keeps at most beam_width candidates anyway
            let mut order: Vec<usize> = (0..logp.len()).collect();
            order.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(beam_width) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    score: beam.score + logp[tok],
                });
            }
        }
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        candidates.truncate(beam_width);
        beams = Vec::new();
        for c in candidates {
            if *c.tokens.last().unwrap() == EOS {
                finished.push(Hypothesis {
                    tokens: c.tokens,
                    score: c.score,
                    flagged: false,
                });
            } else {
                beams.push(c);
            }
        }
        if beams.is_empty() {
            break;
        }
    }
    // forced stops compete too, flagged
    finished.extend(beams.into_iter().map(|b| Hypothesis {
        tokens: b.tokens,
        score: b.score,
        flagged: true,
    }));
    finished
        .into_iter()
        .max_by(|a, b| {
            a.normalized_score()
                .partial_cmp(&b.normalized_score())
                .unwrap()
        })
        .ok_or_else(|| Error::Contract("max_decode_len of zero leaves no hypothesis".into()))
}

fn strip_frame(seq: &[usize]) -> Vec<usize> {
    seq.iter().copied().filter(|&t| t != SOS && t != EOS).collect()
}

/// Levenshtein distance with unit substitution/insertion/deletion costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over the reference length, both
/// sequences stripped of start/end symbols. Empty reference is an error.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    let r = strip_frame(reference);
    let h = strip_frame(hypothesis);
    if r.is_empty() {
        return Err(Error::Empty("empty reference".into()));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Plain recursive edit-distance definition, used as an independent oracle
/// for the dynamic-programming implementation.
pub fn edit_distance_recursive(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut [Option<usize>], w: usize) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(v) = memo[i * w + j] {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo, w) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo, w) + 1;
        let ins = go(a, b, i, j + 1, memo, w) + 1;
        let v = sub.min(del).min(ins);
        memo[i * w + j] = Some(v);
        v
    }
    let w = b.len().max(1);
    let mut memo = vec![None; a.len().max(1) * w];
    go(a, b, 0, 0, &mut memo, w)
}

/// Every sequence of length 0..=max_len over tokens FIRST_TOKEN..FIRST_TOKEN+alphabet.
pub fn all_sequences(alphabet: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..alphabet {
                let mut e = s.clone();
                e.push(FIRST_TOKEN + t);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
