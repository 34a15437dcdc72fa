//! Character vocabulary, CTC loss and greedy CTC decoding.

use crate::autodiff::argmax;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const BLANK: usize = 0;
pub const WORD_BOUNDARY: usize = 1;
const CHARACTERS: &str = "abcdefghijklmnopqrstuvwxyz'-.";

/// 29 characters plus a word-boundary token, with the CTC blank at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut symbols = vec!['_', '|'];
        symbols.extend(CHARACTERS.chars());
        Self { symbols }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Character tokens only (no blank, no boundary).
    pub fn characters(&self) -> &[char] {
        &self.symbols[2..]
    }

    pub fn symbol(&self, token: usize) -> char {
        self.symbols[token]
    }

    pub fn token_of(&self, ch: char) -> Option<usize> {
        if ch == ' ' {
            return Some(WORD_BOUNDARY);
        }
        self.symbols.iter().skip(2).position(|&c| c == ch).map(|p| p + 2)
    }

    /// Maps text to tokens; a space becomes the word-boundary token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.token_of(c)
                    .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Maps tokens back to text, skipping blanks.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != BLANK)
            .map(|&t| if t == WORD_BOUNDARY { ' ' } else { self.symbols[t] })
            .collect()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Minimum number of frames that can emit `target` (repeats need a blank).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-probability of `target` under per-frame `logits` (`T×|V|`),
/// marginalized over all blank-augmented alignments.
pub fn ctc_loss(logits: &Mat, target: &[usize]) -> Result<f64> {
    Ok(ctc_loss_with_grad(logits, target)?.0)
}

/// CTC loss and its gradient with respect to the unnormalized logits.
pub fn ctc_loss_with_grad(logits: &Mat, target: &[usize]) -> Result<(f64, Mat)> {
    let (frames, vocab) = logits.shape();
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab || t == BLANK) {
        return Err(Error::Data(format!("target token {bad} invalid for {vocab}-way logits")));
    }
    let required = min_frames(target);
    if frames < required || frames == 0 {
        return Err(Error::InfeasibleAlignment { frames, required });
    }
    let logp = log_softmax_rows(logits);
    // extended label sequence: blank, l1, blank, l2, ..., blank
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&t| [t, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; frames];
    alpha[0][0] = logp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = logp.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + logp.get(t, ext[s]);
        }
    }
    let mut beta = vec![vec![ninf; s_len]; frames];
    beta[frames - 1][s_len - 1] = logp.get(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = logp.get(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + logp.get(t, ext[s]);
        }
    }
    let mut log_p = alpha[frames - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[frames - 1][s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment { frames, required });
    }

    // ∂(−ln p)/∂u_tk = y_tk − (1 / (p·y_tk)) Σ_{s: ext_s = k} α_t(s)·β_t(s)
    let mut grad = Mat::zeros(frames, vocab);
    let mut occupancy = vec![ninf; vocab];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            occupancy[ext[s]] = log_add(occupancy[ext[s]], alpha[t][s] + beta[t][s]);
        }
        for k in 0..vocab {
            let y = logp.get(t, k);
            let post = if occupancy[k] == ninf {
                0.0
            } else {
                (occupancy[k] - log_p - y).exp()
            };
            grad.set(t, k, y.exp() - post);
        }
    }
    Ok((-log_p, grad))
}

/// Per-frame argmax path.
pub fn greedy_path(logits: &Mat) -> Vec<usize> {
    (0..logits.rows).map(|t| argmax(logits.row(t))).collect()
}

/// Collapses repeats then removes blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

pub fn greedy_ctc_decode(logits: &Mat, vocab: &Vocabulary) -> String {
    vocab.decode(&collapse_path(&greedy_path(logits)))
}
