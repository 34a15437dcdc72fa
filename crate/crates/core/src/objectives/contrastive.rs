//! Cosine-similarity InfoNCE and the multi-variant consistency objective.
//!
//! For an utterance with K variants, every masked step `t` and every ordered
//! pair `(i, j)` contributes one InfoNCE term whose anchor is the context
//! vector `c[i][t]` and whose positive is the quantized target `q[j][t]`.
//! Terms with `i == j` form the self part, the rest the cross part.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskPlan;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature κ applied to cosine similarities.
    pub temperature: f64,
    pub num_negatives: usize,
    pub diversity_weight: f64,
    /// Reuse one negative draw for all (i, j) pairs at a time step.
    #[serde(default)]
    pub share_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            num_negatives: 10,
            diversity_weight: 0.1,
            share_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Argument("contrastive temperature must be > 0".into()));
        }
        if self.num_negatives == 0 {
            return Err(Error::Argument("need at least one negative".into()));
        }
        if !(self.diversity_weight >= 0.0) {
            return Err(Error::Argument("diversity weight must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} dims", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity with its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    Ok((cos, da, db))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(xs)[0]`, accurate when `xs[0]` dominates.
fn neg_log_softmax_first(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xs[0] == m {
        xs[1..].iter().map(|x| (x - m).exp()).sum::<f64>().ln_1p()
    } else {
        log_sum_exp(xs) - xs[0]
    }
}

/// InfoNCE of one anchor against a positive and its negatives. The
/// denominator includes the positive.
pub fn contrastive_loss(c: &[f64], positive: &[f64], negatives: &[&[f64]], kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Argument("temperature must be > 0".into()));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_sim(c, positive)? / kappa);
    for n in negatives {
        logits.push(cosine_sim(c, n)? / kappa);
    }
    Ok(neg_log_softmax_first(&logits))
}

/// A (variant, frame) coordinate into a stack of frame sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub variant: usize,
    pub time: usize,
}

/// Draws `n` negatives for the masked step `t` from the masked steps of all
/// `k` variants, excluding step `t` itself in every variant. Draws are
/// without replacement when the pool is large enough, with replacement
/// otherwise.
pub fn sample_negatives<R: Rng + ?Sized>(
    k: usize,
    plan: &MaskPlan,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Slot>> {
    let pool: Vec<Slot> = (0..k)
        .flat_map(|variant| {
            plan.masked_indices()
                .iter()
                .filter(move |&&time| time != t)
                .map(move |&time| Slot { variant, time })
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::Degenerate(format!(
            "no negatives available for step {t}: {} masked step(s)",
            plan.len()
        )));
    }
    Ok(if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTerm {
    pub anchor: Slot,
    pub positive: Slot,
    pub negatives: Vec<Slot>,
}

impl ContrastiveTerm {
    pub fn is_self(&self) -> bool {
        self.anchor.variant == self.positive.variant
    }
}

/// Enumerates every (t, i, j) term for `k` variants under `plan`, drawing
/// negatives per term (or per step when `cfg.share_negatives`).
pub fn plan_terms<R: Rng + ?Sized>(
    k: usize,
    plan: &MaskPlan,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<Vec<ContrastiveTerm>> {
    cfg.validate()?;
    let mut terms = Vec::with_capacity(plan.len() * k * k);
    for &t in plan.masked_indices() {
        let shared = if cfg.share_negatives {
            Some(sample_negatives(k, plan, t, cfg.num_negatives, rng)?)
        } else {
            None
        };
        for i in 0..k {
            for j in 0..k {
                let negatives = match &shared {
                    Some(s) => s.clone(),
                    None => sample_negatives(k, plan, t, cfg.num_negatives, rng)?,
                };
                terms.push(ContrastiveTerm {
                    anchor: Slot { variant: i, time: t },
                    positive: Slot { variant: j, time: t },
                    negatives,
                });
            }
        }
    }
    Ok(terms)
}

/// Loss value and bookkeeping for a set of terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CclBreakdown {
    /// Mean over all terms, accumulated independently of the split.
    pub total: f64,
    /// Sum of self terms divided by the total term count.
    pub self_part: f64,
    /// Sum of cross terms divided by the total term count.
    pub cross_part: f64,
    pub terms: usize,
    /// Terms whose positive scored strictly above every negative.
    pub correct: usize,
}

impl CclBreakdown {
    pub fn accuracy(&self) -> f64 {
        if self.terms == 0 {
            0.0
        } else {
            self.correct as f64 / self.terms as f64
        }
    }
}

fn check_shapes(c_set: &[Mat], q_set: &[Mat], plan: Option<&MaskPlan>) -> Result<()> {
    if c_set.is_empty() || c_set.len() != q_set.len() {
        return Err(Error::Contract(format!(
            "{} context vs {} quantized sequences",
            c_set.len(),
            q_set.len()
        )));
    }
    let t = c_set[0].rows;
    let d = c_set[0].cols;
    for m in c_set.iter().chain(q_set) {
        if m.rows != t {
            return Err(Error::Contract(format!(
                "variants disagree on frame count: {} vs {t}",
                m.rows
            )));
        }
        if m.cols != d {
            return Err(Error::Dimension(format!("{} vs {d} dims", m.cols)));
        }
    }
    if let Some(plan) = plan {
        if plan.frames() != t {
            return Err(Error::Contract(format!(
                "mask plan covers {} frames, sequences have {t}",
                plan.frames()
            )));
        }
    }
    Ok(())
}

fn accumulate(
    c_set: &[Mat],
    q_set: &[Mat],
    terms: &[ContrastiveTerm],
    kappa: f64,
    mut grads: Option<(&mut [Mat], &mut [Mat])>,
) -> Result<CclBreakdown> {
    check_shapes(c_set, q_set, None)?;
    if !(kappa > 0.0) {
        return Err(Error::Argument("temperature must be > 0".into()));
    }
    let k = c_set.len();
    let frames = c_set[0].rows;
    for term in terms {
        for s in std::iter::once(&term.anchor)
            .chain(std::iter::once(&term.positive))
            .chain(&term.negatives)
        {
            if s.variant >= k || s.time >= frames {
                return Err(Error::Contract(format!("slot {s:?} outside {k}×{frames}")));
            }
        }
    }
    let n_terms = terms.len().max(1) as f64;
    let mut out = CclBreakdown {
        terms: terms.len(),
        ..Default::default()
    };
    let mut self_sum = 0.0;
    let mut cross_sum = 0.0;
    let mut total_sum = 0.0;
    let mut logits = Vec::new();
    let mut partials: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for term in terms {
        let c = c_set[term.anchor.variant].row(term.anchor.time);
        let candidates =
            std::iter::once(&term.positive).chain(&term.negatives).collect::<Vec<_>>();
        logits.clear();
        partials.clear();
        for slot in &candidates {
            let q = q_set[slot.variant].row(slot.time);
            if grads.is_some() {
                let (cos, dc, dq) = cosine_with_grad(c, q)?;
                logits.push(cos / kappa);
                partials.push((dc, dq));
            } else {
                logits.push(cosine_sim(c, q)? / kappa);
            }
        }
        let lse = log_sum_exp(&logits);
        let loss = neg_log_softmax_first(&logits);
        if logits[1..].iter().all(|&l| logits[0] > l) {
            out.correct += 1;
        }
        total_sum += loss;
        if term.is_self() {
            self_sum += loss;
        } else {
            cross_sum += loss;
        }
        if let Some((dc_set, dq_set)) = grads.as_mut() {
            // d loss / d logit_m = softmax_m − [m = 0]; logit = cos/κ
            for (m, slot) in candidates.iter().enumerate() {
                let w = ((logits[m] - lse).exp() - if m == 0 { 1.0 } else { 0.0 }) / (kappa * n_terms);
                let (dc, dq) = &partials[m];
                for (acc, v) in dc_set[term.anchor.variant].row_mut(term.anchor.time).iter_mut().zip(dc) {
                    *acc += w * v;
                }
                for (acc, v) in dq_set[slot.variant].row_mut(slot.time).iter_mut().zip(dq) {
                    *acc += w * v;
                }
            }
        }
    }
    out.total = total_sum / n_terms;
    out.self_part = self_sum / n_terms;
    out.cross_part = cross_sum / n_terms;
    Ok(out)
}

/// Evaluates precomputed terms.
pub fn evaluate_terms(
    c_set: &[Mat],
    q_set: &[Mat],
    terms: &[ContrastiveTerm],
    kappa: f64,
) -> Result<CclBreakdown> {
    accumulate(c_set, q_set, terms, kappa, None)
}

/// Evaluates precomputed terms and the gradient of `total` with respect to
/// every context and quantized frame.
pub fn evaluate_terms_with_grad(
    c_set: &[Mat],
    q_set: &[Mat],
    terms: &[ContrastiveTerm],
    kappa: f64,
) -> Result<(CclBreakdown, Vec<Mat>, Vec<Mat>)> {
    let mut dc: Vec<Mat> = c_set.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
    let mut dq: Vec<Mat> = q_set.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
    let b = accumulate(c_set, q_set, terms, kappa, Some((&mut dc, &mut dq)))?;
    Ok((b, dc, dq))
}

/// Consistency contrastive loss over K variants sharing one mask plan.
pub fn consistency_contrastive_loss<R: Rng + ?Sized>(
    c_set: &[Mat],
    q_set: &[Mat],
    plan: &MaskPlan,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<CclBreakdown> {
    check_shapes(c_set, q_set, Some(plan))?;
    let terms = plan_terms(c_set.len(), plan, cfg, rng)?;
    evaluate_terms(c_set, q_set, &terms, cfg.temperature)
}

/// Codebook diversity penalty `(G·V − Σ_g exp(H_g)) / (G·V)` where `H_g` is
/// the entropy of the averaged selection distribution of codebook `g`.
/// `probs` holds `G` consecutive blocks of `V` probabilities.
pub fn diversity_loss(probs: &[f64], groups: usize) -> Result<f64> {
    Ok(diversity_with_grad(probs, groups)?.0)
}

pub fn diversity_with_grad(probs: &[f64], groups: usize) -> Result<(f64, Vec<f64>)> {
    if groups == 0 || probs.len() % groups != 0 || probs.is_empty() {
        return Err(Error::Dimension(format!(
            "{} probabilities do not split into {groups} codebooks",
            probs.len()
        )));
    }
    let gv = probs.len() as f64;
    let v = probs.len() / groups;
    let mut perplexity_sum = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for g in 0..groups {
        let block = &probs[g * v..(g + 1) * v];
        let entropy: f64 = -block
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        let perplexity = entropy.exp();
        perplexity_sum += perplexity;
        for (k, &p) in block.iter().enumerate() {
            // d/dp of −exp(H)/GV with dH/dp = −(ln p + 1)
            grad[g * v + k] = perplexity * (p.max(1e-300).ln() + 1.0) / gv;
        }
    }
    Ok(((gv - perplexity_sum) / gv, grad))
}
