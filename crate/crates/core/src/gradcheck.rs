//! Finite-difference checks of every analytic gradient in the crate, on
//! small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::check::{check_gradients, GradCheckReport};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::encoder::{context_graph, features_graph, mask_graph};
use crate::model::params::Binder;
use crate::model::quantizer::quantizer_graph;
use crate::model::{MaskPlan, Model, ModelConfig, Selection};
use crate::objectives::{
    ctc_loss, ctc_loss_with_grad, diversity_with_grad, evaluate_terms, evaluate_terms_with_grad, plan_terms,
    LossConfig,
};
use crate::tensor::Mat;

/// Tolerance on the relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl SuiteResult {
    fn from_report(suite: &str, r: GradCheckReport) -> Self {
        Self {
            suite: suite.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// A miniature model that keeps the checks fast.
pub fn small_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.conv_channels = 4;
    cfg.encoder.ctx_dim = 8;
    cfg.encoder.ctx_heads = 2;
    cfg.encoder.ffn_dim = 8;
    cfg.encoder.pos_conv_kernel = 3;
    cfg.encoder.pos_conv_groups = 2;
    cfg.quantizer.num_codebooks = 2;
    cfg.quantizer.entries_per_codebook = 4;
    cfg.quantizer.entry_dim = 3;
    cfg
}

/// Random linear read-out of `out`, summed over rows.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Var {
    let (rows, cols) = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(rand_mat(cols, 1, &mut rng));
    let y = g.matmul(out, w);
    let ones = g.leaf(Mat::from_vec(1, rows, vec![1.0; rows]));
    g.matmul(ones, y)
}

fn model_probe(model: &Model, x: &[f64], names: &[&str], values: &[Mat], quantizer: bool) -> (f64, Vec<Mat>) {
    let mut m = model.clone();
    for (n, v) in names.iter().zip(values) {
        if let Some(p) = m.params.get_mut(n) {
            *p = v.clone();
        }
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params);
    let Ok(z) = features_graph(&mut g, &mut b, &m.config.encoder, x) else {
        return (f64::NAN, Vec::new());
    };
    let out = if quantizer {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sel = Selection::Gumbel { tau: 0.7, hard: false };
        match quantizer_graph(&mut g, &mut b, &m.config.quantizer, z, sel, &mut rng) {
            Ok(nodes) => nodes.q,
            Err(_) => return (f64::NAN, Vec::new()),
        }
    } else {
        let rows = g.value(z).rows;
        let plan = MaskPlan::new(vec![1, 2], rows).unwrap_or_else(|_| MaskPlan::empty(rows));
        let zm = mask_graph(&mut g, &mut b, z, &plan).unwrap_or(z);
        context_graph(&mut g, &mut b, &m.config.encoder, zm)
    };
    let s = readout(&mut g, out, 99);
    let grads = g.backward(s);
    let gs = names
        .iter()
        .zip(values)
        .map(|(n, v)| {
            b.var_of(n)
                .and_then(|var| grads.get(var).cloned())
                .unwrap_or_else(|| Mat::zeros(v.rows, v.cols))
        })
        .collect();
    (g.value(s).data[0], gs)
}

/// Runs the contrastive, diversity, CTC, encoder and soft-quantizer checks
/// with central differences of step `eps`.
pub fn run_suites(eps: f64, seed: u64) -> Result<Vec<SuiteResult>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Argument(format!("finite-difference step {eps} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (k, t, d) = (3, 7, 4);
    let inputs: Vec<Mat> = (0..2 * k).map(|_| rand_mat(t, d, &mut rng)).collect();
    let mut masked: Vec<usize> = (0..t).filter(|_| rng.gen_bool(0.5)).collect();
    masked.extend([0, t - 1]);
    let plan = MaskPlan::new(masked, t)?;
    let cfg = LossConfig::default();
    let terms = plan_terms(k, &plan, &cfg, &mut rng)?;
    let kappa = cfg.temperature;
    let r = check_gradients(
        &inputs,
        eps,
        1000,
        |xs| evaluate_terms(&xs[..k], &xs[k..], &terms, kappa).map_or(f64::NAN, |b| b.total),
        |xs| match evaluate_terms_with_grad(&xs[..k], &xs[k..], &terms, kappa) {
            Ok((_, dc, dq)) => dc.into_iter().chain(dq).collect(),
            Err(_) => xs.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
        },
    );
    out.push(SuiteResult::from_report("contrastive", r));

    let probs = Mat::row_vector((0..12).map(|_| rng.gen_range(0.05..1.0)).collect());
    let r = check_gradients(
        &[probs],
        eps,
        100,
        |xs| diversity_with_grad(&xs[0].data, 3).map_or(f64::NAN, |d| d.0),
        |xs| vec![Mat::row_vector(diversity_with_grad(&xs[0].data, 3).map_or_else(|_| vec![0.0; 12], |d| d.1))],
    );
    out.push(SuiteResult::from_report("diversity", r));

    let logits = rand_mat(9, 5, &mut rng);
    let target = [1, 3, 3, 2];
    let r = check_gradients(
        &[logits],
        eps,
        100,
        |xs| ctc_loss(&xs[0], &target).unwrap_or(f64::NAN),
        |xs| vec![ctc_loss_with_grad(&xs[0], &target).map_or_else(|_| Mat::zeros(9, 5), |r| r.1)],
    );
    out.push(SuiteResult::from_report("ctc", r));

    let model = Model::init(small_model_config(), seed)?;
    let x: Vec<f64> = (0..2000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let encoder = [
        "fe.conv0.weight",
        "fe.conv3.weight",
        "fe.conv6.bias",
        "fe.norm.gamma",
        "ctx.proj.weight",
        "ctx.pos_conv.weight",
        "ctx.layer0.attn.q.weight",
        "ctx.layer1.attn.k.weight",
        "ctx.layer0.attn.v.bias",
        "ctx.layer1.ffn.fc1.weight",
        "mask_emb",
    ];
    let quantizer = ["quant.logits.weight", "quant.logits.bias", "quant.codebook", "quant.proj.weight"];
    for (suite, names, quant) in [("encoder", &encoder[..], false), ("quantizer", &quantizer[..], true)] {
        let values = names
            .iter()
            .map(|n| {
                model
                    .params
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("missing parameter {n}")))
            })
            .collect::<Result<Vec<Mat>>>()?;
        let r = check_gradients(
            &values,
            eps,
            25,
            |vs| model_probe(&model, &x, names, vs, quant).0,
            |vs| model_probe(&model, &x, names, vs, quant).1,
        );
        out.push(SuiteResult::from_report(suite, r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let results = run_suites(1e-5, 0).unwrap();
        assert_eq!(results.len(), 5);
        for r in &results {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
        assert!(run_suites(0.0, 0).is_err());
    }
}
