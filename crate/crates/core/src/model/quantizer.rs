//! Gumbel-Softmax product quantizer.

use rand::Rng;

use crate::autodiff::{argmax, Graph, Var};
use crate::error::{Error, Result};
use crate::model::params::{Binder, Model};
use crate::model::{FrameRole, FrameSequence, QuantizerConfig};
use crate::tensor::Mat;

/// How codebook entries are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Noisy Gumbel-Softmax at temperature `tau`; `hard` gives a
    /// straight-through one-hot forward value.
    Gumbel { tau: f64, hard: bool },
    /// Noise-free argmax, used at evaluation time.
    Argmax,
}

impl Selection {
    pub fn training(tau: f64) -> Self {
        Selection::Gumbel { tau, hard: true }
    }
}

/// Independent standard Gumbel draws `−ln(−ln u)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Per-codebook selection weights for one frame's `G×V` logits.
pub fn gumbel_softmax_select<R: Rng + ?Sized>(
    logits: &Mat,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("Gumbel temperature must be > 0, got {tau}")));
    }
    let noise = gumbel_noise(logits.rows, logits.cols, rng);
    Ok(select_with_noise(logits, tau, Some(&noise), hard))
}

/// Row-wise softmax of `(logits + noise)/tau`, optionally hardened.
pub fn select_with_noise(logits: &Mat, tau: f64, noise: Option<&Mat>, hard: bool) -> Mat {
    let mut g = Graph::new();
    let x = g.leaf(logits.clone());
    let s = g.group_softmax(x, 1, tau, noise, hard);
    g.value(s).clone()
}

/// Graph output of the quantizer.
pub struct QuantizerNodes {
    /// Quantized targets, `T×ctx_dim`.
    pub q: Var,
    /// Noise-free softmax probabilities averaged over frames, `1×GV`.
    pub avg_probs: Var,
    /// Chosen entry per frame and codebook.
    pub codes: Vec<Vec<usize>>,
}

pub fn quantizer_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &QuantizerConfig,
    z: Var,
    selection: Selection,
    rng: &mut R,
) -> Result<QuantizerNodes> {
    let w = b.param(g, "quant.logits.weight");
    let bias = b.param(g, "quant.logits.bias");
    if g.value(z).cols != g.value(w).rows {
        return Err(Error::Dimension(format!(
            "latent width {} but quantizer expects {}",
            g.value(z).cols,
            g.value(w).rows
        )));
    }
    let logits = g.linear(z, w, bias);
    let groups = cfg.num_codebooks;
    let weights = match selection {
        Selection::Gumbel { tau, hard } => {
            if !(tau > 0.0) {
                return Err(Error::Argument(format!("Gumbel temperature must be > 0, got {tau}")));
            }
            let (rows, cols) = g.value(logits).shape();
            let noise = gumbel_noise(rows, cols, rng);
            g.group_softmax(logits, groups, tau, Some(&noise), hard)
        }
        Selection::Argmax => g.group_softmax(logits, groups, 1.0, None, true),
    };
    let v = cfg.entries_per_codebook;
    let wv = g.value(weights);
    let codes = (0..wv.rows)
        .map(|t| (0..groups).map(|k| argmax(&wv.row(t)[k * v..(k + 1) * v])).collect())
        .collect();
    let codebook = b.param(g, "quant.codebook");
    let entries = g.codebook_lookup(weights, codebook, groups);
    let pw = b.param(g, "quant.proj.weight");
    let pb = b.param(g, "quant.proj.bias");
    let q = g.linear(entries, pw, pb);
    let probs = g.group_softmax(logits, groups, 1.0, None, false);
    let avg_probs = g.mean_rows(probs);
    Ok(QuantizerNodes { q, avg_probs, codes })
}

/// Quantized targets for latent frames, with frame-averaged selection
/// probabilities.
pub struct Quantized {
    pub q: FrameSequence,
    pub probs: Vec<f64>,
    pub codes: Vec<Vec<usize>>,
}

pub fn quantize<R: Rng + ?Sized>(
    model: &Model,
    z: &FrameSequence,
    selection: Selection,
    rng: &mut R,
) -> Result<Quantized> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let zv = g.leaf(z.frames().clone());
    let nodes = quantizer_graph(&mut g, &mut b, &model.config.quantizer, zv, selection, rng)?;
    Ok(Quantized {
        q: FrameSequence::new(g.value(nodes.q).clone(), FrameRole::Quantized),
        probs: g.value(nodes.avg_probs).data.clone(),
        codes: nodes.codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_z(t: usize, d: usize, seed: u64) -> FrameSequence {
        let mut r = rng(seed);
        let data = (0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        FrameSequence::new(Mat::from_vec(t, d, data), FrameRole::Latent)
    }

    #[test]
    fn rows_sum_to_one() {
        let mut r = rng(1);
        let logits = Mat::from_vec(2, 5, (0..10).map(|_| r.gen_range(-4.0..4.0)).collect());
        for tau in [0.1, 1.0, 7.0] {
            let p = gumbel_softmax_select(&logits, tau, &mut r, false).unwrap();
            for row in 0..2 {
                assert!((p.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            gumbel_softmax_select(&logits, 0.0, &mut r, false),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn low_temperature_limit_is_argmax() {
        let logits = Mat::row_vector(vec![5.0, 0.0, 0.0]);
        let p = select_with_noise(&logits, 1e-3, None, false);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1) < 1e-12 && p.get(0, 2) < 1e-12);
    }

    #[test]
    fn uniform_logits_select_uniformly() {
        let v = 8;
        let draws = 100_000;
        let logits = Mat::row_vector(vec![0.0; v]);
        let mut r = rng(2);
        let mut counts = vec![0usize; v];
        for _ in 0..draws {
            let p = gumbel_softmax_select(&logits, 1.0, &mut r, true).unwrap();
            counts[argmax(p.row(0))] += 1;
        }
        let p = 1.0 / v as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn single_entry_codebook_is_constant() {
        let mut cfg = ModelConfig::default();
        cfg.quantizer.num_codebooks = 1;
        cfg.quantizer.entries_per_codebook = 1;
        let model = Model::init(cfg, 3).unwrap();
        let z = random_z(6, 64, 4);
        let out = quantize(&model, &z, Selection::training(2.0), &mut rng(5)).unwrap();
        let entry = model.params.get("quant.codebook").unwrap();
        let expect = crate::tensor::matmul(entry, false, model.params.get("quant.proj.weight").unwrap(), false);
        for t in 0..6 {
            for (k, &q) in out.q.frames().row(t).iter().enumerate() {
                let e = expect.get(0, k) + model.params.get("quant.proj.bias").unwrap().get(0, k);
                assert!((q - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_frames_quantize_identically() {
        let model = Model::init(ModelConfig::default(), 6).unwrap();
        let row: Vec<f64> = random_z(1, 64, 7).frames().row(0).to_vec();
        let z = FrameSequence::new(Mat::from_rows(&vec![row; 5]), FrameRole::Latent);
        let out = quantize(&model, &z, Selection::Argmax, &mut rng(0)).unwrap();
        for t in 1..5 {
            assert_eq!(out.q.frames().row(t), out.q.frames().row(0));
        }
    }

    #[test]
    fn hard_selection_ignores_temperature() {
        let model = Model::init(ModelConfig::default(), 8).unwrap();
        let z = random_z(20, 64, 9);
        let mut g = Graph::new();
        let mut b = Binder::new(&model.params);
        let zv = g.leaf(z.frames().clone());
        let w = b.param(&mut g, "quant.logits.weight");
        let bias = b.param(&mut g, "quant.logits.bias");
        let logits = g.linear(zv, w, bias);
        let a = g.group_softmax(logits, 2, 2.0, None, true);
        let c = g.group_softmax(logits, 2, 0.5, None, true);
        assert_eq!(g.value(a), g.value(c));
        let base = quantize(&model, &z, Selection::Argmax, &mut rng(0)).unwrap();
        assert_eq!(base.codes.len(), 20);
    }

    #[test]
    fn distinct_outputs_bounded_by_codebook_size() {
        let mut cfg = ModelConfig::default();
        cfg.quantizer.entries_per_codebook = 3;
        let model = Model::init(cfg, 10).unwrap();
        let z = random_z(200, 64, 11);
        let out = quantize(&model, &z, Selection::training(1.0), &mut rng(12)).unwrap();
        let distinct: HashSet<Vec<u64>> = (0..200)
            .map(|t| out.q.frames().row(t).iter().map(|x| x.to_bits()).collect())
            .collect();
        assert!(distinct.len() <= 9);
        assert!((out.probs.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn soft_path_gradients() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.conv_channels = 5;
        cfg.encoder.ctx_dim = 4;
        cfg.encoder.ctx_heads = 2;
        cfg.encoder.pos_conv_groups = 2;
        cfg.quantizer.entries_per_codebook = 3;
        cfg.quantizer.entry_dim = 2;
        let model = Model::init(cfg, 13).unwrap();
        let names = ["quant.logits.weight", "quant.codebook", "quant.proj.weight"];
        let z = random_z(4, 5, 14);
        let probe_w = random_z(4, 4, 15).into_frames();
        let run = |vs: &[Mat]| {
            let mut m = model.clone();
            for (n, v) in names.iter().zip(vs) {
                *m.params.get_mut(n).unwrap() = v.clone();
            }
            let mut g = Graph::new();
            let mut b = Binder::new(&m.params);
            let zv = g.leaf(z.frames().clone());
            let sel = Selection::Gumbel { tau: 0.7, hard: false };
            let nodes = quantizer_graph(&mut g, &mut b, &m.config.quantizer, zv, sel, &mut rng(16)).unwrap();
            let pw = g.leaf(probe_w.transpose());
            let y = g.matmul(nodes.q, pw);
            let m1 = g.mean_rows(y);
            let ones = g.leaf(Mat::from_vec(4, 1, vec![1.0; 4]));
            let s = g.matmul(m1, ones);
            let p = g.leaf(Mat::from_vec(6, 1, (0..6).map(|i| i as f64 - 2.5).collect()));
            let d = g.matmul(nodes.avg_probs, p);
            let total = g.add(s, d);
            let grads = g.backward(total);
            let gs: Vec<Mat> = names.iter().map(|n| grads.get(b.var_of(n).unwrap()).unwrap().clone()).collect();
            (g.value(total).data[0], gs)
        };
        let values: Vec<Mat> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let rep = check_gradients(&values, 1e-5, 50, |vs| run(vs).0, |vs| run(vs).1);
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
