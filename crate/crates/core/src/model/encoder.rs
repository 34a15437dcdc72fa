//! Feature extractor and context network, built on the autodiff tape.

use crate::audio::Waveform;
use crate::autodiff::{Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::model::params::{Binder, Model};
use crate::model::{frame_count, EncoderConfig, FrameRole, FrameSequence, MaskPlan};
use crate::tensor::Mat;

/// Zero-mean, unit-variance normalization of the raw waveform.
pub fn normalize_waveform(samples: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    samples.iter().map(|s| (s - mean) * rstd).collect()
}

/// Latent frames `Z` (`T×conv_channels`) for one waveform.
pub fn features_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &EncoderConfig,
    samples: &[f64],
) -> Result<Var> {
    frame_count(samples.len(), cfg)?;
    let x = normalize_waveform(samples);
    let mut h = g.leaf(Mat::from_vec(x.len(), 1, x));
    for (i, (&k, &s)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
        let w = b.param(g, &format!("fe.conv{i}.weight"));
        let bias = b.param(g, &format!("fe.conv{i}.bias"));
        h = g.conv1d(h, w, bias, k, s);
        h = g.gelu(h);
    }
    let gamma = b.param(g, "fe.norm.gamma");
    let beta = b.param(g, "fe.norm.beta");
    Ok(g.layer_norm(h, gamma, beta))
}

fn linear(g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Var {
    let w = b.param(g, &format!("{name}.weight"));
    let bias = b.param(g, &format!("{name}.bias"));
    g.linear(x, w, bias)
}

fn layer_norm(g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Var {
    let gamma = b.param(g, &format!("{name}.gamma"));
    let beta = b.param(g, &format!("{name}.beta"));
    g.layer_norm(x, gamma, beta)
}

fn attention(g: &mut Graph, b: &mut Binder, cfg: &EncoderConfig, x: Var, pre: &str) -> Var {
    let q = linear(g, b, x, &format!("{pre}.attn.q"));
    let k = linear(g, b, x, &format!("{pre}.attn.k"));
    let v = linear(g, b, x, &format!("{pre}.attn.v"));
    let dh = cfg.ctx_dim / cfg.ctx_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..cfg.ctx_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            g.matmul(weights, vh)
        })
        .collect();
    let merged = g.concat_cols(&heads);
    linear(g, b, merged, &format!("{pre}.attn.o"))
}

/// Context frames `C` (`T×ctx_dim`) from (possibly masked) latent frames.
pub fn context_graph(g: &mut Graph, b: &mut Binder, cfg: &EncoderConfig, z: Var) -> Var {
    let mut x = linear(g, b, z, "ctx.proj");
    let w = b.param(g, "ctx.pos_conv.weight");
    let bias = b.param(g, "ctx.pos_conv.bias");
    let pos = g.grouped_conv_same(x, w, bias, cfg.pos_conv_kernel, cfg.pos_conv_groups);
    let pos = g.gelu(pos);
    x = g.add(x, pos);
    for l in 0..cfg.ctx_layers {
        let pre = format!("ctx.layer{l}");
        let h = layer_norm(g, b, x, &format!("{pre}.ln1"));
        let a = attention(g, b, cfg, h, &pre);
        x = g.add(x, a);
        let h = layer_norm(g, b, x, &format!("{pre}.ln2"));
        let h = linear(g, b, h, &format!("{pre}.ffn.fc1"));
        let h = g.gelu(h);
        let h = linear(g, b, h, &format!("{pre}.ffn.fc2"));
        x = g.add(x, h);
    }
    layer_norm(g, b, x, "ctx.final_norm")
}

/// Replaces the planned frames of `z` by the learned mask embedding.
pub fn mask_graph(g: &mut Graph, b: &mut Binder, z: Var, plan: &MaskPlan) -> Result<Var> {
    if plan.frames() != g.value(z).rows {
        return Err(Error::Dimension(format!(
            "mask plan covers {} frames, latent has {}",
            plan.frames(),
            g.value(z).rows
        )));
    }
    if plan.is_empty() {
        return Ok(z);
    }
    let emb = b.param(g, "mask_emb");
    Ok(g.mask_rows(z, emb, plan.masked_indices()))
}

/// Latent frames of one waveform.
pub fn extract_features(model: &Model, w: &Waveform) -> Result<FrameSequence> {
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let z = features_graph(&mut g, &mut b, &model.config.encoder, w.samples())?;
    Ok(FrameSequence::new(g.value(z).clone(), FrameRole::Latent))
}

/// Context frames for latent frames that have already been masked (or not).
pub fn contextualize(model: &Model, z: &FrameSequence) -> Result<FrameSequence> {
    let cfg = &model.config.encoder;
    if z.dim() != cfg.conv_channels {
        return Err(Error::Dimension(format!(
            "latent width {} but encoder expects {}",
            z.dim(),
            cfg.conv_channels
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params);
    let zv = g.leaf(z.frames().clone());
    let c = context_graph(&mut g, &mut b, cfg, zv);
    Ok(FrameSequence::new(g.value(c).clone(), FrameRole::Context))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder.conv_channels = 4;
        cfg.encoder.ctx_dim = 8;
        cfg.encoder.ctx_heads = 2;
        cfg.encoder.ffn_dim = 8;
        cfg.encoder.pos_conv_kernel = 3;
        cfg.encoder.pos_conv_groups = 2;
        cfg.quantizer.entries_per_codebook = 4;
        cfg.quantizer.entry_dim = 3;
        cfg
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zero_input_gives_constant_frames() {
        let model = Model::init(ModelConfig::default(), 0).unwrap();
        let z = extract_features(&model, &Waveform::from_samples(vec![0.0; 4000]).unwrap()).unwrap();
        let first = z.frames().row(0).to_vec();
        for t in 1..z.len() {
            assert_eq!(z.frames().row(t), first.as_slice());
        }
    }

    #[test]
    fn shifting_by_total_stride_shifts_one_frame() {
        let model = Model::init(ModelConfig::default(), 1).unwrap();
        // trailing silence keeps the sample statistics identical after the shift
        let mut x = noise(6400, 2);
        x[6400 - 320..].iter_mut().for_each(|v| *v = 0.0);
        let mut shifted = vec![0.0; 320];
        shifted.extend_from_slice(&x[..6400 - 320]);
        let z = extract_features(&model, &Waveform::from_samples(x).unwrap()).unwrap();
        let zs = extract_features(&model, &Waveform::from_samples(shifted).unwrap()).unwrap();
        assert_eq!(z.len(), zs.len());
        for t in 2..z.len() - 2 {
            for (a, b) in z.frames().row(t - 1).iter().zip(zs.frames().row(t)) {
                assert!((a - b).abs() <= 1e-5, "frame {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let model = Model::init(small_config(), 0).unwrap();
        let r = extract_features(&model, &Waveform::from_samples(vec![0.1; 399]).unwrap());
        assert!(matches!(r, Err(Error::TooShort { .. })));
        let z = extract_features(&model, &Waveform::from_samples(noise(400, 1)).unwrap()).unwrap();
        assert_eq!(z.len(), 1);
    }

    #[test]
    fn context_is_deterministic_and_order_sensitive() {
        let model = Model::init(ModelConfig::default(), 5).unwrap();
        let z = extract_features(&model, &Waveform::from_samples(noise(4000, 3)).unwrap()).unwrap();
        let c1 = contextualize(&model, &z).unwrap();
        let c2 = contextualize(&model, &z).unwrap();
        assert_eq!(c1, c2);
        let mut swapped = z.frames().clone();
        let (r0, r3) = (swapped.row(0).to_vec(), swapped.row(3).to_vec());
        swapped.row_mut(0).copy_from_slice(&r3);
        swapped.row_mut(3).copy_from_slice(&r0);
        let c3 = contextualize(&model, &FrameSequence::new(swapped, FrameRole::Latent)).unwrap();
        let c3_unswapped_row0 = c3.frames().row(3);
        assert!(c1.frames().row(0).iter().zip(c3_unswapped_row0).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    /// Scalar probe of the encoder output as a function of named parameters.
    fn probe_loss(model: &Model, samples: &[f64], names: &[&str], values: &[Mat], context: bool) -> (f64, Vec<Mat>) {
        let mut m = model.clone();
        for (n, v) in names.iter().zip(values) {
            *m.params.get_mut(n).unwrap() = v.clone();
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params);
        let z = features_graph(&mut g, &mut b, &m.config.encoder, samples).unwrap();
        let out = if context {
            let plan = MaskPlan::new(vec![1], g.value(z).rows).unwrap();
            let zm = mask_graph(&mut g, &mut b, z, &plan).unwrap();
            context_graph(&mut g, &mut b, &m.config.encoder, zm)
        } else {
            z
        };
        let (rows, cols) = g.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = g.leaf(Mat::from_vec(cols, 1, (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let y = g.matmul(out, w);
        let ones = g.leaf(Mat::from_vec(1, rows, vec![1.0; rows]));
        let s = g.matmul(ones, y);
        let grads = g.backward(s);
        let gs = names
            .iter()
            .map(|n| {
                let v = b.var_of(n).unwrap();
                grads.get(v).unwrap().clone()
            })
            .collect();
        (g.value(s).data[0], gs)
    }

    #[test]
    fn feature_extractor_gradients() {
        let model = Model::init(small_config(), 7).unwrap();
        let x = noise(1200, 4);
        let names = ["fe.conv0.weight", "fe.conv3.weight", "fe.conv6.bias", "fe.norm.gamma"];
        let values: Vec<Mat> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let rep = check_gradients(
            &values,
            1e-5,
            30,
            |vs| probe_loss(&model, &x, &names, vs, false).0,
            |vs| probe_loss(&model, &x, &names, vs, false).1,
        );
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn context_network_gradients() {
        let model = Model::init(small_config(), 8).unwrap();
        let x = noise(2000, 5);
        let names = [
            "ctx.layer0.attn.q.weight",
            "ctx.layer1.attn.k.weight",
            "ctx.layer0.attn.v.bias",
            "ctx.pos_conv.weight",
            "ctx.layer1.ffn.fc1.weight",
            "mask_emb",
            "fe.conv2.weight",
        ];
        let values: Vec<Mat> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let rep = check_gradients(
            &values,
            1e-5,
            30,
            |vs| probe_loss(&model, &x, &names, vs, true).0,
            |vs| probe_loss(&model, &x, &names, vs, true).1,
        );
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }
}
