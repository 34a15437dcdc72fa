//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::Vocabulary;
use crate::tensor::Mat;

/// Ordered, named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }
}

/// Lazily creates graph leaves for parameters and remembers which ones were
/// used so gradients can be gathered after the backward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *self.vars[i].get_or_insert_with(|| g.leaf(self.store.values[i].clone()))
    }

    /// Adds `scale ×` each bound parameter's gradient into `acc`.
    pub fn accumulate(&self, grads: &crate::autodiff::Grads, scale: f64, acc: &mut [Mat]) {
        for (slot, var) in acc.iter_mut().zip(&self.vars) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                for (a, b) in slot.data.iter_mut().zip(&g.data) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn var_of(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).and_then(|i| self.vars[i])
    }
}

/// Configuration plus parameters of the encoder, quantizer and optional CTC
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
    )
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>()).collect())
}

pub const CTC_HEAD: &str = "ctc.weight";

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder;
        let q = &config.quantizer;
        let mut p = ParamStore::new();

        let mut c_in = 1;
        for (i, &k) in enc.conv_kernels.iter().enumerate() {
            let fan_in = (k * c_in) as f64;
            p.insert(
                format!("fe.conv{i}.weight"),
                normal(k * c_in, enc.conv_channels, (2.0 / fan_in).sqrt(), &mut rng),
            );
            p.insert(format!("fe.conv{i}.bias"), Mat::zeros(1, enc.conv_channels));
            c_in = enc.conv_channels;
        }
        let c = enc.conv_channels;
        let d = enc.ctx_dim;
        p.insert("fe.norm.gamma", Mat::from_vec(1, c, vec![1.0; c]));
        p.insert("fe.norm.beta", Mat::zeros(1, c));
        p.insert("mask_emb", uniform(1, c, &mut rng));

        let linear = |p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            p.insert(format!("{name}.weight"), normal(i, o, (1.0 / i as f64).sqrt(), rng));
            p.insert(format!("{name}.bias"), Mat::zeros(1, o));
        };
        let layer_norm = |p: &mut ParamStore, name: &str, n: usize| {
            p.insert(format!("{name}.gamma"), Mat::from_vec(1, n, vec![1.0; n]));
            p.insert(format!("{name}.beta"), Mat::zeros(1, n));
        };

        linear(&mut p, "ctx.proj", c, d, &mut rng);
        let cg = d / enc.pos_conv_groups;
        let pos_fan = (enc.pos_conv_kernel * cg) as f64;
        p.insert(
            "ctx.pos_conv.weight",
            normal(d, enc.pos_conv_kernel * cg, (1.0 / pos_fan).sqrt(), &mut rng),
        );
        p.insert("ctx.pos_conv.bias", Mat::zeros(1, d));
        for l in 0..enc.ctx_layers {
            let pre = format!("ctx.layer{l}");
            layer_norm(&mut p, &format!("{pre}.ln1"), d);
            for proj in ["q", "k", "v", "o"] {
                linear(&mut p, &format!("{pre}.attn.{proj}"), d, d, &mut rng);
            }
            layer_norm(&mut p, &format!("{pre}.ln2"), d);
            linear(&mut p, &format!("{pre}.ffn.fc1"), d, enc.ffn_dim, &mut rng);
            linear(&mut p, &format!("{pre}.ffn.fc2"), enc.ffn_dim, d, &mut rng);
        }
        layer_norm(&mut p, "ctx.final_norm", d);

        p.insert("quant.logits.weight", normal(c, q.logits_dim(), 1.0, &mut rng));
        p.insert("quant.logits.bias", Mat::zeros(1, q.logits_dim()));
        p.insert("quant.codebook", uniform(q.logits_dim(), q.entry_dim, &mut rng));
        linear(&mut p, "quant.proj", q.num_codebooks * q.entry_dim, d, &mut rng);

        Ok(Self { config, params: p })
    }

    /// Appends a randomly initialized output layer over `vocab`.
    pub fn add_ctc_head(&mut self, vocab: &Vocabulary, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc7c_4ead);
        let d = self.config.encoder.ctx_dim;
        self.params
            .insert(CTC_HEAD, normal(d, vocab.len(), (1.0 / d as f64).sqrt(), &mut rng));
        self.params.insert("ctc.bias", Mat::zeros(1, vocab.len()));
    }

    pub fn has_ctc_head(&self) -> bool {
        self.params.contains(CTC_HEAD)
    }

    /// Parameters of the convolutional feature extractor.
    pub fn is_feature_extractor_param(name: &str) -> bool {
        name.starts_with("fe.")
    }

    /// Confirms that `other` has the same parameter names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, m) in self.params.iter() {
            match other.get(name) {
                Some(o) if o.shape() == m.shape() => {}
                Some(o) => {
                    return Err(Error::Version(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        m.shape()
                    )))
                }
                None => return Err(Error::Version(format!("parameter {name} missing"))),
            }
        }
        Ok(())
    }
}
