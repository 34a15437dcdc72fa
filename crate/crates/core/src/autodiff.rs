//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. Loss functions whose gradients are
//! computed in closed form elsewhere enter the tape through
//! [`Graph::scalar_with_grads`].

use crate::tensor::{gemm_strided, matmul, Mat};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    },
    GroupedConvSame {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        groups: usize,
    },
    SoftmaxRows(Var),
    MaskRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GroupSoftmax {
        x: Var,
        groups: usize,
        tau: f64,
        soft: Mat,
    },
    CodebookLookup {
        weights: Var,
        codebook: Var,
        groups: usize,
    },
    MeanRows(Var),
    WeightedSum(Vec<(Var, f64)>),
    ScalarGrads(Vec<(Var, Mat)>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax over `cols` consecutive entries starting at `offset`.
fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        let mut value = self.value(x).clone();
        assert_eq!(value.cols, bias.cols, "bias width mismatch");
        for r in 0..value.rows {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&bias.data) {
                *v += bv;
            }
        }
        self.push(value, Op::AddRow(x, b))
    }

    /// `x·w + b` for row-major activations.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale(s);
        self.push(value, Op::Scale(x, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|&v| gelu(v)).collect());
        self.push(value, Op::Gelu(x))
    }

    /// Normalizes each row, then applies the `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut value = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                value.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Valid (unpadded) strided 1-D convolution.
    ///
    /// `x` is `L×C_in` (time-major), `w` is `(kernel·C_in)×C_out` with row
    /// index `j·C_in + i` for tap `j` and input channel `i`, `b` is `1×C_out`.
    /// The output is `L_out×C_out` with `L_out = (L − kernel)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let c_in = xv.cols;
        assert_eq!(wv.rows, kernel * c_in, "conv weight rows");
        assert!(xv.rows >= kernel, "conv input shorter than kernel");
        let l_out = (xv.rows - kernel) / stride + 1;
        let c_out = wv.cols;
        let mut value = Mat::zeros(l_out, c_out);
        for r in 0..l_out {
            value.row_mut(r).copy_from_slice(&self.value(b).data);
        }
        // Patch t is the contiguous slice starting at t·stride·C_in.
        gemm_strided(
            l_out,
            kernel * c_in,
            c_out,
            1.0,
            &xv.data,
            stride * c_in,
            1,
            &wv.data,
            c_out,
            1,
            1.0,
            &mut value.data,
        );
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                kernel,
                stride,
            },
        )
    }

    /// Grouped, stride-1, zero-padded convolution that keeps the length.
    ///
    /// `x` is `T×C`, `w` is `C×(kernel·C/groups)` with column `j·(C/groups) + i`
    /// for tap `j` and in-group channel `i`; `kernel` must be odd.
    pub fn grouped_conv_same(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        groups: usize,
    ) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (t_len, c) = xv.shape();
        assert_eq!(c % groups, 0);
        let cg = c / groups;
        assert_eq!(wv.shape(), (c, kernel * cg));
        let pad = kernel / 2;
        let mut value = Mat::zeros(t_len, c);
        for t in 0..t_len {
            for o in 0..c {
                let g = o / cg;
                let wrow = wv.row(o);
                let mut acc = bv.data[o];
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let xrow = &xv.row(src as usize)[g * cg..(g + 1) * cg];
                    let wk = &wrow[j * cg..(j + 1) * cg];
                    acc += xrow.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
                }
                value.set(t, o, acc);
            }
        }
        self.push(
            value,
            Op::GroupedConvSame {
                x,
                w,
                b,
                kernel,
                groups,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros(src.rows, src.cols);
        for r in 0..src.rows {
            softmax_into(src.row(r), value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Replaces the listed rows of `x` by the `1×n` row `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Var {
        let mut value = self.value(x).clone();
        let f = self.value(fill).clone();
        assert_eq!(f.shape(), (1, value.cols), "mask vector width");
        for &r in rows {
            value.row_mut(r).copy_from_slice(&f.data);
        }
        self.push(
            value,
            Op::MaskRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols);
        let mut value = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols);
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Softmax of `(x + noise)/tau` over each of `groups` equal column blocks.
    ///
    /// With `hard`, the forward value is the one-hot argmax of each block
    /// while the backward pass uses the soft distribution (straight-through).
    pub fn group_softmax(
        &mut self,
        x: Var,
        groups: usize,
        tau: f64,
        noise: Option<&Mat>,
        hard: bool,
    ) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        assert_eq!(cols % groups, 0);
        let v = cols / groups;
        let mut soft = Mat::zeros(rows, cols);
        let mut scratch = vec![0.0; v];
        for r in 0..rows {
            for g in 0..groups {
                let range = g * v..(g + 1) * v;
                for (k, s) in scratch.iter_mut().enumerate() {
                    let n = noise.map_or(0.0, |m| m.get(r, g * v + k));
                    *s = (src.row(r)[g * v + k] + n) / tau;
                }
                softmax_into(&scratch, &mut soft.row_mut(r)[range]);
            }
        }
        let value = if hard {
            let mut onehot = Mat::zeros(rows, cols);
            for r in 0..rows {
                for g in 0..groups {
                    let block = &soft.row(r)[g * v..(g + 1) * v];
                    let best = argmax(block);
                    onehot.set(r, g * v + best, 1.0);
                }
            }
            onehot
        } else {
            soft.clone()
        };
        self.push(
            value,
            Op::GroupSoftmax {
                x,
                groups,
                tau,
                soft,
            },
        )
    }

    /// Per-group weighted sum of codebook rows, concatenated across groups.
    ///
    /// `weights` is `T×(G·V)`, `codebook` is `(G·V)×d`; output is `T×(G·d)`.
    pub fn codebook_lookup(&mut self, weights: Var, codebook: Var, groups: usize) -> Var {
        let wv = self.value(weights);
        let cb = self.value(codebook);
        let (t_len, gv) = wv.shape();
        assert_eq!(cb.rows, gv);
        let v = gv / groups;
        let d = cb.cols;
        let mut value = Mat::zeros(t_len, groups * d);
        for t in 0..t_len {
            for g in 0..groups {
                for e in 0..v {
                    let wgt = wv.get(t, g * v + e);
                    if wgt == 0.0 {
                        continue;
                    }
                    let entry = cb.row(g * v + e);
                    let out = &mut value.row_mut(t)[g * d..(g + 1) * d];
                    for (o, x) in out.iter_mut().zip(entry) {
                        *o += wgt * x;
                    }
                }
            }
        }
        self.push(
            value,
            Op::CodebookLookup {
                weights,
                codebook,
                groups,
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros(1, src.cols);
        for r in 0..src.rows {
            for (v, s) in value.data.iter_mut().zip(src.row(r)) {
                *v += s;
            }
        }
        value.scale(1.0 / src.rows as f64);
        self.push(value, Op::MeanRows(x))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let (first, _) = terms[0];
        let mut value = Mat::zeros(self.value(first).rows, self.value(first).cols);
        for &(v, w) in terms {
            for (a, b) in value.data.iter_mut().zip(&self.value(v).data) {
                *a += w * b;
            }
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// A scalar computed outside the tape together with its gradient with
    /// respect to each input node.
    pub fn scalar_with_grads(&mut self, value: f64, grads: Vec<(Var, Mat)>) -> Var {
        for (v, g) in &grads {
            assert_eq!(self.value(*v).shape(), g.shape(), "local gradient shape");
        }
        self.push(Mat::scalar(value), Op::ScalarGrads(grads))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, delta: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = if *ta {
                    matmul(bv, *tb, g, true)
                } else {
                    matmul(g, false, bv, !*tb)
                };
                let db = if *tb {
                    matmul(g, true, av, *ta)
                } else {
                    matmul(av, !*ta, g, false)
                };
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                let mut db = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, db);
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale(*s);
                acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data.iter().zip(&g.data).map(|(&v, gv)| gelu_grad(v) * gv).collect();
                acc(grads, *x, Mat::from_vec(xv.rows, xv.cols, data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = &self.value(*gamma).data;
                let mut dx = Mat::zeros(rows, cols);
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gam[c];
                        dgamma.data[c] += gr[c] * hr[c];
                        dbeta.data[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dh =
                        dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx.set(r, c, rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh));
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Conv {
                x,
                w,
                b,
                kernel,
                stride,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let c_in = xv.cols;
                let c_out = wv.cols;
                let l_out = g.rows;
                let kc = kernel * c_in;
                // dW = patchesᵀ · g
                let mut dw = Mat::zeros(kc, c_out);
                gemm_strided(
                    kc,
                    l_out,
                    c_out,
                    1.0,
                    &xv.data,
                    1,
                    stride * c_in,
                    &g.data,
                    c_out,
                    1,
                    0.0,
                    &mut dw.data,
                );
                // dPatches = g · Wᵀ, scattered back onto overlapping windows.
                let mut dp = Mat::zeros(l_out, kc);
                gemm_strided(
                    l_out, c_out, kc, 1.0, &g.data, c_out, 1, &wv.data, 1, c_out, 0.0,
                    &mut dp.data,
                );
                let mut dx = Mat::zeros(xv.rows, c_in);
                for t in 0..l_out {
                    let base = t * stride * c_in;
                    for (d, p) in dx.data[base..base + kc].iter_mut().zip(dp.row(t)) {
                        *d += p;
                    }
                }
                let mut db = Mat::zeros(1, c_out);
                for r in 0..l_out {
                    for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::GroupedConvSame {
                x,
                w,
                b,
                kernel,
                groups,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (t_len, c) = xv.shape();
                let cg = c / groups;
                let pad = kernel / 2;
                let mut dx = Mat::zeros(t_len, c);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                let mut db = Mat::zeros(1, c);
                for t in 0..t_len {
                    for o in 0..c {
                        let go = g.get(t, o);
                        if go == 0.0 {
                            continue;
                        }
                        db.data[o] += go;
                        let grp = o / cg;
                        for j in 0..*kernel {
                            let src = t as isize + j as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for i in 0..cg {
                                let xi = grp * cg + i;
                                let wi = j * cg + i;
                                dw.data[o * wv.cols + wi] += go * xv.get(src, xi);
                                dx.data[src * c + xi] += go * wv.get(o, wi);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MaskRows { x, fill, rows } => {
                let mut dx = g.clone();
                let mut df = Mat::zeros(1, g.cols);
                for &r in rows {
                    for (d, v) in df.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                    dx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
                acc(grads, *x, dx);
                acc(grads, *fill, df);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let mut d = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(grads, p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let d = Mat::from_vec(rows, cols, g.data[off..off + rows * cols].to_vec());
                    off += rows * cols;
                    acc(grads, p, d);
                }
            }
            Op::GroupSoftmax {
                x,
                groups,
                tau,
                soft,
            } => {
                let (rows, cols) = soft.shape();
                let v = cols / groups;
                let mut dx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    for grp in 0..*groups {
                        let range = grp * v..(grp + 1) * v;
                        let s = &soft.row(r)[range.clone()];
                        let gr = &g.row(r)[range.clone()];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, d) in dx.row_mut(r)[range].iter_mut().enumerate() {
                            *d = s[k] * (gr[k] - dot) / tau;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::CodebookLookup {
                weights,
                codebook,
                groups,
            } => {
                let wv = self.value(*weights);
                let cb = self.value(*codebook);
                let (t_len, gv) = wv.shape();
                let v = gv / groups;
                let d = cb.cols;
                let mut dw = Mat::zeros(t_len, gv);
                let mut dcb = Mat::zeros(cb.rows, d);
                for t in 0..t_len {
                    for grp in 0..*groups {
                        let gout = &g.row(t)[grp * d..(grp + 1) * d];
                        for e in 0..v {
                            let row = grp * v + e;
                            let entry = cb.row(row);
                            dw.set(t, row, entry.iter().zip(gout).map(|(a, b)| a * b).sum());
                            let wgt = wv.get(t, row);
                            if wgt != 0.0 {
                                for (dc, go) in dcb.row_mut(row).iter_mut().zip(gout) {
                                    *dc += wgt * go;
                                }
                            }
                        }
                    }
                }
                acc(grads, *weights, dw);
                acc(grads, *codebook, dcb);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let inv = 1.0 / xv.rows as f64;
                for r in 0..xv.rows {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(&g.data) {
                        *d = v * inv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let mut d = g.clone();
                    d.scale(w);
                    acc(grads, v, d);
                }
            }
            Op::ScalarGrads(local) => {
                let s = g.data[0];
                for (v, lg) in local {
                    let mut d = lg.clone();
                    d.scale(s);
                    acc(grads, *v, d);
                }
            }
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Central finite-difference check of analytic gradients.
pub mod check {
    use super::*;

    /// Largest relative error found, with where it occurred.
    #[derive(Debug, Clone)]
    pub struct GradCheckReport {
        pub max_rel_error: f64,
        pub worst_input: usize,
        pub worst_index: usize,
        pub checked: usize,
    }

    /// Relative error with an absolute floor so near-zero gradients do not
    /// dominate.
    pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / (analytic.abs().max(numeric.abs())).max(1e-6)
    }

    /// Compares the gradient returned by `analytic` against central
    /// differences of `f` for every entry of every input matrix (or a strided
    /// subset when `max_entries` is smaller than the input).
    pub fn check_gradients<F, G>(
        inputs: &[Mat],
        eps: f64,
        max_entries: usize,
        f: F,
        analytic: G,
    ) -> GradCheckReport
    where
        F: Fn(&[Mat]) -> f64,
        G: Fn(&[Mat]) -> Vec<Mat>,
    {
        let grads = analytic(inputs);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            checked: 0,
        };
        let mut work: Vec<Mat> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.len();
            let step = (n / max_entries.max(1)).max(1);
            for j in (0..n).step_by(step) {
                let orig = input.data[j];
                work[i].data[j] = orig + eps;
                let plus = f(&work);
                work[i].data[j] = orig - eps;
                let minus = f(&work);
                work[i].data[j] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let err = rel_error(grads[i].data[j], numeric);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_input = i;
                    report.worst_index = j;
                }
            }
        }
        report
    }

    /// Gradient check for a function built on a [`Graph`]: `build` receives
    /// the graph and one leaf per input and returns the scalar output node.
    pub fn check_graph<B>(inputs: &[Mat], eps: f64, max_entries: usize, build: B) -> GradCheckReport
    where
        B: Fn(&mut Graph, &[Var]) -> Var,
    {
        let run = |xs: &[Mat]| {
            let mut g = Graph::new();
            let leaves: Vec<Var> = xs.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &leaves);
            (g, leaves, out)
        };
        check_gradients(
            inputs,
            eps,
            max_entries,
            |xs| {
                let (g, _, out) = run(xs);
                g.value(out).data[0]
            },
            |xs| {
                let (g, leaves, out) = run(xs);
                let grads = g.backward(out);
                leaves
                    .iter()
                    .zip(xs)
                    .map(|(&l, x)| grads.get(l).cloned().unwrap_or_else(|| Mat::zeros(x.rows, x.cols)))
                    .collect()
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::check::check_graph;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Reduces a matrix node to a scalar with fixed random weights.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.leaf(rand_mat(c, 1, &mut rng));
        let y = g.matmul(x, w);
        let ones = g.leaf(Mat::from_vec(1, r, vec![1.0; r]));
        g.matmul(ones, y)
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_and_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_mat(4, 3, &mut rng) } else { rand_mat(3, 4, &mut rng) };
            let b = if tb { rand_mat(2, 4, &mut rng) } else { rand_mat(4, 2, &mut rng) };
            let rep = check_graph(&[a, b], 1e-5, 100, |g, v| {
                let y = g.matmul_t(v[0], ta, v[1], tb);
                probe(g, y, 1)
            });
            assert!(rep.max_rel_error < TOL, "{ta} {tb}: {rep:?}");
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(5, 6, &mut rng);
        let gamma = rand_mat(1, 6, &mut rng);
        let beta = rand_mat(1, 6, &mut rng);
        let rep = check_graph(&[x, gamma, beta], 1e-5, 100, |g, v| {
            let h = g.layer_norm(v[0], v[1], v[2]);
            let h = g.gelu(h);
            let h = g.add_row(h, v[2]);
            let s = g.softmax_rows(h);
            let h = g.add(s, h);
            let h = g.scale(h, 0.7);
            probe(g, h, 2)
        });
        assert!(rep.max_rel_error < TOL, "{rep:?}");
    }

    #[test]
    fn strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(23, 3, &mut rng);
        let w = rand_mat(4 * 3, 5, &mut rng);
        let b = rand_mat(1, 5, &mut rng);
        let rep = check_graph(&[x, w, b], 1e-5, 200, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 4, 3);
            assert_eq!(g.value(y).rows, (23 - 4) / 3 + 1);
            probe(g, y, 3)
        });
        assert!(rep.max_rel_error < TOL, "{rep:?}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_mat(17, 2, &mut rng);
        let w = rand_mat(3 * 2, 4, &mut rng);
        let b = rand_mat(1, 4, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let y = g.conv1d(xv, wv, bv, 3, 2);
        let out = g.value(y);
        for t in 0..out.rows {
            for o in 0..4 {
                let mut s = b.data[o];
                for j in 0..3 {
                    for i in 0..2 {
                        s += w.get(j * 2 + i, o) * x.get(t * 2 + j, i);
                    }
                }
                assert!((out.get(t, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grouped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(7, 4, &mut rng);
        let w = rand_mat(4, 3 * 2, &mut rng);
        let b = rand_mat(1, 4, &mut rng);
        let rep = check_graph(&[x, w, b], 1e-5, 200, |g, v| {
            let y = g.grouped_conv_same(v[0], v[1], v[2], 3, 2);
            probe(g, y, 4)
        });
        assert!(rep.max_rel_error < TOL, "{rep:?}");
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(6, 4, &mut rng);
        let fill = rand_mat(1, 4, &mut rng);
        let rep = check_graph(&[x, fill], 1e-5, 200, |g, v| {
            let m = g.mask_rows(v[0], v[1], &[1, 4]);
            let a = g.slice_cols(m, 0, 2);
            let b = g.slice_cols(m, 2, 2);
            let c = g.concat_cols(&[b, a]);
            let d = g.concat_rows(&[c, m]);
            let e = g.mean_rows(d);
            let f = g.weighted_sum(&[(e, 0.5), (e, -2.0)]);
            probe(g, f, 5)
        });
        assert!(rep.max_rel_error < TOL, "{rep:?}");
    }

    #[test]
    fn soft_group_softmax_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_mat(3, 2 * 4, &mut rng);
        let codebook = rand_mat(2 * 4, 3, &mut rng);
        let noise = rand_mat(3, 8, &mut rng);
        let rep = check_graph(&[logits, codebook], 1e-5, 200, |g, v| {
            let w = g.group_softmax(v[0], 2, 0.7, Some(&noise), false);
            let q = g.codebook_lookup(w, v[1], 2);
            probe(g, q, 6)
        });
        assert!(rep.max_rel_error < TOL, "{rep:?}");
    }

    #[test]
    fn hard_selection_is_one_hot_with_soft_gradient() {
        let mut g = Graph::new();
        let l = g.leaf(Mat::from_rows(&[vec![0.1, 2.0, -1.0, 0.5, 0.4, 0.3]]));
        let hard = g.group_softmax(l, 2, 1.0, None, true);
        assert_eq!(g.value(hard).data, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let w = g.leaf(Mat::from_vec(6, 1, vec![1.0, -1.0, 0.5, 2.0, 0.0, 1.0]));
        let y = g.matmul(hard, w);
        let grads = g.backward(y);

        let mut g2 = Graph::new();
        let l2 = g2.leaf(g.value(l).clone());
        let soft = g2.group_softmax(l2, 2, 1.0, None, false);
        let w2 = g2.leaf(g.value(w).clone());
        let y2 = g2.matmul(soft, w2);
        let grads2 = g2.backward(y2);
        assert_eq!(grads.get(l).unwrap(), grads2.get(l2).unwrap());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_808_009_392_523).abs() < 1e-12);
    }
}
