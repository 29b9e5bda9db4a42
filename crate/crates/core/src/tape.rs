//! Reverse-mode autodiff over [`Tensor`].
//!
//! Ops append nodes to a [`Tape`]; each node stores its forward value and
//! a closure producing vector-Jacobian products for its parents. Calling
//! [`Var::backward`] on a scalar loss walks the tape once in reverse and
//! returns gradients keyed by leaf name.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Gradient contributions: (parent node id, gradient wrt that parent).
type Vjp = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    name: Option<String>,
    vjp: Option<Vjp>,
}

/// Growing record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on the tape. Cheap to copy; ops build new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, name: Option<String>, vjp: Option<Vjp>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, name, vjp });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Named differentiable input; its gradient appears in backward output.
    pub fn leaf(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push(value, Some(name.to_string()), None)
    }

    /// Fixed input; no gradient tracked.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }
}

/// Gradients of a scalar loss wrt every named leaf that influenced it.
pub type Gradients = BTreeMap<String, Tensor>;

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, rhs: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, rhs.tape) {
            Ok(())
        } else {
            Err(Error::Contract("vars belong to different tapes".into()))
        }
    }

    // ── elementwise ──

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().add(&rhs.value())?;
        let (a, b) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        ))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let out = self.value().sub(&rhs.value())?;
        let (a, b) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.scale(-1.0))]
            })),
        ))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (av, bv) = (self.value(), rhs.value());
        let out = av.mul(&bv)?;
        let (a, b) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                vec![
                    (a, g.mul(&bv).expect("shape fixed at build")),
                    (b, g.mul(&av).expect("shape fixed at build")),
                ]
            })),
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| vec![(a, g.scale(s))])),
        )
    }

    /// Elementwise product with a fixed tensor (dropout masks and the like).
    pub fn mul_constant(&self, t: Tensor) -> Result<Var<'t>> {
        let c = self.tape.constant(t);
        self.mul(c)
    }

    /// A new constant on this var's tape.
    pub fn tape_constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    // ── linear algebra ──

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (av, bv) = (self.value(), rhs.value());
        let out = av.matmul(&bv)?;
        let (a, b) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let da = g
                    .matmul(&bv.transpose().expect("2-D checked at build"))
                    .expect("shape fixed at build");
                let db = av
                    .transpose()
                    .expect("2-D checked at build")
                    .matmul(g)
                    .expect("shape fixed at build");
                vec![(a, da), (b, db)]
            })),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        let a = self.id;
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                vec![(a, g.transpose().expect("2-D checked at build"))]
            })),
        ))
    }

    /// Reinterpret data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = Tensor::new(shape.to_vec(), v.into_data())?;
        let a = self.id;
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let back = Tensor::new(old.clone(), g.data().to_vec())
                    .expect("element count fixed at build");
                vec![(a, back)]
            })),
        ))
    }

    pub fn concat(&self, rhs: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (av, bv) = (self.value(), rhs.value());
        let out = av.concat(&bv, axis)?;
        let (ar, ac) = av.dims2()?;
        let (_, bc) = bv.dims2()?;
        let (a, b) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                match axis {
                    0 => {
                        let ga = Tensor::new(vec![ar, ac], g.data()[..ar * ac].to_vec())
                            .expect("split sizes fixed at build");
                        let gb = Tensor::new(
                            vec![g.shape()[0] - ar, ac],
                            g.data()[ar * ac..].to_vec(),
                        )
                        .expect("split sizes fixed at build");
                        vec![(a, ga), (b, gb)]
                    }
                    _ => {
                        let mut ga = Vec::with_capacity(ar * ac);
                        let mut gb = Vec::with_capacity(ar * bc);
                        for i in 0..ar {
                            let row = g.row(i);
                            ga.extend_from_slice(&row[..ac]);
                            gb.extend_from_slice(&row[ac..]);
                        }
                        vec![
                            (a, Tensor::new(vec![ar, ac], ga).expect("sizes fixed")),
                            (b, Tensor::new(vec![ar, bc], gb).expect("sizes fixed")),
                        ]
                    }
                }
            })),
        ))
    }

    /// Columns `lo..hi` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if lo > hi || hi > c {
            return Err(Error::Dimension(format!(
                "slice_cols {lo}..{hi} out of range for {c} cols"
            )));
        }
        let mut data = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[lo..hi]);
        }
        let out = Tensor::new(vec![r, hi - lo], data)?;
        let a = self.id;
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mut full = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let src = g.row(i).to_vec();
                    full.data_mut()[i * c + lo..i * c + hi].copy_from_slice(&src);
                }
                vec![(a, full)]
            })),
        ))
    }

    // ── nonlinearities ──

    pub fn relu(&self) -> Var<'t> {
        let v = self.value();
        let out = v.map(|x| x.max(0.0));
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mask = v.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g.mul(&mask).expect("same shape"))]
            })),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value();
        let out = v.map(|x| if x > 0.0 { x } else { slope * x });
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mask = v.map(|x| if x > 0.0 { 1.0 } else { slope });
                vec![(a, g.mul(&mask).expect("same shape"))]
            })),
        )
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value();
        let out = v.map(crate::tensor::softplus_scalar);
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let d = v.map(sigmoid);
                vec![(a, g.mul(&d).expect("same shape"))]
            })),
        )
    }

    // ── row-structured ops ──

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let y = crate::tensor::softmax_rows(&self.value())?;
        let (r, c) = y.dims2()?;
        let yv = y.clone();
        let a = self.id;
        Ok(self.tape.push(
            y,
            None,
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = yv.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(a, Tensor::new(vec![r, c], dx).expect("sizes fixed"))]
            })),
        ))
    }

    /// Per-row normalization to zero mean, unit variance (no affine terms).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut out = vec![0.0; r * c];
        let mut invs = vec![0.0; r];
        for i in 0..r {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            invs[i] = inv;
            for (j, &v) in row.iter().enumerate() {
                out[i * c + j] = (v - mu) * inv;
            }
        }
        let y = Tensor::new(vec![r, c], out)?;
        let yv = y.clone();
        let a = self.id;
        Ok(self.tape.push(
            y,
            None,
            Some(Box::new(move |g| {
                // dx = inv * (g - mean(g) - y * mean(g*y)) per row
                let mut dx: Vec<f64> = vec![0.0; r * c];
                for i in 0..r {
                    let gr = g.row(i);
                    let yr = yv.row(i);
                    let g_mean = gr.iter().sum::<f64>() / c as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = invs[i] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                vec![(a, Tensor::new(vec![r, c], dx).expect("sizes fixed"))]
            })),
        ))
    }

    // ── reductions ──

    pub fn sum_all(&self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let s = g.data()[0];
                vec![(a, Tensor::full(&shape, s))]
            })),
        )
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let n = v.len().max(1) as f64;
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.mean());
        let a = self.id;
        self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let s = g.data()[0] / n;
                vec![(a, Tensor::full(&shape, s))]
            })),
        )
    }

    // ── gather / segment primitives for ragged neighborhoods ──

    /// Rows of a 2-D tensor selected by index, duplicates allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let a = self.id;
        let idx = idx.to_vec();
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[n, c]);
                for (e, &i) in idx.iter().enumerate() {
                    let src = g.row(e).to_vec();
                    for (j, s) in src.iter().enumerate() {
                        dx.data_mut()[i * c + j] += s;
                    }
                }
                vec![(a, dx)]
            })),
        ))
    }

    /// Row `i` of `self` scaled by `w[i]`; `w` has shape (rows, 1).
    pub fn scale_rows(&self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let x = self.value();
        let wv = w.value();
        let (r, c) = x.dims2()?;
        let (wr, wc) = wv.dims2()?;
        if wr != r || wc != 1 {
            return Err(Error::Dimension(format!(
                "scale_rows weights must be ({r}, 1), got ({wr}, {wc})"
            )));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let wi = wv.data()[i];
            data.extend(x.row(i).iter().map(|&v| v * wi));
        }
        let out = Tensor::new(vec![r, c], data)?;
        let (a, b) = (self.id, w.id);
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                let mut dw = vec![0.0; r];
                for i in 0..r {
                    let wi = wv.data()[i];
                    let gr = g.row(i);
                    let xr = x.row(i);
                    for j in 0..c {
                        dx[i * c + j] = gr[j] * wi;
                        dw[i] += gr[j] * xr[j];
                    }
                }
                vec![
                    (a, Tensor::new(vec![r, c], dx).expect("sizes fixed")),
                    (b, Tensor::new(vec![r, 1], dw).expect("sizes fixed")),
                ]
            })),
        ))
    }

    /// Sum rows of `self` into `n_segments` buckets given per-row segment ids.
    pub fn segment_sum_rows(&self, seg: &[usize], n_segments: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if seg.len() != r {
            return Err(Error::Dimension(format!(
                "segment ids len {} vs {} rows",
                seg.len(),
                r
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Dimension(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let mut out = Tensor::zeros(&[n_segments, c]);
        for (i, &s) in seg.iter().enumerate() {
            let row = x.row(i).to_vec();
            for (j, v) in row.iter().enumerate() {
                out.data_mut()[s * c + j] += v;
            }
        }
        let a = self.id;
        let seg = seg.to_vec();
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                let mut dx = Vec::with_capacity(r * c);
                for &s in &seg {
                    dx.extend_from_slice(g.row(s));
                }
                vec![(a, Tensor::new(vec![r, c], dx).expect("sizes fixed"))]
            })),
        ))
    }

    /// Softmax over entries sharing a segment id. `self` has shape (rows, 1).
    pub fn segment_softmax(&self, seg: &[usize], n_segments: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if c != 1 {
            return Err(Error::Dimension(format!(
                "segment_softmax expects (rows, 1), got (r={r}, c={c})"
            )));
        }
        if seg.len() != r {
            return Err(Error::Dimension(format!(
                "segment ids len {} vs {} rows",
                seg.len(),
                r
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_segments) {
            return Err(Error::Dimension(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            max[s] = max[s].max(x.data()[i]);
        }
        let mut exp = vec![0.0; r];
        let mut denom = vec![0.0; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            exp[i] = (x.data()[i] - max[s]).exp();
            denom[s] += exp[i];
        }
        let alpha: Vec<f64> = seg.iter().zip(&exp).map(|(&s, &e)| e / denom[s]).collect();
        let out = Tensor::new(vec![r, 1], alpha.clone())?;
        let a = self.id;
        let seg = seg.to_vec();
        Ok(self.tape.push(
            out,
            None,
            Some(Box::new(move |g| {
                // de_i = a_i * (g_i - sum_{j in seg(i)} a_j g_j)
                let mut seg_dot = vec![0.0; n_segments];
                for (i, &s) in seg.iter().enumerate() {
                    seg_dot[s] += alpha[i] * g.data()[i];
                }
                let dx: Vec<f64> = seg
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| alpha[i] * (g.data()[i] - seg_dot[s]))
                    .collect();
                vec![(a, Tensor::new(vec![r, 1], dx).expect("sizes fixed"))]
            })),
        ))
    }

    // ── backward ──

    /// Gradients of this scalar wrt every named leaf. Errors on non-scalar.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if !nodes[self.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::new(
            nodes[self.id].value.shape().to_vec(),
            vec![1.0],
        )?);
        let mut out = Gradients::new();
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(name) = &node.name {
                out.insert(name.clone(), g.clone());
            }
            if let Some(vjp) = &node.vjp {
                for (pid, contrib) in vjp(&g) {
                    match &mut grads[pid] {
                        Some(acc) => *acc = acc.add(&contrib)?,
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(out)
    }
}
