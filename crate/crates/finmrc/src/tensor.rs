//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation; each non-leaf node records its
//! parents and a backward closure. `backward` walks the graph once in
//! reverse topological order, so identical graphs produce bit-identical
//! gradients.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate loss: mask selects no positions")]
    DegenerateLoss,
    #[error("degenerate attention: a query row has no valid keys")]
    DegenerateAttention,
}

type Result<T> = std::result::Result<T, TensorError>;

/// (upstream gradient of this node, this node's data, parents)
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "shape/data length mismatch");
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::leaf(shape, data, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let n = numel(&shape);
        Tensor::leaf(shape, vec![0.0; n], requires_grad)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "shape/data length mismatch");
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.node.shape.get(1).unwrap_or(&1)
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(numel(&self.node.shape), 1, "value() on non-scalar");
        self.node.data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn reset_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn acc_grad(&self, delta: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }


    // -- elementwise ------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, parents| {
                parents[0].acc_grad(g);
                parents[1].acc_grad(g);
            }),
        ))
    }

    /// Adds a length-k row vector to every row of an n-by-k matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        if row.data().len() != k {
            return Err(TensorError::Shape(format!(
                "add_row: matrix {:?} vs row {:?}",
                self.shape(),
                row.shape()
            )));
        }
        let mut data = self.data().to_vec();
        for r in 0..n {
            for c in 0..k {
                data[r * k + c] += row.data()[c];
            }
        }
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g, _, parents| {
                parents[0].acc_grad(g);
                if parents[1].node.requires_grad {
                    let mut rg = vec![0.0; k];
                    for r in 0..n {
                        for c in 0..k {
                            rg[c] += g[r * k + c];
                        }
                    }
                    parents[1].acc_grad(&rg);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                if parents[0].node.requires_grad {
                    let da: Vec<f64> = g.iter().zip(b).map(|(gi, bi)| gi * bi).collect();
                    parents[0].acc_grad(&da);
                }
                if parents[1].node.requires_grad {
                    let db: Vec<f64> = g.iter().zip(a).map(|(gi, ai)| gi * ai).collect();
                    parents[1].acc_grad(&db);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let dg: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                parents[0].acc_grad(&dg);
            }),
        )
    }

    // -- matrix products --------------------------------------------------

    /// Standard matrix product of p-by-q and q-by-r.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = (self.rows(), self.cols());
        let (q2, r) = (other.rows(), other.cols());
        if q != q2 {
            return Err(TensorError::Shape(format!(
                "matmul: {:?} times {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = a[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[k * r..(k + 1) * r];
                let crow = &mut data[i * r..(i + 1) * r];
                for (c, bv) in crow.iter_mut().zip(brow) {
                    *c += aik * bv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![p, r],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                if parents[0].node.requires_grad {
                    // dA = G . B^T
                    let mut da = vec![0.0; p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += g[i * r + j] * b[k * r + j];
                            }
                            da[i * q + k] = s;
                        }
                    }
                    parents[0].acc_grad(&da);
                }
                if parents[1].node.requires_grad {
                    // dB = A^T . G
                    let mut db = vec![0.0; q * r];
                    for i in 0..p {
                        for k in 0..q {
                            let aik = a[i * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &g[i * r..(i + 1) * r];
                            let drow = &mut db[k * r..(k + 1) * r];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                    parents[1].acc_grad(&db);
                }
            }),
        ))
    }

    /// `self . other^T` for n-by-k and m-by-k operands.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul_nt: {:?} times {:?}^T",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[j * k + t];
                }
                data[i * m + j] = s;
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                if parents[0].node.requires_grad {
                    // dA = G . B
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                da[i * k + t] += gij * b[j * k + t];
                            }
                        }
                    }
                    parents[0].acc_grad(&da);
                }
                if parents[1].node.requires_grad {
                    // dB = G^T . A
                    let mut db = vec![0.0; m * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                db[j * k + t] += gij * a[i * k + t];
                            }
                        }
                    }
                    parents[1].acc_grad(&db);
                }
            }),
        ))
    }

    // -- row-wise nonlinearities ------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &self.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in data[i * k..(i + 1) * k].iter_mut().zip(row.iter()) {
                let e = (x - max).exp();
                *o = e;
                sum += e;
            }
            for o in &mut data[i * k..(i + 1) * k] {
                *o /= sum;
            }
        }
        Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                // dx = y * (g - sum_j g_j y_j) per row
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let y = &out[i * k..(i + 1) * k];
                    let gr = &g[i * k..(i + 1) * k];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..k {
                        dx[i * k + j] = y[j] * (gr[j] - dot);
                    }
                }
                parents[0].acc_grad(&dx);
            }),
        )
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = (self.rows(), self.cols());
        if gain.data().len() != d || bias.data().len() != d {
            return Err(TensorError::Shape(format!(
                "layer_norm: matrix {:?}, gain {:?}, bias {:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                data[i * d + j] = gain.data()[j] * xhat + bias.data()[j];
            }
        }
        Ok(Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, parents| {
                let x = parents[0].data();
                let gn = parents[1].data();
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..n {
                    let row = &x[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gn).map(|(gi, gni)| gi * gni).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] =
                            rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                parents[0].acc_grad(&dx);
                parents[1].acc_grad(&dgain);
                parents[2].acc_grad(&dbias);
            }),
        ))
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|g, _, parents| {
                let x = parents[0].data();
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| {
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                parents[0].acc_grad(&dx);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|g, _, parents| {
                let x = parents[0].data();
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                parents[0].acc_grad(&dx);
            }),
        )
    }

    // -- reductions, reshaping --------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.data().len();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                parents[0].acc_grad(&vec![g[0]; n]);
            }),
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Shape("concat_cols: empty input".into()));
        }
        let n = parts[0].rows();
        if parts.iter().any(|p| p.rows() != n) {
            return Err(TensorError::Shape("concat_cols: row mismatch".into()));
        }
        let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::from_op(
            vec![n, total],
            data,
            parts.to_vec(),
            Box::new(move |g, _, parents| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&widths) {
                    if p.node.requires_grad {
                        let mut dp = vec![0.0; n * w];
                        for i in 0..n {
                            dp[i * w..(i + 1) * w].copy_from_slice(
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                        p.acc_grad(&dp);
                    }
                    offset += w;
                }
            }),
        ))
    }

    /// Rows `r0..r1` of a matrix.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        if r0 > r1 || r1 > n {
            return Err(TensorError::Shape(format!(
                "slice_rows: {r0}..{r1} of {n} rows"
            )));
        }
        let data = self.data()[r0 * k..r1 * k].to_vec();
        Ok(Tensor::from_op(
            vec![r1 - r0, k],
            data,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let mut dx = vec![0.0; n * k];
                dx[r0 * k..r1 * k].copy_from_slice(g);
                parents[0].acc_grad(&dx);
            }),
        ))
    }

    /// Gathers rows of an embedding table; gradient scatter-adds.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = (self.rows(), self.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Shape(format!(
                "gather_rows: id {bad} out of range for {v} rows"
            )));
        }
        let mut data = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        let n = ids.len();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                if !parents[0].node.requires_grad {
                    return;
                }
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                parents[0].acc_grad(&dt);
            }),
        ))
    }

    // -- losses -----------------------------------------------------------

    /// Mean binary cross-entropy over masked rows of an n-by-2 probability
    /// matrix, reading column 1 as the positive probability. Log arguments
    /// are clamped below by 1e-12.
    pub fn cross_entropy_binary(&self, y: &[u8], mask: &[u8]) -> Result<Tensor> {
        let n = self.rows();
        if self.cols() != 2 || y.len() != n || mask.len() != n {
            return Err(TensorError::Shape(format!(
                "cross_entropy_binary: probs {:?}, labels {}, mask {}",
                self.shape(),
                y.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(TensorError::DegenerateLoss);
        }
        const CLAMP: f64 = 1e-12;
        let mut loss = 0.0;
        for i in 0..n {
            if mask[i] == 0 {
                continue;
            }
            let p = self.data()[i * 2 + 1];
            loss -= if y[i] == 1 {
                p.max(CLAMP).ln()
            } else {
                (1.0 - p).max(CLAMP).ln()
            };
        }
        loss /= count as f64;
        let y = y.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let p = parents[0].data();
                let mut dp = vec![0.0; p.len()];
                let scale = g[0] / count as f64;
                for i in 0..mask.len() {
                    if mask[i] == 0 {
                        continue;
                    }
                    let pi = p[i * 2 + 1];
                    dp[i * 2 + 1] = if y[i] == 1 {
                        -scale / pi.max(CLAMP)
                    } else {
                        scale / (1.0 - pi).max(CLAMP)
                    };
                }
                parents[0].acc_grad(&dp);
            }),
        ))
    }

    /// Mean negative log probability of the gold class over masked rows of an
    /// n-by-k row-stochastic matrix.
    pub fn nll_rows(&self, gold: &[usize], mask: &[u8]) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        if gold.len() != n || mask.len() != n {
            return Err(TensorError::Shape(format!(
                "nll_rows: probs {:?}, gold {}, mask {}",
                self.shape(),
                gold.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
            return Err(TensorError::Shape(format!(
                "nll_rows: gold class {bad} out of range for {k} classes"
            )));
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(TensorError::DegenerateLoss);
        }
        const CLAMP: f64 = 1e-12;
        let mut loss = 0.0;
        for i in 0..n {
            if mask[i] != 0 {
                loss -= self.data()[i * k + gold[i]].max(CLAMP).ln();
            }
        }
        loss /= count as f64;
        let gold = gold.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let p = parents[0].data();
                let mut dp = vec![0.0; p.len()];
                let scale = g[0] / count as f64;
                for i in 0..mask.len() {
                    if mask[i] != 0 {
                        let idx = i * k + gold[i];
                        dp[idx] = -scale / p[idx].max(CLAMP);
                    }
                }
                parents[0].acc_grad(&dp);
            }),
        ))
    }

    // -- stochastic -------------------------------------------------------

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: &mut dyn RngCore) -> Tensor {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                if u < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        Tensor::from_op(
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let dx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                parents[0].acc_grad(&dx);
            }),
        )
    }

    // -- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss; populates gradients of every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if numel(&self.node.shape) != 1 {
            return Err(TensorError::Shape(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.node.shape
            )));
        }
        let order = self.topo_order();
        // leaf grads accumulate across calls; interior grads are per-pass
        for t in order.iter() {
            if t.node.backward.is_some() {
                *t.node.grad.borrow_mut() = None;
            }
        }
        self.acc_grad(&[1.0]);
        for t in order.iter().rev() {
            if let Some(back) = &t.node.backward {
                let grad = t.node.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    back(g, &t.node.data, &t.node.parents);
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                stack.push((t.clone(), child + 1));
                let p = t.node.parents[child].clone();
                if p.node.requires_grad && visited.insert(Rc::as_ptr(&p.node)) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// Compares analytic gradients of `f` against central finite differences at
/// the given inputs. `f` must rebuild its graph from the supplied leaves on
/// every call.
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| Tensor::leaf(shape.clone(), data.clone(), true))
        .collect();
    let loss = f(&leaves);
    loss.backward().expect("grad_check: loss must be scalar");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.data().len()]))
        .collect();

    let eval = |inputs: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| Tensor::leaf(shape.clone(), data.clone(), false))
            .collect();
        f(&leaves).value()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0;
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (ti, (_, data)) in inputs.iter().enumerate() {
        for ci in 0..data.len() {
            let orig = work[ti].1[ci];
            work[ti].1[ci] = orig + h;
            let fp = eval(&work);
            work[ti].1[ci] = orig - h;
            let fm = eval(&work);
            work[ti].1[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            coords_checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        coords_checked,
    }
}
