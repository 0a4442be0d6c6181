//! Differentiable primitives on [`Tensor`].

use std::rc::Rc;

use super::array::{self, Array};
use super::tape::{NodeId, Op, Tensor};
use super::AdError;

type Result<T> = std::result::Result<T, AdError>;

fn check_finite(op: &'static str, a: &Array) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

impl<'t> Tensor<'t> {
    fn make(&self, value: Array, op: impl FnOnce() -> Option<Op>) -> Tensor<'t> {
        let node = if self.tape.is_recording() {
            op().map(|op| self.tape.push(op))
        } else {
            None
        };
        Tensor {
            tape: self.tape,
            node,
            value: Rc::new(value),
        }
    }

    fn unary(
        &self,
        name: &'static str,
        value: Array,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Result<Tensor<'t>> {
        check_finite(name, &value)?;
        let id = self.node_id()?;
        Ok(self.make(value, || id.map(op)))
    }

    /// Brings two operands to a common shape. Supported: equal shapes, a
    /// `1 x c` row against `r x c`, and a `1 x 1` scalar against anything.
    fn conform(&self, other: &Tensor<'t>, name: &'static str) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self.clone(), other.clone()));
        }
        let lift = |t: &Tensor<'t>, target: [usize; 2]| -> Result<Tensor<'t>> {
            let s = t.shape();
            if s == [1, 1] {
                t.broadcast_scalar(target)
            } else if s[0] == 1 && s[1] == target[1] {
                t.broadcast_rows(target[0])
            } else {
                Err(AdError::ShapeMismatch {
                    op: name,
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let target = [sa[0].max(sb[0]), sa[1].max(sb[1])];
        let a = if sa == target { self.clone() } else { lift(self, target)? };
        let b = if sb == target { other.clone() } else { lift(other, target)? };
        if a.shape() != b.shape() {
            return Err(AdError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.conform(other, "add")?;
        let value = a.value.zip_map(&b.value, |x, y| x + y);
        check_finite("add", &value)?;
        let (ia, ib) = (a.node_id()?, b.node_id()?);
        Ok(self.make(value, || (ia.is_some() || ib.is_some()).then_some(Op::Add(ia, ib))))
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.conform(other, "sub")?;
        let value = a.value.zip_map(&b.value, |x, y| x - y);
        check_finite("sub", &value)?;
        let (ia, ib) = (a.node_id()?, b.node_id()?);
        Ok(self.make(value, || (ia.is_some() || ib.is_some()).then_some(Op::Sub(ia, ib))))
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.conform(other, "mul")?;
        let value = a.value.zip_map(&b.value, |x, y| x * y);
        check_finite("mul", &value)?;
        let (ia, ib) = (a.node_id()?, b.node_id()?);
        Ok(self.make(value, || {
            (ia.is_some() || ib.is_some())
                .then(|| Op::Mul(ia, ib, a.shared_value(), b.shared_value()))
        }))
    }

    pub fn div(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (a, b) = self.conform(other, "div")?;
        if b.value.data().contains(&0.0) {
            return Err(AdError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let value = a.value.zip_map(&b.value, |x, y| x / y);
        check_finite("div", &value)?;
        let (ia, ib) = (a.node_id()?, b.node_id()?);
        Ok(self.make(value, || {
            (ia.is_some() || ib.is_some())
                .then(|| Op::Div(ia, ib, a.shared_value(), b.shared_value()))
        }))
    }

    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        if self.cols() != other.rows() {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = array::matmul(&self.value, &other.value);
        check_finite("matmul", &value)?;
        let (ia, ib) = (self.node_id()?, other.node_id()?);
        Ok(self.make(value, || {
            (ia.is_some() || ib.is_some())
                .then(|| Op::MatMul(ia, ib, self.shared_value(), other.shared_value()))
        }))
    }

    /// `self * w + b`, the dense-layer pre-activation.
    pub fn affine(&self, w: &Tensor<'t>, b: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul(w)?.add(b)
    }

    pub fn neg(&self) -> Result<Tensor<'t>> {
        let value = self.value.map(|v| -v);
        self.unary("neg", value, Op::Neg)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<'t>> {
        let value = self.value.map(|v| v * c);
        self.unary("scale", value, |id| Op::Scale(id, c))
    }

    /// Addition of a constant.
    pub fn offset(&self, c: f64) -> Result<Tensor<'t>> {
        let value = self.value.map(|v| v + c);
        self.unary("offset", value, |id| Op::Scale(id, 1.0))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&self) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let value = Array::scalar(self.value.sum());
        self.unary("sum", value, |id| Op::Sum(id, shape))
    }

    pub fn mean(&self) -> Result<Tensor<'t>> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&self) -> Result<Tensor<'t>> {
        let [r, c] = self.shape();
        let value = Array::from_vec(
            r,
            1,
            (0..r).map(|i| self.value.row_slice(i).iter().sum()).collect(),
        );
        self.unary("sum_cols", value, |id| Op::SumCols(id, c))
    }

    pub fn exp(&self) -> Result<Tensor<'t>> {
        let value = Rc::new(self.value.map(f64::exp));
        check_finite("exp", &value)?;
        let id = self.node_id()?;
        let saved = Rc::clone(&value);
        let node = if self.tape.is_recording() {
            id.map(|id| self.tape.push(Op::Exp(id, saved)))
        } else {
            None
        };
        Ok(Tensor {
            tape: self.tape,
            node,
            value,
        })
    }

    pub fn log(&self) -> Result<Tensor<'t>> {
        if self.value.data().iter().any(|&v| v <= 0.0) {
            return Err(AdError::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        let value = self.value.map(f64::ln);
        let saved = self.shared_value();
        self.unary("log", value, |id| Op::Log(id, saved))
    }

    pub fn tanh(&self) -> Result<Tensor<'t>> {
        let value = Rc::new(self.value.map(f64::tanh));
        let id = self.node_id()?;
        let node = if self.tape.is_recording() {
            id.map(|id| self.tape.push(Op::Tanh(id, Rc::clone(&value))))
        } else {
            None
        };
        Ok(Tensor {
            tape: self.tape,
            node,
            value,
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor<'t>> {
        let value = Rc::new(self.value.map(array::sigmoid));
        let id = self.node_id()?;
        let node = if self.tape.is_recording() {
            id.map(|id| self.tape.push(Op::Sigmoid(id, Rc::clone(&value))))
        } else {
            None
        };
        Ok(Tensor {
            tape: self.tape,
            node,
            value,
        })
    }

    pub fn softplus(&self) -> Result<Tensor<'t>> {
        let value = self.value.map(array::softplus);
        let saved = self.shared_value();
        self.unary("softplus", value, |id| Op::Softplus(id, saved))
    }

    pub fn square(&self) -> Result<Tensor<'t>> {
        let value = self.value.map(|v| v * v);
        let saved = self.shared_value();
        self.unary("square", value, |id| Op::Square(id, saved))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    /// Returns the tensor and the number of clamped entries.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<(Tensor<'t>, usize)> {
        let mut clipped = 0;
        let mut mask = Vec::with_capacity(self.value.len());
        let data = self
            .value
            .data()
            .iter()
            .map(|&v| {
                if v < lo {
                    clipped += 1;
                    mask.push(false);
                    lo
                } else if v > hi {
                    clipped += 1;
                    mask.push(false);
                    hi
                } else {
                    mask.push(true);
                    v
                }
            })
            .collect();
        let [r, c] = self.shape();
        let value = Array::from_vec(r, c, data);
        let out = if clipped == 0 {
            self.unary("clamp", value, |id| Op::Scale(id, 1.0))?
        } else {
            self.unary("clamp", value, |id| Op::Clamp(id, mask))?
        };
        Ok((out, clipped))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(parts: &[&Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = parts.first().expect("concat of zero tensors");
        let rows = first.rows();
        let mut total = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            total += p.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value.row_slice(r));
            }
        }
        let value = Array::from_vec(rows, total, data);
        let mut ids = Vec::with_capacity(parts.len());
        let mut any = false;
        for p in parts {
            let id = p.node_id()?;
            any |= id.is_some();
            ids.push((id, p.cols()));
        }
        Ok(first.make(value, || any.then_some(Op::Concat(ids, total))))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<'t>> {
        if start + len > self.cols() {
            return Err(AdError::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape(),
                rhs: [start, len],
            });
        }
        let in_cols = self.cols();
        let value = self.value.slice_cols(start, len);
        self.unary("slice_cols", value, |id| Op::SliceCols(id, start, len, in_cols))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<'t>> {
        if start + len > self.rows() {
            return Err(AdError::ShapeMismatch {
                op: "slice_rows",
                lhs: self.shape(),
                rhs: [start, len],
            });
        }
        let in_rows = self.rows();
        let value = self.value.slice_rows(start, len);
        self.unary("slice_rows", value, |id| Op::SliceRows(id, start, len, in_rows))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor<'t>> {
        if self.rows() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.shape(),
                rhs: [n, self.cols()],
            });
        }
        if n == 1 {
            return Ok(self.clone());
        }
        let value = self.value.repeat_rows(n);
        self.unary("broadcast_rows", value, Op::BroadcastRows)
    }

    /// Expands a `1 x 1` scalar to the given shape.
    pub fn broadcast_scalar(&self, shape: [usize; 2]) -> Result<Tensor<'t>> {
        if self.shape() != [1, 1] {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let value = Array::full(shape[0], shape[1], self.item());
        self.unary("broadcast_scalar", value, Op::BroadcastScalar)
    }

    /// Per-row `ln |det A|` where each row holds a row-major `d x d` matrix.
    pub fn row_log_abs_det(&self, d: usize) -> Result<Tensor<'t>> {
        if self.cols() != d * d {
            return Err(AdError::ShapeMismatch {
                op: "row_log_abs_det",
                lhs: self.shape(),
                rhs: [self.rows(), d * d],
            });
        }
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows);
        let mut inv_t = Vec::with_capacity(rows * d * d);
        for r in 0..rows {
            let m = self.value.row_slice(r);
            let ld = array::log_abs_det(m, d).ok_or(AdError::Singular("row_log_abs_det"))?;
            out.push(ld);
            if self.node.is_some() {
                let inv = array::inverse(m, d).ok_or(AdError::Singular("row_log_abs_det"))?;
                for i in 0..d {
                    for j in 0..d {
                        inv_t.push(inv[j * d + i]);
                    }
                }
            }
        }
        let value = Array::from_vec(rows, 1, out);
        self.unary("row_log_abs_det", value, |id| Op::LogAbsDet(id, d, inv_t))
    }

    /// Per-row matrix-vector product `y_k = A_k x_k` with constant matrices
    /// stored row-major, one per row of `mats`.
    pub fn row_matvec_const(&self, mats: Rc<Array>) -> Result<Tensor<'t>> {
        let d = self.cols();
        if mats.cols() != d * d || mats.rows() != self.rows() {
            return Err(AdError::ShapeMismatch {
                op: "row_matvec_const",
                lhs: mats.shape(),
                rhs: self.shape(),
            });
        }
        let rows = self.rows();
        let mut out = Array::zeros(rows, d);
        for r in 0..rows {
            let m = mats.row_slice(r);
            let x = self.value.row_slice(r);
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += m[i * d + j] * x[j];
                }
                out.set(r, i, acc);
            }
        }
        self.unary("row_matvec_const", out, |id| Op::RowMatVec(id, d, mats))
    }

    /// Numerically stable `ln(mean(exp(x)))` over all entries.
    pub fn log_mean_exp(&self) -> Result<Tensor<'t>> {
        let max = self
            .value
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let n = self.value.len() as f64;
        self.offset(-max)?
            .exp()?
            .sum()?
            .log()?
            .offset(max - n.ln())
    }
}
