use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};
use rand::Rng;

use super::{Graph, Scalar, TensorError, Var};

/// Recorded operation with whatever the reverse pass needs.
pub enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Dropout(Var, Vec<F>),
    SliceCols(Var, usize, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Bilinear {
        x: Var,
        u: Var,
        y: Var,
        /// x·U laid out as (n·L) x d.
        xu: Vec<F>,
        labels: usize,
    },
    ConcatLinear {
        x: Var,
        y: Var,
        w: Var,
        b: Var,
        labels: usize,
    },
    LstmSeq {
        xp: Var,
        w_hh: Var,
        reverse: bool,
        /// Activated gates per position, `n x 4h` in (i, f, g, o) order.
        gates: Vec<F>,
        /// Cell state per position, `n x h`.
        cells: Vec<F>,
    },
    BceWithLogits {
        logits: Var,
        /// d loss / d logit for every cell.
        dlogits: Vec<F>,
    },
    SoftmaxXent {
        logits: Var,
        /// (row, softmax - onehot) already divided by the normalizer.
        rows: Vec<(usize, Vec<F>)>,
        width: usize,
    },
}

impl<F> Op<F> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Dropout(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Row(a, _)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::StackRows(vs) => vs.clone(),
            Op::Bilinear { x, u, y, .. } => vec![*x, *u, *y],
            Op::ConcatLinear { x, y, w, b, .. } => vec![*x, *y, *w, *b],
            Op::LstmSeq { xp, w_hh, .. } => vec![*xp, *w_hh],
            Op::BceWithLogits { logits, .. } | Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

fn view<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("view shape")
}

fn view_mut<F>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view shape")
}

/// Column-major view, i.e. the transpose of a row-major `cols x rows` buffer.
fn view_t<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols).f(), data).expect("view shape")
}

/// `c = alpha * a * b + beta * c`
fn gemm<F: Scalar>(alpha: F, a: ArrayView2<F>, b: ArrayView2<F>, beta: F, c: &mut [F]) {
    let (m, n) = (a.nrows(), b.ncols());
    let mut cv = view_mut(c, m, n);
    general_mat_mul(alpha, &a, &b, beta, &mut cv);
}

/// `out += x · W` for a row vector `x` and row-major `W` with `cols` columns.
fn vec_mat<F: Scalar>(x: &[F], w: &[F], cols: usize, out: &mut [F]) {
    for (&xk, row) in x.iter().zip(w.chunks_exact(cols)) {
        out.iter_mut().zip(row).for_each(|(o, &wv)| *o += xk * wv);
    }
}

/// `out = W · v` for row-major `W` with `v.len()` columns.
fn mat_vec<F: Scalar>(w: &[F], v: &[F], out: &mut [F]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(v.len())) {
        *o = dot(row, v);
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    const LANES: usize = 8;
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let tail = ra.iter().zip(rb).fold(F::zero(), |s, (&x, &y)| s + x * y);
    acc.iter().copied().fold(tail, |s, x| s + x)
}

/// Positions in processing order.
fn steps(n: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    }
}

fn mat_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        mat_dims(self.shape(v)).ok_or_else(|| TensorError::Invalid {
            op,
            reason: format!("expected a matrix, got shape {:?}", self.shape(v)),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            F::one(),
            view(self.value(a), m, k),
            view(self.value(b), k, n),
            F::zero(),
            &mut out,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, c) = self.matrix("add_row", a)?;
        if self.value(bias).len() != c {
            return Err(self.mismatch("add_row", a, bias));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        self.push("add_row", self.shape(a).to_vec(), out, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push("tanh", self.shape(a).to_vec(), out, Op::Tanh(a))
    }

    /// Inverted dropout: identity in eval mode; in train mode each element
    /// is zeroed with probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if self.mode() == super::Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.gen_bool(p) { F::zero() } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        self.push("dropout", self.shape(a).to_vec(), out, Op::Dropout(a, mask))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix("slice_cols", a)?;
        if start > end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                reason: format!("range {start}..{end} outside {c} columns"),
            });
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            vec![r, end - start],
            out,
            Op::SliceCols(a, start, end),
        )
    }

    /// Row `i` of a matrix as a `1 x c` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix("row", a)?;
        if i >= r {
            return Err(TensorError::Invalid {
                op: "row",
                reason: format!("row {i} of {r}"),
            });
        }
        let out = self.value(a)[i * c..(i + 1) * c].to_vec();
        self.push("row", vec![1, c], out, Op::Row(a, i))
    }

    /// Stacks equally sized rows into an `n x c` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid {
                op: "stack_rows",
                reason: "no rows".into(),
            });
        };
        let c = self.value(first).len();
        let mut out = Vec::with_capacity(c * rows.len());
        for &r in rows {
            if self.value(r).len() != c {
                return Err(self.mismatch("stack_rows", first, r));
            }
            out.extend_from_slice(self.value(r));
        }
        self.push(
            "stack_rows",
            vec![rows.len(), c],
            out,
            Op::StackRows(rows.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.matrix("concat_cols", a)?;
        let (rb, cb) = self.matrix("concat_cols", b)?;
        if ra != rb {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        self.push("concat_cols", vec![ra, ca + cb], out, Op::ConcatCols(a, b))
    }

    /// Selects rows of a `V x d` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.matrix("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: "gather",
                reason: format!("row {bad} of {v}"),
            });
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
            .collect();
        self.push(
            "gather",
            vec![ids.len(), d],
            out,
            Op::Gather(table, ids.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    /// `out[i][j][k] = x_i^T U[:, k, :] y_j` for `x: n x d`, `U: d x L x d`,
    /// `y: m x d`; output `n x m x L`.
    pub fn bilinear(&mut self, x: Var, u: Var, y: Var) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("bilinear", x)?;
        let (m, d2) = self.matrix("bilinear", y)?;
        let (l, ok) = match *self.shape(u) {
            [a, l, b] => (l, a == d && b == d && l >= 1),
            _ => (0, false),
        };
        if d != d2 || !ok {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear",
                left: vec![n, d, m, d2],
                right: self.shape(u).to_vec(),
            });
        }
        // xu = x (n x d) * U (d x L·d), read as (n·L) x d.
        let mut xu = vec![F::zero(); n * l * d];
        gemm(
            F::one(),
            view(self.value(x), n, d),
            view(self.value(u), d, l * d),
            F::zero(),
            &mut xu,
        );
        // p = xu (n·L x d) * y^T (d x m)
        let mut p = vec![F::zero(); n * l * m];
        gemm(
            F::one(),
            view(&xu, n * l, d),
            view_t(self.value(y), d, m),
            F::zero(),
            &mut p,
        );
        let mut out = vec![F::zero(); n * m * l];
        for i in 0..n {
            for k in 0..l {
                let prow = &p[(i * l + k) * m..(i * l + k + 1) * m];
                for (j, &v) in prow.iter().enumerate() {
                    out[(i * m + j) * l + k] = v;
                }
            }
        }
        self.push(
            "bilinear",
            vec![n, m, l],
            out,
            Op::Bilinear {
                x,
                u,
                y,
                xu,
                labels: l,
            },
        )
    }

    /// `out[i][j][k] = W[k] · concat(x_i, y_j) + b[k]`; output `n x m x L`.
    pub fn concat_linear(&mut self, x: Var, y: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("concat_linear", x)?;
        let (m, d2) = self.matrix("concat_linear", y)?;
        let (l, w2) = self.matrix("concat_linear", w)?;
        if d != d2 || w2 != 2 * d || self.value(b).len() != l {
            return Err(TensorError::ShapeMismatch {
                op: "concat_linear",
                left: vec![n, d, m, d2],
                right: vec![l, w2, self.value(b).len()],
            });
        }
        let wv = self.value(w);
        // W1 = W[:, :d], W2 = W[:, d:], both L x d with row stride 2d.
        let w1t = ArrayView2::from_shape((d, l).strides((1, 2 * d)), wv).expect("w1t");
        let w2t = ArrayView2::from_shape((d, l).strides((1, 2 * d)), &wv[d..]).expect("w2t");
        let mut a = vec![F::zero(); n * l];
        gemm(F::one(), view(self.value(x), n, d), w1t, F::zero(), &mut a);
        let mut bm = vec![F::zero(); m * l];
        gemm(F::one(), view(self.value(y), m, d), w2t, F::zero(), &mut bm);
        let bias = self.value(b);
        let mut out = Vec::with_capacity(n * m * l);
        for i in 0..n {
            for j in 0..m {
                for k in 0..l {
                    out.push(a[i * l + k] + bm[j * l + k] + bias[k]);
                }
            }
        }
        self.push(
            "concat_linear",
            vec![n, m, l],
            out,
            Op::ConcatLinear {
                x,
                y,
                w,
                b,
                labels: l,
            },
        )
    }

    /// One LSTM direction over a whole sequence.
    ///
    /// `xp` (`n x 4h`) holds the input projections plus bias for every
    /// position, gate blocks ordered input, forget, candidate, output.
    /// `w_hh` is `h x 4h`. Positions are visited last-to-first when
    /// `reverse` is set; row `t` of the `n x h` output is always the hidden
    /// state at position `t`.
    pub fn lstm_seq(&mut self, xp: Var, w_hh: Var, reverse: bool) -> Result<Var, TensorError> {
        let (n, four_h) = self.matrix("lstm_seq", xp)?;
        let (h, cols) = self.matrix("lstm_seq", w_hh)?;
        if cols != four_h || four_h != 4 * h {
            return Err(self.mismatch("lstm_seq", xp, w_hh));
        }
        let xpv = self.value(xp);
        let whh = self.value(w_hh);
        let mut gates = vec![F::zero(); n * four_h];
        let mut cells = vec![F::zero(); n * h];
        let mut out = vec![F::zero(); n * h];
        let mut prev: Option<usize> = None;
        for t in steps(n, reverse) {
            let a = &mut gates[t * four_h..(t + 1) * four_h];
            a.copy_from_slice(&xpv[t * four_h..(t + 1) * four_h]);
            if let Some(p) = prev {
                vec_mat(&out[p * h..(p + 1) * h], whh, four_h, a);
            }
            for k in 0..h {
                a[k] = sigmoid(a[k]);
                a[h + k] = sigmoid(a[h + k]);
                a[2 * h + k] = a[2 * h + k].tanh();
                a[3 * h + k] = sigmoid(a[3 * h + k]);
            }
            for k in 0..h {
                let c_prev = prev.map_or(F::zero(), |p| cells[p * h + k]);
                let c = a[h + k] * c_prev + a[k] * a[2 * h + k];
                cells[t * h + k] = c;
                out[t * h + k] = a[3 * h + k] * c.tanh();
            }
            prev = Some(t);
        }
        self.push(
            "lstm_seq",
            vec![n, h],
            out,
            Op::LstmSeq {
                xp,
                w_hh,
                reverse,
                gates,
                cells,
            },
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`
    /// over the cells where `mask` is set, computed in logit space.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[bool],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let s = self.value(logits);
        if targets.len() != s.len() || mask.len() != s.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                reason: "empty mask".into(),
            });
        }
        let norm = F::one() / F::of(count as f64);
        let mut total = F::zero();
        let mut dlogits = vec![F::zero(); s.len()];
        for (c, ((&x, &t), &m)) in s.iter().zip(targets).zip(mask).enumerate() {
            if !m {
                continue;
            }
            let y = if t { F::one() } else { F::zero() };
            // max(x,0) - x*y + log(1 + exp(-|x|))
            total += x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p();
            dlogits[c] = (sigmoid(x) - y) * norm;
        }
        self.push(
            "bce_with_logits",
            Vec::new(),
            vec![total * norm],
            Op::BceWithLogits { logits, dlogits },
        )
    }

    /// Softmax cross-entropy over the last axis of `logits`, summed over the
    /// selected `(row, target)` picks and divided by `normalizer`. Rows index
    /// the tensor viewed as `(numel / L) x L`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        picks: &[(usize, usize)],
        normalizer: F,
    ) -> Result<Var, TensorError> {
        let width = *self.shape(logits).last().unwrap_or(&0);
        let s = self.value(logits);
        if width == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                reason: "zero-width label axis".into(),
            });
        }
        if picks.is_empty() || normalizer <= F::zero() {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                reason: "nothing to score".into(),
            });
        }
        let rows_total = s.len() / width;
        let inv = F::one() / normalizer;
        let mut total = F::zero();
        let mut rows = Vec::with_capacity(picks.len());
        for &(r, t) in picks {
            if r >= rows_total || t >= width {
                return Err(TensorError::Invalid {
                    op: "softmax_cross_entropy",
                    reason: format!("pick ({r},{t}) outside {rows_total} x {width}"),
                });
            }
            let row = &s[r * width..(r + 1) * width];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: F = exps.iter().copied().sum();
            total += z.ln() + max - row[t];
            let mut g: Vec<F> = exps.iter().map(|&e| e / z * inv).collect();
            g[t] -= inv;
            rows.push((r, g));
        }
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![total * inv],
            Op::SoftmaxXent {
                logits,
                rows,
                width,
            },
        )
    }

    pub(super) fn backprop(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(self.shape(*a)).expect("matrix");
                let n = node.shape[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(
                        F::one(),
                        view(g, m, n),
                        view_t(self.value(*b), n, k),
                        F::one(),
                        ga,
                    );
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(
                        F::one(),
                        view_t(self.value(*a), k, m),
                        view(g, m, n),
                        F::one(),
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                let c = node.shape[1];
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d * o;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((x, &d), &o) in gb.iter_mut().zip(g).zip(va) {
                        *x += d * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *f);
                }
            }
            Op::Sigmoid(a) => {
                let out = self.value(Var(idx));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &d), &s) in ga.iter_mut().zip(g).zip(out) {
                        *x += d * s * (F::one() - s);
                    }
                }
            }
            Op::Tanh(a) => {
                let out = self.value(Var(idx));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &d), &t) in ga.iter_mut().zip(g).zip(out) {
                        *x += d * (F::one() - t * t);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, &d), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += d * m;
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.shape(*a)[1];
                let w = end - start;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (row, grow) in ga.chunks_mut(c).zip(g.chunks(w)) {
                        row[*start..*end]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Row(a, i) => {
                let c = node.shape[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &d)| *x += d);
                }
            }
            Op::StackRows(rows) => {
                let c = node.shape[1];
                for (k, &r) in rows.iter().enumerate() {
                    if let Some(gr) = self.grad_slot(grads, r) {
                        gr.iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (row, grow) in ga.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        row.iter_mut().zip(&grow[..ca]).for_each(|(x, &d)| *x += d);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (row, grow) in gb.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        row.iter_mut().zip(&grow[ca..]).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Gather(table, ids) => {
                let d = node.shape[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (k, &i) in ids.iter().enumerate() {
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(x, &dd)| *x += dd);
                    }
                }
            }
            Op::Reshape(a) | Op::Sum(a) => {
                let scalar_out = matches!(node.op, Op::Sum(_));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    if scalar_out {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    } else {
                        ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Bilinear {
                x,
                u,
                y,
                xu,
                labels,
            } => {
                let l = *labels;
                let (n, d) = mat_dims(self.shape(*x)).expect("matrix");
                let m = self.shape(*y)[0];
                // dp[(i·L+k), j] = g[i, j, k]
                let mut dp = vec![F::zero(); n * l * m];
                for i in 0..n {
                    for j in 0..m {
                        for k in 0..l {
                            dp[(i * l + k) * m + j] = g[(i * m + j) * l + k];
                        }
                    }
                }
                if let Some(gy) = self.grad_slot(grads, *y) {
                    // dy += dpᵀ (m x n·L) · xu (n·L x d)
                    gemm(F::one(), view_t(&dp, m, n * l), view(xu, n * l, d), F::one(), gy);
                }
                let need_xu_grad = self.nodes[x.0].requires_grad || self.nodes[u.0].requires_grad;
                if need_xu_grad {
                    // dxu (n·L x d) = dp · y
                    let mut dxu = vec![F::zero(); n * l * d];
                    gemm(
                        F::one(),
                        view(&dp, n * l, m),
                        view(self.value(*y), m, d),
                        F::zero(),
                        &mut dxu,
                    );
                    if let Some(gu) = self.grad_slot(grads, *u) {
                        // dU (d x L·d) += xᵀ · dxu (n x L·d)
                        gemm(
                            F::one(),
                            view_t(self.value(*x), d, n),
                            view(&dxu, n, l * d),
                            F::one(),
                            gu,
                        );
                    }
                    if let Some(gx) = self.grad_slot(grads, *x) {
                        // dx += dxu (n x L·d) · Uᵀ (L·d x d)
                        gemm(
                            F::one(),
                            view(&dxu, n, l * d),
                            view_t(self.value(*u), l * d, d),
                            F::one(),
                            gx,
                        );
                    }
                }
            }
            Op::LstmSeq {
                xp,
                w_hh,
                reverse,
                gates,
                cells,
            } => {
                let (n, h) = (node.shape[0], node.shape[1]);
                let four_h = 4 * h;
                let whh = self.value(*w_hh);
                let out = self.value(Var(idx));
                let order: Vec<usize> = steps(n, *reverse).collect();
                // d loss / d pre-activation gates, per position
                let mut da = vec![F::zero(); n * four_h];
                // hidden state feeding each position (zero for the first)
                let mut h_prev = vec![F::zero(); n * h];
                let mut dh_rec = vec![F::zero(); h];
                let mut dc_next = vec![F::zero(); h];
                for s in (0..n).rev() {
                    let t = order[s];
                    let prev = s.checked_sub(1).map(|p| order[p]);
                    let a = &gates[t * four_h..(t + 1) * four_h];
                    let dat = &mut da[t * four_h..(t + 1) * four_h];
                    for k in 0..h {
                        let (i, f, gg, o) = (a[k], a[h + k], a[2 * h + k], a[3 * h + k]);
                        let c = cells[t * h + k];
                        let tc = c.tanh();
                        let dh = g[t * h + k] + dh_rec[k];
                        let dc = dh * o * (F::one() - tc * tc) + dc_next[k];
                        let c_prev = prev.map_or(F::zero(), |p| cells[p * h + k]);
                        dat[k] = dc * gg * i * (F::one() - i);
                        dat[h + k] = dc * c_prev * f * (F::one() - f);
                        dat[2 * h + k] = dc * i * (F::one() - gg * gg);
                        dat[3 * h + k] = dh * tc * o * (F::one() - o);
                        dc_next[k] = dc * f;
                    }
                    if let Some(p) = prev {
                        h_prev[t * h..(t + 1) * h].copy_from_slice(&out[p * h..(p + 1) * h]);
                        // dh_prev = W_hh · da_t
                        mat_vec(whh, dat, &mut dh_rec);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *xp) {
                    gx.iter_mut().zip(&da).for_each(|(x, &d)| *x += d);
                }
                if let Some(gw) = self.grad_slot(grads, *w_hh) {
                    // dW_hh += H_prevᵀ · dA
                    gemm(
                        F::one(),
                        view_t(&h_prev, h, n),
                        view(&da, n, four_h),
                        F::one(),
                        gw,
                    );
                }
            }
            Op::ConcatLinear {
                x,
                y,
                w,
                b,
                labels,
            } => {
                let l = *labels;
                let (n, d) = mat_dims(self.shape(*x)).expect("matrix");
                let m = self.shape(*y)[0];
                let mut da = vec![F::zero(); n * l];
                let mut db = vec![F::zero(); m * l];
                let mut dbias = vec![F::zero(); l];
                for i in 0..n {
                    for j in 0..m {
                        let cell = &g[(i * m + j) * l..(i * m + j + 1) * l];
                        for k in 0..l {
                            da[i * l + k] += cell[k];
                            db[j * l + k] += cell[k];
                            dbias[k] += cell[k];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.iter_mut().zip(&dbias).for_each(|(x, &d)| *x += d);
                }
                let wv = self.value(*w);
                let w1 = ArrayView2::from_shape((l, d).strides((2 * d, 1)), wv).expect("w1");
                let w2 = ArrayView2::from_shape((l, d).strides((2 * d, 1)), &wv[d..]).expect("w2");
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gemm(F::one(), view(&da, n, l), w1, F::one(), gx);
                }
                if let Some(gy) = self.grad_slot(grads, *y) {
                    gemm(F::one(), view(&db, m, l), w2, F::one(), gy);
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    let mut gwv =
                        ArrayViewMut2::from_shape((l, 2 * d), gw.as_mut_slice()).expect("gw");
                    let (mut g1, mut g2) = gwv.view_mut().split_at(ndarray::Axis(1), d);
                    general_mat_mul(
                        F::one(),
                        &view_t(&da, l, n),
                        &view(self.value(*x), n, d),
                        F::one(),
                        &mut g1,
                    );
                    general_mat_mul(
                        F::one(),
                        &view_t(&db, l, m),
                        &view(self.value(*y), m, d),
                        F::one(),
                        &mut g2,
                    );
                }
            }
            Op::BceWithLogits { logits, dlogits } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    gl.iter_mut()
                        .zip(dlogits)
                        .for_each(|(x, &d)| *x += d * g[0]);
                }
            }
            Op::SoftmaxXent {
                logits,
                rows,
                width,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, dr) in rows {
                        gl[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(x, &d)| *x += d * g[0]);
                    }
                }
            }
        }
    }
}
