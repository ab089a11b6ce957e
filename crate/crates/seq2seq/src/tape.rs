//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Values are computed eagerly as nodes are pushed; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients for parameter leaves.

use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_rows, Tensor};

pub type Var = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    /// `out[i][j] = x[i][idx[i * m + j]]`
    RelGather {
        x: Var,
        idx: Vec<usize>,
    },
    /// `out[i][idx[i * m + j]] += x[i][j]`
    RelScatter {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every softmax output on the tape (cross-entropy's internal softmax included).
    pub fn softmax_outputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Softmax(_) => Some(&n.value),
                Op::CrossEntropy { probs, .. } => Some(probs),
                _ => None,
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// A leaf whose gradient is reported under `index` by [`backward`](Self::backward).
    pub fn param(&mut self, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shapes");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols), r.shape(), "bias shape");
        let mut v = self.value(a).clone();
        for i in 0..v.rows {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            let t = (GELU_C * (*x + 0.044715 * *x * *x * *x)).tanh();
            *x = 0.5 * *x * (1.0 + t);
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let n = xv.cols as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = xv.clone();
        for i in 0..xv.rows {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (row[j] - mu) * inv;
            }
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xhat.at(i, j) * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, width);
        for i in 0..xv.rows {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + width]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                v.row_mut(i)[at..at + r.len()].copy_from_slice(r);
                at += r.len();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `n x m` matrix picking, for each `(i, j)`, column `idx[i*m + j]` of row `i` of `x`.
    pub fn rel_gather(&mut self, x: Var, m: usize, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, m);
        for i in 0..xv.rows {
            for j in 0..m {
                v.data[i * m + j] = xv.at(i, idx[i * m + j]);
            }
        }
        self.push(v, Op::RelGather { x, idx })
    }

    /// Transpose of [`rel_gather`](Self::rel_gather): sums `x[i][j]` into column
    /// `idx[i*m + j]` of a `n x width` matrix.
    pub fn rel_scatter(&mut self, x: Var, width: usize, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let m = xv.cols;
        let mut v = Tensor::zeros(xv.rows, width);
        for i in 0..xv.rows {
            for j in 0..m {
                v.data[i * width + idx[i * m + j]] += xv.at(i, j);
            }
        }
        self.push(v, Op::RelScatter { x, idx })
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `output` and returns `(param index,
    /// gradient)` for every parameter leaf that received one.
    pub fn backward(&self, output: Var) -> Vec<(usize, Tensor)> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(Tensor::scalar(1.0));
        let mut out = Vec::new();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out.push((*p, g)),
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_at(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (s, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data.iter_mut().zip(&x.data) {
                        let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = g;
                    for i in 0..p.rows {
                        let dot: f64 = ga.row(i).iter().zip(p.row(i)).map(|(x, y)| x * y).sum();
                        for (gv, &pv) in ga.row_mut(i).iter_mut().zip(p.row(i)) {
                            *gv = pv * (*gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.value(*gain).data;
                    let n = g.cols as f64;
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    let mut gg = Tensor::zeros(1, g.cols);
                    let mut gb = Tensor::zeros(1, g.cols);
                    for (i, &istd) in inv_std.iter().enumerate().take(g.rows) {
                        let dy = g.row(i);
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> = dy.iter().zip(gv).map(|(d, w)| d * w).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum();
                        for j in 0..g.cols {
                            gx.data[i * g.cols + j] = istd / n * (n * dxhat[j] - s1 - xh[j] * s2);
                            gg.data[j] += dy[j] * xh[j];
                            gb.data[j] += dy[j];
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gb);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for i in 0..g.rows {
                        gx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[at..at + w]);
                        }
                        at += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::RelGather { x, idx } => {
                    let xv = self.value(*x);
                    let m = g.cols;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for i in 0..g.rows {
                        for j in 0..m {
                            gx.data[i * xv.cols + idx[i * m + j]] += g.at(i, j);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RelScatter { x, idx } => {
                    let xv = self.value(*x);
                    let m = xv.cols;
                    let mut gx = Tensor::zeros(xv.rows, m);
                    for i in 0..xv.rows {
                        for j in 0..m {
                            gx.data[i * m + j] = g.at(i, idx[i * m + j]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data[0];
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl.data[i * gl.cols + t] -= 1.0;
                    }
                    gl.scale_assign(s);
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(uᵀ y w)/d(input) for a small graph builder,
    /// with fixed non-uniform weight vectors `u` and `w`.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, input: Tensor) {
        let weights: Vec<f64> = (0..200).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let scalar = |tape: &mut Tape, y: Var| -> Var {
            let (rows, cols) = tape.value(y).shape();
            let w = tape.constant(Tensor::from_vec(cols, 1, weights[..cols].to_vec()).unwrap());
            let col = tape.matmul(y, w);
            let u = tape.constant(Tensor::from_vec(1, rows, weights[100..100 + rows].to_vec()).unwrap());
            tape.matmul(u, col)
        };
        let mut tape = Tape::new();
        let x = tape.param(0, input.clone());
        let y = build(&mut tape, x);
        let out = scalar(&mut tape, y);
        let grads = tape.backward(out);
        let analytic = &grads.iter().find(|(p, _)| *p == 0).unwrap().1;
        let h = 1e-6;
        for k in 0..input.data.len() {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let mut inp = input.clone();
                inp.data[k] += delta;
                let x = t.param(0, inp);
                let y = build(&mut t, x);
                let o = scalar(&mut t, y);
                t.value(o).data[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (numeric - analytic.data[k]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "element {k}: numeric {numeric} analytic {}",
                analytic.data[k]
            );
        }
    }

    fn sample(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 4.0).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn elementwise_and_row_ops() {
        check(|t, x| t.gelu(x), sample(3, 4));
        check(|t, x| t.softmax(x), sample(3, 4));
        check(|t, x| t.scale(x, -1.7), sample(2, 3));
        check(
            |t, x| {
                let g = t.constant(Tensor::from_rows(&[vec![1.5, -0.5, 2.0, 0.3]]));
                let b = t.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]));
                t.layer_norm(x, g, b)
            },
            sample(3, 4),
        );
    }

    #[test]
    fn products_and_reshapes() {
        let other = sample(4, 3);
        check(
            move |t, x| {
                let b = t.constant(other.clone());
                t.matmul(x, b)
            },
            sample(2, 4),
        );
        check(
            |t, x| {
                let b = t.constant(sample(5, 4));
                t.matmul_bt(x, b)
            },
            sample(2, 4),
        );
        check(
            |t, x| {
                let a = t.constant(sample(3, 2));
                t.matmul_bt(a, x)
            },
            sample(4, 2),
        );
        check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_cols(x, 0, 1);
                t.concat_cols(&[a, b, a])
            },
            sample(3, 4),
        );
        check(|t, x| t.gather(x, &[2, 0, 2, 1]), sample(3, 2));
        check(|t, x| t.rel_gather(x, 2, vec![0, 2, 1, 1, 2, 0]), sample(3, 3));
        check(|t, x| t.rel_scatter(x, 3, vec![0, 0, 2, 1]), sample(2, 2));
        check(
            |t, x| {
                let r = t.slice_cols(x, 0, 3);
                let row = t.gather(r, &[0]);
                t.add_row(x, row)
            },
            sample(2, 3),
        );
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let mut tape = Tape::new();
        let l = tape.param(0, Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]));
        let ce = tape.cross_entropy(l, &[2]);
        assert!((tape.value(ce).data[0] - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(ce);
        assert_eq!(g[0].1.data, vec![0.25, 0.25, -0.75, 0.25]);
    }
}
