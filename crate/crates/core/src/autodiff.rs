//! Minimal reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its value, its
//! parents and a vector-Jacobian product closure. Domain modules (kinematics,
//! skinning, rendering, ...) register their own fused operations through
//! [`Graph::custom`], so only the glue arithmetic lives here.

use crate::parallel::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(grad_output, parent_values, output_value) -> grad per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, leaf_grad: bool) -> Var {
        let requires_grad = leaf_grad || parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, true)
    }

    pub fn custom(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        self.push(value, parents.to_vec(), Some(backward), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        assert_eq!(root_value.len(), 1, "backward() needs a scalar root");
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are released once propagated; leaves keep theirs.
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&grad_out, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "{op}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.custom(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(va.shape().to_vec(), data);
        self.custom(v, &[a, b], Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data);
        self.custom(
            v,
            &[a, b],
            Box::new(|g, p, _| {
                let ga = g.data().iter().zip(p[1].data()).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x).collect();
                vec![
                    Some(Tensor::new(g.shape().to_vec(), ga)),
                    Some(Tensor::new(g.shape().to_vec(), gb)),
                ]
            }),
        )
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|v| scale * v + shift);
        self.custom(v, &[x], Box::new(move |g, _, _| vec![Some(g.map(|g| g * scale))]))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `Σ_i w_i · x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.scalar(v);
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.custom(
            Tensor::scalar(total),
            &parents,
            Box::new(move |g, _, _| weights.iter().map(|w| Some(Tensor::scalar(g.item() * w))).collect()),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.custom(
            Tensor::scalar(s),
            &[x],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape().to_vec(), g.item()))]),
        )
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.custom(
            Tensor::scalar(s),
            &[x],
            Box::new(|g, p, _| {
                let k = 2.0 * g.item();
                vec![Some(p[0].map(|v| k * v))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.custom(
            v,
            &[x],
            Box::new(move |g, p, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { slope * g })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.custom(
            v,
            &[x],
            Box::new(|g, p, _| {
                let d = g.data().iter().zip(p[0].data()).map(|(g, x)| g / x).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    /// `sigmoid(clamp(x, -bound, bound))`; no gradient flows where clamped.
    pub fn clamped_sigmoid(&mut self, x: Var, bound: f64) -> Var {
        let v = self.value(x).map(|v| sigmoid(v.clamp(-bound, bound)));
        self.custom(
            v,
            &[x],
            Box::new(move |g, p, out| {
                let d = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(out.data())
                    .map(|((g, x), y)| if x.abs() >= bound { 0.0 } else { g * y * (1.0 - y) })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            }),
        )
    }

    /// `y = x Wᵀ + b` over the trailing axis. `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), cin, "linear: input width does not match weight");
        let rows = xv.len() / cin;
        let mut out = vec![0.0; rows * cout];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let exec = self.exec;
        {
            let xd = xv.data();
            let wd = wv.data();
            let chunk_rows = 64;
            exec.for_each_chunk_mut(&mut out, chunk_rows * cout, |ci, chunk| {
                for (k, orow) in chunk.chunks_mut(cout).enumerate() {
                    let r = ci * chunk_rows + k;
                    let xr = &xd[r * cin..(r + 1) * cin];
                    for (o, slot) in orow.iter_mut().enumerate() {
                        let wr = &wd[o * cin..(o + 1) * cin];
                        let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..cin {
                            acc += wr[i] * xr[i];
                        }
                        *slot = acc;
                    }
                }
            });
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(
            value,
            &parents,
            Box::new(move |g, p, _| {
                let (xd, wd) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut gx = vec![0.0; rows * cin];
                let mut gw = vec![0.0; cout * cin];
                let mut gb = vec![0.0; cout];
                for r in 0..rows {
                    let gr = &gd[r * cout..(r + 1) * cout];
                    let xr = &xd[r * cin..(r + 1) * cin];
                    let gxr = &mut gx[r * cin..(r + 1) * cin];
                    for o in 0..cout {
                        let go = gr[o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let wr = &wd[o * cin..(o + 1) * cin];
                        let gwr = &mut gw[o * cin..(o + 1) * cin];
                        for i in 0..cin {
                            gxr[i] += go * wr[i];
                            gwr[i] += go * xr[i];
                        }
                    }
                }
                let mut res = vec![
                    Some(Tensor::new(p[0].shape().to_vec(), gx)),
                    Some(Tensor::new(p[1].shape().to_vec(), gw)),
                ];
                if p.len() == 3 {
                    res.push(Some(Tensor::new(vec![cout], gb)));
                }
                res
            }),
        )
    }

    /// Concatenates along the trailing axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last: leading shapes differ");
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.custom(
            Tensor::new(shape, out),
            parts,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w].copy_from_slice(&gd[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    res.push(Some(Tensor::new(p[k].shape().to_vec(), d)));
                }
                res
            }),
        )
    }

    /// Channels `[start, start+len)` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        assert!(start + len <= c);
        let rows = xv.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.custom(
            Tensor::new(shape, out),
            &[x],
            Box::new(move |g, p, _| {
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape.to_vec());
        self.custom(
            v,
            &[x],
            Box::new(|g, p, _| vec![Some(g.clone().reshaped(p[0].shape().to_vec()))]),
        )
    }

    /// Picks entry `index` of `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(index < dim);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            out.extend_from_slice(&xv.data()[base..base + inner]);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.custom(
            Tensor::new(oshape, out),
            &[x],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + index) * inner;
                    d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), d))]
            }),
        )
    }

    /// Entries `indices` along `axis` (duplicates allowed).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(indices.iter().all(|&i| i < dim), "gather index out of range");
        let idx = indices.to_vec();
        let k = idx.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in &idx {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&xv.data()[base..base + inner]);
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = k;
        self.custom(
            Tensor::new(oshape, out),
            &[x],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for (n, &i) in idx.iter().enumerate() {
                        let src = (o * k + n) * inner;
                        let dst = (o * dim + i) * inner;
                        for e in 0..inner {
                            d[dst + e] += g.data()[src + e];
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), d))]
            }),
        )
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let base = (o * dim + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[base + i];
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.custom(
            Tensor::new(oshape, out),
            &[x],
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for k in 0..dim {
                        let base = (o * dim + k) * inner;
                        for i in 0..inner {
                            d[base + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), d))]
            }),
        )
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of a scalar function. Test support.
pub fn finite_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// `max|a-b| / max(max|b|, floor)`: the relative-error measure used by the gradient checks.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.max_abs_diff(numeric) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<F>(x0: Tensor, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = finite_difference(&x0, 1e-6, |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = build(&mut g, x);
            g.scalar(y)
        });
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn linear_and_activations() {
        let x0 = Tensor::new([2, 3], vec![0.3, -0.2, 0.5, 1.0, -0.7, 0.1]);
        check(x0, |g, x| {
            let w = g.constant(Tensor::new([2, 3], vec![0.5, -1.0, 0.25, 0.3, 0.8, -0.6]));
            let b = g.constant(Tensor::new([2], vec![0.1, -0.2]));
            let y = g.linear(x, w, Some(b));
            let y = g.leaky_relu(y, 0.2);
            let s = g.clamped_sigmoid(y, 15.0);
            g.sum_squares(s)
        });
    }

    #[test]
    fn weight_gradient_of_linear() {
        let w0 = Tensor::new([2, 2], vec![0.5, -1.0, 0.25, 0.3]);
        check(w0, |g, w| {
            let x = g.constant(Tensor::new([3, 2], vec![0.3, -0.2, 0.5, 1.0, -0.7, 0.1]));
            let y = g.linear(x, w, None);
            g.sum_squares(y)
        });
    }

    #[test]
    fn shape_ops() {
        let x0 = Tensor::new([2, 3, 2], (0..12).map(|i| 0.1 * i as f64 - 0.4).collect());
        check(x0, |g, x| {
            let a = g.slice_last(x, 1, 1);
            let c = g.concat_last(&[x, a]);
            let m = g.mean_axis(c, 1);
            let s = g.select(x, 1, 2);
            let r = g.reshape(s, &[4]);
            let q = g.mul(r, r);
            let t1 = g.sum(q);
            let t2 = g.sum_squares(m);
            let l = g.affine(x, 0.5, 1.0);
            let l = g.ln(l);
            let t3 = g.sum(l);
            g.weighted_sum(&[(t1, 1.0), (t2, 2.0), (t3, -0.5)])
        });
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2], vec![20.0, 0.0]));
        let y = g.clamped_sigmoid(x, 15.0);
        let s = g.sum(y);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert!((gx.data()[1] - 0.25).abs() < 1e-12);
        assert!(g.value(y).data()[0] <= sigmoid(15.0));
    }
}
