//! Differentiable operations on [`Var`].

use super::instrument::{self, OpClass};
use super::kernels::{self, Conv2dGeometry};
use super::{numel, Tensor, Var};
use crate::error::{Error, Result};
use crate::spike::LifParams;

/// Forward nonlinearity of a spiking neuron.
///
/// `Heaviside` is the real neuron. `Sigmoid` replaces the step with the logistic
/// function it is surrogated by, making the forward pass smooth; it exists so
/// that finite differences can check the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeFn {
    #[default]
    Heaviside,
    Sigmoid,
}

#[inline]
pub(crate) fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<(Tensor, Tensor)> + 'static,
    ) -> Result<Var<'t>> {
        let out = kernels::broadcast_zip(&self.value, &other.value, op, f)?;
        instrument::record_ops(OpClass::Elementwise, out.numel() as u64);
        let (a, b) = (self.value.clone(), other.value.clone());
        let (need_a, need_b) = (self.id.is_some(), other.id.is_some());
        Ok(self.tape.record(out, &[self, other], move |g| {
            let (ga, gb) = backward(g, &a, &b)?;
            Ok(vec![
                need_a.then(|| ga.sum_to(a.shape())).transpose()?,
                need_b.then(|| gb.sum_to(b.shape())).transpose()?,
            ])
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| Ok((g.clone(), g.clone())))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| Ok((g.clone(), g.scale(-1.0))))
    }

    /// Hadamard product with singleton broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "hadamard", |a, b| a * b, |g, a, b| Ok((g.mul(b)?, g.mul(a)?)))
    }

    pub fn mul_scalar(&self, c: f32) -> Var<'t> {
        let out = self.value.scale(c);
        instrument::record_ops(OpClass::Elementwise, out.numel() as u64);
        self.tape.record(out, &[self], move |g| Ok(vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(&self, c: f32) -> Var<'t> {
        let out = self.value.map(|x| x + c);
        self.tape.record(out, &[self], |g| Ok(vec![Some(g.clone())]))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = kernels::matmul_raw(&self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self.tape.record(out, &[self, other], move |g| {
            let (ga, gb) = kernels::matmul_backward(&a, &b, g)?;
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    /// Keep-dim sum along `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = kernels::sum_axis(&self.value, axis)?;
        let len = self.shape()[axis];
        Ok(self.tape.record(out, &[self], move |g| Ok(vec![Some(kernels::expand_axis(g, axis, len))])))
    }

    /// Keep-dim mean along `axis`.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = *self.shape().get(axis).ok_or(Error::Axis {
            op: "mean",
            axis,
            rank: self.shape().len(),
        })?;
        let out = kernels::sum_axis(&self.value, axis)?.scale(1.0 / len as f32);
        let inv = 1.0 / len as f32;
        Ok(self.tape.record(out, &[self], move |g| {
            Ok(vec![Some(kernels::expand_axis(&g.scale(inv), axis, len))])
        }))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum() as f32);
        instrument::record_ops(OpClass::Elementwise, self.value.numel() as u64);
        let shape = self.shape().to_vec();
        self.tape.record(out, &[self], move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value.numel() as f32;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn permute(&self, order: &[usize]) -> Result<Var<'t>> {
        let out = kernels::permute(&self.value, order)?;
        let inv = kernels::inverse_permutation(order);
        Ok(self.tape.record(out, &[self], move |g| Ok(vec![Some(kernels::permute(g, &inv)?)])))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Axis { op: "concat", axis, rank });
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(first.tape.record(out, parts, move |g| {
            let mut grads: Vec<Vec<f32>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for o in 0..outer {
                let _ = o;
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g.data()[off..off + l * inner]);
                    off += l * inner;
                }
            }
            Ok(grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                .collect())
        }))
    }

    /// 2-D convolution of `[M, Cin, H, W]` by weights `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<'t>, geom: Conv2dGeometry) -> Result<Var<'t>> {
        let out = kernels::conv2d_raw(&self.value, &weight.value, &geom)?;
        let (x, w) = (self.value.clone(), weight.value.clone());
        let need_dx = self.id.is_some();
        Ok(self.tape.record(out, &[self, weight], move |g| {
            let (dx, dw) = kernels::conv2d_backward(&x, &w, &geom, g, need_dx)?;
            Ok(vec![dx, Some(dw)])
        }))
    }

    pub fn maxpool2d(&self) -> Result<Var<'t>> {
        let (out, arg) = kernels::maxpool2d_raw(&self.value)?;
        let in_shape = self.shape().to_vec();
        Ok(self.tape.record(out, &[self], move |g| {
            let mut dx = vec![0.0f32; numel(&in_shape)];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i as usize] += gv;
            }
            Ok(vec![Some(Tensor::from_parts(in_shape.clone(), dx))])
        }))
    }

    /// Batch normalization over axis 1 of `[M, C, ...]`.
    ///
    /// In training mode normalizes with batch statistics and also returns
    /// `(mean, unbiased variance)` per channel for the running-stat update.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running: (&Tensor, &Tensor),
        eps: f32,
        training: bool,
    ) -> Result<(Var<'t>, Option<(Tensor, Tensor)>)> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, gamma.shape()));
        }
        let (m, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        let n = m * inner;
        if n == 0 {
            return Err(Error::contract("batch_norm on an empty batch"));
        }
        let x = self.value.data();
        let (mean, var_biased, stats) = if training {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for mi in 0..m {
                for ci in 0..c {
                    let row = &x[(mi * c + ci) * inner..][..inner];
                    mean[ci] += row.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|s| *s /= n as f64);
            for mi in 0..m {
                for ci in 0..c {
                    let row = &x[(mi * c + ci) * inner..][..inner];
                    sq[ci] += row.iter().map(|&v| (v as f64 - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            let var_b: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
            let unbiased = sq.iter().map(|s| (s / (n.max(2) - 1) as f64) as f32).collect();
            let stats = (
                Tensor::from_parts(vec![c], mean.iter().map(|&v| v as f32).collect()),
                Tensor::from_parts(vec![c], unbiased),
            );
            (mean, var_b, Some(stats))
        } else {
            let (rm, rv) = running;
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::shape("batch_norm", &shape, rm.shape()));
            }
            (
                rm.data().iter().map(|&v| v as f64).collect(),
                rv.data().iter().map(|&v| v as f64).collect(),
                None,
            )
        };
        let inv_std: Vec<f32> = var_biased.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let (gm, bt) = (gamma.value.data(), beta.value.data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut y = vec![0.0f32; x.len()];
        for mi in 0..m {
            for ci in 0..c {
                let off = (mi * c + ci) * inner;
                for j in off..off + inner {
                    let h = (x[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    y[j] = h * gm[ci] + bt[ci];
                }
            }
        }
        let out = Tensor::from_parts(shape.clone(), y);
        let gvals = gamma.value.clone();
        let need_dx = self.id.is_some();
        let var = self.tape.record(out, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for mi in 0..m {
                for ci in 0..c {
                    let off = (mi * c + ci) * inner;
                    for j in off..off + inner {
                        dgamma[ci] += (gd[j] * xhat[j]) as f64;
                        dbeta[ci] += gd[j] as f64;
                    }
                }
            }
            let dx = need_dx.then(|| {
                let gm = gvals.data();
                let mut dx = vec![0.0f32; gd.len()];
                for mi in 0..m {
                    for ci in 0..c {
                        let off = (mi * c + ci) * inner;
                        let k = gm[ci] * inv_std[ci];
                        for j in off..off + inner {
                            dx[j] = if training {
                                let nf = n as f64;
                                (k as f64 / nf * (nf * gd[j] as f64 - dbeta[ci] - xhat[j] as f64 * dgamma[ci])) as f32
                            } else {
                                k * gd[j]
                            };
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            let to_t = |v: Vec<f64>| Tensor::from_parts(vec![c], v.into_iter().map(|x| x as f32).collect());
            Ok(vec![dx, Some(to_t(dgamma)), Some(to_t(dbeta))])
        });
        Ok((var, stats))
    }

    /// Multi-step LIF neuron over axis 0 (time) of `[T, ...]`, starting from rest.
    ///
    /// Membrane recursion `V_t = decay · V_{t-1} · (1 − S_{t-1}) + x_t`, spike
    /// `S_t = H(V_t − V_th)`. Backward is BPTT with the sigmoid surrogate; when
    /// `params.detach_reset` is set the reset factor receives no gradient.
    pub fn lif(&self, params: &LifParams, spike_fn: SpikeFn) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let t_len = shape[0];
        let n = numel(&shape[1..]);
        let x = self.value.data();
        let (decay, th, k) = (params.decay(), params.v_threshold, params.surrogate_slope);
        let mut v_trace = vec![0.0f32; x.len()];
        let mut s_out = vec![0.0f32; x.len()];
        let mut v = vec![0.0f32; n];
        let mut s = vec![0.0f32; n];
        for t in 0..t_len {
            let xs = &x[t * n..(t + 1) * n];
            let (vt, st) = (&mut v_trace[t * n..(t + 1) * n], &mut s_out[t * n..(t + 1) * n]);
            for i in 0..n {
                v[i] = decay * v[i] * (1.0 - s[i]) + xs[i];
                vt[i] = v[i];
            }
            match spike_fn {
                SpikeFn::Heaviside => {
                    for i in 0..n {
                        s[i] = if v[i] >= th { 1.0 } else { 0.0 };
                    }
                }
                SpikeFn::Sigmoid => {
                    for i in 0..n {
                        s[i] = logistic(k * (v[i] - th));
                    }
                }
            }
            st.copy_from_slice(&s);
        }
        let out = Tensor::from_parts(shape.clone(), s_out.clone());
        let detach = params.detach_reset;
        Ok(self.tape.record(out, &[self], move |g| {
            let gs = g.data();
            let mut gx = vec![0.0f32; gs.len()];
            let mut gv_next = vec![0.0f32; n];
            for t in (0..t_len).rev() {
                for i in 0..n {
                    let j = t * n + i;
                    let (vt, st) = (v_trace[j], s_out[j]);
                    let mut g_spike = gs[j];
                    let mut g_mem = 0.0;
                    if t + 1 < t_len {
                        g_mem = gv_next[i] * decay * (1.0 - st);
                        if !detach {
                            g_spike -= gv_next[i] * decay * vt;
                        }
                    }
                    let gvt = g_spike * surrogate_scalar(vt - th, k) + g_mem;
                    gx[j] = gvt;
                    gv_next[i] = gvt;
                }
            }
            Ok(vec![Some(Tensor::from_parts(shape.clone(), gx))])
        }))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value.data();
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (((row[j] - mx) as f64).exp() / denom) as f32;
            }
            loss += denom.ln() - (row[labels[i]] - mx) as f64;
        }
        let out = Tensor::scalar((loss / b as f64) as f32);
        let labels = labels.to_vec();
        Ok(self.tape.record(out, &[self], move |g| {
            let scale = g.item() / b as f32;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            Ok(vec![Some(Tensor::from_parts(vec![b, k], d))])
        }))
    }
}

/// `k · σ(k·x) · (1 − σ(k·x))`.
#[inline]
pub(crate) fn surrogate_scalar(x: f32, k: f32) -> f32 {
    let s = logistic(k * x);
    k * s * (1.0 - s)
}
