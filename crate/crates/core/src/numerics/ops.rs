//! Differentiable primitives recorded on a [`Graph`].

use std::rc::Rc;

use super::conv::{col2im, im2col, ConvGeometry};
use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.add(&vb)?;
        self.record("add", &[a, b], out, |g, want| {
            vec![want[0].then(|| g.clone()), want[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.sub(&vb)?;
        self.record("sub", &[a, b], out, |g, want| {
            vec![want[0].then(|| g.clone()), want[1].then(|| g.map(|v| -v))]
        })
    }

    /// Element-wise product of equally shaped operands.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb)?;
        let out = va.zip_map(&vb, "mul", |x, y| x * y)?;
        self.record("mul", &[a, b], out, move |g, want| {
            vec![
                want[0].then(|| g.zip_map(&vb, "mul", |u, y| u * y).expect("shape")),
                want[1].then(|| g.zip_map(&va, "mul", |u, x| u * x).expect("shape")),
            ]
        })
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).scale(c);
        self.record("mul_scalar", &[a], out, move |g, _| vec![Some(g.scale(c))])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must have one element, got {:?}", vs.shape()),
            ));
        }
        let sv = vs.item();
        let out = vx.scale(sv);
        self.record("scale_by", &[x, s], out, move |g, want| {
            let gx = want[0].then(|| g.scale(sv));
            let gs = want[1].then(|| {
                let mut acc = T::zero();
                for (&u, &v) in g.data().iter().zip(vx.data()) {
                    acc += u * v;
                }
                Tensor::scalar(acc)
            });
            vec![gx, gs]
        })
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", &[a], out, move |g, _| {
            let gx = g
                .zip_map(&va, "relu", |u, v| if v > T::zero() { u } else { T::zero() })
                .expect("shape");
            vec![Some(gx)]
        })
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.record("sum", &[a], out, move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    /// Mean absolute deviation from a fixed target; subgradient 0 at ties.
    pub fn l1_loss(&self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        same_shape("l1_loss", &vx, target)?;
        let n = T::from_f64(vx.len() as f64);
        let diff = vx.sub(target)?;
        let out = Tensor::scalar(diff.map(|d| d.abs()).sum() / n);
        self.record("l1_loss", &[x], out, move |g, _| {
            let scale = g.item() / n;
            let gx = diff.map(|d| {
                let r = d.to_f64();
                if r > 0.0 {
                    scale
                } else if r < 0.0 {
                    -scale
                } else {
                    T::zero()
                }
            });
            vec![Some(gx)]
        })
    }

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2("matmul")?;
        let (k2, n) = vb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut out, (n, 1), false);
        let out = Tensor::new([m, n], out)?;
        self.record("matmul", &[a, b], out, move |g, want| {
            let ga = want[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), &mut d, (k, 1), false);
                Tensor::new([m, k], d).expect("shape")
            });
            let gb = want[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                T::gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), &mut d, (n, 1), false);
                Tensor::new([k, n], d).expect("shape")
            });
            vec![ga, gb]
        })
    }

    /// Affine map `x·Wᵀ + b` for `x: n×i`, `W: o×i`, `b: o`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = vx.dims2("linear")?;
        let (o, i2) = vw.dims2("linear")?;
        if i != i2 || vb.shape() != [o] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(vb.data());
        }
        T::gemm(n, i, o, vx.data(), (i, 1), vw.data(), (1, i), &mut out, (o, 1), true);
        let out = Tensor::new([n, o], out)?;
        self.record("linear", &[x, w, b], out, move |g, want| {
            let gx = want[0].then(|| {
                let mut d = vec![T::zero(); n * i];
                T::gemm(n, o, i, g.data(), (o, 1), vw.data(), (i, 1), &mut d, (i, 1), false);
                Tensor::new([n, i], d).expect("shape")
            });
            let gw = want[1].then(|| {
                let mut d = vec![T::zero(); o * i];
                T::gemm(o, n, i, g.data(), (1, o), vx.data(), (i, 1), &mut d, (i, 1), false);
                Tensor::new([o, i], d).expect("shape")
            });
            let gb = want[2].then(|| {
                let mut d = vec![T::zero(); o];
                for r in 0..n {
                    for (acc, &v) in d.iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                        *acc += v;
                    }
                }
                Tensor::new([o], d).expect("shape")
            });
            vec![gx, gw, gb]
        })
    }

    /// 2-D cross-correlation of `x: N×Cin×H×W` with `w: Cout×Cin×k×k`,
    /// zero padding `pad` and the given stride (stride 2 downsamples).
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c_in, h, wd) = vx.dims4("conv2d")?;
        let (c_out, c_in_w, k, k2) = vw.dims4("conv2d")?;
        if c_in != c_in_w || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs kernel {:?}", vx.shape(), vw.shape()),
            ));
        }
        let geo = ConvGeometry::new(c_in, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {k} stride {stride} pad {pad} on {h}x{wd}")))?;
        let vb = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [c_out] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} for {c_out} outputs", vb.shape()),
                    ));
                }
                Some(vb)
            }
            None => None,
        };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let in_plane = c_in * h * wd;
        let out_plane = c_out * cols;
        let mut col = vec![T::zero(); n * rows * cols];
        let mut out = vec![T::zero(); n * out_plane];
        for s in 0..n {
            let col_s = &mut col[s * rows * cols..(s + 1) * rows * cols];
            im2col(&vx.data()[s * in_plane..(s + 1) * in_plane], &geo, col_s);
            let out_s = &mut out[s * out_plane..(s + 1) * out_plane];
            if let Some(vb) = &vb {
                for (o, &bv) in vb.data().iter().enumerate() {
                    out_s[o * cols..(o + 1) * cols].fill(bv);
                }
            }
            T::gemm(
                c_out,
                rows,
                cols,
                vw.data(),
                (rows, 1),
                col_s,
                (cols, 1),
                out_s,
                (cols, 1),
                vb.is_some(),
            );
        }
        let out = Tensor::new([n, c_out, geo.h_out, geo.w_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let col = Rc::new(col);
        self.record("conv2d", &parents, out, move |g, want| {
            let gd = g.data();
            let gx = want[0].then(|| {
                let mut dx = vec![T::zero(); n * in_plane];
                let mut dcol = vec![T::zero(); rows * cols];
                for s in 0..n {
                    T::gemm(
                        rows,
                        c_out,
                        cols,
                        vw.data(),
                        (1, rows),
                        &gd[s * out_plane..(s + 1) * out_plane],
                        (cols, 1),
                        &mut dcol,
                        (cols, 1),
                        false,
                    );
                    col2im(&dcol, &geo, &mut dx[s * in_plane..(s + 1) * in_plane]);
                }
                Tensor::new(vx.shape().to_vec(), dx).expect("shape")
            });
            let gw = want[1].then(|| {
                let mut dw = vec![T::zero(); c_out * rows];
                for s in 0..n {
                    T::gemm(
                        c_out,
                        cols,
                        rows,
                        &gd[s * out_plane..(s + 1) * out_plane],
                        (cols, 1),
                        &col[s * rows * cols..(s + 1) * rows * cols],
                        (1, cols),
                        &mut dw,
                        (rows, 1),
                        true,
                    );
                }
                Tensor::new(vw.shape().to_vec(), dw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(want[2].then(|| {
                    let mut db = vec![T::zero(); c_out];
                    for s in 0..n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            let base = s * out_plane + o * cols;
                            for &v in &gd[base..base + cols] {
                                *acc += v;
                            }
                        }
                    }
                    Tensor::new([c_out], db).expect("shape")
                }));
            }
            grads
        })
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4("upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new([n, c, h2, w2], out)?;
        self.record("upsample2x", &[x], out, move |g, _| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
        })
    }

    /// Concatenation along the channel axis of two NCHW tensors.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = va.dims4("concat_channels")?;
        let (n2, cb, h2, w2) = vb.dims4("concat_channels")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(
                "concat_channels",
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&va.data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&vb.data()[s * pb..(s + 1) * pb]);
        }
        let out = Tensor::new([n, ca + cb, h, w], out)?;
        self.record("concat_channels", &[a, b], out, move |g, want| {
            let gd = g.data();
            let split = |off: usize, len: usize, c: usize| {
                let mut d = Vec::with_capacity(n * len);
                for s in 0..n {
                    let base = s * (pa + pb) + off;
                    d.extend_from_slice(&gd[base..base + len]);
                }
                Tensor::new([n, c, h, w], d).expect("shape")
            };
            vec![want[0].then(|| split(0, pa, ca)), want[1].then(|| split(pa, pb, cb))]
        })
    }

    /// Per-channel spatial mean: `N×C×H×W → N×C`.
    pub fn spatial_mean(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4("spatial_mean")?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = vx
            .data()
            .chunks(hw)
            .map(|plane| {
                let mut acc = T::zero();
                for &v in plane {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let out = Tensor::new([n, c], out)?;
        self.record("spatial_mean", &[x], out, move |g, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                dx.extend(std::iter::repeat_n(v * inv, hw));
            }
            vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
        })
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("narrow_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "narrow_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&vx.data()[row * c + start..row * c + start + len]);
        }
        let out = Tensor::new([r, len], out)?;
        self.record("narrow_cols", &[x], out, move |g, _| {
            let mut dx = vec![T::zero(); r * c];
            for row in 0..r {
                dx[row * c + start..row * c + start + len].copy_from_slice(&g.data()[row * len..(row + 1) * len]);
            }
            vec![Some(Tensor::new([r, c], dx).expect("shape"))]
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape.to_vec())?;
        self.record("reshape", &[x], out, move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("shape"))]
        })
    }

    /// Scales kernel `(o, i)` of `theta: O×I×k×k` by `w[o, i]`, broadcast
    /// over the `k×k` footprint.
    pub fn scale_kernels(&self, theta: Var, w: Var) -> Result<Var> {
        let (vt, vw) = (self.value(theta), self.value(w));
        let (o, i, kh, kw) = vt.dims4("scale_kernels")?;
        if vw.shape() != [o, i] {
            return Err(Error::shape(
                "scale_kernels",
                format!("kernel {:?} vs modulation {:?}", vt.shape(), vw.shape()),
            ));
        }
        let kk = kh * kw;
        let mut out = vt.data().to_vec();
        for (block, &s) in out.chunks_mut(kk).zip(vw.data()) {
            for v in block {
                *v *= s;
            }
        }
        let out = Tensor::new(vt.shape().to_vec(), out)?;
        self.record("scale_kernels", &[theta, w], out, move |g, want| {
            let gt = want[0].then(|| {
                let mut d = g.data().to_vec();
                for (block, &s) in d.chunks_mut(kk).zip(vw.data()) {
                    for v in block {
                        *v *= s;
                    }
                }
                Tensor::new(vt.shape().to_vec(), d).expect("shape")
            });
            let gw = want[1].then(|| {
                let d: Vec<T> = g
                    .data()
                    .chunks(kk)
                    .zip(vt.data().chunks(kk))
                    .map(|(gb, tb)| {
                        let mut acc = T::zero();
                        for (&a, &b) in gb.iter().zip(tb) {
                            acc += a * b;
                        }
                        acc
                    })
                    .collect();
                Tensor::new([o, i], d).expect("shape")
            });
            vec![gt, gw]
        })
    }
}
