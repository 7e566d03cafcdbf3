//! Dense and 2-D convolution layers (stride 1, square kernels, zero padding).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fan-in scaled uniform draw in `[-sqrt(6/fan_in), sqrt(6/fan_in))`.
fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// `c[m, n] = a[m, k] * b[k, n] + beta * c`, with `a` and `b` given as
/// `(data, row stride, column stride)` and `c` dense row-major.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), beta: f64, c: &mut [f64]) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every index the kernel touches in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer; weight is `(out, in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: fan_in_uniform(rng, &[outputs, inputs], inputs),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, din, dout) = (x.batch(), self.inputs(), self.outputs());
        if x.item_len() != din {
            return Err(Error::Shape(format!("dense expects {din} inputs, got {:?}", x.shape())));
        }
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut out = vec![0.0; n * dout];
        for (row, orow) in x.data().chunks(din).zip(out.chunks_mut(dout)) {
            for (o, y) in orow.iter_mut().enumerate() {
                let wr = &w[o * din..(o + 1) * din];
                *y = b[o] + wr.iter().zip(row).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        Tensor::new(vec![n, dout], out)
    }

    /// Returns `(dx, dweight, dbias)`; `dx` is shaped like `x`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (din, dout) = (self.inputs(), self.outputs());
        let w = self.weight.data();
        let mut dw = vec![0.0; dout * din];
        let mut db = vec![0.0; dout];
        let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
        for (i, (row, grow)) in x.data().chunks(din).zip(dy.data().chunks(dout)).enumerate() {
            for (o, &g) in grow.iter().enumerate() {
                db[o] += g;
                let dwr = &mut dw[o * din..(o + 1) * din];
                for (d, v) in dwr.iter_mut().zip(row) {
                    *d += g * v;
                }
                if need_dx {
                    let wr = &w[o * din..(o + 1) * din];
                    for (d, a) in dx[i * din..(i + 1) * din].iter_mut().zip(wr) {
                        *d += g * a;
                    }
                }
            }
        }
        let dx = if need_dx { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None };
        Ok((dx, Tensor::new(vec![dout, din], dw)?, Tensor::from_vec(db)))
    }
}

/// 2-D convolution over `(N, C, H, W)`; weight is `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    hout: usize,
    wout: usize,
}

impl Conv2d {
    pub fn init<R: Rng>(rng: &mut R, cin: usize, cout: usize, kernel: usize, padding: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: fan_in_uniform(rng, &[cout, cin, kernel, kernel], fan_in),
            bias: Tensor::zeros(&[cout]),
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial size for an `h x w` input, if positive.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        (hp >= k && wp >= k).then(|| (hp - k + 1, wp - k + 1))
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv2d expects (N, {}, H, W), got {s:?}",
                self.in_channels()
            )));
        }
        let (hout, wout) = self
            .output_hw(s[2], s[3])
            .ok_or_else(|| Error::Shape(format!("conv2d kernel larger than input {s:?}")))?;
        Ok(Geometry {
            cin: s[1],
            h: s[2],
            w: s[3],
            k: self.kernel(),
            hout,
            wout,
        })
    }

    /// Unfolds one sample into a `(cin*k*k, hout*wout)` column matrix.
    fn im2col(&self, g: &Geometry, sample: &[f64], col: &mut [f64]) {
        let p = g.hout * g.wout;
        let pad = self.padding as isize;
        for c in 0..g.cin {
            let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oi in 0..g.hout {
                        let ii = oi as isize + ki as isize - pad;
                        let line = &mut dst[oi * g.wout..(oi + 1) * g.wout];
                        if ii < 0 || ii >= g.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = oj as isize + kj as isize - pad;
                            *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, col: &[f64], sample: &mut [f64]) {
        let p = g.hout * g.wout;
        let pad = self.padding as isize;
        for c in 0..g.cin {
            let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oi in 0..g.hout {
                        let ii = oi as isize + ki as isize - pad;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..g.wout {
                            let jj = oj as isize + kj as isize - pad;
                            if jj >= 0 && jj < g.w as isize {
                                plane[ii as usize * g.w + jj as usize] += src[oi * g.wout + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (n, cout) = (x.batch(), self.out_channels());
        let kk = g.cin * g.k * g.k;
        let p = g.hout * g.wout;
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut col = vec![0.0; kk * p];
        let mut out = vec![0.0; n * cout * p];
        for i in 0..n {
            self.im2col(&g, x.item(i), &mut col);
            let osample = &mut out[i * cout * p..(i + 1) * cout * p];
            for (o, orow) in osample.chunks_mut(p).enumerate() {
                orow.fill(b[o]);
            }
            // out[O, P] += W[O, K] * col[K, P]
            gemm(cout, kk, p, (w, kk, 1), (&col, p, 1), 1.0, osample);
        }
        Tensor::new(vec![n, cout, g.hout, g.wout], out)
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let g = self.geometry(x)?;
        let (n, cout) = (x.batch(), self.out_channels());
        let kk = g.cin * g.k * g.k;
        let p = g.hout * g.wout;
        if dy.shape() != [n, cout, g.hout, g.wout] {
            return Err(Error::Shape(format!("conv2d upstream gradient {:?}", dy.shape())));
        }
        let w = self.weight.data();
        let mut col = vec![0.0; kk * p];
        let mut dcol = vec![0.0; kk * p];
        let mut dw = vec![0.0; cout * kk];
        let mut db = vec![0.0; cout];
        let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
        for i in 0..n {
            self.im2col(&g, x.item(i), &mut col);
            let gsample = dy.item(i);
            for (o, grow) in gsample.chunks(p).enumerate() {
                db[o] += grow.iter().sum::<f64>();
            }
            // dW[O, K] += dY[O, P] * col^T[P, K]
            gemm(cout, p, kk, (gsample, p, 1), (&col, 1, p), 1.0, &mut dw);
            if need_dx {
                // dcol[K, P] = W^T[K, O] * dY[O, P]
                gemm(kk, cout, p, (w, 1, kk), (gsample, p, 1), 0.0, &mut dcol);
                let stride = x.item_len();
                self.col2im(&g, &dcol, &mut dx[i * stride..(i + 1) * stride]);
            }
        }
        let dx = if need_dx { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None };
        Ok((
            dx,
            Tensor::new(self.weight.shape().to_vec(), dw)?,
            Tensor::from_vec(db),
        ))
    }
}
