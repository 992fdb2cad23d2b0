//! 3x3 convolutions and dense layers with hand-written backward passes.

use crate::tensor::Tensor3;

/// How rectifiers pass the backward signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    /// Ordinary chain rule: zero where the forward pre-activation was <= 0.
    Standard,
    /// Guided backpropagation: additionally zero negative backward signals.
    Guided,
}

#[inline]
pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

pub(crate) fn relu_backward(grad: &mut [f64], pre: &[f64], gating: Gating) {
    debug_assert_eq!(grad.len(), pre.len());
    match gating {
        Gating::Standard => grad.iter_mut().zip(pre).for_each(|(g, &p)| {
            if p <= 0.0 {
                *g = 0.0
            }
        }),
        Gating::Guided => grad.iter_mut().zip(pre).for_each(|(g, &p)| {
            if p <= 0.0 || *g < 0.0 {
                *g = 0.0
            }
        }),
    }
}

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`, both
/// row-major unless flagged as stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 convolution, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out x in x 3 x 3`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * 9
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        ((height - 1) / self.stride + 1, (width - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let p = oh * ow;
        let s = self.stride;
        let mut cols = vec![0.0; self.in_channels * 9 * p];
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..][..x.width];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < x.width {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], height: usize, width: usize, oh: usize, ow: usize) -> Tensor3 {
        let p = oh * ow;
        let s = self.stride;
        let mut out = Tensor3::zeros(self.in_channels, height, width);
        for ci in 0..self.in_channels {
            let plane = out.plane_mut(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * width..][..width];
                        for (ox, &v) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < width {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_channels);
        let (oh, ow) = self.output_size(x.height, x.width);
        let p = oh * ow;
        let cols = self.im2col(x, oh, ow);
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (o, &b) in self.bias.iter().enumerate() {
            out.plane_mut(o).fill(b);
        }
        gemm(
            self.out_channels,
            self.fan_in(),
            p,
            &self.weight,
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        out
    }

    /// Accumulates parameter gradients into `grads` when given and returns
    /// the input gradient when `need_input`.
    pub fn backward(
        &self,
        x: &Tensor3,
        grad_out: &Tensor3,
        grads: Option<(&mut [f64], &mut [f64])>,
        need_input: bool,
    ) -> Option<Tensor3> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let p = oh * ow;
        let k = self.fan_in();
        if let Some((gw, gb)) = grads {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_channels, p, k, &grad_out.data, false, &cols, true, 1.0, gw);
            for (o, g) in gb.iter_mut().enumerate() {
                *g += grad_out.plane(o).iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; k * p];
        gemm(k, self.out_channels, p, &self.weight, true, &grad_out.data, false, 0.0, &mut dcols);
        Some(self.col2im(&dcols, x.height, x.width, oh, ow))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        if let Some((gw, gb)) = grads {
            for (o, &g) in grad_out.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (w, v) in gw[o * self.in_features..][..self.in_features].iter_mut().zip(x) {
                    *w += g * v;
                }
            }
        }
        let mut gx = vec![0.0; self.in_features];
        for (row, &g) in self.weight.chunks_exact(self.in_features).zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            for (d, w) in gx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        gx
    }
}
