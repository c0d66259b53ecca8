//! Minimal layer primitives with explicit backward passes. Activations are
//! `C x H x W`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `C_out x (C_in * k * k)`, row-major over `(c_in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((out_ch, fan_in), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `x` into `(C_in * k * k) x (H_out * W_out)` patches.
    pub fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        if self.is_pointwise() {
            return x.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).expect("contiguous");
        }
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("contiguous");
        let dst = cols.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out[oy * wo + ox] = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dims: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dims;
        if self.is_pointwise() {
            return cols.clone().into_shape_with_order((c, h, w)).expect("contiguous");
        }
        let (ho, wo) = self.out_dims(h, w);
        let k = self.kernel;
        let mut x = Array3::zeros(in_dims);
        let dst = x.as_slice_mut().expect("contiguous");
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("contiguous");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let patch = &src[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += patch[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the unfolded input kept for the backward pass.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        (y.into_shape_with_order((self.out_ch, ho, wo)).expect("contiguous"), cols)
    }

    pub fn backward_input(&self, dy: &Array3<f64>, in_dims: (usize, usize, usize)) -> Array3<f64> {
        let (co, ho, wo) = dy.dim();
        let dy = dy.view().into_shape_with_order((co, ho * wo)).expect("contiguous");
        let dcols = self.weight.t().dot(&dy);
        self.col2im(&dcols, in_dims)
    }

    pub fn backward_params(&self, dy: &Array3<f64>, cols: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (co, ho, wo) = dy.dim();
        let dy = dy.view().into_shape_with_order((co, ho * wo)).expect("contiguous");
        (dy.dot(&cols.t()), dy.sum_axis(Axis(1)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(|v| v * sigmoid(v))
}

/// `d silu / dz` applied to an upstream gradient.
pub fn silu_backward(z: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(z).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    out
}

pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h / 2, w / 2));
    for ((ci, y, xx), g) in dy.indexed_iter() {
        dx[[ci, y / 2, xx / 2]] += g;
    }
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Adam with bias correction, one moment pair per parameter array.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    /// Applies one update; `params[i]` and `grads[i]` must be flat and aligned.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    /// Direct convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.out_dims(h, w);
        let k = conv.kernel;
        Array3::from_shape_fn((conv.out_ch, ho, wo), |(co, oy, ox)| {
            let mut acc = conv.bias[co];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[[co, (ci * k + ky) * k + kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = stream_rng(1, 0);
        for (k, s, p) in [(3, 2, 1), (3, 1, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            conv.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            let x = Array3::from_shape_simple_fn((3, 7, 6), || rng.gen_range(-1.0..1.0));
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(y.dim(), want.dim());
            assert!(y.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream_rng(2, 0);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_simple_fn((2, 5, 6), || rng.gen_range(-1.0..1.0));
        let weights_out = Array3::from_shape_simple_fn(conv.forward(&x).0.dim(), || rng.gen_range(-1.0..1.0));
        let loss = |conv: &Conv2d, x: &Array3<f64>| (conv.forward(x).0 * &weights_out).sum();
        let (_, cols) = conv.forward(&x);
        let dx = conv.backward_input(&weights_out, x.dim());
        let (dw, db) = conv.backward_params(&weights_out, &cols);
        let h = 1e-6;
        for idx in ndarray::indices(x.dim()) {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for idx in ndarray::indices(conv.weight.dim()) {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-7);
        }
        for i in 0..conv.out_ch {
            let mut p = conv.clone();
            p.bias[i] += h;
            let mut m = conv.clone();
            m.bias[i] -= h;
            assert!(((loss(&p, &x) - loss(&m, &x)) / (2.0 * h) - db[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn silu_and_upsample_backward() {
        let mut rng = stream_rng(3, 0);
        let z = Array3::from_shape_simple_fn((2, 2, 3), || rng.gen_range(-3.0..3.0));
        let dy = Array3::from_shape_simple_fn((2, 2, 3), || rng.gen_range(-1.0..1.0));
        let g = silu_backward(&z, &dy);
        let h = 1e-6;
        for idx in ndarray::indices(z.dim()) {
            let mut p = z.clone();
            p[idx] += h;
            let mut m = z.clone();
            m[idx] -= h;
            let fd = ((silu(&p) - silu(&m)) * &dy).sum() / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-8);
        }
        let up = upsample2(&z);
        assert_eq!(up.dim(), (2, 4, 6));
        let back = upsample2_backward(&Array3::ones((2, 4, 6)));
        assert!(back.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
