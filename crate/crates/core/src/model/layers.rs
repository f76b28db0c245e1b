//! Dense building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients during `backward`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rayon::prelude::*;

use super::param::{Module, Param};

/// `c = alpha · op(a) · op(b) + beta · c` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("a shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("b shape");
    let av = if ta { av.t() } else { av };
    let bv = if tb { bv.t() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("c shape");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}

/// Square-kernel 2-D convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    k: usize,
    input: Option<Array4<f64>>,
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - pad;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dx[base + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (cin * k * k) as f64;
        Self {
            weight: Param::normal(&[cout, cin * k * k], (2.0 / fan_in).sqrt(), rng),
            bias: Param::filled(&[cout], 0.0),
            cin,
            cout,
            k,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let x = x.as_standard_layout().into_owned();
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let mut out = Array4::<f64>::zeros((b, self.cout, h, w));
        let xs = x.as_slice().unwrap();
        let wv = self.weight.v();
        let bv = self.bias.v();
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(self.cout * hw)
            .enumerate()
            .for_each(|(i, o)| {
                for (co, row) in o.chunks_mut(hw).enumerate() {
                    row.fill(bv[co]);
                }
                let xb = &xs[i * c * hw..(i + 1) * c * hw];
                if self.k == 1 {
                    gemm(wv, (self.cout, kk), false, xb, (kk, hw), false, o, 1.0, 1.0);
                } else {
                    let mut cols = vec![0.0; kk * hw];
                    im2col(xb, c, h, w, self.k, &mut cols);
                    gemm(wv, (self.cout, kk), false, &cols, (kk, hw), false, o, 1.0, 1.0);
                }
            });
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.input.take().expect("conv backward before forward");
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        let xs = x.as_slice().unwrap();
        let wv = self.weight.v();
        let cout = self.cout;
        let k = self.k;
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .as_slice_mut()
            .unwrap()
            .par_chunks_mut(c * hw)
            .enumerate()
            .map(|(i, dxb)| {
                let xb = &xs[i * c * hw..(i + 1) * c * hw];
                let dyb = &dys[i * cout * hw..(i + 1) * cout * hw];
                let mut dw = vec![0.0; cout * kk];
                let db: Vec<f64> = dyb.chunks(hw).map(|r| r.iter().sum()).collect();
                if k == 1 {
                    gemm(dyb, (cout, hw), false, xb, (kk, hw), true, &mut dw, 1.0, 0.0);
                    gemm(wv, (cout, kk), true, dyb, (cout, hw), false, dxb, 1.0, 0.0);
                } else {
                    let mut cols = vec![0.0; kk * hw];
                    im2col(xb, c, h, w, k, &mut cols);
                    gemm(dyb, (cout, hw), false, &cols, (kk, hw), true, &mut dw, 1.0, 0.0);
                    gemm(wv, (cout, kk), true, dyb, (cout, hw), false, &mut cols, 1.0, 0.0);
                    col2im(&cols, c, h, w, k, dxb);
                }
                (dw, db)
            })
            .collect();
        let gw = self.weight.g_mut();
        for (dw, _) in &partials {
            for (g, d) in gw.iter_mut().zip(dw) {
                *g += d;
            }
        }
        let gb = self.bias.g_mut();
        for (_, db) in &partials {
            for (g, d) in gb.iter_mut().zip(db) {
                *g += d;
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::filled(&[c], 1.0),
            beta: Param::filled(&[c], 0.0),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c]))),
            running_var: Param::buffer(ndarray::ArrayD::ones(ndarray::IxDyn(&[c]))),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let n = (b * hw) as f64;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            (0..c)
                .map(|ci| {
                    let mut s = 0.0;
                    for i in 0..b {
                        s += xs[(i * c + ci) * hw..(i * c + ci + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / n;
                    let mut v = 0.0;
                    for i in 0..b {
                        v += xs[(i * c + ci) * hw..(i * c + ci + 1) * hw]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    (m, v / n)
                })
                .unzip()
        } else {
            (self.running_mean.v().to_vec(), self.running_var.v().to_vec())
        };
        if train {
            let mom = self.momentum;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = self.running_mean.value.as_slice_mut().unwrap();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            let rv = self.running_var.value.as_slice_mut().unwrap();
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Array4::<f64>::zeros((b, c, h, w));
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let o = out.as_slice_mut().unwrap();
            let (g, be) = (self.gamma.v(), self.beta.v());
            for i in 0..b {
                for ci in 0..c {
                    let r = (i * c + ci) * hw..(i * c + ci + 1) * hw;
                    for j in r {
                        let v = (xs[j] - mean[ci]) * inv_std[ci];
                        xh[j] = v;
                        o[j] = g[ci] * v + be[ci];
                    }
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train });
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("bn backward before forward");
        let (b, c, h, w) = dy.dim();
        let hw = h * w;
        let n = (b * hw) as f64;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..b {
            for ci in 0..c {
                for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                    sum_dy[ci] += dys[j];
                    sum_dy_xhat[ci] += dys[j] * xh[j];
                }
            }
        }
        for (g, s) in self.gamma.g_mut().iter_mut().zip(&sum_dy_xhat) {
            *g += s;
        }
        for (g, s) in self.beta.g_mut().iter_mut().zip(&sum_dy) {
            *g += s;
        }
        let gamma = self.gamma.v();
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let d = dx.as_slice_mut().unwrap();
        for i in 0..b {
            for ci in 0..c {
                let k = gamma[ci] * cache.inv_std[ci];
                for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                    d[j] = if cache.train {
                        k * (dys[j] - sum_dy[ci] / n - xh[j] * sum_dy_xhat[ci] / n)
                    } else {
                        k * dys[j]
                    };
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("gamma".into(), &self.gamma),
            ("beta".into(), &self.beta),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

/// Fully connected layer on `[batch, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[fan_out, fan_in], bound, rng),
            bias: Param::uniform(&[fan_out], bound, rng),
            input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (b, i) = x.dim();
        assert_eq!(i, self.fan_in(), "linear input width");
        let o = self.fan_out();
        let x = x.as_standard_layout().into_owned();
        let mut out = Array2::<f64>::zeros((b, o));
        for mut row in out.rows_mut() {
            row.assign(&ndarray::ArrayView1::from(self.bias.v()));
        }
        gemm(
            x.as_slice().unwrap(),
            (b, i),
            false,
            self.weight.v(),
            (o, i),
            true,
            out.as_slice_mut().unwrap(),
            1.0,
            1.0,
        );
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.input.take().expect("linear backward before forward");
        let (b, i) = x.dim();
        let o = self.fan_out();
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().unwrap();
        gemm(
            dys,
            (b, o),
            true,
            x.as_slice().unwrap(),
            (b, i),
            false,
            self.weight.g_mut(),
            1.0,
            1.0,
        );
        let gb = self.bias.g_mut();
        for row in dys.chunks(o) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Array2::<f64>::zeros((b, i));
        gemm(
            dys,
            (b, o),
            false,
            self.weight.v(),
            (o, i),
            false,
            dx.as_slice_mut().unwrap(),
            1.0,
            0.0,
        );
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

pub(crate) fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// `dy` masked by `y > 0`, where `y` is the ReLU output.
pub(crate) fn relu_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut d = dy.clone();
    ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0
        }
    });
    d
}
