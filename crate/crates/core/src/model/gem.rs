//! Generalized-mean pooling with a learnable exponent.
//!
//! `gem(x; p) = (mean(max(x, eps)^p))^(1/p)`. Evaluated as
//! `m · mean((c/m)^p)^(1/p)` with `m = max c` so large `p` cannot overflow.

use ndarray::{Array2, Array3, Array4};

use super::param::{Module, Param};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Pooled value of one window.
pub fn gem_pool(x: &[f64], p: f64, eps: f64) -> f64 {
    assert!(!x.is_empty(), "gem over an empty window");
    let m = x.iter().fold(eps, |a, &v| a.max(v));
    let s = x.iter().map(|&v| (v.max(eps) / m).powf(p)).sum::<f64>() / x.len() as f64;
    m * s.powf(1.0 / p)
}

/// Accumulate `dy · ∂y/∂x_i` into `dx` and return `dy · ∂y/∂p`.
pub fn gem_backward(x: &[f64], p: f64, eps: f64, y: f64, dy: f64, dx: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().fold(eps, |a, &v| a.max(v));
    let mut s = 0.0;
    let mut s_log = 0.0;
    for (&xi, d) in x.iter().zip(dx.iter_mut()) {
        let c = xi.max(eps);
        let r = c / m;
        let rp = r.powf(p);
        s += rp;
        if rp > 0.0 {
            s_log += rp * r.ln();
        }
        if xi > eps {
            *d += dy * (c / y).powf(p - 1.0) / n;
        }
    }
    s /= n;
    s_log /= n;
    dy * y * (-s.ln() / (p * p) + s_log / (p * s))
}

/// 2×2 GeM downsampling over the spatial axes; odd edges pool partial windows.
#[derive(Debug, Clone)]
pub struct Gem2d {
    pub p: Param,
    pub eps: f64,
    cache: Option<(Array4<f64>, Array4<f64>)>,
}

fn out_dim(n: usize) -> usize {
    n.div_ceil(2)
}

impl Gem2d {
    pub fn new(p_init: f64, eps: f64) -> Self {
        Self {
            p: Param::filled(&[1], p_init),
            eps,
            cache: None,
        }
    }

    pub fn p_value(&self) -> f64 {
        self.p.v()[0]
    }

    fn window(x: &Array4<f64>, i: usize, c: usize, oy: usize, ox: usize, buf: &mut Vec<f64>) {
        let (_, _, h, w) = x.dim();
        buf.clear();
        for y in 2 * oy..(2 * oy + 2).min(h) {
            for xx in 2 * ox..(2 * ox + 2).min(w) {
                buf.push(x[[i, c, y, xx]]);
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let p = self.p_value();
        let mut out = Array4::zeros((b, c, out_dim(h), out_dim(w)));
        let mut buf = Vec::with_capacity(4);
        for i in 0..b {
            for ci in 0..c {
                for oy in 0..out_dim(h) {
                    for ox in 0..out_dim(w) {
                        Self::window(x, i, ci, oy, ox, &mut buf);
                        out[[i, ci, oy, ox]] = gem_pool(&buf, p, self.eps);
                    }
                }
            }
        }
        self.cache = Some((x.clone(), out.clone()));
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (x, y) = self.cache.take().expect("gem backward before forward");
        let (b, c, h, w) = x.dim();
        let p = self.p_value();
        let mut dx = Array4::zeros(x.raw_dim());
        let mut dp = 0.0;
        let mut buf = Vec::with_capacity(4);
        let mut dbuf = [0.0f64; 4];
        for i in 0..b {
            for ci in 0..c {
                for oy in 0..out_dim(h) {
                    for ox in 0..out_dim(w) {
                        Self::window(&x, i, ci, oy, ox, &mut buf);
                        let g = dy[[i, ci, oy, ox]];
                        let d = &mut dbuf[..buf.len()];
                        d.fill(0.0);
                        dp += gem_backward(&buf, p, self.eps, y[[i, ci, oy, ox]], g, d);
                        let mut k = 0;
                        for yy in 2 * oy..(2 * oy + 2).min(h) {
                            for xx in 2 * ox..(2 * ox + 2).min(w) {
                                dx[[i, ci, yy, xx]] += d[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        self.p.g_mut()[0] += dp;
        dx
    }
}

impl Module for Gem2d {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("p".into(), &self.p)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("p".into(), &mut self.p)]
    }
}

/// GeM over the time axis of `[batch, time, dim]`, restricted to each
/// sample's valid prefix.
#[derive(Debug, Clone)]
pub struct TemporalGem {
    pub p: Param,
    pub eps: f64,
    cache: Option<(Array3<f64>, Vec<usize>, Array2<f64>)>,
}

impl TemporalGem {
    pub fn new(p_init: f64, eps: f64) -> Self {
        Self {
            p: Param::filled(&[1], p_init),
            eps,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<f64>, lens: &[usize]) -> Array2<f64> {
        let (b, t, d) = x.dim();
        let p = self.p.v()[0];
        let mut out = Array2::zeros((b, d));
        let mut buf = Vec::with_capacity(t);
        for i in 0..b {
            let len = lens[i].clamp(1, t);
            for j in 0..d {
                buf.clear();
                buf.extend((0..len).map(|k| x[[i, k, j]]));
                out[[i, j]] = gem_pool(&buf, p, self.eps);
            }
        }
        self.cache = Some((x.clone(), lens.to_vec(), out.clone()));
        out
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array3<f64> {
        let (x, lens, y) = self.cache.take().expect("temporal gem backward before forward");
        let (b, t, d) = x.dim();
        let p = self.p.v()[0];
        let mut dx = Array3::zeros((b, t, d));
        let mut dp = 0.0;
        let mut buf = Vec::with_capacity(t);
        let mut dbuf = vec![0.0; t];
        for i in 0..b {
            let len = lens[i].clamp(1, t);
            for j in 0..d {
                buf.clear();
                buf.extend((0..len).map(|k| x[[i, k, j]]));
                let db = &mut dbuf[..len];
                db.fill(0.0);
                dp += gem_backward(&buf, p, self.eps, y[[i, j]], dy[[i, j]], db);
                for k in 0..len {
                    dx[[i, k, j]] = db[k];
                }
            }
        }
        self.p.g_mut()[0] += dp;
        dx
    }
}

impl Module for TemporalGem {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("p".into(), &self.p)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("p".into(), &mut self.p)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn scalar_examples() {
        assert!((gem_pool(&[1.0, 2.0, 3.0], 1.0, DEFAULT_EPS) - 2.0).abs() < 1e-12);
        assert!((gem_pool(&[1.0, 2.0, 3.0], 100.0, DEFAULT_EPS) - 3.0).abs() < 0.05);
        for p in [1.0, 2.5, 3.0, 17.0] {
            assert!((gem_pool(&[4.0, 4.0, 4.0], p, DEFAULT_EPS) - 4.0).abs() < 1e-12);
        }
        // negatives are clamped, never NaN
        assert!(gem_pool(&[-1.0, -2.0], 3.0, DEFAULT_EPS).is_finite());
    }

    #[test]
    fn derivative_wrt_p_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..10);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let p = rng.gen_range(1.0..6.0);
            let y = gem_pool(&x, p, DEFAULT_EPS);
            let mut dx = vec![0.0; n];
            let dp = gem_backward(&x, p, DEFAULT_EPS, y, 1.0, &mut dx);
            let h = 1e-5;
            let fd = (gem_pool(&x, p + h, DEFAULT_EPS) - gem_pool(&x, p - h, DEFAULT_EPS)) / (2.0 * h);
            assert!((dp - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{dp} vs {fd}");
            for i in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (gem_pool(&xp, p, DEFAULT_EPS) - gem_pool(&xm, p, DEFAULT_EPS)) / (2.0 * h);
                assert!((dx[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn odd_spatial_dims_round_up() {
        let mut g = Gem2d::new(3.0, DEFAULT_EPS);
        let x = Array4::from_elem((1, 2, 5, 3), 2.0);
        let y = g.forward(&x);
        assert_eq!(y.dim(), (1, 2, 3, 2));
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn temporal_gem_ignores_padding() {
        let mut g = TemporalGem::new(1.0, DEFAULT_EPS);
        let mut x = Array3::zeros((1, 4, 1));
        x[[0, 0, 0]] = 1.0;
        x[[0, 1, 0]] = 3.0;
        x[[0, 2, 0]] = 100.0;
        let y = g.forward(&x, &[2]);
        assert!((y[[0, 0]] - 2.0).abs() < 1e-12);
    }
}
