//! Bidirectional gated recurrent encoder.
//!
//! Gate order within stacked weights is (reset, update, candidate):
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! Steps past a sample's valid length hold the previous state, so the reverse
//! direction starts from zero at the last valid frame.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::layers::gemm;
use super::param::{prefixed, prefixed_mut, Module, Param};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct Direction {
    w_ih: Param,
    w_hh: Param,
    b_ih: Param,
    b_hh: Param,
    reverse: bool,
    cache: Option<DirCache>,
}

#[derive(Debug, Clone)]
struct DirCache {
    x: Array2<f64>,
    /// per step, each `[batch, hidden]`
    h_prev: Vec<Array2<f64>>,
    r: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    n: Vec<Array2<f64>>,
    ghn: Vec<Array2<f64>>,
}

impl Direction {
    fn new(input: usize, hidden: usize, reverse: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::uniform(&[3 * hidden, input], bound, rng),
            w_hh: Param::uniform(&[3 * hidden, hidden], bound, rng),
            b_ih: Param::uniform(&[3 * hidden], bound, rng),
            b_hh: Param::uniform(&[3 * hidden], bound, rng),
            reverse,
            cache: None,
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.value.shape()[1]
    }

    fn steps(&self, t: usize) -> Vec<usize> {
        if self.reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        }
    }

    /// `x` is `[batch·time, input]`, rows ordered batch-major. Writes the
    /// hidden states into columns `offset..offset+hidden` of `out`.
    fn forward(&mut self, x: Array2<f64>, b: usize, t: usize, lens: &[usize], out: &mut Array3<f64>, offset: usize) {
        let h = self.hidden();
        let input = x.ncols();
        let mut gi = Array2::<f64>::zeros((b * t, 3 * h));
        for mut row in gi.rows_mut() {
            row.assign(&ndarray::ArrayView1::from(self.b_ih.v()));
        }
        gemm(
            x.as_slice().unwrap(),
            (b * t, input),
            false,
            self.w_ih.v(),
            (3 * h, input),
            true,
            gi.as_slice_mut().unwrap(),
            1.0,
            1.0,
        );
        let mut cache = DirCache {
            x,
            h_prev: Vec::with_capacity(t),
            r: Vec::with_capacity(t),
            z: Vec::with_capacity(t),
            n: Vec::with_capacity(t),
            ghn: Vec::with_capacity(t),
        };
        let mut hcur = Array2::<f64>::zeros((b, h));
        let bhh = self.b_hh.v();
        for step in self.steps(t) {
            let mut gh = Array2::<f64>::zeros((b, 3 * h));
            for mut row in gh.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(bhh));
            }
            gemm(
                hcur.as_slice().unwrap(),
                (b, h),
                false,
                self.w_hh.v(),
                (3 * h, h),
                true,
                gh.as_slice_mut().unwrap(),
                1.0,
                1.0,
            );
            let mut r = Array2::zeros((b, h));
            let mut z = Array2::zeros((b, h));
            let mut n = Array2::zeros((b, h));
            let mut ghn = Array2::zeros((b, h));
            let mut hnext = Array2::zeros((b, h));
            for i in 0..b {
                let gi_row = gi.row(i * t + step);
                let active = step < lens[i];
                for j in 0..h {
                    let rv = sigmoid(gi_row[j] + gh[[i, j]]);
                    let zv = sigmoid(gi_row[h + j] + gh[[i, h + j]]);
                    let hn = gh[[i, 2 * h + j]];
                    let nv = (gi_row[2 * h + j] + rv * hn).tanh();
                    r[[i, j]] = rv;
                    z[[i, j]] = zv;
                    n[[i, j]] = nv;
                    ghn[[i, j]] = hn;
                    hnext[[i, j]] = if active {
                        (1.0 - zv) * nv + zv * hcur[[i, j]]
                    } else {
                        hcur[[i, j]]
                    };
                    out[[i, step, offset + j]] = hnext[[i, j]];
                }
            }
            cache.h_prev.push(std::mem::replace(&mut hcur, hnext));
            cache.r.push(r);
            cache.z.push(z);
            cache.n.push(n);
            cache.ghn.push(ghn);
        }
        self.cache = Some(cache);
    }

    /// Returns `dx` as `[batch·time, input]`.
    fn backward(&mut self, dout: &Array3<f64>, offset: usize, lens: &[usize]) -> Array2<f64> {
        let cache = self.cache.take().expect("gru backward before forward");
        let (b, t, _) = dout.dim();
        let h = self.hidden();
        let input = cache.x.ncols();
        let mut dgi = Array2::<f64>::zeros((b * t, 3 * h));
        let mut dh_carry = Array2::<f64>::zeros((b, h));
        let w_hh = self.w_hh.v().to_vec();
        let mut dw_hh = vec![0.0; 3 * h * h];
        let mut db_hh = vec![0.0; 3 * h];
        let steps = self.steps(t);
        for (k, &step) in steps.iter().enumerate().rev() {
            let (hp, r, z, n, ghn) = (&cache.h_prev[k], &cache.r[k], &cache.z[k], &cache.n[k], &cache.ghn[k]);
            let mut dgh = Array2::<f64>::zeros((b, 3 * h));
            let mut dh_prev = Array2::<f64>::zeros((b, h));
            for i in 0..b {
                let active = step < lens[i];
                for j in 0..h {
                    let dh = dout[[i, step, offset + j]] + dh_carry[[i, j]];
                    if !active {
                        dh_prev[[i, j]] = dh;
                        continue;
                    }
                    let (rv, zv, nv) = (r[[i, j]], z[[i, j]], n[[i, j]]);
                    let dn = dh * (1.0 - zv);
                    let dz = dh * (hp[[i, j]] - nv);
                    dh_prev[[i, j]] = dh * zv;
                    let dan = dn * (1.0 - nv * nv);
                    let dar = dan * ghn[[i, j]] * rv * (1.0 - rv);
                    let daz = dz * zv * (1.0 - zv);
                    let row = i * t + step;
                    dgi[[row, j]] = dar;
                    dgi[[row, h + j]] = daz;
                    dgi[[row, 2 * h + j]] = dan;
                    dgh[[i, j]] = dar;
                    dgh[[i, h + j]] = daz;
                    dgh[[i, 2 * h + j]] = dan * rv;
                }
            }
            let dghs = dgh.as_slice().unwrap();
            gemm(
                dghs,
                (b, 3 * h),
                true,
                hp.as_slice().unwrap(),
                (b, h),
                false,
                &mut dw_hh,
                1.0,
                1.0,
            );
            for row in dghs.chunks(3 * h) {
                for (g, d) in db_hh.iter_mut().zip(row) {
                    *g += d;
                }
            }
            gemm(
                dghs,
                (b, 3 * h),
                false,
                &w_hh,
                (3 * h, h),
                false,
                dh_prev.as_slice_mut().unwrap(),
                1.0,
                1.0,
            );
            dh_carry = dh_prev;
        }
        for (g, d) in self.w_hh.g_mut().iter_mut().zip(&dw_hh) {
            *g += d;
        }
        for (g, d) in self.b_hh.g_mut().iter_mut().zip(&db_hh) {
            *g += d;
        }
        let dgis = dgi.as_slice().unwrap();
        gemm(
            dgis,
            (b * t, 3 * h),
            true,
            cache.x.as_slice().unwrap(),
            (b * t, input),
            false,
            self.w_ih.g_mut(),
            1.0,
            1.0,
        );
        let gb = self.b_ih.g_mut();
        for row in dgis.chunks(3 * h) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Array2::<f64>::zeros((b * t, input));
        gemm(
            dgis,
            (b * t, 3 * h),
            false,
            self.w_ih.v(),
            (3 * h, input),
            false,
            dx.as_slice_mut().unwrap(),
            1.0,
            0.0,
        );
        dx
    }
}

impl Module for Direction {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("b_ih".into(), &self.b_ih),
            ("b_hh".into(), &self.b_hh),
        ]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("w_ih".into(), &mut self.w_ih),
            ("w_hh".into(), &mut self.w_hh),
            ("b_ih".into(), &mut self.b_ih),
            ("b_hh".into(), &mut self.b_hh),
        ]
    }
}

/// Maps `[batch, time, input]` to `[batch, time, 2·hidden]`.
#[derive(Debug, Clone)]
pub struct BiGru {
    fwd: Direction,
    bwd: Direction,
    lens: Vec<usize>,
}

impl BiGru {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fwd: Direction::new(input, hidden, false, rng),
            bwd: Direction::new(input, hidden, true, rng),
            lens: Vec::new(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn forward(&mut self, x: &Array3<f64>, lens: &[usize]) -> Array3<f64> {
        let (b, t, d) = x.dim();
        let h = self.hidden();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * t, d))
            .expect("contiguous");
        let mut out = Array3::zeros((b, t, 2 * h));
        self.fwd.forward(flat.clone(), b, t, lens, &mut out, 0);
        self.bwd.forward(flat, b, t, lens, &mut out, h);
        self.lens = lens.to_vec();
        out
    }

    pub fn backward(&mut self, dout: &Array3<f64>) -> Array3<f64> {
        let (b, t, _) = dout.dim();
        let h = self.hidden();
        let mut dx = self.fwd.backward(dout, 0, &self.lens);
        dx += &self.bwd.backward(dout, h, &self.lens);
        let d = dx.ncols();
        dx.into_shape_with_order((b, t, d)).expect("contiguous")
    }
}

impl Module for BiGru {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("fwd", self.fwd.params());
        v.extend(prefixed("bwd", self.bwd.params()));
        v
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("fwd", self.fwd.params_mut());
        v.extend(prefixed_mut("bwd", self.bwd.params_mut()));
        v
    }
}
