//! 3D cross-correlation kernels (chunked im2col + GEMM).

use rayon::prelude::*;

use crate::{NnError, Result, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(NnError::Shape(format!(
                "conv3d expects 5-d input and weight, got {:?} and {:?}",
                x_shape, w_shape
            )));
        }
        let (cout, cin, k) = (w_shape[0], w_shape[1], w_shape[2]);
        if w_shape[3] != k || w_shape[4] != k {
            return Err(NnError::Shape(format!("non-cubic kernel {:?}", w_shape)));
        }
        if x_shape[1] != cin {
            return Err(NnError::Shape(format!(
                "conv3d input has {} channels, weight expects {}",
                x_shape[1], cin
            )));
        }
        if stride == 0 {
            return Err(NnError::Param("stride must be positive".into()));
        }
        let mut output = [0; 3];
        let mut input = [0; 3];
        for a in 0..3 {
            let s = x_shape[2 + a];
            input[a] = s;
            if s + 2 * pad < k {
                return Err(NnError::Shape(format!(
                    "spatial size {} too small for kernel {} with padding {}",
                    s, k, pad
                )));
            }
            output[a] = (s + 2 * pad - k) / stride + 1;
        }
        Ok(Self {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn depth_chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0])
    }

    /// Fill `col` (rows × L) for output depth slices `[od0, od1)`.
    fn im2col(&self, x: &[f64], od0: usize, od1: usize, col: &mut [f64]) {
        let [_, ih, iw] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let l = (od1 - od0) * oh_n * ow_n;
        let k = self.k;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let id_n = self.input[0] as isize;
        let mut r = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * self.in_len()..(ci + 1) * self.in_len()];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &mut col[r * l..(r + 1) * l];
                        let mut c = 0;
                        for od in od0..od1 {
                            let id = od as isize * s + kd as isize - p;
                            for oh in 0..oh_n {
                                let ihh = oh as isize * s + kh as isize - p;
                                let seg = &mut row[c..c + ow_n];
                                if id < 0 || id >= id_n || ihh < 0 || ihh >= ih as isize {
                                    seg.fill(0.0);
                                } else {
                                    let base = (id as usize * ih + ihh as usize) * iw;
                                    for (ow, v) in seg.iter_mut().enumerate() {
                                        let iww = ow as isize * s + kw as isize - p;
                                        *v = if iww < 0 || iww >= iw as isize {
                                            0.0
                                        } else {
                                            xc[base + iww as usize]
                                        };
                                    }
                                }
                                c += ow_n;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add `col` back into `dx`, inverse of [`Self::im2col`].
    fn col2im(&self, col: &[f64], od0: usize, od1: usize, dx: &mut [f64]) {
        let [_, ih, iw] = self.input;
        let [_, oh_n, ow_n] = self.output;
        let l = (od1 - od0) * oh_n * ow_n;
        let k = self.k;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let id_n = self.input[0] as isize;
        let in_len = self.in_len();
        let mut r = 0;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * in_len..(ci + 1) * in_len];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &col[r * l..(r + 1) * l];
                        let mut c = 0;
                        for od in od0..od1 {
                            let id = od as isize * s + kd as isize - p;
                            for oh in 0..oh_n {
                                let ihh = oh as isize * s + kh as isize - p;
                                if !(id < 0 || id >= id_n || ihh < 0 || ihh >= ih as isize) {
                                    let base = (id as usize * ih + ihh as usize) * iw;
                                    for ow in 0..ow_n {
                                        let iww = ow as isize * s + kw as isize - p;
                                        if iww >= 0 && iww < iw as isize {
                                            dxc[base + iww as usize] += row[c + ow];
                                        }
                                    }
                                }
                                c += ow_n;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every (row, col) index
    // reachable through the given strides.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain matrix product `a (m×k) · b (k×n)` with optional transposes.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    gemm(m, k, n, a, rsa, csa, b, rsb, csb, 0.0, &mut c, n, 1);
    c
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(NnError::Shape(format!("bias has {} entries, expected {}", b.numel(), g.cout)));
        }
    }
    let batch = x.batch();
    let p = g.out_len();
    let rows = g.rows();
    let wd = w.data();
    let mut out = vec![0.0; batch * g.cout * p];
    out.par_chunks_mut(g.cout * p).enumerate().for_each(|(bi, ob)| {
        let xb = x.item(bi);
        if g.is_pointwise() {
            gemm(g.cout, rows, p, wd, rows, 1, xb, p, 1, 0.0, ob, p, 1);
        } else {
            let chunk = g.depth_chunk();
            let mut col = vec![0.0; rows * chunk * g.plane()];
            let mut od0 = 0;
            while od0 < g.output[0] {
                let od1 = (od0 + chunk).min(g.output[0]);
                let l = (od1 - od0) * g.plane();
                g.im2col(xb, od0, od1, &mut col[..rows * l]);
                let off = od0 * g.plane();
                gemm(g.cout, rows, l, wd, rows, 1, &col[..rows * l], l, 1, 0.0, &mut ob[off..], p, 1);
                od0 = od1;
            }
        }
        if let Some(bias) = b {
            for (co, plane) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_vec(&[batch, g.cout, g.output[0], g.output[1], g.output[2]], out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv3d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize, need_dx: bool) -> Result<ConvGrads> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let batch = x.batch();
    let p = g.out_len();
    let rows = g.rows();
    let wd = w.data();
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let xb = x.item(bi);
            let gb = gout.item(bi);
            let mut dw = vec![0.0; g.cout * rows];
            let mut dx = if need_dx { vec![0.0; g.cin * g.in_len()] } else { Vec::new() };
            let db: Vec<f64> = gb.chunks(p).map(|c| c.iter().sum()).collect();
            if g.is_pointwise() {
                gemm(g.cout, p, rows, gb, p, 1, xb, 1, p, 0.0, &mut dw, rows, 1);
                if need_dx {
                    gemm(rows, g.cout, p, wd, 1, rows, gb, p, 1, 0.0, &mut dx, p, 1);
                }
            } else {
                let chunk = g.depth_chunk();
                let mut col = vec![0.0; rows * chunk * g.plane()];
                let mut od0 = 0;
                while od0 < g.output[0] {
                    let od1 = (od0 + chunk).min(g.output[0]);
                    let l = (od1 - od0) * g.plane();
                    let off = od0 * g.plane();
                    let colc = &mut col[..rows * l];
                    g.im2col(xb, od0, od1, colc);
                    gemm(g.cout, l, rows, &gb[off..], p, 1, colc, 1, l, 1.0, &mut dw, rows, 1);
                    if need_dx {
                        gemm(rows, g.cout, l, wd, 1, rows, &gb[off..], p, 1, 0.0, colc, l, 1);
                        g.col2im(colc, od0, od1, &mut dx);
                    }
                    od0 = od1;
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![0.0; g.cout * rows];
    let mut db = vec![0.0; g.cout];
    let mut dx = if need_dx { Vec::with_capacity(x.numel()) } else { Vec::new() };
    for (dxb, dwb, dbb) in per_sample {
        dw.iter_mut().zip(&dwb).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&dbb).for_each(|(a, b)| *a += b);
        if need_dx {
            dx.extend_from_slice(&dxb);
        }
    }
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor::from_vec(x.shape(), dx)?) } else { None },
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[g.cout], db)?,
    })
}
