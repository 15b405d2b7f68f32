//! Cross-correlation kernels over NCHW buffers.

use super::gemm::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

/// Output extent, or `None` when the geometry is not integral.
pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Valid output range `[lo, hi)` for one kernel tap: positions whose input
/// coordinate `o*stride + tap - pad` lands inside `[0, size)`.
fn tap_range(tap: usize, size: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if size + pad > tap {
        ((size + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            let (ylo, yhi) = tap_range(ky, g.h, g.ho, s, p);
            for kx in 0..k {
                let (xlo, xhi) = tap_range(kx, g.w, g.wo, s, p);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[ox] = src[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            let (ylo, yhi) = tap_range(ky, g.h, g.ho, s, p);
            for kx in 0..k {
                let (xlo, xhi) = tap_range(kx, g.w, g.wo, s, p);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - p;
                    let drow = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cols_rows() * plane]
    };
    let xs = g.cin * g.in_plane();
    for n in 0..g.batch {
        let xb = &x[n * xs..(n + 1) * xs];
        let ob = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        let rhs: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.cout, g.cols_rows(), plane, w, false, rhs, false, ob, 0.0);
        if let Some(b) = b {
            for (o, &bias) in b.iter().enumerate() {
                for v in &mut ob[o * plane..(o + 1) * plane] {
                    *v += bias;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let plane = g.out_plane();
    let rows = g.cols_rows();
    let xs = g.cin * g.in_plane();
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let db = need[2].then(|| {
        let mut db = vec![0.0; g.cout];
        for n in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let off = (n * g.cout + o) * plane;
                *acc += dy[off..off + plane].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * plane }];
    let mut dcols = vec![0.0; if dx.is_some() { rows * plane } else { 0 }];
    for n in 0..g.batch {
        let dyb = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
        let xb = &x[n * xs..(n + 1) * xs];
        if let Some(dw) = dw.as_mut() {
            let lhs: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.cout, plane, rows, dyb, false, lhs, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[n * xs..(n + 1) * xs];
            if g.is_pointwise() {
                gemm(rows, g.cout, plane, w, true, dyb, false, dxb, 0.0);
            } else {
                gemm(rows, g.cout, plane, w, true, dyb, false, &mut dcols, 0.0);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Depthwise geometry reuses [`ConvGeom`] with `cout == cin`.
pub fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    let mut out = vec![0.0; g.batch * g.cin * plane];
    for n in 0..g.batch {
        for c in 0..g.cin {
            let xc = &x[(n * g.cin + c) * g.in_plane()..][..g.in_plane()];
            let oc = &mut out[(n * g.cin + c) * plane..][..plane];
            if let Some(b) = b {
                oc.fill(b[c]);
            }
            let wc = &w[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                let (ylo, yhi) = tap_range(ky, g.h, g.ho, s, p);
                for kx in 0..k {
                    let (xlo, xhi) = tap_range(kx, g.w, g.wo, s, p);
                    let wv = wc[ky * k + kx];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - p;
                        let src = &xc[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oc[oy * g.wo..(oy + 1) * g.wo];
                        for ox in xlo..xhi {
                            orow[ox] += wv * src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let mut db = need[2].then(|| vec![0.0; g.cin]);
    for n in 0..g.batch {
        for c in 0..g.cin {
            let xoff = (n * g.cin + c) * g.in_plane();
            let dyc = &dy[(n * g.cin + c) * plane..][..plane];
            if let Some(db) = db.as_mut() {
                db[c] += dyc.iter().sum::<f64>();
            }
            for ky in 0..k {
                let (ylo, yhi) = tap_range(ky, g.h, g.ho, s, p);
                for kx in 0..k {
                    let (xlo, xhi) = tap_range(kx, g.w, g.wo, s, p);
                    let widx = c * k * k + ky * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - p;
                        let row = xoff + iy * g.w;
                        let dyrow = &dyc[oy * g.wo..(oy + 1) * g.wo];
                        if dw.is_some() {
                            let src = &x[row..row + g.w];
                            for ox in xlo..xhi {
                                acc += dyrow[ox] * src[ox * s + kx - p];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx[row..row + g.w];
                            for ox in xlo..xhi {
                                drow[ox * s + kx - p] += wv * dyrow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}
