//! Direct 2-D convolution via im2col and a single-precision GEMM.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hwo(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a·b + beta·c` with `c` row-major `m×n`; `a` and `b` given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, a_strides) < a.len());
    assert!(last(k, n, b_strides) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let hwo = g.hwo();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let hwo = g.hwo();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hwo..(row + 1) * hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (ckk, hwo) = (g.ckk(), g.hwo());
    let mut out = vec![0.0f32; g.n * g.cout * hwo];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; ckk * hwo] };
    for s in 0..g.n {
        let xs = &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        let os = &mut out[s * g.cout * hwo..(s + 1) * g.cout * hwo];
        if let Some(b) = bias {
            for (c, chunk) in os.chunks_exact_mut(hwo).enumerate() {
                chunk.fill(b[c]);
            }
        }
        let b_mat: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        gemm(g.cout, ckk, hwo, weight, (ckk, 1), b_mat, (hwo, 1), 1.0, os);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let (ckk, hwo) = (g.ckk(), g.hwo());
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0f32; weight.len()]);
    let mut db = need_db.then(|| vec![0.0f32; g.cout]);
    let mut cols = vec![0.0f32; if g.is_pointwise() { 0 } else { ckk * hwo }];
    let mut dcols = vec![0.0f32; if need_dx { ckk * hwo } else { 0 }];

    for s in 0..g.n {
        let xs = &x[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
        let gs = &grad_out[s * g.cout * hwo..(s + 1) * g.cout * hwo];
        if let Some(db) = db.as_mut() {
            for (c, chunk) in gs.chunks_exact(hwo).enumerate() {
                db[c] += chunk.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[f32] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW[cout, ckk] += dOut[cout, hwo] · colsᵀ[hwo, ckk]
            gemm(g.cout, hwo, ckk, gs, (hwo, 1), cols_ref, (1, hwo), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[ckk, hwo] = Wᵀ[ckk, cout] · dOut[cout, hwo]
            gemm(ckk, g.cout, hwo, weight, (1, ckk), gs, (hwo, 1), 0.0, &mut dcols);
            let dxs = &mut dx[s * g.cin * g.h * g.w..(s + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                for (d, v) in dxs.iter_mut().zip(&dcols) {
                    *d += v;
                }
            } else {
                col2im_add(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
