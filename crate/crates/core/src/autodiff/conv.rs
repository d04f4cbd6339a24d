//! Convolution, pooling and the GEMM they lower to.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad so the output keeps the input's spatial size.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// `C[m, n] = A[m, k] · B[k, n] + beta · C` with C contiguous row-major.
/// Operand layouts are given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(m * n <= c.len());
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, ho·wo]` patch columns.
fn im2col(g: &ConvGeom, image: &[f32], cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.ho {
                    let y = (oy + i) as isize - g.pad_top as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox + j) as isize - g.pad_left as isize;
                        *d = if x < 0 || x >= g.w as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
fn col2im(g: &ConvGeom, cols: &[f32], image: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.ho {
                    let y = (oy + i) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let x = (ox + j) as isize - g.pad_left as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    grad_out: &[f32],
    input: &[f32],
    kernel: &[f32],
    mut d_input: Option<&mut [f32]>,
    mut d_kernel: Option<&mut [f32]>,
    d_bias: Option<&mut [f32]>,
) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_image = g.c * g.h * g.w;
    let out_image = g.f * plane;
    let mut cols = vec![0.0f32; patch * plane];
    let mut dcols = vec![0.0f32; patch * plane];
    for n in 0..g.n {
        let go = &grad_out[n * out_image..][..out_image];
        if let Some(dk) = d_kernel.as_deref_mut() {
            im2col(g, &input[n * in_image..][..in_image], &mut cols);
            // dK[f, patch] += dY[f, plane] · colsᵀ[plane, patch]
            gemm(g.f, plane, patch, go, (plane, 1), &cols, (1, plane), dk, 1.0);
        }
        if let Some(dx) = d_input.as_deref_mut() {
            // dcols[patch, plane] = Kᵀ[patch, f] · dY[f, plane]
            gemm(patch, g.f, plane, kernel, (1, patch), go, (plane, 1), &mut dcols, 0.0);
            col2im(g, &dcols, &mut dx[n * in_image..][..in_image]);
        }
    }
    if let Some(db) = d_bias {
        for n in 0..g.n {
            for (f, acc) in db.iter_mut().enumerate() {
                let row = &grad_out[n * out_image + f * plane..][..plane];
                *acc += row.iter().sum::<f32>();
            }
        }
    }
}

impl Tape {
    /// Stride-1 cross-correlation of `input[N, C, H, W]` with `kernel[F, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let mismatch = || {
            Error::Shape(format!("conv2d: input {xs:?}, kernel {ks:?}, bias {bs:?} do not match"))
        };
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || bs != [ks[0]] {
            return Err(mismatch());
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (pad_top, pad_left, ho, wo) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(mismatch());
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        let geom = ConvGeom { n, c, h, w, f, kh, kw, pad_top, pad_left, ho, wo };
        let (patch, plane) = (geom.patch(), geom.out_plane());
        let mut out = vec![0.0f32; n * f * plane];
        let mut cols = vec![0.0f32; patch * plane];
        let (x, k, b) = (self.value(input).data(), self.value(kernel).data(), self.value(bias).data());
        for i in 0..n {
            im2col(&geom, &x[i * c * h * w..][..c * h * w], &mut cols);
            let dst = &mut out[i * f * plane..][..f * plane];
            for (row, &bv) in dst.chunks_mut(plane).zip(b) {
                row.fill(bv);
            }
            gemm(f, patch, plane, k, (patch, 1), &cols, (plane, 1), dst, 1.0);
        }
        let value = Tensor::new([n, f, ho, wo], out).unwrap();
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias]))
    }

    /// Non-overlapping 2×2 max pooling; gradients route to the first maximum of each window.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(Error::Shape(format!("maxpool2x2 needs [N, C, H, W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2x2 needs even H and W, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out).unwrap();
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, &[input]))
    }
}
