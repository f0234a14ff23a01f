//! Dense kernels behind the tape's linear and convolution ops.
//!
//! Convolution follows the cross-correlation convention:
//! `y[b, o, t] = sum_{c, j} w[o, c, j] * x[b, g*cin_g + c, t*stride - padding + j*dilation]`.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            ..Self::default()
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `floor((len + 2*padding - dilation*(k-1) - 1) / stride) + 1`, or `None`
    /// when the kernel does not fit.
    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || k == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// `C = A * B + beta * C` with arbitrary strides on A and B; C is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above spell out the extents that every
    // caller in this module guarantees; all three buffers are live slices.
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

struct ConvDims {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    out_len: usize,
}

fn conv_dims(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    if x.len() != 3 || w.len() != 3 {
        return Err(Error::shape(
            "conv1d",
            format!("expected 3-d input and kernel, got {x:?} and {w:?}"),
        ));
    }
    let (batch, cin, len) = (x[0], x[1], x[2]);
    let (cout, cin_g, k) = (w[0], w[1], w[2]);
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(Error::shape(
            "conv1d",
            format!("input channels {cin}, kernel {w:?}, groups {g} are inconsistent"),
        ));
    }
    if geom.dilation == 0 {
        return Err(Error::shape("conv1d", "dilation must be >= 1"));
    }
    let out_len = geom.output_len(len, k).ok_or_else(|| {
        Error::shape(
            "conv1d",
            format!("kernel {k} (dilation {}) does not fit length {len} with padding {}", geom.dilation, geom.padding),
        )
    })?;
    Ok(ConvDims {
        batch,
        cin,
        len,
        cout,
        cin_g,
        cout_g: cout / g,
        k,
        out_len,
    })
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.k == 1 && geom.stride == 1 && geom.padding == 0
}

/// Unfolds one (batch, group) slice of `x` into a `[cin_g*k, out_len]` matrix.
fn im2col(xs: &[f64], d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let ol = d.out_len;
    for c in 0..d.cin_g {
        let row_in = &xs[c * d.len..(c + 1) * d.len];
        for j in 0..d.k {
            let out = &mut cols[(c * d.k + j) * ol..(c * d.k + j + 1) * ol];
            let offset = (j * geom.dilation) as isize - geom.padding as isize;
            for (t, o) in out.iter_mut().enumerate() {
                let pos = (t * geom.stride) as isize + offset;
                *o = if pos >= 0 && (pos as usize) < d.len {
                    row_in[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeom, gx: &mut [f64]) {
    let ol = d.out_len;
    for c in 0..d.cin_g {
        let row = &mut gx[c * d.len..(c + 1) * d.len];
        for j in 0..d.k {
            let src = &cols[(c * d.k + j) * ol..(c * d.k + j + 1) * ol];
            let offset = (j * geom.dilation) as isize - geom.padding as isize;
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * geom.stride) as isize + offset;
                if pos >= 0 && (pos as usize) < d.len {
                    row[pos as usize] += v;
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<Tensor> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape(
                "conv1d",
                format!("bias shape {:?} for {} output channels", b.shape(), d.cout),
            ));
        }
    }
    let mut out = Tensor::zeros([d.batch, d.cout, d.out_len]);
    let rows = d.cin_g * d.k;
    let pointwise = is_pointwise(&d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * d.out_len] };
    let wd = w.data();
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..d.batch {
        for g in 0..geom.groups {
            let xs = &xd[(b * d.cin + g * d.cin_g) * d.len..(b * d.cin + (g + 1) * d.cin_g) * d.len];
            let cmat: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, &d, geom, &mut cols);
                &cols
            };
            let wg = &wd[g * d.cout_g * rows..(g + 1) * d.cout_g * rows];
            let start = (b * d.cout + g * d.cout_g) * d.out_len;
            let og = &mut od[start..start + d.cout_g * d.out_len];
            gemm(d.cout_g, rows, d.out_len, wg, rows, 1, cmat, d.out_len, 1, 0.0, og);
        }
    }
    if let Some(bias) = bias {
        for b in 0..d.batch {
            for (o, &bv) in bias.data().iter().enumerate() {
                let start = (b * d.cout + o) * d.out_len;
                for v in &mut od[start..start + d.out_len] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    geom: ConvGeom,
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> ConvGrads {
    let d = conv_dims(x.shape(), w.shape(), geom).expect("validated in forward");
    let rows = d.cin_g * d.k;
    let pointwise = is_pointwise(&d, geom);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut cols = vec![0.0; rows * d.out_len];
    let wd = w.data();
    let xd = x.data();
    let gd = gout.data();
    for b in 0..d.batch {
        for g in 0..geom.groups {
            let start = (b * d.cout + g * d.cout_g) * d.out_len;
            let gg = &gd[start..start + d.cout_g * d.out_len];
            let xs_range = (b * d.cin + g * d.cin_g) * d.len..(b * d.cin + (g + 1) * d.cin_g) * d.len;
            if let Some(gw) = gw.as_mut() {
                let cmat: &[f64] = if pointwise {
                    &xd[xs_range.clone()]
                } else {
                    im2col(&xd[xs_range.clone()], &d, geom, &mut cols);
                    &cols
                };
                let gwg = &mut gw.data_mut()[g * d.cout_g * rows..(g + 1) * d.cout_g * rows];
                // gW[o, r] += sum_t gout[o, t] * cols[r, t]
                gemm(d.cout_g, d.out_len, rows, gg, d.out_len, 1, cmat, 1, d.out_len, 1.0, gwg);
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &wd[g * d.cout_g * rows..(g + 1) * d.cout_g * rows];
                let gxs = &mut gx.data_mut()[xs_range];
                if pointwise {
                    gemm(rows, d.cout_g, d.out_len, wg, 1, rows, gg, d.out_len, 1, 1.0, gxs);
                } else {
                    gemm(rows, d.cout_g, d.out_len, wg, 1, rows, gg, d.out_len, 1, 0.0, &mut cols);
                    col2im(&cols, &d, geom, gxs);
                }
            }
        }
    }
    let gbias = need_bias.then(|| {
        let mut gb = vec![0.0; d.cout];
        for b in 0..d.batch {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = (b * d.cout + o) * d.out_len;
                *acc += gd[start..start + d.out_len].iter().sum::<f64>();
            }
        }
        Tensor::from_vec(gb)
    });
    ConvGrads {
        x: gx,
        w: gw,
        bias: gbias,
    }
}
