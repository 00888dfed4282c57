//! Forward and backward kernels behind the graph ops.
//!
//! Convolution goes through im2col and a gemm per image; everything else is
//! plain loops. Parallel sections use fixed-size image chunks with an ordered
//! reduction so results are bitwise reproducible regardless of scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor, COSINE_EPS};

/// Images per parallel work unit. Fixed so that reduction order (and thus
/// floating-point rounding) never depends on the thread count.
const IMAGE_CHUNK: usize = 8;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.rank() != 4 {
        return Err(Error::dim("conv2d", format!("input rank {} != 4", x.rank())));
    }
    if w.rank() != 4 || w.shape()[2] != w.shape()[3] {
        return Err(Error::dim("conv2d", "weight must be (out, in, k, k)"));
    }
    let (batch, in_ch, in_h, in_w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_ch, w_in, kernel) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if w_in != in_ch {
        return Err(Error::dim(
            "conv2d",
            format!("input channels {} != weight channels {}", in_ch, w_in),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
        return Err(Error::dim("conv2d", "kernel larger than padded input"));
    }
    Ok(ConvDims {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        kernel,
        stride,
        pad,
        out_h: (in_h + 2 * pad - kernel) / stride + 1,
        out_w: (in_w + 2 * pad - kernel) / stride + 1,
    })
}

/// Lowers one image (in_ch, H, W) into a (in_ch*k*k, out_h*out_w) matrix.
fn im2col<T: Scalar>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let k = d.kernel;
    let out_area = d.out_h * d.out_w;
    for c in 0..d.in_ch {
        let plane = &img[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * out_area;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let base = row + oy * d.out_w;
                    if iy < 0 || iy >= d.in_h as isize {
                        cols[base..base + d.out_w].fill(T::zero());
                        continue;
                    }
                    let irow = &plane[iy as usize * d.in_w..(iy as usize + 1) * d.in_w];
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        cols[base + ox] = if ix < 0 || ix >= d.in_w as isize {
                            T::zero()
                        } else {
                            irow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one image; inverse map of im2col.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, img: &mut [T]) {
    let k = d.kernel;
    let out_area = d.out_h * d.out_w;
    for c in 0..d.in_ch {
        let plane = &mut img[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * out_area;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.in_h as isize {
                        continue;
                    }
                    let base = row + oy * d.out_w;
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.in_w as isize {
                            plane[iy as usize * d.in_w + ix as usize] += cols[base + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, stride, pad)?;
    if let Some(bias) = b {
        if bias.len() != d.out_ch {
            return Err(Error::dim("conv2d", "bias length != out channels"));
        }
    }
    let col_rows = d.in_ch * d.kernel * d.kernel;
    let out_area = d.out_h * d.out_w;
    let img_len = d.in_ch * d.in_h * d.in_w;
    let out_len = d.out_ch * out_area;
    let mut out = vec![T::zero(); d.batch * out_len];

    out.par_chunks_mut(out_len * IMAGE_CHUNK)
        .zip(x.data().par_chunks(img_len * IMAGE_CHUNK))
        .for_each(|(out_chunk, in_chunk)| {
            let mut cols = vec![T::zero(); col_rows * out_area];
            for (out_img, in_img) in out_chunk
                .chunks_mut(out_len)
                .zip(in_chunk.chunks(img_len))
            {
                im2col(in_img, &d, &mut cols);
                T::gemm(
                    d.out_ch,
                    col_rows,
                    out_area,
                    T::one(),
                    w.data(),
                    col_rows as isize,
                    1,
                    &cols,
                    out_area as isize,
                    1,
                    T::zero(),
                    out_img,
                    out_area as isize,
                    1,
                );
                if let Some(bias) = b {
                    for (c, &bc) in bias.data().iter().enumerate() {
                        for v in &mut out_img[c * out_area..(c + 1) * out_area] {
                            *v += bc;
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(
        vec![d.batch, d.out_ch, d.out_h, d.out_w],
        out,
    ))
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, w, stride, pad)?;
    let col_rows = d.in_ch * d.kernel * d.kernel;
    let out_area = d.out_h * d.out_w;
    let img_len = d.in_ch * d.in_h * d.in_w;
    let out_len = d.out_ch * out_area;

    let mut dx = vec![T::zero(); x.len()];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(img_len * IMAGE_CHUNK)
        .zip(x.data().par_chunks(img_len * IMAGE_CHUNK))
        .zip(dy.data().par_chunks(out_len * IMAGE_CHUNK))
        .map(|((dx_chunk, x_chunk), dy_chunk)| {
            let mut cols = vec![T::zero(); col_rows * out_area];
            let mut dcols = vec![T::zero(); col_rows * out_area];
            let mut dw_part = vec![T::zero(); w.len()];
            let mut db_part = vec![T::zero(); d.out_ch];
            for ((dx_img, x_img), dy_img) in dx_chunk
                .chunks_mut(img_len)
                .zip(x_chunk.chunks(img_len))
                .zip(dy_chunk.chunks(out_len))
            {
                im2col(x_img, &d, &mut cols);
                // dw += dy (out_ch, area) x cols^T (area, col_rows)
                T::gemm(
                    d.out_ch,
                    out_area,
                    col_rows,
                    T::one(),
                    dy_img,
                    out_area as isize,
                    1,
                    &cols,
                    1,
                    out_area as isize,
                    T::one(),
                    &mut dw_part,
                    col_rows as isize,
                    1,
                );
                // dcols = w^T (col_rows, out_ch) x dy (out_ch, area)
                T::gemm(
                    col_rows,
                    d.out_ch,
                    out_area,
                    T::one(),
                    w.data(),
                    1,
                    col_rows as isize,
                    dy_img,
                    out_area as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    out_area as isize,
                    1,
                );
                col2im(&dcols, &d, dx_img);
                if has_bias {
                    for c in 0..d.out_ch {
                        for &g in &dy_img[c * out_area..(c + 1) * out_area] {
                            db_part[c] += g;
                        }
                    }
                }
            }
            (dw_part, db_part)
        })
        .collect();

    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); d.out_ch];
    for (dw_part, db_part) in partials {
        for (acc, v) in dw.iter_mut().zip(dw_part) {
            *acc += v;
        }
        for (acc, v) in db.iter_mut().zip(db_part) {
            *acc += v;
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db: has_bias.then(|| Tensor::from_parts(vec![d.out_ch], db)),
    })
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel layout of a BN input: (batch, channels, spatial), where rank-2
/// inputs are treated as spatial size 1.
fn bn_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.rank() {
        2 => Ok((x.shape()[0], x.shape()[1], 1)),
        4 => Ok((x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3])),
        r => Err(Error::dim("batch_norm", format!("rank {} unsupported", r))),
    }
}

pub struct BnForward<T> {
    pub y: Tensor<T>,
    /// Normalized input, saved for the backward pass.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Updated running statistics (training mode only).
    pub new_running: Option<(Tensor<T>, Tensor<T>)>,
    pub training: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<BnForward<T>> {
    let (n, c, s) = bn_layout(x)?;
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running_mean"),
        (running_var, "running_var"),
    ] {
        if t.len() != c {
            return Err(Error::dim(
                "batch_norm",
                format!("{what} length {} != channels {}", t.len(), c),
            ));
        }
    }
    let eps = T::from_f64(eps);
    let m = T::from_f64((n * s) as f64);

    let (mean, var) = if training {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for &v in &x.data()[base..base + s] {
                    mean[ch] += v;
                }
            }
        }
        for v in &mut mean {
            *v = *v / m;
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for &v in &x.data()[base..base + s] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / m;
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for j in base..base + s {
                let h = (x.data()[j] - mu) * is;
                xhat[j] = h;
                y[j] = g * h + b;
            }
        }
    }

    let new_running = training.then(|| {
        let mom = T::from_f64(momentum);
        let one_m = T::one() - mom;
        let nm: Vec<T> = running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| mom * r + one_m * b)
            .collect();
        let nv: Vec<T> = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&r, &b)| mom * r + one_m * b)
            .collect();
        (
            Tensor::from_parts(vec![c], nm),
            Tensor::from_parts(vec![c], nv),
        )
    });

    Ok(BnForward {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
        new_running,
        training,
    })
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    training: bool,
    dy: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let (n, c, s) = bn_layout(xhat)?;
    let m = T::from_f64((n * s) as f64);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                dgamma[ch] += dy.data()[j] * xhat.data()[j];
                dbeta[ch] += dy.data()[j];
            }
        }
    }

    let mut dx = vec![T::zero(); xhat.len()];
    if training {
        // dx = gamma*inv_std/m * (m*dy - xhat*sum(dy*xhat) - sum(dy))
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let scale = gamma.data()[ch] * inv_std[ch] / m;
                for j in base..base + s {
                    dx[j] = scale
                        * (m * dy.data()[j] - xhat.data()[j] * dgamma[ch] - dbeta[ch]);
                }
            }
        }
    } else {
        // Running statistics are constants in eval mode.
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let scale = gamma.data()[ch] * inv_std[ch];
                for j in base..base + s {
                    dx[j] = scale * dy.data()[j];
                }
            }
        }
    }

    Ok(BnGrads {
        dx: Tensor::from_parts(xhat.shape().to_vec(), dx),
        dgamma: Tensor::from_parts(vec![c], dgamma),
        dbeta: Tensor::from_parts(vec![c], dbeta),
    })
}

// ---------------------------------------------------------------------------
// relu / pooling / linear
// ---------------------------------------------------------------------------

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if x.rank() != 4 {
        return Err(Error::dim("max_pool2d", "input must be rank-4"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(Error::dim("max_pool2d", "kernel/stride incompatible with input"));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let obase = (i * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn max_pool2d_backward<T: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let out_area = dy.shape()[2] * dy.shape()[3];
    let mut dx = vec![T::zero(); n * c * h * w];
    for i in 0..n {
        for ch in 0..c {
            let pbase = (i * c + ch) * h * w;
            let obase = (i * c + ch) * out_area;
            for o in 0..out_area {
                dx[pbase + argmax[obase + o] as usize] += dy.data()[obase + o];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("global_avg_pool", "input must be rank-4"));
    }
    let (n, c, area) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let inv = T::from_f64(1.0 / area as f64);
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            let mut acc = T::zero();
            for &v in &x.data()[base..base + area] {
                acc += v;
            }
            out[i * c + ch] = acc * inv;
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, area) = (x_shape[0], x_shape[1], x_shape[2] * x_shape[3]);
    let inv = T::from_f64(1.0 / area as f64);
    let mut dx = vec![T::zero(); n * c * area];
    for i in 0..n {
        for ch in 0..c {
            let g = dy.data()[i * c + ch] * inv;
            dx[(i * c + ch) * area..(i * c + ch + 1) * area].fill(g);
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// y (N, out) = x (N, in) * w(out, in)^T + b
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::dim("linear", "input and weight must be rank-2"));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::dim(
            "linear",
            format!("input width {} != weight width {}", x.shape()[1], w.shape()[1]),
        ));
    }
    let mut y = crate::nn::tensor::matmul(x, false, w, true)?;
    if let Some(bias) = b {
        if bias.len() != w.shape()[0] {
            return Err(Error::dim("linear", "bias length != output width"));
        }
        let out = w.shape()[0];
        for r in 0..x.shape()[0] {
            for (j, &bv) in bias.data().iter().enumerate() {
                y.data_mut()[r * out + j] += bv;
            }
        }
    }
    Ok(y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let dx = crate::nn::tensor::matmul(dy, false, w, false)?;
    let dw = crate::nn::tensor::matmul(dy, true, x, false)?;
    let db = if has_bias {
        let out = w.shape()[0];
        let mut acc = vec![T::zero(); out];
        for r in 0..dy.shape()[0] {
            for j in 0..out {
                acc[j] += dy.data()[r * out + j];
            }
        }
        Some(Tensor::from_parts(vec![out], acc))
    } else {
        None
    };
    Ok(LinearGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// row-wise cosine
// ---------------------------------------------------------------------------

pub struct CosineRowsForward<T> {
    pub cos: Tensor<T>,
    pub norm_a: Vec<T>,
    pub norm_b: Vec<T>,
}

/// Row-wise epsilon-guarded cosine of two (R, D) matrices.
pub fn cosine_rows_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<CosineRowsForward<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(
            "cosine_rows",
            format!("shapes {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (rows, dim) = (a.shape()[0], a.shape()[1]);
    let eps = T::from_f64(COSINE_EPS);
    let mut cos = vec![T::zero(); rows];
    let mut norm_a = vec![T::zero(); rows];
    let mut norm_b = vec![T::zero(); rows];
    for r in 0..rows {
        let ra = &a.data()[r * dim..(r + 1) * dim];
        let rb = &b.data()[r * dim..(r + 1) * dim];
        let mut dot = T::zero();
        let mut na = T::zero();
        let mut nb = T::zero();
        for (&x, &y) in ra.iter().zip(rb) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let na = na.sqrt();
        let nb = nb.sqrt();
        cos[r] = dot / (na.max(eps) * nb.max(eps));
        norm_a[r] = na;
        norm_b[r] = nb;
    }
    Ok(CosineRowsForward {
        cos: Tensor::from_parts(vec![rows], cos),
        norm_a,
        norm_b,
    })
}

/// Gradient of guarded cosine with respect to one side (`a`), given both
/// inputs, the saved norms, the cosine values, and the upstream gradient.
/// Where a row norm falls under the epsilon guard its direction term drops
/// out, matching the piecewise definition of the forward pass.
pub fn cosine_rows_backward_side<T: Scalar>(
    this: &Tensor<T>,
    other: &Tensor<T>,
    norm_this: &[T],
    norm_other: &[T],
    cos: &Tensor<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (rows, dim) = (this.shape()[0], this.shape()[1]);
    let eps = T::from_f64(COSINE_EPS);
    let mut dx = vec![T::zero(); this.len()];
    for r in 0..rows {
        let g = dy.data()[r];
        if g == T::zero() {
            continue;
        }
        let na = norm_this[r].max(eps);
        let nb = norm_other[r].max(eps);
        let inv = T::one() / (na * nb);
        let guard_active = norm_this[r] > eps;
        let c = cos.data()[r];
        for j in 0..dim {
            let mut grad = other.data()[r * dim + j] * inv;
            if guard_active {
                grad = grad - c * this.data()[r * dim + j] / (na * na);
            }
            dx[r * dim + j] = g * grad;
        }
    }
    Tensor::from_parts(this.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// small helpers used by losses
// ---------------------------------------------------------------------------

pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim("gather_rows", "input must be rank-2"));
    }
    let (rows, dim) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= rows {
            return Err(Error::dim(
                "gather_rows",
                format!("index {} out of range for {} rows", i, rows),
            ));
        }
        out.extend_from_slice(&x.data()[i * dim..(i + 1) * dim]);
    }
    Ok(Tensor::from_parts(vec![indices.len(), dim], out))
}

pub fn scatter_add_rows<T: Scalar>(
    x_shape: &[usize],
    indices: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let dim = x_shape[1];
    let mut dx = vec![T::zero(); x_shape[0] * dim];
    for (r, &i) in indices.iter().enumerate() {
        for j in 0..dim {
            dx[i * dim + j] += dy.data()[r * dim + j];
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// (N, C, H, W) -> (N*H*W, C): one row per spatial cell, row-major grid order
/// within each image.
pub fn map_to_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim("map_to_rows", "input must be rank-4"));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let area = h * w;
    let mut out = vec![T::zero(); n * area * c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for s in 0..area {
                out[(i * area + s) * c + ch] = x.data()[base + s];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n * area, c], out))
}

pub fn map_to_rows_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let area = h * w;
    let mut dx = vec![T::zero(); n * c * area];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * area;
            for s in 0..area {
                dx[base + s] = dy.data()[(i * area + s) * c + ch];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::rng_from(&[seed]);
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    #[test]
    fn identity_1x1_conv_preserves_input() {
        // 1x1 conv whose weight matrix is the identity over channels.
        let x = rand_tensor(&[2, 3, 4, 4], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_matches_direct_convolution_oracle() {
        let x = rand_tensor(&[1, 2, 5, 5], 2);
        let w = rand_tensor(&[3, 2, 3, 3], 3);
        let b = rand_tensor(&[3], 4);
        let y = conv2d_forward(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        // direct nested-loop evaluation
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                    acc += x.data()[(ic * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    assert_relative_eq!(
                        y.data()[(oc * 3 + oy) * 3 + ox],
                        acc,
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn gap_matches_mean() {
        let x = rand_tensor(&[2, 3, 4, 4], 5);
        let y = global_avg_pool_forward(&x).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let base = (i * 3 + c) * 16;
                let mean: f64 = x.data()[base..base + 16].iter().sum::<f64>() / 16.0;
                assert_relative_eq!(y.data()[i * 3 + c], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_zero_weight_gives_bias_rows() {
        let x = rand_tensor(&[4, 3], 6);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.5, -0.25]);
        }
    }

    #[test]
    fn map_to_rows_round_trips() {
        let x = rand_tensor(&[2, 3, 2, 2], 7);
        let rows = map_to_rows(&x).unwrap();
        assert_eq!(rows.shape(), &[8, 3]);
        // cell (0,1) of image 0 is row 1; its channel vector matches
        for c in 0..3 {
            assert_eq!(rows.data()[c + 3], x.data()[c * 4 + 1]);
        }
        let back = map_to_rows_backward(x.shape(), &rows);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let x = Tensor::new(
            vec![1, 1, 2, 2],
            vec![1.0f64, 5.0, 3.0, 2.0],
        )
        .unwrap();
        let (y, argmax) = max_pool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let dy = Tensor::new(vec![1, 1, 1, 1], vec![2.0f64]).unwrap();
        let dx = max_pool2d_backward(x.shape(), &argmax, &dy);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
