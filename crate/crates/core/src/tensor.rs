//! Dense row-major `f64` arrays and the kernels the autodiff graph is built on.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dimension("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Numpy-style broadcast of two shapes (trailing alignment, unit extents stretch).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dimension(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let n = out_shape.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    // Innermost axis is walked in a tight loop; outer axes via an odometer.
    let inner = out_shape[n - 1];
    let (ia, ib) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut out = 0;
    loop {
        for t in 0..inner {
            f(out + t, base_a + t * ia, base_b + t * ib);
        }
        out += inner;
        if out == total {
            break;
        }
        let mut axis = n - 1;
        loop {
            axis -= 1;
            idx[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base_a -= sa[axis] * idx[axis];
            base_b -= sb[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(&a.shape, &b.shape, &shape, |o, i, j| {
        data[o] = f(a.data[i], b.data[j]);
    });
    Ok(Tensor { shape, data })
}

/// Sums `grad` (shaped like a broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    for_each_broadcast(shape, &[], &grad.shape, |o, i, _| {
        out.data[i] += grad.data[o];
    });
    out
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`; transposes are expressed via the flags.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Row-major a is m×k (or k×m when transposed).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the extents implied by the strides above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dimension("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out.data, false);
    Ok(out)
}

/// Geometry of a stride-1 "same" cross-correlation over NHWC input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub filters: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize]) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[3] != k[2] {
            return Err(Error::dimension("conv2d", x, k));
        }
        if k[0] == 0 || k[1] == 0 || k[3] == 0 {
            return Err(Error::dimension("conv2d", x, k));
        }
        Ok(ConvGeometry {
            batch: x[0],
            height: x[1],
            width: x[2],
            channels: x[3],
            kh: k[0],
            kw: k[1],
            filters: k[3],
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fills `cols` (pixels × patch_len) with zero-padded patches of one image.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (pt, pl) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let c = self.channels;
        let plen = self.patch_len();
        for y in 0..self.height {
            for x in 0..self.width {
                let row = &mut cols[(y * self.width + x) * plen..][..plen];
                for dy in 0..self.kh {
                    let sy = y as isize + dy as isize - pt as isize;
                    for dx in 0..self.kw {
                        let sx = x as isize + dx as isize - pl as isize;
                        let dst = &mut row[(dy * self.kw + dx) * c..][..c];
                        if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize
                        {
                            dst.fill(0.0);
                        } else {
                            let src = (sy as usize * self.width + sx as usize) * c;
                            dst.copy_from_slice(&image[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch gradients back into one image gradient.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (pt, pl) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let c = self.channels;
        let plen = self.patch_len();
        for y in 0..self.height {
            for x in 0..self.width {
                let row = &cols[(y * self.width + x) * plen..][..plen];
                for dy in 0..self.kh {
                    let sy = y as isize + dy as isize - pt as isize;
                    if sy < 0 || sy >= self.height as isize {
                        continue;
                    }
                    for dx in 0..self.kw {
                        let sx = x as isize + dx as isize - pl as isize;
                        if sx < 0 || sx >= self.width as isize {
                            continue;
                        }
                        let dst = (sy as usize * self.width + sx as usize) * c;
                        let src = &row[(dy * self.kw + dx) * c..][..c];
                        for (d, s) in image[dst..dst + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded, stride-1 cross-correlation preserving spatial size.
///
/// `x` is `[B, H, L, C]`, `k` is `[h, l, C, F]`, output is `[B, H, L, F]`.
pub fn conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let geo = ConvGeometry::new(&x.shape, &k.shape)?;
    let (plen, pix, f) = (geo.patch_len(), geo.pixels(), geo.filters);
    let mut out = Tensor::zeros(&[geo.batch, geo.height, geo.width, f]);
    let mut cols = vec![0.0; pix * plen];
    let image_len = pix * geo.channels;
    for b in 0..geo.batch {
        geo.im2col(&x.data[b * image_len..][..image_len], &mut cols);
        gemm(
            pix,
            plen,
            f,
            &cols,
            false,
            &k.data,
            false,
            &mut out.data[b * pix * f..][..pix * f],
            false,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    grad: &Tensor,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let geo = ConvGeometry::new(&x.shape, &k.shape).expect("validated in forward");
    let (plen, pix, f) = (geo.patch_len(), geo.pixels(), geo.filters);
    let image_len = pix * geo.channels;
    let mut gx = want_x.then(|| Tensor::zeros(&x.shape));
    let mut gk = want_k.then(|| Tensor::zeros(&k.shape));
    let mut cols = vec![0.0; pix * plen];
    for b in 0..geo.batch {
        let g = &grad.data[b * pix * f..][..pix * f];
        if let Some(gk) = gk.as_mut() {
            geo.im2col(&x.data[b * image_len..][..image_len], &mut cols);
            // dK += colsᵀ · g
            gemm(plen, pix, f, &cols, true, g, false, &mut gk.data, true);
        }
        if let Some(gx) = gx.as_mut() {
            // dcols = g · Kᵀ
            gemm(pix, f, plen, g, false, &k.data, true, &mut cols, false);
            geo.col2im(&cols, &mut gx.data[b * image_len..][..image_len]);
        }
    }
    (gx, gk)
}

/// 2×2 stride-2 max pooling over NHWC input; odd trailing rows/columns are dropped.
///
/// Returns the pooled tensor and, per output element, the flat input index that won.
pub(crate) fn max_pool_2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 4 || x.shape[1] < 2 || x.shape[2] < 2 {
        return Err(Error::dimension("max_pool_2x2", &x.shape, &[2, 2]));
    }
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let mut arg = vec![0usize; out.len()];
    let mut o = 0;
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if best == usize::MAX || x.data[i] > best_v {
                                best = i;
                                best_v = x.data[i];
                            }
                        }
                    }
                    out.data[o] = best_v;
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}
