//! Dense rank-4 tensors and the reference convolution.
//!
//! Layout is row-major `(n, c, h, w)`. Convolution weights are stored as
//! `(c_out, c_in, d, d)`.
//!
//! Patch vectorization order for [`im2col`] is `(channel, kernel_row,
//! kernel_col)`: row `c * d * d + ky * d + kx` of a patch matrix holds input
//! channel `c` sampled at kernel offset `(ky, kx)`. A weight tensor's
//! `(c_in, d, d)` block flattens in exactly the same order, so a row of the
//! weight matrix times a patch column is one output pixel.
//!
//! Padding is zero padding, applied symmetrically on every side.

use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::dim(format!("tensor dims must be >= 1, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::dim(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        assert!(!dims.contains(&0), "tensor dims must be >= 1, got {dims:?}");
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut idx = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[idx] = f([a, b, y, x]);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
    }

    /// Number of values in one batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        let [_, cc, h, w] = self.dims;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Same data, new dims with the same element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Copies channels `[start, start + count)` of every item.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor4> {
        let [n, c, h, w] = self.dims;
        if count == 0 || start + count > c {
            return Err(Error::dim(format!(
                "channel range {start}..{} out of bounds for {c} channels",
                start + count
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Tensor4::new([n, count, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Rows of a patch matrix: `d * d * c_in`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::dim(format!("degenerate conv geometry {self:?}")));
        }
        Ok(())
    }

    /// `(h_out, w_out)` for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::dim(format!(
                    "kernel {} larger than padded input {padded}",
                    self.kernel
                )));
            }
            let span = padded - self.kernel;
            if span % self.stride != 0 {
                return Err(Error::dim(format!(
                    "stride {} does not tile padded input {padded} with kernel {}",
                    self.stride, self.kernel
                )));
            }
            Ok(span / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }

    fn check_input(&self, x: &Tensor4) -> Result<(usize, usize)> {
        if x.c() != self.in_channels {
            return Err(Error::dim(format!(
                "input has {} channels, geometry expects {}",
                x.c(),
                self.in_channels
            )));
        }
        self.output_hw(x.h(), x.w())
    }

    fn check_weights(&self, w: &Tensor4) -> Result<()> {
        if w.dims() != self.weight_dims() {
            return Err(Error::dim(format!(
                "weights {:?} do not match geometry {:?}",
                w.dims(),
                self.weight_dims()
            )));
        }
        Ok(())
    }
}

/// Patch matrices for a whole batch, `batch` blocks of `rows x cols` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PatchMatrix {
    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.rows * self.cols;
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn get(&self, item: usize, row: usize, col: usize) -> f32 {
        self.data[(item * self.rows + row) * self.cols + col]
    }
}

/// Low-level im2col for one item stored as `(channels, h, w)`.
/// `dst` must hold `channels * kernel^2 * h_out * w_out` values.
#[allow(clippy::too_many_arguments)]
pub fn im2col_item(
    src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    dst: &mut [f32],
) {
    let cols = h_out * w_out;
    debug_assert_eq!(dst.len(), channels * kernel * kernel * cols);
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let out_row = &mut dst[row * cols..(row + 1) * cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut out_row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_item`]: scatters-adds patch gradients into `dst`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_item(
    cols_src: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
    dst: &mut [f32],
) {
    let cols = h_out * w_out;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let src_row = &cols_src[row * cols..(row + 1) * cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src_row[oy * w_out..(oy + 1) * w_out];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_line[ix as usize] += *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn im2col(x: &Tensor4, g: &ConvGeometry) -> Result<PatchMatrix> {
    let (h_out, w_out) = g.check_input(x)?;
    let rows = g.patch_len();
    let cols = h_out * w_out;
    let mut data = vec![0.0; x.n() * rows * cols];
    let (c, h, w) = (x.c(), x.h(), x.w());
    exec::for_each_item(&mut data, rows * cols, |i, dst| {
        im2col_item(x.item(i), c, h, w, g.kernel, g.stride, g.padding, h_out, w_out, dst)
    });
    Ok(PatchMatrix {
        batch: x.n(),
        rows,
        cols,
        data,
    })
}

/// `c = a * b + beta * c` with `a` (`m x k`) and `b` (`k x n`) given as row-major
/// buffers, optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the element counts asserted above and the
    // strides address only those elements.
    unsafe {
        matrixmultiply::sgemm(
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

/// Standard convolution, `out[t] = sum over patches of W_t * patch`.
pub fn conv_forward(x: &Tensor4, w: &Tensor4, g: &ConvGeometry) -> Result<Tensor4> {
    let (h_out, w_out) = g.check_input(x)?;
    g.check_weights(w)?;
    let rows = g.patch_len();
    let cols = h_out * w_out;
    let (c, h, wd) = (x.c(), x.h(), x.w());
    let mut out = Tensor4::zeros([x.n(), g.out_channels, h_out, w_out]);
    exec::for_each_item(out.data_mut(), g.out_channels * cols, |i, dst| {
        let mut patches = vec![0.0; rows * cols];
        im2col_item(x.item(i), c, h, wd, g.kernel, g.stride, g.padding, h_out, w_out, &mut patches);
        gemm(g.out_channels, rows, cols, w.data(), false, &patches, false, 0.0, dst);
    });
    Ok(out)
}

/// Gradients of a scalar loss with respect to the input and the weights, given
/// the upstream gradient of [`conv_forward`]'s output.
pub fn conv_backward(
    grad_out: &Tensor4,
    x: &Tensor4,
    w: &Tensor4,
    g: &ConvGeometry,
) -> Result<(Tensor4, Tensor4)> {
    let (h_out, w_out) = g.check_input(x)?;
    g.check_weights(w)?;
    if grad_out.dims() != [x.n(), g.out_channels, h_out, w_out] {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            grad_out.dims(),
            [x.n(), g.out_channels, h_out, w_out]
        )));
    }
    let rows = g.patch_len();
    let cols = h_out * w_out;
    let (c, h, wd) = (x.c(), x.h(), x.w());
    let mut grad_x = Tensor4::zeros(x.dims());
    let item_len = x.item_len();
    let grad_w = exec::map_reduce(
        x.n(),
        grad_x.data_mut(),
        item_len,
        w.data().len(),
        |i, gx, acc| {
            let g_item = grad_out.item(i);
            let mut patches = vec![0.0; rows * cols];
            im2col_item(x.item(i), c, h, wd, g.kernel, g.stride, g.padding, h_out, w_out, &mut patches);
            // dW += G * patches^T
            gemm(g.out_channels, cols, rows, g_item, false, &patches, true, 1.0, acc);
            // dPatches = W^T * G
            gemm(rows, g.out_channels, cols, w.data(), true, g_item, false, 0.0, &mut patches);
            col2im_item(&patches, c, h, wd, g.kernel, g.stride, g.padding, h_out, w_out, gx);
        },
    );
    Ok((grad_x, Tensor4::new(w.dims(), grad_w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor4::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn output_geometry() {
        let g = ConvGeometry::new(1, 6, 5).with_padding(2);
        assert_eq!(g.output_hw(28, 28).unwrap(), (28, 28));
        let g = ConvGeometry::new(1, 1, 3).with_stride(2);
        assert!(g.output_hw(6, 6).is_err());
        assert_eq!(g.output_hw(7, 7).unwrap(), (3, 3));
        assert!(ConvGeometry::new(1, 1, 5).output_hw(3, 3).is_err());
    }

    #[test]
    fn im2col_one_by_one_kernel_is_pixels() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = im2col(&x, &ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!((p.rows, p.cols), (1, 4));
        assert_eq!(p.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_zero_input() {
        let x = Tensor4::zeros([1, 1, 3, 3]);
        let p = im2col(&x, &ConvGeometry::new(1, 1, 3)).unwrap();
        assert_eq!((p.rows, p.cols), (9, 1));
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn im2col_channel_mismatch() {
        let x = Tensor4::zeros([1, 2, 3, 3]);
        assert!(matches!(
            im2col(&x, &ConvGeometry::new(3, 1, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor4::from_fn([2, 1, 3, 4], |[n, _, y, x]| (n * 12 + y * 4 + x) as f32 - 5.0);
        let w = Tensor4::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv_forward(&x, &w, &ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_to_nine() {
        let x = Tensor4::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor4::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv_forward(&x, &w, &ConvGeometry::new(1, 1, 3)).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_weight_mismatch() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let w = Tensor4::zeros([3, 1, 3, 3]);
        assert!(conv_forward(&x, &w, &ConvGeometry::new(2, 3, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let g = ConvGeometry::new(2, 3, 3).with_padding(1);
        let x = Tensor4::from_fn([2, 2, 4, 4], |[a, b, c, d]| (a + 2 * b + 3 * c + d) as f32 * 0.1);
        let w = Tensor4::from_fn(g.weight_dims(), |[a, b, c, d]| (a * b + c) as f32 - d as f32);
        let (gx, gw) = conv_backward(&Tensor4::zeros([2, 3, 4, 4]), &x, &w, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let g = ConvGeometry::new(1, 1, 1);
        let x = Tensor4::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor4::new([1, 1, 1, 1], vec![-2.0]).unwrap();
        let up = Tensor4::new([1, 1, 1, 1], vec![0.5]).unwrap();
        let (gx, gw) = conv_backward(&up, &x, &w, &g).unwrap();
        assert_eq!(gw.data(), &[0.5 * 3.0]);
        assert_eq!(gx.data(), &[0.5 * -2.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let g = ConvGeometry::new(1, 2, 3);
        let x = Tensor4::zeros([1, 1, 5, 5]);
        let w = Tensor4::zeros(g.weight_dims());
        assert!(conv_backward(&Tensor4::zeros([1, 2, 5, 5]), &x, &w, &g).is_err());
    }
}
