//! Split-transform-merge evaluation of an SLBF convolution.
//!
//! The input is split into `k` channel groups of depth `s`. Every group is
//! convolved once with each of the `m` bank filters, giving `k * m`
//! single-channel intermediate maps that all `c_out` output filters share.
//! Output map `t` is then `sum_i value_t(i) * map(i, row_t(i))`.
//!
//! This equals a standard convolution with the materialized stacked filters:
//! with `X` the patch matrix of group `i`, `B` the bank as a `d^2 s x m` matrix
//! and `p` column `i` of a selector, `X^T (B p) = (X^T B) p`.
//!
//! The functions here take the bank as plain reals so that gradients can be
//! checked against finite differences; the layer passes `+-1` values.

use super::selector::SelectorMatrix;
use super::SlbfShape;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{col2im_item, gemm, im2col_item, Tensor4};

pub struct SlbfForward {
    pub output: Tensor4,
    /// Intermediate maps, `(n, k, m, h_out * w_out)` row-major.
    pub maps: Vec<f32>,
    /// Bank convolutions performed for the pass (each one applies a bank
    /// filter to one channel group across the whole batch).
    pub bank_convolutions: usize,
}

pub struct SlbfGrads {
    pub grad_x: Tensor4,
    /// Gradient for the bank values, `(m, s, d, d)`.
    pub grad_bank: Vec<f32>,
    /// Gradient for each realized selector entry, `(c_out, k)`.
    pub grad_selector: Vec<f32>,
}

fn check_inputs(
    x: &Tensor4,
    bank: &[f32],
    selectors: &[SelectorMatrix],
    shape: &SlbfShape,
) -> Result<(usize, usize)> {
    let g = &shape.geometry;
    if x.c() != shape.k() * shape.s {
        return Err(Error::dim(format!(
            "input has {} channels, layer expects k*s = {}",
            x.c(),
            shape.k() * shape.s
        )));
    }
    if bank.len() != shape.m * shape.filter_len() {
        return Err(Error::dim(format!(
            "bank has {} values, expected m*s*d*d = {}",
            bank.len(),
            shape.m * shape.filter_len()
        )));
    }
    if selectors.len() != g.out_channels {
        return Err(Error::dim(format!(
            "{} selectors for {} output filters",
            selectors.len(),
            g.out_channels
        )));
    }
    for sel in selectors {
        if sel.k() != shape.k() {
            return Err(Error::dim(format!(
                "selector of filter {} has {} columns, expected {}",
                sel.owner(),
                sel.k(),
                shape.k()
            )));
        }
        if sel.m() != shape.m || sel.rows().iter().any(|&r| r >= shape.m) {
            return Err(Error::CorruptSelector(format!(
                "selector of filter {} does not index a bank of {}",
                sel.owner(),
                shape.m
            )));
        }
    }
    g.output_hw(x.h(), x.w())
}

pub fn slbf_forward(
    x: &Tensor4,
    bank: &[f32],
    selectors: &[SelectorMatrix],
    shape: &SlbfShape,
) -> Result<SlbfForward> {
    let (h_out, w_out) = check_inputs(x, bank, selectors, shape)?;
    let g = &shape.geometry;
    let (k, m, s) = (shape.k(), shape.m, shape.s);
    let pixels = h_out * w_out;
    let rows = shape.filter_len();
    let (h, w) = (x.h(), x.w());
    let group_len = s * h * w;

    let mut maps = vec![0.0; x.n() * k * m * pixels];
    exec::for_each_item(&mut maps, k * m * pixels, |n, item_maps| {
        let src = x.item(n);
        let mut patches = vec![0.0; rows * pixels];
        for i in 0..k {
            im2col_item(
                &src[i * group_len..(i + 1) * group_len],
                s,
                h,
                w,
                g.kernel,
                g.stride,
                g.padding,
                h_out,
                w_out,
                &mut patches,
            );
            let dst = &mut item_maps[i * m * pixels..(i + 1) * m * pixels];
            gemm(m, rows, pixels, bank, false, &patches, false, 0.0, dst);
        }
    });

    let mut output = Tensor4::zeros([x.n(), g.out_channels, h_out, w_out]);
    exec::for_each_item(output.data_mut(), g.out_channels * pixels, |n, out| {
        let item_maps = &maps[n * k * m * pixels..(n + 1) * k * m * pixels];
        for (t, sel) in selectors.iter().enumerate() {
            let dst = &mut out[t * pixels..(t + 1) * pixels];
            for i in 0..k {
                let alpha = sel.value(i);
                let start = (i * m + sel.row(i)) * pixels;
                for (o, v) in dst.iter_mut().zip(&item_maps[start..start + pixels]) {
                    *o += alpha * v;
                }
            }
        }
    });

    Ok(SlbfForward {
        output,
        maps,
        bank_convolutions: m * k,
    })
}

/// Backward pass of [`slbf_forward`] given the maps it produced.
pub fn slbf_backward(
    grad_out: &Tensor4,
    x: &Tensor4,
    bank: &[f32],
    selectors: &[SelectorMatrix],
    shape: &SlbfShape,
    maps: &[f32],
) -> Result<SlbfGrads> {
    let (h_out, w_out) = check_inputs(x, bank, selectors, shape)?;
    let g = &shape.geometry;
    let (k, m, s, c_out) = (shape.k(), shape.m, shape.s, g.out_channels);
    let pixels = h_out * w_out;
    if grad_out.dims() != [x.n(), c_out, h_out, w_out] {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            grad_out.dims(),
            [x.n(), c_out, h_out, w_out]
        )));
    }
    if maps.len() != x.n() * k * m * pixels {
        return Err(Error::Usage("cached intermediate maps do not match the input".into()));
    }
    let rows = shape.filter_len();
    let (h, w) = (x.h(), x.w());
    let group_len = s * h * w;
    let bank_len = m * rows;

    let mut grad_x = Tensor4::zeros(x.dims());
    let acc = exec::map_reduce(
        x.n(),
        grad_x.data_mut(),
        x.item_len(),
        bank_len + c_out * k,
        |n, gx, acc| {
            let (acc_bank, acc_sel) = acc.split_at_mut(bank_len);
            let g_item = grad_out.item(n);
            let item_maps = &maps[n * k * m * pixels..(n + 1) * k * m * pixels];
            let src = x.item(n);
            let mut grad_maps = vec![0.0; m * pixels];
            let mut patches = vec![0.0; rows * pixels];
            for i in 0..k {
                grad_maps.fill(0.0);
                for (t, sel) in selectors.iter().enumerate() {
                    let g_t = &g_item[t * pixels..(t + 1) * pixels];
                    let j = sel.row(i);
                    let alpha = sel.value(i);
                    let map = &item_maps[(i * m + j) * pixels..(i * m + j + 1) * pixels];
                    acc_sel[t * k + i] += dot(g_t, map);
                    for (gm, gv) in grad_maps[j * pixels..(j + 1) * pixels].iter_mut().zip(g_t) {
                        *gm += alpha * gv;
                    }
                }
                im2col_item(
                    &src[i * group_len..(i + 1) * group_len],
                    s,
                    h,
                    w,
                    g.kernel,
                    g.stride,
                    g.padding,
                    h_out,
                    w_out,
                    &mut patches,
                );
                // dBank += dMaps * patches^T
                gemm(m, pixels, rows, &grad_maps, false, &patches, true, 1.0, acc_bank);
                // dPatches = Bank^T * dMaps
                gemm(rows, m, pixels, bank, true, &grad_maps, false, 0.0, &mut patches);
                col2im_item(
                    &patches,
                    s,
                    h,
                    w,
                    g.kernel,
                    g.stride,
                    g.padding,
                    h_out,
                    w_out,
                    &mut gx[i * group_len..(i + 1) * group_len],
                );
            }
        },
    );
    let (grad_bank, grad_selector) = acc.split_at(bank_len);
    Ok(SlbfGrads {
        grad_x,
        grad_bank: grad_bank.to_vec(),
        grad_selector: grad_selector.to_vec(),
    })
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Straight-through gradient for the filter proxies with clipping:
/// `dL/dR = dL/dB` where `|R| <= 1`, exactly zero elsewhere.
pub fn ste_bank_grad(grad_bank: &[f32], proxies: &[f32]) -> Vec<f32> {
    assert_eq!(grad_bank.len(), proxies.len());
    grad_bank
        .iter()
        .zip(proxies)
        .map(|(&g, &r)| if r.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}

/// Straight-through gradient for the selector proxies: each realized entry
/// `(t, row_t(i), i)` receives `dL/dP` for it, every other entry zero.
/// Output layout is `(c_out, m, k)`.
pub fn ste_selector_grad(grad_selector: &[f32], selectors: &[SelectorMatrix], m: usize) -> Vec<f32> {
    let k = selectors.first().map_or(0, |s| s.k());
    assert_eq!(grad_selector.len(), selectors.len() * k);
    let mut out = vec![0.0; selectors.len() * m * k];
    for (t, sel) in selectors.iter().enumerate() {
        for i in 0..k {
            out[(t * m + sel.row(i)) * k + i] = grad_selector[t * k + i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slbf::{BinaryFilterBank, SelectorMatrix};
    use crate::tensor::ConvGeometry;

    #[test]
    fn scalar_instance() {
        // d = s = k = 1, bank = [+1, -1], selector picks the second filter with alpha 2
        let shape = SlbfShape::new(ConvGeometry::new(1, 1, 1), 1, 2).unwrap();
        let x = Tensor4::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let sel = SelectorMatrix::new(0, 2, vec![1], vec![2.0]).unwrap();
        let out = slbf_forward(&x, &[1.0, -1.0], &[sel], &shape).unwrap();
        assert_eq!(out.output.data(), &[-6.0]);
        assert_eq!(out.bank_convolutions, 2);
    }

    #[test]
    fn identical_selectors_identical_maps() {
        let shape = SlbfShape::new(ConvGeometry::new(4, 5, 3).with_padding(1), 2, 3).unwrap();
        let bank = BinaryFilterBank::from_values(
            3,
            2,
            3,
            &(0..54).map(|i| ((i * 7) % 5) as f32 - 2.0).collect::<Vec<_>>(),
        )
        .unwrap()
        .to_values();
        let x = Tensor4::from_fn([2, 4, 5, 5], |[a, b, c, d]| ((a + 3 * b + 5 * c + 7 * d) % 11) as f32 - 5.0);
        let sels: Vec<_> = (0..5)
            .map(|t| SelectorMatrix::new(t, 3, vec![2, 0], vec![0.5, -1.5]).unwrap())
            .collect();
        let out = slbf_forward(&x, &bank, &sels, &shape).unwrap().output;
        let plane = 25;
        for n in 0..2 {
            let item = out.item(n);
            for t in 1..5 {
                assert_eq!(&item[t * plane..(t + 1) * plane], &item[..plane]);
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let shape = SlbfShape::new(ConvGeometry::new(4, 1, 1), 2, 1).unwrap();
        let sel = SelectorMatrix::new(0, 1, vec![0, 0], vec![1.0, 1.0]).unwrap();
        let x = Tensor4::zeros([1, 3, 2, 2]);
        assert!(matches!(
            slbf_forward(&x, &[1.0, 1.0], &[sel], &shape),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clipping_mask() {
        assert_eq!(ste_bank_grad(&[5.0], &[0.5]), vec![5.0]);
        assert_eq!(ste_bank_grad(&[5.0], &[1.5]), vec![0.0]);
        assert_eq!(ste_bank_grad(&[5.0, 5.0], &[1.0, -1.0]), vec![5.0, 5.0]);
    }

    #[test]
    fn selector_grad_lands_on_realized_entries() {
        let sels = vec![
            SelectorMatrix::new(0, 3, vec![2, 0], vec![1.0, 1.0]).unwrap(),
            SelectorMatrix::new(1, 3, vec![1, 1], vec![1.0, 1.0]).unwrap(),
        ];
        let g = ste_selector_grad(&[1.0, 2.0, 3.0, 4.0], &sels, 3);
        // layout (t, j, i) with m = 3, k = 2
        let mut want = vec![0.0; 12];
        want[2 * 2] = 1.0;
        want[1] = 2.0;
        want[6 + 2] = 3.0;
        want[6 + 2 + 1] = 4.0;
        assert_eq!(g, want);
    }
}
