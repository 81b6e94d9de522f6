use super::bank::BinaryFilterBank;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Sparse `m x k` selector of one output filter: column `i` has exactly one
/// nonzero, at row `rows[i]`, with value `values[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMatrix {
    owner: usize,
    m: usize,
    rows: Vec<usize>,
    values: Vec<f32>,
}

impl SelectorMatrix {
    pub fn new(owner: usize, m: usize, rows: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if rows.len() != values.len() || rows.is_empty() {
            return Err(Error::CorruptSelector(format!(
                "filter {owner}: {} row indices for {} values",
                rows.len(),
                values.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::CorruptSelector(format!(
                "filter {owner}: row index {bad} outside bank of {m}"
            )));
        }
        Ok(Self {
            owner,
            m,
            rows,
            values,
        })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn k(&self) -> usize {
        self.rows.len()
    }
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    #[inline]
    pub fn row(&self, i: usize) -> usize {
        self.rows[i]
    }
    #[inline]
    pub fn value(&self, i: usize) -> f32 {
        self.values[i]
    }

    /// Dense row-major `m x k` matrix.
    pub fn to_dense(&self) -> Vec<f32> {
        let k = self.k();
        let mut p = vec![0.0; self.m * k];
        for (i, (&r, &v)) in self.rows.iter().zip(&self.values).enumerate() {
            p[r * k + i] = v;
        }
        p
    }
}

/// Projects a dense proxy `q` (row-major `m x k`) onto a selector: column `i`
/// keeps the row with the largest `|q|`, lowest index on ties. The kept value
/// is `q` itself when `scaling` is on and exactly `1.0` otherwise.
pub fn project_selector(q: &[f32], m: usize, k: usize, owner: usize, scaling: bool) -> SelectorMatrix {
    assert!(m >= 1 && k >= 1 && q.len() == m * k, "proxy is not {m}x{k}");
    let mut rows = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for i in 0..k {
        let mut best = 0;
        let mut best_abs = q[i].abs();
        for j in 1..m {
            let a = q[j * k + i].abs();
            if a > best_abs {
                best = j;
                best_abs = a;
            }
        }
        rows.push(best);
        values.push(if scaling { q[best * k + i] } else { 1.0 });
    }
    SelectorMatrix {
        owner,
        m,
        rows,
        values,
    }
}

/// The full `c_in x d x d` filter of one output channel: block `i` (channels
/// `i*s .. (i+1)*s`) is `value(i) * B[row(i)]`.
pub fn stacked_filter(bank: &BinaryFilterBank, sel: &SelectorMatrix) -> Result<Vec<f32>> {
    if sel.m() != bank.m() {
        return Err(Error::CorruptSelector(format!(
            "selector for {} bank filters used with a bank of {}",
            sel.m(),
            bank.m()
        )));
    }
    if let Some(&bad) = sel.rows().iter().find(|&&r| r >= bank.m()) {
        return Err(Error::CorruptSelector(format!(
            "row index {bad} outside bank of {}",
            bank.m()
        )));
    }
    let len = bank.filter_len();
    let mut out = Vec::with_capacity(sel.k() * len);
    for i in 0..sel.k() {
        let alpha = sel.value(i);
        out.extend(bank.filter(sel.row(i)).into_iter().map(|b| alpha * b));
    }
    Ok(out)
}

/// Materializes the standard `c_out x c_in x d x d` weight tensor.
pub fn materialize_weights(bank: &BinaryFilterBank, selectors: &[SelectorMatrix]) -> Result<Tensor4> {
    if selectors.is_empty() {
        return Err(Error::dim("no selectors"));
    }
    let k = selectors[0].k();
    let mut data = Vec::with_capacity(selectors.len() * k * bank.filter_len());
    for sel in selectors {
        if sel.k() != k {
            return Err(Error::dim("selectors disagree on k"));
        }
        data.extend(stacked_filter(bank, sel)?);
    }
    Tensor4::new([selectors.len(), k * bank.s(), bank.d(), bank.d()], data)
}
