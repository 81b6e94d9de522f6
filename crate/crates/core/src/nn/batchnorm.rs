use super::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalization over `(n, h, w)`.
///
/// Training mode normalizes with the batch moments (biased variance) and
/// updates running estimates with momentum [`BN_MOMENTUM`] (unbiased variance,
/// as is conventional). Inference uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f32,
    pub gamma: Option<Param>,
    pub beta: Option<Param>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<Cache>,
}

#[derive(Clone, Debug)]
struct Cache {
    x_hat: Tensor4,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            channels,
            eps: BN_EPS,
            gamma: affine.then(|| Param::new(vec![1.0; channels])),
            beta: affine.then(|| Param::new(vec![0.0; channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn affine(&self) -> bool {
        self.gamma.is_some()
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.c() != self.channels {
            return Err(Error::dim(format!(
                "batch norm over {} channels got {}",
                self.channels,
                x.c()
            )));
        }
        Ok(())
    }

    fn scale_shift(&self, ch: usize) -> (f32, f32) {
        match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => (g.value[ch], b.value[ch]),
            _ => (1.0, 0.0),
        }
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let plane = x.h() * x.w();
        let mut y = x.clone();
        for (idx, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % self.channels;
            let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let (g, b) = self.scale_shift(ch);
            let mean = self.running_mean[ch];
            for v in chunk {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        let plane = h * w;
        let count = n * plane;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (idx, chunk) in x.data().chunks(plane).enumerate() {
            let ch = idx % c;
            for &v in chunk {
                mean[ch] += v as f64;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for (idx, chunk) in x.data().chunks(plane).enumerate() {
            let ch = idx % c;
            for &v in chunk {
                let d = v as f64 - mean[ch];
                sq[ch] += d * d;
            }
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
        let inv_std: Vec<f32> = var
            .iter()
            .map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
            .collect();

        let mut x_hat = x.clone();
        for (idx, chunk) in x_hat.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let m = mean[ch] as f32;
            for v in chunk {
                *v = (*v - m) * inv_std[ch];
            }
        }
        let mut y = x_hat.clone();
        if self.affine() {
            for (idx, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                let (g, b) = self.scale_shift(idx % c);
                for v in chunk {
                    *v = *v * g + b;
                }
            }
        }

        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch] as f32;
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * (var[ch] * unbias) as f32;
        }
        self.cache = Some(Cache { x_hat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let Cache { x_hat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("batch norm backward without forward".into()))?;
        if grad_out.dims() != x_hat.dims() {
            return Err(Error::dim("batch norm upstream gradient has the wrong shape"));
        }
        let [n, c, h, w] = x_hat.dims();
        let plane = h * w;
        let count = (n * plane) as f32;
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for (idx, (g, xh)) in grad_out.data().chunks(plane).zip(x_hat.data().chunks(plane)).enumerate() {
            let ch = idx % c;
            for (gv, xv) in g.iter().zip(xh) {
                sum_dy[ch] += gv;
                sum_dy_xhat[ch] += gv * xv;
            }
        }
        if let (Some(gamma), Some(beta)) = (&mut self.gamma, &mut self.beta) {
            gamma.grad = sum_dy_xhat.clone();
            beta.grad = sum_dy.clone();
        }
        let mut gx = grad_out.clone();
        for (idx, (g, xh)) in gx.data_mut().chunks_mut(plane).zip(x_hat.data().chunks(plane)).enumerate() {
            let ch = idx % c;
            let (gamma, _) = self.scale_shift(ch);
            let k = gamma * inv_std[ch] / count;
            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
            for (gv, xv) in g.iter_mut().zip(xh) {
                *gv = k * (count * *gv - sd - xv * sdx);
            }
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(g) = &mut self.gamma {
            v.push(g);
        }
        if let Some(b) = &mut self.beta {
            v.push(b);
        }
        v
    }
}
