use rand::Rng;

use super::Param;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{conv_backward, conv_forward, gemm, ConvGeometry, Tensor4};

/// Full-precision convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct FullConv {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor4>,
}

impl FullConv {
    pub fn new<R: Rng>(geometry: ConvGeometry, bias: bool, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        let fan_in = geometry.patch_len() as f32;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..geometry.weight_dims().iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = bias.then(|| {
            let b = 1.0 / fan_in.sqrt();
            Param::new((0..geometry.out_channels).map(|_| rng.gen_range(-b..b)).collect())
        });
        Ok(Self {
            geometry,
            weight: Param::new(weight),
            bias,
            cache: None,
        })
    }

    pub fn from_parts(geometry: ConvGeometry, weight: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        geometry.validate()?;
        if weight.len() != geometry.weight_dims().iter().product::<usize>() {
            return Err(Error::dim("conv weight length does not match geometry"));
        }
        if bias.as_ref().is_some_and(|b| b.len() != geometry.out_channels) {
            return Err(Error::dim("conv bias length does not match output channels"));
        }
        Ok(Self {
            geometry,
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            cache: None,
        })
    }

    fn weight_tensor(&self) -> Result<Tensor4> {
        Tensor4::new(self.geometry.weight_dims(), self.weight.value.clone())
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = conv_forward(x, &self.weight_tensor()?, &self.geometry)?;
        if let Some(b) = &self.bias {
            let plane = y.h() * y.w();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b.value[(i / plane) % b.value.len()];
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("conv backward without forward".into()))?;
        let (gx, gw) = conv_backward(grad_out, &x, &self.weight_tensor()?, &self.geometry)?;
        self.weight.grad = gw.into_data();
        if let Some(b) = &mut self.bias {
            b.grad = channel_sums(grad_out);
        }
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

pub(crate) fn channel_sums(t: &Tensor4) -> Vec<f32> {
    let [n, c, h, w] = t.dims();
    let plane = h * w;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *o += t.data()[start..start + plane].iter().sum::<f32>();
        }
    }
    out
}

/// Fully connected layer on `(n, inputs, 1, 1)` activations; weights are
/// `(outputs, inputs)` row-major.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor4>,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::dim("linear layer needs positive sizes"));
        }
        let bound = (6.0 / inputs as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let b = 1.0 / (inputs as f32).sqrt();
        let bias = (0..outputs).map(|_| rng.gen_range(-b..b)).collect();
        Ok(Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn from_parts(inputs: usize, outputs: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::dim("linear parameters do not match sizes"));
        }
        Ok(Self {
            inputs,
            outputs,
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.item_len() != self.inputs {
            return Err(Error::dim(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs,
                x.item_len()
            )));
        }
        let n = x.n();
        let mut y = vec![0.0; n * self.outputs];
        for row in y.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.inputs, self.outputs, x.data(), false, &self.weight.value, true, 1.0, &mut y);
        Tensor4::new([n, self.outputs, 1, 1], y)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("linear backward without forward".into()))?;
        let n = x.n();
        if grad_out.dims() != [n, self.outputs, 1, 1] {
            return Err(Error::dim("linear upstream gradient has the wrong shape"));
        }
        let g = grad_out.data();
        self.weight.grad = vec![0.0; self.inputs * self.outputs];
        gemm(self.outputs, n, self.inputs, g, true, x.data(), false, 0.0, &mut self.weight.grad);
        let mut gb = vec![0.0; self.outputs];
        for row in g.chunks(self.outputs) {
            exec::add_into(&mut gb, row);
        }
        self.bias.grad = gb;
        let mut gx = vec![0.0; n * self.inputs];
        gemm(n, self.outputs, self.inputs, g, false, &self.weight.value, false, 0.0, &mut gx);
        Tensor4::new(x.dims(), gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Max pooling over non-overlapping or strided square windows (no padding).
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("pooling window must be positive"));
        }
        Ok(Self {
            kernel,
            stride,
            cache: None,
        })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return Err(Error::dim(format!(
                "pool window {} larger than input {h}x{w}",
                self.kernel
            )));
        }
        Ok(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    fn run(&self, x: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
        let [n, c, h, w] = x.dims();
        let (ho, wo) = self.output_hw(h, w)?;
        let mut out = Tensor4::zeros([n, c, ho, wo]);
        let mut arg = vec![0u32; n * c * ho * wo];
        let src = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = (oy * self.stride + ky) * w + ox * self.stride + kx;
                            let v = src[base + idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
        Ok((out, arg))
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.run(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (out, arg) = self.run(x)?;
        self.cache = Some((x.dims(), arg));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (dims, arg) = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("pool backward without forward".into()))?;
        let [_, _, h, w] = dims;
        let out_plane = grad_out.h() * grad_out.w();
        let mut gx = Tensor4::zeros(dims);
        for (o, (&g, &a)) in grad_out.data().iter().zip(&arg).enumerate() {
            let plane = o / out_plane;
            gx.data_mut()[plane * h * w + a as usize] += g;
        }
        Ok(gx)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor4>,
}

impl Relu {
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("relu backward without forward".into()))?;
        let mut g = grad_out.clone();
        for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
            if *xv <= 0.0 {
                *gv = 0.0;
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Flatten {
    cache: Option<[usize; 4]>,
}

impl Flatten {
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        x.clone().reshape([x.n(), x.item_len(), 1, 1])
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.cache = Some(x.dims());
        self.infer(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let dims = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("flatten backward without forward".into()))?;
        grad_out.clone().reshape(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_product() {
        let lin = Linear::from_parts(3, 2, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![0.5, -0.5]).unwrap();
        let x = Tensor4::new([2, 3, 1, 1], vec![1.0, 1.0, 1.0, 2.0, 0.0, -1.0]).unwrap();
        let y = lin.infer(&x).unwrap();
        assert_eq!(y.data(), &[6.5, -0.5, -0.5, -3.5]);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng).unwrap();
        let x = Tensor4::from_fn([2, 4, 1, 1], |[n, c, _, _]| (n as f32 - 0.5) * (c as f32 + 1.0));
        lin.forward_train(&x).unwrap();
        let g = Tensor4::from_fn([2, 3, 1, 1], |[n, c, _, _]| (n * 3 + c) as f32 * 0.1);
        let gx = lin.backward(&g).unwrap();
        // dW[o][i] = sum_n g[n][o] x[n][i]
        for o in 0..3 {
            for i in 0..4 {
                let want: f32 = (0..2).map(|n| g.at(n, o, 0, 0) * x.at(n, i, 0, 0)).sum();
                assert!((lin.weight.grad[o * 4 + i] - want).abs() < 1e-6);
            }
        }
        for n in 0..2 {
            for i in 0..4 {
                let want: f32 = (0..3).map(|o| g.at(n, o, 0, 0) * lin.weight.value[o * 4 + i]).sum();
                assert!((gx.at(n, i, 0, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor4::new([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let mut pool = MaxPool::new(2, 2).unwrap();
        let y = pool.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let gx = pool.backward(&Tensor4::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_masks_negative_inputs() {
        let x = Tensor4::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut r = Relu::default();
        assert_eq!(r.forward_train(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor4::new([1, 1, 1, 3], vec![1.0; 3]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_bias_adds_per_channel() {
        let g = ConvGeometry::new(1, 2, 1);
        let conv = FullConv::from_parts(g, vec![1.0, 2.0], Some(vec![0.5, -1.0])).unwrap();
        let x = Tensor4::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(conv.infer(&x).unwrap().data(), &[1.5, 3.5, 1.0, 5.0]);
    }
}
