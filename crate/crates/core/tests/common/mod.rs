#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slbf::{ConvGeometry, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, dims: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Direct six-loop convolution in f64 with zero padding.
pub fn naive_conv(x: &[f64], xd: [usize; 4], w: &[f64], g: &ConvGeometry) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xd;
    let (d, p, st) = (g.kernel, g.padding as isize, g.stride);
    let ho = (h + 2 * g.padding - d) / st + 1;
    let wo = (wd + 2 * g.padding - d) / st + 1;
    let co = g.out_channels;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..d {
                            for kx in 0..d {
                                let iy = (oy * st + ky) as isize - p;
                                let ix = (ox * st + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((o * c + ci) * d + ky) * d + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// MNIST directory from `SLBF_DATA_DIR`, else `data/mnist` at the workspace
/// root. `None` when the training images are missing.
pub fn mnist_dir() -> Option<std::path::PathBuf> {
    let dir = std::env::var_os("SLBF_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}
