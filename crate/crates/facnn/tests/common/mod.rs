//! Shared test harnesses: central finite differences against autodiff,
//! and the brute-force convolution oracle.
#![allow(dead_code)] // each test binary uses a different subset

use facnn::tensor::autodiff::Var;
use facnn::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;

/// Compares autodiff gradients of `build` against central finite
/// differences of a randomly weighted sum of the outputs.
///
/// `build` must be a pure function of its inputs. Up to `max_samples`
/// elements per input are probed (seeded choice). An element passes when
/// `|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)`.
pub fn gradcheck(
    name: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&[Var]) -> Var,
    rtol: f64,
    atol: f64,
    max_samples: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead);

    // analytic gradients
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let out = build(&vars);
    let weights = Tensor::rand_uniform(&out.shape(), 0.5, 1.5, &mut rng);
    let loss = out.mul(&Var::leaf(weights.clone(), false)).expect("weighted loss").sum();
    loss.backward().expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| panic!("{name}: missing gradient")))
        .collect();

    // f64 weighted sum of a graph-free forward pass
    let loss_value = |ts: &[Tensor]| -> f64 {
        let vs: Vec<Var> = ts.iter().map(|t| Var::leaf(t.clone(), false)).collect();
        let out = build(&vs);
        let val = out.to_tensor();
        val.data()
            .iter()
            .zip(weights.data())
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    };

    for (which, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let samples: Vec<usize> = if numel <= max_samples {
            (0..numel).collect()
        } else {
            (0..max_samples).map(|_| rng.gen_range(0..numel)).collect()
        };
        for elem in samples {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= FD_STEP;
            let numeric = (loss_value(&plus) - loss_value(&minus)) / (2.0 * FD_STEP as f64);
            let ana = analytic[which].data()[elem] as f64;
            let tol = atol + rtol * ana.abs().max(numeric.abs());
            assert!(
                (ana - numeric).abs() <= tol,
                "{name}: input {which} elem {elem}: analytic {ana} vs numeric {numeric} (tol {tol})"
            );
        }
    }
}

/// Reference convolution: quadruple-nested loops, f64 accumulation.
/// Written independently of the production im2col/GEMM path.
pub fn conv_oracle(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, cin, h, w) = match *input.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => panic!("oracle expects rank-4 input"),
    };
    let (cout, _, kh, kw) = match *weight.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => panic!("oracle expects rank-4 weight"),
    };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for ni in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[o] as f64;
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((ni * cin + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data()[((o * cin + c) * kh + ky) * kw + kx];
                                acc += iv as f64 * wv as f64;
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

/// Deterministic per-index rng for fixtures.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
