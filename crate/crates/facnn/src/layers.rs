//! The two order-preserving layers: the dampened skip block and the
//! grouped global-average-pooling classifier head.
//!
//! A block computes `F(x) = BatchNorm(Conv3x3(x))` and combines it with
//! its input. The dampened form is
//!
//! ```text
//! X_L = ReLU((1 - b) X_{L-1} + b tanh(F(X_{L-1}))),   b = 1/L
//! ```
//!
//! so the additive update is confined to `[-b, b]` elementwise. At the
//! first layer `b = 1`, the skip term vanishes and the block doubles as
//! the channel projection from the image to `K` channels. The vanilla
//! form `ReLU(x + F(x))` is retained as an ablation and shares this code
//! path.

use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};
use crate::tensor::autodiff::Var;
use crate::tensor::{kernels, Tensor};

/// Epsilon added to the L1 denominator so untrained all-zero pre-logits
/// normalize to zero instead of NaN.
pub const L1_EPS: f32 = 1e-8;

/// Which skip connection a block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipKind {
    /// `ReLU((1-b) x + b tanh(F(x)))` with `b = 1/L`.
    Dampened,
    /// `ReLU(x + F(x))`, the unbounded baseline.
    Vanilla,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    /// Standard init: unit scale, zero shift, unit running variance.
    pub fn identity(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// One backbone block: `Conv3x3(pad 1, stride 1) -> BatchNorm`, combined
/// with the input through the configured skip.
#[derive(Clone, Debug)]
pub struct FaBlock {
    /// 1-based depth of this block; fixes the dampening to `1/layer_index`.
    pub layer_index: usize,
    pub skip: SkipKind,
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub bn: BatchNorm2d,
}

/// Leaf [`Var`]s for one block's trainable parameters.
pub struct BlockVars {
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl FaBlock {
    /// Dampening coefficient `b = 1/L` (exact f32 division).
    pub fn beta(&self) -> f32 {
        1.0 / self.layer_index as f32
    }

    pub fn out_channels(&self) -> usize {
        self.conv_weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.conv_weight.shape()[1]
    }

    fn check_skip_channels(&self, x_channels: usize) -> Result<()> {
        if self.layer_index >= 2 && x_channels != self.out_channels() {
            return Err(FaError::Config(format!(
                "block {}: skip needs {} input channels, got {x_channels}",
                self.layer_index,
                self.out_channels()
            )));
        }
        Ok(())
    }

    /// Inference forward using the running batch-norm statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let f = kernels::conv2d_forward(x, &self.conv_weight, &self.conv_bias, 1, 1)?;
        let f = kernels::batch_norm_eval(
            &f,
            &self.bn.gamma,
            &self.bn.beta,
            &self.bn.running_mean,
            &self.bn.running_var,
            self.bn.eps,
        )?;
        self.check_skip_channels(x.shape()[1])?;
        match self.skip {
            SkipKind::Dampened => {
                let t = kernels::tanh(&f);
                if self.layer_index == 1 {
                    Ok(kernels::relu(&t))
                } else {
                    let b = self.beta();
                    Ok(kernels::relu(&kernels::lincomb(x, 1.0 - b, &t, b)?))
                }
            }
            SkipKind::Vanilla => {
                if self.layer_index == 1 {
                    Ok(kernels::relu(&f))
                } else {
                    Ok(kernels::relu(&kernels::lincomb(x, 1.0, &f, 1.0)?))
                }
            }
        }
    }

    pub fn make_vars(&self, requires_grad: bool) -> BlockVars {
        BlockVars {
            conv_weight: Var::leaf(self.conv_weight.clone(), requires_grad),
            conv_bias: Var::leaf(self.conv_bias.clone(), requires_grad),
            gamma: Var::leaf(self.bn.gamma.clone(), requires_grad),
            beta: Var::leaf(self.bn.beta.clone(), requires_grad),
        }
    }

    fn combine_var(&self, x: &Var, f: Var) -> Result<Var> {
        self.check_skip_channels(x.shape()[1])?;
        match self.skip {
            SkipKind::Dampened => {
                let t = f.tanh();
                if self.layer_index == 1 {
                    Ok(t.relu())
                } else {
                    let b = self.beta();
                    Ok(x.lincomb(1.0 - b, &t, b)?.relu())
                }
            }
            SkipKind::Vanilla => {
                if self.layer_index == 1 {
                    Ok(f.relu())
                } else {
                    Ok(x.lincomb(1.0, &f, 1.0)?.relu())
                }
            }
        }
    }

    /// Tracked forward with eval-mode batch norm (for attribution).
    pub fn forward_var_eval(&self, x: &Var, vars: &BlockVars) -> Result<Var> {
        let f = x.conv2d(&vars.conv_weight, &vars.conv_bias, 1, 1)?;
        let f = f.batch_norm_eval(
            &vars.gamma,
            &vars.beta,
            &self.bn.running_mean,
            &self.bn.running_var,
            self.bn.eps,
        )?;
        self.combine_var(x, f)
    }

    /// Tracked forward with batch statistics; updates the running
    /// estimates in place.
    pub fn forward_var_train(&mut self, x: &Var, vars: &BlockVars) -> Result<Var> {
        let f = x.conv2d(&vars.conv_weight, &vars.conv_bias, 1, 1)?;
        let f = f.batch_norm_train(
            &vars.gamma,
            &vars.beta,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
            self.bn.momentum,
            self.bn.eps,
        )?;
        self.combine_var(x, f)
    }
}

/// Grouped global-average-pooling classifier: class `c` owns channels
/// `c*R .. (c+1)*R` and its pre-logit is their mean over space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolHead {
    pub classes: usize,
    pub maps_per_class: usize,
}

impl PoolHead {
    pub fn new(classes: usize, channels: usize) -> Result<PoolHead> {
        if classes == 0 || channels == 0 || channels % classes != 0 {
            return Err(FaError::Config(format!(
                "pooling head needs channels divisible by classes, got {channels} / {classes}"
            )));
        }
        Ok(PoolHead { classes, maps_per_class: channels / classes })
    }

    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        kernels::pool_head_forward(a, self.classes, self.maps_per_class)
    }

    pub fn forward_var(&self, a: &Var) -> Result<Var> {
        a.pool_head(self.classes, self.maps_per_class)
    }
}

/// Rowwise `y / (sum(y) + eps)` over non-negative pre-logits.
pub fn l1_normalize(y: &Tensor, eps: f32) -> Result<Tensor> {
    Ok(kernels::l1_normalize(y, eps)?.0)
}

/// Uniform init in `[-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<R: rand::Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(layer_index: usize, cin: usize, k: usize, skip: SkipKind, seed: u64) -> FaBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bn = BatchNorm2d::identity(k);
        bn.running_mean = Tensor::rand_uniform(&[k], -0.5, 0.5, &mut rng);
        bn.running_var = Tensor::rand_uniform(&[k], 0.5, 2.0, &mut rng);
        FaBlock {
            layer_index,
            skip,
            conv_weight: kaiming_uniform(&[k, cin, 3, 3], cin * 9, &mut rng),
            conv_bias: Tensor::rand_uniform(&[k], -0.1, 0.1, &mut rng),
            bn,
        }
    }

    #[test]
    fn first_layer_reduces_to_relu_tanh_f() {
        let block = random_block(1, 3, 8, SkipKind::Dampened, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::rand_uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng);
        let out = block.forward_eval(&x).unwrap();

        let f = kernels::conv2d_forward(&x, &block.conv_weight, &block.conv_bias, 1, 1).unwrap();
        let f = kernels::batch_norm_eval(&f, &block.bn.gamma, &block.bn.beta, &block.bn.running_mean, &block.bn.running_var, block.bn.eps).unwrap();
        let expect = kernels::relu(&kernels::tanh(&f));
        assert_eq!(out, expect);
    }

    #[test]
    fn zero_f_passes_scaled_input_through() {
        // zero conv + identity batch norm makes the block (1-b) * x
        let mut block = random_block(4, 8, 8, SkipKind::Dampened, 9);
        block.conv_weight = Tensor::zeros(&[8, 8, 3, 3]);
        block.conv_bias = Tensor::zeros(&[8]);
        block.bn = BatchNorm2d::identity(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::rand_uniform(&[1, 8, 5, 5], 0.0, 2.0, &mut rng);
        let out = block.forward_eval(&x).unwrap();
        let b = block.beta();
        for (o, &v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, (1.0 - b) * v);
        }
    }

    #[test]
    fn dampened_arithmetic_forced_case() {
        // x = 0.5, tanh(F(x)) forced to 1.0, L = 4:
        // ReLU(0.75 * 0.5 + 0.25 * 1.0) = 0.625
        let mut block = random_block(4, 2, 2, SkipKind::Dampened, 11);
        block.conv_weight = Tensor::zeros(&[2, 2, 3, 3]);
        block.conv_bias = Tensor::full(&[2], 30.0); // saturates tanh to 1.0
        block.bn = BatchNorm2d::identity(2);
        let x = Tensor::full(&[1, 2, 4, 4], 0.5);
        let out = block.forward_eval(&x).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.625);
        }
    }

    #[test]
    fn skip_rejects_channel_mismatch_after_first_layer() {
        let block = random_block(3, 4, 8, SkipKind::Dampened, 12);
        let x = Tensor::zeros(&[1, 4, 6, 6]);
        assert!(matches!(block.forward_eval(&x), Err(FaError::Config(_))));
    }

    #[test]
    fn per_layer_increment_bound_holds() {
        // |block(x) - ReLU((1-b) x)| <= b elementwise, any weights
        for seed in 0..20u64 {
            let layer = 2 + (seed as usize % 9);
            let block = random_block(layer, 6, 6, SkipKind::Dampened, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = Tensor::rand_uniform(&[1, 6, 8, 8], 0.0, 1.0, &mut rng);
            let out = block.forward_eval(&x).unwrap();
            let base = kernels::relu(&kernels::scale(&x, 1.0 - block.beta()));
            let diff = out.max_abs_diff(&base).unwrap();
            assert!(diff <= block.beta() + 1e-6, "seed {seed}: step {diff} > beta {}", block.beta());
        }
    }

    #[test]
    fn block_output_non_negative_feeds_next_block() {
        let b1 = random_block(1, 3, 6, SkipKind::Dampened, 21);
        let b2 = random_block(2, 6, 6, SkipKind::Dampened, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let y1 = b1.forward_eval(&x).unwrap();
        assert!(y1.data().iter().all(|&v| v >= 0.0));
        let y2 = b2.forward_eval(&y1).unwrap();
        assert!(y2.data().iter().all(|&v| v >= 0.0));
        // pooling head accepts the non-negative output
        let head = PoolHead::new(3, 6).unwrap();
        let y = head.forward(&y2).unwrap();
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pool_head_permutation_invariant_within_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = Tensor::rand_uniform(&[1, 6, 4, 4], 0.0, 1.0, &mut rng);
        let head = PoolHead::new(2, 6).unwrap();
        let y = head.forward(&a).unwrap();

        // swap two channels inside group 0 and reverse spatial order of another
        let mut b = a.clone();
        let z = 16;
        for i in 0..z {
            b.data_mut()[i] = a.data()[z + i];
            b.data_mut()[z + i] = a.data()[i];
        }
        for i in 0..z {
            b.data_mut()[4 * z + i] = a.data()[4 * z + (z - 1 - i)];
        }
        let y2 = head.forward(&b).unwrap();
        for (u, v) in y.data().iter().zip(y2.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn l1_normalize_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let y = Tensor::rand_uniform(&[1, 10], 0.0, 3.0, &mut rng);
            let n = l1_normalize(&y, L1_EPS).unwrap();
            let argmax = |t: &Tensor| {
                t.data()
                    .iter()
                    .enumerate()
                    .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            };
            assert_eq!(argmax(&y), argmax(&n));
        }
    }
}
