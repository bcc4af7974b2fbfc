//! Convolution against an independently written nested-loop oracle.

mod common;

use common::{conv_oracle, seeded};
use facnn::tensor::kernels::conv2d_forward;
use facnn::tensor::Tensor;
use rand::Rng;

const TOL: f32 = 1e-5;

#[test]
fn conv_matches_oracle_on_spec_instance() {
    // 3-channel 5x5 input, 2x3x3x3 kernel, stride 1, pad 1
    let mut rng = seeded(1);
    let x = Tensor::rand_uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[2], -0.5, 0.5, &mut rng);
    let got = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
    let want = conv_oracle(&x, &w, &b, 1, 1);
    assert!(got.max_abs_diff(&want).unwrap() <= TOL);
}

#[test]
fn conv_matches_oracle_on_randomized_instances() {
    let mut rng = seeded(2);
    let mut cases = 0;
    while cases < 40 {
        let n = rng.gen_range(1..=2);
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=5);
        let h = rng.gen_range(3..=9);
        let w = rng.gen_range(3..=9);
        let k = *[1usize, 2, 3].get(rng.gen_range(0..3)).unwrap();
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=2);
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < k || wp < k || (hp - k) % stride != 0 || (wp - k) % stride != 0 {
            continue;
        }
        cases += 1;
        let x = Tensor::rand_uniform(&[n, cin, h, w], -1.0, 1.0, &mut rng);
        let wt = Tensor::rand_uniform(&[cout, cin, k, k], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[cout], -0.5, 0.5, &mut rng);
        let got = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, &b, stride, pad);
        let diff = got.max_abs_diff(&want).unwrap();
        assert!(
            diff <= TOL,
            "case {cases}: n={n} cin={cin} cout={cout} {h}x{w} k={k} s={stride} p={pad}: diff {diff}"
        );
    }
}

#[test]
fn maxpool_preserves_elementwise_difference_bounds() {
    // 200 random same-shape pairs: |a-b| <= d elementwise implies
    // |pool(a) - pool(b)| <= d elementwise (pure selection, no slack)
    use facnn::tensor::kernels::max_pool2d;
    let mut rng = seeded(3);
    for case in 0..200 {
        let c = rng.gen_range(1..=3);
        let oh = rng.gen_range(1..=4);
        let ow = rng.gen_range(1..=4);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=3);
        let (h, w) = (oh * kh, ow * kw);
        let a = Tensor::rand_uniform(&[1, c, h, w], -2.0, 2.0, &mut rng);
        let noise_bound = rng.gen_range(0.01..0.5f32);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += rng.gen_range(-noise_bound..noise_bound);
        }
        let d = a.max_abs_diff(&b).unwrap();
        let (pa, _) = max_pool2d(&a, kh, kw).unwrap();
        let (pb, _) = max_pool2d(&b, kh, kw).unwrap();
        let pooled_diff = pa.max_abs_diff(&pb).unwrap();
        assert!(
            pooled_diff <= d,
            "case {case}: pooled diff {pooled_diff} exceeds input bound {d}"
        );
    }
}
