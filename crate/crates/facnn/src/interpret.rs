//! Class attribution and the depth-evolution audits.
//!
//! Attribution maps come straight from the feature maps: with the pooling
//! head, class `c`'s map at a layer is the mean of the `R` channels the
//! head assigns to `c`. A gradient-based CAM oracle computes the same
//! quantity the hard way — global-average-pooled gradients of the
//! pre-logit score weighting the feature maps under a ReLU — and is kept
//! fully independent so the two routes can be compared.
//!
//! The audits operate on the rescaled stack `S_L = (L / N_L) Pool(X_L, T)`:
//! consecutive entries of a dampened-skip model may differ by at most
//! `delta = 1/N_L` elementwise, and `S_L` stays inside `[0, delta L]`.

use std::fmt;

use crate::error::{FaError, Result};
use crate::model::{FaModel, FeatureStack};
use crate::tensor::{kernels, Tensor};

/// Slack absorbing f32 rounding in the audit comparisons.
pub const AUDIT_TOL: f32 = 1e-6;

/// How a saliency map was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodTag {
    /// Channel-group average of raw feature maps.
    FaAverage,
    /// Gradient-weighted class activation map.
    GradCam,
    /// Randomized-mask scoring.
    Rise,
    /// Sliding-patch occlusion.
    KOcc,
    /// Uniform random saliency baseline.
    Random,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::FaAverage => "fa-average",
            MethodTag::GradCam => "gradcam",
            MethodTag::Rise => "rise",
            MethodTag::KOcc => "k-occ",
            MethodTag::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<MethodTag> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fa" | "fa-average" => Ok(MethodTag::FaAverage),
            "gradcam" | "grad-cam" => Ok(MethodTag::GradCam),
            "rise" => Ok(MethodTag::Rise),
            "kocc" | "k-occ" | "occlusion" => Ok(MethodTag::KOcc),
            "random" | "rand" => Ok(MethodTag::Random),
            other => Err(FaError::Config(format!("unknown saliency method '{other}'"))),
        }
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Single-channel spatial importance map for one (image, class) pair.
///
/// Values are stored in f64: the attribution sums are exact there, which
/// keeps the two CAM routes rank-identical down to removal-order ties.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    /// Producing layer, when the method has one.
    pub layer_index: Option<usize>,
    pub method: MethodTag,
}

impl SaliencyMap {
    pub fn new(
        values: Vec<f64>,
        height: usize,
        width: usize,
        class_id: usize,
        layer_index: Option<usize>,
        method: MethodTag,
    ) -> Result<SaliencyMap> {
        if values.len() != height * width {
            return Err(FaError::Shape(format!(
                "saliency map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(SaliencyMap { values, height, width, class_id, layer_index, method })
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Attribution by channel-group averaging: the map for `class_id` at
/// `layer` is the mean of the feature maps whose owner is `class_id`.
/// At the deepest layer this equals the gradient CAM up to a positive
/// constant; earlier layers give the intermediate "morphing" views.
pub fn fa_attribution(
    features: &FeatureStack,
    image: usize,
    layer: usize,
    class_id: usize,
    ownership: &[usize],
) -> Result<SaliencyMap> {
    let x = features.layer(layer)?;
    let (n, k, h, w) = x.dims4()?;
    if image >= n {
        return Err(FaError::Bounds(format!("image {image} outside batch of {n}")));
    }
    if ownership.len() != k {
        return Err(FaError::Shape(format!(
            "ownership map covers {} channels, features have {k}",
            ownership.len()
        )));
    }
    let num_classes = ownership.iter().copied().max().map_or(0, |m| m + 1);
    if class_id >= num_classes {
        return Err(FaError::Bounds(format!("class {class_id} outside 0..{num_classes}")));
    }
    let owned: Vec<usize> = (0..k).filter(|&ch| ownership[ch] == class_id).collect();
    let z = h * w;
    let mut values = vec![0.0f64; z];
    for &ch in &owned {
        let plane = &x.data()[(image * k + ch) * z..(image * k + ch + 1) * z];
        for (acc, &v) in values.iter_mut().zip(plane) {
            *acc += v as f64;
        }
    }
    let inv = 1.0 / owned.len() as f64;
    for v in &mut values {
        *v *= inv;
    }
    SaliencyMap::new(values, h, w, class_id, Some(layer), MethodTag::FaAverage)
}

/// Gradient CAM result with the per-channel weights exposed.
pub struct GradCamResult {
    pub map: SaliencyMap,
    /// `alpha_k`: global-average-pooled gradient of the pre-logit class
    /// score with respect to feature map `k`.
    pub alphas: Vec<f64>,
}

/// Gradient-based CAM at an arbitrary layer, computed by autodiff.
///
/// Differentiates the **pre-normalization** class score `Y_c` (for the
/// pooling head; the raw logit for the linear head), pools the gradient
/// spatially into weights `alpha_k`, and returns
/// `ReLU(sum_k alpha_k A_k)`. Serves as the independent oracle for
/// [`fa_attribution`].
pub fn gradcam_oracle(model: &FaModel, image: &Tensor, class_id: usize, layer: usize) -> Result<SaliencyMap> {
    Ok(gradcam_oracle_full(model, image, class_id, layer)?.map)
}

pub fn gradcam_oracle_full(
    model: &FaModel,
    image: &Tensor,
    class_id: usize,
    layer: usize,
) -> Result<GradCamResult> {
    let (n, _, _, _) = image.dims4()?;
    if n != 1 {
        return Err(FaError::Contract(format!(
            "gradcam oracle expects a single image, got batch of {n}"
        )));
    }
    if class_id >= model.config.num_classes {
        return Err(FaError::Bounds(format!(
            "class {class_id} outside 0..{}",
            model.config.num_classes
        )));
    }
    if layer == 0 || layer > model.config.num_layers {
        return Err(FaError::Bounds(format!(
            "layer {layer} outside 1..={}",
            model.config.num_layers
        )));
    }

    let traced = model.traced(image, true)?;
    let feature = traced.features[layer - 1].clone();
    feature.retain_grad();
    let score = traced.prelogits.select(0, class_id)?;
    score.backward()?;

    let grad = feature
        .grad()
        .ok_or_else(|| FaError::Contract("no gradient reached the requested layer".into()))?;
    let a = feature.to_tensor();
    let (_, k, h, w) = a.dims4()?;
    let z = h * w;

    let mut alphas = vec![0.0f64; k];
    for (ch, alpha) in alphas.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for &g in &grad.data()[ch * z..(ch + 1) * z] {
            s += g as f64;
        }
        *alpha = s / z as f64;
    }

    let mut values = vec![0.0f64; z];
    for (ch, &alpha) in alphas.iter().enumerate() {
        if alpha == 0.0 {
            continue;
        }
        let plane = &a.data()[ch * z..(ch + 1) * z];
        for (acc, &v) in values.iter_mut().zip(plane) {
            *acc += alpha * v as f64;
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    let map = SaliencyMap::new(values, h, w, class_id, Some(layer), MethodTag::GradCam)?;
    Ok(GradCamResult { map, alphas })
}

/// The rescaled feature stack `S_0 .. S_{N_L}`, all at the resolution of
/// the target layer.
#[derive(Clone, Debug)]
pub struct RescaledStack {
    /// `tensors[L]` is `S_L`; index 0 is the all-zero base case.
    pub tensors: Vec<Tensor>,
    /// `1 / N_L`.
    pub delta: f32,
    pub target_layer: usize,
}

/// Builds the rescaled stack: `S_0 = 0` and
/// `S_L = (L/N_L) * MaxPool(X_L, kernel = (rows_L/rows_T, cols_L/cols_T))`.
/// Max pooling is used because the backbone's own downsampling is max
/// pooling; a layer resolution that is not an integer multiple of the
/// target's is a configuration error.
pub fn rescale_stack(features: &FeatureStack, target_layer: usize) -> Result<RescaledStack> {
    let num_layers = features.num_layers();
    if target_layer == 0 || target_layer > num_layers {
        return Err(FaError::Bounds(format!(
            "target layer {target_layer} outside 1..={num_layers}"
        )));
    }
    let (_, _, ht, wt) = features.layer(target_layer)?.dims4()?;
    let (n, k, _, _) = features.layer(1)?.dims4()?;
    let mut tensors = Vec::with_capacity(num_layers + 1);
    tensors.push(Tensor::zeros(&[n, k, ht, wt]));
    for layer in 1..=num_layers {
        let x = features.layer(layer)?;
        let (_, _, h, w) = x.dims4()?;
        if h % ht != 0 || w % wt != 0 || h < ht || w < wt {
            return Err(FaError::Config(format!(
                "layer {layer} resolution {h}x{w} is not an integer multiple of target {ht}x{wt}"
            )));
        }
        let (kh, kw) = (h / ht, w / wt);
        let pooled = if kh == 1 && kw == 1 { x.clone() } else { kernels::max_pool2d(x, kh, kw)?.0 };
        let factor = layer as f32 / num_layers as f32;
        tensors.push(kernels::scale(&pooled, factor));
    }
    Ok(RescaledStack { tensors, delta: 1.0 / num_layers as f32, target_layer })
}

/// Outcome of the bounded-increment / range audit.
#[derive(Clone, Debug)]
pub struct AuditReport {
    pub delta: f32,
    /// Largest elementwise step `|S_L - S_{L-1}|` over all layers.
    pub max_step: f32,
    /// That maximum per transition, index 0 holding `|S_1 - S_0|`.
    pub per_layer_steps: Vec<f32>,
    /// Elements of any `S_L` outside `[0, delta * L]` (with tolerance).
    pub range_violations: usize,
    pub pass: bool,
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_step {:.8} vs delta {:.8} ({} range violations): {}",
            self.max_step,
            self.delta,
            self.range_violations,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Measures the largest per-layer step and checks the range bound.
/// Report-only: it never errors, the caller decides what PASS means for
/// the model variant under audit.
pub fn audit_bounded_increment(stack: &RescaledStack) -> AuditReport {
    let delta = stack.delta;
    let mut per_layer_steps = Vec::with_capacity(stack.tensors.len().saturating_sub(1));
    let mut max_step = 0.0f32;
    let mut range_violations = 0usize;
    for (l, t) in stack.tensors.iter().enumerate() {
        let hi = delta * l as f32 + AUDIT_TOL;
        for &v in t.data() {
            if v < -AUDIT_TOL || v > hi {
                range_violations += 1;
            }
        }
        if l > 0 {
            let step = stack.tensors[l - 1]
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            per_layer_steps.push(step);
            max_step = max_step.max(step);
        }
    }
    let pass = max_step <= delta + AUDIT_TOL && range_violations == 0;
    AuditReport { delta, max_step, per_layer_steps, range_violations, pass }
}

/// Pearson correlation in f64. Two constant inputs correlate at 1.0 by
/// convention; exactly one constant input gives 0.0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson over mismatched lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    const TINY: f64 = 1e-300;
    if va < TINY && vb < TINY {
        return 1.0;
    }
    if va < TINY || vb < TINY {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
