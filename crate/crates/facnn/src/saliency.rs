//! Pixel-removal faithfulness benchmark and the black-box saliency
//! baselines it compares against.
//!
//! The protocol: compute a saliency map for each image's true label,
//! upsample it to input resolution, and for each fraction `p` zero the
//! top `p * H * W` pixels (in normalized space, i.e. the per-channel
//! dataset mean in raw space) across all channels, then re-measure top-1
//! accuracy. Ties in saliency order break by row-major pixel index, so
//! every curve is reproducible bit for bit given (seed, spec, weights).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{FaError, Result};
use crate::interpret::{fa_attribution, gradcam_oracle, MethodTag, SaliencyMap};
use crate::model::FaModel;
use crate::tensor::Tensor;

/// Forward batch size for mask scoring.
const SCORE_BATCH: usize = 200;

/// Randomized-mask saliency configuration.
#[derive(Clone, Copy, Debug)]
pub struct RiseSpec {
    pub num_masks: usize,
    /// Low-resolution mask grid is `grid x grid` cells.
    pub grid: usize,
    /// Probability a cell is kept (mask value 1).
    pub keep_prob: f32,
    /// Upsample cells bilinearly; nearest-neighbor otherwise.
    pub bilinear: bool,
}

impl Default for RiseSpec {
    fn default() -> Self {
        RiseSpec { num_masks: 4000, grid: 7, keep_prob: 0.5, bilinear: true }
    }
}

impl RiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_masks == 0 {
            return Err(FaError::Config("rise: num_masks must be >= 1".into()));
        }
        if self.grid == 0 {
            return Err(FaError::Config("rise: grid must be >= 1".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(FaError::Config(format!(
                "rise: keep probability {} outside (0,1)",
                self.keep_prob
            )));
        }
        Ok(())
    }
}

/// Sliding-patch occlusion configuration. The occlusion value is in
/// normalized input space (0 = dataset mean in raw space).
#[derive(Clone, Copy, Debug)]
pub struct KOccSpec {
    pub patch: usize,
    pub stride: usize,
    pub occlusion_value: f32,
}

impl KOccSpec {
    /// Conventional defaults: patch of an eighth of the image side,
    /// stride of half a patch, mean-value occlusion.
    pub fn for_image_side(side: usize) -> KOccSpec {
        let patch = (side / 8).max(2);
        KOccSpec { patch, stride: (patch / 2).max(1), occlusion_value: 0.0 }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.patch == 0 || self.stride == 0 {
            return Err(FaError::Config("occlusion: patch and stride must be >= 1".into()));
        }
        if self.patch > h || self.patch > w {
            return Err(FaError::Config(format!(
                "occlusion: patch {} does not fit in {h}x{w}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Which saliency map drives an evaluation.
#[derive(Clone, Debug)]
pub enum SaliencySource {
    FaAverage { layer: usize },
    GradCam { layer: usize },
    Rise { spec: RiseSpec, seed: u64 },
    KOcc { spec: KOccSpec },
    Random { seed: u64 },
}

impl SaliencySource {
    pub fn method(&self) -> MethodTag {
        match self {
            SaliencySource::FaAverage { .. } => MethodTag::FaAverage,
            SaliencySource::GradCam { .. } => MethodTag::GradCam,
            SaliencySource::Rise { .. } => MethodTag::Rise,
            SaliencySource::KOcc { .. } => MethodTag::KOcc,
            SaliencySource::Random { .. } => MethodTag::Random,
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match self {
            SaliencySource::FaAverage { layer } | SaliencySource::GradCam { layer } => Some(*layer),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// RISE
// ---------------------------------------------------------------------------

/// Generates the randomized masks at input resolution, values in `[0,1]`.
/// Cell draw order is fixed (mask-major, row-major cells), so the set is
/// a pure function of (spec, seed, h, w).
pub fn rise_masks(spec: &RiseSpec, h: usize, w: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let g = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(spec.num_masks);
    for _ in 0..spec.num_masks {
        let cells: Vec<f32> = (0..g * g)
            .map(|_| if rng.gen::<f32>() < spec.keep_prob { 1.0 } else { 0.0 })
            .collect();
        let mut mask = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                mask[y * w + x] = if spec.bilinear {
                    bilinear_cell_sample(&cells, g, y, x, h, w)
                } else {
                    cells[(y * g / h) * g + (x * g / w)]
                };
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

fn bilinear_cell_sample(cells: &[f32], g: usize, y: usize, x: usize, h: usize, w: usize) -> f32 {
    let sample = |q: usize, size: usize| -> (usize, usize, f32) {
        let u = (q as f32 + 0.5) * g as f32 / size as f32 - 0.5;
        let i0 = u.floor();
        let frac = u - i0;
        let a = (i0 as isize).clamp(0, g as isize - 1) as usize;
        let b = (i0 as isize + 1).clamp(0, g as isize - 1) as usize;
        (a, b, frac)
    };
    let (y0, y1, fy) = sample(y, h);
    let (x0, x1, fx) = sample(x, w);
    let v00 = cells[y0 * g + x0];
    let v01 = cells[y0 * g + x1];
    let v10 = cells[y1 * g + x0];
    let v11 = cells[y1 * g + x1];
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// RISE accumulation over caller-provided masks:
/// `saliency = sum_m score_m * mask_m / (num_masks * keep_prob)` where
/// `score_m` is the model's logit for `class_id` on the masked image.
/// Masks are scored in fixed batches and accumulated in mask order.
pub fn rise_saliency_from_masks(
    model: &FaModel,
    image: &Tensor,
    class_id: usize,
    masks: &[Vec<f32>],
    keep_prob: f32,
) -> Result<SaliencyMap> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(FaError::Contract("rise expects a single image".into()));
    }
    if masks.is_empty() {
        return Err(FaError::Config("rise: need at least one mask".into()));
    }
    let hw = h * w;
    let mut values = vec![0.0f64; hw];
    for chunk in masks.chunks(SCORE_BATCH) {
        let mut batch = Tensor::zeros(&[chunk.len(), c, h, w]);
        for (m, mask) in chunk.iter().enumerate() {
            if mask.len() != hw {
                return Err(FaError::Shape(format!(
                    "mask has {} values for a {h}x{w} image",
                    mask.len()
                )));
            }
            let dst = &mut batch.data_mut()[m * c * hw..(m + 1) * c * hw];
            for ch in 0..c {
                for p in 0..hw {
                    dst[ch * hw + p] = image.data()[ch * hw + p] * mask[p];
                }
            }
        }
        let logits = model.logits(&batch)?;
        let (_, classes) = logits.dims2()?;
        if class_id >= classes {
            return Err(FaError::Bounds(format!("class {class_id} outside 0..{classes}")));
        }
        for (m, mask) in chunk.iter().enumerate() {
            let score = logits.data()[m * classes + class_id] as f64;
            for (acc, &mv) in values.iter_mut().zip(mask) {
                *acc += score * mv as f64;
            }
        }
    }
    let norm = 1.0 / (masks.len() as f64 * keep_prob as f64);
    for v in &mut values {
        *v *= norm;
    }
    SaliencyMap::new(values, h, w, class_id, None, MethodTag::Rise)
}

/// Randomized-mask saliency; deterministic given `seed`.
pub fn rise_saliency(
    model: &FaModel,
    image: &Tensor,
    class_id: usize,
    spec: &RiseSpec,
    seed: u64,
) -> Result<SaliencyMap> {
    let (_, _, h, w) = image.dims4()?;
    let masks = rise_masks(spec, h, w, seed)?;
    rise_saliency_from_masks(model, image, class_id, &masks, spec.keep_prob)
}

// ---------------------------------------------------------------------------
// K-Occlusion
// ---------------------------------------------------------------------------

fn occlusion_positions(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut q = 0usize;
    while q + patch <= size {
        pos.push(q);
        q += stride;
    }
    let last = size - patch;
    if pos.last() != Some(&last) {
        pos.push(last);
    }
    pos
}

/// Occlusion sensitivity: slides a patch over the image, scores each
/// occluded copy, and spreads `max(0, base - occluded)` over the covered
/// pixels, averaging where patches overlap.
pub fn k_occlusion_saliency(
    model: &FaModel,
    image: &Tensor,
    class_id: usize,
    spec: &KOccSpec,
) -> Result<SaliencyMap> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(FaError::Contract("occlusion expects a single image".into()));
    }
    spec.validate(h, w)?;
    if class_id >= model.config.num_classes {
        return Err(FaError::Bounds(format!(
            "class {class_id} outside 0..{}",
            model.config.num_classes
        )));
    }
    let hw = h * w;
    let base = model.logits(image)?.data()[class_id] as f64;

    let ys = occlusion_positions(h, spec.patch, spec.stride);
    let xs = occlusion_positions(w, spec.patch, spec.stride);
    let positions: Vec<(usize, usize)> =
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let mut drop_sum = vec![0.0f64; hw];
    let mut cover = vec![0u32; hw];
    for chunk in positions.chunks(SCORE_BATCH) {
        let mut batch = Tensor::zeros(&[chunk.len(), c, h, w]);
        for (m, &(py, px)) in chunk.iter().enumerate() {
            let dst = &mut batch.data_mut()[m * c * hw..(m + 1) * c * hw];
            dst.copy_from_slice(image.data());
            for ch in 0..c {
                for y in py..py + spec.patch {
                    for x in px..px + spec.patch {
                        dst[(ch * h + y) * w + x] = spec.occlusion_value;
                    }
                }
            }
        }
        let logits = model.logits(&batch)?;
        let (_, classes) = logits.dims2()?;
        for (m, &(py, px)) in chunk.iter().enumerate() {
            let occluded = logits.data()[m * classes + class_id] as f64;
            let drop = (base - occluded).max(0.0);
            for y in py..py + spec.patch {
                for x in px..px + spec.patch {
                    drop_sum[y * w + x] += drop;
                    cover[y * w + x] += 1;
                }
            }
        }
    }
    let values: Vec<f64> = drop_sum
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    SaliencyMap::new(values, h, w, class_id, None, MethodTag::KOcc)
}

// ---------------------------------------------------------------------------
// random baseline
// ---------------------------------------------------------------------------

/// Uniform random saliency, keyed by (seed, image index) so parallel or
/// out-of-order evaluation cannot change the maps.
pub fn random_saliency(h: usize, w: usize, class_id: usize, seed: u64, image_index: usize) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (image_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let values: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    SaliencyMap { values, height: h, width: w, class_id, layer_index: None, method: MethodTag::Random }
}

// ---------------------------------------------------------------------------
// saliency dispatch + removal protocol
// ---------------------------------------------------------------------------

/// Computes the saliency map for one dataset image's true label.
pub fn compute_saliency(
    model: &FaModel,
    ds: &Dataset,
    image_index: usize,
    source: &SaliencySource,
) -> Result<SaliencyMap> {
    let label = *ds
        .labels
        .get(image_index)
        .ok_or_else(|| FaError::Bounds(format!("image {image_index} outside dataset")))?;
    let image = ds.normalized_image(image_index)?;
    match source {
        SaliencySource::FaAverage { layer } => {
            let (_, features) = model.forward(&image, true)?;
            let ownership = model.config.channel_ownership();
            fa_attribution(&features.expect("captured"), 0, *layer, label, &ownership)
        }
        SaliencySource::GradCam { layer } => gradcam_oracle(model, &image, label, *layer),
        SaliencySource::Rise { spec, seed } => {
            let per_image = seed ^ (image_index as u64).wrapping_mul(0x517c_c1b7_2722_0a95);
            rise_saliency(model, &image, label, spec, per_image)
        }
        SaliencySource::KOcc { spec } => k_occlusion_saliency(model, &image, label, spec),
        SaliencySource::Random { seed } => {
            let (_, _, h, w) = image.dims4()?;
            Ok(random_saliency(h, w, label, *seed, image_index))
        }
    }
}

/// Nearest-neighbor resize to the input resolution.
pub fn upsample_nearest(map: &SaliencyMap, h: usize, w: usize) -> SaliencyMap {
    if map.height == h && map.width == w {
        return map.clone();
    }
    let mut values = vec![0.0f64; h * w];
    for y in 0..h {
        let sy = y * map.height / h;
        for x in 0..w {
            let sx = x * map.width / w;
            values[y * w + x] = map.values[sy * map.width + sx];
        }
    }
    SaliencyMap { values, height: h, width: w, ..map.clone() }
}

/// Pixel order of descending saliency; exact ties break by row-major
/// index (ascending), which pins the removal sets.
pub fn removal_order(map: &SaliencyMap) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..map.values.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        map.values[b as usize]
            .total_cmp(&map.values[a as usize])
            .then(a.cmp(&b))
    });
    idx
}

/// Zeroes the first `k` pixels of `order` across all channels of a
/// normalized image. Idempotent by construction.
pub fn apply_removal(image: &Tensor, order: &[u32], k: usize) -> Result<Tensor> {
    let (_, c, h, w) = image.dims4()?;
    let hw = h * w;
    let mut out = image.clone();
    for &p in &order[..k.min(order.len())] {
        for ch in 0..c {
            out.data_mut()[ch * hw + p as usize] = 0.0;
        }
    }
    Ok(out)
}

/// Accuracy-vs-fraction-removed curve for one saliency source.
#[derive(Clone, Debug)]
pub struct RemovalCurve {
    pub method: MethodTag,
    pub layer: Option<usize>,
    /// `(fraction_removed, top1_accuracy)`, fractions as given.
    pub points: Vec<(f64, f64)>,
    pub dataset_id: String,
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(FaError::Contract("empty fraction list".into()));
    }
    if fractions[0] != 0.0 {
        return Err(FaError::Contract("fractions must start at 0".into()));
    }
    for pair in fractions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(FaError::Contract(format!(
                "fractions must be strictly increasing, got {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    if fractions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(FaError::Contract("fractions must lie in [0,1]".into()));
    }
    Ok(())
}

/// Runs the removal protocol: true-label saliency per image, then top-p
/// removal and re-scoring for every fraction.
pub fn pixel_removal_curve(
    model: &FaModel,
    ds: &Dataset,
    source: &SaliencySource,
    fractions: &[f64],
) -> Result<RemovalCurve> {
    if ds.is_empty() {
        return Err(FaError::Contract("removal curve over an empty dataset".into()));
    }
    check_fractions(fractions)?;
    let (_, h, w) = ds.dims();
    let hw = h * w;

    let orders: Vec<Vec<u32>> = (0..ds.len())
        .map(|i| {
            let map = compute_saliency(model, ds, i, source)?;
            Ok(removal_order(&upsample_nearest(&map, h, w)))
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(fractions.len());
    for &p in fractions {
        let k = (p * hw as f64).round() as usize;
        let mut correct = 0usize;
        let idxs: Vec<usize> = (0..ds.len()).collect();
        for chunk in idxs.chunks(128) {
            let (images, labels) = ds.normalized_batch(chunk)?;
            let (_, c, _, _) = images.dims4()?;
            let mut masked = images;
            for (bi, &i) in chunk.iter().enumerate() {
                let dst = &mut masked.data_mut()[bi * c * hw..(bi + 1) * c * hw];
                for &px in &orders[i][..k.min(hw)] {
                    for ch in 0..c {
                        dst[ch * hw + px as usize] = 0.0;
                    }
                }
            }
            let logits = model.logits(&masked)?;
            let preds = crate::train::predict_rows(&logits)?;
            correct += preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
        }
        points.push((p, correct as f64 / ds.len() as f64));
    }
    Ok(RemovalCurve { method: source.method(), layer: source.layer(), points, dataset_id: ds.id.clone() })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0f64; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    }
    crate::interpret::pearson(&ranks(a), &ranks(b))
}
