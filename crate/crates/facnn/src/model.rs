//! Model assembly: stacks of [`FaBlock`]s with a pooling or linear head,
//! per-layer feature capture, and checkpoint persistence.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};
use crate::layers::{kaiming_uniform, l1_normalize, BatchNorm2d, BlockVars, FaBlock, PoolHead, SkipKind, L1_EPS};
use crate::tensor::autodiff::Var;
use crate::tensor::{kernels, Tensor};

/// Classifier head selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Grouped global-average pooling + L1 normalization.
    Pooling,
    /// Flatten + fully connected layer (ablation).
    Linear,
}

/// Everything needed to rebuild a model deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Layer indices after which a 2x2 max pool halves the resolution.
    pub pool_after: Vec<usize>,
    pub head: HeadKind,
    pub skip: SkipKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The full-size configuration: 24 layers, 200 channels, 10 classes,
    /// 32x32 RGB input, pooling after layers 8 and 16.
    fn default() -> Self {
        ModelConfig {
            num_layers: 24,
            channels: 200,
            num_classes: 10,
            input_channels: 3,
            input_height: 32,
            input_width: 32,
            pool_after: vec![8, 16],
            head: HeadKind::Pooling,
            skip: SkipKind::Dampened,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model that trains on MNIST in minutes.
    pub fn tiny_mnist() -> Self {
        ModelConfig {
            num_layers: 8,
            channels: 40,
            num_classes: 10,
            input_channels: 1,
            input_height: 28,
            input_width: 28,
            pool_after: vec![4],
            head: HeadKind::Pooling,
            skip: SkipKind::Dampened,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(FaError::Config("num_layers must be >= 1".into()));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(FaError::Config("channels and num_classes must be >= 1".into()));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(FaError::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.head == HeadKind::Pooling && self.channels % self.num_classes != 0 {
            return Err(FaError::Config(format!(
                "pooling head needs channels ({}) divisible by classes ({})",
                self.channels, self.num_classes
            )));
        }
        let mut prev = 0usize;
        for &p in &self.pool_after {
            if p == 0 || p <= prev {
                return Err(FaError::Config(format!(
                    "pool_after must be strictly increasing and >= 1, got {:?}",
                    self.pool_after
                )));
            }
            if p >= self.num_layers {
                return Err(FaError::Config(format!(
                    "pool_after index {p} must be < num_layers {}",
                    self.num_layers
                )));
            }
            prev = p;
        }
        let div = 1usize << self.pool_after.len();
        if self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(FaError::Config(format!(
                "input {}x{} not divisible by 2^{} pooling stages",
                self.input_height,
                self.input_width,
                self.pool_after.len()
            )));
        }
        Ok(())
    }

    pub fn maps_per_class(&self) -> usize {
        self.channels / self.num_classes
    }

    /// Static channel -> class map of the pooling head: channel `k`
    /// belongs to class `k / R`. Pure function of the configuration.
    pub fn channel_ownership(&self) -> Vec<usize> {
        let r = self.maps_per_class();
        (0..self.channels).map(|k| k / r).collect()
    }

    /// Spatial size of the captured feature map `X_layer` (post-pool).
    pub fn spatial_at_layer(&self, layer: usize) -> (usize, usize) {
        let pools = self.pool_after.iter().filter(|&&p| p <= layer).count();
        (self.input_height >> pools, self.input_width >> pools)
    }
}

/// Per-layer post-activation feature maps `X_1 .. X_{N_L}` captured during
/// a forward pass (post-pool where a pooling stage applies).
#[derive(Clone, Debug)]
pub struct FeatureStack {
    layers: Vec<Tensor>,
}

impl FeatureStack {
    pub(crate) fn new(layers: Vec<Tensor>) -> Self {
        FeatureStack { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// 1-based access matching the depth index `L`.
    pub fn layer(&self, l: usize) -> Result<&Tensor> {
        if l == 0 || l > self.layers.len() {
            return Err(FaError::Bounds(format!(
                "layer {l} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }
}

/// Trainable head state.
#[derive(Clone, Debug)]
pub enum Head {
    Pooling(PoolHead),
    Linear { weight: Tensor, bias: Tensor },
}

/// Result of a gradient-tracked forward pass.
pub struct Traced {
    /// Final logits: L1-normalized pre-logits for the pooling head, raw
    /// affine outputs for the linear head.
    pub logits: Var,
    /// Pre-normalization class scores `Y` (same node as `logits` for the
    /// linear head).
    pub prelogits: Var,
    /// Captured `X_1 .. X_{N_L}` when requested, else empty.
    pub features: Vec<Var>,
    /// Trainable parameter leaves, in the model's canonical name order.
    pub params: Vec<(String, Var)>,
}

/// A feature-aligned CNN: `num_layers` blocks plus a classifier head.
#[derive(Clone, Debug)]
pub struct FaModel {
    pub config: ModelConfig,
    pub blocks: Vec<FaBlock>,
    pub head: Head,
}

impl FaModel {
    /// Builds a model with seeded initial weights: conv kernels are
    /// uniform in `±sqrt(6/fan_in)`, biases zero, batch norm at identity.
    pub fn new(config: ModelConfig) -> Result<FaModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.channels;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for layer in 1..=config.num_layers {
            let cin = if layer == 1 { config.input_channels } else { k };
            blocks.push(FaBlock {
                layer_index: layer,
                skip: config.skip,
                conv_weight: kaiming_uniform(&[k, cin, 3, 3], cin * 9, &mut rng),
                conv_bias: Tensor::zeros(&[k]),
                bn: BatchNorm2d::identity(k),
            });
        }
        let head = match config.head {
            HeadKind::Pooling => Head::Pooling(PoolHead::new(config.num_classes, k)?),
            HeadKind::Linear => {
                let (hf, wf) = config.spatial_at_layer(config.num_layers);
                let din = k * hf * wf;
                Head::Linear {
                    weight: kaiming_uniform(&[config.num_classes, din], din, &mut rng),
                    bias: Tensor::zeros(&[config.num_classes]),
                }
            }
        };
        Ok(FaModel { config, blocks, head })
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let cfg = &self.config;
        if c != cfg.input_channels || h != cfg.input_height || w != cfg.input_width {
            return Err(FaError::Config(format!(
                "input {c}x{h}x{w} does not match configured {}x{}x{}",
                cfg.input_channels, cfg.input_height, cfg.input_width
            )));
        }
        Ok(())
    }

    fn head_eval(&self, x: &Tensor) -> Result<Tensor> {
        match &self.head {
            Head::Pooling(head) => {
                let y = head.forward(x)?;
                l1_normalize(&y, L1_EPS)
            }
            Head::Linear { weight, bias } => {
                let (n, c, h, w) = x.dims4()?;
                let flat = x.reshaped(&[n, c * h * w])?;
                kernels::linear_forward(&flat, weight, bias)
            }
        }
    }

    /// Inference forward pass (running batch-norm statistics). Returns the
    /// logits and, when `capture` is set, the per-layer feature stack.
    pub fn forward(&self, images: &Tensor, capture: bool) -> Result<(Tensor, Option<FeatureStack>)> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut captured = Vec::new();
        for block in &self.blocks {
            x = block.forward_eval(&x)?;
            if self.config.pool_after.contains(&block.layer_index) {
                x = kernels::max_pool2d(&x, 2, 2)?.0;
            }
            if capture {
                captured.push(x.clone());
            }
        }
        let logits = self.head_eval(&x)?;
        Ok((logits, capture.then(|| FeatureStack::new(captured))))
    }

    /// Inference logits only.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, false)?.0)
    }

    fn make_param_vars(&self) -> (Vec<BlockVars>, Vec<(String, Var)>) {
        let mut named = Vec::new();
        let mut block_vars = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let vars = block.make_vars(true);
            let l = block.layer_index;
            named.push((format!("block{l:02}.conv.weight"), vars.conv_weight.clone()));
            named.push((format!("block{l:02}.conv.bias"), vars.conv_bias.clone()));
            named.push((format!("block{l:02}.bn.gamma"), vars.gamma.clone()));
            named.push((format!("block{l:02}.bn.beta"), vars.beta.clone()));
            block_vars.push(vars);
        }
        if let Head::Linear { weight, bias } = &self.head {
            named.push(("head.weight".into(), Var::leaf(weight.clone(), true)));
            named.push(("head.bias".into(), Var::leaf(bias.clone(), true)));
        }
        (block_vars, named)
    }

    fn traced_head(&self, x: Var, params: &[(String, Var)]) -> Result<(Var, Var)> {
        match &self.head {
            Head::Pooling(head) => {
                let y = head.forward_var(&x)?;
                Ok((y.l1_normalize(L1_EPS)?, y))
            }
            Head::Linear { .. } => {
                let weight = params.iter().find(|(n, _)| n == "head.weight").unwrap().1.clone();
                let bias = params.iter().find(|(n, _)| n == "head.bias").unwrap().1.clone();
                let n = x.shape()[0];
                let numel: usize = x.shape().iter().product();
                let flat = x.reshape(&[n, numel / n])?;
                let out = flat.linear(&weight, &bias)?;
                Ok((out.clone(), out))
            }
        }
    }

    /// Gradient-tracked forward with eval-mode batch norm. Used by the
    /// attribution oracle; does not mutate the model.
    pub fn traced(&self, images: &Tensor, capture: bool) -> Result<Traced> {
        self.check_input(images)?;
        let (block_vars, params) = self.make_param_vars();
        let mut x = Var::leaf(images.clone(), false);
        let mut features = Vec::new();
        for (block, vars) in self.blocks.iter().zip(&block_vars) {
            x = block.forward_var_eval(&x, vars)?;
            if self.config.pool_after.contains(&block.layer_index) {
                x = x.max_pool2d(2, 2)?;
            }
            if capture {
                features.push(x.clone());
            }
        }
        let (logits, prelogits) = self.traced_head(x, &params)?;
        Ok(Traced { logits, prelogits, features, params })
    }

    /// Gradient-tracked forward with batch statistics; updates running
    /// estimates. Used by the training loop.
    pub fn traced_train(&mut self, images: &Tensor, capture: bool) -> Result<Traced> {
        self.check_input(images)?;
        let (block_vars, params) = self.make_param_vars();
        let mut x = Var::leaf(images.clone(), false);
        let mut features = Vec::new();
        let pool_after = self.config.pool_after.clone();
        for (i, vars) in block_vars.iter().enumerate() {
            x = self.blocks[i].forward_var_train(&x, vars)?;
            if pool_after.contains(&self.blocks[i].layer_index) {
                x = x.max_pool2d(2, 2)?;
            }
            if capture {
                features.push(x.clone());
            }
        }
        let (logits, prelogits) = self.traced_head(x, &params)?;
        Ok(Traced { logits, prelogits, features, params })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            let l = block.layer_index;
            out.push((format!("block{l:02}.conv.weight"), &block.conv_weight));
            out.push((format!("block{l:02}.conv.bias"), &block.conv_bias));
            out.push((format!("block{l:02}.bn.gamma"), &block.bn.gamma));
            out.push((format!("block{l:02}.bn.beta"), &block.bn.beta));
            out.push((format!("block{l:02}.bn.running_mean"), &block.bn.running_mean));
            out.push((format!("block{l:02}.bn.running_var"), &block.bn.running_var));
        }
        if let Head::Linear { weight, bias } = &self.head {
            out.push(("head.weight".into(), weight));
            out.push(("head.bias".into(), bias));
        }
        out
    }

    pub fn named_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("block") {
            let (idx, field) = rest.split_once('.')?;
            let l: usize = idx.parse().ok()?;
            let block = self.blocks.get_mut(l.checked_sub(1)?)?;
            return match field {
                "conv.weight" => Some(&mut block.conv_weight),
                "conv.bias" => Some(&mut block.conv_bias),
                "bn.gamma" => Some(&mut block.bn.gamma),
                "bn.beta" => Some(&mut block.bn.beta),
                "bn.running_mean" => Some(&mut block.bn.running_mean),
                "bn.running_var" => Some(&mut block.bn.running_var),
                _ => None,
            };
        }
        match (&mut self.head, name) {
            (Head::Linear { weight, .. }, "head.weight") => Some(weight),
            (Head::Linear { bias, .. }, "head.bias") => Some(bias),
            _ => None,
        }
    }

    // -- checkpoint io -------------------------------------------------

    /// Writes the binary checkpoint: `FACN` magic, format version, the
    /// config as length-prefixed JSON, then a table of named tensors with
    /// raw little-endian f32 payloads. Round-trips bit-exactly.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| FaError::Checkpoint(format!("config serialization failed: {e}")))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(config_json.as_bytes())?;
        let tensors = self.named_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`save_checkpoint`]. Every tensor is
    /// checked against the shape the embedded config implies; the first
    /// offender is named in the error.
    pub fn load_checkpoint(path: &Path) -> Result<FaModel> {
        let mut r = CheckpointReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.read(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FaError::Checkpoint(format!("bad magic {magic:?}, expected \"FACN\"")));
        }
        let version = r.read_u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FaError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = r.read_u32("config length")? as usize;
        if config_len > 1 << 20 {
            return Err(FaError::Checkpoint(format!("implausible config length {config_len}")));
        }
        let mut config_bytes = vec![0u8; config_len];
        r.read(&mut config_bytes, "config json")?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| FaError::Checkpoint(format!("config json: {e}")))?;
        let mut model = FaModel::new(config)?;

        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let count = r.read_u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(FaError::Checkpoint(format!(
                "tensor count {count} does not match {} implied by config",
                expected.len()
            )));
        }
        let mut seen: HashSet<String> = HashSet::new();
        for _ in 0..count {
            let name_len = r.read_u16("tensor name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read(&mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| FaError::Checkpoint("tensor name is not utf-8".into()))?;
            let mut meta = [0u8; 2];
            r.read(&mut meta, "tensor dtype/rank")?;
            if meta[0] != DTYPE_F32 {
                return Err(FaError::Checkpoint(format!("tensor {name}: unknown dtype tag {}", meta[0])));
            }
            let rank = meta[1] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u32("tensor dim")? as usize);
            }
            let expected_shape = expected
                .iter()
                .find(|(n, _)| n == &name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| FaError::Checkpoint(format!("unexpected tensor {name}")))?;
            if dims != expected_shape {
                return Err(FaError::Checkpoint(format!(
                    "tensor {name}: shape {dims:?} does not match {expected_shape:?} implied by config"
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(FaError::Checkpoint(format!("duplicate tensor {name}")));
            }
            let numel: usize = dims.iter().product();
            let mut payload = vec![0u8; numel * 4];
            r.read(&mut payload, "tensor payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            *model.named_tensor_mut(&name).expect("validated name") = Tensor::new(dims, data)?;
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FACN";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

struct CheckpointReader<R: Read> {
    inner: R,
}

impl<R: Read> CheckpointReader<R> {
    fn new(inner: R) -> Self {
        CheckpointReader { inner }
    }

    fn read(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                FaError::Checkpoint(format!("truncated while reading {what}"))
            }
            _ => FaError::Io(e),
        })
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}
