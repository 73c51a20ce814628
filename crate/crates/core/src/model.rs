//! Two-stage network: a segmentation stage producing a reduced-resolution
//! defect logit map, and a classification stage that turns the segmentation
//! features and map into a single per-image logit.
//!
//! The two gradient stops sit in the forward graph as `detach()` calls:
//! the pooled output-map shortcuts (a) and every tensor crossing from the
//! segmentation stage into the classification stage (b).

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::conv2d;
use crate::pool::max_pool2x2;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const SEG_KERNEL: usize = 5;
const WIDE_KERNEL: usize = 15;
const CLS_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub downsample_factor: usize,
    /// Stop gradients through the pooled output-map shortcuts, (a).
    pub grad_stop_shortcuts: bool,
    /// Stop all gradients from the classification stage into the
    /// segmentation stage, (b).
    pub grad_stop_seg_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            base_channels: 32,
            downsample_factor: 8,
            grad_stop_shortcuts: true,
            grad_stop_seg_features: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample_factor, 2 | 4 | 8 | 16) {
            return Err(Error::Config(format!(
                "model.downsample_factor must be one of 2, 4, 8, 16 (got {})",
                self.downsample_factor
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("model.base_channels must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("model.input_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn pool_count(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

/// A trainable tensor with a stable, dotted name.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
}

/// An ordered, named parameter set.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    fn push(&mut self, name: String, var: Var) -> Var {
        self.params.push(Param { name, var: var.clone() });
        var
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: Var,
    bias: Var,
    /// Per-channel affine of the per-sample feature normalization.
    norm: Option<(Var, Var)>,
    relu: bool,
    pad: usize,
}

impl ConvUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let channels = self.bias.dim(0)?;
        let mut y = conv2d(x, self.weight.as_tensor(), self.pad)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, channels, 1, 1))?)?;
        if let Some((gamma, beta)) = &self.norm {
            y = instance_norm(&y)?
                .broadcast_mul(&gamma.as_tensor().reshape((1, channels, 1, 1))?)?
                .broadcast_add(&beta.as_tensor().reshape((1, channels, 1, 1))?)?;
        }
        Ok(if self.relu { y.relu()? } else { y })
    }
}

/// Normalizes each channel of each sample over (H, W); identical in train
/// and eval. A 1x1 map is normalized across its channels instead.
fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let flat = if dims[2] * dims[3] > 1 { x.flatten_from(2)? } else { x.flatten_from(1)? };
    let axis = flat.rank() - 1;
    let mean = flat.mean_keepdim(axis)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(axis)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape(dims)?)
}

struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &Device::Cpu)? * value)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn conv(&mut self, set: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, norm: bool, relu: bool) -> Result<ConvUnit> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = set.push(format!("{name}.weight"), self.normal(&[cout, cin, k, k], std)?);
        let bias = set.push(format!("{name}.bias"), self.constant(&[cout], 0.0)?);
        let norm = if norm {
            let gamma = set.push(format!("{name}.norm.gamma"), self.constant(&[cout], 1.0)?);
            let beta = set.push(format!("{name}.norm.beta"), self.constant(&[cout], 0.0)?);
            Some((gamma, beta))
        } else {
            None
        };
        Ok(ConvUnit { weight, bias, norm, relu, pad: k / 2 })
    }
}

/// Outputs of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// (N, 32*base, H/d, W/d)
    pub seg_features: Tensor,
    /// (N, 1, H/d, W/d) raw logits
    pub seg_output_map: Tensor,
    /// (N,)
    pub cls_logit: Tensor,
}

#[derive(Clone, Debug)]
pub struct TwoStageModel {
    config: ModelConfig,
    dtype: DType,
    seg_params: ParamSet,
    cls_params: ParamSet,
    seg_blocks: Vec<Vec<ConvUnit>>,
    wide: ConvUnit,
    seg_out: ConvUnit,
    cls_convs: Vec<ConvUnit>,
    fc_weight: Var,
    fc_bias: Var,
}

/// Builds an f32 model with deterministic initialization for `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<TwoStageModel> {
    TwoStageModel::new(config, seed, DType::F32)
}

impl TwoStageModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Config(format!("unsupported model dtype {dtype:?}")));
        }
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), dtype };
        let mut seg = ParamSet::default();
        let mut cls = ParamSet::default();
        let b = config.base_channels;

        let mut seg_blocks = Vec::new();
        let mut cin = config.input_channels;
        for (i, (layers, cout)) in [(2, b), (3, 2 * b), (4, 4 * b)].into_iter().enumerate() {
            let mut block = Vec::new();
            for j in 0..layers {
                let name = format!("seg.block{}.conv{}", i + 1, j + 1);
                block.push(init.conv(&mut seg, &name, cin, cout, SEG_KERNEL, true, true)?);
                cin = cout;
            }
            seg_blocks.push(block);
        }
        let feat_channels = 32 * b;
        let wide = init.conv(&mut seg, "seg.wide", cin, feat_channels, WIDE_KERNEL, true, true)?;
        let seg_out = init.conv(&mut seg, "seg.out", feat_channels, 1, 1, false, false)?;

        let mut cls_convs = Vec::new();
        let mut cin = feat_channels + 1;
        for (i, cout) in CLS_CHANNELS.into_iter().enumerate() {
            cls_convs.push(init.conv(&mut cls, &format!("cls.conv{}", i + 1), cin, cout, SEG_KERNEL, true, true)?);
            cin = cout;
        }
        let fc_in = 2 * CLS_CHANNELS[2] + 2;
        let fc_weight = cls.push("cls.fc.weight".into(), init.normal(&[1, fc_in], (1.0 / fc_in as f64).sqrt())?);
        let fc_bias = cls.push("cls.fc.bias".into(), init.constant(&[1], 0.0)?);

        Ok(Self {
            config: config.clone(),
            dtype,
            seg_params: seg,
            cls_params: cls,
            seg_blocks,
            wide,
            seg_out,
            cls_convs,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seg_params(&self) -> &ParamSet {
        &self.seg_params
    }

    pub fn cls_params(&self) -> &ParamSet {
        &self.cls_params
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.seg_params.iter().chain(self.cls_params.iter())
    }

    /// Switches the gradient stops without touching parameters.
    pub fn set_grad_stops(&mut self, shortcuts: bool, seg_features: bool) {
        self.config.grad_stop_shortcuts = shortcuts;
        self.config.grad_stop_seg_features = seg_features;
    }

    /// Copies of all parameter values, in `params()` order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self.params().map(|p| p.var.as_tensor().copy()).collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, values: &[Tensor]) -> Result<()> {
        let params: Vec<_> = self.params().collect();
        if params.len() != values.len() {
            return Err(Error::Shape(format!("restore: expected {} tensors, got {}", params.len(), values.len())));
        }
        for (p, v) in params.into_iter().zip(values) {
            p.var.set(v)?;
        }
        Ok(())
    }

    /// Checks an (N, C, H, W) batch against the configuration.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let d = self.config.downsample_factor;
        match dims {
            &[_, c, h, w] if c == self.config.input_channels && h % d == 0 && w % d == 0 && h > 0 && w > 0 => Ok(()),
            &[_, c, h, w] if c == self.config.input_channels => Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the downsample factor {d}"
            ))),
            other => Err(Error::Shape(format!(
                "expected (N, {}, H, W) input, got {other:?}",
                self.config.input_channels
            ))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutputs> {
        self.check_input(x.dims())?;
        let x = x.to_dtype(self.dtype)?;
        let pools = self.config.pool_count();

        let mut h = x;
        for (i, block) in self.seg_blocks.iter().enumerate() {
            for unit in block {
                h = unit.forward(&h)?;
            }
            if i < pools {
                h = h.apply(&max_pool2x2)?;
            }
        }
        for _ in self.seg_blocks.len()..pools {
            h = h.apply(&max_pool2x2)?;
        }
        let seg_features = self.wide.forward(&h)?;
        let seg_output_map = self.seg_out.forward(&seg_features)?;

        let stop_all = self.config.grad_stop_seg_features;
        let stop_shortcut = stop_all || self.config.grad_stop_shortcuts;
        let (feat_in, map_in) = if stop_all {
            (seg_features.detach(), seg_output_map.detach())
        } else {
            (seg_features.clone(), seg_output_map.clone())
        };
        let map_shortcut = if stop_shortcut { seg_output_map.detach() } else { seg_output_map.clone() };

        let mut c = Tensor::cat(&[&feat_in, &map_in], 1)?;
        let (_, _, mh, mw) = c.dims4()?;
        if mh >= 2 && mw >= 2 {
            c = c.apply(&max_pool2x2)?;
        }
        for unit in &self.cls_convs {
            c = unit.forward(&c)?;
        }
        let c = c.flatten_from(2)?;
        let m = map_shortcut.flatten_from(2)?;
        let pooled = Tensor::cat(&[c.max(D::Minus1)?, c.mean(D::Minus1)?, m.max(D::Minus1)?, m.mean(D::Minus1)?], 1)?;
        let cls_logit = pooled
            .matmul(&self.fc_weight.as_tensor().t()?)?
            .broadcast_add(self.fc_bias.as_tensor())?
            .squeeze(1)?;

        Ok(ForwardOutputs { seg_features, seg_output_map, cls_logit })
    }

    /// Forward pass on a single H x W x C image.
    pub fn forward_image(&self, image: &Array3<f32>) -> Result<ForwardOutputs> {
        self.forward(&image_to_tensor(image)?)
    }
}

/// H x W x C array to a (1, C, H, W) f32 tensor.
pub fn image_to_tensor(image: &Array3<f32>) -> Result<Tensor> {
    let (h, w, c) = image.dim();
    let data: Vec<f32> = image.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, h, w, c), &Device::Cpu)?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Splits one backward pass into per-parameter gradients for each set, in
/// parameter order. Parameters the loss does not reach get exact zeros.
pub fn gradient_partition(model: &TwoStageModel, grads: &GradStore) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let collect = |set: &ParamSet| -> Result<Vec<Tensor>> {
        set.iter()
            .map(|p| match grads.get(p.var.as_tensor()) {
                Some(g) => Ok(g.clone()),
                None => Ok(p.var.as_tensor().zeros_like()?),
            })
            .collect()
    };
    Ok((collect(&model.seg_params)?, collect(&model.cls_params)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn micro(shortcuts: bool, features: bool) -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            base_channels: 2,
            downsample_factor: 8,
            grad_stop_shortcuts: shortcuts,
            grad_stop_seg_features: features,
        }
    }

    fn values(model: &TwoStageModel) -> Vec<Vec<f32>> {
        model
            .params()
            .map(|p| p.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&micro(true, true), 11).unwrap();
        let b = build_model(&micro(true, true), 11).unwrap();
        let c = build_model(&micro(true, true), 12).unwrap();
        assert_eq!(values(&a), values(&b));
        assert_ne!(values(&a), values(&c));
    }

    #[test]
    fn parameter_sets_are_disjoint_and_non_empty() {
        let cfg = ModelConfig { base_channels: 32, ..ModelConfig::default() };
        let m = build_model(&cfg, 0).unwrap();
        assert!(!m.seg_params().is_empty());
        assert!(!m.cls_params().is_empty());
        let seg: HashSet<_> = m.seg_params().names().into_iter().collect();
        let cls: HashSet<_> = m.cls_params().names().into_iter().collect();
        assert!(seg.is_disjoint(&cls));
        assert_eq!(seg.len() + cls.len(), m.params().count());
    }

    #[test]
    fn invalid_downsample_factor() {
        let cfg = ModelConfig { downsample_factor: 3, ..micro(false, false) };
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig { base_channels: 0, ..micro(false, false) };
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes() {
        let m = build_model(&ModelConfig { base_channels: 2, ..ModelConfig::default() }, 0).unwrap();
        let out = m.forward(&Tensor::zeros((1, 1, 128, 128), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(out.seg_output_map.dims(), &[1, 1, 16, 16]);
        assert_eq!(out.seg_features.dims(), &[1, 64, 16, 16]);
        assert_eq!(out.cls_logit.dims(), &[1]);

        let err = m.forward(&Tensor::zeros((1, 1, 100, 100), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn shape_follows_downsample_factor() {
        for d in [2usize, 4, 8, 16] {
            let cfg = ModelConfig { downsample_factor: d, ..micro(true, true) };
            let m = build_model(&cfg, 0).unwrap();
            let out = m.forward(&Tensor::zeros((2, 1, 32, 48), DType::F32, &Device::Cpu).unwrap()).unwrap();
            assert_eq!(out.seg_output_map.dims(), &[2, 1, 32 / d, 48 / d]);
            assert_eq!(out.cls_logit.dims(), &[2]);
        }
    }

    #[test]
    fn forward_image_matches_batch_layout() {
        let m = build_model(&micro(true, true), 3).unwrap();
        let img = Array3::from_shape_fn((16, 16, 1), |(y, x, _)| ((y * 16 + x) as f32 / 256.0).sin());
        let a = m.forward_image(&img).unwrap().cls_logit.to_vec1::<f32>().unwrap();
        let b = m.forward_image(&img).unwrap().cls_logit.to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(a[0].is_finite());
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let m = build_model(&micro(true, true), 5).unwrap();
        let snap = m.snapshot().unwrap();
        for p in m.params() {
            p.var.set(&p.var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        m.restore(&snap).unwrap();
        let again = build_model(&micro(true, true), 5).unwrap();
        assert_eq!(values(&m), values(&again));
    }
}
