//! TFormer building blocks.
//!
//! The token mixer here is a *hybrid layer*: a bank of non-learnable poolings
//! (max and avg, several odd kernel sizes, each applied to its own slice of
//! the channels) followed by a pointwise convolution that remixes the
//! extracted features. The feedforward network is *partially connected and
//! shuffled* (PCS-FFN): two grouped 1x1 projections with a channel shuffle
//! between them so the groups exchange information.
//!
//! Every layer comes in two forms: a pure function over `(input, weights)`
//! for one-shot evaluation, and an `*Op` struct that additionally retains the
//! residuals needed for a manual backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, PoolKind, PoolSpec};
use crate::tensor::vjp::{Conv2dOp, GeluOp, LayerNormOp, Pool2dOp, SplitChannelsOp};
use crate::tensor::Tensor;

/// Epsilon of every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Initialization std of conv/linear weights.
pub const INIT_STD: f64 = 0.02;

/// Whether a tensor is a multiplicative weight or an additive one (conv and
/// linear bias vectors, norm shifts). Parameter counting can exclude the
/// additive kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

// ---------------------------------------------------------------------------
// channel partitioning

/// Splits `dim` channels into `n_parts` contiguous slices, as evenly as
/// possible: the first `dim % n_parts` slices get one extra channel.
pub fn partition_channels(dim: usize, n_parts: usize) -> Result<Vec<usize>> {
    if n_parts == 0 {
        return Err(Error::Config("partition into zero parts".into()));
    }
    if dim < n_parts {
        return Err(Error::Config(format!(
            "cannot split {dim} channels into {n_parts} non-empty parts"
        )));
    }
    let base = dim / n_parts;
    let extra = dim % n_parts;
    Ok((0..n_parts)
        .map(|i| if i < extra { base + 1 } else { base })
        .collect())
}

// ---------------------------------------------------------------------------
// non-learnable module

/// Configuration of the non-learnable module: which pooling operators run,
/// at which kernel sizes, and how the channels are divided among the
/// (operator, scale) pairs.
///
/// Pair order is operators-major (avg before max), scales ascending within
/// each operator; the partition is listed in that same order. This fixes the
/// weight layout for serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NlModuleConfig {
    pub operators: Vec<PoolKind>,
    pub scales: Vec<usize>,
    pub partition: Vec<usize>,
}

impl NlModuleConfig {
    pub fn new(operators: Vec<PoolKind>, scales: Vec<usize>, dim: usize) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::Config("no pooling operators".into()));
        }
        if !operators.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config(
                "operators must be unique and ordered avg before max".into(),
            ));
        }
        if scales.is_empty() {
            return Err(Error::Config("no pooling scales".into()));
        }
        if scales.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("scales must be odd: {scales:?}")));
        }
        if !scales.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config("scales must be strictly ascending".into()));
        }
        let partition = partition_channels(dim, operators.len() * scales.len())?;
        Ok(NlModuleConfig {
            operators,
            scales,
            partition,
        })
    }

    /// The full module: avg and max pooling at kernel sizes 3, 5, 7, 9, 11.
    pub fn default_for(dim: usize) -> Result<Self> {
        NlModuleConfig::new(vec![PoolKind::Avg, PoolKind::Max], vec![3, 5, 7, 9, 11], dim)
    }

    /// Channel count the module expects and produces.
    pub fn dim(&self) -> usize {
        self.partition.iter().sum()
    }

    /// `(operator, kernel size, channels)` per partition, in partition order.
    pub fn pairs(&self) -> impl Iterator<Item = (PoolKind, usize, usize)> + '_ {
        self.operators
            .iter()
            .flat_map(|&op| self.scales.iter().map(move |&k| (op, k)))
            .zip(self.partition.iter())
            .map(|((op, k), &c)| (op, k, c))
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = NlModuleConfig::new(self.operators.clone(), self.scales.clone(), self.dim())?;
        if rebuilt.partition != self.partition {
            return Err(Error::Config(format!(
                "partition {:?} is not the canonical split of {} channels",
                self.partition,
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Applies the non-learnable module: split channels per the partition, pool
/// each slice at its (operator, scale) with stride 1 and same-size padding,
/// concatenate in partition order. Channel count and spatial dims are
/// preserved.
pub fn nl_module<T: Scalar>(x: &Tensor<T>, cfg: &NlModuleConfig) -> Result<Tensor<T>> {
    NlModuleOp::new(cfg.clone()).forward(x)
}

#[derive(Debug)]
pub struct NlModuleOp {
    cfg: NlModuleConfig,
    split: SplitChannelsOp,
    pools: Vec<Pool2dOp>,
}

impl NlModuleOp {
    pub fn new(cfg: NlModuleConfig) -> Self {
        let pools = cfg
            .pairs()
            .map(|(op, k, _)| {
                Pool2dOp::new(PoolSpec::same_size(op, k).expect("odd validated scale"))
            })
            .collect();
        NlModuleOp {
            cfg,
            split: SplitChannelsOp::new(),
            pools,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, channels, _, _) = x.shape4()?;
        if channels != self.cfg.dim() {
            return Err(Error::Dimension(format!(
                "nl module configured for {} channels, input has {channels}",
                self.cfg.dim()
            )));
        }
        let parts = self.split.forward(x, &self.cfg.partition)?;
        let mut pooled = Vec::with_capacity(parts.len());
        for (part, pool) in parts.iter().zip(self.pools.iter_mut()) {
            pooled.push(pool.forward(part)?);
        }
        let refs: Vec<&Tensor<T>> = pooled.iter().collect();
        ops::concat_channels(&refs)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g_parts = ops::split_channels(gy, &self.cfg.partition)?;
        let mut dx_parts = Vec::with_capacity(g_parts.len());
        for (g, pool) in g_parts.iter().zip(&self.pools) {
            dx_parts.push(pool.vjp(g)?);
        }
        self.split.vjp(&dx_parts)
    }
}

// ---------------------------------------------------------------------------
// hybrid layer

/// Learnable state of a hybrid layer: just the pointwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridWeights<T: Scalar> {
    /// `[D, D, 1, 1]`
    pub pw_weight: Tensor<T>,
    pub pw_bias: Option<Tensor<T>>,
}

impl<T: Scalar> HybridWeights<T> {
    pub fn init(dim: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        Ok(HybridWeights {
            pw_weight: Tensor::trunc_normal(vec![dim, dim, 1, 1], INIT_STD, rng)?,
            pw_bias: bias.then(|| Tensor::zeros(vec![dim])).transpose()?,
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(HybridWeights {
            pw_weight: Tensor::zeros(self.pw_weight.dims().to_vec())?,
            pw_bias: self
                .pw_bias
                .as_ref()
                .map(|b| Tensor::zeros(b.dims().to_vec()))
                .transpose()?,
        })
    }

    pub fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>),
    ) {
        f(
            format!("{prefix}.pw.weight"),
            ParamKind::Weight,
            &self.pw_weight,
        );
        if let Some(b) = &self.pw_bias {
            f(format!("{prefix}.pw.bias"), ParamKind::Bias, b);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.pw_weight];
        if let Some(b) = &mut self.pw_bias {
            v.push(b);
        }
        v
    }
}

/// Non-learnable module followed by a 1x1 convolution; shape preserved.
pub fn hybrid_layer<T: Scalar>(
    x: &Tensor<T>,
    cfg: &NlModuleConfig,
    w: &HybridWeights<T>,
) -> Result<Tensor<T>> {
    HybridLayerOp::new(cfg.clone()).forward(x, w)
}

#[derive(Debug)]
pub struct HybridLayerOp<T: Scalar> {
    nl: NlModuleOp,
    pw: Conv2dOp<T>,
}

impl<T: Scalar> HybridLayerOp<T> {
    pub fn new(cfg: NlModuleConfig) -> Self {
        HybridLayerOp {
            nl: NlModuleOp::new(cfg),
            pw: Conv2dOp::new(1, 0, 1),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, w: &HybridWeights<T>) -> Result<Tensor<T>> {
        let mixed = self.nl.forward(x)?;
        self.pw.forward(&mixed, &w.pw_weight, w.pw_bias.as_ref())
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, HybridWeights<T>)> {
        let (d_mixed, dw, db) = self.pw.vjp(gy)?;
        let dx = self.nl.vjp(&d_mixed)?;
        Ok((
            dx,
            HybridWeights {
                pw_weight: dw,
                pw_bias: db,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// channel shuffle

/// Permutes channels by viewing them as a `(groups, C/groups)` grid,
/// transposing, and flattening. Values are untouched; applying the shuffle
/// with `C/groups` groups afterwards undoes it.
pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n_batch, channels, h, w) = x.shape4()?;
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "cannot shuffle {channels} channels in {groups} groups"
        )));
    }
    let per_group = channels / groups;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for n in 0..n_batch {
        for out_c in 0..channels {
            // out channel (i, j) of the transposed grid reads in channel (j, i)
            let i = out_c / groups;
            let j = out_c % groups;
            let in_c = j * per_group + i;
            let src = (n * channels + in_c) * hw;
            let dst = (n * channels + out_c) * hw;
            out[dst..dst + hw].copy_from_slice(&x.data()[src..src + hw]);
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Channel index an input channel moves to under [`channel_shuffle`].
pub fn shuffle_destination(channels: usize, groups: usize, in_c: usize) -> usize {
    let per_group = channels / groups;
    let j = in_c / per_group;
    let i = in_c % per_group;
    i * groups + j
}

#[derive(Debug)]
pub struct ShuffleOp {
    groups: usize,
    saved_channels: Option<usize>,
}

impl ShuffleOp {
    pub fn new(groups: usize) -> Self {
        ShuffleOp {
            groups,
            saved_channels: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = channel_shuffle(x, self.groups)?;
        self.saved_channels = Some(x.dims()[1]);
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.saved_channels.ok_or(Error::VjpBeforeForward)?;
        channel_shuffle(gy, channels / self.groups)
    }
}

// ---------------------------------------------------------------------------
// PCS-FFN

/// Expansion ratio and group count of a partially connected shuffled FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcsFfnConfig {
    pub dim: usize,
    pub ratio: usize,
    pub groups: usize,
}

impl PcsFfnConfig {
    pub fn new(dim: usize, ratio: usize, groups: usize) -> Result<Self> {
        let cfg = PcsFfnConfig { dim, ratio, groups };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ratio == 0 || self.groups == 0 {
            return Err(Error::Config("ffn dim/ratio/groups must be positive".into()));
        }
        if self.dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "ffn dim {} not divisible by groups {}",
                self.dim, self.groups
            )));
        }
        if (self.ratio * self.dim) % self.groups != 0 {
            return Err(Error::Config(format!(
                "ffn hidden dim {} not divisible by groups {}",
                self.ratio * self.dim,
                self.groups
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.ratio * self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcsFfnWeights<T: Scalar> {
    /// `[r*D, D/g, 1, 1]`
    pub expand_weight: Tensor<T>,
    pub expand_bias: Option<Tensor<T>>,
    /// `[D, r*D/g, 1, 1]`
    pub compress_weight: Tensor<T>,
    pub compress_bias: Option<Tensor<T>>,
}

impl<T: Scalar> PcsFfnWeights<T> {
    pub fn init(cfg: &PcsFfnConfig, bias: bool, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, g, hidden) = (cfg.dim, cfg.groups, cfg.hidden_dim());
        Ok(PcsFfnWeights {
            expand_weight: Tensor::trunc_normal(vec![hidden, d / g, 1, 1], INIT_STD, rng)?,
            expand_bias: bias.then(|| Tensor::zeros(vec![hidden])).transpose()?,
            compress_weight: Tensor::trunc_normal(vec![d, hidden / g, 1, 1], INIT_STD, rng)?,
            compress_bias: bias.then(|| Tensor::zeros(vec![d])).transpose()?,
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(PcsFfnWeights {
            expand_weight: Tensor::zeros(self.expand_weight.dims().to_vec())?,
            expand_bias: self
                .expand_bias
                .as_ref()
                .map(|b| Tensor::zeros(b.dims().to_vec()))
                .transpose()?,
            compress_weight: Tensor::zeros(self.compress_weight.dims().to_vec())?,
            compress_bias: self
                .compress_bias
                .as_ref()
                .map(|b| Tensor::zeros(b.dims().to_vec()))
                .transpose()?,
        })
    }

    pub fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>),
    ) {
        f(
            format!("{prefix}.expand.weight"),
            ParamKind::Weight,
            &self.expand_weight,
        );
        if let Some(b) = &self.expand_bias {
            f(format!("{prefix}.expand.bias"), ParamKind::Bias, b);
        }
        f(
            format!("{prefix}.compress.weight"),
            ParamKind::Weight,
            &self.compress_weight,
        );
        if let Some(b) = &self.compress_bias {
            f(format!("{prefix}.compress.bias"), ParamKind::Bias, b);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.expand_weight];
        if let Some(b) = &mut self.expand_bias {
            v.push(b);
        }
        v.push(&mut self.compress_weight);
        if let Some(b) = &mut self.compress_bias {
            v.push(b);
        }
        v
    }
}

/// Partially connected shuffled FFN: grouped 1x1 expansion to `r*D` channels,
/// GELU, channel shuffle across the `g` groups, grouped 1x1 compression back
/// to `D`. With `g = 1` this is exactly the standard dense FFN.
pub fn pcs_ffn<T: Scalar>(
    x: &Tensor<T>,
    cfg: &PcsFfnConfig,
    w: &PcsFfnWeights<T>,
) -> Result<Tensor<T>> {
    PcsFfnOp::new(cfg.clone()).forward(x, w)
}

#[derive(Debug)]
pub struct PcsFfnOp<T: Scalar> {
    expand: Conv2dOp<T>,
    act: GeluOp<T>,
    shuffle: ShuffleOp,
    compress: Conv2dOp<T>,
}

impl<T: Scalar> PcsFfnOp<T> {
    pub fn new(cfg: PcsFfnConfig) -> Self {
        PcsFfnOp {
            expand: Conv2dOp::new(1, 0, cfg.groups),
            act: GeluOp::new(),
            shuffle: ShuffleOp::new(cfg.groups),
            compress: Conv2dOp::new(1, 0, cfg.groups),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, w: &PcsFfnWeights<T>) -> Result<Tensor<T>> {
        let hidden = self
            .expand
            .forward(x, &w.expand_weight, w.expand_bias.as_ref())?;
        let activated = self.act.forward(&hidden)?;
        let shuffled = self.shuffle.forward(&activated)?;
        self.compress
            .forward(&shuffled, &w.compress_weight, w.compress_bias.as_ref())
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, PcsFfnWeights<T>)> {
        let (d_shuffled, d_cw, d_cb) = self.compress.vjp(gy)?;
        let d_activated = self.shuffle.vjp(&d_shuffled)?;
        let d_hidden = self.act.vjp(&d_activated)?;
        let (dx, d_ew, d_eb) = self.expand.vjp(&d_hidden)?;
        Ok((
            dx,
            PcsFfnWeights {
                expand_weight: d_ew,
                expand_bias: d_eb,
                compress_weight: d_cw,
                compress_bias: d_cb,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// layer norm weights

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> NormWeights<T> {
    pub fn init(dim: usize) -> Result<Self> {
        Ok(NormWeights {
            gamma: Tensor::full(vec![dim], T::one())?,
            beta: Tensor::zeros(vec![dim])?,
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(NormWeights {
            gamma: Tensor::zeros(self.gamma.dims().to_vec())?,
            beta: Tensor::zeros(self.beta.dims().to_vec())?,
        })
    }

    pub fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>),
    ) {
        f(format!("{prefix}.gamma"), ParamKind::Weight, &self.gamma);
        f(format!("{prefix}.beta"), ParamKind::Bias, &self.beta);
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// patch embedding

/// Strided convolution that downsamples tokens between stages, followed by a
/// channel layer norm. Padding is fixed at `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchEmbedConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config("patch embed dims must be positive".into()));
        }
        Ok(PatchEmbedConfig {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let canon = PatchEmbedConfig::new(
            self.in_channels,
            self.out_channels,
            self.kernel,
            self.stride,
        )?;
        if canon.padding != self.padding {
            return Err(Error::Config(format!(
                "patch embed padding {} must equal kernel/2 = {}",
                self.padding, canon.padding
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedWeights<T: Scalar> {
    pub conv_weight: Tensor<T>,
    pub conv_bias: Option<Tensor<T>>,
    pub norm: NormWeights<T>,
}

impl<T: Scalar> PatchEmbedWeights<T> {
    pub fn init(cfg: &PatchEmbedConfig, bias: bool, rng: &mut Rng) -> Result<Self> {
        Ok(PatchEmbedWeights {
            conv_weight: Tensor::trunc_normal(
                vec![cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel],
                INIT_STD,
                rng,
            )?,
            conv_bias: bias
                .then(|| Tensor::zeros(vec![cfg.out_channels]))
                .transpose()?,
            norm: NormWeights::init(cfg.out_channels)?,
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(PatchEmbedWeights {
            conv_weight: Tensor::zeros(self.conv_weight.dims().to_vec())?,
            conv_bias: self
                .conv_bias
                .as_ref()
                .map(|b| Tensor::zeros(b.dims().to_vec()))
                .transpose()?,
            norm: self.norm.zeros_like()?,
        })
    }

    pub fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>),
    ) {
        f(
            format!("{prefix}.conv.weight"),
            ParamKind::Weight,
            &self.conv_weight,
        );
        if let Some(b) = &self.conv_bias {
            f(format!("{prefix}.conv.bias"), ParamKind::Bias, b);
        }
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.conv_weight];
        if let Some(b) = &mut self.conv_bias {
            v.push(b);
        }
        v.extend(self.norm.tensors_mut());
        v
    }
}

pub fn patch_embed<T: Scalar>(
    x: &Tensor<T>,
    cfg: &PatchEmbedConfig,
    w: &PatchEmbedWeights<T>,
) -> Result<Tensor<T>> {
    PatchEmbedOp::new(*cfg).forward(x, w)
}

#[derive(Debug)]
pub struct PatchEmbedOp<T: Scalar> {
    conv: Conv2dOp<T>,
    norm: LayerNormOp<T>,
}

impl<T: Scalar> PatchEmbedOp<T> {
    pub fn new(cfg: PatchEmbedConfig) -> Self {
        PatchEmbedOp {
            conv: Conv2dOp::new(cfg.stride, cfg.padding, 1),
            norm: LayerNormOp::new(LN_EPS),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, w: &PatchEmbedWeights<T>) -> Result<Tensor<T>> {
        let embedded = self.conv.forward(x, &w.conv_weight, w.conv_bias.as_ref())?;
        self.norm.forward(&embedded, &w.norm.gamma, &w.norm.beta)
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, PatchEmbedWeights<T>)> {
        let (d_embedded, dgamma, dbeta) = self.norm.vjp(gy)?;
        let (dx, dw, db) = self.conv.vjp(&d_embedded)?;
        Ok((
            dx,
            PatchEmbedWeights {
                conv_weight: dw,
                conv_bias: db,
                norm: NormWeights {
                    gamma: dgamma,
                    beta: dbeta,
                },
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// transformer block

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T: Scalar> {
    pub norm1: NormWeights<T>,
    pub hybrid: HybridWeights<T>,
    pub norm2: NormWeights<T>,
    pub ffn: PcsFfnWeights<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn init(
        dim: usize,
        ffn: &PcsFfnConfig,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(BlockWeights {
            norm1: NormWeights::init(dim)?,
            hybrid: HybridWeights::init(dim, bias, rng)?,
            norm2: NormWeights::init(dim)?,
            ffn: PcsFfnWeights::init(ffn, bias, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(BlockWeights {
            norm1: self.norm1.zeros_like()?,
            hybrid: self.hybrid.zeros_like()?,
            norm2: self.norm2.zeros_like()?,
            ffn: self.ffn.zeros_like()?,
        })
    }

    pub fn visit<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>),
    ) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.hybrid.visit(&format!("{prefix}.hybrid"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.norm1.tensors_mut();
        v.extend(self.hybrid.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v.extend(self.ffn.tensors_mut());
        v
    }
}

/// Pre-norm residual block: `x1 = x + hybrid(norm1(x))`, then
/// `out = x1 + ffn(norm2(x1))`. Shape preserved.
pub fn tformer_block<T: Scalar>(
    x: &Tensor<T>,
    nl: &NlModuleConfig,
    ffn: &PcsFfnConfig,
    w: &BlockWeights<T>,
) -> Result<Tensor<T>> {
    BlockOp::new(nl.clone(), ffn.clone()).forward(x, w)
}

#[derive(Debug)]
pub struct BlockOp<T: Scalar> {
    norm1: LayerNormOp<T>,
    hybrid: HybridLayerOp<T>,
    norm2: LayerNormOp<T>,
    ffn: PcsFfnOp<T>,
}

impl<T: Scalar> BlockOp<T> {
    pub fn new(nl: NlModuleConfig, ffn: PcsFfnConfig) -> Self {
        BlockOp {
            norm1: LayerNormOp::new(LN_EPS),
            hybrid: HybridLayerOp::new(nl),
            norm2: LayerNormOp::new(LN_EPS),
            ffn: PcsFfnOp::new(ffn),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, w: &BlockWeights<T>) -> Result<Tensor<T>> {
        let normed = self.norm1.forward(x, &w.norm1.gamma, &w.norm1.beta)?;
        let mixed = self.hybrid.forward(&normed, &w.hybrid)?;
        let x1 = ops::add(x, &mixed)?;
        let normed2 = self.norm2.forward(&x1, &w.norm2.gamma, &w.norm2.beta)?;
        let expanded = self.ffn.forward(&normed2, &w.ffn)?;
        ops::add(&x1, &expanded)
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, BlockWeights<T>)> {
        // out = x1 + ffn(norm2(x1)): cotangent reaches x1 both directly and
        // through the ffn branch.
        let (d_normed2, ffn_grads) = self.ffn.vjp(gy)?;
        let (d_x1_branch, dgamma2, dbeta2) = self.norm2.vjp(&d_normed2)?;
        let d_x1 = ops::add(gy, &d_x1_branch)?;

        let (d_normed, hybrid_grads) = self.hybrid.vjp(&d_x1)?;
        let (d_x_branch, dgamma1, dbeta1) = self.norm1.vjp(&d_normed)?;
        let dx = ops::add(&d_x1, &d_x_branch)?;

        Ok((
            dx,
            BlockWeights {
                norm1: NormWeights {
                    gamma: dgamma1,
                    beta: dbeta1,
                },
                hybrid: hybrid_grads,
                norm2: NormWeights {
                    gamma: dgamma2,
                    beta: dbeta2,
                },
                ffn: ffn_grads,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::pool2d;

    #[test]
    fn partition_even_and_remainder_cases() {
        assert_eq!(
            partition_channels(64, 10).unwrap(),
            vec![7, 7, 7, 7, 6, 6, 6, 6, 6, 6]
        );
        assert_eq!(partition_channels(10, 10).unwrap(), vec![1; 10]);
        assert_eq!(partition_channels(16, 4).unwrap(), vec![4, 4, 4, 4]);
        assert!(partition_channels(3, 4).is_err());
        assert!(partition_channels(3, 0).is_err());
    }

    #[test]
    fn nl_config_orders_pairs_operators_major() {
        let cfg = NlModuleConfig::default_for(64).unwrap();
        let pairs: Vec<_> = cfg.pairs().collect();
        assert_eq!(pairs.len(), 10);
        assert_eq!(pairs[0], (PoolKind::Avg, 3, 7));
        assert_eq!(pairs[4], (PoolKind::Avg, 11, 6));
        assert_eq!(pairs[5], (PoolKind::Max, 3, 6));
        assert_eq!(pairs[9], (PoolKind::Max, 11, 6));
        assert_eq!(cfg.dim(), 64);
    }

    #[test]
    fn nl_config_rejects_bad_inputs() {
        assert!(NlModuleConfig::new(vec![], vec![3], 8).is_err());
        assert!(NlModuleConfig::new(vec![PoolKind::Max, PoolKind::Avg], vec![3], 8).is_err());
        assert!(NlModuleConfig::new(vec![PoolKind::Avg], vec![4], 8).is_err());
        assert!(NlModuleConfig::new(vec![PoolKind::Avg], vec![5, 3], 8).is_err());
        assert!(NlModuleConfig::new(vec![PoolKind::Avg, PoolKind::Max], vec![3, 5], 3).is_err());
    }

    #[test]
    fn nl_module_preserves_constants() {
        let x = Tensor::<f32>::full(vec![1, 64, 8, 8], 3.0).unwrap();
        let cfg = NlModuleConfig::default_for(64).unwrap();
        let y = nl_module(&x, &cfg).unwrap();
        assert_eq!(y.dims(), &[1, 64, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_partition_equals_whole_tensor_pool() {
        let mut rng = Rng::new(21);
        let x = Tensor::<f64>::rand_uniform(vec![2, 4, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let cfg = NlModuleConfig::new(vec![PoolKind::Avg], vec![3], 4).unwrap();
        let direct = pool2d(&x, &PoolSpec::same_size(PoolKind::Avg, 3).unwrap()).unwrap();
        assert_eq!(nl_module(&x, &cfg).unwrap(), direct);
    }

    #[test]
    fn shuffle_examples() {
        // g = 1 is the identity
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::rand_uniform(vec![1, 6, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);

        // C=6, g=2: channel order [0, 3, 1, 4, 2, 5]
        let x = Tensor::<f64>::from_fn(vec![1, 6, 1, 1], |i| i as f64).unwrap();
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);

        // shuffle(g) then shuffle(C/g) is the identity
        let x = Tensor::<f64>::rand_uniform(vec![2, 12, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let once = channel_shuffle(&x, 3).unwrap();
        assert_eq!(channel_shuffle(&once, 4).unwrap(), x);

        assert!(channel_shuffle(&x, 5).is_err());
    }

    #[test]
    fn hybrid_parameter_count_is_dim_squared() {
        let mut rng = Rng::new(8);
        let cfg = NlModuleConfig::default_for(64).unwrap();
        let w = HybridWeights::<f32>::init(64, false, &mut rng).unwrap();
        let mut count = 0usize;
        w.visit("hybrid", &mut |_, _, t| count += t.len());
        assert_eq!(count, 4096);

        // identity pointwise conv on constants keeps the constant
        let mut ident = HybridWeights::<f32> {
            pw_weight: Tensor::zeros(vec![64, 64, 1, 1]).unwrap(),
            pw_bias: None,
        };
        for c in 0..64 {
            ident.pw_weight.data_mut()[c * 64 + c] = 1.0;
        }
        let x = Tensor::<f32>::full(vec![1, 64, 4, 4], 2.5).unwrap();
        let y = hybrid_layer(&x, &cfg, &ident).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn pcs_ffn_weight_count_matches_grouped_formula() {
        let mut rng = Rng::new(13);
        let cfg = PcsFfnConfig::new(64, 4, 2).unwrap();
        let w = PcsFfnWeights::<f32>::init(&cfg, false, &mut rng).unwrap();
        let mut count = 0usize;
        w.visit("ffn", &mut |_, _, t| count += t.len());
        // 2 r D^2 / g, half the dense FFN's 2 r D^2
        assert_eq!(count, 16_384);
    }

    #[test]
    fn pcs_ffn_with_one_group_is_the_dense_ffn() {
        let mut rng = Rng::new(17);
        let cfg = PcsFfnConfig::new(8, 4, 1).unwrap();
        let w = PcsFfnWeights::<f64>::init(&cfg, true, &mut rng).unwrap();
        let x = Tensor::<f64>::rand_uniform(vec![2, 8, 3, 3], -1.0, 1.0, &mut rng).unwrap();

        let got = pcs_ffn(&x, &cfg, &w).unwrap();
        let hidden = ops::conv2d(&x, &w.expand_weight, w.expand_bias.as_ref(), 1, 0, 1).unwrap();
        let act = ops::gelu(&hidden).unwrap();
        let want = ops::conv2d(&act, &w.compress_weight, w.compress_bias.as_ref(), 1, 0, 1).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn patch_embed_shapes_and_weight_count() {
        let mut rng = Rng::new(31);
        let cfg = PatchEmbedConfig::new(3, 64, 7, 4).unwrap();
        assert_eq!(cfg.padding, 3);
        let w = PatchEmbedWeights::<f32>::init(&cfg, true, &mut rng).unwrap();
        let mut conv_params = 0usize;
        w.visit("patch", &mut |name, _, t| {
            if name.contains(".conv.") {
                conv_params += t.len();
            }
        });
        assert_eq!(conv_params, 3 * 64 * 49 + 64);

        let x = Tensor::<f32>::zeros(vec![1, 3, 224, 224]).unwrap();
        let y = patch_embed(&x, &cfg, &w).unwrap();
        assert_eq!(y.dims(), &[1, 64, 56, 56]);

        let cfg2 = PatchEmbedConfig::new(64, 128, 3, 2).unwrap();
        let w2 = PatchEmbedWeights::<f32>::init(&cfg2, true, &mut rng).unwrap();
        let y2 = patch_embed(&y, &cfg2, &w2).unwrap();
        assert_eq!(y2.dims(), &[1, 128, 28, 28]);
    }

    #[test]
    fn block_with_zeroed_branches_is_identity() {
        let mut rng = Rng::new(19);
        let dim = 16;
        let nl = NlModuleConfig::new(vec![PoolKind::Avg, PoolKind::Max], vec![3, 5], dim).unwrap();
        let ffn = PcsFfnConfig::new(dim, 4, 2).unwrap();
        let mut w = BlockWeights::<f64>::init(dim, &ffn, false, &mut rng).unwrap();
        w.hybrid.pw_weight.data_mut().fill(0.0);
        w.ffn.compress_weight.data_mut().fill(0.0);

        let x = Tensor::<f64>::rand_uniform(vec![2, dim, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let y = tformer_block(&x, &nl, &ffn, &w).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = Rng::new(23);
        let nl = NlModuleConfig::default_for(64).unwrap();
        let ffn = PcsFfnConfig::new(64, 4, 2).unwrap();
        let w = BlockWeights::<f32>::init(64, &ffn, true, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(vec![2, 64, 8, 8], -1.0, 1.0, &mut rng).unwrap();
        let y = tformer_block(&x, &nl, &ffn, &w).unwrap();
        assert_eq!(y.dims(), &[2, 64, 8, 8]);
    }
}
