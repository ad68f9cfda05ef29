//! Whole-model assembly: stage schema, the S/M/L presets plus a Micro test
//! variant, forward/backward over the full network, and the parameter walker
//! that defines the stable tensor naming contract.
//!
//! Naming contract (consumed by the weight archive): stages and blocks are
//! 1-based, and every parameter lives at one of
//!
//! ```text
//! stage{i}.patch.conv.weight        stage{i}.patch.conv.bias
//! stage{i}.patch.norm.gamma         stage{i}.patch.norm.beta
//! stage{i}.block{j}.norm1.gamma     stage{i}.block{j}.norm1.beta
//! stage{i}.block{j}.hybrid.pw.weight/.bias
//! stage{i}.block{j}.norm2.gamma     stage{i}.block{j}.norm2.beta
//! stage{i}.block{j}.ffn.expand.weight/.bias
//! stage{i}.block{j}.ffn.compress.weight/.bias
//! head.norm.gamma  head.norm.beta   head.proj.weight  head.proj.bias
//! ```
//!
//! The name set is a deterministic function of the config.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    BlockOp, BlockWeights, NlModuleConfig, NormWeights, ParamKind, PatchEmbedConfig,
    PatchEmbedOp, PatchEmbedWeights, PcsFfnConfig, INIT_STD, LN_EPS,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops::PoolKind;
use crate::tensor::vjp::{GlobalAvgPoolOp, LayerNormOp, LinearOp, ReshapeOp};
use crate::tensor::Tensor;

/// Built-in model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    S,
    M,
    L,
    /// Two-stage miniature (dims 16/32, scales 3/5) for oracles, gradient
    /// checks, and the training demo. Not one of the published presets.
    Micro,
}

impl Variant {
    pub const fn name(self) -> &'static str {
        match self {
            Variant::S => "s",
            Variant::M => "m",
            Variant::L => "l",
            Variant::Micro => "micro",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "l" => Ok(Variant::L),
            "micro" => Ok(Variant::Micro),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected s, m, l, or micro)"
            ))),
        }
    }
}

/// One stage: a downsampling patch embed followed by `depth` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub patch: PatchEmbedConfig,
    pub embed_dim: usize,
    pub depth: usize,
    pub ffn: PcsFfnConfig,
    pub nl: NlModuleConfig,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.ffn.validate()?;
        self.nl.validate()?;
        if self.depth == 0 {
            return Err(Error::Config("stage depth must be >= 1".into()));
        }
        if self.patch.out_channels != self.embed_dim {
            return Err(Error::Config(format!(
                "patch embed produces {} channels, stage dim is {}",
                self.patch.out_channels, self.embed_dim
            )));
        }
        if self.nl.dim() != self.embed_dim {
            return Err(Error::Config(format!(
                "nl module partition sums to {}, stage dim is {}",
                self.nl.dim(),
                self.embed_dim
            )));
        }
        if self.ffn.dim != self.embed_dim {
            return Err(Error::Config(format!(
                "ffn dim {} differs from stage dim {}",
                self.ffn.dim, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Full architecture description. Serializes to the archive config blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TFormerConfig {
    pub variant: String,
    pub num_classes: usize,
    /// Whether conv/linear layers carry bias vectors.
    pub bias: bool,
    pub stages: Vec<StageSpec>,
}

impl TFormerConfig {
    /// Schema of the built-in variants. S/M/L share dims 64/128/320/512, a
    /// 7x7 stride-4 stem, 3x3 stride-2 downsampling, the full avg+max
    /// 3..11 pooling bank, and FFN ratio 4 with 2 groups; they differ only
    /// in depth.
    pub fn for_variant(variant: Variant, num_classes: usize) -> Result<Self> {
        let cfg = match variant {
            Variant::S => Self::preset(variant, num_classes, &[2, 2, 6, 2])?,
            Variant::M => Self::preset(variant, num_classes, &[4, 4, 12, 4])?,
            Variant::L => Self::preset(variant, num_classes, &[6, 6, 18, 6])?,
            Variant::Micro => {
                let dims = [16usize, 32];
                let depths = [1usize, 1];
                let mut stages = Vec::new();
                let mut in_ch = 3;
                for (&dim, &depth) in dims.iter().zip(&depths) {
                    stages.push(StageSpec {
                        patch: PatchEmbedConfig::new(in_ch, dim, 3, 2)?,
                        embed_dim: dim,
                        depth,
                        ffn: PcsFfnConfig::new(dim, 4, 2)?,
                        nl: NlModuleConfig::new(
                            vec![PoolKind::Avg, PoolKind::Max],
                            vec![3, 5],
                            dim,
                        )?,
                    });
                    in_ch = dim;
                }
                TFormerConfig {
                    variant: variant.name().to_string(),
                    num_classes,
                    bias: true,
                    stages,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset(variant: Variant, num_classes: usize, depths: &[usize; 4]) -> Result<Self> {
        let dims = [64usize, 128, 320, 512];
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, (&dim, &depth)) in dims.iter().zip(depths).enumerate() {
            let (kernel, stride) = if i == 0 { (7, 4) } else { (3, 2) };
            stages.push(StageSpec {
                patch: PatchEmbedConfig::new(in_ch, dim, kernel, stride)?,
                embed_dim: dim,
                depth,
                ffn: PcsFfnConfig::new(dim, 4, 2)?,
                nl: NlModuleConfig::default_for(dim)?,
            });
            in_ch = dim;
        }
        Ok(TFormerConfig {
            variant: variant.name().to_string(),
            num_classes,
            bias: true,
            stages,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        let mut in_ch = 3;
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate()?;
            if stage.patch.in_channels != in_ch {
                return Err(Error::Config(format!(
                    "stage {} expects {} input channels, previous stage produces {in_ch}",
                    i + 1,
                    stage.patch.in_channels
                )));
            }
            in_ch = stage.embed_dim;
        }
        Ok(())
    }

    /// Product of the stage strides; inputs must be divisible by this.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch.stride).product()
    }

    pub fn embed_dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.embed_dim).collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    /// Input resolution the variant is normally run at: 224 for the
    /// stride-32 presets, 8x the total stride otherwise.
    pub fn suggested_input(&self) -> usize {
        if self.total_stride() == 32 {
            224
        } else {
            8 * self.total_stride()
        }
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T: Scalar> {
    pub patch: PatchEmbedWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar> {
    pub norm: NormWeights<T>,
    /// `[num_classes, D]`
    pub proj_weight: Tensor<T>,
    pub proj_bias: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TFormerModel<T: Scalar> {
    pub config: TFormerConfig,
    pub stages: Vec<StageParams<T>>,
    pub head: HeadParams<T>,
}

enum Init {
    TruncNormal,
    Zeros,
}

impl<T: Scalar> TFormerModel<T> {
    /// Builds one of the named variants with truncated-normal weight init.
    pub fn build_variant(variant: Variant, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(TFormerConfig::for_variant(variant, num_classes)?, rng)
    }

    /// Random-initialized model for an arbitrary config.
    pub fn init(config: TFormerConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, Init::TruncNormal, rng)
    }

    /// All-zero weights; the archive import target.
    pub fn zeros(config: TFormerConfig) -> Result<Self> {
        Self::build(config, Init::Zeros, &mut Rng::new(0))
    }

    fn build(config: TFormerConfig, init: Init, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let bias = config.bias;
        let mut stages = Vec::with_capacity(config.stages.len());
        for spec in &config.stages {
            let patch = PatchEmbedWeights::init(&spec.patch, bias, rng)?;
            let mut blocks = Vec::with_capacity(spec.depth);
            for _ in 0..spec.depth {
                blocks.push(BlockWeights::init(spec.embed_dim, &spec.ffn, bias, rng)?);
            }
            stages.push(StageParams { patch, blocks });
        }
        let last_dim = config.stages.last().expect("validated").embed_dim;
        let head = HeadParams {
            norm: NormWeights::init(last_dim)?,
            proj_weight: Tensor::trunc_normal(
                vec![config.num_classes, last_dim],
                INIT_STD,
                rng,
            )?,
            proj_bias: bias
                .then(|| Tensor::zeros(vec![config.num_classes]))
                .transpose()?,
        };
        let mut model = TFormerModel {
            config,
            stages,
            head,
        };
        if matches!(init, Init::Zeros) {
            for t in model.params_mut() {
                t.data_mut().fill(T::zero());
            }
        }
        Ok(model)
    }

    /// Same config, all-zero tensors; the gradient / velocity container.
    pub fn zeros_like(&self) -> Result<Self> {
        Self::zeros(self.config.clone())
    }

    // -- forward / backward -------------------------------------------------

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.shape4()?;
        let expect_c = self.config.stages[0].patch.in_channels;
        if c != expect_c {
            return Err(Error::Dimension(format!(
                "input has {c} channels, model expects {expect_c}"
            )));
        }
        let stride = self.config.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} not divisible by total stride {stride}"
            )));
        }
        Ok(())
    }

    /// Inference: `[N, 3, H, W] -> [N, num_classes]` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_ctx(x)?.0)
    }

    /// Forward pass that retains per-layer residuals for [`Self::backward`].
    /// The context also records each stage's output spatial size.
    pub fn forward_with_ctx(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelCtx<T>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut stage_ctxs = Vec::with_capacity(self.stages.len());
        let mut stage_spatial = Vec::with_capacity(self.stages.len());

        for (spec, params) in self.config.stages.iter().zip(&self.stages) {
            let mut patch = PatchEmbedOp::new(spec.patch);
            cur = patch.forward(&cur, &params.patch)?;
            let mut blocks = Vec::with_capacity(params.blocks.len());
            for block_w in &params.blocks {
                let mut block = BlockOp::new(spec.nl.clone(), spec.ffn);
                cur = block.forward(&cur, block_w)?;
                blocks.push(block);
            }
            let (_, _, h, w) = cur.shape4()?;
            stage_spatial.push((h, w));
            stage_ctxs.push(StageCtx { patch, blocks });
        }

        // head: global average pool -> channel norm -> dense projection
        let (n_batch, d) = {
            let (n, c, _, _) = cur.shape4()?;
            (n, c)
        };
        let mut gap = GlobalAvgPoolOp::new();
        let pooled = gap.forward(&cur)?;
        let mut to_nchw = ReshapeOp::new();
        let pooled4 = to_nchw.forward(&pooled, vec![n_batch, d, 1, 1])?;
        let mut norm = LayerNormOp::new(LN_EPS);
        let normed = norm.forward(&pooled4, &self.head.norm.gamma, &self.head.norm.beta)?;
        let mut to_flat = ReshapeOp::new();
        let flat = to_flat.forward(&normed, vec![n_batch, d])?;
        let mut proj = LinearOp::new();
        let logits = proj.forward(&flat, &self.head.proj_weight, self.head.proj_bias.as_ref())?;

        Ok((
            logits,
            ModelCtx {
                stages: stage_ctxs,
                gap,
                to_nchw,
                norm,
                to_flat,
                proj,
                stage_spatial,
            },
        ))
    }

    /// Backpropagates a logits cotangent through the saved context, returning
    /// gradients shaped exactly like the model.
    pub fn backward(&self, ctx: &ModelCtx<T>, dlogits: &Tensor<T>) -> Result<TFormerModel<T>> {
        let (g_flat, d_proj_w, d_proj_b) = ctx.proj.vjp(dlogits)?;
        let g_normed = ctx.to_flat.vjp(&g_flat)?;
        let (g_pooled4, d_gamma, d_beta) = ctx.norm.vjp(&g_normed)?;
        let g_pooled = ctx.to_nchw.vjp(&g_pooled4)?;
        let mut g = ctx.gap.vjp(&g_pooled)?;

        let head_grads = HeadParams {
            norm: NormWeights {
                gamma: d_gamma,
                beta: d_beta,
            },
            proj_weight: d_proj_w,
            proj_bias: d_proj_b,
        };

        let mut stage_grads_rev = Vec::with_capacity(self.stages.len());
        for stage_ctx in ctx.stages.iter().rev() {
            let mut block_grads_rev = Vec::with_capacity(stage_ctx.blocks.len());
            for block in stage_ctx.blocks.iter().rev() {
                let (g_in, grads) = block.vjp(&g)?;
                g = g_in;
                block_grads_rev.push(grads);
            }
            block_grads_rev.reverse();
            let (g_in, patch_grads) = stage_ctx.patch.vjp(&g)?;
            g = g_in;
            stage_grads_rev.push(StageParams {
                patch: patch_grads,
                blocks: block_grads_rev,
            });
        }
        stage_grads_rev.reverse();

        Ok(TFormerModel {
            config: self.config.clone(),
            stages: stage_grads_rev,
            head: head_grads,
        })
    }

    // -- parameter walking ---------------------------------------------------

    /// Visits every parameter as `(name, kind, tensor)` in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, ParamKind, &'a Tensor<T>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            let stage_prefix = format!("stage{}", i + 1);
            stage.patch.visit(&format!("{stage_prefix}.patch"), f);
            for (j, block) in stage.blocks.iter().enumerate() {
                block.visit(&format!("{stage_prefix}.block{}", j + 1), f);
            }
        }
        self.head.norm.visit("head.norm", f);
        f(
            "head.proj.weight".to_string(),
            ParamKind::Weight,
            &self.head.proj_weight,
        );
        if let Some(b) = &self.head.proj_bias {
            f("head.proj.bias".to_string(), ParamKind::Bias, b);
        }
    }

    /// All parameters with their names, in visiting order.
    pub fn named_params(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, kind, t| out.push((name, kind, t)));
        out
    }

    /// Mutable references to every parameter, in the same order as
    /// [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.extend(stage.patch.tensors_mut());
            for block in &mut stage.blocks {
                out.extend(block.tensors_mut());
            }
        }
        out.extend(self.head.norm.tensors_mut());
        out.push(&mut self.head.proj_weight);
        if let Some(b) = &mut self.head.proj_bias {
            out.push(b);
        }
        out
    }

    /// Exact parameter count by enumeration, with a per-tensor breakdown.
    /// `include_bias = false` skips additive parameters (conv/linear biases
    /// and norm shifts).
    pub fn count_parameters(&self, include_bias: bool) -> (u64, Vec<(String, u64)>) {
        let mut rows = Vec::new();
        let mut total = 0u64;
        self.visit_params(&mut |name, kind, t| {
            if !include_bias && kind == ParamKind::Bias {
                return;
            }
            let n = t.len() as u64;
            total += n;
            rows.push((name, n));
        });
        (total, rows)
    }
}

struct StageCtx<T: Scalar> {
    patch: PatchEmbedOp<T>,
    blocks: Vec<BlockOp<T>>,
}

/// Saved residuals of one full forward pass.
pub struct ModelCtx<T: Scalar> {
    stages: Vec<StageCtx<T>>,
    gap: GlobalAvgPoolOp,
    to_nchw: ReshapeOp,
    norm: LayerNormOp<T>,
    to_flat: ReshapeOp,
    proj: LinearOp<T>,
    /// `(H, W)` of each stage's output token map.
    pub stage_spatial: Vec<(usize, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_depths_and_dims() {
        let s = TFormerConfig::for_variant(Variant::S, 1000).unwrap();
        assert_eq!(s.depths(), vec![2, 2, 6, 2]);
        assert_eq!(s.embed_dims(), vec![64, 128, 320, 512]);
        assert_eq!(s.total_stride(), 32);
        assert_eq!(s.stages[0].patch.kernel, 7);
        assert_eq!(s.stages[0].patch.stride, 4);
        assert_eq!(s.stages[1].patch.kernel, 3);

        let m = TFormerConfig::for_variant(Variant::M, 1000).unwrap();
        assert_eq!(m.depths(), vec![4, 4, 12, 4]);
        assert_eq!(m.embed_dims(), vec![64, 128, 320, 512]);

        let l = TFormerConfig::for_variant(Variant::L, 1000).unwrap();
        assert_eq!(l.depths(), vec![6, 6, 18, 6]);

        let micro = TFormerConfig::for_variant(Variant::Micro, 4).unwrap();
        assert_eq!(micro.embed_dims(), vec![16, 32]);
        assert_eq!(micro.depths(), vec![1, 1]);
        assert_eq!(micro.total_stride(), 4);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("S".parse::<Variant>().unwrap(), Variant::S);
        assert_eq!("micro".parse::<Variant>().unwrap(), Variant::Micro);
        assert!("xl".parse::<Variant>().is_err());
    }

    #[test]
    fn micro_forward_shape_contract() {
        let mut rng = Rng::new(3);
        let model = TFormerModel::<f32>::build_variant(Variant::Micro, 4, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let (logits, ctx) = model.forward_with_ctx(&x).unwrap();
        assert_eq!(logits.dims(), &[2, 4]);
        assert_eq!(ctx.stage_spatial, vec![(16, 16), (8, 8)]);
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let mut rng = Rng::new(3);
        let model = TFormerModel::<f32>::build_variant(Variant::Micro, 4, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 3, 30, 30]).unwrap();
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn num_classes_must_be_at_least_two() {
        assert!(TFormerConfig::for_variant(Variant::Micro, 1).is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = TFormerConfig::for_variant(Variant::S, 1000).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TFormerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn name_set_is_deterministic_and_orders_match() {
        let mut rng = Rng::new(7);
        let a = TFormerModel::<f32>::build_variant(Variant::Micro, 4, &mut rng).unwrap();
        let mut b = a.zeros_like().unwrap();

        let names_a: Vec<String> = a.named_params().into_iter().map(|(n, _, _)| n).collect();
        let names_b: Vec<String> = b.named_params().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names_a, names_b);
        assert!(names_a.contains(&"stage1.patch.conv.weight".to_string()));
        assert!(names_a.contains(&"stage2.block1.ffn.compress.weight".to_string()));
        assert!(names_a.contains(&"head.proj.weight".to_string()));

        // named_params and params_mut walk in the same order
        let shapes_named: Vec<Vec<usize>> = a
            .named_params()
            .into_iter()
            .map(|(_, _, t)| t.dims().to_vec())
            .collect();
        let shapes_mut: Vec<Vec<usize>> = b
            .params_mut()
            .into_iter()
            .map(|t| t.dims().to_vec())
            .collect();
        assert_eq!(shapes_named, shapes_mut);
    }

    #[test]
    fn count_parameters_breakdown_sums_to_total() {
        let mut rng = Rng::new(11);
        let model = TFormerModel::<f32>::build_variant(Variant::Micro, 4, &mut rng).unwrap();
        for include_bias in [false, true] {
            let (total, rows) = model.count_parameters(include_bias);
            let sum: u64 = rows.iter().map(|(_, n)| n).sum();
            assert_eq!(total, sum);
        }
        let (with_bias, _) = model.count_parameters(true);
        let (without, _) = model.count_parameters(false);
        assert!(with_bias > without);
    }
}
