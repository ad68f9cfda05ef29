//! Closed-form parameter and multiply-add accounting.
//!
//! Counting convention (shared, term for term, with the kernel meter in
//! [`crate::meter`] — a metered forward pass must reproduce these numbers
//! exactly):
//!
//! * one fused multiply-add = one FLOP ("MAdd");
//! * convolution: `out_elems * (Cin/groups * Kh * Kw)`, bias adds free;
//! * pooling: kernel area per output element, borders charged in full, and
//!   max-pool comparisons counted like adds;
//! * layer norm: 2 MAdds per element; GELU: 1; residual add: 1; global
//!   average pool: 1 per input element. These are not part of the published
//!   per-layer formulas, so the model walk reports them in a separate
//!   `overhead` row;
//! * data movement (reshape/shuffle/split/concat) is free.
//!
//! The multihead-attention baseline is reported two ways: `madds_literal`
//! evaluates the printed per-head cost expression verbatim (its first-layer
//! denominator read as the head count, no summation over heads), while
//! `madds_corrected` sums query/key/value/projection and both attention
//! products over all heads, giving `4*N*D^2 + 2*N^2*D`. The literal form
//! undercounts by roughly the head count; every comparison in this crate
//! uses the corrected value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::NlModuleConfig;
use crate::model::TFormerConfig;
use crate::tensor::ops::window_out_dim;

/// Token count, embedding dim, and head count of an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaCostSpec {
    /// Number of tokens (pixels) the layer attends over.
    pub tokens: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Number of attention heads.
    pub heads: usize,
}

impl MhaCostSpec {
    pub fn new(tokens: usize, dim: usize, heads: usize) -> Result<Self> {
        if tokens == 0 || dim == 0 || heads == 0 {
            return Err(Error::Config("attention spec must be positive".into()));
        }
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MhaCostSpec { tokens, dim, heads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaCost {
    pub params: u64,
    pub madds_literal: u64,
    pub madds_corrected: u64,
}

/// Multihead-attention cost: `params = 4*D^2`; see the module docs for the
/// two MAdd readings.
pub fn mha_cost(spec: &MhaCostSpec) -> MhaCost {
    let n = spec.tokens as u64;
    let d = spec.dim as u64;
    let h = spec.heads as u64;
    let dh = d / h;
    MhaCost {
        params: 4 * d * d,
        madds_literal: 3 * n * d * dh + 2 * n * n * dh + n * d * d,
        madds_corrected: 4 * n * d * d + 2 * n * n * d,
    }
}

/// Parameter and MAdd count of one layer or component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub madds: u64,
}

/// Hybrid-layer cost. Parameters are the pointwise convolution only
/// (`D^2`, plus `D` with bias). MAdds generalize the single-kernel form
/// `D*N*k^2 + D^2*N` by charging each partition's channels at its own
/// kernel area: `sum_j D_j*N*k_j^2 + D^2*N`.
pub fn hybrid_cost(n_tokens: usize, nl: &NlModuleConfig, include_bias: bool) -> LayerCost {
    let d = nl.dim() as u64;
    let n = n_tokens as u64;
    let pool_madds: u64 = nl
        .pairs()
        .map(|(_, k, channels)| channels as u64 * n * (k * k) as u64)
        .sum();
    LayerCost {
        params: d * d + if include_bias { d } else { 0 },
        madds: pool_madds + d * d * n,
    }
}

/// FFN cost: `params = 2*r*D^2/g`, `madds = 2*r*N*D^2/g`; with one group
/// this is the dense FFN's `2*r*D^2` and `2*r*N*D^2`. Bias adds `(r+1)*D`
/// parameters and no MAdds.
pub fn ffn_cost(
    dim: usize,
    n_tokens: usize,
    ratio: usize,
    groups: usize,
    include_bias: bool,
) -> Result<LayerCost> {
    if groups == 0 || dim % groups != 0 || (ratio * dim) % groups != 0 {
        return Err(Error::Config(format!(
            "ffn dims ({dim} x{ratio}) not divisible by groups {groups}"
        )));
    }
    let d = dim as u64;
    let n = n_tokens as u64;
    let r = ratio as u64;
    let g = groups as u64;
    let params = 2 * r * d * (d / g) + if include_bias { (r + 1) * d } else { 0 };
    Ok(LayerCost {
        params,
        madds: 2 * r * n * d * (d / g),
    })
}

/// Parameter and FLOP ratios of attention over the hybrid layer at equal
/// embedding dim. With biases off the parameter ratio is exactly 4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

pub fn ratios(spec: &MhaCostSpec, nl: &NlModuleConfig) -> Result<CostRatios> {
    if nl.dim() != spec.dim {
        return Err(Error::Config(format!(
            "ratio comparison needs equal dims: attention {} vs hybrid {}",
            spec.dim,
            nl.dim()
        )));
    }
    let mha = mha_cost(spec);
    let hybrid = hybrid_cost(spec.tokens, nl, false);
    Ok(CostRatios {
        param_ratio: mha.params as f64 / hybrid.params as f64,
        flop_ratio: mha.madds_corrected as f64 / hybrid.madds as f64,
    })
}

/// One accounting row of a model walk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub component: String,
    pub params: u64,
    pub madds: u64,
}

/// Per-layer cost breakdown. `totals` always equal the sum of `rows`, and
/// the convention tag records that multiplications and additions are fused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    fn push(&mut self, component: String, cost: LayerCost) {
        self.total_params += cost.params;
        self.total_madds += cost.madds;
        self.rows.push(CostRow {
            component,
            params: cost.params,
            madds: cost.madds,
        });
    }

    /// Line-oriented table with plain integers (no separators), so text and
    /// structured output agree character for character on the numbers.
    pub fn to_table(&self) -> String {
        let mut width_c = "component".len();
        let mut width_p = "params".len();
        let mut width_m = "madds".len();
        for row in &self.rows {
            width_c = width_c.max(row.component.len());
            width_p = width_p.max(row.params.to_string().len());
            width_m = width_m.max(row.madds.to_string().len());
        }
        width_c = width_c.max("total".len());
        width_p = width_p.max(self.total_params.to_string().len());
        width_m = width_m.max(self.total_madds.to_string().len());

        let mut out = String::new();
        out.push_str(&format!(
            "{:<width_c$}  {:>width_p$}  {:>width_m$}\n",
            "component", "params", "madds"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<width_c$}  {:>width_p$}  {:>width_m$}\n",
                row.component, row.params, row.madds
            ));
        }
        out.push_str(&format!(
            "{:<width_c$}  {:>width_p$}  {:>width_m$}\n",
            "total", self.total_params, self.total_madds
        ));
        out.push_str(&format!(
            "({} params, {} madds, convention: {})\n",
            human_count(self.total_params),
            human_count(self.total_madds),
            self.convention
        ));
        out
    }
}

/// `8374888 -> "8.37M"`, `1290M -> "1.29G"`.
pub fn human_count(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{n}")
    }
}

/// Walks every layer of a config at the given input resolution and sums
/// per-sample parameters and MAdds. Norms, activations, residual adds, and
/// the global pool are accumulated into a final `overhead` row; everything
/// else follows the per-layer formulas above.
pub fn model_cost(
    config: &TFormerConfig,
    input_hw: (usize, usize),
    include_bias: bool,
) -> Result<CostReport> {
    config.validate()?;
    let (mut h, mut w) = input_hw;
    let stride = config.total_stride();
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} not divisible by total stride {stride}"
        )));
    }

    let bias = include_bias && config.bias;
    let mut report = CostReport {
        convention: "madd".to_string(),
        rows: Vec::new(),
        total_params: 0,
        total_madds: 0,
    };
    let mut overhead = LayerCost { params: 0, madds: 0 };
    let norm_params = |d: u64| if bias { 2 * d } else { d };

    for (i, stage) in config.stages.iter().enumerate() {
        let p = &stage.patch;
        h = window_out_dim(h, p.kernel, p.stride, p.padding)?;
        w = window_out_dim(w, p.kernel, p.stride, p.padding)?;
        let n = (h * w) as u64;
        let d = stage.embed_dim as u64;
        let fanin = (p.in_channels * p.kernel * p.kernel) as u64;

        report.push(
            format!("stage{}.patch", i + 1),
            LayerCost {
                params: d * fanin + if bias { d } else { 0 },
                madds: d * n * fanin,
            },
        );
        // patch norm
        overhead.params += norm_params(d);
        overhead.madds += 2 * d * n;

        for j in 0..stage.depth {
            report.push(
                format!("stage{}.block{}.hybrid", i + 1, j + 1),
                hybrid_cost(n as usize, &stage.nl, bias),
            );
            report.push(
                format!("stage{}.block{}.ffn", i + 1, j + 1),
                ffn_cost(stage.embed_dim, n as usize, stage.ffn.ratio, stage.ffn.groups, bias)?,
            );
            // two norms, two residual adds, and the activation on r*D channels
            overhead.params += 2 * norm_params(d);
            overhead.madds += d * n * (2 + 1 + 2 + 1) + stage.ffn.ratio as u64 * d * n;
        }
    }

    let last = config.stages.last().expect("validated");
    let d = last.embed_dim as u64;
    let n_last = (h * w) as u64;
    let classes = config.num_classes as u64;
    report.push(
        "head".to_string(),
        LayerCost {
            params: classes * d + if bias { classes } else { 0 },
            madds: classes * d,
        },
    );
    // global average pool and the head norm (one token, so 2*D)
    overhead.params += norm_params(d);
    overhead.madds += d * n_last + 2 * d;

    report.push("overhead".to_string(), overhead);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mha_params_quadratic_in_dim() {
        let c = mha_cost(&MhaCostSpec::new(196, 64, 8).unwrap());
        assert_eq!(c.params, 16_384);
        let c = mha_cost(&MhaCostSpec::new(49, 512, 8).unwrap());
        assert_eq!(c.params, 1_048_576);
    }

    #[test]
    fn mha_corrected_vs_term_by_term_graph_count() {
        // Count the matmuls of the attention graph explicitly: per head,
        // QKV embeddings [N,D]x[D,D/h] three times, scores [N,D/h]x[D/h,N],
        // weighted values [N,N]x[N,D/h]; then one output projection
        // [N,D]x[D,D]. Summed over h heads this must equal the corrected
        // closed form.
        for (n, d, heads) in [(196usize, 64usize, 8usize), (49, 512, 8), (3136, 64, 1)] {
            let (nu, du, hu) = (n as u64, d as u64, heads as u64);
            let dh = du / hu;
            let qkv = 3 * hu * (nu * dh * du);
            let scores = hu * (nu * nu * dh);
            let weighted = hu * (nu * nu * dh);
            let proj = nu * du * du;
            let graph_total = qkv + scores + weighted + proj;
            let c = mha_cost(&MhaCostSpec::new(n, d, heads).unwrap());
            assert_eq!(c.madds_corrected, graph_total);
        }
    }

    #[test]
    fn mha_corrected_example() {
        let c = mha_cost(&MhaCostSpec::new(196, 64, 8).unwrap());
        assert_eq!(c.madds_corrected, 8_128_512);
        // literal per-head reading at h = 8
        assert_eq!(c.madds_literal, 1_718_528);
        assert!(c.madds_literal < c.madds_corrected);
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(MhaCostSpec::new(196, 64, 5).is_err());
    }

    #[test]
    fn hybrid_cost_single_scale_example() {
        // one operator, one 3x3 scale over all 64 channels at N = 3136:
        // 64*3136*9 + 4096*3136
        let nl = NlModuleConfig::new(vec![crate::tensor::ops::PoolKind::Avg], vec![3], 64).unwrap();
        let c = hybrid_cost(3136, &nl, false);
        assert_eq!(c.madds, 14_651_392);
        assert_eq!(c.params, 4096);
        let with_bias = hybrid_cost(3136, &nl, true);
        assert_eq!(with_bias.params, 4096 + 64);
    }

    #[test]
    fn ffn_cost_examples() {
        // dense: P = 2 r D^2 and F = 2 r N D^2
        let dense = ffn_cost(64, 196, 4, 1, false).unwrap();
        assert_eq!(dense.params, 32_768);
        assert_eq!(dense.madds, 1_605_632);

        let grouped = ffn_cost(64, 196, 4, 2, false).unwrap();
        assert_eq!(grouped.params, 16_384);
        assert_eq!(grouped.madds, dense.madds / 2);

        let with_bias = ffn_cost(64, 196, 4, 2, true).unwrap();
        assert_eq!(with_bias.params, 16_384 + 5 * 64);

        assert!(ffn_cost(10, 196, 4, 3, false).is_err());
    }

    #[test]
    fn one_group_reduces_to_the_dense_formulas() {
        let mut rng = crate::rng::Rng::new(77);
        for _ in 0..20 {
            let d = 8 * (1 + rng.next_below(32));
            let r = 1 + rng.next_below(6);
            let n = 1 + rng.next_below(4000);
            let c = ffn_cost(d, n, r, 1, false).unwrap();
            assert_eq!(c.params, (2 * r * d * d) as u64);
            assert_eq!(c.madds, (2 * r * n * d * d) as u64);
        }
    }

    #[test]
    fn param_ratio_is_exactly_four_without_bias() {
        for d in [16usize, 64, 128, 320, 512] {
            let nl = NlModuleConfig::default_for(d).unwrap();
            let spec = MhaCostSpec::new(3136, d, 8).unwrap();
            let r = ratios(&spec, &nl).unwrap();
            assert_eq!(r.param_ratio, 4.0);
        }
    }

    #[test]
    fn flop_ratio_is_large_at_detection_scale() {
        let nl = NlModuleConfig::default_for(512).unwrap();
        let spec = MhaCostSpec::new(960_000, 512, 8).unwrap();
        let r = ratios(&spec, &nl).unwrap();
        assert!(r.flop_ratio > 1000.0, "flop ratio {}", r.flop_ratio);
    }

    #[test]
    fn ratios_require_equal_dims() {
        let nl = NlModuleConfig::default_for(64).unwrap();
        let spec = MhaCostSpec::new(3136, 128, 8).unwrap();
        assert!(ratios(&spec, &nl).is_err());
    }

    #[test]
    fn madds_increase_with_tokens_and_dim() {
        for (d_small, d_big) in [(16usize, 64usize), (64, 128)] {
            for (n_small, n_big) in [(49usize, 196usize), (196, 3136)] {
                let nl_small = NlModuleConfig::default_for(d_small).unwrap();
                let nl_big = NlModuleConfig::default_for(d_big).unwrap();
                assert!(
                    hybrid_cost(n_big, &nl_small, false).madds
                        > hybrid_cost(n_small, &nl_small, false).madds
                );
                assert!(
                    hybrid_cost(n_small, &nl_big, false).madds
                        > hybrid_cost(n_small, &nl_small, false).madds
                );
                assert!(
                    ffn_cost(d_small, n_big, 4, 2, false).unwrap().madds
                        > ffn_cost(d_small, n_small, 4, 2, false).unwrap().madds
                );
                assert!(
                    ffn_cost(d_big, n_small, 4, 2, false).unwrap().madds
                        > ffn_cost(d_small, n_small, 4, 2, false).unwrap().madds
                );
                let mha_n = |n: usize, d: usize| {
                    mha_cost(&MhaCostSpec::new(n, d, 8).unwrap()).madds_corrected
                };
                assert!(mha_n(n_big, d_small) > mha_n(n_small, d_small));
                assert!(mha_n(n_small, d_big) > mha_n(n_small, d_small));
            }
        }
    }

    #[test]
    fn report_totals_equal_row_sums() {
        use crate::model::{TFormerConfig, Variant};
        let cfg = TFormerConfig::for_variant(Variant::S, 1000).unwrap();
        let report = model_cost(&cfg, (224, 224), true).unwrap();
        let p: u64 = report.rows.iter().map(|r| r.params).sum();
        let m: u64 = report.rows.iter().map(|r| r.madds).sum();
        assert_eq!(report.total_params, p);
        assert_eq!(report.total_madds, m);
        assert_eq!(report.convention, "madd");
        // table renders every row plus the totals line
        let table = report.to_table();
        assert_eq!(table.lines().count(), report.rows.len() + 3);
    }

    #[test]
    fn model_cost_rejects_indivisible_input() {
        use crate::model::{TFormerConfig, Variant};
        let cfg = TFormerConfig::for_variant(Variant::S, 1000).unwrap();
        assert!(model_cost(&cfg, (225, 224), true).is_err());
    }
}
