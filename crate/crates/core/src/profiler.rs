//! Analytical multiply-accumulate (MAC) and parameter cost model.
//!
//! Every row counts one MAC per multiply-accumulate with no constant factors
//! dropped. Causal attention is counted over the full `N²` score matrix.
//! The embedding lookup costs nothing; the LM head is counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{count_params, AttnVariant, ModelConfig, ParamCount};
use crate::error::{Result, UmoeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    Dense,
    FfnMoe,
    MoaLike,
    SwitchheadLike,
    UmoeAtt,
    Umoe,
}

impl ArchVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchVariant::Dense => "dense",
            ArchVariant::FfnMoe => "ffn_moe",
            ArchVariant::MoaLike => "moa_like",
            ArchVariant::SwitchheadLike => "switchhead_like",
            ArchVariant::UmoeAtt => "umoe_att",
            ArchVariant::Umoe => "umoe",
        }
    }
}

/// Which attention cost formulas a descriptor uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnFormulation {
    Vanilla,
    PreMixing,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub variant: ArchVariant,
    pub seq_len: u64,
    pub batch: u64,
    pub cfg: ModelConfig,
}

impl ArchDescriptor {
    /// Descriptor for a runnable configuration; the variant follows from the config.
    pub fn from_config(name: impl Into<String>, cfg: &ModelConfig, seq_len: u64, batch: u64) -> Self {
        let variant = match (cfg.attn_is_moe(), cfg.ffn_is_moe()) {
            (false, false) => ArchVariant::Dense,
            (false, true) => ArchVariant::FfnMoe,
            (true, false) => ArchVariant::UmoeAtt,
            (true, true) => ArchVariant::Umoe,
        };
        Self {
            name: name.into(),
            variant,
            seq_len,
            batch,
            cfg: cfg.clone(),
        }
    }

    /// Mixture-of-attention-heads style: per-expert query and output projections,
    /// one shared key and value projection, `k_attn` active heads.
    pub fn moa_like(name: impl Into<String>, cfg: &ModelConfig, seq_len: u64, batch: u64) -> Self {
        Self {
            variant: ArchVariant::MoaLike,
            ..Self::from_config(name, cfg, seq_len, batch)
        }
    }

    /// SwitchHead style: dense per-head query/key, expert value and output projections.
    pub fn switchhead_like(name: impl Into<String>, cfg: &ModelConfig, seq_len: u64, batch: u64) -> Self {
        Self {
            variant: ArchVariant::SwitchheadLike,
            ..Self::from_config(name, cfg, seq_len, batch)
        }
    }

    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.seq_len == 0 || self.batch == 0 {
            return Err(UmoeError::InvalidConfig("seq_len and batch must be positive".into()));
        }
        if matches!(self.variant, ArchVariant::MoaLike | ArchVariant::SwitchheadLike) && self.cfg.k_attn == 0 {
            return Err(UmoeError::InvalidConfig(
                "attention-expert descriptors need k_attn > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Dimensions entering the attention rows of the complexity table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub seq: u64,
    pub d: u64,
    /// Heads, or activated attention experts.
    pub heads: u64,
    /// Heads carrying a low-rank query branch.
    pub lora_heads: u64,
    pub key_dim: u64,
    pub value_dim: u64,
    pub rank: u64,
}

pub const ROW_OUTPUT: &str = "output_projection";
pub const ROW_VALUE: &str = "value_projection";
pub const ROW_KEY: &str = "key_projection";
pub const ROW_QUERY: &str = "query_projection";
pub const ROW_QK: &str = "qk_multiply";
pub const ROW_WEIGHTED_SUM: &str = "weighted_sum";
pub const ROW_ROUTER: &str = "router";
pub const ROW_FFN: &str = "ffn";
pub const ROW_EMBEDDING: &str = "embedding";
pub const ROW_LM_HEAD: &str = "lm_head";

/// Exact per-sequence attention MACs for one layer.
pub fn attention_rows(form: AttnFormulation, a: AttnDims) -> Vec<(&'static str, u64)> {
    let AttnDims {
        seq: n,
        d,
        heads: h,
        lora_heads,
        key_dim: dk,
        value_dim: dv,
        rank: r,
    } = a;
    match form {
        AttnFormulation::Vanilla => vec![
            (ROW_OUTPUT, n * dv * d * h),
            (ROW_VALUE, n * dv * d * h),
            (ROW_KEY, n * dk * d * h),
            (ROW_QUERY, n * dk * d * h),
            (ROW_QK, n * n * dk * h),
            (ROW_WEIGHTED_SUM, n * n * dv * h),
        ],
        AttnFormulation::PreMixing => vec![
            (ROW_OUTPUT, n * dv * d * h),
            (ROW_VALUE, n * dv * d * h),
            (ROW_KEY, n * dk * d),
            (ROW_QUERY, n * dk * d + n * (dk + d) * r * lora_heads),
            (ROW_QK, n * n * dk * h),
            (ROW_WEIGHTED_SUM, n * n * d * h),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub op: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub variant: ArchVariant,
    pub seq_len: u64,
    pub batch: u64,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    /// Absent for the "like" descriptors, which have no runnable parameter layout.
    pub params: Option<ParamCount>,
    pub assumptions: Vec<String>,
}

impl CostReport {
    pub fn row(&self, op: &str) -> u64 {
        self.rows.iter().find(|r| r.op == op).map_or(0, |r| r.macs)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ({}), seq {} x batch {}",
            self.name,
            self.variant.as_str(),
            self.seq_len,
            self.batch
        );
        let width = self.rows.iter().map(|r| r.op.len()).max().unwrap_or(5).max(5);
        for r in &self.rows {
            let _ = writeln!(s, "  {:<width$}  {:>20}  {:>10}", r.op, r.macs, human(r.macs as f64));
        }
        let _ = writeln!(
            s,
            "  {:<width$}  {:>20}  {:>10}",
            "total",
            self.total_macs,
            human(self.total_macs as f64)
        );
        if let Some(p) = &self.params {
            let _ = writeln!(
                s,
                "  {:<width$}  {:>20}  {:>10}",
                "params",
                p.total,
                human(p.total as f64)
            );
        }
        for a in &self.assumptions {
            let _ = writeln!(s, "  * {a}");
        }
        s
    }
}

fn human(v: f64) -> String {
    let units = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, unit) in units {
        if v >= scale {
            return format!("{:.2}{unit}", v / scale);
        }
    }
    format!("{v}")
}

/// Per-operation MACs for a whole forward pass over `batch` sequences of `seq_len` tokens.
pub fn macs(desc: &ArchDescriptor) -> Result<CostReport> {
    desc.validate()?;
    let c = &desc.cfg;
    let n = desc.seq_len;
    let d = c.hidden_dim as u64;
    let dk = c.key_dim as u64;
    let dv = c.value_dim as u64;
    let heads = c.n_heads as u64;
    let k_attn = c.k_attn as u64;
    let mut rows: Vec<(&'static str, u64)> = Vec::new();
    let mut assumptions = vec![
        "one MAC per multiply-accumulate, constant factors kept".to_string(),
        "causal attention counted over the full N^2 score matrix".to_string(),
        "embedding lookup counted as 0 MACs; LM head included".to_string(),
        "expert counts per token include fixed experts".to_string(),
    ];

    match desc.variant {
        ArchVariant::Dense | ArchVariant::FfnMoe => {
            rows.extend(attention_rows(
                AttnFormulation::Vanilla,
                AttnDims {
                    seq: n,
                    d,
                    heads,
                    lora_heads: 0,
                    key_dim: dk,
                    value_dim: dv,
                    rank: 0,
                },
            ));
        }
        ArchVariant::UmoeAtt | ArchVariant::Umoe => {
            if c.attn_variant == AttnVariant::UmoeAttPostmix {
                assumptions.push("post-mixing attention costed with the pre-mixing formulas".to_string());
            }
            rows.extend(attention_rows(
                AttnFormulation::PreMixing,
                AttnDims {
                    seq: n,
                    d,
                    heads: k_attn,
                    lora_heads: c.attn_routed_k() as u64,
                    key_dim: dk,
                    value_dim: dv,
                    rank: c.lora_rank as u64,
                },
            ));
            rows.push((ROW_ROUTER, n * c.attn_experts() as u64 * d));
        }
        ArchVariant::MoaLike => {
            rows.extend([
                (ROW_OUTPUT, n * dv * d * k_attn),
                (ROW_VALUE, n * dv * d),
                (ROW_KEY, n * dk * d),
                (ROW_QUERY, n * dk * d * k_attn),
                (ROW_QK, n * n * dk * k_attn),
                (ROW_WEIGHTED_SUM, n * n * dv * k_attn),
                (ROW_ROUTER, n * c.n_experts as u64 * d),
            ]);
            assumptions.push("moa_like: shared key/value projection, per-expert query/output".to_string());
        }
        ArchVariant::SwitchheadLike => {
            rows.extend([
                (ROW_OUTPUT, n * dv * d * k_attn),
                (ROW_VALUE, n * dv * d * k_attn),
                (ROW_KEY, n * dk * d * heads),
                (ROW_QUERY, n * dk * d * heads),
                (ROW_QK, n * n * dk * heads),
                (ROW_WEIGHTED_SUM, n * n * dv * heads),
                (ROW_ROUTER, 2 * n * c.n_experts as u64 * d),
            ]);
            assumptions.push("switchhead_like: dense per-head query/key, expert value/output".to_string());
        }
    }

    let ffn_is_moe = match desc.variant {
        ArchVariant::FfnMoe | ArchVariant::Umoe => true,
        ArchVariant::Dense | ArchVariant::UmoeAtt => false,
        ArchVariant::MoaLike | ArchVariant::SwitchheadLike => c.ffn_is_moe(),
    };
    if ffn_is_moe {
        rows.push((ROW_FFN, 2 * n * d * dv * c.k_ffn as u64));
        rows.push((ROW_ROUTER, n * c.ffn_experts() as u64 * d));
    } else {
        rows.push((ROW_FFN, 2 * n * d * c.ffn_dim as u64));
    }

    // Per-layer rows scale with depth and batch; merge duplicate router rows.
    let scale = desc.batch * c.n_layers as u64;
    let mut merged: Vec<CostRow> = Vec::new();
    for (op, v) in rows {
        match merged.iter_mut().find(|r| r.op == op) {
            Some(r) => r.macs += v * scale,
            None => merged.push(CostRow {
                op: op.to_string(),
                macs: v * scale,
            }),
        }
    }
    merged.push(CostRow {
        op: ROW_EMBEDDING.into(),
        macs: 0,
    });
    merged.push(CostRow {
        op: ROW_LM_HEAD.into(),
        macs: desc.batch * n * d * c.vocab_size as u64,
    });
    let total_macs = merged.iter().map(|r| r.macs).sum();
    let params = match desc.variant {
        ArchVariant::MoaLike | ArchVariant::SwitchheadLike => None,
        _ => Some(count_params(c)?),
    };
    Ok(CostReport {
        name: desc.name.clone(),
        variant: desc.variant,
        seq_len: n,
        batch: desc.batch,
        rows: merged,
        total_macs,
        params,
        assumptions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowRatio {
    pub op: String,
    pub baseline: u64,
    pub candidate: u64,
    /// `candidate / baseline`; `None` when the baseline row is zero.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub baseline: CostReport,
    pub candidate: CostReport,
    pub rows: Vec<RowRatio>,
    pub total_ratio: f64,
}

/// Per-row and total MAC ratios `b / a`.
pub fn compare(a: &ArchDescriptor, b: &ArchDescriptor) -> Result<CompareReport> {
    if a.seq_len != b.seq_len || a.batch != b.batch {
        return Err(UmoeError::InvalidConfig(
            "compared descriptors must share sequence length and batch".into(),
        ));
    }
    let ra = macs(a)?;
    let rb = macs(b)?;
    let mut ops: Vec<String> = ra.rows.iter().map(|r| r.op.clone()).collect();
    for r in &rb.rows {
        if !ops.contains(&r.op) {
            ops.push(r.op.clone());
        }
    }
    let rows = ops
        .into_iter()
        .map(|op| {
            let (x, y) = (ra.row(&op), rb.row(&op));
            RowRatio {
                ratio: (x > 0).then(|| y as f64 / x as f64),
                op,
                baseline: x,
                candidate: y,
            }
        })
        .collect();
    let total_ratio = rb.total_macs as f64 / ra.total_macs as f64;
    Ok(CompareReport {
        baseline: ra,
        candidate: rb,
        rows,
        total_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset};

    fn unit() -> AttnDims {
        AttnDims {
            seq: 1,
            d: 1,
            heads: 1,
            lora_heads: 1,
            key_dim: 1,
            value_dim: 1,
            rank: 1,
        }
    }

    fn get(rows: &[(&str, u64)], op: &str) -> u64 {
        rows.iter().find(|r| r.0 == op).unwrap().1
    }

    #[test]
    fn unit_dimensions_are_hand_countable() {
        let v = attention_rows(AttnFormulation::Vanilla, unit());
        assert!(v.iter().all(|r| r.1 == 1));
        let p = attention_rows(AttnFormulation::PreMixing, unit());
        assert_eq!(get(&p, ROW_QUERY), 3);
        assert_eq!(get(&p, ROW_KEY), 1);
        assert_eq!(get(&p, ROW_WEIGHTED_SUM), 1);
    }

    #[test]
    fn premixing_key_projection_is_h_fold_smaller() {
        let dims = AttnDims {
            seq: 7,
            d: 12,
            heads: 4,
            lora_heads: 4,
            key_dim: 3,
            value_dim: 5,
            rank: 2,
        };
        let v = attention_rows(AttnFormulation::Vanilla, dims);
        let p = attention_rows(AttnFormulation::PreMixing, dims);
        assert_eq!(get(&v, ROW_KEY), 7 * 3 * 12 * 4);
        assert_eq!(get(&p, ROW_KEY), 7 * 3 * 12);
        assert_eq!(get(&p, ROW_QUERY), 7 * 3 * 12 + 7 * (3 + 12) * 2 * 4);
        assert_eq!(get(&v, ROW_WEIGHTED_SUM), 49 * 5 * 4);
        assert_eq!(get(&p, ROW_WEIGHTED_SUM), 49 * 12 * 4);
        assert_eq!(get(&v, ROW_QK), get(&p, ROW_QK));
        assert_eq!(get(&v, ROW_OUTPUT), get(&p, ROW_OUTPUT));
    }

    #[test]
    fn totals_equal_row_sums() {
        for p in Preset::ALL {
            let r = macs(&ArchDescriptor::from_config(p.as_str(), &preset(p), 1024, 4)).unwrap();
            assert_eq!(r.total_macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        }
    }

    #[test]
    fn base_ratio_and_absolutes() {
        let dense = ArchDescriptor::from_config("dense", &preset(Preset::BaseDense), 1024, 4);
        let umoe = ArchDescriptor::from_config("umoe", &preset(Preset::BaseUmoe), 1024, 4);
        let c = compare(&dense, &umoe).unwrap();
        assert!((1.10..=1.25).contains(&c.total_ratio), "{}", c.total_ratio);
        let abs = c.baseline.total_macs as f64;
        assert!((abs / 525e9 - 1.0).abs() < 0.15);
        assert!((c.candidate.total_macs as f64 / 616e9 - 1.0).abs() < 0.15);
    }

    #[test]
    fn large_ratio() {
        let dense = ArchDescriptor::from_config("dense", &preset(Preset::LargeDense), 1024, 4);
        let umoe = ArchDescriptor::from_config("umoe", &preset(Preset::LargeUmoe), 1024, 4);
        let c = compare(&dense, &umoe).unwrap();
        assert!((1.00..=1.08).contains(&c.total_ratio), "{}", c.total_ratio);
        assert!((c.baseline.total_macs as f64 / 4.59e12 - 1.0).abs() < 0.15);
    }

    #[test]
    fn moa_like_base_total() {
        let d = ArchDescriptor::moa_like("moa", &preset(Preset::BaseUmoeAtt), 1024, 4);
        let r = macs(&d).unwrap();
        assert!((r.total_macs as f64 / 486e9 - 1.0).abs() < 0.02);
        assert!(r.params.is_none());
    }

    #[test]
    fn identical_descriptors_give_unit_ratios() {
        let a = ArchDescriptor::from_config("a", &preset(Preset::BaseUmoe), 512, 2);
        let c = compare(&a, &a).unwrap();
        assert_eq!(c.total_ratio, 1.0);
        assert!(c.rows.iter().all(|r| r.ratio.is_none_or(|v| v == 1.0)));
    }

    #[test]
    fn mismatched_sequence_lengths_are_rejected() {
        let a = ArchDescriptor::from_config("a", &preset(Preset::BaseDense), 512, 2);
        let b = ArchDescriptor::from_config("b", &preset(Preset::BaseDense), 1024, 2);
        assert!(compare(&a, &b).is_err());
    }

    #[test]
    fn projections_scale_linearly_and_mixing_quadratically() {
        for p in [Preset::BaseDense, Preset::BaseUmoe] {
            let one = macs(&ArchDescriptor::from_config("x", &preset(p), 256, 1)).unwrap();
            let two = macs(&ArchDescriptor::from_config("x", &preset(p), 512, 1)).unwrap();
            for op in [
                ROW_OUTPUT,
                ROW_VALUE,
                ROW_KEY,
                ROW_QUERY,
                ROW_FFN,
                ROW_ROUTER,
                ROW_LM_HEAD,
            ] {
                assert_eq!(two.row(op), 2 * one.row(op), "{op}");
            }
            for op in [ROW_QK, ROW_WEIGHTED_SUM] {
                assert_eq!(two.row(op), 4 * one.row(op), "{op}");
            }
        }
    }

    #[test]
    fn mixing_share_shrinks_with_width() {
        let mut prev = f64::INFINITY;
        for d in [128usize, 256, 512, 1024, 2048, 4096] {
            let cfg = ModelConfig {
                hidden_dim: d,
                value_dim: 4 * d,
                ffn_dim: 4 * d,
                key_dim: d / 4,
                ..preset(Preset::BaseUmoe)
            };
            let r = macs(&ArchDescriptor::from_config("x", &cfg, 1024, 1)).unwrap();
            let experts = r.row(ROW_OUTPUT) + r.row(ROW_VALUE) + r.row(ROW_FFN);
            let ratio = r.row(ROW_WEIGHTED_SUM) as f64 / experts as f64;
            assert!(ratio < prev);
            prev = ratio;
        }
    }
}
