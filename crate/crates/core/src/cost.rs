//! Bit-operation (BOPs) accounting and relative-cost reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::model::BranchSet;
use crate::quant::Bits;

/// One layer's contribution to the BOPs count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostInput {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    /// 1 for linear layers.
    pub kernel: usize,
    /// `(H', W')`; `(1, 1)` for linear layers.
    pub spatial_out: (usize, usize),
    pub b_a: Bits,
    pub b_w: Bits,
    pub keep_in: f64,
    pub keep_out: f64,
}

impl LayerCostInput {
    /// Full-precision, unpruned version of the same layer.
    pub fn baseline(&self) -> LayerCostInput {
        LayerCostInput {
            b_a: Bits::Full,
            b_w: Bits::Full,
            keep_in: 1.0,
            keep_out: 1.0,
            ..self.clone()
        }
    }
}

/// `(keep_in*C_in)(keep_out*C_out) K^2 H'W' (b_a b_w + b_a + b_w + log2(keep_in*C_in*K^2))`.
pub fn layer_bops(l: &LayerCostInput) -> Result<f64> {
    let check = |what: &str, keep: f64, c: usize| {
        if !(keep > 0.0 && keep <= 1.0) || c == 0 {
            Err(Error::InvalidArgument(format!(
                "{}: {what} channels {c} with keep ratio {keep} is not a positive count",
                l.name
            )))
        } else {
            Ok(keep * c as f64)
        }
    };
    let c_in = check("input", l.keep_in, l.c_in)?;
    let c_out = check("output", l.keep_out, l.c_out)?;
    if l.kernel == 0 || l.spatial_out.0 == 0 || l.spatial_out.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: kernel and output size must be positive",
            l.name
        )));
    }
    let k2 = (l.kernel * l.kernel) as f64;
    let positions = (l.spatial_out.0 * l.spatial_out.1) as f64;
    let ba = l.b_a.cost_width() as f64;
    let bw = l.b_w.cost_width() as f64;
    let per_mac = ba * bw + ba + bw + (c_in * k2).log2();
    Ok(c_in * c_out * k2 * positions * per_mac)
}

/// Cost inputs of one layer position in a (possibly hybrid) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCosts {
    pub name: String,
    pub quant: Option<LayerCostInput>,
    pub prune: Option<LayerCostInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub layer_ratio: f64,
    pub rc_prune: Option<f64>,
    pub rc_quant: Option<f64>,
    pub rc_hybrid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub bops_model: f64,
    pub bops_baseline: f64,
    pub rc_total: f64,
}

/// Relative cost of `model` against `baseline`, row by row.
///
/// A row's hybrid cost is the quantized-branch BOPs plus the pruned-branch
/// BOPs over the baseline BOPs of the same layer.
pub fn relative_cost(model: &[BranchCosts], baseline: &[LayerCostInput]) -> Result<CostReport> {
    if model.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} layers, baseline has {}",
            model.len(),
            baseline.len()
        )));
    }
    let base: Vec<f64> = baseline.iter().map(layer_bops).collect::<Result<_>>()?;
    let bops_baseline: f64 = base.iter().sum();
    let mut rows = Vec::with_capacity(model.len());
    let mut bops_model = 0.0;
    for ((m, b), &bb) in model.iter().zip(baseline).zip(&base) {
        if m.name != b.name {
            return Err(Error::InvalidArgument(format!(
                "layer name mismatch: model {:?} vs baseline {:?}",
                m.name, b.name
            )));
        }
        for l in [&m.quant, &m.prune].into_iter().flatten() {
            if l.name != m.name {
                return Err(Error::InvalidArgument(format!(
                    "layer name mismatch: {:?} inside row {:?}",
                    l.name, m.name
                )));
            }
        }
        let q = m.quant.as_ref().map(layer_bops).transpose()?;
        let p = m.prune.as_ref().map(layer_bops).transpose()?;
        if q.is_none() && p.is_none() {
            return Err(Error::InvalidArgument(format!("{}: row has no branch", m.name)));
        }
        let rc_quant = q.map(|v| v / bb);
        let rc_prune = p.map(|v| v / bb);
        bops_model += q.unwrap_or(0.0) + p.unwrap_or(0.0);
        rows.push(CostRow {
            name: m.name.clone(),
            layer_ratio: bb / bops_baseline,
            rc_prune,
            rc_quant,
            rc_hybrid: rc_prune.unwrap_or(0.0) + rc_quant.unwrap_or(0.0),
        });
    }
    Ok(CostReport {
        rows,
        bops_model,
        bops_baseline,
        rc_total: if base.is_empty() { 1.0 } else { bops_model / bops_baseline },
    })
}

/// Cost inputs derived from an architecture; `keep` gives the surviving
/// output fraction of each prunable layer of the pruned branch.
pub fn from_architecture(
    arch: &Architecture,
    branches: BranchSet,
    keep: impl Fn(&LayerSpec) -> f64,
) -> Result<(Vec<BranchCosts>, Vec<LayerCostInput>)> {
    let resolved = arch.resolve()?;
    let mut rows = Vec::new();
    let mut baseline = Vec::new();
    // Surviving fraction of the previous weighted layer's outputs in the pruned branch.
    let mut prune_keep_prev = 1.0;
    for (i, rl) in resolved.layers.iter().enumerate() {
        let s = &rl.spec;
        if !matches!(s.kind, LayerKind::Conv | LayerKind::Linear) {
            continue;
        }
        let in_head = i >= resolved.head_start;
        let spatial_out = match s.kind {
            LayerKind::Conv => (rl.out_shape[1], rl.out_shape[2]),
            _ => (1, 1),
        };
        let base = LayerCostInput {
            name: s.name.clone(),
            c_in: s.c_in,
            c_out: s.c_out,
            kernel: s.kernel,
            spatial_out,
            b_a: Bits::Full,
            b_w: Bits::Full,
            keep_in: 1.0,
            keep_out: 1.0,
        };
        if i == resolved.head_start && branches == BranchSet::Hybrid {
            // The head reads the fused map, whose channels are never removed.
            prune_keep_prev = 1.0;
        }
        let keep_out = if s.prunable && branches.has_prune() { keep(s) } else { 1.0 };
        let pruned = LayerCostInput {
            b_a: s.act_bits,
            b_w: s.weight_bits,
            keep_in: prune_keep_prev,
            keep_out,
            ..base.clone()
        };
        let quantized = LayerCostInput {
            b_a: s.act_bits,
            b_w: s.weight_bits,
            ..base.clone()
        };
        let row = if in_head {
            // One shared head, counted once.
            if branches.has_prune() {
                BranchCosts { name: s.name.clone(), quant: None, prune: Some(pruned) }
            } else {
                BranchCosts { name: s.name.clone(), quant: Some(quantized), prune: None }
            }
        } else {
            let prune = branches.has_prune().then(|| LayerCostInput {
                b_a: Bits::Full,
                b_w: Bits::Full,
                ..pruned
            });
            BranchCosts {
                name: s.name.clone(),
                quant: branches.has_quant().then_some(quantized),
                prune,
            }
        };
        prune_keep_prev = keep_out;
        rows.push(row);
        baseline.push(base);
    }
    Ok((rows, baseline))
}

/// Cost report of an architecture using each layer's configured keep ratio.
pub fn report_for_architecture(arch: &Architecture, branches: BranchSet) -> Result<CostReport> {
    let (rows, base) = from_architecture(arch, branches, |s| s.keep_ratio.unwrap_or(1.0))?;
    relative_cost(&rows, &base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ReportFormat::Tsv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["name", "LayerRatio", "RC_prune", "RC_quant", "RC_hybrid"];

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    }
}

pub fn render_report(report: &CostReport, format: ReportFormat) -> String {
    let rows: Vec<[String; 5]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                cell(Some(r.layer_ratio)),
                cell(r.rc_prune),
                cell(r.rc_quant),
                cell(Some(r.rc_hybrid)),
            ]
        })
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(&REPORT_COLUMNS.join("\t"));
            out.push('\n');
            for r in &rows {
                out.push_str(&r.join("\t"));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in &rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
    }
    out
}

/// Reads back the table written by [`render_report`] in either format.
pub fn parse_report_table(text: &str) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let cells: Vec<String> = if line.starts_with('|') {
            if line.starts_with("|---") {
                continue;
            }
            line.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
        } else {
            line.split('\t').map(str::to_string).collect()
        };
        if cells.len() != REPORT_COLUMNS.len() {
            return Err(Error::InvalidArgument(format!("malformed report line {line:?}")));
        }
        rows.push(cells);
    }
    match rows.first() {
        Some(h) if h.iter().map(String::as_str).eq(REPORT_COLUMNS) => Ok(rows.split_off(1)),
        _ => Err(Error::InvalidArgument("report header missing".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(b: u32) -> LayerCostInput {
        let bits = if b == 32 { Bits::Full } else { Bits::Fixed(b) };
        LayerCostInput {
            name: "l".into(),
            c_in: 1,
            c_out: 1,
            kernel: 1,
            spatial_out: (1, 1),
            b_a: bits,
            b_w: bits,
            keep_in: 1.0,
            keep_out: 1.0,
        }
    }

    #[test]
    fn unit_layer_bops() {
        assert_eq!(layer_bops(&unit(32)).unwrap(), 1088.0);
        assert_eq!(layer_bops(&unit(4)).unwrap(), 24.0);
        let mut l = unit(4);
        l.spatial_out = (2, 1);
        assert_eq!(layer_bops(&l).unwrap(), 48.0);
    }

    #[test]
    fn zero_keep_is_an_error() {
        let mut l = unit(4);
        l.keep_out = 0.0;
        assert!(layer_bops(&l).is_err());
        l.keep_out = 1.0;
        l.c_in = 0;
        assert!(layer_bops(&l).is_err());
    }

    #[test]
    fn identical_configs_have_unit_cost() {
        let base = vec![unit(32)];
        let model = vec![BranchCosts { name: "l".into(), quant: Some(unit(32)), prune: None }];
        let r = relative_cost(&model, &base).unwrap();
        assert_eq!(r.rows[0].rc_quant, Some(1.0));
        assert_eq!(r.rows[0].rc_hybrid, 1.0);
        assert_eq!(r.rc_total, 1.0);
    }

    #[test]
    fn name_mismatch_is_an_error() {
        let mut other = unit(32);
        other.name = "x".into();
        let model = vec![BranchCosts { name: "x".into(), quant: Some(other), prune: None }];
        assert!(relative_cost(&model, &[unit(32)]).is_err());
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = relative_cost(&[], &[]).unwrap();
        assert_eq!(render_report(&r, ReportFormat::Tsv), "name\tLayerRatio\tRC_prune\tRC_quant\tRC_hybrid\n");
        assert!(parse_report_table(&render_report(&r, ReportFormat::Markdown)).unwrap().is_empty());
    }

    #[test]
    fn markdown_parses_back() {
        let base = vec![unit(32)];
        let model = vec![BranchCosts { name: "l".into(), quant: Some(unit(4)), prune: Some(unit(32)) }];
        let r = relative_cost(&model, &base).unwrap();
        let md = parse_report_table(&render_report(&r, ReportFormat::Markdown)).unwrap();
        let tsv = parse_report_table(&render_report(&r, ReportFormat::Tsv)).unwrap();
        assert_eq!(md, tsv);
        assert_eq!(tsv[0], vec!["l", "1.00", "1.00", "0.02", "1.02"]);
    }

    #[test]
    fn default_arch_hybrid_additivity() {
        let r = report_for_architecture(&Architecture::default_toy(), BranchSet::Hybrid).unwrap();
        for row in &r.rows {
            let sum = row.rc_prune.unwrap_or(0.0) + row.rc_quant.unwrap_or(0.0);
            assert!((row.rc_hybrid - sum).abs() < 1e-12);
        }
        let ratio_sum: f64 = r.rows.iter().map(|r| r.layer_ratio).sum();
        assert!((ratio_sum - 1.0).abs() < 1e-12);
    }
}
