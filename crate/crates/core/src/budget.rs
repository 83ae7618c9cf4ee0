//! Static memory and compute accounting for a feature configuration and a
//! network, computed from shapes alone.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cnn::conv_out_len;
use crate::mfcc::MfccConfig;
use crate::weights::{ModelWeights, CONV_FILTERS, DEFAULT_INPUT, KERNEL_SIZE};

/// Scratch memory assumed for preprocessing, in KB.
pub const DEFAULT_SCRATCH_KB: f64 = 8.4;
const BYTES_PER_COEFFICIENT: usize = 4;

/// Figures published alongside the reference network, printed next to the
/// computed values for comparison.
pub mod published {
    pub const MAC_COUNT: u64 = 13_260_000;
    pub const ADD_COUNT: u64 = 3_260;
    pub const WEIGHTS_KB_FLOAT: f64 = 65.0;
    pub const WEIGHTS_KB_INT8: f64 = 16.25;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureBudget {
    pub frame_length_ms: u32,
    pub overlap_pct: u32,
    pub hop_ms: f64,
    pub n_frames: usize,
    pub total_mfcc_coefficients: usize,
    pub mfcc_memory_kb: f64,
    pub preprocessing_memory_kb: f64,
}

pub fn mfcc_budget(config: &MfccConfig, scratch_kb: f64) -> FeatureBudget {
    let n_frames = config.n_frames();
    let total = config.n_mfcc * n_frames;
    let mfcc_kb = (total * BYTES_PER_COEFFICIENT) as f64 / 1024.0;
    FeatureBudget {
        frame_length_ms: config.frame_length_ms,
        overlap_pct: config.overlap_pct,
        hop_ms: config.hop_ms(),
        n_frames,
        total_mfcc_coefficients: total,
        mfcc_memory_kb: mfcc_kb,
        preprocessing_memory_kb: mfcc_kb + scratch_kb,
    }
}

/// Layer dimensions needed for compute accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NetworkShape {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub filters: [usize; 3],
    pub dense_inputs: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            input_h: DEFAULT_INPUT.0,
            input_w: DEFAULT_INPUT.1,
            input_c: 1,
            filters: CONV_FILTERS,
            dense_inputs: CONV_FILTERS[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub macs: u64,
    pub bias_adds: u64,
}

impl NetworkShape {
    pub fn from_weights(w: &ModelWeights) -> Self {
        Self {
            input_h: w.input_shape.0,
            input_w: w.input_shape.1,
            input_c: 1,
            filters: [w.conv[0].filters, w.conv[1].filters, w.conv[2].filters],
            dense_inputs: w.dense.kernel.len(),
        }
    }

    pub fn conv_costs(&self) -> [LayerCost; 3] {
        let (mut h, mut w, mut c) = (self.input_h, self.input_w, self.input_c);
        self.filters.map(|f| {
            let (oh, ow) = (conv_out_len(h), conv_out_len(w));
            let outputs = (oh * ow * f) as u64;
            let cost = LayerCost {
                out_h: oh,
                out_w: ow,
                out_c: f,
                macs: outputs * (KERNEL_SIZE * KERNEL_SIZE * c) as u64,
                bias_adds: outputs,
            };
            (h, w, c) = (oh, ow, f);
            cost
        })
    }

    pub fn mac_count(&self) -> u64 {
        self.conv_costs().iter().map(|l| l.macs).sum::<u64>() + self.dense_inputs as u64
    }

    /// Conv and dense bias additions plus the subtract/add pair of batch norm.
    pub fn add_count(&self) -> u64 {
        let bias: u64 = self.conv_costs().iter().map(|l| l.bias_adds).sum();
        bias + 1 + 2 * self.filters[2] as u64
    }

    pub fn kernel_params(&self) -> [usize; 4] {
        let mut c = self.input_c;
        let mut out = [0; 4];
        for (i, &f) in self.filters.iter().enumerate() {
            out[i] = KERNEL_SIZE * KERNEL_SIZE * c * f;
            c = f;
        }
        out[3] = self.dense_inputs;
        out
    }

    /// Biases, batch-norm parameters (four per channel) and the dense bias.
    pub fn float_side_params(&self) -> usize {
        self.filters.iter().sum::<usize>() + 4 * self.filters[2] + 1
    }

    pub fn param_count(&self) -> usize {
        self.kernel_params().iter().sum::<usize>() + self.float_side_params()
    }

    pub fn float_payload_bytes(&self) -> usize {
        self.param_count() * 4
    }

    /// Kernels as int8 with an f32 scale and i32 zero point each; everything
    /// else as f32.
    pub fn int8_payload_bytes(&self) -> usize {
        self.kernel_params().iter().map(|k| k + 8).sum::<usize>() + self.float_side_params() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelBudget {
    pub shape: NetworkShape,
    pub layers: [LayerCost; 3],
    pub param_count: usize,
    pub weights_memory_kb_float: f64,
    pub weights_memory_kb_int8: f64,
    pub mac_count: u64,
    pub add_count: u64,
    pub published_mac_count: u64,
    pub published_add_count: u64,
    pub published_weights_kb_float: f64,
    pub published_weights_kb_int8: f64,
}

pub fn shape_budget(shape: NetworkShape) -> ModelBudget {
    ModelBudget {
        shape,
        layers: shape.conv_costs(),
        param_count: shape.param_count(),
        weights_memory_kb_float: shape.float_payload_bytes() as f64 / 1024.0,
        weights_memory_kb_int8: shape.int8_payload_bytes() as f64 / 1024.0,
        mac_count: shape.mac_count(),
        add_count: shape.add_count(),
        published_mac_count: published::MAC_COUNT,
        published_add_count: published::ADD_COUNT,
        published_weights_kb_float: published::WEIGHTS_KB_FLOAT,
        published_weights_kb_int8: published::WEIGHTS_KB_INT8,
    }
}

pub fn model_budget(weights: &ModelWeights) -> ModelBudget {
    shape_budget(NetworkShape::from_weights(weights))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub features: Vec<FeatureBudget>,
    pub model: ModelBudget,
}

/// Decimal rendering with up to eight places and no trailing zeros.
pub fn format_decimal(x: f64) -> String {
    let s = format!("{x:.8}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

pub const TABLE_HEADER: [&str; 7] = [
    "frame_ms",
    "overlap_pct",
    "hop_ms",
    "n_frames",
    "mfcc_coefficients",
    "mfcc_kb",
    "preprocessing_kb",
];

pub fn table_cells(b: &FeatureBudget) -> [String; 7] {
    [
        b.frame_length_ms.to_string(),
        b.overlap_pct.to_string(),
        format_decimal(b.hop_ms),
        b.n_frames.to_string(),
        b.total_mfcc_coefficients.to_string(),
        format_decimal(b.mfcc_memory_kb),
        format_decimal(b.preprocessing_memory_kb),
    ]
}

pub fn render_csv(rows: &[FeatureBudget]) -> String {
    let mut out = TABLE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&table_cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn render_text(rows: &[FeatureBudget]) -> String {
    let cells: Vec<[String; 7]> = rows.iter().map(table_cells).collect();
    let widths: Vec<usize> = (0..7)
        .map(|i| cells.iter().map(|r| r[i].len()).chain([TABLE_HEADER[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        let padded: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  "));
    };
    line(&mut out, &TABLE_HEADER);
    for r in &cells {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn render_model(m: &ModelBudget) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "parameters            {}", m.param_count);
    for (i, l) in m.layers.iter().enumerate() {
        let _ = writeln!(out, "conv{} output          ({}, {}, {})  {} MACs", i + 1, l.out_h, l.out_w, l.out_c, l.macs);
    }
    let _ = writeln!(
        out,
        "weights float         {} KB  (published {} KB)",
        format_decimal(m.weights_memory_kb_float),
        m.published_weights_kb_float
    );
    let _ = writeln!(
        out,
        "weights int8          {} KB  (published {} KB)",
        format_decimal(m.weights_memory_kb_int8),
        m.published_weights_kb_int8
    );
    let _ = writeln!(out, "MACs                  {}  (published {})", m.mac_count, m.published_mac_count);
    let _ = writeln!(out, "additions             {}  (published {})", m.add_count, m.published_add_count);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows() {
        let b = mfcc_budget(&MfccConfig::new(5, 25), DEFAULT_SCRATCH_KB);
        assert_eq!(
            table_cells(&b),
            ["5", "25", "3.75", "267", "10680", "41.71875", "50.11875"].map(String::from)
        );
        let b = mfcc_budget(&MfccConfig::new(50, 0), DEFAULT_SCRATCH_KB);
        assert_eq!(table_cells(&b), ["50", "0", "50", "20", "800", "3.125", "11.525"].map(String::from));
        let b = mfcc_budget(&MfccConfig::new(70, 0), DEFAULT_SCRATCH_KB);
        assert_eq!((b.n_frames, format_decimal(b.mfcc_memory_kb)), (15, "2.34375".into()));
    }

    #[test]
    fn reference_network() {
        let m = shape_budget(NetworkShape::default());
        assert_eq!(m.param_count, 16561);
        assert_eq!(m.layers[1].macs, 9 * 66 * 32 * 144);
        assert_eq!(m.layers[1].macs, 2_737_152);
        assert_eq!(m.mac_count, 363_888 + 2_737_152 + 1_474_560 + 40);
        assert!((m.weights_memory_kb_float - 64.69).abs() < 0.01);
        assert!(m.weights_memory_kb_int8 <= 17.0);
        let w = ModelWeights::seeded(2, DEFAULT_INPUT);
        assert_eq!(model_budget(&w), m);
        assert_eq!(NetworkShape::default().float_payload_bytes(), w.payload_bytes());
        assert_eq!(
            NetworkShape::default().int8_payload_bytes(),
            crate::quantize::quantize_model(&w).payload_bytes()
        );
    }

    #[test]
    fn degenerate_input_counts_dense_only() {
        let s = NetworkShape { input_h: 1, input_w: 1, ..Default::default() };
        assert_eq!(s.mac_count(), 40);
    }

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(31.25 + 8.4), "39.65");
        assert_eq!(format_decimal(200.0), "200");
        assert_eq!(format_decimal(0.00390625), "0.00390625");
    }
}
