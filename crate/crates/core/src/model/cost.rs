//! Static parameter and operation counts.
//!
//! FLOPs count convolution and linear multiply-accumulates as one operation
//! each, plus one operation per activation output, per bias add and per
//! pooled input element. Batch norm, channel shuffle, dropout and
//! concatenation count zero. The `macs` column holds the multiply-accumulates
//! alone.

use std::fmt;

use super::{Layer, LayerKind, Model, NormRef, Step};
use crate::error::Result;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub title: String,
    pub input_size: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total(&self) -> CostRow {
        let mut t = CostRow { name: "total".into(), params: 0, macs: 0, flops: 0 };
        for r in &self.rows {
            t.params += r.params;
            t.macs += r.macs;
            t.flops += r.flops;
        }
        t
    }

    pub fn total_params(&self) -> u64 {
        self.total().params
    }

    pub fn total_flops(&self) -> u64 {
        self.total().flops
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs,flops\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total())) {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.params, r.macs, r.flops));
        }
        out
    }
}

fn millions(v: u64) -> String {
    format!("{:.3}M", v as f64 / 1e6)
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        writeln!(f, "{} ({}x{} input)", self.title, self.input_size, self.input_size)?;
        writeln!(f, "FLOPs = conv/linear MACs + activation, bias and pooling ops")?;
        writeln!(f, "{:<width$} {:>10} {:>14} {:>14}", "layer", "params", "MACs", "FLOPs")?;
        for r in &self.rows {
            writeln!(f, "{:<width$} {:>10} {:>14} {:>14}", r.name, r.params, r.macs, r.flops)?;
        }
        let t = self.total();
        writeln!(f, "{:<width$} {:>10} {:>14} {:>14}", "total", t.params, t.macs, t.flops)?;
        write!(f, "{:<width$} {:>10} {:>14} {:>14}", "", millions(t.params), millions(t.macs), millions(t.flops))
    }
}

impl<T: Element> Model<T> {
    /// Per-layer costs at the configured input size.
    pub fn count_params(&self) -> CostReport {
        self.count_flops(self.config.input_size).expect("configured input size is valid")
    }

    /// Per-layer costs for a square input of side `input_size`.
    pub fn count_flops(&self, input_size: usize) -> Result<CostReport> {
        let mut d = input_size;
        let mut rows = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (row, next) = self.layer_cost(layer, d)?;
            rows.push(row);
            d = next;
        }
        let title = format!("{:?} network, {} classes", self.config.variant, self.config.num_classes).to_lowercase();
        Ok(CostReport { title, input_size, rows })
    }

    fn numel(&self, index: usize) -> u64 {
        self.params[index].value.numel() as u64
    }

    fn norm_params(&self, n: &NormRef) -> u64 {
        self.numel(n.gamma) + self.numel(n.beta)
    }

    fn layer_cost(&self, layer: &Layer, d: usize) -> Result<(CostRow, usize)> {
        let plane = (d * d) as u64;
        let mut row = CostRow { name: layer.name.clone(), params: 0, macs: 0, flops: 0 };
        let mut next = d;
        match &layer.kind {
            LayerKind::Stem(conv) => {
                row.params = self.numel(conv.weight);
                row.macs = conv.spec.macs(d)?;
                next = conv.spec.output_extent(d)?;
            }
            LayerKind::Dense(steps) => {
                let mut channels = layer.in_channels as u64;
                for step in steps {
                    match step {
                        Step::Norm(n) => row.params += self.norm_params(n),
                        Step::Act => row.flops += channels * plane,
                        Step::Conv(conv) => {
                            row.params += self.numel(conv.weight);
                            row.macs += conv.spec.macs(d)?;
                            channels = conv.spec.out_channels as u64;
                        }
                        Step::Shuffle(_) | Step::Dropout(_) => {}
                    }
                }
            }
            LayerKind::Pool(window) => {
                row.flops = layer.in_channels as u64 * plane;
                next = d / window;
            }
            LayerKind::Head { norm, weight, bias } => {
                let c = layer.in_channels as u64;
                let classes = layer.out_channels as u64;
                if let Some(n) = norm {
                    row.params += self.norm_params(n);
                }
                row.params += self.numel(*weight) + self.numel(*bias);
                row.macs = c * classes;
                row.flops = 2 * c * plane + classes;
                next = 1;
            }
        }
        row.flops += row.macs;
        Ok((row, next))
    }
}
