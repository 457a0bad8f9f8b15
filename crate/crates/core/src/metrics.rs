// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Per-epoch metrics rows and their CSV encoding.

use std::io::Write;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub iteration: u64,
    pub phase: String,
    /// Mean per-sample negative log-likelihood over the epoch's minibatches.
    pub train_loss: f64,
    /// Top-1 accuracy in `[0,1]`; `None` for regression.
    pub test_accuracy: Option<f64>,
    pub test_loss: f64,
    pub alive: Vec<usize>,
    /// Percentage of the initial network's weights and biases removed.
    pub pruning_ratio: f64,
    pub theta_mean: Vec<f64>,
    pub theta_min: Vec<f64>,
    pub theta_max: Vec<f64>,
}

/// Column names for a network with `gated_layers` gated layers.
pub fn metrics_header(gated_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "iteration", "phase", "train_loss", "test_accuracy", "test_loss", "pruning_ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["alive", "theta_mean", "theta_min", "theta_max"] {
        h.extend((0..gated_layers).map(|l| format!("{prefix}_{l}")));
    }
    h
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl MetricsRow {
    /// One CSV line (without newline) matching [`metrics_header`].
    pub fn csv_line(&self, gated_layers: usize) -> String {
        self.cells(gated_layers).join(",")
    }

    fn cells(&self, gated_layers: usize) -> Vec<String> {
        let mut c = vec![
            self.epoch.to_string(),
            self.iteration.to_string(),
            self.phase.clone(),
            fmt_f(self.train_loss),
            self.test_accuracy.map(fmt_f).unwrap_or_default(),
            fmt_f(self.test_loss),
            fmt_f(self.pruning_ratio),
        ];
        let pad = |v: &[f64]| (0..gated_layers).map(|l| v.get(l).copied().map(fmt_f).unwrap_or_default()).collect::<Vec<_>>();
        c.extend((0..gated_layers).map(|l| self.alive.get(l).map(|a| a.to_string()).unwrap_or_default()));
        c.extend(pad(&self.theta_mean));
        c.extend(pad(&self.theta_min));
        c.extend(pad(&self.theta_max));
        c
    }
}

/// Writes a header and one line per row. The column set is fixed by `gated_layers`.
pub fn write_metrics_csv<W: Write>(out: &mut W, gated_layers: usize, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{}", metrics_header(gated_layers).join(","))?;
    for r in rows {
        writeln!(out, "{}", r.cells(gated_layers).join(","))?;
    }
    Ok(())
}

/// Writes the θ trajectory: one line per epoch, one column per unit of the initial
/// architecture (`l{layer}_u{unit}`).
pub fn write_theta_csv<W: Write>(out: &mut W, widths: &[usize], history: &[(u64, Vec<f64>)]) -> Result<()> {
    let mut header = vec!["epoch".to_string()];
    for (l, &w) in widths.iter().enumerate() {
        header.extend((0..w).map(|u| format!("l{l}_u{u}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for (epoch, thetas) in history {
        let mut line = vec![epoch.to_string()];
        line.extend(thetas.iter().map(|&t| fmt_f(t)));
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// `(mean, min, max)` of a slice; NaNs for an empty slice.
pub fn summary(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: u64) -> MetricsRow {
        MetricsRow {
            epoch,
            iteration: epoch * 10,
            phase: "train".into(),
            train_loss: 0.5,
            test_accuracy: Some(0.9),
            test_loss: 0.4,
            alive: vec![3, 2],
            pruning_ratio: 12.5,
            theta_mean: vec![0.5, 0.6],
            theta_min: vec![0.1, 0.2],
            theta_max: vec![0.9, 1.0],
        }
    }

    #[test]
    fn header_only_for_no_rows() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, 2, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn constant_column_count() {
        let mut buf = Vec::new();
        let mut short = row(2);
        short.test_accuracy = None;
        write_metrics_csv(&mut buf, 2, &[row(1), short]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let counts: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert_eq!(counts, vec![15, 15, 15]);
    }

    #[test]
    fn theta_file_cell_count() {
        let mut buf = Vec::new();
        let history = vec![(1, vec![0.5; 5]), (2, vec![0.4; 5]), (3, vec![0.3; 5])];
        write_theta_csv(&mut buf, &[3, 2], &history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cells: usize = text.lines().skip(1).map(|l| l.split(',').count() - 1).sum();
        assert_eq!(cells, 3 * 5);
    }
}
