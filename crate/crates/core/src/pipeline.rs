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

//! The full experiment: main training with pruning, gate finalization, fine-tuning,
//! optional input-layer magnitude thresholding and final evaluation. Resumes from
//! whatever phase a state is in.

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::MetricsRow;
use crate::trainer::{evaluate, pruning_ratio, Phase, TrainState};

/// Phase boundaries reported to observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Milestone {
    MainTraining,
    Finalized,
    FineTuned,
}

impl Milestone {
    pub fn name(&self) -> &'static str {
        match self {
            Milestone::MainTraining => "main",
            Milestone::Finalized => "finalized",
            Milestone::FineTuned => "final",
        }
    }
}

/// Hooks for progress reporting, metrics export and checkpointing.
pub trait Observer {
    fn on_epoch(&mut self, _state: &mut TrainState, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_milestone(&mut self, _state: &TrainState, _milestone: Milestone) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub test_accuracy: Option<f64>,
    pub test_loss: f64,
    pub hidden_widths: Vec<usize>,
    pub initial_widths: Vec<usize>,
    /// Percentage of initial weights and biases removed, including thresholded inputs.
    pub pruning_ratio: f64,
    /// First-layer weights zeroed by the input threshold.
    pub input_weights_removed: usize,
    pub main_epochs: u64,
    pub total_epochs: u64,
    pub metrics: Vec<MetricsRow>,
}

/// Runs (or resumes) the whole procedure.
pub fn run_pipeline(
    state: &mut TrainState,
    train: &Dataset,
    test: Option<&Dataset>,
    observer: &mut dyn Observer,
) -> Result<RunSummary> {
    let mut metrics = Vec::new();
    let mut on_epoch = |s: &mut TrainState, row: &MetricsRow| -> Result<()> {
        log::info!(
            "epoch {:>3} [{}] loss {:.4} acc {} alive {:?} ratio {:.2}%",
            row.epoch,
            row.phase,
            row.train_loss,
            row.test_accuracy.map_or("-".to_string(), |a| format!("{:.4}", a)),
            row.alive,
            row.pruning_ratio
        );
        if row.epoch == 1 && row.phase == "train" && s.config.pruning {
            if let Some(first) = s.gates.layers.first() {
                let up = first.theta.iter().filter(|&&t| t > s.config.theta_init).count();
                log::info!(
                    "after epoch 1, {up}/{} first-layer gate parameters are above their initial value",
                    first.theta.len()
                );
            }
        }
        observer.on_epoch(s, row)
    };
    if state.phase == Phase::Train {
        metrics.extend(state.run(train, test, &mut on_epoch)?);
        observer.on_milestone(state, Milestone::MainTraining)?;
        state.finalize_gates()?;
        observer.on_milestone(state, Milestone::Finalized)?;
    }
    let mut on_epoch = |s: &mut TrainState, row: &MetricsRow| -> Result<()> {
        log::info!("epoch {:>3} [{}] loss {:.4}", row.epoch, row.phase, row.train_loss);
        observer.on_epoch(s, row)
    };
    metrics.extend(state.fine_tune(train, test, &mut on_epoch)?);
    let input_weights_removed = state.config.input_threshold.map_or(0, |t| state.apply_input_threshold(t));
    observer.on_milestone(state, Milestone::FineTuned)?;
    let (test_accuracy, test_loss) = match test {
        Some(t) => {
            let e = evaluate(&state.net, Some(&state.eval_masks()), t)?;
            (e.accuracy, e.mean_nll)
        }
        None => (None, f64::NAN),
    };
    Ok(RunSummary {
        test_accuracy,
        test_loss,
        hidden_widths: state.net.gate_widths(),
        initial_widths: state.initial_widths.clone(),
        pruning_ratio: pruning_ratio(state.initial_param_count, &state.net, state.config.input_threshold),
        input_weights_removed,
        main_epochs: state.main_epochs,
        total_epochs: state.epoch,
        metrics,
    })
}
