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

//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gateprune_core::checkpoint::{load_checkpoint, save_checkpoint};
use gateprune_core::config::{Arch, DataKind, RunConfig};
use gateprune_core::convergence::{
    roa_radius, sample_ball, stability_check, sweep, DiffFn, UnitDynamics,
};
use gateprune_core::data::Dataset;
use gateprune_core::estimators::{bench_estimators, EstimatorKind};
use gateprune_core::hyper_prior::{pi_star, reg_term, ClipBounds, HyperPrior, NumericMinimizer};
use gateprune_core::metrics::{metrics_header, MetricsRow};
use gateprune_core::network::{GateState, Network};
use gateprune_core::pipeline::{run_pipeline, Milestone, Observer};
use gateprune_core::tensor::{LossKind, Tensor};
use gateprune_core::trainer::{
    evaluate, pruning_ratio, EstimatorName, PriorConfig, PriorFamily, PruneCondition, StepSchedule, TrainState,
};
use gateprune_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    ArchArg, BenchArgs, ConditionArg, DataArgs, DataKindArg, DiffArg, EstimatorArg, EvalArgs, FamilyArg, OdeLabArgs,
    PriorCurveArgs, ScheduleArg, TrainArgs,
};

fn apply_data_args(run: &mut RunConfig, a: &DataArgs) {
    let d = &mut run.data;
    if let Some(k) = a.data {
        d.kind = match k {
            DataKindArg::Mnist => DataKind::Mnist,
            DataKindArg::Blobs => DataKind::Blobs,
        };
    }
    if let Some(v) = &a.data_dir {
        d.dir = Some(v.clone());
    }
    macro_rules! set {
        ($($src:ident => $dst:expr),* $(,)?) => { $( if let Some(v) = a.$src { $dst = v; } )* };
    }
    set!(
        blob_classes => d.classes,
        blob_dim => d.dim,
        blob_train_per_class => d.train_per_class,
        blob_test_per_class => d.test_per_class,
        blob_center_scale => d.center_scale,
        blob_seed => d.seed,
    );
    if let Some(n) = a.train_subset {
        d.train_subset = Some(n);
    }
}

/// Effective configuration: built-in defaults (or the resumed checkpoint's training
/// settings), then the config file, then command-line flags.
pub fn effective_config(a: &TrainArgs, resumed: Option<&TrainState>) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut r = RunConfig::default();
            if let Some(s) = resumed {
                r.train = s.config.clone();
            }
            r
        }
    };
    if let Some(d) = &a.output_dir {
        run.output_dir = d.clone();
    }
    if let Some(k) = a.checkpoint_every {
        run.checkpoint_every = Some(k);
    }
    apply_data_args(&mut run, &a.data);
    if let Some(arch) = a.arch {
        run.model.arch = match arch {
            ArchArg::Mlp => Arch::Mlp,
            ArchArg::Lenet5 => Arch::Lenet5,
        };
    }
    if let Some(h) = &a.hidden {
        run.model.hidden = h.clone();
    }
    let t = &mut run.train;
    macro_rules! set {
        ($($src:ident => $dst:expr),* $(,)?) => { $( if let Some(v) = a.$src { $dst = v; } )* };
    }
    set!(
        epochs => t.epochs,
        batch_size => t.batch_size,
        lambda => t.lambda,
        log_gamma => t.prior.log_gamma,
        alpha => t.prior.alpha,
        beta => t.prior.beta,
        eps2 => t.prior.eps2,
        theta_init => t.theta_init,
        theta_high => t.theta_high,
        phi_max => t.phi_max,
        temperature => t.estimator.temperature,
        hybrid_k => t.estimator.hybrid_k,
        theta_tol => t.prune.theta_tol,
        theta_per => t.prune.theta_per,
        fine_tune_epochs => t.fine_tune_epochs,
        fine_tune_lr => t.fine_tune_lr,
        seed => t.seed,
    );
    if a.eps1.is_some() {
        t.prior.eps1 = a.eps1;
        t.prior.theta1 = None;
    }
    if a.theta1.is_some() {
        t.prior.theta1 = a.theta1;
    }
    if a.theta_low.is_some() {
        t.theta_low = a.theta_low;
    }
    if a.n0.is_some() {
        t.prune.n0 = a.n0;
    }
    if a.input_threshold.is_some() {
        t.input_threshold = a.input_threshold;
    }
    if let Some(f) = a.prior {
        t.prior.family = match f {
            FamilyArg::Flattening => PriorFamily::Flattening,
            FamilyArg::Beta => PriorFamily::Beta,
        };
    }
    if let Some(c) = a.prune_condition {
        t.prune.condition = match c {
            ConditionArg::Tolerance => PruneCondition::Tolerance,
            ConditionArg::Relative => PruneCondition::Relative,
        };
    }
    if let Some(e) = a.estimator {
        t.estimator.kind = match e {
            EstimatorArg::Taylor => EstimatorName::Taylor,
            EstimatorArg::Concrete => EstimatorName::Concrete,
            EstimatorArg::Sampling => EstimatorName::Sampling,
            EstimatorArg::Hybrid => EstimatorName::Hybrid,
            EstimatorArg::BruteForce => EstimatorName::BruteForce,
        };
    }
    let current_lr = match t.schedule {
        StepSchedule::RobbinsMonro { a0, .. } => a0,
        StepSchedule::Constant { lr } | StepSchedule::AdamDefaults { lr } => lr,
    };
    let current_tau = match t.schedule {
        StepSchedule::RobbinsMonro { tau, .. } => tau,
        _ => 1e4,
    };
    let lr = a.lr.unwrap_or(current_lr);
    let tau = a.tau.unwrap_or(current_tau);
    t.schedule = match a.schedule {
        Some(ScheduleArg::Adam) => StepSchedule::AdamDefaults { lr },
        Some(ScheduleArg::Constant) => StepSchedule::Constant { lr },
        Some(ScheduleArg::RobbinsMonro) => StepSchedule::RobbinsMonro { a0: lr, tau },
        None => match t.schedule {
            StepSchedule::AdamDefaults { .. } => StepSchedule::AdamDefaults { lr },
            StepSchedule::Constant { .. } => StepSchedule::Constant { lr },
            StepSchedule::RobbinsMonro { .. } => StepSchedule::RobbinsMonro { a0: lr, tau },
        },
    };
    if a.no_pruning {
        t.pruning = false;
    }
    run.validate()?;
    Ok(run)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Lines of an existing CSV whose first column is an epoch ≤ `max_epoch`.
fn kept_lines(path: &Path, max_epoch: u64) -> Vec<String> {
    fs::read_to_string(path)
        .map(|text| {
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|e| e.parse::<u64>().ok()).is_some_and(|e| e <= max_epoch))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

struct CliObserver {
    dir: PathBuf,
    every: Option<u64>,
    gated_layers: usize,
    metrics_lines: Vec<String>,
    theta_header: String,
    theta_lines: Vec<String>,
}

impl CliObserver {
    fn new(dir: &Path, every: Option<u64>, state: &mut TrainState, resumed: bool) -> Result<Self> {
        let mut header = vec!["epoch".to_string()];
        for (l, &w) in state.initial_widths.iter().enumerate() {
            header.extend((0..w).map(|u| format!("l{l}_u{u}")));
        }
        let (metrics_lines, theta_lines) = if resumed {
            (kept_lines(&dir.join("metrics.csv"), state.epoch), kept_lines(&dir.join("theta.csv"), state.epoch))
        } else {
            let mut line = vec!["0".to_string()];
            line.extend(state.theta_snapshot().iter().map(|t| t.to_string()));
            (Vec::new(), vec![line.join(",")])
        };
        let obs = CliObserver {
            dir: dir.to_path_buf(),
            every,
            gated_layers: state.initial_widths.len(),
            metrics_lines,
            theta_header: header.join(","),
            theta_lines,
        };
        obs.flush()?;
        Ok(obs)
    }

    fn flush(&self) -> Result<()> {
        let mut m = metrics_header(self.gated_layers).join(",");
        m.push('\n');
        for l in &self.metrics_lines {
            m.push_str(l);
            m.push('\n');
        }
        write_file(&self.dir.join("metrics.csv"), &m)?;
        let mut t = self.theta_header.clone();
        t.push('\n');
        for l in &self.theta_lines {
            t.push_str(l);
            t.push('\n');
        }
        write_file(&self.dir.join("theta.csv"), &t)
    }
}

impl Observer for CliObserver {
    fn on_epoch(&mut self, state: &mut TrainState, row: &MetricsRow) -> Result<()> {
        self.metrics_lines.push(row.csv_line(self.gated_layers));
        let mut line = vec![row.epoch.to_string()];
        line.extend(state.theta_snapshot().iter().map(|t| t.to_string()));
        self.theta_lines.push(line.join(","));
        self.flush()?;
        if let Some(k) = self.every {
            if row.epoch.is_multiple_of(k) {
                save_checkpoint(&self.dir.join(format!("checkpoint-epoch-{:04}.ckpt", row.epoch)), state)?;
            }
        }
        Ok(())
    }

    fn on_milestone(&mut self, state: &TrainState, m: Milestone) -> Result<()> {
        save_checkpoint(&self.dir.join(format!("checkpoint-{}.ckpt", m.name())), state)
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let run = effective_config(a, resumed.as_ref())?;
    let (train_set, test_set) = run.data.load()?;
    let features = train_set.inputs.sample_len();
    let classes = train_set.targets.sample_len();
    let (input_shape, specs) = run.model.build(features, classes)?;
    let reshape = |d: Dataset| -> Result<Dataset> { d.reshape_inputs(&input_shape) };
    let (train_set, test_set) = (reshape(train_set)?, reshape(test_set)?);
    if run.train.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            run.train.batch_size,
            train_set.len()
        )));
    }
    fs::create_dir_all(&run.output_dir)?;
    write_file(&run.output_dir.join("config.toml"), &run.to_toml()?)?;
    let is_resume = resumed.is_some();
    let mut state = match resumed {
        Some(mut s) => {
            if s.net.input_shape() != input_shape.as_slice() || s.net.output_len() != classes {
                return Err(Error::Config("checkpoint architecture does not match the data".into()));
            }
            s.set_config(run.train.clone())?;
            s
        }
        None => TrainState::init(&input_shape, &specs, run.model.loss(), run.train.clone())?,
    };
    log::info!(
        "training on {} samples ({} test), architecture widths {:?}, {} parameters",
        train_set.len(),
        test_set.len(),
        state.net.gate_widths(),
        state.net.param_count()
    );
    let mut obs = CliObserver::new(&run.output_dir, run.checkpoint_every, &mut state, is_resume)?;
    let summary = run_pipeline(&mut state, &train_set, Some(&test_set), &mut obs)?;
    let acc = summary.test_accuracy.map_or("nan".to_string(), |a| a.to_string());
    let text = format!(
        "test_accuracy = {acc}\ntest_loss = {}\ninitial_widths = {:?}\nhidden_widths = {:?}\npruning_ratio = {}\ninput_weights_removed = {}\nmain_epochs = {}\ntotal_epochs = {}\n",
        summary.test_loss,
        summary.initial_widths,
        summary.hidden_widths,
        summary.pruning_ratio,
        summary.input_weights_removed,
        summary.main_epochs,
        summary.total_epochs
    );
    write_file(&run.output_dir.join("summary.toml"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_data_args(&mut run, &a.data);
    let test = run.data.load_test()?;
    let test = test.reshape_inputs(state.net.input_shape())?;
    if test.targets.sample_len() != state.net.output_len() {
        return Err(Error::Data("test targets do not match the network's outputs".into()));
    }
    let masks = state.eval_masks();
    let r = evaluate(&state.net, Some(&masks), &test)?;
    let mut net = state.net.clone();
    net.compact(&state.gates.alive_indices())?;
    println!("samples = {}", test.len());
    println!("phase = \"{}\"", state.phase.name());
    println!("test_accuracy = {}", r.accuracy.map_or("nan".to_string(), |a| a.to_string()));
    println!("test_loss = {}", r.mean_nll);
    println!("hidden_widths = {:?}", net.gate_widths());
    println!("pruning_ratio = {}", pruning_ratio(state.initial_param_count, &net, state.config.input_threshold));
    Ok(())
}

pub fn ode_lab(a: &OdeLabArgs) -> Result<()> {
    let diff = match a.diff {
        DiffArg::Zero => DiffFn::Zero,
        DiffArg::Oscillating => DiffFn::Oscillating { kappa: a.kappa },
        DiffArg::Adversarial => DiffFn::Adversarial { kappa: a.kappa },
    };
    let prior = HyperPrior::flattening_log(a.log_gamma).map_err(|e| Error::Config(e.to_string()))?;
    let clip = ClipBounds::new(&prior, a.eps1, a.eps2).map_err(|e| Error::Config(e.to_string()))?;
    let (m1, m2) = UnitDynamics::random_matrices(a.p, a.q, a.eta, a.seed);
    let dynamics = UnitDynamics::new(m1, m2, a.lambda, a.kappa, diff, prior, clip, (a.theta_low, 1.0 - 1e-5))
        .map_err(|e| Error::Config(e.to_string()))?;
    let stable = stability_check(a.lambda, a.eta, a.kappa, a.eps1);
    let mut radius = roa_radius(a.lambda, a.eta, a.kappa, a.eps1);
    if radius <= 0.0 {
        log::warn!("the guaranteed region is empty; sampling starts in a ball of radius lambda/(eta+kappa)");
        radius = a.lambda / (a.eta + a.kappa);
    }
    radius *= a.radius_factor;
    if a.stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let dt = a.dt.unwrap_or_else(|| dynamics.default_dt());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let starts: Vec<_> =
        (0..a.starts).map(|_| sample_ball(&mut rng, a.p, a.q, a.eps1, radius, (a.theta_low, 1.0 - 1e-5))).collect();
    let outcomes = sweep(&dynamics, &starts, dt, a.horizon / a.lambda);
    fs::create_dir_all(&a.output_dir)?;
    let mut summary = String::from("trajectory,start_distance,start_theta,diverged,final_distance,max_v_increase\n");
    let mut converged = 0;
    let mut monotone = 0;
    for (i, o) in outcomes.iter().enumerate() {
        summary.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            o.start.distance_to(a.eps1),
            o.start.theta,
            o.trajectory.is_none(),
            o.final_distance,
            o.max_v_increase
        ));
        converged += usize::from(o.final_distance < 1e-4);
        monotone += usize::from(o.max_v_increase <= 1e-8);
        if let Some(tr) = &o.trajectory {
            let mut csv = String::from("t,norm_w_f,norm_w_b,theta,v\n");
            let v = tr.lyapunov(a.eps1);
            for (k, s) in tr.states.iter().enumerate() {
                if k % a.stride != 0 && k + 1 != tr.states.len() {
                    continue;
                }
                let nf = s.w_f.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = s.w_b.iter().map(|x| x * x).sum::<f64>().sqrt();
                csv.push_str(&format!("{},{nf},{nb},{},{}\n", k as f64 * tr.dt, s.theta, v[k]));
            }
            write_file(&a.output_dir.join(format!("trajectory_{i:04}.csv")), &csv)?;
        }
    }
    write_file(&a.output_dir.join("summary.csv"), &summary)?;
    println!("stable_condition = {stable}");
    println!("region_radius = {}", roa_radius(a.lambda, a.eta, a.kappa, a.eps1));
    println!("dt = {dt}");
    println!("trajectories = {}", outcomes.len());
    println!("converged = {converged}");
    println!("monotone_v = {monotone}");
    Ok(())
}

pub fn prior_config(a: &PriorCurveArgs) -> PriorConfig {
    PriorConfig {
        family: match a.family {
            FamilyArg::Flattening => PriorFamily::Flattening,
            FamilyArg::Beta => PriorFamily::Beta,
        },
        log_gamma: a.log_gamma,
        alpha: a.alpha,
        beta: a.beta,
        eps1: a.eps1,
        theta1: a.theta1,
        eps2: a.eps2,
    }
}

pub fn prior_curve(a: &PriorCurveArgs) -> Result<()> {
    if a.points == 0 {
        return Err(Error::Config("points must be positive".into()));
    }
    let (hp, cb) = prior_config(a).build()?;
    let log_pdf = |p: f64| hp.log_pdf(p).unwrap_or(f64::NEG_INFINITY);
    let minimizer = a.numeric.then(|| NumericMinimizer::new(&log_pdf, cb.eps1, cb.eps2));
    let mut csv = String::from(if a.numeric { "theta,pi_star,reg_term,pi_star_numeric\n" } else { "theta,pi_star,reg_term\n" });
    for i in 1..=a.points {
        let theta = i as f64 / (a.points + 1) as f64;
        let ps = pi_star(&hp, &cb, theta)?;
        let r = reg_term(&hp, &cb, theta)?;
        match &minimizer {
            Some(m) => csv.push_str(&format!("{theta},{ps},{r},{}\n", m.minimize(theta))),
            None => csv.push_str(&format!("{theta},{ps},{r}\n")),
        }
    }
    match &a.output {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    log::info!("eps1 = {}, eps2 = {}, theta1 = {}, theta2 = {}", cb.eps1, cb.eps2, cb.theta1, cb.theta2);
    Ok(())
}

pub fn estimator_bench(a: &BenchArgs) -> Result<()> {
    if a.samples == 0 || a.classes < 2 || a.inputs == 0 {
        return Err(Error::Config("need samples >= 1, classes >= 2, inputs >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut net = Network::mlp(a.inputs, &a.hidden, a.classes, LossKind::CategoricalCe, &mut rng)
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = net.layers_mut().last_mut().and_then(|l| l.params_mut()) {
        p.weights.data_mut().iter_mut().for_each(|w| *w *= a.fan_out_scale);
    }
    let x = Tensor::new(
        vec![a.samples, a.inputs],
        (0..a.samples * a.inputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut y = Tensor::zeros(vec![a.samples, a.classes]);
    for i in 0..a.samples {
        y.data_mut()[i * a.classes + rng.gen_range(0..a.classes)] = 1.0;
    }
    let mut gates = GateState::new(&net, 0.5)?;
    for l in &mut gates.layers {
        for t in &mut l.theta {
            *t = a.theta.unwrap_or_else(|| rng.gen_range(0.2..0.8));
        }
    }
    let kinds = [
        EstimatorKind::Taylor,
        EstimatorKind::Concrete { t: a.temperature },
        EstimatorKind::Sampling,
        EstimatorKind::Hybrid { k: a.hybrid_k.min(gates.total_alive()) },
    ];
    let report = bench_estimators(&net, &x, &y, &gates, &kinds, a.draws, 1.0, &mut rng)?;
    let mut csv = String::from("layer,unit,theta,exact");
    for s in &report.estimators {
        csv.push_str(&format!(",{0}_mean,{0}_se", s.kind.name()));
    }
    csv.push('\n');
    for (i, &(g, u)) in report.units.iter().enumerate() {
        csv.push_str(&format!("{g},{u},{},{}", gates.layers[g].theta[u], report.exact[i]));
        for s in &report.estimators {
            csv.push_str(&format!(",{},{}", s.mean[i], s.std_err[i]));
        }
        csv.push('\n');
    }
    match &a.output {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
