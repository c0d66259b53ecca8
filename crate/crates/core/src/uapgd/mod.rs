//! Universal sign-gradient optimization of the trigger with windowed
//! step-size control, plus the fixed-step baseline.
//!
//! Each epoch walks the batches of the objective, stepping the trigger by
//! `-eta · sign(grad)` after every batch and accumulating the mean batch loss
//! `L_i`. Under [`Method::Uapgd`] the epoch losses are grouped into windows of
//! `l_o`; each window contributes its minimum and population variance to a
//! comparison list. Once `l_c` windows are in, the step is halved and the
//! trigger restarted from the best one seen if the newest window neither
//! improved on nor oscillated less than every earlier window (within slack).

mod objective;

use std::str::FromStr;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::BatchEvaluation;
use crate::trigger::TriggerImage;

pub use objective::DatasetObjective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgd,
    Uapgd,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgd" => Ok(Self::Pgd),
            "uapgd" => Ok(Self::Uapgd),
            other => Err(Error::argument(format!("unknown attack mode `{other}` (expected pgd or uapgd)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pgd => "pgd",
            Self::Uapgd => "uapgd",
        })
    }
}

/// How `eps1`/`eps2` turn into the slacks used by the halving test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackMode {
    /// Slack 1 is `eps1 · |L_best|`, slack 2 is `eps2 ·` the mean of the
    /// earlier window variances.
    #[default]
    Relative,
    /// `eps1` and `eps2` are used as given.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UapgdConfig {
    pub eta0: f64,
    pub n_epoch: usize,
    /// Windows compared per halving decision.
    pub l_c: usize,
    /// Epochs per window.
    pub l_o: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub slack: SlackMode,
    /// Smallest step actually taken after a halving.
    pub eta_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for UapgdConfig {
    fn default() -> Self {
        Self {
            eta0: 16.0 / 255.0,
            n_epoch: 50,
            l_c: 3,
            l_o: 5,
            eps1: 0.01,
            eps2: 0.1,
            slack: SlackMode::Relative,
            eta_floor: 1.0 / 255.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl UapgdConfig {
    /// All violations, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.eta0.is_finite() && self.eta0 >= 0.0) {
            out.push(format!("eta0 must be a finite non-negative step, got {}", self.eta0));
        }
        if self.l_c < 2 {
            out.push(format!("l_c must be at least 2, got {}", self.l_c));
        }
        if self.l_o == 0 {
            out.push("l_o must be positive".to_string());
        }
        if !(self.eps1 >= 0.0 && self.eps2 >= 0.0) {
            out.push(format!("slacks must be non-negative, got eps1={} eps2={}", self.eps1, self.eps2));
        }
        if !(self.eta_floor >= 0.0) {
            out.push(format!("eta_floor must be non-negative, got {}", self.eta_floor));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `clamp(p - eta · sign(g), 0, 1)` per pixel, with `sign(0) = 0`.
pub fn pgd_update(trigger: &TriggerImage, gradient: &Array3<f64>, eta: f64) -> Result<TriggerImage> {
    if trigger.pixels().dim() != gradient.dim() {
        return Err(Error::argument(format!(
            "gradient shape {:?} does not match trigger {:?}",
            gradient.dim(),
            trigger.pixels().dim()
        )));
    }
    let mut next = trigger.pixels().clone();
    Zip::from(&mut next).and(gradient).for_each(|p, &g| {
        let sign = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *p -= eta * sign;
    });
    Ok(TriggerImage::from_unclamped(next))
}

/// `(min, population variance)` of one observation window.
pub fn window_stats(losses: &[f64], l_o: usize) -> Result<(f64, f64)> {
    if losses.len() != l_o || l_o == 0 {
        return Err(Error::argument(format!("window needs {l_o} losses, got {}", losses.len())));
    }
    let n = losses.len() as f64;
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok((min, var))
}

/// True when the newest window's minimum and variance are each no lower than
/// every earlier window's, less the slacks.
pub fn halving_condition(windows: &[(f64, f64)], l_c: usize, eps1: f64, eps2: f64) -> Result<bool> {
    if windows.len() != l_c || l_c < 2 {
        return Err(Error::argument(format!("comparison needs {l_c} windows, got {}", windows.len())));
    }
    let (newest, earlier) = windows.split_last().expect("non-empty");
    let stalled = earlier.iter().all(|(l_min, _)| newest.0 >= l_min - eps1);
    let oscillating = earlier.iter().all(|(_, v)| newest.1 >= v - eps2);
    Ok(stalled && oscillating)
}

/// Slacks for a comparison list under `config.slack`.
pub fn slacks(config: &UapgdConfig, windows: &[(f64, f64)], l_best: f64) -> (f64, f64) {
    match config.slack {
        SlackMode::Absolute => (config.eps1, config.eps2),
        SlackMode::Relative => {
            let earlier = &windows[..windows.len().saturating_sub(1)];
            let mean_v = if earlier.is_empty() {
                0.0
            } else {
                earlier.iter().map(|w| w.1).sum::<f64>() / earlier.len() as f64
            };
            (config.eps1 * l_best.abs(), config.eps2 * mean_v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss `L_i`.
    pub loss: f64,
    pub l_best: f64,
    /// Step size used during the epoch.
    pub eta: f64,
    /// Whether the step was halved at the end of this epoch.
    pub halved: bool,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_det: f64,
    pub l_fg: f64,
    pub l_tv: f64,
    pub l_all: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub method: Method,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    /// Epochs at whose end the step was halved.
    pub halving_events: Vec<usize>,
    pub final_eta: f64,
    pub l_best: Option<f64>,
    /// Filled in by evaluation.
    pub asr: Option<f64>,
}

impl AttackReport {
    pub fn eta_schedule(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.eta).collect()
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Everything needed to continue a run after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapgdState {
    pub trigger: TriggerImage,
    /// Nominal step, `eta0 / 2^h`.
    pub eta: f64,
    /// Epochs completed.
    pub epoch: usize,
    pub s_o: Vec<f64>,
    pub s_c: Vec<(f64, f64)>,
    /// `None` until the first epoch finishes.
    pub l_best: Option<f64>,
    pub a_best: TriggerImage,
    pub halving_events: Vec<usize>,
    pub report: AttackReport,
}

impl UapgdState {
    pub fn new(method: Method, config: &UapgdConfig, initial: TriggerImage) -> Self {
        Self {
            a_best: initial.clone(),
            trigger: initial,
            eta: config.eta0,
            epoch: 0,
            s_o: Vec::new(),
            s_c: Vec::new(),
            l_best: None,
            halving_events: Vec::new(),
            report: AttackReport {
                method,
                epochs: Vec::new(),
                batches: Vec::new(),
                halving_events: Vec::new(),
                final_eta: config.eta0,
                l_best: None,
                asr: None,
            },
        }
    }

    /// Step actually applied: the nominal step, not below the floor once
    /// halving has started (and never above `eta0`).
    pub fn step_size(&self, config: &UapgdConfig) -> f64 {
        if self.halving_events.is_empty() {
            self.eta
        } else {
            self.eta.max(config.eta_floor.min(config.eta0))
        }
    }
}

/// A loss over batches of some data, differentiable w.r.t. the trigger.
pub trait Objective {
    /// Prepares epoch `epoch` and returns its batch count.
    fn begin_epoch(&mut self, epoch: usize) -> Result<usize>;

    fn evaluate(&mut self, epoch: usize, batch: usize, trigger: &TriggerImage) -> Result<BatchEvaluation>;
}

/// Continues `state` until `config.n_epoch` epochs are done, calling
/// `on_epoch` after each.
pub fn run_attack<O: Objective + ?Sized>(
    config: &UapgdConfig,
    objective: &mut O,
    mut state: UapgdState,
    on_epoch: &mut dyn FnMut(&UapgdState) -> Result<()>,
) -> Result<UapgdState> {
    config.validate()?;
    let method = state.report.method;
    while state.epoch < config.n_epoch {
        let epoch = state.epoch;
        let step = match method {
            Method::Pgd => config.eta0,
            Method::Uapgd => state.step_size(config),
        };
        let k = objective.begin_epoch(epoch)?;
        if k == 0 {
            return Err(Error::Config(format!("objective produced no batches in epoch {epoch}")));
        }
        let mut loss = 0.0;
        let mut skipped = 0;
        for batch in 0..k {
            let eval = objective.evaluate(epoch, batch, &state.trigger)?;
            let b = eval.breakdown;
            if !b.l_all.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, batch });
            }
            loss += b.l_all / k as f64;
            skipped += b.skipped;
            state.trigger = pgd_update(&state.trigger, &eval.gradient, step)?;
            debug_assert!(state.trigger.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            state.report.batches.push(BatchRecord {
                epoch,
                batch,
                l_det: b.l_det,
                l_fg: b.l_fg,
                l_tv: b.l_tv,
                l_all: b.l_all,
                eta: step,
            });
        }
        if state.l_best.is_none_or(|best| loss < best) {
            state.l_best = Some(loss);
            state.a_best = state.trigger.clone();
        }
        let l_best = state.l_best.expect("set above");
        let mut halved = false;
        if method == Method::Uapgd {
            state.s_o.push(loss);
            if state.s_o.len() == config.l_o {
                state.s_c.push(window_stats(&state.s_o, config.l_o)?);
                state.s_o.clear();
            }
            if state.s_c.len() == config.l_c {
                let (eps1, eps2) = slacks(config, &state.s_c, l_best);
                if halving_condition(&state.s_c, config.l_c, eps1, eps2)? {
                    state.eta /= 2.0;
                    state.trigger = state.a_best.clone();
                    state.halving_events.push(epoch);
                    halved = true;
                }
                state.s_c.clear();
            }
        }
        state.report.epochs.push(EpochRecord {
            epoch,
            loss,
            l_best,
            eta: step,
            halved,
            skipped,
        });
        state.report.halving_events = state.halving_events.clone();
        state.report.final_eta = state.eta;
        state.report.l_best = state.l_best;
        state.epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

pub fn run_uapgd<O: Objective + ?Sized>(config: &UapgdConfig, objective: &mut O, initial: TriggerImage) -> Result<(TriggerImage, AttackReport)> {
    let state = run_attack(config, objective, UapgdState::new(Method::Uapgd, config, initial), &mut |_| Ok(()))?;
    Ok((state.a_best, state.report))
}

pub fn run_pgd<O: Objective + ?Sized>(config: &UapgdConfig, objective: &mut O, initial: TriggerImage) -> Result<(TriggerImage, AttackReport)> {
    let state = run_attack(config, objective, UapgdState::new(Method::Pgd, config, initial), &mut |_| Ok(()))?;
    Ok((state.a_best, state.report))
}

/// Starting point of an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerInit {
    #[default]
    Random,
    Gray,
}

impl FromStr for TriggerInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "gray" | "grey" => Ok(Self::Gray),
            other => Err(Error::argument(format!("unknown trigger init `{other}`"))),
        }
    }
}

pub fn initial_trigger(dims: (usize, usize), init: TriggerInit, seed: u64) -> Result<TriggerImage> {
    match init {
        TriggerInit::Random => TriggerImage::random(dims, seed),
        TriggerInit::Gray => TriggerImage::filled(dims, crate::dataset::DEFAULT_GRAY),
    }
}
