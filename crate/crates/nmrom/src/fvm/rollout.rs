//! Full-order time marching with periodic snapshot sampling.

use std::time::Instant;

use super::DiscreteProblem;
use crate::grid::Field;
use crate::{Error, Result};

/// States sampled along one full-order trajectory.
#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    pub mu: f64,
    /// Times of the stored states, starting at 0.
    pub times: Vec<f64>,
    pub states: Vec<Field>,
    /// Wall-clock seconds per time step (all steps, not only stored ones).
    pub step_seconds: Vec<f64>,
}

impl SnapshotSeries {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }
}

/// Marches the problem from its initial condition and stores every
/// `sample_every`-th state, the initial one included.
pub fn fom_rollout(problem: &dyn DiscreteProblem, sample_every: usize) -> Result<SnapshotSeries> {
    if sample_every == 0 {
        return Err(Error::Argument("sample stride must be at least 1".into()));
    }
    let dt = problem.dt();
    let n_steps = (problem.t_final() / dt).round() as usize;
    let mut state = problem.initial_condition();
    let mut times = vec![0.0];
    let mut states = vec![state.clone()];
    let mut step_seconds = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let clock = Instant::now();
        state = problem
            .step(&state)
            .map_err(|e| Error::Domain(format!("step {step} (mu = {}): {e}", problem.mu())))?;
        step_seconds.push(clock.elapsed().as_secs_f64());
        if step % sample_every == 0 {
            times.push(step as f64 * dt);
            states.push(state.clone());
        }
    }
    Ok(SnapshotSeries {
        mu: problem.mu(),
        times,
        states,
        step_seconds,
    })
}
