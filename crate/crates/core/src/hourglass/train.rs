use log::debug;
use serde::{Deserialize, Serialize};

use crate::compute::{ComputeError, Graph, Real, Tensor};
use crate::corpus::Batch;

use super::{adam_step, AdamConfig, AdamState, BoundaryNoise, Model, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds batch packing and the boundary noise stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Metrics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    pub reg: f64,
    pub lr: f64,
    /// Hard boundary rate `k / N` per predictor (a single column of 1.0 in
    /// byte mode); `None` when no row of the batch used that predictor.
    pub boundary_rates: Vec<Option<f64>>,
}

/// Runs `cfg.steps` Adam steps, cycling through `batches`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    batches: &[Batch],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, ModelError> {
    if batches.is_empty() {
        return Err(ModelError::InvalidConfig("no training batches".into()));
    }
    let n_cols = model.config().predictors().len().max(1);
    let mut state = AdamState::new(model.params());
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = &batches[step % batches.len()];
        let rows: Vec<&[u32]> = (0..batch.rows()).map(|i| batch.row(i)).collect();
        let noise = BoundaryNoise::Sample { seed: cfg.seed, step: step as u64 };

        let (ce, reg, rates, grads) = {
            let mut g = Graph::new();
            let b = model
                .arch()
                .batch_loss(&mut g, model.params(), &rows, noise)
                .map_err(|e| match e {
                    ModelError::Compute(ComputeError::NonFiniteValue { .. }) => ModelError::NonFiniteLoss { step },
                    other => other,
                })?;
            if !g.value(b.loss).item().as_f64().is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            let mut k = vec![0usize; n_cols];
            let mut n = vec![0usize; n_cols];
            for r in &b.rows {
                let col = r.trace.route.map_or(0, |route| route.predictor);
                let col = if model.config().predictors().is_empty() { 0 } else { col };
                k[col] += r.trace.boundary.k;
                n[col] += r.trace.boundary.len();
            }
            let rates: Vec<Option<f64>> = k
                .iter()
                .zip(&n)
                .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
                .collect();
            let grads = g.backward(b.loss)?;
            let gs: Vec<Option<Tensor<T>>> = (0..model.params().len()).map(|i| grads.param(i).cloned()).collect();
            (b.ce, b.reg, rates, gs)
        };
        let lr = cfg.adam.lr_at(step, cfg.steps);
        let grad_refs: Vec<Option<&Tensor<T>>> = grads.iter().map(Option::as_ref).collect();
        adam_step(model.params_mut(), &grad_refs, &mut state, &cfg.adam, lr)?;

        let log = StepLog { step, ce, reg, lr, boundary_rates: rates };
        debug!("step {step}: ce {ce:.4} reg {reg:.4}");
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
