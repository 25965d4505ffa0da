//! Reverse-mode gradients, decoupled-weight-decay Adam, the full-batch
//! training loop with early stopping, and grid sweeps.

use std::rc::Rc;
use std::time::Instant;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::dataset::{Dataset, LabelVector};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{
    accuracy, build_forward, ModelParams, ParaFormerConfig, Prediction, PreparedGraph,
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
}

fn default_lr() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_max_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    100
}
fn default_metric() -> EvalMetric {
    EvalMetric::Accuracy
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Consecutive epochs without a validation improvement tolerated before
    /// stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub eval_metric: EvalMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            eval_metric: default_metric(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

/// Everything one optimization step reads: features, prepared graph, labels
/// and the loss mask.
pub struct Batch<'a> {
    pub x: &'a Rc<Mat>,
    pub prepared: &'a PreparedGraph,
    pub labels: &'a LabelVector,
    pub mask: &'a [usize],
}

fn mask_targets(labels: &LabelVector, mask: &[usize]) -> Result<Vec<usize>> {
    mask.iter()
        .map(|&i| {
            labels
                .label(i)
                .ok_or_else(|| Error::InvalidSplit(format!("node {i} in loss mask has no label")))
        })
        .collect()
}

/// Records the forward pass in training mode, checks the loss is finite, and
/// back-propagates. Returns the loss and one gradient per trainable tensor in
/// [`ModelParams::tensors`] order; tensors disconnected from the loss (for
/// example the attention projections when β = 1) get exact zeros.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &Batch,
    config: &ParaFormerConfig,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(f64, Vec<(&'static str, Mat)>)> {
    if batch.mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let targets = mask_targets(batch.labels, batch.mask)?;
    let mut fwd = build_forward(batch.x, batch.prepared, params, config, true, dropout_rng)?;
    let loss_id = fwd.tape.cross_entropy(
        fwd.probs,
        Rc::new(batch.mask.to_vec()),
        Rc::new(targets),
        1e-12,
    );
    let loss = fwd.tape.value(loss_id)[[0, 0]];
    if !loss.is_finite() {
        let dump = params
            .tensors()
            .iter()
            .map(|(name, t)| {
                let worst = t.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
                let finite = t.iter().all(|v| v.is_finite());
                format!("{name}(max_abs={worst:.3e}, finite={finite})")
            })
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::NonFiniteLoss { epoch: 0, dump });
    }
    fwd.tape.backward(loss_id);
    let grads = fwd
        .param_ids
        .iter()
        .zip(params.tensors())
        .map(|(&(name, id), (name2, tensor))| {
            debug_assert_eq!(name, name2);
            let g = fwd
                .tape
                .take_grad(id)
                .unwrap_or_else(|| Mat::zeros(tensor.dim()));
            (name, g)
        })
        .collect();
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Per-tensor first/second moment accumulators for Adam. Slots are
/// positional; callers must present tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_shapes(
            &params
                .tensors()
                .iter()
                .map(|(_, t)| t.dim())
                .collect::<Vec<_>>(),
        )
    }

    pub fn for_shapes(shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with decoupled weight decay over an arbitrary tensor
/// list. Decay multiplies flagged tensors by (1 − lr·weight_decay) before
/// the moment update.
pub fn adam_apply(
    tensors: Vec<&mut Mat>,
    grads: &[&Mat],
    decay_flags: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(tensors.len(), grads.len());
    assert_eq!(tensors.len(), decay_flags.len());
    assert_eq!(tensors.len(), state.m.len(), "optimizer state slot mismatch");
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
    for (slot, tensor) in tensors.into_iter().enumerate() {
        if weight_decay > 0.0 && decay_flags[slot] {
            tensor.mapv_inplace(|p| p * (1.0 - lr * weight_decay));
        }
        Zip::from(&mut *tensor)
            .and(&mut state.m[slot])
            .and(&mut state.v[slot])
            .and(grads[slot])
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }
}

/// Adam update for the full model; biases and hop-weight vectors never
/// decay.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(&'static str, Mat)],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    let decay_flags: Vec<bool> = params
        .tensors()
        .iter()
        .map(|(name, _)| ModelParams::decays(name))
        .collect();
    let mut tensors = Vec::new();
    for ((name, tensor), (gname, _)) in params.tensors_mut().into_iter().zip(grads) {
        assert_eq!(name, *gname, "gradient/param order mismatch");
        tensors.push(tensor);
    }
    let grad_refs: Vec<&Mat> = grads.iter().map(|(_, g)| g).collect();
    adam_apply(tensors, &grad_refs, &decay_flags, state, lr, weight_decay);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One row of the per-epoch learning curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub acc_train: f64,
    pub acc_valid: f64,
    pub acc_test: f64,
    pub gamma: Vec<f64>,
    /// Wall-clock time of the epoch in milliseconds. Excluded from
    /// deterministic artifacts.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the restored parameters; `None` when training
    /// ran zero epochs.
    pub best_epoch: Option<usize>,
    pub final_valid_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Hop weights of the returned (best-epoch) parameters; equals the
    /// initialization when no epochs ran.
    pub gamma_final: Vec<f64>,
}

fn evaluate(
    x: &Rc<Mat>,
    prepared: &PreparedGraph,
    params: &ModelParams,
    config: &ParaFormerConfig,
) -> Result<Prediction> {
    let fwd = build_forward(x, prepared, params, config, false, None)?;
    Prediction::new(fwd.tape.value(fwd.probs).clone())
}

/// Full-batch training with early stopping on validation accuracy. The
/// returned parameters are those of the best validation epoch. Deterministic
/// per (seed, config, data): initialization uses RNG stream 0, dropout
/// stream 1.
pub fn train(
    dataset: &Dataset,
    model_config: &ParaFormerConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    model_config.validate()?;
    train_config.validate()?;
    dataset.splits.validate(dataset.n())?;

    let mut params = ModelParams::init(
        model_config,
        dataset.d(),
        dataset.num_classes(),
        train_config.seed,
    )?;
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(train_config.seed);
    dropout_rng.set_stream(1);
    let prepared = PreparedGraph::new(&dataset.graph);
    let x = Rc::new(dataset.features.as_mat().clone());
    let labels = &dataset.labels;
    let splits = &dataset.splits;
    let batch = Batch {
        x: &x,
        prepared: &prepared,
        labels,
        mask: &splits.train,
    };

    let mut state = OptimizerState::new(&params);
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_improvement = 0usize;

    for epoch in 0..train_config.max_epochs {
        let t0 = Instant::now();
        let (loss, grads) = compute_gradients(
            &params,
            &batch,
            model_config,
            Some(&mut dropout_rng),
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { dump, .. } => Error::NonFiniteLoss { epoch, dump },
            other => other,
        })?;
        adam_step(&mut params, &grads, &mut state, train_config.lr, train_config.weight_decay);

        let pred = evaluate(&x, &prepared, &params, model_config)?;
        let EvalMetric::Accuracy = train_config.eval_metric;
        let acc_train = accuracy(&pred, labels, &splits.train)?;
        let acc_valid = accuracy(&pred, labels, &splits.valid)?;
        let acc_test = accuracy(&pred, labels, &splits.test)?;
        epochs.push(EpochRecord {
            epoch,
            loss,
            acc_train,
            acc_valid,
            acc_test,
            gamma: params.gamma_values(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        let improved = best.as_ref().is_none_or(|(b, _, _)| acc_valid > *b);
        if improved {
            best = Some((acc_valid, epoch, params.clone()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= train_config.patience {
                break;
            }
        }
    }

    let (best_epoch, final_valid, final_test) = match best {
        Some((acc, idx, best_params)) => {
            params = best_params;
            (Some(idx), acc, epochs[idx].acc_test)
        }
        None => {
            // Zero training epochs: report the initialized model's metrics.
            let pred = evaluate(&x, &prepared, &params, model_config)?;
            (
                None,
                accuracy(&pred, labels, &splits.valid)?,
                accuracy(&pred, labels, &splits.test)?,
            )
        }
    };
    let gamma_final = params.gamma_values();
    Ok((
        params,
        TrainReport {
            epochs,
            best_epoch,
            final_valid_accuracy: final_valid,
            final_test_accuracy: final_test,
            gamma_final,
        },
    ))
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

/// Axes of the hyper-parameter product grid; an empty axis keeps the base
/// config's value.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub weight_decay: Vec<f64>,
    #[serde(default)]
    pub dropout_rate: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
}

/// Aggregated result of one grid cell over all seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub beta: f64,
    pub valid_mean: f64,
    pub valid_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub seed_valid: Vec<f64>,
    pub seed_test: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Exhaustive product evaluation of the grid, each cell trained once per
/// seed. Rows are sorted by mean validation accuracy, best first. With
/// `workers > 1` the independent cells run on that many threads; results are
/// collected positionally, so the output is identical to a sequential run.
pub fn sweep(
    dataset: &Dataset,
    base_model: &ParaFormerConfig,
    base_train: &TrainConfig,
    grid: &SweepGrid,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one seed".into()));
    }
    if workers == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one worker".into()));
    }
    let axis = |values: &[f64], base: f64| -> Vec<f64> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    };
    let lrs = axis(&grid.lr, base_train.lr);
    let wds = axis(&grid.weight_decay, base_train.weight_decay);
    let drops = axis(&grid.dropout_rate, base_model.dropout_rate);
    let betas = axis(&grid.beta, base_model.beta);

    let mut cells = Vec::new();
    for &lr in &lrs {
        for &wd in &wds {
            for &dropout in &drops {
                for &beta in &betas {
                    cells.push((lr, wd, dropout, beta));
                }
            }
        }
    }

    let run_cell = |&(lr, wd, dropout, beta): &(f64, f64, f64, f64)| -> Result<SweepRow> {
        let model_config = ParaFormerConfig {
            beta,
            dropout_rate: dropout,
            ..base_model.clone()
        };
        let mut seed_valid = Vec::with_capacity(seeds.len());
        let mut seed_test = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let train_config = TrainConfig {
                lr,
                weight_decay: wd,
                seed,
                ..base_train.clone()
            };
            let (_, report) = train(dataset, &model_config, &train_config)?;
            seed_valid.push(report.final_valid_accuracy);
            seed_test.push(report.final_test_accuracy);
        }
        let (valid_mean, valid_std) = mean_std(&seed_valid);
        let (test_mean, test_std) = mean_std(&seed_test);
        Ok(SweepRow {
            lr,
            weight_decay: wd,
            dropout_rate: dropout,
            beta,
            valid_mean,
            valid_std,
            test_mean,
            test_std,
            seed_valid,
            seed_test,
        })
    };

    let mut rows: Vec<SweepRow>;
    if workers <= 1 || cells.len() <= 1 {
        rows = cells.iter().map(run_cell).collect::<Result<_>>()?;
    } else {
        let chunk = cells.len().div_ceil(workers.min(cells.len()));
        let mut slots: Vec<Option<Result<SweepRow>>> = (0..cells.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (cell_chunk, slot_chunk) in cells.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                scope.spawn(|| {
                    for (cell, slot) in cell_chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = Some(run_cell(cell));
                    }
                });
            }
        });
        rows = slots
            .into_iter()
            .map(|slot| slot.expect("every sweep cell is assigned to a worker"))
            .collect::<Result<_>>()?;
    }
    rows.sort_by(|a, b| b.valid_mean.total_cmp(&a.valid_mean));
    Ok(rows)
}
