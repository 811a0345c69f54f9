//! Adam optimization with L2 regularization and early stopping on the
//! validation split.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{config, contract, Error, Result};
use crate::graph::SplitMasks;
use crate::layers::{Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Quantity monitored by early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    /// Validation accuracy, ties broken by lower validation loss.
    ValAccuracy,
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub stop_metric: StopMetric,
    /// Seeds the dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            l2: 0.0005,
            patience: 10,
            max_epochs: 1000,
            stop_metric: StopMetric::ValAccuracy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(config("patience and max_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update of every tensor in `params` from the matching `grads`.
    /// Moment buffers are created on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(contract(format!("non-finite gradient for parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(contract("parameter set changed between Adam steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of feeding one validation result to [`EarlyStopping`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

/// Patience counter over validation results.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    metric: StopMetric,
    patience: usize,
    best: Option<(f64, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(metric: StopMetric, patience: usize) -> Self {
        Self {
            metric,
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one evaluation; the first one always improves.
    pub fn observe(&mut self, val_acc: f64, val_loss: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some((acc, loss)) => match self.metric {
                StopMetric::ValAccuracy => val_acc > acc || (val_acc == acc && val_loss < loss),
                StopMetric::ValLoss => val_loss < loss,
            },
        };
        if improved {
            self.best = Some((val_acc, val_loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Observation {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(f64, f64)> {
        self.best
    }
}

/// Summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub best_val_acc: f64,
    pub test_acc_at_best_val: f64,
    pub train_acc_at_best_val: f64,
    /// 1-based epoch of the reported checkpoint.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Training NLL (without the L2 term) per epoch.
    pub loss_curve: Vec<f64>,
    pub val_acc_curve: Vec<f64>,
    /// Not serialized, so that results of identical runs compare equal on disk.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Accuracy of `argmax(logits)` over the masked rows; ties go to the lowest
/// class index.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    logits.expect_rank(2, "accuracy")?;
    let n = logits.shape()[0];
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len(), mask.len()],
        });
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for v in (0..n).filter(|&v| mask[v]) {
        total += 1;
        if argmax(logits.row(v)) == labels[v] {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(contract("accuracy over an empty mask"));
    }
    Ok(hits as f64 / total as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Logits of `model` on the whole graph with dropout disabled.
pub fn predict(model: &Model, dataset: &Dataset) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(dataset.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&tape, &dataset.graph, x, &mut rng, false, false)?;
    Ok(out.logits.to_tensor())
}

/// Accuracy of `model` over `mask` in evaluation mode.
pub fn evaluate(model: &Model, dataset: &Dataset, mask: &[bool]) -> Result<f64> {
    if !mask.iter().any(|&m| m) {
        return Err(contract("evaluation over an empty mask"));
    }
    accuracy(&predict(model, dataset)?, &dataset.labels, mask)
}

/// Trains a fresh model (initialized from `model_config.seed`) and returns it
/// restored to the best validation checkpoint.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    masks: &SplitMasks,
) -> Result<(Model, RunResult)> {
    let model = Model::new(model_config.clone(), dataset.num_features(), dataset.num_classes)?;
    train_model(model, train_config, dataset, masks)
}

/// Like [`train`], starting from the given parameters.
pub fn train_model(
    mut model: Model,
    train_config: &TrainConfig,
    dataset: &Dataset,
    masks: &SplitMasks,
) -> Result<(Model, RunResult)> {
    train_config.validate()?;
    let n = dataset.num_nodes();
    if masks.len() != n {
        return Err(contract(format!("split covers {} nodes, dataset has {n}", masks.len())));
    }
    for (name, mask) in [("train", &masks.train), ("validation", &masks.val), ("test", &masks.test)] {
        if !mask.iter().any(|&m| m) {
            return Err(contract(format!("{name} mask is empty")));
        }
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut adam = Adam::new(train_config.lr);
    let mut stopper = EarlyStopping::new(train_config.stop_metric, train_config.patience);
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let (mut best_test, mut best_train) = (0.0, 0.0);
    let mut loss_curve = Vec::new();
    let mut val_acc_curve = Vec::new();
    let mut last_finite = None;

    for epoch in 1..=train_config.max_epochs {
        let (nll_value, grads) = {
            let tape = Tape::new();
            let x = tape.constant(dataset.features.clone());
            let out = model.forward(&tape, &dataset.graph, x, &mut rng, true, true)?;
            let nll = out.logits.log_softmax_nll(&dataset.labels, &masks.train)?;
            let mut loss = nll;
            if train_config.l2 > 0.0 {
                let mut reg = out.params[0].sum_squares();
                for p in &out.params[1..] {
                    reg = reg.add(p.sum_squares())?;
                }
                loss = loss.add(reg.mul_scalar(train_config.l2))?;
            }
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_epoch: last_finite,
                    reason: format!("training loss is {loss_value}"),
                });
            }
            let grads = tape.backward(loss)?;
            (nll.item(), out.params.iter().map(|&p| grads.wrt(p)).collect::<Vec<_>>())
        };
        adam.step(&mut model.params.tensors_mut(), &grads).map_err(|e| Error::Divergence {
            epoch,
            last_finite_epoch: last_finite,
            reason: e.to_string(),
        })?;
        last_finite = Some(epoch);
        loss_curve.push(nll_value);

        let logits = predict(&model, dataset)?;
        let val_acc = accuracy(&logits, &dataset.labels, &masks.val)?;
        let val_loss = {
            let tape = Tape::new();
            tape.constant(logits.clone())
                .log_softmax_nll(&dataset.labels, &masks.val)?
                .item()
        };
        val_acc_curve.push(val_acc);
        let obs = stopper.observe(val_acc, val_loss);
        if obs.improved {
            best = model.params.clone();
            best_epoch = epoch;
            best_test = accuracy(&logits, &dataset.labels, &masks.test)?;
            best_train = accuracy(&logits, &dataset.labels, &masks.train)?;
        }
        log::debug!("epoch {epoch}: loss {nll_value:.4} val_acc {val_acc:.4} val_loss {val_loss:.4}");
        if obs.stop {
            break;
        }
    }

    model.params = best;
    let result = RunResult {
        best_val_acc: stopper.best().map_or(0.0, |(acc, _)| acc),
        test_acc_at_best_val: best_test,
        train_acc_at_best_val: best_train,
        best_epoch,
        epochs_run: loss_curve.len(),
        loss_curve,
        val_acc_curve,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, result))
}
