//! Conditional flow-matching training on the straight-line path
//! `x_t = (1 - t) x0 + t x1` with target velocity `x1 - x0`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::flow::{FieldKind, State, VectorField};
use crate::net::{ParamGrad, VelocityNet};
use crate::rng;

/// One `(x0, x1, t)` triple of the flow-matching objective.
#[derive(Clone, Debug)]
pub struct CfmSample {
    pub x0: State,
    pub x1: State,
    pub t: f64,
}

/// Mean squared velocity error over `batch` and its parameter gradient.
pub fn cfm_loss(field: &VectorField, batch: &[CfmSample]) -> Result<(f64, ParamGrad)> {
    let FieldKind::Learned(net) = field.kind() else {
        return Err(Error::contract("flow-matching loss needs a learned field"));
    };
    cfm_loss_net(net, batch)
}

pub(crate) fn cfm_loss_net(net: &VelocityNet, batch: &[CfmSample]) -> Result<(f64, ParamGrad)> {
    if batch.is_empty() {
        return Err(Error::contract("flow-matching loss needs a non-empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = ParamGrad::zeros_like(net.mlp());
    for s in batch {
        let xt = &s.x0 * (1.0 - s.t) + &s.x1 * s.t;
        let (v, tape) = net.forward(&xt, s.t)?;
        let r = v - (&s.x1 - &s.x0);
        loss += r.norm_squared() * scale;
        grad.add_assign(&net.vjp_params(&tape, &(r * (2.0 * scale)))?);
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("flow-matching loss"));
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: VelocityNet,
    pub trace: Vec<LossRecord>,
}

/// Adam with the usual defaults.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Draws a flow-matching batch: `x1` from `data`, `x0 ~ N(0, I)`, `t ~ U[0, 1]`.
pub fn draw_batch(data: &[State], size: usize, rng: &mut rng::Rng) -> Vec<CfmSample> {
    (0..size)
        .map(|_| {
            let x1 = data[rng.random_range(0..data.len())].clone();
            let x0 = rng::standard_normal(rng, x1.len());
            let t = rng.random::<f64>();
            CfmSample { x0, x1, t }
        })
        .collect()
}

/// Trains `net` with Adam on minibatches drawn from `dataset`.
///
/// On a non-finite loss or parameter the run stops with
/// [`Error::TrainingDiverged`], which carries the last finite network.
pub fn train_flow(
    dataset: &SyntheticDataset,
    mut net: VelocityNet,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    if net.dim() != dataset.dim() {
        return Err(Error::contract(format!(
            "network dimension {} does not match dataset dimension {}",
            net.dim(),
            dataset.dim()
        )));
    }
    if schedule.steps > 0 && (schedule.batch_size == 0 || !(schedule.learning_rate > 0.0)) {
        return Err(Error::contract("training needs batch_size > 0 and learning_rate > 0"));
    }
    let data = dataset.samples();
    let mut rng = rng::seeded(schedule.seed);
    let mut adam = Adam::new(net.mlp().num_params(), schedule.learning_rate);
    let mut trace = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let batch = draw_batch(&data, schedule.batch_size, &mut rng);
        let (loss, grad) = match cfm_loss_net(&net, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::TrainingDiverged {
                    step,
                    last_finite: Box::new(net),
                })
            }
            Err(e) => return Err(e),
        };
        let before = net.mlp().params_flat();
        let mut params = before.clone();
        adam.step(&mut params, &grad.flatten());
        net.mlp_mut().set_params_flat(&params)?;
        if !net.mlp().is_finite() {
            net.mlp_mut().set_params_flat(&before)?;
            return Err(Error::TrainingDiverged {
                step,
                last_finite: Box::new(net),
            });
        }
        trace.push(LossRecord { step, loss });
    }
    Ok(TrainOutcome { net, trace })
}

/// Flow-matching loss on a fixed batch drawn fresh from the generator.
pub fn held_out_loss(net: &VelocityNet, dataset: &SyntheticDataset, size: usize, seed: u64) -> Result<f64> {
    let data = dataset.spec.draw_many(size, seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rng = rng::seeded(seed);
    let batch: Vec<CfmSample> = data
        .into_iter()
        .map(|x1| CfmSample {
            x0: rng::standard_normal(&mut rng, x1.len()),
            t: rng.random::<f64>(),
            x1,
        })
        .collect();
    cfm_loss_net(net, &batch).map(|(l, _)| l)
}
