//! Fitting a [`TincNet`] to a volume: exact reverse-mode gradients of the
//! squared error, Adamax updates and a step learning-rate schedule.
//!
//! Gradients are accumulated in fixed units (samples grouped by ascending
//! leaf, then cut into chunks of [`CHUNK`]) and the unit results are summed
//! in unit order. Results are therefore bit-identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error, Result};
use crate::exec::Executor;
use crate::net::{Activation, TincNet};
use crate::volume::{axis_coord, Volume};

/// Samples per gradient work unit.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Iterations at which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    /// `None` means `max(64, 4096 / leaves)`.
    pub batch_per_leaf: Option<usize>,
    pub seed: u64,
    /// Record the loss every this many iterations (the last one is always recorded).
    pub log_every: usize,
    /// Worker threads; 0 runs on the calling thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            base_lr: 1e-3,
            lr_drops: vec![2000, 5000],
            lr_factor: 0.2,
            batch_per_leaf: None,
            seed: 0,
            log_every: 100,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| iteration >= d).count();
        let mut lr = self.base_lr;
        for _ in 0..drops {
            lr *= self.lr_factor;
        }
        lr
    }

    pub fn batch_per_leaf_for(&self, leaves: usize) -> usize {
        self.batch_per_leaf.unwrap_or_else(|| (4096 / leaves).max(64))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError::Invalid("iterations must be at least 1".into()));
        }
        if self.batch_per_leaf == Some(0) {
            return Err(ConfigError::Invalid("batch per leaf must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// Coordinates with their targets and the leaf each one is routed through.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub coords: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
    pub leaf_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push(&mut self, coord: [f64; 3], target: f64, leaf: usize) {
        self.coords.push(coord);
        self.targets.push(target);
        self.leaf_ids.push(leaf);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean squared error.
    Mean,
    /// Plain sum of squared errors.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean squared error and its gradient, computed on the calling thread.
pub fn grad(net: &TincNet, batch: &Batch) -> LossGrad {
    loss_and_grad(net, batch, Reduction::Mean, &Executor::sequential())
}

pub fn loss_and_grad(net: &TincNet, batch: &Batch, reduction: Reduction, exec: &Executor) -> LossGrad {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    assert_eq!(batch.coords.len(), batch.targets.len());
    assert_eq!(batch.coords.len(), batch.leaf_ids.len());
    let leaves = net.cfg().leaf_count();

    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch.leaf_ids[i]);
    let mut units: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let leaf = batch.leaf_ids[order[start]];
        assert!(leaf < leaves, "leaf ordinal {leaf} out of range (have {leaves})");
        let mut end = start;
        while end < order.len() && batch.leaf_ids[order[end]] == leaf {
            end += 1;
        }
        units.extend(order[start..end].chunks(CHUNK));
        start = end;
    }

    let partials = exec.map(units.len(), |u| {
        let mut g = vec![0.0; net.param_count()];
        let sse = accumulate(net, batch, units[u], &mut g);
        (sse, g)
    });

    let mut sse = 0.0;
    let mut total = vec![0.0; net.param_count()];
    for (s, g) in partials {
        sse += s;
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    match reduction {
        Reduction::Sum => LossGrad { loss: sse, grad: total },
        Reduction::Mean => {
            let inv = 1.0 / batch.len() as f64;
            for t in &mut total {
                *t *= inv;
            }
            LossGrad {
                loss: sse * inv,
                grad: total,
            }
        }
    }
}

/// Adds `d/dθ Σ (f(v) - d)²` over `samples` (all on one leaf) into `grad`;
/// returns the summed squared error.
fn accumulate(net: &TincNet, batch: &Batch, samples: &[usize], grad: &mut [f64]) -> f64 {
    let leaf = batch.leaf_ids[samples[0]];
    let path = net.path(leaf);
    let shapes: Vec<_> = path.iter().map(|&li| net.layers()[li]).collect();
    let params = net.params();

    // acts[i] is the input of layer i; acts[n] the network output.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len() + 1);
    acts.push(vec![0.0; 3]);
    for s in &shapes {
        acts.push(vec![0.0; s.fan_out]);
    }
    // Derivative of each layer's output w.r.t. its pre-activation `W x + b`.
    let mut slopes: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.fan_out]).collect();
    let width = net.max_width();
    let mut delta = Vec::with_capacity(width);
    let mut delta_in = Vec::with_capacity(width);

    let mut sse = 0.0;
    for &s in samples {
        acts[0].copy_from_slice(&batch.coords[s]);
        for (i, shape) in shapes.iter().enumerate() {
            let (inputs, outputs) = acts.split_at_mut(i + 1);
            let x = &inputs[i];
            let y = &mut outputs[0];
            let w = &params[shape.weights()];
            let b = &params[shape.biases()];
            for o in 0..shape.fan_out {
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                let z = acc + b[o];
                match shape.activation {
                    Activation::Sine { omega } => {
                        let (sn, cs) = (omega * z).sin_cos();
                        y[o] = sn;
                        slopes[i][o] = omega * cs;
                    }
                    Activation::Linear => {
                        y[o] = z;
                        slopes[i][o] = 1.0;
                    }
                }
            }
        }
        let err = acts[shapes.len()][0] - batch.targets[s];
        sse += err * err;

        delta.clear();
        delta.push(2.0 * err);
        for i in (0..shapes.len()).rev() {
            let shape = &shapes[i];
            for (d, slope) in delta.iter_mut().zip(&slopes[i]) {
                *d *= slope;
            }
            let x = &acts[i];
            let wr = shape.weights();
            let br = shape.biases();
            for o in 0..shape.fan_out {
                let dz = delta[o];
                let row = &mut grad[wr.start + o * shape.fan_in..wr.start + (o + 1) * shape.fan_in];
                for (g, xi) in row.iter_mut().zip(x.iter()) {
                    *g += dz * xi;
                }
                grad[br.start + o] += dz;
            }
            if i > 0 {
                let w = &params[wr];
                delta_in.clear();
                delta_in.resize(shape.fan_in, 0.0);
                for o in 0..shape.fan_out {
                    let dz = delta[o];
                    let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                    for (di, wi) in delta_in.iter_mut().zip(row) {
                        *di += wi * dz;
                    }
                }
                std::mem::swap(&mut delta, &mut delta_in);
            }
        }
    }
    sse
}

/// Adamax: first moment plus an exponentially weighted infinity norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl Adamax {
    pub fn new(params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            u: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let step = lr / (1.0 - self.beta1.powi(self.t as i32));
        for (((p, &g), m), u) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.u)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *u = (self.beta2 * *u).max(g.abs());
            *p -= step * *m / (*u + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub iterations_run: usize,
    pub final_loss: f64,
}

/// Runs `cfg.iterations` Adamax steps. Every iteration draws
/// `batch_per_leaf` voxels uniformly with replacement from each leaf
/// region (ChaCha8, stream 1 of `cfg.seed`, leaves in z-curve order).
pub fn fit(net: &mut TincNet, volume: &Volume, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if net.dims() != volume.dims() {
        return Err(ConfigError::Invalid(format!(
            "network grid {:?} does not match volume {:?}",
            net.dims(),
            volume.dims()
        ))
        .into());
    }
    let exec = Executor::new(cfg.threads);
    let dims = volume.dims();
    let axis: Vec<Vec<f64>> = (0..3)
        .map(|a| (0..dims[a]).map(|i| axis_coord(i, dims[a])).collect())
        .collect();
    let regions = net.regions().to_vec();
    let per_leaf = cfg.batch_per_leaf_for(regions.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Adamax::new(net.param_count());
    let mut report = TrainReport::default();
    let mut batch = Batch {
        coords: Vec::with_capacity(per_leaf * regions.len()),
        targets: Vec::with_capacity(per_leaf * regions.len()),
        leaf_ids: Vec::with_capacity(per_leaf * regions.len()),
    };

    for it in 0..cfg.iterations {
        batch.coords.clear();
        batch.targets.clear();
        batch.leaf_ids.clear();
        for region in &regions {
            let n = region.voxel_count();
            for _ in 0..per_leaf {
                let idx = region.voxel_at(rng.gen_range(0..n));
                batch.push(
                    [axis[0][idx[0]], axis[1][idx[1]], axis[2][idx[2]]],
                    volume.normalized(idx),
                    region.leaf_index,
                );
            }
        }
        let lr = cfg.lr_at(it);
        let LossGrad { loss, grad } = loss_and_grad(net, &batch, Reduction::Mean, &exec);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            report.records.push(TrainRecord { iteration: it, lr, loss });
            report.final_loss = loss;
            return Err(Error::Diverged {
                iteration: it,
                loss,
                report: Box::new(report),
            });
        }
        opt.step(net.params_mut(), &grad, lr);
        report.iterations_run = it + 1;
        report.final_loss = loss;
        if it % cfg.log_every.max(1) == 0 || it + 1 == cfg.iterations {
            log::debug!("iteration {it} lr {lr:e} loss {loss:.6}");
            report.records.push(TrainRecord { iteration: it, lr, loss });
        }
    }
    Ok(report)
}
