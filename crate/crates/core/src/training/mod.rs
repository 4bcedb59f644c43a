//! Unsupervised training of the diffusion network.
//!
//! Each step samples a batch of sextets, gathers the breadth-first
//! neighborhood their representations depend on, runs the network on that
//! subgraph, and takes an Adam step on the batch loss.

pub mod adam;
pub mod config;
pub mod loss;
pub mod sampling;
pub mod subgraph;

use serde::Serialize;

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::AffinityGraph;
use crate::kernels::{DenseMatrix, Real, SparseMatrix};
use crate::model::{backward, forward, init_params, Mode, ModelParams, ParamGrads};
use crate::rng::{self, Prng};

pub use adam::{lr_schedule, Adam};
pub use config::{Notation, TrainConfig};
pub use loss::{batch_loss, batch_loss_and_grad, global_loss, local_loss, local_loss_bpr, BatchLoss, LocalLoss, LossWeights};
pub use sampling::{sample_sextet, Sextet, SextetSampler};
pub use subgraph::{bfs_subgraph, Subgraph};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub nodes: usize,
    pub clamped_local: usize,
    pub clamped_global: usize,
}

/// Batch loss and its gradient with respect to every weight matrix, for a
/// training-mode pass over `x` on transition `s` (rows of `x`, `s`, `a` and
/// sextet indices all in the same numbering).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<T: Real>(
    x: &DenseMatrix<T>,
    s: &SparseMatrix<T>,
    a: &SparseMatrix<f32>,
    sextets: &[Sextet],
    params: &ModelParams<T>,
    weights: &LossWeights,
    kind: LocalLoss,
    rng: &mut Prng,
) -> Result<(BatchLoss, ParamGrads<T>)> {
    let (h, cache) = forward(x, s, params, Mode::Train(rng))?;
    let cache = cache.expect("training mode keeps a cache");
    let (loss, grad_h) = batch_loss_and_grad(sextets, &h, a, weights, kind, params)?;
    let mut grads = backward(&grad_h, &cache, s, params)?;
    loss::add_penalty_grad(&mut grads, params, weights.lambda);
    Ok((loss, grads))
}

pub struct Trainer<'a> {
    x: &'a DenseMatrix<f32>,
    graph: &'a AffinityGraph,
    config: TrainConfig,
    params: ModelParams<f32>,
    adam: Adam<f32>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(x: &'a DenseMatrix<f32>, graph: &'a AffinityGraph, config: TrainConfig) -> Result<Self> {
        Self::check_inputs(x, graph, &config)?;
        let mut dims = vec![x.cols()];
        dims.extend_from_slice(&config.hidden);
        let mut params = init_params(&dims, config.seed)?;
        params.leaky_slope = config.leaky_slope;
        params.dropout = config.dropout;
        let adam = Adam::new(&params);
        Ok(Trainer {
            x,
            graph,
            config,
            params,
            adam,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(x: &'a DenseMatrix<f32>, graph: &'a AffinityGraph, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(x, graph, config)?;
        if ckpt.dims != t.params.dims {
            return Err(Error::State(format!(
                "checkpoint widths {:?} differ from configured {:?}",
                ckpt.dims, t.params.dims
            )));
        }
        let blob = ckpt
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::State("checkpoint has no optimizer state".into()))?;
        t.params = ModelParams::from_checkpoint(ckpt, t.config.leaky_slope, t.config.dropout)?;
        t.adam = Adam::from_blob(blob, &t.params)?;
        t.epoch = blob.epoch as usize;
        Ok(t)
    }

    fn check_inputs(x: &DenseMatrix<f32>, graph: &AffinityGraph, config: &TrainConfig) -> Result<()> {
        config.validate()?;
        if x.rows() != graph.n() {
            return Err(Error::shape(format!(
                "{} feature rows for a graph of {} nodes",
                x.rows(),
                graph.n()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Data("non-finite training features".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch and returns its mean batch loss. Each epoch draws from
    /// its own stream so a resumed run repeats an uninterrupted one.
    pub fn run_epoch(&mut self, log: &mut dyn FnMut(&LogRecord)) -> Result<f64> {
        let sampler = SextetSampler::new(self.graph)?;
        let mut rng = rng::substream(self.config.seed, self.epoch as u64 + 1);
        let steps = self.config.steps_per_epoch(self.graph.n());
        let lr = lr_schedule(self.epoch, self.config.lr());
        let mut total = 0.0;
        for step in 0..steps {
            let record = self.step(&sampler, &mut rng, step, lr)?;
            total += record.loss;
            log(&record);
        }
        self.epoch += 1;
        Ok(total / steps as f64)
    }

    fn step(&mut self, sampler: &SextetSampler<'_>, rng: &mut Prng, step: usize, lr: f64) -> Result<LogRecord> {
        let sextets = sampler.sample_batch(self.config.batch, rng)?;
        let seeds: Vec<usize> = sextets.iter().flat_map(|s| s.nodes()).collect();
        let sub = bfs_subgraph(self.graph, &seeds, self.config.hops(), self.config.node_budget, rng);
        let local: Vec<Sextet> = sextets
            .iter()
            .map(|s| s.map(|g| sub.local(g).expect("seeds stay in the subgraph")))
            .collect();
        let x_sub = self.x.select_rows(&sub.nodes);
        let weights = self.config.weights();
        let (loss, grads) = loss_and_grads(
            &x_sub,
            &sub.s,
            &sub.a,
            &local,
            &self.params,
            &weights,
            self.config.local_loss,
            rng,
        )?;
        let grads_finite = grads.iter().all(|g| g.w1.is_finite() && g.w2.is_finite());
        if !loss.loss.is_finite() || !grads_finite {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at epoch {} step {step} (loss {})",
                self.epoch, loss.loss
            )));
        }
        self.adam.apply(&mut self.params, &grads, lr)?;
        Ok(LogRecord {
            epoch: self.epoch,
            step,
            loss: loss.loss,
            lr,
            nodes: sub.len(),
            clamped_local: loss.clamped_local,
            clamped_global: loss.clamped_global,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(&mut self, log: &mut dyn FnMut(&LogRecord), on_epoch: &mut dyn FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(log)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, feature_hash: [u8; 32]) -> Checkpoint {
        Checkpoint {
            dims: self.params.dims.clone(),
            layers: self.params.layer_pairs(),
            config: self.config.to_pairs(),
            feature_hash,
            optimizer: Some(self.adam.to_blob(self.epoch as u64)),
        }
    }
}
