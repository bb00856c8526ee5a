//! Dequantization, the joint negative log-likelihood, Adam and the
//! epoch loop.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flowcore::Ctx;
use crate::model::{FlowModel, STREAM_TRAIN};
use crate::molgraph::{EncodedGraph, MolGraph};
use crate::numerics::{FlowRng, ParamStore, Tape, Tensor, Var};

/// Adds `c * U[0, 1)` to every entry of `x` then of `a`, in row-major order.
pub fn dequantize(e: &EncodedGraph, c: f64, rng: &mut FlowRng) -> Result<(Tensor, Tensor)> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::BadNoiseScale(c));
    }
    let x = e.x.map(|v| v + c * rng.uniform());
    let a = e.a.map(|v| v + c * rng.uniform());
    Ok((x, a))
}

/// Mean over the batch of `-(log p(A) + log p(X | A))`.
pub fn nll(model: &FlowModel, ctx: &Ctx, x: Var, a: Var, a_onehot: &Tensor) -> Result<Var> {
    let lp = model.log_prob(ctx, x, a, a_onehot)?;
    Ok(ctx.tape.neg(ctx.tape.mean(lp)?)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update of every trainable tensor. Parameters and
    /// moments are kept at storage precision.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = f32r(self.beta1 * *m + (1.0 - self.beta1) * g);
                *v = f32r(self.beta2 * *v + (1.0 - self.beta2) * g * g);
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = f32r(*p - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub nll: f64,
    pub seconds: f64,
}

/// Model, optimizer state and data stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub adam: Adam,
    pub rng: FlowRng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: FlowModel) -> Self {
        let adam = Adam::new(&model.params, model.config.learning_rate);
        let rng = FlowRng::new(model.config.seed).split(STREAM_TRAIN);
        Self { model, adam, rng, epoch: 0 }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self { model: ck.model, adam: ck.adam, rng: ck.rng, epoch: ck.epoch }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), rng: self.rng.clone(), epoch: self.epoch }
    }

    pub fn encode_all(&self, graphs: &[MolGraph]) -> Result<Vec<EncodedGraph>> {
        graphs.iter().map(|g| self.model.encode_graph(g)).collect()
    }

    /// Dequantizes a batch with the training stream.
    fn assemble(&mut self, items: &[&EncodedGraph]) -> Result<(Tensor, Tensor, Tensor)> {
        let c = self.model.config.noise_scale;
        let mut xs = Vec::with_capacity(items.len());
        let mut as_ = Vec::with_capacity(items.len());
        for e in items {
            let (x, a) = dequantize(e, c, &mut self.rng)?;
            xs.push(x);
            as_.push(a);
        }
        let onehot: Vec<Tensor> = items.iter().map(|e| e.a.clone()).collect();
        Ok((Tensor::stack(&xs)?, Tensor::stack(&as_)?, Tensor::stack(&onehot)?))
    }

    fn init_actnorm(&mut self, x: &Tensor, a: &Tensor, onehot: &Tensor) -> Result<()> {
        let tape = Tape::new();
        let updates = {
            let ctx = Ctx::initializing(&tape, &self.model.params);
            self.model.log_prob(&ctx, tape.constant(x.clone())?, tape.constant(a.clone())?, onehot)?;
            ctx.into_updates()
        };
        for (id, v) in updates {
            self.model.params.set(id, v.map(f32r));
        }
        self.model.actnorm_initialized = true;
        Ok(())
    }

    /// Loss and parameter gradients of one batch. With `threads > 1` the
    /// batch is cut into contiguous chunks evaluated on separate tapes and
    /// the chunk gradients are summed in chunk order.
    fn loss_and_grads(&self, x: &Tensor, a: &Tensor, onehot: &Tensor, threads: usize) -> Result<(f64, Vec<Tensor>)> {
        let batch = x.shape()[0];
        let chunks = threads.clamp(1, batch);
        let bounds: Vec<(usize, usize)> = (0..chunks).map(|k| (k * batch / chunks, (k + 1) * batch / chunks)).collect();
        let model = &self.model;
        let eval = |(lo, hi): (usize, usize)| -> Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.params);
            let x = tape.leaf(x.narrow(0, lo, hi - lo)?)?;
            let a = tape.leaf(a.narrow(0, lo, hi - lo)?)?;
            let lp = model.log_prob(&ctx, x, a, &onehot.narrow(0, lo, hi - lo)?)?;
            let loss = tape.scale(tape.sum(lp)?, -1.0 / batch as f64)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), grads.all_params(&model.params)))
        };
        let parts: Vec<Result<(f64, Vec<Tensor>)>> = if chunks == 1 {
            vec![eval(bounds[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = bounds.iter().map(|&b| s.spawn(move || eval(b))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut parts = parts.into_iter();
        let (mut loss, mut grads) = parts.next().expect("at least one chunk")?;
        for p in parts {
            let (l, g) = p?;
            loss += l;
            for (acc, g) in grads.iter_mut().zip(g) {
                for (d, s) in acc.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Ok((loss, grads))
    }

    /// Loss of the next batch without advancing anything but a cloned
    /// stream; used to check resumption.
    pub fn peek_loss(&self, data: &[EncodedGraph]) -> Result<f64> {
        let mut probe = self.clone();
        let order = probe.epoch_order(data.len());
        let bs = probe.model.config.batch_size.min(data.len());
        let items: Vec<&EncodedGraph> = order[..bs].iter().map(|&i| &data[i]).collect();
        let (x, a, oh) = probe.assemble(&items)?;
        Ok(probe.loss_and_grads(&x, &a, &oh, 1)?.0)
    }

    fn epoch_order(&mut self, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            let j = self.rng.below(i + 1);
            order.swap(i, j);
        }
        order
    }

    /// One pass over `data` in a freshly shuffled order. Returns the mean
    /// batch loss.
    pub fn run_epoch(&mut self, data: &[EncodedGraph], threads: usize) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(crate::molgraph::MolError::EmptyBatch.into());
        }
        let start = Instant::now();
        let order = self.epoch_order(data.len());
        let bs = self.model.config.batch_size;
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let items: Vec<&EncodedGraph> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, a, oh) = self.assemble(&items)?;
            if !self.model.actnorm_initialized {
                self.init_actnorm(&x, &a, &oh)?;
            }
            let (loss, grads) = self.loss_and_grads(&x, &a, &oh, threads)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { step: self.adam.step as usize + 1 });
            }
            self.adam.update(&mut self.model.params, &grads);
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(EpochStats { epoch: self.epoch, step: self.adam.step, nll: total / batches as f64, seconds: start.elapsed().as_secs_f64() })
    }
}

/// Options of [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub threads: usize,
    /// Directory receiving the checkpoint after every epoch and the log.
    pub out_dir: Option<std::path::PathBuf>,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_NAME: &str = "model";

/// Trains for the remaining epochs of `trainer`, writing a checkpoint and a
/// log line at each epoch boundary when an output directory is given.
pub fn train(trainer: &mut Trainer, graphs: &[MolGraph], opts: &TrainOptions) -> Result<Vec<EpochStats>> {
    let data = trainer.encode_all(graphs)?;
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "epoch\tstep\tnll\tseconds").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut stats = Vec::new();
    while trainer.epoch < trainer.model.config.epochs {
        let s = trainer.run_epoch(&data, opts.threads.max(1))?;
        if let Some(dir) = &opts.out_dir {
            trainer.checkpoint().save(&dir.join(CHECKPOINT_NAME))?;
        }
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}\t{}\t{:.6}\t{:.3}", s.epoch, s.step, s.nll, s.seconds).map_err(|e| Error::io(path, e))?;
        }
        stats.push(s);
    }
    Ok(stats)
}

/// Loads `dir/model.{json,bin}`.
pub fn load_run(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&dir.join(CHECKPOINT_NAME))
}
