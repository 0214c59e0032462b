use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use super::{lr_at, Adam, RunConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::Vocabulary;
use crate::model::{Example, Model};
use crate::params::{Graph, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,epoch,lr,nll,rec,mmd,kld,logdet,total,val_total";

/// Loss components of one optimizer step, averaged over its micro-batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub nll: f64,
    pub rec: f64,
    pub mmd: f64,
    pub kld: f64,
    pub logdet: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_total.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.nll, self.rec, self.mmd, self.kld, self.logdet, self.total, val
        )
    }
}

/// Loop position and early-stopping bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub cursor: usize,
    pub order: Vec<usize>,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

pub struct Trainer<T: Scalar = f64> {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub opt: Adam<T>,
    pub state: TrainState,
    pub vocab: Option<Vocabulary>,
}

/// Loss components of one micro-batch.
struct MicroLoss {
    nll: f64,
    rec: f64,
    mmd: f64,
    kld: f64,
    logdet: f64,
    total: f64,
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::stream(seed, "epoch", epoch as u64).shuffle(&mut order);
    order
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from the configured seed.
    pub fn new(cfg: RunConfig, vocab: Option<Vocabulary>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::stream(cfg.train.seed, "init", 0);
        let model = Model::new(&mut store, &mut rng, cfg.model.clone())?;
        model.wret.flows.enforce_invertibility(&mut store);
        let opt = Adam::new(&store);
        Ok(Self { cfg, model, store, opt, state: TrainState::default(), vocab })
    }

    /// Resumes from a checkpoint; a missing optimizer segment starts the
    /// optimizer from scratch.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let (opt, state) = match ck.optimizer {
            Some(o) => o,
            None => (Adam::new(&ck.store), TrainState::default()),
        };
        Ok(Self { cfg: ck.config, model: ck.model, store: ck.store, opt, state, vocab: ck.vocab })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            model: self.model.clone(),
            store: self.store.clone(),
            optimizer: Some((self.opt.clone(), self.state.clone())),
        }
    }

    fn next_micro_batch(&mut self, n: usize) -> Vec<usize> {
        let seed = self.cfg.train.seed;
        let st = &mut self.state;
        if st.order.len() != n {
            st.order = shuffled(n, seed, st.epoch);
            st.cursor = 0;
        }
        let mut batch = Vec::with_capacity(self.cfg.train.batch_size);
        while batch.len() < self.cfg.train.batch_size {
            batch.push(st.order[st.cursor]);
            st.cursor += 1;
            if st.cursor == n {
                st.epoch += 1;
                st.order = shuffled(n, seed, st.epoch);
                st.cursor = 0;
            }
        }
        batch
    }

    /// Latent noise stream and prior draws for `ex` at optimizer step `step`.
    fn sample_streams(&self, ex: &Example<T>, step: u64) -> (SeededRng, Tensor<T>) {
        let seed = self.cfg.train.seed;
        let noise = SeededRng::stream(seed, &format!("latent/{}", ex.id), step);
        let prior = SeededRng::stream(seed, &format!("prior/{}", ex.id), step).normal_tensor(&[1, self.cfg.model.latent_dim], 1.0);
        (noise, prior)
    }

    fn prior_rows(rows: Vec<Tensor<T>>) -> Result<Tensor<T>> {
        let width = rows[0].len();
        let data: Vec<T> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
        Tensor::new(&[rows.len(), width], data)
    }

    fn micro_loss(&self, g: &Graph<'_, T>, batch: &[&Example<T>], step: u64, train: bool) -> Result<(crate::autograd::Var, MicroLoss)> {
        let (noise, prior): (Vec<_>, Vec<_>) = batch.iter().map(|ex| self.sample_streams(ex, step)).unzip();
        let prior = Self::prior_rows(prior)?;
        let loss = self.model.batch_loss(g, batch, train.then_some(noise), &prior, &self.cfg.train.weights())?;
        let t = &g.tape;
        let val = |v| t.item(v).to_f64_lossy();
        let (rec, mmd, kld, logdet) = match &loss.wret {
            Some(w) => (val(w.rec), val(w.mmd), val(w.kld), val(w.logdet)),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        let m = MicroLoss { nll: val(loss.nll), rec, mmd, kld, logdet, total: val(loss.total) };
        for (name, v) in [("nll", m.nll), ("rec", m.rec), ("mmd", m.mmd), ("kld", m.kld), ("logdet", m.logdet), ("total", m.total)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite {name} at step {step}: nll={} rec={} mmd={} kld={} logdet={} total={}",
                    m.nll, m.rec, m.mmd, m.kld, m.logdet, m.total
                )));
            }
        }
        Ok((loss.total, m))
    }

    /// One optimizer update from explicit micro-batches (indices into
    /// `data`). Gradients are averaged over the micro-batches.
    pub fn step_on(&mut self, data: &[Example<T>], micro: &[Vec<usize>]) -> Result<StepMetrics> {
        if micro.is_empty() || micro.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty micro-batch".into()));
        }
        let step = self.state.step + 1;
        let weight = 1.0 / micro.len() as f64;
        let mut acc = StepMetrics { step, ..Default::default() };
        for idx in micro {
            let batch: Vec<&Example<T>> = idx.iter().map(|&i| &data[i]).collect();
            let grads = {
                let g = Graph::new(&self.store);
                let (total, m) = self.micro_loss(&g, &batch, step, true)?;
                g.tape.backward(total)?;
                acc.nll += m.nll * weight;
                acc.rec += m.rec * weight;
                acc.mmd += m.mmd * weight;
                acc.kld += m.kld * weight;
                acc.logdet += m.logdet * weight;
                acc.total += m.total * weight;
                g.param_grads()
            };
            self.store.accumulate(&grads, T::lit(weight))?;
        }
        let tc = &self.cfg.train;
        acc.lr = lr_at(step, tc.max_lr, tc.warmup_steps);
        self.opt.step(&mut self.store, acc.lr)?;
        self.model.wret.flows.enforce_invertibility(&mut self.store);
        self.store.zero_grads();
        self.state.step = step;
        acc.epoch = self.state.epoch;
        Ok(acc)
    }

    /// One optimizer update drawing `accum_steps` micro-batches from the
    /// shuffled epoch order.
    pub fn step(&mut self, data: &[Example<T>]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let micro: Vec<Vec<usize>> = (0..self.cfg.train.accum_steps).map(|_| self.next_micro_batch(data.len())).collect();
        self.step_on(data, &micro)
    }

    /// Mean objective over `data` with latent means and fixed prior draws.
    pub fn validate(&self, data: &[Example<T>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let mut sum = 0.0;
        for chunk in data.chunks(self.cfg.train.batch_size) {
            let g = Graph::inference(&self.store);
            let batch: Vec<&Example<T>> = chunk.iter().collect();
            let (_, m) = self.micro_loss(&g, &batch, 0, false)?;
            sum += m.total * chunk.len() as f64;
        }
        Ok(sum / data.len() as f64)
    }

    /// Mean teacher-forced NLL over `data` using latent means.
    pub fn eval_nll(&self, data: &[Example<T>]) -> Result<f64> {
        let mut sum = 0.0;
        for ex in data {
            let g = Graph::inference(&self.store);
            let (_, m) = self.micro_loss(&g, &[ex], 0, false)?;
            sum += m.nll;
        }
        Ok(sum / data.len().max(1) as f64)
    }

    fn done(&self) -> bool {
        let tc = &self.cfg.train;
        self.state.stopped || self.state.epoch >= tc.epochs || (tc.max_steps > 0 && self.state.step >= tc.max_steps)
    }

    /// Trains until the epoch cap, the step cap or early stopping. With an
    /// output directory, appends `metrics.csv` and writes `best.ckpt` and
    /// `last.ckpt`.
    pub fn fit(
        &mut self,
        train: &[Example<T>],
        valid: &[Example<T>],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut history = Vec::new();
        while !self.done() {
            let epoch = self.state.epoch;
            let mut m = self.step(train)?;
            if self.state.epoch > epoch {
                self.end_epoch(valid, out, &mut m)?;
            }
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", m.csv_row())?;
            }
            on_step(&m);
            history.push(m);
        }
        if let Some(dir) = out {
            let ck = self.checkpoint();
            ck.save(&dir.join("last.ckpt"))?;
            if valid.is_empty() {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        Ok(history)
    }

    fn end_epoch(&mut self, valid: &[Example<T>], out: Option<&Path>, m: &mut StepMetrics) -> Result<()> {
        if valid.is_empty() {
            return Ok(());
        }
        let v = self.validate(valid)?;
        m.val_total = Some(v);
        if self.state.best_val.is_none_or(|b| v < b) {
            self.state.best_val = Some(v);
            self.state.bad_epochs = 0;
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join("best.ckpt"))?;
            }
        } else {
            self.state.bad_epochs += 1;
            if self.state.bad_epochs >= self.cfg.train.patience {
                self.state.stopped = true;
            }
        }
        Ok(())
    }
}
