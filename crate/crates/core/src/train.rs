//! Deterministic mini-batch training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::LossBreakdown;
use crate::model::{ModelSample, Pcnn};
use crate::optim::{clip_gradients, Adam, AdamConfig};
use crate::param::ParamStore;
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Half-width of the elementwise gradient clamp.
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many steps (all epochs when `None`).
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            clip: 0.01,
            epochs: 20,
            batch_size: 8,
            seed: 1,
            max_steps: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 4e-5,
                ..AdamConfig::default()
            },
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_model: f64,
    pub l_views: f64,
    pub l_dis: f64,
    pub neg_wvl_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub const HEADER: &'static str = "step,epoch,l_model,l_views,l_dis,neg_wvl_count";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.l_model, r.l_views, r.l_dis, r.neg_wvl_count
            );
        }
        out
    }

    /// `l_dis` values of one (1-based) epoch.
    pub fn epoch_losses(&self, epoch: usize) -> Vec<f64> {
        self.records.iter().filter(|r| r.epoch == epoch).map(|r| r.l_dis).collect()
    }

    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v = self.epoch_losses(epoch);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last_epoch(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trace: TrainTrace,
    /// Parameters at the end of the epoch with the lowest mean training loss.
    pub best: ParamStore,
    pub best_epoch: usize,
}

/// Trains `model` in place. Epoch order is shuffled from `cfg.seed`; each
/// batch runs forward, loss, backward, clip and one Adam step, then folds
/// the batch statistics into the running buffers.
pub fn train<S: ModelSample>(model: &mut Pcnn, data: &[S], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.label() >= model.cfg.num_classes) {
        return Err(Error::Config(format!(
            "training label {} does not fit a classifier with {} classes",
            s.label(),
            model.cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // keep the shuffle stream apart from the one used for initialization
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let mut best = (f64::INFINITY, model.store.clone(), 0);
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&S> = chunk.iter().map(|&i| &data[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label()).collect();
            let mut tape = Tape::new();
            let vars = model.forward(&mut tape, &batch, Mode::Train)?;
            let loss = model.loss(&mut tape, &vars, &labels)?;
            let br = LossBreakdown::read(&tape, &loss);
            if !br.l_dis.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
            }
            let grads = tape.backward(loss.l_dis)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&tape, &grads);
            drop(tape);
            clip_gradients(&mut model.store, cfg.clip);
            adam.step(&mut model.store)?;
            for u in &vars.bn_updates {
                u.apply(&mut model.store);
            }
            step += 1;
            epoch_sum += br.l_dis;
            epoch_steps += 1;
            trace.records.push(TraceRecord {
                step,
                epoch,
                l_model: br.l_model,
                l_views: br.l_views,
                l_dis: br.l_dis,
                neg_wvl_count: br.negative_weights,
            });
        }
        if epoch_steps > 0 && epoch_sum / (epoch_steps as f64) < best.0 {
            best = (epoch_sum / epoch_steps as f64, model.store.clone(), epoch);
        }
    }
    Ok(TrainReport {
        trace,
        best: best.1,
        best_epoch: best.2,
    })
}

/// Writes `final.pck`, `best.pck` and `trace.csv` into `dir`.
pub fn save_outputs(dir: &Path, model: &Pcnn, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.store.save(dir.join("final.pck"))?;
    report.best.save(dir.join("best.pck"))?;
    fs::write(dir.join("trace.csv"), report.trace.to_csv())?;
    Ok(())
}
