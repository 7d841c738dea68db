//! Run configuration, the training loop and the per-iteration loss history.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::autograd::Graph;
use crate::data::{self, SampleSource};
use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::loss::{self, LossConfig};
use crate::model::UCloudNet;
use crate::optim::{AdamState, LrSchedule};

/// Day/night selection of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Day,
    Night,
    All,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Day => "day",
            Subset::Night => "night",
            Subset::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Subset> {
        match s {
            "day" => Some(Subset::Day),
            "night" => Some(Subset::Night),
            "all" | "day+night" => Some(Subset::All),
            _ => None,
        }
    }
}

/// Everything that determines a training run, given the dataset bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub aux: bool,
    pub lr_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds model initialization and batch order.
    pub seed: u64,
    pub subset: Subset,
    /// `(height, width)` the network sees.
    pub target_size: (usize, usize),
    pub dtype: DType,
    pub split_ratio: f64,
    /// Train on the training part of the split (true) or on every sample.
    pub holdout: bool,
    /// Number of generated samples; 0 means a dataset on disk.
    pub synthetic: usize,
    /// Seeds synthetic generation and the train/test split.
    pub data_seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 4,
            aux: true,
            lr_decay: true,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            subset: Subset::All,
            target_size: (320, 320),
            dtype: DType::F32,
            split_ratio: data::DEFAULT_SPLIT_RATIO,
            holdout: true,
            synthetic: 0,
            data_seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse_num<N: core::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Table-style run label, e.g. `ucloudnet_k4_aux_lrdecay`.
    pub fn run_name(&self) -> String {
        let mut s = format!("ucloudnet_k{}", self.k);
        if self.aux {
            s.push_str("_aux");
        }
        if self.lr_decay {
            s.push_str("_lrdecay");
        }
        s
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr_decay)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig::new(self.aux)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        data::check_target_size(self.target_size.0, self.target_size.1)
    }

    /// Sets one `key=value` entry. Returns `Ok(false)` for unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "k" => self.k = parse_num(key, value)?,
            "aux" => self.aux = parse_bool(key, value)?,
            "lr_decay" => self.lr_decay = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "subset" => {
                self.subset =
                    Subset::parse(value).ok_or_else(|| Error::invalid(format!("subset: unknown {value:?}")))?
            }
            "target_size" => {
                let (h, w) = value.split_once('x').unwrap_or((value, value));
                self.target_size = (parse_num(key, h)?, parse_num(key, w)?);
            }
            "dtype" => {
                self.dtype = DType::parse(value).ok_or_else(|| Error::invalid(format!("dtype: unknown {value:?}")))?
            }
            "split_ratio" => self.split_ratio = parse_num(key, value)?,
            "holdout" => self.holdout = parse_bool(key, value)?,
            "synthetic" => self.synthetic = parse_num(key, value)?,
            "data_seed" => self.data_seed = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let (h, w) = self.target_size;
        let _ = write!(
            s,
            "k={}\naux={}\nlr_decay={}\nepochs={}\nbatch_size={}\nseed={}\nsubset={}\ntarget_size={h}x{w}\n\
             dtype={}\nsplit_ratio={}\nholdout={}\nsynthetic={}\ndata_seed={}\ncheckpoint_every={}\n",
            self.k,
            self.aux,
            self.lr_decay,
            self.epochs,
            self.batch_size,
            self.seed,
            self.subset.name(),
            self.dtype.name(),
            self.split_ratio,
            self.holdout,
            self.synthetic,
            self.data_seed,
            self.checkpoint_every,
        );
        s
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::invalid(format!("malformed line {line:?}")))?;
            if !cfg.apply(k.trim(), v.trim())? {
                return Err(Error::invalid(format!("unknown key {:?}", k.trim())));
            }
        }
        Ok(cfg)
    }

    /// Sample indices trained on, given the dataset size.
    pub fn training_ids(&self, n: usize) -> Result<Vec<usize>> {
        if self.holdout {
            Ok(data::split(n, self.split_ratio, self.data_seed)?.0)
        } else {
            Ok((0..n).collect())
        }
    }

    /// Held-out indices (every index when training uses everything).
    pub fn test_ids(&self, n: usize) -> Result<Vec<usize>> {
        if self.holdout {
            Ok(data::split(n, self.split_ratio, self.data_seed)?.1)
        } else {
            Ok((0..n).collect())
        }
    }
}

/// One optimizer step worth of logged losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based optimizer step count.
    pub iter: u64,
    pub epoch: usize,
    pub main: f64,
    pub aux2: Option<f64>,
    pub aux4: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub const CSV_HEADER: &'static str = "iter,main,aux2,aux4,total,lr";

    pub fn last(&self) -> Option<&LossRecord> {
        self.records.last()
    }

    /// CSV with header `iter,main,aux2,aux4,total,lr`; absent auxiliary
    /// losses are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.main, opt(r.aux2), opt(r.aux4), r.total, r.lr);
        }
        s
    }
}

/// Model plus optimizer state and the position in the schedule.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: UCloudNet<T>,
    pub adam: AdamState<T>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = UCloudNet::build(cfg.k, cfg.seed)?;
        let adam = AdamState::new(model.parameters());
        Ok(TrainState { model, adam, epoch: 0, iteration: 0 })
    }
}

/// One forward/backward/update on a batch. Returns the logged record. If the
/// loss or any gradient is non-finite the step is abandoned and `state` is
/// left exactly as it was.
pub fn train_step<T: Element, S: SampleSource<T> + ?Sized>(
    state: &mut TrainState<T>,
    cfg: &RunConfig,
    samples: &S,
    batch: &[usize],
    lr: f64,
) -> Result<LossRecord> {
    let (x, y) = data::collate(samples, batch)?;
    let saved: Vec<Vec<T>> = state.model.buffers().into_iter().map(|(_, b)| b.clone()).collect();
    let result = step_on_batch(state, cfg, x, &y, lr);
    if result.is_err() {
        for ((_, b), s) in state.model.buffers_mut().into_iter().zip(saved) {
            *b = s;
        }
        state.model.zero_grad();
    }
    result
}

fn step_on_batch<T: Element>(
    state: &mut TrainState<T>,
    cfg: &RunConfig,
    x: crate::tensor::Tensor<T>,
    y: &crate::tensor::Tensor<T>,
    lr: f64,
) -> Result<LossRecord> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = state.model.forward(&mut g, xv, true, cfg.aux)?;
    let terms = loss::total_loss(&mut g, &out, y, &cfg.loss_config())?;
    let total = g.value(terms.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss {total} at iteration {} (epoch {})",
            state.iteration + 1,
            state.epoch
        )));
    }
    g.backward(terms.total)?;
    state.model.zero_grad();
    state.model.absorb_grads(&g);
    state.adam.step(&mut state.model.parameters_mut(), lr)?;
    state.iteration += 1;
    let item = |v| g.value(v).item().as_f64();
    Ok(LossRecord {
        iter: state.iteration,
        epoch: state.epoch,
        main: item(terms.main),
        aux2: terms.aux2.map(item),
        aux4: terms.aux4.map(item),
        total: item(terms.total),
        lr,
    })
}

/// Runs one epoch over `train_ids` and advances `state.epoch`.
pub fn train_epoch<T: Element, S: SampleSource<T> + ?Sized>(
    state: &mut TrainState<T>,
    cfg: &RunConfig,
    samples: &S,
    train_ids: &[usize],
    history: &mut LossHistory,
) -> Result<()> {
    let lr = cfg.schedule().lr_at(state.epoch);
    for batch in data::batches(train_ids, cfg.batch_size, cfg.seed, state.epoch)? {
        history.records.push(train_step(state, cfg, samples, &batch, lr)?);
    }
    state.epoch += 1;
    Ok(())
}

/// Trains until `state.epoch == until_epoch`, calling `after_epoch` at every
/// epoch boundary (for checkpointing).
pub fn fit_until<T: Element, S: SampleSource<T> + ?Sized>(
    state: &mut TrainState<T>,
    cfg: &RunConfig,
    samples: &S,
    train_ids: &[usize],
    until_epoch: usize,
    history: &mut LossHistory,
    mut after_epoch: impl FnMut(&TrainState<T>, &LossHistory) -> Result<()>,
) -> Result<()> {
    if train_ids.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    while state.epoch < until_epoch {
        train_epoch(state, cfg, samples, train_ids, history)?;
        after_epoch(state, history)?;
    }
    Ok(())
}

/// Fresh run of `cfg.epochs` epochs.
pub fn fit<T: Element, S: SampleSource<T> + ?Sized>(
    cfg: &RunConfig,
    samples: &S,
    train_ids: &[usize],
) -> Result<(TrainState<T>, LossHistory)> {
    let mut state = TrainState::new(cfg)?;
    let mut history = LossHistory::default();
    fit_until(&mut state, cfg, samples, train_ids, cfg.epochs, &mut history, |_, _| Ok(()))?;
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn tiny_config() -> RunConfig {
        RunConfig {
            k: 1,
            epochs: 2,
            batch_size: 2,
            seed: 3,
            target_size: (16, 16),
            holdout: false,
            synthetic: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_names() {
        let mut c = RunConfig { k: 4, aux: true, lr_decay: true, ..RunConfig::default() };
        assert_eq!(c.run_name(), "ucloudnet_k4_aux_lrdecay");
        c.aux = false;
        assert_eq!(c.run_name(), "ucloudnet_k4_lrdecay");
        c.lr_decay = false;
        assert_eq!(c.run_name(), "ucloudnet_k4");
    }

    #[test]
    fn kv_round_trip() {
        let c = RunConfig {
            k: 2,
            aux: false,
            target_size: (64, 96),
            dtype: DType::F64,
            split_ratio: 0.75,
            ..tiny_config()
        };
        assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(RunConfig::from_kv("bogus=1").is_err());
        assert!(RunConfig::from_kv("k=zero").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig { k: 0, ..tiny_config() }.validate().is_err());
        assert!(RunConfig { target_size: (30, 32), ..tiny_config() }.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn history_rows_and_ablation_identity() {
        let samples = data::synth_dataset::<f32>(4, 16, 16, 1).unwrap();
        for aux in [true, false] {
            let cfg = RunConfig { aux, ..tiny_config() };
            let (state, hist) = fit(&cfg, &samples, &[0, 1, 2, 3]).unwrap();
            assert_eq!(hist.records.len(), 4);
            assert_eq!(state.iteration, 4);
            assert!(hist.records.windows(2).all(|w| w[0].iter < w[1].iter));
            for r in &hist.records {
                if aux {
                    let recon = r.main + 0.4 * r.aux2.unwrap() + 0.2 * r.aux4.unwrap();
                    assert!((recon - r.total).abs() <= 1e-6 * r.total.abs());
                } else {
                    assert!(r.aux2.is_none() && r.aux4.is_none());
                    assert_eq!(r.total.to_bits(), r.main.to_bits());
                }
                assert_eq!(r.lr, cfg.schedule().lr_at(r.epoch));
            }
            let csv = hist.to_csv();
            assert!(csv.starts_with("iter,main,aux2,aux4,total,lr\n"));
            assert_eq!(csv.lines().count(), 5);
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(fit::<f32, [Sample<f32>]>(&tiny_config(), &[], &[]).is_err());
    }
}
