use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::LATENT_CLAMP;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::param::Parameterized;
use crate::train::adam::{Adam, AdamConfig};
use crate::train::data::{BlobSpec, Dataset, DatasetSpec, Normalization};
use crate::train::loss::{softmax_cross_entropy, topk_correct};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "MOBINET_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epoch counts after which the learning rate is multiplied by `decay_factor`.
    pub lr_decay_points: Vec<usize>,
    pub decay_factor: f32,
    pub adam: AdamConfig,
    pub latent_clamp: f32,
    pub seed: u64,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_decay_points: vec![15],
            decay_factor: 0.1,
            adam: AdamConfig::default(),
            latent_clamp: LATENT_CLAMP,
            seed: 0,
            dataset: DatasetSpec::Idx {
                dir: PathBuf::from("data/digits"),
                norm: Normalization::default(),
                classes: 10,
            },
        }
    }
}

pub const TRAIN_KEYS: [&str; 17] = [
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_points",
    "decay_factor",
    "weight_decay",
    "beta1",
    "beta2",
    "latent_clamp",
    "seed",
    "dataset",
    "data_dir",
    "norm_mean",
    "norm_std",
    "synthetic_train",
    "synthetic_test",
    "synthetic_noise",
];

impl TrainConfig {
    /// Five-epoch run on synthetic blobs, sized for CI.
    pub fn synthetic_smoke() -> Self {
        Self {
            epochs: 5,
            lr: 2e-3,
            lr_decay_points: vec![],
            dataset: DatasetSpec::Synthetic(BlobSpec::default()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.latent_clamp.is_nan() || self.latent_clamp <= 0.0 {
            return Err(Error::config("latent_clamp must be positive"));
        }
        let b = &self.adam;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || b.weight_decay < 0.0 {
            return Err(Error::config("adam betas must lie in [0, 1) and weight_decay >= 0"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let decays = self.lr_decay_points.iter().filter(|&&p| epoch > p).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid {key} `{value}`")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_points" => {
                self.lr_decay_points = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "decay_factor" => self.decay_factor = num(key, value)?,
            "weight_decay" => self.adam.weight_decay = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "latent_clamp" => self.latent_clamp = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => {
                self.dataset = match value.trim() {
                    "idx" => DatasetSpec::Idx {
                        dir: PathBuf::from("data/digits"),
                        norm: Normalization::default(),
                        classes: 10,
                    },
                    "synthetic" => DatasetSpec::Synthetic(BlobSpec::default()),
                    other => return Err(Error::config(format!("unknown dataset `{other}`"))),
                }
            }
            "data_dir" | "norm_mean" | "norm_std" => match &mut self.dataset {
                DatasetSpec::Idx { dir, norm, .. } => match key {
                    "data_dir" => *dir = PathBuf::from(value.trim()),
                    "norm_mean" => norm.mean = num(key, value)?,
                    _ => norm.std = num(key, value)?,
                },
                DatasetSpec::Synthetic(_) => return Err(Error::config(format!("`{key}` requires dataset = idx"))),
            },
            "synthetic_train" | "synthetic_test" | "synthetic_noise" => match &mut self.dataset {
                DatasetSpec::Synthetic(spec) => match key {
                    "synthetic_train" => spec.train = num(key, value)?,
                    "synthetic_test" => spec.test = num(key, value)?,
                    _ => spec.noise = num(key, value)?,
                },
                DatasetSpec::Idx { .. } => return Err(Error::config(format!("`{key}` requires dataset = synthetic"))),
            },
            _ => return Err(Error::config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `kv` in order on top of the defaults. `dataset` is applied
    /// first so the dataset-specific keys find the right variant.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(ds) = kv.get("dataset") {
            cfg.apply("dataset", ds)?;
        }
        for (key, value) in kv.iter().filter(|(k, _)| *k != "dataset") {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the number of classes an IDX dataset is checked against.
    pub fn with_classes(mut self, n: usize) -> Self {
        match &mut self.dataset {
            DatasetSpec::Idx { classes, .. } => *classes = n,
            DatasetSpec::Synthetic(spec) => spec.classes = n,
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    /// Percent.
    pub test_top1: f32,
    /// Percent.
    pub test_top5: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,test_top1,test_top5";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.test_top1, r.test_top5
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(Error::format("history CSV header mismatch"));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::format(format!("bad history row `{line}`"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    lr: f[1].parse().map_err(|_| bad())?,
                    train_loss: f[2].parse().map_err(|_| bad())?,
                    test_top1: f[3].parse().map_err(|_| bad())?,
                    test_top5: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f32,
    /// Percent.
    pub top1: f32,
    /// Percent.
    pub top5: f32,
}

/// Thread cap from `MOBINET_THREADS`; 1 when unset or invalid.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Inference-mode evaluation. Batches are spread over `threads` workers;
/// per-batch results are combined in batch order so the result does not
/// depend on the thread count.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize, threads: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<&[usize]> = indices.chunks(batch_size).collect();
    let k5 = 5.min(net.config().num_classes);
    let run = |chunk: &[&[usize]]| -> Result<Vec<(f64, usize, usize)>> {
        chunk
            .iter()
            .map(|idx| {
                let (x, y) = data.batch(idx);
                let logits = net.forward(&x)?;
                let (loss, _) = softmax_cross_entropy(&logits, &y)?;
                Ok((
                    loss as f64 * idx.len() as f64,
                    topk_correct(&logits, &y, 1)?,
                    topk_correct(&logits, &y, k5)?,
                ))
            })
            .collect()
    };
    let threads = threads.clamp(1, batches.len());
    let per_batch: Vec<(f64, usize, usize)> = if threads == 1 {
        run(&batches)?
    } else {
        let per_thread = batches.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batches
                .chunks(per_thread)
                .map(|chunk| scope.spawn(move || run(chunk)))
                .collect();
            let mut all = Vec::with_capacity(batches.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let n = data.len() as f64;
    let (mut loss, mut c1, mut c5) = (0.0f64, 0usize, 0usize);
    for (l, a, b) in per_batch {
        loss += l;
        c1 += a;
        c5 += b;
    }
    Ok(EvalResult {
        loss: (loss / n) as f32,
        top1: (100.0 * c1 as f64 / n) as f32,
        top5: (100.0 * c5 as f64 / n) as f32,
    })
}

/// Sample order for `epoch` (1-based); depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Owns a network and its optimizer across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    adam: Adam,
    history: History,
    eval_threads: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam);
        Ok(Self {
            net,
            cfg,
            adam,
            history: History::default(),
            eval_threads: threads_from_env(),
        })
    }

    /// Continues a run from saved optimizer state and history.
    pub fn resume(net: Network, cfg: TrainConfig, adam: Adam, history: History) -> Result<Self> {
        let mut t = Self::new(net, cfg)?;
        t.adam = adam;
        t.history = history;
        Ok(t)
    }

    pub fn set_eval_threads(&mut self, threads: usize) {
        self.eval_threads = threads.max(1);
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Number of completed epochs.
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn step(&mut self, train: &Dataset, idx: &[usize], lr: f32, epoch: usize) -> Result<f32> {
        let (x, y) = train.batch(idx);
        self.net.zero_grad();
        let logits = self.net.forward_train(&x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("training loss became {loss}"),
            });
        }
        self.net.backward(&grad)?;
        self.adam.step(&mut self.net, lr)?;
        self.net.clamp_latent(self.cfg.latent_clamp);
        self.net.sync()?;
        Ok(loss)
    }

    /// Runs one epoch and appends its record. On divergence the error is
    /// returned and the history keeps every completed epoch.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochRecord> {
        let epoch = self.epochs_done() + 1;
        let lr = self.cfg.lr_at(epoch);
        let order = epoch_order(train.len(), self.cfg.seed, epoch);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for idx in order.chunks(self.cfg.batch_size) {
            // Batch statistics of a single sample are degenerate.
            if idx.len() < 2 && seen > 0 {
                continue;
            }
            let loss = self.step(train, idx, lr, epoch)?;
            total += loss as f64 * idx.len() as f64;
            seen += idx.len();
        }
        let eval = evaluate(&self.net, test, self.cfg.batch_size.max(64), self.eval_threads)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("test loss became {}", eval.loss),
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: (total / seen.max(1) as f64) as f32,
            test_top1: eval.top1,
            test_top5: eval.top5,
        };
        self.history.records.push(record);
        Ok(record)
    }

    /// Trains until `cfg.epochs` epochs are done, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        if train.image_shape()[0] != self.net.config().in_channels {
            return Err(Error::config(format!(
                "dataset has {} channels, network expects {}",
                train.image_shape()[0],
                self.net.config().in_channels
            )));
        }
        while self.epochs_done() < self.cfg.epochs {
            let record = self.train_epoch(train, test)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

/// Trains `net` from scratch and returns it with its history.
pub fn train(net: Network, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<(Network, History)> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    trainer.fit(train, test, |_, _| Ok(()))?;
    let history = trainer.history().clone();
    Ok((trainer.into_network(), history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr: 1e-3,
            lr_decay_points: vec![2, 4],
            ..TrainConfig::default()
        };
        let lrs: Vec<f32> = (1..=5).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert_eq!(lrs[1], 1e-3);
        assert!((lrs[2] - 1e-4).abs() < 1e-10);
        assert!((lrs[4] - 1e-5).abs() < 1e-11);
    }

    #[test]
    fn invalid_configs() {
        for (k, v) in [("lr", "0"), ("decay_factor", "1.5"), ("batch_size", "0")] {
            let mut kv = KeyValues::new();
            kv.set(k, v);
            assert!(TrainConfig::from_kv(&kv).is_err(), "{k}={v}");
        }
        let mut kv = KeyValues::new();
        kv.set("momentum", "0.9");
        assert!(matches!(TrainConfig::from_kv(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_keys_follow_dataset() {
        let kv = KeyValues::parse("synthetic_train = 64\ndataset = synthetic\n").unwrap();
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        assert!(matches!(
            cfg.dataset,
            DatasetSpec::Synthetic(BlobSpec { train: 64, .. })
        ));
        let kv = KeyValues::parse("dataset = idx\nsynthetic_train = 64\n").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn history_csv_roundtrip() {
        let h = History {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    lr: 1e-3,
                    train_loss: 2.25,
                    test_top1: 31.5,
                    test_top5: 80.0,
                },
                EpochRecord {
                    epoch: 2,
                    lr: 1.0000001e-4,
                    train_loss: 0.123_456_79,
                    test_top1: 90.25,
                    test_top5: 100.0,
                },
            ],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,test_top1,test_top5\n"));
        assert_eq!(History::from_csv(&csv).unwrap(), h);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
