use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{lr_at, TrainConfig, Weighting};
use super::loss::weighted_bce;
use super::optim::{AdamHyper, AdamW};
use crate::data::{augment, class_weights, AugmentationSpec, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{average_precision, roc_auc};
use crate::models::Model;
use crate::tensor::{streams, Rng, Tensor};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Samples of the three partitions, in split order.
#[derive(Clone, Debug, Default)]
pub struct Partitions {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Partitions {
    pub fn from_split(samples: &[Sample], split: &DatasetSplit) -> Result<Self> {
        let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.study_id.as_str(), s)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|s| (*s).clone())
                        .ok_or_else(|| Error::Data(format!("split names unknown study '{id}'")))
                })
                .collect()
        };
        Ok(Partitions { train: pick(&split.train)?, val: pick(&split.val)?, test: pick(&split.test)? })
    }

    pub fn named(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Inference-mode loss and ranking metrics of one partition. The ranking
/// metrics are absent when the partition holds a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub n: usize,
    pub loss: f64,
    pub auc_roc: Option<f64>,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Mean weighted BCE over the epoch's training batches.
    pub batch_loss: f64,
    pub train: Option<PartitionMetrics>,
    pub val: Option<PartitionMetrics>,
    pub test: Option<PartitionMetrics>,
}

impl EpochRecord {
    fn partition(&self, name: &str) -> Option<&PartitionMetrics> {
        match name {
            "train" => self.train.as_ref(),
            "val" => self.val.as_ref(),
            "test" => self.test.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bookmark {
    pub epoch: usize,
    pub value: f64,
}

/// Per-epoch records plus best-epoch bookmarks keyed `partition.metric`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best: BTreeMap<String, Bookmark>,
}

impl TrainHistory {
    /// Appends a record and returns whether it improved validation AUC.
    pub fn push(&mut self, record: EpochRecord) -> bool {
        let mut improved_val_auc = false;
        for part in ["train", "val", "test"] {
            let Some(m) = record.partition(part) else { continue };
            let candidates = [("loss", Some(m.loss), false), ("auc_roc", m.auc_roc, true), ("ap", m.average_precision, true)];
            for (metric, value, higher) in candidates {
                let Some(v) = value else { continue };
                let key = format!("{part}.{metric}");
                let better = match self.best.get(&key) {
                    None => true,
                    Some(b) if higher => v > b.value,
                    Some(b) => v < b.value,
                };
                if better {
                    self.best.insert(key.clone(), Bookmark { epoch: record.epoch, value: v });
                    improved_val_auc |= key == "val.auc_roc";
                }
            }
        }
        self.records.push(record);
        improved_val_auc
    }

    /// Model-selection bookmark: best validation AUC.
    pub fn selected(&self) -> Option<Bookmark> {
        self.best.get("val.auc_roc").copied()
    }

    /// Best test-partition epoch. Reporting mode only: selecting on test
    /// data leaks it into model choice.
    pub fn best_test_reporting(&self) -> Option<Bookmark> {
        self.best.get("test.auc_roc").copied()
    }
}

/// Everything besides tensors that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub augmentation: AugmentationSpec,
    pub class_weights: (f64, f64),
    /// Completed epochs.
    pub epoch: usize,
    pub history: TrainHistory,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub state: TrainState,
    out_dir: Option<PathBuf>,
}

fn batch_tensor(samples: &[Sample]) -> Result<Tensor<f32>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

impl Trainer {
    /// Fresh run. Class weights come from the training labels.
    pub fn new(model: Model<f32>, config: TrainConfig, augmentation: AugmentationSpec, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        augmentation.validate()?;
        let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
        if labels.is_empty() {
            return Err(Error::Data("training partition is empty".into()));
        }
        let class_weights = match config.weighting {
            Weighting::InverseFrequency => class_weights(&labels)?,
            Weighting::Uniform => (1.0, 1.0),
        };
        let optimizer = AdamW::init_for(&model, AdamHyper::default())?;
        let state = TrainState { config, augmentation, class_weights, epoch: 0, history: TrainHistory::default() };
        Ok(Trainer { model, optimizer, state, out_dir: None })
    }

    pub fn resume(checkpoint: &Path) -> Result<Self> {
        let (model, optimizer, state) = load_checkpoint(checkpoint)?;
        Ok(Trainer { model, optimizer, state, out_dir: None })
    }

    /// Directory for logs and checkpoints; created if missing.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn history(&self) -> &TrainHistory {
        &self.state.history
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.optimizer, &self.state)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, data: &Partitions) -> Result<&TrainHistory> {
        self.fit_until(data, self.state.config.epochs)
    }

    /// Trains until `last_epoch` epochs are complete (for staged runs).
    pub fn fit_until(&mut self, data: &Partitions, last_epoch: usize) -> Result<&TrainHistory> {
        if !data.train.iter().any(|s| s.label == 1) || !data.train.iter().any(|s| s.label == 0) {
            return Err(Error::Data("training partition needs both classes".into()));
        }
        self.rewrite_history_log()?;
        while self.state.epoch < last_epoch {
            let started = Instant::now();
            let record = self.train_epoch(data)?;
            let improved = self.state.history.push(record.clone());
            self.state.epoch = record.epoch;
            if let Some(dir) = self.out_dir.clone() {
                append_line(&dir.join(HISTORY_FILE), &serde_json::to_string(&record)?)?;
                let finished = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
                let timing = serde_json::json!({
                    "epoch": record.epoch,
                    "seconds": started.elapsed().as_secs_f64(),
                    "finished_unix": finished,
                });
                append_line(&dir.join(TIMING_FILE), &timing.to_string())?;
                if improved {
                    self.save(&dir.join(BEST_CHECKPOINT))?;
                }
                self.save(&dir.join(LAST_CHECKPOINT))?;
            }
        }
        if let Some(dir) = &self.out_dir {
            let last = dir.join(LAST_CHECKPOINT);
            if !last.exists() {
                self.save(&last)?;
            }
        }
        Ok(&self.state.history)
    }

    fn rewrite_history_log(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let mut text = String::new();
        for r in &self.state.history.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// One pass over shuffled, augmented training batches, then inference
    /// on every partition.
    pub fn train_epoch(&mut self, data: &Partitions) -> Result<EpochRecord> {
        let cfg = self.state.config.clone();
        let epoch = self.state.epoch + 1;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        Rng::for_stream(cfg.seed, streams::SHUFFLE, epoch as u64).shuffle(&mut order);

        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = lr_at(&cfg, self.optimizer.step);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &data.train[i];
                let mut rng = Rng::for_item(cfg.seed, streams::AUGMENT, &s.study_id, epoch as u64);
                batch.push(augment(s, &self.state.augmentation, &mut rng)?);
            }
            let x = batch_tensor(&batch)?;
            let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
            let ids: Vec<&str> = batch.iter().map(|s| s.study_id.as_str()).collect();

            self.model.zero_grad();
            let rng_before = self.model.dropout_rng().clone();
            let scores = self.model.forward(&x, true)?;
            let s: Vec<f64> = scores.data().iter().map(|&v| v as f64).collect();
            let (loss, grad) = weighted_bce(&s, &labels, self.state.class_weights)?;
            if !loss.is_finite() || !scores.all_finite() {
                self.model.set_dropout_rng(rng_before);
                let layer = self.model.find_non_finite_layer(&x, true).unwrap_or_else(|| "no layer (loss only)".into());
                return Err(Error::Numeric(format!(
                    "loss {loss} at epoch {epoch}, batch {ids:?}; first non-finite value: {layer}"
                )));
            }
            let g = Tensor::from_vec(&[grad.len(), 1], grad.iter().map(|&v| v as f32).collect())?;
            self.model.backward(&g)?;
            lr = lr_at(&cfg, self.optimizer.step);
            self.optimizer.step(&mut self.model, lr, cfg.weight_decay)?;
            loss_sum += loss;
            batches += 1;
        }
        self.model.clear_cache();

        let mut parts = Vec::new();
        for (_, samples) in data.named() {
            parts.push(if samples.is_empty() { None } else { Some(self.measure(samples)?) });
        }
        let [train, val, test]: [Option<PartitionMetrics>; 3] = parts.try_into().expect("three partitions");
        Ok(EpochRecord {
            epoch,
            step: self.optimizer.step,
            lr,
            batch_loss: loss_sum / batches.max(1) as f64,
            train,
            val,
            test,
        })
    }

    /// Inference-mode scores for each sample.
    pub fn score(&mut self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let x = batch_tensor(std::slice::from_ref(s))?;
            out.push(self.model.predict(&x)?.data()[0] as f64);
        }
        Ok(out)
    }

    fn measure(&mut self, samples: &[Sample]) -> Result<PartitionMetrics> {
        let scores = self.score(samples)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let (loss, _) = weighted_bce(&scores, &labels, self.state.class_weights)?;
        let both = labels.contains(&0) && labels.contains(&1);
        Ok(PartitionMetrics {
            n: samples.len(),
            loss,
            auc_roc: if both { Some(roc_auc(&scores, &labels)?) } else { None },
            average_precision: if labels.contains(&1) { Some(average_precision(&scores, &labels)?) } else { None },
        })
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
