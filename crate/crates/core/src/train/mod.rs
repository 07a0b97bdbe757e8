//! Losses, optimiser, metrics, and the mini-batch training loop.

pub mod loss;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{ce_loss, change_probability, dice_loss, pixel_logits, total_loss, LossConfig, LossTerms};
pub use metrics::{confusion, metrics, ConfusionCounts, Metrics};
pub use optim::{Adam, AdamConfig};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::model::CdMamba;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Mixed into the run seed for the shuffling stream, so it never coincides
/// with the stream that initialised the weights.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be positive, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        self.loss.validate()?;
        self.adam.validate()
    }

    /// Optimisation steps in one epoch over `n` samples (the last batch may
    /// be short).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,total,ce,dice,precision,recall,f1,iou,oa";

    /// Shortest round-trip formatting, so equal logs mean bit-equal values.
    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.total, self.ce, self.dice, m.precision, m.recall, m.f1, m.iou, m.oa
        )
    }
}

/// Pixel predictions: class 1 wherever its logit is strictly larger.
pub fn argmax_mask(logits: &Tensor) -> Result<Vec<u8>> {
    let &[2, h, w] = logits.shape() else {
        return Err(Error::Input(format!("logits {:?} are not [2, H, W]", logits.shape())));
    };
    let (bg, fg) = logits.data().split_at(h * w);
    Ok(bg.iter().zip(fg).map(|(b, f)| (f > b) as u8).collect())
}

/// Loss and predictions for one batch, all recorded on `tape`.
pub struct BatchOutput<'t> {
    pub loss: LossTerms<'t>,
    pub predictions: Vec<Vec<u8>>,
}

/// Runs every sample of `batch` through the model and pools all pixels into
/// one loss (cross-entropy averaged, Dice summed over the whole batch).
pub fn batch_forward<'t>(
    model: &CdMamba,
    store: &ParamStore,
    tape: &'t Tape,
    batch: &[&SamplePair],
    loss: &LossConfig,
    trainable: bool,
) -> Result<(crate::nn::Bound<'t>, BatchOutput<'t>)> {
    let p = store.bind(tape, trainable);
    let mut rows: Vec<Var<'t>> = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    let mut predictions = Vec::with_capacity(batch.len());
    for s in batch {
        let logits = model.forward(&p, tape.constant(s.t1.clone()), tape.constant(s.t2.clone()))?;
        predictions.push(argmax_mask(&logits.value())?);
        rows.push(pixel_logits(logits)?);
        labels.extend_from_slice(&s.gt.data);
    }
    let pooled = if rows.len() == 1 { rows[0] } else { Var::concat(&rows, 0)? };
    let loss = total_loss(pooled, &labels, loss)?;
    Ok((p, BatchOutput { loss, predictions }))
}

/// Result of [`train`]: the per-epoch log and the parameters of the epoch
/// with the best train-set F1 (the earliest on ties).
#[derive(Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_params: ParamStore,
}

/// Mini-batch Adam training. Each epoch visits the samples in an order drawn
/// from `cfg.seed`; its metrics pool the predictions made by the forward
/// passes of that epoch. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &CdMamba,
    store: &mut ParamStore,
    data: &[SamplePair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for s in data {
        model.cfg.check_input_size(s.size().0, s.size().1)?;
    }
    let mut adam = Adam::new(cfg.adam, store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut ce, mut dice) = (0.0, 0.0, 0.0);
        let mut counts = ConfusionCounts::default();
        let steps = cfg.steps_per_epoch(data.len());
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SamplePair> = idx.iter().map(|&i| &data[i]).collect();
            let tape = Tape::new();
            let (p, out) = batch_forward(model, store, &tape, &batch, &cfg.loss, true)?;
            for (pred, s) in out.predictions.iter().zip(&batch) {
                counts += confusion(pred, &s.gt.data)?;
            }
            let scalar = |v: Var<'_>| v.value().data()[0];
            total += scalar(out.loss.total);
            ce += scalar(out.loss.ce);
            dice += scalar(out.loss.dice);
            tape.backward(out.loss.total)?;
            adam.step(store, &p.grads())?;
        }
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            total: total / n,
            ce: ce / n,
            dice: dice / n,
            counts,
            metrics: metrics(&counts),
        };
        if best.as_ref().map_or(true, |(f1, _, _)| rec.metrics.f1 > *f1) {
            // The weights after the epoch's last step stand for the epoch.
            best = Some((rec.metrics.f1, epoch, store.clone()));
        }
        on_epoch(&rec)?;
        records.push(rec);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainSummary {
        records,
        best_epoch,
        best_params,
    })
}

/// Forward-only change mask for one pair.
pub fn predict(model: &CdMamba, store: &ParamStore, t1: &Tensor, t2: &Tensor) -> Result<Vec<u8>> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let logits = model.forward(&p, tape.constant(t1.clone()), tape.constant(t2.clone()))?.value();
    argmax_mask(&logits)
}

/// Pooled confusion counts over `data` and the number of samples whose
/// ground truth has no change pixel.
pub fn evaluate(model: &CdMamba, store: &ParamStore, data: &[SamplePair]) -> Result<(ConfusionCounts, usize)> {
    let mut counts = ConfusionCounts::default();
    let mut empty = 0;
    for s in data {
        model.cfg.check_input_size(s.size().0, s.size().1)?;
        counts += confusion(&predict(model, store, &s.t1, &s.t2)?, &s.gt.data)?;
        empty += (s.gt.count_ones() == 0) as usize;
    }
    Ok((counts, empty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::ModelConfig;

    fn tiny() -> (CdMamba, ParamStore, Vec<SamplePair>) {
        let (m, s) = CdMamba::new(&ModelConfig::reduced(), 0).unwrap();
        (m, s, synth_generate(4, 16, 1).unwrap())
    }

    #[test]
    fn one_epoch_of_four_in_pairs_is_two_steps() {
        let (m, mut store, data) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.steps_per_epoch(4), 2);
        let before = store.clone();
        let s = train(&m, &mut store, &data, &cfg, |_| Ok(())).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.records[0].counts.total(), 4 * 16 * 16);
        assert_ne!(
            store.iter().next().unwrap().value,
            before.iter().next().unwrap().value
        );
        assert_eq!(cfg.steps_per_epoch(5), 3);
    }

    #[test]
    fn fixed_seed_gives_identical_logs() {
        let run = || {
            let (m, mut store, data) = tiny();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 3,
                seed: 9,
                ..TrainConfig::default()
            };
            let mut lines = Vec::new();
            train(&m, &mut store, &data, &cfg, |r| {
                lines.push(r.csv_line());
                Ok(())
            })
            .unwrap();
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_and_bad_config() {
        let (m, mut store, data) = tiny();
        let err = train(&m, &mut store, &[], &TrainConfig::default(), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let zero = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(&m, &mut store, &data, &zero, |_| Ok(())).is_err());
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let l = Tensor::new([2, 1, 3], vec![0.0, 1.0, -1.0, 0.0, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_mask(&l).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn csv_line_round_trips_values() {
        let counts = ConfusionCounts { tp: 1, tn: 2, fp: 3, fn_: 4 };
        let r = EpochRecord {
            epoch: 3,
            total: 0.1 + 0.2,
            ce: 1.0 / 3.0,
            dice: 0.25,
            counts,
            metrics: metrics(&counts),
        };
        let line = r.csv_line();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), EpochRecord::CSV_HEADER.split(',').count());
        assert_eq!(fields[1].parse::<f64>().unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    }
}
