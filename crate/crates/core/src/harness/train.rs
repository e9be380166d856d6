use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DataConfig, TrainConfig};
use super::optim::{Adam, LrSchedule};
use crate::error::{Error, Result};
use crate::fusion_head::{loss_and_accumulate, model_forward};
use crate::model::ModelParams;
use crate::numerics::{argmax, Real};
use crate::synth_data::{generate_dataset, load_dataset, McqaInstance};

pub const METRICS_HEADER: &str = "step,loss,lr,eval_accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    /// Mean batch loss before the update.
    pub loss: f64,
    pub lr: f64,
    pub eval_accuracy: Option<f64>,
}

impl MetricRow {
    fn csv_line(&self) -> String {
        let acc = self.eval_accuracy.map(|a| format!("{a}")).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.loss, self.lr, acc)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_line()).expect("string write");
    }
    out
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Fails with a configuration error when any instance cannot be fed to the model.
pub fn check_compatible<T: Real>(params: &ModelParams<T>, dataset: &[McqaInstance]) -> Result<()> {
    let enc = &params.config.encoder;
    for (i, inst) in dataset.iter().enumerate() {
        inst.validate()
            .map_err(|e| Error::ConfigMismatch(format!("instance {i}: {e}")))?;
        if inst.max_token() as usize >= enc.vocab_size {
            return Err(Error::ConfigMismatch(format!(
                "instance {i} uses token {} but the vocabulary has {} ids",
                inst.max_token(),
                enc.vocab_size
            )));
        }
        let longest_tail = inst.options.iter().map(Vec::len).max().unwrap_or(0) + inst.question.len() + 3;
        if longest_tail > enc.max_len {
            return Err(Error::ConfigMismatch(format!(
                "instance {i} needs {longest_tail} positions for question and option, max_len is {}",
                enc.max_len
            )));
        }
    }
    Ok(())
}

/// Predicted option, ties resolved to the lowest index.
pub fn predict<T: Real>(params: &ModelParams<T>, instance: &McqaInstance) -> Result<usize> {
    Ok(argmax(&model_forward(instance, params)?))
}

/// Fraction of instances whose prediction equals the label.
pub fn evaluate<T: Real>(params: &ModelParams<T>, dataset: &[McqaInstance]) -> Result<f64> {
    check_compatible(params, dataset)?;
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in dataset {
        if predict(params, inst)? == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Training and held-out splits as configured.
pub fn load_or_generate(data: &DataConfig) -> Result<(Vec<McqaInstance>, Vec<McqaInstance>)> {
    let train = match &data.train_path {
        Some(p) => load_dataset(p)?,
        None => generate_dataset(&data.gen, data.train_size)?,
    };
    let test = match &data.test_path {
        Some(p) => load_dataset(p)?,
        None => {
            let gen = crate::synth_data::GenSpec {
                seed: data.test_seed,
                ..data.gen.clone()
            };
            generate_dataset(&gen, data.test_size)?
        }
    };
    Ok((train, test))
}

/// Epoch-shuffled sampling without replacement.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { rng, order, cursor: 0 }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Trains from a fresh initialization drawn from `config.seed`.
///
/// `on_step` sees every metric row as it is produced. The run is fully
/// deterministic given the configuration and the data.
pub fn train<T: Real>(
    config: &TrainConfig,
    train_set: &[McqaInstance],
    eval_set: Option<&[McqaInstance]>,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<Checkpoint<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut params = ModelParams::<T>::init(config.model_config(), config.seed)?;
    check_compatible(&params, train_set)?;
    if let Some(eval) = eval_set {
        check_compatible(&params, eval)?;
    }

    let schedule = LrSchedule {
        peak: config.learning_rate,
        warmup_fraction: config.warmup_fraction,
        total_steps: config.total_steps,
    };
    let mut adam = Adam::<T>::new(config.adam, &params.store);
    let mut sampler = BatchSampler::new(train_set.len(), config.seed);
    let inv_batch = T::lit(1.0 / config.batch_size as f64);
    let mut metrics = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let lr = schedule.at(step);
        params.store.zero_grad();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let inst = &train_set[sampler.next()];
            loss_sum += loss_and_accumulate(inst, &mut params)?.as_f64();
        }
        let loss = loss_sum / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        adam.step(&mut params.store, lr, inv_batch);

        let last = step + 1 == config.total_steps;
        let eval_accuracy = match eval_set {
            Some(eval) if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) => {
                Some(evaluate(&params, eval)?)
            }
            _ => None,
        };
        let row = MetricRow {
            step,
            loss,
            lr,
            eval_accuracy,
        };
        on_step(&row);
        metrics.push(row);
    }
    params.store.ids().for_each(|id| params.store.get_mut(id).clear_grad());
    Ok(Checkpoint::new(config.clone(), config.total_steps, metrics, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::GenSpec;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.encoder.blocks = 2;
        cfg.encoder.hidden = 8;
        cfg.encoder.ffn_hidden = 8;
        cfg.batch_size = 4;
        cfg.total_steps = 3;
        cfg.eval_every = 2;
        cfg.data.gen = GenSpec {
            n_sentences: 3,
            ..GenSpec::default()
        };
        cfg
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = small();
        cfg.total_steps = 0;
        let data = generate_dataset(&cfg.data.gen, 4).unwrap();
        let ck = train::<f32>(&cfg, &data, None, |_| {}).unwrap();
        let init = ModelParams::<f32>::init(cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(ck.params, init);
        assert!(ck.manifest.metrics.is_empty());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(
            train::<f32>(&small(), &[], None, |_| {}),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eval_cadence_and_csv() {
        let cfg = small();
        let data = generate_dataset(&cfg.data.gen, 8).unwrap();
        let ck = train::<f32>(&cfg, &data, Some(&data[..4]), |_| {}).unwrap();
        let rows = &ck.manifest.metrics;
        assert_eq!(rows.len(), 3);
        assert!(rows[0].eval_accuracy.is_none());
        assert!(rows[1].eval_accuracy.is_some());
        assert!(rows[2].eval_accuracy.is_some());
        let csv = metrics_csv(rows);
        assert!(csv.starts_with("step,loss,lr,eval_accuracy\n0,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn incompatible_dataset_is_reported() {
        let cfg = small();
        let params = ModelParams::<f32>::init(cfg.model_config(), 0).unwrap();
        let mut data = generate_dataset(&cfg.data.gen, 2).unwrap();
        data[1].question.push(200);
        assert!(matches!(evaluate(&params, &data), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn csv_appends_without_repeating_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricRow {
            step: 0,
            loss: 1.5,
            lr: 0.0,
            eval_accuracy: None,
        };
        write_metrics_csv(&path, &[row.clone()]).unwrap();
        write_metrics_csv(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "step,loss,lr,eval_accuracy\n0,1.5,0,\n0,1.5,0,\n");
    }
}
