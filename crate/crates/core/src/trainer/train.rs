//! The training loop and the data it runs on.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, Mode, PairInputs, Params};
use crate::rng::Rng;
use crate::synthworld::{generate_world, make_probe_set, sample_dataset, ConceptWorld, ProbeItem};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::TrainConfig;
use crate::trainer::eval::{evaluate_retrieval, mean_support_fraction, pair_inputs, FeatureSource, ProbeInputs, RetrievalMetrics};
use crate::trainer::optim::{adamw_step, lr_at, OptimizerState, WeightDecay};

/// World, training pool, held-out pool and probe set of a configuration.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub world: ConceptWorld,
    pub train: Vec<PairInputs<f64>>,
    pub eval: Vec<PairInputs<f64>>,
    pub probe_items: Vec<ProbeItem>,
}

impl DeskData {
    /// Everything is a pure function of the config's world and data seeds.
    /// Training and held-out pairs come from one stream, split in order.
    pub fn build(config: &TrainConfig) -> Result<Self> {
        let world = generate_world(
            config.world_seed,
            config.k_true,
            config.input_dim,
            config.noise_sigma,
            config.distractor_rate,
            config.salience_jitter,
        )?;
        let ranges = config.sampling();
        let raw = sample_dataset(&world, &ranges, config.train_pairs + config.eval_pairs, config.data_seed)?;
        let (train, eval) = raw.split_at(config.train_pairs);
        let probe_items = if config.probe_items > 0 && world.k_true >= 2 {
            make_probe_set(&world, &ranges, config.probe_items, config.data_seed)?
        } else {
            Vec::new()
        };
        Ok(Self {
            train: train.iter().map(pair_inputs).collect(),
            eval: eval.iter().map(pair_inputs).collect(),
            world,
            probe_items,
        })
    }

    pub fn probe(&self) -> Vec<ProbeInputs> {
        self.probe_items.iter().map(ProbeInputs::from).collect()
    }
}

/// Held-out evaluation attached to a metrics record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub source: &'static str,
    pub retrieval: RetrievalMetrics,
    /// Mean support fraction over the held-out pool; absent for the pooling
    /// baseline.
    pub support_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Batch mean of `|support| / C`; 1 for dense heads.
    pub support_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// A run that stopped early; `last_good` holds the state before the failing
/// step, or `None` if the run never started.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: u64,
    pub last_good: Option<Box<Checkpoint>>,
}

/// Freshly initialized parameters and optimizer for `config`.
pub fn init_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let params = Params::init(&config.dims(), config.tau_init, &mut rng);
    Ok(Checkpoint {
        config: config.clone(),
        optimizer: OptimizerState::new(&params),
        params,
        rng,
    })
}

/// Retrieval with the model's own feature path, plus held-out support.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, pairs: &[PairInputs<f64>]) -> Result<EvalSummary> {
    let opts = ckpt.config.forward_options();
    let source = FeatureSource::for_mode(ckpt.config.mode);
    Ok(EvalSummary {
        source: source.as_str(),
        retrieval: evaluate_retrieval(&ckpt.params, &opts, pairs, source)?,
        support_fraction: mean_support_fraction(&ckpt.params, &opts, pairs)?,
    })
}

/// Runs `config.total_steps` AdamW steps from initialization. Every
/// `log_interval` steps, and after the last one, a record with held-out
/// evaluation is passed to `on_record`.
pub fn train(
    config: &TrainConfig,
    data: &DeskData,
    mut on_record: impl FnMut(&MetricsRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut ckpt = match init_checkpoint(config) {
        Ok(c) => c,
        Err(error) => {
            return Err(TrainFailure {
                error,
                step: 0,
                last_good: None,
            })
        }
    };
    let opts = config.forward_options();
    let decay = WeightDecay {
        codebook: config.weight_decay_fdt,
        weights: config.weight_decay_general,
    };
    let mut metrics = Vec::new();

    for t in 0..config.total_steps {
        let step = t as u64 + 1;
        let result = (|| {
            let idx = ckpt.rng.sample_indices(data.train.len(), config.batch_size);
            let batch: Vec<&PairInputs<f64>> = idx.iter().map(|&i| &data.train[i]).collect();
            let out = loss_and_grad(&ckpt.params, &opts, &batch, config.threads)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite { index: t });
            }
            Ok(out)
        })();
        let fail = |error, ckpt: &Checkpoint| TrainFailure {
            error,
            step,
            last_good: Some(Box::new(ckpt.clone())),
        };
        let out = match result {
            Ok(o) => o,
            Err(e) => return Err(fail(e, &ckpt)),
        };
        let lr = lr_at(t + 1, config);
        let before = ckpt.params.clone();
        if let Err(e) = adamw_step(&mut ckpt.params, &out.grads, &mut ckpt.optimizer, lr, &decay) {
            return Err(fail(e, &ckpt));
        }
        if config.tau_learnable {
            let mut tau = ckpt.params.temperature(true);
            tau.clamp();
            ckpt.params.log_tau.data_mut()[0] = tau.log_tau;
        }
        if !ckpt.params.tensors().iter().all(|(_, _, p)| p.all_finite()) {
            ckpt.params = before;
            return Err(fail(Error::NonFinite { index: t }, &ckpt));
        }

        if step.is_multiple_of(config.log_interval as u64) || t + 1 == config.total_steps {
            let eval = if data.eval.is_empty() {
                None
            } else {
                match evaluate_checkpoint(&ckpt, &data.eval) {
                    Ok(e) => Some(e),
                    Err(e) => return Err(fail(e, &ckpt)),
                }
            };
            let record = MetricsRecord {
                step,
                loss: out.loss,
                lr,
                tau: ckpt.params.temperature(config.tau_learnable).tau(),
                support_fraction: if config.mode == Mode::Clip { 1.0 } else { out.support_fraction },
                eval,
            };
            on_record(&record);
            metrics.push(record);
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::checkpoint::encode;

    fn small() -> TrainConfig {
        TrainConfig {
            codebook_size: 8,
            embed_dim: 6,
            fdt_dim: 4,
            input_dim: 10,
            k_true: 4,
            train_pairs: 40,
            eval_pairs: 12,
            probe_items: 5,
            batch_size: 8,
            total_steps: 12,
            warmup_steps: 3,
            log_interval: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = small();
        cfg.total_steps = 0;
        cfg.warmup_steps = 0;
        let data = DeskData::build(&cfg).unwrap();
        let out = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(out.checkpoint, init_checkpoint(&cfg).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small();
        let data = DeskData::build(&cfg).unwrap();
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(encode(&a.checkpoint), encode(&b.checkpoint));
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn records_at_interval_and_end() {
        let cfg = small();
        let data = DeskData::build(&cfg).unwrap();
        let mut seen = Vec::new();
        let out = train(&cfg, &data, |r| seen.push(r.step)).unwrap();
        assert_eq!(seen, vec![5, 10, 12]);
        assert_eq!(out.checkpoint.step(), 12);
        for r in &out.metrics {
            assert!(r.loss.is_finite());
            assert!(r.support_fraction > 0.0 && r.support_fraction <= 1.0);
            assert!(r.eval.is_some());
        }
    }

    #[test]
    fn tau_stays_in_range() {
        let mut cfg = small();
        cfg.tau_init = 0.011;
        cfg.lr_peak = 0.5;
        let data = DeskData::build(&cfg).unwrap();
        let out = train(&cfg, &data, |_| {}).unwrap();
        let lt = out.checkpoint.params.log_tau.data()[0];
        assert!(lt >= 0.01f64.ln() - 1e-15 && lt <= 1e-15);
    }

    #[test]
    fn clip_mode_trains() {
        let mut cfg = small();
        cfg.mode = Mode::Clip;
        let data = DeskData::build(&cfg).unwrap();
        let out = train(&cfg, &data, |_| {}).unwrap();
        let last = out.metrics.last().unwrap();
        assert_eq!(last.support_fraction, 1.0);
        assert_eq!(last.eval.as_ref().unwrap().support_fraction, None);
    }

    #[test]
    fn invalid_config_fails() {
        let mut cfg = small();
        cfg.batch_size = 0;
        let data = DeskData::build(&small()).unwrap();
        assert!(train(&cfg, &data, |_| {}).is_err());
    }
}
