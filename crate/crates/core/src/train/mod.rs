//! Training loop: warmup schedule, temperature-sampled batches, Adam with
//! clipping, and dev-loss checkpointing.

mod curve;

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use curve::{learning_curve, CurvePoint, LearningCurve, CURVE_REFERENCE};

use crate::corpus::{temperature_schedule, DirectionSampler, Example};
use crate::error::{Error, Result};
use crate::model::{backward, batch_loss, init_params, CheckpointFile, ModelConfig, Parameters};

/// A recorded training state.
pub type Checkpoint = CheckpointFile;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Overrides `max_epochs` when non-zero.
    pub max_steps: usize,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub temperature: f64,
    pub seed: u64,
    pub dev_eval_interval: usize,
    pub clip_norm: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 4000,
            max_epochs: 18,
            max_steps: 0,
            batch_tokens: 4096,
            label_smoothing: 0.1,
            temperature: 1.5,
            seed: 1,
            dev_eval_interval: 1000,
            clip_norm: 1.0,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("warmup_steps", self.warmup_steps),
            ("batch_tokens", self.batch_tokens),
            ("dev_eval_interval", self.dev_eval_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "learning_rate={:?}\nwarmup_steps={}\nmax_epochs={}\nmax_steps={}\nbatch_tokens={}\n\
             label_smoothing={:?}\ntemperature={:?}\nseed={}\ndev_eval_interval={}\nclip_norm={:?}\n\
             adam_beta1={:?}\nadam_beta2={:?}\nadam_eps={:?}\n",
            self.learning_rate,
            self.warmup_steps,
            self.max_epochs,
            self.max_steps,
            self.batch_tokens,
            self.label_smoothing,
            self.temperature,
            self.seed,
            self.dev_eval_interval,
            self.clip_norm,
            self.adam_betas.0,
            self.adam_betas.1,
            self.adam_eps
        )
    }

    /// Applies one `key=value` setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "batch_tokens" => self.batch_tokens = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dev_eval_interval" => self.dev_eval_interval = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "adam_beta1" => self.adam_betas.0 = num(key, value)?,
            "adam_beta2" => self.adam_betas.1 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            other => return Err(Error::Config(format!("unknown train key `{other}`"))),
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then inverse square-root decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps.max(1) as f64;
    if step <= warmup {
        cfg.learning_rate * step / warmup
    } else {
        cfg.learning_rate * (warmup / step).sqrt()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Parameters,
    v: Parameters,
    t: i32,
    betas: (f64, f64),
    eps: f64,
}

impl Adam {
    pub fn new(params: &Parameters, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            betas,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let eps = self.eps;
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Draws batches: a direction (source language) by temperature sampling,
/// then examples from that direction's shuffled queue until the token budget
/// is reached.
pub struct BatchSampler<'a> {
    examples: &'a [Example],
    directions: BTreeMap<String, Vec<usize>>,
    queues: BTreeMap<String, Vec<usize>>,
    sampler: DirectionSampler,
    batch_tokens: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(examples: &'a [Example], batch_tokens: usize, temperature: f64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty training mixture".into()));
        }
        let mut directions: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            directions.entry(e.language.clone()).or_default().push(i);
        }
        let sizes = directions
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect();
        let sampler = DirectionSampler::new(&temperature_schedule(&sizes, temperature)?);
        Ok(BatchSampler {
            examples,
            directions,
            queues: BTreeMap::new(),
            sampler,
            batch_tokens,
        })
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<Example> {
        let dir = self.sampler.sample(rng).to_string();
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < self.batch_tokens {
            let queue = self.queues.entry(dir.clone()).or_default();
            if queue.is_empty() {
                let mut fresh = self.directions[&dir].clone();
                fresh.shuffle(rng);
                fresh.reverse();
                *queue = fresh;
            }
            let ex = &self.examples[queue.pop().expect("refilled")];
            tokens += ex.num_tokens();
            batch.push(ex.clone());
        }
        batch
    }
}

/// Number of optimizer steps the configuration asks for on this mixture.
pub fn total_steps(cfg: &TrainConfig, train: &[Example]) -> usize {
    if cfg.max_steps > 0 {
        return cfg.max_steps;
    }
    let tokens: usize = train.iter().map(Example::num_tokens).sum();
    (cfg.max_epochs * tokens).div_ceil(cfg.batch_tokens).max(1)
}

fn snapshot(
    model_cfg: &ModelConfig,
    params: &Parameters,
    step: usize,
    dev_loss: f64,
    vocab_hash: &str,
) -> Checkpoint {
    CheckpointFile {
        config: model_cfg.clone(),
        step,
        dev_loss,
        vocab_hash: vocab_hash.to_string(),
        params: params.clone(),
    }
}

fn dev_loss(
    model_cfg: &ModelConfig,
    params: &Parameters,
    dev: &[Example],
    smoothing: f64,
    step: usize,
) -> Result<f64> {
    let loss = batch_loss(params, model_cfg, dev, smoothing)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            message: format!("dev loss is {loss}"),
        });
    }
    Ok(loss)
}

/// Trains from a seeded initialization. Checkpoints are recorded at step 0,
/// every `dev_eval_interval` steps, and at the final step.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Example],
    dev: &[Example],
    vocab_hash: &str,
) -> Result<Vec<Checkpoint>> {
    model_cfg.validate()?;
    let params = init_params(model_cfg, cfg.seed)?;
    train_from(
        model_cfg,
        cfg,
        params,
        train,
        dev,
        vocab_hash,
        total_steps(cfg, train),
    )
}

/// Runs `steps` optimizer steps starting from `params`.
pub fn train_from(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut params: Parameters,
    train: &[Example],
    dev: &[Example],
    vocab_hash: &str,
    steps: usize,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::Invalid("empty dev set".into()));
    }
    let mut batches = BatchSampler::new(train, cfg.batch_tokens, cfg.temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut adam = Adam::new(&params, cfg.adam_betas, cfg.adam_eps);
    let use_dropout = model_cfg.dropout > 0.0 || model_cfg.attention_dropout > 0.0;

    let mut checkpoints = vec![snapshot(
        model_cfg,
        &params,
        0,
        dev_loss(model_cfg, &params, dev, cfg.label_smoothing, 0)?,
        vocab_hash,
    )];
    for step in 1..=steps {
        let batch = batches.next_batch(&mut rng);
        let (_, mut grads) = backward(
            &params,
            model_cfg,
            &batch,
            cfg.label_smoothing,
            use_dropout.then_some(&mut dropout_rng),
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                message: format!("non-finite {what}"),
            },
            other => other,
        })?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        adam.step(&mut params, &grads, lr_at(step, cfg));
        if step % cfg.dev_eval_interval == 0 || step == steps {
            let loss = dev_loss(model_cfg, &params, dev, cfg.label_smoothing, step)?;
            checkpoints.push(snapshot(model_cfg, &params, step, loss, vocab_hash));
        }
    }
    Ok(checkpoints)
}

/// Lowest dev loss; the earliest step wins ties.
pub fn select_best(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        if best.map_or(true, |b| {
            c.dev_loss < b.dev_loss || (c.dev_loss == b.dev_loss && c.step < b.step)
        }) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::Invalid("no checkpoints to select from".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SEP;

    fn ckpt(step: usize, loss: f64) -> Checkpoint {
        let cfg = ModelConfig::tiny(8, 1, 4, 8, 1);
        snapshot(&cfg, &Parameters::default(), step, loss, "")
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(4000, &cfg), 3e-4);
        assert_eq!(lr_at(2000, &cfg), 1.5e-4);
        assert!((lr_at(16000, &cfg) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_continuous_and_decaying() {
        let cfg = TrainConfig::default();
        assert!((lr_at(4001, &cfg) - lr_at(4000, &cfg)).abs() < 1e-7);
        let mut prev = lr_at(4000, &cfg);
        for s in (4001..40_000).step_by(97) {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn select_best_rules() {
        assert_eq!(select_best(&[ckpt(0, 2.0)]).unwrap().step, 0);
        let c = [ckpt(0, 2.0), ckpt(1, 1.5), ckpt(2, 1.7)];
        assert_eq!(select_best(&c).unwrap().step, 1);
        let c = [ckpt(0, 1.5), ckpt(1, 1.5)];
        assert_eq!(select_best(&c).unwrap().step, 0);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            label_smoothing: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_tokens: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig {
            seed: 7,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut back = TrainConfig::default();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    fn copy_examples(n: usize, seed: u64) -> Vec<Example> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let len = rng.gen_range(2..5);
                let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(SEP + 1..12)).collect();
                Example {
                    record: i,
                    language: if i % 2 == 0 { "a".into() } else { "b".into() },
                    kinds: vec![crate::SignalKind::Base],
                    sources: vec![toks.clone()],
                    target: toks,
                }
            })
            .collect()
    }

    fn copy_setup() -> (ModelConfig, TrainConfig, Vec<Example>, Vec<Example>) {
        let model = ModelConfig::tiny(12, 1, 16, 32, 2);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 10,
            max_steps: 30,
            batch_tokens: 60,
            dev_eval_interval: 10,
            ..Default::default()
        };
        (model, cfg, copy_examples(200, 1), copy_examples(20, 2))
    }

    #[test]
    fn copy_task_dev_loss_decreases() {
        let (model, cfg, tr, dev) = copy_setup();
        let ck = train(&model, &cfg, &tr, &dev, "v").unwrap();
        let losses: Vec<f64> = ck.iter().map(|c| c.dev_loss).collect();
        assert_eq!(
            ck.iter().map(|c| c.step).collect::<Vec<_>>(),
            vec![0, 10, 20, 30]
        );
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    }

    #[test]
    fn zero_steps_and_determinism() {
        let (model, cfg, tr, dev) = copy_setup();
        let params = init_params(&model, cfg.seed).unwrap();
        let ck = train_from(&model, &cfg, params.clone(), &tr, &dev, "v", 0).unwrap();
        assert_eq!(ck.len(), 1);
        assert_eq!(
            ck[0].dev_loss,
            batch_loss(&params, &model, &dev, cfg.label_smoothing).unwrap()
        );

        let short = TrainConfig {
            max_steps: 5,
            dev_eval_interval: 2,
            ..cfg
        };
        let a = train(&model, &short, &tr, &dev, "v").unwrap();
        let b = train(&model, &short, &tr, &dev, "v").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.last().unwrap().to_bytes(), b.last().unwrap().to_bytes());
    }
}
