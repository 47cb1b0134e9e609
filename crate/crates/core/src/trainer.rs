//! Training loop, evaluation and ablation runs.
//!
//! Output directory layout of [`train`]:
//!
//! ```text
//! <out>/run.json                 resolved config, steps run, final eval
//! <out>/loss.csv                 per-step loss terms
//! <out>/checkpoints/step_N.ckpt  periodic checkpoints
//! <out>/final.ckpt               last weights and optimizer state
//! <out>/last_good.ckpt           written only when a step produced a non-finite value
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{augment, load_pairs, synthetic_pairs, DegradeParams, ImagePair};
use crate::error::{Error, Result};
use crate::image_io::{write_png, BitDepth};
use crate::inference::batch_input;
use crate::losses::{class_targets, objective, objective_rgb, FeatureExtractor, LossReport, LossWeights, Targets, EXTRACTOR_SEED, TERM_NAMES};
use crate::metrics::{EvalReport, ImageScores};
use crate::network::{Bcnet, ModelConfig, Outputs, SIZE_MULTIPLE};
use crate::params::{Adam, AdamConfig};
use crate::quantizer::ColorGamut;
use crate::scalar::Scalar;

/// Where training pairs come from. Without directories a synthetic set is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub low_dir: Option<PathBuf>,
    pub high_dir: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub degrade: DegradeParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { low_dir: None, high_dir: None, count: 16, size: 64, seed: 7, degrade: DegradeParams::default() }
    }
}

impl DataConfig {
    pub fn load<T: Scalar>(&self) -> Result<Vec<ImagePair<T>>> {
        match (&self.low_dir, &self.high_dir) {
            (Some(low), Some(high)) => load_pairs(low, high)?.materialize(),
            (None, None) => synthetic_pairs(self.count, self.size, self.seed, &self.degrade),
            _ => Err(Error::Config("data.low_dir and data.high_dir must be given together".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// `(step, multiplier)` milestones, applied cumulatively. `None` halves at 50% and 75%.
    pub schedule: Option<Vec<(u64, f64)>>,
    pub max_steps: u64,
    pub seed: u64,
    /// Square training crop, a multiple of 16 (clamped to the smallest image).
    pub crop: usize,
    pub log_every: u64,
    /// Periodic checkpoint interval; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Interval of training-set evaluations used for early stopping; 0 disables them.
    pub eval_every: u64,
    /// Stop once the training-set mean PSNR reaches this value (and the colour target holds).
    pub stop_psnr: Option<f64>,
    pub stop_delta_e: Option<f64>,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            schedule: None,
            max_steps: 2000,
            seed: 0,
            crop: 64,
            log_every: 50,
            checkpoint_every: 500,
            eval_every: 0,
            stop_psnr: None,
            stop_delta_e: None,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses TOML; unknown keys and type errors are reported with their location.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if let Some(s) = &self.schedule {
            if s.windows(2).any(|w| w[1].0 <= w[0].0) {
                return fail("schedule steps must be strictly increasing".into());
            }
            if s.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
                return fail("schedule multipliers must be positive".into());
            }
        }
        if self.max_steps == 0 {
            return fail("max_steps must be at least 1".into());
        }
        if self.crop == 0 || self.crop % SIZE_MULTIPLE != 0 {
            return fail(format!("crop {} must be a positive multiple of {SIZE_MULTIPLE}", self.crop));
        }
        self.model.validate()?;
        self.weights.validate()?;
        self.data.degrade.validate()
    }

    pub fn milestones(&self) -> Vec<(u64, f64)> {
        self.schedule.clone().unwrap_or_else(|| vec![(self.max_steps / 2, 0.5), (self.max_steps * 3 / 4, 0.5)])
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.milestones().iter().filter(|&&(s, _)| step >= s).fold(self.lr, |lr, &(_, m)| lr * m)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

/// Stateful optimizer loop over an in-memory pair set.
pub struct Trainer<T> {
    config: TrainConfig,
    model: Bcnet<T>,
    optimizer: Adam<T>,
    gamut: ColorGamut,
    extractor: FeatureExtractor<T>,
    pairs: Vec<ImagePair<T>>,
    crop: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, pairs: Vec<ImagePair<T>>, gamut: ColorGamut) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let smallest = pairs.iter().map(|p| p.low.height().min(p.low.width())).min().unwrap_or(0);
        let crop = config.crop.min(smallest / SIZE_MULTIPLE * SIZE_MULTIPLE);
        if crop == 0 {
            return Err(Error::Validation(format!("images must be at least {SIZE_MULTIPLE} pixels on each side")));
        }
        let model = Bcnet::new(config.model, gamut.len(), config.seed)?;
        Ok(Trainer {
            optimizer: Adam::new(config.adam()),
            extractor: FeatureExtractor::seeded(3, EXTRACTOR_SEED),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
            order: Vec::new(),
            cursor: 0,
            config,
            model,
            gamut,
            pairs,
            crop,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Bcnet<T> {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    pub fn pairs(&self) -> &[ImagePair<T>] {
        &self.pairs
    }

    /// Updates applied so far.
    pub fn steps_done(&self) -> u64 {
        self.optimizer.step
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.pairs.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn next_batch(&mut self) -> Result<Vec<ImagePair<T>>> {
        (0..self.config.batch_size)
            .map(|_| {
                let i = self.next_index();
                let seed = self.rng.random();
                augment(&self.pairs[i], self.crop, seed)
            })
            .collect()
    }

    /// One forward/backward/update. On error the weights are left untouched.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.optimizer.step;
        let lr = self.config.lr_at(step);
        self.optimizer.lr = lr;
        let batch = self.next_batch()?;
        let lows: Vec<_> = batch.iter().map(|p| p.low.clone()).collect();
        let highs: Vec<_> = batch.iter().map(|p| p.normal.clone()).collect();
        let input = batch_input(&lows)?;
        let truth = batch_input(&highs)?;
        let classes = if self.model.has_class_head() && self.config.weights.class > 0.0 {
            Some(class_targets(&truth.chroma, &self.gamut)?)
        } else {
            None
        };
        let targets = Targets { rgb: truth.rgb, lightness: truth.lightness, chroma: truth.chroma, classes };
        let mut g = Graph::new();
        let (total, loss) = match self.model.forward(&mut g, &input)? {
            Outputs::Decoupled { lightness, chroma, logits } => {
                objective(&mut g, lightness, chroma, logits, &targets, &self.config.weights, &self.extractor)?
            }
            Outputs::Fused { rgb } => objective_rgb(&mut g, rgb, &targets, &self.config.weights, &self.extractor)?,
        };
        let grads = g.param_grads(&g.backward(total));
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", self.model.params().name(*id))));
        }
        self.optimizer.update(self.model.params_mut(), &grads);
        Ok(StepRecord { step, lr, loss })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            step: self.optimizer.step,
            train_config: serde_json::to_value(&self.config).ok(),
            optimizer: Some(self.optimizer.clone()),
            ..Checkpoint::new(self.model.clone(), &self.gamut)
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint<T> {
        self.checkpoint()
    }
}

/// Enhances every low-light image and scores it against its reference.
pub fn evaluate<T: Scalar>(model: &Bcnet<T>, pairs: &[ImagePair<T>], dump: Option<&Path>) -> Result<EvalReport> {
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.enhance(&p.low, &Default::default())?.rgb;
        if let Some(dir) = dump {
            write_png(&out, &dir.join(format!("{}.png", p.id)), BitDepth::Eight)?;
        }
        rows.push(ImageScores::compute(&p.id, &out, &p.normal)?);
    }
    Ok(EvalReport::from_rows(rows))
}

/// Scores the low-light inputs themselves against the references (a pass-through model).
pub fn evaluate_passthrough<T: Scalar>(pairs: &[ImagePair<T>]) -> Result<EvalReport> {
    let rows = pairs.iter().map(|p| ImageScores::compute(&p.id, &p.low, &p.normal)).collect::<Result<_>>()?;
    Ok(EvalReport::from_rows(rows))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub steps_run: u64,
    pub final_lr: f64,
    pub stopped_early: bool,
    pub first_loss: f64,
    pub last_loss: f64,
    pub parameters: usize,
    pub eval: Option<EvalReport>,
}

pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<StepRecord>,
    pub summary: RunSummary,
}

fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut s = format!("step,lr,total,{}\n", TERM_NAMES.join(","));
    for r in history {
        let terms: Vec<String> = r.loss.terms.iter().map(|v| format!("{v:.6e}")).collect();
        s.push_str(&format!("{},{:e},{:.6e},{}\n", r.step, r.lr, r.loss.total, terms.join(",")));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs the full loop. With `out`, writes checkpoints, `loss.csv` and `run.json` there.
pub fn train<T: Scalar>(
    config: TrainConfig,
    pairs: Vec<ImagePair<T>>,
    gamut: ColorGamut,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(config.clone(), pairs, gamut)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut history = Vec::new();
    let mut eval = None;
    let mut stopped_early = false;
    let wants_stop = config.stop_psnr.is_some() || config.stop_delta_e.is_some();
    while trainer.steps_done() < config.max_steps {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let (Error::NonFinite(_), Some(dir)) = (&e, out) {
                    trainer.checkpoint().save(&dir.join("last_good.ckpt"))?;
                    write_loss_csv(&dir.join("loss.csv"), &history)?;
                }
                return Err(e);
            }
        };
        let done = trainer.steps_done();
        if config.log_every > 0 && (record.step % config.log_every == 0 || done == config.max_steps) {
            log::info!("step {:>5} lr {:.2e} loss {:.5}", record.step, record.lr, record.loss.total);
        }
        history.push(record);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                trainer.checkpoint().save(&dir.join("checkpoints").join(format!("step_{done}.ckpt")))?;
            }
        }
        if wants_stop && config.eval_every > 0 && done % config.eval_every == 0 && done < config.max_steps {
            let report = evaluate(trainer.model(), trainer.pairs(), None)?;
            log::info!("step {done}: train PSNR {:.2} dB, dE {:.2}", report.mean.psnr, report.mean.delta_e);
            let psnr_ok = config.stop_psnr.is_none_or(|t| report.mean.psnr >= t);
            let de_ok = config.stop_delta_e.is_none_or(|t| report.mean.delta_e <= t);
            eval = Some(report);
            if psnr_ok && de_ok {
                stopped_early = true;
                break;
            }
        }
    }
    if !stopped_early {
        eval = Some(evaluate(trainer.model(), trainer.pairs(), None)?);
    }
    let summary = RunSummary {
        config,
        steps_run: trainer.steps_done(),
        final_lr: trainer.optimizer().lr,
        stopped_early,
        first_loss: history.first().map_or(f64::NAN, |r| r.loss.total),
        last_loss: history.last().map_or(f64::NAN, |r| r.loss.total),
        parameters: trainer.model().num_parameters(),
        eval,
    };
    let checkpoint = trainer.into_checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join("final.ckpt"))?;
        write_loss_csv(&dir.join("loss.csv"), &history)?;
        std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(TrainOutcome { checkpoint, history, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoDecouple,
    NoShare,
    NoLam,
    NoCem,
    NoLq,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoDecouple, Ablation::NoShare, Ablation::NoLam, Ablation::NoCem, Ablation::NoLq];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDecouple => "no_decouple",
            Ablation::NoShare => "no_share",
            Ablation::NoLam => "no_lam",
            Ablation::NoCem => "no_cem",
            Ablation::NoLq => "no_lq",
        }
    }

    /// The variant of `base` with this component removed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Ablation::NoDecouple => c.model.decouple = false,
            Ablation::NoShare => c.model.shared_encoder = false,
            Ablation::NoLam => c.model.use_lam = false,
            Ablation::NoCem => c.model.use_cem = false,
            Ablation::NoLq => {
                c.model.use_class_head = false;
                c.weights.class = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

pub struct AblationOutcome<T> {
    pub ablation: Ablation,
    pub outcome: TrainOutcome<T>,
    pub parameters: usize,
    pub baseline_parameters: usize,
    pub encoder_parameters: usize,
    pub baseline_encoder_parameters: usize,
}

/// Trains and evaluates one ablated variant, logging parameter counts against the baseline.
pub fn ablation_run<T: Scalar>(
    ablation: Ablation,
    base: &TrainConfig,
    pairs: Vec<ImagePair<T>>,
    gamut: ColorGamut,
    out: Option<&Path>,
) -> Result<AblationOutcome<T>> {
    let baseline = Bcnet::<T>::new(base.model, gamut.len(), base.seed)?;
    let config = ablation.apply(base);
    let outcome = train(config, pairs, gamut, out)?;
    let model = &outcome.checkpoint.model;
    let result = AblationOutcome {
        ablation,
        parameters: model.num_parameters(),
        baseline_parameters: baseline.num_parameters(),
        encoder_parameters: model.encoder_parameters(),
        baseline_encoder_parameters: baseline.encoder_parameters(),
        outcome,
    };
    log::info!(
        "{ablation}: {} parameters ({:+} vs baseline), encoders {} vs {}",
        result.parameters,
        result.parameters as i64 - result.baseline_parameters as i64,
        result.encoder_parameters,
        result.baseline_encoder_parameters
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: steps,
            crop: 16,
            model: ModelConfig { base_channels: 4, ..Default::default() },
            data: DataConfig { count: 3, size: 32, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn default_schedule_halves_twice() {
        let c = TrainConfig::default();
        assert_eq!(c.milestones(), vec![(1000, 0.5), (1500, 0.5)]);
        assert_eq!(c.lr_at(999), 2e-4);
        assert_eq!(c.lr_at(1000), 1e-4);
        assert_eq!(c.lr_at(1999), 5e-5);
    }

    #[test]
    fn config_rejects_bad_values_and_unknown_keys() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { schedule: Some(vec![(10, 0.5), (10, 0.5)]), ..Default::default() }.validate().is_err());
        let err = TrainConfig::from_toml("lr = 1e-4\nbogus = 3\n").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let c = TrainConfig::from_toml("lr = 1e-4\nschedule = [[100, 0.5]]\n[model]\nbase_channels = 8\n").unwrap();
        assert_eq!((c.lr, c.model.base_channels, c.schedule), (1e-4, 8, Some(vec![(100, 0.5)])));
    }

    #[test]
    fn ablations_round_trip_names() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("no_Lq".parse::<Ablation>().unwrap(), Ablation::NoLq);
        let c = Ablation::NoLq.apply(&TrainConfig::default());
        assert!(!c.model.use_class_head && c.weights.class == 0.0);
    }

    #[test]
    fn steps_are_reproducible() {
        let config = tiny(2);
        let pairs: Vec<ImagePair<f32>> = config.data.load().unwrap();
        let run = || {
            let mut t = Trainer::new(config.clone(), pairs.clone(), ColorGamut::shipped()).unwrap();
            let r = (t.step().unwrap(), t.step().unwrap());
            (r, t.model().params().iter().map(|(_, v)| v.clone()).collect::<Vec<_>>())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn train_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { checkpoint_every: 1, ..tiny(2) };
        let pairs: Vec<ImagePair<f32>> = config.data.load().unwrap();
        let out = train(config, pairs, ColorGamut::shipped(), Some(dir.path())).unwrap();
        assert_eq!(out.summary.steps_run, 2);
        for f in ["final.ckpt", "loss.csv", "run.json", "checkpoints/step_1.ckpt", "checkpoints/step_2.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(out.summary.eval.as_ref().unwrap().rows.len(), 3);
    }
}
