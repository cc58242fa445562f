//! Episodic training, evaluation and checkpoints.

use crate::autodiff::Tape;
use crate::dtw::DtwMode;
use crate::episode::{sample_episode, sample_episode_paired, Episode, ImageDataset};
use crate::linalg::Mat;
use crate::model::{self, FusionMode, FusionModel, ModelError, StreamModel, StreamVars};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    pub lambda: f64,
    pub iterations: usize,
    /// Validation episodes per validation pass; 0 disables validation.
    pub val_episodes: usize,
    /// Iterations between validation passes.
    pub val_every: usize,
    /// Test episodes used by evaluation commands.
    pub test_episodes: usize,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// `[H′, W′]` of every signal image.
    pub resolution: [usize; 2],
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub way: usize,
    pub shot: usize,
    /// Queries per class in every episode.
    pub queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay_factor: 0.5,
            decay_every: 200,
            lambda: 0.1,
            iterations: 1000,
            val_episodes: 500,
            val_every: 100,
            test_episodes: 500,
            batch_size: 1,
            seed: 0,
            resolution: [32, 32],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            way: 5,
            shot: 1,
            queries: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.learning_rate) || !pos(self.decay_factor) || !pos(self.epsilon) {
            return bad("learning_rate, decay_factor and epsilon must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.decay_every == 0 || self.val_every == 0 || self.batch_size == 0 {
            return bad("decay_every, val_every and batch_size must be >= 1");
        }
        if self.way == 0 || self.shot == 0 || self.queries == 0 {
            return bad("way, shot and queries must be >= 1");
        }
        if self.resolution.contains(&0) {
            return bad("resolution must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((it / self.decay_every) as i32)
    }
}

/// Adaptive-moment optimizer state for one list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Mat>, grads: &[Mat], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                let gi = g.values()[i];
                let mi = self.beta1 * m.values()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.values()[i] + (1.0 - self.beta2) * gi * gi;
                m.values_mut()[i] = mi;
                v.values_mut()[i] = vi;
                p.values_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based.
    pub iteration: usize,
    /// Sum of the stream losses.
    pub loss: f64,
    pub lr: f64,
    /// Training-query accuracy over the last [`RUNNING_WINDOW`] iterations.
    pub running_accuracy: f64,
}

pub const RUNNING_WINDOW: usize = 50;

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,loss,lr,running_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.loss, r.lr, r.running_accuracy);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    /// Parameters with the best validation accuracy, with that accuracy and
    /// the iteration it was reached.
    pub best: Option<(FusionModel, f64, usize)>,
    pub history: Vec<HistoryRow>,
}

fn step_stream(
    stream: &mut StreamModel,
    adam: &mut Adam,
    episodes: &[Episode<'_>],
    lambda: f64,
    lr: f64,
    iteration: usize,
) -> Result<(f64, Vec<Vec<Vec<f64>>>), TrainError> {
    let mut tape = Tape::new();
    let vars = StreamVars::register(&mut tape, stream, true);
    let rec = match model::matching_loss_on_tape(&mut tape, stream, &vars, episodes, lambda, stream.training_mode()) {
        Err(e) if e.is_non_finite() => return Err(TrainError::NonFiniteLoss { iteration }),
        other => other?,
    };
    let loss = tape.scalar(rec.loss);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { iteration });
    }
    let grads = tape.backward(rec.loss).map_err(|e| match ModelError::from(e) {
        e if e.is_non_finite() => TrainError::NonFiniteLoss { iteration },
        e => e.into(),
    })?;
    let g: Vec<Mat> = vars
        .trainable
        .iter()
        .map(|&v| grads.get(v).cloned().expect("trainable leaf has a gradient"))
        .collect();
    if g.iter().any(|m| !m.is_finite()) {
        return Err(TrainError::NonFiniteLoss { iteration });
    }
    adam.update(stream.params_mut(), &g, lr);
    Ok((loss, rec.probabilities))
}

/// Trains every stream of `template` on episodes from `train_set`.
///
/// Late-fusion streams see the same episodes but are optimized independently.
/// When `val_set` is given and `cfg.val_episodes > 0`, the model is evaluated
/// every `cfg.val_every` iterations and after the last one.
pub fn train(
    train_set: &ImageDataset,
    val_set: Option<&ImageDataset>,
    cfg: &TrainConfig,
    template: &FusionModel,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    template.validate()?;
    let mut model = template.clone();
    let mut optim: Vec<Adam> = model
        .streams()
        .iter()
        .map(|s| {
            let shapes: Vec<_> = s.params().iter().map(|m| m.shape()).collect();
            Adam::new(&shapes, cfg.beta1, cfg.beta2, cfg.epsilon)
        })
        .collect();
    let mut episode_rng = rng::stream(cfg.seed, "episodes");
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut window: VecDeque<(usize, usize)> = VecDeque::new();
    let mut best: Option<(FusionModel, f64, usize)> = None;
    let val_seed = rng::sub_seed(cfg.seed, "validation");

    for it in 0..cfg.iterations {
        let iteration = it + 1;
        let lr = cfg.learning_rate_at(it);
        let episodes = (0..cfg.batch_size)
            .map(|_| sample_episode(train_set, cfg.way, cfg.shot, cfg.queries, &mut episode_rng))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let mut total = 0.0;
        let mut per_stream = Vec::new();
        for (stream, adam) in model.streams_mut().into_iter().zip(&mut optim) {
            let (loss, probs) = step_stream(stream, adam, &episodes, cfg.lambda, lr, iteration)?;
            total += loss;
            per_stream.push(probs);
        }
        let (mut correct, mut seen) = (0, 0);
        for (e, ep) in episodes.iter().enumerate() {
            for (q, item) in ep.query.iter().enumerate() {
                let pj = &per_stream[0][e][q];
                let pred = match per_stream.get(1) {
                    Some(pa) if model.mode == FusionMode::Late => model::late_fuse(pj, &pa[e][q], model.alpha)?.1,
                    _ => model::argmax(pj),
                };
                correct += usize::from(pred == item.target);
                seen += 1;
            }
        }
        window.push_back((correct, seen));
        if window.len() > RUNNING_WINDOW {
            window.pop_front();
        }
        let (c, n) = window.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        history.push(HistoryRow {
            iteration,
            loss: total,
            lr,
            running_accuracy: c as f64 / n as f64,
        });
        if iteration % 50 == 0 {
            log::info!("iteration {iteration}: loss {total:.5}, running accuracy {:.3}", c as f64 / n as f64);
        }

        if let Some(val) = val_set.filter(|_| cfg.val_episodes > 0) {
            if iteration % cfg.val_every == 0 || iteration == cfg.iterations {
                let opts = EvalOptions {
                    episodes: cfg.val_episodes,
                    way: cfg.way,
                    shot: cfg.shot,
                    queries: cfg.queries,
                    seed: val_seed,
                    threads: None,
                };
                let report = evaluate(val, &model, &opts).map_err(|e| match e {
                    e if e.is_non_finite() => TrainError::NonFiniteLoss { iteration },
                    e => e.into(),
                })?;
                log::info!("iteration {iteration}: validation accuracy {:.4}", report.accuracy);
                if best.as_ref().is_none_or(|b| report.accuracy > b.1) {
                    best = Some((model.clone(), report.accuracy, iteration));
                }
            }
        }
    }
    Ok(TrainOutcome { model, best, history })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    /// Worker cap; `None` uses every available core.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub queries: usize,
    pub correct: usize,
    /// Mean per-episode Top-1 accuracy.
    pub accuracy: f64,
    /// Half-width of the normal-approximation 95% interval of `accuracy`.
    pub ci95: f64,
    /// Dataset labels indexing the confusion matrix.
    pub classes: Vec<u32>,
    /// `confusion[true][predicted]` query counts.
    pub confusion: Vec<Vec<u64>>,
}

struct EpisodeOutcome {
    /// `(true label, predicted label)` per query.
    pairs: Vec<(u32, u32)>,
}

fn run_episode(
    support: &ImageDataset,
    query: &ImageDataset,
    model: &FusionModel,
    opts: &EvalOptions,
    index: usize,
) -> Result<EpisodeOutcome, ModelError> {
    let mut r = rng::rng_from_seed(rng::indexed_seed(opts.seed, index as u64));
    let ep = sample_episode_paired(support, query, opts.way, opts.shot, opts.queries, &mut r)?;
    let preds = model.predict(&ep, DtwMode::Hard)?;
    Ok(EpisodeOutcome {
        pairs: ep
            .query
            .iter()
            .zip(&preds)
            .map(|(q, p)| (q.sample.label, ep.classes[p.class]))
            .collect(),
    })
}

#[cfg(feature = "parallel")]
fn run_all(
    support: &ImageDataset,
    query: &ImageDataset,
    model: &FusionModel,
    opts: &EvalOptions,
) -> Result<Vec<EpisodeOutcome>, ModelError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    pool.install(|| {
        (0..opts.episodes)
            .into_par_iter()
            .map(|i| run_episode(support, query, model, opts, i))
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn run_all(
    support: &ImageDataset,
    query: &ImageDataset,
    model: &FusionModel,
    opts: &EvalOptions,
) -> Result<Vec<EpisodeOutcome>, ModelError> {
    (0..opts.episodes)
        .map(|i| run_episode(support, query, model, opts, i))
        .collect()
}

/// Top-1 accuracy over `opts.episodes` hard-DTW episodes. Episode `i` is
/// drawn from its own seed, so the result does not depend on thread count.
pub fn evaluate(dataset: &ImageDataset, model: &FusionModel, opts: &EvalOptions) -> Result<EvalReport, ModelError> {
    evaluate_paired(dataset, dataset, model, opts)
}

/// [`evaluate`] with supports from `support` and queries from `query`; see
/// [`sample_episode_paired`].
pub fn evaluate_paired(
    support: &ImageDataset,
    query: &ImageDataset,
    model: &FusionModel,
    opts: &EvalOptions,
) -> Result<EvalReport, ModelError> {
    model.validate()?;
    if opts.episodes == 0 {
        return Err(ModelError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let outcomes = run_all(support, query, model, opts)?;
    let classes = support.class_ids();
    let mut confusion = vec![vec![0u64; classes.len()]; classes.len()];
    let pos = |l: u32| classes.binary_search(&l).expect("label from dataset");
    let (mut correct, mut queries) = (0, 0);
    let mut per_episode = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let c = o.pairs.iter().filter(|(t, p)| t == p).count();
        for &(t, p) in &o.pairs {
            confusion[pos(t)][pos(p)] += 1;
        }
        correct += c;
        queries += o.pairs.len();
        per_episode.push(c as f64 / o.pairs.len() as f64);
    }
    let n = per_episode.len() as f64;
    let accuracy = per_episode.iter().sum::<f64>() / n;
    let ci95 = if per_episode.len() > 1 {
        let var = per_episode.iter().map(|a| (a - accuracy).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        episodes: outcomes.len(),
        queries,
        correct,
        accuracy,
        ci95,
        classes,
        confusion,
    })
}

pub const CHECKPOINT_FORMAT: &str = "sigshot-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub resolution: [usize; 2],
    pub model: FusionModel,
}

impl Checkpoint {
    pub fn new(model: FusionModel, resolution: [usize; 2]) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            resolution,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_str(s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        if c.model.image_height() != c.resolution[0] {
            return Err(TrainError::Checkpoint("encoder height disagrees with resolution".into()));
        }
        c.model.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::Sample;
    use crate::model::ModelConfig;
    use crate::sig::{ImageKind, SignalImage};
    use rand::Rng as _;

    /// Classes whose images are noisy copies of a class template.
    fn template_dataset(classes: u32, per_class: usize, h: usize, w: usize, seed: u64) -> ImageDataset {
        let mut r = rng::rng_from_seed(seed);
        let mut samples = Vec::new();
        for c in 1..=classes {
            let base: Vec<u8> = (0..h * w * 3).map(|_| r.random()).collect();
            for i in 0..per_class {
                let px: Vec<u8> = base.iter().map(|&b| b.saturating_add(r.random_range(0..20))).collect();
                let img = SignalImage::new(h, w, ImageKind::Position, px).unwrap();
                samples.push(Sample {
                    id: format!("{c}_{i}"),
                    label: c,
                    position: Some(img),
                    orientation: None,
                    fused: None,
                });
            }
        }
        ImageDataset::from_samples(samples)
    }

    fn tiny() -> (TrainConfig, FusionModel) {
        let cfg = TrainConfig {
            iterations: 6,
            val_episodes: 0,
            way: 3,
            resolution: [3, 5],
            ..TrainConfig::default()
        };
        let mcfg = ModelConfig {
            mode: FusionMode::PositionOnly,
            hidden: 5,
            dim: 3,
            ..ModelConfig::default()
        };
        (cfg, FusionModel::init(&mcfg, 3, 4).unwrap())
    }

    #[test]
    fn learning_rate_halves_every_interval() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.001);
        assert_eq!(c.learning_rate_at(199), 0.001);
        assert_eq!(c.learning_rate_at(200), 0.0005);
        assert_eq!(c.learning_rate_at(450), 0.00025);
        assert_eq!(c.lambda, 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Mat::from_rows(&[[1.0, -2.0]]);
        let mut a = Adam::new(&[(1, 2)], 0.9, 0.999, 1e-8);
        a.update(vec![&mut p], &[Mat::from_rows(&[[0.5, -3.0]])], 0.1);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((p[(0, 1)] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = template_dataset(4, 3, 3, 5, 1);
        let (cfg, m) = tiny();
        let a = train(&ds, None, &cfg, &m).unwrap();
        let b = train(&ds, None, &cfg, &m).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_ne!(a.model, m);
        assert_eq!(a.history.len(), 6);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let ds = template_dataset(4, 3, 3, 5, 1);
        let (mut cfg, m) = tiny();
        cfg.learning_rate = 1e300;
        match train(&ds, None, &cfg, &m) {
            Err(TrainError::NonFiniteLoss { iteration }) => assert!(iteration < cfg.iterations),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn validation_tracks_best() {
        let ds = template_dataset(6, 3, 3, 5, 2);
        let [tr, va, _] = ds.split(3, 3, 0).unwrap();
        let (mut cfg, m) = tiny();
        cfg.val_episodes = 4;
        cfg.val_every = 3;
        let out = train(&tr, Some(&va), &cfg, &m).unwrap();
        let (_, acc, it) = out.best.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(it == 3 || it == 6);
    }

    #[test]
    fn evaluation_is_thread_independent() {
        let ds = template_dataset(5, 3, 3, 5, 3);
        let (_, m) = tiny();
        let mut opts = EvalOptions {
            episodes: 12,
            way: 3,
            shot: 1,
            queries: 2,
            seed: 9,
            threads: Some(1),
        };
        let one = evaluate(&ds, &m, &opts).unwrap();
        opts.threads = Some(3);
        assert_eq!(one, evaluate(&ds, &m, &opts).unwrap());
        assert_eq!(one.queries, 72);
        let total: u64 = one.confusion.iter().flatten().sum();
        assert_eq!(total, 72);
    }

    #[test]
    fn zero_encoder_gives_lowest_index_bias() {
        let ds = template_dataset(5, 2, 3, 5, 4);
        let (_, mut m) = tiny();
        for t in m.primary.encoder.tensors_mut() {
            *t = Mat::zeros(t.rows(), t.cols());
        }
        let opts = EvalOptions {
            episodes: 40,
            way: 5,
            shot: 1,
            queries: 1,
            seed: 0,
            threads: None,
        };
        let r = evaluate(&ds, &m, &opts).unwrap();
        // uniform scores: every query is assigned episode class 0
        assert!((r.accuracy - 0.2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips() {
        let (_, m) = tiny();
        let c = Checkpoint::new(m, [3, 5]);
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(Checkpoint::from_json("{\"format\":\"x\"}").is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>("{\"lr\": 1}").is_err());
        let c: TrainConfig = serde_json::from_str("{\"iterations\": 3}").unwrap();
        assert_eq!(c.lambda, 0.1);
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
