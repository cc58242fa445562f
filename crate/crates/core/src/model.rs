//! Stream models, class scoring, the matching objective and late fusion.
//!
//! A stream encodes one kind of signal image. Each episode class is scored
//! by (optionally) cross-attending the query with every support of the class,
//! averaging the attended supports into a prototype, and measuring the
//! normalized DTW distance (or the Frobenius distance) between the attended
//! query and that prototype. Scores are `softmax(−dis)` across classes.

use crate::attention::{self, AttentionError, CsaParams, CsaVars};
use crate::autodiff::{self, AutodiffError, Tape, Var};
use crate::dtw::{self, DtwError, DtwMode};
use crate::encoder::{self, EncoderError, EncoderParams, EncoderVars, Representation};
use crate::episode::{Episode, EpisodeError};
use crate::linalg::Mat;
use crate::rng;
use crate::sig::ImageKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("class {0} has no support embeddings")]
    EmptyClass(usize),
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid model: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Dtw(#[from] DtwError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl ModelError {
    /// True when the error comes from a NaN or infinity in the computation,
    /// wherever it was raised.
    pub fn is_non_finite(&self) -> bool {
        fn tape(e: &AutodiffError) -> bool {
            matches!(
                e,
                AutodiffError::NonFiniteResult { .. } | AutodiffError::Dtw(DtwError::InvalidCost)
            )
        }
        match self {
            ModelError::Autodiff(e) => tape(e),
            ModelError::Encoder(EncoderError::Autodiff(e)) => tape(e),
            ModelError::Attention(AttentionError::Autodiff(e)) => tape(e),
            ModelError::Dtw(DtwError::InvalidCost) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamModel {
    pub input: ImageKind,
    pub encoder: EncoderParams,
    pub csa: CsaParams,
    pub use_csa: bool,
    pub use_dtw: bool,
    /// Soft-min temperature used while training.
    pub gamma: f64,
    pub tau: usize,
}

/// Hyperparameters shared by every stream of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub alpha: f64,
    pub hidden: usize,
    pub dim: usize,
    pub use_csa: bool,
    pub use_dtw: bool,
    pub tie_csa: bool,
    pub gamma: f64,
    pub tau: usize,
    /// Half-width (times `1/√d`) of the uniform perturbation added to the
    /// identity when initializing attention matrices.
    pub csa_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Late,
            alpha: 1.0,
            hidden: 32,
            dim: 16,
            use_csa: true,
            use_dtw: true,
            tie_csa: false,
            gamma: 0.1,
            tau: 1,
            csa_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if self.hidden == 0 || self.dim == 0 {
            return bad("hidden and dim must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.tau == 0 {
            return bad("tau must be >= 1");
        }
        if !(self.csa_init_scale >= 0.0 && self.csa_init_scale.is_finite()) {
            return bad("csa_init_scale must be finite and >= 0");
        }
        Ok(())
    }
}

impl StreamModel {
    pub fn init(cfg: &ModelConfig, input: ImageKind, image_height: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = encoder::init_params(rng::sub_seed(seed, "encoder"), image_height, cfg.hidden, cfg.dim)?;
        let csa = CsaParams::init(rng::sub_seed(seed, "csa"), cfg.dim, cfg.tie_csa, cfg.csa_init_scale);
        Ok(Self {
            input,
            encoder,
            csa,
            use_csa: cfg.use_csa,
            use_dtw: cfg.use_dtw,
            gamma: cfg.gamma,
            tau: cfg.tau,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.csa.validate()?;
        if self.csa.d() != self.encoder.dim() {
            return Err(ModelError::InvalidConfig(format!(
                "encoder emits d = {} but attention expects {}",
                self.encoder.dim(),
                self.csa.d()
            )));
        }
        if self.tau == 0 || !(self.gamma > 0.0) {
            return Err(ModelError::InvalidConfig("tau and gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn training_mode(&self) -> DtwMode {
        DtwMode::Soft { gamma: self.gamma }
    }

    /// Tensors updated by training: the encoder, then the attention
    /// matrices when attention is enabled.
    pub fn params(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.encoder.tensors().to_vec();
        if self.use_csa {
            v.extend(self.csa.tensors());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let use_csa = self.use_csa;
        let mut v: Vec<&mut Mat> = self.encoder.tensors_mut().into_iter().collect();
        if use_csa {
            v.extend(self.csa.tensors_mut());
        }
        v
    }

    pub fn encode(&self, sample: &crate::episode::Sample) -> Result<Representation> {
        Ok(encoder::encode(sample.image(self.input)?, &self.encoder)?)
    }
}

/// Tape handles of a stream's parameters.
#[derive(Debug, Clone)]
pub struct StreamVars {
    pub encoder: EncoderVars,
    pub csa: Option<CsaVars>,
    /// Trainable handles in [`StreamModel::params`] order.
    pub trainable: Vec<Var>,
}

impl StreamVars {
    pub fn register(tape: &mut Tape, stream: &StreamModel, trainable: bool) -> Self {
        let encoder = EncoderVars::register(tape, &stream.encoder, trainable);
        let csa = stream
            .use_csa
            .then(|| CsaVars::register(tape, &stream.csa, trainable));
        let mut list = encoder.all().to_vec();
        if let Some(c) = &csa {
            list.extend(c.all(stream.csa.is_tied()));
        }
        Self {
            encoder,
            csa,
            trainable: list,
        }
    }

    /// Rebuilds the handles from leaves created for [`StreamModel::params`].
    pub fn from_leaves(stream: &StreamModel, v: &[Var]) -> Self {
        let encoder = EncoderVars {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        };
        let csa = stream.use_csa.then(|| {
            let side = |k: usize| attention::SideVars {
                m1: v[k],
                m2: v[k + 1],
                m3: v[k + 2],
            };
            let query = side(4);
            let support = if stream.csa.is_tied() { query } else { side(7) };
            CsaVars { query, support }
        });
        Self {
            encoder,
            csa,
            trainable: v.to_vec(),
        }
    }
}

/// Per-class handles produced while scoring one query.
#[derive(Debug, Clone, Copy)]
pub struct ClassMatch {
    /// Normalized DTW distance or Frobenius distance, `1×1`.
    pub distance: Var,
    /// Attended query, averaged over the class supports.
    pub query: Var,
    /// Attended prototype.
    pub prototype: Var,
    /// Local cost matrix when DTW is on.
    pub cost: Option<Var>,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> autodiff::Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    if vars.len() == 1 {
        Ok(acc)
    } else {
        tape.scale(acc, 1.0 / vars.len() as f64)
    }
}

/// Scores one encoded query against one class's encoded supports on `tape`.
pub fn match_class_on_tape(
    tape: &mut Tape,
    stream: &StreamModel,
    vars: &StreamVars,
    query: Var,
    supports: &[Var],
    mode: DtwMode,
) -> Result<ClassMatch> {
    if supports.is_empty() {
        return Err(ModelError::EmptyClass(0));
    }
    let (q, p) = match &vars.csa {
        Some(csa) => {
            let mut qs = Vec::with_capacity(supports.len());
            let mut ps = Vec::with_capacity(supports.len());
            for &s in supports {
                let out = attention::cross_attend_on_tape(tape, query, s, csa)?;
                qs.push(out.query);
                ps.push(out.support);
            }
            (mean_of(tape, &qs)?, mean_of(tape, &ps)?)
        }
        None => (query, mean_of(tape, supports)?),
    };
    if stream.use_dtw {
        let cost = tape.squared_euclidean_rows(q, p)?;
        let (mq, mp) = tape.shape(cost);
        let raw = tape.dtw(cost, stream.tau, mode)?;
        let distance = tape.scale(raw, 1.0 / mq.max(mp) as f64)?;
        Ok(ClassMatch {
            distance,
            query: q,
            prototype: p,
            cost: Some(cost),
        })
    } else {
        let diff = tape.sub(q, p)?;
        let distance = tape.frobenius_norm(diff)?;
        Ok(ClassMatch {
            distance,
            query: q,
            prototype: p,
            cost: None,
        })
    }
}

/// Per-class mean embeddings. `labels[i]` is the class index of
/// `embeddings[i]` in `0..classes`.
pub fn prototype(embeddings: &[Representation], labels: &[usize], classes: usize) -> Result<Vec<Representation>> {
    if embeddings.len() != labels.len() {
        return Err(ModelError::LengthMismatch(embeddings.len(), labels.len()));
    }
    let mut out = Vec::with_capacity(classes);
    for k in 0..classes {
        let members: Vec<&Representation> = embeddings
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == k)
            .map(|(e, _)| e)
            .collect();
        let Some(first) = members.first() else {
            return Err(ModelError::EmptyClass(k));
        };
        let shape = first.matrix().shape();
        let mut sum = Mat::zeros(shape.0, shape.1);
        for m in &members {
            if m.matrix().shape() != shape {
                return Err(ModelError::Encoder(EncoderError::ShapeMismatch {
                    expected: shape.0,
                    got: m.matrix().shape(),
                }));
            }
            sum.add_assign(m.matrix());
        }
        out.push(Representation::new(sum.scale(1.0 / members.len() as f64)));
    }
    Ok(out)
}

/// `softmax(−dis)`.
pub fn scores_from_distances(dis: &[f64]) -> Vec<f64> {
    let lo = dis.iter().cloned().fold(f64::INFINITY, f64::min);
    let ex: Vec<f64> = dis.iter().map(|d| (lo - d).exp()).collect();
    let total: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / total).collect()
}

/// Class distances of one query. `class_supports[k]` holds the encoded
/// supports of class `k`.
pub fn class_distances(
    query: &Representation,
    class_supports: &[Vec<Representation>],
    stream: &StreamModel,
    mode: DtwMode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = StreamVars::register(&mut tape, stream, false);
    let q = tape.constant(query.matrix().clone());
    class_supports
        .iter()
        .enumerate()
        .map(|(k, supports)| {
            if supports.is_empty() {
                return Err(ModelError::EmptyClass(k));
            }
            let s: Vec<Var> = supports
                .iter()
                .map(|r| tape.constant(r.matrix().clone()))
                .collect();
            let m = match_class_on_tape(&mut tape, stream, &vars, q, &s, mode)?;
            Ok(tape.scalar(m.distance))
        })
        .collect()
}

/// Class probabilities of one query.
pub fn class_scores(
    query: &Representation,
    class_supports: &[Vec<Representation>],
    stream: &StreamModel,
    mode: DtwMode,
) -> Result<Vec<f64>> {
    Ok(scores_from_distances(&class_distances(query, class_supports, stream, mode)?))
}

/// `−(1/(B·m)) Σ ‖U_i‖₂` over every row of every aligned stack in `u`.
pub fn disentanglement_loss(u: &[Mat], batch: usize, m: usize) -> f64 {
    let total: f64 = u
        .iter()
        .flat_map(|stack| (0..stack.rows()).map(move |r| crate::linalg::dot(stack.row(r), stack.row(r)).sqrt()))
        .sum();
    -total / (batch * m) as f64
}

/// The aligned row pairs of an attended query and prototype: the hard warping
/// path of the detached cost when DTW is on, the identity pairing otherwise.
pub fn alignment_pairs(tape: &Tape, stream: &StreamModel, m: &ClassMatch) -> Result<Vec<(usize, usize)>> {
    match m.cost {
        Some(cost) => {
            let e = dtw::CostMatrix::new(tape.value(cost).clone())?;
            let w = dtw::dtw(&e, stream.tau, DtwMode::Hard)?;
            Ok(w.path.unwrap_or_default())
        }
        None => {
            let (mq, mp) = (tape.shape(m.query).0, tape.shape(m.prototype).0);
            if mq != mp {
                return Err(ModelError::LengthMismatch(mq, mp));
            }
            Ok((0..mq).map(|i| (i, i)).collect())
        }
    }
}

/// Sum of `‖[q_i | p_j]‖₂` over the aligned pairs, on `tape`.
pub fn aligned_norm_sum_on_tape(tape: &mut Tape, m: &ClassMatch, pairs: &[(usize, usize)]) -> Result<Var> {
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let q = tape.gather_rows(m.query, &is)?;
    let p = tape.gather_rows(m.prototype, &js)?;
    let u = tape.concat_cols(&[q, p])?;
    let sq = tape.row_sqnorm(u)?;
    let norms = tape.sqrt(sq)?;
    Ok(tape.sum(norms)?)
}

/// Value and tape handle of the matching objective over a batch of episodes.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub loss: Var,
    pub cross_entropy: f64,
    pub disentanglement: f64,
    /// Class probabilities of every query, episode by episode.
    pub probabilities: Vec<Vec<Vec<f64>>>,
}

/// `−(1/Nq) Σ log p(y) + λ·L_d` for one stream over `episodes`.
///
/// `B` in `L_d` is the total number of queries; `m` is the attended query
/// length.
pub fn matching_loss_on_tape(
    tape: &mut Tape,
    stream: &StreamModel,
    vars: &StreamVars,
    episodes: &[Episode<'_>],
    lambda: f64,
    mode: DtwMode,
) -> Result<LossRecord> {
    let mut ce_terms = Vec::new();
    let mut norm_terms = Vec::new();
    let mut probabilities = Vec::with_capacity(episodes.len());
    let mut m_len = 0;
    for ep in episodes {
        let supports: Vec<Vec<Var>> = (0..ep.way)
            .map(|k| {
                ep.supports_of(k)
                    .iter()
                    .map(|s| encoder::encode_image_on_tape(tape, s.sample.image(stream.input)?, &stream.encoder, &vars.encoder).map_err(ModelError::from))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut ep_probs = Vec::with_capacity(ep.query.len());
        for item in &ep.query {
            let img = item.sample.image(stream.input)?;
            let q = encoder::encode_image_on_tape(tape, img, &stream.encoder, &vars.encoder)?;
            let matches = supports
                .iter()
                .map(|s| match_class_on_tape(tape, stream, vars, q, s, mode))
                .collect::<Result<Vec<_>>>()?;
            let dis: Vec<Var> = matches.iter().map(|m| m.distance).collect();
            let dis_values: Vec<f64> = dis.iter().map(|&d| tape.scalar(d)).collect();
            ep_probs.push(scores_from_distances(&dis_values));

            // −log softmax(−dis)_y = dis_y − c + log Σ exp(c − dis_k), c = min dis
            let c = dis_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let row = tape.concat_cols(&dis)?;
            let neg = tape.negate(row)?;
            let shift = tape.constant(Mat::filled(1, dis.len(), c));
            let shifted = tape.add(neg, shift)?;
            let ex = tape.exp(shifted)?;
            let total = tape.sum(ex)?;
            let lse = tape.log(total)?;
            let c_var = tape.constant(Mat::scalar(c));
            let dy = tape.sub(dis[item.target], c_var)?;
            ce_terms.push(tape.add(dy, lse)?);

            if lambda != 0.0 {
                let target = &matches[item.target];
                let pairs = alignment_pairs(tape, stream, target)?;
                m_len = tape.shape(target.query).0;
                norm_terms.push(aligned_norm_sum_on_tape(tape, target, &pairs)?);
            }
        }
        probabilities.push(ep_probs);
    }
    let n_queries = ce_terms.len();
    if n_queries == 0 {
        return Err(ModelError::InvalidConfig("batch has no queries".into()));
    }
    let ce_sum = mean_of(tape, &ce_terms)?;
    let cross_entropy = tape.scalar(ce_sum);
    let (loss, disentanglement) = if norm_terms.is_empty() {
        (ce_sum, 0.0)
    } else {
        let mut acc = norm_terms[0];
        for &t in &norm_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let ld = tape.scale(acc, -1.0 / (n_queries * m_len) as f64)?;
        let weighted = tape.scale(ld, lambda)?;
        (tape.add(ce_sum, weighted)?, tape.scalar(ld))
    };
    Ok(LossRecord {
        loss,
        cross_entropy,
        disentanglement,
        probabilities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    PositionOnly,
    OrientationOnly,
    Early,
    Late,
}

/// `primary` is the position stream in late mode, the fused-image stream in
/// early mode and the only stream otherwise; `secondary` is the orientation
/// stream of late mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub mode: FusionMode,
    pub alpha: f64,
    pub primary: StreamModel,
    pub secondary: Option<StreamModel>,
}

impl FusionModel {
    pub fn init(cfg: &ModelConfig, image_height: usize, seed: u64) -> Result<Self> {
        let seed = rng::sub_seed(seed, "init");
        let input = match cfg.mode {
            FusionMode::PositionOnly | FusionMode::Late => ImageKind::Position,
            FusionMode::OrientationOnly => ImageKind::Orientation,
            FusionMode::Early => ImageKind::Fused,
        };
        let primary = StreamModel::init(cfg, input, image_height, rng::sub_seed(seed, "primary"))?;
        let secondary = (cfg.mode == FusionMode::Late)
            .then(|| StreamModel::init(cfg, ImageKind::Orientation, image_height, rng::sub_seed(seed, "secondary")))
            .transpose()?;
        let model = Self {
            mode: cfg.mode,
            alpha: cfg.alpha,
            primary,
            secondary,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.primary.validate()?;
        if let Some(s) = &self.secondary {
            s.validate()?;
        }
        let expect = match self.mode {
            FusionMode::PositionOnly => (ImageKind::Position, None),
            FusionMode::OrientationOnly => (ImageKind::Orientation, None),
            FusionMode::Early => (ImageKind::Fused, None),
            FusionMode::Late => (ImageKind::Position, Some(ImageKind::Orientation)),
        };
        let got = (self.primary.input, self.secondary.as_ref().map(|s| s.input));
        if got != expect {
            return Err(ModelError::InvalidConfig(format!(
                "{:?} mode expects streams {expect:?}, found {got:?}",
                self.mode
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::InvalidConfig("alpha must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn streams(&self) -> Vec<&StreamModel> {
        std::iter::once(&self.primary).chain(&self.secondary).collect()
    }

    pub fn streams_mut(&mut self) -> Vec<&mut StreamModel> {
        std::iter::once(&mut self.primary).chain(&mut self.secondary).collect()
    }

    /// Image kinds a dataset must provide for this model.
    pub fn required_kinds(&self) -> Vec<ImageKind> {
        self.streams().iter().map(|s| s.input).collect()
    }

    pub fn image_height(&self) -> usize {
        self.primary.encoder.image_height()
    }

    /// Per-query fused scores and predicted class index for one episode.
    pub fn predict(&self, episode: &Episode<'_>, mode: DtwMode) -> Result<Vec<Prediction>> {
        let primary = stream_probabilities(&self.primary, episode, mode)?;
        match &self.secondary {
            Some(sec) if self.mode == FusionMode::Late => {
                let other = stream_probabilities(sec, episode, mode)?;
                primary
                    .iter()
                    .zip(&other)
                    .map(|(pj, pa)| {
                        let (scores, class) = late_fuse(pj, pa, self.alpha)?;
                        Ok(Prediction { scores, class })
                    })
                    .collect()
            }
            _ => Ok(primary
                .into_iter()
                .map(|scores| Prediction {
                    class: argmax(&scores),
                    scores,
                })
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// Episode class index.
    pub class: usize,
}

/// Class probabilities for every query of `episode` under one stream.
pub fn stream_probabilities(stream: &StreamModel, episode: &Episode<'_>, mode: DtwMode) -> Result<Vec<Vec<f64>>> {
    let supports: Vec<Vec<Representation>> = (0..episode.way)
        .map(|k| episode.supports_of(k).iter().map(|s| stream.encode(s.sample)).collect())
        .collect::<Result<_>>()?;
    episode
        .query
        .iter()
        .map(|q| class_scores(&stream.encode(q.sample)?, &supports, stream, mode))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `P_j + α·P_a` and its argmax.
pub fn late_fuse(pj: &[f64], pa: &[f64], alpha: f64) -> Result<(Vec<f64>, usize)> {
    if pj.len() != pa.len() {
        return Err(ModelError::LengthMismatch(pj.len(), pa.len()));
    }
    let fused: Vec<f64> = pj.iter().zip(pa).map(|(j, a)| j + alpha * a).collect();
    let class = argmax(&fused);
    Ok((fused, class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{sample_episode, ImageDataset, Sample};
    use crate::rng::rng_from_seed;
    use crate::sig::SignalImage;
    use rand::Rng as _;

    fn rep(seed: u64, m: usize, d: usize) -> Representation {
        let mut r = rng_from_seed(seed);
        Representation::new(Mat::from_fn(m, d, |_, _| r.random_range(-1.0..1.0)))
    }

    fn small_cfg(use_csa: bool, use_dtw: bool) -> ModelConfig {
        ModelConfig {
            mode: FusionMode::PositionOnly,
            hidden: 6,
            dim: 3,
            use_csa,
            use_dtw,
            ..ModelConfig::default()
        }
    }

    fn noise_dataset(classes: u32, per_class: usize, h: usize, w: usize, seed: u64) -> ImageDataset {
        let mut r = rng_from_seed(seed);
        let mut samples = Vec::new();
        for c in 1..=classes {
            for i in 0..per_class {
                let px: Vec<u8> = (0..h * w * 3).map(|_| r.random()).collect();
                let img = SignalImage::new(h, w, ImageKind::Position, px).unwrap();
                samples.push(Sample {
                    id: format!("{c}_{i}"),
                    label: c,
                    orientation: Some(SignalImage::new(h, w, ImageKind::Orientation, img.pixels().to_vec()).unwrap()),
                    position: Some(img),
                    fused: None,
                });
            }
        }
        ImageDataset::from_samples(samples)
    }

    #[test]
    fn prototype_examples() {
        let e = rep(1, 3, 2);
        let p = prototype(&[e.clone()], &[0], 1).unwrap();
        assert_eq!(p[0], e);
        let neg = Representation::new(e.matrix().scale(-1.0));
        let p = prototype(&[e.clone(), neg], &[0, 0], 1).unwrap();
        assert_eq!(p[0].matrix(), &Mat::zeros(3, 2));
        assert!(matches!(prototype(&[e], &[1], 2), Err(ModelError::EmptyClass(0))));
    }

    #[test]
    fn prototype_matches_direct_mean() {
        let es: Vec<Representation> = (0..3).map(|s| rep(s, 4, 3)).collect();
        let p = prototype(&es, &[0, 0, 0], 1).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let direct = (es[0].matrix()[(r, c)] + es[1].matrix()[(r, c)] + es[2].matrix()[(r, c)]) / 3.0;
                assert!((p[0].matrix()[(r, c)] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_distances_split_evenly() {
        let s = StreamModel::init(&small_cfg(false, true), ImageKind::Position, 2, 0).unwrap();
        let q = rep(1, 4, 3);
        let sup = rep(2, 4, 3);
        let p = class_scores(&q, &[vec![sup.clone()], vec![sup]], &s, DtwMode::Hard).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_support_wins() {
        let s = StreamModel::init(&small_cfg(false, true), ImageKind::Position, 2, 0).unwrap();
        let q = rep(1, 4, 3);
        let d = class_distances(&q, &[vec![q.clone()], vec![rep(2, 4, 3)]], &s, DtwMode::Hard).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(d[1] > 0.0);
        let p = scores_from_distances(&d);
        assert!((p[0] - 1.0 / (1.0 + (-d[1]).exp())).abs() < 1e-15);
        assert!(p[0] > 0.5);
    }

    #[test]
    fn probabilities_form_a_simplex() {
        for (csa, dtw_on) in [(true, true), (true, false), (false, true), (false, false)] {
            let s = StreamModel::init(&small_cfg(csa, dtw_on), ImageKind::Position, 2, 7).unwrap();
            for seed in 0..5 {
                let q = rep(seed, 5, 3);
                let sup: Vec<Vec<Representation>> =
                    (0..4).map(|k| vec![rep(100 + seed * 10 + k, 5, 3), rep(200 + k, 5, 3)]).collect();
                let p = class_scores(&q, &sup, &s, DtwMode::Soft { gamma: 0.1 }).unwrap();
                let total: f64 = p.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn disentanglement_examples() {
        assert_eq!(disentanglement_loss(&[Mat::zeros(3, 4)], 1, 3), 0.0);
        let u = Mat::from_rows(&[[3.0, 0.0], [0.0, 4.0]]);
        assert_eq!(disentanglement_loss(&[u], 1, 2), -3.5);
    }

    #[test]
    fn disentanglement_gradient_at_zero_row_is_zero() {
        let mut t = Tape::new();
        let q = t.leaf(Mat::from_rows(&[[0.0, 0.0], [1.0, 2.0]]), true);
        let p = t.leaf(Mat::from_rows(&[[0.0, 0.0], [2.0, 1.0]]), true);
        let m = ClassMatch {
            distance: q,
            query: q,
            prototype: p,
            cost: None,
        };
        let s = aligned_norm_sum_on_tape(&mut t, &m, &[(0, 0), (1, 1)]).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(q).unwrap().row(0), &[0.0, 0.0]);
        assert_eq!(g.get(p).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn late_fuse_examples() {
        let (f, c) = late_fuse(&[0.6, 0.4], &[0.2, 0.8], 1.0).unwrap();
        assert!((f[0] - 0.8).abs() < 1e-15 && (f[1] - 1.2).abs() < 1e-15);
        assert_eq!(c, 1);
        let (f, c) = late_fuse(&[0.3, 0.7], &[0.9, 0.1], 0.0).unwrap();
        assert_eq!((f, c), (vec![0.3, 0.7], 1));
        let (_, c) = late_fuse(&[0.3, 0.5, 0.2], &[1.0 / 3.0; 3], 1.0).unwrap();
        assert_eq!(c, 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert!(matches!(late_fuse(&[1.0], &[1.0, 2.0], 1.0), Err(ModelError::LengthMismatch(1, 2))));
    }

    #[test]
    fn uniform_predictor_loss_is_ln_n() {
        let ds = noise_dataset(5, 2, 2, 4, 1);
        let mut s = StreamModel::init(&small_cfg(false, true), ImageKind::Position, 2, 0).unwrap();
        for m in s.encoder.tensors_mut() {
            *m = Mat::zeros(m.rows(), m.cols());
        }
        let ep = sample_episode(&ds, 5, 1, 1, &mut rng_from_seed(0)).unwrap();
        let mut t = Tape::new();
        let vars = StreamVars::register(&mut t, &s, true);
        let rec = matching_loss_on_tape(&mut t, &s, &vars, &[ep], 0.0, s.training_mode()).unwrap();
        assert!((t.scalar(rec.loss) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_below() {
        let ds = noise_dataset(4, 3, 3, 4, 2);
        for lambda in [0.0, 0.1, 1.0] {
            let s = StreamModel::init(&small_cfg(true, true), ImageKind::Position, 3, 3).unwrap();
            let ep = sample_episode(&ds, 3, 1, 2, &mut rng_from_seed(9)).unwrap();
            let mut t = Tape::new();
            let vars = StreamVars::register(&mut t, &s, true);
            let rec = matching_loss_on_tape(&mut t, &s, &vars, &[ep], lambda, s.training_mode()).unwrap();
            let loss = t.scalar(rec.loss);
            assert!(rec.cross_entropy >= 0.0);
            assert!(loss >= lambda * rec.disentanglement - 1e-12);
            assert!((loss - (rec.cross_entropy + lambda * rec.disentanglement)).abs() < 1e-12);
        }
    }

    #[test]
    fn on_tape_probabilities_match_class_scores() {
        let ds = noise_dataset(3, 2, 3, 5, 4);
        let s = StreamModel::init(&small_cfg(true, true), ImageKind::Position, 3, 5).unwrap();
        let ep = sample_episode(&ds, 3, 1, 1, &mut rng_from_seed(2)).unwrap();
        let mut t = Tape::new();
        let vars = StreamVars::register(&mut t, &s, false);
        let rec = matching_loss_on_tape(&mut t, &s, &vars, std::slice::from_ref(&ep), 0.1, s.training_mode()).unwrap();
        let direct = stream_probabilities(&s, &ep, s.training_mode()).unwrap();
        for (a, b) in rec.probabilities[0].iter().flatten().zip(direct.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_matches_position_stream() {
        let ds = noise_dataset(5, 2, 3, 4, 6);
        let cfg = ModelConfig {
            mode: FusionMode::Late,
            alpha: 0.0,
            ..small_cfg(true, true)
        };
        let model = FusionModel::init(&cfg, 3, 1).unwrap();
        let ep = sample_episode(&ds, 5, 1, 1, &mut rng_from_seed(8)).unwrap();
        let fused = model.predict(&ep, DtwMode::Hard).unwrap();
        let pos = stream_probabilities(&model.primary, &ep, DtwMode::Hard).unwrap();
        for (f, p) in fused.iter().zip(&pos) {
            assert_eq!(&f.scores, p);
            assert_eq!(f.class, argmax(p));
        }
    }

    #[test]
    fn full_loss_passes_grad_check() {
        let ds = noise_dataset(2, 2, 2, 4, 10);
        let s = StreamModel::init(&small_cfg(true, true), ImageKind::Position, 2, 11).unwrap();
        let ep = sample_episode(&ds, 2, 1, 1, &mut rng_from_seed(1)).unwrap();
        let params: Vec<Mat> = s.params().into_iter().cloned().collect();
        let r = autodiff::grad_check(
            |t, v| {
                let vars = StreamVars::from_leaves(&s, v);
                let rec = matching_loss_on_tape(t, &s, &vars, std::slice::from_ref(&ep), 0.1, s.training_mode())
                    .map_err(|e| match e {
                        ModelError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                Ok(rec.loss)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mode_stream_mismatch_is_rejected() {
        let mut m = FusionModel::init(&ModelConfig { hidden: 4, dim: 3, ..ModelConfig::default() }, 2, 0).unwrap();
        assert_eq!(m.required_kinds(), vec![ImageKind::Position, ImageKind::Orientation]);
        m.mode = FusionMode::Early;
        assert!(m.validate().is_err());
    }
}
