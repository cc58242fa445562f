//! Image datasets and N-way K-shot episode sampling.

use crate::rng::Rng;
use crate::sig::{self, ImageKind, SigError, SignalImage};
use crate::skeleton::{BoneTopology, SkeletonSequence};
use rand::seq::index;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("episode needs {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} instances, episode needs {needed}")]
    InsufficientInstances {
        class: u32,
        needed: usize,
        available: usize,
    },
    #[error("way, shot and query count must all be >= 1")]
    InvalidShape,
    #[error("sequence {0} has no label")]
    MissingLabel(String),
    #[error("sample {id} has no {kind} image")]
    MissingImage { id: String, kind: &'static str },
    #[error("support and query pools disagree on class {0}")]
    PoolMismatch(u32),
    #[error("{id}: {source}")]
    Image { id: String, source: SigError },
}

/// One sequence rendered to fixed-size signal images.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: u32,
    pub position: Option<SignalImage>,
    pub orientation: Option<SignalImage>,
    pub fused: Option<SignalImage>,
}

impl Sample {
    /// Renders `seq` to the requested kinds at `resolution = (H′, W′)`.
    pub fn render(
        id: &str,
        seq: &SkeletonSequence,
        topo: &BoneTopology,
        resolution: (usize, usize),
        kinds: &[ImageKind],
    ) -> Result<Self, EpisodeError> {
        let label = seq
            .label
            .ok_or_else(|| EpisodeError::MissingLabel(id.to_string()))?;
        let wrap = |source: SigError| EpisodeError::Image {
            id: id.to_string(),
            source,
        };
        let (h, w) = resolution;
        let want = |k: ImageKind| kinds.contains(&k);
        let raw_pos = (want(ImageKind::Position) || want(ImageKind::Fused))
            .then(|| sig::position_image(seq));
        let raw_ori = if want(ImageKind::Orientation) || want(ImageKind::Fused) {
            Some(sig::orientation_image(seq, topo).map_err(wrap)?)
        } else {
            None
        };
        let resize = |img: &Option<SignalImage>, k: ImageKind| -> Result<_, EpisodeError> {
            match img {
                Some(i) if want(k) => Ok(Some(sig::resize_bilinear(i, h, w).map_err(wrap)?)),
                _ => Ok(None),
            }
        };
        let fused = match (&raw_pos, &raw_ori) {
            (Some(p), Some(o)) if want(ImageKind::Fused) => {
                Some(sig::early_fuse(p, o, h, w).map_err(wrap)?)
            }
            _ => None,
        };
        Ok(Self {
            id: id.to_string(),
            label,
            position: resize(&raw_pos, ImageKind::Position)?,
            orientation: resize(&raw_ori, ImageKind::Orientation)?,
            fused,
        })
    }

    pub fn image(&self, kind: ImageKind) -> Result<&SignalImage, EpisodeError> {
        let img = match kind {
            ImageKind::Position => &self.position,
            ImageKind::Orientation => &self.orientation,
            ImageKind::Fused => &self.fused,
        };
        img.as_ref().ok_or_else(|| EpisodeError::MissingImage {
            id: self.id.clone(),
            kind: kind.as_str(),
        })
    }
}

/// Samples grouped by class, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageDataset {
    classes: BTreeMap<u32, Vec<Sample>>,
}

impl ImageDataset {
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>) -> Self {
        let mut classes: BTreeMap<u32, Vec<Sample>> = BTreeMap::new();
        for s in samples {
            classes.entry(s.label).or_default().push(s);
        }
        Self { classes }
    }

    /// Renders every `(id, sequence)` pair.
    pub fn render(
        seqs: &[(String, SkeletonSequence)],
        topo: &BoneTopology,
        resolution: (usize, usize),
        kinds: &[ImageKind],
    ) -> Result<Self, EpisodeError> {
        let samples = seqs
            .iter()
            .map(|(id, s)| Sample::render(id, s, topo, resolution, kinds))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_samples(samples))
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, id: u32) -> &[Sample] {
        self.classes.get(&id).map_or(&[], Vec::as_slice)
    }

    /// The classes listed in `ids` (others are ignored).
    pub fn subset(&self, ids: &[u32]) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .filter(|(k, _)| ids.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    /// Disjoint class splits in ascending class-id order: the first `train`
    /// classes, then `val`, then `test`.
    pub fn split(&self, train: usize, val: usize, test: usize) -> Result<[Self; 3], EpisodeError> {
        let ids = self.class_ids();
        if train + val + test > ids.len() {
            return Err(EpisodeError::InsufficientClasses {
                needed: train + val + test,
                available: ids.len(),
            });
        }
        let (a, rest) = ids.split_at(train);
        let (b, rest) = rest.split_at(val);
        Ok([self.subset(a), self.subset(b), self.subset(&rest[..test])])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem<'a> {
    pub sample: &'a Sample,
    /// Index of the sample's class within the episode, `0..N`.
    pub target: usize,
}

/// One N-way K-shot task. `classes[k]` is the dataset label of episode
/// class `k`; supports are grouped by class, `K` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<'a> {
    pub classes: Vec<u32>,
    pub support: Vec<EpisodeItem<'a>>,
    pub query: Vec<EpisodeItem<'a>>,
    pub way: usize,
    pub shot: usize,
}

impl Episode<'_> {
    /// Supports of episode class `k`.
    pub fn supports_of(&self, k: usize) -> &[EpisodeItem<'_>] {
        &self.support[k * self.shot..(k + 1) * self.shot]
    }
}

/// Samples `way` classes without replacement, then `shot + queries` distinct
/// instances of each; the first `shot` are supports.
pub fn sample_episode<'a>(
    dataset: &'a ImageDataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode<'a>, EpisodeError> {
    sample_episode_paired(dataset, dataset, way, shot, queries, rng)
}

/// Like [`sample_episode`], but queries are taken from `query_pool`, which
/// must hold the same classes with the same instance counts (an alternate
/// rendering of the same instances, e.g. at another playback speed). The
/// chosen query indices never overlap the support indices.
pub fn sample_episode_paired<'a>(
    support_pool: &'a ImageDataset,
    query_pool: &'a ImageDataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode<'a>, EpisodeError> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(EpisodeError::InvalidShape);
    }
    let ids = support_pool.class_ids();
    if ids.len() < way {
        return Err(EpisodeError::InsufficientClasses {
            needed: way,
            available: ids.len(),
        });
    }
    for &c in &ids {
        let (s, q) = (support_pool.class(c), query_pool.class(c));
        if s.len() != q.len() {
            return Err(EpisodeError::PoolMismatch(c));
        }
        if s.len() < shot + queries {
            return Err(EpisodeError::InsufficientInstances {
                class: c,
                needed: shot + queries,
                available: s.len(),
            });
        }
    }
    let chosen: Vec<u32> = index::sample(rng, ids.len(), way)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (target, &c) in chosen.iter().enumerate() {
        let picks = index::sample(rng, support_pool.class(c).len(), shot + queries).into_vec();
        for &i in &picks[..shot] {
            support.push(EpisodeItem {
                sample: &support_pool.class(c)[i],
                target,
            });
        }
        for &i in &picks[shot..] {
            query.push(EpisodeItem {
                sample: &query_pool.class(c)[i],
                target,
            });
        }
    }
    Ok(Episode {
        classes: chosen,
        support,
        query,
        way,
        shot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    pub(crate) fn toy_dataset(classes: u32, per_class: usize) -> ImageDataset {
        ImageDataset::from_samples((1..=classes).flat_map(|c| {
            (0..per_class).map(move |i| Sample {
                id: format!("c{c}_{i}"),
                label: c,
                position: Some(SignalImage::filled(2, 2, ImageKind::Position, (c * 10 + i as u32) as u8).unwrap()),
                orientation: None,
                fused: None,
            })
        }))
    }

    #[test]
    fn five_way_one_shot_is_disjoint() {
        let ds = toy_dataset(10, 4);
        let ep = sample_episode(&ds, 5, 1, 1, &mut rng_from_seed(3)).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (5, 5));
        let mut ids: Vec<&str> = ep.support.iter().chain(&ep.query).map(|i| i.sample.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        let mut classes = ep.classes.clone();
        classes.dedup();
        assert_eq!(classes.len(), 5);
        for item in ep.support.iter().chain(&ep.query) {
            assert_eq!(item.sample.label, ep.classes[item.target]);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = toy_dataset(10, 4);
        let a = sample_episode(&ds, 5, 2, 2, &mut rng_from_seed(11)).unwrap();
        let b = sample_episode(&ds, 5, 2, 2, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.supports_of(3).len(), 2);
    }

    #[test]
    fn shortfalls_are_reported() {
        let ds = toy_dataset(3, 2);
        assert!(matches!(
            sample_episode(&ds, 5, 1, 1, &mut rng_from_seed(0)),
            Err(EpisodeError::InsufficientClasses { needed: 5, available: 3 })
        ));
        assert!(matches!(
            sample_episode(&ds, 2, 2, 1, &mut rng_from_seed(0)),
            Err(EpisodeError::InsufficientInstances { .. })
        ));
    }

    #[test]
    fn paired_pools_draw_queries_from_the_second_pool() {
        let a = toy_dataset(6, 3);
        let mut b = a.clone();
        for v in b.classes.values_mut() {
            for s in v {
                s.id.push_str("_alt");
            }
        }
        let ep = sample_episode_paired(&a, &b, 4, 1, 2, &mut rng_from_seed(5)).unwrap();
        assert!(ep.query.iter().all(|q| q.sample.id.ends_with("_alt")));
        assert!(ep.support.iter().all(|s| !s.sample.id.ends_with("_alt")));
        for k in 0..4 {
            let s = &ep.supports_of(k)[0].sample.id;
            for q in ep.query.iter().filter(|q| q.target == k) {
                assert_ne!(format!("{s}_alt"), q.sample.id);
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_ordered() {
        let ds = toy_dataset(15, 2);
        let [tr, va, te] = ds.split(10, 2, 3).unwrap();
        assert_eq!(tr.class_ids(), (1..=10).collect::<Vec<_>>());
        assert_eq!(va.class_ids(), vec![11, 12]);
        assert_eq!(te.class_ids(), vec![13, 14, 15]);
        assert!(ds.split(10, 3, 3).is_err());
    }
}
