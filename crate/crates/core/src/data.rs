//! Synthetic grouped identity datasets, ratio subsampling, subject-disjoint
//! folds and within-group verification pairs.
//!
//! Each image is `clip(0.5 + 0.25 * (gs * G_g + is * s_g * I_j) + noise)`
//! where `G_g` is a plane wave whose frequency and orientation depend on the
//! group, `I_j` is a sum of three low-frequency waves with per-identity
//! frequencies and phases, and `s_g` is an optional per-group identity
//! scale. Pose jitter shifts the sampling grid of both patterns.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::rng::{stream_rng, TAG_FOLD, TAG_IDENTITY, TAG_PAIRS, TAG_RATIO, TAG_SAMPLE};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nd: usize,
    pub subjects_per_group: usize,
    pub images_per_subject: usize,
    pub image_size: usize,
    pub group_signature_strength: f64,
    pub identity_signature_strength: f64,
    /// Per-group multiplier on the identity signature; empty means all 1.
    pub identity_scale: Vec<f64>,
    pub noise_std: f64,
    /// Maximum grid shift in pixels.
    pub pose_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nd: 4,
            subjects_per_group: 16,
            images_per_subject: 8,
            image_size: 32,
            group_signature_strength: 0.6,
            identity_signature_strength: 1.0,
            identity_scale: Vec::new(),
            noise_std: 0.05,
            pose_jitter: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nd == 0 || self.subjects_per_group == 0 || self.images_per_subject == 0 {
            return Err(Error::Config("nd, subjects_per_group and images_per_subject must be >= 1".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be >= 4".into()));
        }
        let strengths = [
            self.group_signature_strength,
            self.identity_signature_strength,
            self.noise_std,
            self.pose_jitter,
        ];
        if strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("strengths, noise_std and pose_jitter must be finite and >= 0".into()));
        }
        if !self.identity_scale.is_empty() && self.identity_scale.len() != self.nd {
            return Err(Error::Config(format!(
                "identity_scale has {} entries, expected {}",
                self.identity_scale.len(),
                self.nd
            )));
        }
        if self.identity_scale.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("identity_scale entries must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn scale_of(&self, group: usize) -> f64 {
        self.identity_scale.get(group).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position in the originally generated dataset; survives subsetting.
    pub id: usize,
    /// `1 x H x W`.
    pub image: Tensor,
    pub identity: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub nd: usize,
    pub image_shape: Vec<usize>,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted identities of each group.
    pub fn subjects_by_group(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.nd];
        for s in &self.samples {
            sets[s.group].insert(s.identity);
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Sample positions of each identity.
    pub fn images_by_subject(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        map
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Samples whose identity satisfies `keep`, in original order.
    pub fn filter_identities(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        Dataset {
            nd: self.nd,
            image_shape: self.image_shape.clone(),
            seed: self.seed,
            samples: self.samples.iter().filter(|s| keep(s.identity)).cloned().collect(),
        }
    }

    pub fn groups(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.group).collect()
    }
}

fn group_pattern(group: usize, nd: usize, x: f64, y: f64, size: f64) -> f64 {
    let freq = 2.0 + group as f64;
    let theta = PI * group as f64 / nd as f64;
    (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) / size).cos()
}

struct IdentityPattern {
    waves: [(f64, f64, f64); 3],
}

impl IdentityPattern {
    fn draw(seed: u64, identity: usize) -> Self {
        let mut rng = stream_rng(seed, TAG_IDENTITY, identity as u64);
        let mut wave = || {
            let fx = rng.gen_range(-3i32..=3) as f64;
            let fy = rng.gen_range(1i32..=3) as f64;
            (fx, fy, rng.gen_range(0.0..2.0 * PI))
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, x: f64, y: f64, size: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fx, fy, phase)| (2.0 * PI * (fx * x + fy * y) / size + phase).sin())
            .sum::<f64>()
            / 3.0
    }
}

/// Generates `nd * subjects_per_group * images_per_subject` samples ordered by
/// group, subject, image. Identity ids are `group * subjects_per_group + s`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_synthetic_with(cfg, Execution::default())
}

pub fn generate_synthetic_with(cfg: &SynthConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let size = cfg.image_size;
    let n_subjects = cfg.nd * cfg.subjects_per_group;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");

    let per_subject: Vec<Vec<Sample>> = map_indexed(n_subjects, exec, |identity| {
        let group = identity / cfg.subjects_per_group;
        let pattern = IdentityPattern::draw(cfg.seed, identity);
        let gs = cfg.group_signature_strength;
        let is = cfg.identity_signature_strength * cfg.scale_of(group);
        (0..cfg.images_per_subject)
            .map(|k| {
                let id = identity * cfg.images_per_subject + k;
                let mut rng = stream_rng(cfg.seed, TAG_SAMPLE, id as u64);
                let (dx, dy) = if cfg.pose_jitter > 0.0 {
                    (
                        rng.gen_range(-cfg.pose_jitter..=cfg.pose_jitter),
                        rng.gen_range(-cfg.pose_jitter..=cfg.pose_jitter),
                    )
                } else {
                    (0.0, 0.0)
                };
                let mut data = Vec::with_capacity(size * size);
                for r in 0..size {
                    for c in 0..size {
                        let (x, y) = (c as f64 + dx, r as f64 + dy);
                        let clean = 0.5
                            + 0.25
                                * (gs * group_pattern(group, cfg.nd, x, y, size as f64)
                                    + is * pattern.at(x, y, size as f64));
                        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        data.push((clean + eps).clamp(0.0, 1.0));
                    }
                }
                Sample {
                    id,
                    image: Tensor::new(vec![1, size, size], data).expect("shape"),
                    identity,
                    group,
                }
            })
            .collect()
    });

    Ok(Dataset {
        nd: cfg.nd,
        image_shape: vec![1, size, size],
        seed: cfg.seed,
        samples: per_subject.into_iter().flatten().collect(),
    })
}

/// Number of subjects kept for a group of `subjects` under `ratio / max_ratio`.
pub fn kept_subjects(subjects: usize, ratio: f64, max_ratio: f64) -> usize {
    ((ratio / max_ratio) * subjects as f64 + 1e-9).floor() as usize
}

/// Keeps `floor(ratios[k] / max(ratios) * subjects_k)` random subjects of
/// each group `k`; groups at the maximum ratio are untouched.
pub fn ratio_subsample(dataset: &Dataset, ratios: &[f64], seed: u64) -> Result<Dataset> {
    if ratios.len() != dataset.nd {
        return Err(Error::InvalidArgument(format!(
            "{} ratios given for {} groups",
            ratios.len(),
            dataset.nd
        )));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidArgument("ratios must be finite and >= 0".into()));
    }
    let max = ratios.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidArgument("all ratios are zero".into()));
    }
    let mut keep = BTreeSet::new();
    for (group, subjects) in dataset.subjects_by_group().into_iter().enumerate() {
        let n = kept_subjects(subjects.len(), ratios[group], max);
        if n == subjects.len() {
            keep.extend(subjects);
            continue;
        }
        let mut shuffled = subjects;
        shuffled.shuffle(&mut stream_rng(seed, TAG_RATIO, group as u64));
        keep.extend(shuffled.into_iter().take(n));
    }
    Ok(dataset.filter_identities(|j| keep.contains(&j)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub index: usize,
    pub identities: BTreeSet<usize>,
}

/// Partitions each group's subjects into `k` near-equal folds; the first
/// `n mod k` folds of a group receive one extra subject. Groups without
/// subjects are skipped.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let by_group = dataset.subjects_by_group();
    if let Some((g, smallest)) = by_group
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .min_by_key(|(_, s)| s.len())
    {
        if smallest.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} subjects of group {g}",
                smallest.len()
            )));
        }
    }
    let mut folds: Vec<FoldSpec> = (0..k)
        .map(|index| FoldSpec {
            index,
            identities: BTreeSet::new(),
        })
        .collect();
    for (group, subjects) in by_group.into_iter().enumerate() {
        let mut shuffled = subjects;
        shuffled.shuffle(&mut stream_rng(seed, TAG_FOLD, group as u64));
        let (base, extra) = (shuffled.len() / k, shuffled.len() % k);
        let mut it = shuffled.into_iter();
        for (i, fold) in folds.iter_mut().enumerate() {
            let take = base + usize::from(i < extra);
            fold.identities.extend(it.by_ref().take(take));
        }
    }
    Ok(folds)
}

/// Training and test datasets for fold `index`.
pub fn split_fold(dataset: &Dataset, folds: &[FoldSpec], index: usize) -> Result<(Dataset, Dataset)> {
    let test = folds
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("fold index {index} out of {} folds", folds.len())))?;
    let train = dataset.filter_identities(|j| !test.identities.contains(&j));
    let held_out = dataset.filter_identities(|j| test.identities.contains(&j));
    Ok((train, held_out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub idx_a: usize,
    pub idx_b: usize,
    pub genuine: bool,
    pub group: usize,
}

pub type PairList = Vec<Pair>;

fn draw_pairs(candidates: Vec<(usize, usize)>, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut round = candidates.clone();
        round.shuffle(rng);
        out.extend(round.into_iter().take(count - out.len()));
    }
    out
}

/// `pairs_per_group / 2` genuine and impostor pairs per group, drawn
/// without replacement until a group's candidates are exhausted. Indices
/// refer to positions in `dataset.samples`.
pub fn generate_pairs(dataset: &Dataset, pairs_per_group: usize, seed: u64) -> Result<PairList> {
    if pairs_per_group == 0 || !pairs_per_group.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "pairs_per_group must be a positive even number, got {pairs_per_group}"
        )));
    }
    let half = pairs_per_group / 2;
    let images = dataset.images_by_subject();
    let mut pairs = Vec::with_capacity(pairs_per_group * dataset.nd);
    for (group, subjects) in dataset.subjects_by_group().into_iter().enumerate() {
        if subjects.is_empty() {
            warn!("group {group} has no subjects; no pairs generated");
            continue;
        }
        let multi: Vec<usize> = subjects.iter().copied().filter(|j| images[j].len() >= 2).collect();
        if subjects.len() < 2 || multi.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "group {group} needs >= 2 subjects and a subject with >= 2 images"
            )));
        }
        let mut genuine = Vec::new();
        for j in &multi {
            let imgs = &images[j];
            for (a, &ia) in imgs.iter().enumerate() {
                genuine.extend(imgs[a + 1..].iter().map(|&ib| (ia, ib)));
            }
        }
        let mut impostor = Vec::new();
        for (a, ja) in subjects.iter().enumerate() {
            for jb in &subjects[a + 1..] {
                for &ia in &images[ja] {
                    impostor.extend(images[jb].iter().map(|&ib| (ia, ib)));
                }
            }
        }
        let mut rng = stream_rng(seed, TAG_PAIRS, group as u64);
        for (a, b) in draw_pairs(genuine, half, &mut rng) {
            pairs.push(Pair {
                idx_a: a,
                idx_b: b,
                genuine: true,
                group,
            });
        }
        for (a, b) in draw_pairs(impostor, half, &mut rng) {
            pairs.push(Pair {
                idx_a: a,
                idx_b: b,
                genuine: false,
                group,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub id: usize,
    pub identity: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub samples: usize,
    pub subjects: usize,
    pub samples_per_group: Vec<usize>,
    pub subjects_per_group: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub nd: usize,
    pub counts: Counts,
    pub image_shape: Vec<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn describe(dataset: &Dataset, synth: Option<SynthConfig>, ratios: Option<Vec<f64>>) -> Self {
        let mut samples_per_group = vec![0; dataset.nd];
        for s in &dataset.samples {
            samples_per_group[s.group] += 1;
        }
        let by_group = dataset.subjects_by_group();
        Self {
            nd: dataset.nd,
            counts: Counts {
                samples: dataset.len(),
                subjects: by_group.iter().map(Vec::len).sum(),
                samples_per_group,
                subjects_per_group: by_group.iter().map(Vec::len).collect(),
            },
            image_shape: dataset.image_shape.clone(),
            seed: dataset.seed,
            synth,
            ratios,
            samples: dataset
                .samples
                .iter()
                .map(|s| SampleRecord {
                    file: IMAGES_FILE.to_string(),
                    id: s.id,
                    identity: s.identity,
                    group: s.group,
                })
                .collect(),
        }
    }
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let ipath = dir.join(IMAGES_FILE);
    let file = fs::File::create(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.samples {
        for v in s.image.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&ipath, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&ipath, e))
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let ipath = dir.join(IMAGES_FILE);
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(&ipath).map_err(|e| Error::io(&ipath, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&ipath, e))?;
    let per: usize = manifest.image_shape.iter().product();
    if bytes.len() != per * manifest.samples.len() * 8 {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} bytes, manifest expects {}",
            ipath.display(),
            bytes.len(),
            per * manifest.samples.len() * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.group >= manifest.nd {
                return Err(Error::GroupOutOfRange {
                    group: r.group,
                    nd: manifest.nd,
                });
            }
            Ok(Sample {
                id: r.id,
                image: Tensor::new(manifest.image_shape.clone(), values[i * per..(i + 1) * per].to_vec())?,
                identity: r.identity,
                group: r.group,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        nd: manifest.nd,
        image_shape: manifest.image_shape.clone(),
        seed: manifest.seed,
        samples,
    };
    Ok((dataset, manifest))
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    idx_a: usize,
    idx_b: usize,
    genuine: u8,
    group: usize,
}

pub fn write_pairs_csv(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for p in pairs {
        w.serialize(PairRow {
            idx_a: p.idx_a,
            idx_b: p.idx_b,
            genuine: u8::from(p.genuine),
            group: p.group,
        })
        .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_csv(path: &Path) -> Result<PairList> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize::<PairRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::io(path, e.into()))?;
            Ok(Pair {
                idx_a: row.idx_a,
                idx_b: row.idx_b,
                genuine: row.genuine != 0,
                group: row.group,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            nd: 2,
            subjects_per_group: 3,
            images_per_subject: 2,
            image_size: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_ordering() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.samples[0].identity, 0);
        assert_eq!(ds.samples[11].group, 1);
        assert!(ds.samples.iter().enumerate().all(|(i, s)| s.id == i));
        assert!(ds
            .samples
            .iter()
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn noiseless_subject_images_are_identical() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            pose_jitter: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.samples[0].image, ds.samples[1].image);
        assert_ne!(ds.samples[0].image, ds.samples[2].image);
    }

    #[test]
    fn floor_rule() {
        assert_eq!(kept_subjects(70, 5.0, 7.0), 50);
        assert_eq!(kept_subjects(70, 3.5, 7.0), 35);
        assert_eq!(kept_subjects(70, 1.0, 7.0), 10);
        assert_eq!(kept_subjects(70, 7.0, 7.0), 70);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = generate_synthetic(&small()).unwrap();
        assert!(ratio_subsample(&ds, &[0.0, 0.0], 1).is_err());
        assert!(ratio_subsample(&ds, &[1.0], 1).is_err());
        assert!(make_folds(&ds, 4, 1).is_err());
        assert!(generate_pairs(&ds, 3, 1).is_err());
    }
}
