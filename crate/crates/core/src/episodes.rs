//! Benchmark splits, manifests, episode sampling and K-shot to X-shot extension.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GeneratedImage;
use crate::imaging::{self, check_same, BinaryMask, RgbImage};
use crate::io;

pub const PASCAL_CLASSES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "dining table", "dog", "horse", "motorbike", "person", "potted plant", "sheep", "sofa",
    "train", "tv monitor",
];

pub const COCO_CLASSES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book",
    "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush",
];

pub const FSS1000_COUNTS: (usize, usize, usize) = (520, 240, 240);

/// Reference sizes of the reduced COCO-20i benchmark at full scale.
pub const MINICOCO_REFERENCE_TRAIN_IMAGES: usize = 8_200;
pub const MINICOCO_REFERENCE_VAL_IMAGES: usize = 4_953;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Pascal5i,
    Fss1000,
    Minicoco20i,
    /// Any manifest that carries its own class set; one fold, all classes.
    Custom,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pascal5i => "pascal5i",
            Self::Fss1000 => "fss1000",
            Self::Minicoco20i => "minicoco20i",
            Self::Custom => "custom",
        }
    }

    pub fn folds(self) -> u32 {
        match self {
            Self::Pascal5i | Self::Minicoco20i => 4,
            Self::Fss1000 | Self::Custom => 1,
        }
    }

    pub fn default_class_name(self, class_index: u32) -> String {
        let table: &[&str] = match self {
            Self::Pascal5i => &PASCAL_CLASSES,
            Self::Minicoco20i => &COCO_CLASSES,
            _ => &[],
        };
        class_index
            .checked_sub(1)
            .and_then(|i| table.get(i as usize))
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class {class_index}"))
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pascal5i" | "pascal" => Ok(Self::Pascal5i),
            "fss1000" | "fss" => Ok(Self::Fss1000),
            "minicoco20i" | "minicoco" | "coco20i" => Ok(Self::Minicoco20i),
            "custom" => Ok(Self::Custom),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::InvalidArgument(format!("unknown phase `{other}`"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: DatasetKind,
    pub fold: u32,
    pub phase: Phase,
    pub classes: Vec<u32>,
}

impl SplitSpec {
    /// Class split of the fold-based benchmarks: training uses the base
    /// classes, validation and testing the novel classes of `fold`.
    pub fn benchmark(dataset: DatasetKind, fold: u32, phase: Phase) -> Result<Self> {
        let (train, test) = match dataset {
            DatasetKind::Pascal5i => split_pascal5i(fold)?,
            DatasetKind::Minicoco20i => split_coco20i(fold)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{other} has no fixed fold split"
                )))
            }
        };
        let classes = if phase == Phase::Train { train } else { test };
        Ok(Self {
            dataset,
            fold,
            phase,
            classes,
        })
    }
}

/// Consecutive blocks of five: fold `i` holds classes `5i+1 ..= 5i+5`.
pub fn split_pascal5i(fold: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    if fold > 3 {
        return Err(Error::FoldOutOfRange { fold, folds: 4 });
    }
    let test: Vec<u32> = (5 * fold + 1..=5 * fold + 5).collect();
    let train = (1..=20).filter(|c| !test.contains(c)).collect();
    Ok((train, test))
}

/// Interleaved COCO-20i split: fold `i` holds classes `4k + i + 1`.
pub fn split_coco20i(fold: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    if fold > 3 {
        return Err(Error::FoldOutOfRange { fold, folds: 4 });
    }
    let test: Vec<u32> = (0..20).map(|k| 4 * k + fold + 1).collect();
    let train = (1..=80).filter(|c| !test.contains(c)).collect();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fss1000Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Positional split of the ordered 1000-class manifest into 520/240/240.
pub fn split_fss1000(classes: &[String]) -> Result<Fss1000Split> {
    let (ntrain, nval, ntest) = FSS1000_COUNTS;
    let expected = ntrain + nval + ntest;
    if classes.len() != expected {
        return Err(Error::ManifestCount {
            expected,
            actual: classes.len(),
        });
    }
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(Error::DuplicateEntry(c.clone()));
        }
    }
    Ok(Fss1000Split {
        train: classes[..ntrain].to_vec(),
        val: classes[ntrain..ntrain + nval].to_vec(),
        test: classes[ntrain + nval..].to_vec(),
    })
}

/// Reads a plain-text class list, one name per line.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_class_list(path: &Path, classes: &[String]) -> Result<()> {
    let mut text = classes.join("\n");
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

/// COCO object-area buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn from_area(area: f64) -> Self {
        if area < 32.0 * 32.0 {
            Self::Small
        } else if area < 96.0 * 96.0 {
            Self::Medium
        } else {
            Self::Large
        }
    }
}

/// One manifest line. `classes[i]` and `size_buckets[i]` describe instance `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub classes: Vec<u32>,
    #[serde(default)]
    pub size_buckets: Vec<SizeBucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

impl ManifestRecord {
    fn primary_class(&self) -> Option<u32> {
        self.classes.first().copied()
    }

    /// Stratum of an image: the instance with the largest size bucket
    /// (first one on ties) decides both class and bucket.
    fn stratum(&self) -> Result<(u32, SizeBucket)> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "record `{}` lists no classes",
                self.id
            )));
        }
        if self.size_buckets.len() != self.classes.len() {
            return Err(Error::InvalidArgument(format!(
                "record `{}` has {} classes but {} size buckets",
                self.id,
                self.classes.len(),
                self.size_buckets.len()
            )));
        }
        let mut best = 0;
        for (i, b) in self.size_buckets.iter().enumerate() {
            if *b > self.size_buckets[best] {
                best = i;
            }
        }
        Ok((self.classes[best], self.size_buckets[best]))
    }
}

/// Numeric ids compare numerically, anything else lexicographically.
pub fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniCocoConfig {
    pub ratio: f64,
    pub seed: u64,
    /// Minimum validation images per class: 5 supports plus one query.
    pub min_val_per_class: usize,
}

impl Default for MiniCocoConfig {
    fn default() -> Self {
        Self {
            ratio: 0.10,
            seed: 0,
            min_val_per_class: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniCocoMeta {
    pub ratio: f64,
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub intersected_val_images: usize,
    /// `(class, image id)` pairs added from the validation pool.
    pub topped_up: Vec<(u32, String)>,
    pub reference_train_images: usize,
    pub reference_val_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniCoco {
    pub train: Vec<ManifestRecord>,
    pub val: Vec<ManifestRecord>,
    pub meta: MiniCocoMeta,
}

fn stratum_seed(seed: u64, class: u32, bucket: SizeBucket) -> u64 {
    seed ^ (u64::from(class) << 8 | bucket as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Number of images drawn from a stratum of `count` images.
pub fn stratum_target(ratio: f64, count: usize) -> usize {
    (ratio * count as f64).round() as usize
}

/// Stratified reduction of a training manifest plus validation assembly.
///
/// Training images are grouped into `(class, size bucket)` strata and each
/// stratum keeps `round(ratio * count)` images, chosen by a seeded shuffle.
/// Validation is the id intersection of `val_a` and `pool`; classes with
/// fewer than `min_val_per_class` images are topped up from `pool`,
/// smallest id first.
pub fn build_minicoco(
    train: &[ManifestRecord],
    val_a: &[ManifestRecord],
    pool: &[ManifestRecord],
    cfg: &MiniCocoConfig,
) -> Result<MiniCoco> {
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio {} outside (0, 1]",
            cfg.ratio
        )));
    }
    let mut strata: BTreeMap<(u32, SizeBucket), Vec<usize>> = BTreeMap::new();
    for (i, rec) in train.iter().enumerate() {
        strata.entry(rec.stratum()?).or_default().push(i);
    }
    let mut class_targets: BTreeMap<u32, usize> = BTreeMap::new();
    let mut keep = vec![false; train.len()];
    for (&(class, bucket), members) in &strata {
        let target = stratum_target(cfg.ratio, members.len());
        *class_targets.entry(class).or_default() += target;
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed(cfg.seed, class, bucket));
        order.shuffle(&mut rng);
        for &i in &order[..target] {
            keep[i] = true;
        }
    }
    if let Some((&class, _)) = class_targets.iter().find(|(_, &t)| t == 0) {
        return Err(Error::StratumTooSmall {
            class,
            ratio: cfg.ratio,
        });
    }
    let train_out: Vec<ManifestRecord> = train
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();

    let ids_a: HashSet<&str> = val_a.iter().map(|r| r.id.as_str()).collect();
    let mut pool_sorted: Vec<&ManifestRecord> = pool.iter().collect();
    pool_sorted.sort_by(|a, b| id_order(&a.id, &b.id));
    let mut val: Vec<ManifestRecord> = pool_sorted
        .iter()
        .filter(|r| ids_a.contains(r.id.as_str()))
        .map(|r| (*r).clone())
        .collect();
    let intersected = val.len();

    let mut classes: BTreeSet<u32> = train.iter().flat_map(|r| r.classes.iter().copied()).collect();
    classes.extend(pool.iter().flat_map(|r| r.classes.iter().copied()));
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let mut in_val: HashSet<String> = HashSet::new();
    for r in &val {
        in_val.insert(r.id.clone());
        for c in r.classes.iter().collect::<BTreeSet<_>>() {
            *counts.entry(*c).or_default() += 1;
        }
    }
    let mut topped_up = Vec::new();
    for &class in &classes {
        let have = counts.get(&class).copied().unwrap_or(0);
        if have == 0 {
            return Err(Error::NoValidationImages(class));
        }
        if have >= cfg.min_val_per_class {
            continue;
        }
        for rec in &pool_sorted {
            if counts[&class] >= cfg.min_val_per_class {
                break;
            }
            if in_val.contains(&rec.id) || !rec.classes.contains(&class) {
                continue;
            }
            in_val.insert(rec.id.clone());
            for c in rec.classes.iter().collect::<BTreeSet<_>>() {
                *counts.entry(*c).or_default() += 1;
            }
            topped_up.push((class, rec.id.clone()));
            val.push((*rec).clone());
        }
        if counts[&class] < cfg.min_val_per_class {
            return Err(Error::InsufficientValidation {
                class,
                available: counts[&class],
                required: cfg.min_val_per_class,
            });
        }
    }
    val.sort_by(|a, b| id_order(&a.id, &b.id));

    let meta = MiniCocoMeta {
        ratio: cfg.ratio,
        seed: cfg.seed,
        train_images: train_out.len(),
        val_images: val.len(),
        intersected_val_images: intersected,
        topped_up,
        reference_train_images: MINICOCO_REFERENCE_TRAIN_IMAGES,
        reference_val_images: MINICOCO_REFERENCE_VAL_IMAGES,
    };
    Ok(MiniCoco {
        train: train_out,
        val,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSample {
    pub id: String,
    #[serde(with = "imaging::serde_png::rgb")]
    pub image: RgbImage,
    #[serde(with = "imaging::serde_png::mask")]
    pub mask: BinaryMask,
    pub class_index: u32,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    #[serde(with = "imaging::serde_png::rgb")]
    pub image: RgbImage,
    /// Used for scoring only.
    #[serde(with = "imaging::serde_png::mask")]
    pub mask: BinaryMask,
    pub class_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub fold: u32,
    pub class_index: u32,
    pub supports: Vec<SupportSample>,
    pub query: QuerySample,
    pub k_original: usize,
    pub n_aux: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn original_supports(&self) -> &[SupportSample] {
        &self.supports[..self.k_original]
    }
}

/// A loaded image with its annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub classes: Vec<u32>,
    pub class_name: String,
}

impl Sample {
    pub fn class_index(&self) -> u32 {
        self.classes[0]
    }

    pub fn to_support(&self, class_index: u32) -> SupportSample {
        SupportSample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: self.mask.clone(),
            class_index,
            class_name: self.class_name.clone(),
        }
    }

    pub fn to_query(&self, class_index: u32) -> QuerySample {
        QuerySample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: self.mask.clone(),
            class_index,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Loads every record of a JSONL manifest; paths resolve against the
    /// manifest's directory.
    pub fn load(manifest: &Path, kind: DatasetKind) -> Result<Self> {
        let records: Vec<ManifestRecord> = io::read_jsonl(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_records(&records, &root, kind)
    }

    pub fn from_records(records: &[ManifestRecord], root: &Path, kind: DatasetKind) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(records.len());
        for rec in records {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateEntry(rec.id.clone()));
            }
            let class = rec.primary_class().ok_or_else(|| {
                Error::InvalidArgument(format!("record `{}` lists no classes", rec.id))
            })?;
            let image = imaging::load_rgb(&resolve(root, &rec.image))?;
            let mask = imaging::load_mask(&resolve(root, &rec.mask))?;
            check_same(image.dimensions(), mask.dimensions())?;
            samples.push(Sample {
                id: rec.id.clone(),
                image,
                mask,
                classes: rec.classes.clone(),
                class_name: rec
                    .class_name
                    .clone()
                    .unwrap_or_else(|| kind.default_class_name(class)),
            });
        }
        Ok(Self { samples })
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().flat_map(|s| s.classes.iter().copied()).collect();
        set.into_iter().collect()
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Samples of a dataset grouped by the classes of one split.
#[derive(Debug, Clone)]
pub struct EpisodePool<'a> {
    dataset: &'a Dataset,
    split: SplitSpec,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl<'a> EpisodePool<'a> {
    pub fn new(dataset: &'a Dataset, split: SplitSpec) -> Self {
        let wanted: BTreeSet<u32> = split.classes.iter().copied().collect();
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.mask.is_empty() {
                continue;
            }
            for c in s.classes.iter().collect::<BTreeSet<_>>() {
                if wanted.contains(c) {
                    by_class.entry(*c).or_default().push(i);
                }
            }
        }
        Self {
            dataset,
            split,
            by_class,
        }
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn eligible_classes(&self, k: usize) -> Vec<u32> {
        self.by_class
            .iter()
            .filter(|(_, v)| v.len() > k)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// Draws `k` supports and one query of a uniformly chosen eligible class.
pub fn sample_episode(pool: &EpisodePool<'_>, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let eligible = pool.eligible_classes(k);
    if eligible.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "no class of {} fold {} has {} images",
            pool.split.dataset,
            pool.split.fold,
            k + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = eligible[rng.random_range(0..eligible.len())];
    let members = &pool.by_class[&class];
    let picks: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), k + 1).into_vec();
    let samples = &pool.dataset.samples;
    let supports = picks[..k]
        .iter()
        .map(|&p| samples[members[p]].to_support(class))
        .collect();
    let query = samples[members[picks[k]]].to_query(class);
    Ok(Episode {
        id: format!("{}-f{}-{}", pool.split.dataset, pool.split.fold, seed),
        fold: pool.split.fold,
        class_index: class,
        supports,
        query,
        k_original: k,
        n_aux: 0,
    })
}

/// Appends generated auxiliaries to a one-shot episode. Each auxiliary
/// reuses the original support's mask, class and class name.
pub fn extend_episode(ep: &Episode, aux: &[GeneratedImage]) -> Result<Episode> {
    if ep.k_original != 1 || ep.n_aux != 0 || ep.supports.len() != 1 {
        return Err(Error::NotOneShot(ep.id.clone()));
    }
    let original = &ep.supports[0];
    let mut supports = Vec::with_capacity(1 + aux.len());
    supports.push(original.clone());
    for g in aux {
        if g.provenance.source_id != original.id {
            return Err(Error::ProvenanceMismatch {
                expected: original.id.clone(),
                found: g.provenance.source_id.clone(),
            });
        }
        check_same(original.mask.dimensions(), g.image.dimensions())?;
        supports.push(SupportSample {
            id: g.provenance.image_id(),
            image: g.image.clone(),
            mask: original.mask.clone(),
            class_index: original.class_index,
            class_name: original.class_name.clone(),
        });
    }
    Ok(Episode {
        id: ep.id.clone(),
        fold: ep.fold,
        class_index: ep.class_index,
        supports,
        query: ep.query.clone(),
        k_original: 1,
        n_aux: aux.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition_gen::ConditionKind;
    use crate::generation::Provenance;
    use crate::imaging::Rgb;

    fn rec(id: &str, classes: &[u32], buckets: &[SizeBucket]) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            image: format!("{id}.png"),
            mask: format!("{id}_m.png"),
            classes: classes.to_vec(),
            size_buckets: buckets.to_vec(),
            class_name: None,
        }
    }

    fn toy_dataset(per_class: &[(u32, usize)]) -> Dataset {
        let mut samples = Vec::new();
        for &(class, n) in per_class {
            for i in 0..n {
                samples.push(Sample {
                    id: format!("c{class}-{i}"),
                    image: RgbImage::from_pixel(4, 4, Rgb([class as u8 * 10, i as u8, 0])),
                    mask: BinaryMask::from_fn(4, 4, |x, _| x < 2).unwrap(),
                    classes: vec![class],
                    class_name: format!("thing{class}"),
                });
            }
        }
        Dataset::new(samples)
    }

    fn custom_split(classes: Vec<u32>) -> SplitSpec {
        SplitSpec {
            dataset: DatasetKind::Custom,
            fold: 0,
            phase: Phase::Test,
            classes,
        }
    }

    #[test]
    fn pascal_fold_zero() {
        let (train, test) = split_pascal5i(0).unwrap();
        assert_eq!(test, vec![1, 2, 3, 4, 5]);
        assert_eq!(train, (6..=20).collect::<Vec<_>>());
        assert!(matches!(split_pascal5i(4), Err(Error::FoldOutOfRange { .. })));
    }

    #[test]
    fn pascal_folds_partition() {
        let mut all = Vec::new();
        for f in 0..4 {
            let (train, test) = split_pascal5i(f).unwrap();
            assert_eq!((train.len(), test.len()), (15, 5));
            assert!(train.iter().all(|c| !test.contains(c)));
            all.extend(test);
        }
        all.sort();
        assert_eq!(all, (1..=20).collect::<Vec<_>>());
    }

    #[test]
    fn coco_folds_partition() {
        let mut all = Vec::new();
        for f in 0..4 {
            let (train, test) = split_coco20i(f).unwrap();
            assert_eq!((train.len(), test.len()), (60, 20));
            all.extend(test);
        }
        all.sort();
        assert_eq!(all, (1..=80).collect::<Vec<_>>());
        assert_eq!(split_coco20i(1).unwrap().1[..3], [2, 6, 10]);
    }

    #[test]
    fn fss_split_counts() {
        let classes: Vec<String> = (0..1000).map(|i| format!("cls{i:04}")).collect();
        let s = split_fss1000(&classes).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (520, 240, 240));
        assert_eq!(split_fss1000(&classes).unwrap(), s);
        assert!(matches!(
            split_fss1000(&classes[..999]),
            Err(Error::ManifestCount { actual: 999, .. })
        ));
        let mut dup = classes.clone();
        dup[10] = dup[11].clone();
        assert!(matches!(split_fss1000(&dup), Err(Error::DuplicateEntry(_))));
    }

    #[test]
    fn size_buckets() {
        assert_eq!(SizeBucket::from_area(1023.0), SizeBucket::Small);
        assert_eq!(SizeBucket::from_area(1024.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::from_area(9216.0), SizeBucket::Large);
    }

    #[test]
    fn stratum_picks_largest_instance() {
        let r = rec("1", &[3, 7], &[SizeBucket::Small, SizeBucket::Large]);
        assert_eq!(r.stratum().unwrap(), (7, SizeBucket::Large));
        let bad = rec("2", &[3], &[]);
        assert!(bad.stratum().is_err());
    }

    #[test]
    fn id_ordering_is_numeric_first() {
        assert_eq!(id_order("9", "10"), Ordering::Less);
        assert_eq!(id_order("b", "a"), Ordering::Greater);
        assert_eq!(id_order("5", "a"), Ordering::Less);
    }

    #[test]
    fn minicoco_rejects_class_without_validation() {
        let train: Vec<_> = (0..20).map(|i| rec(&i.to_string(), &[1], &[SizeBucket::Small])).collect();
        let err = build_minicoco(&train, &[], &[], &MiniCocoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoValidationImages(1)));
    }

    #[test]
    fn minicoco_rejects_vanishing_class() {
        let mut train: Vec<_> = (0..20).map(|i| rec(&i.to_string(), &[1], &[SizeBucket::Small])).collect();
        train.push(rec("99", &[2], &[SizeBucket::Small]));
        let err = build_minicoco(&train, &[], &[], &MiniCocoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StratumTooSmall { class: 2, .. }));
    }

    #[test]
    fn minicoco_tops_up_smallest_id_first() {
        let train: Vec<_> = (0..30).map(|i| rec(&format!("t{i}"), &[1], &[SizeBucket::Medium])).collect();
        let pool: Vec<_> = (100..110).map(|i| rec(&i.to_string(), &[1], &[SizeBucket::Small])).collect();
        // Intersection keeps 100..=104 (5 images): one short of six.
        let val_a = pool[..5].to_vec();
        let out = build_minicoco(&train, &val_a, &pool, &MiniCocoConfig::default()).unwrap();
        assert_eq!(out.meta.intersected_val_images, 5);
        assert_eq!(out.meta.topped_up, vec![(1, "105".to_string())]);
        assert_eq!(out.val.len(), 6);
        assert_eq!(out.train.len(), 3);
        assert_eq!(out.meta.reference_train_images, 8_200);
        assert_eq!(out.meta.reference_val_images, 4_953);
    }

    #[test]
    fn minicoco_insufficient_pool() {
        let train: Vec<_> = (0..30).map(|i| rec(&format!("t{i}"), &[1], &[SizeBucket::Medium])).collect();
        let pool: Vec<_> = (0..3).map(|i| rec(&i.to_string(), &[1], &[SizeBucket::Small])).collect();
        let err = build_minicoco(&train, &pool, &pool, &MiniCocoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientValidation { available: 3, .. }));
    }

    #[test]
    fn episode_support_differs_from_query() {
        let ds = toy_dataset(&[(1, 2)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![1]));
        for seed in 0..50 {
            let ep = sample_episode(&pool, 1, seed).unwrap();
            assert_ne!(ep.supports[0].id, ep.query.id);
            assert_eq!(ep.shots(), 1);
        }
    }

    #[test]
    fn episode_sampling_is_seeded() {
        let ds = toy_dataset(&[(1, 6), (2, 6)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![1, 2]));
        let a = sample_episode(&pool, 3, 42).unwrap();
        assert_eq!(a, sample_episode(&pool, 3, 42).unwrap());
        let ids: HashSet<_> = a.supports.iter().map(|s| &s.id).chain([&a.query.id]).collect();
        assert_eq!(ids.len(), 4);
        assert!(a.supports.iter().all(|s| s.class_index == a.class_index));
    }

    #[test]
    fn episode_sampling_needs_enough_images() {
        let ds = toy_dataset(&[(1, 3)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![1]));
        assert!(sample_episode(&pool, 2, 0).is_ok());
        assert!(matches!(
            sample_episode(&pool, 3, 0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn episode_class_frequencies_are_uniform() {
        let ds = toy_dataset(&[(1, 3), (2, 8), (3, 5), (4, 20)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![1, 2, 3, 4]));
        let trials = 10_000u64;
        let mut counts = BTreeMap::new();
        for seed in 0..trials {
            *counts.entry(sample_episode(&pool, 1, seed).unwrap().class_index).or_insert(0u64) += 1;
        }
        let p = 0.25;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (&c, &n) in &counts {
            assert!((n as f64 - mean).abs() <= 3.0 * sd, "class {c}: {n}");
        }
        assert_eq!(counts.len(), 4);
    }

    fn aux_for(source: &str, k: u32, img: RgbImage) -> GeneratedImage {
        GeneratedImage {
            image: img,
            provenance: Provenance {
                backend: "mock".into(),
                seed: 1,
                kind: ConditionKind::Scribble,
                source_id: source.into(),
                index: k,
            },
        }
    }

    #[test]
    fn extend_episode_cases() {
        let ds = toy_dataset(&[(1, 4)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![1]));
        let ep = sample_episode(&pool, 1, 7).unwrap();
        assert_eq!(extend_episode(&ep, &[]).unwrap(), ep);

        let src = ep.supports[0].id.clone();
        let aux: Vec<_> = (1..=4)
            .map(|k| aux_for(&src, k, RgbImage::from_pixel(4, 4, Rgb([k as u8; 3]))))
            .collect();
        let ext = extend_episode(&ep, &aux).unwrap();
        assert_eq!((ext.shots(), ext.k_original, ext.n_aux), (5, 1, 4));
        assert!(ext.supports.iter().all(|s| s.mask == ep.supports[0].mask));
        assert_eq!(ext.query, ep.query);
        assert!(matches!(extend_episode(&ext, &aux), Err(Error::NotOneShot(_))));

        let wrong = vec![aux_for("other", 1, RgbImage::from_pixel(4, 4, Rgb([0; 3])))];
        assert!(matches!(
            extend_episode(&ep, &wrong),
            Err(Error::ProvenanceMismatch { .. })
        ));
        let bad_dims = vec![aux_for(&src, 1, RgbImage::from_pixel(5, 4, Rgb([0; 3])))];
        assert!(matches!(
            extend_episode(&ep, &bad_dims),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn episode_serde_roundtrip() {
        let ds = toy_dataset(&[(2, 5)]);
        let pool = EpisodePool::new(&ds, custom_split(vec![2]));
        let ep = sample_episode(&pool, 2, 3).unwrap();
        let text = serde_json::to_string(&ep).unwrap();
        let back: Episode = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ep);
    }
}
