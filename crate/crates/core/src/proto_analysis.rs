//! Prototype distribution of raw versus generated support images.
//!
//! Each sample is reduced to an L2-normalized masked-average prototype. The
//! set can be projected to 2D (deterministic PCA, or seeded exact t-SNE) and
//! scored for per-class agreement between generated and raw prototypes.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, RgbImage};
use crate::refseg::{self, cosine, FeatureExtractor, Prototype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Raw,
    Generated,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Generated => "generated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub class_index: u32,
    pub origin: Origin,
    pub id: String,
    pub prototype: Prototype,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub entries: Vec<PrototypeEntry>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accepts already-normalized vectors; rejects non-unit or ragged input.
    pub fn from_unit_vectors(items: Vec<(u32, Origin, Vec<f64>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(items.len());
        let dim = items.first().map(|i| i.2.len());
        for (i, (class_index, origin, v)) in items.into_iter().enumerate() {
            if Some(v.len()) != dim {
                return Err(Error::InvalidArgument("prototype dimensions differ".into()));
            }
            let p = Prototype {
                vector: v,
                norm_kind: refseg::NormKind::L2,
            };
            if (p.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "prototype {i} has norm {}",
                    p.norm()
                )));
            }
            entries.push(PrototypeEntry {
                class_index,
                origin,
                id: format!("p{i}"),
                prototype: p,
            });
        }
        Ok(Self { entries })
    }
}

pub struct ProtoSample<'a> {
    pub id: String,
    pub image: &'a RgbImage,
    pub mask: &'a BinaryMask,
    pub class_index: u32,
    pub origin: Origin,
}

/// extract, pool, normalize. Samples with empty masks are skipped; the
/// second return value counts them.
pub fn prototype_set(samples: &[ProtoSample<'_>], extractor: &dyn FeatureExtractor) -> Result<(PrototypeSet, usize)> {
    let mut entries = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        if s.mask.is_empty() {
            log::warn!("skipping {}: empty mask", s.id);
            skipped += 1;
            continue;
        }
        let features = refseg::extract_features(s.image, extractor)?;
        let pooled = refseg::masked_average_pool(&features, s.mask)?;
        entries.push(PrototypeEntry {
            class_index: s.class_index,
            origin: s.origin,
            id: s.id.clone(),
            prototype: refseg::l2_normalize(&pooled)?,
        });
    }
    Ok((PrototypeSet { entries }, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Pca,
    Tsne,
}

impl FromStr for Reducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "tsne" | "t-sne" => Ok(Self::Tsne),
            other => Err(Error::InvalidArgument(format!("unknown reducer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / (4 * early_exaggeration), 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub x: f64,
    pub y: f64,
    pub class_index: u32,
    pub origin: Origin,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub points: Vec<EmbeddedPoint>,
    pub reducer: Reducer,
    pub seed: Option<u64>,
    /// PCA only: mean and the two principal axes.
    pub basis: Option<PcaBasis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

impl PcaBasis {
    pub fn reconstruct(&self, x: f64, y: f64) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.axes[0])
            .zip(&self.axes[1])
            .map(|((m, a), b)| m + x * a + y * b)
            .collect()
    }
}

/// Top-2 principal components of the mean-centered rows. Each axis is
/// signed so that its largest-magnitude coordinate is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, PcaBasis)> {
    if rows.len() < 2 {
        return Err(Error::Degenerate("PCA needs at least two points".into()));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("PCA rows need equal dimension >= 2".into()));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let scale = cov.diagonal().iter().cloned().fold(0.0, f64::max);
    if scale <= 1e-24 {
        return Err(Error::Degenerate(
            "all prototypes are identical; covariance is zero".into(),
        ));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() + 1e-12 {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    let variances = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
    Ok((coords, PcaBasis { mean, axes, variances }))
}

/// Exact t-SNE (O(n^2) memory), for the small sets this tool exports.
pub fn tsne_2d(rows: &[Vec<f64>], cfg: &TsneConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Degenerate("t-SNE needs at least two points".into()));
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let d: Vec<f64> = (0..n * n).map(|k| dist2(&rows[k / n], &rows[k % n])).collect();

    // Conditional affinities with a per-point bandwidth matched to the perplexity.
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-beta * d[i * n + j]).exp();
                    sum += w;
                    weighted += w * d[i * n + j];
                }
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * weighted / sum;
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[i * n + j] = (-beta * d[i * n + j]).exp();
                sum += p[i * n + j];
            }
        }
        for j in 0..n {
            p[i * n + j] /= sum.max(1e-300);
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let lr = cfg
        .learning_rate
        .unwrap_or_else(|| (n as f64 / (4.0 * cfg.early_exaggeration)).max(50.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut q = vec![0.0; n * n];
    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2))
                };
                q[i * n + j] = v;
                qsum += v;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let num = q[i * n + j];
                let coeff = 4.0 * (exaggeration * pj[i * n + j] - num / qsum) * num;
                grad[0] += coeff * (y[i][0] - y[j][0]);
                grad[1] += coeff * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (grad[c] > 0.0) != (velocity[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                velocity[i][c] = momentum * velocity[i][c] - lr * gains[i][c] * grad[c];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let cx = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        for p in &mut y {
            p[0] -= cx;
            p[1] -= cy;
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Degenerate("t-SNE diverged".into()));
    }
    Ok(y)
}

pub fn embed2d(ps: &PrototypeSet, reducer: Reducer, seed: u64, tsne: &TsneConfig) -> Result<EmbeddingExport> {
    if ps.len() < 2 {
        return Err(Error::Degenerate("need at least two prototypes".into()));
    }
    let rows: Vec<Vec<f64>> = ps.entries.iter().map(|e| e.prototype.vector.clone()).collect();
    if rows.iter().all(|r| r == &rows[0]) {
        return Err(Error::Degenerate(
            "all prototypes are identical; covariance is zero".into(),
        ));
    }
    let (coords, basis, seed) = match reducer {
        Reducer::Pca => {
            let (c, b) = pca_2d(&rows)?;
            (c, Some(b), None)
        }
        Reducer::Tsne => (tsne_2d(&rows, tsne, seed)?, None, Some(seed)),
    };
    let points = ps
        .entries
        .iter()
        .zip(coords)
        .map(|(e, [x, y])| EmbeddedPoint {
            x,
            y,
            class_index: e.class_index,
            origin: e.origin,
            id: e.id.clone(),
        })
        .collect();
    Ok(EmbeddingExport {
        points,
        reducer,
        seed,
        basis,
    })
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Per class: mean cosine between each generated prototype and the
/// renormalized centroid of that class's raw prototypes.
pub fn consistency_score(ps: &PrototypeSet) -> Result<BTreeMap<u32, f64>> {
    let mut raw: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    let mut generated: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for e in &ps.entries {
        let bucket = match e.origin {
            Origin::Raw => &mut raw,
            Origin::Generated => &mut generated,
        };
        bucket.entry(e.class_index).or_default().push(&e.prototype.vector);
    }
    for &class in raw.keys().chain(generated.keys()) {
        if !raw.contains_key(&class) {
            return Err(Error::MissingOrigin { class, origin: "raw" });
        }
        if !generated.contains_key(&class) {
            return Err(Error::MissingOrigin {
                class,
                origin: "generated",
            });
        }
    }
    let mut out = BTreeMap::new();
    for (class, raws) in &raw {
        let dim = raws[0].len();
        let mut mean = vec![0.0; dim];
        for r in raws {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / raws.len() as f64;
            }
        }
        let centroid = normalize(&mean).ok_or_else(|| {
            Error::Degenerate(format!("raw prototypes of class {class} cancel out"))
        })?;
        let gens = &generated[class];
        let score = gens.iter().map(|g| cosine(g, &centroid)).sum::<f64>() / gens.len() as f64;
        out.insert(*class, score);
    }
    Ok(out)
}

impl EmbeddingExport {
    /// `x,y,class,origin` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x", "y", "class", "origin"])
            .and_then(|_| {
                for p in &self.points {
                    w.write_record([
                        format!("{}", p.x),
                        format!("{}", p.y),
                        p.class_index.to_string(),
                        p.origin.to_string(),
                    ])?;
                }
                Ok(())
            })
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Scatter plot: one hue per class, dark filled dots for raw prototypes
    /// and light rings for generated ones.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 24.0;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &self.points {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let sx = if x1 > x0 { (SIZE - 2.0 * PAD) / (x1 - x0) } else { 1.0 };
        let sy = if y1 > y0 { (SIZE - 2.0 * PAD) / (y1 - y0) } else { 1.0 };
        let classes: Vec<u32> = {
            let mut c: Vec<u32> = self.points.iter().map(|p| p.class_index).collect();
            c.sort();
            c.dedup();
            c
        };
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        for p in &self.points {
            let hue = 360.0 * classes.iter().position(|&c| c == p.class_index).unwrap_or(0) as f64
                / classes.len().max(1) as f64;
            let cx = PAD + (p.x - x0) * sx;
            let cy = SIZE - PAD - (p.y - y0) * sy;
            let _ = match p.origin {
                Origin::Raw => writeln!(
                    out,
                    "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"hsl({hue:.0},70%,30%)\"><title>{} class {}</title></circle>",
                    p.id, p.class_index
                ),
                Origin::Generated => writeln!(
                    out,
                    "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"none\" stroke=\"hsl({hue:.0},70%,70%)\"><title>{} class {}</title></circle>",
                    p.id, p.class_index
                ),
            };
        }
        out.push_str("</svg>\n");
        out
    }
}
