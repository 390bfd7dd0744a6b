//! k-means codebook training (k-means++ seeding, Lloyd iterations) and
//! nearest-centroid tokenization.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::FeatureSequence;
use crate::tokenseq::{Origin, TokenForm, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub iterations_run: usize,
    pub final_inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f64>,
    pub train_meta: TrainMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Relative inertia improvement below which training stops.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(x: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Vec<(usize, f64)> {
    features
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|x| nearest(x, centroids))
        .collect()
}

fn kmeans_plus_plus(
    features: ArrayView2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let n = features.nrows();
    let mut centroids = Array2::zeros((k, features.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut dists: Vec<f64> = features
        .outer_iter()
        .map(|x| sq_dist(x, features.row(first)))
        .collect();
    for c in 1..k {
        let next = match WeightedIndex::new(&dists) {
            Ok(w) => w.sample(rng),
            Err(_) => {
                return Err(Error::Config(format!(
                    "data has fewer than k = {k} distinct points"
                )))
            }
        };
        centroids.row_mut(c).assign(&features.row(next));
        for (d, x) in dists.iter_mut().zip(features.outer_iter()) {
            *d = d.min(sq_dist(x, features.row(next)));
        }
    }
    Ok(centroids)
}

/// Trains a `k`-centroid codebook on the rows of `features`.
pub fn kmeans_train(
    features: ArrayView2<f64>,
    k: usize,
    seed: u64,
    config: KMeansConfig,
) -> Result<Codebook> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { k, n });
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means features"));
    }
    let dim = features.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng)?;
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..config.max_iters.max(1) {
        let assignment = assign(features, centroids.view());
        let inertia: f64 = assignment.iter().map(|a| a.1).sum();
        let converged = match history.last() {
            Some(&prev) => prev <= 0.0 || (prev - inertia) < config.tol * prev,
            None => inertia == 0.0,
        };
        history.push(inertia);
        if converged || history.len() == config.max_iters.max(1) {
            break;
        }

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (x, &(j, _)) in features.outer_iter().zip(&assignment) {
            sums.row_mut(j).zip_mut_with(&x, |s, &v| *s += v);
            counts[j] += 1;
        }
        let mut dists: Vec<f64> = assignment.iter().map(|a| a.1).collect();
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(j) / count as f64;
                centroids.row_mut(j).assign(&mean);
            } else {
                // Empty cluster: move it onto the point worst served by its centroid.
                let (far, _) =
                    dists
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &d)| {
                            if d > best.1 {
                                (i, d)
                            } else {
                                best
                            }
                        });
                centroids.row_mut(j).assign(&features.row(far));
                dists[far] = 0.0;
            }
        }
    }

    let final_inertia = *history.last().unwrap_or(&0.0);
    Ok(Codebook {
        centroids,
        train_meta: TrainMeta {
            seed,
            iterations_run: history.len(),
            final_inertia,
            inertia_history: history,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    version: u32,
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    train_meta: TrainMeta,
}

impl Codebook {
    pub fn from_centroids(centroids: Array2<f64>, train_meta: TrainMeta) -> Result<Self> {
        if centroids.nrows() == 0 {
            return Err(Error::Config("codebook needs at least one centroid".into()));
        }
        if centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("centroids"));
        }
        Ok(Self {
            centroids,
            train_meta,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> ArrayView2<'_, f64> {
        self.centroids.view()
    }

    /// Copy with centroids rounded to f32, i.e. exactly what the file stores.
    pub fn quantized(&self) -> Codebook {
        Codebook {
            centroids: self.centroids.mapv(|x| x as f32 as f64),
            train_meta: self.train_meta.clone(),
        }
    }

    pub fn assign_frames(&self, frames: ArrayView2<f64>) -> Result<Vec<usize>> {
        if frames.ncols() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: frames.ncols(),
            });
        }
        Ok(frames
            .outer_iter()
            .map(|x| nearest(x, self.centroids.view()).0)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CodebookFile {
            version: 1,
            k: self.k(),
            dim: self.feature_dim(),
            centroids: self.centroids.iter().map(|&x| x as f32).collect(),
            train_meta: self.train_meta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodebookFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(Error::Parse(format!(
                "unsupported codebook version {}",
                file.version
            )));
        }
        if file.centroids.len() != file.k * file.dim {
            return Err(Error::Parse(format!(
                "codebook has {} values, expected {} x {}",
                file.centroids.len(),
                file.k,
                file.dim
            )));
        }
        let centroids = Array2::from_shape_vec(
            (file.k, file.dim),
            file.centroids.into_iter().map(f64::from).collect(),
        )
        .map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_centroids(centroids, file.train_meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Maps every frame to its nearest centroid id (duplicated form).
pub fn tokenize(
    features: &FeatureSequence,
    codebook: &Codebook,
    origin: Origin,
) -> Result<TokenSequence> {
    let ids = codebook.assign_frames(features.frames.view())?;
    TokenSequence::new(ids, codebook.k(), TokenForm::Duplicated, origin)
}
