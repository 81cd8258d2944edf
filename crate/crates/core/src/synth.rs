//! Synthetic worlds with planted linear structure, plus brute-force
//! reference estimators.
//!
//! Generative process, all draws Gaussian:
//!
//! ```text
//! z_I            ~ N(0, I_K)                        latent attributes per image
//! h_l(I)         = A_l z_I + σ_l ε                  features of layer l, A_l ~ N(0, 1/K)
//! σ_l            = feature_noise · (1 + |l − L/2|)   noise is lowest mid-stack
//! attributes(I)  = z_I[..K_probe]
//! w̄_k           ~ N(0, c_k²),  w_u = w̄ + dispersion · N(0, c_k²)
//!                  c_k = 1 for probed latents, unprobed_weight otherwise
//! s_{I,u}        = w_u · z_I + b_u + rating_noise · ε,   b_u ~ N(0, bias_std²)
//! giaa(I)        = w̄ · z_I + giaa_noise · ε
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::piaa::{GiaaScores, RatingsTable};
use crate::probing::AttributeTable;
use crate::regression::{AlphaGrid, TIE_RTOL};
use crate::rng::{StreamRng, stream_rng};
use crate::store::{Component, FeatureMatrix, Pooling, StoreManifest, write_store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub n_users: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub probed_dim: usize,
    pub n_layers: usize,
    pub images_per_user: usize,
    pub feature_noise: f64,
    pub rating_noise: f64,
    pub giaa_noise: f64,
    pub user_dispersion: f64,
    pub unprobed_weight: f64,
    pub bias_std: f64,
    /// Fraction of images in the attribute-probing train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 2000,
            n_users: 200,
            feature_dim: 512,
            latent_dim: 16,
            probed_dim: 12,
            n_layers: 4,
            images_per_user: 160,
            feature_noise: 0.1,
            rating_noise: 0.1,
            giaa_noise: 0.1,
            user_dispersion: 0.5,
            unprobed_weight: 0.5,
            bias_std: 0.3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_images", self.n_images),
            ("n_users", self.n_users),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("probed_dim", self.probed_dim),
            ("n_layers", self.n_layers),
            ("images_per_user", self.images_per_user),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.probed_dim > self.latent_dim {
            return Err(Error::validation("probed_dim", "must not exceed latent_dim"));
        }
        if self.images_per_user > self.n_images {
            return Err(Error::validation("images_per_user", "must not exceed n_images"));
        }
        let non_negative = [
            ("feature_noise", self.feature_noise),
            ("rating_noise", self.rating_noise),
            ("giaa_noise", self.giaa_noise),
            ("user_dispersion", self.user_dispersion),
            ("unprobed_weight", self.unprobed_weight),
            ("bias_std", self.bias_std),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be finite and non-negative"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation("train_fraction", "must lie strictly between 0 and 1"));
        }
        let n_train = self.n_train();
        if n_train < 3 || n_train >= self.n_images {
            return Err(Error::validation("train_fraction", "leaves fewer than 3 train or no test images"));
        }
        Ok(())
    }

    fn n_train(&self) -> usize {
        (self.n_images as f64 * self.train_fraction).round() as usize
    }
}

/// Planted parameters, written as `world.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub mean_weight: Vec<f64>,
    pub user_ids: Vec<String>,
    pub user_weights: Vec<Vec<f64>>,
    pub user_biases: Vec<f64>,
    pub layer_noise: Vec<f64>,
}

/// Locations of a generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldFiles {
    pub root: PathBuf,
    pub features_dir: PathBuf,
    pub attributes: PathBuf,
    pub train_split: PathBuf,
    pub test_split: PathBuf,
    pub ratings: PathBuf,
    pub giaa: PathBuf,
    pub ground_truth: PathBuf,
}

impl WorldFiles {
    pub fn under(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            features_dir: root.join("features"),
            attributes: root.join("attributes.csv"),
            train_split: root.join("train.txt"),
            test_split: root.join("test.txt"),
            ratings: root.join("ratings.csv"),
            giaa: root.join("giaa.csv"),
            ground_truth: root.join("world.json"),
        }
    }

    pub fn layer_store(&self, layer: usize) -> PathBuf {
        self.features_dir.join(format!("layer_{layer:02}.fst"))
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub files: WorldFiles,
    pub truth: GroundTruth,
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn image_id(i: usize) -> String {
    format!("img_{i:05}")
}

pub fn user_id(u: usize) -> String {
    format!("user_{u:04}")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the world described by `config` and writes it under `root`.
/// Output bytes depend only on `config`.
pub fn generate_world(config: &SynthConfig, root: &Path) -> Result<SynthWorld> {
    config.validate()?;
    let files = WorldFiles::under(root);
    fs::create_dir_all(&files.features_dir).map_err(|e| Error::io(&files.features_dir, e))?;
    let (n, k, d) = (config.n_images, config.latent_dim, config.feature_dim);
    let ids: Vec<String> = (0..n).map(image_id).collect();

    let mut rng = stream_rng(config.seed, 0);
    let latents = DMatrix::from_fn(n, k, |_, _| normal(&mut rng));

    let mid = (config.n_layers as f64 - 1.0) / 2.0;
    let mut layer_noise = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let mut rng = stream_rng(config.seed, 100 + layer as u64);
        let mix_scale = 1.0 / (k as f64).sqrt();
        let mixing = DMatrix::from_fn(d, k, |_, _| normal(&mut rng) * mix_scale);
        let sigma = config.feature_noise * (1.0 + (layer as f64 - mid).abs());
        layer_noise.push(sigma);
        let mut feats = &latents * mixing.transpose();
        if sigma > 0.0 {
            feats.apply(|v| *v += sigma * normal(&mut rng));
        }
        let matrix = FeatureMatrix::from_dmatrix(&feats)?;
        let manifest = StoreManifest {
            model_id: "synth".into(),
            component: Component::LT,
            layer_index: layer as u32,
            prompt_id: "synth".into(),
            pooling: Pooling::Mean,
            dataset_id: "synth".into(),
            augmentation: String::new(),
            image_ids: ids.clone(),
        };
        write_store(&matrix, &manifest, &files.layer_store(layer))?;
    }

    let names = (0..config.probed_dim).map(|j| format!("attr_{j:02}")).collect();
    let probed: Vec<usize> = (0..config.probed_dim).collect();
    let attrs = AttributeTable::new(ids.clone(), names, latents.select_columns(&probed), None)?;
    write(&files.attributes, &attrs.to_csv())?;

    let mut rng = stream_rng(config.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = config.n_train();
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let list = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone() + "\n").collect::<String>();
    write(&files.train_split, &list(&train))?;
    write(&files.test_split, &list(&test))?;

    let coef_scale: Vec<f64> = (0..k)
        .map(|j| if j < config.probed_dim { 1.0 } else { config.unprobed_weight })
        .collect();
    let mut rng = stream_rng(config.seed, 2);
    let mean_weight: Vec<f64> = coef_scale.iter().map(|&c| c * normal(&mut rng)).collect();
    let w_bar = DVector::from_column_slice(&mean_weight);
    let mut giaa = GiaaScores::default();
    for (i, id) in ids.iter().enumerate() {
        let score = latents.row(i).transpose().dot(&w_bar) + config.giaa_noise * normal(&mut rng);
        giaa.0.insert(id.clone(), score);
    }
    write(&files.giaa, &giaa.to_csv())?;

    let mut records = Vec::with_capacity(config.n_users * config.images_per_user);
    let mut user_ids = Vec::with_capacity(config.n_users);
    let mut user_weights = Vec::with_capacity(config.n_users);
    let mut user_biases = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let mut rng = stream_rng(config.seed, 1000 + u as u64);
        let w: Vec<f64> = mean_weight
            .iter()
            .zip(&coef_scale)
            .map(|(&m, &c)| m + config.user_dispersion * c * normal(&mut rng))
            .collect();
        let bias = config.bias_std * normal(&mut rng);
        let wu = DVector::from_column_slice(&w);
        let mut rated = rand::seq::index::sample(&mut rng, n, config.images_per_user).into_vec();
        rated.sort_unstable();
        let uid = user_id(u);
        for i in rated {
            let s = latents.row(i).transpose().dot(&wu) + bias + config.rating_noise * normal(&mut rng);
            records.push((uid.clone(), ids[i].clone(), s));
        }
        user_ids.push(uid);
        user_weights.push(w);
        user_biases.push(bias);
    }
    let ratings = RatingsTable::new(records, None)?;
    write(&files.ratings, &ratings.to_csv())?;

    let truth = GroundTruth {
        config: config.clone(),
        mean_weight,
        user_ids,
        user_weights,
        user_biases,
        layer_noise,
    };
    write(
        &files.ground_truth,
        &serde_json::to_string_pretty(&truth).expect("ground truth serializes"),
    )?;
    Ok(SynthWorld { files, truth })
}

/// Ridge weights from the normal equations `(XᵀX + αI) w = Xᵀ(y − ȳ)` by
/// dense LU.
pub fn brute_force_ridge(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = x.nrows();
    if y.len() != n || n == 0 {
        return Err(Error::Dimension {
            expected: n,
            found: y.len(),
        });
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let mut gram = x.transpose() * x;
    for j in 0..gram.ncols() {
        gram[(j, j)] += alpha;
    }
    let rhs = x.transpose() * yc;
    let w = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular normal equations".into()))?;
    Ok(w.iter().copied().collect())
}

fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = if col.iter().all(|&v| v == col[0]) || var == 0.0 { 1.0 } else { var.sqrt() };
        col.apply(|v| *v = (*v - mean) / sd);
    }
    out
}

/// Mean squared held-out error of explicit leave-one-out refits, per
/// candidate penalty. Features are standardized once on all rows; each refit
/// re-centers on its own rows and leaves the intercept unpenalized.
pub fn brute_force_loo_errors(x: &DMatrix<f64>, y: &[f64], grid: &AlphaGrid) -> Vec<Option<f64>> {
    let n = x.nrows();
    let xs = standardize(x);
    grid.values()
        .iter()
        .map(|&alpha| {
            let mut total = 0.0;
            for i in 0..n {
                let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let mut xr = xs.select_rows(&keep);
                let yr: Vec<f64> = keep.iter().map(|&j| y[j]).collect();
                let means: Vec<f64> = xr
                    .column_iter()
                    .map(|c| c.iter().sum::<f64>() / (n - 1) as f64)
                    .collect();
                for (j, mut col) in xr.column_iter_mut().enumerate() {
                    col.add_scalar_mut(-means[j]);
                }
                let w = brute_force_ridge(&xr, &yr, alpha).ok()?;
                let ybar = yr.iter().sum::<f64>() / (n - 1) as f64;
                let pred = ybar
                    + (0..xs.ncols())
                        .map(|j| (xs[(i, j)] - means[j]) * w[j])
                        .sum::<f64>();
                total += (y[i] - pred).powi(2);
            }
            Some(total / n as f64)
        })
        .collect()
}

/// Penalty chosen by explicit leave-one-out refits; ties (within
/// [`TIE_RTOL`]) go to the smaller value.
pub fn brute_force_loo(x: &DMatrix<f64>, y: &[f64], grid: &AlphaGrid) -> f64 {
    let errors = brute_force_loo_errors(x, y, grid);
    let mut best: Option<(f64, f64)> = None;
    for (&alpha, err) in grid.values().iter().zip(errors) {
        let Some(err) = err else { continue };
        let improves = match best {
            None => true,
            Some((_, b)) => err < b - TIE_RTOL * b.abs(),
        };
        if improves {
            best = Some((alpha, err));
        }
    }
    best.map_or(grid.values()[0], |(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 0.5]);
        let y = [2.0, -1.0, 0.0, 3.0];
        let ybar = 1.0;
        let sxy: f64 = (0..4).map(|i| x[(i, 0)] * (y[i] - ybar)).sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let w = brute_force_ridge(&x, &y, 0.7).unwrap();
        assert!((w[0] - sxy / (sxx + 0.7)).abs() < 1e-14);
    }

    #[test]
    fn large_alpha_shrinks() {
        let x = DMatrix::from_fn(10, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let norm = |w: Vec<f64>| w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(brute_force_ridge(&x, &y, 1e9).unwrap()) < norm(brute_force_ridge(&x, &y, 1e-3).unwrap()));
    }

    #[test]
    fn exact_fit_picks_grid_minimum() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let y = [3.0, 5.0, 9.0];
        assert_eq!(brute_force_loo(&x, &y, &AlphaGrid::default()), 1e-3);
    }

    #[test]
    fn constant_target_ties_to_minimum() {
        let x = DMatrix::from_fn(5, 2, |i, j| (i * (j + 1)) as f64);
        assert_eq!(brute_force_loo(&x, &[2.0; 5], &AlphaGrid::default()), 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = SynthConfig::default();
        c.validate().unwrap();
        c.probed_dim = c.latent_dim + 1;
        assert!(c.validate().is_err());
        let c = SynthConfig {
            feature_dim: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
