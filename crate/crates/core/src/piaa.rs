//! Personalized evaluation protocol: user sampling, per-user support/test
//! splits, the Linear-Hidden estimators and the Adjust-Bias baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, UserEvalRecord, aggregate, cmp_defined_first, spearman};
use crate::probing::fmt_opt;
use crate::regression::{AlphaGrid, ProbeModel, ridge_cv_fit};
use crate::rng::keyed_rng;
use crate::store::FeatureStore;
use crate::tables::{DelimitedTable, parse_f64};

pub const DEFAULT_SUPPORT: usize = 100;
pub const DEFAULT_TEST: usize = 50;
pub const DEFAULT_USERS: usize = 200;

/// Personal scores keyed by user, then image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatingsTable {
    by_user: BTreeMap<String, BTreeMap<String, f64>>,
    pub score_range: Option<(f64, f64)>,
}

impl RatingsTable {
    pub fn new(
        records: impl IntoIterator<Item = (String, String, f64)>,
        score_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        let mut by_user: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (user, image, score) in records {
            if !score.is_finite() {
                return Err(Error::validation("score", format!("non-finite score for ({user}, {image})")));
            }
            if let Some((lo, hi)) = score_range {
                if score < lo || score > hi {
                    return Err(Error::validation(
                        "score",
                        format!("score {score} for ({user}, {image}) outside [{lo}, {hi}]"),
                    ));
                }
            }
            if by_user.entry(user.clone()).or_default().insert(image.clone(), score).is_some() {
                return Err(Error::validation(
                    "ratings",
                    format!("duplicate rating for user `{user}`, image `{image}`"),
                ));
            }
        }
        Ok(Self {
            by_user,
            score_range,
        })
    }

    /// Parses `user_id,image_id,score`.
    pub fn from_csv(text: &str, source: &str, score_range: Option<(f64, f64)>) -> Result<Self> {
        let table = DelimitedTable::parse(text, source)?;
        let (uc, ic, sc) = (
            table.column("user_id", source)?,
            table.column("image_id", source)?,
            table.column("score", source)?,
        );
        let mut records = Vec::with_capacity(table.rows.len());
        for (i, row) in table.rows.iter().enumerate() {
            records.push((row[uc].clone(), row[ic].clone(), parse_f64(&row[sc], source, i + 1)?));
        }
        Self::new(records, score_range)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["user_id", "image_id", "score"]).unwrap();
        for (user, images) in &self.by_user {
            for (image, score) in images {
                w.write_record([user.as_str(), image.as_str(), &score.to_string()]).unwrap();
            }
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// User ids in canonical (sorted) order.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn user(&self, user_id: &str) -> Result<&BTreeMap<String, f64>> {
        self.by_user
            .get(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))
    }

    /// Affinely maps every score from `from` to `to`.
    pub fn rescaled(&self, from: (f64, f64), to: (f64, f64)) -> Result<Self> {
        let mut records = Vec::new();
        for (user, images) in &self.by_user {
            let ids: Vec<&String> = images.keys().collect();
            let scores: Vec<f64> = images.values().copied().collect();
            let mapped = rescale_scores(&scores, from, to)?;
            records.extend(ids.into_iter().zip(mapped).map(|(i, s)| (user.clone(), i.clone(), s)));
        }
        Self::new(records, Some(to))
    }
}

/// Affine map of `scores` from `from` onto `to`; e.g. `[0,100] → [1,5]` is
/// `s' = 1 + 4s/100`.
pub fn rescale_scores(scores: &[f64], from: (f64, f64), to: (f64, f64)) -> Result<Vec<f64>> {
    if !(from.0 < from.1) || !(to.0 < to.1) {
        return Err(Error::validation("range", "bounds must satisfy lo < hi"));
    }
    scores
        .iter()
        .map(|&s| {
            if !(s >= from.0 && s <= from.1) {
                return Err(Error::validation(
                    "score",
                    format!("{s} outside [{}, {}]", from.0, from.1),
                ));
            }
            Ok(to.0 + (to.1 - to.0) * (s - from.0) / (from.1 - from.0))
        })
        .collect()
}

/// Per-image scalar scores: group-level ground truth or a model's generic
/// predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GiaaScores(pub BTreeMap<String, f64>);

impl GiaaScores {
    /// Parses `image_id,score`.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let table = DelimitedTable::parse(text, source)?;
        let ic = table.column("image_id", source)?;
        let sc = table.column("score", source)?;
        let mut map = BTreeMap::new();
        for (i, row) in table.rows.iter().enumerate() {
            let score = parse_f64(&row[sc], source, i + 1)?;
            if map.insert(row[ic].clone(), score).is_some() {
                return Err(Error::parse(source, format!("duplicate image `{}`", row[ic])));
            }
        }
        Ok(Self(map))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "score"]).unwrap();
        for (id, s) in &self.0 {
            w.write_record([id.as_str(), &s.to_string()]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn get(&self, image_id: &str) -> Result<f64> {
        self.0
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn scores_for<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<f64>> {
        ids.iter().map(|id| self.get(id.as_ref())).collect()
    }
}

/// One user's disjoint support and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub support: Vec<(String, f64)>,
    pub test: Vec<(String, f64)>,
}

impl UserSplit {
    pub fn new(user_id: String, support: Vec<(String, f64)>, test: Vec<(String, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::validation("support", format!("empty for user `{user_id}`")));
        }
        if test.len() < 2 {
            return Err(Error::validation(
                "test",
                format!("user `{user_id}` needs at least 2 test images, has {}", test.len()),
            ));
        }
        let support_ids: BTreeSet<&str> = support.iter().map(|(i, _)| i.as_str()).collect();
        if let Some((id, _)) = test.iter().find(|(i, _)| support_ids.contains(i.as_str())) {
            return Err(Error::validation(
                "split",
                format!("image `{id}` in both support and test for user `{user_id}`"),
            ));
        }
        Ok(Self {
            user_id,
            support,
            test,
        })
    }

    pub fn support_ids(&self) -> Vec<&str> {
        self.support.iter().map(|(i, _)| i.as_str()).collect()
    }

    pub fn test_ids(&self) -> Vec<&str> {
        self.test.iter().map(|(i, _)| i.as_str()).collect()
    }

    pub fn support_scores(&self) -> Vec<f64> {
        self.support.iter().map(|&(_, s)| s).collect()
    }

    pub fn test_scores(&self) -> Vec<f64> {
        self.test.iter().map(|&(_, s)| s).collect()
    }
}

/// Uniform sample of `n_users` among users with at least `min_images`
/// ratings, returned in canonical order.
pub fn sample_users(
    ratings: &RatingsTable,
    n_users: usize,
    min_images: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let eligible: Vec<&String> = ratings
        .by_user
        .iter()
        .filter(|(_, images)| images.len() >= min_images)
        .map(|(u, _)| u)
        .collect();
    if eligible.len() < n_users {
        return Err(Error::Insufficient(format!(
            "{n_users} users requested but only {} have at least {min_images} ratings (short by {})",
            eligible.len(),
            n_users - eligible.len()
        )));
    }
    let mut rng = keyed_rng(seed, "sample_users");
    let mut picked = rand::seq::index::sample(&mut rng, eligible.len(), n_users).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| eligible[i].clone()).collect())
}

/// Draws the test set first and the support set from the remainder, so the
/// test set for a given `(seed, user)` does not depend on `support_size`.
pub fn make_user_split(
    ratings: &RatingsTable,
    user_id: &str,
    support_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<UserSplit> {
    let images = ratings.user(user_id)?;
    let need = support_size + test_size;
    if images.len() < need {
        return Err(Error::Insufficient(format!(
            "user `{user_id}` has {} ratings, needs {need}",
            images.len()
        )));
    }
    let pool: Vec<(&String, &f64)> = images.iter().collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut keyed_rng(seed, user_id));
    let take = |range: std::ops::Range<usize>| -> Vec<(String, f64)> {
        order[range]
            .iter()
            .map(|&i| (pool[i].0.clone(), *pool[i].1))
            .collect()
    };
    UserSplit::new(user_id.to_string(), take(test_size..need), take(0..test_size))
}

/// Per-user `(user_id, image_id, role)` assignments replacing random splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitOverrides(BTreeMap<String, (Vec<String>, Vec<String>)>);

impl SplitOverrides {
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let table = DelimitedTable::parse(text, source)?;
        let (uc, ic, rc) = (
            table.column("user_id", source)?,
            table.column("image_id", source)?,
            table.column("role", source)?,
        );
        let mut map: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
        for (i, row) in table.rows.iter().enumerate() {
            let entry = map.entry(row[uc].clone()).or_default();
            match row[rc].as_str() {
                "support" => entry.0.push(row[ic].clone()),
                "test" => entry.1.push(row[ic].clone()),
                other => {
                    return Err(Error::parse(
                        source,
                        format!("row {}: role `{other}` is not support or test", i + 1),
                    ));
                }
            }
        }
        Ok(Self(map))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// The override split for `user_id`, with scores from `ratings`.
    pub fn split_for(&self, ratings: &RatingsTable, user_id: &str) -> Result<UserSplit> {
        let (support, test) = self
            .0
            .get(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_string()))?;
        let images = ratings.user(user_id)?;
        let lookup = |ids: &[String]| -> Result<Vec<(String, f64)>> {
            ids.iter()
                .map(|id| {
                    images.get(id).map(|&s| (id.clone(), s)).ok_or_else(|| {
                        Error::validation(
                            "split override",
                            format!("user `{user_id}` has no rating for image `{id}`"),
                        )
                    })
                })
                .collect()
        };
        UserSplit::new(user_id.to_string(), lookup(support)?, lookup(test)?)
    }
}

/// Regression target for Linear-Hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    Personal,
    Giaa,
}

/// Ridge from features to the user's support scores (or the images' GIAA
/// scores), evaluated against the user's personal test scores.
pub fn linear_hidden_eval(
    store: &FeatureStore,
    split: &UserSplit,
    targets: Targets,
    giaa: Option<&GiaaScores>,
    grid: &AlphaGrid,
) -> Result<UserEvalRecord> {
    let support_ids = split.support_ids();
    let y = match (targets, giaa) {
        (Targets::Personal, None) => split.support_scores(),
        (Targets::Giaa, Some(g)) => g.scores_for(&support_ids)?,
        (Targets::Personal, Some(_)) => {
            return Err(Error::validation("giaa", "supplied for personal targets"));
        }
        (Targets::Giaa, None) => return Err(Error::validation("giaa", "required for GIAA targets")),
    };
    let x = store.rows_for(&support_ids)?;
    let x_test = store.rows_for(&split.test_ids())?;
    fit_and_score(&x, &y, &x_test, split, grid)
}

fn fit_and_score(
    x: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    split: &UserSplit,
    grid: &AlphaGrid,
) -> Result<UserEvalRecord> {
    let model = ridge_cv_fit(x, y, grid)?;
    let pred = model.predict(x_test)?;
    UserEvalRecord::evaluate(&split.user_id, &split.test_scores(), pred.as_slice())
}

/// Two-stage estimator: features → probed attributes via `probe`, then a
/// user ridge on the K attribute predictions.
pub fn reduce_eval(
    store: &FeatureStore,
    split: &UserSplit,
    probe: &ProbeModel,
    grid: &AlphaGrid,
) -> Result<UserEvalRecord> {
    if probe.input_dim() != store.dim() {
        return Err(Error::Dimension {
            expected: store.dim(),
            found: probe.input_dim(),
        });
    }
    let x = probe.predict(&store.rows_for(&split.support_ids())?)?;
    let x_test = probe.predict(&store.rows_for(&split.test_ids())?)?;
    fit_and_score(&x, &split.support_scores(), &x_test, split, grid)
}

/// Mean of `prediction − score` over the support set.
pub fn user_bias(predictions: &GiaaScores, split: &UserSplit) -> Result<f64> {
    let v = predictions.scores_for(&split.support_ids())?;
    let total: f64 = v.iter().zip(split.support_scores()).map(|(p, s)| p - s).sum();
    Ok(total / v.len() as f64)
}

/// Generic predictions shifted by the user's support-set bias.
pub fn adjust_bias_eval(predictions: &GiaaScores, split: &UserSplit) -> Result<UserEvalRecord> {
    let bias = user_bias(predictions, split)?;
    let adjusted: Vec<f64> = predictions
        .scores_for(&split.test_ids())?
        .into_iter()
        .map(|v| v - bias)
        .collect();
    UserEvalRecord::evaluate(&split.user_id, &split.test_scores(), &adjusted)
}

/// Generic predictions scored as-is on the user's test set.
pub fn raw_eval(predictions: &GiaaScores, split: &UserSplit) -> Result<UserEvalRecord> {
    let pred = predictions.scores_for(&split.test_ids())?;
    UserEvalRecord::evaluate(&split.user_id, &split.test_scores(), &pred)
}

/// Spearman agreement between each user's ratings and the GIAA scores of
/// the same images, over every rated image that has a GIAA score.
pub fn user_giaa_agreement(ratings: &RatingsTable, giaa: &GiaaScores) -> Vec<(String, Option<f64>)> {
    ratings
        .by_user
        .iter()
        .map(|(user, images)| {
            let (mine, group): (Vec<f64>, Vec<f64>) = images
                .iter()
                .filter_map(|(id, &s)| giaa.0.get(id).map(|&g| (s, g)))
                .unzip();
            let rho = spearman(&mine, &group).ok().and_then(|m| m.value);
            (user.clone(), rho)
        })
        .collect()
}

/// The `k` users whose ratings agree least with GIAA scores, most
/// divergent first. Users with undefined agreement are skipped.
pub fn select_hard_users(ratings: &RatingsTable, giaa: &GiaaScores, k: usize) -> Result<Vec<String>> {
    let mut scored: Vec<(String, f64)> = user_giaa_agreement(ratings, giaa)
        .into_iter()
        .filter_map(|(u, r)| r.map(|r| (u, r)))
        .collect();
    if scored.len() < k {
        return Err(Error::Insufficient(format!(
            "{k} hard users requested but only {} have defined GIAA agreement",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(u, _)| u).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiaaMethod {
    LinearHidden,
    LinearHiddenGiaa,
    LinearHiddenReduce,
    AdjustBias,
    /// Generic per-image predictions evaluated without adjustment.
    Raw,
}

impl PiaaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PiaaMethod::LinearHidden => "linear-hidden",
            PiaaMethod::LinearHiddenGiaa => "linear-hidden-giaa",
            PiaaMethod::LinearHiddenReduce => "reduce",
            PiaaMethod::AdjustBias => "adjust-bias",
            PiaaMethod::Raw => "raw",
        }
    }

    pub fn needs_features(self) -> bool {
        matches!(
            self,
            PiaaMethod::LinearHidden | PiaaMethod::LinearHiddenGiaa | PiaaMethod::LinearHiddenReduce
        )
    }

    pub fn needs_giaa(self) -> bool {
        matches!(self, PiaaMethod::LinearHiddenGiaa | PiaaMethod::AdjustBias | PiaaMethod::Raw)
    }
}

impl fmt::Display for PiaaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiaaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear-hidden" => PiaaMethod::LinearHidden,
            "linear-hidden-giaa" | "giaa" => PiaaMethod::LinearHiddenGiaa,
            "reduce" | "linear-hidden-reduce" => PiaaMethod::LinearHiddenReduce,
            "adjust-bias" => PiaaMethod::AdjustBias,
            "raw" => PiaaMethod::Raw,
            other => return Err(Error::validation("method", format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PiaaMethodConfig {
    pub method: PiaaMethod,
    pub grid: AlphaGrid,
    pub support_size: usize,
    pub test_size: usize,
    pub probe_model: Option<ProbeModel>,
}

impl PiaaMethodConfig {
    pub fn new(method: PiaaMethod) -> Self {
        Self {
            method,
            grid: AlphaGrid::default(),
            support_size: DEFAULT_SUPPORT,
            test_size: DEFAULT_TEST,
            probe_model: None,
        }
    }
}

/// Everything a protocol run reads.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolInputs<'a> {
    pub ratings: &'a RatingsTable,
    pub store: Option<&'a FeatureStore>,
    /// GIAA targets, or generic predictions for the baseline methods.
    pub giaa: Option<&'a GiaaScores>,
    pub overrides: Option<&'a SplitOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFailure {
    pub user_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub method: PiaaMethod,
    /// Sorted by user id.
    pub records: Vec<UserEvalRecord>,
    pub failures: Vec<UserFailure>,
    /// `None` when every user failed.
    pub aggregate: Option<AggregateReport>,
}

impl ProtocolResult {
    /// Per-user Spearman values, undefined ones dropped.
    pub fn defined_rho(&self) -> Vec<(String, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.rho.value.map(|v| (r.user_id.clone(), v)))
            .collect()
    }

    /// `user_id,rho,r2,n_test,status,reason`, failures included.
    pub fn users_csv(&self) -> String {
        let mut rows: Vec<[String; 6]> = self
            .records
            .iter()
            .map(|r| {
                [
                    r.user_id.clone(),
                    fmt_opt(r.rho.value),
                    fmt_opt(r.r2.value),
                    r.n_test.to_string(),
                    "ok".into(),
                    String::new(),
                ]
            })
            .chain(self.failures.iter().map(|f| {
                [
                    f.user_id.clone(),
                    "NA".into(),
                    "NA".into(),
                    "0".into(),
                    "failed".into(),
                    f.reason.clone(),
                ]
            }))
            .collect();
        rows.sort_by(|a, b| a[0].cmp(&b[0]));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["user_id", "rho", "r2", "n_test", "status", "reason"]).unwrap();
        for row in rows {
            w.write_record(&row).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "mean_rho",
            "mean_r2",
            "n_users_total",
            "n_rho_undefined",
            "n_r2_undefined",
            "n_failed",
        ])
        .unwrap();
        let agg = self.aggregate.as_ref();
        w.write_record([
            self.method.as_str().to_string(),
            fmt_opt(agg.and_then(|a| a.mean_rho)),
            fmt_opt(agg.and_then(|a| a.mean_r2)),
            agg.map_or(0, |a| a.n_users_total).to_string(),
            agg.map_or(0, |a| a.n_rho_undefined).to_string(),
            agg.map_or(0, |a| a.n_r2_undefined).to_string(),
            self.failures.len().to_string(),
        ])
        .unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

fn check_config(config: &PiaaMethodConfig, inputs: &ProtocolInputs<'_>) -> Result<()> {
    let method = config.method;
    if method.needs_features() && inputs.store.is_none() {
        return Err(Error::validation("features", format!("method {method} requires a feature store")));
    }
    if method.needs_giaa() && inputs.giaa.is_none() {
        return Err(Error::validation("giaa", format!("method {method} requires a GIAA score file")));
    }
    if method == PiaaMethod::LinearHiddenReduce {
        let probe = config
            .probe_model
            .as_ref()
            .ok_or_else(|| Error::validation("probe_model", "reduce requires a probe model"))?;
        let dim = inputs.store.map_or(0, FeatureStore::dim);
        if probe.input_dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: probe.input_dim(),
            });
        }
    }
    Ok(())
}

fn evaluate_user(
    config: &PiaaMethodConfig,
    inputs: &ProtocolInputs<'_>,
    user_id: &str,
    seed: u64,
) -> Result<UserEvalRecord> {
    let split = match inputs.overrides {
        Some(o) => o.split_for(inputs.ratings, user_id)?,
        None => make_user_split(inputs.ratings, user_id, config.support_size, config.test_size, seed)?,
    };
    let store = || inputs.store.expect("checked");
    let giaa = || inputs.giaa.expect("checked");
    match config.method {
        PiaaMethod::LinearHidden => {
            linear_hidden_eval(store(), &split, Targets::Personal, None, &config.grid)
        }
        PiaaMethod::LinearHiddenGiaa => {
            linear_hidden_eval(store(), &split, Targets::Giaa, Some(giaa()), &config.grid)
        }
        PiaaMethod::LinearHiddenReduce => reduce_eval(
            store(),
            &split,
            config.probe_model.as_ref().expect("checked"),
            &config.grid,
        ),
        PiaaMethod::AdjustBias => adjust_bias_eval(giaa(), &split),
        PiaaMethod::Raw => raw_eval(giaa(), &split),
    }
}

/// Runs one method over `users`. A user whose evaluation fails is recorded
/// as a failure and the run continues.
pub fn run_protocol(
    config: &PiaaMethodConfig,
    users: &[String],
    inputs: &ProtocolInputs<'_>,
    seed: u64,
) -> Result<ProtocolResult> {
    check_config(config, inputs)?;
    let unique: BTreeSet<&String> = users.iter().collect();
    if unique.len() != users.len() {
        return Err(Error::validation("users", "duplicate user ids"));
    }
    let outcomes: Vec<(String, Result<UserEvalRecord>)> = unique
        .into_par_iter()
        .map(|u| (u.clone(), evaluate_user(config, inputs, u, seed)))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (user_id, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(UserFailure {
                user_id,
                reason: e.to_string(),
            }),
        }
    }
    let aggregate = if records.is_empty() {
        None
    } else {
        Some(aggregate(&records)?)
    };
    Ok(ProtocolResult {
        method: config.method,
        records,
        failures,
        aggregate,
    })
}

/// Aligns two runs by user, keeping users whose ρ is defined in both.
pub fn paired_rho(baseline: &ProtocolResult, candidate: &ProtocolResult) -> (Vec<f64>, Vec<f64>) {
    let cand: BTreeMap<String, f64> = candidate.defined_rho().into_iter().collect();
    baseline
        .defined_rho()
        .into_iter()
        .filter_map(|(u, b)| cand.get(&u).map(|&c| (b, c)))
        .unzip()
}

/// Sorts `(id, value)` pairs ascending with undefined values last.
pub fn sort_by_value(items: &mut [(String, Option<f64>)]) {
    items.sort_by(|a, b| cmp_defined_first(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
}
