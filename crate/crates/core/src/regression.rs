//! Standardize-then-ridge estimators with exact leave-one-out selection of
//! the penalty.
//!
//! Features are standardized with a population-std [`Scaler`]; the target is
//! centered and the intercept is left unpenalized. For standardized `X` with
//! thin SVD `X = U S Vᵀ` the ridge solution is
//!
//! ```text
//! w(α) = V diag(s / (s² + α)) Uᵀ (y − ȳ)
//! ```
//!
//! and the leave-one-out residual of row `i` follows from the hat matrix
//! `H = 11ᵀ/N + U diag(s² / (s² + α)) Uᵀ` as `e_i / (1 − H_ii)`. One SVD
//! serves every penalty in the grid and every target column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidates whose leverage leaves `1 − H_ii` at or below this are skipped.
pub const LEVERAGE_FLOOR: f64 = 1e-12;

/// Relative slack under which two LOO errors count as tied; ties go to the
/// smaller penalty.
pub const TIE_RTOL: f64 = 1e-9;

/// Strictly increasing list of positive ridge penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid(Vec<f64>);

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("alpha grid", "must not be empty"));
        }
        if values.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
            return Err(Error::validation("alpha grid", "values must be finite and positive"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("alpha grid", "values must be strictly increasing"));
        }
        Ok(Self(values))
    }

    /// `count` values log-spaced over `[lo, hi]`, endpoints included.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || count < 2 {
            return Err(Error::validation("alpha grid", "need 0 < lo < hi and count ≥ 2"));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let step = (b - a) / (count - 1) as f64;
        Self::new((0..count).map(|k| 10f64.powf(a + step * k as f64)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn contains(&self, alpha: f64) -> bool {
        self.0.contains(&alpha)
    }
}

impl Default for AlphaGrid {
    /// 13 values from 1e-3 to 1e3.
    fn default() -> Self {
        Self::log_spaced(1e-3, 1e3, 13).expect("default grid is valid")
    }
}

/// Per-feature standardization state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.scales.len() {
            return Err(Error::Dimension {
                expected: self.means.len(),
                found: self.scales.len(),
            });
        }
        if self.scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::validation("scales", "must be finite and strictly positive"));
        }
        Ok(())
    }
}

/// Column means and population standard deviations. Constant columns get
/// scale 1.
pub fn fit_scaler(x: &DMatrix<f64>) -> Result<Scaler> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Insufficient(format!("scaler needs at least 2 rows, got {n}")));
    }
    check_finite_matrix(x)?;
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mean = col.sum() / n as f64;
        let first = col[0];
        let scale = if col.iter().all(|&v| v == first) {
            1.0
        } else {
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        };
        means.push(mean);
        scales.push(scale);
    }
    Ok(Scaler { means, scales })
}

pub fn apply_scaler(scaler: &Scaler, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != scaler.dim() {
        return Err(Error::Dimension {
            expected: scaler.dim(),
            found: x.ncols(),
        });
    }
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let (m, s) = (scaler.means[j], scaler.scales[j]);
        col.apply(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// A fitted single-output ridge model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// Coefficients in standardized feature space.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub scaler: Scaler,
}

impl RidgeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        predict(self, x)
    }
}

pub fn predict(model: &RidgeModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if model.weights.len() != model.scaler.dim() {
        return Err(Error::Dimension {
            expected: model.scaler.dim(),
            found: model.weights.len(),
        });
    }
    let xs = apply_scaler(&model.scaler, x)?;
    let w = DVector::from_column_slice(&model.weights);
    Ok((xs * w).add_scalar(model.intercept))
}

/// Thin SVD of a standardized design, oriented so the decomposition always
/// runs on the tall side.
#[derive(Debug, Clone)]
struct Decomposition {
    /// N × r
    u: DMatrix<f64>,
    singular: DVector<f64>,
    /// r × D
    vt: DMatrix<f64>,
}

impl Decomposition {
    fn new(x: &DMatrix<f64>) -> Result<Self> {
        check_finite_matrix(x)?;
        let (u, singular, vt) = if x.nrows() >= x.ncols() {
            thin_svd(x)?
        } else {
            let (u, s, vt) = thin_svd(&x.transpose())?;
            (vt.transpose(), s, u.transpose())
        };
        // Drop numerically null directions so α = 0 reduces to the
        // minimum-norm least-squares solution.
        let smax = singular.iter().cloned().fold(0.0, f64::max);
        let tol = smax * x.nrows().max(x.ncols()) as f64 * f64::EPSILON;
        let keep: Vec<usize> = (0..singular.len()).filter(|&k| singular[k] > tol).collect();
        let u = u.select_columns(&keep);
        let vt = vt.select_rows(&keep);
        let singular = singular.select_rows(&keep);
        Ok(Self { u, singular, vt })
    }

    fn weights(&self, yc: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let mut uty = self.u.tr_mul(yc);
        for (k, v) in uty.iter_mut().enumerate() {
            let s = self.singular[k];
            *v *= s / (s * s + alpha);
        }
        self.vt.tr_mul(&uty)
    }

    /// Exact leave-one-out residuals of the centered-intercept ridge fit, or
    /// `None` when some row has leverage too close to 1.
    fn loo_residuals(&self, yc: &DVector<f64>, alpha: f64) -> Option<DVector<f64>> {
        let n = self.u.nrows();
        let shrink: Vec<f64> = self
            .singular
            .iter()
            .map(|&s| s * s / (s * s + alpha))
            .collect();
        let mut uty = self.u.tr_mul(yc);
        for (k, v) in uty.iter_mut().enumerate() {
            *v *= shrink[k];
        }
        let fitted = &self.u * uty;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let leverage = 1.0 / n as f64
                + self
                    .u
                    .row(i)
                    .iter()
                    .zip(&shrink)
                    .map(|(&u, &f)| u * u * f)
                    .sum::<f64>();
            let denom = 1.0 - leverage;
            if denom <= LEVERAGE_FLOOR {
                return None;
            }
            out[i] = (yc[i] - fitted[i]) / denom;
        }
        Some(out)
    }
}

// nalgebra's SVD loses accuracy on rank-deficient designs (centered
// columns with N <= D always are), so the factorization goes through faer.
fn thin_svd(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let m = faer::Mat::<f64>::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)]);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let r = s.dim();
    Ok((
        DMatrix::from_fn(x.nrows(), r, |i, k| u[(i, k)]),
        DVector::from_fn(r, |k, _| s[k]),
        DMatrix::from_fn(r, x.ncols(), |k, j| v[(j, k)]),
    ))
}

fn center(y: &[f64]) -> (f64, DVector<f64>) {
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return (first, DVector::zeros(y.len()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    (mean, DVector::from_iterator(y.len(), y.iter().map(|&v| v - mean)))
}

fn check_finite_matrix(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in design matrix".into()));
    }
    Ok(())
}

fn check_target(y: &[f64], rows: usize) -> Result<()> {
    if y.len() != rows {
        return Err(Error::Dimension {
            expected: rows,
            found: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in target".into()));
    }
    Ok(())
}

/// Ridge solution on an already standardized design. Returns
/// `(weights, intercept)` with `intercept = mean(y)`; `alpha = 0` gives the
/// minimum-norm least-squares fit.
pub fn ridge_solve(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<(Vec<f64>, f64)> {
    if x.nrows() == 0 {
        return Err(Error::Insufficient("ridge needs at least 1 row".into()));
    }
    check_target(y, x.nrows())?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::validation("alpha", "must be finite and non-negative"));
    }
    let dec = Decomposition::new(x)?;
    let (intercept, yc) = center(y);
    Ok((dec.weights(&yc, alpha).iter().copied().collect(), intercept))
}

/// Exact leave-one-out residuals for a standardized design, computed via the
/// hat-matrix identity. `None` when a row's leverage is numerically 1.
pub fn loo_residuals(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<Option<Vec<f64>>> {
    check_target(y, x.nrows())?;
    let dec = Decomposition::new(x)?;
    let (_, yc) = center(y);
    Ok(dec.loo_residuals(&yc, alpha).map(|r| r.iter().copied().collect()))
}

/// A standardized, decomposed design reused across target columns; each
/// [`fit`](Self::fit) runs the full leave-one-out penalty selection.
pub struct CvFitter {
    scaler: Scaler,
    dec: Decomposition,
}

impl CvFitter {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 3 {
            return Err(Error::Insufficient(format!(
                "cross-validated ridge needs at least 3 rows, got {}",
                x.nrows()
            )));
        }
        let scaler = fit_scaler(x)?;
        let xs = apply_scaler(&scaler, x)?;
        let dec = Decomposition::new(&xs)?;
        Ok(Self { scaler, dec })
    }

    pub fn fit(&self, y: &[f64], grid: &AlphaGrid) -> Result<RidgeModel> {
        check_target(y, self.dec.u.nrows())?;
        let (intercept, yc) = center(y);
        let mut best: Option<(f64, f64)> = None;
        for &alpha in grid.values() {
            let Some(res) = self.dec.loo_residuals(&yc, alpha) else {
                continue;
            };
            let err = res.norm_squared() / res.len() as f64;
            match best {
                Some((_, best_err)) if !(err < best_err - TIE_RTOL * best_err.abs()) => {}
                _ => best = Some((alpha, err)),
            }
        }
        let (alpha, _) = best.ok_or_else(|| {
            Error::Numerical("every alpha candidate has a row with leverage ≈ 1".into())
        })?;
        let weights: Vec<f64> = self.dec.weights(&yc, alpha).iter().copied().collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite ridge weights".into()));
        }
        Ok(RidgeModel {
            weights,
            intercept,
            alpha,
            scaler: self.scaler.clone(),
        })
    }
}

/// Standardizes `x`, picks the penalty with the lowest mean squared
/// leave-one-out error, and refits on all rows.
pub fn ridge_cv_fit(x: &DMatrix<f64>, y: &[f64], grid: &AlphaGrid) -> Result<RidgeModel> {
    CvFitter::new(x)?.fit(y, grid)
}

/// K independent ridge regressors over one feature space, one per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub attribute_names: Vec<String>,
    pub models: Vec<RidgeModel>,
}

impl ProbeModel {
    pub fn new(attribute_names: Vec<String>, models: Vec<RidgeModel>) -> Result<Self> {
        if attribute_names.len() != models.len() || models.is_empty() {
            return Err(Error::validation(
                "probe model",
                format!("{} names for {} models", attribute_names.len(), models.len()),
            ));
        }
        let dim = models[0].dim();
        if let Some(m) = models.iter().find(|m| m.dim() != dim || m.scaler.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: m.dim(),
            });
        }
        Ok(Self {
            attribute_names,
            models,
        })
    }

    /// A probe that passes each of `dim` features through unchanged.
    pub fn identity(dim: usize) -> Self {
        let models = (0..dim)
            .map(|k| {
                let mut weights = vec![0.0; dim];
                weights[k] = 1.0;
                RidgeModel {
                    weights,
                    intercept: 0.0,
                    alpha: 0.0,
                    scaler: Scaler::identity(dim),
                }
            })
            .collect();
        Self {
            attribute_names: (0..dim).map(|k| format!("f{k}")).collect(),
            models,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn output_dim(&self) -> usize {
        self.models.len()
    }

    /// N × K matrix of attribute predictions.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let mut out = DMatrix::zeros(x.nrows(), self.models.len());
        for (k, model) in self.models.iter().enumerate() {
            out.set_column(k, &model.predict(x)?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("probe model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self =
            serde_json::from_str(text).map_err(|e| Error::parse("probe model", e.to_string()))?;
        for m in &raw.models {
            m.scaler.validate()?;
            if m.weights.iter().any(|w| !w.is_finite()) || !m.intercept.is_finite() {
                return Err(Error::validation("weights", "must be finite"));
            }
        }
        Self::new(raw.attribute_names, raw.models)
    }
}

/// One cross-validated ridge per column of `y`, sharing the scaler and the
/// decomposition. Each column picks its own penalty.
pub fn fit_multioutput(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    attribute_names: &[String],
    grid: &AlphaGrid,
) -> Result<ProbeModel> {
    if y.nrows() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    if attribute_names.len() != y.ncols() {
        return Err(Error::Dimension {
            expected: y.ncols(),
            found: attribute_names.len(),
        });
    }
    let fitter = CvFitter::new(x)?;
    let models = y
        .column_iter()
        .zip(attribute_names)
        .map(|(col, name)| {
            let col: Vec<f64> = col.iter().copied().collect();
            fitter.fit(&col, grid).map_err(|e| Error::Attribute {
                attribute: name.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProbeModel::new(attribute_names.to_vec(), models)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn default_grid() {
        let g = AlphaGrid::default();
        assert_eq!(g.values().len(), 13);
        assert!((g.values()[0] - 1e-3).abs() < 1e-18);
        assert!((g.values()[6] - 1.0).abs() < 1e-15);
        assert!((g.values()[12] - 1e3).abs() < 1e-9);
        assert!(AlphaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(AlphaGrid::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn scaler_population_std() {
        let s = fit_scaler(&col(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.means, [2.0]);
        assert!((s.scales[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scaler_constant_column() {
        let s = fit_scaler(&col(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(s.means, [5.0]);
        assert_eq!(s.scales, [1.0]);
        let z = apply_scaler(&s, &col(&[5.0, 5.0, 5.0])).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaler_needs_two_rows() {
        assert!(matches!(fit_scaler(&col(&[1.0])), Err(Error::Insufficient(_))));
    }

    #[test]
    fn refit_on_standardized_is_identity() {
        let x = DMatrix::from_fn(7, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 * 1.5 - j as f64);
        let z = apply_scaler(&fit_scaler(&x).unwrap(), &x).unwrap();
        let s2 = fit_scaler(&z).unwrap();
        for j in 0..3 {
            assert!(s2.means[j].abs() < 1e-12);
            assert!((s2.scales[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_scaler_elementwise() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 4.0, 25.0]);
        let s = fit_scaler(&x).unwrap();
        let z = apply_scaler(&s, &x).unwrap();
        for j in 0..2 {
            assert!(z.column(j).sum().abs() < 1e-10);
        }
        let row = DMatrix::from_row_slice(1, 2, &[3.0, 7.0]);
        let zr = apply_scaler(&s, &row).unwrap();
        assert_eq!(zr[(0, 0)], (3.0 - s.means[0]) / s.scales[0]);
        assert_eq!(zr[(0, 1)], (7.0 - s.means[1]) / s.scales[1]);
        assert_eq!(apply_scaler(&Scaler::identity(2), &x).unwrap(), x);
        assert!(apply_scaler(&Scaler::identity(3), &x).is_err());
    }

    #[test]
    fn ridge_zero_target() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        let (w, b) = ridge_solve(&x, &[0.0; 3], 1.0).unwrap();
        assert_eq!(b, 0.0);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ridge_hand_solve() {
        // XᵀX = 2, Xᵀy = 2, w = 2 / (2 + 2)
        let (w, b) = ridge_solve(&col(&[1.0, -1.0]), &[1.0, -1.0], 2.0).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn ridge_rejects_non_finite() {
        assert!(ridge_solve(&col(&[1.0, f64::NAN]), &[1.0, 2.0], 1.0).is_err());
        assert!(ridge_solve(&col(&[1.0, 2.0]), &[1.0, f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn cv_constant_target() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i as f64).powi(j as i32 + 1));
        let m = ridge_cv_fit(&x, &[3.5; 6], &AlphaGrid::default()).unwrap();
        assert_eq!(m.alpha, 1e-3);
        assert!(m.weights.iter().all(|&w| w == 0.0));
        let p = m.predict(&x).unwrap();
        assert!(p.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn cv_needs_three_rows() {
        let x = col(&[1.0, 2.0]);
        assert!(matches!(
            ridge_cv_fit(&x, &[1.0, 2.0], &AlphaGrid::default()),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn predict_hand_model() {
        let m = RidgeModel {
            weights: vec![0.5],
            intercept: 0.0,
            alpha: 1.0,
            scaler: Scaler::identity(1),
        };
        assert_eq!(m.predict(&col(&[4.0])).unwrap()[0], 2.0);
        let zero = RidgeModel {
            weights: vec![0.0, 0.0],
            intercept: 1.25,
            alpha: 1.0,
            scaler: Scaler::identity(2),
        };
        let p = zero.predict(&DMatrix::from_element(4, 2, 9.0)).unwrap();
        assert!(p.iter().all(|&v| v == 1.25));
        assert!(zero.predict(&col(&[1.0])).is_err());
    }

    #[test]
    fn multioutput_identical_columns() {
        let x = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 11) % 13) as f64);
        let y0: Vec<f64> = (0..12).map(|i| x[(i, 0)] - 0.5 * x[(i, 2)] + (i % 3) as f64).collect();
        let y = DMatrix::from_fn(12, 2, |i, _| y0[i]);
        let names = vec!["a".to_string(), "b".to_string()];
        let pm = fit_multioutput(&x, &y, &names, &AlphaGrid::default()).unwrap();
        assert_eq!(pm.models[0], pm.models[1]);
        let single = ridge_cv_fit(&x, &y0, &AlphaGrid::default()).unwrap();
        assert_eq!(pm.models[0], single);
    }

    #[test]
    fn multioutput_errors_name_attribute() {
        let x = DMatrix::from_fn(2, 1, |i, _| i as f64);
        let y = DMatrix::zeros(2, 1);
        // Fails in the shared fitter before any column.
        assert!(fit_multioutput(&x, &y, &["q".into()], &AlphaGrid::default()).is_err());
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let mut y = DMatrix::zeros(4, 1);
        y[(0, 0)] = f64::NAN;
        match fit_multioutput(&x, &y, &["quality".into()], &AlphaGrid::default()) {
            Err(Error::Attribute { attribute, .. }) => assert_eq!(attribute, "quality"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probe_model_json_round_trip() {
        let pm = ProbeModel::identity(3);
        let back = ProbeModel::from_json(&pm.to_json()).unwrap();
        assert_eq!(pm, back);
        assert!(ProbeModel::from_json("{}").is_err());
    }
}
