//! Column-wise rank → probit preprocessing.
//!
//! Each column is mapped through the empirical CDF of its fitting sample
//! (tie-averaged ranks at positions `(rank − 0.5) / n`, linear interpolation
//! between distinct values), clipped away from {0, 1}, and pushed through the
//! inverse normal CDF. The result is approximately standard normal per
//! column regardless of the input's marginal distribution, which is the input
//! contract of the in-context engine.

use crate::CoreError;
use pdx_tensor::Tensor;

/// Clip bound keeping CDF positions inside the open unit interval.
pub const CLIP_EPS: f64 = 1e-4;

/// Fitted per-column monotone map from raw values to probit scores.
#[derive(Debug, Clone)]
pub struct QuantileTransform {
    /// Distinct sorted values per column.
    knots: Vec<Vec<f64>>,
    /// Empirical CDF position of each knot.
    cdf: Vec<Vec<f64>>,
}

impl QuantileTransform {
    /// Fit on the rows of `x` (one column per feature).
    pub fn fit(x: &Tensor) -> Result<Self, CoreError> {
        let (n, cols) = (x.rows(), x.cols());
        if n == 0 {
            return Err(CoreError::EmptyFit);
        }
        let mut knots = Vec::with_capacity(cols);
        let mut cdf = Vec::with_capacity(cols);
        for j in 0..cols {
            let mut values: Vec<f64> = (0..n).map(|i| x.get2(i, j)).collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteFeature { column: j });
            }
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite values sort totally"));

            // Tie-averaged 1-based ranks per distinct value, then map each
            // distinct value to (mean_rank - 0.5) / n.
            let mut col_knots = Vec::new();
            let mut col_cdf = Vec::new();
            let mut i = 0;
            while i < n {
                let mut upper = i + 1;
                while upper < n && values[upper] == values[i] {
                    upper += 1;
                }
                // Ranks i+1 ..= upper share this value; their mean is
                // (i + 1 + upper) / 2.
                let mean_rank = (i + 1 + upper) as f64 / 2.0;
                col_knots.push(values[i]);
                col_cdf.push((mean_rank - 0.5) / n as f64);
                i = upper;
            }
            knots.push(col_knots);
            cdf.push(col_cdf);
        }
        Ok(Self { knots, cdf })
    }

    pub fn columns(&self) -> usize {
        self.knots.len()
    }

    /// CDF position of `v` in column `j`: interpolated between knots, clamped
    /// to the end positions outside the fitted range.
    fn cdf_position(&self, j: usize, v: f64) -> f64 {
        let knots = &self.knots[j];
        let cdf = &self.cdf[j];
        match knots.binary_search_by(|k| k.partial_cmp(&v).expect("finite")) {
            Ok(exact) => cdf[exact],
            Err(0) => cdf[0],
            Err(pos) if pos == knots.len() => cdf[knots.len() - 1],
            Err(pos) => {
                let (k0, k1) = (knots[pos - 1], knots[pos]);
                let (c0, c1) = (cdf[pos - 1], cdf[pos]);
                let t = (v - k0) / (k1 - k0);
                c0 + t * (c1 - c0)
            }
        }
    }

    /// Transform a single value from column `j`.
    pub fn apply_value(&self, j: usize, v: f64) -> f64 {
        let p = self.cdf_position(j, v).clamp(CLIP_EPS, 1.0 - CLIP_EPS);
        inverse_normal_cdf(p)
    }

    /// Transform every entry of `x` (same column layout as the fitting data).
    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.columns(), "column count changed since fit");
        let mut out = Tensor::zeros(vec![x.rows(), x.cols()]);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                out.set2(i, j, self.apply_value(j, x.get2(i, j)));
            }
        }
        out
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 across the open unit interval).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inverse CDF needs p in (0, 1), got {p}");
    if p == 0.5 {
        // Exact by symmetry; keeps constant columns at exactly zero instead
        // of picking up the forward-CDF approximation error below.
        return 0.0;
    }

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Halley refinement step against the forward CDF tightens the
    // approximation to near machine precision.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Standard normal CDF via `erfc`-style complementary error series
/// (Abramowitz–Stegun 7.1.26, |error| < 1.5e-7, adequate for the refinement
/// step above).
pub fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * (x.abs() / std::f64::consts::SQRT_2));
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_column_maps_to_symmetric_probits() {
        // Values [3, 1, 2] have ranks [3, 1, 2] -> CDF [5/6, 1/6, 1/2]
        // -> probit [0.9674, -0.9674, 0.0].
        let x = Tensor::matrix(3, 1, vec![3.0, 1.0, 2.0]);
        let qt = QuantileTransform::fit(&x).unwrap();
        let y = qt.apply(&x);
        assert!((y.get2(0, 0) - 0.9674).abs() < 1e-3, "got {}", y.get2(0, 0));
        assert!((y.get2(1, 0) + 0.9674).abs() < 1e-3, "got {}", y.get2(1, 0));
        assert!(y.get2(2, 0).abs() < 1e-3, "got {}", y.get2(2, 0));
    }

    #[test]
    fn ties_share_their_average_rank() {
        // [1, 2, 2]: ranks [1, 2.5, 2.5] -> CDF [1/6, 2/3, 2/3].
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 2.0]);
        let qt = QuantileTransform::fit(&x).unwrap();
        let y = qt.apply(&x);
        assert_eq!(y.get2(1, 0), y.get2(2, 0));
        let expect_tied = inverse_normal_cdf(2.0 / 3.0);
        assert!((y.get2(1, 0) - expect_tied).abs() < 1e-9);
        let expect_low = inverse_normal_cdf(1.0 / 6.0);
        assert!((y.get2(0, 0) - expect_low).abs() < 1e-9);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = Tensor::matrix(4, 1, vec![7.0; 4]);
        let qt = QuantileTransform::fit(&x).unwrap();
        let y = qt.apply(&x);
        for i in 0..4 {
            assert_eq!(y.get2(i, 0), 0.0);
        }
        // And unseen values still map through the clip, not to infinity.
        let probe = Tensor::matrix(2, 1, vec![-100.0, 100.0]);
        let z = qt.apply(&probe);
        assert!(z.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clip_bound_matches_reference_probit() {
        // Probit of the lower clip: about -3.719.
        let v = inverse_normal_cdf(CLIP_EPS);
        assert!((v + 3.719).abs() < 1e-2, "got {v}");
    }

    #[test]
    fn out_of_range_values_clamp_to_end_positions() {
        let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let qt = QuantileTransform::fit(&x).unwrap();
        let probe = Tensor::matrix(2, 1, vec![-50.0, 50.0]);
        let y = qt.apply(&probe);
        // Ends sit at CDF 0.125 and 0.875 — clamped, not extrapolated.
        assert!((y.get2(0, 0) - inverse_normal_cdf(0.125)).abs() < 1e-9);
        assert!((y.get2(1, 0) - inverse_normal_cdf(0.875)).abs() < 1e-9);
    }

    #[test]
    fn interpolation_is_monotone_between_knots() {
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 10.0]);
        let qt = QuantileTransform::fit(&x).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=100 {
            let v = -1.0 + 12.0 * k as f64 / 100.0;
            let y = qt.apply_value(0, v);
            assert!(y >= prev, "not monotone at {v}");
            prev = y;
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = Tensor::matrix(2, 1, vec![1.0, f64::NAN]);
        assert!(matches!(
            QuantileTransform::fit(&x),
            Err(CoreError::NonFiniteFeature { column: 0 })
        ));
    }

    #[test]
    fn inverse_normal_cdf_matches_reference_library() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        // The transform only evaluates probits inside the clip range; the
        // pipeline contract there is 1e-3 per value. In the bulk the
        // refinement is much tighter.
        let mut p = CLIP_EPS;
        while p <= 1.0 - CLIP_EPS {
            let ours = inverse_normal_cdf(p);
            let reference = normal.inverse_cdf(p);
            let tol = if (0.01..=0.99).contains(&p) { 1e-5 } else { 1e-3 };
            assert!(
                (ours - reference).abs() < tol,
                "p = {p}: {ours} vs reference {reference}"
            );
            p += 0.0005;
        }
        for p in [CLIP_EPS, 0.25, 0.5, 0.75, 1.0 - CLIP_EPS] {
            assert!((inverse_normal_cdf(p) - normal.inverse_cdf(p)).abs() < 1e-3);
        }
    }

    #[test]
    fn column_map_matches_independent_rank_oracle() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        // A column with ties, outliers, and negatives; the oracle computes
        // tie-averaged ranks by direct counting, with no shared code.
        let raw = vec![3.0, -1.5, 3.0, 0.0, 12.0, 3.0, -1.5, 0.25, -80.0, 0.0];
        let n = raw.len();
        let x = Tensor::matrix(n, 1, raw.clone());
        let qt = QuantileTransform::fit(&x).unwrap();
        let y = qt.apply(&x);
        for (i, &v) in raw.iter().enumerate() {
            let less = raw.iter().filter(|&&u| u < v).count() as f64;
            let equal = raw.iter().filter(|&&u| u == v).count() as f64;
            let mean_rank = less + (equal + 1.0) / 2.0;
            let cdf = ((mean_rank - 0.5) / n as f64).clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            let expected = normal.inverse_cdf(cdf);
            assert!(
                (y.get2(i, 0) - expected).abs() < 1e-3,
                "row {i} (value {v}): {} vs oracle {expected}",
                y.get2(i, 0)
            );
        }
    }
}
