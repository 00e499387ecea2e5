//! Linear stochastic interpolant and the closed-form velocity fields it induces.
//!
//! The fields here are the exact minimizers of the flow-matching regression
//! loss for special targets: an empirical (finite) training set, the
//! degenerate interpolatory limit of an overtrained conditional network, and a
//! scalar Gaussian target. They serve as oracles for the learned velocity.
//!
//! Every field of the form `(target - xi) / (1 - t)` is singular at `t = 1`.
//! Integrators stop at [`T_CAP`] and, where a closed form exists, take the last
//! hop analytically (see [`Case1Field::final_hop`] and
//! [`empirical_final_hop`]).

use ndarray::{Array2, ArrayView1};

use crate::error::{check_dim, Error, Result};

/// Largest pseudo-time at which `(1 - t)^-1` fields are evaluated.
pub const T_CAP: f64 = 1.0 - 1e-4;

/// Pseudo-time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 - t`, rejecting the singular endpoint.
    fn remaining(self) -> Result<f64> {
        if self.0 >= 1.0 {
            return Err(Error::SingularTime(self.0));
        }
        Ok(1.0 - self.0)
    }
}

/// Source sample `z` and target sample `x` joined by the linear interpolant.
#[derive(Debug, Clone, Copy)]
pub struct InterpolantPair<'a> {
    pub z: &'a [f64],
    pub x: &'a [f64],
}

impl<'a> InterpolantPair<'a> {
    pub fn new(z: &'a [f64], x: &'a [f64]) -> Result<Self> {
        check_dim(z.len(), x.len(), "interpolant endpoints")?;
        if z.is_empty() {
            return Err(Error::InvalidArgument("interpolant of dimension 0".into()));
        }
        Ok(Self { z, x })
    }

    /// `I_t = (1 - t) z + t x`.
    pub fn at(&self, t: TimePoint) -> Vec<f64> {
        let t = t.value();
        self.z
            .iter()
            .zip(self.x)
            .map(|(z, x)| (1.0 - t) * z + t * x)
            .collect()
    }

    /// `dI_t/dt = x - z`, the regression target of flow matching.
    pub fn rate(&self) -> Vec<f64> {
        self.x.iter().zip(self.z).map(|(x, z)| x - z).collect()
    }
}

pub fn interpolate(z: &[f64], x: &[f64], t: TimePoint) -> Result<Vec<f64>> {
    Ok(InterpolantPair::new(z, x)?.at(t))
}

pub fn interpolant_rate(z: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    Ok(InterpolantPair::new(z, x)?.rate())
}

/// Finite joint training set: row `i` of `points_x` and `points_y` is one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSupport {
    pub points_x: Array2<f64>,
    pub points_y: Array2<f64>,
}

impl EmpiricalSupport {
    pub fn new(points_x: Array2<f64>, points_y: Array2<f64>) -> Result<Self> {
        if points_x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty support".into()));
        }
        check_dim(points_x.nrows(), points_y.nrows(), "support rows")?;
        Ok(Self { points_x, points_y })
    }

    /// Support without measurements, e.g. one subset `S_j` of the selective-memorization analysis.
    pub fn unconditional(points_x: Array2<f64>) -> Result<Self> {
        let n = points_x.nrows();
        Self::new(points_x, Array2::zeros((n, 0)))
    }

    /// Convenience constructor for scalar `x` and scalar `y`.
    pub fn from_scalars(xs: &[f64], ys: &[f64]) -> Result<Self> {
        check_dim(xs.len(), ys.len(), "support rows")?;
        let px = Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("shape");
        let py = Array2::from_shape_vec((ys.len(), 1), ys.to_vec()).expect("shape");
        Self::new(px, py)
    }

    pub fn len(&self) -> usize {
        self.points_x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.points_x.ncols()
    }
}

/// Variance-collapse field built on a clamped piecewise-linear (hat) basis over
/// the sorted training measurements.
#[derive(Debug, Clone)]
pub struct Case1Field {
    /// Training `y` values in increasing order.
    knots: Vec<f64>,
    /// `x` rows in the same order as `knots`.
    values: Array2<f64>,
}

impl Case1Field {
    pub fn new(support: &EmpiricalSupport) -> Result<Self> {
        if support.points_y.ncols() != 1 {
            return Err(Error::Unsupported(format!(
                "interpolatory basis needs scalar measurements, got dimension {}",
                support.points_y.ncols()
            )));
        }
        let mut order: Vec<usize> = (0..support.len()).collect();
        let ys = support.points_y.column(0);
        order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
        let knots: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        if knots.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "duplicate training measurement values".into(),
            ));
        }
        let values = support.points_x.select(ndarray::Axis(0), &order);
        Ok(Self { knots, values })
    }

    /// Hat-basis weights `phi_j(y)`: at most two nonzero, summing to one.
    pub fn basis(&self, y: f64) -> Vec<f64> {
        let n = self.knots.len();
        let mut phi = vec![0.0; n];
        if n == 1 || y <= self.knots[0] {
            phi[0] = 1.0;
            return phi;
        }
        if y >= self.knots[n - 1] {
            phi[n - 1] = 1.0;
            return phi;
        }
        // knots[k] <= y < knots[k + 1]
        let k = self.knots.partition_point(|&v| v <= y) - 1;
        let s = (y - self.knots[k]) / (self.knots[k + 1] - self.knots[k]);
        phi[k] = 1.0 - s;
        phi[k + 1] = s;
        phi
    }

    /// `x_bar(y) = sum_j x_j phi_j(y)`.
    pub fn xbar(&self, y: f64) -> Vec<f64> {
        let phi = self.basis(y);
        let mut out = vec![0.0; self.values.ncols()];
        for (row, w) in self.values.rows().into_iter().zip(phi) {
            if w != 0.0 {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        out
    }

    pub fn velocity(&self, xi: &[f64], y: f64, t: TimePoint) -> Result<Vec<f64>> {
        check_dim(self.values.ncols(), xi.len(), "state")?;
        let rem = t.remaining()?;
        Ok(self
            .xbar(y)
            .iter()
            .zip(xi)
            .map(|(xb, x)| (xb - x) / rem)
            .collect())
    }

    /// Exact transport of `xi` from time `t` to `t = 1`: the flow is a straight
    /// line onto `x_bar(y)`.
    pub fn final_hop(&self, _xi: &[f64], y: f64) -> Vec<f64> {
        self.xbar(y)
    }
}

fn scalar_measurement(y_query: &[f64]) -> Result<f64> {
    match y_query {
        [y] => Ok(*y),
        _ => Err(Error::Unsupported(format!(
            "interpolatory basis needs scalar measurements, got dimension {}",
            y_query.len()
        ))),
    }
}

pub fn case1_xbar(support: &EmpiricalSupport, y_query: &[f64]) -> Result<Vec<f64>> {
    let field = Case1Field::new(support)?;
    Ok(field.xbar(scalar_measurement(y_query)?))
}

pub fn case1_velocity(
    support: &EmpiricalSupport,
    xi: &[f64],
    y_query: &[f64],
    t: TimePoint,
) -> Result<Vec<f64>> {
    Case1Field::new(support)?.velocity(xi, scalar_measurement(y_query)?, t)
}

/// Posterior responsibilities of each support point for the state `xi` under a
/// standard-normal source: `w_i ∝ exp(-|xi - t x_i|^2 / (2 (1 - t)^2))`.
pub fn case2_weights(support: &EmpiricalSupport, xi: &[f64], t: TimePoint) -> Result<Vec<f64>> {
    check_dim(support.x_dim(), xi.len(), "state")?;
    let rem = t.remaining()?;
    let tv = t.value();
    let denom = 2.0 * rem * rem;
    let mut logw: Vec<f64> = support
        .points_x
        .rows()
        .into_iter()
        .map(|row| -sq_dist_scaled(xi, row, tv) / denom)
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in logw.iter_mut() {
        *w /= total;
    }
    Ok(logw)
}

fn sq_dist_scaled(xi: &[f64], row: ArrayView1<f64>, t: f64) -> f64 {
    xi.iter()
        .zip(row)
        .map(|(a, b)| {
            let d = a - t * b;
            d * d
        })
        .sum()
}

/// Exact flow-matching minimizer for an empirical target with a standard-normal source.
pub fn exact_empirical_velocity(
    support: &EmpiricalSupport,
    xi: &[f64],
    t: TimePoint,
) -> Result<Vec<f64>> {
    let weights = case2_weights(support, xi, t)?;
    let rem = 1.0 - t.value();
    let mut out = vec![0.0; xi.len()];
    for (row, w) in support.points_x.rows().into_iter().zip(&weights) {
        for ((o, x), s) in out.iter_mut().zip(row).zip(xi) {
            *o += w * (x - s) / rem;
        }
    }
    Ok(out)
}

/// Closed-form transport of `xi` from `t` to `t = 1` under the empirical field,
/// holding the weights fixed over the last hop.
pub fn empirical_final_hop(
    support: &EmpiricalSupport,
    xi: &[f64],
    t: TimePoint,
) -> Result<Vec<f64>> {
    let weights = case2_weights(support, xi, t)?;
    let mut out = vec![0.0; xi.len()];
    for (row, w) in support.points_x.rows().into_iter().zip(&weights) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `E[X - Z | X_t = xi]` for `Z ~ N(0, 1)`, `X ~ N(mu, sigma^2)` independent.
///
/// `X_t` and `X - Z` are jointly Gaussian, so the conditional mean is linear in `xi`:
/// `mu + (t sigma^2 - (1 - t)) (xi - t mu) / ((1 - t)^2 + t^2 sigma^2)`.
/// Defined on the closed interval; at `t = 1` it reduces to `xi`.
pub fn gaussian_velocity_oracle(mu: f64, sigma: f64, xi: f64, t: TimePoint) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let t = t.value();
    let var = (1.0 - t).powi(2) + t * t * sigma * sigma;
    let cov = t * sigma * sigma - (1.0 - t);
    Ok(mu + cov * (xi - t * mu) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        assert_eq!(interpolate(&[3.0], &[7.0], tp(0.0)).unwrap(), vec![3.0]);
        assert_eq!(interpolate(&[3.0], &[7.0], tp(1.0)).unwrap(), vec![7.0]);
        assert_eq!(
            interpolate(&[0.0, 2.0], &[2.0, 0.0], tp(0.5)).unwrap(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn interpolant_rate_examples() {
        assert_eq!(interpolant_rate(&[3.0], &[7.0]).unwrap(), vec![4.0]);
        assert_eq!(
            interpolant_rate(&[5.0, 5.0], &[5.0, 5.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            interpolant_rate(&[1.0, -1.0], &[-1.0, 1.0]).unwrap(),
            vec![-2.0, 2.0]
        );
    }

    #[test]
    fn mismatched_endpoints_rejected() {
        assert!(matches!(
            interpolate(&[1.0], &[1.0, 2.0], tp(0.3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(interpolant_rate(&[1.0, 2.0], &[1.0]).is_err());
        assert!(TimePoint::new(1.5).is_err());
    }

    fn two_point() -> EmpiricalSupport {
        EmpiricalSupport::from_scalars(&[2.0, 0.0], &[1.0, 0.0]).unwrap()
    }

    #[test]
    fn xbar_interpolates_and_clamps() {
        let s = two_point();
        assert_eq!(case1_xbar(&s, &[0.5]).unwrap(), vec![1.0]);
        assert_eq!(case1_xbar(&s, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(case1_xbar(&s, &[1.0]).unwrap(), vec![2.0]);
        // Clamped basis: phi = [1, 0] below the range, [0, 1] above.
        assert_eq!(case1_xbar(&s, &[-3.0]).unwrap(), vec![0.0]);
        assert_eq!(case1_xbar(&s, &[7.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn case1_rejects_duplicates_and_vector_measurements() {
        let dup = EmpiricalSupport::from_scalars(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!(matches!(
            case1_xbar(&dup, &[0.5]),
            Err(Error::InvalidArgument(_))
        ));
        let wide = EmpiricalSupport::new(
            Array2::zeros((2, 1)),
            Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            case1_xbar(&wide, &[0.0, 0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn case1_velocity_examples() {
        let s = two_point();
        assert_eq!(
            case1_velocity(&s, &[0.0], &[0.5], tp(0.0)).unwrap(),
            vec![1.0]
        );
        for t in [0.0, 0.3, 0.9] {
            assert_eq!(
                case1_velocity(&s, &[1.0], &[0.5], tp(t)).unwrap(),
                vec![0.0]
            );
        }
        assert!(matches!(
            case1_velocity(&s, &[0.0], &[0.5], tp(1.0)),
            Err(Error::SingularTime(_))
        ));
    }

    #[test]
    fn case2_weights_examples() {
        let s = EmpiricalSupport::unconditional(
            Array2::from_shape_vec((3, 1), vec![-1.0, 0.2, 2.0]).unwrap(),
        )
        .unwrap();
        for w in case2_weights(&s, &[0.7], tp(0.0)).unwrap() {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
        let sym = EmpiricalSupport::unconditional(
            Array2::from_shape_vec((2, 1), vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        for t in [0.0, 0.4, 0.99] {
            let w = case2_weights(&sym, &[0.0], tp(t)).unwrap();
            assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-15);
            assert_eq!(
                exact_empirical_velocity(&sym, &[0.0], tp(t)).unwrap(),
                vec![0.0]
            );
        }
        // Near t = 1 the nearest point (Voronoi cell of xi) takes all the mass.
        let w = case2_weights(&s, &[0.3], tp(0.999)).unwrap();
        assert!(w[1] > 1.0 - 1e-12, "{w:?}");
        assert!(case2_weights(&s, &[0.3], tp(1.0)).is_err());
    }

    #[test]
    fn single_point_velocity_is_straight_line_rate() {
        let s = EmpiricalSupport::unconditional(
            Array2::from_shape_vec((1, 2), vec![1.5, -0.5]).unwrap(),
        )
        .unwrap();
        let v = exact_empirical_velocity(&s, &[0.5, 0.5], tp(0.5)).unwrap();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_oracle_closed_forms() {
        for &(t, xi) in &[(0.2, 0.7), (0.5, -1.0), (0.8, 2.0)] {
            let expected = (2.0 * t - 1.0) * xi / ((1.0 - t) * (1.0 - t) + t * t);
            assert_abs_diff_eq!(
                gaussian_velocity_oracle(0.0, 1.0, xi, tp(t)).unwrap(),
                expected,
                epsilon = 1e-14
            );
        }
        // X_0 = Z exactly, so E[X - Z | Z = xi] = mu - xi.
        assert_abs_diff_eq!(
            gaussian_velocity_oracle(1.5, 0.5, 0.25, tp(0.0)).unwrap(),
            1.25,
            epsilon = 1e-14
        );
        assert!(gaussian_velocity_oracle(0.0, 0.0, 0.0, tp(0.5)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn interpolant_is_affine_in_t(
            z in proptest::collection::vec(-10.0f64..10.0, 3),
            x in proptest::collection::vec(-10.0f64..10.0, 3),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
        ) {
            let p = InterpolantPair::new(&z, &x).unwrap();
            let mid = p.at(tp(0.5 * (t1 + t2)));
            let a = p.at(tp(t1));
            let b = p.at(tp(t2));
            for i in 0..3 {
                proptest::prop_assert!((mid[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
            }
            proptest::prop_assert_eq!(p.at(tp(0.0)), z.clone());
            proptest::prop_assert_eq!(p.at(tp(1.0)), x.clone());
        }

        #[test]
        fn case2_weights_form_positive_partition_of_unity(
            pts in proptest::collection::vec(-3.0f64..3.0, 5),
            xi in -5.0f64..5.0,
            t in 0.0f64..0.9999,
        ) {
            let s = EmpiricalSupport::unconditional(
                Array2::from_shape_vec((5, 1), pts).unwrap()).unwrap();
            let w = case2_weights(&s, &[xi], tp(t)).unwrap();
            let total: f64 = w.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(w.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
