//! Supershape (Gielis curve) parameterization of the pill outline and its
//! projection onto a smooth phase field.
//!
//! Every evaluation also has a reverse-mode counterpart so that cotangents on
//! sampled phase values can be pulled back onto the seven shape parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane, `[x, y]`.
pub type Point = [f64; 2];

/// Number of geometric design variables.
pub const PARAM_COUNT: usize = 7;

/// Smoothing width used in place of `|u|` inside the Gielis radius.
pub const ABS_SMOOTHING: f64 = 1e-12;

/// Names of the geometric parameters, in design-vector order.
pub const PARAM_NAMES: [&str; PARAM_COUNT] = ["cx", "cy", "theta", "a", "b", "n", "m"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupershapeParams {
    pub cx: f64,
    pub cy: f64,
    /// Rotation in radians.
    pub theta: f64,
    pub a: f64,
    pub b: f64,
    /// Curvature exponent.
    pub n: f64,
    /// Rotational symmetry order, treated as a continuous real.
    pub m: f64,
}

impl SupershapeParams {
    /// A disc of radius `radius` centred at `(cx, cy)`.
    pub fn circle(cx: f64, cy: f64, radius: f64) -> Self {
        Self {
            cx,
            cy,
            theta: 0.0,
            a: radius,
            b: radius,
            n: 2.0,
            m: 4.0,
        }
    }

    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [self.cx, self.cy, self.theta, self.a, self.b, self.n, self.m]
    }

    pub fn from_array(v: [f64; PARAM_COUNT]) -> Self {
        Self {
            cx: v[0],
            cy: v[1],
            theta: v[2],
            a: v[3],
            b: v[4],
            n: v[5],
            m: v[6],
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.n > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "semi-axes and curvature exponent must be positive (a={}, b={}, n={})",
                self.a, self.b, self.n
            )));
        }
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite shape parameter".into()));
        }
        Ok(())
    }
}

/// Box constraints on the geometric design vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBox {
    pub lower: [f64; PARAM_COUNT],
    pub upper: [f64; PARAM_COUNT],
}

impl BoundsBox {
    pub fn new(lower: [f64; PARAM_COUNT], upper: [f64; PARAM_COUNT]) -> Result<Self> {
        let bounds = Self { lower, upper };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..PARAM_COUNT {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::Config(format!(
                    "bounds for {} must satisfy lower < upper (got [{}, {}])",
                    PARAM_NAMES[i], self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> SupershapeParams {
        let mut mid = [0.0; PARAM_COUNT];
        for (i, v) in mid.iter_mut().enumerate() {
            *v = 0.5 * (self.lower[i] + self.upper[i]);
        }
        SupershapeParams::from_array(mid)
    }

    pub fn contains_strictly(&self, params: &SupershapeParams) -> bool {
        params
            .to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v > self.lower[i] && *v < self.upper[i])
    }

    /// Bounds built from a named initialization family. The curvature, lobe
    /// and scale ranges come from the published presets; the scale range
    /// applies to `a` and `b` independently. Placement and rotation ranges are
    /// shared across presets: centre within 0.05 of the domain centre,
    /// rotation in `[0, pi/4]`.
    pub fn preset(kind: ShapePreset, domain: [f64; 2]) -> Self {
        let (n, m) = match kind {
            ShapePreset::Spike => ([0.5, 2.0], [5.0, 11.0]),
            ShapePreset::Circle => ([1.67, 2.0], [1.0, 3.0]),
            ShapePreset::Sunflower => ([2.5, 4.0], [10.0, 14.0]),
        };
        let scale = [0.1, 0.4];
        let (cx, cy) = (0.5 * domain[0], 0.5 * domain[1]);
        let dx = 0.05 * domain[0];
        let dy = 0.05 * domain[1];
        Self {
            lower: [cx - dx, cy - dy, 0.0, scale[0], scale[0], n[0], m[0]],
            upper: [
                cx + dx,
                cy + dy,
                std::f64::consts::FRAC_PI_4,
                scale[1],
                scale[1],
                n[1],
                m[1],
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapePreset {
    Spike,
    Circle,
    Sunflower,
}

/// Phase value and radial distance at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    pub value: f64,
    pub distance: f64,
}

#[inline]
fn smooth_abs(u: f64) -> f64 {
    (u * u + ABS_SMOOTHING * ABS_SMOOTHING).sqrt()
}

/// Gielis radius together with its partial derivatives.
#[derive(Debug, Clone, Copy)]
struct RadiusEval {
    radius: f64,
    /// d/d(a, b, n, m)
    d_shape: [f64; 4],
    d_angle: f64,
}

fn radius_eval(params: &SupershapeParams, angle: f64) -> RadiusEval {
    let SupershapeParams { a, b, n, m, .. } = *params;
    let t = m * angle / 4.0;
    let (sin_t, cos_t) = t.sin_cos();
    let u = cos_t / a;
    let v = sin_t / b;
    let su = smooth_abs(u);
    let sv = smooth_abs(v);
    let pu = su.powf(n);
    let pv = sv.powf(n);
    let sum = pu + pv;
    let radius = sum.powf(-1.0 / n);

    // d(pu)/du = n su^(n-2) u
    let dpu_du = n * su.powf(n - 2.0) * u;
    let dpv_dv = n * sv.powf(n - 2.0) * v;
    let dlog_dsum = -1.0 / (n * sum);

    let d_a = radius * dlog_dsum * dpu_du * (-u / a);
    let d_b = radius * dlog_dsum * dpv_dv * (-v / b);
    let dsum_dn = pu * su.ln() + pv * sv.ln();
    let d_n = radius * (sum.ln() / (n * n) + dlog_dsum * dsum_dn);
    let dsum_dt = dpu_du * (-sin_t / a) + dpv_dv * (cos_t / b);
    let dr_dt = radius * dlog_dsum * dsum_dt;

    RadiusEval {
        radius,
        d_shape: [d_a, d_b, d_n, dr_dt * angle / 4.0],
        d_angle: dr_dt * m / 4.0,
    }
}

/// Reduced Gielis radius `R(angle)`.
pub fn gielis_radius(params: &SupershapeParams, angle: f64) -> Result<f64> {
    params.check()?;
    let r = radius_eval(params, angle).radius;
    if r.is_finite() && r > 0.0 {
        Ok(r)
    } else {
        Err(Error::InvalidGeometry(format!(
            "Gielis radius evaluated to {r} at angle {angle}"
        )))
    }
}

/// Map a global point into the shape's local frame, `R(theta) (x - x_c)`.
pub fn to_local(params: &SupershapeParams, x: Point) -> Point {
    let (s, c) = params.theta.sin_cos();
    let dx = x[0] - params.cx;
    let dy = x[1] - params.cy;
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Radial distance `r - R(angle)`: negative inside, positive outside.
pub fn radial_distance(params: &SupershapeParams, x: Point) -> Result<f64> {
    Ok(distance_with_gradient(params, x)?.0)
}

/// Radial distance and its gradient with respect to the seven parameters.
fn distance_with_gradient(
    params: &SupershapeParams,
    x: Point,
) -> Result<(f64, [f64; PARAM_COUNT])> {
    params.check()?;
    let [xl, yl] = to_local(params, x);
    let r = (xl * xl + yl * yl).sqrt();
    let mut grad = [0.0; PARAM_COUNT];
    let angle = if r > 0.0 { yl.atan2(xl) } else { 0.0 };
    let ev = radius_eval(params, angle);
    if !(ev.radius.is_finite() && ev.radius > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "Gielis radius evaluated to {} at angle {angle}",
            ev.radius
        )));
    }
    let dist = r - ev.radius;
    for k in 0..4 {
        grad[3 + k] = -ev.d_shape[k];
    }
    if r > 0.0 {
        let (s, c) = params.theta.sin_cos();
        let r2 = r * r;
        // d(r, angle)/d(xl, yl)
        let dr = [xl / r, yl / r];
        let dang = [-yl / r2, xl / r2];
        let dd_dxl = dr[0] - ev.d_angle * dang[0];
        let dd_dyl = dr[1] - ev.d_angle * dang[1];
        // d(xl, yl)/d(cx, cy, theta)
        grad[0] = dd_dxl * (-c) + dd_dyl * s;
        grad[1] = dd_dxl * (-s) + dd_dyl * (-c);
        grad[2] = dd_dxl * yl + dd_dyl * (-xl);
    }
    Ok((dist, grad))
}

/// Hyperbolic-tangent projection of a distance onto `(0, 1)`.
pub fn project_phase(distance: f64, mu: f64) -> f64 {
    0.5 * (1.0 - (distance / mu).tanh())
}

fn project_derivative(distance: f64, mu: f64) -> f64 {
    let t = (distance / mu).tanh();
    -0.5 * (1.0 - t * t) / mu
}

/// Phase value and distance at a point.
pub fn phase_sample(params: &SupershapeParams, x: Point, mu: f64) -> Result<PhaseSample> {
    let distance = radial_distance(params, x)?;
    Ok(PhaseSample {
        value: project_phase(distance, mu),
        distance,
    })
}

/// Phase value at a point and its gradient with respect to the parameters.
pub fn phase_with_gradient(
    params: &SupershapeParams,
    x: Point,
    mu: f64,
) -> Result<(PhaseSample, [f64; PARAM_COUNT])> {
    let (distance, mut grad) = distance_with_gradient(params, x)?;
    let dphi = project_derivative(distance, mu);
    for g in grad.iter_mut() {
        *g *= dphi;
    }
    Ok((
        PhaseSample {
            value: project_phase(distance, mu),
            distance,
        },
        grad,
    ))
}

/// Phase field sampled at every point.
pub fn sample_phase_field(
    params: &SupershapeParams,
    points: &[Point],
    mu: f64,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidGeometry("no sample points".into()));
    }
    points
        .iter()
        .map(|&p| phase_sample(params, p, mu).map(|s| s.value))
        .collect()
}

/// Pull a cotangent on the sampled phase values back onto the parameters.
pub fn sample_phase_field_vjp(
    params: &SupershapeParams,
    points: &[Point],
    mu: f64,
    cotangent: &[f64],
) -> Result<[f64; PARAM_COUNT]> {
    assert_eq!(points.len(), cotangent.len());
    let mut out = [0.0; PARAM_COUNT];
    for (&p, &w) in points.iter().zip(cotangent) {
        if w == 0.0 {
            continue;
        }
        let (_, g) = phase_with_gradient(params, p, mu)?;
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn unit_circle() -> SupershapeParams {
        SupershapeParams::circle(0.0, 0.0, 1.0)
    }

    #[test]
    fn radius_identities() {
        let p = unit_circle();
        for angle in [0.0, 0.3, 1.0, PI / 2.0, 2.5, -1.2] {
            assert_abs_diff_eq!(gielis_radius(&p, angle).unwrap(), 1.0, epsilon = 1e-12);
        }
        let mut q = p;
        q.a = 2.0;
        assert_abs_diff_eq!(gielis_radius(&q, 0.0).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        let mut p = unit_circle();
        p.n = 0.0;
        assert!(matches!(
            gielis_radius(&p, 0.1),
            Err(Error::InvalidGeometry(_))
        ));
        p.n = 2.0;
        p.a = -1.0;
        assert!(radial_distance(&p, [0.5, 0.5]).is_err());
    }

    #[test]
    fn local_frame() {
        let mut p = unit_circle();
        assert_eq!(to_local(&p, [0.3, 0.4]), [0.3, 0.4]);
        p.theta = PI / 2.0;
        let l = to_local(&p, [1.0, 0.0]);
        assert_abs_diff_eq!(l[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[1], -1.0, epsilon = 1e-15);
        p.cx = 0.7;
        p.cy = -0.2;
        p.theta = 1.234;
        let l = to_local(&p, [0.7, -0.2]);
        assert_eq!(l, [0.0, 0.0]);
    }

    #[test]
    fn distance_examples() {
        let p = unit_circle();
        assert_abs_diff_eq!(
            radial_distance(&p, [0.6, 0.8]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            radial_distance(&p, [0.5, 0.0]).unwrap(),
            -0.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            radial_distance(&p, [2.0, 0.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // centre convention
        assert_abs_diff_eq!(
            radial_distance(&p, [0.0, 0.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn projection_examples() {
        let mu = 1e-4;
        assert_eq!(project_phase(0.0, 0.3), 0.5);
        assert_abs_diff_eq!(project_phase(-10.0 * mu, mu), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(project_phase(10.0 * mu, mu), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn sampled_grid() {
        let p = unit_circle();
        let mut pts = Vec::new();
        for j in 0..3 {
            for i in 0..3 {
                pts.push([-2.0 + 2.0 * i as f64, -2.0 + 2.0 * j as f64]);
            }
        }
        let v = sample_phase_field(&p, &pts, 1e-4).unwrap();
        assert_abs_diff_eq!(v[4], 1.0, epsilon = 1e-12);
        for corner in [0, 2, 6, 8] {
            assert_abs_diff_eq!(v[corner], 0.0, epsilon = 1e-12);
        }
        // shape entirely outside the sampled window
        let far = SupershapeParams::circle(50.0, 50.0, 1.0);
        let v = sample_phase_field(&far, &pts, 1e-4).unwrap();
        assert!(v.iter().all(|x| *x < 1e-12));
        assert!(sample_phase_field(&p, &[], 1e-4).is_err());
    }

    #[test]
    fn preset_midpoints_are_finite() {
        for kind in [
            ShapePreset::Spike,
            ShapePreset::Circle,
            ShapePreset::Sunflower,
        ] {
            let b = BoundsBox::preset(kind, [1.0, 1.0]);
            b.validate().unwrap();
            let mid = b.midpoint();
            let pts: Vec<Point> = (0..400)
                .map(|i| [(i % 20) as f64 / 19.0, (i / 20) as f64 / 19.0])
                .collect();
            let v = sample_phase_field(&mid, &pts, 1e-4).unwrap();
            assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let params = SupershapeParams {
            cx: 0.48,
            cy: 0.53,
            theta: 0.3,
            a: 0.27,
            b: 0.21,
            n: 1.4,
            m: 6.3,
        };
        let mu = 0.05;
        let h = 1e-6;
        for x in [[0.61, 0.44], [0.35, 0.7], [0.5, 0.3], [0.7, 0.62]] {
            let (s, g) = phase_with_gradient(&params, x, mu).unwrap();
            assert!(s.distance.abs() <= 5.0 * mu * 1e3);
            for i in 0..PARAM_COUNT {
                let mut up = params.to_array();
                let mut dn = params.to_array();
                up[i] += h;
                dn[i] -= h;
                let fp = phase_sample(&SupershapeParams::from_array(up), x, mu)
                    .unwrap()
                    .value;
                let fm = phase_sample(&SupershapeParams::from_array(dn), x, mu)
                    .unwrap()
                    .value;
                let fd = (fp - fm) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1e-8);
                assert!(
                    (fd - g[i]).abs() / scale <= 1e-4,
                    "param {} at {:?}: fd {fd} vs analytic {}",
                    PARAM_NAMES[i],
                    x,
                    g[i]
                );
            }
        }
    }
}
