//! Three-mass powertrain model with drivetrain backlash.
//!
//! Topology: actuator mass `M_E` is tied to the intermediate part `m_G`
//! through `(K_G, C_G)`, `m_G` drives the vehicle body `M_B` through
//! `(K_D, C_D)` across a dead-zone of total width `delta`, and the body sits
//! on `(K_C, C_C)` to ground. `C_cl` damps `M_E` to ground. Control and
//! disturbance forces act on `M_E`; the controlled output is `x_B`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CulError, Result};

/// Number of mechanical states `(x_E, x_G, x_B, v_E, v_G, v_B)`.
pub const STATE_DIM: usize = 6;

/// Physical parameters of one plant instance plus its reference profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Spring connected with `M_B` (N/m).
    pub k_c: f64,
    /// Spring between `M_E` and `m_G` (N/m).
    pub k_g: f64,
    /// Spring between `M_B` and `m_G` (N/m).
    pub k_d: f64,
    /// Actuator mass (kg).
    pub m_e: f64,
    /// Intermediate part mass (kg).
    pub m_g: f64,
    /// Vehicle body mass (kg).
    pub m_b: f64,
    /// Damper between `M_B` and `m_G` (N·s/m).
    pub c_d: f64,
    /// Damper connected with `M_B` (N·s/m).
    pub c_c: f64,
    /// Damper of `M_E` (N·s/m).
    pub c_cl: f64,
    /// Damper between `M_E` and `m_G` (N·s/m).
    pub c_g: f64,
    /// Total backlash width (m); the gap is `delta / 2` on each side.
    pub delta: f64,
    /// Reference level before `switch_time` (m).
    pub yr_seg1: f64,
    /// Reference level from `switch_time` on (m).
    pub yr_seg2: f64,
    /// Reference step time (s).
    pub switch_time: f64,
}

impl PlantParams {
    pub fn nominal() -> Self {
        PlantParams {
            k_c: 660.0,
            k_g: 5.3e4,
            k_d: 2.2e4,
            m_e: 1.04,
            m_g: 0.039,
            m_b: 0.232,
            c_d: 12.5,
            c_c: 0.1,
            c_cl: 1.5,
            c_g: 36.0,
            delta: 0.005,
            yr_seg1: -0.006,
            yr_seg2: 0.0227,
            switch_time: 2.0,
        }
    }

    /// The same plant with the backlash removed (always engaged).
    pub fn linear(mut self) -> Self {
        self.delta = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_c", self.k_c),
            ("k_g", self.k_g),
            ("k_d", self.k_d),
            ("m_e", self.m_e),
            ("m_g", self.m_g),
            ("m_b", self.m_b),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CulError::InvalidParams {
                    name,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        let non_negative = [
            ("c_d", self.c_d),
            ("c_c", self.c_c),
            ("c_cl", self.c_cl),
            ("c_g", self.c_g),
            ("delta", self.delta),
            ("switch_time", self.switch_time),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CulError::InvalidParams {
                    name,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        for (name, v) in [("yr_seg1", self.yr_seg1), ("yr_seg2", self.yr_seg2)] {
            if !v.is_finite() {
                return Err(CulError::InvalidParams {
                    name,
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }
}

impl Default for PlantParams {
    fn default() -> Self {
        Self::nominal()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x_e: f64,
    pub x_g: f64,
    pub x_b: f64,
    pub v_e: f64,
    pub v_g: f64,
    pub v_b: f64,
}

impl PlantState {
    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.x_e, self.x_g, self.x_b, self.v_e, self.v_g, self.v_b]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        PlantState {
            x_e: a[0],
            x_g: a[1],
            x_b: a[2],
            v_e: a[3],
            v_g: a[4],
            v_b: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Total mechanical energy of the backlash-free plant (J).
pub fn mechanical_energy(s: &PlantState, p: &PlantParams) -> f64 {
    let kinetic = 0.5 * (p.m_e * s.v_e * s.v_e + p.m_g * s.v_g * s.v_g + p.m_b * s.v_b * s.v_b);
    let d_g = s.x_e - s.x_g;
    let d_d = dead_zone(s.x_g - s.x_b, p.delta);
    let potential = 0.5 * (p.k_g * d_g * d_g + p.k_d * d_d * d_d + p.k_c * s.x_b * s.x_b);
    kinetic + potential
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Interval { min, max }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// Interval of `scale` times the width, centred on the same midpoint.
    pub fn scaled(&self, scale: f64) -> Interval {
        let mid = self.midpoint();
        let half = 0.5 * (self.max - self.min) * scale;
        Interval::new(mid - half, mid + half)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // One draw per call regardless of width keeps stream positions stable.
        let u: f64 = rng.random();
        if self.max == self.min {
            self.min
        } else {
            (self.min + u * (self.max - self.min)).min(self.max)
        }
    }
}

/// Randomization ranges for every uncertain component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyRanges {
    pub m_b: Interval,
    pub m_e: Interval,
    pub c_g: Interval,
    pub c_d: Interval,
    pub c_c: Interval,
    pub delta: Interval,
    pub yr_seg1: Interval,
    pub yr_seg2: Interval,
    /// Width fraction of the reference intervals used before the reference
    /// range is enlarged (stages 1 and 2).
    pub restricted_reference_scale: f64,
}

impl Default for UncertaintyRanges {
    fn default() -> Self {
        UncertaintyRanges {
            m_b: Interval::new(0.1160, 0.3480),
            m_e: Interval::new(0.5200, 1.5600),
            c_g: Interval::new(18.0, 54.0),
            c_d: Interval::new(6.25, 18.75),
            c_c: Interval::new(0.05, 0.15),
            delta: Interval::new(0.0025, 0.0075),
            yr_seg1: Interval::new(-0.01515, 0.030303),
            yr_seg2: Interval::new(-0.01515, 0.030303),
            restricted_reference_scale: 0.5,
        }
    }
}

impl UncertaintyRanges {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("ranges.m_b", self.m_b),
            ("ranges.m_e", self.m_e),
            ("ranges.c_g", self.c_g),
            ("ranges.c_d", self.c_d),
            ("ranges.c_c", self.c_c),
            ("ranges.delta", self.delta),
            ("ranges.yr_seg1", self.yr_seg1),
            ("ranges.yr_seg2", self.yr_seg2),
        ];
        for (name, iv) in all {
            if !(iv.min.is_finite() && iv.max.is_finite() && iv.min <= iv.max) {
                return Err(CulError::InvalidParams {
                    name,
                    reason: format!("need finite min <= max, got [{}, {}]", iv.min, iv.max),
                });
            }
        }
        let s = self.restricted_reference_scale;
        if !(0.0..=1.0).contains(&s) {
            return Err(CulError::InvalidParams {
                name: "ranges.restricted_reference_scale",
                reason: format!("must lie in [0, 1], got {s}"),
            });
        }
        Ok(())
    }
}

/// One uncertainty component that a curriculum stage can switch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyTag {
    Masses,
    Reference,
    Dampings,
    FixedBacklash,
    EnlargedReference,
    BacklashWidth,
}

/// Number of curriculum stages (tasks 0 through 4).
pub const NUM_STAGES: usize = 5;

const STAGE_TAGS: [&[UncertaintyTag]; NUM_STAGES] = {
    use UncertaintyTag::*;
    [
        &[],
        &[Masses, Reference],
        &[Masses, Reference, Dampings],
        &[Masses, Reference, Dampings, FixedBacklash, EnlargedReference],
        &[
            Masses,
            Reference,
            Dampings,
            FixedBacklash,
            EnlargedReference,
            BacklashWidth,
        ],
    ]
};

/// Cumulative list of uncertainty components active at `stage`.
pub fn active_uncertainty_set(stage: usize) -> Result<&'static [UncertaintyTag]> {
    STAGE_TAGS
        .get(stage)
        .copied()
        .ok_or(CulError::StageOutOfRange {
            stage,
            max: NUM_STAGES - 1,
        })
}

/// Draws a plant for curriculum `stage`: nominal values with exactly the
/// stage-active components resampled.
pub fn sample_plant<R: Rng + ?Sized>(
    stage: usize,
    nominal: &PlantParams,
    ranges: &UncertaintyRanges,
    rng: &mut R,
) -> Result<PlantParams> {
    let tags = active_uncertainty_set(stage)?;
    let has = |t: UncertaintyTag| tags.contains(&t);
    let mut p = nominal.linear();

    if has(UncertaintyTag::Masses) {
        p.m_b = ranges.m_b.sample(rng);
        p.m_e = ranges.m_e.sample(rng);
    }
    if has(UncertaintyTag::Reference) {
        let scale = if has(UncertaintyTag::EnlargedReference) {
            1.0
        } else {
            ranges.restricted_reference_scale
        };
        p.yr_seg1 = ranges.yr_seg1.scaled(scale).sample(rng);
        p.yr_seg2 = ranges.yr_seg2.scaled(scale).sample(rng);
    }
    if has(UncertaintyTag::Dampings) {
        p.c_g = ranges.c_g.sample(rng);
        p.c_d = ranges.c_d.sample(rng);
        p.c_c = ranges.c_c.sample(rng);
    }
    if has(UncertaintyTag::FixedBacklash) {
        p.delta = nominal.delta;
    }
    if has(UncertaintyTag::BacklashWidth) {
        p.delta = ranges.delta.sample(rng);
    }
    Ok(p)
}

/// Dead-zone on relative displacement `d` for a gap of total width `delta`.
#[inline]
pub fn dead_zone(d: f64, delta: f64) -> f64 {
    let half = 0.5 * delta;
    if d > half {
        d - half
    } else if d < -half {
        d + half
    } else {
        0.0
    }
}

/// Accelerations `(a_E, a_G, a_B)` under actuator force `u` and disturbance `w`.
pub fn plant_accel(s: &PlantState, u: f64, w: f64, p: &PlantParams) -> [f64; 3] {
    let f_g = p.k_g * (s.x_e - s.x_g) + p.c_g * (s.v_e - s.v_g);
    let rel = s.x_g - s.x_b;
    let engaged = rel.abs() > 0.5 * p.delta;
    let mut f_d = p.k_d * dead_zone(rel, p.delta);
    if engaged {
        f_d += p.c_d * (s.v_g - s.v_b);
    }
    let f_ground = p.k_c * s.x_b + p.c_c * s.v_b;
    [
        (u + w - f_g - p.c_cl * s.v_e) / p.m_e,
        (f_g - f_d) / p.m_g,
        (f_d - f_ground) / p.m_b,
    ]
}

#[inline]
fn derivative(x: &[f64; STATE_DIM], u: f64, w: f64, p: &PlantParams) -> [f64; STATE_DIM] {
    let s = PlantState::from_array(*x);
    let [a_e, a_g, a_b] = plant_accel(&s, u, w, p);
    [x[3], x[4], x[5], a_e, a_g, a_b]
}

#[inline]
fn axpy(x: &[f64; STATE_DIM], h: f64, k: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
    std::array::from_fn(|i| x[i] + h * k[i])
}

/// Advances the plant by `dt` with zero-order-held inputs using `substeps`
/// classical RK4 steps.
pub fn step_plant(
    state: &PlantState,
    u: f64,
    w: f64,
    p: &PlantParams,
    dt: f64,
    substeps: usize,
) -> Result<PlantState> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(CulError::InvalidParams {
            name: "dt/substeps",
            reason: format!("need dt > 0 and substeps >= 1, got dt={dt}, substeps={substeps}"),
        });
    }
    let h = dt / substeps as f64;
    let mut x = state.to_array();
    for _ in 0..substeps {
        let k1 = derivative(&x, u, w, p);
        let k2 = derivative(&axpy(&x, 0.5 * h, &k1), u, w, p);
        let k3 = derivative(&axpy(&x, 0.5 * h, &k2), u, w, p);
        let k4 = derivative(&axpy(&x, h, &k3), u, w, p);
        for i in 0..STATE_DIM {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let next = PlantState::from_array(x);
    if !next.is_finite() {
        return Err(CulError::NonFinite { step: 0 });
    }
    Ok(next)
}

/// Reference level at time `t`: an ideal step at `switch_time`.
pub fn reference_signal(p: &PlantParams, t: f64) -> f64 {
    if t < p.switch_time {
        p.yr_seg1
    } else {
        p.yr_seg2
    }
}

/// Discrete-time linear model `x+ = A x + B1 w + B2 u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
}

impl LinearModel {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: f64, w: f64) -> DVector<f64> {
        &self.a * x + self.b1.column(0) * w + self.b2.column(0) * u
    }

    pub fn output(&self, x: &DVector<f64>) -> f64 {
        (&self.c * x)[0]
    }
}

/// Continuous-time `(A, B_u)` of the always-engaged plant.
pub fn continuous_matrices(p: &PlantParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    // Row for each acceleration: stiffness on positions, damping on velocities.
    let (me, mg, mb) = (p.m_e, p.m_g, p.m_b);
    a[(3, 0)] = -p.k_g / me;
    a[(3, 1)] = p.k_g / me;
    a[(3, 3)] = -(p.c_g + p.c_cl) / me;
    a[(3, 4)] = p.c_g / me;

    a[(4, 0)] = p.k_g / mg;
    a[(4, 1)] = -(p.k_g + p.k_d) / mg;
    a[(4, 2)] = p.k_d / mg;
    a[(4, 3)] = p.c_g / mg;
    a[(4, 4)] = -(p.c_g + p.c_d) / mg;
    a[(4, 5)] = p.c_d / mg;

    a[(5, 1)] = p.k_d / mb;
    a[(5, 2)] = -(p.k_d + p.k_c) / mb;
    a[(5, 4)] = p.c_d / mb;
    a[(5, 5)] = -(p.c_d + p.c_c) / mb;

    let mut b = DMatrix::zeros(STATE_DIM, 1);
    b[(3, 0)] = 1.0 / me;
    (a, b)
}

/// Zero-order-hold discretization of the backlash-free plant.
pub fn linearize_nominal(p: &PlantParams, dt: f64) -> Result<LinearModel> {
    p.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CulError::InvalidParams {
            name: "dt",
            reason: format!("must be > 0, got {dt}"),
        });
    }
    let (a_c, b_c) = continuous_matrices(p);
    let n = STATE_DIM;
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * dt));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b_c * dt));
    let e = aug.exp();
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, 1)).into_owned();
    let mut c = DMatrix::zeros(1, n);
    c[(0, 2)] = 1.0;
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(CulError::NonFiniteValue("linearized model"));
    }
    Ok(LinearModel {
        a,
        // u and w both enter on M_E
        b1: b.clone(),
        b2: b,
        c,
        dt,
    })
}
