//! Model-based baseline controller.
//!
//! The controller is an integral-augmented discrete LQG design on the
//! nominal linear model, assembled into the error-driven form
//!
//! ```text
//! x_c[k+1] = A_c x_c[k] + B_c e[k]
//! u[k]     = C_c x_c[k] + D_c e[k]
//! ```
//!
//! with `x_c = [x̄; z]`: a predicted plant-state estimate and the running
//! integral of the tracking error.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearModel;
use crate::error::{CulError, Result};

const DARE_MAX_ITER: usize = 200;
const DARE_RESIDUAL_TOL: f64 = 1e-10;

fn riccati_rhs(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let atp = a.transpose() * p;
    let s = r + b.transpose() * p * b;
    let k = s.lu().solve(&(b.transpose() * p * a))?;
    Some(&atp * a - &atp * b * k + q)
}

/// `‖P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q)‖_F`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_rhs(a, b, q, r, p) {
        Some(rhs) => (p - rhs).norm(),
        None => f64::INFINITY,
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Stabilizing solution of the discrete algebraic Riccati equation, by the
/// structure-preserving doubling algorithm followed by fixed-point polishing.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) {
        return Err(CulError::DimensionMismatch {
            context: "solve_dare",
            expected: n,
            got: b.nrows(),
        });
    }
    let m = b.ncols();
    if r.shape() != (m, m) {
        return Err(CulError::DimensionMismatch {
            context: "solve_dare R",
            expected: m,
            got: r.nrows(),
        });
    }
    let r_chol = r.clone().cholesky().ok_or(CulError::InvalidParams {
        name: "R",
        reason: "must be positive definite".into(),
    })?;
    let eye = DMatrix::<f64>::identity(n, n);

    let mut ak = a.clone();
    let mut gk = b * r_chol.solve(&b.transpose());
    let mut hk = q.clone();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..DARE_MAX_ITER {
        iterations = it + 1;
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let (Some(w_a), Some(w_g)) = (lu.solve(&ak), lu.solve(&gk)) else {
            break;
        };
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_a));
        let g_next = symmetrize(&(&gk + &ak * w_g * ak.transpose()));
        let a_next = &ak * w_a;
        if !h_next.iter().all(|v| v.is_finite()) {
            break;
        }
        let delta = (&h_next - &hk).norm();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if delta <= 1e-15 * (1.0 + hk.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CulError::NoConvergence {
            iterations,
            residual: dare_residual(a, b, q, r, &hk),
        });
    }

    let mut p = hk;
    let bound = |p: &DMatrix<f64>| DARE_RESIDUAL_TOL * (1.0 + p.norm());
    let mut residual = dare_residual(a, b, q, r, &p);
    for _ in 0..50 {
        if residual <= 0.1 * bound(&p) {
            break;
        }
        let Some(next) = riccati_rhs(a, b, q, r, &p) else {
            break;
        };
        let next = symmetrize(&next);
        let next_res = dare_residual(a, b, q, r, &next);
        if next_res >= residual {
            break;
        }
        p = next;
        residual = next_res;
    }
    if !(residual.is_finite() && residual <= bound(&p)) {
        return Err(CulError::NoConvergence {
            iterations,
            residual,
        });
    }
    // Only the stabilizing root is accepted.
    let s = r + b.transpose() * &p * b;
    let k = s
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or(CulError::NonFiniteValue("Riccati gain"))?;
    if !(spectral_radius(&(a - b * k)) < 1.0) {
        return Err(CulError::NoConvergence {
            iterations,
            residual,
        });
    }
    Ok(p)
}

/// Design weights for the baseline controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisWeights {
    /// Weight on the squared output (body displacement) error.
    pub output_weight: f64,
    /// Weight on the squared error integral.
    pub integral_weight: f64,
    /// Weight on the squared control force.
    pub input_weight: f64,
    /// Process-noise intensity entering through the input channel.
    pub process_noise: f64,
    /// Small isotropic process noise added to every state.
    pub process_noise_floor: f64,
    /// Measurement-noise variance.
    pub measurement_noise: f64,
}

impl Default for SynthesisWeights {
    fn default() -> Self {
        SynthesisWeights {
            output_weight: 1e4,
            integral_weight: 1e6,
            input_weight: 1e-2,
            process_noise: 1.0,
            process_noise_floor: 1e-14,
            measurement_noise: 1e-8,
        }
    }
}

impl SynthesisWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("synthesis.output_weight", self.output_weight),
            ("synthesis.integral_weight", self.integral_weight),
            ("synthesis.process_noise", self.process_noise),
            ("synthesis.process_noise_floor", self.process_noise_floor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CulError::InvalidParams {
                    name,
                    reason: format!("must be >= 0, got {v}"),
                });
            }
        }
        for (name, v) in [
            ("synthesis.input_weight", self.input_weight),
            ("synthesis.measurement_noise", self.measurement_noise),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CulError::InvalidParams {
                    name,
                    reason: format!("must be > 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Discrete error-driven linear controller with internal state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceController {
    pub a_c: DMatrix<f64>,
    pub b_c: DMatrix<f64>,
    pub c_c: DMatrix<f64>,
    pub d_c: DMatrix<f64>,
    pub x_c: DVector<f64>,
    pub dt: f64,
}

impl StateSpaceController {
    pub fn new(
        a_c: DMatrix<f64>,
        b_c: DMatrix<f64>,
        c_c: DMatrix<f64>,
        d_c: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let nc = a_c.nrows();
        let checks = [
            ("A_c cols", nc, a_c.ncols()),
            ("B_c rows", nc, b_c.nrows()),
            ("B_c cols", 1, b_c.ncols()),
            ("C_c rows", 1, c_c.nrows()),
            ("C_c cols", nc, c_c.ncols()),
            ("D_c rows", 1, d_c.nrows()),
            ("D_c cols", 1, d_c.ncols()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(CulError::DimensionMismatch {
                    context,
                    expected,
                    got,
                });
            }
        }
        Ok(StateSpaceController {
            a_c,
            b_c,
            c_c,
            d_c,
            x_c: DVector::zeros(nc),
            dt,
        })
    }

    /// A controller of the given order whose matrices are all zero.
    pub fn zero(nc: usize, dt: f64) -> Self {
        StateSpaceController {
            a_c: DMatrix::zeros(nc, nc),
            b_c: DMatrix::zeros(nc, 1),
            c_c: DMatrix::zeros(1, nc),
            d_c: DMatrix::zeros(1, 1),
            x_c: DVector::zeros(nc),
            dt,
        }
    }

    pub fn order(&self) -> usize {
        self.a_c.nrows()
    }

    pub fn reset(&mut self) {
        self.x_c.fill(0.0);
    }

    /// `C_c x_c + D_c e` without advancing the state.
    pub fn output(&self, e: f64) -> f64 {
        self.c_c.row(0).dot(&self.x_c.transpose()) + self.d_c[(0, 0)] * e
    }

    /// Emits `u = C_c x_c + D_c e`, then advances `x_c ← A_c x_c + B_c e`.
    pub fn step(&mut self, e: f64) -> f64 {
        let u = self.output(e);
        let next = &self.a_c * &self.x_c + self.b_c.column(0) * e;
        self.x_c = next;
        u
    }

    /// Writes the four matrices and `dt` as decimal text with 17
    /// significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# state-space controller: x_c+ = A_c x_c + B_c e, u = C_c x_c + D_c e\n");
        out.push_str("version 1\n");
        let _ = writeln!(out, "dt {:.16e}", self.dt);
        for (name, m) in [("A_c", &self.a_c), ("B_c", &self.b_c), ("C_c", &self.c_c), ("D_c", &self.d_c)] {
            let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let perr = |msg: String| CulError::Parse(msg);
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| CulError::Parse(format!("bad number {s:?}: {e}")))
        };

        match lines.next() {
            Some("version 1") => {}
            other => return Err(perr(format!("expected 'version 1', got {other:?}"))),
        }
        let dt = match lines.next().and_then(|l| l.strip_prefix("dt ")) {
            Some(v) => num(v.trim())?,
            None => return Err(perr("expected 'dt <value>'".into())),
        };
        let mut mats = Vec::with_capacity(4);
        for expected in ["A_c", "B_c", "C_c", "D_c"] {
            let header = lines
                .next()
                .ok_or_else(|| perr(format!("missing matrix {expected}")))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "matrix" || parts[1] != expected {
                return Err(perr(format!("expected 'matrix {expected} <rows> <cols>', got {header:?}")));
            }
            let rows: usize = parts[2].parse().map_err(|_| perr(format!("bad row count in {header:?}")))?;
            let cols: usize = parts[3].parse().map_err(|_| perr(format!("bad column count in {header:?}")))?;
            let mut m = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| perr(format!("{expected}: missing row {i}")))?;
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(perr(format!("{expected} row {i}: expected {cols} values, got {}", vals.len())));
                }
                for (j, v) in vals.iter().enumerate() {
                    m[(i, j)] = num(v)?;
                }
            }
            mats.push(m);
        }
        let mut it = mats.into_iter();
        let (a, b, c, d) = (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        );
        StateSpaceController::new(a, b, c, d, dt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CulError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CulError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Integral-augmented LQG synthesis on the nominal model.
pub fn synthesize_mbc(model: &LinearModel, w: &SynthesisWeights) -> Result<StateSpaceController> {
    w.validate()?;
    let n = model.n_states();
    let dt = model.dt;
    let (a, b, c) = (&model.a, &model.b2, &model.c);

    // Augmented regulator: z+ = z + dt·e with e = -C x when y^r = 0.
    let mut a_aug = DMatrix::zeros(n + 1, n + 1);
    a_aug.view_mut((0, 0), (n, n)).copy_from(a);
    a_aug.view_mut((n, 0), (1, n)).copy_from(&(c * -dt));
    a_aug[(n, n)] = 1.0;
    let mut b_aug = DMatrix::zeros(n + 1, 1);
    b_aug.view_mut((0, 0), (n, 1)).copy_from(b);
    let mut q_aug = DMatrix::zeros(n + 1, n + 1);
    q_aug
        .view_mut((0, 0), (n, n))
        .copy_from(&(c.transpose() * c * w.output_weight));
    q_aug[(n, n)] = w.integral_weight;
    let r = DMatrix::from_element(1, 1, w.input_weight);

    let p = solve_dare(&a_aug, &b_aug, &q_aug, &r)?;
    let s = &r + b_aug.transpose() * &p * &b_aug;
    let k = s
        .lu()
        .solve(&(b_aug.transpose() * &p * &a_aug))
        .ok_or(CulError::NonFiniteValue("control gain"))?;
    let k_x = k.view((0, 0), (1, n)).into_owned();
    let k_z = k[(0, n)];

    // Steady-state Kalman filter (current-estimate form) on ỹ = y − y^r = −e.
    let process = b * b.transpose() * w.process_noise
        + DMatrix::<f64>::identity(n, n) * w.process_noise_floor;
    let v = DMatrix::from_element(1, 1, w.measurement_noise);
    let p_est = solve_dare(&a.transpose(), &c.transpose(), &process, &v)?;
    let innov = (c * &p_est * c.transpose())[(0, 0)] + w.measurement_noise;
    let m_gain = &p_est * c.transpose() / innov;

    let eye = DMatrix::<f64>::identity(n, n);
    let i_mc = &eye - &m_gain * c;
    let nc = n + 1;
    let mut c_c = DMatrix::zeros(1, nc);
    c_c.view_mut((0, 0), (1, n)).copy_from(&(-(&k_x * &i_mc)));
    c_c[(0, n)] = -k_z;
    let d_c = &k_x * &m_gain;

    let mut a_c = DMatrix::zeros(nc, nc);
    a_c.view_mut((0, 0), (n, n))
        .copy_from(&((a - b * &k_x) * &i_mc));
    a_c.view_mut((0, n), (n, 1)).copy_from(&(b * -k_z));
    a_c[(n, n)] = 1.0;
    let mut b_c = DMatrix::zeros(nc, 1);
    b_c.view_mut((0, 0), (n, 1))
        .copy_from(&((b * &k_x - a) * &m_gain));
    b_c[(n, 0)] = dt;

    let ctrl = StateSpaceController::new(a_c, b_c, c_c, d_c, dt)?;
    if ctrl
        .a_c
        .iter()
        .chain(ctrl.b_c.iter())
        .chain(ctrl.c_c.iter())
        .chain(ctrl.d_c.iter())
        .any(|v| !v.is_finite())
    {
        return Err(CulError::NonFiniteValue("controller matrices"));
    }
    let rho = closed_loop_spectral_radius(model, &ctrl);
    if !(rho < 1.0) {
        return Err(CulError::UnstableClosedLoop(rho));
    }
    Ok(ctrl)
}

/// Plant ⊕ controller transition matrix under `y^r = 0`.
pub fn closed_loop_matrix(model: &LinearModel, ctrl: &StateSpaceController) -> DMatrix<f64> {
    let n = model.n_states();
    let nc = ctrl.order();
    let (a, b, c) = (&model.a, &model.b2, &model.c);
    let mut m = DMatrix::zeros(n + nc, n + nc);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(a - b * &ctrl.d_c * c));
    m.view_mut((0, n), (n, nc)).copy_from(&(b * &ctrl.c_c));
    m.view_mut((n, 0), (nc, n)).copy_from(&(-(&ctrl.b_c * c)));
    m.view_mut((n, n), (nc, nc)).copy_from(&ctrl.a_c);
    m
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn closed_loop_spectral_radius(model: &LinearModel, ctrl: &StateSpaceController) -> f64 {
    spectral_radius(&closed_loop_matrix(model, ctrl))
}
