//! The system zoo used by the simulation studies.
//!
//! * [`wiener_velocity_model`] — 2-D position/velocity random walk with
//!   position measurements, discretized at `dt = 0.1`.
//! * [`gas_reactor_model`] — isothermal gas-phase reactor for the
//!   reversible reaction `2 A <-> B`, Euler-discretized at `dt = 0.1`,
//!   measuring total pressure.
//! * [`warehouse_vehicle_model`] — differential-drive vehicle observing
//!   ranges and bearings to three traffic cones at surveyed positions.
//!
//! Vehicle parameters (cone positions, identified noise statistics and the
//! recorded control profile) live in `fixtures/vehicle.json`, embedded at
//! compile time and checked into the repository. The fixture schema is
//! documented in `fixtures/README.md`. Identified noise means are folded
//! into the transition and measurement maps, which leaves the additive
//! noise zero-mean around those maps without changing the measurement
//! distribution.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::sync::Arc;

use super::{GaussianDensity, LinearGaussianModel, ModelError, NonlinearModel};

/// Wiener velocity model, state `[px, py, vx, vy]`, measuring positions.
pub fn wiener_velocity_model() -> LinearGaussianModel {
    let dt = 0.1;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let c = DMatrix::from_row_slice(
        2,
        4,
        &[
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0,
        ],
    );
    let dt3 = dt * dt * dt / 3.0;
    let dt2 = dt * dt / 2.0;
    let q = DMatrix::from_row_slice(
        4,
        4,
        &[
            dt3, 0.0, dt2, 0.0, //
            0.0, dt3, 0.0, dt2, //
            dt2, 0.0, dt, 0.0, //
            0.0, dt2, 0.0, dt,
        ],
    );
    let r = DMatrix::identity(2, 2);
    let initial = GaussianDensity::new(DVector::zeros(4), DMatrix::identity(4, 4))
        .expect("identity covariance is PSD");
    LinearGaussianModel::new(a, c, q, r, initial).expect("printed Wiener parameters are valid")
}

/// Isothermal gas-phase reactor, state `[P_A, P_B]`, measuring `P_A + P_B`.
///
/// One-step Euler discretization of `2 A <-> B` kinetics with
/// `k1 = 0.16`, `k2 = 0.0064`, `dt = 0.1`. State positivity is not
/// enforced anywhere: the initial density admits negative pressures and
/// the simulator clamps nothing.
pub fn gas_reactor_model() -> NonlinearModel {
    const K1: f64 = 0.16;
    const K2: f64 = 0.0064;
    const DT: f64 = 0.1;

    let transition = Arc::new(move |x: &DVector<f64>, _u: Option<&DVector<f64>>| {
        let (pa, pb) = (x[0], x[1]);
        Ok(DVector::from_vec(vec![
            pa + (-2.0 * K1 * pa * pa + 2.0 * K2 * pb) * DT,
            pb + (K1 * pa * pa - K2 * pb) * DT,
        ]))
    });
    let measurement = Arc::new(|x: &DVector<f64>| Ok(DVector::from_element(1, x[0] + x[1])));
    let transition_jac = Arc::new(move |x: &DVector<f64>, _u: Option<&DVector<f64>>| {
        let pa = x[0];
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 - 4.0 * K1 * pa * DT,
                2.0 * K2 * DT,
                2.0 * K1 * pa * DT,
                1.0 - K2 * DT,
            ],
        ))
    });
    let measurement_jac = Arc::new(|_x: &DVector<f64>| Ok(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])));

    NonlinearModel::new(
        2,
        1,
        transition,
        measurement,
        Some(transition_jac),
        Some(measurement_jac),
        DMatrix::identity(2, 2) * 1e-4,
        DMatrix::from_element(1, 1, 0.01),
        GaussianDensity::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
    )
    .expect("printed reactor parameters are valid")
}

/// Parameters of the warehouse vehicle experiment, deserialized from the
/// versioned fixture document.
#[derive(Debug, Clone, Deserialize)]
pub struct VehicleFixture {
    pub schema_version: u32,
    pub dt: f64,
    pub lidar_offset: f64,
    pub cones: Vec<[f64; 2]>,
    pub process_noise_mean: Vec<f64>,
    pub process_noise_diag: Vec<f64>,
    pub measurement_noise_mean: Vec<f64>,
    pub measurement_noise_diag: Vec<f64>,
    pub lidar_max_range: f64,
    pub initial_mean: Vec<f64>,
    pub initial_cov_diag: Vec<f64>,
    pub controls: ControlProfile,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ControlProfile {
    pub v: Vec<f64>,
    pub omega: Vec<f64>,
}

impl VehicleFixture {
    pub fn embedded() -> Self {
        serde_json::from_str(include_str!("../../fixtures/vehicle.json"))
            .expect("embedded vehicle fixture parses")
    }

    /// Recorded `[v, omega]` control sequence.
    pub fn control_sequence(&self) -> Vec<DVector<f64>> {
        self.controls
            .v
            .iter()
            .zip(&self.controls.omega)
            .map(|(&v, &w)| DVector::from_vec(vec![v, w]))
            .collect()
    }
}

/// Differential-drive warehouse vehicle, state `[px, py, theta]`, controls
/// `[v, omega]`, measuring range and bearing to each of three cones from a
/// Lidar mounted `l` ahead of the robot center.
///
/// Noise parameters are the identified values from the fixture; the
/// identified noise means are absorbed into the transition and measurement
/// maps so that the additive noise is zero-mean.
pub fn warehouse_vehicle_model() -> Result<(NonlinearModel, VehicleFixture), ModelError> {
    let fixture = VehicleFixture::embedded();
    let dt = fixture.dt;
    let l = fixture.lidar_offset;
    let cones: Vec<(f64, f64)> = fixture.cones.iter().map(|c| (c[0], c[1])).collect();
    let mu_xi = DVector::from_vec(fixture.process_noise_mean.clone());
    let mu_zeta = DVector::from_vec(fixture.measurement_noise_mean.clone());
    let m = 2 * cones.len();

    let cones_t = cones.clone();
    let mu_xi_t = mu_xi.clone();
    let transition = Arc::new(move |x: &DVector<f64>, u: Option<&DVector<f64>>| {
        let u = u.ok_or_else(|| {
            ModelError::InvalidParameter("vehicle transition requires a control input".into())
        })?;
        let (v, w) = (u[0], u[1]);
        let th = x[2];
        Ok(DVector::from_vec(vec![
            x[0] + v * th.cos() * dt + mu_xi_t[0],
            x[1] + v * th.sin() * dt + mu_xi_t[1],
            x[2] + w * dt + mu_xi_t[2],
        ]))
    });

    let cones_m = cones.clone();
    let mu_zeta_m = mu_zeta.clone();
    let measurement = Arc::new(move |x: &DVector<f64>| {
        let (px, py, th) = (x[0], x[1], x[2]);
        let (sx, sy) = (px + l * th.cos(), py + l * th.sin());
        let mut y = DVector::zeros(m);
        for (i, &(cx, cy)) in cones_m.iter().enumerate() {
            let dx = cx - sx;
            let dy = cy - sy;
            let d = dx.hypot(dy);
            if d < 1e-9 {
                return Err(ModelError::DegenerateGeometry { landmark: i + 1 });
            }
            y[i] = d + mu_zeta_m[i];
            y[cones_m.len() + i] = dy.atan2(dx) - th + mu_zeta_m[cones_m.len() + i];
        }
        Ok(y)
    });

    let transition_jac = Arc::new(move |x: &DVector<f64>, u: Option<&DVector<f64>>| {
        let u = u.ok_or_else(|| {
            ModelError::InvalidParameter("vehicle transition requires a control input".into())
        })?;
        let (v, th) = (u[0], x[2]);
        Ok(DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, 0.0, -v * th.sin() * dt, //
                0.0, 1.0, v * th.cos() * dt, //
                0.0, 0.0, 1.0,
            ],
        ))
    });

    let measurement_jac = Arc::new(move |x: &DVector<f64>| {
        let (px, py, th) = (x[0], x[1], x[2]);
        let (sx, sy) = (px + l * th.cos(), py + l * th.sin());
        let k = cones_t.len();
        let mut jac = DMatrix::zeros(2 * k, 3);
        for (i, &(cx, cy)) in cones_t.iter().enumerate() {
            let dx = cx - sx;
            let dy = cy - sy;
            let d2 = dx * dx + dy * dy;
            let d = d2.sqrt();
            if d < 1e-9 {
                return Err(ModelError::DegenerateGeometry { landmark: i + 1 });
            }
            // d(sensor position)/d(theta) = (-l sin th, l cos th)
            let dxd_th = l * th.sin();
            let dyd_th = -l * th.cos();
            jac[(i, 0)] = -dx / d;
            jac[(i, 1)] = -dy / d;
            jac[(i, 2)] = (dx * dxd_th + dy * dyd_th) / d;
            jac[(k + i, 0)] = dy / d2;
            jac[(k + i, 1)] = -dx / d2;
            jac[(k + i, 2)] = (-dy * dxd_th + dx * dyd_th) / d2 - 1.0;
        }
        Ok(jac)
    });

    let q = DMatrix::from_diagonal(&DVector::from_vec(fixture.process_noise_diag.clone()));
    let r = DMatrix::from_diagonal(&DVector::from_vec(fixture.measurement_noise_diag.clone()));
    let initial = GaussianDensity::new(
        DVector::from_vec(fixture.initial_mean.clone()),
        DMatrix::from_diagonal(&DVector::from_vec(fixture.initial_cov_diag.clone())),
    )?;

    let model = NonlinearModel::new(
        3,
        m,
        transition,
        measurement,
        Some(transition_jac),
        Some(measurement_jac),
        q,
        r,
        initial,
    )?;
    Ok((model, fixture))
}
