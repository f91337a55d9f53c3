//! Intelligent Driver Model car following.

use crate::error::{Error, Result};

/// IDM parameters. Defaults are the standard published calibration with
/// the desired speed left to the caller, since it is a task factor here.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdmParams {
    /// Free-road desired speed v0, m/s.
    pub desired_speed: f64,
    /// Safe time headway T, s.
    pub time_headway: f64,
    /// Standstill jam distance s0, m.
    pub min_gap: f64,
    /// Maximum acceleration a, m/s^2.
    pub max_accel: f64,
    /// Comfortable braking deceleration b (positive), m/s^2.
    pub comfortable_decel: f64,
    /// Acceleration exponent delta.
    pub exponent: f64,
}

impl IdmParams {
    pub fn with_desired_speed(desired_speed: f64) -> Self {
        IdmParams {
            desired_speed,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfortable_decel: 2.0,
            exponent: 4.0,
        }
    }
}

/// Desired dynamic gap `s* = s0 + max(0, v*T + v*dv / (2*sqrt(a*b)))`.
pub fn idm_desired_gap(v: f64, approach_rate: f64, p: &IdmParams) -> f64 {
    let dynamic =
        v * p.time_headway + v * approach_rate / (2.0 * (p.max_accel * p.comfortable_decel).sqrt());
    p.min_gap + dynamic.max(0.0)
}

/// Longitudinal acceleration of a follower with speed `v`, closing on its
/// leader at `approach_rate = v - v_lead`, across bumper gap `gap`.
///
/// `a = a_max * (1 - (v/v0)^delta - (s*/gap)^2)`.
pub fn idm_acceleration(v: f64, approach_rate: f64, gap: f64, p: &IdmParams) -> Result<f64> {
    if gap <= 0.0 {
        return Err(Error::Numeric(format!("idm gap must be positive, got {gap}")));
    }
    if p.desired_speed <= 0.0 {
        return Err(Error::Numeric(format!(
            "idm desired speed must be positive, got {}",
            p.desired_speed
        )));
    }
    let s_star = idm_desired_gap(v, approach_rate, p);
    let free = (v / p.desired_speed).powf(p.exponent);
    Ok(p.max_accel * (1.0 - free - (s_star / gap) * (s_star / gap)))
}

/// Free-road IDM: no leader, only the speed-tracking term.
pub fn idm_free_acceleration(v: f64, p: &IdmParams) -> f64 {
    p.max_accel * (1.0 - (v / p.desired_speed).powf(p.exponent))
}
