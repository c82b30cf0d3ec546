//! Trajectory post-processing shared by every prediction method:
//! actor-frame transforms, heading interpolation from positions, discrete
//! turning radii from position triples, and the kinematic-feasibility check.

use crate::error::{Error, Result};
use crate::kinematics::{KinematicParams, VehicleState};

/// Difference vectors shorter than this are treated as "no motion":
/// interpolated headings carry the previous value forward and turning-radius
/// triples report no turning evidence.
pub const EPS_STILL: f64 = 1e-3;

/// Multiplicative slack on `r_min` when classifying feasibility, so that
/// radii sitting exactly at the threshold are not rejected by rounding.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// A predicted or ground-truth trajectory: fixed step `dt` and one state per
/// horizon. Position-only methods fill headings and velocities by
/// interpolation before constructing one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub points: Vec<VehicleState>,
}

impl Trajectory {
    pub fn new(dt: f64, points: Vec<VehicleState>) -> Result<Self> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(Error::InvalidParam(format!("trajectory dt must be > 0, got {dt}")));
        }
        if points.is_empty() {
            return Err(Error::InvalidParam("trajectory needs at least one point".into()));
        }
        if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite trajectory point: {bad:?}")));
        }
        Ok(Self { dt, points })
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.x, p.y)).collect()
    }
}

/// Outcome of the kinematic-feasibility check.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Smallest turning radius observed along the trajectory, meters.
    pub min_radius_observed: f64,
    /// Index of the first point whose radius violates the threshold.
    pub violating_index: Option<usize>,
}

/// Maps states into the frame anchored at `anchor`: the anchor lands at the
/// origin with heading zero, speeds are unchanged. Exact inverse of
/// [`from_actor_frame`].
pub fn to_actor_frame(states: &[VehicleState], anchor: &VehicleState) -> Result<Vec<VehicleState>> {
    if !anchor.is_finite() {
        return Err(Error::NonFinite("anchor state"));
    }
    let (sin_a, cos_a) = anchor.psi.sin_cos();
    Ok(states
        .iter()
        .map(|s| {
            let dx = s.x - anchor.x;
            let dy = s.y - anchor.y;
            VehicleState {
                x: dx * cos_a + dy * sin_a,
                y: -dx * sin_a + dy * cos_a,
                psi: s.psi - anchor.psi,
                v: s.v,
            }
        })
        .collect())
}

/// Inverse of [`to_actor_frame`]: maps actor-frame states back to the frame
/// the anchor was expressed in.
pub fn from_actor_frame(states: &[VehicleState], anchor: &VehicleState) -> Result<Vec<VehicleState>> {
    if !anchor.is_finite() {
        return Err(Error::NonFinite("anchor state"));
    }
    let (sin_a, cos_a) = anchor.psi.sin_cos();
    Ok(states
        .iter()
        .map(|s| VehicleState {
            x: anchor.x + s.x * cos_a - s.y * sin_a,
            y: anchor.y + s.x * sin_a + s.y * cos_a,
            psi: s.psi + anchor.psi,
            v: s.v,
        })
        .collect())
}

/// Estimates headings from a position sequence, assuming the sequence starts
/// one step after an anchor at the origin.
///
/// Interior points use the central difference `p[h+1] - p[h-1]`; the first
/// point differences against the anchor origin and the last point uses the
/// backward difference. Whenever the difference vector is shorter than
/// [`EPS_STILL`] the previous heading is carried forward (`anchor_heading`
/// if there is none yet), which keeps stopped actors from producing
/// arbitrary headings.
pub fn interpolate_headings(positions: &[(f64, f64)], _dt: f64, anchor_heading: f64) -> Vec<f64> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n);
    let mut prev = anchor_heading;
    for h in 0..n {
        let (dx, dy) = if h == 0 {
            (positions[0].0, positions[0].1)
        } else if h == n - 1 {
            (positions[h].0 - positions[h - 1].0, positions[h].1 - positions[h - 1].1)
        } else {
            (positions[h + 1].0 - positions[h - 1].0, positions[h + 1].1 - positions[h - 1].1)
        };
        let heading = if (dx * dx + dy * dy).sqrt() < EPS_STILL { prev } else { dy.atan2(dx) };
        out.push(heading);
        prev = heading;
    }
    out
}

/// Circumradius of the triangle `(a, b, c)`: `abc / (4 * area)`.
/// Collinear triples and triples with any side shorter than [`EPS_STILL`]
/// report `+inf` (no turning evidence).
fn circumradius(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let ab = ((b.0 - a.0), (b.1 - a.1));
    let bc = ((c.0 - b.0), (c.1 - b.1));
    let ac = ((c.0 - a.0), (c.1 - a.1));
    let l_ab = (ab.0 * ab.0 + ab.1 * ab.1).sqrt();
    let l_bc = (bc.0 * bc.0 + bc.1 * bc.1).sqrt();
    let l_ac = (ac.0 * ac.0 + ac.1 * ac.1).sqrt();
    if l_ab < EPS_STILL || l_bc < EPS_STILL || l_ac < EPS_STILL {
        return f64::INFINITY;
    }
    let cross = ab.0 * ac.1 - ab.1 * ac.0;
    let area2 = cross.abs(); // twice the triangle area
    if area2 == 0.0 {
        return f64::INFINITY;
    }
    l_ab * l_bc * l_ac / (2.0 * area2)
}

/// Turning radius at each interior point of the polyline formed by
/// prepending the anchor origin to `positions`. Returns one radius per
/// interior vertex, in order.
pub fn turning_radii(positions: &[(f64, f64)]) -> Result<Vec<f64>> {
    if positions.len() < 2 {
        return Err(Error::InvalidParam(
            "turning radii need at least 2 points after the anchor".into(),
        ));
    }
    let mut pts = Vec::with_capacity(positions.len() + 1);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(positions);
    let mut out = Vec::with_capacity(pts.len() - 2);
    for k in 1..pts.len() - 1 {
        out.push(circumradius(pts[k - 1], pts[k], pts[k + 1]));
    }
    Ok(out)
}

/// Classifies a trajectory as kinematically feasible if every observed
/// turning radius is at least `r_min * (1 - FEASIBILITY_TOL)`.
pub fn check_feasibility(traj: &Trajectory, params: &KinematicParams) -> FeasibilityReport {
    let positions = traj.positions();
    if positions.len() < 2 {
        // A single point gives no turning evidence.
        return FeasibilityReport {
            feasible: true,
            min_radius_observed: f64::INFINITY,
            violating_index: None,
        };
    }
    let radii = turning_radii(&positions).expect("length checked above");
    let threshold = params.r_min * (1.0 - FEASIBILITY_TOL);
    let mut min_radius = f64::INFINITY;
    let mut violating_index = None;
    for (k, &r) in radii.iter().enumerate() {
        if r < min_radius {
            min_radius = r;
        }
        if r < threshold && violating_index.is_none() {
            // Radii are indexed by interior vertex; vertex k corresponds to
            // trajectory point k (the anchor is prepended).
            violating_index = Some(k);
        }
    }
    FeasibilityReport { feasible: violating_index.is_none(), min_radius_observed: min_radius, violating_index }
}
