//! Pivot calibration of a hub-mounted tracking sensor.
//!
//! While the needle pivots about its fixed tip, every sensor pose `(R_i, p_i)`
//! satisfies `R_i·t + p_i = b`, with `t` the tip offset in the sensor frame
//! and `b` the pivot point in the tracker frame. Stacking
//! `[R_i | −I]·[t; b] = −p_i` over all poses gives an overdetermined linear
//! system, solved here by SVD.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Systems whose condition number exceeds this are rejected as degenerate.
pub const MAX_CONDITION: f64 = 1e8;
pub const DEFAULT_MIN_POSES: usize = 3;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform of the sensor frame into the tracker frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = |message: String| Error::InvalidPose { index: 0, message };
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let worst = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(worst <= ORTHONORMAL_TOL) {
            return Err(err(format!("rotation is not orthonormal (|RᵀR − I| = {worst:e})")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(err(format!("rotation determinant is {det}, expected +1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(err("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Maps a point from the sensor frame into the tracker frame.
    pub fn apply(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * local + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotCalibration {
    /// Tip position in the sensor frame, cm.
    pub tip_offset: Vector3<f64>,
    /// Fixed pivot in the tracker frame, cm.
    pub pivot_point: Vector3<f64>,
    /// RMS over poses of `‖R_i·t + p_i − b‖`, cm.
    pub rms_residual: f64,
    pub condition_number: f64,
}

pub fn pivot_calibrate(poses: &[Pose], min_poses: usize) -> Result<PivotCalibration> {
    const OP: &str = "pivot_calibrate";
    if poses.len() < min_poses {
        return Err(Error::invalid(
            OP,
            format!("need at least {min_poses} poses, got {}", poses.len()),
        ));
    }

    let rows = 3 * poses.len();
    let mut a = DMatrix::<f64>::zeros(rows, 6);
    let mut rhs = DVector::<f64>::zeros(rows);
    for (i, pose) in poses.iter().enumerate() {
        let r0 = 3 * i;
        a.view_mut((r0, 0), (3, 3)).copy_from(&pose.rotation);
        a.view_mut((r0, 3), (3, 3)).copy_from(&(-Matrix3::identity()));
        rhs.rows_mut(r0, 3).copy_from(&(-pose.translation));
    }

    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let condition = if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Degenerate { condition });
    }
    let x = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::invalid(OP, e.to_string()))?;

    let tip_offset = Vector3::new(x[0], x[1], x[2]);
    let pivot_point = Vector3::new(x[3], x[4], x[5]);
    let sq: f64 = poses
        .iter()
        .map(|p| (p.apply(&tip_offset) - pivot_point).norm_squared())
        .sum();
    Ok(PivotCalibration {
        tip_offset,
        pivot_point,
        rms_residual: (sq / poses.len() as f64).sqrt(),
        condition_number: condition,
    })
}

/// One entry of a pose list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Row-major 3x3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub unit: String,
}

impl PoseRecord {
    pub fn from_pose(pose: &Pose) -> Self {
        let r = pose.rotation;
        Self {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: pose.translation.into(),
            unit: "cm".into(),
        }
    }
}

pub fn poses_from_records(records: &[PoseRecord]) -> Result<Vec<Pose>> {
    records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            if rec.unit != "cm" {
                return Err(Error::InvalidPose {
                    index,
                    message: format!("unit must be \"cm\", got {:?}", rec.unit),
                });
            }
            let rotation = Matrix3::from_row_slice(&rec.rotation);
            Pose::new(rotation, Vector3::from(rec.translation)).map_err(|e| match e {
                Error::InvalidPose { message, .. } => Error::InvalidPose { index, message },
                other => other,
            })
        })
        .collect()
}
