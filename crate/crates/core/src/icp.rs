//! Closed-form rigid alignment and iterative closest point.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureKind, PointCloud, RigidTransform};
use crate::spatial::NeighborIndex;
use crate::tolerance::{MIN_PIVOT, RANK_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpVariant {
    PointToPoint,
    PointToPlane,
}

impl std::str::FromStr for IcpVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point2point" | "point_to_point" => Ok(Self::PointToPoint),
            "point2plane" | "point_to_plane" => Ok(Self::PointToPlane),
            _ => Err(Error::InvalidArgument(format!("unknown icp variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop once `|R_k - R_{k-1}|_F + |t_k - t_{k-1}|` falls below this.
    pub convergence_threshold: f64,
    pub variant: IcpVariant,
}

impl IcpConfig {
    pub fn new(variant: IcpVariant, max_correspondence_distance: f64) -> Self {
        Self {
            max_correspondence_distance,
            max_iterations: 50,
            convergence_threshold: 1e-10,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_correspondence_distance > 0.0
            && self.max_correspondence_distance.is_finite()
            && self.convergence_threshold > 0.0
            && self.max_iterations >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("icp distances and thresholds must be positive, iterations >= 1".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    /// RMS residual of the last association, measured after its update.
    pub residual: f64,
    pub converged: bool,
    /// RMS residual per iteration under that iteration's final transform.
    pub residual_trace: Vec<f64>,
}

/// Least-squares `(R, t)` minimizing `sum |R s_i + t - t_i|^2` (Kabsch with
/// reflection correction).
pub fn rigid_align_closed_form(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source points for {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateCorrespondences(format!("{} pairs, need at least 3", source.len())));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vector3<f64>>() / n;
    let ct = target.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    let mut u = svd.u.expect("u requested");
    let mut v_t = svd.v_t.expect("v requested");
    // Sort descending so the smallest direction is last.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (u0, vt0, sv0) = (u, v_t, sv);
    for (k, &o) in order.iter().enumerate() {
        u.set_column(k, &u0.column(o));
        v_t.set_row(k, &vt0.row(o));
        sv[k] = sv0[o];
    }
    if !(sv[0] > 0.0) || sv[1] <= RANK_RATIO * sv[0] {
        return Err(Error::DegenerateCorrespondences(format!(
            "cross-covariance singular values {:.3e} {:.3e} {:.3e}",
            sv[0], sv[1], sv[2]
        )));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    Ok(RigidTransform::new(r, ct - r * cs))
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    (sum_sq / n as f64).sqrt()
}

fn change(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.rotation - b.rotation).norm() + (a.translation - b.translation).norm()
}

/// Solves `A x = b` by elimination with partial pivoting; a pivot below
/// `MIN_PIVOT` is reported as degenerate.
fn solve6(a: Matrix6<f64>, b: Vector6<f64>) -> Result<Vector6<f64>> {
    let mut m = a;
    let mut rhs = b;
    for col in 0..6 {
        let p = (col..6)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .expect("non-empty");
        if m[(p, col)].abs() < MIN_PIVOT {
            return Err(Error::DegenerateCorrespondences(format!(
                "point-to-plane system has pivot {:.3e}",
                m[(p, col)]
            )));
        }
        m.swap_rows(col, p);
        rhs.swap_rows(col, p);
        for r in col + 1..6 {
            let f = m[(r, col)] / m[(col, col)];
            for c in col..6 {
                m[(r, c)] -= f * m[(col, c)];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = Vector6::zeros();
    for r in (0..6).rev() {
        let s: f64 = (r + 1..6).map(|c| m[(r, c)] * x[c]).sum();
        x[r] = (rhs[r] - s) / m[(r, r)];
    }
    Ok(x)
}

/// Estimates `T` with `apply(T, source)` aligned to `template`. Each
/// template point is associated with its nearest transformed source point
/// within the gate.
pub fn icp(template: &PointCloud, source: &PointCloud, config: &IcpConfig, init: &RigidTransform) -> Result<IcpResult> {
    config.validate()?;
    if template.is_empty() || source.is_empty() {
        return Err(Error::EmptySet("icp"));
    }
    let normals = match config.variant {
        IcpVariant::PointToPlane => {
            if template.feature_kind() != FeatureKind::Normals {
                return Err(Error::InvalidArgument(
                    "point-to-plane icp needs template normals".into(),
                ));
            }
            true
        }
        IcpVariant::PointToPoint => false,
    };
    let gate = config.max_correspondence_distance;
    let index = NeighborIndex::for_cloud(source, gate)?;
    let mut current = *init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iterations {
        iterations = it + 1;
        let inv = current.inverse();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut nrm = Vec::new();
        for (i, x) in template.points().iter().enumerate() {
            if let Some(nb) = index.nearest_within(&inv.transform_point(x), gate) {
                src.push(source.points()[nb.index]);
                dst.push(*x);
                if normals {
                    nrm.push(Vector3::from_column_slice(template.feature(i)));
                }
            }
        }
        if src.is_empty() {
            return Err(Error::NoOverlap { iteration: it });
        }
        let next = if normals {
            point_to_plane_step(&current, &src, &dst, &nrm)?
        } else {
            rigid_align_closed_form(&src, &dst)?
        };
        let sum_sq: f64 = src
            .iter()
            .zip(&dst)
            .enumerate()
            .map(|(k, (s, x))| {
                let r = next.transform_point(s) - x;
                if normals {
                    r.dot(&nrm[k]).powi(2)
                } else {
                    r.norm_squared()
                }
            })
            .sum();
        trace.push(rms(sum_sq, src.len()));
        let delta = change(&next, &current);
        current = next;
        if delta < config.convergence_threshold {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        iterations,
        residual: *trace.last().expect("at least one iteration"),
        converged,
        residual_trace: trace,
    })
}

/// One Gauss-Newton step of the small-angle linearization, composed on the
/// left of `current`.
fn point_to_plane_step(
    current: &RigidTransform,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    nrm: &[Vector3<f64>],
) -> Result<RigidTransform> {
    let mut ata = Matrix6::zeros();
    let mut atb = Vector6::zeros();
    for ((s, x), n) in src.iter().zip(dst).zip(nrm) {
        let p = current.transform_point(s);
        let c = p.cross(n);
        let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        let b = -(p - x).dot(n);
        ata += row * row.transpose();
        atb += row * b;
    }
    let sol = solve6(ata, atb)?;
    let omega = Vector3::new(sol[0], sol[1], sol[2]);
    let angle = omega.norm();
    let delta = if angle > 0.0 {
        RigidTransform::from_axis_angle(&(omega / angle), angle, Vector3::new(sol[3], sol[4], sol[5]))
    } else {
        RigidTransform::from_translation(Vector3::new(sol[3], sol[4], sol[5]))
    };
    Ok(delta.compose(current))
}
