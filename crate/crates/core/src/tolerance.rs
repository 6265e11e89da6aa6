//! Numerical tolerances shared across the crate (all double precision).

/// Unit-norm / orthogonality checks on quaternions and rotation matrices.
pub const ALGEBRA: f64 = 1e-9;

/// Below this norm a quaternion is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Smallest pivot accepted by the point-to-plane normal equations.
pub const MIN_PIVOT: f64 = 1e-10;

/// Ratio of second to first singular value below which a cross-covariance
/// is considered rank deficient.
pub const RANK_RATIO: f64 = 1e-12;
