//! Per-pair registration errors, aggregate reports, odometry trajectories
//! and segment-based drift metrics.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::geometry::{chordal_degrees, rotation_error_chordal, translation_error, wrap_degrees, PointCloud, RigidTransform};
use crate::icp::{icp, IcpConfig};
use crate::network::Model;

/// Poses `P_0 = I, P_1, ...` in the frame of the first scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<RigidTransform>,
}

impl Trajectory {
    /// Fails unless the first pose is the identity (within `1e-9`).
    pub fn new(poses: Vec<RigidTransform>) -> Result<Self> {
        match poses.first() {
            Some(p)
                if (p.rotation - RigidTransform::identity().rotation).norm() <= 1e-9
                    && p.translation.norm() <= 1e-9 =>
            {
                Ok(Self { poses })
            }
            Some(_) => Err(Error::InvalidArgument("trajectory must start at the identity".into())),
            None => Err(Error::InvalidArgument("trajectory needs at least one pose".into())),
        }
    }

    /// Wraps poses without the identity check, for externally recorded
    /// ground truth.
    pub fn from_poses(poses: Vec<RigidTransform>) -> Self {
        Self { poses }
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Cumulative path length at each pose.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }
}

/// `P_{t+1} = P_t T_t` starting from the identity.
pub fn accumulate_odometry(relative: &[RigidTransform]) -> Trajectory {
    let mut poses = Vec::with_capacity(relative.len() + 1);
    poses.push(RigidTransform::identity());
    for t in relative {
        let last = *poses.last().expect("non-empty");
        poses.push(last.compose(t));
    }
    Trajectory { poses }
}

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentErrors {
    /// Mean translation error in percent of the segment length.
    pub translation_pct: f64,
    /// Mean chordal rotation error in degrees per 100 m.
    pub rotation_deg_per_100m: f64,
    pub segments: usize,
}

/// Relative pose error over every start frame and every segment length,
/// with the segment end at the first frame whose ground-truth arc length
/// from the start reaches the length. `None` when no segment fits.
pub fn kitti_segment_errors(gt: &Trajectory, pred: &Trajectory) -> Result<Option<SegmentErrors>> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "ground truth has {} poses, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let dist = gt.arc_lengths();
    let (g, p) = (gt.poses(), pred.poses());
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut count = 0;
    for first in 0..g.len() {
        for &len in &SEGMENT_LENGTHS {
            let Some(last) = (first..g.len()).find(|&j| dist[j] - dist[first] >= len) else {
                continue;
            };
            let dg = g[first].inverse().compose(&g[last]);
            let dp = p[first].inverse().compose(&p[last]);
            let err = dp.inverse().compose(&dg);
            t_sum += err.translation.norm() / len * 100.0;
            r_sum += chordal_degrees(&err.rotation, &RigidTransform::identity().rotation) / len * 100.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(SegmentErrors {
        translation_pct: t_sum / count as f64,
        rotation_deg_per_100m: r_sum / count as f64,
        segments: count,
    }))
}

/// Anything that estimates `T` with `apply(T, source)` aligned to the
/// template.
pub trait RegistrationMethod {
    fn name(&self) -> String;

    /// Identifies the configuration and parameters.
    fn fingerprint(&self) -> String;

    fn register(&self, template: &PointCloud, source: &PointCloud) -> Result<RigidTransform>;

    /// Hook for methods that need the whole pair.
    fn register_pair(&self, pair: &Pair) -> Result<RigidTransform> {
        self.register(&pair.template, &pair.source)
    }
}

impl RegistrationMethod for Model {
    fn name(&self) -> String {
        "network".into()
    }

    fn fingerprint(&self) -> String {
        Model::fingerprint(self).to_string()
    }

    fn register(&self, template: &PointCloud, source: &PointCloud) -> Result<RigidTransform> {
        Ok(self.forward(template, source)?.transform)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpMethod {
    pub config: IcpConfig,
}

impl RegistrationMethod for IcpMethod {
    fn name(&self) -> String {
        match self.config.variant {
            crate::icp::IcpVariant::PointToPoint => "icp-point2point".into(),
            crate::icp::IcpVariant::PointToPlane => "icp-point2plane".into(),
        }
    }

    fn fingerprint(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    fn register(&self, template: &PointCloud, source: &PointCloud) -> Result<RigidTransform> {
        Ok(icp(template, source, &self.config, &RigidTransform::identity())?.transform)
    }
}

/// Always answers the identity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityMethod;

impl RegistrationMethod for IdentityMethod {
    fn name(&self) -> String {
        "identity".into()
    }

    fn fingerprint(&self) -> String {
        "identity".into()
    }

    fn register(&self, _: &PointCloud, _: &PointCloud) -> Result<RigidTransform> {
        Ok(RigidTransform::identity())
    }
}

/// Answers the ground-truth label; a sanity reference for the metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleMethod;

impl RegistrationMethod for OracleMethod {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn fingerprint(&self) -> String {
        "oracle".into()
    }

    fn register(&self, _: &PointCloud, _: &PointCloud) -> Result<RigidTransform> {
        Err(Error::InvalidArgument("the oracle needs the labelled pair".into()))
    }

    fn register_pair(&self, pair: &Pair) -> Result<RigidTransform> {
        Ok(pair.gt)
    }
}

/// Outcome of one pair. Failed rows carry the error tag and no errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: usize,
    pub status: String,
    pub t_err: Option<f64>,
    /// Degrees.
    pub r_err: Option<f64>,
    /// Wrapped Euler residuals `(roll, pitch, yaw)` in degrees.
    pub euler_residual_deg: Option<[f64; 3]>,
    pub time_s: f64,
}

impl PairRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Summary statistics over the successful rows. Standard deviations are
/// population (divide by `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub pairs: usize,
    pub failed: usize,
    pub t_mean: f64,
    pub t_std: f64,
    pub t_max: f64,
    pub r_mean: f64,
    pub r_std: f64,
    pub r_max: f64,
    pub t_rmse: f64,
    pub r_rmse: f64,
    pub time_mean_s: f64,
    pub time_max_s: f64,
}

fn mean_std_max(v: &[f64]) -> (f64, f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub fingerprint: String,
    pub rows: Vec<PairRow>,
    /// Wall-clock of the whole evaluation.
    pub total_time_s: f64,
}

impl EvaluationReport {
    pub fn aggregates(&self) -> Aggregates {
        let ok: Vec<&PairRow> = self.rows.iter().filter(|r| r.ok()).collect();
        let t: Vec<f64> = ok.iter().filter_map(|r| r.t_err).collect();
        let r: Vec<f64> = ok.iter().filter_map(|r| r.r_err).collect();
        let times: Vec<f64> = self.rows.iter().map(|r| r.time_s).collect();
        let (t_mean, t_std, t_max) = mean_std_max(&t);
        let (r_mean, r_std, r_max) = mean_std_max(&r);
        let (time_mean_s, _, time_max_s) = mean_std_max(&times);
        let m = 3.0 * ok.len() as f64;
        let t_rmse = (t.iter().map(|x| x * x).sum::<f64>() / m).sqrt();
        let r_rmse = (ok
            .iter()
            .filter_map(|r| r.euler_residual_deg)
            .flat_map(|e| e.map(|x| x * x))
            .sum::<f64>()
            / m)
            .sqrt();
        Aggregates {
            pairs: self.rows.len(),
            failed: self.rows.len() - ok.len(),
            t_mean,
            t_std,
            t_max,
            r_mean,
            r_std,
            r_max,
            t_rmse,
            r_rmse,
            time_mean_s,
            time_max_s,
        }
    }

    /// Methods and aggregates as JSON.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            method: &'a str,
            fingerprint: &'a str,
            total_time_s: f64,
            aggregates: Aggregates,
        }
        serde_json::to_string_pretty(&Summary {
            method: &self.method,
            fingerprint: &self.fingerprint,
            total_time_s: self.total_time_s,
            aggregates: self.aggregates(),
        })
        .expect("summary serializes")
    }
}

/// Errors of one estimate against its label.
pub fn score(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64, [f64; 3]) {
    let (ep, eg) = (pred.euler_zyx(), gt.euler_zyx());
    let e = [0, 1, 2].map(|k| wrap_degrees(ep[k].to_degrees() - eg[k].to_degrees()));
    (translation_error(pred, gt), rotation_error_chordal(pred, gt), e)
}

/// Runs `method` on every pair in order. Failures become rows with the
/// error tag as status.
pub fn evaluate_pairs(method: &dyn RegistrationMethod, pairs: &[Pair]) -> EvaluationReport {
    let start = Instant::now();
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let t0 = Instant::now();
            let result = method.register_pair(pair);
            let time_s = t0.elapsed().as_secs_f64();
            match result {
                Ok(pred) => {
                    let (t, r, e) = score(&pred, &pair.gt);
                    PairRow {
                        pair: i,
                        status: "ok".into(),
                        t_err: Some(t),
                        r_err: Some(r),
                        euler_residual_deg: Some(e),
                        time_s,
                    }
                }
                Err(e) => PairRow {
                    pair: i,
                    status: format!("failed:{}", e.tag()),
                    t_err: None,
                    r_err: None,
                    euler_residual_deg: None,
                    time_s,
                },
            }
        })
        .collect();
    EvaluationReport {
        method: method.name(),
        fingerprint: method.fingerprint(),
        rows,
        total_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Column order of [`report_csv`].
pub const REPORT_COLUMNS: [&str; 8] = [
    "pair",
    "status",
    "t_err",
    "r_err_deg",
    "d_roll_deg",
    "d_pitch_deg",
    "d_yaw_deg",
    "time_s",
];

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Per-pair CSV; numbers use shortest round-trip formatting.
pub fn report_csv(report: &EvaluationReport) -> String {
    let mut s = REPORT_COLUMNS.join(",");
    s.push('\n');
    for r in &report.rows {
        let e = r.euler_residual_deg;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:?}",
            r.pair,
            r.status,
            num(r.t_err),
            num(r.r_err),
            num(e.map(|e| e[0])),
            num(e.map(|e| e[1])),
            num(e.map(|e| e[2])),
            r.time_s
        );
    }
    s
}

pub fn export_report(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

/// Rows of a per-pair CSV written by [`report_csv`].
pub fn parse_report_csv(text: &str, source_name: &str) -> Result<Vec<PairRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(source_name, 1, e.to_string()))?
        .clone();
    if headers.iter().ne(REPORT_COLUMNS.iter().copied()) {
        return Err(Error::parse(source_name, 1, "unexpected report columns"));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        let opt = |k: usize| -> Result<Option<f64>> {
            let f = &rec[k];
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse()
                    .map(Some)
                    .map_err(|_| Error::parse(source_name, line, format!("bad number {f:?}")))
            }
        };
        let e = match (opt(4)?, opt(5)?, opt(6)?) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        rows.push(PairRow {
            pair: rec[0]
                .parse()
                .map_err(|_| Error::parse(source_name, line, "bad pair index"))?,
            status: rec[1].to_string(),
            t_err: opt(2)?,
            r_err: opt(3)?,
            euler_residual_deg: e,
            time_s: opt(7)?.ok_or_else(|| Error::parse(source_name, line, "missing time"))?,
        });
    }
    Ok(rows)
}

pub fn import_report(path: impl AsRef<Path>, method: &str, fingerprint: &str) -> Result<EvaluationReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_report_csv(&text, &path.display().to_string())?;
    Ok(EvaluationReport {
        method: method.into(),
        fingerprint: fingerprint.into(),
        total_time_s: rows.iter().map(|r| r.time_s).sum(),
        rows,
    })
}

/// One noise level of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub noise_std: f64,
    pub report: EvaluationReport,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "noise_std",
    "method",
    "pairs",
    "failed",
    "t_mean",
    "t_std",
    "t_max",
    "r_mean_deg",
    "r_std_deg",
    "r_max_deg",
    "t_rmse",
    "r_rmse_deg",
    "time_mean_s",
    "time_max_s",
];

/// One row per (noise level, method), noise level first.
pub fn noise_sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = SWEEP_COLUMNS.join(",");
    s.push('\n');
    for e in entries {
        let a = e.report.aggregates();
        let _ = writeln!(
            s,
            "{:?},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            e.noise_std,
            e.report.method,
            a.pairs,
            a.failed,
            a.t_mean,
            a.t_std,
            a.t_max,
            a.r_mean,
            a.r_std,
            a.r_max,
            a.t_rmse,
            a.r_rmse,
            a.time_mean_s,
            a.time_max_s
        );
    }
    s
}

pub fn export_noise_sweep(entries: &[SweepEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, noise_sweep_csv(entries)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, sample_shape, PerturbationSpec, ShapeFamily, ShapeSpec};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pairs(n: usize) -> Vec<Pair> {
        let spec = ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.6, 0.3] }, 128);
        (0..n)
            .map(|i| make_pair(&sample_shape(&spec, i as u64), &PerturbationSpec::modelnet().with_noise(0.0), i as u64))
            .collect()
    }

    #[test]
    fn accumulate_cases() {
        assert_eq!(accumulate_odometry(&[]).poses(), &[RigidTransform::identity()]);
        let step = RigidTransform::from_translation(Vector3::x());
        let traj = accumulate_odometry(&[step; 5]);
        assert_eq!(traj.poses()[5].translation, Vector3::new(5.0, 0.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = PerturbationSpec::Uniform {
            translation: [0.0, 2.0],
            rotation_deg: [0.0, 90.0],
            noise_std: 0.0,
        };
        let rel: Vec<RigidTransform> = (0..6).map(|_| spec.sample_transform(&mut rng)).collect();
        let traj = accumulate_odometry(&rel);
        let mut m = nalgebra::Matrix4::identity();
        for t in &rel {
            let mut h = nalgebra::Matrix4::identity();
            h.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
            h.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
            m *= h;
        }
        let last = traj.poses()[6];
        assert!((last.rotation - m.fixed_view::<3, 3>(0, 0)).norm() < 1e-12);
        assert!((last.translation - m.fixed_view::<3, 1>(0, 3)).norm() < 1e-12);

        // Undoing the increments returns to the identity at every step.
        let inv: Vec<RigidTransform> = rel.iter().map(|t| t.inverse()).collect();
        let mut pose = last;
        for t in inv.iter().rev() {
            pose = pose.compose(t);
        }
        assert!((pose.rotation - RigidTransform::identity().rotation).norm() < 1e-9);
        assert!(pose.translation.norm() < 1e-9);
        assert!(Trajectory::new(vec![step]).is_err());
    }

    fn straight(n: usize, step: f64) -> Trajectory {
        accumulate_odometry(&vec![RigidTransform::from_translation(Vector3::new(step, 0.0, 0.0)); n])
    }

    #[test]
    fn segment_errors_closed_forms() {
        let gt = straight(120, 10.0);
        let e = kitti_segment_errors(&gt, &gt).unwrap().unwrap();
        assert_eq!((e.translation_pct, e.rotation_deg_per_100m), (0.0, 0.0));
        let pred = straight(120, 10.1);
        let e = kitti_segment_errors(&gt, &pred).unwrap().unwrap();
        assert!((e.translation_pct - 1.0).abs() < 1e-9, "{e:?}");
        assert_eq!(e.rotation_deg_per_100m, 0.0);
        assert!(kitti_segment_errors(&straight(5, 10.0), &straight(5, 10.0)).unwrap().is_none());
        assert!(kitti_segment_errors(&straight(5, 10.0), &straight(6, 10.0)).is_err());
    }

    #[test]
    fn oracle_and_identity_reports() {
        let ps = pairs(6);
        let r = evaluate_pairs(&OracleMethod, &ps);
        let a = r.aggregates();
        assert_eq!((a.t_max, a.r_max, a.failed), (0.0, 0.0, 0));
        assert!(r.total_time_s >= r.rows.iter().map(|x| x.time_s).sum::<f64>());

        let r = evaluate_pairs(&IdentityMethod, &ps);
        let mean_angle = ps.iter().map(|p| p.gt.angle().to_degrees()).sum::<f64>() / 6.0;
        assert!((r.aggregates().r_mean - mean_angle).abs() < 1e-9);
    }

    #[test]
    fn failed_rows_do_not_abort() {
        let ps = pairs(3);
        let r = evaluate_pairs(&IdentityMethod.clone(), &ps);
        assert_eq!(r.rows.len(), 3);
        // The oracle's plain register path fails; route through a wrapper.
        struct Plain;
        impl RegistrationMethod for Plain {
            fn name(&self) -> String {
                "plain".into()
            }
            fn fingerprint(&self) -> String {
                String::new()
            }
            fn register(&self, t: &PointCloud, s: &PointCloud) -> Result<RigidTransform> {
                OracleMethod.register(t, s)
            }
        }
        let r = evaluate_pairs(&Plain, &ps);
        assert!(r.rows.iter().all(|x| x.status == "failed:invalid-argument"));
        assert_eq!(r.aggregates().failed, 3);
    }

    #[test]
    fn csv_round_trip_and_sweep() {
        let empty = EvaluationReport {
            method: "m".into(),
            fingerprint: "f".into(),
            rows: Vec::new(),
            total_time_s: 0.0,
        };
        assert_eq!(report_csv(&empty), REPORT_COLUMNS.join(",") + "\n");

        let ps = pairs(5);
        let r = evaluate_pairs(&IdentityMethod, &ps);
        let back = parse_report_csv(&report_csv(&r), "mem").unwrap();
        assert_eq!(back, r.rows);
        let again = EvaluationReport { rows: back, ..r.clone() };
        assert_eq!(again.aggregates(), r.aggregates());

        let mut entries = Vec::new();
        for noise in [0.0, 0.01, 0.02] {
            for m in [&IdentityMethod as &dyn RegistrationMethod, &OracleMethod] {
                entries.push(SweepEntry {
                    noise_std: noise,
                    report: evaluate_pairs(m, &ps),
                });
            }
        }
        let csv = noise_sweep_csv(&entries);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.0,identity"));
    }
}
