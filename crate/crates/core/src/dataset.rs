//! EuRoC-style IMU / ground-truth ingestion, the ToA and trajectory CSV
//! formats, and nearest-timestamp association.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Pose, Quat};

/// Nanosecond timestamp.
pub type Timestamp = i64;

pub const NANOS_PER_SEC: f64 = 1e9;

/// Default association window: one 100 Hz ground-truth period.
pub const DEFAULT_MAX_GAP_NS: Timestamp = 10_000_000;

pub const TOA_HEADER: &str = "t_ns,bs_id,distance_m";
pub const TRAJECTORY_HEADER: &str = "t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: malformed line {line}: {reason}", path.display())]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: timestamp on line {line} does not increase", path.display())]
    NonMonotonicTimestamp { path: PathBuf, line: usize },
    #[error("{}: line {line} references unknown base station {id}", path.display())]
    UnknownBsId { path: PathBuf, line: usize, id: i64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl DatasetError {
    /// 1-based line number, when the error refers to one.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::MalformedLine { line, .. }
            | Self::NonMonotonicTimestamp { line, .. }
            | Self::UnknownBsId { line, .. } => Some(*line),
            Self::Io { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: Timestamp,
    /// Body-frame angular rate, rad/s.
    pub omega: Vector3<f64>,
    /// Body-frame specific force, m/s².
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthPose {
    pub t: Timestamp,
    pub position: Vector3<f64>,
    pub orientation: Quat,
    pub velocity: Option<Vector3<f64>>,
    pub bias_gyro: Option<Vector3<f64>>,
    pub bias_accel: Option<Vector3<f64>>,
}

impl GroundTruthPose {
    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation.to_rot(), self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToaMeasurement {
    pub t: Timestamp,
    /// 1-based base-station index.
    pub bs_id: u32,
    /// Metric distance derived from the time of arrival.
    pub distance: f64,
}

/// A timestamped estimate as written to trajectory CSVs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: Timestamp,
    pub position: Vector3<f64>,
    pub orientation: Quat,
    pub velocity: Vector3<f64>,
}

impl TrajectoryPoint {
    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation.to_rot(), self.position)
    }
}

struct Lines<R> {
    path: PathBuf,
    inner: io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(path: &Path, reader: R) -> Self {
        Self {
            path: path.to_path_buf(),
            inner: reader.lines(),
            line_no: 0,
        }
    }

    /// Next non-blank line with its 1-based number; the header counts as line 1.
    fn next_line(&mut self) -> Result<Option<(usize, String)>, DatasetError> {
        loop {
            let Some(line) = self.inner.next() else {
                return Ok(None);
            };
            self.line_no += 1;
            let line = line.map_err(|source| DatasetError::Io {
                path: self.path.clone(),
                source,
            })?;
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                return Ok(Some((self.line_no, trimmed.to_string())));
            }
        }
    }

    fn malformed(&self, line: usize, reason: impl Into<String>) -> DatasetError {
        DatasetError::MalformedLine {
            path: self.path.clone(),
            line,
            reason: reason.into(),
        }
    }

    fn skip_header(&mut self) -> Result<(), DatasetError> {
        self.next_line().map(|_| ())
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, DatasetError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn parse_fields<R: BufRead>(
    lines: &Lines<R>,
    line_no: usize,
    line: &str,
) -> Result<Vec<f64>, DatasetError> {
    line.split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| lines.malformed(line_no, format!("bad number {f:?}")))
        })
        .collect()
}

fn parse_timestamp<R: BufRead>(
    lines: &Lines<R>,
    line_no: usize,
    field: &str,
) -> Result<Timestamp, DatasetError> {
    field
        .trim()
        .parse::<Timestamp>()
        .map_err(|_| lines.malformed(line_no, format!("bad timestamp {field:?}")))
}

/// Parses an EuRoC `imu0/data.csv` stream.
pub fn parse_imu<R: BufRead>(path: &Path, reader: R) -> Result<Vec<ImuSample>, DatasetError> {
    let mut lines = Lines::new(path, reader);
    lines.skip_header()?;
    let mut out: Vec<ImuSample> = Vec::new();
    while let Some((no, line)) = lines.next_line()? {
        let (ts, rest) = line.split_once(',').unwrap_or((&line, ""));
        let t = parse_timestamp(&lines, no, ts)?;
        let v = parse_fields(&lines, no, rest)?;
        if v.len() != 6 {
            return Err(lines.malformed(no, format!("expected 7 columns, got {}", v.len() + 1)));
        }
        if out.last().is_some_and(|prev| t <= prev.t) {
            return Err(DatasetError::NonMonotonicTimestamp {
                path: path.to_path_buf(),
                line: no,
            });
        }
        out.push(ImuSample {
            t,
            omega: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        });
    }
    Ok(out)
}

pub fn load_imu(path: impl AsRef<Path>) -> Result<Vec<ImuSample>, DatasetError> {
    let path = path.as_ref();
    parse_imu(path, open(path)?)
}

/// Parses ground truth: `t, p(3), q(w,x,y,z)` optionally followed by
/// `v(3)` and then `b_g(3), b_a(3)`.
pub fn parse_groundtruth<R: BufRead>(
    path: &Path,
    reader: R,
) -> Result<Vec<GroundTruthPose>, DatasetError> {
    let mut lines = Lines::new(path, reader);
    lines.skip_header()?;
    let mut out: Vec<GroundTruthPose> = Vec::new();
    while let Some((no, line)) = lines.next_line()? {
        let (ts, rest) = line.split_once(',').unwrap_or((&line, ""));
        let t = parse_timestamp(&lines, no, ts)?;
        let v = parse_fields(&lines, no, rest)?;
        if !matches!(v.len(), 7 | 10 | 16) {
            return Err(lines.malformed(
                no,
                format!("expected 8, 11 or 17 columns, got {}", v.len() + 1),
            ));
        }
        let raw = Quat {
            w: v[3],
            x: v[4],
            y: v[5],
            z: v[6],
        };
        if (raw.norm() - 1.0).abs() > 1e-3 {
            return Err(lines.malformed(no, format!("quaternion norm {}", raw.norm())));
        }
        if out.last().is_some_and(|prev| t <= prev.t) {
            return Err(DatasetError::NonMonotonicTimestamp {
                path: path.to_path_buf(),
                line: no,
            });
        }
        let vec_at = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
        out.push(GroundTruthPose {
            t,
            position: vec_at(0),
            orientation: raw.normalized(),
            velocity: (v.len() >= 10).then(|| vec_at(7)),
            bias_gyro: (v.len() == 16).then(|| vec_at(10)),
            bias_accel: (v.len() == 16).then(|| vec_at(13)),
        });
    }
    Ok(out)
}

pub fn load_groundtruth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthPose>, DatasetError> {
    let path = path.as_ref();
    parse_groundtruth(path, open(path)?)
}

/// Parses the ToA CSV. Timestamps may repeat (one row per base station per
/// tick) but never decrease. `num_bs` bounds the accepted ids to `1..=num_bs`.
pub fn parse_toa<R: BufRead>(
    path: &Path,
    reader: R,
    num_bs: usize,
) -> Result<Vec<ToaMeasurement>, DatasetError> {
    let mut lines = Lines::new(path, reader);
    lines.skip_header()?;
    let mut out: Vec<ToaMeasurement> = Vec::new();
    while let Some((no, line)) = lines.next_line()? {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(lines.malformed(no, format!("expected 3 columns, got {}", fields.len())));
        }
        let t = parse_timestamp(&lines, no, fields[0])?;
        let id: i64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| lines.malformed(no, format!("bad bs_id {:?}", fields[1])))?;
        let distance: f64 = fields[2]
            .trim()
            .parse()
            .ok()
            .filter(|d: &f64| d.is_finite() && *d > 0.0)
            .ok_or_else(|| lines.malformed(no, format!("bad distance {:?}", fields[2])))?;
        if id < 1 || id as usize > num_bs {
            return Err(DatasetError::UnknownBsId {
                path: path.to_path_buf(),
                line: no,
                id,
            });
        }
        if out.last().is_some_and(|prev| t < prev.t) {
            return Err(DatasetError::NonMonotonicTimestamp {
                path: path.to_path_buf(),
                line: no,
            });
        }
        out.push(ToaMeasurement {
            t,
            bs_id: id as u32,
            distance,
        });
    }
    Ok(out)
}

pub fn load_toa(path: impl AsRef<Path>, num_bs: usize) -> Result<Vec<ToaMeasurement>, DatasetError> {
    let path = path.as_ref();
    parse_toa(path, open(path)?, num_bs)
}

/// Renders the ToA CSV; floats use the shortest exact round-trip form.
pub fn format_toa(measurements: &[ToaMeasurement]) -> String {
    let mut s = String::with_capacity(32 * (measurements.len() + 1));
    s.push_str(TOA_HEADER);
    s.push('\n');
    for m in measurements {
        let _ = writeln!(s, "{},{},{}", m.t, m.bs_id, m.distance);
    }
    s
}

pub fn save_toa(path: impl AsRef<Path>, measurements: &[ToaMeasurement]) -> Result<(), DatasetError> {
    write_atomic(path.as_ref(), format_toa(measurements).as_bytes())
}

pub fn format_imu(samples: &[ImuSample]) -> String {
    let mut s = String::from(
        "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],\
         a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]\n",
    );
    for m in samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.t, m.omega.x, m.omega.y, m.omega.z, m.accel.x, m.accel.y, m.accel.z
        );
    }
    s
}

/// Ground truth in EuRoC `state_groundtruth_estimate0` layout (w-first quaternion).
pub fn format_groundtruth(poses: &[GroundTruthPose]) -> String {
    let mut s = String::from(
        "#timestamp,p_x [m],p_y [m],p_z [m],q_w [],q_x [],q_y [],q_z [],v_x [m s^-1],v_y [m s^-1],\
         v_z [m s^-1],b_w_x [rad s^-1],b_w_y [rad s^-1],b_w_z [rad s^-1],b_a_x [m s^-2],\
         b_a_y [m s^-2],b_a_z [m s^-2]\n",
    );
    for g in poses {
        let q = g.orientation;
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            g.t, g.position.x, g.position.y, g.position.z, q.w, q.x, q.y, q.z
        );
        if let Some(v) = g.velocity {
            let _ = write!(s, ",{},{},{}", v.x, v.y, v.z);
            if let (Some(bg), Some(ba)) = (g.bias_gyro, g.bias_accel) {
                let _ = write!(
                    s,
                    ",{},{},{},{},{},{}",
                    bg.x, bg.y, bg.z, ba.x, ba.y, ba.z
                );
            }
        }
        s.push('\n');
    }
    s
}

pub fn format_trajectory(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for p in points {
        let q = p.orientation;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.t,
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.x,
            q.y,
            q.z,
            p.velocity.x,
            p.velocity.y,
            p.velocity.z
        );
    }
    s
}

/// Reads back a trajectory written by [`format_trajectory`].
pub fn parse_trajectory<R: BufRead>(
    path: &Path,
    reader: R,
) -> Result<Vec<TrajectoryPoint>, DatasetError> {
    let mut lines = Lines::new(path, reader);
    lines.skip_header()?;
    let mut out = Vec::new();
    while let Some((no, line)) = lines.next_line()? {
        let (ts, rest) = line.split_once(',').unwrap_or((&line, ""));
        let t = parse_timestamp(&lines, no, ts)?;
        let v = parse_fields(&lines, no, rest)?;
        if v.len() != 10 {
            return Err(lines.malformed(no, "expected 11 columns"));
        }
        out.push(TrajectoryPoint {
            t,
            position: Vector3::new(v[0], v[1], v[2]),
            orientation: Quat::from_wxyz(v[3], v[4], v[5], v[6]),
            velocity: Vector3::new(v[7], v[8], v[9]),
        });
    }
    Ok(out)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

/// Re-expresses ground truth measured in a reference frame (e.g. the Vicon
/// marker) in the IMU frame: `T_w_imu = T_w_ref · T_ref_imu`.
pub fn apply_extrinsic(poses: &mut [GroundTruthPose], ref_from_imu: &Pose) {
    for g in poses {
        let t = g.pose() * *ref_from_imu;
        g.position = t.trans;
        g.orientation = crate::geometry::rot_to_quat(&t.rot);
    }
}

/// One nearest-timestamp match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Association {
    pub reference: usize,
    pub query: usize,
}

/// For every query timestamp, the reference index with the smallest `|Δt|`
/// (ties go to the earlier reference); matches farther than `max_gap` are
/// dropped. Both inputs must be sorted.
pub fn associate_nearest(
    reference: &[Timestamp],
    query: &[Timestamp],
    max_gap: Timestamp,
) -> Vec<Association> {
    let mut out = Vec::with_capacity(query.len());
    if reference.is_empty() {
        return out;
    }
    let mut j = 0usize;
    for (qi, &q) in query.iter().enumerate() {
        while j + 1 < reference.len() && reference[j + 1] <= q {
            j += 1;
        }
        let mut best = j;
        if j + 1 < reference.len() {
            let d0 = (q - reference[j]).unsigned_abs();
            let d1 = (reference[j + 1] - q).unsigned_abs();
            if d1 < d0 {
                best = j + 1;
            }
        }
        if (q - reference[best]).unsigned_abs() <= max_gap.unsigned_abs() {
            out.push(Association {
                reference: best,
                query: qi,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.csv")
    }

    #[test]
    fn header_only_imu_is_empty() {
        let samples = parse_imu(p(), "#timestamp,wx,wy,wz,ax,ay,az\n".as_bytes()).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn imu_line_echoes_input() {
        let text = "#header\n100,0.1,0.2,0.3,9.8,0.0,0.1\n";
        let samples = parse_imu(p(), text.as_bytes()).unwrap();
        assert_eq!(
            samples,
            vec![ImuSample {
                t: 100,
                omega: Vector3::new(0.1, 0.2, 0.3),
                accel: Vector3::new(9.8, 0.0, 0.1),
            }]
        );
    }

    #[test]
    fn imu_rejects_decreasing_time() {
        let text = "#header\n200,0,0,0,0,0,0\n100,0,0,0,0,0,0\n";
        let err = parse_imu(p(), text.as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::NonMonotonicTimestamp { line: 3, .. }));
    }

    #[test]
    fn imu_rejects_wrong_arity() {
        let text = "#header\n100,0,0,0,0,0\n";
        let err = parse_imu(p(), text.as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn imu_accepts_crlf() {
        let text = "#header\r\n100,0,0,0,0,0,9.81\r\n105,0,0,0,0,0,9.81\r\n";
        assert_eq!(parse_imu(p(), text.as_bytes()).unwrap().len(), 2);
    }

    #[test]
    fn groundtruth_identity_row() {
        let text = "#h\n5,1,2,3,1,0,0,0\n";
        let g = parse_groundtruth(p(), text.as_bytes()).unwrap();
        assert_eq!(g[0].orientation.w, 1.0);
        assert_eq!(g[0].position, Vector3::new(1.0, 2.0, 3.0));
        assert!(g[0].velocity.is_none());
    }

    #[test]
    fn groundtruth_rejects_non_unit_quaternion() {
        let text = "#h\n5,1,2,3,0.9,0,0,0\n";
        let err = parse_groundtruth(p(), text.as_bytes()).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn groundtruth_renormalizes_near_unit() {
        let text = "#h\n5,0,0,0,1.0005,0,0,0\n";
        let g = parse_groundtruth(p(), text.as_bytes()).unwrap();
        assert!((g[0].orientation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn groundtruth_full_row_populates_velocity_and_biases() {
        let text = "#h\n5,1,2,3,1,0,0,0,0.1,0.2,0.3,0.01,0.02,0.03,-0.1,-0.2,-0.3\n";
        let g = parse_groundtruth(p(), text.as_bytes()).unwrap();
        assert_eq!(g[0].velocity, Some(Vector3::new(0.1, 0.2, 0.3)));
        assert_eq!(g[0].bias_gyro, Some(Vector3::new(0.01, 0.02, 0.03)));
        assert_eq!(g[0].bias_accel, Some(Vector3::new(-0.1, -0.2, -0.3)));
    }

    #[test]
    fn toa_empty_sequence_is_header_only() {
        assert_eq!(format_toa(&[]), "t_ns,bs_id,distance_m\n");
    }

    #[test]
    fn toa_unknown_bs_id() {
        let text = "t_ns,bs_id,distance_m\n0,7,3.5\n";
        let err = parse_toa(p(), text.as_bytes(), 5).unwrap_err();
        assert!(matches!(err, DatasetError::UnknownBsId { id: 7, line: 2, .. }));
    }

    #[test]
    fn toa_rejects_non_positive_distance() {
        let text = "t_ns,bs_id,distance_m\n0,1,-1.0\n";
        assert!(matches!(
            parse_toa(p(), text.as_bytes(), 5).unwrap_err(),
            DatasetError::MalformedLine { line: 2, .. }
        ));
    }

    #[test]
    fn association_rules() {
        let ts = [100, 200, 300];
        let ident = associate_nearest(&ts, &ts, DEFAULT_MAX_GAP_NS);
        assert!(ident.iter().all(|a| a.reference == a.query));
        assert_eq!(ident.len(), 3);

        let tie = associate_nearest(&[100, 200], &[150], i64::MAX);
        assert_eq!(tie, vec![Association { reference: 0, query: 0 }]);

        assert!(associate_nearest(&[100, 200], &[150], 10).is_empty());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_imu("/nonexistent/imu.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/imu.csv"));
    }

    proptest! {
        #[test]
        fn toa_roundtrip(raw in proptest::collection::vec((0i64..1_000_000, 1u32..=5, 1e-6..500.0f64), 0..1000)) {
            let mut t = 0i64;
            let ms: Vec<ToaMeasurement> = raw.into_iter().map(|(dt, id, d)| {
                t += dt;
                ToaMeasurement { t, bs_id: id, distance: d }
            }).collect();
            let text = format_toa(&ms);
            let back = parse_toa(p(), text.as_bytes(), 5).unwrap();
            prop_assert_eq!(back, ms);
        }

        #[test]
        fn association_is_monotone(
            mut refs in proptest::collection::vec(0i64..10_000, 1..50),
            mut qs in proptest::collection::vec(0i64..10_000, 0..50),
        ) {
            refs.sort();
            refs.dedup();
            qs.sort();
            let pairs = associate_nearest(&refs, &qs, i64::MAX);
            prop_assert_eq!(pairs.len(), qs.len());
            for w in pairs.windows(2) {
                prop_assert!(w[0].reference <= w[1].reference);
            }
            for a in &pairs {
                let best = refs.iter().map(|r| (r - qs[a.query]).abs()).min().unwrap();
                prop_assert_eq!((refs[a.reference] - qs[a.query]).abs(), best);
            }
        }
    }
}
