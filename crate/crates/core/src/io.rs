//! File formats.
//!
//! Text files are UTF-8 CSV whose first line is `# polemap <kind> version
//! <major>.<minor>`; readers reject other kinds and unknown major versions.
//! Floats are written in shortest round-trip form, so every writer/reader
//! pair reproduces its records bit-exactly. Scans are binary (see
//! [`ScanWriter`]).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::{ErrorSample, TrajectoryErrorReport};
use crate::geometry::{Pose2D, StampedPose, Vec2, Vec3};
use crate::grid::{Ray, Scan};
use crate::localization::{OdometryIncrement, OdometryRecord};
use crate::mapping::PoleLandmark;
use crate::poles::PoleDetection;
use crate::simulator::{DynamicObject, PoleShape, PoleSpec, Wall, Waypoint, WorldModel};

pub const VERSION_MAJOR: u32 = 1;
pub const VERSION_MINOR: u32 = 0;

pub const TRAJECTORY_COLUMNS: [&str; 4] = ["t", "x", "y", "phi"];
pub const ODOMETRY_COLUMNS: [&str; 10] = [
    "t", "dx", "dy", "dphi", "cov_xx", "cov_xy", "cov_xphi", "cov_yy", "cov_yphi", "cov_phiphi",
];
pub const LANDMARK_COLUMNS: [&str; 4] = ["x", "y", "width", "score"];
pub const ERROR_COLUMNS: [&str; 3] = ["t", "position_error", "heading_error_deg"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn header_line(kind: &str) -> String {
    format!("# polemap {kind} version {VERSION_MAJOR}.{VERSION_MINOR}\n")
}

fn check_header(path: &Path, line: &str, kind: &str) -> Result<()> {
    let bad = || format_err(path, 1, format!("expected header `# polemap {kind} version {VERSION_MAJOR}.x`"));
    let rest = line.trim_end().strip_prefix("# polemap ").ok_or_else(bad)?;
    let parts: Vec<&str> = rest.split_whitespace().collect();
    let [found, "version", version] = parts[..] else {
        return Err(bad());
    };
    if found != kind {
        return Err(format_err(path, 1, format!("expected a {kind} file, found {found}")));
    }
    let major: u32 = version
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .ok_or_else(bad)?;
    if major != VERSION_MAJOR {
        return Err(format_err(path, 1, format!("unsupported major version {major}")));
    }
    Ok(())
}

struct CsvIn {
    path: PathBuf,
    reader: csv::Reader<BufReader<File>>,
}

impl CsvIn {
    /// Opens `path`, checks the version line and, when `columns` is given,
    /// the column header.
    fn open(path: &Path, kind: &str, columns: Option<&[&str]>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut first = String::new();
        r.read_line(&mut first).map_err(io_err(path))?;
        check_header(path, &first, kind)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(columns.is_some())
            .flexible(columns.is_none())
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(r);
        if let Some(cols) = columns {
            let found = reader.headers().map_err(|e| csv_err(path, &e))?;
            if found.iter().ne(cols.iter().copied()) {
                return Err(format_err(path, 2, format!("expected columns `{}`", cols.join(","))));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            reader,
        })
    }

    /// Visits every record with its 1-based line number in the file.
    fn for_each(mut self, mut f: impl FnMut(&Path, usize, &csv::StringRecord) -> Result<()>) -> Result<()> {
        let mut rec = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut rec) {
                Ok(true) => {
                    let line = rec.position().map_or(0, |p| p.line() as usize + 1);
                    f(&self.path, line, &rec)?;
                }
                Ok(false) => return Ok(()),
                Err(e) => return Err(csv_err(&self.path, &e)),
            }
        }
    }
}

fn csv_err(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize + 1);
    format_err(path, line, e.to_string())
}

fn field<V: FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<V> {
    let raw = rec
        .get(idx)
        .ok_or_else(|| format_err(path, line, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| format_err(path, line, format!("field `{name}`: cannot parse `{raw}`")))
}

fn finite_fields<const N: usize>(
    path: &Path,
    line: usize,
    rec: &csv::StringRecord,
    offset: usize,
    names: &[&str],
) -> Result<[f64; N]> {
    if rec.len() != offset + N {
        return Err(format_err(path, line, format!("expected {} fields, found {}", offset + N, rec.len())));
    }
    let mut out = [0.0f64; N];
    for (k, o) in out.iter_mut().enumerate() {
        *o = field(path, line, rec, offset + k, names[offset + k])?;
        if !o.is_finite() {
            return Err(format_err(path, line, format!("field `{}` is not finite", names[offset + k])));
        }
    }
    Ok(out)
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    fn create(path: &Path, kind: &str, columns: Option<&[&str]>) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        w.write_all(header_line(kind).as_bytes()).map_err(io_err(path))?;
        let mut out = Self {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().flexible(columns.is_none()).from_writer(w),
        };
        if let Some(cols) = columns {
            out.row(cols.iter().map(|c| c.to_string()))?;
        }
        Ok(out)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        self.writer
            .write_record(fields)
            .map_err(|e| format_err(&self.path, 0, e.to_string()))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

fn strings<const N: usize>(v: [f64; N]) -> impl Iterator<Item = String> {
    v.into_iter().map(|x| x.to_string())
}

pub fn write_trajectory(path: &Path, poses: &[StampedPose<f64>]) -> Result<()> {
    let mut out = CsvOut::create(path, "trajectory", Some(&TRAJECTORY_COLUMNS))?;
    for p in poses {
        out.row(strings([p.t, p.pose.x, p.pose.y, p.pose.phi]))?;
    }
    out.finish()
}

/// Reads a trajectory; timestamps must be non-decreasing.
pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose<f64>>> {
    let mut poses: Vec<StampedPose<f64>> = Vec::new();
    CsvIn::open(path, "trajectory", Some(&TRAJECTORY_COLUMNS))?.for_each(|path, line, rec| {
        let [t, x, y, phi] = finite_fields(path, line, rec, 0, &TRAJECTORY_COLUMNS)?;
        if poses.last().is_some_and(|p| t < p.t) {
            return Err(format_err(path, line, "timestamps decrease"));
        }
        poses.push(StampedPose::new(t, Pose2D::new(x, y, phi)));
        Ok(())
    })?;
    Ok(poses)
}

pub fn write_odometry(path: &Path, records: &[OdometryRecord<f64>]) -> Result<()> {
    let mut out = CsvOut::create(path, "odometry", Some(&ODOMETRY_COLUMNS))?;
    for r in records {
        let (c, s) = (r.increment.chi, r.increment.sigma);
        out.row(strings([
            r.t, c[0], c[1], c[2], s[0][0], s[0][1], s[0][2], s[1][1], s[1][2], s[2][2],
        ]))?;
    }
    out.finish()
}

/// Reads odometry records; covariances must be positive semi-definite.
pub fn read_odometry(path: &Path) -> Result<Vec<OdometryRecord<f64>>> {
    let mut records: Vec<OdometryRecord<f64>> = Vec::new();
    CsvIn::open(path, "odometry", Some(&ODOMETRY_COLUMNS))?.for_each(|path, line, rec| {
        let [t, dx, dy, dphi, xx, xy, xp, yy, yp, pp] = finite_fields(path, line, rec, 0, &ODOMETRY_COLUMNS)?;
        if records.last().is_some_and(|r| t < r.t) {
            return Err(format_err(path, line, "timestamps decrease"));
        }
        let sigma = [[xx, xy, xp], [xy, yy, yp], [xp, yp, pp]];
        let increment = OdometryIncrement::new([dx, dy, dphi], sigma)
            .map_err(|e| format_err(path, line, e.to_string()))?;
        records.push(OdometryRecord { t, increment });
        Ok(())
    })?;
    Ok(records)
}

/// Landmark maps keep center, width and score; the accumulated merge weight
/// is not stored and reads back as the score.
pub fn write_landmarks(path: &Path, landmarks: &[PoleLandmark<f64>]) -> Result<()> {
    let mut out = CsvOut::create(path, "landmarks", Some(&LANDMARK_COLUMNS))?;
    for l in landmarks {
        out.row(strings([l.center.x, l.center.y, l.width, l.score]))?;
    }
    out.finish()
}

fn read_squares(path: &Path, kind: &str) -> Result<Vec<(Vec2<f64>, f64, f64)>> {
    let mut out = Vec::new();
    CsvIn::open(path, kind, Some(&LANDMARK_COLUMNS))?.for_each(|path, line, rec| {
        let [x, y, width, score] = finite_fields(path, line, rec, 0, &LANDMARK_COLUMNS)?;
        if !(width > 0.0) {
            return Err(format_err(path, line, "field `width` must be positive"));
        }
        out.push((Vec2::new(x, y), width, score));
        Ok(())
    })?;
    Ok(out)
}

pub fn read_landmarks(path: &Path) -> Result<Vec<PoleLandmark<f64>>> {
    Ok(read_squares(path, "landmarks")?
        .into_iter()
        .map(|(c, w, s)| PoleLandmark::new(c, w, s))
        .collect())
}

pub fn write_detections(path: &Path, detections: &[PoleDetection<f64>]) -> Result<()> {
    let mut out = CsvOut::create(path, "detections", Some(&LANDMARK_COLUMNS))?;
    for d in detections {
        out.row(strings([d.center.x, d.center.y, d.width, d.score]))?;
    }
    out.finish()
}

pub fn read_detections(path: &Path) -> Result<Vec<PoleDetection<f64>>> {
    Ok(read_squares(path, "detections")?
        .into_iter()
        .map(|(center, width, score)| PoleDetection { center, width, score })
        .collect())
}

/// World files hold one primitive per row, tagged by its first field:
/// `pole,x,y,width,height,shape`, `wall,ax,ay,bx,by,height`,
/// `dynamic,id,width,height` and `waypoint,id,t,x,y` (waypoints refer to a
/// preceding dynamic row).
pub fn write_world(path: &Path, world: &WorldModel<f64>) -> Result<()> {
    let mut out = CsvOut::create(path, "world", None)?;
    let tag = |s: &str| std::iter::once(s.to_string());
    for p in &world.poles {
        let shape = match p.shape {
            PoleShape::Square => "square",
            PoleShape::Cylinder => "cylinder",
        };
        out.row(
            tag("pole")
                .chain(strings([p.center.x, p.center.y, p.width, p.height]))
                .chain(tag(shape)),
        )?;
    }
    for w in &world.walls {
        out.row(tag("wall").chain(strings([w.a.x, w.a.y, w.b.x, w.b.y, w.height])))?;
    }
    for (id, d) in world.dynamic.iter().enumerate() {
        out.row(tag("dynamic").chain(tag(&id.to_string())).chain(strings([d.width, d.height])))?;
        for w in &d.schedule {
            out.row(
                tag("waypoint")
                    .chain(tag(&id.to_string()))
                    .chain(strings([w.t, w.position.x, w.position.y])),
            )?;
        }
    }
    out.finish()
}

pub fn read_world(path: &Path) -> Result<WorldModel<f64>> {
    const POLE: [&str; 6] = ["kind", "x", "y", "width", "height", "shape"];
    const WALL: [&str; 6] = ["kind", "ax", "ay", "bx", "by", "height"];
    const DYN: [&str; 4] = ["kind", "id", "width", "height"];
    const WAY: [&str; 5] = ["kind", "id", "t", "x", "y"];
    let mut world = WorldModel::default();
    CsvIn::open(path, "world", None)?.for_each(|path, line, rec| {
        match rec.get(0).unwrap_or("") {
            "pole" => {
                if rec.len() != POLE.len() {
                    return Err(format_err(path, line, format!("pole rows have {} fields", POLE.len())));
                }
                let [x, y, width, height] = finite_fields::<4>(path, line, &trimmed(rec, 5), 1, &POLE)?;
                let shape = match &rec[5] {
                    "square" => PoleShape::Square,
                    "cylinder" => PoleShape::Cylinder,
                    s => return Err(format_err(path, line, format!("unknown pole shape `{s}`"))),
                };
                world.poles.push(PoleSpec {
                    center: Vec2::new(x, y),
                    width,
                    height,
                    shape,
                });
            }
            "wall" => {
                let [ax, ay, bx, by, height] = finite_fields(path, line, rec, 1, &WALL)?;
                world.walls.push(Wall {
                    a: Vec2::new(ax, ay),
                    b: Vec2::new(bx, by),
                    height,
                });
            }
            "dynamic" => {
                if rec.len() != DYN.len() {
                    return Err(format_err(path, line, format!("dynamic rows have {} fields", DYN.len())));
                }
                let id: usize = field(path, line, rec, 1, "id")?;
                if id != world.dynamic.len() {
                    return Err(format_err(path, line, format!("expected dynamic id {}", world.dynamic.len())));
                }
                let [width, height] = finite_fields::<2>(path, line, &skip_second(rec), 1, &["kind", "width", "height"])?;
                world.dynamic.push(DynamicObject {
                    width,
                    height,
                    schedule: Vec::new(),
                });
            }
            "waypoint" => {
                if rec.len() != WAY.len() {
                    return Err(format_err(path, line, format!("waypoint rows have {} fields", WAY.len())));
                }
                let id: usize = field(path, line, rec, 1, "id")?;
                let [t, x, y] = finite_fields::<3>(path, line, &skip_second(rec), 1, &["kind", "t", "x", "y"])?;
                let Some(d) = world.dynamic.get_mut(id) else {
                    return Err(format_err(path, line, format!("waypoint for unknown dynamic object {id}")));
                };
                if d.schedule.last().is_some_and(|w| t < w.t) {
                    return Err(format_err(path, line, "waypoint times decrease"));
                }
                d.schedule.push(Waypoint {
                    t,
                    position: Vec2::new(x, y),
                });
            }
            other => return Err(format_err(path, line, format!("unknown row kind `{other}`"))),
        }
        Ok(())
    })?;
    world
        .validate()
        .map_err(|e| format_err(path, 0, e.to_string()))?;
    Ok(world)
}

fn trimmed(rec: &csv::StringRecord, len: usize) -> csv::StringRecord {
    rec.iter().take(len).collect()
}

fn skip_second(rec: &csv::StringRecord) -> csv::StringRecord {
    rec.iter().enumerate().filter(|&(i, _)| i != 1).map(|(_, s)| s).collect()
}

const SCAN_MAGIC: &[u8; 6] = b"PMSCAN";
const SCAN_RECORD: usize = 33;

/// Binary scan stream: the magic `PMSCAN`, major and minor version as
/// little-endian `u16`, then fixed 33-byte little-endian records
/// `(t: f64, start: 3 x f32, end: 3 x f32, hit: u8)`. Consecutive records
/// with equal timestamps form one scan.
pub struct ScanWriter<W: Write> {
    out: W,
    path: PathBuf,
}

impl ScanWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        ScanWriter::new(BufWriter::new(file), path)
    }
}

impl<W: Write> ScanWriter<W> {
    pub fn new(mut out: W, path: &Path) -> Result<Self> {
        let mut head = SCAN_MAGIC.to_vec();
        head.extend_from_slice(&(VERSION_MAJOR as u16).to_le_bytes());
        head.extend_from_slice(&(VERSION_MINOR as u16).to_le_bytes());
        out.write_all(&head).map_err(io_err(path))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    /// Appends `scan`; coordinates are stored as `f32`.
    pub fn write(&mut self, scan: &Scan<f64>) -> Result<()> {
        let mut buf = Vec::with_capacity(scan.rays.len() * SCAN_RECORD);
        for r in &scan.rays {
            buf.extend_from_slice(&scan.time.to_le_bytes());
            for v in [r.start, r.end] {
                for c in [v.x, v.y, v.z] {
                    buf.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
            buf.push(r.hit as u8);
        }
        self.out.write_all(&buf).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(io_err(&self.path))?;
        Ok(self.out)
    }
}

/// Streams scans from a binary scan file.
pub struct ScanReader<R: Read> {
    input: R,
    path: PathBuf,
    record: usize,
    pending: Option<(f64, Ray<f64>)>,
    done: bool,
}

impl ScanReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        ScanReader::new(BufReader::new(file), path)
    }
}

impl<R: Read> ScanReader<R> {
    pub fn new(mut input: R, path: &Path) -> Result<Self> {
        let mut head = [0u8; 10];
        input
            .read_exact(&mut head)
            .map_err(|_| format_err(path, 0, "missing scan file header"))?;
        if &head[..6] != SCAN_MAGIC {
            return Err(format_err(path, 0, "not a scan file"));
        }
        let major = u16::from_le_bytes([head[6], head[7]]);
        if major as u32 != VERSION_MAJOR {
            return Err(format_err(path, 0, format!("unsupported major version {major}")));
        }
        Ok(Self {
            input,
            path: path.to_path_buf(),
            record: 0,
            pending: None,
            done: false,
        })
    }

    /// Next ray record; errors carry the 1-based record number as line.
    fn next_record(&mut self) -> Result<Option<(f64, Ray<f64>)>> {
        let mut b = [0u8; SCAN_RECORD];
        let mut filled = 0;
        while filled < SCAN_RECORD {
            match self.input.read(&mut b[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io_err(&self.path)(e)),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        self.record += 1;
        if filled < SCAN_RECORD {
            return Err(format_err(&self.path, self.record, "truncated record"));
        }
        let t = f64::from_le_bytes(b[0..8].try_into().unwrap());
        let f = |k: usize| f32::from_le_bytes(b[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as f64;
        let hit = match b[32] {
            0 => false,
            1 => true,
            v => return Err(format_err(&self.path, self.record, format!("hit flag {v} is not 0 or 1"))),
        };
        let start = Vec3::new(f(0), f(1), f(2));
        let end = Vec3::new(f(3), f(4), f(5));
        if !t.is_finite() || !start.is_finite() || !end.is_finite() {
            return Err(format_err(&self.path, self.record, "non-finite value"));
        }
        Ok(Some((t, Ray { start, end, hit })))
    }
}

impl<R: Read> Iterator for ScanReader<R> {
    type Item = Result<Scan<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (time, first) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_record() {
                Ok(Some(p)) => p,
                Ok(None) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            },
        };
        let mut scan = Scan {
            time,
            rays: vec![first],
        };
        loop {
            match self.next_record() {
                Ok(Some((t, ray))) if t == time => scan.rays.push(ray),
                Ok(Some((t, _))) if t < time => {
                    self.done = true;
                    return Some(Err(format_err(&self.path, self.record, "timestamps decrease")));
                }
                Ok(Some(p)) => {
                    self.pending = Some(p);
                    break;
                }
                Ok(None) => break,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        Some(Ok(scan))
    }
}

pub fn read_scans(path: &Path) -> Result<Vec<Scan<f64>>> {
    ScanReader::open(path)?.collect()
}

/// Report as `key=value` lines.
pub fn format_report(report: &TrajectoryErrorReport<f64>) -> String {
    format!(
        "delta_pos={}\nrmse_pos={}\ndelta_ang={}\nrmse_ang={}\nn_samples={}\n",
        report.delta_pos,
        report.rmse_pos,
        report.delta_ang,
        report.rmse_ang,
        report.n_samples()
    )
}

/// Parses the output of [`format_report`] into `(key, value)` pairs.
pub fn parse_report(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line {}: expected key=value", i + 1)))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("report line {}: bad number `{}`", i + 1, v.trim())))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn write_error_series(path: &Path, samples: &[ErrorSample<f64>]) -> Result<()> {
    let mut out = CsvOut::create(path, "errors", Some(&ERROR_COLUMNS))?;
    for s in samples {
        out.row(strings([s.t, s.position, s.heading]))?;
    }
    out.finish()
}
