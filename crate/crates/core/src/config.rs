//! Pipeline configuration as flat `section.key = value` text.
//!
//! Absent keys keep their defaults; unknown keys and out-of-range values are
//! rejected with the offending line and key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{StampedPose, Vec2};
use crate::localization::{Composition, FilterParams, LocalizationParams};
use crate::mapping::{LocalGridParams, MappingParams};
use crate::poles::DetectorParams;
use crate::simulator::{
    drive, figure_eight, rounded_rectangle, CrossingSpec, OdometryNoise, PoleShape, SensorModel, WorldSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteKind {
    Rectangle,
    FigureEight,
}

/// Settings of the `simulate` command.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub channels: usize,
    pub lowest_deg: f64,
    pub highest_deg: f64,
    pub azimuth_beams: usize,
    pub max_range: f64,
    pub range_noise: f64,
    pub period: f64,
    pub mount_height: f64,
    pub odometry_xy: f64,
    pub odometry_phi_deg: f64,
    pub poles: usize,
    pub area: f64,
    pub min_separation: f64,
    pub width_min: f64,
    pub width_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub shape: PoleShape,
    pub route_clearance: f64,
    pub route_band: f64,
    /// Raster pole footprints are aligned to; 0 disables alignment.
    pub raster: f64,
    pub route: RouteKind,
    pub route_width: f64,
    pub route_height: f64,
    pub route_radius: f64,
    pub laps: usize,
    pub speed: f64,
    pub dynamic_objects: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            lowest_deg: -24.8,
            highest_deg: 2.0,
            azimuth_beams: 450,
            max_range: 40.0,
            range_noise: 0.02,
            period: 0.1,
            mount_height: 1.7,
            odometry_xy: 0.02,
            odometry_phi_deg: 0.2,
            poles: 40,
            area: 200.0,
            min_separation: 4.0,
            width_min: 0.12,
            width_max: 0.15,
            height_min: 3.0,
            height_max: 6.0,
            shape: PoleShape::Square,
            route_clearance: 2.0,
            route_band: 10.0,
            raster: 0.2,
            route: RouteKind::Rectangle,
            route_width: 155.0,
            route_height: 105.0,
            route_radius: 10.0,
            laps: 1,
            speed: 3.0,
            dynamic_objects: 0,
        }
    }
}

impl SimulationConfig {
    pub fn sensor(&self) -> SensorModel<f64> {
        let mut s = SensorModel::uniform(self.channels, self.lowest_deg, self.highest_deg, self.azimuth_beams);
        s.max_range = self.max_range;
        s.range_noise = self.range_noise;
        s.period = self.period;
        s.mount.z = self.mount_height;
        s
    }

    pub fn odometry_noise(&self) -> OdometryNoise<f64> {
        OdometryNoise {
            x: self.odometry_xy,
            y: self.odometry_xy,
            phi: self.odometry_phi_deg.to_radians(),
        }
    }

    /// Closed route centered at the origin, as a dense polyline.
    pub fn route(&self) -> Vec<Vec2<f64>> {
        let c = Vec2::new(0.0, 0.0);
        match self.route {
            RouteKind::Rectangle => {
                rounded_rectangle(c, self.route_width, self.route_height, self.route_radius, 0.05)
            }
            RouteKind::FigureEight => figure_eight(c, self.route_width * 0.5, self.route_height * 0.5, 0.05),
        }
    }

    /// Ground-truth trajectory sampled once per sensor period.
    pub fn trajectory(&self) -> Result<Vec<StampedPose<f64>>> {
        drive(&self.route(), self.laps, self.speed, self.period)
    }

    pub fn world_spec(&self, route: Vec<Vec2<f64>>) -> WorldSpec<f64> {
        let half = self.area * 0.5;
        WorldSpec {
            origin: Vec2::new(-half, -half),
            extent: Vec2::new(self.area, self.area),
            poles: self.poles,
            min_separation: self.min_separation,
            width_range: (self.width_min, self.width_max),
            height_range: (self.height_min, self.height_max),
            shape: self.shape,
            route_clearance: self.route_clearance,
            route_band: self.route_band,
            route,
            raster: (self.raster > 0.0).then_some(self.raster),
            ..WorldSpec::default()
        }
    }

    pub fn crossing_spec(&self) -> CrossingSpec<f64> {
        CrossingSpec {
            count: self.dynamic_objects,
            ..CrossingSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid: LocalGridParams<f64>,
    pub detector: DetectorParams<f64>,
    pub segment_length: f64,
    pub window_c: usize,
    pub window_w: usize,
    /// Distance to earlier sessions' poses below which scans are ignored
    /// when extending a map (m).
    pub min_distance: f64,
    pub filter: FilterParams<f64>,
    pub seed: u64,
    pub simulation: SimulationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let m = MappingParams::<f64>::default();
        Self {
            grid: m.grid,
            detector: m.detector,
            segment_length: m.segment_length,
            window_c: m.window_c,
            window_w: m.window_w,
            min_distance: 10.0,
            filter: FilterParams::default(),
            seed: 0,
            simulation: SimulationConfig::default(),
        }
    }
}

fn parse_value<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: `{key}`: cannot parse `{value}`")))
}

impl PipelineConfig {
    pub fn mapping(&self) -> MappingParams<f64> {
        MappingParams {
            grid: self.grid,
            detector: self.detector,
            segment_length: self.segment_length,
            window_c: self.window_c,
            window_w: self.window_w,
        }
    }

    pub fn localization(&self) -> LocalizationParams<f64> {
        LocalizationParams {
            filter: self.filter,
            detector: self.detector,
            grid: self.grid,
            segment_length: self.segment_length,
            window_c: self.window_c,
            window_w: self.window_w,
            seed: self.seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config(format!("line {line}: expected `key = value`")));
            };
            c.set(line, key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let s = &mut self.simulation;
        macro_rules! p {
            ($field:expr) => {
                $field = parse_value(line, key, v)?
            };
        }
        match key {
            "seed" => p!(self.seed),
            "grid.spacing" => p!(self.grid.spacing),
            "grid.mu_o" => p!(self.detector.mu_o),
            "grid.extent_x" => p!(self.grid.extent[0]),
            "grid.extent_y" => p!(self.grid.extent[1]),
            "grid.extent_z" => p!(self.grid.extent[2]),
            "grid.z_min" => p!(self.grid.z_min),
            "grid.prior" => {
                self.detector.prior = match v.split_once(',') {
                    _ if v == "local" => None,
                    Some((m, d)) => Some((parse_value(line, key, m.trim())?, parse_value(line, key, d.trim())?)),
                    None => {
                        return Err(Error::Config(format!(
                            "line {line}: `{key}`: expected `local` or `mean,variance`"
                        )))
                    }
                }
            }
            "detector.a_max" => p!(self.detector.a_max),
            "detector.f" => p!(self.detector.hull),
            "detector.q_min" => p!(self.detector.q_min),
            "detector.h_min" => p!(self.detector.h_min),
            "detector.bandwidth" => p!(self.detector.bandwidth),
            "mapping.segment_length" => p!(self.segment_length),
            "mapping.c" => p!(self.window_c),
            "mapping.w" => p!(self.window_w),
            "mapping.min_distance" => p!(self.min_distance),
            "filter.particles" => p!(self.filter.particles),
            "filter.sigma" => p!(self.filter.measurement.sigma),
            "filter.epsilon" => p!(self.filter.measurement.epsilon),
            "filter.inflation" => p!(self.filter.inflation),
            "filter.resample_ratio" => p!(self.filter.resample_ratio),
            "filter.top_fraction" => p!(self.filter.top_fraction),
            "filter.init_radius" => p!(self.filter.init_radius),
            "filter.init_heading_deg" => {
                let deg: f64 = parse_value(line, key, v)?;
                self.filter.init_heading_range = deg.to_radians();
            }
            "filter.composition" => {
                self.filter.composition = match v {
                    "body" => Composition::Body,
                    "map" => Composition::Map,
                    _ => return Err(Error::Config(format!("line {line}: `{key}`: expected `body` or `map`"))),
                }
            }
            "sim.channels" => p!(s.channels),
            "sim.lowest_deg" => p!(s.lowest_deg),
            "sim.highest_deg" => p!(s.highest_deg),
            "sim.azimuth_beams" => p!(s.azimuth_beams),
            "sim.max_range" => p!(s.max_range),
            "sim.range_noise" => p!(s.range_noise),
            "sim.period" => p!(s.period),
            "sim.mount_height" => p!(s.mount_height),
            "sim.odometry_xy" => p!(s.odometry_xy),
            "sim.odometry_phi_deg" => p!(s.odometry_phi_deg),
            "sim.poles" => p!(s.poles),
            "sim.area" => p!(s.area),
            "sim.min_separation" => p!(s.min_separation),
            "sim.width_min" => p!(s.width_min),
            "sim.width_max" => p!(s.width_max),
            "sim.height_min" => p!(s.height_min),
            "sim.height_max" => p!(s.height_max),
            "sim.shape" => {
                s.shape = match v {
                    "square" => PoleShape::Square,
                    "cylinder" => PoleShape::Cylinder,
                    _ => return Err(Error::Config(format!("line {line}: `{key}`: expected `square` or `cylinder`"))),
                }
            }
            "sim.route_clearance" => p!(s.route_clearance),
            "sim.route_band" => p!(s.route_band),
            "sim.raster" => p!(s.raster),
            "sim.route" => {
                s.route = match v {
                    "rectangle" => RouteKind::Rectangle,
                    "figure-eight" => RouteKind::FigureEight,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: `{key}`: expected `rectangle` or `figure-eight`"
                        )))
                    }
                }
            }
            "sim.route_width" => p!(s.route_width),
            "sim.route_height" => p!(s.route_height),
            "sim.route_radius" => p!(s.route_radius),
            "sim.laps" => p!(s.laps),
            "sim.speed" => p!(s.speed),
            "sim.dynamic_objects" => p!(s.dynamic_objects),
            _ => return Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("`{key}`: {why}")));
        let g = &self.grid;
        if !(g.spacing > 0.0) {
            return bad("grid.spacing", "must be positive");
        }
        if g.extent.iter().any(|&e| !(e >= g.spacing)) {
            return bad("grid.extent", "every extent must be at least one voxel");
        }
        if let Err(e) = self.detector.validate() {
            return Err(Error::Config(e.to_string()));
        }
        if !(self.segment_length > 0.0) {
            return bad("mapping.segment_length", "must be positive");
        }
        if self.window_c == 0 || self.window_c > self.window_w {
            return bad("mapping.c", "need 1 <= c <= w");
        }
        if !(self.min_distance >= 0.0) {
            return bad("mapping.min_distance", "must be non-negative");
        }
        if let Err(e) = self.filter.validate() {
            return Err(Error::Config(e.to_string()));
        }
        let s = &self.simulation;
        if s.channels == 0 || s.azimuth_beams == 0 {
            return bad("sim.channels", "channels and azimuth beams must be positive");
        }
        if !(s.max_range > 0.0 && s.range_noise >= 0.0 && s.period > 0.0) {
            return bad("sim.max_range", "range must be positive, noise non-negative, period positive");
        }
        if !(s.odometry_xy >= 0.0 && s.odometry_phi_deg >= 0.0) {
            return bad("sim.odometry_xy", "noise must be non-negative");
        }
        if !(s.width_min > 0.0 && s.width_min <= s.width_max && s.height_min > 0.0 && s.height_min <= s.height_max) {
            return bad("sim.width_min", "need 0 < min <= max for widths and heights");
        }
        if !(s.raster >= 0.0 && s.area > 0.0 && s.speed > 0.0) || s.laps == 0 {
            return bad("sim.area", "area, speed and laps must be positive, raster non-negative");
        }
        Ok(())
    }

    /// Every key with its current value; `parse` reads it back unchanged.
    pub fn to_text(&self) -> String {
        let s = &self.simulation;
        let f = &self.filter;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("grid.spacing", self.grid.spacing.to_string());
        kv("grid.mu_o", self.detector.mu_o.to_string());
        kv("grid.extent_x", self.grid.extent[0].to_string());
        kv("grid.extent_y", self.grid.extent[1].to_string());
        kv("grid.extent_z", self.grid.extent[2].to_string());
        kv("grid.z_min", self.grid.z_min.to_string());
        kv(
            "grid.prior",
            self.detector.prior.map_or("local".into(), |(m, d)| format!("{m},{d}")),
        );
        kv("detector.a_max", self.detector.a_max.to_string());
        kv("detector.f", self.detector.hull.to_string());
        kv("detector.q_min", self.detector.q_min.to_string());
        kv("detector.h_min", self.detector.h_min.to_string());
        kv("detector.bandwidth", self.detector.bandwidth.to_string());
        kv("mapping.segment_length", self.segment_length.to_string());
        kv("mapping.c", self.window_c.to_string());
        kv("mapping.w", self.window_w.to_string());
        kv("mapping.min_distance", self.min_distance.to_string());
        kv("filter.particles", f.particles.to_string());
        kv("filter.sigma", f.measurement.sigma.to_string());
        kv("filter.epsilon", f.measurement.epsilon.to_string());
        kv("filter.inflation", f.inflation.to_string());
        kv("filter.resample_ratio", f.resample_ratio.to_string());
        kv("filter.top_fraction", f.top_fraction.to_string());
        kv("filter.init_radius", f.init_radius.to_string());
        kv("filter.init_heading_deg", f.init_heading_range.to_degrees().to_string());
        let comp = match f.composition {
            Composition::Body => "body",
            Composition::Map => "map",
        };
        kv("filter.composition", comp.into());
        kv("sim.channels", s.channels.to_string());
        kv("sim.lowest_deg", s.lowest_deg.to_string());
        kv("sim.highest_deg", s.highest_deg.to_string());
        kv("sim.azimuth_beams", s.azimuth_beams.to_string());
        kv("sim.max_range", s.max_range.to_string());
        kv("sim.range_noise", s.range_noise.to_string());
        kv("sim.period", s.period.to_string());
        kv("sim.mount_height", s.mount_height.to_string());
        kv("sim.odometry_xy", s.odometry_xy.to_string());
        kv("sim.odometry_phi_deg", s.odometry_phi_deg.to_string());
        kv("sim.poles", s.poles.to_string());
        kv("sim.area", s.area.to_string());
        kv("sim.min_separation", s.min_separation.to_string());
        kv("sim.width_min", s.width_min.to_string());
        kv("sim.width_max", s.width_max.to_string());
        kv("sim.height_min", s.height_min.to_string());
        kv("sim.height_max", s.height_max.to_string());
        let shape = match s.shape {
            PoleShape::Square => "square",
            PoleShape::Cylinder => "cylinder",
        };
        kv("sim.shape", shape.into());
        kv("sim.route_clearance", s.route_clearance.to_string());
        kv("sim.route_band", s.route_band.to_string());
        kv("sim.raster", s.raster.to_string());
        let route = match s.route {
            RouteKind::Rectangle => "rectangle",
            RouteKind::FigureEight => "figure-eight",
        };
        kv("sim.route", route.into());
        kv("sim.route_width", s.route_width.to_string());
        kv("sim.route_height", s.route_height.to_string());
        kv("sim.route_radius", s.route_radius.to_string());
        kv("sim.laps", s.laps.to_string());
        kv("sim.speed", s.speed.to_string());
        kv("sim.dynamic_objects", s.dynamic_objects.to_string());
        out
    }
}
