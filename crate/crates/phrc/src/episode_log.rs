//! Episode logs: a `#EPISODE {json}` header and one CSV row per control tick.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use phrc_core::sim::{phrc_from_series, EpisodeHeader, EpisodeLog, PhrcMetrics};
use phrc_core::Vec3;

use crate::{Error, Result};

pub const HEADER: [&str; 14] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "fhx", "fhy", "fhz", "frx", "fry", "frz", "kappa",
];
const EPISODE_PREFIX: &str = "#EPISODE ";

/// One row of a saved log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub f_h: Vec3,
    pub f_r: Vec3,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedEpisode {
    pub header: EpisodeHeader,
    pub rows: Vec<LogRow>,
}

impl SavedEpisode {
    /// Recompute the collaboration metrics from the rows.
    pub fn metrics(&self, guided_only: bool) -> PhrcMetrics {
        let x: Vec<Vec3> = self.rows.iter().map(|r| r.x).collect();
        let f_h: Vec<Vec3> = self.rows.iter().map(|r| r.f_h).collect();
        let f_r: Vec<Vec3> = self.rows.iter().map(|r| r.f_r).collect();
        phrc_from_series(&x, &f_h, &f_r, guided_only)
    }

    /// Smallest signed distance from the path to any obstacle surface.
    pub fn min_clearance(&self) -> Option<f64> {
        self.header
            .scenario
            .obstacles
            .iter()
            .flat_map(|o| self.rows.iter().map(move |r| (r.x - o.center).norm() - o.radius))
            .reduce(f64::min)
    }
}

impl From<&EpisodeLog> for SavedEpisode {
    fn from(log: &EpisodeLog) -> Self {
        Self {
            header: log.header.clone(),
            rows: log
                .ticks
                .iter()
                .map(|r| LogRow {
                    t: r.t,
                    x: r.x,
                    v: r.v,
                    f_h: r.f_h,
                    f_r: r.f_r,
                    kappa: r.kappa,
                })
                .collect(),
        }
    }
}

pub fn log_to_string(log: &EpisodeLog) -> Result<String> {
    let json = serde_json::to_string(&log.header).map_err(|e| Error::json("episode header", e))?;
    let mut out = String::new();
    writeln!(out, "{EPISODE_PREFIX}{json}").unwrap();
    writeln!(out, "{}", HEADER.join(",")).unwrap();
    for r in &log.ticks {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.x.x, r.x.y, r.x.z, r.v.x, r.v.y, r.v.z, r.f_h.x, r.f_h.y, r.f_h.z, r.f_r.x, r.f_r.y, r.f_r.z, r.kappa
        )
        .unwrap();
    }
    Ok(out)
}

pub fn write_log(path: &Path, log: &EpisodeLog) -> Result<()> {
    fs::write(path, log_to_string(log)?).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<SavedEpisode> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, path)
}

/// Parse log text; `path` is only used in error messages.
pub fn parse_log(text: &str, path: &Path) -> Result<SavedEpisode> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let json = first
        .strip_prefix(EPISODE_PREFIX)
        .ok_or_else(|| Error::format(path, 1, "expected an `#EPISODE {json}` line"))?;
    let header: EpisodeHeader =
        serde_json::from_str(json).map_err(|e| Error::json(format!("{} header", path.display()), e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let cols = reader.headers().map_err(|e| Error::format(path, 2, e.to_string()))?;
    if cols.iter().ne(HEADER.iter().copied()) {
        return Err(Error::format(path, 2, format!("header must be `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 3;
        let record = record.map_err(|e| Error::format(path, line, e.to_string()))?;
        let v: Vec<f64> = record
            .iter()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Error::format(path, line, "non-numeric field"))?;
        let v3 = |i: usize| Vec3::new(v[i], v[i + 1], v[i + 2]);
        rows.push(LogRow {
            t: v[0],
            x: v3(1),
            v: v3(4),
            f_h: v3(7),
            f_r: v3(10),
            kappa: v[13],
        });
    }
    Ok(SavedEpisode { header, rows })
}
