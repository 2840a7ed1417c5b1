//! Corpus files: a `#MANIFEST {json}` line, a header row and one CSV row per
//! sample.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use phrc_core::trajectory::{Branch, CorpusManifest, StateSample, Trajectory};
use phrc_core::Vec3;
use serde::Serialize;

use crate::{Error, Result};

pub const HEADER: [&str; 11] = ["traj", "t", "x", "y", "z", "vx", "vy", "vz", "fx", "fy", "fz"];
const MANIFEST_PREFIX: &str = "#MANIFEST ";

#[derive(Serialize)]
struct ManifestWithParams<'a> {
    #[serde(flatten)]
    manifest: &'a CorpusManifest,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<&'a serde_json::Value>,
}

/// Serialize a corpus to text. `params` records how it was generated.
pub fn corpus_to_string(
    manifest: &CorpusManifest,
    trajs: &[Trajectory],
    params: Option<&serde_json::Value>,
) -> Result<String> {
    manifest.check(trajs)?;
    let json = serde_json::to_string(&ManifestWithParams { manifest, params })
        .map_err(|e| Error::json("corpus manifest", e))?;
    let mut out = String::new();
    writeln!(out, "{MANIFEST_PREFIX}{json}").unwrap();
    writeln!(out, "{}", HEADER.join(",")).unwrap();
    for (i, traj) in trajs.iter().enumerate() {
        for s in traj.samples() {
            write!(
                out,
                "{i},{},{},{},{},{},{},{}",
                s.t, s.pos.x, s.pos.y, s.pos.z, s.vel.x, s.vel.y, s.vel.z
            )
            .unwrap();
            match s.force {
                Some(f) => writeln!(out, ",{},{},{}", f.x, f.y, f.z).unwrap(),
                None => out.push_str(",,,\n"),
            }
        }
    }
    Ok(out)
}

pub fn write_corpus(
    path: &Path,
    manifest: &CorpusManifest,
    trajs: &[Trajectory],
    params: Option<&serde_json::Value>,
) -> Result<()> {
    let text = corpus_to_string(manifest, trajs, params)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<(CorpusManifest, Vec<Trajectory>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

/// Parse corpus text; `path` is only used in error messages.
pub fn parse_corpus(text: &str, path: &Path) -> Result<(CorpusManifest, Vec<Trajectory>)> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let json = first
        .strip_prefix(MANIFEST_PREFIX)
        .ok_or_else(|| Error::format(path, 1, "expected a `#MANIFEST {json}` line"))?;
    let manifest: CorpusManifest =
        serde_json::from_str(json).map_err(|e| Error::json(format!("{} manifest", path.display()), e))?;

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(rest.as_bytes());
    let header = reader.headers().map_err(|e| Error::format(path, 2, e.to_string()))?;
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::format(path, 2, format!("header must be `{}`", HEADER.join(","))));
    }

    let mut groups: Vec<Vec<StateSample>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 3;
        let record = record.map_err(|e| Error::format(path, line, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| Error::format(path, line, format!("column `{}` is not a number", HEADER[i])))
        };
        let traj: usize = record[0]
            .parse()
            .map_err(|_| Error::format(path, line, "trajectory index is not an integer"))?;
        if traj == groups.len() {
            groups.push(Vec::new());
        } else if traj + 1 != groups.len() {
            return Err(Error::format(path, line, "trajectory rows must be contiguous and numbered from 0"));
        }
        let pos = Vec3::new(num(2)?, num(3)?, num(4)?);
        let vel = Vec3::new(num(5)?, num(6)?, num(7)?);
        let force = match (&record[8], &record[9], &record[10]) {
            ("", "", "") => None,
            _ => Some(Vec3::new(num(8)?, num(9)?, num(10)?)),
        };
        let expects_force = manifest.branch == Branch::Human;
        if force.is_some() != expects_force {
            return Err(Error::format(
                path,
                line,
                format!("{:?}-branch rows must {}have force columns", manifest.branch, if expects_force { "" } else { "not " }),
            ));
        }
        groups[traj].push(StateSample::new(num(1)?, pos, vel, force));
    }
    if groups.len() != manifest.count || manifest.labels.len() != manifest.count {
        return Err(Error::format(
            path,
            1,
            format!("manifest declares {} trajectories, file holds {}", manifest.count, groups.len()),
        ));
    }
    let trajs = groups
        .into_iter()
        .zip(&manifest.labels)
        .map(|(samples, label)| Trajectory::new(manifest.branch, *label, manifest.dt, samples))
        .collect::<phrc_core::Result<Vec<_>>>()?;
    manifest.check(&trajs)?;
    Ok((manifest, trajs))
}
