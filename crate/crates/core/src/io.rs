//! ASCII PLY clouds, dataset manifests and dataset directories.
//!
//! A dataset directory holds `manifest.json`, `manifest.sha256`,
//! `partial/<pair_id>.ply` and `gt/<shape_id>_<n>.ply`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, ResultExt};
use crate::geometry::{Point, PointCloud};
use crate::views::{DatasetPair, Mode, Split};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HASH_FILE: &str = "manifest.sha256";

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Decimal rendering with 9 significant digits.
fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let e = v.abs().log10().floor() as i32;
    let decimals = (8 - e).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40 + 100);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", sig9(p[0]), sig9(p[1]), sig9(p[2]));
    }
    s
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, ply_string(cloud)).context(|| format!("writing {}", path.display()))
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(format_err(path, "missing `ply` magic line"));
    }
    let mut format_ok = false;
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| format_err(path, "header has no `end_header`"))?
            .trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                if line != "format ascii 1.0" {
                    return Err(format_err(
                        path,
                        format!("unsupported format line `{line}`"),
                    ));
                }
                format_ok = true;
            }
            Some("element") => {
                let (Some("vertex"), Some(n), None) = (words.next(), words.next(), words.next())
                else {
                    return Err(format_err(
                        path,
                        format!("unsupported element line `{line}`"),
                    ));
                };
                count = Some(
                    n.parse()
                        .map_err(|_| format_err(path, format!("bad vertex count `{n}`")))?,
                );
            }
            Some("property") => {
                let (Some(ty), Some(name), None) = (words.next(), words.next(), words.next())
                else {
                    return Err(format_err(
                        path,
                        format!("unsupported property line `{line}`"),
                    ));
                };
                if !matches!(ty, "float" | "double" | "float32" | "float64") {
                    return Err(format_err(
                        path,
                        format!("unsupported property type `{ty}`"),
                    ));
                }
                props.push(name.to_string());
            }
            Some(other) => {
                return Err(format_err(
                    path,
                    format!("unexpected header keyword `{other}`"),
                ))
            }
        }
    }
    if !format_ok {
        return Err(format_err(path, "missing `format ascii 1.0` line"));
    }
    let n = count.ok_or_else(|| format_err(path, "missing `element vertex` line"))?;
    if props != ["x", "y", "z"] {
        return Err(format_err(
            path,
            format!("expected properties x y z, got {props:?}"),
        ));
    }
    let mut points: Vec<Point> = Vec::with_capacity(n);
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if points.len() == n {
            return Err(format_err(
                path,
                format!("count mismatch: header declares {n} vertices, body has more"),
            ));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("vertex {}: {e}", points.len())))?;
        if vals.len() != 3 {
            return Err(format_err(
                path,
                format!(
                    "vertex {} has {} values, expected 3",
                    points.len(),
                    vals.len()
                ),
            ));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    if points.len() != n {
        return Err(format_err(
            path,
            format!(
                "count mismatch: header declares {n} vertices, body has {}",
                points.len()
            ),
        ));
    }
    PointCloud::new(points).context(|| format!("reading {}", path.display()))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    parse_ply(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub shape_id: String,
    pub category: String,
    pub camera_id: usize,
    pub partial_path: String,
    /// Resolution → relative path.
    pub gt_paths: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_ratio: Option<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub divisor: usize,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Pretty JSON with fixed key order; identical values give identical bytes.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Lowercase hex SHA-256 of [`Manifest::canonical_bytes`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn manifest_err(pointer: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Manifest {
        pointer: pointer.into(),
        detail: detail.into(),
    }
}

fn require<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    pointer: &str,
) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| manifest_err(format!("{pointer}/{key}"), "required field is missing"))
}

fn require_str<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    pointer: &str,
) -> Result<&'a str> {
    require(obj, key, pointer)?
        .as_str()
        .ok_or_else(|| manifest_err(format!("{pointer}/{key}"), "expected a string"))
}

fn require_uint(obj: &serde_json::Map<String, Value>, key: &str, pointer: &str) -> Result<u64> {
    require(obj, key, pointer)?.as_u64().ok_or_else(|| {
        manifest_err(
            format!("{pointer}/{key}"),
            "expected a non-negative integer",
        )
    })
}

/// Structural validation with JSON-pointer locations, before typed decoding.
pub fn validate_manifest_value(v: &Value) -> Result<()> {
    let top = v
        .as_object()
        .ok_or_else(|| manifest_err("", "expected an object"))?;
    for key in top.keys() {
        if !["name", "mode", "seed", "divisor", "records"].contains(&key.as_str()) {
            return Err(manifest_err(format!("/{key}"), "unknown field"));
        }
    }
    require_str(top, "name", "")?;
    let mode = require_str(top, "mode", "")?;
    mode.parse::<Mode>().map_err(|_| {
        manifest_err(
            "/mode",
            format!("expected \"mvp\" or \"mvp40\", got {mode:?}"),
        )
    })?;
    require_uint(top, "seed", "")?;
    require_uint(top, "divisor", "")?;
    let records = require(top, "records", "")?
        .as_array()
        .ok_or_else(|| manifest_err("/records", "expected an array"))?;
    for (i, r) in records.iter().enumerate() {
        let ptr = format!("/records/{i}");
        let obj = r
            .as_object()
            .ok_or_else(|| manifest_err(&ptr, "expected an object"))?;
        let pair_id = require_str(obj, "pair_id", &ptr)?;
        let named = |e: Error| match e {
            Error::Manifest { pointer, detail } => {
                manifest_err(pointer, format!("pair {pair_id}: {detail}"))
            }
            other => other,
        };
        for key in obj.keys() {
            if ![
                "pair_id",
                "shape_id",
                "category",
                "camera_id",
                "partial_path",
                "gt_paths",
                "missing_ratio",
                "split",
            ]
            .contains(&key.as_str())
            {
                return Err(manifest_err(
                    format!("{ptr}/{key}"),
                    format!("pair {pair_id}: unknown field"),
                ));
            }
        }
        require_str(obj, "shape_id", &ptr).map_err(named)?;
        require_str(obj, "category", &ptr).map_err(named)?;
        require_uint(obj, "camera_id", &ptr).map_err(named)?;
        require_str(obj, "partial_path", &ptr).map_err(named)?;
        let split = require_str(obj, "split", &ptr).map_err(named)?;
        if split != "train" && split != "test" {
            return Err(manifest_err(
                format!("{ptr}/split"),
                format!("pair {pair_id}: expected \"train\" or \"test\""),
            ));
        }
        if let Some(m) = obj.get("missing_ratio") {
            if !m.as_f64().is_some_and(|m| m > 0.0 && m < 1.0) {
                return Err(manifest_err(
                    format!("{ptr}/missing_ratio"),
                    format!("pair {pair_id}: expected a number in (0, 1)"),
                ));
            }
        }
        let gts = require(obj, "gt_paths", &ptr)
            .map_err(named)?
            .as_object()
            .ok_or_else(|| {
                manifest_err(
                    format!("{ptr}/gt_paths"),
                    format!("pair {pair_id}: expected an object"),
                )
            })?;
        if gts.is_empty() {
            return Err(manifest_err(
                format!("{ptr}/gt_paths"),
                format!("pair {pair_id}: no ground-truth path"),
            ));
        }
        for (k, p) in gts {
            if k.parse::<usize>().map_or(true, |n| n == 0) {
                return Err(manifest_err(
                    format!("{ptr}/gt_paths/{k}"),
                    format!("pair {pair_id}: key must be a positive resolution"),
                ));
            }
            if !p.is_string() {
                return Err(manifest_err(
                    format!("{ptr}/gt_paths/{k}"),
                    format!("pair {pair_id}: expected a path string"),
                ));
            }
        }
    }
    Ok(())
}

/// Checks uniqueness, split disjointness, consistent resolutions and,
/// with `root`, that every referenced file exists.
pub fn validate_manifest(m: &Manifest, root: Option<&Path>) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut shape_split: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        let ptr = format!("/records/{i}");
        if !ids.insert(r.pair_id.as_str()) {
            return Err(manifest_err(
                format!("{ptr}/pair_id"),
                format!("duplicate pair id {}", r.pair_id),
            ));
        }
        match shape_split.get(r.shape_id.as_str()) {
            Some(s) if *s != r.split => {
                return Err(manifest_err(
                    format!("{ptr}/split"),
                    format!(
                        "pair {}: shape {} appears in both splits",
                        r.pair_id, r.shape_id
                    ),
                ))
            }
            _ => {
                shape_split.insert(&r.shape_id, r.split);
            }
        }
        if r.gt_paths.is_empty() {
            return Err(manifest_err(
                format!("{ptr}/gt_paths"),
                format!("pair {}: no ground-truth path", r.pair_id),
            ));
        }
        if let Some(first) = m.records.first() {
            if first.gt_paths.keys().ne(r.gt_paths.keys()) {
                return Err(manifest_err(
                    format!("{ptr}/gt_paths"),
                    format!(
                        "pair {}: resolutions differ from the first record",
                        r.pair_id
                    ),
                ));
            }
        }
        if let Some(root) = root {
            let files = std::iter::once(("partial_path".to_string(), &r.partial_path))
                .chain(r.gt_paths.iter().map(|(k, p)| (format!("gt_paths/{k}"), p)));
            for (key, rel) in files {
                if !root.join(rel).is_file() {
                    return Err(manifest_err(
                        format!("{ptr}/{key}"),
                        format!("pair {}: file {rel} does not exist", r.pair_id),
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<String> {
    validate_manifest(m, None)?;
    fs::write(path, m.canonical_bytes()?).context(|| format!("writing {}", path.display()))?;
    m.hash()
}

/// Parses, validates the structure and semantics, and checks files relative
/// to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).context(|| format!("parsing {}", path.display()))?;
    validate_manifest_value(&value).context(|| format!("validating {}", path.display()))?;
    let m: Manifest =
        serde_json::from_value(value).context(|| format!("decoding {}", path.display()))?;
    validate_manifest(&m, path.parent()).context(|| format!("validating {}", path.display()))?;
    Ok(m)
}

/// Writes every cloud and the manifest; returns the manifest hash.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    mode: Mode,
    seed: u64,
    divisor: usize,
    pairs: &[DatasetPair],
) -> Result<String> {
    fs::create_dir_all(dir.join("partial")).context(|| format!("creating {}", dir.display()))?;
    fs::create_dir_all(dir.join("gt")).context(|| format!("creating {}", dir.display()))?;
    let mut gt_files: BTreeMap<String, &PointCloud> = BTreeMap::new();
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let partial_path = format!("partial/{}.ply", p.pair_id);
        let mut gt_paths = BTreeMap::new();
        for (&n, cloud) in &p.gts {
            let rel = format!("gt/{}_{n}.ply", p.shape_id);
            gt_files.entry(rel.clone()).or_insert(cloud);
            gt_paths.insert(n, rel);
        }
        records.push(ManifestRecord {
            pair_id: p.pair_id.clone(),
            shape_id: p.shape_id.clone(),
            category: p.category.clone(),
            camera_id: p.camera_id,
            partial_path,
            gt_paths,
            missing_ratio: p.missing_ratio,
            split: p.split,
        });
    }
    let manifest = Manifest {
        name: name.to_string(),
        mode,
        seed,
        divisor,
        records,
    };
    validate_manifest(&manifest, None)?;
    let jobs: Vec<(PathBuf, &PointCloud)> = pairs
        .iter()
        .zip(&manifest.records)
        .map(|(p, r)| (dir.join(&r.partial_path), &p.partial))
        .chain(gt_files.into_iter().map(|(rel, c)| (dir.join(rel), c)))
        .collect();
    jobs.par_iter()
        .try_for_each(|(path, cloud)| write_ply(cloud, path))?;
    let hash = write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    fs::write(dir.join(HASH_FILE), format!("{hash}\n"))
        .context(|| format!("writing {}", dir.join(HASH_FILE).display()))?;
    Ok(hash)
}

/// A pair loaded back from a dataset directory.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub record: ManifestRecord,
    pub partial: PointCloud,
    pub gts: BTreeMap<usize, PointCloud>,
}

pub struct LoadedDataset {
    pub manifest: Manifest,
    pub hash: String,
    pub pairs: Vec<LoadedPair>,
}

impl LoadedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LoadedPair> {
        self.pairs.iter().filter(move |p| p.record.split == split)
    }
}

/// Reads the manifest in `dir` (or the manifest file itself) and every cloud it names.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = if dir.is_dir() {
        dir.join(MANIFEST_FILE)
    } else {
        dir.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let manifest = read_manifest(&manifest_path)?;
    let hash = manifest.hash()?;
    let mut gt_cache: BTreeMap<String, PointCloud> = BTreeMap::new();
    let gt_paths: BTreeSet<&String> = manifest
        .records
        .iter()
        .flat_map(|r| r.gt_paths.values())
        .collect();
    let loaded: Vec<(String, PointCloud)> = gt_paths
        .into_par_iter()
        .map(|rel| Ok((rel.clone(), read_ply(&root.join(rel))?)))
        .collect::<Result<_>>()?;
    gt_cache.extend(loaded);
    let pairs = manifest
        .records
        .par_iter()
        .map(|r| {
            let partial = read_ply(&root.join(&r.partial_path))?.with_category(r.category.clone());
            let gts = r
                .gt_paths
                .iter()
                .map(|(&n, rel)| (n, gt_cache[rel].clone().with_category(r.category.clone())))
                .collect();
            Ok(LoadedPair {
                record: r.clone(),
                partial,
                gts,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LoadedDataset {
        manifest,
        hash,
        pairs,
    })
}
