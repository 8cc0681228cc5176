//! `key = value` experiment files.
//!
//! One assignment per line, `#` starts a comment. Every key may appear at
//! most once; `sigma.i.j` and `sigma.j.i` name the same entry.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mbo_core::schemes::{SchemeKind, SpaceTimeForce};
use mbo_core::Grid;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Ball { center: Vec<f64>, radius: f64 },
    Balls { centers: Vec<Vec<f64>>, radii: Vec<f64> },
    Slab { axis: usize, offset: f64, thickness: f64 },
    Voronoi { seeds: Seeds, region: Region },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Seeds {
    Explicit(Vec<Vec<f64>>),
    /// Drawn uniformly in the solid region from the config `seed`.
    Random(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Vapor band of this width along the torus seam.
    Margin(f64),
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    H(Vec<f64>),
    N(Vec<usize>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            Self::H(v) => v.len(),
            Self::N(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Error against an oracle and observed order.
    Eoc,
    /// Multiplier scaling `M(h)` of the volume-preserving scheme.
    Lambda,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub mode: SweepMode,
    /// When set, the sweep fails unless the fitted order reaches it.
    pub min_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEntry {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: SchemeKind,
    pub grid: Grid,
    pub h: Option<f64>,
    pub steps: Option<usize>,
    pub t_final: Option<f64>,
    pub init: Option<InitSpec>,
    pub resume: Option<PathBuf>,
    pub force: Option<SpaceTimeForce>,
    pub sigma: Vec<SigmaEntry>,
    pub output: PathBuf,
    /// Dump every this many global steps; 0 keeps only the first and last state.
    pub dump_every: usize,
    pub seed: u64,
    pub stop_on_repeat: bool,
    pub sweep: Option<SweepSpec>,
}

const KEYS: &[&str] = &[
    "scheme",
    "dim",
    "n",
    "side",
    "h",
    "steps",
    "t_final",
    "init",
    "resume",
    "force",
    "output",
    "dump_every",
    "seed",
    "stop_on_repeat",
    "sweep.h",
    "sweep.n",
    "sweep.mode",
    "sweep.min_order",
];

struct Entry {
    line: usize,
    value: String,
}

fn err(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("line {line}: {msg}"))
}

fn sigma_key(key: &str, line: usize) -> Result<Option<(usize, usize)>, CliError> {
    let Some(rest) = key.strip_prefix("sigma.") else {
        return Ok(None);
    };
    let parts: Vec<&str> = rest.split('.').collect();
    let idx = |s: &str| s.parse::<usize>().ok().filter(|&v| v >= 1);
    match parts.as_slice() {
        [a, b] => match (idx(a), idx(b)) {
            (Some(i), Some(j)) if i != j => Ok(Some((i.min(j), i.max(j)))),
            (Some(_), Some(_)) => Err(err(line, format!("'{key}': diagonal tensions are fixed at 0"))),
            _ => Err(err(line, format!("'{key}': grain labels must be integers >= 1"))),
        },
        _ => Err(err(line, format!("unknown key '{key}'"))),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    let mut sigma_raw: BTreeMap<(usize, usize), (String, Entry)> = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(line, format!("expected 'key = value', got '{content}'")));
        };
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(err(line, format!("'{key}' has no value")));
        }
        if let Some(pair) = sigma_key(key, line)? {
            if let Some((prev_key, prev)) = sigma_raw.get(&pair) {
                return Err(err(
                    line,
                    format!(
                        "duplicate key '{key}' (tension already set by '{prev_key}' on line {})",
                        prev.line
                    ),
                ));
            }
            sigma_raw.insert(
                pair,
                (
                    key.to_string(),
                    Entry {
                        line,
                        value: value.to_string(),
                    },
                ),
            );
            continue;
        }
        if !KEYS.contains(&key) {
            return Err(err(line, format!("unknown key '{key}'")));
        }
        if let Some(prev) = entries.get(key) {
            return Err(err(
                line,
                format!("duplicate key '{key}' (first set on line {})", prev.line),
            ));
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        );
    }
    Parsed { entries }.build(sigma_raw)
}

struct Parsed {
    entries: BTreeMap<String, Entry>,
}

impl Parsed {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn required(&self, key: &str) -> Result<&Entry, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("missing required key '{key}'")))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, CliError> {
        self.get(key)
            .map(|e| {
                e.value
                    .parse::<T>()
                    .map_err(|_| err(e.line, format!("'{key}' expects {what}, got '{}'", e.value)))
            })
            .transpose()
    }

    fn positive(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.typed::<f64>(key, "a number")? {
            Some(v) if !(v.is_finite() && v > 0.0) => Err(err(
                self.entries[key].line,
                format!("'{key}' must be positive, got {v}"),
            )),
            v => Ok(v),
        }
    }

    fn build(self, sigma_raw: BTreeMap<(usize, usize), (String, Entry)>) -> Result<ExperimentConfig, CliError> {
        let scheme_entry = self.required("scheme")?;
        let scheme: SchemeKind = scheme_entry
            .value
            .parse()
            .map_err(|e: mbo_core::Error| err(scheme_entry.line, e))?;

        let dim = self.typed::<usize>("dim", "an integer")?.unwrap_or(2);
        let n_entry = self.required("n")?;
        let mut n = parse_list::<usize>(&n_entry.value)
            .ok_or_else(|| err(n_entry.line, format!("'n' expects integers, got '{}'", n_entry.value)))?;
        if n.len() == 1 {
            n = vec![n[0]; dim];
        }
        let side = self.positive("side")?.unwrap_or(1.0);
        let grid = Grid::new(dim, &n, side).map_err(|e| err(n_entry.line, e))?;

        let h = self.positive("h")?;
        let steps = self.typed::<usize>("steps", "a non-negative integer")?;
        let t_final = match self.typed::<f64>("t_final", "a number")? {
            Some(t) if !(t.is_finite() && t >= 0.0) => {
                return Err(err(
                    self.entries["t_final"].line,
                    format!("'t_final' must be non-negative, got {t}"),
                ))
            }
            t => t,
        };
        if let (Some(_), Some(t)) = (self.get("steps"), self.get("t_final")) {
            return Err(err(t.line, "'t_final' conflicts with 'steps'; give one of them"));
        }

        let init = self
            .get("init")
            .map(|e| parse_init(&e.value, dim).map_err(|m| err(e.line, m)))
            .transpose()?;
        let resume = self.get("resume").map(|e| PathBuf::from(&e.value));
        if init.is_none() && resume.is_none() {
            return Err(CliError::config("missing required key 'init' (or 'resume')"));
        }

        let force = self
            .get("force")
            .map(|e| parse_force(&e.value).map_err(|m| err(e.line, m)))
            .transpose()?;
        match (scheme, &force) {
            (SchemeKind::Forced, None) => {
                return Err(CliError::config("missing required key 'force' for the forced scheme"))
            }
            (SchemeKind::Forced, Some(_)) | (_, None) => {}
            (other, Some(_)) => {
                return Err(err(
                    self.entries["force"].line,
                    format!("'force' does not apply to scheme '{}'", other.name()),
                ))
            }
        }

        let mut sigma = Vec::with_capacity(sigma_raw.len());
        for ((i, j), (key, e)) in sigma_raw {
            if scheme != SchemeKind::GrainGrowth {
                return Err(err(e.line, format!("'{key}' only applies to grain_growth")));
            }
            let value: f64 = e
                .value
                .parse()
                .map_err(|_| err(e.line, format!("'{key}' expects a number, got '{}'", e.value)))?;
            if !(value.is_finite() && value > 0.0) {
                return Err(err(e.line, format!("{key} = {value} must be positive")));
            }
            if value >= 2.0 {
                return Err(err(
                    e.line,
                    format!("{key} = {value} violates σ_ij < 2 (tensions are normalized by the solid-vapor tension)"),
                ));
            }
            sigma.push(SigmaEntry {
                i,
                j,
                value,
                line: e.line,
            });
        }

        let output = self
            .get("output")
            .map(|e| PathBuf::from(&e.value))
            .unwrap_or_else(|| PathBuf::from("out"));
        let dump_every = self
            .typed::<usize>("dump_every", "a non-negative integer")?
            .unwrap_or(1);
        let seed = self.typed::<u64>("seed", "a non-negative integer")?.unwrap_or(0);
        let stop_on_repeat = self.typed::<bool>("stop_on_repeat", "true or false")?.unwrap_or(false);

        let sweep = self.sweep()?;
        if h.is_none()
            && !matches!(
                sweep,
                Some(SweepSpec {
                    axis: SweepAxis::H(_),
                    ..
                })
            )
        {
            return Err(CliError::config("missing required key 'h'"));
        }
        if steps.is_none() && t_final.is_none() {
            return Err(CliError::config("missing required key 'steps' (or 't_final')"));
        }

        Ok(ExperimentConfig {
            scheme,
            grid,
            h,
            steps,
            t_final,
            init,
            resume,
            force,
            sigma,
            output,
            dump_every,
            seed,
            stop_on_repeat,
            sweep,
        })
    }

    fn sweep(&self) -> Result<Option<SweepSpec>, CliError> {
        let axis = match (self.get("sweep.h"), self.get("sweep.n")) {
            (Some(_), Some(b)) => return Err(err(b.line, "'sweep.n' conflicts with 'sweep.h'; sweep one axis")),
            (Some(e), None) => {
                let v = parse_list::<f64>(&e.value)
                    .filter(|v| v.iter().all(|x| x.is_finite() && *x > 0.0))
                    .ok_or_else(|| err(e.line, format!("'sweep.h' expects positive numbers, got '{}'", e.value)))?;
                Some(SweepAxis::H(v))
            }
            (None, Some(e)) => {
                let v = parse_list::<usize>(&e.value)
                    .ok_or_else(|| err(e.line, format!("'sweep.n' expects integers, got '{}'", e.value)))?;
                Some(SweepAxis::N(v))
            }
            (None, None) => None,
        };
        let mode = match self.get("sweep.mode") {
            None => SweepMode::Eoc,
            Some(e) => match e.value.as_str() {
                "eoc" => SweepMode::Eoc,
                "lambda" => SweepMode::Lambda,
                other => {
                    return Err(err(
                        e.line,
                        format!("'sweep.mode' expects eoc or lambda, got '{other}'"),
                    ))
                }
            },
        };
        let min_order = self.typed::<f64>("sweep.min_order", "a number")?;
        match axis {
            Some(axis) => Ok(Some(SweepSpec { axis, mode, min_order })),
            None => {
                for key in ["sweep.mode", "sweep.min_order"] {
                    if let Some(e) = self.get(key) {
                        return Err(err(e.line, format!("'{key}' needs 'sweep.h' or 'sweep.n'")));
                    }
                }
                Ok(None)
            }
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_point(s: &str, dim: usize) -> Result<Vec<f64>, String> {
    let p: Vec<f64> = parse_list(s).ok_or_else(|| format!("bad point '{s}'"))?;
    if p.len() != dim {
        return Err(format!("point '{s}' has {} coordinates, grid has {dim}", p.len()));
    }
    Ok(p)
}

fn parse_points(s: &str, dim: usize) -> Result<Vec<Vec<f64>>, String> {
    s.split(';').map(|p| parse_point(p, dim)).collect()
}

fn parse_num(key: &str, s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("'{key}' expects a number, got '{s}'"))
}

/// `kind key=value ...` with each key allowed once.
fn keyword_args<'a>(
    rest: impl Iterator<Item = &'a str>,
    allowed: &[&str],
) -> Result<BTreeMap<&'a str, &'a str>, String> {
    let mut out = BTreeMap::new();
    for tok in rest {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got '{tok}'"))?;
        if !allowed.contains(&k) {
            return Err(format!(
                "unknown parameter '{k}' (expected one of {})",
                allowed.join(", ")
            ));
        }
        if out.insert(k, v).is_some() {
            return Err(format!("parameter '{k}' given twice"));
        }
    }
    Ok(out)
}

fn need<'a>(args: &BTreeMap<&str, &'a str>, key: &str, kind: &str) -> Result<&'a str, String> {
    args.get(key).copied().ok_or_else(|| format!("{kind} needs '{key}='"))
}

fn parse_init(s: &str, dim: usize) -> Result<InitSpec, String> {
    let mut toks = s.split_whitespace();
    let kind = toks.next().ok_or("empty init")?;
    let center_default = || vec![0.5; dim];
    match kind {
        "ball" => {
            let a = keyword_args(toks, &["center", "radius"])?;
            let center = a
                .get("center")
                .map(|c| parse_point(c, dim))
                .transpose()?
                .unwrap_or_else(center_default);
            let radius = parse_num("radius", need(&a, "radius", "ball")?)?;
            Ok(InitSpec::Ball { center, radius })
        }
        "balls" => {
            let a = keyword_args(toks, &["centers", "radii"])?;
            let centers = parse_points(need(&a, "centers", "balls")?, dim)?;
            let radii: Vec<f64> =
                parse_list(need(&a, "radii", "balls")?).ok_or_else(|| "bad 'radii' list".to_string())?;
            if centers.len() != radii.len() {
                return Err(format!("{} centers but {} radii", centers.len(), radii.len()));
            }
            Ok(InitSpec::Balls { centers, radii })
        }
        "slab" => {
            let a = keyword_args(toks, &["axis", "offset", "thickness"])?;
            let axis = match a.get("axis") {
                Some(v) => v.parse().map_err(|_| format!("'axis' expects an integer, got '{v}'"))?,
                None => 0,
            };
            let offset = parse_num("offset", need(&a, "offset", "slab")?)?;
            let thickness = parse_num("thickness", need(&a, "thickness", "slab")?)?;
            Ok(InitSpec::Slab {
                axis,
                offset,
                thickness,
            })
        }
        "voronoi" => {
            let a = keyword_args(toks, &["seeds", "count", "region"])?;
            let seeds = match (a.get("seeds"), a.get("count")) {
                (Some(s), None) => Seeds::Explicit(parse_points(s, dim)?),
                (None, Some(c)) => Seeds::Random(
                    c.parse()
                        .ok()
                        .filter(|&c: &usize| c >= 1)
                        .ok_or_else(|| format!("bad seed count '{c}'"))?,
                ),
                _ => return Err("voronoi needs exactly one of 'seeds=' and 'count='".into()),
            };
            let region = parse_region(need(&a, "region", "voronoi")?, dim)?;
            Ok(InitSpec::Voronoi { seeds, region })
        }
        other => Err(format!(
            "unknown init '{other}' (expected ball, balls, slab or voronoi)"
        )),
    }
}

/// `margin:<w>` or `ball:<center>:<radius>`.
fn parse_region(s: &str, dim: usize) -> Result<Region, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["margin", w] => Ok(Region::Margin(parse_num("margin", w)?)),
        ["ball", c, r] => Ok(Region::Ball {
            center: parse_point(c, dim)?,
            radius: parse_num("radius", r)?,
        }),
        _ => Err(format!("bad region '{s}' (expected margin:<w> or ball:<center>:<r>)")),
    }
}

/// `const <f>` or `wave mean=<m> amplitude=<a> mode=<k,..> omega=<w>`.
fn parse_force(s: &str) -> Result<SpaceTimeForce, String> {
    let mut toks = s.split_whitespace();
    match toks.next() {
        Some("const") => {
            let v = toks.next().ok_or("const force needs a value")?;
            if let Some(extra) = toks.next() {
                return Err(format!("unexpected '{extra}' after the constant"));
            }
            let f = parse_num("const", v)?;
            if !f.is_finite() {
                return Err(format!("force must be finite, got {f}"));
            }
            Ok(SpaceTimeForce::Constant(f))
        }
        Some("wave") => {
            let a = keyword_args(toks, &["mean", "amplitude", "mode", "omega"])?;
            let num = |k: &str| a.get(k).map(|v| parse_num(k, v)).transpose().map(|v| v.unwrap_or(0.0));
            let mode_list: Vec<i32> =
                parse_list(need(&a, "mode", "wave")?).ok_or_else(|| "bad 'mode' list".to_string())?;
            if mode_list.is_empty() || mode_list.len() > 3 {
                return Err(format!("'mode' needs 1 to 3 integers, got {}", mode_list.len()));
            }
            let mut mode = [0; 3];
            mode[..mode_list.len()].copy_from_slice(&mode_list);
            Ok(SpaceTimeForce::Wave {
                mean: num("mean")?,
                amplitude: parse_num("amplitude", need(&a, "amplitude", "wave")?)?,
                mode,
                omega: num("omega")?,
            })
        }
        Some(other) => Err(format!("unknown force '{other}' (expected const or wave)")),
        None => Err("empty force".into()),
    }
}
