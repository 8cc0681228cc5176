//! Bit-exact field dumps.
//!
//! ```text
//! MBOF1
//! dim=2
//! n=64,64
//! side=1.0000000000000000e0
//! h=1.0000000000000000e-3
//! step=0
//! phases=2
//!
//! <one u8 label per cell, x fastest>
//! ```

use std::fs;
use std::path::Path;

use mbo_core::Grid;
use thiserror::Error;

pub const MAGIC: &str = "MBOF1";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: header line {line}: {msg}")]
    Header { path: String, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Body { path: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub grid: Grid,
    pub h: f64,
    pub step: usize,
    /// Number of distinct labels, vapor included.
    pub phases: usize,
    pub labels: Vec<u8>,
}

impl Dump {
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape: Vec<String> = self.grid.shape().iter().map(|n| n.to_string()).collect();
        let header = format!(
            "{MAGIC}\ndim={}\nn={}\nside={:.16e}\nh={:.16e}\nstep={}\nphases={}\n\n",
            self.grid.dim(),
            shape.join(","),
            self.grid.side(),
            self.h,
            self.step,
            self.phases
        );
        let mut out = header.into_bytes();
        out.extend_from_slice(&self.labels);
        out
    }

    /// `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, DumpError> {
        let header_err = |line: usize, msg: String| DumpError::Header {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut rest = bytes;
        let mut lines = Vec::with_capacity(8);
        for k in 1..=8 {
            let Some(end) = rest.iter().position(|&b| b == b'\n') else {
                return Err(header_err(k, "truncated header".into()));
            };
            let text = std::str::from_utf8(&rest[..end]).map_err(|_| header_err(k, "header is not UTF-8".into()))?;
            lines.push(text.to_string());
            rest = &rest[end + 1..];
        }
        if lines[0] != MAGIC {
            return Err(header_err(1, format!("expected '{MAGIC}', got '{}'", lines[0])));
        }
        let field = |k: usize, key: &str| -> Result<&str, DumpError> {
            lines[k]
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .ok_or_else(|| header_err(k + 1, format!("expected '{key}=...', got '{}'", lines[k])))
        };
        let parse = |k: usize, key: &str| -> Result<f64, DumpError> {
            let v = field(k, key)?;
            v.parse::<f64>()
                .map_err(|_| header_err(k + 1, format!("bad {key} '{v}'")))
        };
        let int = |k: usize, key: &str| -> Result<usize, DumpError> {
            let v = field(k, key)?;
            v.parse::<usize>()
                .map_err(|_| header_err(k + 1, format!("bad {key} '{v}'")))
        };
        let dim = int(1, "dim")?;
        let n_text = field(2, "n")?;
        let n: Vec<usize> = n_text
            .split(',')
            .map(|p| p.parse().ok())
            .collect::<Option<_>>()
            .ok_or_else(|| header_err(3, format!("bad n '{n_text}'")))?;
        let side = parse(3, "side")?;
        let h = parse(4, "h")?;
        if !(h.is_finite() && h > 0.0) {
            return Err(header_err(5, format!("h must be positive, got {h}")));
        }
        let step = int(5, "step")?;
        let phases = int(6, "phases")?;
        if !(2..=256).contains(&phases) {
            return Err(header_err(7, format!("phases must be in 2..=256, got {phases}")));
        }
        if !lines[7].is_empty() {
            return Err(header_err(8, format!("expected a blank line, got '{}'", lines[7])));
        }
        let grid = Grid::new(dim, &n, side).map_err(|e| header_err(2, e.to_string()))?;
        let body_err = |msg: String| DumpError::Body {
            path: origin.to_string(),
            msg,
        };
        if rest.len() != grid.len() {
            return Err(body_err(format!(
                "expected {} cells, found {} bytes",
                grid.len(),
                rest.len()
            )));
        }
        if let Some(pos) = rest.iter().position(|&l| l as usize >= phases) {
            return Err(body_err(format!(
                "cell {pos} has label {} but phases={phases}",
                rest[pos]
            )));
        }
        Ok(Self {
            grid,
            h,
            step,
            phases,
            labels: rest.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DumpError> {
        fs::write(path, self.to_bytes()).map_err(|source| DumpError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DumpError> {
        let bytes = fs::read(path).map_err(|source| DumpError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// `step_000042.mbof`.
pub fn dump_name(step: usize) -> String {
    format!("step_{step:06}.mbof")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dump {
        let grid = Grid::new(2, &[8, 12], 1.5).unwrap();
        let labels = (0..grid.len()).map(|k| (k % 3) as u8).collect();
        Dump {
            grid,
            h: 1.0 / 3.0,
            step: 17,
            phases: 3,
            labels,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let d = sample();
        let back = Dump::from_bytes(&d.to_bytes(), "mem").unwrap();
        assert_eq!(back, d);
        assert_eq!(back.h.to_bits(), d.h.to_bits());
        assert_eq!(back.to_bytes(), d.to_bytes());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 96]);
        assert_eq!(
            text,
            "MBOF1\ndim=2\nn=8,12\nside=1.5000000000000000e0\nh=3.3333333333333331e-1\nstep=17\nphases=3\n\n"
        );
    }

    #[test]
    fn corruption_is_diagnosed() {
        let good = sample().to_bytes();
        let cases: Vec<(Vec<u8>, &str)> = vec![
            (b"MBOF2".to_vec(), "truncated"),
            (
                String::from_utf8_lossy(&good)
                    .replacen("MBOF1", "MBOF9", 1)
                    .into_bytes(),
                "line 1",
            ),
            (
                String::from_utf8_lossy(&good)
                    .replacen("step=17", "step=x", 1)
                    .into_bytes(),
                "line 6",
            ),
            (
                String::from_utf8_lossy(&good)
                    .replacen("phases=3", "phases=1", 1)
                    .into_bytes(),
                "line 7",
            ),
            (good[..good.len() - 1].to_vec(), "expected 96 cells"),
            (
                {
                    let mut b = good.clone();
                    *b.last_mut().unwrap() = 3;
                    b
                },
                "label 3",
            ),
        ];
        for (bytes, want) in cases {
            let e = Dump::from_bytes(&bytes, "mem").unwrap_err().to_string();
            assert!(e.contains(want), "{e} lacks {want}");
        }
    }

    #[test]
    fn names_sort_by_step() {
        assert_eq!(dump_name(42), "step_000042.mbof");
        assert!(dump_name(9) < dump_name(10));
    }
}
