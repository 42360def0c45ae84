//! Scalar fields sampled on uniform node grids, with a plain-text format and
//! an 8-bit PGM heatmap export.
//!
//! Text format: a header line `nx ny x0 x1 y0 y1`, then `nx·ny` values in
//! row-major order (row `j` holds the nodes with `y = y0 + j·(y1−y0)/(ny−1)`).
//! Rows are written one per line, but any whitespace separation parses.

use std::fmt::Write as _;
use std::path::Path;

use super::{BvpError, Rect};
use crate::text::{fmt_f64, join_f64, parse_f64_list, split_key_value, write_atomic, LineCursor};

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    nx: usize,
    ny: usize,
    domain: Rect,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(nx: usize, ny: usize, domain: Rect, values: Vec<f64>) -> Result<Self, BvpError> {
        if nx < 2 || ny < 2 {
            return Err(BvpError::GridTooSmall(nx.min(ny), 2));
        }
        if values.len() != nx * ny {
            return Err(BvpError::InvalidSpec(format!(
                "grid {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BvpError::InvalidSpec("grid field contains non-finite values".into()));
        }
        Ok(GridField { nx, ny, domain, values })
    }

    /// Evaluates `f` at every node.
    pub fn from_fn(nx: usize, ny: usize, domain: Rect, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self, BvpError> {
        let nodes = grid_nodes(nx, ny, &domain);
        GridField::new(nx, ny, domain, nodes.into_iter().map(&mut f).collect())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        node(i, j, self.nx, self.ny, &self.domain)
    }

    /// Node coordinates in storage order.
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        grid_nodes(self.nx, self.ny, &self.domain)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_text(&self) -> String {
        let d = self.domain;
        let mut out = format!(
            "{} {} {} {} {} {}\n",
            self.nx,
            self.ny,
            fmt_f64(d.x0),
            fmt_f64(d.x1),
            fmt_f64(d.y0),
            fmt_f64(d.y1)
        );
        for row in self.values.chunks(self.nx) {
            writeln!(out, "{}", join_f64(row.iter().copied())).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, BvpError> {
        let mut cur = LineCursor::new(text);
        let (line, header) = cur.next_line().ok_or(BvpError::Malformed {
            line: 1,
            message: "missing header `nx ny x0 x1 y0 y1`".into(),
        })?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let malformed = |message: String| BvpError::Malformed { line, message };
        if parts.len() != 6 {
            return Err(malformed(format!("header needs 6 fields, found {}", parts.len())));
        }
        let nx: usize = parts[0].parse().map_err(|_| malformed(format!("bad nx `{}`", parts[0])))?;
        let ny: usize = parts[1].parse().map_err(|_| malformed(format!("bad ny `{}`", parts[1])))?;
        let bounds = parse_f64_list(&parts[2..].join(" ")).map_err(malformed)?;
        let domain = Rect::new(bounds[0], bounds[1], bounds[2], bounds[3])?;
        let expected = nx.checked_mul(ny).ok_or_else(|| malformed("grid size overflows".into()))?;
        let mut values = Vec::new();
        while let Some((line, content)) = cur.next_line() {
            let row = parse_f64_list(content).map_err(|message| BvpError::Malformed { line, message })?;
            values.extend(row);
            if values.len() > expected {
                return Err(BvpError::Malformed {
                    line,
                    message: format!("more than {expected} values"),
                });
            }
        }
        if values.len() != expected {
            return Err(BvpError::Malformed {
                line,
                message: format!("expected {expected} values, found {}", values.len()),
            });
        }
        GridField::new(nx, ny, domain, values)
    }

    pub fn write(&self, path: &Path) -> Result<(), BvpError> {
        write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, BvpError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// 8-bit heatmap with a linear min–max mapping; the top image row is the
    /// `y = y1` edge. A constant field maps to all zeros.
    pub fn to_pgm(&self) -> (PgmImage, PgmScale) {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let mut pixels = Vec::with_capacity(self.values.len());
        for j in (0..self.ny).rev() {
            for i in 0..self.nx {
                let v = self.get(i, j);
                let level = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                pixels.push(level.clamp(0.0, 255.0) as u8);
            }
        }
        (
            PgmImage {
                width: self.nx,
                height: self.ny,
                pixels,
            },
            PgmScale { min: lo, max: hi },
        )
    }

    /// Writes `<path>` as binary PGM and `<path>.txt` with the normalisation.
    pub fn write_pgm(&self, path: &Path) -> Result<(), BvpError> {
        let (img, scale) = self.to_pgm();
        write_atomic(path, &img.to_bytes())?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".txt");
        write_atomic(Path::new(&sidecar), scale.to_text().as_bytes())?;
        Ok(())
    }
}

fn node(i: usize, j: usize, nx: usize, ny: usize, d: &Rect) -> [f64; 2] {
    let x = if i + 1 == nx { d.x1 } else { d.x0 + d.width() * i as f64 / (nx - 1) as f64 };
    let y = if j + 1 == ny { d.y1 } else { d.y0 + d.height() * j as f64 / (ny - 1) as f64 };
    [x, y]
}

/// Row-major node coordinates of an `nx × ny` grid spanning `domain`,
/// including the boundary nodes.
pub(crate) fn grid_nodes(nx: usize, ny: usize, domain: &Rect) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(node(i, j, nx, ny, domain));
        }
    }
    out
}

/// Binary (P5) 8-bit greyscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl PgmImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, BvpError> {
        let bad = |message: &str| BvpError::Malformed {
            line: 1,
            message: message.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad PGM width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad PGM height"))?;
        if fields[3] != "255" {
            return Err(bad("only 8-bit PGM (maxval 255) is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(bad("missing raster"));
        }
        pos += 1;
        let expected = width.checked_mul(height).ok_or_else(|| bad("PGM size overflows"))?;
        let raster = &bytes[pos..];
        if raster.len() != expected {
            return Err(bad("raster length does not match width x height"));
        }
        Ok(PgmImage {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }
}

/// Linear normalisation used for a PGM export: level `0` is `min`, `255` is
/// `max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
}

impl PgmScale {
    pub fn to_text(&self) -> String {
        format!("mapping=linear\nmin={}\nmax={}\n", fmt_f64(self.min), fmt_f64(self.max))
    }

    pub fn parse(text: &str) -> Result<Self, BvpError> {
        let mut min = None;
        let mut max = None;
        let mut cur = LineCursor::new(text);
        while let Some((line, content)) = cur.next_line() {
            let bad = |m: String| BvpError::Malformed { line, message: m };
            let (k, v) = split_key_value(content).ok_or_else(|| bad(format!("expected key=value, found `{content}`")))?;
            match k {
                "mapping" if v == "linear" => {}
                "mapping" => return Err(bad(format!("unsupported mapping `{v}`"))),
                "min" => min = Some(v.parse::<f64>().map_err(|_| bad(format!("bad min `{v}`")))?),
                "max" => max = Some(v.parse::<f64>().map_err(|_| bad(format!("bad max `{v}`")))?),
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        match (min, max) {
            (Some(min), Some(max)) => Ok(PgmScale { min, max }),
            _ => Err(BvpError::Malformed {
                line: 0,
                message: "normalisation needs min and max".into(),
            }),
        }
    }

    /// Value represented by grey level `level`.
    pub fn value_of(&self, level: u8) -> f64 {
        self.min + (self.max - self.min) * level as f64 / 255.0
    }
}
