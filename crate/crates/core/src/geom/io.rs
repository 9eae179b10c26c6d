//! Whitespace-separated text clouds: `x y z [label]` per line, `#` comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    parse_cloud(&text, path)
}

pub(crate) fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut labeled: Option<bool> = None;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(n + 1, format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (v, f) in xyz.iter_mut().zip(&fields[..3]) {
            *v = f
                .parse::<f64>()
                .map_err(|e| err(n + 1, format!("bad coordinate {f:?}: {e}")))?;
            if !v.is_finite() {
                return Err(err(n + 1, format!("non-finite coordinate {f:?}")));
            }
        }
        let has_label = fields.len() == 4;
        match labeled {
            None => labeled = Some(has_label),
            Some(l) if l != has_label => {
                return Err(err(n + 1, "label column present on some lines only".into()))
            }
            _ => {}
        }
        if has_label {
            labels.push(match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(err(n + 1, format!("label must be 0 or 1, got {other:?}"))),
            });
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud {
        points,
        labels: if labeled == Some(true) { Some(labels) } else { None },
    })
}

/// Writes with shortest round-trip float formatting, via a temp file renamed
/// into place.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    crate::io_util::write_atomic(path, |w| {
        for (i, p) in cloud.points.iter().enumerate() {
            match &cloud.labels {
                Some(l) => writeln!(w, "{} {} {} {}", p.x, p.y, p.z, u8::from(l[i]))?,
                None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
            }
        }
        Ok(())
    })
}
