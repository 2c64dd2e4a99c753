//! Atomic file output and CSV/JSON encoding of fields and orbits.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SlowFastError};
use crate::model::{GridFunction, OrbitPath};

fn io_err(e: impl std::fmt::Display) -> SlowFastError {
    SlowFastError::Io(e.to_string())
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(io_err)?;
    Ok(())
}

/// Pretty JSON written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io_err)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// A float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text with a header row, comma separator and 17 significant digits.
pub fn csv_string(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Node coordinates `y0..` followed by the columns of each field, named `prefix_i`.
pub fn fields_csv(fields: &[(&str, &GridFunction)]) -> Result<String> {
    let first = fields.first().ok_or_else(|| SlowFastError::Argument("no fields to export".into()))?.1;
    let dom = &first.domain;
    if fields.iter().any(|(_, f)| f.domain != *dom) {
        return Err(SlowFastError::Argument("fields live on different grids".into()));
    }
    let mut header: Vec<String> = (0..dom.dim()).map(|k| format!("y{k}")).collect();
    for (name, f) in fields {
        header.extend((0..f.dim).map(|i| format!("{name}_{i}")));
    }
    let rows: Vec<Vec<f64>> = (0..dom.num_nodes())
        .map(|idx| {
            let mut r = dom.node(idx);
            for (_, f) in fields {
                r.extend_from_slice(f.node_value(idx));
            }
            r
        })
        .collect();
    Ok(csv_string(&header, &rows))
}

/// Time, then `x_i`, `y_k` of each named path sampled on the first path's times.
pub fn orbits_csv(paths: &[(&str, &OrbitPath)]) -> Result<String> {
    let first = paths.first().ok_or_else(|| SlowFastError::Argument("no paths to export".into()))?.1;
    if paths.iter().any(|(_, p)| p.len() != first.len()) {
        return Err(SlowFastError::Argument("paths have different lengths".into()));
    }
    let mut header = vec!["t".to_string()];
    for (name, p) in paths {
        header.extend((0..p.m).map(|i| format!("{name}_x{i}")));
        header.extend((0..p.n).map(|k| format!("{name}_y{k}")));
    }
    let rows: Vec<Vec<f64>> = (0..first.len())
        .map(|i| {
            let mut r = vec![first.times[i]];
            for (_, p) in paths {
                r.extend_from_slice(p.fast_at(i));
                r.extend_from_slice(p.slow_at(i));
            }
            r
        })
        .collect();
    Ok(csv_string(&header, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GridDomain;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn field_csv_layout() {
        let g = GridDomain::interval(0.0, 1.0, 3).unwrap();
        let f = GridFunction::from_fn(g, 1, |y, o| o[0] = 2.0 * y[0]);
        let s = fields_csv(&[("h", &f)]).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "y0,h_0");
        assert_eq!(lines.len(), 4);
        let last: Vec<f64> = lines[3].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(last, vec![1.0, 2.0]);
    }
}
