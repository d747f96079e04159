//! Point patterns on disk: a CSV file with header `x,y` and a JSON sidecar
//! `{"window":[x_min,x_max,y_min,y_max]}` next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Configuration, Point, Window};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSidecar {
    pub window: Window,
}

/// `pattern.csv` → `pattern.window.json`
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.window.json"))
}

pub fn read_points(csv_path: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::Io(format!("{}: {e}", csv_path.display())))?;
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(Error::InvalidArgument(format!(
            "{}: expected header `x,y`, found `{}`",
            csv_path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "{}: row {}: cannot parse `{}` as a number",
                        csv_path.display(),
                        line + 2,
                        rec.get(k).unwrap_or("")
                    ))
                })
        };
        out.push(Point::new(parse(0)?, parse(1)?));
    }
    Ok(out)
}

pub fn read_window(path: &Path) -> Result<Window> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let side: WindowSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    Ok(side.window)
}

/// Reads a pattern. The window comes from `window` when given, otherwise
/// from the sidecar.
pub fn read_pattern(csv_path: &Path, window: Option<Window>) -> Result<Configuration> {
    let points = read_points(csv_path)?;
    let window = match window {
        Some(w) => w,
        None => read_window(&sidecar_path(csv_path))?,
    };
    Configuration::new(points, window)
}

/// Writes the CSV and its sidecar. Numbers use the shortest representation
/// that round-trips, so output is byte-stable.
pub fn write_pattern(cfg: &Configuration, csv_path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path)
        .map_err(|e| Error::Io(format!("{}: {e}", csv_path.display())))?;
    wtr.write_record(["x", "y"])?;
    for p in cfg.points() {
        wtr.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    wtr.flush()?;
    let side = WindowSidecar { window: *cfg.window() };
    fs::write(sidecar_path(csv_path), serde_json::to_string(&side)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pattern.csv");
        let w = Window::new(0.0, 8.0, -1.0, 3.5).unwrap();
        let cfg = Configuration::new(
            vec![Point::new(0.1, 0.2), Point::new(7.999999999999, -0.3), Point::new(1.0 / 3.0, 3.5)],
            w,
        )
        .unwrap();
        write_pattern(&cfg, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y\n"));
        let side = fs::read_to_string(dir.path().join("pattern.window.json")).unwrap();
        assert_eq!(side.trim(), r#"{"window":[0.0,8.0,-1.0,3.5]}"#);
        let back = read_pattern(&path, None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_header_and_bad_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        let w = Window::square(3.0).unwrap();
        assert!(matches!(read_pattern(&path, Some(w)), Err(Error::InvalidArgument(_))));
        fs::write(&path, "x,y\n1,2\n1,zz\n").unwrap();
        let err = read_pattern(&path, Some(w)).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn point_outside_window_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "x,y\n5,1\n").unwrap();
        assert!(read_pattern(&path, Some(Window::square(3.0).unwrap())).is_err());
    }
}
