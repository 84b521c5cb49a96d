//! CSV serialization of curves and coordinate series.
//!
//! Curve files carry `x,value` rows with ascending maturities; the reader
//! checks nodes against the active grid to 1e-9 or, when asked, resamples by
//! linear interpolation. Series files carry `t,z1,...,zn` rows at a constant
//! step (validated to 1e-9). Writers emit 17 significant digits so that a
//! read-back reproduces every double bit-for-bit.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::function_space::{Curve, Grid};
use crate::projection_dynamics::{CoordSeries, SeriesSource};
use crate::scalar::Scalar;

/// 17 significant digits: lossless for f64.
pub fn fmt_float<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

fn csv_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_float(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| csv_err(path, line, format!("`{field}` is not a number")))
}

pub fn write_curve_csv<T: Scalar>(path: &Path, curve: &Curve<T>) -> Result<()> {
    let mut out = String::from("x,value\n");
    for (x, v) in curve.grid().nodes().iter().zip(curve.values()) {
        out.push_str(&fmt_float(*x));
        out.push(',');
        out.push_str(&fmt_float(*v));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a curve and validates its nodes against the active grid (absolute
/// 1e-9 per node). With `resample` set, the file is instead interpolated
/// linearly onto the grid; its span must cover `[0, t_max]`.
pub fn read_curve_csv<T: Scalar>(
    path: &Path,
    grid: &Arc<Grid<T>>,
    resample: bool,
) -> Result<Curve<T>> {
    let file = std::fs::File::open(path).map_err(|e| csv_err(path, 0, e.to_string()))?;
    let reader = BufReader::new(file);
    let mut xs: Vec<f64> = Vec::new();
    let mut vs: Vec<f64> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if idx == 0 {
            if trimmed != "x,value" {
                return Err(csv_err(path, 1, "expected header `x,value`"));
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let (Some(xf), Some(vf), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(csv_err(path, lineno, "expected exactly 2 fields"));
        };
        let x = parse_float(path, lineno, xf)?;
        let v = parse_float(path, lineno, vf)?;
        if !v.is_finite() || !x.is_finite() {
            return Err(csv_err(path, lineno, "non-finite value"));
        }
        if let Some(&prev) = xs.last() {
            if x <= prev {
                return Err(csv_err(path, lineno, "x must be strictly ascending"));
            }
        }
        xs.push(x);
        vs.push(v);
    }
    if xs.is_empty() {
        return Err(csv_err(path, 1, "no data rows"));
    }

    if resample {
        let lo = xs[0];
        let hi = *xs.last().unwrap();
        let values: Result<Vec<T>> = grid
            .nodes()
            .iter()
            .map(|&node| {
                let x = node.as_f64();
                if x < lo - 1e-9 || x > hi + 1e-9 {
                    return Err(csv_err(
                        path,
                        0,
                        format!("grid node {x} outside the file span [{lo}, {hi}]"),
                    ));
                }
                Ok(T::of(interp_linear(&xs, &vs, x)))
            })
            .collect();
        return Curve::from_values(Arc::clone(grid), values?);
    }

    if xs.len() != grid.len() {
        return Err(csv_err(
            path,
            0,
            format!(
                "file has {} nodes but the grid has {} (use resampling to interpolate)",
                xs.len(),
                grid.len()
            ),
        ));
    }
    for (i, (&x, &node)) in xs.iter().zip(grid.nodes()).enumerate() {
        if (x - node.as_f64()).abs() > 1e-9 {
            return Err(csv_err(
                path,
                i + 2,
                format!("node {x} does not match the grid node {}", node.as_f64()),
            ));
        }
    }
    Curve::from_values(Arc::clone(grid), vs.into_iter().map(T::of).collect())
}

fn interp_linear(xs: &[f64], vs: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return vs[0];
    }
    if x >= xs[xs.len() - 1] {
        return vs[vs.len() - 1];
    }
    let j = xs.partition_point(|&xi| xi <= x).min(xs.len() - 1);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let t = (x - x0) / (x1 - x0);
    vs[j - 1] * (1.0 - t) + vs[j] * t
}

pub fn write_series_csv<T: Scalar>(path: &Path, series: &CoordSeries<T>) -> Result<()> {
    let mut out = String::from("t");
    for i in 1..=series.n() {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    let delta = series.delta().as_f64();
    for (k, point) in series.points().iter().enumerate() {
        out.push_str(&fmt_float(k as f64 * delta));
        for v in point {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a series, validating the header shape and that the time column
/// advances by a constant step (to 1e-9).
pub fn read_series_csv<T: Scalar>(path: &Path) -> Result<CoordSeries<T>> {
    let file = std::fs::File::open(path).map_err(|e| csv_err(path, 0, e.to_string()))?;
    let reader = BufReader::new(file);
    let mut n = 0usize;
    let mut times: Vec<f64> = Vec::new();
    let mut points: Vec<Vec<T>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if idx == 0 {
            let mut fields = trimmed.split(',');
            if fields.next() != Some("t") {
                return Err(csv_err(path, 1, "expected header `t,z1,...,zn`"));
            }
            for (i, f) in fields.enumerate() {
                if f != format!("z{}", i + 1) {
                    return Err(csv_err(path, 1, "expected header `t,z1,...,zn`"));
                }
                n += 1;
            }
            if n == 0 {
                return Err(csv_err(path, 1, "series needs at least one coordinate"));
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != n + 1 {
            return Err(csv_err(
                path,
                lineno,
                format!("expected {} fields, found {}", n + 1, fields.len()),
            ));
        }
        times.push(parse_float(path, lineno, fields[0])?);
        let point: Result<Vec<T>> = fields[1..]
            .iter()
            .map(|f| parse_float(path, lineno, f).map(T::of))
            .collect();
        points.push(point?);
    }
    if points.len() < 2 {
        return Err(csv_err(path, 0, "series needs at least two rows"));
    }
    let delta = times[1] - times[0];
    if delta <= 0.0 || !delta.is_finite() {
        return Err(csv_err(path, 3, "time must advance"));
    }
    for (k, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - delta).abs() > 1e-9 {
            return Err(csv_err(
                path,
                k + 3,
                format!("step {} deviates from the constant step {delta}", w[1] - w[0]),
            ));
        }
    }
    CoordSeries::new(
        T::of(delta),
        points,
        SeriesSource::Ingested(path.display().to_string()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::QuadRule;

    fn grid(t_max: f64, p: usize) -> Arc<Grid<f64>> {
        Grid::new(t_max, p, QuadRule::TrapezoidUniform).unwrap()
    }

    #[test]
    fn curve_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let g = grid(5.0, 41);
        let c = Curve::from_fn(&g, |x| 0.03 * (-(x * 1.1)).exp() + 1.0 / 3.0);
        write_curve_csv(&path, &c).unwrap();
        let back: Curve<f64> = read_curve_csv(&path, &g, false).unwrap();
        assert_eq!(back.values(), c.values());
    }

    #[test]
    fn curve_reader_validates_nodes_and_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let g = grid(1.0, 5);
        std::fs::write(&path, "x,value\n0,1\n0.3,1\n0.5,1\n0.75,1\n1,1\n").unwrap();
        match read_curve_csv::<f64>(&path, &g, false) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "x,value\n0,1\n0.25,oops\n").unwrap();
        match read_curve_csv::<f64>(&path, &g, false) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn curve_reader_resamples_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        // A coarse file holding the linear function x/2 on [0, 1].
        std::fs::write(&path, "x,value\n0,0\n0.5,0.25\n1,0.5\n").unwrap();
        let g = grid(1.0, 9);
        let c: Curve<f64> = read_curve_csv(&path, &g, true).unwrap();
        for (x, v) in g.nodes().iter().zip(c.values()) {
            assert!((v - 0.5 * x).abs() < 1e-12);
        }
        // Without resampling the node counts disagree.
        assert!(read_curve_csv::<f64>(&path, &g, false).is_err());
    }

    #[test]
    fn series_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let series = CoordSeries::new(
            1.0 / 252.0,
            vec![
                vec![0.04, -0.01],
                vec![0.0401234567890123, -0.0099],
                vec![0.0402, -0.0101],
            ],
            SeriesSource::Synthetic,
        )
        .unwrap();
        write_series_csv(&path, &series).unwrap();
        let back: CoordSeries<f64> = read_series_csv(&path).unwrap();
        assert_eq!(back.points(), series.points());
        assert!((back.delta() - series.delta()).abs() < 1e-15);

        std::fs::write(&path, "t,z1\n0,1\n0.1,1\n0.3,1\n").unwrap();
        assert!(matches!(
            read_series_csv::<f64>(&path),
            Err(Error::Csv { .. })
        ));
        std::fs::write(&path, "t,z1,w2\n0,1,2\n").unwrap();
        assert!(read_series_csv::<f64>(&path).is_err());
    }
}
