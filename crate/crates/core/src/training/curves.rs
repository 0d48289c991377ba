use std::fs;
use std::path::Path;

use super::{CurvePoint, TrainError};

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

/// Writes one CSV row per epoch under [`CURVES_HEADER`].
pub fn export_curves(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for p in points {
        // `{}` prints the shortest representation that parses back exactly.
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.epoch, p.train_loss, p.val_loss, p.train_accuracy, p.val_accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_curves(text: &str) -> Result<Vec<CurvePoint>, TrainError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVES_HEADER => {}
        other => return Err(TrainError::Curves(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || TrainError::Curves(format!("row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(CurvePoint {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                train_accuracy: num(f[3])?,
                val_accuracy: num(f[4])?,
            })
        })
        .collect()
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>, TrainError> {
    parse_curves(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize) -> Vec<CurvePoint> {
        (1..=n)
            .map(|e| CurvePoint {
                epoch: e,
                train_loss: std::f64::consts::LN_2 / e as f64,
                val_loss: 0.7 / e as f64 + 1e-9,
                train_accuracy: 0.5 + 0.1 * e as f64,
                val_accuracy: 1.0 / 3.0,
            })
            .collect()
    }

    #[test]
    fn three_epochs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        export_curves(&points(3), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_curves(&path).unwrap(), points(3));
    }

    #[test]
    fn empty_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        export_curves(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{CURVES_HEADER}\n"));
        assert!(read_curves(&path).unwrap().is_empty());
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_curves(&points(1), dir.path().join("missing/c.csv")).is_err());
    }
}
