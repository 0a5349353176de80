use std::path::Path;

use serde::Serialize;

use super::{EvalError, MetricsReport, OcclusionCurve};

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io { path: path.display().to_string(), reason: e.to_string() }
}

fn create_parent(path: &Path) -> Result<(), EvalError> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| io_err(d, e)),
        _ => Ok(()),
    }
}

/// Pretty-printed JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// One row per report: `label, direction, recall@k..., map@k..., n_queries, n_gallery`.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<(), EvalError> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.recall_at.keys().copied().collect()).unwrap_or_default();
    let mut header = vec!["label".to_string(), "direction".to_string()];
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("map@{k}")));
    header.extend(["n_queries".to_string(), "n_gallery".to_string()]);
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (label, r) in rows {
        let mut rec = vec![label.clone(), r.direction.to_string()];
        rec.extend(ks.iter().map(|k| r.recall_at.get(k).map_or(String::new(), f64::to_string)));
        rec.extend(ks.iter().map(|k| r.map_at.get(k).map_or(String::new(), f64::to_string)));
        rec.extend([r.n_queries.to_string(), r.n_gallery.to_string()]);
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One row per `(curve, ratio)`: `method, mask_ratio, accuracy, sigma, trials`.
pub fn write_curves_csv(path: &Path, curves: &[OcclusionCurve]) -> Result<(), EvalError> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["method", "mask_ratio", "accuracy", "sigma", "trials"]).map_err(|e| io_err(path, e))?;
    for c in curves {
        for i in 0..c.mask_ratios.len() {
            w.write_record([
                c.method.clone(),
                c.mask_ratios[i].to_string(),
                c.accuracy[i].to_string(),
                c.sigma(i).to_string(),
                c.trials[i].to_string(),
            ])
            .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::eval::Direction;

    #[test]
    fn exports_have_expected_columns_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m: BTreeMap<usize, f64> = [(1, 0.5), (3, 0.75), (5, 1.0)].into();
        let r = MetricsReport { direction: Direction::Averaged, recall_at: m.clone(), map_at: m, n_queries: 4, n_gallery: 4 };
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, &[("rep0".into(), r.clone())]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "label,direction,recall@1,recall@3,recall@5,map@1,map@3,map@5,n_queries,n_gallery");
        assert_eq!(lines.next().unwrap(), "rep0,averaged,0.5,0.75,1,0.5,0.75,1,4,4");

        let j = dir.path().join("deep/m.json");
        write_json(&j, &r).unwrap();
        let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(back, r);

        let c = OcclusionCurve {
            method: "x".into(),
            mask_ratios: vec![0.1, 0.3],
            accuracy: vec![1.0, 0.5],
            trials: vec![10, 10],
            n_masks: 5,
            fill_value: 0.0,
            n_queries: 2,
        };
        let p = dir.path().join("c.csv");
        write_curves_csv(&p, &[c]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 3);
    }
}
