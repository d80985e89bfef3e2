use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, Image, Item, Split};
use crate::error::{Error, Result};
use crate::numeric::l2_normalize;
use crate::rng::SeededRng;

/// Gaussian clusters around random unit-norm centers, mapped affinely into
/// `[0, 1]` with one global scale so relative geometry is preserved.
pub fn gen_clusters(class_count: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if class_count < 2 || per_class < 1 || dim < 2 || !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::InvalidShape(format!(
            "gen_clusters needs classes >= 2, per_class >= 1, dim >= 2, spread > 0; got {class_count}, {per_class}, {dim}, {spread}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            l2_normalize(&v).expect("gaussian draw has positive norm")
        })
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut raw = Vec::with_capacity(class_count * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = c.iter().map(|m| m + noise.sample(&mut rng)).collect();
            raw.push((x, label));
        }
    }
    let lo = raw.iter().flat_map(|(x, _)| x.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().flat_map(|(x, _)| x.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let scale = hi - lo;
    let items = raw
        .into_iter()
        .map(|(x, label)| {
            let v = x.iter().map(|v| ((v - lo) / scale).clamp(0.0, 1.0)).collect();
            Item { image: Image::from_vector(v).expect("dim >= 2"), label }
        })
        .collect();
    Dataset::new(items, Split::Train, class_count)
}

/// Writes `label,x0,...,x{d-1}` rows after a header line.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = dataset.feature_len();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for it in &dataset.items {
        let mut rec = Vec::with_capacity(d + 1);
        rec.push(it.label.to_string());
        rec.extend(it.image.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file produced by [`write_csv`]; class count is `max label + 1`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let width = r.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(Error::InvalidShape("dataset CSV needs a label and at least one feature".into()));
    }
    let mut items = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::InvalidShape(format!("row {}: {what}", line + 1));
        let label: usize = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("bad label"))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("bad feature value"))?;
        items.push(Item { image: Image::from_vector(values)?, label });
    }
    let class_count = items.iter().map(|it| it.label + 1).max().unwrap_or(0);
    Dataset::new(items, Split::Train, class_count)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidShape(format!("csv: {other:?}")),
    }
}
