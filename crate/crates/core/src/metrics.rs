//! Case-level overlap and boundary-distance metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::edge::extract_edge_map;
use crate::trainer::LABEL_SUFFIX;
use crate::volume_io::{read_metaimage, Volume, VolumeKind};
use crate::{Error, Result, Scalar};

fn same_shape<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("mask shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, and 1 when both masks are empty.
pub fn dice_score<T: Scalar>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > T::zero(), y > T::zero());
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub msd: f64,
    /// Largest pooled distance (the Hausdorff distance).
    pub max: f64,
}

/// Exact squared Euclidean distance transform to the `true` voxels of
/// `feature`, in mm², by separable lower-envelope passes along x, then y,
/// then z. Per-voxel values equal `((dx·sx)² + (dy·sy)²) + (dz·sz)²` for the
/// nearest feature, accumulated in that order.
pub fn squared_edt(feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = feature.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = dims;
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut scratch = Envelope::with_capacity(longest);
    for (axis, (len, stride)) in [(nx, 1), (ny, nx), (nz, nx * ny)].into_iter().enumerate() {
        let starts: Vec<usize> = (0..f.len()).filter(|&i| (i / stride) % len == 0).collect();
        for start in starts {
            for k in 0..len {
                line[k] = f[start + k * stride];
            }
            scratch.transform(&line[..len], &mut out[..len], spacing[axis]);
            for k in 0..len {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

/// One-dimensional lower envelope of parabolas `((q - p)·s)² + f(p)`.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64], s: f64) {
        let s2 = s * s;
        self.v.clear();
        self.z.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                let Some(&p) = self.v.last() else {
                    self.v.push(q);
                    self.z.push(f64::NEG_INFINITY);
                    break;
                };
                let (qf, pf) = (q as f64, p as f64);
                let cross = ((fq + qf * qf * s2) - (f[p] + pf * pf * s2)) / (2.0 * s2 * (qf - pf));
                if cross <= *self.z.last().unwrap_or(&f64::NEG_INFINITY) {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(cross);
                    break;
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            // exact near-ties at an envelope break may land on either side;
            // take the smaller of the two adjacent parabolas
            let mut best = ((q as f64 - p as f64) * s).powi(2) + f[p];
            if k + 1 < self.v.len() {
                let p2 = self.v[k + 1];
                best = best.min(((q as f64 - p2 as f64) * s).powi(2) + f[p2]);
            }
            *o = best;
        }
    }
}

fn surface<T: Scalar>(mask: &Volume<T>) -> Result<Vec<bool>> {
    Ok(extract_edge_map(mask)?.data().iter().map(|&v| v > T::zero()).collect())
}

/// 95th percentile by linear interpolation at rank `0.95·(n-1)` of the
/// ascending `sorted` values.
pub fn percentile_95(sorted: &[f64]) -> f64 {
    let rank = 0.95 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    match sorted.get(lo + 1) {
        Some(&hi) => sorted[lo] + frac * (hi - sorted[lo]),
        None => sorted[lo],
    }
}

/// Pooled directed distances (mm) between the 6-connected surfaces of `a`
/// and `b`, both directions. `None` when either mask is empty.
pub fn directed_surface_distances<T: Scalar>(
    a: &Volume<T>,
    b: &Volume<T>,
    spacing: [f64; 3],
) -> Result<Option<Vec<f64>>> {
    same_shape(a, b)?;
    let (sa, sb) = (surface(a)?, surface(b)?);
    if !sa.contains(&true) || !sb.contains(&true) {
        return Ok(None);
    }
    let (da, db) = (squared_edt(&sa, a.dims(), spacing), squared_edt(&sb, a.dims(), spacing));
    let mut d: Vec<f64> = sa.iter().zip(&db).filter(|(s, _)| **s).map(|(_, &d2)| d2.sqrt()).collect();
    d.extend(sb.iter().zip(&da).filter(|(s, _)| **s).map(|(_, &d2)| d2.sqrt()));
    Ok(Some(d))
}

/// HD95 and mean surface distance over the pooled directed distances.
pub fn surface_distances<T: Scalar>(
    a: &Volume<T>,
    b: &Volume<T>,
    spacing: [f64; 3],
) -> Result<Option<SurfaceDistances>> {
    let Some(mut d) = directed_surface_distances(a, b, spacing)? else { return Ok(None) };
    d.sort_by(f64::total_cmp);
    let msd = d.iter().sum::<f64>() / d.len() as f64;
    Ok(Some(SurfaceDistances { hd95: percentile_95(&d), msd, max: d[d.len() - 1] }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub dice: f64,
    /// Not applicable when either mask is empty.
    pub hd95: Option<f64>,
    pub mean_surface_distance: Option<f64>,
    /// Signed percentage; not applicable when the ground truth is empty.
    pub relative_volume_difference: Option<f64>,
}

pub fn evaluate_case<T: Scalar>(case_id: &str, pred: &Volume<T>, gt: &Volume<T>) -> Result<MetricsReport> {
    same_shape(pred, gt)?;
    let dice = dice_score(pred, gt)?;
    let dist = surface_distances(pred, gt, gt.spacing())?;
    let (np, ng) = (pred.foreground_count() as f64, gt.foreground_count() as f64);
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        dice,
        hd95: dist.map(|d| d.hd95),
        mean_surface_distance: dist.map(|d| d.msd),
        relative_volume_difference: (ng > 0.0).then(|| (np - ng) / ng * 100.0),
    })
}

/// Mask files in `dir` keyed by case id. When any file carries the label
/// suffix, only those files count (so a training directory holding images
/// and labels side by side works as a ground-truth directory).
pub fn list_masks(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("mhd") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path.clone()));
            }
        }
    }
    let suffixed = files.iter().any(|(s, _)| s.ends_with(LABEL_SUFFIX));
    let mut out: Vec<(String, PathBuf)> = files
        .into_iter()
        .filter(|(s, _)| !suffixed || s.ends_with(LABEL_SUFFIX))
        .map(|(s, p)| (s.strip_suffix(LABEL_SUFFIX).unwrap_or(&s).to_string(), p))
        .collect();
    out.sort();
    Ok(out)
}

/// Evaluates every case present in both directories; any case present in
/// only one of them is a usage error naming it.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<MetricsReport>> {
    let preds = list_masks(pred_dir)?;
    let gts = list_masks(gt_dir)?;
    let ids = |v: &[(String, PathBuf)]| v.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>();
    let (pid, gid) = (ids(&preds), ids(&gts));
    let no_pred: Vec<&String> = gid.iter().filter(|g| !pid.contains(g)).collect();
    let no_gt: Vec<&String> = pid.iter().filter(|p| !gid.contains(p)).collect();
    if !no_pred.is_empty() || !no_gt.is_empty() {
        let mut msg = String::from("prediction and ground-truth case lists differ;");
        if !no_pred.is_empty() {
            let _ = write!(msg, " missing predictions: {}", join(&no_pred));
        }
        if !no_gt.is_empty() {
            let _ = write!(msg, " missing ground truth: {}", join(&no_gt));
        }
        return Err(Error::Usage(msg));
    }
    if preds.is_empty() {
        return Err(Error::Usage(format!("no .mhd masks found in {}", pred_dir.display())));
    }
    preds
        .iter()
        .zip(&gts)
        .map(|((id, pp), (_, gp))| {
            let p = read_metaimage::<f64>(pp, VolumeKind::Label)?;
            let g = read_metaimage::<f64>(gp, VolumeKind::Label)?;
            if p.dims() != g.dims() {
                return Err(Error::Contract(format!("case {id}: prediction {:?} vs ground truth {:?}", p.dims(), g.dims())));
            }
            evaluate_case(id, &p, &g)
        })
        .collect()
}

fn join(v: &[&String]) -> String {
    v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

/// Mean and population standard deviation over the applicable values.
pub fn mean_std(values: impl Iterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

const COLUMNS: [&str; 5] = ["case", "dice", "hd95_mm", "msd_mm", "rvd_percent"];

fn columns(r: &MetricsReport) -> [Option<f64>; 4] {
    [Some(r.dice), r.hd95, r.mean_surface_distance, r.relative_volume_difference]
}

fn summary(reports: &[MetricsReport]) -> [[Option<f64>; 4]; 2] {
    let stats: [Option<(f64, f64)>; 4] = std::array::from_fn(|c| mean_std(reports.iter().map(|r| columns(r)[c])));
    [stats.map(|s| s.map(|s| s.0)), stats.map(|s| s.map(|s| s.1))]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// CSV: one row per case, then `mean` and `std` rows. Missing values are `NA`.
pub fn report_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![r.case_id.clone()];
        row.extend(columns(r).map(cell));
        w.write_record(&row).map_err(csv_err)?;
    }
    for (label, values) in ["mean", "std"].into_iter().zip(summary(reports)) {
        let mut row = vec![label.to_string()];
        row.extend(values.map(cell));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
}

/// Fixed-width table for terminals.
pub fn report_text(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.case_id.len()).max().unwrap_or(4).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>10}  {:>10}  {:>12}\n", "case", "dice", "hd95 (mm)", "msd (mm)", "rvd (%)");
    let line = |s: &mut String, id: &str, v: [Option<f64>; 4]| {
        let f = |v: Option<f64>, prec: usize| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.prec$}"));
        let _ = writeln!(s, "{id:<width$}  {:>8}  {:>10}  {:>10}  {:>12}", f(v[0], 4), f(v[1], 3), f(v[2], 3), f(v[3], 2));
    };
    for r in reports {
        line(&mut s, &r.case_id, columns(r));
    }
    let [mean, std] = summary(reports);
    line(&mut s, "mean", mean);
    line(&mut s, "std", std);
    s
}
