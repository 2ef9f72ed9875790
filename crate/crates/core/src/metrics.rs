//! Mode coverage, kernel density grids, and the per-iteration CSV log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::GaussianRingSpec;
use crate::error::{Error, Result};
use crate::objectives::GMutation;

/// Default HQ radius, in multiples of the mode standard deviation.
pub const DEFAULT_THRESHOLD_SIGMAS: f64 = 3.0;
/// A mode counts as covered once it holds this fraction of the samples.
pub const MODE_FLOOR_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub covered_modes: usize,
    pub hq_ratio: f64,
    pub per_mode_counts: Vec<usize>,
    pub total: usize,
}

impl ModeReport {
    /// Smallest per-mode count that marks a mode as covered for `n` samples.
    pub fn min_count(n: usize) -> usize {
        ((MODE_FLOOR_FRACTION * n as f64).ceil() as usize).max(1)
    }

    /// Number of modes holding at least `min_count` high-quality samples.
    pub fn covered_with_floor(&self, min_count: usize) -> usize {
        let floor = min_count.max(1);
        self.per_mode_counts.iter().filter(|&&c| c >= floor).count()
    }
}

/// Assigns each sample to its nearest ring center and counts it when it
/// lies within `threshold_sigmas * sigma` of that center.
pub fn mode_coverage(
    samples: &Tensor,
    spec: &GaussianRingSpec,
    threshold_sigmas: f64,
) -> Result<ModeReport> {
    let n = samples.rows();
    if samples.shape().len() != 2 || samples.cols() != 2 || n == 0 {
        return Err(Error::Contract(format!(
            "mode coverage needs a non-empty n x 2 batch, got {:?}",
            samples.shape()
        )));
    }
    if threshold_sigmas.is_nan() || threshold_sigmas <= 0.0 {
        return Err(Error::Contract("threshold must be positive".into()));
    }
    let centers = spec.centers();
    let limit = threshold_sigmas * spec.sigma;
    let mut counts = vec![0usize; centers.len()];
    let mut hq = 0usize;
    for i in 0..n {
        let p = samples.row(i);
        let (k, d2) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("ring has at least one mode");
        if d2.sqrt() <= limit {
            counts[k] += 1;
            hq += 1;
        }
    }
    let mut report = ModeReport {
        covered_modes: 0,
        hq_ratio: hq as f64 / n as f64,
        per_mode_counts: counts,
        total: n,
    };
    report.covered_modes = report.covered_with_floor(ModeReport::min_count(n));
    Ok(report)
}

/// Gaussian kernel density on a square grid of cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
    pub bandwidth: f64,
    /// Row-major by y then x: `density[iy * resolution + ix]`.
    pub density: Vec<f64>,
}

impl KdeGrid {
    pub fn cell_size(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell_size()
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.density[iy * self.resolution + ix]
    }

    /// `sum density * cell_area`.
    pub fn mass(&self) -> f64 {
        let h = self.cell_size();
        self.density.iter().sum::<f64>() * h * h
    }

    /// Writes `x,y,density` rows without a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for iy in 0..self.resolution {
            for ix in 0..self.resolution {
                w.write_record(&[
                    self.coord(ix).to_string(),
                    self.coord(iy).to_string(),
                    self.at(ix, iy).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<kde csv>", e))?;
        Ok(())
    }
}

/// Evaluates an isotropic Gaussian KDE at the cell centers of a
/// `resolution x resolution` grid over `[-half_width, half_width]^2`,
/// normalized so that the grid carries unit mass.
pub fn kde_grid(
    samples: &Tensor,
    resolution: usize,
    bandwidth: f64,
    half_width: f64,
) -> Result<KdeGrid> {
    let n = samples.rows();
    if samples.shape().len() != 2 || samples.cols() != 2 || n == 0 {
        return Err(Error::Contract("kde needs a non-empty n x 2 batch".into()));
    }
    if bandwidth.is_nan()
        || bandwidth <= 0.0
        || resolution == 0
        || half_width.is_nan()
        || half_width <= 0.0
    {
        return Err(Error::Contract(
            "kde needs bandwidth > 0, resolution > 0, extent > 0".into(),
        ));
    }
    let mut grid = KdeGrid {
        lo: -half_width,
        hi: half_width,
        resolution,
        bandwidth,
        density: vec![0.0; resolution * resolution],
    };
    let coords: Vec<f64> = (0..resolution).map(|i| grid.coord(i)).collect();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    // separable kernel: exp(-(dx^2 + dy^2)/2h^2) = ex * ey
    let mut ex = vec![0.0; resolution];
    let mut ey = vec![0.0; resolution];
    for s in 0..n {
        let p = samples.row(s);
        for i in 0..resolution {
            ex[i] = (-(coords[i] - p[0]).powi(2) * inv).exp();
            ey[i] = (-(coords[i] - p[1]).powi(2) * inv).exp();
        }
        for (iy, &wy) in ey.iter().enumerate() {
            if wy == 0.0 {
                continue;
            }
            let row = &mut grid.density[iy * resolution..(iy + 1) * resolution];
            for (d, &wx) in row.iter_mut().zip(&ex) {
                *d += wx * wy;
            }
        }
    }
    let mass = grid.mass();
    if mass > 0.0 {
        grid.density.iter_mut().for_each(|d| *d /= mass);
    } else {
        // every kernel fell outside the grid; spread mass uniformly
        let area = (2.0 * half_width).powi(2);
        grid.density.iter_mut().for_each(|d| *d = 1.0 / area);
    }
    Ok(grid)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub t_wall_s: Option<f64>,
    pub g_fit: Vec<f64>,
    pub g_mut: Vec<GMutation>,
    pub g_survivor_muts: Vec<GMutation>,
    pub d_fit: Vec<f64>,
    pub d_survivor_idx: Vec<usize>,
    pub covered_modes: Option<usize>,
    pub hq_ratio: Option<f64>,
    pub d_grad_norm_mean: f64,
    /// Training losses of every generator offspring (not written to CSV).
    #[serde(skip)]
    pub g_losses: Vec<f64>,
    /// Training losses of every discriminator offspring across all inner
    /// rounds (not written to CSV).
    #[serde(skip)]
    pub d_losses: Vec<f64>,
}

/// Column names for a run with `g_offspring = J*M` and
/// `d_offspring = I*N`.
pub fn csv_header(g_offspring: usize, d_offspring: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string(), "t_wall_s".to_string()];
    h.extend((1..=g_offspring).map(|i| format!("g_fit_{i}")));
    h.extend((1..=g_offspring).map(|i| format!("g_mut_{i}")));
    h.push("g_survivor_muts".into());
    h.extend((1..=d_offspring).map(|i| format!("d_fit_{i}")));
    h.push("d_survivor_idx".into());
    h.extend(["covered_modes", "hq_ratio", "d_grad_norm_mean"].map(String::from));
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> Vec<String> {
        let mut row = vec![self.iteration.to_string(), opt(self.t_wall_s)];
        row.extend(self.g_fit.iter().map(f64::to_string));
        row.extend(self.g_mut.iter().map(GMutation::to_string));
        row.push(join(&self.g_survivor_muts));
        row.extend(self.d_fit.iter().map(f64::to_string));
        row.push(join(&self.d_survivor_idx));
        row.push(opt(self.covered_modes));
        row.push(opt(self.hq_ratio));
        row.push(self.d_grad_norm_mean.to_string());
        row
    }

    /// Parses a row written by [`MetricsRecord::to_csv_row`].
    pub fn from_csv_row(row: &[String], g_offspring: usize, d_offspring: usize) -> Result<Self> {
        let want = 2 + 2 * g_offspring + 1 + d_offspring + 4;
        if row.len() != want {
            return Err(Error::Contract(format!(
                "metrics row has {} fields, expected {want}",
                row.len()
            )));
        }
        let bad = |what: &str, v: &str| Error::Contract(format!("cannot parse {what} from `{v}`"));
        let f = |s: &String| s.parse::<f64>().map_err(|_| bad("number", s));
        let opt_f = |s: &String| {
            if s.is_empty() {
                Ok(None)
            } else {
                f(s).map(Some)
            }
        };
        let split = |s: &String| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(';').map(String::from).collect()
            }
        };
        let mut it = row.iter();
        let mut next = || it.next().expect("length checked");
        let iteration = next().parse().map_err(|_| bad("iteration", &row[0]))?;
        let t_wall_s = opt_f(next())?;
        let g_fit = (0..g_offspring)
            .map(|_| f(next()))
            .collect::<Result<Vec<_>>>()?;
        let g_mut = (0..g_offspring)
            .map(|_| {
                let s = next();
                s.parse().map_err(|_| bad("mutation", s))
            })
            .collect::<Result<Vec<_>>>()?;
        let g_survivor_muts = split(next())
            .iter()
            .map(|s| s.parse().map_err(|_| bad("mutation", s)))
            .collect::<Result<Vec<_>>>()?;
        let d_fit = (0..d_offspring)
            .map(|_| f(next()))
            .collect::<Result<Vec<_>>>()?;
        let d_survivor_idx = split(next())
            .iter()
            .map(|s| s.parse().map_err(|_| bad("index", s)))
            .collect::<Result<Vec<_>>>()?;
        let cm = next();
        let covered_modes = if cm.is_empty() {
            None
        } else {
            Some(cm.parse().map_err(|_| bad("covered_modes", cm))?)
        };
        let hq_ratio = opt_f(next())?;
        let d_grad_norm_mean = f(next())?;
        Ok(Self {
            iteration,
            t_wall_s,
            g_fit,
            g_mut,
            g_survivor_muts,
            d_fit,
            d_survivor_idx,
            covered_modes,
            hq_ratio,
            d_grad_norm_mean,
            g_losses: Vec::new(),
            d_losses: Vec::new(),
        })
    }
}

/// Receives training records as they are produced.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl<F: FnMut(&MetricsRecord) -> Result<()>> MetricsSink for F {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self(record)
    }
}

/// Collects every record in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink for MemorySink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Writes the fixed-schema CSV log, flushing after every row.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
    width: usize,
    last_iteration: Option<usize>,
}

impl<W: Write> CsvSink<W> {
    /// Writes the header immediately.
    pub fn new(out: W, g_offspring: usize, d_offspring: usize) -> Result<Self> {
        let header = csv_header(g_offspring, d_offspring);
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        writer.write_record(&header)?;
        writer.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        Ok(Self {
            writer,
            width: header.len(),
            last_iteration: None,
        })
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::io("<metrics csv>", std::io::Error::other(e.to_string())))
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        if self
            .last_iteration
            .is_some_and(|last| record.iteration <= last)
        {
            return Err(Error::Contract("metrics iterations must increase".into()));
        }
        let row = record.to_csv_row();
        if row.len() != self.width {
            return Err(Error::Contract(format!(
                "record has {} columns, log has {}",
                row.len(),
                self.width
            )));
        }
        self.writer.write_record(&row)?;
        self.writer
            .flush()
            .map_err(|e| Error::io("<metrics csv>", e))?;
        self.last_iteration = Some(record.iteration);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at_centers(spec: &GaussianRingSpec, per_mode: &[usize]) -> Tensor {
        let c = spec.centers();
        let rows: Vec<[f64; 2]> = per_mode
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(c[k], n))
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn exact_centers_cover_everything() {
        let spec = GaussianRingSpec::default();
        let r = mode_coverage(&at_centers(&spec, &[64; 8]), &spec, 3.0).unwrap();
        assert_eq!(r.covered_modes, 8);
        assert_eq!(r.hq_ratio, 1.0);
        assert_eq!(r.per_mode_counts, vec![64; 8]);
    }

    #[test]
    fn collapse_covers_one_mode() {
        let spec = GaussianRingSpec::default();
        let r = mode_coverage(&at_centers(&spec, &[0, 0, 0, 512, 0, 0, 0, 0]), &spec, 3.0).unwrap();
        assert_eq!(r.covered_modes, 1);
    }

    #[test]
    fn samples_beyond_threshold_do_not_count() {
        let spec = GaussianRingSpec::default();
        let rows: Vec<[f64; 2]> = spec
            .centers()
            .iter()
            .map(|c| {
                let r = spec.radius + 4.0 * spec.sigma;
                let s = r / spec.radius;
                [c[0] * s, c[1] * s]
            })
            .collect();
        let r = mode_coverage(&Tensor::from_rows(&rows).unwrap(), &spec, 3.0).unwrap();
        assert_eq!(r.hq_ratio, 0.0);
        assert_eq!(r.covered_modes, 0);
    }

    #[test]
    fn one_percent_floor() {
        let spec = GaussianRingSpec::default();
        // 5 of 512 is below ceil(5.12) = 6
        let r = mode_coverage(&at_centers(&spec, &[507, 5, 0, 0, 0, 0, 0, 0]), &spec, 3.0).unwrap();
        assert_eq!(r.covered_modes, 1);
        let r = mode_coverage(&at_centers(&spec, &[506, 6, 0, 0, 0, 0, 0, 0]), &spec, 3.0).unwrap();
        assert_eq!(r.covered_modes, 2);
    }

    #[test]
    fn bad_inputs() {
        let spec = GaussianRingSpec::default();
        assert!(mode_coverage(&Tensor::zeros(vec![0, 2]), &spec, 3.0).is_err());
        assert!(mode_coverage(&Tensor::zeros(vec![3, 2]), &spec, 0.0).is_err());
        assert!(kde_grid(&Tensor::zeros(vec![3, 2]), 10, 0.0, 2.5).is_err());
    }

    #[test]
    fn kde_single_sample_peaks_at_center() {
        let g = kde_grid(&Tensor::zeros(vec![1, 2]), 21, 0.3, 2.5).unwrap();
        let (imax, _) = g
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(imax, 10 * 21 + 10);
        assert!((g.mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kde_two_samples_two_peaks() {
        let x = Tensor::from_rows(&[[-1.5, 0.0], [1.5, 0.0]]).unwrap();
        let g = kde_grid(&x, 61, 0.1, 2.5).unwrap();
        let mid = 30;
        let mut peaks = 0;
        for ix in 1..60 {
            let v = g.at(ix, mid);
            if v > g.at(ix - 1, mid)
                && v > g.at(ix + 1, mid)
                && v > g.at(ix, mid - 1)
                && v > g.at(ix, mid + 1)
            {
                peaks += 1;
            }
        }
        assert_eq!(peaks, 2);
    }

    #[test]
    fn kde_rotation_symmetry() {
        let x = Tensor::from_rows(&[[1.0, 0.3], [-0.3, 1.0], [-1.0, -0.3], [0.3, -1.0]]).unwrap();
        let n = 40;
        let g = kde_grid(&x, n, 0.2, 2.5).unwrap();
        // (x, y) -> (-y, x) maps cell (ix, iy) to (n-1-iy, ix)
        for iy in 0..n {
            for ix in 0..n {
                assert!((g.at(ix, iy) - g.at(n - 1 - iy, ix)).abs() < 1e-9);
            }
        }
    }

    fn record(iteration: usize) -> MetricsRecord {
        MetricsRecord {
            iteration,
            t_wall_s: Some(0.125),
            g_fit: vec![0.1 + 1.0 / 3.0, -2.0f64.sqrt(), 1e-300],
            g_mut: GMutation::ALL.to_vec(),
            g_survivor_muts: vec![GMutation::Heuristic],
            d_fit: vec![std::f64::consts::PI, -0.0],
            d_survivor_idx: vec![1],
            covered_modes: Some(7),
            hq_ratio: Some(0.8125),
            d_grad_norm_mean: 12.000000000000002,
            g_losses: Vec::new(),
            d_losses: Vec::new(),
        }
    }

    #[test]
    fn csv_header_only_and_rows() {
        let sink = CsvSink::new(Vec::new(), 3, 2).unwrap();
        let text = String::from_utf8(sink.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            text.trim_end(),
            "iter,t_wall_s,g_fit_1,g_fit_2,g_fit_3,g_mut_1,g_mut_2,g_mut_3,g_survivor_muts,\
             d_fit_1,d_fit_2,d_survivor_idx,covered_modes,hq_ratio,d_grad_norm_mean"
        );

        let mut sink = CsvSink::new(Vec::new(), 3, 2).unwrap();
        sink.record(&record(1)).unwrap();
        sink.record(&record(2)).unwrap();
        assert!(sink.record(&record(2)).is_err());
        let text = String::from_utf8(sink.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn csv_round_trip_full_precision() {
        let mut sink = CsvSink::new(Vec::new(), 3, 2).unwrap();
        sink.record(&record(5)).unwrap();
        let bytes = sink.into_inner().unwrap();
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let row: Vec<String> = rdr
            .records()
            .next()
            .unwrap()
            .unwrap()
            .iter()
            .map(String::from)
            .collect();
        let back = MetricsRecord::from_csv_row(&row, 3, 2).unwrap();
        let want = record(5);
        assert_eq!(back, want);
        for (a, b) in back.g_fit.iter().zip(&want.g_fit) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn adding_a_sample_never_lowers_coverage(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60),
            extra in (-3.0f64..3.0, -3.0f64..3.0),
            snap in 0usize..8,
            use_snap in any::<bool>(),
        ) {
            let spec = GaussianRingSpec { sigma: 0.3, ..Default::default() };
            let mut rows: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let before = mode_coverage(&Tensor::from_rows(&rows).unwrap(), &spec, 3.0).unwrap();
            rows.push(if use_snap { spec.centers()[snap] } else { [extra.0, extra.1] });
            let after = mode_coverage(&Tensor::from_rows(&rows).unwrap(), &spec, 3.0).unwrap();
            for (a, b) in after.per_mode_counts.iter().zip(&before.per_mode_counts) {
                prop_assert!(a >= b);
            }
            for floor in [1usize, 2, 5] {
                prop_assert!(after.covered_with_floor(floor) >= before.covered_with_floor(floor));
            }
            prop_assert!(after.per_mode_counts.iter().sum::<usize>() <= after.total);
        }
    }
}
