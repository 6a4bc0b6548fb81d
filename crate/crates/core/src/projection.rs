//! Two-dimensional views of the non-implausible region.
//!
//! For a pair of axes `(i, j)` each grid cell fixes `x_i, x_j` at the cell
//! centre and samples the hidden coordinates. The minimized-implausibility
//! grid records the smallest statistic seen; the optical-depth grid records
//! the fraction of hidden samples inside the region. Both grids of a pair are
//! computed from the same hidden samples.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::latin_hypercube;
use crate::error::{Error, Result};
use crate::implausibility::Statistic;
use crate::io::{fmt_f64, write_atomic};
use crate::seed::{self, tag};
use crate::wave::{ChainView, Region};

/// Hidden samples are drawn in Latin hypercube blocks of this size, so a
/// larger sample count always extends a smaller one.
pub const HIDDEN_BLOCK: usize = 64;
pub const DEFAULT_RESOLUTION: usize = 40;
pub const DEFAULT_HIDDEN: usize = 500;

/// A region that can also report an implausibility statistic.
pub trait Scored: Region {
    fn statistic(&self, x: &[f64], stat: Statistic) -> f64;

    /// Any value `<=` [`Scored::statistic`] at `x`; used to skip exact scoring.
    fn statistic_lower_bound(&self, _x: &[f64], _stat: Statistic) -> f64 {
        0.0
    }
}

/// Statistics come from the last wave of the view; an empty view scores 0.
impl Scored for ChainView<'_> {
    fn statistic(&self, x: &[f64], stat: Statistic) -> f64 {
        self.last().map_or(0.0, |w| w.statistic(x, stat))
    }

    fn statistic_lower_bound(&self, x: &[f64], stat: Statistic) -> f64 {
        self.last().map_or(0.0, |w| w.statistic_lower_bound(x, stat))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    MinImplausibility,
    OpticalDepth,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::MinImplausibility => "min_implausibility",
            GridKind::OpticalDepth => "optical_depth",
        }
    }
}

/// `values[row][col]`: rows follow `x_j`, columns follow `x_i`, both from −1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrid {
    pub kind: GridKind,
    pub axes: (usize, usize),
    pub resolution: usize,
    pub n_hidden: usize,
    pub statistic: Option<Statistic>,
    pub values: Vec<Vec<f64>>,
}

impl ProjectionGrid {
    /// Centre of cell `c` along an axis.
    pub fn cell_center(c: usize, resolution: usize) -> f64 {
        -1.0 + (2 * c + 1) as f64 / resolution as f64
    }

    pub fn mean(&self) -> f64 {
        let n = (self.resolution * self.resolution) as f64;
        self.values.iter().flatten().sum::<f64>() / n
    }

    /// The same grid with the axes swapped.
    pub fn transposed(&self) -> Self {
        let r = self.resolution;
        ProjectionGrid {
            axes: (self.axes.1, self.axes.0),
            values: (0..r).map(|a| (0..r).map(|b| self.values[b][a]).collect()).collect(),
            ..self.clone()
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# kind={}", self.kind.name())?;
        writeln!(out, "# axes={},{}", self.axes.0, self.axes.1)?;
        writeln!(out, "# resolution={}", self.resolution)?;
        writeln!(out, "# n_hidden={}", self.n_hidden)?;
        if let Some(s) = self.statistic {
            writeln!(out, "# statistic={}", s.name())?;
        }
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kind = None;
        let mut axes = None;
        let mut resolution = None;
        let mut n_hidden = 0;
        let mut statistic = None;
        let mut values = Vec::new();
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                let (k, v) = h.split_once('=').ok_or_else(|| Error::parse(path, format!("bad header `{h}`")))?;
                match k {
                    "kind" => {
                        kind = match v {
                            "min_implausibility" => Some(GridKind::MinImplausibility),
                            "optical_depth" => Some(GridKind::OpticalDepth),
                            _ => return Err(Error::parse(path, format!("unknown kind `{v}`"))),
                        }
                    }
                    "axes" => {
                        let (a, b) = v.split_once(',').ok_or_else(|| Error::parse(path, "axes need i,j"))?;
                        let p = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::parse(path, e));
                        axes = Some((p(a)?, p(b)?));
                    }
                    "resolution" => resolution = Some(v.parse().map_err(|e| Error::parse(path, e))?),
                    "n_hidden" => n_hidden = v.parse().map_err(|e| Error::parse(path, e))?,
                    "statistic" => statistic = Statistic::parse(v),
                    _ => {}
                }
            } else if !line.trim().is_empty() {
                values.push(
                    line.split_whitespace()
                        .map(|t| crate::io::parse_f64(t, path))
                        .collect::<Result<Vec<f64>>>()?,
                );
            }
        }
        let resolution: usize = resolution.ok_or_else(|| Error::parse(path, "missing resolution"))?;
        if values.len() != resolution || values.iter().any(|r| r.len() != resolution) {
            return Err(Error::parse(path, "grid shape does not match resolution"));
        }
        Ok(ProjectionGrid {
            kind: kind.ok_or_else(|| Error::parse(path, "missing kind"))?,
            axes: axes.ok_or_else(|| Error::parse(path, "missing axes"))?,
            resolution,
            n_hidden,
            statistic,
            values,
        })
    }
}

/// Grid settings shared by both projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSettings {
    pub resolution: usize,
    pub n_hidden: usize,
    pub statistic: Statistic,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            resolution: DEFAULT_RESOLUTION,
            n_hidden: DEFAULT_HIDDEN,
            statistic: Statistic::I2M,
        }
    }
}

impl ProjectionSettings {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::config(format!("{key}.resolution"), "must be >= 1"));
        }
        if self.n_hidden == 0 {
            return Err(Error::config(format!("{key}.n_hidden"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Hidden-coordinate samples for one cell: the first `n` points of a
/// sequence of independent Latin hypercube blocks.
fn hidden_samples(hidden_dim: usize, n: usize, seed: u64, cell: u64) -> Vec<Vec<f64>> {
    if hidden_dim == 0 {
        return vec![Vec::new()];
    }
    let blocks = n.div_ceil(HIDDEN_BLOCK);
    (0..blocks)
        .flat_map(|b| latin_hypercube(HIDDEN_BLOCK, hidden_dim, seed::derive(seed, &[cell, b as u64])).points)
        .take(n)
        .collect()
}

fn check_axes(d: usize, i: usize, j: usize) -> Result<()> {
    if i == j {
        return Err(Error::config("projection.axes", "the two axes must differ"));
    }
    if i >= d || j >= d {
        return Err(Error::config("projection.axes", format!("axis out of range for dimension {d}")));
    }
    Ok(())
}

/// Minimized implausibility and optical depth over the `(i, j)` plane,
/// computed from the same hidden samples.
pub fn project_pair<S: Scored + ?Sized>(
    scope: &S,
    axes: (usize, usize),
    settings: &ProjectionSettings,
    seed: u64,
) -> Result<(ProjectionGrid, ProjectionGrid)> {
    settings.validate("projection")?;
    let d = scope.dimension();
    let (i, j) = axes;
    check_axes(d, i, j)?;
    let r = settings.resolution;
    let stat = settings.statistic;
    let hidden: Vec<usize> = (0..d).filter(|&k| k != i && k != j).collect();
    let seed = seed::derive(seed, &[tag::PROJECTION]);
    let cells: Vec<(f64, f64)> = (0..r * r)
        .into_par_iter()
        .map(|cell| {
            let (row, col) = (cell / r, cell % r);
            let samples = hidden_samples(hidden.len(), settings.n_hidden, seed, cell as u64);
            let mut x = vec![0.0; d];
            x[i] = ProjectionGrid::cell_center(col, r);
            x[j] = ProjectionGrid::cell_center(row, r);
            let mut inside = 0usize;
            let mut bounds = Vec::with_capacity(samples.len());
            for (s, h) in samples.iter().enumerate() {
                for (k, v) in hidden.iter().zip(h) {
                    x[*k] = *v;
                }
                if scope.contains(&x) {
                    inside += 1;
                }
                bounds.push((scope.statistic_lower_bound(&x, stat), s));
            }
            // Exact scoring in order of increasing bound, stopping once no
            // remaining sample can beat the best value found.
            bounds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut best = f64::INFINITY;
            for (lb, s) in bounds {
                if lb >= best {
                    break;
                }
                for (k, v) in hidden.iter().zip(&samples[s]) {
                    x[*k] = *v;
                }
                best = best.min(scope.statistic(&x, stat));
            }
            (best, inside as f64 / samples.len() as f64)
        })
        .collect();
    let grid = |kind, pick: fn(&(f64, f64)) -> f64| ProjectionGrid {
        kind,
        axes,
        resolution: r,
        n_hidden: settings.n_hidden,
        statistic: (kind == GridKind::MinImplausibility).then_some(stat),
        values: cells.chunks(r).map(|row| row.iter().map(pick).collect()).collect(),
    };
    Ok((
        grid(GridKind::MinImplausibility, |c| c.0),
        grid(GridKind::OpticalDepth, |c| c.1),
    ))
}

pub fn min_implausibility_projection<S: Scored + ?Sized>(
    scope: &S,
    axes: (usize, usize),
    settings: &ProjectionSettings,
    seed: u64,
) -> Result<ProjectionGrid> {
    project_pair(scope, axes, settings, seed).map(|p| p.0)
}

pub fn optical_depth<S: Scored + ?Sized>(
    scope: &S,
    axes: (usize, usize),
    settings: &ProjectionSettings,
    seed: u64,
) -> Result<ProjectionGrid> {
    project_pair(scope, axes, settings, seed).map(|p| p.1)
}

/// One entry of the pairs-report manifest: `row`/`col` place the grid in the
/// matrix layout (minimized implausibility below the diagonal, optical depth
/// above).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: GridKind,
    pub axis_i: usize,
    pub axis_j: usize,
    pub row: usize,
    pub col: usize,
}

/// Writes one grid per ordered pair of `axes` plus `manifest.csv` into `dir`.
pub fn projection_pairs_report<S: Scored + ?Sized>(
    scope: &S,
    axes: &[usize],
    settings: &ProjectionSettings,
    seed: u64,
    names: &[String],
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if axes.len() < 2 {
        return Err(Error::config("projection.axes", "need at least two axes"));
    }
    let mut entries = Vec::new();
    for (a, &p) in axes.iter().enumerate() {
        for (b, &q) in axes.iter().enumerate().skip(a + 1) {
            let (min_pq, depth_pq) = project_pair(scope, (p, q), settings, seed)?;
            let below = min_pq.transposed();
            for (grid, row, col) in [(depth_pq, a, b), (below, b, a)] {
                let file = format!("{}_{}_{}.txt", grid.kind.name(), grid.axes.0, grid.axes.1);
                grid.save(&dir.join(&file))?;
                entries.push(ManifestEntry {
                    file,
                    kind: grid.kind,
                    axis_i: grid.axes.0,
                    axis_j: grid.axes.1,
                    row,
                    col,
                });
            }
        }
    }
    write_manifest(&entries, names, &dir.join("manifest.csv"))?;
    Ok(entries)
}

fn write_manifest(entries: &[ManifestEntry], names: &[String], path: &PathBuf) -> Result<()> {
    let err = |e: csv::Error| Error::parse(path, e);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "kind", "axis_i", "axis_j", "name_i", "name_j", "row", "col"])
        .map_err(err)?;
    let name = |k: usize| names.get(k).cloned().unwrap_or_else(|| format!("x{k}"));
    for e in entries {
        w.write_record([
            e.file.clone(),
            e.kind.name().to_string(),
            e.axis_i.to_string(),
            e.axis_j.to_string(),
            name(e.axis_i),
            name(e.axis_j),
            e.row.to_string(),
            e.col.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave::FnRegion;

    /// Statistic `x_0² + x_1²`; membership `x_0 > 0`.
    struct Bowl {
        d: usize,
    }

    impl Region for Bowl {
        fn dimension(&self) -> usize {
            self.d
        }

        fn contains(&self, x: &[f64]) -> bool {
            x[0] > 0.0
        }
    }

    impl Scored for Bowl {
        fn statistic(&self, x: &[f64], _: Statistic) -> f64 {
            x[0] * x[0] + x[1] * x[1]
        }
    }

    /// Statistic depends on hidden coordinates too.
    struct Hidden;

    impl Region for Hidden {
        fn dimension(&self) -> usize {
            4
        }

        fn contains(&self, x: &[f64]) -> bool {
            x[2] + x[3] < x[0]
        }
    }

    impl Scored for Hidden {
        fn statistic(&self, x: &[f64], _: Statistic) -> f64 {
            (x[0] - x[2]).powi(2) + (x[1] * x[3] - 0.3).abs()
        }
    }

    fn settings(r: usize, n: usize) -> ProjectionSettings {
        ProjectionSettings {
            resolution: r,
            n_hidden: n,
            statistic: Statistic::I2M,
        }
    }

    #[test]
    fn analytic_surface_without_hidden_dependence() {
        let (min, depth) = project_pair(&Bowl { d: 5 }, (0, 1), &settings(8, 20), 1).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let (xi, xj) = (ProjectionGrid::cell_center(col, 8), ProjectionGrid::cell_center(row, 8));
                assert_eq!(min.values[row][col], xi * xi + xj * xj);
                assert_eq!(depth.values[row][col], if xi > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn vacuous_region_has_unit_depth() {
        struct All;
        impl Region for All {
            fn dimension(&self) -> usize {
                3
            }
            fn contains(&self, _: &[f64]) -> bool {
                true
            }
        }
        impl Scored for All {
            fn statistic(&self, _: &[f64], _: Statistic) -> f64 {
                1.0
            }
        }
        let g = optical_depth(&All, (2, 0), &settings(5, 10), 3).unwrap();
        assert!(g.values.iter().flatten().all(|v| *v == 1.0));
    }

    #[test]
    fn more_hidden_samples_never_raise_the_minimum() {
        let a = min_implausibility_projection(&Hidden, (0, 1), &settings(6, 50), 9).unwrap();
        let b = min_implausibility_projection(&Hidden, (0, 1), &settings(6, 300), 9).unwrap();
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (va, vb) in ra.iter().zip(rb) {
                assert!(vb <= va);
            }
        }
    }

    #[test]
    fn depth_positive_implies_min_below_cutoff() {
        struct Cut;
        impl Region for Cut {
            fn dimension(&self) -> usize {
                4
            }
            fn contains(&self, x: &[f64]) -> bool {
                Hidden.statistic(x, Statistic::IM) <= 0.4
            }
        }
        impl Scored for Cut {
            fn statistic(&self, x: &[f64], s: Statistic) -> f64 {
                Hidden.statistic(x, s)
            }
        }
        let (min, depth) = project_pair(&Cut, (1, 3), &settings(10, 100), 2).unwrap();
        for (rm, rd) in min.values.iter().zip(&depth.values) {
            for (m, d) in rm.iter().zip(rd) {
                assert!((0.0..=1.0).contains(d) && *m >= 0.0);
                if *d > 0.0 {
                    assert!(*m <= 0.4);
                }
            }
        }
    }

    #[test]
    fn grids_are_deterministic_and_round_trip() {
        let (a, _) = project_pair(&Hidden, (3, 1), &settings(4, 70), 5).unwrap();
        let (b, _) = project_pair(&Hidden, (3, 1), &settings(4, 70), 5).unwrap();
        assert_eq!(a, b);
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("g.txt");
        a.save(&p).unwrap();
        assert_eq!(ProjectionGrid::load(&p).unwrap(), a);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# kind=min_implausibility\n# axes=3,1\n# resolution=4\n"));
    }

    #[test]
    fn pairs_report_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let region = Bowl { d: 8 };
        let two = projection_pairs_report(&region, &[0, 1], &settings(3, 4), 1, &[], tmp.path()).unwrap();
        assert_eq!(two.len(), 2);
        let dir7 = tmp.path().join("seven");
        let seven = projection_pairs_report(&region, &[0, 1, 2, 3, 4, 5, 6], &settings(2, 2), 1, &[], &dir7).unwrap();
        assert_eq!(seven.len(), 42);
        let min_count = seven.iter().filter(|e| e.kind == GridKind::MinImplausibility).count();
        assert_eq!(min_count, 21);
        assert!(seven.iter().all(|e| (e.kind == GridKind::MinImplausibility) == (e.row > e.col)));
        let manifest = std::fs::read_to_string(dir7.join("manifest.csv")).unwrap();
        let mut files: Vec<&str> = manifest.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(files.len(), 42);
        files.sort_unstable();
        files.dedup();
        assert_eq!(files.len(), 42);
        let on_disk = std::fs::read_dir(&dir7).unwrap().count();
        assert_eq!(on_disk, 43);
        assert!(projection_pairs_report(&region, &[0], &settings(2, 2), 1, &[], tmp.path()).is_err());
    }

    #[test]
    fn rejects_equal_axes() {
        let r = FnRegion::new(3, |_: &[f64]| true);
        struct W<'a, F>(&'a FnRegion<F>);
        impl<F: Fn(&[f64]) -> bool + Sync> Region for W<'_, F> {
            fn dimension(&self) -> usize {
                self.0.dimension()
            }
            fn contains(&self, x: &[f64]) -> bool {
                self.0.contains(x)
            }
        }
        impl<F: Fn(&[f64]) -> bool + Sync> Scored for W<'_, F> {
            fn statistic(&self, _: &[f64], _: Statistic) -> f64 {
                0.0
            }
        }
        assert!(optical_depth(&W(&r), (1, 1), &settings(2, 2), 0).is_err());
    }
}
