//! Per-AU spatial attention maps built from facial landmarks.
//!
//! Each AU selects a handful of landmarks (optionally displaced), an ellipse
//! is fitted to them from second moments, rasterized on the feature grid,
//! blurred with a truncated Gaussian and rescaled to a peak of exactly one.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::Scalar;

pub const NUM_LANDMARKS: usize = 68;
/// Side of the attention / feature grid.
pub const GRID: usize = 14;
/// Gaussian width in grid cells.
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Default region assignments shipped with the crate.
pub const AU_REGIONS_K8: &str = include_str!("../data/au_regions_k8.csv");
pub const AU_REGIONS_K12: &str = include_str!("../data/au_regions_k12.csv");

/// 68 landmarks in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::contract(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if let Some((i, p)) = points
            .iter()
            .enumerate()
            .find(|(_, (x, y))| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return Err(Error::contract(format!(
                "landmark {i} at {p:?} lies outside the unit square"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Mirrors about the vertical center line (`x ← 1 − x`).
    pub fn flipped(&self) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| (1.0 - x, y)).collect(),
        }
    }

    /// Translates every point; fails if any leaves the unit square.
    pub fn shifted(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.points.iter().map(|&(x, y)| (x + dx, y + dy)).collect())
    }
}

/// Which landmarks define the region of one AU.
#[derive(Clone, Debug, PartialEq)]
pub struct AuRegionSpec {
    pub au_index: usize,
    pub landmark_ids: Vec<usize>,
    pub offset: Option<(f64, f64)>,
}

impl AuRegionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.landmark_ids.is_empty() {
            return Err(Error::contract(format!(
                "AU {} selects no landmarks",
                self.au_index
            )));
        }
        if let Some(&bad) = self.landmark_ids.iter().find(|&&i| i >= NUM_LANDMARKS) {
            return Err(Error::contract(format!(
                "AU {} references landmark {bad} (valid: 0..{NUM_LANDMARKS})",
                self.au_index
            )));
        }
        Ok(())
    }

    /// Selected landmarks after applying the offset, clamped to the unit square.
    pub fn anchor_points(&self, landmarks: &LandmarkSet) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let (dx, dy) = self.offset.unwrap_or((0.0, 0.0));
        Ok(self
            .landmark_ids
            .iter()
            .map(|&i| {
                let (x, y) = landmarks.points[i];
                ((x + dx).clamp(0.0, 1.0), (y + dy).clamp(0.0, 1.0))
            })
            .collect())
    }
}

/// Parses the region CSV: `au_index, landmark_ids, dx, dy` with
/// semicolon-separated ids and blank offsets meaning "none".
pub fn parse_region_specs(text: &str, origin: &str) -> Result<Vec<AuRegionSpec>> {
    let table = io::parse_csv(text, origin)?;
    let want = ["au_index", "landmark_ids", "dx", "dy"];
    if table.header != want {
        return Err(Error::parse(
            origin,
            format!("header must be {want:?}, got {:?}", table.header),
        ));
    }
    let mut specs = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let au_index = io::parse_usize(&row[0], origin)?;
        let landmark_ids = row[1]
            .split(';')
            .map(|s| io::parse_usize(s.trim(), origin))
            .collect::<Result<Vec<_>>>()?;
        let offset = match (row[2].is_empty(), row[3].is_empty()) {
            (true, true) => None,
            _ => Some((
                io::parse_f64(if row[2].is_empty() { "0" } else { &row[2] }, origin)?,
                io::parse_f64(if row[3].is_empty() { "0" } else { &row[3] }, origin)?,
            )),
        };
        let spec = AuRegionSpec {
            au_index,
            landmark_ids,
            offset,
        };
        spec.validate()?;
        specs.push(spec);
    }
    for (k, s) in specs.iter().enumerate() {
        if s.au_index != k {
            return Err(Error::parse(
                origin,
                format!("row {k} has au_index {}; rows must be ordered 0..K", s.au_index),
            ));
        }
    }
    Ok(specs)
}

pub fn read_region_specs(path: &Path) -> Result<Vec<AuRegionSpec>> {
    parse_region_specs(&io::read_to_string(path)?, &path.display().to_string())
}

pub fn format_region_specs(specs: &[AuRegionSpec]) -> String {
    let mut out = String::from("au_index,landmark_ids,dx,dy\n");
    for s in specs {
        let ids: Vec<String> = s.landmark_ids.iter().map(usize::to_string).collect();
        let (dx, dy) = match s.offset {
            Some((dx, dy)) => (io::fmt_f64(dx), io::fmt_f64(dy)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{}", s.au_index, ids.join(";"), dx, dy);
    }
    out
}

/// Built-in region table for `k` AUs (8 or 12).
pub fn default_region_specs(k: usize) -> Result<Vec<AuRegionSpec>> {
    match k {
        8 => parse_region_specs(AU_REGIONS_K8, "au_regions_k8.csv"),
        12 => parse_region_specs(AU_REGIONS_K12, "au_regions_k12.csv"),
        _ => Err(Error::contract(format!(
            "no built-in AU region table for K={k} (8 and 12 ship with the crate)"
        ))),
    }
}

pub fn landmarks_header() -> String {
    (0..NUM_LANDMARKS)
        .map(|i| format!("x{i},y{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn format_landmarks(sets: &[LandmarkSet]) -> String {
    let mut out = landmarks_header();
    out.push('\n');
    for s in sets {
        let row: Vec<String> = s
            .points
            .iter()
            .flat_map(|&(x, y)| [io::fmt_f64(x), io::fmt_f64(y)])
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_landmarks(text: &str, origin: &str) -> Result<Vec<LandmarkSet>> {
    let table = io::parse_csv(text, origin)?;
    if table.header.len() != 2 * NUM_LANDMARKS {
        return Err(Error::parse(
            origin,
            format!(
                "landmark header needs {} columns, got {}",
                2 * NUM_LANDMARKS,
                table.header.len()
            ),
        ));
    }
    table
        .rows
        .iter()
        .map(|row| {
            let vals = row
                .iter()
                .map(|v| io::parse_f64(v, origin))
                .collect::<Result<Vec<_>>>()?;
            LandmarkSet::new(vals.chunks(2).map(|c| (c[0], c[1])).collect())
        })
        .collect()
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkSet>> {
    parse_landmarks(&io::read_to_string(path)?, &path.display().to_string())
}

/// Ellipse in normalized coordinates; `rotation` is the angle of the
/// `semi_axes.0` axis measured from +x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse<T> {
    pub center: (T, T),
    pub semi_axes: (T, T),
    pub rotation: T,
}

impl<T: Scalar> Ellipse<T> {
    pub fn contains(&self, x: T, y: T) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= T::one()
    }

    /// Axis-aligned half extents.
    pub fn half_extents(&self) -> (T, T) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = self.semi_axes;
        (
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        )
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn bounding_box(&self) -> (T, T, T, T) {
        let (ex, ey) = self.half_extents();
        (
            self.center.0 - ex,
            self.center.1 - ey,
            self.center.0 + ex,
            self.center.1 + ey,
        )
    }
}

/// Fits an ellipse to points by their second moments.
///
/// The semi-axes are `sqrt(2λ)` for the covariance eigenvalues `λ`, so the
/// four corners of an axis-aligned rectangle lie exactly on the fitted
/// ellipse. Both semi-axes are floored at `min_semi_axis`.
pub fn fit_ellipse<T: Scalar>(points: &[(T, T)], min_semi_axis: T) -> Result<Ellipse<T>> {
    if points.is_empty() {
        return Err(Error::contract("cannot fit an ellipse to zero points"));
    }
    let n = T::from_usize(points.len()).unwrap();
    let cx = points.iter().map(|p| p.0).sum::<T>() / n;
    let cy = points.iter().map(|p| p.1).sum::<T>() / n;
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for &(x, y) in points {
        let (dx, dy) = (x - cx, y - cy);
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
        sxy = sxy + dx * dy;
    }
    sxx = sxx / n;
    syy = syy / n;
    sxy = sxy / n;
    let half = T::lit(0.5);
    let mean = (sxx + syy) * half;
    let diff = (sxx - syy) * half;
    let root = (diff * diff + sxy * sxy).sqrt();
    let (l1, l2) = (mean + root, (mean - root).max(T::zero()));
    // principal-axis angle folded into [0, π)
    let mut rotation = half * (T::lit(2.0) * sxy).atan2(sxx - syy);
    if rotation < T::zero() {
        rotation = rotation + T::PI();
    }
    if rotation >= T::PI() {
        rotation = rotation - T::PI();
    }
    let two = T::lit(2.0);
    Ok(Ellipse {
        center: (cx, cy),
        semi_axes: (
            (two * l1).sqrt().max(min_semi_axis),
            (two * l2).sqrt().max(min_semi_axis),
        ),
        rotation,
    })
}

/// Cells whose centers fall inside the ellipse, on a `grid × grid` lattice
/// covering the unit square.
pub fn rasterize<T: Scalar>(e: &Ellipse<T>, grid: usize) -> Vec<T> {
    let g = T::from_usize(grid).unwrap();
    let half = T::lit(0.5);
    let mut mask = vec![T::zero(); grid * grid];
    for r in 0..grid {
        for c in 0..grid {
            let x = (T::from_usize(c).unwrap() + half) / g;
            let y = (T::from_usize(r).unwrap() + half) / g;
            if e.contains(x, y) {
                mask[r * grid + c] = T::one();
            }
        }
    }
    mask
}

/// Discrete Gaussian truncated at `3σ`, normalized to sum 1.
pub fn gaussian_kernel<T: Scalar>(sigma: T) -> Vec<T> {
    let radius = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let w: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::from_usize(i).unwrap() - T::from_usize(radius).unwrap();
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let s: T = w.iter().copied().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with edge-replicated borders, so a constant field
/// stays constant and interior blobs see a plain Gaussian.
fn smooth<T: Scalar>(field: &[T], grid: usize, kernel: &[T]) -> Vec<T> {
    let radius = (kernel.len() / 2) as isize;
    let last = grid as isize - 1;
    let pass = |src: &[T], horizontal: bool| -> Vec<T> {
        let mut out = vec![T::zero(); grid * grid];
        for r in 0..grid {
            for c in 0..grid {
                let mut acc = T::zero();
                for (j, &w) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, (c as isize + off).clamp(0, last))
                    } else {
                        ((r as isize + off).clamp(0, last), c as isize)
                    };
                    acc = acc + w * src[rr as usize * grid + cc as usize];
                }
                out[r * grid + c] = acc;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Rasterizes `e`, blurs with a Gaussian of `sigma` cells and rescales so
/// the peak is exactly one.
pub fn rasterize_and_smooth<T: Scalar>(e: &Ellipse<T>, grid: usize, sigma: T) -> Vec<T> {
    let mask = rasterize(e, grid);
    let smoothed = smooth(&mask, grid, &gaussian_kernel(sigma));
    let peak = smoothed.iter().copied().fold(T::zero(), T::max);
    if peak <= T::zero() {
        return smoothed;
    }
    smoothed
        .into_iter()
        .map(|v| (v / peak).min(T::one()).max(T::zero()))
        .collect()
}

/// `K` maps of `GRID × GRID` cells, stored map-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    k: usize,
    maps: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(k: usize, maps: Vec<T>) -> Result<Self> {
        if k == 0 || maps.len() != k * GRID * GRID {
            return Err(Error::dim(format!(
                "attention maps need {k}×{GRID}×{GRID} cells, got {}",
                maps.len()
            )));
        }
        Ok(Self { k, maps })
    }

    /// Every map all ones: the identity gate.
    pub fn ones(k: usize) -> Self {
        Self {
            k,
            maps: vec![T::one(); k * GRID * GRID],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn map(&self, k: usize) -> &[T] {
        &self.maps[k * GRID * GRID..(k + 1) * GRID * GRID]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.maps
    }

    /// `(row, col)` of the first maximal cell of map `k`.
    pub fn argmax(&self, k: usize) -> (usize, usize) {
        let m = self.map(k);
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        (best / GRID, best % GRID)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub sigma: f64,
    /// Semi-axis floor in grid cells.
    pub min_semi_axis_cells: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            min_semi_axis_cells: 1.0,
        }
    }
}

/// Ellipse generating AU `spec` on `landmarks`.
pub fn region_ellipse<T: Scalar>(
    landmarks: &LandmarkSet,
    spec: &AuRegionSpec,
    cfg: &AttentionConfig,
) -> Result<Ellipse<T>> {
    let pts: Vec<(T, T)> = spec
        .anchor_points(landmarks)?
        .into_iter()
        .map(|(x, y)| (T::lit(x), T::lit(y)))
        .collect();
    fit_ellipse(&pts, T::lit(cfg.min_semi_axis_cells / GRID as f64))
}

pub fn build_attention<T: Scalar>(
    landmarks: &LandmarkSet,
    specs: &[AuRegionSpec],
    cfg: &AttentionConfig,
) -> Result<AttentionMap<T>> {
    if specs.is_empty() {
        return Err(Error::contract("at least one AU region is required"));
    }
    let mut maps = Vec::with_capacity(specs.len() * GRID * GRID);
    for spec in specs {
        let e = region_ellipse::<T>(landmarks, spec, cfg)?;
        maps.extend(rasterize_and_smooth(&e, GRID, T::lit(cfg.sigma)));
    }
    AttentionMap::new(specs.len(), maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::face_template;

    const CELL: f64 = 1.0 / GRID as f64;

    fn circle(cx: f64, cy: f64, r: f64) -> Ellipse<f64> {
        Ellipse {
            center: (cx, cy),
            semi_axes: (r, r),
            rotation: 0.0,
        }
    }

    #[test]
    fn single_point_gives_floor_circle() {
        let e = fit_ellipse(&[(0.5, 0.5)], CELL).unwrap();
        assert_eq!(e.center, (0.5, 0.5));
        assert_eq!(e.semi_axes, (CELL, CELL));
    }

    #[test]
    fn two_points_major_axis_along_x() {
        let e = fit_ellipse(&[(0.4, 0.5), (0.6, 0.5)], CELL).unwrap();
        assert!((e.center.0 - 0.5).abs() < 1e-15 && (e.center.1 - 0.5).abs() < 1e-15);
        assert_eq!(e.rotation, 0.0);
        assert!(e.semi_axes.0 > e.semi_axes.1);
        assert_eq!(e.semi_axes.1, CELL);
    }

    #[test]
    fn rectangle_corners_lie_on_fitted_ellipse() {
        // var_x = 0.2², var_y = 0.1²  ⇒  semi-axes √2·0.2, √2·0.1
        let pts = [(0.3, 0.4), (0.7, 0.4), (0.3, 0.6), (0.7, 0.6)];
        let e = fit_ellipse(&pts, CELL).unwrap();
        assert!((e.center.0 - 0.5).abs() < 1e-15 && (e.center.1 - 0.5).abs() < 1e-15);
        assert_eq!(e.rotation, 0.0);
        assert!((e.semi_axes.0 - 0.2 * 2f64.sqrt()).abs() < 1e-12);
        assert!((e.semi_axes.1 - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        let (dx, dy) = (0.2 / e.semi_axes.0, 0.1 / e.semi_axes.1);
        assert!((dx * dx + dy * dy - 1.0).abs() < 1e-12);

        // a tall rectangle turns the major axis vertical
        let tall = [(0.45, 0.2), (0.55, 0.2), (0.45, 0.8), (0.55, 0.8)];
        let e = fit_ellipse(&tall, CELL).unwrap();
        assert!((e.rotation - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn empty_points_is_contract_error() {
        assert!(matches!(
            fit_ellipse::<f64>(&[], CELL),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn whole_grid_ellipse_is_constant_one() {
        let m = rasterize_and_smooth(&circle(0.5, 0.5, 2.0), GRID, 3.0);
        assert!(m.iter().all(|&v| v == 1.0), "{m:?}");
    }

    #[test]
    fn centered_circle_peaks_and_decays() {
        // center of cell (7, 7)
        let c = 7.5 * CELL;
        let m = rasterize_and_smooth(&circle(c, c, 1.5 * CELL), GRID, 3.0);
        let amap = AttentionMap::new(1, m.clone()).unwrap();
        assert_eq!(amap.argmax(0), (7, 7));
        for c in 7..GRID - 1 {
            assert!(m[7 * GRID + c] > m[7 * GRID + c + 1]);
            assert!(m[c * GRID + 7] > m[(c + 1) * GRID + 7]);
        }
        for c in 1..=7 {
            assert!(m[7 * GRID + c] > m[7 * GRID + c - 1]);
        }
    }

    #[test]
    fn wider_sigma_spreads_more() {
        let c = 7.5 * CELL;
        let e = circle(c, c, 1.0 * CELL);
        let above = |s: f64| {
            rasterize_and_smooth(&e, GRID, s)
                .iter()
                .filter(|&&v| v > 0.1)
                .count()
        };
        assert!(above(3.0) > above(1.0));
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(3.0f64);
        assert_eq!(k.len(), 19);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[18]);
    }

    fn central_spec() -> AuRegionSpec {
        // inner corner of the left eye; off the vertical midline so the peak is unique
        AuRegionSpec {
            au_index: 0,
            landmark_ids: vec![39],
            offset: None,
        }
    }

    #[test]
    fn single_spec_single_peak() {
        let lm = face_template();
        let a: AttentionMap<f64> =
            build_attention(&lm, &[central_spec()], &AttentionConfig::default()).unwrap();
        assert_eq!(a.k(), 1);
        let (r, c) = a.argmax(0);
        let (x, y) = lm.points()[39];
        assert_eq!((r, c), ((y * GRID as f64) as usize, (x * GRID as f64) as usize));
        let peaks = a.map(0).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(peaks, 1);
    }

    #[test]
    fn identical_specs_identical_maps() {
        let lm = face_template();
        let mut s2 = central_spec();
        s2.au_index = 1;
        let a: AttentionMap<f64> =
            build_attention(&lm, &[central_spec(), s2], &AttentionConfig::default()).unwrap();
        assert_eq!(a.map(0), a.map(1));
    }

    #[test]
    fn out_of_range_landmark_rejected() {
        let bad = AuRegionSpec {
            au_index: 0,
            landmark_ids: vec![3, 68],
            offset: None,
        };
        let r = build_attention::<f64>(&face_template(), &[bad], &AttentionConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn maps_are_bounded_with_unit_peak() {
        let lm = face_template();
        for k in [8, 12] {
            let specs = default_region_specs(k).unwrap();
            let a: AttentionMap<f64> =
                build_attention(&lm, &specs, &AttentionConfig::default()).unwrap();
            for i in 0..k {
                let m = a.map(i);
                assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(m.iter().copied().fold(0.0, f64::max), 1.0);
            }
        }
    }

    #[test]
    fn region_csv_round_trips() {
        let specs = default_region_specs(12).unwrap();
        assert_eq!(specs.len(), 12);
        let text = format_region_specs(&specs);
        assert_eq!(parse_region_specs(&text, "mem").unwrap(), specs);
    }

    #[test]
    fn region_csv_rejects_bad_rows() {
        let text = "au_index,landmark_ids,dx,dy\n0,,0,0\n";
        assert!(parse_region_specs(text, "mem").is_err());
        let text = "au_index,landmark_ids,dx,dy\n1,3,0,0\n";
        assert!(parse_region_specs(text, "mem").is_err());
        let text = "au,ids\n0,3\n";
        assert!(parse_region_specs(text, "mem").is_err());
    }

    #[test]
    fn landmark_csv_round_trips_bit_exact() {
        let a = face_template();
        let b = face_template().flipped();
        let text = format_landmarks(&[a.clone(), b.clone()]);
        assert!(text.starts_with("x0,y0,x1,y1,"));
        assert_eq!(parse_landmarks(&text, "mem").unwrap(), vec![a, b]);
    }

    #[test]
    fn landmark_set_validates() {
        assert!(LandmarkSet::new(vec![(0.5, 0.5); 67]).is_err());
        let mut pts = vec![(0.5, 0.5); 68];
        pts[4] = (1.2, 0.5);
        assert!(LandmarkSet::new(pts).is_err());
    }
}
