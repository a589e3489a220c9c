//! Procedural "synthetic-AU" faces with known landmarks and labels.
//!
//! A subject is a warped copy of a fixed 68-point template plus a smooth
//! texture. Each active AU adds a Gabor patch, with its own orientation, at
//! every anchor point of its region spec; the envelope is cut off at
//! [`GABOR_RADIUS_SIGMAS`] widths so the change stays local.
//!
//! Labels are drawn AU by AU. For a coupling `(i, j, s)` the label of `j`
//! copies activity from `i`: `P(j | i) = s` and `P(j | ¬i) = p_i(1−s)/(1−p_i)`,
//! which keeps `P(j) = P(i) = p_i` and makes the expected Dice coefficient of
//! the pair equal to `s`.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use crate::attention::{self, AuRegionSpec, LandmarkSet, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;

/// Envelope cutoff of the AU patches, in envelope widths.
pub const GABOR_RADIUS_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub k: usize,
    pub image_size: usize,
    pub n_subjects: usize,
    pub per_subject: usize,
    /// Per-AU activation probability.
    pub au_prior: Vec<f64>,
    /// `(i, j, strength)` with `i < j`.
    pub pair_coupling: Vec<(usize, usize, f64)>,
    pub regions: Vec<AuRegionSpec>,
    /// Fraction of subjects held out for the test shard.
    pub test_fraction: f64,
    /// Peak contrast of an intensity-5 AU patch.
    pub au_amplitude: f64,
    /// Envelope width and wavelength of the patches, in pixels.
    pub au_width_px: f64,
    pub au_wavelength_px: f64,
    /// Draw the carrier phase of every patch uniformly per image instead of
    /// pinning it to the anchor.
    pub au_random_phase: bool,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Amplitude of the subject texture.
    pub texture_amplitude: f64,
    /// An inactive AU shows a sub-threshold (intensity 1) trace with
    /// probability `trace_ratio · prior`.
    pub trace_ratio: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Eight AUs with the built-in region table and three planted couplings.
    pub fn default_k8(seed: u64) -> Self {
        Self {
            k: 8,
            image_size: 56,
            n_subjects: 40,
            per_subject: 20,
            au_prior: vec![0.3, 0.3, 0.35, 0.3, 0.25, 0.35, 0.3, 0.3],
            pair_coupling: vec![(0, 1, 0.8), (3, 5, 0.6), (6, 7, 0.7)],
            regions: attention::default_region_specs(8).expect("built-in table"),
            test_fraction: 0.25,
            au_amplitude: 0.3,
            au_width_px: 2.5,
            au_wavelength_px: 5.0,
            au_random_phase: true,
            pixel_noise: 0.02,
            texture_amplitude: 0.06,
            trace_ratio: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.regions.len() != self.k || self.au_prior.len() != self.k {
            return Err(Error::contract(format!(
                "K={} needs {} regions and priors, got {} and {}",
                self.k,
                self.k,
                self.regions.len(),
                self.au_prior.len()
            )));
        }
        if self.image_size < 8 || self.n_subjects == 0 || self.per_subject == 0 {
            return Err(Error::contract("image size ≥ 8 and a non-empty subject set required"));
        }
        if self.au_prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("priors must lie in [0,1]"));
        }
        for &(i, j, s) in &self.pair_coupling {
            if i >= j || j >= self.k || !(0.0..=1.0).contains(&s) {
                return Err(Error::contract(format!(
                    "coupling ({i},{j},{s}) needs i < j < K and strength in [0,1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::contract("test fraction must lie in [0,1)"));
        }
        for r in &self.regions {
            r.validate()?;
        }
        Ok(())
    }

    pub fn test_subjects(&self) -> usize {
        ((self.n_subjects as f64) * self.test_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: usize,
    /// Row-major grayscale in `[0,1]`, quantized to 8 bits.
    pub image: Vec<f64>,
    pub landmarks: LandmarkSet,
    /// Per-AU intensity in `0..=5`.
    pub intensities: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub k: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `N × K` binary label matrix.
    pub fn label_matrix(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.samples.iter().map(|s| s.subject).collect();
        s.dedup();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Subject-disjoint shards.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// The neutral 68-point face (iBUG ordering) in normalized coordinates.
pub fn face_template() -> LandmarkSet {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    // jaw 0..16, ear to ear through the chin
    for i in 0..17 {
        let phi = PI * i as f64 / 16.0;
        p.push((0.5 - 0.36 * phi.cos(), 0.42 + 0.46 * phi.sin()));
    }
    // brows 17..21 and 22..26
    for i in 0..5 {
        let t = i as f64 / 4.0;
        p.push((0.22 + 0.22 * t, 0.30 - 0.03 * (PI * t).sin()));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        p.push((0.56 + 0.22 * t, 0.30 - 0.03 * (PI * t).sin()));
    }
    // nose bridge 27..30, nostrils 31..35
    for i in 0..4 {
        p.push((0.5, 0.36 + 0.06 * i as f64));
    }
    for i in 0..5 {
        let x = 0.44 + 0.03 * i as f64;
        p.push((x, if i == 2 { 0.60 } else { 0.58 }));
    }
    // eyes 36..41 and 42..47
    for cx in [0.33, 0.67] {
        for (dx, dy) in [
            (-0.06, 0.0),
            (-0.02, -0.02),
            (0.02, -0.02),
            (0.06, 0.0),
            (0.02, 0.02),
            (-0.02, 0.02),
        ] {
            p.push((cx + dx, 0.39 + dy));
        }
    }
    // outer lip 48..59, inner lip 60..67
    for j in 0..12 {
        let phi = PI + TAU * j as f64 / 12.0;
        p.push((0.5 + 0.13 * phi.cos(), 0.72 + 0.05 * phi.sin()));
    }
    for j in 0..8 {
        let phi = PI + TAU * j as f64 / 8.0;
        p.push((0.5 + 0.08 * phi.cos(), 0.72 + 0.02 * phi.sin()));
    }
    LandmarkSet::new(p).expect("template inside the unit square")
}

/// Per-subject appearance.
#[derive(Clone, Debug)]
struct Subject {
    landmarks: Vec<(f64, f64)>,
    skin: f64,
    texture: Vec<(f64, f64, f64, f64)>,
}

fn make_subject(rng: &mut Rng) -> Subject {
    let scale = rng.uniform_in(0.9, 1.05);
    let (tx, ty) = (rng.uniform_in(-0.03, 0.03), rng.uniform_in(-0.03, 0.03));
    let landmarks = face_template()
        .points()
        .iter()
        .map(|&(x, y)| {
            let jx = 0.006 * rng.normal();
            let jy = 0.006 * rng.normal();
            (0.5 + scale * (x - 0.5) + tx + jx, 0.5 + scale * (y - 0.5) + ty + jy)
        })
        .collect();
    let texture = (0..3)
        .map(|_| {
            (
                rng.uniform_in(0.5, 2.5),
                rng.uniform_in(0.5, 2.5),
                rng.uniform_in(0.0, TAU),
                rng.uniform_in(0.5, 1.0),
            )
        })
        .collect();
    Subject {
        landmarks,
        skin: rng.uniform_in(0.45, 0.6),
        texture,
    }
}

fn clamp_unit(p: (f64, f64)) -> (f64, f64) {
    (p.0.clamp(0.02, 0.98), p.1.clamp(0.02, 0.98))
}

/// Subject landmarks with a small per-image head motion.
fn image_landmarks(subject: &Subject, rng: &mut Rng) -> LandmarkSet {
    let (dx, dy) = (rng.uniform_in(-0.01, 0.01), rng.uniform_in(-0.01, 0.01));
    let pts = subject
        .landmarks
        .iter()
        .map(|&(x, y)| clamp_unit((x + dx + 0.002 * rng.normal(), y + dy + 0.002 * rng.normal())))
        .collect();
    LandmarkSet::new(pts).expect("clamped to the unit square")
}

/// Face without AU activity: skin ellipse, texture, dark facial features.
fn render_base(spec: &SynthSpec, subject: &Subject, lm: &LandmarkSet, noise: &mut Rng) -> Vec<f64> {
    let n = spec.image_size;
    let pts = lm.points();
    let (fx, fy) = (
        pts.iter().map(|p| p.0).sum::<f64>() / NUM_LANDMARKS as f64,
        pts.iter().map(|p| p.1).sum::<f64>() / NUM_LANDMARKS as f64,
    );
    let half_w = (pts[16].0 - pts[0].0).abs() / 2.0 + 0.03;
    let half_h = (pts[8].1 - pts[19].1).abs() / 2.0 + 0.06;
    // landmark groups drawn as dark strokes
    let features: Vec<(usize, f64)> = (17..27)
        .map(|i| (i, 0.12))
        .chain((36..48).map(|i| (i, 0.18)))
        .chain((48..60).map(|i| (i, 0.12)))
        .chain((31..36).map(|i| (i, 0.08)))
        .collect();
    let stroke = 1.2 / n as f64;
    let mut img = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 + 0.5) / n as f64;
            let y = (r as f64 + 0.5) / n as f64;
            let ex = (x - fx) / half_w;
            let ey = (y - fy) / half_h;
            let inside = 1.0 / (1.0 + ((ex * ex + ey * ey - 1.0) * 12.0).exp());
            let mut v = 0.2 + (subject.skin - 0.2) * inside;
            for &(kx, ky, ph, a) in &subject.texture {
                v += spec.texture_amplitude * a * (TAU * (kx * x + ky * y) + ph).sin();
            }
            for &(i, depth) in &features {
                let (px, py) = pts[i];
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                v -= depth * (-d2 / (2.0 * stroke * stroke)).exp();
            }
            img[r * n + c] = v + spec.pixel_noise * noise.normal();
        }
    }
    img
}

/// Adds the AU patches; returns pixels untouched outside every patch disk.
fn add_au_patches(spec: &SynthSpec, lm: &LandmarkSet, intensities: &[u8], rng: &mut Rng, img: &mut [f64]) {
    let n = spec.image_size;
    let width = spec.au_width_px;
    let cutoff = GABOR_RADIUS_SIGMAS * width;
    for (k, &level) in intensities.iter().enumerate() {
        if level == 0 {
            continue;
        }
        let amp = spec.au_amplitude * level as f64 / 5.0;
        let offset = if spec.au_random_phase { TAU * rng.uniform() } else { 0.0 };
        let theta = PI * k as f64 / spec.k as f64;
        let (dirx, diry) = (theta.cos(), theta.sin());
        let anchors = spec.regions[k]
            .anchor_points(lm)
            .expect("validated region spec");
        for (ax, ay) in anchors {
            let (cx, cy) = (ax * n as f64, ay * n as f64);
            let r0 = ((cy - cutoff).floor().max(0.0)) as usize;
            let r1 = ((cy + cutoff).ceil().min(n as f64 - 1.0)) as usize;
            let c0 = ((cx - cutoff).floor().max(0.0)) as usize;
            let c1 = ((cx + cutoff).ceil().min(n as f64 - 1.0)) as usize;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                    let d2 = dx * dx + dy * dy;
                    if d2 > cutoff * cutoff {
                        continue;
                    }
                    let env = (-d2 / (2.0 * width * width)).exp();
                    let phase = TAU * (dx * dirx + dy * diry) / spec.au_wavelength_px + offset;
                    img[r * n + c] += amp * env * phase.cos();
                }
            }
        }
    }
}

fn quantize(img: &mut [f64]) {
    for v in img.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Renders one image; exposed so locality can be checked against the base.
pub fn render(spec: &SynthSpec, lm: &LandmarkSet, intensities: &[u8], subject_seed: u64, noise_seed: u64) -> Vec<f64> {
    let subject = make_subject(&mut Rng::new(subject_seed));
    let mut noise = Rng::new(noise_seed);
    let mut img = render_base(spec, &subject, lm, &mut noise);
    add_au_patches(spec, lm, intensities, &mut noise, &mut img);
    quantize(&mut img);
    img
}

fn sample_labels(spec: &SynthSpec, rng: &mut Rng) -> Vec<u8> {
    let mut labels = vec![0u8; spec.k];
    for j in 0..spec.k {
        let coupled = spec.pair_coupling.iter().find(|c| c.1 == j);
        labels[j] = match coupled {
            Some(&(i, _, s)) => {
                let p = spec.au_prior[i];
                let q = if p < 1.0 { (p * (1.0 - s) / (1.0 - p)).min(1.0) } else { 0.0 };
                rng.bernoulli(if labels[i] == 1 { s } else { q }) as u8
            }
            None => rng.bernoulli(spec.au_prior[j]) as u8,
        };
    }
    labels
}

fn sample_intensities(spec: &SynthSpec, labels: &[u8], rng: &mut Rng) -> Vec<u8> {
    labels
        .iter()
        .zip(&spec.au_prior)
        .map(|(&l, &p)| {
            if l == 1 {
                2 + rng.below(4) as u8
            } else if rng.bernoulli(spec.trace_ratio * p) {
                1
            } else {
                0
            }
        })
        .collect()
}

pub fn sample_id(subject: usize, index: usize) -> String {
    format!("s{subject:03}_{index:03}")
}

pub fn subject_of(id: &str) -> Option<usize> {
    id.strip_prefix('s')?.split('_').next()?.parse().ok()
}

/// Generates the full corpus and splits it by subject (last subjects → test).
pub fn generate(spec: &SynthSpec) -> Result<SynthSplit> {
    spec.validate()?;
    let mut root = Rng::new(spec.seed);
    let n_test = spec.test_subjects();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in 0..spec.n_subjects {
        let subject_seed = root.next_u64();
        let subject = make_subject(&mut Rng::new(subject_seed));
        let mut rng = root.fork(s as u64);
        for i in 0..spec.per_subject {
            let lm = image_landmarks(&subject, &mut rng);
            let labels = sample_labels(spec, &mut rng);
            let intensities = sample_intensities(spec, &labels, &mut rng);
            let mut noise = rng.fork(i as u64);
            let mut image = render_base(spec, &subject, &lm, &mut noise);
            add_au_patches(spec, &lm, &intensities, &mut noise, &mut image);
            quantize(&mut image);
            let sample = Sample {
                id: sample_id(s, i),
                subject: s,
                image,
                landmarks: lm,
                labels: intensities.iter().map(|&v| binarize(v)).collect(),
                intensities,
            };
            if s >= spec.n_subjects - n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    let wrap = |samples| Dataset {
        image_size: spec.image_size,
        k: spec.k,
        samples,
    };
    Ok(SynthSplit {
        train: wrap(train),
        test: wrap(test),
    })
}

fn binarize(v: u8) -> u8 {
    crate::probe::binarize_intensity(v.into()).expect("sampled intensities stay in 0..=5")
}

/// Samples `n` label vectors only (no rendering).
pub fn sample_label_matrix(spec: &SynthSpec, n: usize) -> Result<Vec<Vec<u8>>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    Ok((0..n).map(|_| sample_labels(spec, &mut rng)).collect())
}

pub fn encode_pgm(img: &[f64], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Reads a binary 8-bit PGM; returns `(width, height, pixels in [0,1])`.
pub fn decode_pgm(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::parse(origin, "only 8-bit binary PGM (P5, maxval 255) is supported"));
    }
    let w = io::parse_usize(&fields[1], origin)?;
    let h = io::parse_usize(&fields[2], origin)?;
    let px = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::parse(origin, "PGM payload shorter than header claims"))?;
    Ok((w, h, px.iter().map(|&b| b as f64 / 255.0).collect()))
}

fn labels_csv(ds: &Dataset, values: impl Fn(&Sample) -> &[u8]) -> String {
    let mut out = String::from("image_id");
    for k in 0..ds.k {
        let _ = write!(out, ",au_{k}");
    }
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&s.id);
        for v in values(s) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `images/*.pgm`, `landmarks.csv`, `labels.csv`, `intensities.csv`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    io::create_dir(&img_dir)?;
    for s in &ds.samples {
        io::write_atomic(&img_dir.join(format!("{}.pgm", s.id)), &encode_pgm(&s.image, ds.image_size))?;
    }
    let lms: Vec<LandmarkSet> = ds.samples.iter().map(|s| s.landmarks.clone()).collect();
    io::write_atomic(&dir.join("landmarks.csv"), attention::format_landmarks(&lms).as_bytes())?;
    io::write_atomic(&dir.join("labels.csv"), labels_csv(ds, |s| &s.labels).as_bytes())?;
    io::write_atomic(
        &dir.join("intensities.csv"),
        labels_csv(ds, |s| &s.intensities).as_bytes(),
    )?;
    Ok(())
}

/// Reads `image_id, au_0 … au_{K−1}` rows.
pub fn read_label_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<u8>>)> {
    let origin = path.display().to_string();
    let table = io::read_csv(path)?;
    if table.header.first().map(String::as_str) != Some("image_id") || table.header.len() < 2 {
        return Err(Error::parse(&origin, "label header must be image_id, au_0, …"));
    }
    let mut ids = Vec::with_capacity(table.rows.len());
    let mut rows = Vec::with_capacity(table.rows.len());
    for row in table.rows {
        let vals = row[1..]
            .iter()
            .map(|v| {
                let x = io::parse_usize(v, &origin)?;
                u8::try_from(x).map_err(|_| Error::parse(&origin, format!("label {x} too large")))
            })
            .collect::<Result<Vec<u8>>>()?;
        ids.push(row[0].clone());
        rows.push(vals);
    }
    Ok((ids, rows))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (ids, labels) = read_label_csv(&dir.join("labels.csv"))?;
    let intensities = match dir.join("intensities.csv") {
        p if p.exists() => read_label_csv(&p)?.1,
        _ => labels.iter().map(|l| l.iter().map(|&v| v * 2).collect()).collect(),
    };
    let lms = attention::read_landmarks(&dir.join("landmarks.csv"))?;
    if lms.len() != ids.len() || intensities.len() != ids.len() {
        return Err(Error::contract(format!(
            "{}: {} label rows, {} landmark rows, {} intensity rows",
            dir.display(),
            ids.len(),
            lms.len(),
            intensities.len()
        )));
    }
    let k = labels.first().map_or(0, Vec::len);
    let mut samples = Vec::with_capacity(ids.len());
    let mut size = 0;
    for ((id, (l, inten)), lm) in ids.into_iter().zip(labels.into_iter().zip(intensities)).zip(lms) {
        let path = dir.join("images").join(format!("{id}.pgm"));
        let (w, h, image) = decode_pgm(&io::read_bytes(&path)?, &path.display().to_string())?;
        if w != h || (size != 0 && w != size) {
            return Err(Error::contract(format!("{}: image is {w}×{h}", path.display())));
        }
        size = w;
        if l.len() != k || l.iter().any(|&v| v > 1) {
            return Err(Error::contract(format!("{id}: labels must be {k} binary values")));
        }
        samples.push(Sample {
            subject: subject_of(&id).unwrap_or(0),
            id,
            image,
            landmarks: lm,
            intensities: inten,
            labels: l,
        });
    }
    if samples.is_empty() {
        return Err(Error::contract(format!("{}: dataset is empty", dir.display())));
    }
    Ok(Dataset {
        image_size: size,
        k,
        samples,
    })
}
