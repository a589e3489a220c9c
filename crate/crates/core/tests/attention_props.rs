use proptest::prelude::*;
use rrl_core::attention::{
    build_attention, default_region_specs, gaussian_kernel, rasterize, rasterize_and_smooth,
    region_ellipse, AttentionConfig, Ellipse, LandmarkSet, GRID,
};
use rrl_core::synth::{face_template, generate, SynthSpec};

/// Non-separable 2D convolution with clamped borders, then max-rescale.
fn direct_smooth(e: &Ellipse<f64>, sigma: f64) -> Vec<f64> {
    let mask = rasterize(e, GRID);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut w2 = Vec::new();
    let mut total = 0.0;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            w2.push((dy, dx, w));
            total += w;
        }
    }
    let g = GRID as isize;
    let mut out = vec![0.0; GRID * GRID];
    for r in 0..g {
        for c in 0..g {
            let mut acc = 0.0;
            for &(dy, dx, w) in &w2 {
                let rr = (r + dy).clamp(0, g - 1);
                let cc = (c + dx).clamp(0, g - 1);
                acc += w / total * mask[(rr * g + cc) as usize];
            }
            out[(r * g + c) as usize] = acc;
        }
    }
    let peak = out.iter().cloned().fold(0.0, f64::max);
    out.iter().map(|v| v / peak).collect()
}

#[test]
fn separable_smoothing_matches_direct_convolution() {
    let shapes = [
        Ellipse { center: (0.5, 0.5), semi_axes: (0.1, 0.1), rotation: 0.0 },
        Ellipse { center: (0.3, 0.62), semi_axes: (0.2, 0.06), rotation: 0.7 },
        Ellipse { center: (0.05, 0.9), semi_axes: (0.15, 0.1), rotation: 2.0 },
    ];
    for e in &shapes {
        for sigma in [1.0, 3.0] {
            let fast = rasterize_and_smooth(e, GRID, sigma);
            let slow = direct_smooth(e, sigma);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{e:?} σ={sigma}: {a} vs {b}");
            }
        }
    }
    assert_eq!(gaussian_kernel(1.0f64).len(), 7);
}

#[test]
fn synthetic_faces_peak_inside_generating_ellipse() {
    let spec = SynthSpec { n_subjects: 6, per_subject: 4, ..SynthSpec::default_k8(17) };
    let specs = default_region_specs(8).unwrap();
    let cfg = AttentionConfig::default();
    let split = generate(&spec).unwrap();
    for s in split.train.samples.iter().chain(&split.test.samples) {
        let amap = build_attention::<f64>(&s.landmarks, &specs, &cfg).unwrap();
        for (k, spec) in specs.iter().enumerate() {
            let e = region_ellipse::<f64>(&s.landmarks, spec, &cfg).unwrap();
            let (x0, y0, x1, y1) = e.bounding_box();
            let (r, c) = amap.argmax(k);
            let (x, y) = ((c as f64 + 0.5) / GRID as f64, (r as f64 + 0.5) / GRID as f64);
            assert!(
                x >= x0 && x <= x1 && y >= y0 && y <= y1,
                "{} AU {k}: peak ({x},{y}) outside {:?}",
                s.id,
                (x0, y0, x1, y1)
            );
        }
    }
}

fn touches_border(e: &Ellipse<f64>) -> bool {
    let m = rasterize(e, GRID);
    (0..GRID).any(|i| {
        m[i] > 0.0 || m[(GRID - 1) * GRID + i] > 0.0 || m[i * GRID] > 0.0 || m[i * GRID + GRID - 1] > 0.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn argmax_follows_one_cell_shift(
        jitter in proptest::collection::vec(-0.01f64..0.01, 136),
        dir in 0usize..4,
    ) {
        let base: Vec<(f64, f64)> = face_template()
            .points()
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                // shrink toward the center to leave room for the shift
                (0.5 + 0.8 * (x - 0.5) + jitter[2 * i], 0.5 + 0.8 * (y - 0.5) + jitter[2 * i + 1])
            })
            .collect();
        let cell = 1.0 / GRID as f64;
        let (dc, dr) = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)][dir];
        let lm = LandmarkSet::new(base).unwrap();
        let moved = lm.shifted(dc as f64 * cell, dr as f64 * cell).unwrap();
        let specs = default_region_specs(8).unwrap();
        let cfg = AttentionConfig::default();
        let a = build_attention::<f64>(&lm, &specs, &cfg).unwrap();
        let b = build_attention::<f64>(&moved, &specs, &cfg).unwrap();
        let mut checked = 0;
        for (k, spec) in specs.iter().enumerate() {
            let e0 = region_ellipse::<f64>(&lm, spec, &cfg).unwrap();
            let e1 = region_ellipse::<f64>(&moved, spec, &cfg).unwrap();
            if touches_border(&e0) || touches_border(&e1) {
                continue;
            }
            let (r, c) = a.argmax(k);
            let (r2, c2) = b.argmax(k);
            prop_assert_eq!((r2 as isize, c2 as isize), (r as isize + dr, c as isize + dc), "AU {}", k);
            checked += 1;
        }
        prop_assert!(checked >= 4, "only {} interior maps", checked);
    }

    #[test]
    fn maps_bounded_with_exact_unit_peak(
        jitter in proptest::collection::vec(-0.03f64..0.03, 136),
        sigma in 0.5f64..4.0,
    ) {
        let pts: Vec<(f64, f64)> = face_template()
            .points()
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| ((x + jitter[2 * i]).clamp(0.0, 1.0), (y + jitter[2 * i + 1]).clamp(0.0, 1.0)))
            .collect();
        let lm = LandmarkSet::new(pts).unwrap();
        let cfg = AttentionConfig { sigma, ..AttentionConfig::default() };
        let specs = default_region_specs(12).unwrap();
        let a = build_attention::<f64>(&lm, &specs, &cfg).unwrap();
        let again = build_attention::<f64>(&lm, &specs, &cfg).unwrap();
        prop_assert_eq!(&a, &again);
        for k in 0..12 {
            let m = a.map(k);
            prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(m.iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }
}
