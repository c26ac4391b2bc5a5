use proptest::prelude::*;
use scatterfield_core::image::Image;
use scatterfield_core::medium::{DistantLight, Medium};
use scatterfield_core::phase::PhaseModel;
use scatterfield_core::rte::{neumann_series, transmittance, SeriesMode};
use scatterfield_core::template::{
    generate_diffuse_template, generate_highlight_template, DEFAULT_DIFFUSE_COUNTS,
    DEFAULT_HIGHLIGHT_COUNTS,
};
use scatterfield_core::volume::DensityGrid;
use scatterfield_core::Vec3;
use std::f64::consts::PI;

fn simpson_sphere(f: impl Fn(f64) -> f64) -> f64 {
    let n = 20_000;
    let h = PI / n as f64;
    let g = |t: f64| 2.0 * PI * f(t.cos()) * t.sin();
    let mut s = g(0.0) + g(PI);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
    }
    s * h / 3.0
}

fn noisy_medium(seed: u64) -> Medium {
    let grid = DensityGrid::from_fn([8; 3], 0.125, Vec3::zeros(), |c| {
        let s = seed as f64 * 0.37;
        (0.5 + 0.5 * (7.0 * c.x + s).sin() * (5.0 * c.y - s).cos() * (3.0 * c.z).sin()) as f32
    })
    .unwrap();
    Medium::new(
        grid,
        [2.0, 3.0, 5.0],
        [0.8; 3],
        PhaseModel::hg(0.3).unwrap(),
    )
    .unwrap()
}

fn point() -> impl Strategy<Value = Vec3> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hg_integrates_to_one(g in -0.95..0.95f64) {
        let p = PhaseModel::hg(g).unwrap();
        prop_assert!((simpson_sphere(|mu| p.eval(mu)) - 1.0).abs() < 1e-3);
        prop_assert!((simpson_sphere(|mu| mu * p.eval(mu)) - g).abs() < 1e-3);
    }

    #[test]
    fn mixture_integrates_to_one(w in 0.05..0.95f64, g1 in -0.9..0.9f64, g2 in -0.9..0.9f64) {
        let p = PhaseModel::multi_hg(&[(w, g1), (1.0 - w, g2)]).unwrap();
        prop_assert!((simpson_sphere(|mu| p.eval(mu)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn transmittance_is_reciprocal_bounded_and_nearly_multiplicative(
        seed in 0u64..1000, p in point(), q in point(), t in 0.0..1.0f64
    ) {
        let m = noisy_medium(seed);
        let step = 0.125 / 8.0;
        let a = transmittance(&m, &p, &q, step).unwrap();
        let b = transmittance(&m, &q, &p, step).unwrap();
        let mid = p + (q - p) * t;
        let first = transmittance(&m, &p, &mid, step).unwrap();
        let second = transmittance(&m, &mid, &q, step).unwrap();
        for c in 0..3 {
            prop_assert!(a[c] > 0.0 && a[c] <= 1.0);
            prop_assert!((a[c] - b[c]).abs() < 1e-5);
            prop_assert!((a[c] - first[c] * second[c]).abs() < 1e-3 * a[c]);
        }
    }

    #[test]
    fn templates_keep_counts_and_shells(seed in any::<u64>()) {
        let d = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, seed).unwrap();
        prop_assert_eq!(d.layer_sizes(), DEFAULT_DIFFUSE_COUNTS.to_vec());
        for l in &d.layers {
            prop_assert!(l.inner_radius < l.radius);
            for p in &l.points {
                let r = Vec3::from(*p).norm();
                prop_assert!(r <= l.radius + 1e-9);
                prop_assert!(r >= l.inner_radius - 1e-9 || (l.index == 0 && r == 0.0));
            }
        }
        let h = generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 2.0, 0.1, seed).unwrap();
        prop_assert_eq!(h.layer_sizes(), DEFAULT_HIGHLIGHT_COUNTS.to_vec());
        for l in &h.layers {
            for p in &l.points {
                prop_assert!(p[2] >= l.inner_radius - 1e-9 && p[2] <= l.radius + 1e-9);
                prop_assert!(p[0].hypot(p[1]) <= (2.0 - p[2]) * 0.1f64.tan() + 1e-9);
            }
        }
    }

    #[test]
    fn neumann_orders_are_non_negative(seed in 0u64..1000, p in point()) {
        let m = noisy_medium(seed);
        let light = DistantLight::new(Vec3::new(0.2, -1.0, 0.4), [1.0; 3]).unwrap();
        let s = neumann_series(&m, &light, &p, &Vec3::x(), 6, 64, SeriesMode::Regular, seed).unwrap();
        let sums = s.partial_sums();
        for (t, w) in s.terms.iter().zip(sums.windows(2)) {
            for c in 0..3 {
                prop_assert!(t[c] >= 0.0);
                prop_assert!(w[1][c] >= w[0][c]);
            }
        }
    }

    #[test]
    fn pfm_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u32>()) {
        let mut img = Image::new(w, h);
        for (i, px) in img.pixels.iter_mut().enumerate() {
            let v = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17) % 1000) as f32 / 7.0;
            *px = [v as f64, (v * 0.5) as f64, (v + 1.0) as f64];
        }
        prop_assert_eq!(Image::from_pfm(&img.to_pfm()).unwrap(), img);
    }
}
