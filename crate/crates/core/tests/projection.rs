use panosfuda::sphere::{
    angular_distance, col_lon, default_tangent_grid, erp_to_ffp, erp_to_tangent, ffp_count, ffp_rebuild,
    gnomonic_forward, gnomonic_inverse, make_tangent_grid, row_lat, tangent_to_erp, ErpKind, ErpTensor,
    TangentProjector,
};
use panosfuda::Tensor;
use proptest::prelude::*;

/// Smooth test signal: constant plus three low-order spherical harmonics.
fn analytic(lat: f64, lon: f64) -> f64 {
    let (x, y, z) = (lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin());
    0.5 + 0.15 * x + 0.12 * y * z + 0.08 * (3.0 * z * z - 1.0) / 2.0
}

fn analytic_erp(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            data.push(analytic(row_lat(i, h), col_lon(j, w)) as f32);
        }
    }
    Tensor::new(vec![1, h, w], data).unwrap()
}

fn round_trip_errors(h: usize, w: usize, patch: usize) -> (f64, f64) {
    let erp = analytic_erp(h, w);
    let proj = TangentProjector::new(&default_tangent_grid(patch, patch).unwrap(), h, w).unwrap();
    let patches = proj.erp_to_tangent(&erp).unwrap();
    let (back, _) = proj.tangent_to_erp(&patches).unwrap();
    let diffs: Vec<f64> = back.data().iter().zip(erp.data()).map(|(a, b)| (a - b).abs() as f64).collect();
    (
        diffs.iter().sum::<f64>() / diffs.len() as f64,
        diffs.iter().cloned().fold(0.0, f64::max),
    )
}

#[test]
fn round_trip_on_analytic_panorama() {
    let (mean64, max64) = round_trip_errors(64, 128, 64);
    let (mean128, max128) = round_trip_errors(64, 128, 128);
    assert!(mean64 < 2.0 / 255.0 && max64 < 8.0 / 255.0, "{mean64} {max64}");
    assert!(mean128 < 2.0 / 255.0 && max128 < 8.0 / 255.0, "{mean128} {max128}");
    assert!(mean128 <= mean64, "doubling patch resolution worsened {mean64} -> {mean128}");
}

#[test]
fn patch_pixels_sample_the_analytic_function() {
    let (h, w) = (128, 256);
    let grid = default_tangent_grid(32, 32).unwrap();
    let set = erp_to_tangent(&ErpTensor::new(analytic_erp(h, w), ErpKind::Feature).unwrap(), &grid).unwrap();
    let mut worst = 0.0f64;
    for (p, patch) in set.patches.iter().enumerate() {
        let (lat0, lon0) = grid.centers[p];
        for v in 0..32 {
            for u in 0..32 {
                let (x, y) = grid.pixel_to_plane(v, u);
                let (lat, lon) = gnomonic_inverse(lat0, lon0, x, y);
                let got = patch.at(&[0, v, u]) as f64;
                worst = worst.max((got - analytic(lat, lon)).abs());
            }
        }
    }
    // bilinear interpolation error of a smooth signal at this resolution
    assert!(worst < 4e-3, "{worst}");
}

#[test]
fn constant_erp_gives_constant_patches_and_back() {
    let erp = Tensor::full(&[2, 32, 64], 0.3);
    let grid = default_tangent_grid(16, 16).unwrap();
    let set = erp_to_tangent(&ErpTensor::new(erp.clone(), ErpKind::Logits).unwrap(), &grid).unwrap();
    for p in &set.patches {
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
    let (back, counts) = tangent_to_erp(&set, 32, 64, ErpKind::Logits).unwrap();
    assert!(back.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    assert!(counts.iter().all(|&c| c >= 1));
}

#[test]
fn center_pixel_hits_tangent_point() {
    let (h, w) = (64, 128);
    let erp = Tensor::from_fn(&[1, h, w], |i| (i % 97) as f32 / 97.0);
    let grid = make_tangent_grid(3, 6, 80.0, 16, 16).unwrap();
    let set = erp_to_tangent(&ErpTensor::new(erp.clone(), ErpKind::Feature).unwrap(), &grid).unwrap();
    let (lat0, lon0) = grid.centers[6];
    assert_eq!((lat0, lon0), (0.0, 0.0));
    let want = panosfuda::sphere::sample_erp(&erp, lat0, lon0)[0];
    assert!((set.patches[6].at(&[0, 8, 8]) as f64 - want).abs() < 1e-6);
}

#[test]
fn default_grid_coverage_distance() {
    let grid = default_tangent_grid(64, 64).unwrap();
    assert!(grid.check_coverage().is_ok());
    let mut worst = 0.0f64;
    for a in 0..=180 {
        for b in 0..360 {
            let (lat, lon) = ((a as f64 - 90.0).to_radians(), (b as f64 - 180.0).to_radians());
            let d = grid
                .centers
                .iter()
                .map(|&(la, lo)| angular_distance(lat, lon, la, lo))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
        }
    }
    assert!(worst.to_degrees() < 40.0, "{}", worst.to_degrees());
}

#[test]
fn paper_strip_width() {
    let erp = ErpTensor::new(Tensor::zeros(&[3, 1024, 2048]), ErpKind::Image).unwrap();
    let set = erp_to_ffp(&erp, 90.0).unwrap();
    assert_eq!(set.patches.len(), 4);
    assert!(set.patches.iter().all(|p| p.shape() == [3, 1024, 512]));
}

#[test]
fn full_turn_strip_is_identity() {
    let t = Tensor::from_fn(&[3, 8, 16], |i| i as f32);
    let set = erp_to_ffp(&ErpTensor::new(t.clone(), ErpKind::Image).unwrap(), 360.0).unwrap();
    assert_eq!(set.patches.len(), 1);
    assert_eq!(set.patches[0], t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ffp_rebuild_is_bit_exact(h in 1usize..12, strips in prop::sample::select(vec![60.0, 72.0, 90.0, 120.0, 180.0, 360.0]),
                                mult in 1usize..4, seed in any::<u32>()) {
        let n = ffp_count(strips).unwrap();
        let w = n * mult;
        let t = Tensor::from_fn(&[2, h, w], |i| ((i as u64 * 2654435761 + seed as u64) % 1000) as f32 * 1e-3 - 0.5);
        let erp = ErpTensor::new(t.clone(), ErpKind::Feature).unwrap();
        let set = erp_to_ffp(&erp, strips).unwrap();
        prop_assert_eq!(set.patches.len(), n);
        for (k, p) in set.patches.iter().enumerate() {
            // column j of strip k is ERP column k * w/n + j
            for j in 0..mult {
                prop_assert_eq!(p.at(&[1, 0, j]), t.at(&[1, 0, k * mult + j]));
            }
        }
        let rebuilt = ffp_rebuild(&set).unwrap();
        prop_assert_eq!(rebuilt.tensor(), &t);
    }

    #[test]
    fn gnomonic_round_trip(lat0 in -1.4f64..1.4, lon0 in -3.1f64..3.1, dlat in -0.5f64..0.5, dlon in -0.5f64..0.5) {
        let lat = (lat0 + dlat).clamp(-1.5, 1.5);
        let lon = lon0 + dlon;
        if let Some((x, y)) = gnomonic_forward(lat0, lon0, lat, lon) {
            let (la, lo) = gnomonic_inverse(lat0, lon0, x, y);
            prop_assert!(angular_distance(la, lo, lat, lon) < 1e-9);
        }
    }

    #[test]
    fn strip_index_of_column(w4 in 1usize..64, col in 0usize..1000) {
        let w = 4 * w4;
        let col = col % w;
        let t = Tensor::from_fn(&[1, 1, w], |i| i as f32);
        let set = erp_to_ffp(&ErpTensor::new(t, ErpKind::Feature).unwrap(), 90.0).unwrap();
        let k = col / (w / 4);
        prop_assert_eq!(set.patches[k].at(&[0, 0, col - k * w4]), col as f32);
    }
}

#[test]
fn indivisible_width_rejected() {
    let erp = ErpTensor::new(Tensor::zeros(&[1, 5, 10]), ErpKind::Feature).unwrap();
    assert!(erp_to_ffp(&erp, 90.0).is_err());
    assert!(ffp_count(100.0).is_err());
}
