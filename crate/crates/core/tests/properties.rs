use facegeom_core::align::rigid_align;
use facegeom_core::eval_metrics::{
    canonical_correlation, histogram, laplacian_pyramid, nn_distances, nn_distances_brute, reconstruct_pyramid,
    swd_matrices, wasserstein_1d, Descriptor,
};
use facegeom_core::geom_image::{augment_geometry, augment_texture, rasterize, ChannelNorm, ImageKind, PlanarImage};
use facegeom_core::masked_batch::{assemble_batch, mask_from_regions, Region};
use facegeom_core::morphable::build_basis;
use facegeom_core::parametrize::{boundary_embedding, weighted_embed, EdgeWeights};
use facegeom_core::testkit::{grid_mesh, perturb_interior, Diagonal};
use facegeom_core::Vec3;
use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rotation(seed: u64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    UnitQuaternion::from_scaled_axis(axis.normalize() * rng.random_range(-3.0..3.0))
        .to_rotation_matrix()
        .into_inner()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rigid_residual_invariant_under_common_similarity(seed in 0u64..10_000, scale in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| p * 1.3 + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.5))
            .collect();
        let base = rigid_align(&src, &dst).unwrap();
        let r = rotation(seed + 1);
        let t = Vector3::new(1.0, -2.0, 0.5);
        let moved = |pts: &[Vec3]| pts.iter().map(|p| r * p * scale + t).collect::<Vec<_>>();
        let fit = rigid_align(&moved(&src), &moved(&dst)).unwrap();
        let expected = base.residual_sum_sq * scale * scale;
        prop_assert!((fit.residual_sum_sq - expected).abs() <= 1e-9 * expected.max(1.0));
        prop_assert!((fit.residual_relative - base.residual_relative).abs() <= 1e-9);
    }

    #[test]
    fn swd_is_symmetric_and_nonnegative(seed in 0u64..10_000, n in 5usize..60, m in 5usize..60) {
        let a = matrix(n, 4, seed);
        let b = matrix(m, 4, seed + 1);
        let ab = swd_matrices(&a, &b, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ba = swd_matrices(&b, &a, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn w1_of_a_shift_is_the_shift(xs in prop::collection::vec(-10.0f64..10.0, 1..50), c in -5.0f64..5.0) {
        let mut a = xs.clone();
        a.sort_by(f64::total_cmp);
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein_1d(&a, &b) - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn cca_is_invariant_to_invertible_transforms(seed in 0u64..10_000) {
        let x = matrix(80, 3, seed);
        let mut y = matrix(80, 2, seed + 7);
        for r in 0..80 {
            y[(r, 0)] += 0.8 * x[(r, 1)];
        }
        let base = canonical_correlation(&x, &y, 2).unwrap();
        let mix = matrix(3, 3, seed + 3) + DMatrix::identity(3, 3) * 2.0;
        let shifted = (&x * mix).add_scalar(4.0);
        let other = canonical_correlation(&shifted, &y, 2).unwrap();
        prop_assert!((&base.correlations - &other.correlations).amax() < 1e-8);
        prop_assert!(base.correlations.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn accelerated_nn_matches_brute_force(seed in 0u64..10_000, nq in 1usize..30, nr in 1usize..60) {
        let desc = |n: usize, s: u64| -> Vec<Descriptor> {
            let m = matrix(n, 5, s);
            (0..n).map(|i| Descriptor { id: i.to_string(), values: m.row(i).iter().copied().collect() }).collect()
        };
        let (q, r) = (desc(nq, seed), desc(nr, seed + 1));
        let fast = nn_distances(&q, &r).unwrap();
        let slow = nn_distances_brute(&q, &r).unwrap();
        prop_assert!(fast.iter().zip(&slow).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn histogram_counts_every_value(xs in prop::collection::vec(-1e3f64..1e3, 1..200), bins in 1usize..30) {
        let h = histogram(&xs, bins).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), xs.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
    }

    #[test]
    fn pyramid_reconstructs_its_input(seed in 0u64..10_000, levels in 1usize..4) {
        let (w, h) = (16 << (levels - 1), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * w * h).map(|_| rng.random_range(0.0..1.0f32)).collect();
        let img = PlanarImage::from_data(w, h, 3, data).unwrap();
        let back = reconstruct_pyramid(&laplacian_pyramid(&img, levels));
        let err = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn masked_pixels_are_zero_and_masks_shared(seed in 0u64..10_000, w in 2usize..24, h in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| {
            PlanarImage::from_data(w, h, 3, (0..3 * w * h).map(|_| rng.random_range(0.01..1.0f32)).collect()).unwrap()
        };
        let (real, fake) = (img(&mut rng), img(&mut rng));
        let region = Region::circle(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64), 3.0);
        let mask = mask_from_regions(w, h, &[region]).unwrap();
        // covering a region twice changes nothing
        prop_assert_eq!(&mask_from_regions(w, h, &[region, region]).unwrap(), &mask);
        let batch = assemble_batch(&[real], &[fake], std::slice::from_ref(&mask)).unwrap();
        prop_assert_eq!(batch.channel(false, 0, 3), batch.channel(true, 0, 3));
        for ch in 0..3 {
            for fake_side in [false, true] {
                let plane = batch.channel(fake_side, 0, ch);
                for (px, &k) in mask.data.iter().enumerate() {
                    prop_assert_eq!(plane[px] == 0.0, k == 0);
                }
            }
        }
    }

    #[test]
    fn random_weights_give_flip_free_embeddings(seed in 0u64..10_000, nx in 3usize..14, ny in 3usize..14) {
        let mesh = perturb_interior(&grid_mesh(nx, ny, Diagonal::Random { seed }), 0.02, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..mesh.edges().len()).map(|_| rng.random_range(0.01..100.0)).collect();
        let weights = EdgeWeights::new(&mesh, w).unwrap();
        let ring = mesh.boundary_loop(None).unwrap();
        let boundary = boundary_embedding(&ring, mesh.vertices()).unwrap();
        let map = weighted_embed(&mesh, &weights, &boundary).unwrap();
        prop_assert_eq!(map.flipped_count(&mesh), 0);
        // only weight ratios matter
        let scaled = weighted_embed(&mesh, &weights.scaled(7.5), &boundary).unwrap();
        let d = map.uv().iter().zip(scaled.uv()).map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs())).fold(0.0, f64::max);
        prop_assert!(d < 1e-10);
    }

    #[test]
    fn pca_coefficients_round_trip(seed in 0u64..10_000, k in 1usize..6) {
        let data = matrix(30, 8, seed);
        let model = build_basis(&data, k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
        let back = model.project(&model.reconstruct(&alpha).unwrap()).unwrap();
        prop_assert!((back - alpha).amax() < 1e-10);
    }

    #[test]
    fn augmentations_are_involutions(seed in 0u64..10_000, width in 8usize..40) {
        let mesh = perturb_interior(&grid_mesh(6, 6, Diagonal::Random { seed }), 0.3, seed);
        let ring = mesh.boundary_loop(None).unwrap();
        let boundary = boundary_embedding(&ring, mesh.vertices()).unwrap();
        let weights = EdgeWeights::new(&mesh, vec![1.0; mesh.edges().len()]).unwrap();
        let map = weighted_embed(&mesh, &weights, &boundary).unwrap();
        let pts: Vec<[f64; 3]> = mesh.vertices().iter().map(|v| [v.x, v.y, v.z]).collect();
        let c = 0.9;
        let norm = ChannelNorm::from_points(pts.iter()).unwrap().with_mirror_x(c);
        let img = rasterize(&mesh, &map, &pts, width, ImageKind::Geometry, Some(norm)).unwrap();
        let variants = augment_geometry(&img, c).unwrap();
        for (b, v) in variants.iter().enumerate() {
            prop_assert_eq!(&augment_geometry(v, c).unwrap()[b], &img);
        }
        let colors: Vec<[f64; 3]> = map.uv().iter().map(|u| [u[0], u[1], 0.5]).collect();
        let tex = rasterize(&mesh, &map, &colors, width, ImageKind::Texture, None).unwrap();
        prop_assert_eq!(&augment_texture(&augment_texture(&tex)[1])[1], &tex);
    }
}
