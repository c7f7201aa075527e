use voxcal_core::dataset::{analytic_volume, generate_dish, DishSpec, SceneConfig, Shape};
use voxcal_core::depth::{apply_mask, inpaint_dilate, normalize};
use voxcal_core::voxel::{depth_to_voxel, reference_voxel};

fn spec(shape: Shape, r: f64, h: f64) -> DishSpec {
    DishSpec {
        shape,
        class_id: Shape::ALL.iter().position(|&s| s == shape).unwrap(),
        radius_mm: r,
        height_mm: h,
        center_mm: [3.3, -2.1],
        density: 1.0,
        plate_radius_mm: 70.0,
        seed: 11,
    }
}

fn specs() -> Vec<DishSpec> {
    vec![
        spec(Shape::SphericalCap, 50.0, 40.0),
        spec(Shape::Cone, 50.0, 60.0),
        spec(Shape::Cylinder, 50.0, 30.0),
        spec(Shape::Paraboloid, 50.0, 50.0),
    ]
}

fn relative_error(s: &DishSpec, n: usize) -> f64 {
    let scene = SceneConfig::clean(n);
    let d = generate_dish(s, &scene).unwrap();
    let g = reference_voxel(&d.raw_depth, &d.mask, n, scene.cell_volume_ml(n)).unwrap();
    (g.volume() - d.true_volume_ml).abs() / d.true_volume_ml
}

#[test]
fn pipeline_volume_within_five_percent_at_64() {
    for s in specs() {
        let e = relative_error(&s, 64);
        assert!(e <= 0.05, "{:?}: {e}", s.shape);
    }
}

#[test]
fn pipeline_volume_error_shrinks_with_resolution() {
    for s in specs() {
        let (e64, e128) = (relative_error(&s, 64), relative_error(&s, 128));
        assert!(e128 <= 0.6 * e64, "{:?}: {e64} -> {e128}", s.shape);
    }
}

#[test]
fn hole_free_rendering_needs_no_inpainting() {
    let scene = SceneConfig::clean(32);
    for s in specs() {
        let d = generate_dish(&s, &scene).unwrap();
        assert_eq!(d.raw_depth.missing_count(), 0);
        assert_eq!(inpaint_dilate(&d.raw_depth, 0).unwrap(), d.raw_depth);
        let g = depth_to_voxel(&normalize(&apply_mask(&d.raw_depth, &d.mask).unwrap()).unwrap(), 32).unwrap();
        assert!(g.columns_are_suffixes());
        assert_eq!(g.footprint(), d.mask.values);
    }
}

#[test]
fn cap_volume_matches_quadrature() {
    // Midpoint rule in polar coordinates over the height field.
    for (r, h) in [(50.0, 40.0), (35.0, 10.0), (60.0, 58.0)] {
        let s = spec(Shape::SphericalCap, r, h);
        let steps = 20_000;
        let dr = r / steps as f64;
        let integral: f64 = (0..steps)
            .map(|i| {
                let rho = (i as f64 + 0.5) * dr;
                2.0 * std::f64::consts::PI * rho * s.height_at(rho) * dr
            })
            .sum();
        let exact = analytic_volume(&s);
        assert!((integral - exact).abs() / exact < 1e-3, "{integral} vs {exact}");
    }
}

#[test]
fn one_quantum_dish_is_thinner_than_a_layer() {
    let scene = SceneConfig::clean(32);
    let s = spec(Shape::Cylinder, 40.0, 0.1);
    let d = generate_dish(&s, &scene).unwrap();
    assert!(d.mask.popcount() > 0);
    let layer = scene.cell_volume_ml(32) * (32 * 32) as f64;
    assert!(d.true_volume_ml < layer);
}
