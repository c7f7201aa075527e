#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxcal_autodiff::{ParamSet, Tensor};
use voxcal_core::dataset::{generate_dish, plan_dataset, SceneConfig};
use voxcal_core::gan::GanSample;
use voxcal_core::voxel::reference_voxel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()).unwrap()
}

/// Parameter names and their values widened to f64, for gradient checks.
pub fn widen(params: &ParamSet) -> (Vec<String>, Vec<Tensor<f64>>) {
    params.iter().map(|(n, t)| (n.to_owned(), t.cast())).unzip()
}

/// Image / reference-voxel pairs from the synthetic renderer.
pub fn gan_samples(n: usize, res: usize, seed: u64) -> Vec<GanSample> {
    let scene = SceneConfig {
        image_size: res,
        ..SceneConfig::default()
    };
    let (_, specs) = plan_dataset(n, 4, seed, 0.5, &scene).unwrap();
    specs
        .iter()
        .map(|s| {
            let d = generate_dish(s, &scene).unwrap();
            let v = reference_voxel(&d.raw_depth, &d.mask, res, scene.cell_volume_ml(res)).unwrap();
            GanSample {
                image: d.rgb.to_tensor(),
                voxel: v.to_tensor(),
            }
        })
        .collect()
}

/// Core errors inside gradient-check closures, which speak the autodiff error type.
pub fn lift<T>(r: voxcal_core::Result<T>) -> voxcal_autodiff::Result<T> {
    r.map_err(|e| voxcal_autodiff::Error::InvalidArgument {
        op: "test objective",
        detail: e.to_string(),
    })
}
