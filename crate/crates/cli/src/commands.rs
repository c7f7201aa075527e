use std::path::{Path, PathBuf};

use log::info;
use voxcal_core::adaptation::{self, train_adaptation, AdaptationLayer};
use voxcal_core::dataset::{make_dataset, plan_dataset, Dataset, LoadedSample, Split};
use voxcal_core::eval::{
    emit_report, format_table, median_table, run_ablation, AblationConfig, AblationRow, EnergyPredictor, Predictions,
};
use voxcal_core::gan::{self, gan_train, GanModel, GanSample};
use voxcal_core::pipeline::{
    self, adaptation_records, estimate_energy, joint_finetune, load_baseline, require, PipelineModels,
};
use voxcal_core::pnm::RgbImage;
use voxcal_core::regressor::{self, init_energy_baseline, init_regressor, train_energy_baseline, RegressorSample};
use voxcal_core::voxel::reference_voxel;
use voxcal_core::Tensor;

use crate::config::RunConfig;
use crate::record::RunRecord;
use crate::{CliError, Stage};

type Result<T> = std::result::Result<T, CliError>;

pub fn synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.paths.dataset_dir;
    let d = &cfg.data;
    // Reject bad parameters before touching an existing dataset.
    plan_dataset(d.n, d.classes, cfg.data_seed(), d.split_ratio, &d.scene)?;
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to regenerate it",
                dir.display()
            )));
        }
        if !dir.join("manifest.json").exists() {
            return Err(CliError::Usage(format!(
                "refusing to clear {}: it does not look like a dataset",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    let mut record = RunRecord::open(cfg);
    let manifest = record.time("synth", cfg.data_seed(), || {
        Ok(make_dataset(d.n, d.classes, cfg.data_seed(), d.split_ratio, &d.scene, dir)?)
    })?;
    println!(
        "wrote {} samples to {} ({} train / {} test)",
        manifest.entries.len(),
        dir.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    record.save(&cfg.paths.report_dir)
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::open(&cfg.paths.dataset_dir)?;
    let m = &ds.manifest;
    if m.scene.image_size != cfg.image_size || m.classes != cfg.data.classes {
        return Err(CliError::Usage(format!(
            "dataset has {}px images and {} classes; the config asks for {}px and {}",
            m.scene.image_size, m.classes, cfg.image_size, cfg.data.classes
        )));
    }
    Ok(ds)
}

fn cell_volume(ds: &Dataset, cfg: &RunConfig) -> f64 {
    ds.manifest.scene.cell_volume_ml(cfg.image_size)
}

fn regressor_samples(train: &[LoadedSample]) -> Vec<RegressorSample> {
    train
        .iter()
        .map(|s| RegressorSample {
            image: s.rgb.to_tensor(),
            label: s.meta.class_id,
            density: s.meta.density as f32,
            energy: s.meta.energy_kcal as f32,
        })
        .collect()
}

pub fn train(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let stages = match stage {
        Stage::All => vec![Stage::Gan, Stage::Regressor, Stage::Baseline, Stage::Adaptation],
        s => vec![s],
    };
    let ds = open_dataset(cfg)?;
    let train = ds.load_split(Split::Train, stages.contains(&Stage::Gan))?;
    let seed = cfg.seed;
    let ckpt = cfg.checkpoint_dir(seed);
    let losses = cfg.paths.report_dir.join("train").join(format!("seed-{seed}"));
    std::fs::create_dir_all(&ckpt)?;
    std::fs::create_dir_all(&losses)?;
    let mut record = RunRecord::open(cfg);
    for stage in stages {
        let name = format!("train {stage:?}").to_lowercase();
        info!("{name} on {} samples (seed {seed})", train.len());
        record.time(&name, seed, || match stage {
            Stage::Gan => train_gan(cfg, &ds, &train, &ckpt, &losses),
            Stage::Regressor => train_regressor(cfg, &train, &ckpt, &losses),
            Stage::Baseline => train_baseline(cfg, &train, &ckpt, &losses),
            Stage::Adaptation => train_refinement(cfg, &train, &ckpt, &losses),
            Stage::All => unreachable!("expanded above"),
        })?;
        record.save(&cfg.paths.report_dir)?;
    }
    println!("checkpoints in {}", ckpt.display());
    Ok(())
}

fn train_gan(cfg: &RunConfig, ds: &Dataset, train: &[LoadedSample], ckpt: &Path, losses: &Path) -> Result<()> {
    let cv = cell_volume(ds, cfg);
    let samples = train
        .iter()
        .map(|s| {
            let (depth, mask) = (s.depth.as_ref(), s.mask.as_ref());
            let voxel = reference_voxel(depth.expect("loaded with depth"), mask.expect("loaded with mask"), cfg.image_size, cv)?;
            Ok(GanSample {
                image: s.rgb.to_tensor(),
                voxel: voxel.to_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (g, d) = (cfg.generator(), cfg.discriminator());
    let model = GanModel::init(&g, &d, cfg.seed)?;
    let epochs = cfg.gan.epochs;
    let (model, reports) = gan_train(&samples, &g, &d, &cfg.gan_train(cfg.seed), model, |e, _| {
        info!("gan epoch {}/{epochs}", e + 1);
        Ok(())
    })?;
    gan::write_loss_csv(&losses.join("gan_loss.csv"), &reports)?;
    pipeline::save_generator(ckpt, &g, &model.generator, cv)?;
    pipeline::save_discriminator(ckpt, &d, &model.discriminator)?;
    Ok(())
}

fn train_regressor(cfg: &RunConfig, train: &[LoadedSample], ckpt: &Path, losses: &Path) -> Result<()> {
    let bb = cfg.backbone();
    let params = init_regressor(&bb, cfg.seed)?;
    let tcfg = cfg.regressor.train().to_config(cfg.seed);
    let (params, reports) = regressor::train_regressor(&regressor_samples(train), &bb, &tcfg, params)?;
    regressor::write_loss_csv(&losses.join("regressor_loss.csv"), &reports)?;
    pipeline::save_regressor(ckpt, &bb, &params)?;
    Ok(())
}

fn train_baseline(cfg: &RunConfig, train: &[LoadedSample], ckpt: &Path, losses: &Path) -> Result<()> {
    let bb = cfg.backbone();
    let params = init_energy_baseline(&bb, cfg.seed)?;
    let tcfg = cfg.baseline.to_config(cfg.seed);
    let (baseline, reports) = train_energy_baseline(&regressor_samples(train), &bb, &tcfg, params)?;
    regressor::write_loss_csv(&losses.join("baseline_loss.csv"), &reports)?;
    pipeline::save_baseline(ckpt, &baseline)?;
    Ok(())
}

fn train_refinement(cfg: &RunConfig, train: &[LoadedSample], ckpt: &Path, losses: &Path) -> Result<()> {
    let placeholder = AdaptationLayer::identity(cfg.data.classes, 1.0, cfg.adaptation.bias);
    let mut models = PipelineModels::load_upstream(ckpt, cfg.tau, placeholder)?;
    models.adaptation = AdaptationLayer::identity(cfg.data.classes, models.grid_volume(), cfg.adaptation.bias);
    let data: Vec<(Tensor<f32>, f64)> = train.iter().map(|s| (s.rgb.to_tensor(), s.meta.energy_kcal)).collect();
    let records = adaptation_records(&models, &data)?;
    let (layer, log) = train_adaptation(&records, models.adaptation.clone(), &cfg.adaptation_train(cfg.seed))?;
    adaptation::write_loss_csv(&losses.join("adaptation_loss.csv"), &log)?;
    pipeline::save_adaptation(ckpt, &layer)?;
    models.adaptation = layer;

    if cfg.joint_finetune {
        info!("joint fine-tune for {} epochs", cfg.joint.epochs);
        let log = joint_finetune(&mut models, &data, &cfg.joint(cfg.seed))?;
        adaptation::write_loss_csv(&losses.join("joint_loss.csv"), &log)?;
        pipeline::save_generator(ckpt, &models.gen_cfg, &models.generator, models.cell_volume)?;
        pipeline::save_regressor(ckpt, &models.reg_cfg, &models.regressor)?;
        pipeline::save_adaptation(ckpt, &models.adaptation)?;
    }
    Ok(())
}

/// `dish_00012/rgb.ppm` is named after its directory; anything else after its file stem.
fn image_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "rgb" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn infer(cfg: &RunConfig, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let models = PipelineModels::load(&cfg.checkpoint_dir(cfg.seed), cfg.tau)?;
    let out = out.map_or_else(|| cfg.paths.report_dir.join("infer"), Path::to_owned);
    std::fs::create_dir_all(&out)?;
    let mut record = RunRecord::open(cfg);
    record.time("infer", cfg.seed, || {
        for path in images {
            require(path)?;
            let id = image_id(path);
            let estimate = estimate_energy(&models, &RgbImage::read(path)?, &id)?;
            std::fs::write(out.join(format!("{id}.json")), serde_json::to_string_pretty(&estimate)?)?;
            println!("{}", serde_json::to_string(&estimate)?);
        }
        Ok(())
    })?;
    record.save(&cfg.paths.report_dir)
}

/// Test image and its groundtruth energy.
struct TestItem {
    image: Tensor<f32>,
    energy: f64,
}

fn test_items(cfg: &RunConfig) -> Result<Vec<(String, TestItem, f64)>> {
    let ds = open_dataset(cfg)?;
    Ok(ds
        .load_split(Split::Test, false)?
        .into_iter()
        .map(|s| {
            let energy = s.meta.energy_kcal;
            (s.id, TestItem { image: s.rgb.to_tensor(), energy }, energy)
        })
        .collect())
}

type Predictor = Box<dyn EnergyPredictor<TestItem>>;

fn oracle() -> Predictor {
    Box::new(|s: &TestItem| Ok(s.energy))
}

fn pipeline_predictor(models: PipelineModels) -> Predictor {
    Box::new(move |s: &TestItem| {
        let (p, v, d) = models.upstream(&s.image)?;
        Ok(d * models.adaptation.refine_volume(&p, v)?)
    })
}

fn print_and_record(record: &mut RunRecord, rows: &[AblationRow]) -> String {
    let table = median_table(rows);
    for (label, m) in &table {
        record.metrics.insert(label.clone(), m.clone());
    }
    let text = format_table(&table);
    print!("{text}");
    text
}

pub fn eval(cfg: &RunConfig, use_oracle: bool) -> Result<()> {
    let items = test_items(cfg)?;
    let predictor = if use_oracle {
        oracle()
    } else {
        pipeline_predictor(PipelineModels::load(&cfg.checkpoint_dir(cfg.seed), cfg.tau)?)
    };
    let mut record = RunRecord::open(cfg);
    let preds = record.time("eval", cfg.seed, || Ok(voxcal_core::eval::evaluate(&items, predictor.as_ref())?))?;
    let rows = vec![AblationRow {
        config: AblationConfig::Full.label().to_owned(),
        seed: cfg.seed,
        metrics: preds.report()?,
    }];
    let out = cfg.paths.report_dir.join("eval");
    emit_report(&rows, &[(AblationConfig::Full.label().to_owned(), &preds)], &out)?;
    preds.write_csv(&out.join("predictions.csv"))?;
    print_and_record(&mut record, &rows);
    record.save(&cfg.paths.report_dir)
}

pub fn ablate(cfg: &RunConfig, use_oracle: bool) -> Result<()> {
    let seeds = cfg.seeds();
    if !use_oracle {
        // Fail before any evaluation if a seed is incomplete.
        for &seed in &seeds {
            let dir = cfg.checkpoint_dir(seed);
            for name in [
                pipeline::GENERATOR_CKPT,
                pipeline::REGRESSOR_CKPT,
                pipeline::ADAPTATION_CKPT,
                pipeline::BASELINE_CKPT,
            ] {
                require(&dir.join(name))?;
            }
        }
    }
    let items = test_items(cfg)?;
    let mut record = RunRecord::open(cfg);
    let (rows, preds) = record.time("ablate", cfg.seed, || {
        Ok(run_ablation(&items, &seeds, |seed| {
            if use_oracle {
                return Ok(AblationConfig::ALL.into_iter().map(|c| (c, oracle())).collect());
            }
            let dir = cfg.checkpoint_dir(seed);
            let full = PipelineModels::load(&dir, cfg.tau)?;
            let mut unrefined = full.clone();
            let a = &full.adaptation;
            unrefined.adaptation = AdaptationLayer::identity(a.classes, a.scale, a.use_bias());
            let baseline = load_baseline(&dir)?;
            let direct: Predictor = Box::new(move |s: &TestItem| baseline.predict(&s.image));
            Ok(vec![
                (AblationConfig::Module2Only, direct),
                (AblationConfig::Module1_2, pipeline_predictor(unrefined)),
                (AblationConfig::Full, pipeline_predictor(full)),
            ])
        })?)
    })?;
    let out = cfg.paths.report_dir.join("ablate");
    // Scatter the first seed's three configurations.
    let series: Vec<(String, &Predictions)> = rows.iter().zip(&preds).take(3).map(|(r, p)| (r.config.clone(), p)).collect();
    emit_report(&rows, &series, &out)?;
    let table = print_and_record(&mut record, &rows);
    std::fs::write(out.join("table.txt"), table)?;
    record.save(&cfg.paths.report_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_ids() {
        assert_eq!(image_id(Path::new("data/dish_00012/rgb.ppm")), "dish_00012");
        assert_eq!(image_id(Path::new("photos/lunch.ppm")), "lunch");
    }
}
