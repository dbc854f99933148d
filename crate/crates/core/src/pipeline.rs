//! End-to-end experiment: pretrain on source classes, fine-tune onto target
//! conditions, sample, and compare feature statistics with held-out scenes.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::finetune::{
    embedding_sources, prepare_finetune, train, EmbeddingInit, ScheduleSpec, TrainConfig, TrainMode, TrainReport,
};
use crate::metrics::frechet_feature_distance;
use crate::model::{DiT, DiTConfig};
use crate::sample::ddpm_sample;
use crate::scene::{source_dataset, target_dataset, SceneSample, SOURCE_CLASSES, TARGET_CONDITIONS};
use crate::schedule::NoiseSchedule;
use crate::ssei::{extract_features, FeatureVector};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub model: DiTConfig,
    pub rank: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub heldout_count: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Generated images per target condition at evaluation.
    pub samples_per_condition: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Desk-scale settings used by the acceptance suite.
    pub fn small(seed: u64) -> Self {
        let model = DiTConfig {
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            steps: 100,
            ..DiTConfig::default()
        };
        Self {
            model,
            rank: 2,
            source_count: 1000,
            target_count: 500,
            heldout_count: 200,
            pretrain: TrainConfig {
                mode: TrainMode::PretrainFull,
                steps: 1000,
                batch_size: 32,
                learning_rate: 3e-3,
                schedule: ScheduleSpec::Linear,
                seed,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                mode: TrainMode::FinetuneModulation,
                steps: 500,
                batch_size: 16,
                learning_rate: 2e-3,
                tau: 500,
                schedule: ScheduleSpec::ProgressiveScos,
                seed: seed + 1,
                ..TrainConfig::default()
            },
            samples_per_condition: 20,
            seed,
        }
    }
}

/// Datasets derived from the pipeline seed.
pub struct PipelineData {
    pub source: Vec<SceneSample>,
    pub target: Vec<SceneSample>,
    pub heldout: Vec<SceneSample>,
}

impl PipelineData {
    pub fn generate(cfg: &PipelineConfig) -> Self {
        Self {
            source: source_dataset(cfg.source_count, cfg.seed.wrapping_mul(3).wrapping_add(11)),
            target: target_dataset(cfg.target_count, cfg.seed.wrapping_mul(3).wrapping_add(12)),
            heldout: target_dataset(cfg.heldout_count, cfg.seed.wrapping_mul(3).wrapping_add(13)),
        }
    }
}

pub fn pretrain(cfg: &PipelineConfig, data: &PipelineData) -> Result<(DiT<f32>, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DiT::new(cfg.model.clone(), &mut rng)?;
    let report = train(&mut model, &data.source, &cfg.pretrain)?;
    Ok((model, report))
}

/// Fine-tunes a copy of `pretrained` with `cfg.finetune` overridden by `mode`.
pub fn finetune(
    cfg: &PipelineConfig,
    data: &PipelineData,
    pretrained: &DiT<f32>,
    mode: TrainMode,
    init: EmbeddingInit,
) -> Result<(DiT<f32>, TrainReport)> {
    let sources = embedding_sources(
        init,
        &data.source,
        &data.target,
        SOURCE_CLASSES,
        TARGET_CONDITIONS,
        cfg.seed,
    )?;
    let mut model = prepare_finetune(pretrained, mode, cfg.rank, &sources, cfg.seed)?;
    let tc = TrainConfig {
        mode,
        ..cfg.finetune.clone()
    };
    let report = train(&mut model, &data.target, &tc)?;
    Ok((model, report))
}

pub fn features_of(images: &[Vec<f32>]) -> Result<Vec<FeatureVector>> {
    images.iter().map(|i| extract_features(i)).collect()
}

/// `n` images for each embedding row in `rows`, grouped by row. Row `k`
/// draws its noise from seed `1000·seed + k`.
pub fn generate(model: &DiT<f32>, sched: &NoiseSchedule, rows: &[usize], n: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    let shape = model.config().image_shape();
    let mut out = Vec::with_capacity(rows.len() * n);
    for (k, &row) in rows.iter().enumerate() {
        let s = seed.wrapping_mul(1000).wrapping_add(k as u64);
        out.extend(ddpm_sample(model, sched, row, &shape, n, s)?);
    }
    Ok(out)
}

/// Fréchet distance between generated images and the held-out target set.
pub fn heldout_distance(data: &PipelineData, images: &[Vec<f32>]) -> Result<f64> {
    let real: Vec<Vec<f32>> = data.heldout.iter().map(|s| s.image.clone()).collect();
    frechet_feature_distance(&features_of(&real)?, &features_of(images)?, true)
}

/// Headline comparison of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub pretrained: DiT<f32>,
    pub modulation: DiT<f32>,
    pub bias_only: DiT<f32>,
    pub fd_modulation: f64,
    pub fd_pretrained_ssei: f64,
    pub fd_bias_only: f64,
    pub modulation_fraction: f64,
}

/// Linear schedule the pretrained model was trained on.
pub fn pretrain_schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    let lin = cfg.pretrain.linear_betas(cfg.model.steps);
    cfg.pretrain.schedule.final_schedule(cfg.model.steps, lin)
}

pub fn finetune_schedule(cfg: &PipelineConfig) -> Result<NoiseSchedule> {
    let lin = cfg.finetune.linear_betas(cfg.model.steps);
    cfg.finetune.schedule.final_schedule(cfg.model.steps, lin)
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let data = PipelineData::generate(cfg);
    let (pretrained, _) = pretrain(cfg, &data)?;
    let (modulation, _) = finetune(
        cfg,
        &data,
        &pretrained,
        TrainMode::FinetuneModulation,
        EmbeddingInit::Ssei,
    )?;
    let (bias_only, _) = finetune(
        cfg,
        &data,
        &pretrained,
        TrainMode::FinetuneBiasOnly,
        EmbeddingInit::Ssei,
    )?;

    let ssei_rows = embedding_sources(
        EmbeddingInit::Ssei,
        &data.source,
        &data.target,
        SOURCE_CLASSES,
        TARGET_CONDITIONS,
        cfg.seed,
    )?;
    let new_rows: Vec<usize> = (0..TARGET_CONDITIONS).map(|c| SOURCE_CLASSES + c).collect();
    let ft_sched = finetune_schedule(cfg)?;
    let fd_modulation = heldout_distance(
        &data,
        &generate(&modulation, &ft_sched, &new_rows, cfg.samples_per_condition, cfg.seed)?,
    )?;
    let fd_bias_only = heldout_distance(
        &data,
        &generate(&bias_only, &ft_sched, &new_rows, cfg.samples_per_condition, cfg.seed)?,
    )?;
    let fd_pretrained_ssei = heldout_distance(
        &data,
        &generate(
            &pretrained,
            &pretrain_schedule(cfg)?,
            &ssei_rows,
            cfg.samples_per_condition,
            cfg.seed,
        )?,
    )?;
    Ok(PipelineOutcome {
        modulation_fraction: crate::finetune::trainable_fraction(&modulation),
        pretrained,
        modulation,
        bias_only,
        fd_modulation,
        fd_pretrained_ssei,
        fd_bias_only,
    })
}
