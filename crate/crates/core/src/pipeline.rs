//! End-to-end workflows behind the command line: backbone acquisition,
//! fine-tuning runs written to disk, evaluation of saved runs, parameter
//! tables and the gradient self-check.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ModelConfig};
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::data::{generate_dataset, load_dataset, Dataset, GroundingSample, Split};
use crate::error::{Error, Result};
use crate::pot::CostMatrix;
use crate::tensor::Tensor;
use crate::train::{
    build_pretrained_backbone, evaluate_map, gradient_check, load_checkpoint, masked_numel, read_manifest,
    save_checkpoint, select_trainable, train_finetune, FinetuneStrategy, GradCheckReport, PretrainReport,
    StrategyKind, TrainConfig,
};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const BACKBONE_DIR: &str = "backbone";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes every parameter of an unadapted backbone.
pub fn save_backbone(model: &Backbone, dir: &Path) -> Result<()> {
    let all = vec![true; model.store.len()];
    save_checkpoint(model, &FinetuneStrategy::of(StrategyKind::Full), &all, dir)?;
    Ok(())
}

/// Reads a backbone written by [`save_backbone`]; every parameter comes
/// back frozen.
pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    let manifest = read_manifest(dir)?;
    let mut model = Backbone::new(manifest.model.clone(), 0)?;
    load_checkpoint(&mut model, dir)?;
    model.freeze_backbone();
    Ok(model)
}

pub fn obtain_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.data),
    }
}

/// Loads `cfg.backbone_dir`, or pretrains one on `cfg.source`.
pub fn obtain_backbone(cfg: &RunConfig) -> Result<(Backbone, Option<PretrainReport>)> {
    if let Some(dir) = &cfg.backbone_dir {
        let model = load_backbone(dir)?;
        check_model(&model.cfg, &cfg.model)?;
        return Ok((model, None));
    }
    let source = generate_dataset(&cfg.source)?;
    let (model, report) = build_pretrained_backbone(&cfg.model, &source, &cfg.pretrain)?;
    Ok((model, Some(report)))
}

fn check_model(found: &ModelConfig, wanted: &ModelConfig) -> Result<()> {
    if found.num_blocks != wanted.num_blocks || found.d != wanted.d {
        return Err(Error::Config(format!(
            "backbone has d={} and {} blocks, run asks for d={} and {} blocks",
            found.d, found.num_blocks, wanted.d, wanted.num_blocks
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub initial_val_map: f64,
    pub final_val_map: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub runs: Vec<RunSummary>,
    pub mean_val_map: f64,
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// One fine-tuning run into `out`: checkpoint, metrics log, summary and
/// the resolved config that replays it.
pub fn finetune_run(cfg: &RunConfig, backbone: &Backbone, data: &Dataset, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = backbone.clone();
    cfg.strategy.prepare(&mut model, cfg.seed)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let report = train_finetune(&mut model, &cfg.strategy, data, &train, Some(&mut writer))?;
    drop(writer);
    save_checkpoint(&model, &cfg.strategy, &report.mask, &out.join(CHECKPOINT_DIR))?;
    let summary = RunSummary {
        seed: cfg.seed,
        strategy: cfg.strategy.kind,
        initial_val_map: report.initial_val_map,
        final_val_map: report.final_val_map,
        trainable_params: masked_numel(&model, &report.mask),
        total_params: model.total_params(),
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

/// Runs `cfg.seeds` consecutive seeds. A single seed writes straight into
/// `out`; several write `out/seed-<n>/` plus an aggregate summary. Without
/// a configured backbone, the pretrained one is saved to `out/backbone`
/// and recorded in every resolved config.
pub fn finetune_seeds(cfg: &RunConfig, out: &Path) -> Result<MultiSeedSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = obtain_data(cfg)?;
    let (backbone, pretrained) = obtain_backbone(cfg)?;
    let mut cfg = cfg.clone();
    if pretrained.is_some() {
        let dir = out.join(BACKBONE_DIR);
        save_backbone(&backbone, &dir)?;
        cfg.backbone_dir = Some(absolute(&dir));
    } else if let Some(dir) = cfg.backbone_dir.take() {
        cfg.backbone_dir = Some(absolute(&dir));
    }
    if let Some(dir) = cfg.data_dir.take() {
        cfg.data_dir = Some(absolute(&dir));
    }
    let mut runs = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds as u64 {
        let run_cfg = RunConfig {
            seed: cfg.seed + s,
            seeds: 1,
            ..cfg.clone()
        };
        let dir = if cfg.seeds == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seed-{}", run_cfg.seed))
        };
        runs.push(finetune_run(&run_cfg, &backbone, &data, &dir)?);
    }
    let mean_val_map = runs.iter().map(|r| r.final_val_map).sum::<f64>() / runs.len() as f64;
    let summary = MultiSeedSummary { runs, mean_val_map };
    if cfg.seeds > 1 {
        let path = out.join(SUMMARY_FILE);
        fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

/// Rebuilds the model of a saved run and scores one split.
pub fn eval_run(run_dir: &Path, split: Split) -> Result<f64> {
    let path = run_dir.join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    let backbone_dir = cfg
        .backbone_dir
        .clone()
        .ok_or_else(|| Error::Config(format!("{} records no backbone", path.display())))?;
    let mut model = load_backbone(&backbone_dir)?;
    cfg.strategy.prepare(&mut model, cfg.seed)?;
    load_checkpoint(&mut model, &run_dir.join(CHECKPOINT_DIR))?;
    let data = obtain_data(&cfg)?;
    evaluate_map(&model, data.split(split))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub strategy: StrategyKind,
    pub trainable: usize,
    pub total: usize,
}

impl ParamCountRow {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Trainable and total parameter counts of every strategy on `model_cfg`.
pub fn param_count_table(model_cfg: &ModelConfig, base: &FinetuneStrategy) -> Result<Vec<ParamCountRow>> {
    let frozen = Backbone::new(model_cfg.clone(), 0)?;
    StrategyKind::ALL
        .iter()
        .map(|&kind| {
            let mut model = frozen.clone();
            let s = FinetuneStrategy {
                kind,
                ..base.clone()
            };
            s.prepare(&mut model, 0)?;
            let mask = select_trainable(&model, &s)?;
            Ok(ParamCountRow {
                strategy: kind,
                trainable: masked_numel(&model, &mask),
                total: model.total_params(),
            })
        })
        .collect()
}

/// Finite-difference check of the full objective on a `d = 8`, two-block
/// model with READ adapters moved off their initial point.
pub fn grad_check_suite(seed: u64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let spec = crate::data::DatasetSpec {
        seed,
        n_train: 2,
        n_val: 1,
        n_test: 1,
        n_v: (5, 6),
        n_l: (3, 4),
        span: (2, 3),
        concept_dim: 12,
        n_concepts: 4,
        n_background: 3,
        n_filler: 3,
        d_video: 6,
        d_lang: 6,
        ..Default::default()
    };
    let data = generate_dataset(&spec)?;
    let cfg = ModelConfig {
        d: 8,
        num_blocks: 2,
        num_heads: 2,
        d_in_video: 6,
        d_in_lang: 6,
        ..ModelConfig::default()
    };
    let mut model = Backbone::new(cfg, seed)?;
    model.freeze_backbone();
    let strategy = FinetuneStrategy::of(StrategyKind::Read);
    strategy.prepare(&mut model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for id in model.attachment.param_ids() {
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let mask = select_trainable(&model, &strategy)?;
    let samples: Vec<&GroundingSample> = data.train.iter().collect();
    let train = TrainConfig {
        lambda_pvla: 1.0,
        ..TrainConfig::default()
    };
    gradient_check(&model, &mask, &samples, &train, 1e-5)
}

/// Parses rows of whitespace-separated reals; blank lines and `#`
/// comments are skipped.
pub fn parse_cost_matrix(text: &str) -> Result<CostMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: {tok:?} is not a number", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Config(format!(
                    "line {}: {} entries, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config("cost matrix is empty".into()));
    }
    CostMatrix::from_rows(&rows)
}

pub fn read_cost_matrix(path: &Path) -> Result<CostMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cost_matrix(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_text_parsing() {
        let c = parse_cost_matrix("# header\n1 2\n\n3 5\n").unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 2));
        assert_eq!(c.at(1, 1), 5.0);
        assert!(parse_cost_matrix("1 2\n3\n").is_err());
        assert!(parse_cost_matrix("1 x\n").is_err());
        assert!(parse_cost_matrix("").is_err());
    }

    #[test]
    fn param_table_orders_strategies() {
        let rows = param_count_table(&ModelConfig::default(), &FinetuneStrategy::default()).unwrap();
        let get = |k| rows.iter().find(|r| r.strategy == k).unwrap();
        let read = get(StrategyKind::Read);
        assert!(read.fraction() < 0.015);
        assert!(get(StrategyKind::Adapter).trainable > read.trainable);
        assert!(get(StrategyKind::Lora).trainable > read.trainable);
        assert_eq!(get(StrategyKind::Full).fraction(), 1.0);
    }

    #[test]
    fn suite_passes() {
        let rep = grad_check_suite(0).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        assert!(rep.checked > 100);
    }
}
