//! Subcommand implementations and the argv entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pyramidflow::autodiff::{MemoryReport, TapeMode};
use pyramidflow::model::PyramidFlowModel;
use pyramidflow::tensor::Tensor4;
use pyramidflow::train::{
    anomaly_map, aupro, bench_memory, fit_templates, pixel_auroc, train_step, AdamConfig, LatentTemplate,
    OptimizerState, StepOptions, StepReport,
};
use pyramidflow::Scalar;

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::{self, model_from_records, model_records, read_meta, template_from_records, template_records};
use crate::config::{Precision, RunConfig};
use crate::dataset::{self, Sample, Split};
use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;
use crate::netpbm::write_score_map;
use crate::synth::{self, SynthConfig, Texture};

#[derive(Debug, Parser)]
#[command(name = "pyramidflow", version, about = "Invertible pyramid flow for unsupervised defect localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TextureArg {
    Grating,
    ValueNoise,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic defect dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        defect_rate: f64,
        #[arg(long, value_enum, default_value_t = TextureArg::Grating)]
        texture: TextureArg,
    },
    /// Train on `DATA/train/good` and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        augment: bool,
    },
    /// Estimate latent means over the training images.
    Template {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and write per-image metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Peak activation memory of both backward modes over a depth sweep.
    BenchMem {
        #[arg(long, default_value = "1:8")]
        depths: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image side; defaults to twice the coarsest-level divisor.
        #[arg(long)]
        size: Option<usize>,
    },
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { out, n, size, seed, defect_rate, texture } => {
            let cfg = SynthConfig {
                texture: match texture {
                    TextureArg::Grating => Texture::Grating,
                    TextureArg::ValueNoise => Texture::ValueNoise,
                },
                size,
                defect_rate,
                seed,
            };
            let s = synth::generate(&cfg, n, &out)?;
            println!(
                "wrote {} train, {} good test, {} defect test images ({} with masks) to {}",
                s.train,
                s.test_good,
                s.test_defect,
                s.defective_with_mask,
                out.display()
            );
            Ok(())
        }
        Command::Train { data, config, ckpt, steps, augment } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let aug = augment.then(AugmentConfig::default);
            match cfg.precision {
                Precision::F32 => train_command::<f32>(&cfg, &data, &ckpt, aug),
                Precision::F64 => train_command::<f64>(&cfg, &data, &ckpt, aug),
            }
        }
        Command::Template { ckpt, data, out } => {
            let records = checkpoint::load(&ckpt)?;
            match read_meta(&records)?.1 {
                0 => template_command::<f32>(&records, &data, &out),
                _ => template_command::<f64>(&records, &data, &out),
            }
        }
        Command::Eval { ckpt, template, data, metrics, maps } => {
            let records = checkpoint::load(&ckpt)?;
            let tpl = checkpoint::load(&template)?;
            let summary = match read_meta(&records)?.1 {
                0 => eval_command::<f32>(&records, &tpl, &data, &metrics, maps.as_deref())?,
                _ => eval_command::<f64>(&records, &tpl, &data, &metrics, maps.as_deref())?,
            };
            println!(
                "{} defective images: mean pixel AUROC {:.4}, mean AUPRO {:.4}; pooled pixel AUROC {:.4}",
                summary.rows.len(),
                summary.mean_auroc,
                summary.mean_aupro,
                summary.pooled_auroc
            );
            Ok(())
        }
        Command::BenchMem { depths, config, out, size } => {
            let cfg = RunConfig::load(&config)?;
            let depths = parse_range(&depths)?;
            let size = size.unwrap_or(2 * cfg.model.size_multiple());
            let rows = bench_rows(&cfg, size, &depths)?;
            let mut text = format!("{}\n", MemoryReport::CSV_HEADER);
            for (depth, r) in &rows {
                text.push_str(&r.csv_line(*depth));
                text.push('\n');
            }
            write_atomic(&out, text.as_bytes())?;
            print!("{text}");
            Ok(())
        }
    }
}

/// `a:b` inclusive, or a single value.
pub fn parse_range(s: &str) -> CliResult<Vec<usize>> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("bad depth range {s:?}")));
    let (a, b) = match s.split_once(':') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if a == 0 || b < a {
        return Err(CliError::Usage(format!("depth range {s:?} must be 1 ≤ a ≤ b")));
    }
    Ok((a..=b).collect())
}

/// Reversible rows then standard rows, one per depth.
pub fn bench_rows(cfg: &RunConfig, size: usize, depths: &[usize]) -> CliResult<Vec<(usize, MemoryReport)>> {
    let mut rows = Vec::new();
    for mode in [TapeMode::Reversible, TapeMode::Standard] {
        let reports = bench_memory(cfg.model, size, depths, mode)?;
        rows.extend(depths.iter().copied().zip(reports));
    }
    Ok(rows)
}

fn images<T: Scalar>(samples: &[Sample]) -> Vec<Tensor4<T>> {
    samples.iter().map(|s| s.image.to_tensor()).collect()
}

/// Outcome of [`train_model`].
pub struct Trained<T> {
    pub model: PyramidFlowModel<T>,
    pub optimizer: OptimizerState<T>,
    pub history: Vec<StepReport>,
}

/// Siamese training on random distinct pairs drawn from `train`.
pub fn train_model<T: Scalar>(
    cfg: &RunConfig,
    train: &[Tensor4<T>],
    augmentation: Option<AugmentConfig>,
    mut progress: impl FnMut(usize, &StepReport),
) -> CliResult<Trained<T>> {
    if train.len() < 2 {
        return Err(CliError::Data("training needs at least two images".into()));
    }
    let c = train[0].shape().c;
    if c != cfg.model.c_in {
        return Err(CliError::Data(format!("config c_in = {} but images have {c} channels", cfg.model.c_in)));
    }
    let mut model = PyramidFlowModel::<T>::build(cfg.model)?;
    let mut opt = OptimizerState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_9a1e);
    let options = StepOptions { loss: cfg.loss, mode: TapeMode::Reversible };
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let i = rng.gen_range(0..train.len());
        let j = (i + rng.gen_range(1..train.len())) % train.len();
        let (a, b) = match &augmentation {
            Some(aug) => (augment(&train[i], aug, &mut rng)?, augment(&train[j], aug, &mut rng)?),
            None => (train[i].clone(), train[j].clone()),
        };
        let report = train_step(&mut model, (&a, &b), &mut opt, options)?;
        progress(step, &report);
        history.push(report);
    }
    Ok(Trained { model, optimizer: opt, history })
}

fn train_command<T: Scalar>(cfg: &RunConfig, data: &Path, ckpt: &Path, aug: Option<AugmentConfig>) -> CliResult<()> {
    let train = images::<T>(&dataset::load(data, Split::Train)?);
    let start = std::time::Instant::now();
    let mut window = 0.0;
    let trained = train_model(cfg, &train, aug, |step, r| {
        window += r.loss;
        if (step + 1) % 100 == 0 {
            eprintln!(
                "step {:>6}  loss {:.6}  ({:.1}s)",
                step + 1,
                window / 100.0,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;
    checkpoint::save(ckpt, &model_records(&trained.model, Some(&trained.optimizer)))?;
    let mut log = String::from("step,loss,grad_norm\n");
    for (k, r) in trained.history.iter().enumerate() {
        log.push_str(&format!("{},{:e},{:e}\n", k + 1, r.loss, r.grad_norm));
    }
    write_atomic(&loss_log_path(ckpt), log.as_bytes())?;
    println!("trained {} steps in {:.1}s; checkpoint {}", cfg.steps, start.elapsed().as_secs_f64(), ckpt.display());
    Ok(())
}

/// `<ckpt>.loss.csv`: per-step loss and pre-clip gradient norm.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn template_command<T: Scalar>(records: &[checkpoint::Record], data: &Path, out: &Path) -> CliResult<()> {
    let (model, _) = model_from_records::<T>(records, AdamConfig::default())?;
    let train = images::<T>(&dataset::load(data, Split::Train)?);
    let template = fit_templates(&model, &train)?;
    checkpoint::save(out, &template_records(&template))?;
    println!("template over {} images written to {}", template.sample_count, out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub auroc: f64,
    pub aupro: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<MetricRow>,
    pub mean_auroc: f64,
    pub mean_aupro: f64,
    /// Pixel AUROC over every test pixel at once.
    pub pooled_auroc: f64,
}

/// Score every test image; per-image metrics for images with an anomalous region.
pub fn evaluate<T: Scalar>(
    model: &PyramidFlowModel<T>,
    template: &LatentTemplate<T>,
    test: &[Sample],
    mut on_map: impl FnMut(&Sample, &[f64]) -> CliResult<()>,
) -> CliResult<EvalSummary> {
    let mut rows = Vec::new();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for s in test {
        let map = anomaly_map(model, template, &s.image.to_tensor::<T>())?;
        let scores: Vec<f64> = map.data().iter().map(|v| v.to_f64_lossy()).collect();
        on_map(s, &scores)?;
        let mask = s.mask.clone().unwrap_or_else(|| vec![false; scores.len()]);
        if s.is_defective() {
            rows.push(MetricRow {
                image_id: s.id.clone(),
                auroc: pixel_auroc(&scores, &mask)?,
                aupro: aupro(&scores, &mask, s.image.height, s.image.width, 0.3)?,
            });
        }
        all_scores.extend(scores);
        all_labels.extend(mask);
    }
    if rows.is_empty() {
        return Err(CliError::Data("test split has no defective image with a mask".into()));
    }
    let k = rows.len() as f64;
    Ok(EvalSummary {
        mean_auroc: rows.iter().map(|r| r.auroc).sum::<f64>() / k,
        mean_aupro: rows.iter().map(|r| r.aupro).sum::<f64>() / k,
        pooled_auroc: pixel_auroc(&all_scores, &all_labels)?,
        rows,
    })
}

pub fn metrics_csv(summary: &EvalSummary) -> String {
    let mut out = String::from("image_id,auroc,aupro\n");
    for r in &summary.rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.image_id, r.auroc, r.aupro));
    }
    out.push_str(&format!("mean,{:.6},{:.6}\n", summary.mean_auroc, summary.mean_aupro));
    out
}

fn eval_command<T: Scalar>(
    records: &[checkpoint::Record],
    template: &[checkpoint::Record],
    data: &Path,
    metrics: &Path,
    maps: Option<&Path>,
) -> CliResult<EvalSummary> {
    let (model, _) = model_from_records::<T>(records, AdamConfig::default())?;
    let template = template_from_records::<T>(template)?;
    let test = dataset::load(data, Split::Test)?;
    let summary = evaluate(&model, &template, &test, |s, scores| match maps {
        Some(dir) => {
            let path = dir.join(format!("{}.pgm", s.id.replace('/', "_")));
            write_score_map(&path, scores, s.image.width, s.image.height).map(|_| ())
        }
        None => Ok(()),
    })?;
    write_atomic(metrics, metrics_csv(&summary).as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1:4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_range("3").unwrap(), vec![3]);
        assert!(parse_range("0:2").is_err());
        assert!(parse_range("4:2").is_err());
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["pyramidflow", "frobnicate"]), 2);
        assert_eq!(run(["pyramidflow", "synth", "--n", "3"]), 2);
        assert_eq!(run(["pyramidflow", "synth", "--out", "/tmp/x", "--n", "0"]), 2);
    }

    #[test]
    fn metrics_csv_layout() {
        let s = EvalSummary {
            rows: vec![MetricRow { image_id: "blob/000".into(), auroc: 0.5, aupro: 0.25 }],
            mean_auroc: 0.5,
            mean_aupro: 0.25,
            pooled_auroc: 0.5,
        };
        assert_eq!(metrics_csv(&s), "image_id,auroc,aupro\nblob/000,0.500000,0.250000\nmean,0.500000,0.250000\n");
    }
}
