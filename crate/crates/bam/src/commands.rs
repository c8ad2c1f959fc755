//! The work behind each subcommand. Every function returns the text it
//! would print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use bam_core::data::{ClassSplit, Dataset};
use bam_core::ensemble::{KShotFusion, Tap};
use bam_core::eval::{evaluate_cached, evaluate_generalized_cached, EvalConfig, GeneralizedOutcome};
use bam_core::generalized::{fuse, FusionScheme, GeneralizedIdTable};
use bam_core::metrics::{format_flops, gram_flops, GeneralizedAccumulator};
use bam_core::model::{BamConfig, BamModel};
use bam_core::tensor::Tensor;
use bam_core::train::{meta_train, pretrain_base, training_subset, FeatureCache};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, synth_data, SynthOptions};
use crate::plot::{Chart, Series};
use crate::report::{Metric, ResultsFile, ResultsTable, SweepRecord};

pub fn synth(out: &Path, opts: &SynthOptions) -> Result<String> {
    synth_data(out, opts)?;
    Ok(format!(
        "wrote {} training and {} validation images ({}x{}, {} classes, {} folds) under {}\n",
        opts.images,
        opts.val_images,
        opts.size,
        opts.size,
        opts.classes,
        opts.folds,
        out.display()
    ))
}

pub fn pretrain(cfg: &RunConfig, data: &Path, fold: usize, out: &Path) -> Result<String> {
    let root = read_dataset(data, cfg.data.min_pixels)?;
    let split = root.folds.split(fold)?;
    let train = &root.dataset;
    ensure!(!train.is_empty(), "no training images under {}", data.display());
    let mut model_cfg = cfg.model.clone();
    model_cfg.base.num_base = split.num_base();
    model_cfg.shots = 1;
    let mut model = BamModel::new(model_cfg, split.base_table())?;
    let mut tc = cfg.pretrain.clone();
    tc.fold = fold;
    let report = pretrain_base(&mut model, &tc, train, &split)?;
    Checkpoint {
        model,
        split,
        training: vec![tc],
    }
    .save(out)?;
    let mut s = String::new();
    writeln!(s, "stage 1, fold {fold}: {} training images", train.len())?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(s, "epoch {:>3}  loss {l:.4}", i + 1)?;
    }
    writeln!(
        s,
        "training-set CE {:.4} -> {:.4}\ncheckpoint {}",
        report.initial_loss,
        report.final_loss,
        out.display()
    )?;
    Ok(s)
}

pub fn meta(cfg: &RunConfig, data: &Path, stage1: &Path, out: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(stage1)?;
    let root = read_dataset(data, cfg.data.min_pixels)?;
    let split = ckpt.split.clone();
    let train = training_subset(&root.dataset, &split);
    ensure!(!train.is_empty(), "every training image contains a novel class of fold {}", split.fold_index);
    let mut model_cfg: BamConfig = cfg.model.clone();
    model_cfg.shots = cfg.meta.shots;
    let mut model = BamModel::from_stage1(model_cfg, &ckpt.model)?;
    let mut tc = cfg.meta.clone();
    tc.fold = split.fold_index;
    let report = meta_train(&mut model, &tc, &train, &split)?;
    let mut training = ckpt.training.clone();
    training.push(tc.clone());
    Checkpoint {
        model,
        split,
        training,
    }
    .save(out)?;
    let mut s = String::new();
    let l = &report.step_losses;
    writeln!(
        s,
        "stage 2, fold {}, {}-shot, {} novel-free images: {} steps, loss {:.4} -> {:.4}",
        tc.fold,
        tc.shots,
        train.len(),
        l.len(),
        l.first().copied().unwrap_or(f64::NAN),
        l.last().copied().unwrap_or(f64::NAN)
    )?;
    writeln!(
        s,
        "frozen encoder/base unchanged: {}\nfactor median {:.6}\ncheckpoint {}",
        report.frozen_unchanged(),
        report.psi_median,
        out.display()
    )?;
    ensure!(report.frozen_unchanged(), "stage 2 modified frozen parameters");
    Ok(s)
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub label: Option<String>,
    pub kshot_fusion: Option<KShotFusion>,
    pub results: Option<PathBuf>,
}

fn load_for_eval(cfg: &RunConfig, data: &Path, ckpt: &Path, kshot: Option<KShotFusion>) -> Result<(BamModel, ClassSplit, Dataset)> {
    let c = Checkpoint::load(ckpt)?;
    let mut model = c.model;
    if let Some(f) = kshot {
        model.config.ensemble.kshot_fusion = f;
    }
    let root = read_dataset(data, cfg.data.min_pixels)?;
    Ok((model, c.split, root.dataset))
}

pub fn evaluate(cfg: &RunConfig, data: &Path, ckpt: &Path, opts: &EvalOptions) -> Result<String> {
    let (model, split, dataset) = load_for_eval(cfg, data, ckpt, opts.kshot_fusion)?;
    let ec = EvalConfig {
        fold: split.fold_index,
        ..cfg.eval.clone()
    };
    let cache = FeatureCache::build(&model, &dataset)?;
    let mut out = evaluate_cached(&model, &ec, &dataset, &split, &cache)?;
    if let Some(label) = &opts.label {
        for r in &mut out.per_seed {
            r.method.clone_from(label);
        }
        out.mean.method.clone_from(label);
    }
    let mut s = String::new();
    for r in &out.per_seed {
        writeln!(s, "{} fold {} seed {}: mIoU {:.4}  FB-IoU {:.4}", r.method, r.fold, r.seed, r.miou, r.fb_iou)?;
    }
    writeln!(
        s,
        "{} fold {} {}-shot mean over {} seeds: mIoU {:.4} (sd {:.4})  FB-IoU {:.4}",
        out.mean.method,
        out.mean.fold,
        out.mean.shots,
        out.mean.seeds.len(),
        out.mean.miou,
        out.mean.miou_std,
        out.mean.fb_iou
    )?;
    if let Some(path) = &opts.results {
        let mut file = ResultsFile::load_or_default(path)?;
        file.add_run(&out.per_seed, &out.mean);
        file.save(path)?;
        s.push('\n');
        s.push_str(&ResultsTable::build(&file.means, Metric::Miou).render());
        s.push('\n');
        s.push_str(&ResultsTable::build(&file.means, Metric::FbIou).render());
    }
    Ok(s)
}

/// Per-episode maps written by `evaluate-generalized --dump`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpFile {
    pub split: ClassSplit,
    pub episodes: Vec<DumpEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub table: GeneralizedIdTable,
    pub height: usize,
    pub width: usize,
    pub fg_prob: Vec<f64>,
    pub meta_fg: Vec<f64>,
    /// Dense base ids.
    pub base_mask: Vec<u8>,
    /// Semantic class ids of the query.
    pub ground_truth: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct GeneralizedOptions {
    pub results: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub dump: Option<PathBuf>,
}

fn generalized_text(out: &GeneralizedOutcome) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "method", "mIoU_n", "mIoU_b", "mIoU_a")?;
    for m in [&out.bam_mean, &out.without_ensemble_mean] {
        writeln!(
            s,
            "{:<24} {:>8.2} {:>8.2} {:>8.2}",
            m.method,
            100.0 * m.miou_n.unwrap_or(0.0),
            100.0 * m.miou_b.unwrap_or(0.0),
            100.0 * m.miou_a.unwrap_or(0.0)
        )?;
    }
    Ok(s)
}

pub fn tau_chart(points: &[bam_core::eval::SweepPoint], title: &str) -> Chart {
    let series = |name: &str, f: fn(&bam_core::eval::SweepPoint) -> f64| Series {
        name: name.into(),
        points: points.iter().map(|p| (p.tau, f(p))).collect(),
    };
    Chart {
        title: title.into(),
        x_label: "tau".into(),
        y_label: "mIoU".into(),
        log_x: false,
        series: vec![
            series("novel", |p| p.miou_n),
            series("base", |p| p.miou_b),
            series("all", |p| p.miou_a),
        ],
    }
}

pub fn evaluate_generalized(cfg: &RunConfig, data: &Path, ckpt: &Path, opts: &GeneralizedOptions) -> Result<String> {
    let (model, split, dataset) = load_for_eval(cfg, data, ckpt, None)?;
    let mut gc = cfg.generalized_config();
    gc.eval.fold = split.fold_index;
    gc.keep_dumps = opts.dump.is_some();
    let cache = FeatureCache::build(&model, &dataset)?;
    let out = evaluate_generalized_cached(&model, &gc, &dataset, &split, &cache)?;
    let mut s = generalized_text(&out)?;
    if let Some(path) = &opts.dump {
        let episodes = out
            .dumps
            .iter()
            .map(|d| DumpEntry {
                table: d.table.clone(),
                height: d.base_mask.height(),
                width: d.base_mask.width(),
                fg_prob: d.fg_prob.data().to_vec(),
                meta_fg: d.meta_fg.data().to_vec(),
                base_mask: d.base_mask.as_slice().to_vec(),
                ground_truth: dataset.mask(d.query_index).as_slice().to_vec(),
            })
            .collect();
        let file = DumpFile {
            split: split.clone(),
            episodes,
        };
        std::fs::write(path, serde_json::to_vec(&file)?).with_context(|| format!("writing {}", path.display()))?;
        writeln!(s, "dumped {} episodes to {}", out.dumps.len(), path.display())?;
    }
    if let Some(path) = &opts.results {
        let mut file = ResultsFile::load_or_default(path)?;
        file.add_run(&out.bam, &out.bam_mean);
        file.add_run(&out.without_ensemble, &out.without_ensemble_mean);
        file.add_sweep(SweepRecord {
            method: "bam".into(),
            fold: split.fold_index,
            shots: gc.eval.shots,
            points: out.sweep.clone(),
        });
        file.save(path)?;
        for metric in [Metric::MiouN, Metric::MiouB, Metric::MiouA] {
            s.push('\n');
            s.push_str(&ResultsTable::build(&file.means, metric).render());
        }
    }
    if let Some(path) = &opts.plot {
        ensure!(!out.sweep.is_empty(), "the threshold sweep is empty");
        let chart = tau_chart(&out.sweep, &format!("Threshold sweep, fold {}", split.fold_index));
        std::fs::write(path, chart.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        writeln!(s, "plot {}", path.display())?;
    }
    Ok(s)
}

/// Re-fuses dumped maps without running the model.
pub fn generalized_from_dumps(path: &Path, tau: f64, scheme: FusionScheme) -> Result<String> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file: DumpFile = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut bam = GeneralizedAccumulator::default();
    let mut without = GeneralizedAccumulator::default();
    for e in &file.episodes {
        let (h, w) = (e.height, e.width);
        let base = bam_core::data::LabelMap::new(h, w, e.base_mask.clone())?;
        let gt = bam_core::data::LabelMap::new(h, w, e.ground_truth.clone())?;
        for (acc, probs) in [(&mut bam, &e.fg_prob), (&mut without, &e.meta_fg)] {
            let fg = Tensor::from_vec(&[1, h, w], probs.clone())?;
            acc.accumulate(&fuse(scheme, &fg, &base, tau, &e.table)?, &gt)?;
        }
    }
    let mut s = String::new();
    writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "method", "mIoU_n", "mIoU_b", "mIoU_a")?;
    for (name, acc) in [("bam", &bam), ("bam-without-ensemble", &without)] {
        let sc = acc.scores(&file.split);
        writeln!(
            s,
            "{name:<24} {:>8.2} {:>8.2} {:>8.2}",
            100.0 * sc.miou_n,
            100.0 * sc.miou_b,
            100.0 * sc.miou_a
        )?;
    }
    Ok(s)
}

/// Gram-signature cost of every encoder tap at the given input size.
pub fn flops_table(model: &BamConfig, height: usize, width: usize) -> Vec<(Tap, usize, usize, usize, u128)> {
    let sizes = model.encoder.tap_sizes(height, width);
    Tap::ALL
        .iter()
        .map(|&t| {
            let c = model.encoder.widths[t.block() - 1];
            let (h, w) = sizes[t.block() - 1];
            (t, c, h, w, gram_flops(c as u64, h as u64, w as u64))
        })
        .collect()
}

pub fn flops_single(c: u64, h: u64, w: u64) -> String {
    let f = gram_flops(c, h, w);
    format!("C={c} H={h} W={w}: {f} FLOPs ({})\n", format_flops(f))
}

/// `points` pairs a tap with a results file whose seed means are averaged
/// over folds for `method`.
pub fn flops_report(
    model: &BamConfig,
    size: usize,
    points: &[(Tap, PathBuf)],
    method: &str,
    plot: Option<&Path>,
) -> Result<String> {
    let table = flops_table(model, size, size);
    let mut s = String::new();
    writeln!(s, "{:<4} {:>5} {:>9} {:>14} {:>9}", "tap", "C", "H x W", "FLOPs", "")?;
    for (t, c, h, w, f) in &table {
        writeln!(s, "{:<4} {:>5} {:>9} {:>14} {:>9}", format!("{t:?}"), c, format!("{h}x{w}"), f, format_flops(*f))?;
    }
    if points.is_empty() {
        return Ok(s);
    }
    let mut xy = Vec::new();
    for (tap, path) in points {
        let file = ResultsFile::load(path)?;
        let vals: Vec<f64> = file.means.iter().filter(|m| m.method == method).map(|m| m.miou).collect();
        ensure!(!vals.is_empty(), "{} has no {method} results", path.display());
        let miou = vals.iter().sum::<f64>() / vals.len() as f64;
        let f = table.iter().find(|r| r.0 == *tap).expect("every tap listed").4;
        writeln!(s, "{tap:?}: mIoU {miou:.4} at {}", format_flops(f))?;
        xy.push((f as f64, miou));
    }
    xy.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(p) = plot {
        let chart = Chart {
            title: format!("Accuracy vs Gram cost ({size}x{size} input)"),
            x_label: "FLOPs".into(),
            y_label: "mIoU".into(),
            log_x: true,
            series: vec![Series {
                name: method.into(),
                points: xy,
            }],
        };
        std::fs::write(p, chart.to_svg()).with_context(|| format!("writing {}", p.display()))?;
        writeln!(s, "plot {}", p.display())?;
    }
    Ok(s)
}
