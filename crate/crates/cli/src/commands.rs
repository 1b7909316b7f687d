use std::path::{Path, PathBuf};

use candle_core::DType;
use freespace_uda::backbone::Domain;
use freespace_uda::dataio::png::{write_mask, write_rgb, write_unit_gray};
use freespace_uda::dataio::{save_pseudo_labels, DataRoot, SampleSource, SplitRole, TrainConfig};
use freespace_uda::params::Checkpoint;
use freespace_uda::presets::ablation_preset;
use freespace_uda::scenegen::{generate_dataset, GenConfig};
use freespace_uda::tensor_ops::{resize_bilinear, tensor_to_array2};
use freespace_uda::trainer::{
    self, diagnostics, load_checkpoint, pseudo_label_split, run_rounds, Datasets, Model, RunOptions, TensorSet,
};
use freespace_uda::{metrics, Error, Result};
use serde_json::{Map, Value};

use crate::{CheckpointArgs, DataArgs, EvalArgs, GenDataArgs, PredictArgs, PseudoArgs, TrainArgs, VisualizeArgs};

/// Name of the resolved-config echo every command writes.
pub const ECHO_FILE: &str = "config.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Paths named on the command line must exist; a typo is a usage error.
fn require(path: &Path, flag: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag} {} does not exist", path.display())))
    }
}

fn data_root(args: &DataArgs) -> Result<DataRoot> {
    let root = args
        .data_root
        .as_ref()
        .ok_or_else(|| Error::Config("no data root: pass --data-root or set FSUDA_DATA_ROOT".into()))?;
    require(root, "--data-root")?;
    DataRoot::open(root)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => {
            require(p, "--config")?;
            GenConfig::load(p)?
        }
        None => GenConfig::two_domain(a.seed, a.size, a.source, a.target_train, a.target_eval),
    };
    create_dir(&a.out)?;
    write_text(&a.out.join(ECHO_FILE), &serde_json::to_string_pretty(&cfg)?)?;
    let manifests = generate_dataset(&cfg, &a.out)?;
    let n: usize = manifests.iter().map(|m| m.samples.len()).sum();
    log::info!("wrote {n} samples under {}", a.out.display());
    Ok(())
}

/// Preset, then config file, then `--override`s, then the dedicated flags.
fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    for (p, flag) in [(&a.config, "--config"), (&a.resume, "--resume")] {
        if let Some(p) = p {
            require(p, flag)?;
        }
    }
    let mut cfg = match (&a.preset, &a.resume) {
        (Some(p), _) => ablation_preset(p)?,
        (None, Some(ck)) if a.config.is_none() => checkpoint_config(ck)?,
        (None, _) => TrainConfig::default(),
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        if !text.trim().is_empty() {
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            let map = value
                .as_object()
                .ok_or_else(|| Error::Config(format!("{}: config must be a JSON object", path.display())))?;
            cfg.apply(map)?;
        }
    }
    cfg.apply_overrides(&a.overrides)?;
    let mut flags = Map::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            flags.insert(k.to_string(), v);
        }
    };
    put("trainer.rounds", a.rounds.map(Value::from));
    put("pseudo.alpha", a.alpha.map(Value::from));
    put("trainer.seed", a.seed.map(Value::from));
    put("loss.lambda1_s", a.lambda1_s.map(Value::from));
    put("loss.lambda2_s", a.lambda2_s.map(Value::from));
    put("loss.lambda3_s", a.lambda3_s.map(Value::from));
    put("loss.lambda1_t", a.lambda1_t.map(Value::from));
    put("loss.lambda2_t", a.lambda2_t.map(Value::from));
    put("loss.lambda3_t", a.lambda3_t.map(Value::from));
    put("loss.lambda4", a.lambda4.map(Value::from));
    cfg.apply(&flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let ck = Checkpoint::read(path)?;
    let text = ck.metadata.get("config").ok_or_else(|| Error::Format {
        path: path.into(),
        msg: "checkpoint lacks its config".into(),
    })?;
    TrainConfig::from_json(text)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join(ECHO_FILE))?;
    let root = data_root(&a.data)?;
    let source = root.split(SplitRole::SourceTrain);
    let target_train = root.split(SplitRole::TargetTrain);
    let target_eval = root.split(SplitRole::TargetEval);
    let eval_split: Option<&dyn SampleSource> = (!target_eval.is_empty()).then_some(&target_eval as _);
    let data = Datasets::load(&source, &target_train, eval_split, cfg.sn_enabled, DType::F32)?;
    let summary = run_rounds(
        &cfg,
        &data,
        &RunOptions {
            out_dir: Some(a.out.clone()),
            resume: a.resume.clone(),
        },
    )?;
    if let Some(report) = &summary.final_eval {
        write_text(&a.out.join("eval.json"), &serde_json::to_string_pretty(report)?)?;
        println!("{}", serde_json::to_string(&report.scores)?);
    }
    Ok(())
}

/// Loads a checkpoint and writes the config echo for a checkpoint command.
fn open_checkpoint(c: &CheckpointArgs) -> Result<(Model, usize)> {
    require(&c.ckpt, "--ckpt")?;
    let (model, round) = load_checkpoint(&c.ckpt, DType::F32)?;
    create_dir(&c.out)?;
    let mut echo = model.config.to_flat();
    echo.insert("checkpoint".into(), Value::from(c.ckpt.display().to_string()));
    echo.insert("checkpoint_round".into(), Value::from(round));
    write_text(&c.out.join(ECHO_FILE), &serde_json::to_string_pretty(&echo)?)?;
    Ok((model, round))
}

fn load_split(c: &CheckpointArgs, model: &Model, role: SplitRole, with_labels: bool) -> Result<TensorSet> {
    let root = data_root(&c.data)?;
    TensorSet::load(&root.split(role), with_labels, model.config.sn_enabled, DType::F32)
}

pub fn pseudo(a: PseudoArgs) -> Result<()> {
    let (mut model, round) = open_checkpoint(&a.common)?;
    if let Some(alpha) = a.alpha {
        model.config.alpha = alpha;
        model.config.validate()?;
    }
    let set = load_split(&a.common, &model, a.data, false)?;
    let records = pseudo_label_split(&model, &set, model.config.alpha, round)?;
    let dir = save_pseudo_labels(&a.common.out, round + 1, &records)?;
    let ignored: f64 = records.iter().map(|r| r.ignored_fraction()).sum::<f64>() / records.len() as f64;
    log::info!("pseudo labels for round {} in {} ({:.1}% ignored)", round + 1, dir.display(), ignored * 100.0);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, _) = open_checkpoint(&a.common)?;
    let set = load_split(&a.common, &model, a.data, true)?;
    let (report, probs) = trainer::evaluate(&model, &set)?;
    write_text(&a.common.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    if a.overlays {
        let root = data_root(&a.common.data)?;
        let split = root.split(a.data);
        let dir = a.common.out.join("overlays");
        for (i, p) in probs.iter().enumerate() {
            let sample = split.load(i, Default::default())?;
            let pred = metrics::binarize(p, 0.5);
            let img = metrics::overlay(&pred, set.label(i)?, &sample.rgb)?;
            write_rgb(&dir.join(format!("{}.png", set.ids[i])), &img)?;
        }
    }
    println!("{}", serde_json::to_string(&report.scores)?);
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let (model, _) = open_checkpoint(&a.common)?;
    let set = load_split(&a.common, &model, a.data, false)?;
    let probs = trainer::predict(&model, &set)?;
    for (id, p) in set.ids.iter().zip(&probs) {
        write_unit_gray(&a.common.out.join("prob").join(format!("{id}.png")), p)?;
        write_mask(&a.common.out.join("mask").join(format!("{id}.png")), &metrics::binarize(p, a.threshold))?;
    }
    log::info!("wrote {} predictions to {}", probs.len(), a.common.out.display());
    Ok(())
}

fn write_map(dir: &PathBuf, name: &str, t: &candle_core::Tensor, i: usize, size: (usize, usize)) -> Result<()> {
    let up = resize_bilinear(&t.get(i)?.unsqueeze(0)?, size.0, size.1)?;
    write_unit_gray(&dir.join(format!("{name}.png")), &tensor_to_array2(&up.squeeze(0)?.squeeze(0)?)?)
}

pub fn visualize(a: VisualizeArgs) -> Result<()> {
    let (model, _) = open_checkpoint(&a.common)?;
    let set = load_split(&a.common, &model, a.data, false)?;
    let n = a.limit.min(set.len());
    let idx: Vec<usize> = (0..n).collect();
    let domain = if a.data == SplitRole::SourceTrain { Domain::Source } else { Domain::Target };
    let size = (set.height, set.width);
    for chunk in idx.chunks(8) {
        let d = diagnostics(&model, &set.inputs(chunk)?, domain)?;
        for (j, &i) in chunk.iter().enumerate() {
            let dir = a.common.out.join(&set.ids[i]);
            write_map(&dir, "foreground", &d.foreground, j, size)?;
            if let Some(t) = &d.a_rgb {
                write_map(&dir, "attention-rgb", t, j, size)?;
            }
            if let Some(t) = &d.a_sn {
                write_map(&dir, "attention-sn", t, j, size)?;
            }
            for (m, t) in &d.domain_scores {
                write_map(&dir, &format!("disc-{m}"), t, j, size)?;
            }
        }
    }
    log::info!("wrote maps for {n} samples to {}", a.common.out.display());
    Ok(())
}
