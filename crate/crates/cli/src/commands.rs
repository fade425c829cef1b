use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use unif_core::dataio::{generate_sequence, load_dataset, load_frame, save_dataset, splits, CapsuleBody, DatasetMeta, PoseSchedule};
use unif_core::deform::DeformOptions;
use unif_core::evalmetrics::{chamfer_and_f1, MetricReport, CSV_HEADER};
use unif_core::mlp::InitConfig;
use unif_core::neural_sdf::{ModelConfig, UnifModel, UnionMode};
use unif_core::objective::{LossWeights, SampleCounts};
use unif_core::skeleton::{poses_from_json, Pose, Skeleton};
use unif_core::surface::{export_mesh, extract_part, extract_union_with, read_mesh, Aabb, MeshFormat, DEFAULT_RESOLUTION};
use unif_core::trainer::{Checkpoint, TrainConfig, Trainer, LOG_HEADER};

use crate::config::FileConfig;
use crate::{AnimateArgs, EvalArgs, ExtractArgs, FormatArg, GenerateArgs, ReconstructArgs, SplitArg, TrainArgs, UserError};

const DEFAULT_PAD: f64 = 0.1;

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| user(format!("cannot create {}: {e}", dir.display())))
}

fn load_skeleton(spec: &str) -> Result<Skeleton> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return Ok(Skeleton::from_json(&text)?);
    }
    Skeleton::preset(spec).map_err(|_| user(format!("`{spec}` is neither a skeleton preset nor a skeleton file")))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let skeleton = load_skeleton(&a.skeleton)?;
    let schedule: PoseSchedule = a.schedule.parse()?;
    let body = CapsuleBody::uniform(skeleton.part_count(), a.radius)?;
    let frames = generate_sequence(&skeleton, &body, &schedule, a.frames, a.points, a.seed)?;
    let meta = DatasetMeta {
        skeleton: a.skeleton.clone(),
        schedule: schedule.to_string(),
        frames: a.frames,
        points_per_frame: a.points,
        seed: a.seed,
        body,
        splits: splits(a.frames),
    };
    create_dir(&a.out)?;
    save_dataset(&a.out, &skeleton, &meta, &frames)?;
    println!(
        "wrote {} frames of {} points ({} parts, schedule {}) to {}; splits: {} train, {} interp, {} extrap",
        a.frames,
        a.points,
        skeleton.part_count(),
        meta.schedule,
        a.out.display(),
        meta.splits.train.len(),
        meta.splits.interp.len(),
        meta.splits.extrap.len()
    );
    Ok(())
}

fn train_config(a: &TrainArgs, f: &FileConfig) -> TrainConfig {
    let d = TrainConfig::default();
    let dw = LossWeights::default();
    let dc = SampleCounts::default();
    let on = |flag_off: bool, file: Option<bool>| !flag_off && file.unwrap_or(true);
    let weight = |enabled: bool, flag: Option<f64>, file: Option<f64>, default: f64| {
        if enabled {
            flag.or(file).unwrap_or(default)
        } else {
            0.0
        }
    };
    TrainConfig {
        epochs: a.epochs.or(f.epochs).unwrap_or(d.epochs),
        lr: a.lr.or(f.lr).unwrap_or(d.lr),
        lr_decay: a.lr_decay.or(f.lr_decay).unwrap_or(d.lr_decay),
        decay_epochs: a.decay_epochs.clone().or_else(|| f.decay_epochs.clone()).unwrap_or(d.decay_epochs),
        frames_per_batch: a.frames_per_batch.or(f.frames_per_batch).unwrap_or(d.frames_per_batch),
        seed: a.seed.or(f.seed).unwrap_or(d.seed),
        weights: LossWeights {
            unit: a.unit_weight.or(f.unit_weight).unwrap_or(dw.unit),
            lim: weight(on(a.no_lim, f.lim), a.lim_weight, f.lim_weight, dw.lim),
            sec: weight(on(a.no_sec, f.sec), a.sec_weight, f.sec_weight, dw.sec),
            perim: weight(on(a.no_perim, f.perim), a.perim_weight, f.perim_weight, dw.perim),
        },
        counts: SampleCounts {
            surface: a.surface_samples.or(f.surface_samples).unwrap_or(dc.surface),
            local: a.local_samples.or(f.local_samples).unwrap_or(dc.local),
            global: a.global_samples.or(f.global_samples).unwrap_or(dc.global),
        },
        sigma_local: a.sigma_local.or(f.sigma_local).unwrap_or(d.sigma_local),
        box_scale: a.box_scale.or(f.box_scale).unwrap_or(d.box_scale),
    }
}

fn model_config(a: &TrainArgs, f: &FileConfig) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        init: InitConfig { fit_steps: a.init_steps.or(f.init_steps).unwrap_or(d.init.fit_steps), ..d.init },
        deform: DeformOptions {
            aps: !a.no_aps && f.aps.unwrap_or(true),
            q_ratio: a.q_ratio.map(Into::into).or(f.q_ratio).unwrap_or(d.deform.q_ratio),
            ..d.deform
        },
        ..d
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let tc = train_config(a, &file);
    tc.validate().map_err(|e| user(e.to_string()))?;
    let split = match (a.split, file.split.as_deref()) {
        (Some(s), _) => s,
        (None, None | Some("train")) => SplitArg::Train,
        (None, Some("all")) => SplitArg::All,
        (None, Some(other)) => bail!(user(format!("unknown split `{other}` in config (train or all)"))),
    };
    let data = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let frames: Vec<_> = match split {
        SplitArg::All => data.frames.clone(),
        SplitArg::Train => data.meta.splits.train.iter().filter_map(|&i| data.frames.get(i).cloned()).collect(),
    };
    if frames.is_empty() {
        bail!(user("the selected split has no frames"));
    }
    let checkpoint_every = a.checkpoint_every.or(file.checkpoint_every).unwrap_or(0);
    create_dir(&a.out)?;
    let checkpoint = match &a.resume {
        Some(path) => Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => {
            let mc = model_config(a, &file);
            info!("initialising {} parts", data.skeleton.part_count());
            let model = UnifModel::new(data.skeleton.clone(), mc, tc.seed)?;
            let adam = unif_core::trainer::AdamState::new(model.param_count());
            Checkpoint { model, adam, epoch: 0 }
        }
    };
    if checkpoint.model.skeleton != data.skeleton {
        bail!(user("checkpoint skeleton does not match the dataset"));
    }
    info!("training on {} frames for {} epochs (from epoch {})", frames.len(), tc.epochs, checkpoint.epoch);
    let log_path = a.out.join("log.csv");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{LOG_HEADER}")?;
    let ckpt_dir = a.out.join("checkpoints");
    let mut trainer = Trainer::resume(tc, checkpoint, &frames)?;
    trainer.run(|t, entry| {
        writeln!(log, "{}", entry.csv_row()).and_then(|_| log.flush()).map_err(|e| unif_core::Error::Config(e.to_string()))?;
        if entry.epoch % 100 == 0 {
            info!("epoch {} total {:.6} recon {:.6}", entry.epoch, entry.report.total, entry.report.recon);
        }
        if checkpoint_every > 0 && t.epoch % checkpoint_every == 0 {
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| unif_core::Error::Config(e.to_string()))?;
            t.checkpoint().save(&ckpt_dir.join(format!("epoch_{:05}.json", t.epoch)))?;
        }
        Ok(())
    })?;
    let model_path = a.out.join("model.json");
    trainer.model.save(&model_path)?;
    println!("wrote {} and {}", model_path.display(), log_path.display());
    Ok(())
}

struct Extraction {
    resolution: usize,
    union: UnionMode,
    pad: f64,
    format: MeshFormat,
}

fn extraction(a: &ExtractArgs) -> Result<(UnifModel, Extraction)> {
    let f = FileConfig::load(a.config.as_deref())?;
    let model = UnifModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let ex = Extraction {
        resolution: a.resolution.or(f.resolution).unwrap_or(DEFAULT_RESOLUTION),
        union: a.union.map(Into::into).or(f.union).unwrap_or(UnionMode::Min),
        pad: a.pad.or(f.pad).unwrap_or(DEFAULT_PAD),
        format: match a.format {
            FormatArg::Obj => MeshFormat::Obj,
            FormatArg::Ply => MeshFormat::Ply,
        },
    };
    if !(ex.pad > 0.0) {
        bail!(user("--pad must be positive"));
    }
    if ex.resolution < unif_core::surface::MIN_RESOLUTION {
        bail!(user(format!("--resolution must be at least {}", unif_core::surface::MIN_RESOLUTION)));
    }
    create_dir(&a.out)?;
    Ok((model, ex))
}

fn extension(format: MeshFormat) -> &'static str {
    match format {
        MeshFormat::Obj => "obj",
        MeshFormat::Ply => "ply",
    }
}

fn write_union(model: &UnifModel, pose: &Pose, ex: &Extraction, path: &Path) -> Result<usize> {
    pose.validate(model.part_count()).map_err(|e| user(format!("pose does not fit the model: {e}")))?;
    let bbox = Aabb::around_pose(&model.skeleton, pose, ex.pad)?;
    let mesh = extract_union_with(model, pose, bbox, ex.resolution, ex.union)?;
    export_mesh(&mesh, path, ex.format)?;
    Ok(mesh.triangles.len())
}

fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| user(format!("cannot read {}: {e}", path.display())))?;
    poses_from_json(&text).map_err(|e| user(format!("{}: {e}", path.display())))
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (model, ex) = extraction(&a.extract)?;
    let pose = match (&a.pose, a.frame, &a.data) {
        (Some(p), _, _) => {
            let mut poses = read_poses(p)?;
            if poses.len() != 1 {
                bail!(user(format!("{} holds {} poses; expected one", p.display(), poses.len())));
            }
            poses.remove(0)
        }
        (None, Some(i), Some(dir)) => {
            let path = unif_core::dataio::frame_file(dir, i);
            load_frame(&path).with_context(|| format!("loading frame {i}"))?.pose
        }
        _ => model.rest_pose.clone(),
    };
    let out = a.extract.out.join(format!("union.{}", extension(ex.format)));
    let tris = write_union(&model, &pose, &ex, &out)?;
    println!("wrote {} ({tris} triangles)", out.display());
    if a.parts {
        let bbox = Aabb::around_pose(&model.skeleton, &pose, ex.pad)?;
        for n in 0..model.part_count() {
            let mesh = extract_part(&model, &pose, n, bbox, ex.resolution)?;
            let path = a.extract.out.join(format!("part_{n}.ply"));
            export_mesh(&mesh, &path, MeshFormat::Ply)?;
            println!("wrote {} ({} triangles)", path.display(), mesh.triangles.len());
        }
    }
    Ok(())
}

pub fn animate(a: &AnimateArgs) -> Result<()> {
    let (model, ex) = extraction(&a.extract)?;
    let poses: Vec<(usize, Pose)> = match (&a.poses, &a.data) {
        (Some(p), _) => read_poses(p)?.into_iter().enumerate().collect(),
        (None, Some(dir)) => {
            let data = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            data.frames.into_iter().enumerate().map(|(i, f)| (i, f.pose)).collect()
        }
        (None, None) => bail!(user("give --poses or --data")),
    };
    for (i, pose) in &poses {
        let path = a.extract.out.join(format!("{i:04}.{}", extension(ex.format)));
        let tris = write_union(&model, pose, &ex, &path)?;
        info!("wrote {} ({tris} triangles)", path.display());
    }
    println!("wrote {} meshes to {}", poses.len(), a.extract.out.display());
    Ok(())
}

fn find_mesh(dir: &Path, i: usize) -> Option<PathBuf> {
    ["obj", "ply"].iter().map(|ext| dir.join(format!("{i:04}.{ext}"))).find(|p| p.is_file())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(a.threshold > 0.0) || a.samples == 0 {
        bail!(user("--threshold and --samples must be positive"));
    }
    let mut rows: Vec<(String, String, MetricReport)> = Vec::new();
    let evaluate = |scan: &[unif_core::skeleton::Vec3], mesh_path: &Path| -> Result<MetricReport> {
        let mesh = read_mesh(mesh_path).with_context(|| format!("reading mesh {}", mesh_path.display()))?;
        if mesh.is_empty() {
            bail!(user(format!("{} has no triangles", mesh_path.display())));
        }
        Ok(chamfer_and_f1(scan, &mesh, a.threshold, a.samples, a.seed)?)
    };
    match (&a.data, &a.meshes, &a.scan, &a.mesh) {
        (Some(data), Some(meshes), _, _) => {
            let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
            let sp = &ds.meta.splits;
            for (i, frame) in ds.frames.iter().enumerate() {
                let Some(path) = find_mesh(meshes, i) else { continue };
                let split = if sp.train.contains(&i) {
                    "train"
                } else if sp.interp.contains(&i) {
                    "interp"
                } else if sp.extrap.contains(&i) {
                    "extrap"
                } else {
                    "-"
                };
                rows.push((format!("{i}"), split.to_string(), evaluate(&frame.points, &path)?));
            }
            if rows.is_empty() {
                bail!(user(format!("no NNNN.obj or NNNN.ply meshes in {}", meshes.display())));
            }
        }
        (None, None, Some(scan), Some(mesh)) => {
            let frame = load_frame(scan).with_context(|| format!("loading scan {}", scan.display()))?;
            rows.push(("0".into(), "-".into(), evaluate(&frame.points, mesh)?));
        }
        _ => bail!(user("give --data with --meshes, or --scan with --mesh")),
    }
    let mut csv = format!("frame,split,{CSV_HEADER}\n");
    for (frame, split, r) in &rows {
        csv += &format!("{frame},{split},{}\n", r.csv_row());
    }
    for split in ["train", "interp", "extrap"] {
        let group: Vec<MetricReport> = rows.iter().filter(|(_, s, _)| s == split).map(|(_, _, r)| *r).collect();
        if let Some(m) = MetricReport::mean(&group) {
            csv += &format!("mean,{split},{}\n", m.csv_row());
            eprintln!(
                "{split:>6} ({} frames): p2s {:.3} mm  chamfer {:.3} mm  recall {:.2}%  precision {:.2}%  F-score {:.2}%",
                group.len(),
                m.p2s_mm,
                m.chamfer_mm,
                m.recall_pct,
                m.precision_pct,
                m.f1_pct
            );
        }
    }
    if rows.len() == 1 {
        let r = rows[0].2;
        eprintln!(
            "p2s {:.3} mm  chamfer {:.3} mm  recall {:.2}%  precision {:.2}%  F-score {:.2}%",
            r.p2s_mm, r.chamfer_mm, r.recall_pct, r.precision_pct, r.f1_pct
        );
    }
    print!("{csv}");
    if let Some(path) = &a.csv {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
