//! Two-stage training pipeline: teacher bootstrap (instance loss only),
//! then pre-training with the full composite objective.
//!
//! Reproducibility contract: augmentation, shuffling and samplers derive
//! their seeds from `(run seed, stream, step, dataset index)`, never from a
//! carried generator, so a run resumed from step k replays step k+1 bit for
//! bit.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest};
pub use config::{RdemSampling, RiemSampling, SamplingConfig, Stage, TrainConfig};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{augment_pair, load_dataset, Image};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::matching::{
    find_most_dissimilar, find_most_similar, sample_instance_negatives, sample_random_regions,
    AssignMode, InstanceNegative, MatchAssignment, RandomRegionMode,
};
use crate::model::{
    self, encode, image_batch, predict, project_global, project_local, teacher_regions_batch,
    BranchRef, ModelState,
};
use crate::nn::graph::Graph;
use crate::nn::{ema_update, optimizer_step, GradSet, OptState, Tensor};
use crate::rng::{self, stream};

/// Per-image region-pair selections for one micro-batch.
#[derive(Debug, Clone, Default)]
pub struct BatchAssignments {
    pub rdem_a: Vec<MatchAssignment>,
    pub rdem_b: Vec<MatchAssignment>,
    pub riem_a: Vec<MatchAssignment>,
    pub riem_b: Vec<MatchAssignment>,
    pub negatives_a: Vec<InstanceNegative>,
    pub negatives_b: Vec<InstanceNegative>,
}

/// Selects region counterparts for every image of the micro-batch under the
/// configured strategies. This is the only place teacher features influence
/// a training step.
pub fn compute_assignments(
    state: &ModelState,
    cfg: &TrainConfig,
    views_a: &[&Image],
    views_b: &[&Image],
    step: u64,
    ds_indices: &[u64],
) -> Result<BatchAssignments> {
    let size = cfg.aug.output_size;
    let (gh, gw) = cfg.model.encoder.grid(size, size)?;
    let n = gh * gw;
    let mut out = BatchAssignments::default();

    let teacher_needed = (cfg.needs_rdem() && cfg.sampling.rdem == RdemSampling::Tg)
        || (cfg.needs_riem() && cfg.sampling.riem == RiemSampling::Tg);
    let (teacher_a, teacher_b) = if teacher_needed {
        let teacher = state.teacher()?;
        (
            teacher_regions_batch(teacher, &cfg.model, views_a)?,
            teacher_regions_batch(teacher, &cfg.model, views_b)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };

    // Donor globals for the cross-instance ablation come from an eval-mode
    // pass of the online projector and enter the loss detached.
    let donor_globals = if cfg.needs_rdem() && cfg.sampling.rdem == RdemSampling::RandomInstance {
        let ga = model::eval_global_features(&state.online, &cfg.model, image_batch(views_a)?)?;
        let gb = model::eval_global_features(&state.online, &cfg.model, image_batch(views_b)?)?;
        Some((ga, gb))
    } else {
        None
    };

    for (i, &ds_idx) in ds_indices.iter().enumerate() {
        if cfg.needs_rdem() {
            match cfg.sampling.rdem {
                RdemSampling::Tg => {
                    out.rdem_a.push(find_most_dissimilar(&teacher_a[i])?);
                    out.rdem_b.push(find_most_dissimilar(&teacher_b[i])?);
                }
                RdemSampling::Random => {
                    out.rdem_a.push(sample_random_regions(
                        n,
                        n,
                        RandomRegionMode::WithinView,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 1]),
                    )?);
                    out.rdem_b.push(sample_random_regions(
                        n,
                        n,
                        RandomRegionMode::WithinView,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 2]),
                    )?);
                }
                RdemSampling::RandomInstance => {
                    let (ga, gb) = donor_globals.as_ref().expect("donor globals computed");
                    out.negatives_a.push(sample_instance_negatives(
                        ga,
                        i,
                        n,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 3]),
                    )?);
                    out.negatives_b.push(sample_instance_negatives(
                        gb,
                        i,
                        n,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 4]),
                    )?);
                }
            }
        }
        if cfg.needs_riem() {
            match cfg.sampling.riem {
                RiemSampling::Tg => {
                    out.riem_a.push(find_most_similar(&teacher_a[i], &teacher_b[i])?);
                    out.riem_b.push(find_most_similar(&teacher_b[i], &teacher_a[i])?);
                }
                RiemSampling::Random => {
                    out.riem_a.push(sample_random_regions(
                        n,
                        n,
                        RandomRegionMode::CrossView,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 5]),
                    )?);
                    out.riem_b.push(sample_random_regions(
                        n,
                        n,
                        RandomRegionMode::CrossView,
                        rng::derive(&[cfg.seed, stream::SAMPLER, step, ds_idx, 6]),
                    )?);
                }
            }
        }
    }
    Ok(out)
}

/// Unweighted loss components of one micro-batch, as 64-bit values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Components {
    pub byol: f64,
    pub rdem: f64,
    pub riem: f64,
}

pub struct MicroOutput {
    pub grads: GradSet<f32>,
    pub bn_updates: Vec<(String, Tensor<f32>)>,
    pub components: Components,
}

fn flatten_assignments(
    assigns: &[MatchAssignment],
    n: usize,
    within: bool,
    what: &str,
) -> Result<Vec<usize>> {
    let mut flat = Vec::with_capacity(assigns.len() * n);
    for (i, a) in assigns.iter().enumerate() {
        let ok_mode = if within {
            matches!(a.mode, AssignMode::MostDissimilarWithinView | AssignMode::RandomRegion)
        } else {
            matches!(a.mode, AssignMode::MostSimilarCrossView | AssignMode::RandomRegion)
        };
        if !ok_mode {
            return Err(Error::Usage(format!(
                "{what}: assignment mode {:?} does not fit this loss",
                a.mode
            )));
        }
        if a.indices.len() != n {
            return Err(Error::Usage(format!(
                "{what}: assignment holds {} indices for {n} regions",
                a.indices.len()
            )));
        }
        for &z in &a.indices {
            if z >= n {
                return Err(Error::Usage(format!("{what}: region index {z} out of range")));
            }
            flat.push(i * n + z);
        }
    }
    Ok(flat)
}

/// Forward and backward of the composite loss on one micro-batch. Returns
/// mean gradients over the micro-batch and the unweighted components.
pub fn micro_step_grads(
    state: &ModelState,
    cfg: &TrainConfig,
    views_a: &[&Image],
    views_b: &[&Image],
    assigns: &BatchAssignments,
) -> Result<MicroOutput> {
    let size = cfg.aug.output_size;
    let (gh, gw) = cfg.model.encoder.grid(size, size)?;
    let n = gh * gw;
    let batch_a = image_batch(views_a)?;
    let batch_b = image_batch(views_b)?;

    // target features (eval mode, stop-gradient)
    let need_local = cfg.needs_rdem() || cfg.needs_riem();
    let (target_globals, target_locals) = {
        let mut tg = None;
        let mut tl = None;
        if cfg.needs_byol() || cfg.needs_riem() {
            let mut g: Graph<f32> = Graph::new();
            let xa = g.input(batch_a.clone());
            let xb = g.input(batch_b.clone());
            let branch = BranchRef::target(&state.target);
            let fa = encode(&mut g, &branch, &cfg.model, xa)?;
            let fb = encode(&mut g, &branch, &cfg.model, xb)?;
            if cfg.needs_byol() {
                let ga = project_global(&mut g, &branch, &cfg.model, fa)?;
                let gb = project_global(&mut g, &branch, &cfg.model, fb)?;
                tg = Some((g.value(ga).clone(), g.value(gb).clone()));
            }
            if cfg.needs_riem() {
                let la = project_local(&mut g, &branch, &cfg.model, fa)?;
                let lb = project_local(&mut g, &branch, &cfg.model, fb)?;
                tl = Some((g.value(la).clone(), g.value(lb).clone()));
            }
        }
        (tg, tl)
    };

    // online graph
    let mut g: Graph<f32> = Graph::new();
    let branch = BranchRef::online(&state.online, !cfg.bn_eval);
    let xa = g.input(batch_a);
    let xb = g.input(batch_b);
    let fmap_a = encode(&mut g, &branch, &cfg.model, xa)?;
    let fmap_b = encode(&mut g, &branch, &cfg.model, xb)?;

    let mut terms = Vec::new();
    let mut components = Components::default();

    let mut byol_var = None;
    if cfg.needs_byol() {
        let proj_a = project_global(&mut g, &branch, &cfg.model, fmap_a)?;
        let proj_b = project_global(&mut g, &branch, &cfg.model, fmap_b)?;
        let pred_a = predict(&mut g, &branch, &cfg.model, proj_a)?;
        let pred_b = predict(&mut g, &branch, &cfg.model, proj_b)?;
        let (tga, tgb) = target_globals.as_ref().expect("target globals computed");
        let cga = g.constant(tga.clone());
        let cgb = g.constant(tgb.clone());
        let v = losses::byol_loss_graph(&mut g, pred_a, cgb, cga, pred_b)?;
        terms.push((v, cfg.weights.lambda3));
        byol_var = Some(v);
    }

    let (mut local_a, mut local_b) = (None, None);
    if need_local {
        local_a = Some(project_local(&mut g, &branch, &cfg.model, fmap_a)?);
        local_b = Some(project_local(&mut g, &branch, &cfg.model, fmap_b)?);
    }

    let mut rdem_var = None;
    if cfg.needs_rdem() {
        let (la, lb) = (local_a.unwrap(), local_b.unwrap());
        let v = if cfg.sampling.rdem == RdemSampling::RandomInstance {
            if assigns.negatives_a.len() != views_a.len()
                || assigns.negatives_b.len() != views_b.len()
            {
                return Err(Error::Usage("instance negatives missing for some images".into()));
            }
            let stack = |negs: &[InstanceNegative]| -> Tensor<f32> {
                let dim = negs[0].donors.shape()[1];
                let mut data = Vec::with_capacity(negs.len() * n * dim);
                for neg in negs {
                    data.extend_from_slice(neg.donors.data());
                }
                Tensor::from_parts(vec![negs.len() * n, dim], data)
            };
            let da = g.constant(stack(&assigns.negatives_a));
            let db = g.constant(stack(&assigns.negatives_b));
            losses::rdem_instance_graph(&mut g, la, da, lb, db)?
        } else {
            let idx_a = flatten_assignments(&assigns.rdem_a, n, true, "rdem")?;
            let idx_b = flatten_assignments(&assigns.rdem_b, n, true, "rdem")?;
            losses::rdem_loss_graph(&mut g, la, &idx_a, lb, &idx_b)?
        };
        terms.push((v, cfg.weights.lambda1));
        rdem_var = Some(v);
    }

    let mut riem_var = None;
    if cfg.needs_riem() {
        let (la, lb) = (local_a.unwrap(), local_b.unwrap());
        let (tla, tlb) = target_locals.as_ref().expect("target locals computed");
        let cta = g.constant(tla.clone());
        let ctb = g.constant(tlb.clone());
        let idx_a = flatten_assignments(&assigns.riem_a, n, false, "riem")?;
        let idx_b = flatten_assignments(&assigns.riem_b, n, false, "riem")?;
        let v = losses::riem_loss_graph(&mut g, la, ctb, &idx_a, lb, cta, &idx_b)?;
        terms.push((v, cfg.weights.lambda2));
        riem_var = Some(v);
    }

    let total = g.weighted_sum(&terms)?;
    if let Some(v) = byol_var {
        components.byol = g.value(v).scalar_value() as f64;
    }
    if let Some(v) = rdem_var {
        components.rdem = g.value(v).scalar_value() as f64;
    }
    if let Some(v) = riem_var {
        components.riem = g.value(v).scalar_value() as f64;
    }
    let grads = g.backward(total)?;
    let bn_updates = g.take_bn_updates();
    Ok(MicroOutput {
        grads,
        bn_updates,
        components,
    })
}

/// One optimizer step over a batch: augment each image into a view pair,
/// run the configured losses (accumulating gradients over
/// `accumulation_steps` micro-batches), update the online parameters, then
/// the EMA target. The step counter advances once.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut OptState<f32>,
    cfg: &TrainConfig,
    batch: &[&Image],
    ds_indices: &[u64],
    step: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if batch.len() != ds_indices.len() {
        return Err(Error::Precondition("batch and index lengths differ".into()));
    }
    let acc = cfg.accumulation_steps;
    if batch.len() % acc != 0 {
        return Err(Error::Config(format!(
            "batch of {} does not split into {acc} micro-batches",
            batch.len()
        )));
    }
    let micro = batch.len() / acc;
    let inv_acc = 1.0f32 / acc as f32;

    let mut accum: Option<GradSet<f32>> = None;
    let mut components = Components::default();
    for m in 0..acc {
        let idx = &ds_indices[m * micro..(m + 1) * micro];
        let pairs: Vec<_> = batch[m * micro..(m + 1) * micro]
            .iter()
            .zip(idx)
            .map(|(img, &di)| {
                augment_pair(img, &cfg.aug, rng::derive(&[cfg.seed, stream::AUG, step, di]))
            })
            .collect();
        let views_a: Vec<&Image> = pairs.iter().map(|p| &p.view_a).collect();
        let views_b: Vec<&Image> = pairs.iter().map(|p| &p.view_b).collect();
        let assigns = compute_assignments(state, cfg, &views_a, &views_b, step, idx)?;
        let out = micro_step_grads(state, cfg, &views_a, &views_b, &assigns)
            .map_err(|e| step_context(e, step))?;
        for (name, value) in out.bn_updates {
            *state.online.get_mut(&name)? = value;
        }
        components.byol += out.components.byol / acc as f64;
        components.rdem += out.components.rdem / acc as f64;
        components.riem += out.components.riem / acc as f64;
        accum = Some(match accum {
            None => {
                let mut g = out.grads;
                for (_, t) in g.iter_mut() {
                    for v in t.data_mut() {
                        *v *= inv_acc;
                    }
                }
                g
            }
            Some(mut total) => {
                for (name, t) in out.grads.iter() {
                    let acc_t = total.get_mut(name)?;
                    for (a, &b) in acc_t.data_mut().iter_mut().zip(t.data()) {
                        *a += b * inv_acc;
                    }
                }
                total
            }
        });
    }

    let grads = accum.expect("at least one micro-batch");
    optimizer_step(&cfg.optimizer, &mut state.online, &grads, opt)
        .map_err(|e| step_context(e, step))?;
    ema_update(&state.online, &mut state.target, state.tau)?;
    state.step += 1;

    losses::composite_loss(components.byol, components.rdem, components.riem, cfg.weights)
        .map_err(|e| step_context(e, step))
}

fn step_context(e: Error, step: u64) -> Error {
    match e {
        Error::Numeric { context, reason } => Error::Numeric {
            context: format!("step {step}, {context}"),
            reason,
        },
        other => other,
    }
}

#[derive(Serialize)]
struct LogRecord {
    step: u64,
    byol: f64,
    rdem: f64,
    riem: f64,
    total: f64,
}

/// Runs the configured pre-training schedule: shuffled full batches each
/// epoch (partial trailing batches dropped), JSON-lines loss log, one
/// checkpoint per epoch plus a final one. Returns the final checkpoint
/// directory.
pub fn run_pretraining(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let cfg = cfg.clone().validated()?;
    let images = load_dataset(&cfg.data_dir)?;
    let steps_per_epoch = images.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "dataset of {} images cannot fill one batch of {}",
            images.len(),
            cfg.batch_size
        )));
    }
    let total_steps = {
        let by_epochs = (cfg.epochs * steps_per_epoch) as u64;
        cfg.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    };

    let (mut state, mut opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.config_hash() != cfg.config_hash() {
                return Err(Error::Config(
                    "resume checkpoint was produced by a different configuration".into(),
                ));
            }
            (ck.model_state()?, ck.opt_state())
        }
        None => {
            let teacher = if cfg.needs_teacher() {
                let path = cfg.teacher.as_ref().expect("validated");
                Some(load_checkpoint(path)?.teacher_backbone()?)
            } else {
                None
            };
            (
                ModelState::init(&cfg.model, cfg.seed, cfg.tau, teacher)?,
                OptState::new(),
            )
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = open_log(out_dir, state.step)?;

    if total_steps == 0 || state.step >= total_steps {
        let dir = checkpoint::save_periodic(out_dir, &state, &opt, &cfg, 0)?;
        return Ok(dir);
    }

    let mut epoch_order: Option<(u64, Vec<usize>)> = None;
    let mut last_dir = None;
    for step in state.step..total_steps {
        let epoch = step / steps_per_epoch as u64;
        let batch_idx = (step % steps_per_epoch as u64) as usize;
        let order = match &epoch_order {
            Some((e, order)) if *e == epoch => order,
            _ => {
                let order = rng::shuffled_indices(images.len(), &[cfg.seed, stream::SHUFFLE, epoch]);
                epoch_order = Some((epoch, order));
                &epoch_order.as_ref().unwrap().1
            }
        };
        let slice = &order[batch_idx * cfg.batch_size..(batch_idx + 1) * cfg.batch_size];
        let batch: Vec<&Image> = slice.iter().map(|&i| &images[i]).collect();
        let ds_indices: Vec<u64> = slice.iter().map(|&i| i as u64).collect();

        let breakdown = train_step(&mut state, &mut opt, &cfg, &batch, &ds_indices, step)?;
        let record = LogRecord {
            step: state.step,
            byol: breakdown.byol,
            rdem: breakdown.rdem,
            riem: breakdown.riem,
            total: breakdown.total,
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)
            .map_err(|e| Error::io(out_dir.join("train_log.jsonl"), e))?;

        let epoch_end = batch_idx + 1 == steps_per_epoch;
        let run_end = step + 1 == total_steps;
        if epoch_end || run_end {
            log.flush().ok();
            last_dir = Some(checkpoint::save_periodic(out_dir, &state, &opt, &cfg, epoch)?);
        }
    }
    Ok(last_dir.expect("loop ran at least one step"))
}

/// Stage-1 run: trains with the instance loss only; the resulting online
/// backbone serves as the frozen teacher for stage 2.
pub fn bootstrap_teacher(cfg: &TrainConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.stage != Stage::BootstrapTeacher {
        return Err(Error::Config(format!(
            "bootstrap_teacher requires stage \"bootstrap_teacher\", got {:?}",
            cfg.stage
        )));
    }
    run_pretraining(cfg, out_dir, None)
}

/// Opens the loss log for appending, trimming any records beyond
/// `resume_step` left behind by an interrupted longer run.
fn open_log(out_dir: &Path, resume_step: u64) -> Result<std::fs::File> {
    let path = out_dir.join("train_log.jsonl");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kept: Vec<&str> = text
            .lines()
            .filter(|line| {
                serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                    .map(|s| s <= resume_step)
                    .unwrap_or(false)
            })
            .collect();
        let mut content = kept.join("\n");
        if !content.is_empty() {
            content.push('\n');
        }
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    }
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}
