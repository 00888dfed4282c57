//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `manifest.json`, `config.json`, and
//! one little-endian row-major `.bin` file per tensor. Round trips are
//! bit-exact. Training output directories keep the two most recent
//! checkpoints under `ckpt_step{N}/` with a `LATEST` pointer file that is
//! updated atomically, so an interrupted run always leaves a valid one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelState};
use crate::nn::{OptState, ParamSet, Scalar, Tensor};
use crate::train::config::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

const ONLINE: &str = "online.";
const TARGET: &str = "target.";
const TEACHER: &str = "teacher.";
const VELOCITY: &str = "optim.velocity.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: super::config::Stage,
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: manifest, the exact config of the producing run, and
/// every tensor under its prefixed name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub config: TrainConfig,
    pub tensors: ParamSet<f32>,
}

/// Writes a complete checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    opt: &OptState<f32>,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut tensors: ParamSet<f32> = ParamSet::new();
    for (name, t) in state.online.iter() {
        tensors.insert(format!("{ONLINE}{name}"), t.clone());
    }
    for (name, t) in state.target.iter() {
        tensors.insert(format!("{TARGET}{name}"), t.clone());
    }
    if let Some(teacher) = &state.teacher {
        for (name, t) in teacher.iter() {
            tensors.insert(format!("{TEACHER}{name}"), t.clone());
        }
    }
    for (name, t) in opt.velocity.iter() {
        tensors.insert(format!("{VELOCITY}{name}"), t.clone());
    }

    let config_json = serde_json::to_string_pretty(cfg)?;
    fs::write(dir.join("config.json"), &config_json).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        let file = format!("{name}.bin");
        let bytes = tensor_bytes(t);
        fs::write(dir.join(&file), &bytes).map_err(|e| Error::io(dir, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: f32::DTYPE.to_string(),
            file,
            byte_length: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stage: cfg.stage,
        step: state.step,
        epoch,
        config_hash: cfg.config_hash(),
        tensors: entries,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), manifest_json).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Loads a checkpoint directory; also accepts a training output directory
/// holding a `LATEST` pointer.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let dir = resolve_checkpoint_dir(dir)?;
    let manifest_path = dir.join("manifest.json");
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_path = dir.join("config.json");
    let config_text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let config: TrainConfig = serde_json::from_str(&config_text)?;
    if config.config_hash() != manifest.config_hash {
        return Err(Error::Integrity {
            tensor: "config.json".into(),
            reason: "config hash does not match manifest".into(),
        });
    }

    let mut tensors: ParamSet<f32> = ParamSet::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != entry.byte_length {
            return Err(Error::Integrity {
                tensor: entry.name.clone(),
                reason: format!(
                    "file holds {} bytes, manifest records {}",
                    bytes.len(),
                    entry.byte_length
                ),
            });
        }
        let expect: usize = entry.shape.iter().product::<usize>() * f32::BYTE_WIDTH;
        if bytes.len() != expect {
            return Err(Error::Integrity {
                tensor: entry.name.clone(),
                reason: format!("{} bytes do not fit shape {:?}", bytes.len(), entry.shape),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(f32::BYTE_WIDTH)
            .map(f32::from_le_bytes_slice)
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_parts(entry.shape.clone(), data));
    }
    Ok(Checkpoint {
        manifest,
        config,
        tensors,
    })
}

fn resolve_checkpoint_dir(dir: &Path) -> Result<PathBuf> {
    if dir.join("manifest.json").exists() {
        return Ok(dir.to_path_buf());
    }
    let latest = dir.join("LATEST");
    if latest.exists() {
        let name = fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
        let sub = dir.join(name.trim());
        if sub.join("manifest.json").exists() {
            return Ok(sub);
        }
    }
    Err(Error::Config(format!(
        "{} is not a checkpoint directory (no manifest.json or LATEST pointer)",
        dir.display()
    )))
}

impl Checkpoint {
    fn grouped(&self, prefix: &str) -> ParamSet<f32> {
        self.tensors.strip_prefix(prefix)
    }

    /// Rebuilds the model state (tau is taken from the stored config).
    pub fn model_state(&self) -> Result<ModelState> {
        let online = self.grouped(ONLINE);
        let target = self.grouped(TARGET);
        if online.is_empty() || target.is_empty() {
            return Err(Error::Structure("checkpoint misses online/target tensors".into()));
        }
        let teacher = {
            let t = self.grouped(TEACHER);
            if t.is_empty() {
                None
            } else {
                Some(t)
            }
        };
        let state = ModelState {
            online,
            target,
            teacher,
            tau: self.config.tau,
            step: self.manifest.step,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn opt_state(&self) -> OptState<f32> {
        OptState {
            velocity: self.grouped(VELOCITY),
        }
    }

    /// The online backbone as a frozen teacher parameter set.
    pub fn teacher_backbone(&self) -> Result<ParamSet<f32>> {
        let backbone: ParamSet<f32> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{ONLINE}{}", model::BACKBONE)))
            .map(|(n, t)| (n.strip_prefix(ONLINE).unwrap().to_string(), t.clone()))
            .collect();
        if backbone.is_empty() {
            return Err(Error::Structure(
                "checkpoint holds no online backbone tensors to use as a teacher".into(),
            ));
        }
        Ok(backbone)
    }
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.len() * f32::BYTE_WIDTH);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Writes `dir/ckpt_step{N}` and flips the `LATEST` pointer atomically,
/// then prunes older checkpoints (keeping the previous one as a fallback).
pub fn save_periodic(
    out_dir: &Path,
    state: &ModelState,
    opt: &OptState<f32>,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<PathBuf> {
    let name = format!("ckpt_step{:08}", state.step);
    let ckpt_dir = out_dir.join(&name);
    save_checkpoint(&ckpt_dir, state, opt, cfg, epoch)?;

    let tmp = out_dir.join(".LATEST.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(name.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, out_dir.join("LATEST")).map_err(|e| Error::io(out_dir, e))?;

    // prune everything older than the two newest
    let mut olds: Vec<String> = fs::read_dir(out_dir)
        .map_err(|e| Error::io(out_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            (n.starts_with("ckpt_step") && n != name).then_some(n)
        })
        .collect();
    olds.sort();
    for old in olds.iter().rev().skip(1) {
        let _ = fs::remove_dir_all(out_dir.join(old));
    }
    Ok(ckpt_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::config::Stage;

    fn small_cfg(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::new(Stage::BootstrapTeacher, 3, dir.join("data"));
        cfg.model = ModelConfig {
            proj_hidden: 16,
            proj_dim: 8,
            ..ModelConfig::default()
        };
        cfg.validated().unwrap()
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|f| {
                let bytes = fs::read(dir.join(&f)).unwrap();
                (f, bytes)
            })
            .collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let state = ModelState::init(&cfg.model, cfg.seed, cfg.tau, None).unwrap();
        let opt = OptState::new();
        let d1 = tmp.path().join("c1");
        save_checkpoint(&d1, &state, &opt, &cfg, 0).unwrap();

        let loaded = load_checkpoint(&d1).unwrap();
        let state2 = loaded.model_state().unwrap();
        let opt2 = loaded.opt_state();
        let d2 = tmp.path().join("c2");
        save_checkpoint(&d2, &state2, &opt2, &loaded.config, loaded.manifest.epoch).unwrap();

        assert_eq!(dir_bytes(&d1), dir_bytes(&d2));
    }

    #[test]
    fn version_mismatch_is_an_incompatibility_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let state = ModelState::init(&cfg.model, 1, cfg.tau, None).unwrap();
        let d = tmp.path().join("c");
        save_checkpoint(&d, &state, &OptState::new(), &cfg, 0).unwrap();
        // bump the stored version
        let manifest_path = d.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, text.replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(
            load_checkpoint(&d),
            Err(Error::Incompatible { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_tensor_is_an_integrity_error_naming_it() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let state = ModelState::init(&cfg.model, 1, cfg.tau, None).unwrap();
        let d = tmp.path().join("c");
        save_checkpoint(&d, &state, &OptState::new(), &cfg, 0).unwrap();
        let victim = "online.backbone.stage0.conv.weight";
        let path = d.join(format!("{victim}.bin"));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&d) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, victim),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn latest_pointer_resolves_and_prunes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let mut state = ModelState::init(&cfg.model, 1, cfg.tau, None).unwrap();
        let out = tmp.path().join("out");
        fs::create_dir_all(&out).unwrap();
        for step in [5u64, 10, 15] {
            state.step = step;
            save_periodic(&out, &state, &OptState::new(), &cfg, 0).unwrap();
        }
        let ck = load_checkpoint(&out).unwrap();
        assert_eq!(ck.manifest.step, 15);
        // only the two newest checkpoint dirs remain
        let kept: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| {
                let n = e.unwrap().file_name().to_string_lossy().into_owned();
                n.starts_with("ckpt_step").then_some(n)
            })
            .collect();
        assert_eq!(kept.len(), 2);
    }
}
