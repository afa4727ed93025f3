//! Expert episodes and the on-disk dataset.
//!
//! ```text
//! out_dir/manifest.json
//! out_dir/episodes/ep_{k}.bin:
//!   "HRDT-E1\n", u32 T,
//!   u32 n_img_tokens, u32 img_feat_dim, u32 lang_len, u32 lang_feat_dim, u32 state_dim, u32 action_dim,
//!   T image blobs [n_img_tokens, img_feat_dim], one language blob [lang_len, lang_feat_dim],
//!   T state blobs [state_dim], T action blobs [action_dim]
//! ```
//! All integers little-endian; blobs use the tensor blob layout.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::observe::observe;
use super::tasks::{expert_action, make_task, score, Mode};
use super::STEP_BUDGET;
use crate::embodiment::{EmbodimentSpec, NormStats, RobotAction14};
use crate::error::{Error, Result};
use crate::params::derive_seed;
use crate::tensor::{read_u32, Tensor};

pub const EPISODE_MAGIC: &[u8; 8] = b"HRDT-E1\n";
pub const DATASET_VERSION: u32 = 1;
pub const RETRY_BUDGET: usize = 3;
/// Default std-dev (m) of the Gaussian offset added to executed end-effector
/// targets while recording. Off by default. With noise the stored label stays
/// the clean expert command, so the data covers states off the expert's path.
pub const EXEC_NOISE: f64 = 0.0;

/// Rng for the execution noise of the episode recorded under `seed`.
pub fn exec_noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, "exec-noise"))
}

/// The command actually executed while recording.
pub fn perturb(cmd: &RobotAction14, std: f64, rng: &mut ChaCha8Rng) -> RobotAction14 {
    let mut out = *cmd;
    if std == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, std).expect("finite std-dev");
    for arm in &mut out.arms {
        for p in &mut arm.ee_pos {
            *p += normal.sample(rng);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: String,
    pub embodiment: String,
    pub seed: u64,
    /// Per step `[n_img_tokens, img_feat_dim]`.
    pub img: Vec<Tensor<f32>>,
    /// `[lang_len, lang_feat_dim]`
    pub lang: Tensor<f32>,
    /// `[T, state_dim]`
    pub states: Tensor<f32>,
    /// `[T, action_dim]`
    pub actions: Tensor<f32>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.img.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let t = self.len();
        let img_shape = self.img[0].shape();
        w.write_all(EPISODE_MAGIC)?;
        for v in [
            t,
            img_shape[0],
            img_shape[1],
            self.lang.rows(),
            self.lang.cols(),
            self.states.cols(),
            self.actions.cols(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for im in &self.img {
            im.write_blob(w)?;
        }
        self.lang.write_blob(w)?;
        for rows in [&self.states, &self.actions] {
            for i in 0..t {
                Tensor::new(vec![rows.cols()], rows.row(i).to_vec())?.write_blob(w)?;
            }
        }
        Ok(())
    }

    /// Reads the binary body; metadata comes from the manifest entry.
    pub fn read_from(r: &mut impl Read, entry: &EpisodeEntry, embodiment: &str) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Blob("truncated episode header".into()))?;
        if &magic != EPISODE_MAGIC {
            return Err(Error::Blob("bad episode magic".into()));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let [t, n_img, img_feat, n_lang, lang_feat, ds, da] = dims;
        if t == 0 || t > STEP_BUDGET {
            return Err(Error::Blob(format!("episode length {t} out of range")));
        }
        let expect = |b: &Tensor<f32>, shape: &[usize]| -> Result<()> {
            if b.shape() != shape {
                return Err(Error::Blob(format!(
                    "blob shape {:?}, header says {shape:?}",
                    b.shape()
                )));
            }
            Ok(())
        };
        let mut img = Vec::with_capacity(t);
        for _ in 0..t {
            let b = Tensor::<f32>::read_blob(r)?;
            expect(&b, &[n_img, img_feat])?;
            img.push(b);
        }
        let lang = Tensor::<f32>::read_blob(r)?;
        expect(&lang, &[n_lang, lang_feat])?;
        let mut rows = |d: usize| -> Result<Tensor<f32>> {
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..t {
                let b = Tensor::<f32>::read_blob(r)?;
                expect(&b, &[d])?;
                data.extend_from_slice(b.data());
            }
            Tensor::new(vec![t, d], data)
        };
        let states = rows(ds)?;
        let actions = rows(da)?;
        Ok(Self {
            task_id: entry.task_id.clone(),
            embodiment: embodiment.into(),
            seed: entry.seed,
            img,
            lang,
            states,
            actions,
            success: true,
        })
    }

    pub fn validate(&self, spec: &EmbodimentSpec) -> Result<()> {
        if self.embodiment != spec.name {
            return Err(Error::EmbodimentMismatch {
                expected: spec.name.clone(),
                found: self.embodiment.clone(),
            });
        }
        let t = self.len();
        if self.states.shape() != [t, spec.state_dim] {
            return Err(Error::shape(
                "episode states",
                self.states.shape(),
                &[t, spec.state_dim],
            ));
        }
        if self.actions.shape() != [t, spec.action_dim] {
            return Err(Error::shape(
                "episode actions",
                self.actions.shape(),
                &[t, spec.action_dim],
            ));
        }
        Ok(())
    }
}

/// Rolls the scripted expert until success or the step budget, executing
/// its commands with `exec_noise` added (see [`perturb`]).
pub fn expert_episode(
    task_id: &str,
    mode: Mode,
    seed: u64,
    embodiment: &str,
    exec_noise: f64,
) -> Result<Episode> {
    if !(exec_noise >= 0.0 && exec_noise.is_finite()) {
        return Err(Error::Config(format!(
            "execution noise must be finite and >= 0, got {exec_noise}"
        )));
    }
    let (mut world, task) = make_task(task_id, mode, seed)?;
    let spec = EmbodimentSpec::by_name(embodiment)?;
    let mut img = Vec::new();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut lang = None;
    let mut success = false;
    let mut noise = exec_noise_rng(seed);
    while world.step_count < STEP_BUDGET {
        let obs = observe(&world, &task, embodiment)?;
        let cmd = expert_action(&world, &task);
        let act = match embodiment {
            "human" => cmd.to_human()?.pack().to_vec(),
            _ => cmd.pack().to_vec(),
        };
        img.push(obs.img);
        lang.get_or_insert(obs.lang);
        states.extend(obs.state.iter().map(|&v| v as f32));
        actions.extend(act.iter().map(|&v| v as f32));
        world.step(&perturb(&cmd, exec_noise, &mut noise));
        if score(&world, &task).1 {
            success = true;
            break;
        }
    }
    let t = img.len();
    Ok(Episode {
        task_id: task_id.into(),
        embodiment: embodiment.into(),
        seed,
        img,
        lang: lang.expect("at least one step"),
        states: Tensor::new(vec![t, spec.state_dim], states)?,
        actions: Tensor::new(vec![t, spec.action_dim], actions)?,
        success,
    })
}

/// Expert episode that is retried under derived seeds on failure.
pub fn successful_episode(
    task_id: &str,
    mode: Mode,
    seed: u64,
    embodiment: &str,
    exec_noise: f64,
) -> Result<Episode> {
    let mut s = seed;
    for attempt in 0..RETRY_BUDGET {
        let ep = expert_episode(task_id, mode, s, embodiment, exec_noise)?;
        if ep.success {
            return Ok(ep);
        }
        s = derive_seed(seed, &format!("retry{}", attempt + 1));
    }
    Err(Error::ExpertFailure {
        task: task_id.into(),
        seed,
        reason: format!("no success within {STEP_BUDGET} steps after {RETRY_BUDGET} attempts"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub task_id: String,
    pub seed: u64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub embodiment: EmbodimentSpec,
    pub mode: Mode,
    pub seed: u64,
    pub exec_noise: f64,
    pub tasks: Vec<String>,
    pub n_img_tokens: usize,
    pub img_feat_dim: usize,
    pub lang_feat_dim: usize,
    pub episodes: Vec<EpisodeEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: Manifest = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::corrupt(&path, e.to_string()))?;
        if m.format_version != DATASET_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: DATASET_VERSION,
            });
        }
        m.embodiment.validate()?;
        Ok(m)
    }
}

/// Seed of episode `k` of a dataset generated with `seed`.
pub fn episode_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &format!("episode{k}"))
}

/// Writes `n_episodes` successful expert episodes, cycling through `tasks`,
/// and a manifest with per-dimension normalization fitted on the actions.
pub fn generate_dataset(
    n_episodes: usize,
    embodiment: &str,
    mode: Mode,
    tasks: &[String],
    seed: u64,
    exec_noise: f64,
    out_dir: &Path,
) -> Result<Manifest> {
    if tasks.is_empty() || n_episodes == 0 {
        return Err(Error::Config(
            "need at least one task and one episode".into(),
        ));
    }
    let mut spec = EmbodimentSpec::by_name(embodiment)?;
    fs::create_dir_all(out_dir.join("episodes"))?;
    let mut entries = Vec::with_capacity(n_episodes);
    let mut rows: Vec<f64> = Vec::new();
    for k in 0..n_episodes {
        let task_id = &tasks[k % tasks.len()];
        let ep = successful_episode(task_id, mode, episode_seed(seed, k), embodiment, exec_noise)?;
        rows.extend(ep.actions.data().iter().map(|&v| v as f64));
        let file = format!("episodes/ep_{k}.bin");
        let mut w = BufWriter::new(fs::File::create(out_dir.join(&file))?);
        ep.write_to(&mut w)?;
        w.flush()?;
        entries.push(EpisodeEntry {
            file,
            task_id: task_id.clone(),
            seed: ep.seed,
            length: ep.len(),
        });
    }
    spec.norm = NormStats::fit(rows.chunks(spec.action_dim))?;
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        embodiment: spec,
        mode,
        seed,
        exec_noise,
        tasks: tasks.to_vec(),
        n_img_tokens: super::N_IMG_TOKENS,
        img_feat_dim: super::IMG_FEAT_DIM,
        lang_feat_dim: super::LANG_FEAT_DIM,
        episodes: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Loads every episode and re-validates it against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let spec = &manifest.embodiment;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for entry in &manifest.episodes {
            let path = dir.join(&entry.file);
            let mut r = BufReader::new(fs::File::open(&path)?);
            let ep = Episode::read_from(&mut r, entry, &spec.name).map_err(|e| match e {
                Error::Blob(reason) => Error::corrupt(&path, reason),
                other => other,
            })?;
            let mut rest = [0u8; 1];
            if r.read(&mut rest)? != 0 {
                return Err(Error::corrupt(&path, "trailing bytes"));
            }
            if ep.len() != entry.length {
                return Err(Error::corrupt(
                    &path,
                    format!("length {} but manifest says {}", ep.len(), entry.length),
                ));
            }
            ep.validate(spec)?;
            episodes.push(ep);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            episodes,
        })
    }

    pub fn spec(&self) -> &EmbodimentSpec {
        &self.manifest.embodiment
    }

    /// SHA-256 over the manifest and every episode file, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(fs::read(self.dir.join("manifest.json"))?);
        for e in &self.manifest.episodes {
            h.update(fs::read(self.dir.join(&e.file))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Task instantiations `(task_id, seed)` of the stored episodes.
    pub fn instances(&self) -> Vec<(String, u64)> {
        self.manifest
            .episodes
            .iter()
            .map(|e| (e.task_id.clone(), e.seed))
            .collect()
    }
}
