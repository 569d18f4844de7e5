//! Run configuration: one TOML file with every knob of a run, including the
//! toggles explored by the ablation study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, DistortionKind};
use crate::diffusion::{make_cosine_schedule, NoiseSchedule, Snapshots, TrainHyper, UNetConfig};
use crate::error::{Error, Result};
use crate::iqa::{IqaConfig, IqaHyper, RestoredInputs, MAX_VARIANTS};
use crate::vcg::{select_taps, SelectionMode, VcgConfig};
use crate::vda::{QkvAssignment, VdaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_references: usize,
    pub kinds: Vec<DistortionKind>,
    pub levels: Vec<u8>,
    pub mos_jitter: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_references: 10,
            kinds: DistortionKind::GRADED.to_vec(),
            levels: vec![1, 2, 3, 4, 5],
            mos_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    /// Snapshot steps; `None` means `(T/3, 2T/3)`.
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    /// Clamp the implied clean estimate to the image range while sampling.
    pub clip_x0: bool,
    pub widths: (usize, usize),
    pub time_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: 50,
            t1: None,
            t2: None,
            clip_x0: true,
            widths: (16, 32),
            time_dim: 32,
            lr: 1e-3,
            batch: 8,
            train_steps: 600,
        }
    }
}

/// Switches for the ablation axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Off: every restored input is replaced by the distorted image.
    pub diffusion: bool,
    pub noise_embedding: bool,
    pub rtab: bool,
    pub vcg: bool,
    pub vda: bool,
    pub y0: bool,
    pub y_t1: bool,
    pub y_t2: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            diffusion: true,
            noise_embedding: true,
            rtab: true,
            vcg: true,
            vda: true,
            y0: true,
            y_t1: true,
            y_t2: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqaSection {
    pub selection: SelectionMode,
    pub qkv: QkvAssignment,
    pub train_encoders: bool,
    /// Remove each image's per-channel mean before encoding.
    pub center_inputs: bool,
    /// Flip/rotation/colour-order variants per image: the training set is
    /// grown by this factor and predictions average over as many views
    /// (1 = none, at most 24).
    pub variants: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for IqaSection {
    fn default() -> Self {
        let hp = IqaHyper::default();
        IqaSection {
            selection: SelectionMode::default(),
            qkv: QkvAssignment::default(),
            train_encoders: false,
            center_inputs: true,
            variants: 4,
            lr: hp.lr,
            epochs: hp.epochs,
            batch: hp.batch,
            weight_decay: hp.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Fraction of reference images held out for evaluation.
    pub test_fraction: f64,
    /// Run directory; relative paths resolve against the run root.
    pub run_dir: PathBuf,
    pub corpus: CorpusSection,
    pub diffusion: DiffusionSection,
    pub toggles: Toggles,
    pub iqa: IqaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: (32, 32),
            test_fraction: 0.2,
            run_dir: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            diffusion: DiffusionSection::default(),
            toggles: Toggles::default(),
            iqa: IqaSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.corpus_spec().validate().map_err(cfg_err)?;
        let sched = self.schedule()?;
        self.snapshots().validate(sched.steps).map_err(cfg_err)?;
        select_taps(self.iqa.selection)?;
        self.iqa_config().validate()?;
        let (h, w) = self.image_size;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("image size {h}x{w} must be a multiple of 8")));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if !(1..=MAX_VARIANTS).contains(&self.iqa.variants) {
            return Err(Error::Config(format!("iqa.variants {} outside 1..={MAX_VARIANTS}", self.iqa.variants)));
        }
        if self.diffusion.batch == 0 || self.iqa.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.diffusion.lr > 0.0 && self.iqa.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_references: self.corpus.n_references,
            image_size: self.image_size,
            kinds: self.corpus.kinds.clone(),
            levels: self.corpus.levels.clone(),
            seed: self.seed,
            mos_jitter: self.corpus.mos_jitter,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_cosine_schedule(self.diffusion.steps).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn snapshots(&self) -> Snapshots {
        let t = self.diffusion.steps;
        Snapshots {
            t1: self.diffusion.t1.unwrap_or(t / 3),
            t2: self.diffusion.t2.unwrap_or(2 * t / 3),
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            image_channels: 3,
            widths: self.diffusion.widths,
            time_dim: self.diffusion.time_dim,
        }
    }

    pub fn diffusion_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.diffusion.lr,
            batch: self.diffusion.batch,
            steps: self.diffusion.train_steps,
            seed: self.seed,
        }
    }

    pub fn restored_inputs(&self) -> RestoredInputs {
        RestoredInputs {
            y0: self.toggles.y0,
            y_t1: self.toggles.y_t1,
            y_t2: self.toggles.y_t2,
        }
    }

    pub fn iqa_config(&self) -> IqaConfig {
        IqaConfig {
            vcg: VcgConfig {
                image_size: self.image_size,
                selection: self.iqa.selection,
                ..VcgConfig::default()
            },
            vda: VdaConfig {
                image_size: self.image_size,
                qkv: self.iqa.qkv,
                rtab: self.toggles.rtab,
                ..VdaConfig::default()
            },
            use_vcg: self.toggles.vcg,
            use_vda: self.toggles.vda,
            noise_embedding: self.toggles.noise_embedding,
            train_encoders: self.iqa.train_encoders,
            center_inputs: self.iqa.center_inputs,
            variants: self.iqa.variants,
        }
    }

    pub fn iqa_hyper(&self) -> IqaHyper {
        IqaHyper {
            lr: self.iqa.lr,
            epochs: self.iqa.epochs,
            batch: self.iqa.batch,
            weight_decay: self.iqa.weight_decay,
            seed: self.seed,
        }
    }
}
