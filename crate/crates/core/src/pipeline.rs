//! End-to-end runs: corpus, split, denoiser training, restoration, quality
//! model training and evaluation, both in memory and as on-disk stages under a
//! run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{self, load_corpus, ImageSample, MANIFEST_FILE};
use crate::diffusion::{
    restore_batch, train_denoiser, ClampedX0, Denoiser, DenoiserModel, DiffusionInfo, RestorationTriple,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::iqa::{augment, train_iqa, IqaInfo, IqaInput, IqaModel};
use crate::metrics::{check_disjoint, split_by_reference, EvalReport, ScoredPair, Split};
use crate::plot;
use crate::seed;

const RESTORE_BATCH: usize = 16;

/// Samples plus their reference-disjoint split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, cfg: &RunConfig) -> Result<Self> {
        let ids: Vec<String> = samples.iter().map(|s| s.reference_id.clone()).collect();
        let split = split_by_reference(&ids, cfg.test_fraction, cfg.seed)?;
        Ok(Dataset { samples, split })
    }

    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Self::new(corpus::generate(&cfg.corpus_spec())?, cfg)
    }

    pub fn reference_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.reference_id.clone()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<ImageSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Train the denoiser on the training split only.
pub fn fit_denoiser(cfg: &RunConfig, data: &Dataset) -> Result<(DenoiserModel, Vec<f64>)> {
    let sched = cfg.schedule()?;
    let init = DenoiserModel::init(cfg.unet_config(), cfg.seed);
    let out = train_denoiser(&data.subset(&data.split.train), &sched, init, &cfg.diffusion_hyper())?;
    Ok((out.model, out.losses))
}

/// Restoration of every image, in the exported form (clamped to `[0, 1]` and
/// rounded to 8 bits) so in-memory and on-disk runs see identical inputs.
pub fn restore_images(cfg: &RunConfig, model: &DenoiserModel, images: &[&Image]) -> Result<Vec<RestorationTriple>> {
    let sched = cfg.schedule()?;
    let snaps = cfg.snapshots();
    let mut out = Vec::with_capacity(images.len());
    for (c, chunk) in images.chunks(RESTORE_BATCH).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|k| seed::derive(cfg.seed, &[(c * RESTORE_BATCH + k) as u64]))
            .collect();
        let clamped = ClampedX0 {
            inner: model,
            sched: &sched,
        };
        let denoiser: &dyn Denoiser = if cfg.diffusion.clip_x0 { &clamped } else { model };
        for t in restore_batch(chunk, denoiser, &sched, snaps, &seeds)? {
            out.push(exported(t));
        }
        log::info!("restored {}/{}", out.len(), images.len());
    }
    Ok(out)
}

fn exported(t: RestorationTriple) -> RestorationTriple {
    let f = |im: Image| im.clamp(0.0, 1.0).quantized();
    RestorationTriple {
        y0: f(t.y0),
        y_t1: f(t.y_t1),
        y_t2: f(t.y_t2),
        ..t
    }
}

/// Quality-model inputs; without restorations (or with diffusion toggled off)
/// every slot is the distorted image.
pub fn iqa_inputs(cfg: &RunConfig, samples: &[ImageSample], restored: Option<&[RestorationTriple]>) -> Vec<IqaInput> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = restored.filter(|_| cfg.toggles.diffusion).map(|r| &r[i]);
            IqaInput::assemble(&s.distorted, r, cfg.restored_inputs())
        })
        .collect()
}

/// Train the quality model on the training split of `inputs`.
pub fn fit_iqa(cfg: &RunConfig, data: &Dataset, inputs: &[IqaInput]) -> Result<(IqaModel, Vec<f64>)> {
    let mut model = IqaModel::init(cfg.iqa_config(), cfg.seed)?;
    log::info!("{}", model.describe());
    let train: Vec<IqaInput> = data.split.train.iter().map(|&i| inputs[i].clone()).collect();
    let labels: Vec<f64> = data.split.train.iter().map(|&i| data.samples[i].mos).collect();
    let (train, labels) = augment(&train, &labels, cfg.iqa.variants);
    let prepared = model.prepare(&train)?;
    let curve = train_iqa(&mut model, &prepared, &labels, &cfg.iqa_hyper())?;
    Ok((model, curve))
}

/// Score the samples at `idx` and correlate with their labels.
pub fn evaluate(model: &IqaModel, data: &Dataset, inputs: &[IqaInput], idx: &[usize]) -> Result<EvalReport> {
    check_disjoint(&data.split, &data.reference_ids())?;
    let chosen: Vec<IqaInput> = idx.iter().map(|&i| inputs[i].clone()).collect();
    let scores = model.predict(&chosen)?;
    let pairs = idx
        .iter()
        .zip(scores)
        .map(|(&i, s)| {
            let smp = &data.samples[i];
            ScoredPair {
                id: smp.id.clone(),
                predicted: s.final_score,
                label: smp.mos,
                kind: smp.distortion.kind,
                level: smp.distortion.level,
            }
        })
        .collect();
    EvalReport::from_pairs(pairs)
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub diffusion_losses: Vec<f64>,
    pub iqa_losses: Vec<f64>,
    pub report: EvalReport,
}

/// Restorations for the whole dataset (none when diffusion is toggled off).
pub fn restorations(cfg: &RunConfig, data: &Dataset) -> Result<(Option<Vec<RestorationTriple>>, Vec<f64>)> {
    if !cfg.toggles.diffusion {
        return Ok((None, Vec::new()));
    }
    let (model, losses) = fit_denoiser(cfg, data)?;
    let images: Vec<&Image> = data.samples.iter().map(|s| &s.distorted).collect();
    Ok((Some(restore_images(cfg, &model, &images)?), losses))
}

/// Everything in memory: generate, split, restore, train, evaluate held-out.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    let data = Dataset::generate(cfg)?;
    let (restored, diffusion_losses) = restorations(cfg, &data)?;
    let (report, iqa_losses) = fit_and_evaluate(cfg, &data, restored.as_deref())?;
    Ok(ExperimentResult {
        diffusion_losses,
        iqa_losses,
        report,
    })
}

/// Train the quality model under `cfg` on precomputed restorations and
/// evaluate it on the held-out split.
pub fn fit_and_evaluate(
    cfg: &RunConfig,
    data: &Dataset,
    restored: Option<&[RestorationTriple]>,
) -> Result<(EvalReport, Vec<f64>)> {
    let inputs = iqa_inputs(cfg, &data.samples, restored);
    let (model, curve) = fit_iqa(cfg, data, &inputs)?;
    Ok((evaluate(&model, data, &inputs, &data.split.test)?, curve))
}

/// Ablation axes; each expands to the rows of one study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Modules,
    Branches,
    Selection,
    Noised,
    Qkv,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Modules,
        AblationAxis::Branches,
        AblationAxis::Selection,
        AblationAxis::Noised,
        AblationAxis::Qkv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Modules => "modules",
            AblationAxis::Branches => "branches",
            AblationAxis::Selection => "selection",
            AblationAxis::Noised => "noised",
            AblationAxis::Qkv => "qkv",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub config: RunConfig,
}

/// The configurations compared along `axis`, derived from `base`.
pub fn ablation_rows(axis: AblationAxis, base: &RunConfig) -> Vec<AblationRow> {
    let row = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        AblationRow { name, config }
    };
    match axis {
        AblationAxis::Modules => [(false, false, false), (true, false, false), (true, true, false), (true, false, true), (true, true, true)]
            .into_iter()
            .map(|(d, n, r)| {
                row(format!("diffusion={d} noise_embedding={n} rtab={r}"), &|c| {
                    c.toggles.diffusion = d;
                    c.toggles.noise_embedding = n;
                    c.toggles.rtab = r;
                })
            })
            .collect(),
        AblationAxis::Branches => [(true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(a, b)| {
                row(format!("vcg={a} vda={b}"), &|c| {
                    c.toggles.vcg = a;
                    c.toggles.vda = b;
                })
            })
            .collect(),
        AblationAxis::Selection => crate::vcg::SelectionMode::ablation_rows()
            .into_iter()
            .map(|m| row(m.to_string(), &|c| c.iqa.selection = m))
            .collect(),
        AblationAxis::Noised => [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, true, true),
        ]
        .into_iter()
        .map(|(a, b, t)| {
            row(format!("y0={a} y_t1={b} y_t2={t}"), &|c| {
                c.toggles.y0 = a;
                c.toggles.y_t1 = b;
                c.toggles.y_t2 = t;
            })
        })
        .collect(),
        AblationAxis::Qkv => crate::vda::QkvAssignment::ALL
            .into_iter()
            .map(|q| row(q.as_str().to_string(), &|c| c.iqa.qkv = q))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: AblationAxis,
    pub row: String,
    pub srcc: f64,
    pub plcc: f64,
}

/// Run every row of `axis` on shared data and restorations.
pub fn run_ablation(
    axis: AblationAxis,
    base: &RunConfig,
    data: &Dataset,
    restored: Option<&[RestorationTriple]>,
) -> Result<Vec<AblationResult>> {
    ablation_rows(axis, base)
        .into_iter()
        .map(|r| {
            log::info!("ablation {}: {}", axis.as_str(), r.name);
            let (report, _) = fit_and_evaluate(&r.config, data, restored)?;
            Ok(AblationResult {
                axis,
                row: r.name,
                srcc: report.srcc,
                plcc: report.plcc,
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn ablation_csv(rows: &[AblationResult]) -> String {
    let mut out = String::from("axis,row,srcc,plcc\r\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\r\n",
            r.axis.as_str(),
            csv_field(&r.row),
            r.srcc,
            r.plcc
        ));
    }
    out
}

/// Locations of every artifact inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join(MANIFEST_FILE)
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn diffusion_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/diffusion")
    }

    pub fn iqa_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/iqa")
    }

    pub fn restored_dir(&self) -> PathBuf {
        self.root.join("restored")
    }

    pub fn restored(&self, id: &str, which: &str) -> PathBuf {
        self.restored_dir().join(id).join(format!("{which}.png"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\r\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9}\r\n"));
    }
    s
}

/// On-disk stages, each reading the artifacts of the previous ones.
pub mod stages {
    use super::*;

    pub fn gen_corpus(cfg: &RunConfig, run: &RunLayout) -> Result<usize> {
        let manifest = corpus::gen_corpus(&cfg.corpus_spec(), &run.corpus_dir())?;
        let data = load_dataset(cfg, run)?;
        write_text(&run.split(), &serde_json::to_string_pretty(&data.split)?)?;
        log::info!(
            "corpus: {} samples, {} held-out references {:?}",
            manifest.samples.len(),
            data.split.test_references.len(),
            data.split.test_references
        );
        Ok(manifest.samples.len())
    }

    /// Corpus from disk with the split recorded at generation time (or a
    /// fresh one derived from the config).
    pub fn load_dataset(cfg: &RunConfig, run: &RunLayout) -> Result<Dataset> {
        let (manifest, samples) = load_corpus(&run.manifest())?;
        if manifest.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "corpus images are {:?} but the config expects {:?}",
                manifest.image_size, cfg.image_size
            )));
        }
        let path = run.split();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let split: Split = serde_json::from_str(&text)?;
            let data = Dataset { samples, split };
            check_disjoint(&data.split, &data.reference_ids())?;
            Ok(data)
        } else {
            Dataset::new(samples, cfg)
        }
    }

    pub fn train_diffusion(cfg: &RunConfig, run: &RunLayout) -> Result<Vec<f64>> {
        let data = load_dataset(cfg, run)?;
        let (model, losses) = fit_denoiser(cfg, &data)?;
        log::info!("{}", model.describe());
        let info = DiffusionInfo {
            unet: cfg.unet_config(),
            steps: cfg.diffusion.steps,
            seed: cfg.seed,
            train_steps: losses.len(),
        };
        model.save(&run.diffusion_checkpoint(), &info)?;
        write_text(&run.reports().join("diffusion_loss.csv"), &loss_csv(&losses))?;
        plot::line_chart(&[&losses], &run.plots().join("diffusion_loss.png"))?;
        Ok(losses)
    }

    pub fn restore(cfg: &RunConfig, run: &RunLayout) -> Result<usize> {
        let data = load_dataset(cfg, run)?;
        let (model, _) = DenoiserModel::load(&run.diffusion_checkpoint())?;
        let images: Vec<&Image> = data.samples.iter().map(|s| &s.distorted).collect();
        let triples = restore_images(cfg, &model, &images)?;
        for (s, t) in data.samples.iter().zip(&triples) {
            t.y0.save_png(&run.restored(&s.id, "y0"))?;
            t.y_t1.save_png(&run.restored(&s.id, "y_t1"))?;
            t.y_t2.save_png(&run.restored(&s.id, "y_t2"))?;
        }
        Ok(triples.len())
    }

    fn load_restorations(cfg: &RunConfig, run: &RunLayout, data: &Dataset) -> Result<Option<Vec<RestorationTriple>>> {
        if !cfg.toggles.diffusion {
            return Ok(None);
        }
        let snaps = cfg.snapshots();
        data.samples
            .iter()
            .map(|s| {
                Ok(RestorationTriple {
                    y0: Image::load_png(&run.restored(&s.id, "y0"))?,
                    y_t1: Image::load_png(&run.restored(&s.id, "y_t1"))?,
                    y_t2: Image::load_png(&run.restored(&s.id, "y_t2"))?,
                    t1: snaps.t1,
                    t2: snaps.t2,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn train_iqa(cfg: &RunConfig, run: &RunLayout) -> Result<Vec<f64>> {
        let data = load_dataset(cfg, run)?;
        let restored = load_restorations(cfg, run, &data)?;
        let inputs = iqa_inputs(cfg, &data.samples, restored.as_deref());
        let (model, curve) = fit_iqa(cfg, &data, &inputs)?;
        let info = IqaInfo {
            config: cfg.iqa_config(),
            seed: cfg.seed,
            epochs_trained: curve.len(),
        };
        model.save(&run.iqa_checkpoint(), &info)?;
        write_text(&run.reports().join("iqa_loss.csv"), &loss_csv(&curve))?;
        plot::line_chart(&[&curve], &run.plots().join("iqa_loss.png"))?;
        Ok(curve)
    }

    pub fn eval(cfg: &RunConfig, run: &RunLayout) -> Result<EvalReport> {
        let data = load_dataset(cfg, run)?;
        let (model, _) = IqaModel::load(&run.iqa_checkpoint())?;
        let restored = load_restorations(cfg, run, &data)?;
        let inputs = iqa_inputs(cfg, &data.samples, restored.as_deref());
        let report = evaluate(&model, &data, &inputs, &data.split.test)?;
        let dir = run.reports();
        write_text(&dir.join("eval.json"), &report.to_json()?)?;
        write_text(&dir.join("eval.csv"), &report.to_csv())?;
        write_text(&dir.join("eval_pairs.csv"), &report.pairs_csv())?;
        let (p, l): (Vec<f64>, Vec<f64>) = report.pairs.iter().map(|x| (x.label, x.predicted)).unzip();
        plot::scatter(&p, &l, &run.plots().join("eval_scatter.png"))?;
        Ok(report)
    }

    /// Score one image file. Missing checkpoints fall back to freshly
    /// initialised models.
    pub fn score(cfg: &RunConfig, run: &RunLayout, image: &Path) -> Result<crate::vda::FusedScore> {
        let (h, w) = cfg.image_size;
        let img = Image::load_resized(image, h, w)?;
        let model = match IqaModel::load(&run.iqa_checkpoint()) {
            Ok((m, _)) => m,
            Err(Error::MissingArtifact(p)) => {
                log::warn!("no quality checkpoint at {}; using an untrained model", p.display());
                IqaModel::init(cfg.iqa_config(), cfg.seed)?
            }
            Err(e) => return Err(e),
        };
        let restored = if cfg.toggles.diffusion {
            let denoiser = match DenoiserModel::load(&run.diffusion_checkpoint()) {
                Ok((m, _)) => m,
                Err(Error::MissingArtifact(p)) => {
                    log::warn!("no diffusion checkpoint at {}; using an untrained denoiser", p.display());
                    DenoiserModel::init(cfg.unet_config(), cfg.seed)
                }
                Err(e) => return Err(e),
            };
            Some(restore_images(cfg, &denoiser, &[&img])?.remove(0))
        } else {
            None
        };
        let input = IqaInput::assemble(&img, restored.as_ref(), cfg.restored_inputs());
        Ok(model.predict(&[input])?.remove(0))
    }

    pub fn ablate(cfg: &RunConfig, run: &RunLayout, axis: AblationAxis) -> Result<Vec<AblationResult>> {
        let data = load_dataset(cfg, run)?;
        let mut full = cfg.clone();
        full.toggles.diffusion = true;
        let restored = load_restorations(&full, run, &data)?;
        let rows = run_ablation(axis, cfg, &data, restored.as_deref())?;
        write_text(
            &run.reports().join(format!("ablation_{}.csv", axis.as_str())),
            &ablation_csv(&rows),
        )?;
        Ok(rows)
    }
}
