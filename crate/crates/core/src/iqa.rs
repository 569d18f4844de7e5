//! The two-branch quality model: input assembly from restoration outputs,
//! optional frozen-encoder feature caching, training against MOS labels and
//! fused prediction.

use std::path::Path;

use ndarray::{concatenate, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::clamp_temperatures;
use crate::autograd::{Tensor, Var};
use crate::checkpoint;
use crate::diffusion::RestorationTriple;
use crate::error::{Error, Result};
use crate::image::{to_nchw, Image};
use crate::nn::{Ctx, ParamStore};
use crate::optim::Adam;
use crate::seed::{self, stream};
use crate::vcg::{self, Source, Vcg, VcgConfig, NUM_TAPS};
use crate::vda::{self, fuse_scores, FusedScore, Vda, VdaConfig};

pub const CHECKPOINT_KIND: &str = "iqa";

/// Which restoration outputs reach the branches; absent ones are replaced by
/// copies of the distorted image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoredInputs {
    pub y0: bool,
    pub y_t1: bool,
    pub y_t2: bool,
}

impl Default for RestoredInputs {
    fn default() -> Self {
        RestoredInputs {
            y0: true,
            y_t1: true,
            y_t2: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaConfig {
    pub vcg: VcgConfig,
    pub vda: VdaConfig,
    pub use_vcg: bool,
    pub use_vda: bool,
    pub noise_embedding: bool,
    /// Let the optimiser update the two feature encoders.
    pub train_encoders: bool,
    /// Shift every channel of every input image to mean 0.5 before encoding.
    pub center_inputs: bool,
    /// Number of [`variant`]s a prediction averages over (1 = the input as given).
    pub variants: usize,
}

impl Default for IqaConfig {
    fn default() -> Self {
        IqaConfig {
            vcg: VcgConfig::default(),
            vda: VdaConfig::default(),
            use_vcg: true,
            use_vda: true,
            noise_embedding: true,
            train_encoders: false,
            center_inputs: true,
            variants: 1,
        }
    }
}

impl IqaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_vcg && !self.use_vda {
            return Err(Error::Config("at least one scoring branch must be enabled".into()));
        }
        if self.vcg.image_size != self.vda.image_size {
            return Err(Error::Config("vcg and vda image sizes differ".into()));
        }
        Ok(())
    }
}

/// The four images one prediction looks at, in `[0, 1]`, ordered as [`Source::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct IqaInput {
    pub images: [Image; 4],
}

impl IqaInput {
    /// Without a restoration every slot holds the distorted image.
    pub fn assemble(dis: &Image, restored: Option<&RestorationTriple>, keep: RestoredInputs) -> Self {
        let pick = |on: bool, f: fn(&RestorationTriple) -> &Image| match restored {
            Some(r) if on => f(r).clone(),
            _ => dis.clone(),
        };
        IqaInput {
            images: [
                dis.clone(),
                pick(keep.y0, |r| &r.y0),
                pick(keep.y_t1, |r| &r.y_t1),
                pick(keep.y_t2, |r| &r.y_t2),
            ],
        }
    }
}

fn centered(img: &Image) -> Image {
    let mut a = img.0.clone();
    for mut ch in a.axis_iter_mut(Axis(2)) {
        let m = ch.mean().unwrap_or(0.0);
        ch.mapv_inplace(|v| v - m + 0.5);
    }
    Image(a)
}

/// One of 24 label-preserving variants: `k % 8` picks a flip/transpose
/// combination, `k / 8` a cyclic shift of the colour channels. The transpose
/// is skipped for non-square images.
pub fn variant(img: &Image, k: usize) -> Image {
    let mut a = img.0.view();
    if k & 4 != 0 && img.height() == img.width() {
        a.swap_axes(0, 1);
    }
    if k & 1 != 0 {
        a.invert_axis(Axis(0));
    }
    if k & 2 != 0 {
        a.invert_axis(Axis(1));
    }
    let shift = (k / 8) % 3;
    let c = a.shape()[2];
    Image(Array3::from_shape_fn(a.dim(), |(y, x, ch)| a[(y, x, (ch + shift) % c)]))
}

/// Transform used for the `v`-th variant: `6v mod 24 + 6v div 24`, so the
/// first few mix flips with colour shifts.
fn variant_index(v: usize) -> usize {
    (6 * v) % MAX_VARIANTS + (6 * v) / MAX_VARIANTS
}

/// Training set grown to `n` variants per sample, variant-major.
pub fn augment(inputs: &[IqaInput], labels: &[f64], n: usize) -> (Vec<IqaInput>, Vec<f64>) {
    let mut out = Vec::with_capacity(inputs.len() * n);
    let mut lab = Vec::with_capacity(inputs.len() * n);
    for v in 0..n.clamp(1, MAX_VARIANTS) {
        let k = variant_index(v);
        for (inp, &l) in inputs.iter().zip(labels) {
            out.push(IqaInput {
                images: std::array::from_fn(|i| variant(&inp.images[i], k)),
            });
            lab.push(l);
        }
    }
    (out, lab)
}

pub const MAX_VARIANTS: usize = 24;

/// Network-ready form of one input: the four images as `(1, 3, H, W)`
/// tensors in `[-1, 1]`, plus cached encoder outputs when encoders are frozen.
#[derive(Clone, Debug)]
pub struct Prepared {
    images: [Tensor; 4],
    vcg_taps: Option<[Vec<Option<Tensor>>; 4]>,
    vda_feats: Option<[Tensor; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for IqaHyper {
    fn default() -> Self {
        IqaHyper {
            lr: 5e-4,
            epochs: 8,
            batch: 8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqaInfo {
    pub config: IqaConfig,
    pub seed: u64,
    pub epochs_trained: usize,
}

#[derive(Clone, Debug)]
pub struct IqaModel {
    pub config: IqaConfig,
    pub vcg: Option<Vcg>,
    pub vda: Option<Vda>,
    pub store: ParamStore,
}

fn stack(ts: &[&Tensor]) -> Tensor {
    let views: Vec<_> = ts.iter().map(|t| t.view()).collect();
    concatenate(Axis(0), &views).expect("stacked tensors share a shape")
}

impl IqaModel {
    fn build(config: IqaConfig) -> Result<(Option<Vcg>, Option<Vda>)> {
        config.validate()?;
        let vcg = config.use_vcg.then(|| Vcg::new(config.vcg.clone())).transpose()?;
        let vda = config.use_vda.then(|| Vda::new(config.vda.clone())).transpose()?;
        Ok((vcg, vda))
    }

    pub fn init(config: IqaConfig, seed: u64) -> Result<Self> {
        let (vcg, vda) = Self::build(config.clone())?;
        let mut store = ParamStore::new();
        if let Some(v) = &vcg {
            v.init(&mut store, &mut seed::rng(seed, &[stream::IQA_INIT, 0]));
            if !config.noise_embedding {
                store.insert(vcg::NOISE_CODE, Tensor::zeros(ndarray::IxDyn(&[4, config.vcg.dim])), false);
            }
        }
        if let Some(v) = &vda {
            v.init(&mut store, &mut seed::rng(seed, &[stream::IQA_INIT, 1]));
        }
        store.set_trainable(vcg::ENCODER_PREFIX, config.train_encoders);
        store.set_trainable(vda::ENCODER_PREFIX, config.train_encoders);
        Ok(IqaModel { config, vcg, vda, store })
    }

    pub fn describe(&self) -> String {
        format!(
            "quality model: vcg {}, vda {}, noise embedding {}, encoders {}, {} trainable of {} parameters",
            if self.vcg.is_some() { "on" } else { "off" },
            if self.vda.is_some() { "on" } else { "off" },
            if self.config.noise_embedding { "on" } else { "off" },
            if self.config.train_encoders { "trained" } else { "frozen" },
            self.store.num_trainable(),
            self.store.num_scalars()
        )
    }

    /// Convert inputs and, for frozen encoders, cache their outputs.
    pub fn prepare(&self, inputs: &[IqaInput]) -> Result<Vec<Prepared>> {
        let (h, w) = self.config.vcg.image_size;
        inputs
            .iter()
            .map(|inp| {
                if inp.images.iter().any(|im| (im.height(), im.width()) != (h, w)) {
                    return Err(Error::ShapeMismatch {
                        expected: vec![h, w],
                        actual: vec![inp.images[0].height(), inp.images[0].width()],
                    });
                }
                let images: [Tensor; 4] = std::array::from_fn(|i| {
                    let im = &inp.images[i];
                    if self.config.center_inputs {
                        to_nchw(&[&centered(im)], |v| 2.0 * v - 1.0)
                    } else {
                        to_nchw(&[im], |v| 2.0 * v - 1.0)
                    }
                });
                let mut prep = Prepared {
                    images,
                    vcg_taps: None,
                    vda_feats: None,
                };
                if self.config.train_encoders {
                    return Ok(prep);
                }
                if let Some(v) = &self.vcg {
                    let mut taps: [Vec<Option<Tensor>>; 4] = Default::default();
                    for src in Source::ALL {
                        let needed = v.needed(src);
                        taps[src.index()] = if needed.is_empty() {
                            vec![None; NUM_TAPS]
                        } else {
                            let all = v.encoder.encode(&self.store, &prep.images[src.index()])?;
                            all.into_iter()
                                .enumerate()
                                .map(|(k, t)| needed.contains(&(k + 1)).then_some(t))
                                .collect()
                        };
                    }
                    prep.vcg_taps = Some(taps);
                }
                if let Some(v) = &self.vda {
                    prep.vda_feats = Some(std::array::from_fn(|i| v.encoder.encode(&self.store, &prep.images[i])));
                }
                Ok(prep)
            })
            .collect()
    }

    /// Branch scores `(N,)` for a batch; `None` for a disabled branch.
    pub fn forward(&self, ctx: &mut Ctx, batch: &[&Prepared]) -> Result<(Option<Var>, Option<Var>)> {
        let images = |ctx: &mut Ctx| -> [Var; 4] {
            std::array::from_fn(|i| {
                let parts: Vec<&Tensor> = batch.iter().map(|p| &p.images[i]).collect();
                ctx.input(stack(&parts))
            })
        };
        let s1 = match &self.vcg {
            None => None,
            Some(v) if batch[0].vcg_taps.is_some() => {
                let dummy = ctx.input(Tensor::zeros(ndarray::IxDyn(&[])));
                let taps: [Vec<Var>; 4] = std::array::from_fn(|s| {
                    (0..NUM_TAPS)
                        .map(|k| {
                            let parts: Option<Vec<&Tensor>> =
                                batch.iter().map(|p| p.vcg_taps.as_ref().unwrap()[s][k].as_ref()).collect();
                            match parts {
                                Some(parts) => ctx.input(stack(&parts)),
                                None => dummy,
                            }
                        })
                        .collect()
                });
                Some(v.forward_taps(ctx, &taps)?)
            }
            Some(v) => {
                let imgs = images(ctx);
                Some(v.forward(ctx, imgs)?)
            }
        };
        let s2 = match &self.vda {
            None => None,
            Some(v) => Some(match &batch[0].vda_feats {
                Some(_) => {
                    let feats: [Var; 4] = std::array::from_fn(|i| {
                        let parts: Vec<&Tensor> = batch.iter().map(|p| &p.vda_feats.as_ref().unwrap()[i]).collect();
                        ctx.input(stack(&parts))
                    });
                    v.forward_feats(ctx, &feats)?
                }
                None => {
                    let imgs = images(ctx);
                    v.forward(ctx, imgs)?
                }
            }),
        };
        Ok((s1, s2))
    }

    /// Sum of the enabled branch scores, `(N,)`.
    pub fn forward_final(&self, ctx: &mut Ctx, batch: &[&Prepared]) -> Result<Var> {
        match self.forward(ctx, batch)? {
            (Some(a), Some(b)) => Ok(ctx.g.add(a, b)),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::Config("no scoring branch enabled".into())),
        }
    }

    pub fn predict_prepared(&self, prepared: &[Prepared]) -> Result<Vec<FusedScore>> {
        let mut out = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(16) {
            let refs: Vec<&Prepared> = chunk.iter().collect();
            let mut ctx = Ctx::inference(&self.store);
            let (s1, s2) = self.forward(&mut ctx, &refs)?;
            let get = |v: Option<Var>| v.map(|v| ctx.g.value(v).clone());
            let (a, b) = (get(s1), get(s2));
            for i in 0..chunk.len() {
                let x = a.as_ref().map_or(0.0, |t| t[[i]]);
                let y = b.as_ref().map_or(0.0, |t| t[[i]]);
                out.push(fuse_scores(x, y)?);
            }
        }
        Ok(out)
    }

    /// Branch scores averaged over `config.variants` views of each input.
    pub fn predict(&self, inputs: &[IqaInput]) -> Result<Vec<FusedScore>> {
        let n = self.config.variants.clamp(1, MAX_VARIANTS);
        if n == 1 {
            return self.predict_prepared(&self.prepare(inputs)?);
        }
        let (views, _) = augment(inputs, &vec![0.0; inputs.len()], n);
        let scores = self.predict_prepared(&self.prepare(&views)?)?;
        (0..inputs.len())
            .map(|i| {
                let each = (0..n).map(|v| &scores[v * inputs.len() + i]);
                let s1 = each.clone().map(|s| s.score1).sum::<f64>() / n as f64;
                let s2 = each.map(|s| s.score2).sum::<f64>() / n as f64;
                fuse_scores(s1, s2)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, info: &IqaInfo) -> Result<()> {
        checkpoint::save(dir, CHECKPOINT_KIND, &self.store, serde_json::to_value(info)?)
    }

    pub fn load(dir: &Path) -> Result<(Self, IqaInfo)> {
        let (store, meta) = checkpoint::load(dir)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, expected `{CHECKPOINT_KIND}`",
                dir.display(),
                meta.kind
            )));
        }
        let info: IqaInfo = serde_json::from_value(meta.info)?;
        let (vcg, vda) = Self::build(info.config.clone())?;
        Ok((
            IqaModel {
                config: info.config.clone(),
                vcg,
                vda,
                store,
            },
            info,
        ))
    }
}

/// Mean-squared error between the fused score and the labels, `(N,)` each.
pub fn score_loss(ctx: &mut Ctx, model: &IqaModel, batch: &[&Prepared], labels: &[f64]) -> Result<Var> {
    let pred = model.forward_final(ctx, batch)?;
    let target = ctx.input(Tensor::from_shape_vec(ndarray::IxDyn(&[labels.len()]), labels.to_vec()).unwrap());
    let d = ctx.g.sub(pred, target);
    let sq = ctx.g.square(d);
    Ok(ctx.g.mean(sq))
}

/// Adam on [`score_loss`] with a per-epoch seeded shuffle. Returns the mean
/// training loss of every epoch.
pub fn train_iqa(model: &mut IqaModel, prepared: &[Prepared], labels: &[f64], hp: &IqaHyper) -> Result<Vec<f64>> {
    if prepared.is_empty() || prepared.len() != labels.len() {
        return Err(Error::invalid("training needs one label per prepared sample"));
    }
    if hp.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut opt = Adam::new(hp.lr).with_weight_decay(hp.weight_decay);
    let mut curve = Vec::with_capacity(hp.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut seed::rng(hp.seed, &[stream::IQA_TRAIN, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut ctx = Ctx::new(&model.store, true);
                let loss = score_loss(&mut ctx, model, &batch, &y)?;
                let v = ctx.g.scalar(loss);
                if !v.is_finite() {
                    return Err(Error::non_finite(format!("quality loss in epoch {epoch}: {v}")));
                }
                total += v * chunk.len() as f64;
                let g = ctx.g.backward(loss);
                ctx.param_grads(&g)
            };
            opt.step(&mut model.store, &grads);
            clamp_temperatures(&mut model.store);
        }
        if !model.store.all_finite() {
            return Err(Error::non_finite(format!("quality weights after epoch {epoch}")));
        }
        let mean = total / prepared.len() as f64;
        log::debug!("iqa epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::reference_image;

    fn tiny(train_encoders: bool, use_vcg: bool, use_vda: bool) -> IqaConfig {
        let mut c = IqaConfig {
            use_vcg,
            use_vda,
            train_encoders,
            ..Default::default()
        };
        c.vcg.image_size = (8, 8);
        c.vcg.dim = 8;
        c.vcg.heads = 2;
        c.vcg.window = 2;
        c.vda.image_size = (8, 8);
        c.vda.widths = [4, 4, 8];
        c.vda.heads = 2;
        c
    }

    fn inputs(n: usize) -> Vec<IqaInput> {
        (0..n)
            .map(|i| {
                let d = reference_image(8, 8, i as u64);
                IqaInput::assemble(&d, None, RestoredInputs::default())
            })
            .collect()
    }

    #[test]
    fn cached_and_live_encoders_agree() {
        let frozen = IqaModel::init(tiny(false, true, true), 3).unwrap();
        let mut live = frozen.clone();
        live.config.train_encoders = true;
        let inp = inputs(3);
        let a = frozen.predict(&inp).unwrap();
        let b = live.predict(&inp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.final_score - y.final_score).abs() < 1e-12);
            assert!((x.final_score - x.score1 - x.score2).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_encoders_do_not_move() {
        let mut m = IqaModel::init(tiny(false, true, true), 1).unwrap();
        let before = m.store.clone();
        let prep = m.prepare(&inputs(4)).unwrap();
        let curve = train_iqa(
            &mut m,
            &prep,
            &[0.1, 0.4, 0.6, 0.9],
            &IqaHyper {
                epochs: 3,
                batch: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(curve.len(), 3);
        for (name, p) in before.iter() {
            let now = &m.store.get(name).unwrap();
            if name.starts_with(vcg::ENCODER_PREFIX) || name.starts_with(vda::ENCODER_PREFIX) {
                assert_eq!(&p.value, *now, "{name}");
            }
        }
        assert_ne!(before.get(vcg::NOISE_CODE), m.store.get(vcg::NOISE_CODE));
    }

    #[test]
    fn disabled_noise_embedding_stays_zero() {
        let mut cfg = tiny(false, true, false);
        cfg.noise_embedding = false;
        let mut m = IqaModel::init(cfg, 1).unwrap();
        let prep = m.prepare(&inputs(2)).unwrap();
        train_iqa(&mut m, &prep, &[0.2, 0.8], &IqaHyper { epochs: 2, ..Default::default() }).unwrap();
        assert!(m.store.get(vcg::NOISE_CODE).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_branch_scores_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        for (v1, v2) in [(true, false), (false, true)] {
            let mut m = IqaModel::init(tiny(false, v1, v2), 2).unwrap();
            checkpoint::quantize(&mut m.store);
            let s = m.predict(&inputs(2)).unwrap();
            assert!(if v1 { s[0].score2 == 0.0 } else { s[0].score1 == 0.0 });
            let info = IqaInfo {
                config: m.config.clone(),
                seed: 2,
                epochs_trained: 0,
            };
            m.save(dir.path(), &info).unwrap();
            let (back, _) = IqaModel::load(dir.path()).unwrap();
            assert_eq!(back.predict(&inputs(2)).unwrap(), s);
        }
        assert!(IqaModel::init(tiny(false, false, false), 0).is_err());
    }

    #[test]
    fn variants_are_distinct_rearrangements() {
        let img = reference_image(8, 8, 5);
        let sorted = |im: &Image| {
            let mut v = im.0.iter().copied().collect::<Vec<_>>();
            v.sort_by(f64::total_cmp);
            v
        };
        let all: Vec<Image> = (0..MAX_VARIANTS).map(|k| variant(&img, k)).collect();
        assert_eq!(all[0], img);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(sorted(a), sorted(&img));
            assert!(all[..i].iter().all(|b| b != a), "variant {i} repeats");
        }
        let wide = reference_image(4, 8, 1);
        assert_eq!(variant(&wide, 4).shape(), wide.shape());
    }

    #[test]
    fn augmentation_repeats_labels_per_variant() {
        let inp = inputs(3);
        let (aug, lab) = augment(&inp, &[0.1, 0.5, 0.9], 4);
        assert_eq!(aug.len(), 12);
        assert_eq!(lab, [0.1, 0.5, 0.9].repeat(4));
        assert_eq!(aug[..3], inp[..]);
        assert_eq!(aug[3].images[2], variant(&inp[0].images[2], 6));
        assert_eq!(augment(&inp, &[0.0; 3], 0).0.len(), 3);
    }

    #[test]
    fn prediction_averages_over_variants() {
        let single = IqaModel::init(tiny(false, true, true), 4).unwrap();
        let mut multi = single.clone();
        multi.config.variants = 3;
        let inp = inputs(2);
        let got = multi.predict(&inp).unwrap();
        let (views, _) = augment(&inp, &[0.0; 2], 3);
        let each = single.predict(&views).unwrap();
        for i in 0..2 {
            let s1 = (0..3).map(|v| each[v * 2 + i].score1).sum::<f64>() / 3.0;
            let s2 = (0..3).map(|v| each[v * 2 + i].score2).sum::<f64>() / 3.0;
            assert!((got[i].score1 - s1).abs() < 1e-12 && (got[i].score2 - s2).abs() < 1e-12);
            assert_eq!(got[i].final_score, got[i].score1 + got[i].score2);
        }
    }

    #[test]
    fn centering_moves_channel_means_only() {
        let img = reference_image(8, 8, 2);
        let c = centered(&img);
        for ch in 0..3 {
            let m = c.0.index_axis(Axis(2), ch).mean().unwrap();
            assert!((m - 0.5).abs() < 1e-12);
        }
        let shift = &img.0 - &c.0;
        for ch in shift.axis_iter(Axis(2)) {
            assert!(ch.iter().all(|v| (v - ch[(0, 0)]).abs() < 1e-12));
        }
    }

    #[test]
    fn absent_restorations_become_distorted_copies() {
        let dis = reference_image(8, 8, 0);
        let t = RestorationTriple {
            y0: reference_image(8, 8, 1),
            y_t1: reference_image(8, 8, 2),
            y_t2: reference_image(8, 8, 3),
            t1: 2,
            t2: 3,
        };
        let keep = RestoredInputs {
            y0: true,
            y_t1: false,
            y_t2: true,
        };
        let inp = IqaInput::assemble(&dis, Some(&t), keep);
        assert_eq!(inp.images, [dis.clone(), t.y0.clone(), dis.clone(), t.y_t2.clone()]);
        let none = IqaInput::assemble(&dis, None, RestoredInputs::default());
        assert!(none.images.iter().all(|i| *i == dis));
    }
}
