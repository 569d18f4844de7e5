//! Compensation-guided branch: a patch transformer encodes the distorted image
//! and its three restoration outputs, selected taps are tagged with a
//! per-source noise code, concatenated, and scored by an attention trunk.

pub mod select;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use select::{format_taps, select_taps, SelectionMode, Source, Tap, NUM_TAPS, RATIO};

use crate::attention::{Tab, TransformerBlock, WindowBlock};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::head::WeightedHead;
use crate::nn::{normal_tensor, Conv2d, Ctx, LayerNorm, Linear, ParamStore};

pub const PREFIX: &str = "vcg";
pub const ENCODER_PREFIX: &str = "vcg/encoder";
pub const NOISE_CODE: &str = "vcg/noise_code";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcgConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub window: usize,
    pub selection: SelectionMode,
}

impl Default for VcgConfig {
    fn default() -> Self {
        VcgConfig {
            image_size: (32, 32),
            patch: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            window: 4,
            selection: SelectionMode::default(),
        }
    }
}

impl VcgConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// Patch embedding followed by nine pre-norm transformer blocks; the output
/// of every block is kept as a tap.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub image_size: (usize, usize),
    embed: Conv2d,
    blocks: Vec<TransformerBlock>,
    dim: usize,
    patches: usize,
}

impl PatchEncoder {
    pub fn new(cfg: &VcgConfig) -> Self {
        PatchEncoder {
            image_size: cfg.image_size,
            embed: Conv2d::new(format!("{ENCODER_PREFIX}/embed"), 3, cfg.dim, cfg.patch)
                .stride(cfg.patch)
                .pad(0),
            blocks: (0..NUM_TAPS)
                .map(|i| TransformerBlock::new(&format!("{ENCODER_PREFIX}/block{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect(),
            dim: cfg.dim,
            patches: cfg.num_patches(),
        }
    }

    fn pos_name() -> String {
        format!("{ENCODER_PREFIX}/pos")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.embed.init(store, rng);
        store.insert(Self::pos_name(), normal_tensor(rng, &[1, self.patches, self.dim], 0.02), true);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// `(N, 3, H, W)` in `[-1, 1]` to nine `(N, patches, D)` taps.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![s.first().copied().unwrap_or(0), 3, self.image_size.0, self.image_size.1],
                actual: s,
            });
        }
        let n = s[0];
        let e = self.embed.forward(ctx, x);
        let e = ctx.g.reshape(e, &[n, self.dim, self.patches]);
        let e = ctx.g.permute(e, &[0, 2, 1]);
        let pos = ctx.p(&Self::pos_name());
        let mut h = ctx.g.add(e, pos);
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for b in &self.blocks {
            h = b.forward(ctx, h);
            taps.push(h);
        }
        Ok(taps)
    }

    /// Inference-only taps as plain tensors.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut ctx = Ctx::inference(store);
        let v = ctx.input(x.clone());
        let taps = self.forward(&mut ctx, v)?;
        Ok(taps.into_iter().map(|t| ctx.g.value(t).clone()).collect())
    }
}

/// Add each selected map's source code (broadcast over patches) and
/// concatenate along the feature axis in selection order.
/// `taps[source][k]` is the `(N, L, D)` map of tap `k + 1`; `codes` is `(4, D)`.
pub fn fuse(ctx: &mut Ctx, taps: &[Vec<Var>; 4], codes: Var, selection: &[Tap]) -> Result<Var> {
    let code_dim = ctx.g.shape(codes)[1];
    let mut parts = Vec::with_capacity(selection.len());
    for &(src, idx) in selection {
        let map = *taps[src.index()]
            .get(idx.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("tap {idx} of {} is missing", src.as_str())))?;
        let d = *ctx.g.shape(map).last().unwrap();
        if d != code_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![code_dim],
                actual: vec![d],
            });
        }
        let row = ctx.g.slice(codes, 0, src.index(), 1);
        let row = ctx.g.reshape(row, &[1, 1, code_dim]);
        parts.push(ctx.g.add(map, row));
    }
    Ok(ctx.g.concat(&parts, 2))
}

/// Projection of the fused map, a transposed-attention block, two windowed
/// attention blocks and the weighted score head.
#[derive(Clone, Debug)]
pub struct VcgTrunk {
    proj: Linear,
    tab: Tab,
    windows: [WindowBlock; 2],
    norm: LayerNorm,
    head: WeightedHead,
}

impl VcgTrunk {
    pub fn new(cfg: &VcgConfig) -> Self {
        let d = cfg.dim;
        let n = |s: &str| format!("{PREFIX}/trunk/{s}");
        let win = |i| WindowBlock::new(&n(&format!("window{i}")), d, cfg.heads, cfg.grid(), cfg.window);
        VcgTrunk {
            proj: Linear::new(n("proj"), RATIO.iter().sum::<usize>() * d, d),
            tab: Tab::new(&n("tab"), d, cfg.heads, cfg.num_patches()),
            windows: [win(0), win(1)],
            norm: LayerNorm::new(n("norm"), d),
            head: WeightedHead::new(&format!("{PREFIX}/head"), d),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.proj.init(store, rng);
        self.tab.init(store, rng);
        for w in &self.windows {
            w.init(store, rng);
        }
        self.norm.init(store);
        self.head.init(store, rng);
    }

    /// Trunk output tokens `(N, L, D)`.
    pub fn features(&self, ctx: &mut Ctx, z: Var) -> Var {
        let h = self.proj.forward(ctx, z);
        let mut h = self.tab.forward(ctx, h);
        for w in &self.windows {
            h = w.forward(ctx, h);
        }
        self.norm.forward(ctx, h)
    }

    pub fn head(&self) -> &WeightedHead {
        &self.head
    }

    /// `Z` to `(N,)` scores.
    pub fn score(&self, ctx: &mut Ctx, z: Var) -> Var {
        let h = self.features(ctx, z);
        self.head.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Vcg {
    pub config: VcgConfig,
    pub encoder: PatchEncoder,
    pub trunk: VcgTrunk,
    pub selection: Vec<Tap>,
}

impl Vcg {
    pub fn new(config: VcgConfig) -> Result<Self> {
        let (h, w) = config.image_size;
        if h % config.patch != 0 || w % config.patch != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not a multiple of the patch size {}",
                config.patch
            )));
        }
        if config.dim % config.heads != 0 {
            return Err(Error::Config("vcg dim must be divisible by heads".into()));
        }
        Ok(Vcg {
            encoder: PatchEncoder::new(&config),
            trunk: VcgTrunk::new(&config),
            selection: select_taps(config.selection)?,
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        store.insert(NOISE_CODE, normal_tensor(rng, &[4, self.config.dim], 0.02), true);
        self.trunk.init(store, rng);
    }

    /// Which taps of each source the current selection needs.
    pub fn needed(&self, src: Source) -> Vec<usize> {
        let mut v: Vec<usize> = self.selection.iter().filter(|(s, _)| *s == src).map(|(_, i)| *i).collect();
        v.dedup();
        v
    }

    /// Score from the four `(N, 3, H, W)` images in `[-1, 1]`, ordered as [`Source::ALL`].
    pub fn forward(&self, ctx: &mut Ctx, images: [Var; 4]) -> Result<Var> {
        let mut taps: [Vec<Var>; 4] = Default::default();
        for (slot, img) in taps.iter_mut().zip(images) {
            *slot = self.encoder.forward(ctx, img)?;
        }
        self.forward_taps(ctx, &taps)
    }

    /// Score from precomputed taps, `taps[source][k]` for tap `k + 1`.
    pub fn forward_taps(&self, ctx: &mut Ctx, taps: &[Vec<Var>; 4]) -> Result<Var> {
        let codes = ctx.p(NOISE_CODE);
        let z = fuse(ctx, taps, codes, &self.selection)?;
        Ok(self.trunk.score(ctx, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::IxDyn;

    fn small() -> (Vcg, ParamStore) {
        let cfg = VcgConfig {
            image_size: (8, 8),
            dim: 8,
            heads: 2,
            window: 2,
            ..Default::default()
        };
        let vcg = Vcg::new(cfg).unwrap();
        let mut store = ParamStore::new();
        vcg.init(&mut store, &mut seed::rng(1, &[]));
        (vcg, store)
    }

    #[test]
    fn encoder_yields_nine_taps_per_patch_grid() {
        let vcg = Vcg::new(VcgConfig::default()).unwrap();
        let mut store = ParamStore::new();
        vcg.init(&mut store, &mut seed::rng(0, &[]));
        let x = normal_tensor(&mut seed::rng(2, &[]), &[1, 3, 32, 32], 0.5);
        let taps = vcg.encoder.encode(&store, &x).unwrap();
        assert_eq!(taps.len(), 9);
        assert!(taps.iter().all(|t| t.shape() == [1, 64, 64]));
        assert_eq!(taps, vcg.encoder.encode(&store, &x).unwrap());
        let mut y = x.clone();
        y[[0, 1, 17, 5]] += 0.1;
        assert_ne!(taps, vcg.encoder.encode(&store, &y).unwrap());
        assert!(vcg.encoder.encode(&store, &normal_tensor(&mut seed::rng(2, &[]), &[1, 3, 16, 32], 0.5)).is_err());
    }

    fn fused(store: &ParamStore, vcg: &Vcg, taps: &[Vec<Tensor>; 4], codes: Tensor) -> Tensor {
        let mut ctx = Ctx::inference(store);
        let tv: [Vec<Var>; 4] = std::array::from_fn(|s| taps[s].iter().map(|t| ctx.input(t.clone())).collect());
        let c = ctx.input(codes);
        let z = fuse(&mut ctx, &tv, c, &vcg.selection).unwrap();
        ctx.g.value(z).clone()
    }

    #[test]
    fn fuse_concatenates_in_selection_order() {
        let (vcg, store) = small();
        let mut rng = seed::rng(3, &[]);
        let taps: [Vec<Tensor>; 4] = std::array::from_fn(|_| (0..9).map(|_| normal_tensor(&mut rng, &[2, 4, 8], 1.0)).collect());
        let z = fused(&store, &vcg, &taps, Tensor::zeros(IxDyn(&[4, 8])));
        assert_eq!(z.shape(), &[2, 4, 64]);
        for (k, (src, idx)) in vcg.selection.iter().enumerate() {
            let block = z.slice_axis(ndarray::Axis(2), (k * 8..(k + 1) * 8).into());
            assert_eq!(block, taps[src.index()][idx - 1]);
        }
        let codes = normal_tensor(&mut rng, &[4, 8], 1.0);
        let mut swapped = codes.clone();
        for d in 0..8 {
            swapped.swap([2, d], [3, d]);
        }
        assert_ne!(fused(&store, &vcg, &taps, codes), fused(&store, &vcg, &taps, swapped));
    }

    #[test]
    fn identical_restorations_make_fusion_source_symmetric() {
        let (vcg, store) = small();
        let mut rng = seed::rng(4, &[]);
        let dis: Vec<Tensor> = (0..9).map(|_| normal_tensor(&mut rng, &[1, 4, 8], 1.0)).collect();
        let taps = [dis.clone(), dis.clone(), dis.clone(), dis];
        let zero = Tensor::zeros(IxDyn(&[4, 8]));
        let base = fused(&store, &vcg, &taps, zero.clone());
        for perm in [[0, 2, 1, 3], [0, 3, 2, 1], [0, 1, 3, 2]] {
            let p: [Vec<Tensor>; 4] = std::array::from_fn(|i| taps[perm[i]].clone());
            assert_eq!(fused(&store, &vcg, &p, zero.clone()), base);
        }
    }

    #[test]
    fn score_is_finite_scalar_per_item() {
        let (vcg, store) = small();
        let mut ctx = Ctx::new(&store, false);
        let mut rng = seed::rng(5, &[]);
        let imgs = std::array::from_fn(|_| ctx.input(normal_tensor(&mut rng, &[3, 3, 8, 8], 0.5)));
        let s = vcg.forward(&mut ctx, imgs).unwrap();
        assert_eq!(ctx.g.shape(s), &[3]);
        assert!(ctx.g.value(s).iter().all(|v| v.is_finite()));
    }
}
