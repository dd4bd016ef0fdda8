//! Patch extraction and the initial token layout `[M, S, T, D]`.

use crate::config::ModelConfig;
use crate::data::{ClipDims, SyntheticClip};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSource};
use crate::tensor::Tensor;

/// Activations between layers.
#[derive(Clone, Debug)]
pub struct TokenState {
    /// `[M, S, T, D]`.
    pub patches: Tensor,
    /// `[M, D]`.
    pub class_tokens: Tensor,
    /// `[D]`; present from the first synthesizer layer on.
    pub synthesizer: Option<Tensor>,
    /// Patch grid `(rows, cols)`, with `rows * cols == S`.
    pub grid: (usize, usize),
}

impl TokenState {
    pub fn new(patches: Tensor, class_tokens: Tensor, synthesizer: Option<Tensor>, grid: (usize, usize)) -> Result<Self> {
        let s = patches.shape();
        if s.len() != 4 || s[1] != grid.0 * grid.1 {
            return Err(Error::Dimension(format!(
                "token state: patches {s:?} do not fit grid {grid:?}"
            )));
        }
        if class_tokens.shape() != [s[0], s[3]] {
            return Err(Error::Dimension(format!(
                "token state: class tokens {:?} vs patches {s:?}",
                class_tokens.shape()
            )));
        }
        if let Some(h) = &synthesizer {
            if h.shape() != [s[3]] {
                return Err(Error::Dimension(format!("token state: synthesizer {:?}", h.shape())));
            }
        }
        Ok(TokenState {
            patches,
            class_tokens,
            synthesizer,
            grid,
        })
    }

    pub fn modalities(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn spatial(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[3]
    }
}

fn check_clip(clip: &SyntheticClip, config: &ModelConfig) -> Result<()> {
    let want = ClipDims::of_model(config);
    if clip.dims != want || clip.pixels.len() != want.numel() {
        return Err(Error::Config(format!(
            "clip dims {:?} do not match model dims {want:?}",
            clip.dims
        )));
    }
    if !config.height.is_multiple_of(config.patch) || !config.width.is_multiple_of(config.patch) {
        return Err(Error::Config("frame size not divisible by patch".into()));
    }
    Ok(())
}

/// Offsets into the patch buffer `[M, S, T, P·P·C]` and the pixel buffer for
/// every pixel, visited in patch-buffer order.
fn for_each_patch_pixel(d: ClipDims, p: usize, mut f: impl FnMut(usize, usize)) {
    let (rows, cols) = (d.height / p, d.width / p);
    let s_count = rows * cols;
    let plen = p * p * d.channels;
    for m in 0..d.modalities {
        for s in 0..s_count {
            let (gy, gx) = (s / cols, s % cols);
            for t in 0..d.frames {
                let base = ((m * s_count + s) * d.frames + t) * plen;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..d.channels {
                            let dst = base + (py * p + px) * d.channels + c;
                            f(dst, d.offset(m, t, gy * p + py, gx * p + px, c));
                        }
                    }
                }
            }
        }
    }
}

/// Splits each frame into `P x P` blocks: `[M, S, T, P·P·C]`, patches numbered
/// row-major over the grid, pixels row-major within a patch.
pub fn patchify(clip: &SyntheticClip, config: &ModelConfig) -> Result<Tensor> {
    check_clip(clip, config)?;
    let mut out = vec![0.0; clip.pixels.len()];
    for_each_patch_pixel(clip.dims, config.patch, |dst, src| out[dst] = clip.pixels[src]);
    Tensor::new(
        &[config.modalities, config.spatial(), config.frames, config.patch_len()],
        out,
    )
}

/// Inverse of [`patchify`]: rebuilds the `[M, T, H, W, C]` pixel buffer.
pub fn assemble(patches: &Tensor, dims: ClipDims, patch: usize) -> Result<Vec<f64>> {
    let want = [
        dims.modalities,
        (dims.height / patch) * (dims.width / patch),
        dims.frames,
        patch * patch * dims.channels,
    ];
    if patches.shape() != want || !dims.height.is_multiple_of(patch) || !dims.width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "patches {:?} do not match dims {dims:?} with patch {patch}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; dims.numel()];
    for_each_patch_pixel(dims, patch, |src, dst| out[dst] = patches.data()[src]);
    Ok(out)
}

pub struct EmbeddingParams {
    /// `[M, P·P·C, D]`, one projection per modality.
    pub weight: Tensor,
    /// `[S, T, D]`, shared by all modalities.
    pub pos: Tensor,
    /// `[M, D]`; absent for the early-fusion baseline.
    pub class_tokens: Option<Tensor>,
}

impl EmbeddingParams {
    pub fn declare(src: &mut impl ParamSource, c: &ModelConfig, with_class_tokens: bool) -> Result<Self> {
        Ok(EmbeddingParams {
            weight: src.take("embed.weight", &[c.modalities, c.patch_len(), c.dim], Init::Normal)?,
            pos: src.take("embed.pos", &[c.spatial(), c.frames, c.dim], Init::Normal)?,
            class_tokens: if with_class_tokens {
                Some(src.take("embed.class_tokens", &[c.modalities, c.dim], Init::Normal)?)
            } else {
                None
            },
        })
    }

    pub fn numel(c: &ModelConfig, with_class_tokens: bool) -> usize {
        let cls = if with_class_tokens { c.modalities * c.dim } else { 0 };
        c.modalities * c.patch_len() * c.dim + c.spatial() * c.frames * c.dim + cls
    }
}

/// `patches[m,s,t] · W(m) + pos[s,t]`, shape `[M, S, T, D]`.
pub fn embed_patches(patches: &Tensor, params: &EmbeddingParams) -> Result<Tensor> {
    let ps = patches.shape();
    let ws = params.weight.shape();
    if ps.len() != 4 || ws.len() != 3 || ws[0] != ps[0] || ws[1] != ps[3] {
        return Err(Error::Dimension(format!(
            "embed: patches {ps:?} vs weight {ws:?}"
        )));
    }
    let (m, s, t, d) = (ps[0], ps[1], ps[2], ws[2]);
    if params.pos.shape() != [s, t, d] {
        return Err(Error::Dimension(format!(
            "embed: positional table {:?}, expected {:?}",
            params.pos.shape(),
            [s, t, d]
        )));
    }
    let x = patches.reshape(&[m, s * t, ps[3]])?.matmul(&params.weight)?;
    let x = x.reshape(&[m, s * t * d])?.add_lastdim(&params.pos.reshape(&[s * t * d])?)?;
    x.reshape(&[m, s, t, d])
}

/// Builds `X_0`: embedded patches plus per-modality class tokens. The
/// synthesizer is absent at layer 0.
pub fn embed(patches: &Tensor, params: &EmbeddingParams, grid: (usize, usize)) -> Result<TokenState> {
    let x = embed_patches(patches, params)?;
    let cls = params
        .class_tokens
        .clone()
        .ok_or_else(|| Error::Contract("embed: parameters carry no class tokens".into()))?;
    TokenState::new(x, cls, None, grid)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Initializer;
    use crate::tensor::{finite_diff_gradcheck, CheckParam};

    fn cfg(m: usize, h: usize, p: usize) -> ModelConfig {
        ModelConfig {
            modalities: m,
            frames: 2,
            height: h,
            width: h,
            channels: 2,
            patch: p,
            dim: 4,
            heads: 2,
            layers: 1,
            synth_layers: 1,
            ..Default::default()
        }
    }

    fn random_clip(c: &ModelConfig, seed: u64) -> SyntheticClip {
        let dims = ClipDims::of_model(c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SyntheticClip {
            dims,
            pixels: (0..dims.numel()).map(|_| rng.random()).collect(),
            label: 0,
            bit_assignment: vec![0; c.modalities],
        }
    }

    #[test]
    fn single_patch_is_whole_frame() {
        let c = cfg(2, 4, 4);
        let clip = random_clip(&c, 1);
        let p = patchify(&clip, &c).unwrap();
        assert_eq!(p.shape(), &[2, 1, 2, 32]);
        // Frame (m=1, t=1) is the last contiguous 32-value block in both layouts.
        assert_eq!(&p.data()[96..], &clip.pixels[96..]);
    }

    #[test]
    fn patch_vector_is_row_major_block() {
        let c = cfg(1, 4, 2);
        let clip = random_clip(&c, 2);
        let p = patchify(&clip, &c).unwrap();
        // Patch s=3 is grid cell (1,1); frame t=1; pixel (py=1, px=0), channel 1.
        let (s, t, py, px, ch) = (3, 1, 1, 0, 1);
        let got = p.data()[((s * 2) + t) * 8 + (py * 2 + px) * 2 + ch];
        assert_eq!(got, clip.pixels[clip.dims.offset(0, t, 2 + py, 2 + px, ch)]);
    }

    #[test]
    fn constant_clip_gives_constant_patches() {
        let c = cfg(2, 4, 2);
        let mut clip = random_clip(&c, 3);
        clip.pixels.iter_mut().for_each(|v| *v = 0.25);
        assert!(patchify(&clip, &c).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn mismatched_clip_is_rejected() {
        let clip = random_clip(&cfg(2, 4, 2), 4);
        assert!(matches!(patchify(&clip, &cfg(3, 4, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_embeds_to_zero() {
        let c = cfg(2, 4, 2);
        let mut init = Initializer::new(0, 0.5).unwrap();
        let mut params = EmbeddingParams::declare(&mut init, &c, true).unwrap();
        params.pos = Tensor::zeros(params.pos.shape());
        let x = embed_patches(&Tensor::zeros(&[2, 4, 2, 8]), &params).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
        let state = embed(&Tensor::zeros(&[2, 4, 2, 8]), &params, c.grid()).unwrap();
        assert!(state.synthesizer.is_none());
        assert_eq!(state.class_tokens.shape(), &[2, 4]);
    }

    #[test]
    fn distinct_modality_weights_separate_identical_pixels() {
        let c = cfg(2, 4, 2);
        let mut init = Initializer::new(1, 0.5).unwrap();
        let params = EmbeddingParams::declare(&mut init, &c, true).unwrap();
        let mut clip = random_clip(&c, 5);
        let half = clip.pixels.len() / 2;
        let (a, b) = clip.pixels.split_at_mut(half);
        b.copy_from_slice(a);
        let x = embed_patches(&patchify(&clip, &c).unwrap(), &params).unwrap();
        let n = x.numel() / 2;
        assert_ne!(&x.data()[..n], &x.data()[n..]);
    }

    #[test]
    fn embedding_weight_gradient_matches_finite_differences() {
        let c = cfg(2, 4, 2);
        let clip = random_clip(&c, 6);
        let patches = patchify(&clip, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let params = [
            CheckParam::new("embed.weight", &[2, 8, 4], draw(64)),
            CheckParam::new("embed.pos", &[4, 2, 4], draw(32)),
        ];
        let f = |t: &[Tensor]| {
            let p = EmbeddingParams {
                weight: t[0].clone(),
                pos: t[1].clone(),
                class_tokens: None,
            };
            Ok(embed_patches(&patches, &p)?.sum())
        };
        let report = finite_diff_gradcheck(f, &params, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn patchify_assemble_round_trip(seed in any::<u64>(), m in 1usize..3, p in prop::sample::select(vec![1usize, 2, 4])) {
            let c = cfg(m, 4, p);
            let clip = random_clip(&c, seed);
            let back = assemble(&patchify(&clip, &c).unwrap(), clip.dims, p).unwrap();
            prop_assert_eq!(back, clip.pixels);
        }

        #[test]
        fn embed_is_affine_in_pixels(seed in any::<u64>(), a in -3.0f64..3.0) {
            let c = cfg(2, 4, 2);
            let mut init = Initializer::new(seed, 0.3).unwrap();
            let params = EmbeddingParams::declare(&mut init, &c, true).unwrap();
            let x = patchify(&random_clip(&c, seed), &c).unwrap();
            let e = |t: &Tensor| embed_patches(t, &params).unwrap().to_vec();
            let e0 = e(&Tensor::zeros(x.shape()));
            let ex = e(&x);
            let eax = e(&x.scale(a));
            for i in 0..ex.len() {
                prop_assert!(((eax[i] - e0[i]) - a * (ex[i] - e0[i])).abs() < 1e-12);
            }
        }
    }
}
