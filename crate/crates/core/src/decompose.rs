//! Intra-modality groups (all modalities at one spatial position and frame)
//! and inter-modality frames (all spatial tokens of one modality and frame).
//!
//! Both are pure re-indexings of `[M, S, T, D]`. The batched `*_view` forms are
//! what the model runs on; the list forms expose individual groups and frames.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::patch::TokenState;
use crate::tensor::Tensor;

/// The `M` tokens sharing spatial index `s` and frame `t`.
#[derive(Clone, Debug)]
pub struct IntraGroup {
    /// `[M, D]`.
    pub tokens: Tensor,
    /// `(s, t)`.
    pub position: (usize, usize),
}

/// The `S` tokens of modality `modality` at frame `frame`.
#[derive(Clone, Debug)]
pub struct InterFrame {
    /// `[S, D]`.
    pub tokens: Tensor,
    pub modality: usize,
    pub frame: usize,
    /// `[D]`, the modality's class token.
    pub class_slot: Tensor,
}

/// `[M, S, T, D] -> [T·S, M, D]`, groups ordered row-major over `(t, s)`.
pub fn intra_view(patches: &Tensor) -> Result<Tensor> {
    let [m, s, t, d] = dims4(patches)?;
    patches.permute(&[2, 1, 0, 3])?.reshape(&[t * s, m, d])
}

/// Inverse of [`intra_view`].
pub fn intra_unview(groups: &Tensor, spatial: usize, frames: usize) -> Result<Tensor> {
    let gs = groups.shape();
    if gs.len() != 3 || gs[0] != spatial * frames {
        return Err(Error::Dimension(format!(
            "intra_unview: {gs:?} is not [{}, M, D]",
            spatial * frames
        )));
    }
    groups.reshape(&[frames, spatial, gs[1], gs[2]])?.permute(&[2, 1, 0, 3])
}

/// `[M, S, T, D] -> [M, T, S, D]`, frames ordered row-major over `(m, t)`.
pub fn inter_view(patches: &Tensor) -> Result<Tensor> {
    dims4(patches)?;
    patches.permute(&[0, 2, 1, 3])
}

/// Inverse of [`inter_view`].
pub fn inter_unview(frames: &Tensor) -> Result<Tensor> {
    dims4(frames)?;
    frames.permute(&[0, 2, 1, 3])
}

fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    x.shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("expected [M, S, T, D], got {:?}", x.shape())))
}

pub fn intra_decompose(x: &TokenState) -> Result<Vec<IntraGroup>> {
    let (m, s, t, d) = (x.modalities(), x.spatial(), x.frames(), x.dim());
    let view = intra_view(&x.patches)?;
    (0..t * s)
        .map(|j| {
            Ok(IntraGroup {
                tokens: view.narrow(0, j, 1)?.reshape(&[m, d])?,
                position: (j % s, j / s),
            })
        })
        .collect()
}

pub fn inter_decompose(x: &TokenState) -> Result<Vec<InterFrame>> {
    let (m, s, t, d) = (x.modalities(), x.spatial(), x.frames(), x.dim());
    let view = inter_view(&x.patches)?.reshape(&[m * t, s, d])?;
    let mut out = Vec::with_capacity(m * t);
    for mi in 0..m {
        let cls = x.class_tokens.narrow(0, mi, 1)?.reshape(&[d])?;
        for ti in 0..t {
            out.push(InterFrame {
                tokens: view.narrow(0, mi * t + ti, 1)?.reshape(&[s, d])?,
                modality: mi,
                frame: ti,
                class_slot: cls.clone(),
            });
        }
    }
    Ok(out)
}

fn check_coverage(keys: impl Iterator<Item = (usize, usize)>, bound: (usize, usize), what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for k in keys {
        if k.0 >= bound.0 || k.1 >= bound.1 {
            return Err(Error::Contract(format!("{what} index {k:?} out of range {bound:?}")));
        }
        if !seen.insert(k) {
            return Err(Error::Contract(format!("duplicate {what} index {k:?}")));
        }
    }
    if seen.len() != bound.0 * bound.1 {
        return Err(Error::Contract(format!(
            "{what}: {} of {} indices present",
            seen.len(),
            bound.0 * bound.1
        )));
    }
    Ok(())
}

/// Reassembles intra groups (any order) into a state shaped like `template`;
/// class tokens and synthesizer come from the template.
pub fn recompose_intra(groups: &[IntraGroup], template: &TokenState) -> Result<TokenState> {
    let (m, s, t, d) = (template.modalities(), template.spatial(), template.frames(), template.dim());
    check_coverage(groups.iter().map(|g| g.position), (s, t), "intra group")?;
    let mut sorted: Vec<&IntraGroup> = groups.iter().collect();
    sorted.sort_by_key(|g| (g.position.1, g.position.0));
    let parts = sorted
        .iter()
        .map(|g| g.tokens.reshape(&[1, m, d]))
        .collect::<Result<Vec<_>>>()?;
    let patches = intra_unview(&Tensor::concat(&parts, 0)?, s, t)?;
    TokenState::new(patches, template.class_tokens.clone(), template.synthesizer.clone(), template.grid)
}

/// Reassembles inter frames (any order) into a state shaped like `template`;
/// class tokens and synthesizer come from the template.
pub fn recompose_inter(frames: &[InterFrame], template: &TokenState) -> Result<TokenState> {
    let (m, s, t, d) = (template.modalities(), template.spatial(), template.frames(), template.dim());
    check_coverage(frames.iter().map(|f| (f.modality, f.frame)), (m, t), "inter frame")?;
    let mut sorted: Vec<&InterFrame> = frames.iter().collect();
    sorted.sort_by_key(|f| (f.modality, f.frame));
    let parts = sorted
        .iter()
        .map(|f| f.tokens.reshape(&[1, s, d]))
        .collect::<Result<Vec<_>>>()?;
    let patches = inter_unview(&Tensor::concat(&parts, 0)?.reshape(&[m, t, s, d])?)?;
    TokenState::new(patches, template.class_tokens.clone(), template.synthesizer.clone(), template.grid)
}
