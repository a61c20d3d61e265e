//! Feature patch tokenization and random decoupling.
//!
//! A fused feature map of shape `H×W×C` is cut into non-overlapping `K×K`
//! patches, row-major over the patch grid. Inside a patch the flattened
//! layout is row-major over the `K×K` spatial cells with channels fastest:
//! element `(dy, dx, c)` sits at `(dy·K + dx)·C + c`. Checkpoints depend on
//! this order.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;

use crate::error::{config_err, invalid_input, Result};
use crate::lpsr::Pfdf;
use crate::real::Real;
use crate::rng;

/// Patch grid geometry of a `H×W×C` map cut into `K×K` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(config_err!("patch size must be positive"));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(config_err!("feature map {height}x{width}x{channels} is empty"));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(config_err!(
                "feature map {height}x{width} is not divisible by patch size {patch}"
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Token count `N`.
    pub fn tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Flattened patch length `K²·C`.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Cuts a `H×W×C` map into an `N×(K²·C)` matrix of flattened patches.
pub fn unfold<T: Real>(map: ArrayView3<T>, shape: GridShape) -> Array2<T> {
    let k = shape.patch;
    let mut out = Array2::<T>::zeros((shape.tokens(), shape.patch_len()));
    for (n, mut row) in out.rows_mut().into_iter().enumerate() {
        let (pi, pj) = (n / shape.cols(), n % shape.cols());
        let block = map.slice(s![pi * k..(pi + 1) * k, pj * k..(pj + 1) * k, ..]);
        for (dst, src) in row.iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    out
}

/// Inverse of [`unfold`].
pub fn fold<T: Real>(patches: ArrayView2<T>, shape: GridShape) -> Array3<T> {
    let k = shape.patch;
    let mut out = Array3::<T>::zeros((shape.height, shape.width, shape.channels));
    for (n, row) in patches.rows().into_iter().enumerate() {
        let (pi, pj) = (n / shape.cols(), n % shape.cols());
        let mut block = out.slice_mut(s![pi * k..(pi + 1) * k, pj * k..(pj + 1) * k, ..]);
        for (dst, src) in block.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `N×(K²·C)`, one flattened patch per row.
    pub patches: Array2<f32>,
    pub shape: GridShape,
}

impl PatchGrid {
    pub fn tokens(&self) -> usize {
        self.shape.tokens()
    }

    /// Reassembles the feature map the grid was cut from.
    pub fn to_map(&self) -> Array3<f32> {
        fold(self.patches.view(), self.shape)
    }
}

pub fn partition_patches(pfdf: &Pfdf, patch: usize) -> Result<PatchGrid> {
    let (h, w, c) = pfdf.data.dim();
    let shape = GridShape::new(h, w, c, patch)?;
    Ok(PatchGrid {
        patches: unfold(pfdf.data.view(), shape),
        shape,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = f32> {
    /// `N×D` token embeddings.
    pub tokens: Array2<T>,
    /// Position index of each row, `0..N` at creation.
    pub positions: Vec<usize>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// `token_n = patch_n · E + E_pos[n]`.
pub fn embed_tokens<T: Real>(
    patches: ArrayView2<T>,
    projection: ArrayView2<T>,
    pos_embed: ArrayView2<T>,
) -> Result<TokenSequence<T>> {
    let (n, p) = patches.dim();
    if projection.nrows() != p {
        return Err(config_err!(
            "projection expects patches of length {}, got {p}",
            projection.nrows()
        ));
    }
    if pos_embed.dim() != (n, projection.ncols()) {
        return Err(config_err!(
            "position table is {:?}, expected ({n}, {})",
            pos_embed.dim(),
            projection.ncols()
        ));
    }
    let tokens = patches.dot(&projection) + &pos_embed;
    Ok(TokenSequence {
        tokens,
        positions: (0..n).collect(),
    })
}

/// Random split of `0..N` into two sorted halves.
///
/// A seeded uniform permutation is drawn; its first `N/2` entries form the
/// first subset and the rest its complement.
pub fn decouple_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 || n % 2 != 0 {
        return Err(config_err!(
            "token count {n} cannot be split into two equal non-empty halves"
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(seed));
    let mut first = perm[..n / 2].to_vec();
    let mut second = perm[n / 2..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledPair<T = f32> {
    pub subset1: Array2<T>,
    pub subset2: Array2<T>,
    pub indices1: Vec<usize>,
    pub indices2: Vec<usize>,
    pub seed: u64,
}

pub fn gather_rows<T: Real>(src: ArrayView2<T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows.len(), src.ncols()));
    for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&src.row(r));
    }
    out
}

pub fn decouple<T: Real>(seq: &TokenSequence<T>, seed: u64) -> Result<DecoupledPair<T>> {
    if seq.positions.len() != seq.len() {
        return Err(invalid_input!(
            "sequence has {} tokens but {} positions",
            seq.len(),
            seq.positions.len()
        ));
    }
    let (rows1, rows2) = decouple_indices(seq.len(), seed)?;
    // Rows are ordered by position so the index lists come out ascending.
    let pick = |rows: &[usize]| {
        let mut rows = rows.to_vec();
        rows.sort_by_key(|&r| seq.positions[r]);
        let indices = rows.iter().map(|&r| seq.positions[r]).collect::<Vec<_>>();
        (gather_rows(seq.tokens.view(), &rows), indices)
    };
    let (subset1, indices1) = pick(&rows1);
    let (subset2, indices2) = pick(&rows2);
    Ok(DecoupledPair {
        subset1,
        subset2,
        indices1,
        indices2,
        seed,
    })
}
