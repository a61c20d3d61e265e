//! Siamese encoder, latent transition, lightweight decoder and output head.
//!
//! Batched training stacks all sequences of a batch as row blocks of one
//! matrix: the encoder sees `2B` half-length sequences (every first subset,
//! then every second subset) and the decoder sees `B` full sequences.

pub mod layers;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid_input, Error, Result};
use crate::fptd::{self, GridShape, TokenSequence};
use crate::lpsr::Pfdf;
use crate::real::Real;
use crate::rng::{self, stream};
use layers::{trunc_normal, visit_param, visit_param_mut, Linear, Param, Param2, ParamMut, VisitFn, VisitMutFn};
use transformer::{Stack, StackCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nano,
    Tiny,
    Base,
    Huge,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nano, Variant::Tiny, Variant::Base, Variant::Huge];

    /// `(dim, enc_depth, dec_depth, heads)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Variant::Nano => (128, 2, 1, 4),
            Variant::Tiny => (256, 4, 1, 8),
            Variant::Base => (512, 6, 2, 8),
            Variant::Huge => (768, 12, 4, 12),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nano => "nano",
            Variant::Tiny => "tiny",
            Variant::Base => "base",
            Variant::Huge => "huge",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown model variant `{s}` (expected nano, tiny, base or huge)"))
    }
}

/// How the two halves are formed and where their latents are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Each half's latents go to the other half's positions.
    #[serde(rename = "stmae")]
    StMae,
    /// Halves are encoded separately but returned to their own positions.
    #[serde(rename = "smae")]
    SMae,
    /// No split; the full sequence is encoded and decoded in place.
    #[serde(rename = "ae")]
    Ae,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::StMae, Mode::SMae, Mode::Ae];

    pub fn name(self) -> &'static str {
        match self {
            Mode::StMae => "stmae",
            Mode::SMae => "smae",
            Mode::Ae => "ae",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown mode `{s}` (expected stmae, smae or ae)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub ffb_mult: usize,
    /// Patch side `K` in feature-map cells.
    pub patch: usize,
    pub mode: Mode,
    /// One encoder for both halves. When false each half gets its own.
    pub shared_encoder: bool,
}

impl ModelConfig {
    pub fn from_variant(variant: Variant, patch: usize) -> Self {
        let (dim, enc_depth, dec_depth, heads) = variant.dims();
        Self {
            variant,
            dim,
            enc_depth,
            dec_depth,
            heads,
            ffb_mult: 4,
            patch,
            mode: Mode::StMae,
            shared_encoder: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffb_mult == 0 || self.patch == 0 {
            return Err(config_err!("model dim, heads, ffb_mult and patch must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(config_err!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.dec_depth >= self.enc_depth {
            return Err(config_err!(
                "decoder depth {} must be smaller than encoder depth {}",
                self.dec_depth,
                self.enc_depth
            ));
        }
        if !self.shared_encoder && self.mode == Mode::Ae {
            return Err(config_err!("separate encoders need a mode that splits the tokens"));
        }
        Ok(())
    }
}

/// Encoded half with the sorted positions its tokens came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSubset<T = f32> {
    pub tokens: Array2<T>,
    pub indices: Vec<usize>,
}

/// Reconstructed feature map, same shape as the fused map it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Carf {
    pub data: Array3<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    First,
    Second,
}

fn check_partition(indices1: &[usize], indices2: &[usize]) -> Result<()> {
    let n = indices1.len() + indices2.len();
    let mut seen = vec![false; n];
    for list in [indices1, indices2] {
        if list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("subset index list is not strictly ascending".into()));
        }
        for &i in list {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invariant(format!("index {i} breaks the partition of 0..{n}")));
            }
        }
    }
    Ok(())
}

/// Destination position of every row of `[subset1; subset2]`.
pub fn placement(mode: Mode, indices1: &[usize], indices2: &[usize]) -> Vec<usize> {
    match mode {
        Mode::StMae => indices2.iter().chain(indices1).copied().collect(),
        Mode::SMae | Mode::Ae => indices1.iter().chain(indices2).copied().collect(),
    }
}

/// Places the first half's latents at the second half's positions and vice
/// versa, the `j`-th token of one list going to the `j`-th index of the other.
pub fn transition_reassemble<T: Real>(lat1: &LatentSubset<T>, lat2: &LatentSubset<T>) -> Result<Array2<T>> {
    if lat1.tokens.nrows() != lat1.indices.len() || lat2.tokens.nrows() != lat2.indices.len() {
        return Err(Error::Invariant("latent rows do not match their index lists".into()));
    }
    if lat1.indices.len() != lat2.indices.len() {
        return Err(Error::Invariant("subsets have different sizes".into()));
    }
    if lat1.tokens.ncols() != lat2.tokens.ncols() {
        return Err(Error::Invariant("subsets have different widths".into()));
    }
    check_partition(&lat1.indices, &lat2.indices)?;
    let n = lat1.indices.len() * 2;
    let mut full = Array2::<T>::zeros((n, lat1.tokens.ncols()));
    for (j, &pos) in lat2.indices.iter().enumerate() {
        full.row_mut(pos).assign(&lat1.tokens.row(j));
    }
    for (j, &pos) in lat1.indices.iter().enumerate() {
        full.row_mut(pos).assign(&lat2.tokens.row(j));
    }
    Ok(full)
}

fn scatter_rows<T: Real>(src: &Array2<T>, dest: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros(src.raw_dim());
    for (row, &d) in src.rows().into_iter().zip(dest) {
        out.row_mut(d).assign(&row);
    }
    out
}

/// Adds `table` to every consecutive block of `table.nrows()` rows.
fn add_per_sequence<T: Real>(x: &mut Array2<T>, table: &Array2<T>) {
    for mut block in x.axis_chunks_iter_mut(Axis(0), table.nrows()) {
        block += table;
    }
}

fn sum_per_sequence<T: Real>(x: &Array2<T>, len: usize) -> Array2<T> {
    let mut acc = Array2::<T>::zeros((len, x.ncols()));
    for block in x.axis_chunks_iter(Axis(0), len) {
        acc += &block;
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct StMae<T = f32> {
    pub config: ModelConfig,
    pub grid: GridShape,
    /// Patch projection `E`, `K²C×D`, no bias.
    pub embed: Param2<T>,
    pub enc_pos: Param2<T>,
    pub encoder: Stack<T>,
    /// Second-half encoder when weights are not shared.
    pub encoder_b: Option<Stack<T>>,
    pub dec_pos: Param2<T>,
    pub decoder: Stack<T>,
    pub head: Linear<T>,
}

enum EncoderCache<T> {
    Whole(StackCache<T>),
    Split(StackCache<T>, StackCache<T>),
}

/// Everything `backward` needs from one batched forward pass.
pub struct Tape<T> {
    patches: Array2<T>,
    /// Token row feeding each encoder input row.
    gather: Vec<usize>,
    /// Decoder row receiving each encoder output row.
    place: Vec<usize>,
    encoder: EncoderCache<T>,
    decoder: StackCache<T>,
    decoded: Array2<T>,
}

impl<T: Real> StMae<T> {
    pub fn new(config: ModelConfig, grid: GridShape, seed: u64) -> Result<Self> {
        config.validate()?;
        if grid.patch != config.patch {
            return Err(config_err!(
                "grid uses patch size {} but the model expects {}",
                grid.patch,
                config.patch
            ));
        }
        if config.mode != Mode::Ae && grid.tokens() % 2 != 0 {
            return Err(config_err!("{} tokens cannot be split into two halves", grid.tokens()));
        }
        let mut r = rng::rng(rng::derive_seed(seed, &[stream::INIT]));
        let (d, n, p) = (config.dim, grid.tokens(), grid.patch_len());
        let stack = |r: &mut rng::Rng, depth| Stack::new(r, d, depth, config.heads, config.ffb_mult);
        let embed = Param::new(trunc_normal(&mut r, (p, d)));
        let enc_pos = Param::new(trunc_normal(&mut r, (n, d)));
        let encoder = stack(&mut r, config.enc_depth);
        let encoder_b = (!config.shared_encoder).then(|| stack(&mut r, config.enc_depth));
        let dec_pos = Param::new(trunc_normal(&mut r, (n, d)));
        let decoder = stack(&mut r, config.dec_depth);
        let head = Linear::new(&mut r, d, p, true);
        Ok(Self {
            config,
            grid,
            embed,
            enc_pos,
            encoder,
            encoder_b,
            dec_pos,
            decoder,
            head,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    pub fn embed(&self, patches: ArrayView2<T>) -> Result<TokenSequence<T>> {
        fptd::embed_tokens(patches, self.embed.value.view(), self.enc_pos.value.view())
    }

    fn encoder_for(&self, branch: Branch) -> &Stack<T> {
        match (branch, &self.encoder_b) {
            (Branch::Second, Some(b)) => b,
            _ => &self.encoder,
        }
    }

    /// Runs one half through its encoder. Rows stay aligned with `indices`.
    pub fn encode_subset(&self, subset: &Array2<T>, indices: Vec<usize>, branch: Branch) -> Result<LatentSubset<T>> {
        if subset.nrows() != indices.len() {
            return Err(invalid_input!("{} tokens but {} indices", subset.nrows(), indices.len()));
        }
        if subset.ncols() != self.config.dim {
            return Err(config_err!("token width {} != model dim {}", subset.ncols(), self.config.dim));
        }
        let tokens = self.encoder_for(branch).forward(subset, subset.nrows()).0;
        Ok(LatentSubset { tokens, indices })
    }

    /// Adds decoder positions and runs the decoder over one full sequence.
    pub fn decode(&self, full: &Array2<T>) -> Result<Array2<T>> {
        if full.dim() != self.dec_pos.value.dim() {
            return Err(config_err!(
                "latent sequence is {:?}, decoder expects {:?}",
                full.dim(),
                self.dec_pos.value.dim()
            ));
        }
        let x = full + &self.dec_pos.value;
        Ok(self.decoder.forward(&x, x.nrows()).0)
    }

    pub fn project_and_fold(&self, decoded: &Array2<T>) -> Result<Array3<T>> {
        if decoded.ncols() != self.head.inputs() || decoded.nrows() != self.tokens() {
            return Err(config_err!("decoded sequence has shape {:?}", decoded.dim()));
        }
        let patches = self.head.forward(decoded);
        Ok(fptd::fold(patches.view(), self.grid))
    }

    fn check_map(&self, dim: (usize, usize, usize)) -> Result<()> {
        let g = self.grid;
        if dim != (g.height, g.width, g.channels) {
            return Err(invalid_input!(
                "feature map is {dim:?}, model was built for {:?}",
                (g.height, g.width, g.channels)
            ));
        }
        Ok(())
    }

    /// Single-map forward pass assembled from the public stages.
    pub fn forward_map(&self, map: ArrayView3<T>, seed: u64) -> Result<Array3<T>> {
        self.check_map(map.dim())?;
        let patches = fptd::unfold(map, self.grid);
        let seq = self.embed(patches.view())?;
        let full = match self.config.mode {
            Mode::Ae => self.encoder.forward(&seq.tokens, seq.len()).0,
            mode => {
                let pair = fptd::decouple(&seq, seed)?;
                let lat1 = self.encode_subset(&pair.subset1, pair.indices1, Branch::First)?;
                let lat2 = self.encode_subset(&pair.subset2, pair.indices2, Branch::Second)?;
                if mode == Mode::StMae {
                    transition_reassemble(&lat1, &lat2)?
                } else {
                    let mut rows = lat1.indices.clone();
                    rows.extend(&lat2.indices);
                    scatter_rows(&ndarray::concatenate![Axis(0), lat1.tokens, lat2.tokens], &rows)
                }
            }
        };
        let decoded = self.decode(&full)?;
        self.project_and_fold(&decoded)
    }

    /// Batched forward pass over `B` samples of unfolded patches stacked as
    /// `B·N` rows, one decoupling seed per sample.
    pub fn forward_batch(&self, patches: &Array2<T>, seeds: &[u64]) -> Result<(Array2<T>, Tape<T>)> {
        let n = self.tokens();
        let b = seeds.len();
        if patches.dim() != (b * n, self.grid.patch_len()) {
            return Err(invalid_input!(
                "patch batch is {:?}, expected ({}, {})",
                patches.dim(),
                b * n,
                self.grid.patch_len()
            ));
        }
        let mut tokens = patches.dot(&self.embed.value);
        add_per_sequence(&mut tokens, &self.enc_pos.value);

        let (gather, place, latents, encoder) = if self.config.mode == Mode::Ae {
            let (lat, cache) = self.encoder.forward(&tokens, n);
            let ident: Vec<usize> = (0..b * n).collect();
            (ident.clone(), ident, lat, EncoderCache::Whole(cache))
        } else {
            let half = n / 2;
            let mut gather = vec![0; b * n];
            let mut place = vec![0; b * n];
            for (i, &seed) in seeds.iter().enumerate() {
                let (idx1, idx2) = fptd::decouple_indices(n, seed)?;
                let dest = placement(self.config.mode, &idx1, &idx2);
                #[cfg(debug_assertions)]
                if self.config.mode == Mode::StMae {
                    let mut first = vec![false; n];
                    idx1.iter().for_each(|&p| first[p] = true);
                    for (j, &d) in dest.iter().enumerate() {
                        debug_assert_ne!(first[d], j < half, "token placed inside its own subset");
                    }
                }
                for j in 0..half {
                    gather[i * half + j] = i * n + idx1[j];
                    gather[(b + i) * half + j] = i * n + idx2[j];
                    place[i * half + j] = i * n + dest[j];
                    place[(b + i) * half + j] = i * n + dest[half + j];
                }
            }
            let enc_in = fptd::gather_rows(tokens.view(), &gather);
            let (lat, cache) = match &self.encoder_b {
                None => {
                    let (l, c) = self.encoder.forward(&enc_in, half);
                    (l, EncoderCache::Whole(c))
                }
                Some(enc_b) => {
                    let split = b * half;
                    let (l1, c1) = self.encoder.forward(&enc_in.slice(s![..split, ..]).to_owned(), half);
                    let (l2, c2) = enc_b.forward(&enc_in.slice(s![split.., ..]).to_owned(), half);
                    (ndarray::concatenate![Axis(0), l1, l2], EncoderCache::Split(c1, c2))
                }
            };
            (gather, place, lat, cache)
        };

        let mut full = scatter_rows(&latents, &place);
        add_per_sequence(&mut full, &self.dec_pos.value);
        let (decoded, decoder) = self.decoder.forward(&full, n);
        let out = self.head.forward(&decoded);
        Ok((
            out,
            Tape {
                patches: patches.clone(),
                gather,
                place,
                encoder,
                decoder,
                decoded,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_out = ∂L/∂output`.
    pub fn backward(&mut self, tape: &Tape<T>, d_out: &Array2<T>) {
        let n = self.tokens();
        let d_decoded = self.head.backward(&tape.decoded, d_out, true).expect("dx requested");
        let d_full = self.decoder.backward(&tape.decoder, &d_decoded);
        self.dec_pos.grad += &sum_per_sequence(&d_full, n);
        let d_lat = fptd::gather_rows(d_full.view(), &tape.place);
        let d_enc_in = match &tape.encoder {
            EncoderCache::Whole(c) => self.encoder.backward(c, &d_lat),
            EncoderCache::Split(c1, c2) => {
                let split = d_lat.nrows() / 2;
                let d1 = self.encoder.backward(c1, &d_lat.slice(s![..split, ..]).to_owned());
                let enc_b = self.encoder_b.as_mut().expect("split cache implies second encoder");
                let d2 = enc_b.backward(c2, &d_lat.slice(s![split.., ..]).to_owned());
                ndarray::concatenate![Axis(0), d1, d2]
            }
        };
        let d_tokens = scatter_rows(&d_enc_in, &tape.gather);
        self.enc_pos.grad += &sum_per_sequence(&d_tokens, n);
        ndarray::linalg::general_mat_mul(T::one(), &tape.patches.t(), &d_tokens, T::one(), &mut self.embed.grad);
    }

    pub fn visit(&self, f: &mut VisitFn<'_, T>) {
        visit_param(&self.embed, "embed.weight", f);
        visit_param(&self.enc_pos, "encoder.pos", f);
        self.encoder.visit("encoder", f);
        if let Some(b) = &self.encoder_b {
            b.visit("encoder_b", f);
        }
        visit_param(&self.dec_pos, "decoder.pos", f);
        self.decoder.visit("decoder", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitMutFn<'_, T>) {
        visit_param_mut(&mut self.embed, "embed.weight", true, f);
        visit_param_mut(&mut self.enc_pos, "encoder.pos", false, f);
        self.encoder.visit_mut("encoder", f);
        if let Some(b) = &mut self.encoder_b {
            b.visit_mut("encoder_b", f);
        }
        visit_param_mut(&mut self.dec_pos, "decoder.pos", false, f);
        self.decoder.visit_mut("decoder", f);
        self.head.visit_mut("head", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p: ParamMut<'_, T>| p.grad.fill(T::zero()));
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, _, v| total += v.len());
        total
    }
}

impl StMae<f32> {
    pub fn forward(&self, pfdf: &Pfdf, seed: u64) -> Result<Carf> {
        Ok(Carf {
            data: self.forward_map(pfdf.data.view(), seed)?,
        })
    }
}

#[cfg(test)]
mod tests;
