use ndarray::Array2;

use super::layers::{
    Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, VisitFn, VisitMutFn,
};
use crate::real::Real;
use crate::rng::Rng;

/// Pre-norm block: `z + MHA(LN(z))`, then `z + FFB(LN(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: FeedForward<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: FeedForwardCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, ffb_mult: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: FeedForward::new(rng, dim, dim * ffb_mult),
        }
    }

    pub fn forward(&self, z: &Array2<T>, seq_len: usize) -> (Array2<T>, BlockCache<T>) {
        let (a_in, ln1) = self.ln1.forward(z);
        let (a, attn) = self.attn.forward(&a_in, seq_len);
        let z1 = z + &a;
        let (m_in, ln2) = self.ln2.forward(&z1);
        let (m, mlp) = self.mlp.forward(&m_in);
        (z1 + &m, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dz2: &Array2<T>) -> Array2<T> {
        let dm_in = self.mlp.backward(&cache.mlp, dz2);
        let dz1 = dz2 + &self.ln2.backward(&cache.ln2, &dm_in);
        let da_in = self.attn.backward(&cache.attn, &dz1);
        &dz1 + &self.ln1.backward(&cache.ln1, &da_in)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

/// Entry layer norm followed by a run of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T> {
    pub norm: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
}

pub struct StackCache<T> {
    norm: LayerNormCache<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Stack<T> {
    pub fn new(rng: &mut Rng, dim: usize, depth: usize, heads: usize, ffb_mult: usize) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            blocks: (0..depth).map(|_| Block::new(rng, dim, heads, ffb_mult)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm.gamma.value.len()
    }

    /// Runs `x.nrows() / seq_len` independent sequences stored back to back.
    pub fn forward(&self, x: &Array2<T>, seq_len: usize) -> (Array2<T>, StackCache<T>) {
        let (mut z, norm) = self.norm.forward(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&z, seq_len);
            blocks.push(cache);
            z = next;
        }
        (z, StackCache { norm, blocks })
    }

    pub fn backward(&mut self, cache: &StackCache<T>, dy: &Array2<T>) -> Array2<T> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        self.norm.backward(&cache.norm, &d)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, T>) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
    }
}
