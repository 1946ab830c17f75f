//! Invariant-feature-aware imagination module: M cascaded autoencoders with
//! the predicted invariant feature injected at every stage. Each stage maps
//! the 3h-wide feature through the ladder 3h → 2h → h → h/2 and back, ReLU
//! on every layer except the final decoder output. The stage outputs Δz_i
//! chain forward; the bottleneck activations concatenate into the joint
//! representation C.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::params::{init_matrix, init_vector, BoundParams, ParamStore};
use rand_chacha::ChaCha8Rng;

/// Layer widths for one autoencoder given the specific-feature width `h`
/// (the encoders' hidden size): [3h, 2h, h, h/2] down, mirrored up.
pub fn ladder(hidden: usize) -> Vec<usize> {
    vec![3 * hidden, 2 * hidden, hidden, (hidden / 2).max(1)]
}

#[derive(Clone)]
pub struct Autoencoder {
    pub prefix: String,
    /// Encoder ladder top-to-bottleneck; decoder mirrors it.
    pub widths: Vec<usize>,
}

impl Autoencoder {
    pub fn new(prefix: &str, widths: Vec<usize>) -> Self {
        Autoencoder {
            prefix: prefix.to_string(),
            widths,
        }
    }

    pub fn bottleneck(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for i in 0..self.widths.len() - 1 {
            let (din, dout) = (self.widths[i], self.widths[i + 1]);
            store.insert(
                &format!("{}.enc{}.w", self.prefix, i),
                init_matrix(rng, din, din, dout),
            )?;
            store.insert(
                &format!("{}.enc{}.b", self.prefix, i),
                init_vector(rng, din, dout),
            )?;
        }
        for i in 0..self.widths.len() - 1 {
            let (din, dout) = (
                self.widths[self.widths.len() - 1 - i],
                self.widths[self.widths.len() - 2 - i],
            );
            store.insert(
                &format!("{}.dec{}.w", self.prefix, i),
                init_matrix(rng, din, din, dout),
            )?;
            store.insert(
                &format!("{}.dec{}.b", self.prefix, i),
                init_vector(rng, din, dout),
            )?;
        }
        Ok(())
    }

    /// z: [N, 3h] → (delta: [N, 3h], hidden: [N, h/2]).
    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, z: VarId) -> Result<(VarId, VarId)> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.widths[0] {
            return Err(Error::InvalidShape {
                kind: format!("{} input", self.prefix),
                shape,
                reason: format!("want [N, {}]", self.widths[0]),
            });
        }
        let n = shape[0];
        let mut cur = z;
        for i in 0..self.widths.len() - 1 {
            let w = bp.var(&format!("{}.enc{}.w", self.prefix, i))?;
            let b = bp.var(&format!("{}.enc{}.b", self.prefix, i))?;
            let m = g.matmul(cur, w)?;
            let b_rows = g.broadcast_rows(b, n)?;
            let zb = g.add(m, b_rows)?;
            cur = g.relu(zb)?;
        }
        let hidden = cur;
        let last = self.widths.len() - 2;
        for i in 0..self.widths.len() - 1 {
            let w = bp.var(&format!("{}.dec{}.w", self.prefix, i))?;
            let b = bp.var(&format!("{}.dec{}.b", self.prefix, i))?;
            let m = g.matmul(cur, w)?;
            let b_rows = g.broadcast_rows(b, n)?;
            let zb = g.add(m, b_rows)?;
            // final decoder layer stays linear so imagined features can take any sign
            cur = if i < last { g.relu(zb)? } else { zb };
        }
        Ok((cur, hidden))
    }
}

/// Stage outputs of one imagination pass over a batch.
pub struct ImaginationOutput {
    /// Imagined feature h' = Δz_M, [N, 3h].
    pub h_prime: VarId,
    /// Bottleneck activations, one [N, h/2] per stage.
    pub hidden_states: Vec<VarId>,
    /// Joint representation: bottlenecks concatenated in cascade order,
    /// [N, M·h/2].
    pub joint: VarId,
    /// Δz_1..Δz_M, each [N, 3h].
    pub deltas: Vec<VarId>,
}

/// The cascade. Stage 1 always consumes H' + h. With `cascaded_input` the
/// invariant feature re-enters at every later stage (H' + Δz_{i-1}); the
/// ablation feeds Δz_{i-1} alone.
pub fn ifim_forward(
    g: &mut Graph,
    bp: &BoundParams,
    stages: &[Autoencoder],
    h: VarId,
    h_inv: VarId,
    cascaded_input: bool,
) -> Result<ImaginationOutput> {
    if stages.is_empty() {
        return Err(Error::invalid("IF-IM needs at least one autoencoder"));
    }
    let mut deltas = Vec::with_capacity(stages.len());
    let mut hidden_states = Vec::with_capacity(stages.len());
    let mut prev: Option<VarId> = None;
    for stage in stages {
        let input = match prev {
            None => g.add(h_inv, h)?,
            Some(d) => {
                if cascaded_input {
                    g.add(h_inv, d)?
                } else {
                    d
                }
            }
        };
        let (delta, hidden) = stage.forward(g, bp, input)?;
        prev = Some(delta);
        deltas.push(delta);
        hidden_states.push(hidden);
    }
    let joint = g.concat_cols(&hidden_states)?;
    Ok(ImaginationOutput {
        h_prime: *deltas.last().unwrap(),
        hidden_states,
        joint,
        deltas,
    })
}

pub fn init_stages(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    m: usize,
    hidden: usize,
) -> Result<Vec<Autoencoder>> {
    let mut stages = Vec::with_capacity(m);
    for i in 0..m {
        let ae = Autoencoder::new(&format!("ifim.ae{i}"), ladder(hidden));
        ae.init(store, rng)?;
        stages.push(ae);
    }
    Ok(stages)
}

/// Rebuild stage descriptors without touching parameters (for loading).
pub fn stage_views(m: usize, hidden: usize) -> Vec<Autoencoder> {
    (0..m)
        .map(|i| Autoencoder::new(&format!("ifim.ae{i}"), ladder(hidden)))
        .collect()
}
