//! Specificity encoders (LSTM + max-pool for acoustic/visual, TextCNN for
//! text), the shared invariance encoder, and the fully-connected classifier.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::params::{init_matrix, init_vector, BoundParams, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Shortest sequence the TextCNN accepts; shorter inputs are zero-padded at
/// the tail up to this length (the widest kernel).
pub const MIN_TEXT_LEN: usize = 5;
pub const TEXT_KERNELS: [usize; 3] = [3, 4, 5];

/// Single-layer unidirectional LSTM over time followed by elementwise max
/// over the hidden states. Gate columns are laid out [i | f | g | o].
#[derive(Clone)]
pub struct LstmEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmEncoder {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        LstmEncoder {
            prefix: prefix.to_string(),
            input_dim,
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let h = self.hidden;
        store.insert(
            &format!("{}.w_x", self.prefix),
            init_matrix(rng, self.input_dim, self.input_dim, 4 * h),
        )?;
        store.insert(
            &format!("{}.w_h", self.prefix),
            init_matrix(rng, h, h, 4 * h),
        )?;
        let mut b = init_vector(rng, h, 4 * h);
        // forget-gate bias starts at 1
        for v in &mut b.data_mut()[h..2 * h] {
            *v += 1.0;
        }
        store.insert(&format!("{}.b", self.prefix), b)?;
        Ok(())
    }

    /// x: [T, input_dim] with T >= 1 → utterance embedding [hidden].
    pub fn forward(&self, g: &mut Graph, bp: &BoundParams, x: VarId) -> Result<VarId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::InvalidShape {
                kind: format!("{} input", self.prefix),
                shape,
                reason: format!("want [T, {}]", self.input_dim),
            });
        }
        let t_len = shape[0];
        if t_len == 0 {
            return Err(Error::invalid(format!("{}: empty sequence", self.prefix)));
        }
        let h = self.hidden;
        let w_x = bp.var(&format!("{}.w_x", self.prefix))?;
        let w_h = bp.var(&format!("{}.w_h", self.prefix))?;
        let b = bp.var(&format!("{}.b", self.prefix))?;
        let b_row = g.reshape(b, vec![1, 4 * h])?;
        let xw = g.matmul(x, w_x)?; // [T, 4h], all frames at once
        let mut h_prev = g.constant(Tensor::zeros(vec![1, h]));
        let mut c_prev = g.constant(Tensor::zeros(vec![1, h]));
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xw_t = g.slice_rows(xw, t, 1)?;
            let hw = g.matmul(h_prev, w_h)?;
            let s = g.add(xw_t, hw)?;
            let pre = g.add(s, b_row)?;
            let i_g = g.slice_cols(pre, 0, h)?;
            let f_g = g.slice_cols(pre, h, h)?;
            let g_g = g.slice_cols(pre, 2 * h, h)?;
            let o_g = g.slice_cols(pre, 3 * h, h)?;
            let i = g.sigmoid(i_g)?;
            let f = g.sigmoid(f_g)?;
            let cand = g.tanh(g_g)?;
            let o = g.sigmoid(o_g)?;
            let fc = g.mul(f, c_prev)?;
            let ic = g.mul(i, cand)?;
            c_prev = g.add(fc, ic)?;
            let ct = g.tanh(c_prev)?;
            h_prev = g.mul(o, ct)?;
            states.push(g.reshape(h_prev, vec![h])?);
        }
        let stacked = g.stack_rows(&states)?;
        g.max_over_time(stacked)
    }
}

/// TextCNN: three convolution banks (kernel widths 3/4/5), ReLU, max over
/// the valid window positions, concatenation, linear projection.
#[derive(Clone)]
pub struct TextCnnEncoder {
    pub prefix: String,
    pub input_dim: usize,
    /// Filters per kernel width; also the output width after projection.
    pub hidden: usize,
}

impl TextCnnEncoder {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        TextCnnEncoder {
            prefix: prefix.to_string(),
            input_dim,
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for k in TEXT_KERNELS {
            let fan_in = k * self.input_dim;
            store.insert(
                &format!("{}.conv{}.w", self.prefix, k),
                init_matrix(rng, fan_in, fan_in, self.hidden),
            )?;
            store.insert(
                &format!("{}.conv{}.b", self.prefix, k),
                init_vector(rng, fan_in, self.hidden),
            )?;
        }
        let fan = 3 * self.hidden;
        store.insert(
            &format!("{}.proj.w", self.prefix),
            init_matrix(rng, fan, fan, self.hidden),
        )?;
        store.insert(
            &format!("{}.proj.b", self.prefix),
            init_vector(rng, fan, self.hidden),
        )?;
        Ok(())
    }

    /// Zero-pad a raw sequence at the tail to the minimum length.
    pub fn pad(x: &Tensor) -> Tensor {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        if t >= MIN_TEXT_LEN {
            return x.clone();
        }
        let mut data = x.data().to_vec();
        data.resize(MIN_TEXT_LEN * d, 0.0);
        Tensor::matrix(MIN_TEXT_LEN, d, data).unwrap()
    }

    /// x: [T, input_dim] with T >= 5 (pre-padded); `valid_len` marks how many
    /// leading frames are real content. Max-pooling only covers window
    /// positions that fit inside max(valid_len, 5), so tail padding never
    /// changes the result.
    pub fn forward(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: VarId,
        valid_len: usize,
    ) -> Result<VarId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim || shape[0] < MIN_TEXT_LEN {
            return Err(Error::InvalidShape {
                kind: format!("{} input", self.prefix),
                shape,
                reason: format!("want [T>={MIN_TEXT_LEN}, {}]", self.input_dim),
            });
        }
        let t_len = shape[0];
        let effective = valid_len.max(MIN_TEXT_LEN).min(t_len);
        let mut pooled = Vec::with_capacity(TEXT_KERNELS.len());
        for k in TEXT_KERNELS {
            let w = bp.var(&format!("{}.conv{}.w", self.prefix, k))?;
            let b = bp.var(&format!("{}.conv{}.b", self.prefix, k))?;
            let conv = g.conv1d(x, w, k)?; // [T-k+1, hidden]
            let limit = effective - k + 1;
            let valid = if limit < t_len - k + 1 {
                g.slice_rows(conv, 0, limit)?
            } else {
                conv
            };
            let b_rows = g.broadcast_rows(b, limit)?;
            let biased = g.add(valid, b_rows)?;
            let act = g.relu(biased)?;
            pooled.push(g.max_over_time(act)?);
        }
        let cat = g.concat_cols(&pooled)?; // [3*hidden]
        let row = g.reshape(cat, vec![1, 3 * self.hidden])?;
        let w = bp.var(&format!("{}.proj.w", self.prefix))?;
        let b = bp.var(&format!("{}.proj.b", self.prefix))?;
        let proj = g.matmul(row, w)?;
        let b_row = g.reshape(b, vec![1, self.hidden])?;
        let out = g.add(proj, b_row)?;
        g.reshape(out, vec![self.hidden])
    }
}

/// Invariance encoder Enc′: one fully-connected layer, ReLU, dropout.
/// A single instance is applied to all three modalities' specific features
/// when parameter sharing is on.
#[derive(Clone)]
pub struct InvarianceEncoder {
    pub prefix: String,
    pub hidden: usize,
}

impl InvarianceEncoder {
    pub fn new(prefix: &str, hidden: usize) -> Self {
        InvarianceEncoder {
            prefix: prefix.to_string(),
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.insert(
            &format!("{}.w", self.prefix),
            init_matrix(rng, self.hidden, self.hidden, self.hidden),
        )?;
        store.insert(
            &format!("{}.b", self.prefix),
            init_vector(rng, self.hidden, self.hidden),
        )?;
        Ok(())
    }

    /// x: [N, hidden] batch of one modality's specific features.
    pub fn forward(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        x: VarId,
        dropout: f64,
        train: bool,
    ) -> Result<VarId> {
        let n = g.value(x).shape()[0];
        let w = bp.var(&format!("{}.w", self.prefix))?;
        let b = bp.var(&format!("{}.b", self.prefix))?;
        let z = g.matmul(x, w)?;
        let b_rows = g.broadcast_rows(b, n)?;
        let zb = g.add(z, b_rows)?;
        let act = g.relu(zb)?;
        g.dropout(act, dropout, train)
    }
}

/// Three fully-connected layers ending in raw logits.
#[derive(Clone)]
pub struct Classifier {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl Classifier {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize, n_classes: usize) -> Self {
        Classifier {
            prefix: prefix.to_string(),
            input_dim,
            hidden,
            n_classes,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d, h, c) = (self.input_dim, self.hidden, self.n_classes);
        store.insert(&format!("{}.fc1.w", self.prefix), init_matrix(rng, d, d, h))?;
        store.insert(&format!("{}.fc1.b", self.prefix), init_vector(rng, d, h))?;
        store.insert(&format!("{}.fc2.w", self.prefix), init_matrix(rng, h, h, h))?;
        store.insert(&format!("{}.fc2.b", self.prefix), init_vector(rng, h, h))?;
        store.insert(&format!("{}.fc3.w", self.prefix), init_matrix(rng, h, h, c))?;
        store.insert(&format!("{}.fc3.b", self.prefix), init_vector(rng, h, c))?;
        Ok(())
    }

    /// z: [N, input_dim] → logits [N, n_classes].
    pub fn forward(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        z: VarId,
        dropout: f64,
        train: bool,
    ) -> Result<VarId> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::InvalidShape {
                kind: format!("{} input", self.prefix),
                shape,
                reason: format!("want [N, {}]", self.input_dim),
            });
        }
        let n = shape[0];
        let mut cur = z;
        for (layer, width) in [("fc1", self.hidden), ("fc2", self.hidden)] {
            let w = bp.var(&format!("{}.{layer}.w", self.prefix))?;
            let b = bp.var(&format!("{}.{layer}.b", self.prefix))?;
            let m = g.matmul(cur, w)?;
            let b_rows = g.broadcast_rows(b, n)?;
            let zb = g.add(m, b_rows)?;
            let act = g.relu(zb)?;
            cur = g.dropout(act, dropout, train)?;
            let _ = width;
        }
        let w = bp.var(&format!("{}.fc3.w", self.prefix))?;
        let b = bp.var(&format!("{}.fc3.b", self.prefix))?;
        let m = g.matmul(cur, w)?;
        let b_rows = g.broadcast_rows(b, n)?;
        g.add(m, b_rows)
    }
}
