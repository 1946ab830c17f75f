//! Whole-network assembly shared by training and evaluation: parameter
//! initialization, batched forward paths for the pretraining network, the
//! student, and the frozen teacher.

use crate::data::RawUtterance;
use crate::encoders::{Classifier, InvarianceEncoder, LstmEncoder, TextCnnEncoder};
use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::ifim::{ifim_forward, init_stages, stage_views, Autoencoder, ImaginationOutput};
use crate::params::{BoundParams, ParamStore};

/// Architecture hyperparameters, all derived from config.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub dim_a: usize,
    pub dim_v: usize,
    pub dim_t: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub m: usize,
    pub dropout: f64,
    pub share_invariance_encoder: bool,
}

impl ModelSpec {
    /// Width of the concatenated specific feature h (and of H).
    pub fn h_cat(&self) -> usize {
        3 * self.hidden
    }

    /// Width of the joint representation C.
    pub fn joint_dim(&self) -> usize {
        self.m * (self.hidden / 2).max(1)
    }

    /// Pretraining classifier consumes concat(h, H).
    pub fn pretrain_cls_in(&self) -> usize {
        2 * self.h_cat()
    }

    fn enc_a(&self) -> LstmEncoder {
        LstmEncoder::new("enc_a", self.dim_a, self.hidden)
    }

    fn enc_v(&self) -> LstmEncoder {
        LstmEncoder::new("enc_v", self.dim_v, self.hidden)
    }

    fn enc_t(&self) -> TextCnnEncoder {
        TextCnnEncoder::new("enc_t", self.dim_t, self.hidden)
    }

    fn inv_encoder(&self, modality: usize) -> InvarianceEncoder {
        let prefix = if self.share_invariance_encoder {
            "enc_inv".to_string()
        } else {
            format!("enc_inv_{}", ["a", "v", "t"][modality])
        };
        InvarianceEncoder::new(&prefix, self.hidden)
    }

    /// Stage-1 parameters: the three specificity encoders, Enc′, and the
    /// pretraining classifier.
    pub fn init_pretrain(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "init-pretrain");
        self.enc_a().init(&mut store, &mut rng)?;
        self.enc_v().init(&mut store, &mut rng)?;
        self.enc_t().init(&mut store, &mut rng)?;
        if self.share_invariance_encoder {
            self.inv_encoder(0).init(&mut store, &mut rng)?;
        } else {
            for m in 0..3 {
                self.inv_encoder(m).init(&mut store, &mut rng)?;
            }
        }
        Classifier::new("cls_pre", self.pretrain_cls_in(), self.hidden, self.n_classes)
            .init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Student parameters: encoders and Enc′ copied from the teacher, fresh
    /// IF-IM stages and classifier. With `no_ifim` the classifier reads
    /// concat(h, H') instead of the joint representation.
    pub fn init_student(&self, teacher: &ParamStore, seed: u64, no_ifim: bool) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in teacher.iter() {
            if !e.name.starts_with("cls_pre") {
                store.insert(&e.name, e.tensor.clone())?;
            }
        }
        let mut rng = crate::rng::stream(seed, "init-student");
        if no_ifim {
            Classifier::new("cls", self.pretrain_cls_in(), self.hidden, self.n_classes)
                .init(&mut store, &mut rng)?;
        } else {
            init_stages(&mut store, &mut rng, self.m, self.hidden)?;
            Classifier::new("cls", self.joint_dim(), self.hidden, self.n_classes)
                .init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    pub fn stages(&self) -> Vec<Autoencoder> {
        stage_views(self.m, self.hidden)
    }
}

/// Batched modality-specific features.
pub struct SpecificBatch {
    pub h_a: VarId,
    pub h_v: VarId,
    pub h_t: VarId,
    /// concat(h_a, h_v, h_t) in the fixed (a, v, t) order, [N, 3h].
    pub h: VarId,
}

/// Batched invariant features.
pub struct InvariantBatch {
    pub inv_a: VarId,
    pub inv_v: VarId,
    pub inv_t: VarId,
    /// concat in (a, v, t) order, [N, 3h].
    pub h_inv: VarId,
}

/// Run the three specificity encoders over a batch of utterances.
pub fn specific_batch(
    spec: &ModelSpec,
    g: &mut Graph,
    bp: &BoundParams,
    batch: &[&RawUtterance],
) -> Result<SpecificBatch> {
    let enc_a = spec.enc_a();
    let enc_v = spec.enc_v();
    let enc_t = spec.enc_t();
    let mut rows_a = Vec::with_capacity(batch.len());
    let mut rows_v = Vec::with_capacity(batch.len());
    let mut rows_t = Vec::with_capacity(batch.len());
    for utt in batch {
        let xa = g.constant(utt.acoustic.clone());
        rows_a.push(enc_a.forward(g, bp, xa)?);
        let xv = g.constant(utt.visual.clone());
        rows_v.push(enc_v.forward(g, bp, xv)?);
        let valid = utt.textual.shape()[0];
        let xt = g.constant(TextCnnEncoder::pad(&utt.textual));
        rows_t.push(enc_t.forward(g, bp, xt, valid)?);
    }
    let h_a = g.stack_rows(&rows_a)?;
    let h_v = g.stack_rows(&rows_v)?;
    let h_t = g.stack_rows(&rows_t)?;
    let h = g.concat_cols(&[h_a, h_v, h_t])?;
    Ok(SpecificBatch { h_a, h_v, h_t, h })
}

/// Map specific features into the shared subspace through Enc′.
pub fn invariant_batch(
    spec: &ModelSpec,
    g: &mut Graph,
    bp: &BoundParams,
    sb: &SpecificBatch,
    train: bool,
) -> Result<InvariantBatch> {
    let inv_a = spec
        .inv_encoder(0)
        .forward(g, bp, sb.h_a, spec.dropout, train)?;
    let inv_v = spec
        .inv_encoder(1)
        .forward(g, bp, sb.h_v, spec.dropout, train)?;
    let inv_t = spec
        .inv_encoder(2)
        .forward(g, bp, sb.h_t, spec.dropout, train)?;
    let h_inv = g.concat_cols(&[inv_a, inv_v, inv_t])?;
    Ok(InvariantBatch {
        inv_a,
        inv_v,
        inv_t,
        h_inv,
    })
}

/// Full Stage-1 forward: features plus classifier logits over concat(h, H).
pub struct PretrainForward {
    pub specific: SpecificBatch,
    pub invariant: InvariantBatch,
    pub logits: VarId,
}

pub fn pretrain_forward(
    spec: &ModelSpec,
    g: &mut Graph,
    bp: &BoundParams,
    batch: &[&RawUtterance],
    train: bool,
) -> Result<PretrainForward> {
    let sb = specific_batch(spec, g, bp, batch)?;
    let ib = invariant_batch(spec, g, bp, &sb, train)?;
    let z = g.concat_cols(&[sb.h, ib.h_inv])?;
    let cls = Classifier::new("cls_pre", spec.pretrain_cls_in(), spec.hidden, spec.n_classes);
    let logits = cls.forward(g, bp, z, spec.dropout, train)?;
    Ok(PretrainForward {
        specific: sb,
        invariant: ib,
        logits,
    })
}

/// Student forward over (already masked) inputs.
pub struct StudentForward {
    pub specific: SpecificBatch,
    pub invariant: InvariantBatch,
    /// Absent with `no_ifim`.
    pub imagination: Option<ImaginationOutput>,
    pub logits: VarId,
}

pub fn student_forward(
    spec: &ModelSpec,
    g: &mut Graph,
    bp: &BoundParams,
    batch: &[&RawUtterance],
    no_ifim: bool,
    cascaded_input: bool,
    train: bool,
) -> Result<StudentForward> {
    let sb = specific_batch(spec, g, bp, batch)?;
    let ib = invariant_batch(spec, g, bp, &sb, train)?;
    if no_ifim {
        let z = g.concat_cols(&[sb.h, ib.h_inv])?;
        let cls = Classifier::new("cls", spec.pretrain_cls_in(), spec.hidden, spec.n_classes);
        let logits = cls.forward(g, bp, z, spec.dropout, train)?;
        Ok(StudentForward {
            specific: sb,
            invariant: ib,
            imagination: None,
            logits,
        })
    } else {
        let stages = spec.stages();
        let out = ifim_forward(g, bp, &stages, sb.h, ib.h_inv, cascaded_input)?;
        let cls = Classifier::new("cls", spec.joint_dim(), spec.hidden, spec.n_classes);
        let logits = cls.forward(g, bp, out.joint, spec.dropout, train)?;
        Ok(StudentForward {
            specific: sb,
            invariant: ib,
            imagination: Some(out),
            logits,
        })
    }
}

/// Teacher targets from full-modality input with frozen Stage-1 parameters,
/// dropout off.
pub struct TeacherTargets {
    /// [N, 3h]
    pub h_full: VarId,
    /// [N, 3h]
    pub h_inv_full: VarId,
}

pub fn teacher_targets(
    spec: &ModelSpec,
    g: &mut Graph,
    teacher: &ParamStore,
    batch: &[&RawUtterance],
) -> Result<TeacherTargets> {
    let bp = teacher.bind_frozen(g);
    let sb = specific_batch(spec, g, &bp, batch)?;
    let ib = invariant_batch(spec, g, &bp, &sb, false)?;
    Ok(TeacherTargets {
        h_full: sb.h,
        h_inv_full: ib.h_inv,
    })
}
