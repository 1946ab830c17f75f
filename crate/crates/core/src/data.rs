//! Synthetic multimodal dataset generation, accuracy metrics, condition-wise
//! evaluation, and invariant-feature export.
//!
//! Utterances are generated from a latent factor shared across modalities:
//! each class owns a latent mean, every modality observes a fixed random
//! affine map of the latent plus frame noise. Cross-modal imagination is
//! therefore learnable by construction, the property the method presumes of
//! real data.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{specific_batch, student_forward, invariant_batch, ModelSpec};
use crate::params::ParamStore;
use crate::pipeline::{apply_missing, MissingCondition, ALL_CONDITIONS};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub latent_dim: usize,
    pub class_priors: [f64; 4],
    pub t_a: usize,
    pub t_v: usize,
    pub t_t: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    pub dim_t: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

pub const N_CLASSES: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class priors sum to {sum}, want 1")));
        }
        if self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid("class priors must be non-negative"));
        }
        if self.latent_dim < N_CLASSES {
            return Err(Error::invalid(format!(
                "latent_dim {} < {N_CLASSES}; class means need one axis each",
                self.latent_dim
            )));
        }
        if self.n_utterances == 0 {
            return Err(Error::invalid("n_utterances must be positive"));
        }
        if [self.t_a, self.t_v, self.t_t].iter().any(|&t| t == 0) {
            return Err(Error::invalid("sequence lengths must be >= 1"));
        }
        Ok(())
    }
}

/// One utterance: per-modality raw feature sequences plus emotion label.
#[derive(Clone, Debug)]
pub struct RawUtterance {
    pub id: usize,
    pub label: usize,
    /// [T_a, dim_a]
    pub acoustic: Tensor,
    /// [T_v, dim_v]
    pub visual: Tensor,
    /// [T_t, dim_t]
    pub textual: Tensor,
}

/// Pairwise distance between class means in latent space, in units of the
/// latent standard deviation. 4σ keeps classes separable by construction.
const CLASS_SEPARATION: f64 = 4.0;

struct AffineMap {
    // [latent_dim, out_dim] row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
    out_dim: usize,
}

impl AffineMap {
    fn draw(rng: &mut impl Rng, latent: usize, out: usize) -> Self {
        let scale = 1.0 / (latent as f64).sqrt();
        AffineMap {
            weights: (0..latent * out)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect(),
            // Real extracted features are far from zero-centered (energies,
            // activations, counts); a strong one-sided offset keeps zero-filled
            // (missing) frames well outside the observed manifold.
            bias: (0..out).map(|_| rng.gen_range(1.5..4.5)).collect(),
            out_dim: out,
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &zv) in z.iter().enumerate() {
            let row = &self.weights[j * self.out_dim..(j + 1) * self.out_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += zv * w;
            }
        }
        out
    }
}

fn draw_class(rng: &mut impl Rng, priors: &[f64; 4]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    N_CLASSES - 1
}

/// Deterministic synthetic dataset. The affine maps are drawn once from the
/// seed; each utterance draws from its own RNG stream.
pub fn generate(spec: &SynthSpec) -> Result<Vec<RawUtterance>> {
    spec.validate()?;
    let mut map_rng = crate::rng::stream(spec.seed, "synth-affine");
    let map_a = AffineMap::draw(&mut map_rng, spec.latent_dim, spec.dim_a);
    let map_v = AffineMap::draw(&mut map_rng, spec.latent_dim, spec.dim_v);
    let map_t = AffineMap::draw(&mut map_rng, spec.latent_dim, spec.dim_t);
    // distance between any two means: CLASS_SEPARATION (each mean sits on its
    // own axis at CLASS_SEPARATION/sqrt(2))
    let mean_coord = CLASS_SEPARATION / 2f64.sqrt();
    let mut out = Vec::with_capacity(spec.n_utterances);
    for id in 0..spec.n_utterances {
        let mut rng = crate::rng::substream(spec.seed, "synth-utterance", id as u64);
        let label = draw_class(&mut rng, &spec.class_priors);
        let mut z: Vec<f64> = (0..spec.latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        z[label] += mean_coord;
        let mut frames = |map: &AffineMap, t_len: usize, dim: usize| -> Tensor {
            let clean = map.apply(&z);
            let mut data = Vec::with_capacity(t_len * dim);
            for _ in 0..t_len {
                for &c in &clean {
                    data.push(c + spec.noise_scale * rng.sample::<f64, _>(StandardNormal));
                }
            }
            Tensor::matrix(t_len, dim, data).unwrap()
        };
        out.push(RawUtterance {
            id,
            label,
            acoustic: frames(&map_a, spec.t_a, spec.dim_a),
            visual: frames(&map_v, spec.t_v, spec.dim_v),
            textual: frames(&map_t, spec.t_t, spec.dim_t),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct UtteranceJson {
    id: usize,
    label: usize,
    a: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn rows_to_tensor(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::invalid(format!("{what}: empty sequence")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what}: ragged rows")));
    }
    Tensor::matrix(rows.len(), d, rows.iter().flatten().copied().collect())
}

/// JSON Lines, one utterance per line: {id, label, a, v, t}.
pub fn write_jsonl<W: Write>(w: &mut W, data: &[RawUtterance]) -> Result<()> {
    for u in data {
        let j = UtteranceJson {
            id: u.id,
            label: u.label,
            a: tensor_to_rows(&u.acoustic),
            v: tensor_to_rows(&u.visual),
            t: tensor_to_rows(&u.textual),
        };
        serde_json::to_writer(&mut *w, &j)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RawUtterance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: UtteranceJson = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        if j.label >= N_CLASSES {
            return Err(Error::invalid(format!(
                "dataset line {}: label {} out of range",
                i + 1,
                j.label
            )));
        }
        out.push(RawUtterance {
            id: j.id,
            label: j.label,
            acoustic: rows_to_tensor(&j.a, "acoustic")?,
            visual: rows_to_tensor(&j.v, "visual")?,
            textual: rows_to_tensor(&j.t, "textual")?,
        });
    }
    Ok(out)
}

/// Fraction of correct predictions over all samples.
pub fn weighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean of per-class recalls; classes absent from the labels are excluded.
pub fn unweighted_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "prediction/label length mismatch: {} vs {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut total = [0usize; N_CLASSES];
    let mut hit = [0usize; N_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..N_CLASSES {
        if total[c] > 0 {
            sum += hit[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: String,
    pub wa: f64,
    pub ua: f64,
}

/// Table-1-shaped report: WA/UA per missing-modality condition plus the
/// arithmetic mean over the six conditions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub conditions: Vec<ConditionMetrics>,
    pub average_wa: f64,
    pub average_ua: f64,
}

const EVAL_CHUNK: usize = 64;

/// Argmax predictions of the student path over (pre-masked) utterances.
pub fn predict(
    spec: &ModelSpec,
    params: &ParamStore,
    no_ifim: bool,
    cascaded_input: bool,
    utterances: &[RawUtterance],
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(utterances.len());
    for chunk in utterances.chunks(EVAL_CHUNK) {
        let batch: Vec<&RawUtterance> = chunk.iter().collect();
        let mut g = Graph::new();
        let bp = params.bind_frozen(&mut g);
        let f = student_forward(spec, &mut g, &bp, &batch, no_ifim, cascaded_input, false)?;
        let logits = g.value(f.logits);
        for r in 0..batch.len() {
            let row = logits.row(r);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Evaluate each of the six missing-modality conditions on the test set.
/// Parameters are read-only throughout.
pub fn evaluate_conditions(
    spec: &ModelSpec,
    params: &ParamStore,
    no_ifim: bool,
    cascaded_input: bool,
    test: &[RawUtterance],
) -> Result<ConditionReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let labels: Vec<usize> = test.iter().map(|u| u.label).collect();
    let mut conditions = Vec::with_capacity(ALL_CONDITIONS.len());
    for cond in ALL_CONDITIONS {
        let masked: Vec<RawUtterance> = test.iter().map(|u| apply_missing(u, cond)).collect();
        let preds = predict(spec, params, no_ifim, cascaded_input, &masked)?;
        conditions.push(ConditionMetrics {
            condition: cond.label().to_string(),
            wa: weighted_accuracy(&preds, &labels)?,
            ua: unweighted_accuracy(&preds, &labels)?,
        });
    }
    let n = conditions.len() as f64;
    let average_wa = conditions.iter().map(|c| c.wa).sum::<f64>() / n;
    let average_ua = conditions.iter().map(|c| c.ua).sum::<f64>() / n;
    Ok(ConditionReport {
        conditions,
        average_wa,
        average_ua,
    })
}

/// Predicted invariant features H' per (condition, utterance), for external
/// embedding/plotting. Rows are `(condition label, H' coordinates)`.
pub fn invariant_feature_rows(
    spec: &ModelSpec,
    params: &ParamStore,
    utterances: &[RawUtterance],
    conditions: &[MissingCondition],
    per_condition: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    let take = per_condition.min(utterances.len());
    let mut rows = Vec::with_capacity(conditions.len() * take);
    for cond in conditions {
        let masked: Vec<RawUtterance> = utterances[..take]
            .iter()
            .map(|u| apply_missing(u, *cond))
            .collect();
        for chunk in masked.chunks(EVAL_CHUNK) {
            let batch: Vec<&RawUtterance> = chunk.iter().collect();
            let mut g = Graph::new();
            let bp = params.bind_frozen(&mut g);
            let sb = specific_batch(spec, &mut g, &bp, &batch)?;
            let ib = invariant_batch(spec, &mut g, &bp, &sb, false)?;
            let h_inv = g.value(ib.h_inv);
            for r in 0..batch.len() {
                rows.push((cond.label().to_string(), h_inv.row(r).to_vec()));
            }
        }
    }
    Ok(rows)
}

/// CSV with header `condition,H_0..H_{3h-1}`.
pub fn write_feature_csv<W: Write>(w: &mut W, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let width = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    write!(w, "condition")?;
    for i in 0..width {
        write!(w, ",H_{i}")?;
    }
    writeln!(w)?;
    for (cond, values) in rows {
        write!(w, "{cond}")?;
        for v in values {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
