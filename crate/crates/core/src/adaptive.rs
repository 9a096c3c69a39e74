//! Duration-weighted teacher-student objective for the student classifier.
//!
//! `loss = (seg_len / T) * (KL(p_st || p_te) - lambda * I(X_st; Y_st))`, where
//! the KL term is summed over query rows and the mutual information is the
//! marginal label entropy minus the mean conditional entropy of the student's
//! predictions. Only the student prototypes receive gradients.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::proto::{
    prototype_distances, softmax_neg_distance, ClassifierWeights, ProbMatrix, Provenance,
};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Sums run over every query row; disagreement only gates the step.
    Full,
    /// Sums run over the rows where teacher and student disagree.
    Disagreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    /// Weight of the mutual-information term.
    pub lambda: f64,
    /// Duration normaliser `T`, in frames.
    pub duration_norm_frames: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub loss_scope: LossScope,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            duration_norm_frames: 150.0,
            lr: 1e-5,
            max_steps: 20,
            loss_scope: LossScope::Full,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.duration_norm_frames > 0.0 && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(
                "adaptive: need lambda >= 0, T > 0, lr >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutualInformation {
    pub h_marginal: f64,
    pub h_conditional: f64,
    pub mutual_info: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub h_marginal: f64,
    pub h_conditional: f64,
    pub mutual_info: f64,
    pub weight: f64,
    pub total: f64,
}

/// One line of the adaptation log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub kl: f64,
    pub h_marginal: f64,
    pub h_conditional: f64,
    pub mutual_info: f64,
    pub total: f64,
    pub disagreements: usize,
}

fn clamp_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn check_same_shape(a: &ProbMatrix, b: &ProbMatrix) -> Result<()> {
    if a.rows.dim() != b.rows.dim() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            a.rows.dim(),
            b.rows.dim()
        )));
    }
    Ok(())
}

/// `sum_i sum_k p_st * (ln p_st - ln p_te)`, summed over rows.
pub fn kl_divergence_sum(p_st: &ProbMatrix, p_te: &ProbMatrix) -> Result<f64> {
    check_same_shape(p_st, p_te)?;
    Ok(p_st
        .rows
        .iter()
        .zip(p_te.rows.iter())
        .map(|(&s, &t)| {
            if s > 0.0 {
                s * (clamp_ln(s) - clamp_ln(t))
            } else {
                0.0
            }
        })
        .sum())
}

/// Marginal label entropy, mean conditional entropy and their difference (nats).
pub fn mutual_information_terms(p_st: &ProbMatrix) -> Result<MutualInformation> {
    let n = p_st.n();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    let k = p_st.rows.ncols();
    let mut h_marginal = 0.0;
    for c in 0..k {
        let p_hat = p_st.rows.column(c).sum() / n as f64;
        if p_hat > 0.0 {
            h_marginal -= p_hat * clamp_ln(p_hat);
        }
    }
    let h_conditional = -p_st
        .rows
        .iter()
        .map(|&p| if p > 0.0 { p * clamp_ln(p) } else { 0.0 })
        .sum::<f64>()
        / n as f64;
    Ok(MutualInformation {
        h_marginal,
        h_conditional,
        mutual_info: h_marginal - h_conditional,
    })
}

pub fn adaptive_loss(
    p_st: &ProbMatrix,
    p_te: &ProbMatrix,
    seg_len: usize,
    cfg: &AdaptiveConfig,
) -> Result<LossBreakdown> {
    let kl = kl_divergence_sum(p_st, p_te)?;
    let mi = mutual_information_terms(p_st)?;
    let weight = seg_len as f64 / cfg.duration_norm_frames;
    Ok(LossBreakdown {
        kl,
        h_marginal: mi.h_marginal,
        h_conditional: mi.h_conditional,
        mutual_info: mi.mutual_info,
        weight,
        total: weight * (kl - cfg.lambda * mi.mutual_info),
    })
}

/// dLoss/dp_st for every entry.
fn loss_grad_wrt_probs(
    p_st: &ProbMatrix,
    p_te: &ProbMatrix,
    seg_len: usize,
    cfg: &AdaptiveConfig,
) -> Array2<f64> {
    let n = p_st.n() as f64;
    let k = p_st.rows.ncols();
    let weight = seg_len as f64 / cfg.duration_norm_frames;
    let ln_hat: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let p_hat = p_st.rows.column(c).sum() / n;
            (p_hat >= PROB_FLOOR).then(|| p_hat.ln())
        })
        .collect();

    let mut g = Array2::zeros(p_st.rows.dim());
    for ((i, c), out) in g.indexed_iter_mut() {
        let p = p_st.rows[[i, c]];
        let (d_kl, d_hc) = if p >= PROB_FLOOR {
            let lp = p.ln();
            (lp - clamp_ln(p_te.rows[[i, c]]) + 1.0, -(lp + 1.0) / n)
        } else {
            (0.0, 0.0)
        };
        let d_hm = ln_hat[c].map_or(0.0, |l| -(l + 1.0) / n);
        *out = weight * (d_kl - cfg.lambda * (d_hm - d_hc));
    }
    g
}

fn check_inputs(w: &ClassifierWeights, embs: &EmbeddingMatrix, p_te: &ProbMatrix) -> Result<()> {
    if embs.d() != w.d() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings have d={}, classifier d={}",
            embs.d(),
            w.d()
        )));
    }
    if p_te.rows.dim() != (embs.n(), 2) {
        return Err(Error::ShapeMismatch(format!(
            "teacher probabilities {:?} for {} query rows",
            p_te.rows.dim(),
            embs.n()
        )));
    }
    Ok(())
}

/// Exact gradient of [`adaptive_loss`] with respect to the student prototypes.
///
/// The chain runs through `p_st = softmax(-||w_k - z_i||)`, including the
/// coupling of every row through the label marginal. The teacher's
/// probabilities and the embeddings are constants.
pub fn student_loss_gradient(
    w: &ClassifierWeights,
    embs: &EmbeddingMatrix,
    p_te: &ProbMatrix,
    seg_len: usize,
    cfg: &AdaptiveConfig,
) -> Result<Array2<f64>> {
    check_inputs(w, embs, p_te)?;
    let dist = prototype_distances(w, embs)?;
    let p_st = softmax_neg_distance(&dist);
    let g_p = loss_grad_wrt_probs(&p_st, p_te, seg_len, cfg);

    let mut grad = Array2::zeros(w.w.dim());
    for (i, z) in embs.rows.rows().into_iter().enumerate() {
        let p = p_st.rows.row(i);
        let gp = g_p.row(i);
        let mean_g: f64 = p.iter().zip(gp.iter()).map(|(a, b)| a * b).sum();
        for k in 0..2 {
            // dL/da_ik with a_ik = -d_ik
            let d_logit = p[k] * (gp[k] - mean_g);
            let d = dist[[i, k]];
            if d <= 0.0 {
                continue;
            }
            let scale = -d_logit / d;
            for (g, (wv, zv)) in grad
                .row_mut(k)
                .iter_mut()
                .zip(w.w.row(k).iter().zip(z.iter()))
            {
                *g += scale * (wv - zv);
            }
        }
    }
    Ok(grad)
}

/// Gated adaptation loop on a private copy of the student classifier.
///
/// Each iteration recomputes the student's probabilities; when its argmax
/// agrees with the teacher on every row the loop stops, otherwise one Adam
/// step is taken on the configured loss scope.
pub fn adapt_student(
    w: &ClassifierWeights,
    embs: &EmbeddingMatrix,
    p_te: &ProbMatrix,
    seg_len: usize,
    cfg: &AdaptiveConfig,
) -> Result<(ClassifierWeights, Vec<StepLog>)> {
    cfg.validate()?;
    check_inputs(w, embs, p_te)?;
    let mut current = w.clone();
    let mut opt = Adam::new(current.w.len(), cfg.lr);
    let teacher_arg = p_te.argmax();
    let mut log = Vec::new();

    for step in 0..cfg.max_steps {
        let p_st = softmax_neg_distance(&prototype_distances(&current, embs)?);
        let disagree: Vec<usize> = p_st
            .argmax()
            .iter()
            .zip(&teacher_arg)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        if disagree.is_empty() {
            break;
        }

        let (grad, loss) = match cfg.loss_scope {
            LossScope::Full => (
                student_loss_gradient(&current, embs, p_te, seg_len, cfg)?,
                adaptive_loss(&p_st, p_te, seg_len, cfg)?,
            ),
            LossScope::Disagreement => {
                let sub_embs = embs.select(&disagree);
                let sub_te = ProbMatrix {
                    rows: p_te.rows.select(ndarray::Axis(0), &disagree),
                };
                let sub_st = ProbMatrix {
                    rows: p_st.rows.select(ndarray::Axis(0), &disagree),
                };
                (
                    student_loss_gradient(&current, &sub_embs, &sub_te, seg_len, cfg)?,
                    adaptive_loss(&sub_st, &sub_te, seg_len, cfg)?,
                )
            }
        };
        log.push(StepLog {
            step,
            kl: loss.kl,
            h_marginal: loss.h_marginal,
            h_conditional: loss.h_conditional,
            mutual_info: loss.mutual_info,
            total: loss.total,
            disagreements: disagree.len(),
        });

        let flat = current.w.as_slice_mut().expect("standard layout");
        opt.step(flat, grad.as_slice().expect("standard layout"));
    }

    current.provenance = Provenance::Adapted;
    Ok((current, log))
}
