//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with `∂L/∂z` for the batch
//! embeddings. When the prototype bank is attached (i.e. it was just produced
//! by an EMA update from this batch) the gradient on the prototypes is pushed
//! through the EMA pathway and added to `∂L/∂z`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::assignment::{log_sum_exp, WeightTable};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `B × D` gradient w.r.t. the (normalized) embeddings, including the
    /// EMA-pathway contribution. Ambient, not projected to the tangent space.
    pub grad_z: Array2<f64>,
    /// Gradient w.r.t. the second view for the swapped loss.
    pub grad_z_aug: Option<Array2<f64>>,
    /// `C·K × D` gradient w.r.t. the prototypes, in bank layout.
    pub grad_prototypes: Array2<f64>,
    /// Per-term values (`mle`, `proto_contrast`, `swapped`).
    pub terms: BTreeMap<&'static str, f64>,
}

impl LossOutput {
    fn finish(mut self, bank: &PrototypeBank) -> Result<Self> {
        if let Some(path) = bank.pathway() {
            let via_ema = path.backprop(self.grad_prototypes.view())?;
            if via_ema.dim() != self.grad_z.dim() {
                return Err(Error::InvalidInput(format!(
                    "bank was updated from a batch of {} embeddings, loss sees {}",
                    path.batch_len,
                    self.grad_z.nrows()
                )));
            }
            self.grad_z += &via_ema;
        }
        if !self.value.is_finite() || self.grad_z.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite loss or gradient".into()));
        }
        Ok(self)
    }
}

fn check_batch(z: ArrayView2<f64>, labels: &[usize], bank: &PrototypeBank) -> Result<()> {
    if z.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if z.ncols() != bank.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimension {} != {}",
            z.ncols(),
            bank.dim()
        )));
    }
    if labels.len() != z.nrows() {
        return Err(Error::InvalidInput("label count != batch size".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= bank.classes()) {
        return Err(Error::InvalidInput(format!("label {bad} out of range")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfiguration(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// Mixture-posterior negative log-likelihood
/// `−(1/B)·Σ_i log[Σ_k w^{y_i}_{i,k}·e^{p_k^{y_i}·z_i/τ} / Σ_c Σ_k w^c_{i,k}·e^{p_k^c·z_i/τ}]`.
pub fn mle_loss(
    z: ArrayView2<f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    table: &WeightTable,
    tau: f64,
) -> Result<LossOutput> {
    check_batch(z, labels, bank)?;
    check_tau(tau)?;
    if table.len() != z.nrows() || table.classes != bank.classes() || table.per_class != bank.per_class() {
        return Err(Error::InvalidInput("weight table does not match batch and bank".into()));
    }
    let (b, d) = z.dim();
    let k = bank.per_class();
    let protos = bank.rows();
    let total = protos.nrows();
    let mut grad_z = Array2::zeros((b, d));
    let mut grad_p = Array2::zeros((total, d));
    let mut value = 0.0;
    let inv_b = 1.0 / b as f64;

    // logits[r] = p_r·z_i/τ + ln w_r (−inf for zero weight)
    let mut weighted = vec![0.0; total];
    for (i, zi) in z.rows().into_iter().enumerate() {
        let y = labels[i];
        for (r, slot) in weighted.iter_mut().enumerate() {
            let w = table.weights[[i, r]];
            *slot = if w > 0.0 {
                protos.row(r).dot(&zi) / tau + w.ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        let own = &weighted[y * k..(y + 1) * k];
        let log_num = log_sum_exp(own.iter().cloned());
        if log_num == f64::NEG_INFINITY {
            return Err(Error::Numerical(format!("sample {i}: all own-class weights are zero")));
        }
        let log_den = log_sum_exp(weighted.iter().cloned());
        value += (log_den - log_num) * inv_b;

        for (r, &logit) in weighted.iter().enumerate() {
            if logit == f64::NEG_INFINITY {
                continue;
            }
            let mut coef = (logit - log_den).exp();
            if r / k == y {
                coef -= (logit - log_num).exp();
            }
            let c = coef * inv_b / tau;
            let pr = protos.row(r);
            grad_z.row_mut(i).scaled_add(c, &pr);
            grad_p.row_mut(r).scaled_add(c, &zi);
        }
    }

    let mut terms = BTreeMap::new();
    terms.insert("mle", value);
    LossOutput {
        value,
        grad_z,
        grad_z_aug: None,
        grad_prototypes: grad_p,
        terms,
    }
    .finish(bank)
}

/// Prototype-level contrastive loss
/// `−(1/CK)·Σ_{c,k} log[Σ_{k'≠k} e^{p_k^c·p_{k'}^c/τ_p} / Σ_{c'≠c} Σ_{k''} e^{p_k^c·p_{k''}^{c'}/τ_p}]`.
///
/// `batch_len` is the size of the batch whose embeddings receive gradients;
/// those gradients are nonzero only through an attached bank's EMA pathway.
pub fn proto_contrast_loss(bank: &PrototypeBank, tau_p: f64, batch_len: usize) -> Result<LossOutput> {
    check_tau(tau_p)?;
    let (c_n, k) = (bank.classes(), bank.per_class());
    if c_n < 2 || k < 2 {
        return Err(Error::InvalidConfiguration(format!(
            "prototype contrastive loss needs C >= 2 and K >= 2 (got C={c_n}, K={k})"
        )));
    }
    let protos = bank.rows();
    let (total, d) = protos.dim();
    let sim = protos.dot(&protos.t()).mapv(|v| v / tau_p);
    let mut grad_p = Array2::<f64>::zeros((total, d));
    let mut value = 0.0;
    let scale = 1.0 / total as f64;

    for anchor in 0..total {
        let c = anchor / k;
        let same = (c * k..(c + 1) * k).filter(|&j| j != anchor);
        let other = (0..total).filter(|&j| j / k != c);
        let log_num = log_sum_exp(same.clone().map(|j| sim[[anchor, j]]));
        let log_den = log_sum_exp(other.clone().map(|j| sim[[anchor, j]]));
        value += (log_den - log_num) * scale;

        // ∂ℓ/∂s_{anchor,j}: softmax weights, negative over the numerator set.
        let coefs = other
            .map(|j| (j, (sim[[anchor, j]] - log_den).exp()))
            .chain(same.map(|j| (j, -(sim[[anchor, j]] - log_num).exp())));
        for (j, coef) in coefs {
            let c = coef * scale / tau_p;
            let pj = protos.row(j).to_owned();
            let pa = protos.row(anchor).to_owned();
            grad_p.row_mut(anchor).scaled_add(c, &pj);
            grad_p.row_mut(j).scaled_add(c, &pa);
        }
    }

    let mut terms = BTreeMap::new();
    terms.insert("proto_contrast", value);
    LossOutput {
        value,
        grad_z: Array2::zeros((batch_len, d)),
        grad_z_aug: None,
        grad_prototypes: grad_p,
        terms,
    }
    .finish(bank)
}

/// Combined objective `L_MLE + λ·L_proto-contra`. With `λ = 0` the contrastive
/// term is not evaluated at all.
pub fn palm_loss(
    z: ArrayView2<f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    table: &WeightTable,
    tau: f64,
    tau_p: f64,
    lambda: f64,
) -> Result<LossOutput> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfiguration(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let mut out = mle_loss(z, labels, bank, table, tau)?;
    if lambda == 0.0 {
        return Ok(out);
    }
    let pc = proto_contrast_loss(bank, tau_p, z.nrows())?;
    out.value += lambda * pc.value;
    out.grad_z.scaled_add(lambda, &pc.grad_z);
    out.grad_prototypes.scaled_add(lambda, &pc.grad_prototypes);
    out.terms.insert("proto_contrast", pc.value);
    Ok(out)
}

/// Class posterior `p(y = c | z)` from per-class mixture weights
/// (`weights` is `C × K`).
pub fn class_posterior(
    z: ArrayView1<f64>,
    bank: &PrototypeBank,
    weights: ArrayView2<f64>,
    tau: f64,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let (c_n, k) = (bank.classes(), bank.per_class());
    if weights.dim() != (c_n, k) {
        return Err(Error::InvalidInput(format!("weights must be {c_n} × {k}")));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let class_logits: Vec<f64> = (0..c_n)
        .map(|c| {
            log_sum_exp((0..k).map(|j| {
                let w = weights[[c, j]];
                if w > 0.0 {
                    bank.prototype(c, j).dot(&z) / tau + w.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }))
        })
        .collect();
    let total = log_sum_exp(class_logits.iter().cloned());
    if total == f64::NEG_INFINITY {
        return Err(Error::Numerical("all posterior weights are zero".into()));
    }
    Ok(class_logits.iter().map(|l| (l - total).exp()).collect())
}

/// `ℓ(z, w) = −log Σ_k w_k·softmax_k(P·z/τ)` for every row, plus its
/// gradients w.r.t. `z` and the prototypes (accumulated, scaled by `scale`).
fn swapped_term(
    z: ArrayView2<f64>,
    codes: ArrayView2<f64>,
    protos: ArrayView2<f64>,
    tau: f64,
    scale: f64,
    grad_z: &mut Array2<f64>,
    grad_p: &mut Array2<f64>,
) -> Result<f64> {
    let k = protos.nrows();
    let mut total = 0.0;
    let mut logits = vec![0.0; k];
    for (i, zi) in z.rows().into_iter().enumerate() {
        for (r, l) in logits.iter_mut().enumerate() {
            *l = protos.row(r).dot(&zi) / tau;
        }
        let log_den = log_sum_exp(logits.iter().cloned());
        let weighted: Vec<f64> = (0..k)
            .map(|r| {
                let w = codes[[i, r]];
                if w > 0.0 {
                    logits[r] + w.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let log_num = log_sum_exp(weighted.iter().cloned());
        if log_num == f64::NEG_INFINITY {
            return Err(Error::Numerical(format!("sample {i}: all assignment codes are zero")));
        }
        total += (log_den - log_num) * scale;
        for r in 0..k {
            let mut coef = (logits[r] - log_den).exp();
            if weighted[r] != f64::NEG_INFINITY {
                coef -= (weighted[r] - log_num).exp();
            }
            let c = coef * scale / tau;
            grad_z.row_mut(i).scaled_add(c, &protos.row(r));
            grad_p.row_mut(r).scaled_add(c, &zi);
        }
    }
    Ok(total)
}

/// Swapped-assignment loss over a single global prototype pool:
/// `(1/B)·Σ_i ½[ℓ(z_i, w̃_i) + ℓ(z̃_i, w_i)]` where `codes` (`w`) were computed
/// from `z` and `codes_aug` (`w̃`) from `z_aug`.
pub fn unsup_swapped_loss(
    z: ArrayView2<f64>,
    z_aug: ArrayView2<f64>,
    codes: ArrayView2<f64>,
    codes_aug: ArrayView2<f64>,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    if bank.classes() != 1 {
        return Err(Error::InvalidInput(
            "swapped loss needs a single global prototype pool".into(),
        ));
    }
    let (b, d) = z.dim();
    let k = bank.per_class();
    if b == 0 || z_aug.dim() != (b, d) || codes.dim() != (b, k) || codes_aug.dim() != (b, k) {
        return Err(Error::InvalidInput("views and codes are misaligned".into()));
    }
    if d != bank.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimension {d} != {}",
            bank.dim()
        )));
    }
    let protos = bank.rows();
    let mut grad_z = Array2::zeros((b, d));
    let mut grad_z_aug = Array2::zeros((b, d));
    let mut grad_p = Array2::zeros((k, d));
    let scale = 0.5 / b as f64;
    let value = swapped_term(z, codes_aug, protos, tau, scale, &mut grad_z, &mut grad_p)?
        + swapped_term(z_aug, codes, protos, tau, scale, &mut grad_z_aug, &mut grad_p)?;
    if grad_z_aug.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let mut terms = BTreeMap::new();
    terms.insert("swapped", value);
    LossOutput {
        value,
        grad_z,
        grad_z_aug: Some(grad_z_aug),
        grad_prototypes: grad_p,
        terms,
    }
    .finish(bank)
}
