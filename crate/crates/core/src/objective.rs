//! Contrastive objectives: InfoNCE, the dual-view loss, and the dual-view
//! loss whose key-view denominator is restricted to hard negatives drawn
//! from the memory bank.
//!
//! Every logit is a dot product of unit vectors divided by the temperature,
//! with the positive at index 0. Gradients are taken with respect to the
//! query embeddings only; keys and bank rows come from the momentum encoder
//! and are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::{check_unit, hard_negative_count, MemoryBank, SelectionBasis};
use crate::numeric::{dot, log_sum_exp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature `τ`.
    pub temperature: f64,
    /// Weight on the key-view term; the query-view term gets `1 - view_weight`.
    pub view_weight: f64,
    /// Fraction of the bank kept as hard negatives for the key-view term.
    pub hard_fraction: f64,
    pub basis: SelectionBasis,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.2, view_weight: 0.1, hard_fraction: 0.2, basis: SelectionBasis::Query }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::ConfigInvalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.view_weight) {
            return Err(Error::ConfigInvalid(format!("view_weight must lie in [0, 1], got {}", self.view_weight)));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::ConfigInvalid(format!("hard_fraction must lie in (0, 1], got {}", self.hard_fraction)));
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to one query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_q: Vec<f64>,
}

/// Per-sample dual-view loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub query_term: f64,
    pub key_term: f64,
    pub grad_q: Vec<f64>,
}

/// Batch-averaged loss. `grad_q` row `i` is the gradient of `total` with
/// respect to query row `i`; no gradient exists for keys or bank rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub query_term: f64,
    pub key_term: f64,
    pub grad_q: Matrix,
}

/// `-log softmax(logits)[0]` and `softmax(logits)`.
fn cross_entropy_at_zero(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    let lse = log_sum_exp(logits)?;
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    Ok((lse - logits[0], probs))
}

/// InfoNCE of `q` against positive `k_pos` and the rows of `negatives`.
pub fn info_nce(q: &[f64], k_pos: &[f64], negatives: &Matrix, temperature: f64) -> Result<InfoNce> {
    check_inputs(q, k_pos, negatives, temperature)?;
    query_view(q, k_pos, negatives.iter_rows(), temperature)
}

fn check_inputs(q: &[f64], k: &[f64], negatives: &Matrix, temperature: f64) -> Result<()> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::ConfigInvalid(format!("temperature must be > 0, got {temperature}")));
    }
    if negatives.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let d = q.len();
    for len in [k.len(), negatives.cols()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    check_unit(0, q)?;
    check_unit(0, k)?;
    for (i, r) in negatives.iter_rows().enumerate() {
        check_unit(i, r)?;
    }
    Ok(())
}

fn query_view<'a>(
    q: &[f64],
    k_pos: &[f64],
    negatives: impl Iterator<Item = &'a [f64]> + Clone,
    temperature: f64,
) -> Result<InfoNce> {
    let logits: Vec<f64> =
        std::iter::once(dot(q, k_pos)).chain(negatives.clone().map(|n| dot(q, n))).map(|s| s / temperature).collect();
    let (loss, probs) = cross_entropy_at_zero(&logits)?;
    let mut grad_q: Vec<f64> = k_pos.iter().map(|v| (probs[0] - 1.0) * v / temperature).collect();
    for (p, n) in probs[1..].iter().zip(negatives) {
        let w = p / temperature;
        for (g, v) in grad_q.iter_mut().zip(n) {
            *g += w * v;
        }
    }
    Ok(InfoNce { loss, grad_q })
}

/// Key-view term: logits `{k·q} ∪ {k·n}`; only the first depends on `q`.
fn key_view<'a>(q: &[f64], k: &[f64], negatives: impl Iterator<Item = &'a [f64]>, temperature: f64) -> Result<InfoNce> {
    let logits: Vec<f64> =
        std::iter::once(dot(k, q)).chain(negatives.map(|n| dot(k, n))).map(|s| s / temperature).collect();
    let (loss, probs) = cross_entropy_at_zero(&logits)?;
    let grad_q = k.iter().map(|v| (probs[0] - 1.0) * v / temperature).collect();
    Ok(InfoNce { loss, grad_q })
}

fn combine(query: InfoNce, key: InfoNce, view_weight: f64) -> SampleLoss {
    let wq = 1.0 - view_weight;
    let total = wq * query.loss + view_weight * key.loss;
    let grad_q = query.grad_q.iter().zip(&key.grad_q).map(|(a, b)| wq * a + view_weight * b).collect();
    SampleLoss { total, query_term: query.loss, key_term: key.loss, grad_q }
}

/// Dual-view loss for one `(q, k)` pair; both terms use every row of `negatives`.
pub fn dual_view_sample(q: &[f64], k: &[f64], negatives: &Matrix, cfg: &LossConfig) -> Result<SampleLoss> {
    cfg.validate()?;
    check_inputs(q, k, negatives, cfg.temperature)?;
    let qv = query_view(q, k, negatives.iter_rows(), cfg.temperature)?;
    let kv = key_view(q, k, negatives.iter_rows(), cfg.temperature)?;
    Ok(combine(qv, kv, cfg.view_weight))
}

/// Filtered dual-view loss for one `(q, k)` pair against the bank.
///
/// The query-view term uses every active bank row; the key-view term keeps
/// only the `⌈hard_fraction · filled⌉` rows farthest from the anchor chosen
/// by `cfg.basis`.
pub fn filtered_sample(q: &[f64], k: &[f64], bank: &MemoryBank, cfg: &LossConfig) -> Result<SampleLoss> {
    cfg.validate()?;
    let d = bank.dim();
    for len in [q.len(), k.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    check_unit(0, q)?;
    check_unit(0, k)?;
    let f_n = hard_negative_count(cfg.hard_fraction, bank.filled());
    let anchor = match cfg.basis {
        SelectionBasis::Query => q,
        SelectionBasis::Key => k,
    };
    let selection = bank.select_hard_negatives(anchor, f_n, cfg.basis)?;
    let qv = query_view(q, k, bank.active_rows(), cfg.temperature)?;
    let kv = key_view(q, k, selection.indices.iter().map(|&i| bank.row(i)), cfg.temperature)?;
    Ok(combine(qv, kv, cfg.view_weight))
}

fn batch_mean(
    q: &Matrix,
    k: &Matrix,
    mut per_sample: impl FnMut(&[f64], &[f64]) -> Result<SampleLoss>,
) -> Result<LossOutput> {
    if q.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if q.rows() != k.rows() || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query batch {}x{} vs key batch {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    let b = q.rows() as f64;
    let mut out = LossOutput { total: 0.0, query_term: 0.0, key_term: 0.0, grad_q: Matrix::zeros(q.rows(), q.cols()) };
    for i in 0..q.rows() {
        let s = per_sample(q.row(i), k.row(i))?;
        out.total += s.total;
        out.query_term += s.query_term;
        out.key_term += s.key_term;
        for (g, v) in out.grad_q.row_mut(i).iter_mut().zip(&s.grad_q) {
            *g = v / b;
        }
    }
    out.total /= b;
    out.query_term /= b;
    out.key_term /= b;
    Ok(out)
}

/// Batch-mean dual-view loss with an explicit negative set.
pub fn dual_view_loss(q: &Matrix, k: &Matrix, negatives: &Matrix, cfg: &LossConfig) -> Result<LossOutput> {
    batch_mean(q, k, |qi, ki| dual_view_sample(qi, ki, negatives, cfg))
}

/// Batch-mean filtered dual-view loss against the memory bank.
pub fn filtered_dual_view_loss(q: &Matrix, k: &Matrix, bank: &MemoryBank, cfg: &LossConfig) -> Result<LossOutput> {
    batch_mean(q, k, |qi, ki| filtered_sample(qi, ki, bank, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;
    use crate::rng::SeededRng;
    use rand_distr::{Distribution, StandardNormal};

    const LN_1P_EM1: f64 = 0.313_261_687_518_222_8;
    const LN_1P_EM2: f64 = 0.126_928_011_042_972_5;
    const LN_1P_EM1_EM2: f64 = 0.407_605_964_444_380_3;
    const TOY_TOTAL: f64 = 0.267_266_987_743_676_4;

    fn m(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random_unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        l2_normalize(&v).unwrap()
    }

    fn cfg(temperature: f64, view_weight: f64, hard_fraction: f64) -> LossConfig {
        LossConfig { temperature, view_weight, hard_fraction, basis: SelectionBasis::Query }
    }

    #[test]
    fn uniform_logits_give_ln_n_plus_one() {
        let q = [1.0, 0.0];
        let negs = m(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        for t in [0.05, 0.2, 1.0, 7.0] {
            let r = info_nce(&q, &[1.0, 0.0], &negs, t).unwrap();
            assert!((r.loss - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_values() {
        let negs = m(&[[0.0, 1.0]]);
        let r = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, 1.0).unwrap();
        assert!((r.loss - LN_1P_EM1).abs() < 1e-12);
        let r = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.5).unwrap();
        assert!((r.loss - LN_1P_EM2).abs() < 1e-12);

        let s = dual_view_sample(&[1.0, 0.0], &[1.0, 0.0], &negs, &cfg(1.0, 0.5, 1.0)).unwrap();
        assert!((s.query_term - LN_1P_EM1).abs() < 1e-12);
        assert!((s.key_term - LN_1P_EM1).abs() < 1e-12);
        assert!((s.total - LN_1P_EM1).abs() < 1e-12);
    }

    #[test]
    fn filtered_toy_configuration() {
        let bank = MemoryBank::from_rows(m(&[[0.0, 1.0], [-1.0, 0.0]])).unwrap();
        let s = filtered_sample(&[1.0, 0.0], &[1.0, 0.0], &bank, &cfg(1.0, 0.5, 0.5)).unwrap();
        assert!((s.query_term - LN_1P_EM1_EM2).abs() < 1e-12);
        assert!((s.key_term - LN_1P_EM2).abs() < 1e-12);
        assert!((s.total - TOY_TOTAL).abs() < 1e-12);
    }

    #[test]
    fn view_weight_reductions() {
        let mut rng = SeededRng::new(4);
        let q = random_unit(&mut rng, 8);
        let k = random_unit(&mut rng, 8);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| random_unit(&mut rng, 8)).collect();
        let negs = Matrix::from_rows(&negs).unwrap();
        let plain = info_nce(&q, &k, &negs, 0.3).unwrap();
        let s0 = dual_view_sample(&q, &k, &negs, &cfg(0.3, 0.0, 1.0)).unwrap();
        assert!((s0.total - plain.loss).abs() < 1e-15);
        assert_eq!(s0.grad_q, plain.grad_q);
        let s1 = dual_view_sample(&q, &k, &negs, &cfg(0.3, 1.0, 1.0)).unwrap();
        assert_eq!(s1.total, s1.key_term);
    }

    #[test]
    fn rejects_bad_inputs() {
        let negs = m(&[[0.0, 1.0]]);
        assert!(matches!(info_nce(&[2.0, 0.0], &[1.0, 0.0], &negs, 1.0), Err(Error::NotNormalized { .. })));
        assert!(matches!(info_nce(&[1.0, 0.0, 0.0], &[1.0, 0.0], &negs, 1.0), Err(Error::DimensionMismatch { .. })));
        assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &Matrix::zeros(0, 2), 1.0).is_err());
        assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.0).is_err());
        assert!(cfg(1.0, 1.5, 0.2).validate().is_err());
        assert!(cfg(1.0, 0.1, 0.0).validate().is_err());
    }

    #[test]
    fn stabilized_matches_naive_at_low_temperature() {
        let mut rng = SeededRng::new(8);
        let t = 0.05;
        for _ in 0..50 {
            let q = random_unit(&mut rng, 16);
            let k = random_unit(&mut rng, 16);
            let negs: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 16)).collect();
            let negs_m = Matrix::from_rows(&negs).unwrap();
            let stable = info_nce(&q, &k, &negs_m, t).unwrap().loss;
            let num = (dot(&q, &k) / t).exp();
            let den: f64 = num + negs.iter().map(|n| (dot(&q, n) / t).exp()).sum::<f64>();
            let naive = -(num / den).ln();
            assert!(stable.is_finite() && naive.is_finite());
            assert!((stable - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn query_term_decreases_with_positive_logit() {
        // q = [1, 0]; positive at angle θ, negatives fixed
        let negs = m(&[[0.0, 1.0], [-0.6, 0.8]]);
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let theta = 1.5 - step as f64 * 0.075;
            let k = [theta.cos(), theta.sin()];
            let loss = info_nce(&[1.0, 0.0], &k, &negs, 0.2).unwrap().loss;
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn random_high_dim_loss_near_uniform() {
        let mut rng = SeededRng::new(21);
        let d = 128;
        let n = 64;
        for _ in 0..20 {
            let q = random_unit(&mut rng, d);
            let k = random_unit(&mut rng, d);
            let negs: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
            let l = info_nce(&q, &k, &Matrix::from_rows(&negs).unwrap(), 1.0).unwrap().loss;
            assert!(l >= 0.0);
            assert!((l - ((n + 1) as f64).ln()).abs() < 0.5);
        }
    }

    #[test]
    fn batch_mean_and_grad_scaling() {
        let bank = MemoryBank::from_rows(m(&[[0.0, 1.0], [-1.0, 0.0]])).unwrap();
        let q = m(&[[1.0, 0.0], [1.0, 0.0]]);
        let out = filtered_dual_view_loss(&q, &q, &bank, &cfg(1.0, 0.5, 0.5)).unwrap();
        assert!((out.total - TOY_TOTAL).abs() < 1e-12);
        let single = filtered_sample(&[1.0, 0.0], &[1.0, 0.0], &bank, &cfg(1.0, 0.5, 0.5)).unwrap();
        for (g, s) in out.grad_q.row(1).iter().zip(&single.grad_q) {
            assert!((g - s / 2.0).abs() < 1e-15);
        }
        assert!((out.total - ((1.0 - 0.5) * out.query_term + 0.5 * out.key_term)).abs() < 1e-12);
    }
}
