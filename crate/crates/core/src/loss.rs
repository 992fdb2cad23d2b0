//! Normalized temperature-scaled cross-entropy (NT-Xent).
//!
//! For anchor row `i` with positive partner `p(i)`:
//!
//! ```text
//! l_i = -log( exp(sim(z_i, z_p(i)) / tau) / sum_{k != i} exp(sim(z_i, z_k) / tau) )
//! ```
//!
//! with `sim` the cosine similarity. The denominator runs over every other
//! row, positive included. The batch loss is the mean of `l_i` over all
//! `2N` rows.

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchEmbeddings {
    rows: Vec<Vec<f64>>,
    positive_index: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatchEmbeddings {
    /// Rows need not be unit-norm; similarities are cosines.
    pub fn new(rows: Vec<Vec<f64>>, positive_index: Vec<usize>, temperature: f64) -> Result<Self> {
        let n = rows.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidPairing(format!("need an even number of rows >= 4, got {n}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidPairing(format!("temperature must be positive, got {temperature}")));
        }
        if positive_index.len() != n {
            return Err(Error::InvalidPairing(format!(
                "{} positive indices for {n} rows",
                positive_index.len()
            )));
        }
        for (i, &p) in positive_index.iter().enumerate() {
            if p >= n || p == i || positive_index[p] != i {
                return Err(Error::InvalidPairing(format!(
                    "row {i} -> {p} is not a fixed-point-free involution"
                )));
            }
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidPairing("rows must share a positive dimension".into()));
        }
        if rows.iter().any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_EPS) {
            return Err(Error::InvalidPairing("zero-norm embedding row".into()));
        }
        Ok(Self {
            rows,
            positive_index,
            temperature,
        })
    }

    /// Rows `[a_0 .. a_{N-1}, b_0 .. b_{N-1}]` with `a_i` paired to `b_i`.
    pub fn paired(views_a: Vec<Vec<f64>>, views_b: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if views_a.len() != views_b.len() {
            return Err(Error::InvalidPairing(format!(
                "{} views against {} partners",
                views_a.len(),
                views_b.len()
            )));
        }
        let n = views_a.len();
        let positive_index = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
        let mut rows = views_a;
        rows.extend(views_b);
        Self::new(rows, positive_index, temperature)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn positive_index(&self) -> &[usize] {
        &self.positive_index
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtXent {
    pub loss: f64,
    /// `l_{i, p(i)}` for every anchor row `i`.
    pub per_anchor: Vec<f64>,
}

struct Normalized {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn normalize_rows(rows: &[Vec<f64>]) -> Normalized {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let units = rows
        .iter()
        .zip(&norms)
        .map(|(r, n)| r.iter().map(|v| v / n).collect())
        .collect();
    Normalized { units, norms }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled similarity logits and per-row softmax over `k != i`.
fn logits_and_softmax(batch: &ContrastiveBatchEmbeddings, units: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = units.len();
    let tau = batch.temperature;
    let mut losses = Vec::with_capacity(n);
    let mut softmax = Vec::with_capacity(n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|k| dot(&units[i], &units[k]) / tau).collect();
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; n];
        let mut total = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            probs[k] = (logits[k] - max).exp();
            total += probs[k];
        }
        probs.iter_mut().for_each(|p| *p /= total);
        losses.push((max - logits[batch.positive_index[i]]) + total.ln());
        softmax.push(probs);
    }
    (losses, softmax)
}

pub fn nt_xent_loss(batch: &ContrastiveBatchEmbeddings) -> NtXent {
    let normalized = normalize_rows(&batch.rows);
    let (per_anchor, _) = logits_and_softmax(batch, &normalized.units);
    let loss = per_anchor.iter().sum::<f64>() / per_anchor.len() as f64;
    NtXent { loss, per_anchor }
}

/// Loss together with its gradient with respect to each (unnormalized) row.
pub fn nt_xent_loss_with_grad(batch: &ContrastiveBatchEmbeddings) -> (NtXent, Vec<Vec<f64>>) {
    let normalized = normalize_rows(&batch.rows);
    let units = &normalized.units;
    let (per_anchor, softmax) = logits_and_softmax(batch, units);
    let n = units.len();
    let d = units[0].len();
    let scale = 1.0 / (n as f64 * batch.temperature);

    // dL/dS_ik = (softmax_ik - [k == p(i)]) / n for k != i, with
    // S_ik = u_i . u_k / tau appearing in both l_i and l_k.
    let mut grad_units = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in 0..n {
            if k == i {
                continue;
            }
            let mut coeff = softmax[i][k] + softmax[k][i];
            if k == batch.positive_index[i] {
                coeff -= 2.0;
            }
            let c = coeff * scale;
            for (g, u) in grad_units[i].iter_mut().zip(&units[k]) {
                *g += c * u;
            }
        }
    }
    let grads = grad_units
        .iter()
        .zip(units)
        .zip(&normalized.norms)
        .map(|((gu, u), norm)| {
            let along = dot(gu, u);
            gu.iter().zip(u).map(|(g, ui)| (g - ui * along) / norm).collect()
        })
        .collect();
    let loss = per_anchor.iter().sum::<f64>() / n as f64;
    (NtXent { loss, per_anchor }, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Unstabilized loss straight from the definition.
    fn oracle(rows: &[Vec<f64>], pos: &[usize], tau: f64) -> Vec<f64> {
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        (0..rows.len())
            .map(|i| {
                let num = (cos(&rows[i], &rows[pos[i]]) / tau).exp();
                let den: f64 = (0..rows.len())
                    .filter(|&k| k != i)
                    .map(|k| (cos(&rows[i], &rows[k]) / tau).exp())
                    .sum();
                -(num / den).ln()
            })
            .collect()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn paired_index(n: usize) -> Vec<usize> {
        (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
    }

    #[test]
    fn identical_embeddings_give_log_three() {
        let rows = vec![vec![0.6, 0.8]; 4];
        let batch = ContrastiveBatchEmbeddings::new(rows, vec![1, 0, 3, 2], 0.5).unwrap();
        let out = nt_xent_loss(&batch);
        for l in &out.per_anchor {
            assert_eq!(*l, 3f64.ln());
        }
        assert!((out.loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn hand_chosen_batch_matches_oracle() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.0, 0.2],
            vec![-0.3, 0.8, 0.5],
        ];
        let pos = vec![1, 0, 3, 2];
        let batch = ContrastiveBatchEmbeddings::new(rows.clone(), pos.clone(), 0.5).unwrap();
        let got = nt_xent_loss(&batch);
        for (a, b) in got.per_anchor.iter().zip(oracle(&rows, &pos, 0.5)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_rows_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = random_rows(&mut rng, 6, 5);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 7.0).collect()).collect();
        let a = nt_xent_loss(&ContrastiveBatchEmbeddings::new(rows, paired_index(3), 0.5).unwrap());
        let b = nt_xent_loss(&ContrastiveBatchEmbeddings::new(scaled, paired_index(3), 0.5).unwrap());
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn invalid_pairings_rejected() {
        let rows = vec![vec![1.0, 0.0]; 4];
        for pos in [vec![0, 1, 2, 3], vec![1, 2, 3, 0], vec![1, 0, 3], vec![1, 0, 3, 9]] {
            assert!(matches!(
                ContrastiveBatchEmbeddings::new(rows.clone(), pos, 0.5),
                Err(Error::InvalidPairing(_))
            ));
        }
        assert!(ContrastiveBatchEmbeddings::new(rows.clone(), vec![1, 0, 3, 2], 0.0).is_err());
        assert!(ContrastiveBatchEmbeddings::new(rows[..2].to_vec(), vec![1, 0], 0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let rows = random_rows(&mut rng, 6, 8);
            let batch = ContrastiveBatchEmbeddings::new(rows.clone(), paired_index(3), 0.5).unwrap();
            let (_, grads) = nt_xent_loss_with_grad(&batch);
            let eps = 1e-6;
            for i in 0..6 {
                for j in 0..8 {
                    let (mut plus, mut minus) = (rows.clone(), rows.clone());
                    plus[i][j] += eps;
                    minus[i][j] -= eps;
                    let lp = nt_xent_loss(&ContrastiveBatchEmbeddings::new(plus, paired_index(3), 0.5).unwrap()).loss;
                    let lm = nt_xent_loss(&ContrastiveBatchEmbeddings::new(minus, paired_index(3), 0.5).unwrap()).loss;
                    let fd = (lp - lm) / (2.0 * eps);
                    let g = grads[i][j];
                    assert!((fd - g).abs() <= 1e-3 * fd.abs().max(1e-4), "{g} vs {fd}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_on_random_batches(seed in 0u64..100_000, n in 2usize..=8, d in 1usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_rows(&mut rng, 2 * n, d);
            let pos = paired_index(n);
            if let Ok(batch) = ContrastiveBatchEmbeddings::new(rows.clone(), pos.clone(), 0.5) {
                let got = nt_xent_loss(&batch);
                for (a, b) in got.per_anchor.iter().zip(oracle(&rows, &pos, 0.5)) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn permutation_invariant(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let rows = random_rows(&mut rng, 2 * n, 6);
            let pos = paired_index(n);
            let mut perm: Vec<usize> = (0..2 * n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            // Row perm[i] of the new batch is old row i.
            let mut new_rows = vec![Vec::new(); 2 * n];
            let mut new_pos = vec![0; 2 * n];
            for i in 0..2 * n {
                new_rows[perm[i]] = rows[i].clone();
                new_pos[perm[i]] = perm[pos[i]];
            }
            let a = nt_xent_loss(&ContrastiveBatchEmbeddings::new(rows, pos, 0.5).unwrap());
            let b = nt_xent_loss(&ContrastiveBatchEmbeddings::new(new_rows, new_pos, 0.5).unwrap());
            prop_assert!((a.loss - b.loss).abs() < 1e-12);
        }

        #[test]
        fn closer_positive_lowers_loss(t0 in 0.0f64..1.4, dt in 0.01f64..0.5) {
            // Rotate the partner of row 0 towards it in a plane orthogonal to
            // every other row, so only sim(z_0, z_1) changes.
            let build = |theta: f64| {
                vec![
                    vec![1.0, 0.0, 0.0, 0.0, 0.0],
                    vec![theta.cos(), theta.sin(), 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 1.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.6, 0.8, 0.0],
                ]
            };
            let far = build(t0 + dt);
            let near = build(t0);
            // Rows 2 and 3 see rows 0 and 1 only through zero cosines.
            let lf = nt_xent_loss(&ContrastiveBatchEmbeddings::new(far, vec![1, 0, 3, 2], 0.5).unwrap());
            let ln = nt_xent_loss(&ContrastiveBatchEmbeddings::new(near, vec![1, 0, 3, 2], 0.5).unwrap());
            prop_assert!(ln.per_anchor[0] < lf.per_anchor[0]);
            prop_assert!(ln.loss < lf.loss);
        }
    }
}
