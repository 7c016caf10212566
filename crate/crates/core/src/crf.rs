//! Linear-chain CRF over BMES labels.
//!
//! A sequence scores `Σ_i s[i, y_i] + Σ_{i≥1} trans[y_{i-1}, y_i]`; there are
//! no start or stop transitions. Everything runs in log space at f64.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::corpus::{Label, LabelSeq};
use crate::error::{Error, Result};

pub const NUM_LABELS: usize = Label::COUNT;

/// `s(X, i) = W_sᵀ (h_i ⊕ e_i) + b_s`
pub fn emissions(h: &Array2<f64>, e: &Array2<f64>, w_s: &Array2<f64>, b_s: &Array1<f64>) -> Result<Array2<f64>> {
    if h.nrows() != e.nrows() {
        return Err(Error::Shape(format!(
            "{} graph rows vs {} encoder rows",
            h.nrows(),
            e.nrows()
        )));
    }
    if w_s.nrows() != h.ncols() + e.ncols() || w_s.ncols() != b_s.len() {
        return Err(Error::Shape(format!(
            "emission projection {:?} does not fit width {}",
            w_s.dim(),
            h.ncols() + e.ncols()
        )));
    }
    let a = ndarray::concatenate(Axis(1), &[h.view(), e.view()]).expect("row counts checked");
    Ok(a.dot(w_s) + b_s)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Forward log-potentials: `alpha[i, y]` is the log-sum over prefixes ending in `y`.
fn forward_table(s: &Array2<f64>, trans: &Array2<f64>) -> Array2<f64> {
    let t = s.nrows();
    let mut alpha = Array2::zeros((t, NUM_LABELS));
    alpha.row_mut(0).assign(&s.row(0));
    for i in 1..t {
        for y in 0..NUM_LABELS {
            let prev = alpha.row(i - 1);
            alpha[[i, y]] = s[[i, y]] + log_sum_exp((0..NUM_LABELS).map(|p| prev[p] + trans[[p, y]]));
        }
    }
    alpha
}

fn backward_table(s: &Array2<f64>, trans: &Array2<f64>) -> Array2<f64> {
    let t = s.nrows();
    let mut beta = Array2::zeros((t, NUM_LABELS));
    for i in (0..t - 1).rev() {
        for y in 0..NUM_LABELS {
            beta[[i, y]] = log_sum_exp((0..NUM_LABELS).map(|n| trans[[y, n]] + s[[i + 1, n]] + beta[[i + 1, n]]));
        }
    }
    beta
}

fn check(s: &Array2<f64>, trans: &Array2<f64>) -> Result<()> {
    if s.nrows() == 0 {
        return Err(Error::InvalidInput("empty emission matrix".into()));
    }
    if s.ncols() != NUM_LABELS || trans.dim() != (NUM_LABELS, NUM_LABELS) {
        return Err(Error::Shape(format!("emissions {:?}, transitions {:?}", s.dim(), trans.dim())));
    }
    Ok(())
}

pub fn log_partition(s: &Array2<f64>, trans: &Array2<f64>) -> Result<f64> {
    check(s, trans)?;
    let alpha = forward_table(s, trans);
    Ok(log_sum_exp(alpha.row(s.nrows() - 1).iter().copied()))
}

pub fn sequence_score(s: &Array2<f64>, trans: &Array2<f64>, labels: &[Label]) -> f64 {
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        total += s[[i, l.index()]];
        if i > 0 {
            total += trans[[labels[i - 1].index(), l.index()]];
        }
    }
    total
}

pub fn neg_log_likelihood(s: &Array2<f64>, trans: &Array2<f64>, gold: &LabelSeq) -> Result<f64> {
    check(s, trans)?;
    if gold.len() != s.nrows() {
        return Err(Error::Shape(format!("{} labels for {} positions", gold.len(), s.nrows())));
    }
    Ok(log_partition(s, trans)? - sequence_score(s, trans, gold.labels()))
}

/// NLL with its gradients with respect to the emissions and transitions.
pub struct NllGrad {
    pub nll: f64,
    pub d_emissions: Array2<f64>,
    pub d_transitions: Array2<f64>,
}

pub fn nll_with_grad(s: &Array2<f64>, trans: &Array2<f64>, gold: &LabelSeq) -> Result<NllGrad> {
    let nll = neg_log_likelihood(s, trans, gold)?;
    let t = s.nrows();
    let alpha = forward_table(s, trans);
    let beta = backward_table(s, trans);
    let log_z = log_sum_exp(alpha.row(t - 1).iter().copied());

    let mut d_emissions = Array2::zeros((t, NUM_LABELS));
    for i in 0..t {
        for y in 0..NUM_LABELS {
            d_emissions[[i, y]] = (alpha[[i, y]] + beta[[i, y]] - log_z).exp();
        }
    }
    let mut d_transitions = Array2::zeros((NUM_LABELS, NUM_LABELS));
    for i in 1..t {
        for p in 0..NUM_LABELS {
            for y in 0..NUM_LABELS {
                d_transitions[[p, y]] +=
                    (alpha[[i - 1, p]] + trans[[p, y]] + s[[i, y]] + beta[[i, y]] - log_z).exp();
            }
        }
    }
    let labels = gold.labels();
    for (i, l) in labels.iter().enumerate() {
        d_emissions[[i, l.index()]] -= 1.0;
        if i > 0 {
            d_transitions[[labels[i - 1].index(), l.index()]] -= 1.0;
        }
    }
    Ok(NllGrad {
        nll,
        d_emissions,
        d_transitions,
    })
}

/// Per-position label marginals `P(y_i = y | X)`.
pub fn marginals(s: &Array2<f64>, trans: &Array2<f64>) -> Result<Array2<f64>> {
    check(s, trans)?;
    let alpha = forward_table(s, trans);
    let beta = backward_table(s, trans);
    let log_z = log_sum_exp(alpha.row(s.nrows() - 1).iter().copied());
    Ok((&alpha + &beta).mapv(|v| (v - log_z).exp()))
}

/// Transition matrix with illegal BMES transitions set to `-inf`.
pub fn legal_transitions(trans: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((NUM_LABELS, NUM_LABELS), |(p, y)| {
        if Label::from_index(p).can_precede(Label::from_index(y)) {
            trans[[p, y]]
        } else {
            f64::NEG_INFINITY
        }
    })
}

fn argmax(row: ArrayView1<f64>) -> usize {
    // strict comparison keeps the smallest index on ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring label sequence and its score. Ties resolve to the smallest
/// label index. With `constrain_legal`, the result always satisfies the BMES
/// transition closure, including a legal first and last label.
pub fn viterbi(s: &Array2<f64>, trans: &Array2<f64>, constrain_legal: bool) -> Result<(LabelSeq, f64)> {
    check(s, trans)?;
    let t = s.nrows();
    let mut s = s.clone();
    let trans_eff = if constrain_legal {
        for y in 0..NUM_LABELS {
            let l = Label::from_index(y);
            if !l.can_start() {
                s[[0, y]] = f64::NEG_INFINITY;
            }
            if !l.can_end() {
                s[[t - 1, y]] = f64::NEG_INFINITY;
            }
        }
        legal_transitions(trans)
    } else {
        trans.clone()
    };
    let mut delta = Array2::zeros((t, NUM_LABELS));
    let mut back = Array2::<usize>::zeros((t, NUM_LABELS));
    delta.row_mut(0).assign(&s.row(0));
    for i in 1..t {
        for y in 0..NUM_LABELS {
            let cand = Array1::from_shape_fn(NUM_LABELS, |p| delta[[i - 1, p]] + trans_eff[[p, y]]);
            let p = argmax(cand.view());
            back[[i, y]] = p;
            delta[[i, y]] = cand[p] + s[[i, y]];
        }
    }
    let mut y = argmax(delta.row(t - 1));
    let best = delta[[t - 1, y]];
    let mut out = vec![Label::from_index(y); t];
    for i in (1..t).rev() {
        y = back[[i, y]];
        out[i - 1] = Label::from_index(y);
    }
    Ok((LabelSeq(out), best))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every label sequence of length `t`.
    pub(crate) fn all_sequences(t: usize) -> Vec<Vec<Label>> {
        (0..NUM_LABELS.pow(t as u32))
            .map(|mut k| {
                let mut v = Vec::with_capacity(t);
                for _ in 0..t {
                    v.push(Label::from_index(k % NUM_LABELS));
                    k /= NUM_LABELS;
                }
                v
            })
            .collect()
    }

    fn rand_instance(rng: &mut ChaCha8Rng, t: usize) -> (Array2<f64>, Array2<f64>) {
        (
            Array2::from_shape_fn((t, 4), |_| rng.random_range(-3.0..3.0)),
            Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0)),
        )
    }

    #[test]
    fn uniform_partitions() {
        let z = log_partition(&Array2::zeros((1, 4)), &Array2::zeros((4, 4))).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-12);
        assert!((z - 1.386294).abs() < 1e-6);
        let z = log_partition(&Array2::zeros((2, 4)), &Array2::zeros((4, 4))).unwrap();
        assert!((z - 16f64.ln()).abs() < 1e-12);
        let gold = LabelSeq::parse("BES").unwrap();
        let nll = neg_log_likelihood(&Array2::zeros((3, 4)), &Array2::zeros((4, 4)), &gold).unwrap();
        assert!((nll - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_gold_has_zero_nll() {
        let gold = LabelSeq::parse("BE").unwrap();
        let mut s = Array2::from_elem((2, 4), -1e4);
        s[[0, 0]] = 0.0;
        s[[1, 2]] = 0.0;
        let nll = neg_log_likelihood(&s, &Array2::zeros((4, 4)), &gold).unwrap();
        assert!(nll.abs() < 1e-9);
    }

    #[test]
    fn emission_examples() {
        let h = array![[1.0], [2.0]];
        let e = array![[3.0], [-1.0]];
        let b = array![0.5, -0.5, 1.0, 2.0];
        let s = emissions(&h, &e, &Array2::zeros((2, 4)), &b).unwrap();
        assert_eq!(s, array![[0.5, -0.5, 1.0, 2.0], [0.5, -0.5, 1.0, 2.0]]);
        let w = array![[1.0, 0.0, 2.0, -1.0], [0.0, 1.0, 1.0, 3.0]];
        let s = emissions(&h, &e, &w, &b).unwrap();
        // row 0: a = [1, 3] => [1+0.5, 3-0.5, 2+3+1, -1+9+2]
        assert_eq!(s.row(0), array![1.5, 2.5, 6.0, 10.0]);
        assert_eq!(s.dim(), (2, 4));
        assert!(emissions(&h, &array![[1.0]], &w, &b).is_err());
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=5 {
            for _ in 0..20 {
                let (s, tr) = rand_instance(&mut rng, t);
                let seqs = all_sequences(t);
                let scores: Vec<f64> = seqs.iter().map(|y| sequence_score(&s, &tr, y)).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                assert!((log_partition(&s, &tr).unwrap() - z).abs() < 1e-9);
                let total: f64 = scores.iter().map(|v| (v - z).exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);

                let (best, score) = viterbi(&s, &tr, false).unwrap();
                assert!((score - m).abs() < 1e-9);
                let arg = scores.iter().position(|&v| v == m).unwrap();
                assert_eq!(best.labels(), seqs[arg].as_slice());

                let gold = LabelSeq(seqs[rng.random_range(0..seqs.len())].clone());
                let nll = neg_log_likelihood(&s, &tr, &gold).unwrap();
                assert!(nll >= -1e-9);
                assert!((nll - (z - sequence_score(&s, &tr, gold.labels()))).abs() < 1e-9);
                assert!(score >= sequence_score(&s, &tr, gold.labels()));
            }
        }
    }

    #[test]
    fn constrained_viterbi_matches_legal_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=5 {
            for _ in 0..20 {
                let (s, tr) = rand_instance(&mut rng, t);
                let (best, score) = viterbi(&s, &tr, true).unwrap();
                assert!(best.is_legal());
                let m = all_sequences(t)
                    .into_iter()
                    .filter(|y| LabelSeq(y.clone()).is_legal())
                    .map(|y| sequence_score(&s, &tr, &y))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((score - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dominant_emissions_decode_directly() {
        let s = array![[5.0, 0.0, 0.0, 0.0], [0.0, 0.0, 5.0, 0.0]];
        let (y, _) = viterbi(&s, &Array2::zeros((4, 4)), true).unwrap();
        assert_eq!(y.to_string(), "BE");
    }

    #[test]
    fn ties_pick_smallest_label() {
        let (y, _) = viterbi(&Array2::zeros((3, 4)), &Array2::zeros((4, 4)), false).unwrap();
        assert_eq!(y.to_string(), "BBB");
        // last label E (< S); its best predecessor B (< M); B must follow S
        let (y, _) = viterbi(&Array2::zeros((3, 4)), &Array2::zeros((4, 4)), true).unwrap();
        assert_eq!(y.to_string(), "SBE");
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, tr) = rand_instance(&mut rng, 5);
        let mut shifted = s.clone();
        shifted.row_mut(2).mapv_inplace(|v| v + 7.5);
        let gold = LabelSeq::parse("BMESS").unwrap();
        let a = neg_log_likelihood(&s, &tr, &gold).unwrap();
        let b = neg_log_likelihood(&shifted, &tr, &gold).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert_eq!(viterbi(&s, &tr, true).unwrap().0, viterbi(&shifted, &tr, true).unwrap().0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-5;
        for t in 1..=6 {
            let (s, tr) = rand_instance(&mut rng, t);
            let gold = LabelSeq((0..t).map(|_| Label::from_index(rng.random_range(0..4))).collect());
            let g = nll_with_grad(&s, &tr, &gold).unwrap();
            let f = |s: &Array2<f64>, tr: &Array2<f64>| neg_log_likelihood(s, tr, &gold).unwrap();
            for idx in [(0, 0), (t - 1, 3), (t / 2, 1)] {
                let (mut p, mut m) = (s.clone(), s.clone());
                p[idx] += eps;
                m[idx] -= eps;
                let num = (f(&p, &tr) - f(&m, &tr)) / (2.0 * eps);
                assert!((num - g.d_emissions[idx]).abs() < 1e-7);
            }
            for idx in [(0, 0), (1, 2), (3, 1)] {
                let (mut p, mut m) = (tr.clone(), tr.clone());
                p[idx] += eps;
                m[idx] -= eps;
                let num = (f(&s, &p) - f(&s, &m)) / (2.0 * eps);
                assert!((num - g.d_transitions[idx]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn marginals_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, tr) = rand_instance(&mut rng, 6);
        let m = marginals(&s, &tr).unwrap();
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
