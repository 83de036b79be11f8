//! Training objectives: cosine distance, the perceptual triplet loss, the
//! symmetric InfoNCE loss, and 2AFC agreement accuracy.
//!
//! Each loss exists once, on the tape, so training gradients and reported
//! values come from the same code; thin value-level wrappers run the tape
//! with constant leaves.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Triplet margin used throughout the pipeline.
pub const DEFAULT_MARGIN: f64 = 0.05;
/// Added to L2 norms before division so zero vectors stay finite.
pub const NORM_EPS: f64 = 1e-12;

fn cos_dist_slices<S: Scalar>(u: &[S], v: &[S]) -> S {
    let e = S::from_f64(NORM_EPS);
    let mut dot = S::ZERO;
    let mut uu = S::ZERO;
    let mut vv = S::ZERO;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    S::ONE - dot / ((uu.sqrt() + e) * (vv.sqrt() + e))
}

/// Cosine distance 1 − u·v / (‖u‖‖v‖) between two vectors, in [0, 2].
pub fn cosine_distance<S: Scalar>(u: &Tensor<S>, v: &Tensor<S>) -> Result<S> {
    if u.rank() != 1 || u.shape() != v.shape() {
        return Err(Error::dim("cosine_distance", u.shape(), v.shape()));
    }
    Ok(cos_dist_slices(u.data(), v.data()))
}

/// Row-wise cosine distance on the tape: (b, d) x (b, d) -> (b,).
pub fn cosine_distance_rows<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let (ash, bsh) = (
        tape.value(a).shape().to_vec(),
        tape.value(b).shape().to_vec(),
    );
    if ash.len() != 2 || ash != bsh {
        return Err(Error::dim("cosine_distance_rows", &ash, &bsh));
    }
    let na = tape.l2_normalize(a, NORM_EPS)?;
    let nb = tape.l2_normalize(b, NORM_EPS)?;
    let prod = tape.mul(na, nb)?;
    let sim = tape.sum_last(prod)?;
    let neg = tape.neg(sim);
    Ok(tape.add_scalar(neg, 1.0))
}

fn validate_judgments(y: &[u8], batch: usize, op: &str) -> Result<()> {
    if y.len() != batch {
        return Err(Error::Input(format!(
            "{op}: {} judgments for batch of {batch}",
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Input(format!(
            "{op}: judgment {bad} outside {{0,1}}"
        )));
    }
    Ok(())
}

/// Perceptual triplet loss, mean over the batch.
///
/// Per record: max(0, m − Δd·ȳ) with Δd = d(x,x̃0) − d(x,x̃1) and
/// ȳ = −1 when y = 0 (x̃0 judged more similar), +1 when y = 1.
pub fn perceptual_triplet_loss<S: Scalar>(
    tape: &mut Tape<S>,
    e_x: Var,
    e_0: Var,
    e_1: Var,
    y: &[u8],
    margin: f64,
) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::Input(format!(
            "perceptual_triplet_loss: margin {margin} must be positive"
        )));
    }
    let shape = tape.value(e_x).shape().to_vec();
    if shape.len() != 2
        || tape.value(e_0).shape() != shape.as_slice()
        || tape.value(e_1).shape() != shape.as_slice()
    {
        return Err(Error::dim(
            "perceptual_triplet_loss",
            &shape,
            tape.value(e_0).shape(),
        ));
    }
    validate_judgments(y, shape[0], "perceptual_triplet_loss")?;
    let d0 = cosine_distance_rows(tape, e_x, e_0)?;
    let d1 = cosine_distance_rows(tape, e_x, e_1)?;
    let delta = tape.sub(d0, d1)?;
    let sign: Vec<S> = y
        .iter()
        .map(|&v| if v == 0 { -S::ONE } else { S::ONE })
        .collect();
    let sign = tape.constant(Tensor::from_vec(vec![y.len()], sign)?);
    let agreed = tape.mul(delta, sign)?;
    let neg = tape.neg(agreed);
    let arg = tape.add_scalar(neg, margin);
    let hinge = tape.relu(arg);
    Ok(tape.mean_all(hinge))
}

/// One-record convenience wrapper over [`perceptual_triplet_loss`].
pub fn perceptual_triplet_loss_single<S: Scalar>(
    e_x: &Tensor<S>,
    e_0: &Tensor<S>,
    e_1: &Tensor<S>,
    y: u8,
    margin: f64,
) -> Result<S> {
    if e_x.rank() != 1 {
        return Err(Error::shape(
            "perceptual_triplet_loss",
            e_x.shape(),
            "rank 1 embeddings",
        ));
    }
    let d = e_x.numel();
    let mut tape = Tape::new();
    let ex = tape.constant(e_x.reshaped(vec![1, d])?);
    let e0 = tape.constant(e_0.reshaped(vec![1, d])?);
    let e1 = tape.constant(e_1.reshaped(vec![1, d])?);
    let loss = perceptual_triplet_loss(&mut tape, ex, e0, e1, &[y], margin)?;
    tape.value(loss).scalar_value()
}

/// Square matrix of cosine similarities s(I_i, T_j).
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<S: Scalar> {
    values: Tensor<S>,
}

impl<S: Scalar> SimilarityMatrix<S> {
    /// Wrap a precomputed matrix; must be square with entries in [-1, 1]
    /// (small floating-point slack allowed).
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != values.shape()[1] {
            return Err(Error::shape(
                "similarity_matrix",
                values.shape(),
                "square matrix required",
            ));
        }
        const SLACK: f64 = 1e-4;
        if let Some(bad) = values
            .data()
            .iter()
            .find(|v| v.to_f64().abs() > 1.0 + SLACK)
        {
            return Err(Error::Input(format!(
                "similarity_matrix: entry {:?} outside [-1, 1]",
                bad
            )));
        }
        Ok(SimilarityMatrix { values })
    }

    /// Normalize both embedding sets and take all pairwise dot products.
    pub fn from_embeddings(image: &Tensor<S>, text: &Tensor<S>) -> Result<Self> {
        if image.rank() != 2 || image.shape() != text.shape() {
            return Err(Error::dim("similarity_matrix", image.shape(), text.shape()));
        }
        let ni = image.l2_normalized(NORM_EPS)?;
        let nt = text.l2_normalized(NORM_EPS)?;
        let values = ni.matmul(&nt.transpose_last()?)?;
        Ok(SimilarityMatrix { values })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }
}

/// Symmetric InfoNCE over a square logit matrix (already scaled by 1/τ):
/// −(1/2N) Σ_i [log softmax over row i at (i,i) + log softmax over column i
/// at (i,i)].
pub fn infonce_from_logits<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(
            "infonce_from_logits",
            &shape,
            "square matrix required",
        ));
    }
    let n = shape[0];
    let rows = tape.log_softmax_last(logits)?;
    let logits_t = tape.transpose_last(logits)?;
    let cols = tape.log_softmax_last(logits_t)?;
    let dr = tape.take_diag(rows)?;
    let dc = tape.take_diag(cols)?;
    let sr = tape.sum_all(dr);
    let sc = tape.sum_all(dc);
    let total = tape.add(sr, sc)?;
    Ok(tape.scale(total, -0.5 / n as f64))
}

/// Symmetric InfoNCE from raw (unnormalized) embeddings. `inv_tau` is the
/// scalar inverse temperature node, typically clamp(exp(logit_scale)).
pub fn infonce_from_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    image: Var,
    text: Var,
    inv_tau: Var,
) -> Result<Var> {
    let ish = tape.value(image).shape().to_vec();
    if ish.len() != 2 || tape.value(text).shape() != ish.as_slice() {
        return Err(Error::dim(
            "infonce_from_embeddings",
            &ish,
            tape.value(text).shape(),
        ));
    }
    if !tape.value(inv_tau).is_scalar() {
        return Err(Error::shape(
            "infonce_from_embeddings",
            tape.value(inv_tau).shape(),
            "scalar inverse temperature",
        ));
    }
    if tape.value(inv_tau).data()[0] <= S::ZERO {
        return Err(Error::Input(
            "infonce_from_embeddings: inverse temperature must be positive".into(),
        ));
    }
    let ni = tape.l2_normalize(image, NORM_EPS)?;
    let nt = tape.l2_normalize(text, NORM_EPS)?;
    let ntt = tape.transpose_last(nt)?;
    let sim = tape.matmul(ni, ntt)?;
    let logits = tape.mul(sim, inv_tau)?;
    infonce_from_logits(tape, logits)
}

/// Value-level symmetric InfoNCE on a similarity matrix at temperature τ.
pub fn infonce_loss<S: Scalar>(sim: &SimilarityMatrix<S>, tau: f64) -> Result<S> {
    if tau <= 0.0 {
        return Err(Error::Input(format!(
            "infonce_loss: temperature {tau} must be positive"
        )));
    }
    let t = S::from_f64(tau);
    let mut tape = Tape::new();
    let logits = tape.constant(sim.values().map(|v| v / t));
    let loss = infonce_from_logits(&mut tape, logits)?;
    tape.value(loss).scalar_value()
}

/// Fraction of triplets where the embedding-space argmin agrees with the
/// human judgment. Exact distance ties score as incorrect.
pub fn two_afc_accuracy<S: Scalar>(
    e_x: &Tensor<S>,
    e_0: &Tensor<S>,
    e_1: &Tensor<S>,
    y: &[u8],
) -> Result<f64> {
    if e_x.rank() != 2 || e_0.shape() != e_x.shape() || e_1.shape() != e_x.shape() {
        return Err(Error::dim("two_afc_accuracy", e_x.shape(), e_0.shape()));
    }
    let n = e_x.shape()[0];
    if n == 0 {
        return Err(Error::Input("two_afc_accuracy: empty triplet list".into()));
    }
    validate_judgments(y, n, "two_afc_accuracy")?;
    let mut correct = 0usize;
    for i in 0..n {
        let d0 = cos_dist_slices(e_x.row(i), e_0.row(i));
        let d1 = cos_dist_slices(e_x.row(i), e_1.row(i));
        let hit = if d0 < d1 {
            y[i] == 0
        } else if d1 < d0 {
            y[i] == 1
        } else {
            false
        };
        if hit {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn t1(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(vec![n], v).unwrap()
    }

    #[test]
    fn cosine_distance_reference_points() {
        let e1 = t1(vec![1.0, 0.0]);
        let e2 = t1(vec![0.0, 1.0]);
        let neg = t1(vec![-1.0, 0.0]);
        assert!(cosine_distance(&e1, &e1).unwrap().abs() < 1e-9);
        assert!((cosine_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine_distance(&e1, &neg).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_distance_rows_matches_plain() {
        let mut rng = RngState::new(31);
        let a = Tensor::<f64>::uniform(vec![5, 7], -2.0, 2.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![5, 7], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let d = cosine_distance_rows(&mut tape, av, bv).unwrap();
        for i in 0..5 {
            let du = cosine_distance(
                &t1(a.row(i).to_vec()),
                &t1(b.row(i).to_vec()),
            )
            .unwrap();
            assert!((tape.value(d).data()[i] - du).abs() < 1e-12);
        }
    }

    fn triplet_value(ex: Vec<f64>, e0: Vec<f64>, e1: Vec<f64>, y: u8) -> f64 {
        perceptual_triplet_loss_single(&t1(ex), &t1(e0), &t1(e1), y, DEFAULT_MARGIN).unwrap()
    }

    #[test]
    fn triplet_loss_hand_cases() {
        // Reference equals variant 0, variant 1 orthogonal.
        let l0 = triplet_value(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], 0);
        assert!(l0.abs() < 1e-9, "{l0}");
        let l1 = triplet_value(vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], 1);
        assert!((l1 - 1.05).abs() < 1e-9, "{l1}");
        // Equal variants collapse to the margin for either judgment.
        for y in [0, 1] {
            let lm = triplet_value(vec![1.0, 2.0], vec![0.5, -0.3], vec![0.5, -0.3], y);
            assert!((lm - 0.05).abs() < 1e-9, "{lm}");
        }
    }

    #[test]
    fn triplet_loss_batch_is_mean() {
        let ex = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e0 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e1 = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let (x, a, b) = (
            tape.constant(ex),
            tape.constant(e0),
            tape.constant(e1),
        );
        let loss = perceptual_triplet_loss(&mut tape, x, a, b, &[0, 1], 0.05).unwrap();
        // Records contribute 0 and 1.05; mean is 0.525.
        let v: f64 = tape.value(loss).scalar_value().unwrap();
        assert!((v - 0.525).abs() < 1e-9);
    }

    #[test]
    fn triplet_loss_rejects_bad_judgment() {
        let e = Tensor::<f64>::zeros(vec![1, 2]);
        let mut tape = Tape::new();
        let (x, a, b) = (
            tape.constant(e.clone()),
            tape.constant(e.clone()),
            tape.constant(e),
        );
        assert!(matches!(
            perceptual_triplet_loss(&mut tape, x, a, b, &[2], 0.05),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let sim = SimilarityMatrix::new(Tensor::from_vec(vec![1, 1], vec![0.42]).unwrap()).unwrap();
        let v: f64 = infonce_loss(&sim, 0.07).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn infonce_identity_two_hand_value() {
        let sim = SimilarityMatrix::new(
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let v: f64 = infonce_loss(&sim, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - want).abs() < 1e-6, "{v} vs {want}");
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn infonce_shift_invariance() {
        let mut rng = RngState::new(41);
        let raw = Tensor::<f64>::uniform(vec![4, 4], -1.0, 1.0, &mut rng);
        let shifted = raw.map(|v| v + 0.37);
        let mut tape = Tape::new();
        let a = tape.constant(raw);
        let la = infonce_from_logits(&mut tape, a).unwrap();
        let b = tape.constant(shifted);
        let lb = infonce_from_logits(&mut tape, b).unwrap();
        let (va, vb) = (
            tape.value(la).scalar_value().unwrap(),
            tape.value(lb).scalar_value().unwrap(),
        );
        assert!((va - vb).abs() < 1e-9, "{va} vs {vb}");
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        let ok = SimilarityMatrix::new(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(
            infonce_loss(&ok, 0.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            SimilarityMatrix::new(Tensor::<f64>::zeros(vec![2, 3])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            SimilarityMatrix::new(Tensor::from_vec(vec![1, 1], vec![1.5]).unwrap()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn infonce_nonnegative_on_random_matrices() {
        let mut rng = RngState::new(43);
        for _ in 0..20 {
            let m = Tensor::<f64>::uniform(vec![6, 6], -1.0, 1.0, &mut rng);
            let sim = SimilarityMatrix::new(m).unwrap();
            let v = infonce_loss(&sim, 0.5).unwrap();
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn two_afc_perfect_and_complement() {
        let mut rng = RngState::new(47);
        let n = 500;
        let ex = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let e0 = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let e1 = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let y: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
        let yc: Vec<u8> = y.iter().map(|&v| 1 - v).collect();
        let acc = two_afc_accuracy(&ex, &e0, &e1, &y).unwrap();
        let accc = two_afc_accuracy(&ex, &e0, &e1, &yc).unwrap();
        assert!((acc + accc - 1.0).abs() < 1e-12, "{acc} + {accc}");

        // Judged-similar variant equal to the reference: always correct.
        let acc1 = two_afc_accuracy(&ex, &ex, &e1, &vec![0u8; n]).unwrap();
        assert_eq!(acc1, 1.0);
    }

    #[test]
    fn two_afc_tie_scores_incorrect() {
        let ex = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let same = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        for y in [0u8, 1u8] {
            let acc = two_afc_accuracy(&ex, &same, &same, &[y]).unwrap();
            assert_eq!(acc, 0.0);
        }
    }

    #[test]
    fn two_afc_monte_carlo_half() {
        let mut rng = RngState::new(53);
        let n = 10_000;
        let ex = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let e0 = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let e1 = Tensor::<f64>::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
        let y: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
        let acc = two_afc_accuracy(&ex, &e0, &e1, &y).unwrap();
        assert!((acc - 0.5).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn two_afc_empty_is_input_error() {
        let e = Tensor::<f64>::zeros(vec![0, 4]);
        assert!(matches!(
            two_afc_accuracy(&e, &e, &e, &[]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn triplet_loss_gradients_match_finite_differences() {
        let mut rng = RngState::new(59);
        let ex = Tensor::<f64>::uniform(vec![4, 6], -1.0, 1.0, &mut rng);
        let e0 = Tensor::<f64>::uniform(vec![4, 6], -1.0, 1.0, &mut rng);
        let e1 = Tensor::<f64>::uniform(vec![4, 6], -1.0, 1.0, &mut rng);
        let y = [0u8, 1, 1, 0];
        // Confirm every record sits away from the hinge kink before checking.
        {
            let mut tape = Tape::new();
            let (x, a, b) = (
                tape.constant(ex.clone()),
                tape.constant(e0.clone()),
                tape.constant(e1.clone()),
            );
            let d0 = cosine_distance_rows(&mut tape, x, a).unwrap();
            let d1 = cosine_distance_rows(&mut tape, x, b).unwrap();
            for i in 0..4 {
                let dd = tape.value(d0).data()[i] - tape.value(d1).data()[i];
                let ybar = if y[i] == 0 { -1.0 } else { 1.0 };
                assert!(
                    (DEFAULT_MARGIN - dd * ybar).abs() > 1e-3,
                    "seed lands on hinge kink; pick another"
                );
            }
        }
        let report = grad_check(&[ex, e0, e1], |tape, vars| {
            perceptual_triplet_loss(tape, vars[0], vars[1], vars[2], &y, DEFAULT_MARGIN)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = RngState::new(61);
        let img = Tensor::<f64>::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let txt = Tensor::<f64>::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let inv_tau = Tensor::scalar(5.0);
        let report = grad_check(&[img, txt, inv_tau], |tape, vars| {
            infonce_from_embeddings(tape, vars[0], vars[1], vars[2])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    fn embedding() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 4)
            .prop_filter("nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 0.01)
    }

    proptest! {
        #[test]
        fn triplet_loss_stays_in_range(
            ex in embedding(),
            e0 in embedding(),
            e1 in embedding(),
            y in 0u8..2,
        ) {
            let l = triplet_value(ex, e0, e1, y);
            prop_assert!(l >= 0.0);
            prop_assert!(l <= DEFAULT_MARGIN + 2.0 + 1e-9);
        }

        #[test]
        fn triplet_loss_scale_invariant(
            ex in embedding(),
            e0 in embedding(),
            e1 in embedding(),
            y in 0u8..2,
            c in 0.1f64..10.0,
        ) {
            let base = triplet_value(ex.clone(), e0.clone(), e1.clone(), y);
            let scaled = triplet_value(
                ex.iter().map(|v| v * c).collect(),
                e0,
                e1,
                y,
            );
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn cosine_distance_range(u in embedding(), v in embedding()) {
            let d = cosine_distance(&t1(u), &t1(v)).unwrap();
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&d));
        }
    }
}
