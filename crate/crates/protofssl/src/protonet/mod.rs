//! Prototype mathematics: per-class centroids, distance-softmax class
//! probabilities, helper averaging, temperature sharpening, pseudo-labels,
//! and the prototypical / combined losses.

mod episode;

pub use episode::{episode_loss_and_grad, EpisodeLayout, EpisodeLoss, EpisodeProtos};
pub(crate) use episode::average_helper_prototypes;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{softmax_row_in_place, sq_dist, PROB_FLOOR};
use crate::numerics::Tensor;

pub type ClientId = usize;
pub type ClassId = usize;

/// Distance used between embeddings and prototypes. Squared Euclidean is the
/// default; plain Euclidean is kept selectable because the two are easy to
/// conflate and give different posteriors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl DistanceKind {
    pub(crate) fn eval(self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            DistanceKind::SquaredEuclidean => sq_dist(a, b),
            DistanceKind::Euclidean => sq_dist(a, b).sqrt(),
        }
    }
}

/// Hyperparameters of the semi-supervised episode construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslHyperparams {
    /// Sharpening temperature in (0, 1].
    pub temperature: f64,
    /// Weight of the unlabeled loss term.
    pub unlabeled_weight: f64,
    /// Support samples per class per epoch.
    pub n_support: usize,
    /// Labeled query samples per class per epoch.
    pub n_query_labeled: usize,
    /// Unlabeled query samples per epoch.
    pub n_query_unlabeled: usize,
    #[serde(default)]
    pub distance: DistanceKind,
}

impl SslHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Config("ssl.temperature must be in (0, 1]".into()));
        }
        if self.unlabeled_weight < 0.0 {
            return Err(Error::Config("ssl.unlabeled_weight must be >= 0".into()));
        }
        if self.n_support == 0 || self.n_query_labeled == 0 {
            return Err(Error::Config(
                "ssl.n_support and ssl.n_query_labeled must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class embedding centroids owned by one client at one round; the unit
/// of inter-client knowledge. Classes without support samples carry no
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub owner: ClientId,
    pub round: usize,
    num_classes: usize,
    embedding_dim: usize,
    vectors: BTreeMap<ClassId, Tensor>,
    support_counts: BTreeMap<ClassId, usize>,
}

impl PrototypeSet {
    pub fn new(owner: ClientId, round: usize, num_classes: usize, embedding_dim: usize) -> Self {
        PrototypeSet {
            owner,
            round,
            num_classes,
            embedding_dim,
            vectors: BTreeMap::new(),
            support_counts: BTreeMap::new(),
        }
    }

    /// Registers the prototype for `class`, built from `support_count`
    /// samples.
    pub fn insert(&mut self, class: ClassId, vector: Tensor, support_count: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::Config(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        if vector.shape() != [self.embedding_dim] {
            return Err(Error::shape(
                format!("prototype for class {class}"),
                format!("[{}]", self.embedding_dim),
                format!("{:?}", vector.shape()),
            ));
        }
        if !vector.is_finite() {
            return Err(Error::NonFinite(format!("prototype for class {class}")));
        }
        self.vectors.insert(class, vector);
        self.support_counts.insert(class, support_count);
        Ok(())
    }

    pub fn vector(&self, class: ClassId) -> Option<&Tensor> {
        self.vectors.get(&class)
    }

    pub fn support_count(&self, class: ClassId) -> usize {
        self.support_counts.get(&class).copied().unwrap_or(0)
    }

    /// Classes that have a prototype, ascending.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.vectors.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &Tensor)> {
        self.vectors.iter().map(|(&k, v)| (k, v))
    }

    pub fn has_class(&self, class: ClassId) -> bool {
        self.vectors.contains_key(&class)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A probability distribution over the class universe.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f32>,
}

impl SoftLabel {
    /// Validates non-negativity and unit mass (then renormalizes away float
    /// drift).
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("SoftLabel::new".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::NonFinite("SoftLabel probabilities".into()));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Config(format!(
                "SoftLabel mass {sum} is not a distribution"
            )));
        }
        Ok(Self::from_weights(probs))
    }

    /// Normalizes non-negative weights with positive total mass.
    fn from_weights(weights: Vec<f32>) -> Self {
        let sum: f64 = weights.iter().map(|&p| p as f64).sum();
        debug_assert!(sum > 0.0);
        SoftLabel {
            probs: weights.iter().map(|&p| (p as f64 / sum) as f32).collect(),
        }
    }

    pub fn uniform(k: usize) -> Self {
        SoftLabel {
            probs: vec![1.0 / k as f32; k],
        }
    }

    pub fn one_hot(k: usize, class: ClassId) -> Self {
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        SoftLabel { probs }
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties break to the lowest class.
    pub fn argmax(&self) -> ClassId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Arithmetic mean of embedding rows.
pub fn make_prototype(embeddings: &Tensor) -> Result<Tensor> {
    if embeddings.shape().len() != 2 || embeddings.rows() == 0 {
        return Err(Error::EmptyInput("make_prototype: empty support set".into()));
    }
    let (n, d) = (embeddings.rows(), embeddings.cols());
    let mut acc = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in embeddings.row(i).iter().enumerate() {
            acc[j] += v as f64;
        }
    }
    let nf = n as f64;
    Ok(Tensor::vector(acc.iter().map(|&v| (v / nf) as f32).collect()))
}

/// Softmax of negative distances to the prototypes, stabilized; classes
/// without a prototype receive probability zero.
pub fn class_probabilities(
    embedding: &Tensor,
    protos: &PrototypeSet,
    distance: DistanceKind,
) -> Result<SoftLabel> {
    if protos.is_empty() {
        return Err(Error::EmptyInput("class_probabilities: no prototypes".into()));
    }
    if embedding.shape() != [protos.embedding_dim()] {
        return Err(Error::shape(
            "class_probabilities embedding",
            format!("[{}]", protos.embedding_dim()),
            format!("{:?}", embedding.shape()),
        ));
    }
    let mut logits: Vec<f32> = Vec::with_capacity(protos.len());
    let mut classes: Vec<ClassId> = Vec::with_capacity(protos.len());
    for (k, c) in protos.iter() {
        logits.push(-distance.eval(embedding.data(), c.data()));
        classes.push(k);
    }
    softmax_row_in_place(&mut logits);
    let mut probs = vec![0.0f32; protos.num_classes()];
    for (k, p) in classes.into_iter().zip(logits) {
        probs[k] = p;
    }
    Ok(SoftLabel::from_weights(probs))
}

/// Elementwise mean of the per-helper distributions.
pub fn average_over_helpers(per_helper: &[SoftLabel]) -> Result<SoftLabel> {
    let first = per_helper
        .first()
        .ok_or_else(|| Error::EmptyInput("average_over_helpers: no helpers".into()))?;
    let k = first.len();
    let mut acc = vec![0.0f64; k];
    for label in per_helper {
        if label.len() != k {
            return Err(Error::shape("average_over_helpers", k, label.len()));
        }
        for (a, &p) in acc.iter_mut().zip(label.probs()) {
            *a += p as f64;
        }
    }
    let n = per_helper.len() as f64;
    Ok(SoftLabel::from_weights(
        acc.iter().map(|&v| (v / n) as f32).collect(),
    ))
}

/// Temperature-powered renormalization `p_k^(1/T) / sum`, computed in log
/// space. Zeros map to zeros; T = 1 is the identity.
pub fn sharpen(p: &SoftLabel, temperature: f64) -> Result<SoftLabel> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "sharpen temperature must be > 0, got {temperature}"
        )));
    }
    let max = p.probs().iter().cloned().fold(0.0f32, f32::max) as f64;
    debug_assert!(max > 0.0);
    let powered: Vec<f32> = p
        .probs()
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                0.0
            } else {
                // (v / max)^(1/T) stays in (0, 1]; avoids underflow for small T.
                (((v as f64 / max).ln() / temperature).exp()) as f32
            }
        })
        .collect();
    Ok(SoftLabel::from_weights(powered))
}

/// Helper-prototype pseudo-labeling: per-helper class probabilities,
/// averaged, then sharpened.
pub fn pseudo_label(
    u_embedding: &Tensor,
    helpers: &[PrototypeSet],
    temperature: f64,
    distance: DistanceKind,
) -> Result<SoftLabel> {
    if helpers.is_empty() {
        return Err(Error::EmptyInput("pseudo_label: no helpers".into()));
    }
    let k = helpers[0].num_classes();
    if helpers.iter().any(|h| h.num_classes() != k) {
        return Err(Error::Config(
            "pseudo_label: helpers disagree on the class universe".into(),
        ));
    }
    let per_helper: Vec<SoftLabel> = helpers
        .iter()
        .map(|h| class_probabilities(u_embedding, h, distance))
        .collect::<Result<_>>()?;
    sharpen(&average_over_helpers(&per_helper)?, temperature)
}

fn query_nll(
    embedding: &[f32],
    target_class: ClassId,
    protos: &PrototypeSet,
    distance: DistanceKind,
) -> Result<f64> {
    if !protos.has_class(target_class) {
        return Err(Error::Config(format!(
            "queries for class {target_class} but no prototype for it"
        )));
    }
    let mut logits: Vec<f32> = Vec::with_capacity(protos.len());
    let mut target_idx = 0;
    for (i, (k, c)) in protos.iter().enumerate() {
        if k == target_class {
            target_idx = i;
        }
        logits.push(-distance.eval(embedding, c.data()));
    }
    softmax_row_in_place(&mut logits);
    let p = (logits[target_idx] as f64).max(PROB_FLOOR);
    Ok(-p.ln())
}

/// Mean over all query points of the negative log posterior of their own
/// class; equals the labeled term of the combined loss with one-hot targets.
pub fn prototypical_loss(
    queries: &BTreeMap<ClassId, Tensor>,
    protos: &PrototypeSet,
    distance: DistanceKind,
) -> Result<f32> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (&class, batch) in queries {
        for i in 0..batch.rows() {
            total += query_nll(batch.row(i), class, protos, distance)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("prototypical_loss: no query points".into()));
    }
    Ok((total / n as f64) as f32)
}

/// Labeled cross-entropy plus `lambda` times the unlabeled cross-entropy of
/// pseudo-labels against the local predictions.
pub fn combined_loss(
    labeled_queries: &BTreeMap<ClassId, Tensor>,
    unlabeled_queries: &Tensor,
    pseudo: &[SoftLabel],
    protos: &PrototypeSet,
    lambda: f64,
    distance: DistanceKind,
) -> Result<f32> {
    let labeled = prototypical_loss(labeled_queries, protos, distance)? as f64;
    if lambda == 0.0 {
        return Ok(labeled as f32);
    }
    if pseudo.len() != unlabeled_queries.rows() {
        return Err(Error::shape(
            "combined_loss pseudo-labels",
            unlabeled_queries.rows(),
            pseudo.len(),
        ));
    }
    if pseudo.is_empty() {
        return Ok(labeled as f32);
    }
    let mut unlabeled = 0.0f64;
    for (i, label) in pseudo.iter().enumerate() {
        let local = class_probabilities(
            &Tensor::vector(unlabeled_queries.row(i).to_vec()),
            protos,
            distance,
        )?;
        for (t, p) in label.probs().iter().zip(local.probs()) {
            if *t > 0.0 {
                unlabeled -= *t as f64 * (*p as f64).max(PROB_FLOOR).ln();
            }
        }
    }
    unlabeled /= pseudo.len() as f64;
    Ok((labeled + lambda * unlabeled) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{EmbeddingNet, NetworkConfig, ParameterSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f32, b: f32, tol: f64) -> bool {
        let (a, b) = (a as f64, b as f64);
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    fn protos_from(vecs: &[(ClassId, Vec<f32>)], num_classes: usize) -> PrototypeSet {
        let dim = vecs[0].1.len();
        let mut ps = PrototypeSet::new(0, 0, num_classes, dim);
        for (k, v) in vecs {
            ps.insert(*k, Tensor::vector(v.clone()), 1).unwrap();
        }
        ps
    }

    /// Unstabilized softmax of negative distances, straight from the
    /// definition, in f64.
    fn naive_class_probs(e: &[f32], protos: &PrototypeSet, distance: DistanceKind) -> Vec<f64> {
        let mut out = vec![0.0f64; protos.num_classes()];
        let mut z = Vec::new();
        for (k, c) in protos.iter() {
            let mut d = 0.0f64;
            for (a, b) in e.iter().zip(c.data()) {
                d += (*a as f64 - *b as f64).powi(2);
            }
            if distance == DistanceKind::Euclidean {
                d = d.sqrt();
            }
            z.push((k, (-d).exp()));
        }
        let sum: f64 = z.iter().map(|(_, v)| v).sum();
        for (k, v) in z {
            out[k] = v / sum;
        }
        out
    }

    #[test]
    fn prototype_of_one_is_itself() {
        let e = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(make_prototype(&e).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn prototype_of_two_is_midpoint() {
        let e = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        assert_eq!(make_prototype(&e).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn prototype_matches_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::matrix(5, 8, (0..40).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let p = make_prototype(&e).unwrap();
        for j in 0..8 {
            let mut sum = 0.0f64;
            for i in 0..5 {
                sum += e.get2(i, j) as f64;
            }
            assert!(close(p.data()[j], (sum / 5.0) as f32, 1e-6));
        }
    }

    #[test]
    fn empty_support_is_an_error() {
        let e = Tensor::zeros(&[0, 3]);
        assert!(make_prototype(&e).is_err());
    }

    #[test]
    fn equidistant_prototypes_give_uniform_probs() {
        let protos = protos_from(
            &[(0, vec![1.0, 0.0]), (1, vec![-0.5, 0.8660254]), (2, vec![-0.5, -0.8660254])],
            3,
        );
        let p = class_probabilities(&Tensor::vector(vec![0.0, 0.0]), &protos, DistanceKind::SquaredEuclidean)
            .unwrap();
        for &v in p.probs() {
            assert!(close(v, 1.0 / 3.0, 1e-6));
        }
    }

    #[test]
    fn closed_form_distances_give_closed_form_probs() {
        // Squared distances [0, ln4, ln4] from the origin in 1-D.
        let r = (4.0f64.ln()).sqrt() as f32;
        let protos = protos_from(&[(0, vec![0.0]), (1, vec![r]), (2, vec![-r])], 3);
        let p = class_probabilities(&Tensor::vector(vec![0.0]), &protos, DistanceKind::SquaredEuclidean)
            .unwrap();
        assert!(close(p.probs()[0], 2.0 / 3.0, 1e-5));
        assert!(close(p.probs()[1], 1.0 / 6.0, 1e-5));
        assert!(close(p.probs()[2], 1.0 / 6.0, 1e-5));
    }

    #[test]
    fn class_probabilities_match_unstabilized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let dim = rng.gen_range(2..6);
            let protos_v: Vec<(ClassId, Vec<f32>)> = (0..10)
                .map(|k| (k, (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
                .collect();
            let protos = protos_from(&protos_v, 10);
            let e: Vec<f32> = (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            for distance in [DistanceKind::SquaredEuclidean, DistanceKind::Euclidean] {
                let got = class_probabilities(&Tensor::vector(e.clone()), &protos, distance).unwrap();
                let want = naive_class_probs(&e, &protos, distance);
                for (g, w) in got.probs().iter().zip(want) {
                    assert!(close(*g, w as f32, 1e-5));
                }
            }
        }
    }

    #[test]
    fn class_probabilities_invariant_under_common_distance_shift() {
        // Adding one coordinate where the embedding is offset from every
        // prototype by the same amount shifts all squared distances by a
        // common constant; the posterior must not move.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let base: Vec<(ClassId, Vec<f32>)> = (0..4)
                .map(|k| (k, (0..3).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
                .collect();
            let e: Vec<f32> = (0..3).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let plain = class_probabilities(
                &Tensor::vector(e.clone()),
                &protos_from(&base, 4),
                DistanceKind::SquaredEuclidean,
            )
            .unwrap();

            let extended: Vec<(ClassId, Vec<f32>)> = base
                .iter()
                .map(|(k, v)| {
                    let mut v = v.clone();
                    v.push(16.0); // shifts every squared distance by 256
                    (*k, v)
                })
                .collect();
            let mut e_ext = e.clone();
            e_ext.push(0.0);
            let shifted = class_probabilities(
                &Tensor::vector(e_ext),
                &protos_from(&extended, 4),
                DistanceKind::SquaredEuclidean,
            )
            .unwrap();
            for (a, b) in plain.probs().iter().zip(shifted.probs()) {
                assert!(close(*a, *b, 1e-4), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_prototype_set_is_an_error() {
        let protos = PrototypeSet::new(0, 0, 3, 2);
        assert!(class_probabilities(&Tensor::vector(vec![0.0, 0.0]), &protos, DistanceKind::default()).is_err());
    }

    #[test]
    fn single_helper_average_is_identity() {
        let l = SoftLabel::new(vec![0.2, 0.3, 0.5]).unwrap();
        let avg = average_over_helpers(std::slice::from_ref(&l)).unwrap();
        for (a, b) in avg.probs().iter().zip(l.probs()) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn mirrored_helpers_average_to_half() {
        let a = SoftLabel::new(vec![1.0, 0.0]).unwrap();
        let b = SoftLabel::new(vec![0.0, 1.0]).unwrap();
        let avg = average_over_helpers(&[a, b]).unwrap();
        assert!(close(avg.probs()[0], 0.5, 1e-6));
        assert!(close(avg.probs()[1], 0.5, 1e-6));
    }

    #[test]
    fn helper_average_matches_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labels: Vec<SoftLabel> = (0..5)
            .map(|_| {
                let w: Vec<f32> = (0..4).map(|_| rng.gen_range(0.1f32..1.0)).collect();
                let s: f32 = w.iter().sum();
                SoftLabel::new(w.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let avg = average_over_helpers(&labels).unwrap();
        for j in 0..4 {
            let want: f64 = labels.iter().map(|l| l.probs()[j] as f64).sum::<f64>() / 5.0;
            assert!(close(avg.probs()[j], want as f32, 1e-6));
        }
    }

    #[test]
    fn average_of_none_is_an_error() {
        assert!(average_over_helpers(&[]).is_err());
    }

    #[test]
    fn sharpen_at_unit_temperature_is_identity() {
        let p = SoftLabel::new(vec![0.1, 0.6, 0.3]).unwrap();
        let s = sharpen(&p, 1.0).unwrap();
        for (a, b) in s.probs().iter().zip(p.probs()) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn sharpen_symmetric_input_is_fixed_point() {
        let p = SoftLabel::new(vec![0.5, 0.5]).unwrap();
        for t in [0.1, 0.5, 1.0] {
            let s = sharpen(&p, t).unwrap();
            assert!(close(s.probs()[0], 0.5, 1e-6));
        }
    }

    #[test]
    fn sharpen_matches_direct_evaluation() {
        // [0.8, 0.2] at T=0.5 -> [0.64, 0.04] / 0.68.
        let p = SoftLabel::new(vec![0.8, 0.2]).unwrap();
        let s = sharpen(&p, 0.5).unwrap();
        assert!(close(s.probs()[0], 0.64 / 0.68, 1e-5));
        assert!(close(s.probs()[1], 0.04 / 0.68, 1e-5));
    }

    #[test]
    fn sharpen_keeps_zeros_at_zero() {
        let p = SoftLabel::new(vec![0.7, 0.0, 0.3]).unwrap();
        let s = sharpen(&p, 0.25).unwrap();
        assert_eq!(s.probs()[1], 0.0);
        let sum: f32 = s.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn sharpen_preserves_argmax_and_concentrates(
            raw in proptest::collection::vec(0.05f32..1.0, 2..6),
            t in 0.05f64..1.0,
        ) {
            let sum: f32 = raw.iter().sum();
            let p = SoftLabel::new(raw.iter().map(|v| v / sum).collect()).unwrap();
            let s = sharpen(&p, t).unwrap();
            prop_assert_eq!(s.argmax(), p.argmax());
            let before = p.probs()[p.argmax()];
            let after = s.probs()[s.argmax()];
            // Strict concentration needs a unique maximum and T < 1.
            let unique = p.probs().iter().filter(|&&v| (v - before).abs() < 1e-9).count() == 1;
            if t < 0.999 && unique {
                prop_assert!(after >= before - 1e-6);
                if before < 0.999 {
                    prop_assert!(after > before - 1e-6);
                }
            }
        }

        #[test]
        fn produced_soft_labels_are_distributions(
            raw in proptest::collection::vec(0.01f32..1.0, 3),
            t in 0.1f64..1.0,
        ) {
            let sum: f32 = raw.iter().sum();
            let p = SoftLabel::new(raw.iter().map(|v| v / sum).collect()).unwrap();
            for label in [sharpen(&p, t).unwrap(), average_over_helpers(&[p.clone(), p.clone()]).unwrap()] {
                let s: f64 = label.probs().iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(label.probs().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn pseudo_label_snaps_to_matching_prototype() {
        let u = Tensor::vector(vec![0.5, -0.25, 1.0]);
        let far = vec![10.0f32, 10.0, 10.0];
        let helper = protos_from(
            &[(0, u.data().to_vec()), (1, far.clone()), (2, vec![-10.0, 8.0, -10.0])],
            3,
        );
        let label = pseudo_label(&u, &[helper], 0.5, DistanceKind::SquaredEuclidean).unwrap();
        assert_eq!(label.argmax(), 0);
        assert!(label.probs()[0] > 0.99);
    }

    #[test]
    fn identical_helpers_collapse_to_single_helper() {
        let helper = protos_from(&[(0, vec![0.0, 0.0]), (1, vec![1.0, 1.0])], 2);
        let u = Tensor::vector(vec![0.3, 0.1]);
        let many = pseudo_label(&u, &[helper.clone(), helper.clone(), helper.clone()], 0.5, DistanceKind::default())
            .unwrap();
        let single = sharpen(
            &class_probabilities(&u, &helper, DistanceKind::default()).unwrap(),
            0.5,
        )
        .unwrap();
        for (a, b) in many.probs().iter().zip(single.probs()) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn mirrored_confident_helpers_cancel_at_unit_temperature() {
        let a = protos_from(&[(0, vec![0.0, 0.0]), (1, vec![50.0, 50.0])], 2);
        let b = protos_from(&[(0, vec![50.0, 50.0]), (1, vec![0.0, 0.0])], 2);
        let u = Tensor::vector(vec![0.0, 0.0]);
        let label = pseudo_label(&u, &[a, b], 1.0, DistanceKind::SquaredEuclidean).unwrap();
        assert!(close(label.probs()[0], 0.5, 1e-5));
        assert!(close(label.probs()[1], 0.5, 1e-5));
    }

    #[test]
    fn pseudo_label_argmax_ignores_helper_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let helpers: Vec<PrototypeSet> = (0..4)
                .map(|_| {
                    let v: Vec<(ClassId, Vec<f32>)> = (0..3)
                        .map(|k| (k, (0..2).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
                        .collect();
                    protos_from(&v, 3)
                })
                .collect();
            let u = Tensor::vector(vec![rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0)]);
            let fwd = pseudo_label(&u, &helpers, 0.5, DistanceKind::default()).unwrap();
            let mut rev = helpers.clone();
            rev.reverse();
            let bwd = pseudo_label(&u, &rev, 0.5, DistanceKind::default()).unwrap();
            assert_eq!(fwd.argmax(), bwd.argmax());
        }
    }

    #[test]
    fn helper_missing_a_class_contributes_no_mass_to_it() {
        // Helper A speaks only for classes {0, 1}; helper B covers all three.
        // Class 2 may only receive mass from B, halved by averaging.
        let a = protos_from(&[(0, vec![0.0]), (1, vec![2.0])], 3);
        let b = protos_from(&[(0, vec![0.0]), (1, vec![2.0]), (2, vec![-1.0])], 3);
        let u = Tensor::vector(vec![0.5]);
        let pa = class_probabilities(&u, &a, DistanceKind::SquaredEuclidean).unwrap();
        let pb = class_probabilities(&u, &b, DistanceKind::SquaredEuclidean).unwrap();
        assert_eq!(pa.probs()[2], 0.0);
        let avg = average_over_helpers(&[pa, pb.clone()]).unwrap();
        assert!(close(avg.probs()[2], pb.probs()[2] / 2.0, 1e-6));
    }

    fn toy_queries(rng: &mut ChaCha8Rng, k: usize, per_class: usize, dim: usize) -> BTreeMap<ClassId, Tensor> {
        (0..k)
            .map(|class| {
                let data: Vec<f32> = (0..per_class * dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
                (class, Tensor::matrix(per_class, dim, data).unwrap())
            })
            .collect()
    }

    #[test]
    fn queries_at_their_own_prototype_have_tiny_loss() {
        let protos = protos_from(
            &[(0, vec![0.0, 0.0]), (1, vec![10.0, 0.0]), (2, vec![0.0, 10.0])],
            3,
        );
        let queries: BTreeMap<ClassId, Tensor> = [
            (0, Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
            (1, Tensor::matrix(1, 2, vec![10.0, 0.0]).unwrap()),
            (2, Tensor::matrix(1, 2, vec![0.0, 10.0]).unwrap()),
        ]
        .into_iter()
        .collect();
        let loss = prototypical_loss(&queries, &protos, DistanceKind::SquaredEuclidean).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn identical_prototypes_give_log_k_loss() {
        let same = vec![0.5f32, -0.5];
        let protos = protos_from(&[(0, same.clone()), (1, same.clone()), (2, same.clone()), (3, same)], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let queries = toy_queries(&mut rng, 4, 3, 2);
        let loss = prototypical_loss(&queries, &protos, DistanceKind::default()).unwrap();
        assert!(close(loss, (4.0f64).ln() as f32, 1e-5));
    }

    /// Straight-from-definition evaluation: per-point unstabilized posterior
    /// and log, all in f64.
    fn naive_prototypical_loss(
        queries: &BTreeMap<ClassId, Tensor>,
        protos: &PrototypeSet,
        distance: DistanceKind,
    ) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (&class, batch) in queries {
            for i in 0..batch.rows() {
                let p = naive_class_probs(batch.row(i), protos, distance);
                total += -(p[class].max(PROB_FLOOR)).ln();
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn prototypical_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..100 {
            let dim = rng.gen_range(2..5);
            let protos_v: Vec<(ClassId, Vec<f32>)> = (0..3)
                .map(|k| (k, (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
                .collect();
            let protos = protos_from(&protos_v, 3);
            let queries = toy_queries(&mut rng, 3, 2, dim);
            for distance in [DistanceKind::SquaredEuclidean, DistanceKind::Euclidean] {
                let got = prototypical_loss(&queries, &protos, distance).unwrap();
                let want = naive_prototypical_loss(&queries, &protos, distance);
                assert!(close(got, want as f32, 1e-5), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn missing_prototype_for_queried_class_is_an_error() {
        let protos = protos_from(&[(0, vec![0.0, 0.0])], 2);
        let queries: BTreeMap<ClassId, Tensor> =
            [(1, Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap())].into_iter().collect();
        assert!(prototypical_loss(&queries, &protos, DistanceKind::default()).is_err());
    }

    #[test]
    fn combined_loss_with_zero_lambda_is_prototypical_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let protos_v: Vec<(ClassId, Vec<f32>)> = (0..3)
            .map(|k| (k, vec![rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0)]))
            .collect();
        let protos = protos_from(&protos_v, 3);
        let queries = toy_queries(&mut rng, 3, 2, 2);
        let unlabeled = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.5, 0.4]).unwrap();
        let pseudo = vec![SoftLabel::uniform(3), SoftLabel::uniform(3)];
        let combined =
            combined_loss(&queries, &unlabeled, &pseudo, &protos, 0.0, DistanceKind::default()).unwrap();
        let plain = prototypical_loss(&queries, &protos, DistanceKind::default()).unwrap();
        assert_eq!(combined, plain);
    }

    #[test]
    fn uniform_pseudo_and_uniform_predictions_give_log_k_unlabeled_term() {
        // Prototypes equidistant from the unlabeled point make the local
        // prediction uniform; with uniform pseudo-labels the unlabeled term
        // is exactly ln K.
        let protos = protos_from(&[(0, vec![1.0, 0.0]), (1, vec![-1.0, 0.0])], 2);
        let queries: BTreeMap<ClassId, Tensor> = [
            (0, Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()),
            (1, Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap()),
        ]
        .into_iter()
        .collect();
        let unlabeled = Tensor::matrix(1, 2, vec![0.0, 5.0]).unwrap();
        let pseudo = vec![SoftLabel::uniform(2)];
        let labeled = prototypical_loss(&queries, &protos, DistanceKind::default()).unwrap();
        let lambda = 0.7;
        let combined =
            combined_loss(&queries, &unlabeled, &pseudo, &protos, lambda, DistanceKind::default()).unwrap();
        let want = labeled as f64 + lambda * (2.0f64).ln();
        assert!(close(combined, want as f32, 1e-5));
    }

    #[test]
    fn combined_loss_matches_two_independent_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let dim = 3;
            let protos_v: Vec<(ClassId, Vec<f32>)> = (0..3)
                .map(|k| (k, (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
                .collect();
            let protos = protos_from(&protos_v, 3);
            let queries = toy_queries(&mut rng, 3, 2, dim);
            let n_u = 4;
            let unlabeled = Tensor::matrix(
                n_u,
                dim,
                (0..n_u * dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
            )
            .unwrap();
            let pseudo: Vec<SoftLabel> = (0..n_u)
                .map(|_| {
                    let w: Vec<f32> = (0..3).map(|_| rng.gen_range(0.05f32..1.0)).collect();
                    let s: f32 = w.iter().sum();
                    SoftLabel::new(w.iter().map(|v| v / s).collect()).unwrap()
                })
                .collect();
            let lambda = 0.3;
            let got = combined_loss(&queries, &unlabeled, &pseudo, &protos, lambda, DistanceKind::default())
                .unwrap();

            let labeled_oracle = naive_prototypical_loss(&queries, &protos, DistanceKind::default());
            let mut unlabeled_oracle = 0.0f64;
            for i in 0..n_u {
                let p = naive_class_probs(unlabeled.row(i), &protos, DistanceKind::default());
                for (k, &t) in pseudo[i].probs().iter().enumerate() {
                    if t > 0.0 {
                        unlabeled_oracle -= t as f64 * p[k].max(PROB_FLOOR).ln();
                    }
                }
            }
            unlabeled_oracle /= n_u as f64;
            let want = labeled_oracle + lambda * unlabeled_oracle;
            assert!(close(got, want as f32, 1e-5), "{got} vs {want}");
        }
    }

    #[test]
    fn combined_loss_is_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let protos_v: Vec<(ClassId, Vec<f32>)> = (0..3)
            .map(|k| (k, vec![rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0)]))
            .collect();
        let protos = protos_from(&protos_v, 3);
        let queries = toy_queries(&mut rng, 3, 2, 2);
        let unlabeled = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let pseudo = vec![SoftLabel::uniform(3); 3];
        let mut prev = f32::NEG_INFINITY;
        for lambda in [0.0, 0.1, 0.3, 1.0, 3.0] {
            let v = combined_loss(&queries, &unlabeled, &pseudo, &protos, lambda, DistanceKind::default())
                .unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    /// Finite differences through the full pipeline (network forward +
    /// episode loss), with frozen pseudo-labels.
    #[test]
    fn episode_gradient_matches_finite_differences() {
        let config = NetworkConfig {
            input_dim: 3,
            hidden_dims: vec![6],
            embedding_dim: 4,
            use_batch_norm: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let net: EmbeddingNet<f32> = EmbeddingNet::init(config.clone(), &mut rng).unwrap();

        // Layout: 2 classes x 2 support, 2 classes x 1 query, 3 unlabeled.
        let layout = EpisodeLayout {
            support: [(0, 0..2), (1, 2..4)].into_iter().collect(),
            labeled_query: [(0, 4..5), (1, 5..6)].into_iter().collect(),
            unlabeled: 6..9,
        };
        let batch = Tensor::matrix(
            9,
            3,
            (0..27).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
        )
        .unwrap();
        let pseudo: Vec<SoftLabel> = (0..3)
            .map(|_| {
                let w: Vec<f32> = (0..2).map(|_| rng.gen_range(0.2f32..1.0)).collect();
                let s: f32 = w.iter().sum();
                SoftLabel::new(w.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let lambda = 0.4;

        let loss_of = |params: &ParameterSet<f32>| -> f64 {
            let mut net = EmbeddingNet::new(config.clone(), params.clone()).unwrap();
            let emb = net.forward(&batch).unwrap();
            let ep = episode_loss_and_grad(
                &emb,
                &layout,
                EpisodeProtos::FromSupport,
                &pseudo,
                lambda,
                DistanceKind::SquaredEuclidean,
            )
            .unwrap();
            ep.labeled as f64 + lambda * ep.unlabeled as f64
        };

        let mut net = net;
        let emb = net.forward(&batch).unwrap();
        let ep = episode_loss_and_grad(
            &emb,
            &layout,
            EpisodeProtos::FromSupport,
            &pseudo,
            lambda,
            DistanceKind::SquaredEuclidean,
        )
        .unwrap();
        net.backward(&ep.grad).unwrap();

        let params = net.params().clone();
        // An f32 evaluation pipeline needs a larger central-difference step
        // than the plain network check: roundoff scales with 1/h.
        let h = 4e-3f32;
        for ti in 0..params.trainable().len() {
            for vi in 0..params.trainable()[ti].numel() {
                let mut plus = params.clone();
                plus.layers[ti].data_mut()[vi] += h;
                let mut minus = params.clone();
                minus.layers[ti].data_mut()[vi] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h as f64);
                let an = net.params().grads()[ti].data()[vi] as f64;
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom <= 1e-3,
                    "tensor {ti} idx {vi}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    /// The episode path and the standalone loss evaluators are independent
    /// routes to the same numbers.
    #[test]
    fn episode_losses_agree_with_standalone_evaluators() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let dim = 3;
        let layout = EpisodeLayout {
            support: [(0, 0..2), (1, 2..4), (2, 4..6)].into_iter().collect(),
            labeled_query: [(0, 6..8), (1, 8..10), (2, 10..12)].into_iter().collect(),
            unlabeled: 12..16,
        };
        let emb = Tensor::matrix(16, dim, (0..48).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap();
        let pseudo: Vec<SoftLabel> = (0..4)
            .map(|_| {
                let w: Vec<f32> = (0..3).map(|_| rng.gen_range(0.05f32..1.0)).collect();
                let s: f32 = w.iter().sum();
                SoftLabel::new(w.iter().map(|v| v / s).collect()).unwrap()
            })
            .collect();
        let lambda = 0.3;
        let ep = episode_loss_and_grad(
            &emb,
            &layout,
            EpisodeProtos::FromSupport,
            &pseudo,
            lambda,
            DistanceKind::default(),
        )
        .unwrap();

        // Rebuild the same prototypes and batches for the evaluators.
        let mut protos = PrototypeSet::new(0, 0, 3, dim);
        for (&class, range) in &layout.support {
            let rows: Vec<&[f32]> = range.clone().map(|r| emb.row(r)).collect();
            let stacked = Tensor::stack_rows(&rows).unwrap();
            protos
                .insert(class, make_prototype(&stacked).unwrap(), rows.len())
                .unwrap();
        }
        let queries: BTreeMap<ClassId, Tensor> = layout
            .labeled_query
            .iter()
            .map(|(&class, range)| {
                let rows: Vec<&[f32]> = range.clone().map(|r| emb.row(r)).collect();
                (class, Tensor::stack_rows(&rows).unwrap())
            })
            .collect();
        let unlabeled_rows: Vec<&[f32]> = layout.unlabeled.clone().map(|r| emb.row(r)).collect();
        let unlabeled = Tensor::stack_rows(&unlabeled_rows).unwrap();

        let labeled_eval = prototypical_loss(&queries, &protos, DistanceKind::default()).unwrap();
        let combined_eval =
            combined_loss(&queries, &unlabeled, &pseudo, &protos, lambda, DistanceKind::default()).unwrap();
        assert!(close(ep.labeled, labeled_eval, 1e-5));
        assert!(close(
            ep.labeled + lambda as f32 * ep.unlabeled,
            combined_eval,
            1e-5
        ));
    }
}
