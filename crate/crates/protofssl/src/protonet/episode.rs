//! Loss and embedding-space gradient for one local training episode.
//!
//! One episode embeds support, labeled-query and unlabeled-query samples in
//! a single batch. Prototypes are the support means, so the loss gradient
//! flows into query rows directly and into support rows through the
//! prototypes; the resulting d(loss)/d(embeddings) is handed to the network
//! backward pass. Pseudo-labels are targets and receive no gradient.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::ops::{softmax_row_in_place, PROB_FLOOR};
use crate::numerics::Tensor;

use super::{ClassId, DistanceKind, PrototypeSet, SoftLabel};

/// Row ranges of one episode batch inside the embedded tensor.
#[derive(Clone, Debug, Default)]
pub struct EpisodeLayout {
    pub support: BTreeMap<ClassId, Range<usize>>,
    pub labeled_query: BTreeMap<ClassId, Range<usize>>,
    pub unlabeled: Range<usize>,
}

/// Where the episode's prototypes come from.
pub enum EpisodeProtos<'a> {
    /// Class means of the support rows; gradient flows through them.
    FromSupport,
    /// Externally provided constants (no gradient), e.g. averaged helper
    /// prototypes.
    Fixed(&'a BTreeMap<ClassId, Vec<f32>>),
}

/// Episode result: the two loss terms (the unlabeled one reported without
/// its weight) and the gradient of `labeled + lambda * unlabeled` w.r.t.
/// every embedding row.
#[derive(Debug)]
pub struct EpisodeLoss {
    pub labeled: f32,
    pub unlabeled: f32,
    pub n_unlabeled: usize,
    pub grad: Tensor,
}

/// Prototype vectors of one episode plus their class ids, in class order.
struct ProtoBank {
    classes: Vec<ClassId>,
    vectors: Vec<Vec<f32>>,
}

impl ProtoBank {
    fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&k| k == class)
    }
}

enum QueryTarget<'a> {
    OneHot(usize),
    Soft(&'a SoftLabel),
}

/// Computes the episode loss and its gradient w.r.t. the embeddings.
///
/// `pseudo` must hold one soft label per unlabeled row; pass an empty slice
/// (or `lambda == 0`) to drop the unlabeled term.
pub fn episode_loss_and_grad(
    embeddings: &Tensor,
    layout: &EpisodeLayout,
    protos: EpisodeProtos<'_>,
    pseudo: &[SoftLabel],
    lambda: f64,
    distance: DistanceKind,
) -> Result<EpisodeLoss> {
    let dim = embeddings.cols();
    let from_support = matches!(protos, EpisodeProtos::FromSupport);
    let bank = match protos {
        EpisodeProtos::FromSupport => {
            let mut classes = Vec::new();
            let mut vectors = Vec::new();
            for (&class, range) in &layout.support {
                if range.is_empty() {
                    return Err(Error::EmptySupport { class });
                }
                let mut mean = vec![0.0f32; dim];
                for r in range.clone() {
                    for (m, &v) in mean.iter_mut().zip(embeddings.row(r)) {
                        *m += v;
                    }
                }
                let n = range.len() as f32;
                for m in &mut mean {
                    *m /= n;
                }
                classes.push(class);
                vectors.push(mean);
            }
            ProtoBank { classes, vectors }
        }
        EpisodeProtos::Fixed(map) => ProtoBank {
            classes: map.keys().copied().collect(),
            vectors: map.values().cloned().collect(),
        },
    };
    if bank.classes.is_empty() {
        return Err(Error::EmptyInput("episode without prototypes".into()));
    }

    let n_labeled: usize = layout.labeled_query.values().map(|r| r.len()).sum();
    if n_labeled == 0 {
        return Err(Error::EmptyInput("episode without labeled queries".into()));
    }
    let use_unlabeled = lambda > 0.0 && !pseudo.is_empty();
    if use_unlabeled && pseudo.len() != layout.unlabeled.len() {
        return Err(Error::shape(
            "episode pseudo-labels",
            layout.unlabeled.len(),
            pseudo.len(),
        ));
    }

    let mut grad = Tensor::zeros(embeddings.shape());
    let mut dproto = vec![vec![0.0f32; dim]; bank.vectors.len()];
    let mut labeled_total = 0.0f64;
    let mut unlabeled_total = 0.0f64;

    // Labeled queries: one-hot targets, gradient weight 1/n_labeled.
    let w_labeled = (1.0 / n_labeled as f64) as f32;
    for (&class, range) in &layout.labeled_query {
        let target_idx = bank.index_of(class).ok_or_else(|| {
            Error::Config(format!("queries for class {class} but no prototype for it"))
        })?;
        for r in range.clone() {
            labeled_total += query_grad(
                embeddings.row(r),
                QueryTarget::OneHot(target_idx),
                &bank,
                distance,
                w_labeled,
                grad.row_mut(r),
                &mut dproto,
            );
        }
    }

    // Unlabeled queries: pseudo-label targets, gradient weight
    // lambda/n_unlabeled.
    let mut n_unlabeled = 0usize;
    if use_unlabeled {
        n_unlabeled = layout.unlabeled.len();
        let w_unlabeled = (lambda / n_unlabeled as f64) as f32;
        for (offset, r) in layout.unlabeled.clone().enumerate() {
            unlabeled_total += query_grad(
                embeddings.row(r),
                QueryTarget::Soft(&pseudo[offset]),
                &bank,
                distance,
                w_unlabeled,
                grad.row_mut(r),
                &mut dproto,
            );
        }
    }

    // Route prototype gradients into the support rows that produced them.
    if from_support {
        for (bi, &class) in bank.classes.iter().enumerate() {
            let range = &layout.support[&class];
            let inv_n = 1.0 / range.len() as f32;
            for r in range.clone() {
                for (g, &dp) in grad.row_mut(r).iter_mut().zip(&dproto[bi]) {
                    *g += dp * inv_n;
                }
            }
        }
    }

    let labeled = (labeled_total / n_labeled as f64) as f32;
    let unlabeled = if n_unlabeled > 0 {
        (unlabeled_total / n_unlabeled as f64) as f32
    } else {
        0.0
    };
    if !labeled.is_finite() || !unlabeled.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("episode loss".into()));
    }
    Ok(EpisodeLoss {
        labeled,
        unlabeled,
        n_unlabeled,
        grad,
    })
}

/// Cross-entropy of one query against the prototype posteriors.
///
/// Accumulates `weight` times the loss gradient into `grad_row` (w.r.t. the
/// query embedding) and `dproto` (w.r.t. each prototype); returns the raw,
/// unweighted per-point loss.
fn query_grad(
    embedding: &[f32],
    target: QueryTarget<'_>,
    bank: &ProtoBank,
    distance: DistanceKind,
    weight: f32,
    grad_row: &mut [f32],
    dproto: &mut [Vec<f32>],
) -> f64 {
    let m = bank.vectors.len();
    let mut logits = vec![0.0f32; m];
    let mut dists = vec![0.0f32; m];
    for (j, c) in bank.vectors.iter().enumerate() {
        let d = distance.eval(embedding, c);
        dists[j] = d;
        logits[j] = -d;
    }
    softmax_row_in_place(&mut logits);
    let probs = logits;

    // Per-point loss and delta_j = dCE/d(logit_j) over the present classes.
    // Target mass on classes without a prototype contributes a constant
    // floor penalty and no gradient.
    let mut loss;
    let mut delta = vec![0.0f32; m];
    match target {
        QueryTarget::OneHot(ti) => {
            loss = -((probs[ti] as f64).max(PROB_FLOOR)).ln();
            for j in 0..m {
                delta[j] = probs[j];
            }
            delta[ti] -= 1.0;
        }
        QueryTarget::Soft(label) => {
            loss = 0.0;
            let mut present_mass = 0.0f32;
            for (j, &class) in bank.classes.iter().enumerate() {
                let t = label.probs()[class];
                if t > 0.0 {
                    loss -= t as f64 * (probs[j] as f64).max(PROB_FLOOR).ln();
                }
                present_mass += t;
            }
            let absent_mass = (1.0 - present_mass).max(0.0);
            if absent_mass > 1e-6 {
                loss -= absent_mass as f64 * PROB_FLOOR.ln();
            }
            for j in 0..m {
                delta[j] = present_mass * probs[j] - label.probs()[bank.classes[j]];
            }
        }
    }

    // Chain delta through logit_j = -d(e, c_j).
    for j in 0..m {
        let dj = delta[j] * weight;
        if dj == 0.0 {
            continue;
        }
        let c = &bank.vectors[j];
        match distance {
            DistanceKind::SquaredEuclidean => {
                // d(logit)/de = -2(e - c), d(logit)/dc = 2(e - c).
                for k in 0..embedding.len() {
                    let diff = embedding[k] - c[k];
                    grad_row[k] += dj * -2.0 * diff;
                    dproto[j][k] += dj * 2.0 * diff;
                }
            }
            DistanceKind::Euclidean => {
                // d(logit)/de = -(e - c)/d, with the distance floored away
                // from zero.
                let denom = dists[j].max(1e-8);
                for k in 0..embedding.len() {
                    let diff = (embedding[k] - c[k]) / denom;
                    grad_row[k] += dj * -diff;
                    dproto[j][k] += dj * diff;
                }
            }
        }
    }
    loss
}

/// Per-class mean of helper prototypes, used by the global-prototype client
/// variant as a fixed support set.
pub(crate) fn average_helper_prototypes(
    helpers: &[PrototypeSet],
) -> Result<BTreeMap<ClassId, Vec<f32>>> {
    if helpers.is_empty() {
        return Err(Error::EmptyInput("average_helper_prototypes: no helpers".into()));
    }
    let dim = helpers[0].embedding_dim();
    let mut acc: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for h in helpers {
        for (class, proto) in h.iter() {
            let entry = acc.entry(class).or_insert_with(|| (vec![0.0; dim], 0));
            for (a, &v) in entry.0.iter_mut().zip(proto.data()) {
                *a += v as f64;
            }
            entry.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(class, (sum, n))| {
            (
                class,
                sum.iter().map(|&v| (v / n as f64) as f32).collect(),
            )
        })
        .collect())
}
