//! Class anchor margin loss.
//!
//! Three components act on a set of learnable class anchors `c_1..c_t`:
//!
//! - attractor `½‖e − c_y‖²`, pulling each embedding to its class anchor;
//! - repeller `½ Σ_{y≠y'} max(0, 2m − ‖c_y − c_y'‖)²` over ordered pairs,
//!   pushing anchors at least `2m` apart;
//! - minimum norm `½ Σ_y max(0, p − ‖c_y‖)²`, keeping anchors off the origin.
//!
//! Only the attractor depends on the data, so encoder weights receive gradient
//! from it alone; anchors receive gradient from all three.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{l2_norm, squared_distance, Matrix};

/// Learnable class anchors with margin `m` and minimum norm `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Matrix,
    margin: f64,
    min_norm: f64,
}

impl AnchorSet {
    pub fn new(anchors: Matrix, margin: f64, min_norm: f64) -> Result<Self> {
        if anchors.rows() == 0 || anchors.cols() == 0 {
            return Err(Error::invalid("anchor set needs t >= 1 and n >= 1"));
        }
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be > 0, got {margin}")));
        }
        if !(min_norm >= 0.0 && min_norm.is_finite()) {
            return Err(Error::invalid(format!("min norm must be >= 0, got {min_norm}")));
        }
        Ok(Self {
            anchors,
            margin,
            min_norm,
        })
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    #[inline]
    pub fn margin(&self) -> f64 {
        self.margin
    }

    #[inline]
    pub fn min_norm(&self) -> f64 {
        self.min_norm
    }

    #[inline]
    pub fn anchor(&self, class: usize) -> &[f64] {
        self.anchors.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.anchors
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.anchors
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes(),
            });
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::dims(self.dim(), len));
        }
        Ok(())
    }

    /// Smallest distance between two distinct anchors (`inf` for a single anchor).
    pub fn min_pairwise_distance(&self) -> f64 {
        let t = self.num_classes();
        let mut best = f64::INFINITY;
        for i in 0..t {
            for j in i + 1..t {
                best = best.min(squared_distance(self.anchor(i), self.anchor(j)).sqrt());
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub attractor: f64,
    pub repeller: f64,
    pub min_norm: f64,
    pub total: f64,
}

/// Per-source anchor gradients; their sum is `CamGradients::anchor_grads`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGradSources {
    pub attractor: Matrix,
    pub repeller: Matrix,
    pub min_norm: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamGradients {
    /// `∂L/∂e_i`, one row per batch example.
    pub embedding_grads: Matrix,
    /// `∂L/∂c_y`, one row per anchor.
    pub anchor_grads: Matrix,
    pub sources: AnchorGradSources,
}

/// Which anchor regularizers take part in the loss. The attractor is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossComponents {
    pub repeller: bool,
    pub min_norm: bool,
}

impl LossComponents {
    pub const FULL: Self = Self {
        repeller: true,
        min_norm: true,
    };
    pub const ATTRACTOR_ONLY: Self = Self {
        repeller: false,
        min_norm: false,
    };
}

impl Default for LossComponents {
    fn default() -> Self {
        Self::FULL
    }
}

/// `½‖e − c_label‖²`
pub fn attractor_loss(e: &[f64], anchors: &AnchorSet, label: usize) -> Result<f64> {
    anchors.check_label(label)?;
    anchors.check_dim(e.len())?;
    Ok(0.5 * squared_distance(e, anchors.anchor(label)))
}

/// Returns `(∂/∂e, ∂/∂c_label)` of the attractor term: `e − c` and `c − e`.
pub fn attractor_grad(e: &[f64], anchors: &AnchorSet, label: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    anchors.check_label(label)?;
    anchors.check_dim(e.len())?;
    let c = anchors.anchor(label);
    let de: Vec<f64> = e.iter().zip(c).map(|(x, y)| x - y).collect();
    let dc: Vec<f64> = de.iter().map(|v| -v).collect();
    Ok((de, dc))
}

/// Squared-hinge repulsion over ordered anchor pairs.
pub fn repeller_loss(anchors: &AnchorSet) -> f64 {
    let t = anchors.num_classes();
    let reach = 2.0 * anchors.margin();
    let mut sum = 0.0;
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            let d = squared_distance(anchors.anchor(i), anchors.anchor(j)).sqrt();
            let h = (reach - d).max(0.0);
            sum += h * h;
        }
    }
    0.5 * sum
}

/// Exact gradient of [`repeller_loss`].
///
/// Each ordered pair `(y, y')` with `d < 2m` contributes `−(2m − d)(c_y − c_y')/d`
/// to row `y`; since both `(y, y')` and `(y', y)` appear in the loss, every
/// active unordered pair contributes twice that term.
pub fn repeller_grad(anchors: &AnchorSet) -> Result<Matrix> {
    let (t, n) = anchors.matrix().shape();
    let reach = 2.0 * anchors.margin();
    let mut grad = Matrix::zeros(t, n);
    let mut diff = vec![0.0; n];
    for i in 0..t {
        for j in i + 1..t {
            let (ci, cj) = (anchors.anchor(i), anchors.anchor(j));
            let d = squared_distance(ci, cj).sqrt();
            if d >= reach {
                continue;
            }
            if d == 0.0 {
                return Err(Error::RepellerSingularity { a: i, b: j });
            }
            let scale = -2.0 * (reach - d) / d;
            for k in 0..n {
                diff[k] = scale * (ci[k] - cj[k]);
            }
            for (g, v) in grad.row_mut(i).iter_mut().zip(&diff) {
                *g += v;
            }
            for (g, v) in grad.row_mut(j).iter_mut().zip(&diff) {
                *g -= v;
            }
        }
    }
    Ok(grad)
}

/// `½ Σ_y max(0, p − ‖c_y‖)²`
pub fn min_norm_loss(anchors: &AnchorSet) -> f64 {
    let p = anchors.min_norm();
    0.5 * anchors
        .matrix()
        .iter_rows()
        .map(|c| {
            let h = (p - l2_norm(c)).max(0.0);
            h * h
        })
        .sum::<f64>()
}

/// Row `y` is `(1 − p/‖c_y‖)·c_y` when `‖c_y‖ < p`, else zero.
/// The zero anchor is assigned a zero row.
pub fn min_norm_grad(anchors: &AnchorSet) -> Matrix {
    let (t, n) = anchors.matrix().shape();
    let p = anchors.min_norm();
    let mut grad = Matrix::zeros(t, n);
    for y in 0..t {
        let c = anchors.anchor(y);
        let norm = l2_norm(c);
        if norm < p && norm > 0.0 {
            let scale = 1.0 - p / norm;
            for (g, v) in grad.row_mut(y).iter_mut().zip(c) {
                *g = scale * v;
            }
        }
    }
    grad
}

/// Full CAM loss and gradients over a mini-batch.
pub fn cam_batch(embeddings: &Matrix, labels: &[usize], anchors: &AnchorSet) -> Result<(LossBreakdown, CamGradients)> {
    cam_batch_with(embeddings, labels, anchors, LossComponents::FULL)
}

/// Batch loss with the attractor averaged over examples and the anchor
/// regularizers added once. Disabled components contribute zero loss and
/// zero gradient.
pub fn cam_batch_with(
    embeddings: &Matrix,
    labels: &[usize],
    anchors: &AnchorSet,
    components: LossComponents,
) -> Result<(LossBreakdown, CamGradients)> {
    let batch = embeddings.rows();
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != batch {
        return Err(Error::dims(batch, labels.len()));
    }
    anchors.check_dim(embeddings.cols())?;
    for &y in labels {
        anchors.check_label(y)?;
    }

    let (t, n) = anchors.matrix().shape();
    let inv_batch = 1.0 / batch as f64;
    let mut embedding_grads = Matrix::zeros(batch, n);
    let mut attract = Matrix::zeros(t, n);
    let mut attractor = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let e = embeddings.row(i);
        let c = anchors.anchor(y);
        attractor += 0.5 * squared_distance(e, c);
        let eg = embedding_grads.row_mut(i);
        for k in 0..n {
            eg[k] = (e[k] - c[k]) * inv_batch;
        }
        let ag = attract.row_mut(y);
        for k in 0..n {
            ag[k] += (c[k] - e[k]) * inv_batch;
        }
    }
    attractor *= inv_batch;

    let (repeller, repel) = if components.repeller {
        (repeller_loss(anchors), repeller_grad(anchors)?)
    } else {
        (0.0, Matrix::zeros(t, n))
    };
    let (min_norm, norm) = if components.min_norm {
        (min_norm_loss(anchors), min_norm_grad(anchors))
    } else {
        (0.0, Matrix::zeros(t, n))
    };

    let mut anchor_grads = attract.clone();
    for ((g, r), q) in anchor_grads
        .as_mut_slice()
        .iter_mut()
        .zip(repel.as_slice())
        .zip(norm.as_slice())
    {
        *g += r + q;
    }

    let breakdown = LossBreakdown {
        attractor,
        repeller,
        min_norm,
        total: attractor + repeller + min_norm,
    };
    let grads = CamGradients {
        embedding_grads,
        anchor_grads,
        sources: AnchorGradSources {
            attractor: attract,
            repeller: repel,
            min_norm: norm,
        },
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]], m: f64, p: f64) -> AnchorSet {
        AnchorSet::new(Matrix::from_rows(rows).unwrap(), m, p).unwrap()
    }

    // Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + step;
                let up = f(&probe);
                probe[i] = x[i] - step;
                let down = f(&probe);
                probe[i] = x[i];
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn anchor_set_validation() {
        let m = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(AnchorSet::new(m.clone(), 0.0, 1.0).is_err());
        assert!(AnchorSet::new(m.clone(), 1.0, -1.0).is_err());
        assert!(AnchorSet::new(Matrix::zeros(0, 2), 1.0, 1.0).is_err());
        assert!(AnchorSet::new(m, 2.0, 0.0).is_ok());
    }

    #[test]
    fn attractor_examples() {
        let a = set(&[&[0.0, 0.0], &[0.0, 1.0]], 2.0, 1.0);
        assert_eq!(attractor_loss(&[0.0, 1.0], &a, 1).unwrap(), 0.0);
        assert_eq!(attractor_loss(&[1.0, 0.0], &a, 0).unwrap(), 0.5);
        assert_eq!(attractor_loss(&[2.0, 1.0], &a, 1).unwrap(), 2.0);
        assert!(matches!(
            attractor_loss(&[0.0, 0.0], &a, 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn attractor_grad_examples() {
        let a = set(&[&[0.0, 0.0]], 2.0, 1.0);
        let (de, dc) = attractor_grad(&[0.0, 0.0], &a, 0).unwrap();
        assert_eq!((de, dc), (vec![0.0, 0.0], vec![-0.0, -0.0]));
        let (de, dc) = attractor_grad(&[1.0, 0.0], &a, 0).unwrap();
        assert_eq!(de, vec![1.0, 0.0]);
        assert_eq!(dc, vec![-1.0, -0.0]);
        assert!(attractor_grad(&[1.0, 0.0], &a, 1).is_err());
    }

    #[test]
    fn repeller_examples() {
        assert_eq!(repeller_loss(&set(&[&[0.0, 0.0], &[4.0, 0.0]], 2.0, 1.0)), 0.0);
        assert_eq!(repeller_loss(&set(&[&[0.0, 0.0], &[3.0, 0.0]], 2.0, 1.0)), 1.0);
        assert_eq!(repeller_loss(&set(&[&[5.0, -3.0]], 2.0, 1.0)), 0.0);
    }

    #[test]
    fn repeller_grad_examples() {
        let closed = set(&[&[0.0, 0.0], &[4.0, 0.0], &[0.0, 4.0]], 2.0, 1.0);
        assert!(repeller_grad(&closed).unwrap().as_slice().iter().all(|&v| v == 0.0));

        // Both orderings of the pair contribute −(4 − 3)(c_1 − c_2)/3 = (1, 0).
        let a = set(&[&[0.0, 0.0], &[3.0, 0.0]], 2.0, 1.0);
        let g = repeller_grad(&a).unwrap();
        assert_eq!(g.row(0), &[2.0, 0.0]);
        assert_eq!(g.row(1), &[-2.0, 0.0]);

        let num = numeric_grad(a.matrix().as_slice(), 1e-5, |x| {
            repeller_loss(&AnchorSet::new(Matrix::from_vec(2, 2, x.to_vec()).unwrap(), 2.0, 1.0).unwrap())
        });
        for (u, v) in g.as_slice().iter().zip(&num) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn repeller_singularity_surfaces() {
        let a = set(&[&[1.0, 1.0], &[1.0, 1.0]], 2.0, 1.0);
        assert!(matches!(repeller_grad(&a), Err(Error::RepellerSingularity { a: 0, b: 1 })));
    }

    #[test]
    fn min_norm_examples() {
        assert_eq!(min_norm_loss(&set(&[&[3.0, 0.0], &[0.0, -1.0]], 2.0, 1.0)), 0.0);
        assert_eq!(min_norm_loss(&set(&[&[0.5, 0.0]], 2.0, 1.0)), 0.125);
        assert_eq!(min_norm_loss(&set(&[&[0.0, 0.0]], 2.0, 1.0)), 0.5);
    }

    #[test]
    fn min_norm_grad_examples() {
        let g = min_norm_grad(&set(&[&[1.0, 0.0], &[0.5, 0.0], &[0.0, 0.0]], 2.0, 1.0));
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(1), &[-0.5, 0.0]);
        assert_eq!(g.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn cam_batch_global_minimum() {
        let a = set(&[&[3.0, 0.0], &[0.0, 3.0]], 1.0, 1.0);
        let e = Matrix::from_rows(&[[3.0, 0.0]]).unwrap();
        let (loss, g) = cam_batch(&e, &[0], &a).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.embedding_grads.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.anchor_grads.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_batch_attractor_mean() {
        let a = set(&[&[0.0, 0.0], &[0.0, 4.0]], 2.0, 0.0);
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (loss, _) = cam_batch(&e, &[0, 1], &a).unwrap();
        assert_eq!(loss.attractor, 2.5);
        assert_eq!(loss.repeller, 0.0);
        assert_eq!(loss.total, 2.5);
    }

    #[test]
    fn cam_batch_errors() {
        let a = set(&[&[0.0, 0.0]], 2.0, 0.0);
        assert!(matches!(cam_batch(&Matrix::zeros(0, 2), &[], &a), Err(Error::EmptyBatch)));
        assert!(cam_batch(&Matrix::zeros(1, 2), &[1], &a).is_err());
        assert!(cam_batch(&Matrix::zeros(1, 3), &[0], &a).is_err());
    }

    #[test]
    fn disabled_components_contribute_nothing() {
        let a = set(&[&[0.0, 0.1], &[0.2, 0.0]], 2.0, 1.0);
        let e = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let (loss, g) = cam_batch_with(&e, &[0], &a, LossComponents::ATTRACTOR_ONLY).unwrap();
        assert_eq!(loss.repeller, 0.0);
        assert_eq!(loss.min_norm, 0.0);
        assert_eq!(g.anchor_grads, g.sources.attractor);
        let (full, _) = cam_batch(&e, &[0], &a).unwrap();
        assert!(full.repeller > 0.0 && full.min_norm > 0.0);
    }
}
