use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, log_add};
use crate::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Transducer output lattice: log-probabilities over `C` classes at every
/// `(frame t, labels emitted u)` node, `t < T`, `u ≤ U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    label_len: usize,
    classes: usize,
    data: Vec<f64>,
}

impl Lattice {
    pub fn new(frames: usize, label_len: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 || data.len() != frames * (label_len + 1) * classes {
            return Err(Error::DimensionMismatch(alloc::format!(
                "lattice {frames}×{}×{classes} with {} values",
                label_len + 1,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            label_len,
            classes,
            data,
        })
    }

    pub(crate) fn zeros(frames: usize, label_len: usize, classes: usize) -> Self {
        Self {
            frames,
            label_len,
            classes,
            data: vec![0.0; frames * (label_len + 1) * classes],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn label_len(&self) -> usize {
        self.label_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let start = (t * (self.label_len + 1) + u) * self.classes;
        &self.data[start..start + self.classes]
    }

    pub fn node_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let start = (t * (self.label_len + 1) + u) * self.classes;
        &mut self.data[start..start + self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

/// Transducer negative log-likelihood of `labels`, with its gradient with
/// respect to the pre-softmax joint logits at every node.
pub fn rnnt_loss(lattice: &Lattice, labels: &[usize], blank: usize) -> Result<(f64, Lattice)> {
    let (t_len, u_len, classes) = (lattice.frames, lattice.label_len, lattice.classes);
    if labels.len() != u_len {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} labels for a lattice of {u_len}",
            labels.len()
        )));
    }
    if blank >= classes || labels.iter().any(|&l| l >= classes || l == blank) {
        return Err(Error::DimensionMismatch(
            "label outside the token range".into(),
        ));
    }
    let w = u_len + 1;
    let blank_at = |t: usize, u: usize| lattice.node(t, u)[blank];
    let emit_at = |t: usize, u: usize| lattice.node(t, u)[labels[u]];

    let mut alpha = vec![NEG_INF; t_len * w];
    for t in 0..t_len {
        for u in 0..w {
            alpha[t * w + u] = if t == 0 && u == 0 {
                0.0
            } else {
                let mut a = NEG_INF;
                if t > 0 {
                    a = alpha[(t - 1) * w + u] + blank_at(t - 1, u);
                }
                if u > 0 {
                    a = log_add(a, alpha[t * w + u - 1] + emit_at(t, u - 1));
                }
                a
            };
        }
    }
    let log_p = alpha[(t_len - 1) * w + u_len] + blank_at(t_len - 1, u_len);
    let mut grad = Lattice::zeros(t_len, u_len, classes);
    if log_p == NEG_INF {
        return Ok((f64::INFINITY, grad));
    }

    // beta[t][u]: log-prob of finishing from node (t, u), including its own emission.
    let mut beta = vec![NEG_INF; t_len * w];
    for t in (0..t_len).rev() {
        for u in (0..w).rev() {
            beta[t * w + u] = if t == t_len - 1 && u == u_len {
                blank_at(t, u)
            } else {
                let mut b = NEG_INF;
                if t + 1 < t_len {
                    b = beta[(t + 1) * w + u] + blank_at(t, u);
                }
                if u < u_len {
                    b = log_add(b, beta[t * w + u + 1] + emit_at(t, u));
                }
                b
            };
        }
    }

    for t in 0..t_len {
        for u in 0..w {
            let a = alpha[t * w + u];
            let node_occ = a + beta[t * w + u] - log_p;
            if node_occ == NEG_INF {
                continue;
            }
            let occ = exp(node_occ);
            let lp = lattice.node(t, u);
            let g = grad.node_mut(t, u);
            for (gk, &l) in g.iter_mut().zip(lp) {
                *gk = occ * exp(l);
            }
            let blank_next = if t + 1 < t_len {
                beta[(t + 1) * w + u]
            } else if u == u_len {
                0.0
            } else {
                NEG_INF
            };
            if blank_next > NEG_INF {
                g[blank] -= exp(a + lp[blank] + blank_next - log_p);
            }
            if u < u_len {
                g[labels[u]] -= exp(a + lp[labels[u]] + beta[t * w + u + 1] - log_p);
            }
        }
    }
    Ok((-log_p, grad))
}
