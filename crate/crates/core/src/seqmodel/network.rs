use alloc::vec;
use alloc::vec::Vec;

use super::decode::{collapse, CollapseRule};
use super::params::{views, views_mut, Arch, Dims, ModelParams, Views, ViewsMut};
use super::rnnt::Lattice;
use super::PosteriorSeq;
use crate::linalg::{matvec, matvec_t_acc, outer_acc, Matrix};
use crate::math::{argmax, log_softmax_in_place, tanh};
use crate::{Error, Result};

/// Cap on tokens a transducer may emit at one frame during greedy decoding.
pub const MAX_SYMBOLS_PER_FRAME: usize = 3;

pub(crate) fn check_input(p: &ModelParams, x: &Matrix) -> Result<()> {
    if x.cols() != p.dims.input || x.rows() == 0 {
        return Err(Error::DimensionMismatch(alloc::format!(
            "features are {}×{}, model expects T×{}",
            x.rows(),
            x.cols(),
            p.dims.input
        )));
    }
    Ok(())
}

fn run_encoder(v: &Views, dims: Dims, x: &Matrix) -> Matrix {
    let h_dim = dims.hidden;
    let mut hidden = Matrix::zeros(x.rows(), h_dim);
    let mut a = vec![0.0; h_dim];
    for t in 0..x.rows() {
        matvec(v.in_w, x.row(t), &mut a);
        if t > 0 {
            matvec_acc(v.rec_w, hidden.row(t - 1), &mut a);
        }
        let h = hidden.row_mut(t);
        for ((hi, ai), bi) in h.iter_mut().zip(&a).zip(v.hid_b) {
            *hi = tanh(ai + bi);
        }
    }
    hidden
}

/// `out += w · x` for a row-major `w`.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += crate::linalg::dot(row, x);
    }
}

/// Back-propagates `dh` (loss gradient at every hidden state from the layers
/// above) through the tanh recurrence.
fn encoder_backward(
    v: &Views,
    dims: Dims,
    x: &Matrix,
    hidden: &Matrix,
    dh: &Matrix,
    mut g: Option<&mut ViewsMut>,
    mut dx: Option<&mut Matrix>,
) {
    let h_dim = dims.hidden;
    let mut carry = vec![0.0; h_dim];
    let mut da = vec![0.0; h_dim];
    for t in (0..x.rows()).rev() {
        let h = hidden.row(t);
        for i in 0..h_dim {
            da[i] = (dh.get(t, i) + carry[i]) * (1.0 - h[i] * h[i]);
        }
        if let Some(g) = g.as_deref_mut() {
            outer_acc(&da, x.row(t), g.in_w);
            if t > 0 {
                outer_acc(&da, hidden.row(t - 1), g.rec_w);
            }
            for (gb, d) in g.hid_b.iter_mut().zip(&da) {
                *gb += d;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            matvec_t_acc(v.in_w, &da, dx.row_mut(t));
        }
        carry.iter_mut().for_each(|c| *c = 0.0);
        matvec_t_acc(v.rec_w, &da, &mut carry);
    }
}

pub(crate) struct FrameTrace {
    hidden: Option<Matrix>,
    pub log_probs: Matrix,
}

/// Frame-synchronous forward pass (frame classifier or CTC model).
pub(crate) fn frame_forward(p: &ModelParams, x: &Matrix) -> Result<FrameTrace> {
    check_input(p, x)?;
    let v = views(p.arch, p.dims, &p.values);
    let c = p.dims.classes();
    let hidden = match p.arch {
        Arch::FrameClassifier => None,
        Arch::Ctc => Some(run_encoder(&v, p.dims, x)),
        Arch::Rnnt => {
            return Err(Error::InvalidConfig(
                "transducer has no frame-synchronous output".into(),
            ))
        }
    };
    let mut log_probs = Matrix::zeros(x.rows(), c);
    for t in 0..x.rows() {
        let input = hidden.as_ref().map_or(x.row(t), |h| h.row(t));
        let z = log_probs.row_mut(t);
        matvec(v.out_w, input, z);
        for (zi, bi) in z.iter_mut().zip(v.out_b) {
            *zi += bi;
        }
        log_softmax_in_place(z);
    }
    Ok(FrameTrace { hidden, log_probs })
}

/// Accumulates parameter and/or input gradients given `dz`, the loss gradient
/// with respect to the output logits.
pub(crate) fn frame_backward(
    p: &ModelParams,
    x: &Matrix,
    trace: &FrameTrace,
    dz: &Matrix,
    grad: Option<&mut [f64]>,
    mut dx: Option<&mut Matrix>,
) {
    let v = views(p.arch, p.dims, &p.values);
    let mut g = grad.map(|g| views_mut(p.arch, p.dims, g));
    match &trace.hidden {
        None => {
            for t in 0..x.rows() {
                let d = dz.row(t);
                if let Some(g) = g.as_mut() {
                    outer_acc(d, x.row(t), g.out_w);
                    for (gb, di) in g.out_b.iter_mut().zip(d) {
                        *gb += di;
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    matvec_t_acc(v.out_w, d, dx.row_mut(t));
                }
            }
        }
        Some(hidden) => {
            let mut dh = Matrix::zeros(x.rows(), p.dims.hidden);
            for t in 0..x.rows() {
                let d = dz.row(t);
                if let Some(g) = g.as_mut() {
                    outer_acc(d, hidden.row(t), g.out_w);
                    for (gb, di) in g.out_b.iter_mut().zip(d) {
                        *gb += di;
                    }
                }
                matvec_t_acc(v.out_w, d, dh.row_mut(t));
            }
            encoder_backward(&v, p.dims, x, hidden, &dh, g.as_mut(), dx);
        }
    }
}

pub(crate) struct TransducerTrace {
    hidden: Matrix,
    pred: Matrix,
    pub lattice: Lattice,
}

fn prediction_step(v: &Views, prev: &[f64], token: Option<usize>, out: &mut [f64]) {
    let h_dim = out.len();
    out.copy_from_slice(v.pred_b);
    if let Some(k) = token {
        matvec_acc(v.pred_w, prev, out);
        for (o, e) in out.iter_mut().zip(&v.embed[k * h_dim..(k + 1) * h_dim]) {
            *o += e;
        }
    }
    out.iter_mut().for_each(|o| *o = tanh(*o));
}

fn project(w: &[f64], states: &Matrix, classes: usize, bias: Option<&[f64]>) -> Matrix {
    let mut out = Matrix::zeros(states.rows(), classes);
    for r in 0..states.rows() {
        let o = out.row_mut(r);
        matvec(w, states.row(r), o);
        if let Some(b) = bias {
            for (oi, bi) in o.iter_mut().zip(b) {
                *oi += bi;
            }
        }
    }
    out
}

pub(crate) fn transducer_forward(
    p: &ModelParams,
    x: &Matrix,
    labels: &[usize],
) -> Result<TransducerTrace> {
    check_input(p, x)?;
    if p.arch != Arch::Rnnt {
        return Err(Error::InvalidConfig("lattice requires a transducer".into()));
    }
    if labels.iter().any(|&l| l >= p.dims.vocab) {
        return Err(Error::DimensionMismatch(
            "label outside the token range".into(),
        ));
    }
    let v = views(p.arch, p.dims, &p.values);
    let (h_dim, c) = (p.dims.hidden, p.dims.classes());
    let hidden = run_encoder(&v, p.dims, x);
    let mut pred = Matrix::zeros(labels.len() + 1, h_dim);
    prediction_step(&v, &[], None, pred.row_mut(0));
    for (u, &k) in labels.iter().enumerate() {
        let prev = pred.row(u).to_vec();
        prediction_step(&v, &prev, Some(k), pred.row_mut(u + 1));
    }
    let enc_proj = project(v.out_w, &hidden, c, Some(v.out_b));
    let pred_proj = project(v.joint_pred, &pred, c, None);
    let mut lattice = Lattice::zeros(x.rows(), labels.len(), c);
    for t in 0..x.rows() {
        for u in 0..=labels.len() {
            let z = lattice.node_mut(t, u);
            for ((zi, e), q) in z.iter_mut().zip(enc_proj.row(t)).zip(pred_proj.row(u)) {
                *zi = e + q;
            }
            log_softmax_in_place(z);
        }
    }
    Ok(TransducerTrace {
        hidden,
        pred,
        lattice,
    })
}

pub(crate) fn transducer_backward(
    p: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    trace: &TransducerTrace,
    dz: &Lattice,
    grad: Option<&mut [f64]>,
    dx: Option<&mut Matrix>,
) {
    let v = views(p.arch, p.dims, &p.values);
    let mut g = grad.map(|g| views_mut(p.arch, p.dims, g));
    let (t_len, u_len, c, h_dim) = (x.rows(), labels.len(), p.dims.classes(), p.dims.hidden);
    // The joint is additive, so its gradients factor through row and column sums.
    let mut dz_t = Matrix::zeros(t_len, c);
    let mut dz_u = Matrix::zeros(u_len + 1, c);
    for t in 0..t_len {
        for u in 0..=u_len {
            let d = dz.node(t, u);
            for (a, b) in dz_t.row_mut(t).iter_mut().zip(d) {
                *a += b;
            }
            for (a, b) in dz_u.row_mut(u).iter_mut().zip(d) {
                *a += b;
            }
        }
    }
    let mut dh = Matrix::zeros(t_len, h_dim);
    for t in 0..t_len {
        let d = dz_t.row(t);
        if let Some(g) = g.as_mut() {
            outer_acc(d, trace.hidden.row(t), g.out_w);
            for (gb, di) in g.out_b.iter_mut().zip(d) {
                *gb += di;
            }
        }
        matvec_t_acc(v.out_w, d, dh.row_mut(t));
    }
    if let Some(g) = g.as_mut() {
        let mut carry = vec![0.0; h_dim];
        let mut dg = vec![0.0; h_dim];
        let mut da = vec![0.0; h_dim];
        for u in (0..=u_len).rev() {
            dg.iter_mut().for_each(|d| *d = 0.0);
            matvec_t_acc(v.joint_pred, dz_u.row(u), &mut dg);
            outer_acc(dz_u.row(u), trace.pred.row(u), g.joint_pred);
            let gu = trace.pred.row(u);
            for i in 0..h_dim {
                da[i] = (dg[i] + carry[i]) * (1.0 - gu[i] * gu[i]);
            }
            for (gb, d) in g.pred_b.iter_mut().zip(&da) {
                *gb += d;
            }
            carry.iter_mut().for_each(|c| *c = 0.0);
            if u > 0 {
                let k = labels[u - 1];
                for (ge, d) in g.embed[k * h_dim..(k + 1) * h_dim].iter_mut().zip(&da) {
                    *ge += d;
                }
                outer_acc(&da, trace.pred.row(u - 1), g.pred_w);
                matvec_t_acc(v.pred_w, &da, &mut carry);
            }
        }
    }
    encoder_backward(&v, p.dims, x, &trace.hidden, &dh, g.as_mut(), dx);
}

/// Full transducer lattice of log-probabilities for a label sequence.
pub fn transducer_lattice(p: &ModelParams, features: &Matrix, labels: &[usize]) -> Result<Lattice> {
    Ok(transducer_forward(p, features, labels)?.lattice)
}

/// Greedy transducer decode; also returns, per frame, the joint
/// distribution at the first evaluation of that frame.
fn transducer_greedy(p: &ModelParams, x: &Matrix) -> Result<(Vec<usize>, Matrix)> {
    check_input(p, x)?;
    let v = views(p.arch, p.dims, &p.values);
    let (h_dim, c, blank) = (p.dims.hidden, p.dims.classes(), p.dims.blank());
    let hidden = run_encoder(&v, p.dims, x);
    let enc_proj = project(v.out_w, &hidden, c, Some(v.out_b));
    let mut g = vec![0.0; h_dim];
    prediction_step(&v, &[], None, &mut g);
    let mut gp = vec![0.0; c];
    matvec(v.joint_pred, &g, &mut gp);
    let mut frames = Matrix::zeros(x.rows(), c);
    let mut tokens = Vec::new();
    let mut z = vec![0.0; c];
    let mut next = vec![0.0; h_dim];
    for t in 0..x.rows() {
        for emitted in 0..=MAX_SYMBOLS_PER_FRAME {
            for ((zi, e), q) in z.iter_mut().zip(enc_proj.row(t)).zip(&gp) {
                *zi = e + q;
            }
            log_softmax_in_place(&mut z);
            if emitted == 0 {
                frames.row_mut(t).copy_from_slice(&z);
            }
            let k = argmax(&z);
            if k == blank || emitted == MAX_SYMBOLS_PER_FRAME {
                break;
            }
            tokens.push(k);
            prediction_step(&v, &g, Some(k), &mut next);
            core::mem::swap(&mut g, &mut next);
            matvec(v.joint_pred, &g, &mut gp);
        }
    }
    Ok((tokens, frames))
}

/// `T × C` per-frame log-posteriors. For a transducer these are the joint
/// distributions at the first evaluation of each frame along its own greedy
/// decode.
pub fn frame_log_posteriors(p: &ModelParams, features: &Matrix) -> Result<Matrix> {
    match p.arch {
        Arch::Rnnt => Ok(transducer_greedy(p, features)?.1),
        _ => Ok(frame_forward(p, features)?.log_probs),
    }
}

pub fn forward(p: &ModelParams, features: &Matrix) -> Result<PosteriorSeq> {
    Ok(PosteriorSeq::from_log_probs(&frame_log_posteriors(
        p, features,
    )?))
}

/// Greedy token decode: CTC collapse of per-frame argmaxes, or greedy
/// transducer search.
pub fn decode(p: &ModelParams, features: &Matrix) -> Result<Vec<usize>> {
    match p.arch {
        Arch::Rnnt => Ok(transducer_greedy(p, features)?.0),
        _ => {
            let lp = frame_forward(p, features)?.log_probs;
            let frames: Vec<usize> = lp.iter_rows().map(argmax).collect();
            Ok(collapse(&frames, CollapseRule::Ctc, p.dims.blank()))
        }
    }
}

impl Arch {
    /// Collapse rule matching the model's own decoding.
    pub fn collapse_rule(&self) -> CollapseRule {
        match self {
            Arch::Rnnt => CollapseRule::DropBlanks,
            _ => CollapseRule::Ctc,
        }
    }
}
