//! Sample pair attention and the training losses.
//!
//! Similarities are cosine scores divided by a learned temperature and
//! softmax-normalized per row, then multiplied entrywise by a learned gate
//! `sigmoid(A)` indexed by batch positions. The contrastive loss takes the
//! negative log of the gated diagonal in both directions.

use crate::nn::{Graph, Tensor, Var};
use crate::taxonomy::OneHotLabel;

/// Gated and ungated similarity matrices of one batch, all `b x b`.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityPair {
    pub s_v2l: Var,
    pub s_l2v: Var,
    pub ungated_v2l: Var,
    pub ungated_l2v: Var,
    /// Logarithms of the gated matrices, computed stably.
    pub log_v2l: Var,
    pub log_l2v: Var,
}

/// `log_tau` is a one-element variable; `gate` is the `b x b` matrix `A`,
/// or `None` for ungated similarities.
pub fn spa_forward(g: &mut Graph, x_v: Var, t_l: Var, log_tau: Var, gate: Option<Var>) -> SimilarityPair {
    let xn = g.row_l2_normalize(x_v);
    let tn = g.row_l2_normalize(t_l);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let sim = g.matmul_nt(xn, tn);
    let logits = g.mul_scalar_var(sim, inv_tau);
    let logits_t = g.transpose(logits);
    let ungated_v2l = g.softmax(logits);
    let ungated_l2v = g.softmax(logits_t);
    let mut log_v2l = g.log_softmax(logits);
    let mut log_l2v = g.log_softmax(logits_t);
    let (s_v2l, s_l2v) = match gate {
        Some(a) => {
            let sg = g.sigmoid(a);
            let lsg = g.log_sigmoid(a);
            log_v2l = g.add(log_v2l, lsg);
            log_l2v = g.add(log_l2v, lsg);
            (g.mul(ungated_v2l, sg), g.mul(ungated_l2v, sg))
        }
        None => (ungated_v2l, ungated_l2v),
    };
    SimilarityPair {
        s_v2l,
        s_l2v,
        ungated_v2l,
        ungated_l2v,
        log_v2l,
        log_l2v,
    }
}

/// `(L_v2l + L_l2v) / 2` with `L = -(1/b) sum_i log S_ii`.
pub fn cmc_loss(g: &mut Graph, pair: &SimilarityPair) -> Var {
    let dv = g.diag(pair.log_v2l);
    let dl = g.diag(pair.log_l2v);
    let mv = g.mean(dv);
    let ml = g.mean(dl);
    let s = g.add(mv, ml);
    g.scale(s, -0.5)
}

/// Mean over rows of `KL(softmax(T_l / t) || softmax(T_pre / t))`, with `T_l`
/// held constant.
pub fn kl_loss(g: &mut Graph, t_pre: Var, t_l: Var, temperature: f64) -> Var {
    let b = g.shape(t_pre)[0] as f64;
    let target = g.detach(t_l);
    let zt = g.scale(target, 1.0 / temperature);
    let zp = g.scale(t_pre, 1.0 / temperature);
    let lt = g.log_softmax(zt);
    let lp = g.log_softmax(zp);
    let pt = g.exp(lt);
    let diff = g.sub(lt, lp);
    let terms = g.mul(pt, diff);
    let s = g.sum(terms);
    g.scale(s, 1.0 / b)
}

/// Mean cross-entropy of `b x 2` logits against one-hot labels.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[OneHotLabel]) -> Var {
    let b = labels.len();
    assert_eq!(g.shape(logits), &[b, 2]);
    let y: Vec<f64> = labels.iter().flat_map(|l| l.as_f64()).collect();
    let y = g.input(Tensor::new(&[b, 2], y).unwrap());
    let lp = g.log_softmax(logits);
    let picked = g.mul(lp, y);
    let s = g.sum(picked);
    g.scale(s, -1.0 / b as f64)
}

/// Loss graph nodes of one step; inactive terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub kl: Option<Var>,
    pub cmc: Option<Var>,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub cmc: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        let v = |x: Var| g.value(x).data()[0];
        LossParts {
            total: v(self.total),
            ce: v(self.ce),
            kl: self.kl.map_or(0.0, v),
            cmc: self.cmc.map_or(0.0, v),
        }
    }
}

/// Weighted sum of the active terms.
pub fn total_loss(g: &mut Graph, ce: Var, kl: Option<Var>, cmc: Option<Var>, weights: [f64; 3]) -> LossVars {
    let mut total = g.scale(ce, weights[0]);
    if let Some(k) = kl {
        let k = g.scale(k, weights[1]);
        total = g.add(total, k);
    }
    if let Some(c) = cmc {
        let c = g.scale(c, weights[2]);
        total = g.add(total, c);
    }
    LossVars { total, ce, kl, cmc }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn input(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
        g.input(Init::new(seed).trunc_normal(shape, 1.0))
    }

    #[test]
    fn uniform_features_hit_the_landmark() {
        for b in [2usize, 4, 7] {
            let mut g = Graph::new();
            let x = g.input(Tensor::full(&[b, 8], 0.3));
            let t = g.input(Tensor::full(&[b, 8], 0.3));
            let lt = g.input(Tensor::scalar(0.07f64.ln()));
            let a = g.input(Tensor::zeros(&[b, b]));
            let pair = spa_forward(&mut g, x, t, lt, Some(a));
            for &s in g.value(pair.s_v2l).data() {
                assert!((s - 0.5 / b as f64).abs() < 1e-12);
            }
            let l = cmc_loss(&mut g, &pair);
            let want = (b as f64).ln() + 2f64.ln();
            assert!((g.value(l).data()[0] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn sharp_temperature_on_orthonormal_rows() {
        let mut g = Graph::new();
        let eye = Tensor::from_fn(&[4, 4], |i| (i % 5 == 0) as u8 as f64);
        let x = g.input(eye.clone());
        let t = g.input(eye);
        let lt = g.input(Tensor::scalar(0.01f64.ln()));
        let a = g.input(Tensor::zeros(&[4, 4]));
        let pair = spa_forward(&mut g, x, t, lt, Some(a));
        let s = g.value(pair.s_v2l);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((s.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let l = cmc_loss(&mut g, &pair);
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let x = input(&mut g, &[3, 5], 1);
        let k = kl_loss(&mut g, x, x, 0.5);
        assert!(g.value(k).data()[0].abs() < 1e-12);
        let y = input(&mut g, &[3, 5], 2);
        let k = kl_loss(&mut g, x, y, 0.5);
        assert!(g.value(k).data()[0] > 0.0);
    }

    #[test]
    fn ce_landmarks() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[3, 2]));
        let labels = [OneHotLabel::REAL, OneHotLabel::FAKE, OneHotLabel::FAKE];
        let l = ce_loss(&mut g, z, &labels);
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        let sat: Vec<f64> = labels.iter().flat_map(|l| l.as_f64().map(|v| 100.0 * v)).collect();
        let s = g.input(Tensor::new(&[3, 2], sat).unwrap());
        let l = ce_loss(&mut g, s, &labels);
        assert!(g.value(l).data()[0] < 1e-40);
    }

    #[test]
    fn ungated_rows_are_stochastic() {
        let mut g = Graph::new();
        let x = input(&mut g, &[5, 8], 3);
        let t = input(&mut g, &[5, 8], 4);
        let lt = g.input(Tensor::scalar(0.07f64.ln()));
        let pair = spa_forward(&mut g, x, t, lt, None);
        for m in [pair.ungated_v2l, pair.ungated_l2v] {
            for r in g.value(m).data().chunks(5) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
