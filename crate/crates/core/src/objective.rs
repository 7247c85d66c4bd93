//! Training objective: optionally spike-weighted MSE, Gaussian NLL and the
//! alignment, independence and diversity regularizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{ForwardPass, TARGETS};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MseOnly,
    MseNllHomo,
    MseNllHetero,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::MseOnly => "mse_only",
            LossMode::MseNllHomo => "mse_nll_homo",
            LossMode::MseNllHetero => "mse_nll_hetero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda_align: f64,
    pub lambda_ind: f64,
    pub lambda_div: f64,
    /// Extra weight on steps whose target jumps by more than `spike_tau`.
    pub spike_alpha: f64,
    /// Jump threshold in normalized target units.
    pub spike_tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::MseNllHetero,
            lambda_align: 0.1,
            lambda_ind: 0.01,
            lambda_div: 0.1,
            spike_alpha: 0.0,
            spike_tau: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_ind", self.lambda_ind),
            ("lambda_div", self.lambda_div),
            ("spike_alpha", self.spike_alpha),
            ("spike_tau", self.spike_tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: LossMode) -> Self {
        Self { mode, ..self.clone() }
    }
}

/// Mean of `w ⊙ (mu − y)²`.
pub fn mse_loss<T: Scalar>(tape: &Tape<T>, mu: Var, y: Var, weights: Option<Var>) -> Result<Var, TensorError> {
    let sq = squared_error(tape, mu, y, weights)?;
    tape.mean(sq, None)
}

fn squared_error<T: Scalar>(tape: &Tape<T>, mu: Var, y: Var, weights: Option<Var>) -> Result<Var, TensorError> {
    let (sm, sy) = (tape.shape(mu), tape.shape(y));
    if sm != sy {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            left: sm,
            right: sy,
        });
    }
    let sq = tape.square(tape.sub(mu, y)?)?;
    match weights {
        Some(w) => tape.mul(sq, w),
        None => Ok(sq),
    }
}

/// Spike weights `1 + α·1[|y_t − y_{t−1}| > τ]` for targets `B × P × K`;
/// `last` holds the final observed value of each window (`B × K`), which
/// precedes the first target step.
pub fn spike_weights(y: &Tensor<f64>, last: &[f64], alpha: f64, tau: f64) -> Tensor<f64> {
    let s = y.shape();
    let (b, p, k) = (s[0], s[1], s[2]);
    let mut w = vec![1.0; y.len()];
    for wi in 0..b {
        for t in 0..p {
            for c in 0..k {
                let i = (wi * p + t) * k + c;
                let prev = if t == 0 { last[wi * k + c] } else { y.data()[i - k] };
                if (y.data()[i] - prev).abs() > tau {
                    w[i] += alpha;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), w).expect("same shape")
}

/// Mean over all entries of `(y − μ)²/(2σ²) + log σ + ½·log 2π`.
pub fn nll_gaussian<T: Scalar>(tape: &Tape<T>, mu: Var, log_sigma: Var, y: Var) -> Result<Var, TensorError> {
    let sq = tape.square(tape.sub(y, mu)?)?;
    let inv_var = tape.exp(tape.scale(log_sigma, T::lit(-2.0))?)?;
    let terms = tape.add(tape.scale(tape.mul(sq, inv_var)?, T::lit(0.5))?, log_sigma)?;
    tape.offset(tape.mean(terms, None)?, T::lit(HALF_LOG_TWO_PI))
}

/// Gaussian NLL with one log σ per target, broadcast over rows.
pub fn homo_nll<T: Scalar>(tape: &Tape<T>, mu: Var, theta: Var, y: Var) -> Result<Var, TensorError> {
    let zeros = tape.constant(Tensor::zeros(tape.shape(mu)));
    let log_sigma = tape.add(zeros, theta)?;
    nll_gaussian(tape, mu, log_sigma, y)
}

/// Row-wise cosine similarity, and the mask of rows where both inputs have
/// nonzero norm. Masked rows get cosine 0 with zero gradient.
fn row_cosine<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<(Var, Var), TensorError> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "cosine",
            left: sa,
            right: sb,
        });
    }
    let dot = tape.sum(tape.mul(a, b)?, Some(1))?;
    let na = tape.sum(tape.square(a)?, Some(1))?;
    let nb = tape.sum(tape.square(b)?, Some(1))?;
    let mask: Vec<T> = tape.with_value(na, |x| {
        tape.with_value(nb, |y| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| if p > T::zero() && q > T::zero() { T::one() } else { T::zero() })
                .collect()
        })
    });
    let n = mask.len();
    let mask = tape.constant(Tensor::new(vec![n], mask)?);
    let fill = tape.constant(Tensor::new(
        vec![n],
        tape.with_value(mask, |m| m.data().iter().map(|&v| T::one() - v).collect()),
    )?);
    let denom = tape.sqrt(tape.mul(tape.add(na, fill)?, tape.add(nb, fill)?)?)?;
    let cos = tape.div(tape.mul(dot, mask)?, denom)?;
    Ok((cos, mask))
}

/// Mean over rows of `1 − cos(S_e, S_a)`; zero-norm rows contribute 0.
pub fn r_align<T: Scalar>(tape: &Tape<T>, s_e: Var, s_a: Var) -> Result<Var, TensorError> {
    let (cos, mask) = row_cosine(tape, s_e, s_a)?;
    tape.mean(tape.sub(mask, cos)?, None)
}

/// Mean over rows of `cos²(P_e, P_a)`; zero-norm rows contribute 0.
pub fn r_div<T: Scalar>(tape: &Tape<T>, p_e: Var, p_a: Var) -> Result<Var, TensorError> {
    let (cos, _) = row_cosine(tape, p_e, p_a)?;
    tape.mean(tape.square(cos)?, None)
}

/// Squared Frobenius norm of the sample cross-covariance of the columns of
/// `a` and `b` (rows are samples, divisor `n − 1`).
pub fn cross_cov_sq<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let n = tape.shape(a)[0];
    if n < 2 {
        return Err(TensorError::TooFewSamples { needed: 2, got: n });
    }
    let ac = tape.sub(a, tape.mean(a, Some(0))?)?;
    let bc = tape.sub(b, tape.mean(b, Some(0))?)?;
    let cov = tape.scale(tape.matmul(tape.transpose(ac)?, bc)?, T::lit(1.0 / (n - 1) as f64))?;
    tape.sum(tape.square(cov)?, None)
}

/// `‖Cov(F, P_e)‖² + ‖Cov(F, P_a)‖²`.
pub fn r_ind<T: Scalar>(tape: &Tape<T>, f: Var, p_e: Var, p_a: Var) -> Result<Var, TensorError> {
    tape.add(cross_cov_sq(tape, f, p_e)?, cross_cov_sq(tape, f, p_a)?)
}

/// Scalar values of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub nll: f64,
    pub r_align: f64,
    pub r_ind: f64,
    pub r_div: f64,
    pub mse_co2: f64,
    pub mse_pm25: f64,
}

impl LossReport {
    /// Recomputes the total from its parts in the order the graph sums them.
    pub fn reconstruct(&self, cfg: &LossConfig) -> f64 {
        let nll = if cfg.mode == LossMode::MseOnly { 0.0 } else { self.nll };
        self.mse + nll + cfg.lambda_align * self.r_align + cfg.lambda_ind * self.r_ind + cfg.lambda_div * self.r_div
    }

    /// Accumulates `other` weighted by `w`.
    pub fn add_scaled(&mut self, other: &LossReport, w: f64) {
        self.total += w * other.total;
        self.mse += w * other.mse;
        self.nll += w * other.nll;
        self.r_align += w * other.r_align;
        self.r_ind += w * other.r_ind;
        self.r_div += w * other.r_div;
        self.mse_co2 += w * other.mse_co2;
        self.mse_pm25 += w * other.mse_pm25;
    }
}

/// Graph handles of every objective term.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub mse: Var,
    pub nll: Option<Var>,
    pub r_align: Option<Var>,
    pub r_ind: Option<Var>,
    pub r_div: Option<Var>,
    pub mse_per_target: Var,
}

impl Objective {
    pub fn report<T: Scalar>(&self, tape: &Tape<T>) -> LossReport {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.item(v).as_f64());
        let per = tape.value(self.mse_per_target);
        LossReport {
            total: tape.item(self.total).as_f64(),
            mse: tape.item(self.mse).as_f64(),
            nll: get(self.nll),
            r_align: get(self.r_align),
            r_ind: get(self.r_ind),
            r_div: get(self.r_div),
            mse_co2: per.data()[0].as_f64(),
            mse_pm25: per.data()[1].as_f64(),
        }
    }
}

/// Builds the total objective for a forward pass. `y` and `weights` are
/// time-major `(P·B) × 2`, matching `pass.mu`. Regularizers apply only when
/// the pass carries fusion intermediates.
pub fn total_objective<T: Scalar>(
    tape: &Tape<T>,
    pass: &ForwardPass,
    y: Var,
    weights: Option<Var>,
    cfg: &LossConfig,
) -> Result<Objective, TensorError> {
    let sq = squared_error(tape, pass.mu, y, weights)?;
    let mse = tape.mean(sq, None)?;
    let mse_per_target = tape.mean(sq, Some(0))?;
    debug_assert_eq!(tape.shape(mse_per_target), vec![TARGETS]);

    let nll = match cfg.mode {
        LossMode::MseOnly => None,
        LossMode::MseNllHomo | LossMode::MseNllHetero => Some(nll_gaussian(tape, pass.mu, pass.log_sigma, y)?),
    };
    let (mut r_al, mut r_in, mut r_dv) = (None, None, None);
    if let Some(fused) = &pass.fused {
        let st = &fused.state;
        r_al = Some(r_align(tape, fused.parts.s_e, fused.parts.s_a)?);
        r_in = Some(r_ind(tape, st.f, st.p_e, st.p_a)?);
        r_dv = Some(r_div(tape, st.p_e, st.p_a)?);
    }

    let mut total = mse;
    if let Some(n) = nll {
        total = tape.add(total, n)?;
    }
    for (term, lambda) in [(r_al, cfg.lambda_align), (r_in, cfg.lambda_ind), (r_dv, cfg.lambda_div)] {
        if let Some(r) = term {
            total = tape.add(total, tape.scale(r, T::lit(lambda))?)?;
        }
    }
    Ok(Objective {
        total,
        mse,
        nll,
        r_align: r_al,
        r_ind: r_in,
        r_div: r_dv,
        mse_per_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{Decomposition, Fused, FusionState};
    use crate::gradcheck::{check_params, numeric_gradient, relative_error};
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn eval(build: impl Fn(&Tape<f64>) -> Var) -> f64 {
        let tape = Tape::new();
        let v = build(&tape);
        tape.item(v)
    }

    #[test]
    fn mse_trivial_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = random(&mut rng, vec![6, 2], 1.0);
        let same = eval(|t| mse_loss(t, t.constant(y.clone()), t.constant(y.clone()), None).unwrap());
        assert_eq!(same, 0.0);
        let shifted = y.map(|v| v + 2.0);
        let four = eval(|t| mse_loss(t, t.constant(shifted.clone()), t.constant(y.clone()), None).unwrap());
        assert!((four - 4.0).abs() < 1e-12);
        let ones = Tensor::full(vec![6, 2], 1.0);
        let weighted = eval(|t| {
            mse_loss(t, t.constant(shifted.clone()), t.constant(y.clone()), Some(t.constant(ones.clone()))).unwrap()
        });
        assert_eq!(weighted, four);
    }

    #[test]
    fn spike_weights_flag_jumps() {
        let y = Tensor::new(vec![1, 3, 2], vec![0.0, 0.0, 1.0, 0.1, 1.1, 0.2]).unwrap();
        let w = spike_weights(&y, &[0.0, 0.0], 2.0, 0.5);
        assert_eq!(w.data(), &[1.0, 1.0, 3.0, 1.0, 1.0, 1.0]);
        let off = spike_weights(&y, &[0.0, 0.0], 0.0, 0.5);
        assert!(off.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nll_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = random(&mut rng, vec![5, 2], 1.0);
        let y = random(&mut rng, vec![5, 2], 1.0);
        let zeros = Tensor::zeros(vec![5, 2]);
        let nll = eval(|t| nll_gaussian(t, t.constant(mu.clone()), t.constant(zeros.clone()), t.constant(y.clone())).unwrap());
        let mse = eval(|t| mse_loss(t, t.constant(mu.clone()), t.constant(y.clone()), None).unwrap());
        assert!((nll - (0.5 * mse + HALF_LOG_TWO_PI)).abs() < 1e-12);
        let exact = eval(|t| nll_gaussian(t, t.constant(y.clone()), t.constant(zeros.clone()), t.constant(y.clone())).unwrap());
        assert!((exact - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_penalizes_overconfidence_direction() {
        let y = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let ls = Tensor::zeros(vec![2, 2]);
        let f = |l: &Tensor<f64>| eval(|t| nll_gaussian(t, t.constant(y.clone()), t.constant(l.clone()), t.constant(y.clone())).unwrap());
        let numeric = numeric_gradient(f, &ls, 1e-5);
        let tape = Tape::new();
        let lv = tape.param("ls", ls.clone()).unwrap();
        let loss = nll_gaussian(&tape, tape.constant(y.clone()), lv, tape.constant(y.clone())).unwrap();
        let g = tape.backward(loss).unwrap().wrt(lv);
        // mean over four terms, each with derivative +1
        for (a, n) in g.data().iter().zip(numeric.data()) {
            assert!((a - 0.25).abs() < 1e-12);
            assert!(relative_error(*a, *n, 1e-6) < 1e-8);
        }
    }

    #[test]
    fn homo_matches_broadcast_hetero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = random(&mut rng, vec![4, 2], 1.0);
        let y = random(&mut rng, vec![4, 2], 1.0);
        let theta = Tensor::vector(vec![0.3, -0.4]).unwrap();
        let homo = eval(|t| homo_nll(t, t.constant(mu.clone()), t.constant(theta.clone()), t.constant(y.clone())).unwrap());
        let ls = Tensor::new(vec![4, 2], (0..8).map(|i| theta.data()[i % 2]).collect()).unwrap();
        let het = eval(|t| nll_gaussian(t, t.constant(mu.clone()), t.constant(ls.clone()), t.constant(y.clone())).unwrap());
        assert_eq!(homo, het);
        let zero = Tensor::zeros(vec![2]);
        let h0 = eval(|t| homo_nll(t, t.constant(mu.clone()), t.constant(zero.clone()), t.constant(y.clone())).unwrap());
        let mse = eval(|t| mse_loss(t, t.constant(mu.clone()), t.constant(y.clone()), None).unwrap());
        assert!((h0 - (0.5 * mse + HALF_LOG_TWO_PI)).abs() < 1e-12);
    }

    fn pair(f: impl Fn(&Tape<f64>, Var, Var) -> Result<Var, TensorError>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        eval(|t| f(t, t.constant(a.clone()), t.constant(b.clone())).unwrap())
    }

    #[test]
    fn cosine_regularizer_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random(&mut rng, vec![7, 4], 1.0);
        let neg = s.map(|v| -v);
        assert!(pair(r_align, &s, &s).abs() < 1e-12);
        assert!((pair(r_align, &s, &neg) - 2.0).abs() < 1e-12);
        assert!((pair(r_div, &s, &s) - 1.0).abs() < 1e-12);
        assert!((pair(r_div, &s, &neg) - 1.0).abs() < 1e-12);

        let a = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 5.0, 0.0], vec![1.0, 0.0, -1.0]]).unwrap();
        assert!((pair(r_align, &a, &b) - 1.0).abs() < 1e-12);
        assert!(pair(r_div, &a, &b).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_contribute_nothing_and_have_zero_gradient() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert!(pair(r_align, &a, &b).abs() < 1e-12);
        assert!((pair(r_div, &a, &b) - 0.5).abs() < 1e-12);
        for f in [r_align::<f64>, r_div::<f64>] {
            let tape = Tape::new();
            let av = tape.param("a", a.clone()).unwrap();
            let bv = tape.param("b", b.clone()).unwrap();
            let loss = f(&tape, av, bv).unwrap();
            let g = tape.backward(loss).unwrap();
            let (ga, gb) = (g.wrt(av), g.wrt(bv));
            assert!(ga.is_finite() && gb.is_finite());
            assert_eq!(ga.row(1), &[0.0, 0.0]);
            assert_eq!(gb.row(1), &[0.0, 0.0]);
        }
    }

    /// Two-loop sample cross-covariance.
    fn brute_cov_sq(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (n, p, q) = (a.rows(), a.cols(), b.cols());
        let mean = |t: &Tensor<f64>, j: usize| (0..n).map(|i| t.at(i, j)).sum::<f64>() / n as f64;
        let mut total = 0.0;
        for j in 0..p {
            for k in 0..q {
                let (ma, mb) = (mean(a, j), mean(b, k));
                let c: f64 = (0..n).map(|i| (a.at(i, j) - ma) * (b.at(i, k) - mb)).sum::<f64>() / (n - 1) as f64;
                total += c * c;
            }
        }
        total
    }

    #[test]
    fn r_ind_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(&mut rng, vec![5, 3], 1.0);
        let pe = random(&mut rng, vec![5, 3], 1.0);
        let pa = random(&mut rng, vec![5, 3], 1.0);
        let got = eval(|t| r_ind(t, t.constant(f.clone()), t.constant(pe.clone()), t.constant(pa.clone())).unwrap());
        let want = brute_cov_sq(&f, &pe) + brute_cov_sq(&f, &pa);
        assert!((got - want).abs() < 1e-12);

        let constant = Tensor::full(vec![5, 3], 0.7);
        let zero = eval(|t| r_ind(t, t.constant(constant.clone()), t.constant(pe.clone()), t.constant(pa.clone())).unwrap());
        assert!(zero.abs() < 1e-12);

        let self_cov = pair(cross_cov_sq, &f, &f);
        assert!(self_cov > 0.0 && (self_cov - brute_cov_sq(&f, &f)).abs() < 1e-12);

        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(r_ind(&tape, one, one, one), Err(TensorError::TooFewSamples { needed: 2, got: 1 })));
    }

    fn fake_pass(tape: &Tape<f64>, rng: &mut ChaCha8Rng, fused: bool) -> (ForwardPass, Var) {
        let mut c = |shape: Vec<usize>| tape.constant(random(rng, shape, 1.0));
        let mu = c(vec![6, 2]);
        let log_sigma = c(vec![6, 2]);
        let head = c(vec![12, 2]);
        let y = c(vec![6, 2]);
        let fused = fused.then(|| Fused {
            parts: Decomposition {
                s_e: c(vec![12, 3]),
                s_a: c(vec![12, 3]),
                p_e: c(vec![12, 3]),
                p_a: c(vec![12, 3]),
            },
            state: FusionState {
                f: c(vec![12, 3]),
                p_e: c(vec![12, 3]),
                p_a: c(vec![12, 3]),
                round: 1,
            },
            gates: vec![],
        });
        (
            ForwardPass {
                batch: 2,
                head,
                mu,
                log_sigma,
                fused,
            },
            y,
        )
    }

    #[test]
    fn report_reconstructs_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [LossMode::MseOnly, LossMode::MseNllHomo, LossMode::MseNllHetero] {
            for fused in [false, true] {
                let cfg = LossConfig {
                    mode,
                    lambda_align: rng.gen_range(0.0..1.0),
                    lambda_ind: rng.gen_range(0.0..1.0),
                    lambda_div: rng.gen_range(0.0..1.0),
                    ..LossConfig::default()
                };
                let tape = Tape::new();
                let (pass, y) = fake_pass(&tape, &mut rng, fused);
                let obj = total_objective(&tape, &pass, y, None, &cfg).unwrap();
                let r = obj.report(&tape);
                assert!((r.total - r.reconstruct(&cfg)).abs() < 1e-12);
                assert!(((r.mse_co2 + r.mse_pm25) / 2.0 - r.mse).abs() < 1e-12);
                if mode == LossMode::MseOnly {
                    assert_eq!(r.nll, 0.0);
                }
                if !fused {
                    assert_eq!((r.r_align, r.r_ind, r.r_div), (0.0, 0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn mse_only_without_regularizers_is_exactly_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = LossConfig {
            mode: LossMode::MseOnly,
            lambda_align: 0.0,
            lambda_ind: 0.0,
            lambda_div: 0.0,
            ..LossConfig::default()
        };
        let tape = Tape::new();
        let (pass, y) = fake_pass(&tape, &mut rng, true);
        let r = total_objective(&tape, &pass, y, None, &cfg).unwrap().report(&tape);
        assert_eq!(r.total, r.mse);
    }

    #[test]
    fn lambda_scales_contribution_linearly() {
        let base = LossConfig {
            mode: LossMode::MseOnly,
            lambda_align: 0.3,
            lambda_ind: 0.0,
            lambda_div: 0.0,
            ..LossConfig::default()
        };
        let run = |cfg: &LossConfig| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let tape = Tape::new();
            let (pass, y) = fake_pass(&tape, &mut rng, true);
            let r = total_objective(&tape, &pass, y, None, cfg).unwrap().report(&tape);
            r.total - r.mse
        };
        let c = 3.0;
        let scaled = LossConfig {
            lambda_align: base.lambda_align * c,
            ..base.clone()
        };
        assert!((run(&scaled) - c * run(&base)).abs() < 1e-12);
    }

    #[test]
    fn invalid_weights_rejected() {
        let cfg = LossConfig {
            lambda_ind: -0.1,
            ..LossConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        for name in ["f", "pe", "pa", "se", "sa"] {
            params.insert(name, random(&mut rng, vec![6, 3], 1.0));
        }
        let run = |ps: &ParamSet<f64>| {
            let tape = Tape::new();
            let p = ps.bind(&tape).unwrap();
            let terms = [
                r_align(&tape, p.var("se"), p.var("sa")).unwrap(),
                r_ind(&tape, p.var("f"), p.var("pe"), p.var("pa")).unwrap(),
                r_div(&tape, p.var("pe"), p.var("pa")).unwrap(),
            ];
            let mut loss = terms[0];
            for t in &terms[1..] {
                loss = tape.add(loss, *t).unwrap();
            }
            (tape.item(loss), tape.backward(loss).unwrap().named())
        };
        let (_, analytic) = run(&params);
        let report = check_params(&params, &analytic, |ps| run(ps).0, 1e-5, 1e-6);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn regularizers_stay_in_range(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, vec![5, 3], 2.0);
                let b = random(&mut rng, vec![5, 3], 2.0);
                let al = pair(r_align, &a, &b);
                let dv = pair(r_div, &a, &b);
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&al));
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&dv));
                prop_assert!(pair(cross_cov_sq, &a, &b) >= 0.0);
            }
        }
    }
}
