//! Shared/private decomposition of two encoded streams and iterative
//! feedback fusion with per-timestep modulation.
//!
//! All operations are row-wise on `(L·B) × h` matrices.

use rand::Rng;

use crate::encoders::linear;
use crate::params::{pname, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, Var};

/// Initial value of the scale half of the modulation bias, so that
/// `tanh(γ) ≈ 0.76` and the private paths start open.
pub const GATE_BIAS_INIT: f64 = 1.0;
/// Modulation weights are drawn from a narrower range than other layers.
pub const MOD_WEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct Decomposition {
    pub s_e: Var,
    pub s_a: Var,
    pub p_e: Var,
    pub p_a: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionState {
    pub f: Var,
    pub p_e: Var,
    pub p_a: Var,
    pub round: usize,
}

/// Result of a full fusion pass. `gates` holds the `tanh(γ)` factors of
/// every round, environment stream first.
#[derive(Debug, Clone)]
pub struct Fused {
    pub parts: Decomposition,
    pub state: FusionState,
    pub gates: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub prefix: String,
    pub hidden: usize,
}

impl Fusion {
    pub fn new(prefix: impl Into<String>, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            hidden,
        }
    }

    fn name(&self, local: &str) -> String {
        pname(&self.prefix, local)
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let h = self.hidden;
        for head in ["shared_e", "shared_a", "private_e", "private_a"] {
            params.init_linear(self.name(&format!("{head}.w")), h, h, rng);
            params.init_const(self.name(&format!("{head}.b")), vec![h], 0.0);
        }
        params.init_linear(self.name("mlp.w1"), h, h, rng);
        params.init_const(self.name("mlp.b1"), vec![h], 0.0);
        params.init_linear(self.name("mlp.w2"), h, h, rng);
        params.init_const(self.name("mlp.b2"), vec![h], 0.0);
        for q in ["e", "a"] {
            let w = self.name(&format!("mod_{q}.w"));
            params.init_linear(w.clone(), h, 2 * h, rng);
            let scale = T::lit(MOD_WEIGHT_SCALE);
            params.get_mut(&w).expect("just inserted").data_mut().iter_mut().for_each(|v| *v *= scale);
            let mut bias = vec![0.0; 2 * h];
            bias[..h].iter_mut().for_each(|v| *v = GATE_BIAS_INIT);
            params.insert(
                self.name(&format!("mod_{q}.b")),
                crate::tensor::Tensor::from_f64(vec![2 * h], &bias).expect("shape"),
            );
            params.init_linear(self.name(&format!("inject_{q}.w")), h, h, rng);
        }
    }

    fn affine<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, head: &str) -> Result<Var, TensorError> {
        linear(
            tape,
            x,
            p.var(&self.name(&format!("{head}.w"))),
            Some(p.var(&self.name(&format!("{head}.b")))),
        )
    }

    /// The shared fusion MLP, `h → h → h` with a ReLU between.
    pub fn mlp<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let hidden = tape.relu(linear(tape, x, p.var(&self.name("mlp.w1")), Some(p.var(&self.name("mlp.b1"))))?)?;
        linear(tape, hidden, p.var(&self.name("mlp.w2")), Some(p.var(&self.name("mlp.b2"))))
    }

    pub fn decompose<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, h_e: Var, h_a: Var) -> Result<Decomposition, TensorError> {
        let (se, sa) = (tape.shape(h_e), tape.shape(h_a));
        if se != sa || se.len() != 2 || se[1] != self.hidden {
            return Err(TensorError::ShapeMismatch {
                op: "decompose",
                left: se,
                right: sa,
            });
        }
        Ok(Decomposition {
            s_e: self.affine(tape, p, h_e, "shared_e")?,
            s_a: self.affine(tape, p, h_a, "shared_a")?,
            p_e: self.affine(tape, p, h_e, "private_e")?,
            p_a: self.affine(tape, p, h_a, "private_a")?,
        })
    }

    pub fn initial_fuse<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, s_e: Var, s_a: Var) -> Result<Var, TensorError> {
        let mean = tape.scale(tape.add(s_e, s_a)?, T::lit(0.5))?;
        self.mlp(tape, p, mean)
    }

    /// One modulate-then-reinject round. Also returns the two gate factors.
    pub fn feedback_round<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        state: FusionState,
    ) -> Result<(FusionState, [Var; 2]), TensorError> {
        let h = self.hidden;
        let modulate = |q: &str, private: Var| -> Result<(Var, Var), TensorError> {
            let gb = self.affine(tape, p, state.f, &format!("mod_{q}"))?;
            let gate = tape.tanh(tape.slice_cols(gb, 0, h)?)?;
            let shift = tape.slice_cols(gb, h, 2 * h)?;
            Ok((tape.add(tape.mul(gate, private)?, shift)?, gate))
        };
        let (p_e, gate_e) = modulate("e", state.p_e)?;
        let (p_a, gate_a) = modulate("a", state.p_a)?;
        let inject = tape.add(
            tape.matmul(p_e, p.var(&self.name("inject_e.w")))?,
            tape.matmul(p_a, p.var(&self.name("inject_a.w")))?,
        )?;
        let f = self.mlp(tape, p, tape.add(state.f, inject)?)?;
        Ok((
            FusionState {
                f,
                p_e,
                p_a,
                round: state.round + 1,
            },
            [gate_e, gate_a],
        ))
    }

    pub fn fuse<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, h_e: Var, h_a: Var, rounds: usize) -> Result<Fused, TensorError> {
        let parts = self.decompose(tape, p, h_e, h_a)?;
        let mut state = FusionState {
            f: self.initial_fuse(tape, p, parts.s_e, parts.s_a)?,
            p_e: parts.p_e,
            p_a: parts.p_a,
            round: 0,
        };
        let mut gates = Vec::with_capacity(2 * rounds);
        for _ in 0..rounds {
            let (next, g) = self.feedback_round(tape, p, state)?;
            state = next;
            gates.extend(g);
        }
        Ok(Fused { parts, state, gates })
    }
}
