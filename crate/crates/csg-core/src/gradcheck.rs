//! Central finite-difference verification of tape gradients.
//!
//! The checker only ever calls the forward path: it rebuilds a fresh tape
//! per perturbed evaluation, so it stays independent of the backward rules
//! it is judging. Tapes are constructed with a fixed mode and seed, which
//! keeps stochastic ops like dropout on the same mask for every probe.

use crate::tensor::{Element, Tape, Tensor, Var};

/// Builds a scalar loss on the given tape from pre-registered input vars.
pub trait LossFn: Fn(&mut Tape<f64>, &[Var]) -> Var {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Var> LossFn for F {}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Whether probe tapes run in training mode.
    pub training: bool,
    /// Seed for the probe tapes' internal stream (dropout masks).
    pub tape_seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            // central differences at f64 carry ~1e-10 absolute noise; the
            // floor keeps that noise from dominating near-zero gradients
            step: 1e-5,
            floor: 1e-3,
            training: false,
            tape_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub tape_grad: f64,
    pub fd_grad: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    fn eval(&self, inputs: &[Tensor<f64>], f: &impl LossFn) -> f64 {
        let mut tape = Tape::with_mode(self.training, self.tape_seed);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, false)).collect();
        let loss = f(&mut tape, &vars);
        tape.data(loss)[0]
    }

    /// Checks every coordinate of every input.
    pub fn check(&self, inputs: &[Tensor<f64>], f: impl LossFn) -> GradReport {
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect();
        self.check_coords(inputs, &coords, f)
    }

    /// Checks only the listed `(input, coordinate)` pairs; used to keep
    /// whole-model sweeps inside a time budget.
    pub fn check_coords(
        &self,
        inputs: &[Tensor<f64>],
        coords: &[(usize, usize)],
        f: impl LossFn,
    ) -> GradReport {
        let mut tape = Tape::with_mode(self.training, self.tape_seed);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).expect("loss must be scalar");
        let tape_grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();

        let mut report = GradReport {
            max_rel_err: 0.0,
            worst_input: 0,
            worst_coord: 0,
            tape_grad: 0.0,
            fd_grad: 0.0,
            coords_checked: coords.len(),
        };
        for &(i, c) in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += self.step;
            let fp = self.eval(&plus, &f);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= self.step;
            let fm = self.eval(&minus, &f);
            let fd = (fp - fm) / (2.0 * self.step);
            let tg = tape_grads[i].get(c).copied().unwrap_or(0.0);
            let rel = (tg - fd).abs() / tg.abs().max(fd.abs()).max(self.floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = i;
                report.worst_coord = c;
                report.tape_grad = tg;
                report.fd_grad = fd;
            }
        }
        report
    }
}

/// Random standard-normal tensor for probe inputs.
pub fn randn_f64(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Relative error between two floats with a denominator floor.
pub fn rel_err<E: Element>(a: E, b: E, floor: f64) -> f64 {
    let (a, b) = (a.to_f64(), b.to_f64());
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
