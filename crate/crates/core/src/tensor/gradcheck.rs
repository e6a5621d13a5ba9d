//! Central finite-difference checks of tape gradients in f64.

use rand::seq::index::sample;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates checked per tensor; larger tensors are sampled.
    pub max_coords: usize,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            max_coords: 64,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheck {
    /// Compares the tape gradient of the scalar built by `f` against
    /// central differences for every tensor in `inputs`. `f` must register
    /// the tensors it differentiates through `Tape::param`.
    pub fn run<F>(&self, inputs: &ModelParams<f64>, f: F) -> Result<GradReport>
    where
        F: for<'p> Fn(&mut Tape<'p, f64>, &'p ModelParams<f64>) -> Result<Var>,
    {
        let eval = |p: &ModelParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let out = f(&mut tape, p)?;
            scalar(&tape, out)
        };
        let grads = {
            let mut tape = Tape::new();
            let out = f(&mut tape, inputs)?;
            scalar(&tape, out)?;
            tape.backward(out)?
        };
        let mut report = GradReport {
            max_rel_err: 0.0,
            worst: (String::new(), 0),
            checked: 0,
        };
        let mut probe = inputs.clone();
        let names: Vec<String> = inputs.names().cloned().collect();
        for (k, name) in names.iter().enumerate() {
            let analytic = grads
                .get(name)
                .ok_or_else(|| Error::Backward(format!("`{name}` was never registered on the tape")))?
                .clone();
            let n = analytic.len();
            let coords: Vec<usize> = if n <= self.max_coords {
                (0..n).collect()
            } else {
                let mut rng = stream(self.seed, "gradcheck", k as u64);
                let mut v = sample(&mut rng, n, self.max_coords).into_vec();
                v.sort_unstable();
                v
            };
            for i in coords {
                let orig = probe.get(name).expect("cloned").data()[i];
                set(&mut probe, name, i, orig + self.step);
                let up = eval(&probe)?;
                set(&mut probe, name, i, orig - self.step);
                let down = eval(&probe)?;
                set(&mut probe, name, i, orig);
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                if rel >= report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (name.clone(), i);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

fn scalar(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t: &Tensor<f64> = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape("gradcheck", format!("output must be scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

fn set(p: &mut ModelParams<f64>, name: &str, i: usize, v: f64) {
    p.get_mut(name).expect("known tensor").data_mut()[i] = v;
}
