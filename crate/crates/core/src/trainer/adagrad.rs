use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Gradients, Tensor};

/// Per-parameter squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub accumulators: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, initial_accumulator: f32) -> Self {
        OptimizerState {
            accumulators: params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), initial_accumulator)))
                .collect(),
            step: 0,
        }
    }

    /// `acc += g²; w -= lr · g / (sqrt(acc) + eps)` for every parameter.
    /// Padding rows of embedding tables are never touched. Gradients are
    /// all checked for finiteness before anything is updated.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        learning_rate: f32,
        epsilon: f32,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            g.check_finite(name)?;
        }
        for (name, w) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
            let acc = self
                .accumulators
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no accumulator for `{name}`")))?;
            if g.shape() != w.shape() || acc.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: w.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let skip = if ModelParams::<f32>::has_padding_row(name) {
                w.last_dim()
            } else {
                0
            };
            let (w, a, g) = (&mut w.data_mut()[skip..], &mut acc.data_mut()[skip..], &g.data()[skip..]);
            for ((w, a), &g) in w.iter_mut().zip(a.iter_mut()).zip(g) {
                if g != 0.0 {
                    *a += g * g;
                    *w -= learning_rate * g / (a.sqrt() + epsilon);
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn one_param(w: f32) -> ModelParams {
        let mut p = ModelParams::default();
        p.insert("w", Tensor::vector(vec![w]));
        p
    }

    fn grads_of(name: &str, g: Vec<f32>) -> Gradients {
        let mut tape = Tape::<f32>::new();
        let n = g.len();
        let x = tape.param_owned(name, Tensor::zeros(&[n]));
        let c = tape.constant(Tensor::vector(g));
        // d/dx of sum(x * g) = g, recorded through a matmul
        let xr = tape.reshape(x, &[1, n]).unwrap();
        let cr = tape.reshape(c, &[n, 1]).unwrap();
        let y = tape.matmul(xr, cr).unwrap();
        tape.backward(y).unwrap()
    }

    #[test]
    fn closed_form_step() {
        let mut p = one_param(1.0);
        let mut st = OptimizerState::new(&p, 0.1);
        st.apply(&mut p, &grads_of("w", vec![1.0]), 0.01, 1e-7).unwrap();
        assert!((st.accumulators["w"].data()[0] - 1.1).abs() < 1e-6);
        let expected = 1.0 - 0.01 / (1.1f64.sqrt() + 1e-7);
        assert!((f64::from(p.get("w").unwrap().data()[0]) - expected).abs() < 1e-6);
        assert!((expected - 0.990465).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = one_param(0.5);
        let mut st = OptimizerState::new(&p, 0.1);
        st.apply(&mut p, &grads_of("w", vec![0.0]), 0.01, 1e-7).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);
        assert_eq!(st.accumulators["w"].data()[0], 0.1);
    }

    #[test]
    fn repeated_gradients_shrink_updates() {
        let mut p = one_param(0.0);
        let mut st = OptimizerState::new(&p, 0.1);
        let g = grads_of("w", vec![1.0]);
        st.apply(&mut p, &g, 0.01, 1e-7).unwrap();
        let first = -p.get("w").unwrap().data()[0];
        st.apply(&mut p, &g, 0.01, 1e-7).unwrap();
        let second = -p.get("w").unwrap().data()[0] - first;
        assert!(second < first);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(0.0);
        let mut st = OptimizerState::new(&p, 0.1);
        let err = st
            .apply(&mut p, &grads_of("w", vec![f32::NAN]), 0.01, 1e-7)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if n == "w"));
        assert_eq!(p.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn padding_row_is_frozen() {
        let mut p = ModelParams::default();
        p.insert("emb.item", Tensor::zeros(&[2, 2]));
        let mut st = OptimizerState::new(&p, 0.1);
        let mut tape = Tape::<f32>::new();
        let t = tape.param_owned("emb.item", Tensor::zeros(&[2, 2]));
        let rows = tape.gather_rows(t, &[0, 1], "item_id").unwrap();
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        st.apply(&mut p, &g, 0.1, 1e-7).unwrap();
        let w = p.get("emb.item").unwrap();
        assert_eq!(w.row(0), &[0.0, 0.0]);
        assert!(w.row(1).iter().all(|&v| v < 0.0));
    }
}
