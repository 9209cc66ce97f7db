use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::scalar::Scalar;

/// Anything whose parameters can be exposed as a list of mutable blocks.
pub trait ParamBlocks<T> {
    fn blocks_mut(&mut self) -> Vec<&mut [T]>;
}

impl<T: Scalar> ParamBlocks<T> for FlowModel<T> {
    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.nets_mut().map(|n| n.params_mut()).collect()
    }
}

impl<T> ParamBlocks<T> for Vec<Vec<T>> {
    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

/// First and second moment estimates of the Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments for blocks of the given sizes; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            m,
            v,
            step: 0,
        }
    }

    pub fn for_model(model: &FlowModel<T>) -> Self {
        Self::new(model.nets().map(|n| n.params().len()))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut impl ParamBlocks<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: T,
) -> Result<()> {
    let mut blocks = params.blocks_mut();
    if blocks.len() != grads.len() || blocks.len() != state.m.len() {
        return Err(Error::Incongruent(format!(
            "{} parameter blocks, {} gradient blocks, {} moment blocks",
            blocks.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in blocks.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Incongruent("parameter, gradient and moment sizes differ".into()));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((p, g), m), v) in blocks.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * *gi;
            *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![vec![1.0, -2.0], vec![3.0]];
        let before = p.clone();
        let mut st = OptimizerState::<f64>::new([2, 1]);
        for _ in 0..10 {
            adam_step(&mut p, &[vec![0.0, 0.0], vec![0.0]], &mut st, 0.005).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn constant_gradient_gives_lr_sized_steps() {
        let lr = 0.005;
        for g in [3.0, -0.02] {
            let mut p = vec![vec![0.0]];
            let mut st = OptimizerState::<f64>::new([1]);
            let mut last = 0.0;
            for _ in 0..2000 {
                let before = p[0][0];
                adam_step(&mut p, &[vec![g]], &mut st, lr).unwrap();
                last = p[0][0] - before;
            }
            assert!((last + lr * f64::signum(g)).abs() < 1e-8, "{last}");
        }
    }

    #[test]
    fn step_counter_and_shape_checks() {
        let mut p = vec![vec![0.0; 3]];
        let mut st = OptimizerState::<f64>::new([3]);
        adam_step(&mut p, &[vec![1.0; 3]], &mut st, 0.1).unwrap();
        assert_eq!(st.step_count(), 1);
        assert!(adam_step(&mut p, &[vec![1.0; 2]], &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
        assert_eq!(st.step_count(), 1);
    }
}
