use crate::autodiff::{AutodiffError, FlatParams, ParamSet, Result, Tensor};

/// Bias-corrected Adam over a fixed parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: FlatParams,
    v: FlatParams,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros = params.zeros_like().to_flat();
        Adam { beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds the optimizer from saved moment estimates.
    pub fn from_state(m: FlatParams, v: FlatParams, t: u64, beta1: f64, beta2: f64, eps: f64) -> Result<Adam> {
        let layout = |f: &FlatParams| f.entries.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect::<Vec<_>>();
        if layout(&m) != layout(&v) {
            return Err(AutodiffError::Invalid("Adam moment layouts differ".into()));
        }
        Ok(Adam { beta1, beta2, eps, t, m, v })
    }

    pub fn moments(&self) -> (&FlatParams, &FlatParams) {
        (&self.m, &self.v)
    }

    /// Returns fresh tracked leaves `p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        if params.len() != self.m.entries.len() || grads.len() != params.len() {
            return Err(AutodiffError::Invalid(format!(
                "Adam state has {} tensors, got {} params and {} grads",
                self.m.entries.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = ParamSet::new();
        let entries = self.m.entries.iter_mut().zip(self.v.entries.iter_mut());
        for (((name, p), (gname, g)), ((mname, _, m), (_, _, v))) in params.iter().zip(grads.iter()).zip(entries) {
            if name != gname || name != mname || p.numel() != m.len() {
                return Err(AutodiffError::Invalid(format!("Adam layout mismatch at `{name}`")));
            }
            let mut next = p.to_vec();
            for (((x, &gi), mi), vi) in next.iter_mut().zip(g.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            out.insert(name, Tensor::param(p.shape(), next)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut g = ParamSet::new();
        g.insert("w", Tensor::new(&[3], vec![0.5, -4.0, 0.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let next = adam.step(&p, &g, 0.1).unwrap();
        let w = next.get("w").unwrap().values();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 2.1).abs() < 1e-6);
        assert_eq!(w[2], 3.0);
        assert_eq!(adam.t, 1);
    }
}
