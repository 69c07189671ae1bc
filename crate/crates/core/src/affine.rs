//! Subproblem objectives that are affine in the dual weights.

/// Contribution of one weight: `w * (coefs . x + constant)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerm {
    pub weight: usize,
    pub coefs: Vec<(usize, f64)>,
    pub constant: f64,
}

/// Objective `(base + sum_w w * coefs_w) . x + sum_w w * constant_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineObjective {
    pub base: Vec<f64>,
    pub terms: Vec<AffineTerm>,
}

impl AffineObjective {
    pub fn new(base: Vec<f64>) -> Self {
        Self {
            base,
            terms: Vec::new(),
        }
    }

    pub fn push(&mut self, weight: usize, coefs: Vec<(usize, f64)>, constant: f64) {
        let coefs: Vec<_> = coefs.into_iter().filter(|&(_, a)| a != 0.0).collect();
        if !coefs.is_empty() || constant != 0.0 {
            self.terms.push(AffineTerm {
                weight,
                coefs,
                constant,
            });
        }
    }

    /// Cost vector and constant at weights `w`.
    pub fn at(&self, w: &[f64]) -> (Vec<f64>, f64) {
        let mut c = self.base.clone();
        let mut k = 0.0;
        for t in &self.terms {
            let wt = w[t.weight];
            if wt == 0.0 {
                continue;
            }
            for &(i, a) in &t.coefs {
                c[i] += wt * a;
            }
            k += wt * t.constant;
        }
        (c, k)
    }

    /// Adds `d value / d w` at solution `x` into `grad`.
    pub fn accumulate_gradient(&self, x: &[f64], grad: &mut [f64]) {
        for t in &self.terms {
            grad[t.weight] += t.coefs.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + t.constant;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_is_linear_in_weights_at_fixed_x() {
        let mut o = AffineObjective::new(vec![1.0, 2.0]);
        o.push(0, vec![(0, 3.0)], -1.0);
        o.push(1, vec![(1, -2.0), (0, 0.0)], 0.5);
        o.push(1, vec![], 0.0);
        assert_eq!(o.terms.len(), 2);
        let x = [2.0, 5.0];
        let w = [0.7, -1.3];
        let (c, k) = o.at(&w);
        let v = c[0] * x[0] + c[1] * x[1] + k;
        let mut g = vec![0.0; 2];
        o.accumulate_gradient(&x, &mut g);
        let base = 1.0 * 2.0 + 2.0 * 5.0;
        assert!((v - (base + g[0] * w[0] + g[1] * w[1])).abs() < 1e-12);
    }
}
