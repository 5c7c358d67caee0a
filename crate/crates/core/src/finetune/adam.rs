//! Adaptive-moment optimizer with per-coordinate masking. Standard
//! published defaults, no weight decay. Masked-out coordinates are left
//! bitwise untouched (moments included).

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over `params` plus the trailing scalar `extra` (slot
    /// `params.len()`). `grads` and `mask` cover both.
    pub fn step_masked(
        &mut self,
        params: &mut [f64],
        extra: &mut f64,
        grads: &[f64],
        mask: &[bool],
        lr: f64,
    ) {
        let n = params.len();
        debug_assert_eq!(grads.len(), n + 1);
        debug_assert_eq!(mask.len(), n + 1);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut update = |idx: usize, value: &mut f64, g: f64| {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *value -= lr * mhat / (vhat.sqrt() + self.eps);
        };
        for i in 0..n {
            if mask[i] {
                update(i, &mut params[i], grads[i]);
            }
        }
        if mask[n] {
            update(n, extra, grads[n]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_coordinates_stay_bitwise_identical() {
        let mut params = vec![1.0f64, -2.0, 0.5];
        let mut t = 2.5f64;
        let before = params.clone();
        let mut adam = Adam::new(4);
        for _ in 0..10 {
            adam.step_masked(
                &mut params,
                &mut t,
                &[0.3, -0.1, 0.7, 0.2],
                &[false, true, false, false],
                1e-2,
            );
        }
        assert_eq!(params[0].to_bits(), before[0].to_bits());
        assert_eq!(params[2].to_bits(), before[2].to_bits());
        assert_eq!(t, 2.5);
        assert_ne!(params[1], before[1]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut x = vec![4.0f64];
        let mut unused = 0.0;
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let g = 2.0 * x[0];
            adam.step_masked(&mut x, &mut unused, &[g, 0.0], &[true, false], 1e-2);
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);
    }
}
