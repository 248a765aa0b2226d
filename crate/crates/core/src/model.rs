//! Mono-exponential T2 decay `s_j = I0 exp(-TE_j / T2)` and its derivatives.

/// T2 values below this floor (ms) are clamped before evaluation.
pub const T2_FLOOR_MS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecayModel {
    te_ms: Vec<f64>,
    t2_floor_ms: f64,
}

impl DecayModel {
    pub fn new(te_ms: &[f64]) -> Self {
        Self {
            te_ms: te_ms.to_vec(),
            t2_floor_ms: T2_FLOOR_MS,
        }
    }

    pub fn with_floor(mut self, t2_floor_ms: f64) -> Self {
        self.t2_floor_ms = t2_floor_ms;
        self
    }

    pub fn te_ms(&self) -> &[f64] {
        &self.te_ms
    }

    pub fn echoes(&self) -> usize {
        self.te_ms.len()
    }

    pub fn floor(&self) -> f64 {
        self.t2_floor_ms
    }

    #[inline]
    pub fn clamp(&self, t2_ms: f64) -> f64 {
        t2_ms.max(self.t2_floor_ms)
    }

    pub fn signal_into(&self, i0: f64, t2_ms: f64, out: &mut [f64]) {
        let t2 = self.clamp(t2_ms);
        for (o, &te) in out.iter_mut().zip(&self.te_ms) {
            *o = i0 * (-te / t2).exp();
        }
    }

    pub fn signal(&self, i0: f64, t2_ms: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.te_ms.len()];
        self.signal_into(i0, t2_ms, &mut out);
        out
    }

    /// Writes `ds/dI0` and `ds/dT2`, evaluated at the clamped T2.
    pub fn jacobian_into(&self, i0: f64, t2_ms: f64, d_i0: &mut [f64], d_t2: &mut [f64]) {
        let t2 = self.clamp(t2_ms);
        let inv2 = 1.0 / (t2 * t2);
        for ((a, b), &te) in d_i0.iter_mut().zip(d_t2.iter_mut()).zip(&self.te_ms) {
            let e = (-te / t2).exp();
            *a = e;
            *b = i0 * e * te * inv2;
        }
    }

    pub fn jacobian(&self, i0: f64, t2_ms: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.te_ms.len();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        self.jacobian_into(i0, t2_ms, &mut a, &mut b);
        (a, b)
    }
}

pub fn model_signal(i0: f64, t2_ms: f64, te_ms: &[f64]) -> Vec<f64> {
    DecayModel::new(te_ms).signal(i0, t2_ms)
}

pub fn model_jacobian(i0: f64, t2_ms: f64, te_ms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    DecayModel::new(te_ms).jacobian(i0, t2_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::KNEE_TE_MS;

    #[test]
    fn one_over_e_at_te_equal_t2() {
        let s = model_signal(1.0, 16.0, &KNEE_TE_MS);
        assert!((s[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s[1] - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn zero_i0() {
        assert!(model_signal(0.0, 30.0, &KNEE_TE_MS).iter().all(|&v| v == 0.0));
        let (_, d_t2) = model_jacobian(0.0, 30.0, &KNEE_TE_MS);
        assert!(d_t2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_high_precision_values() {
        // 2 exp(-TE / 50) at the knee echo times, evaluated with 40-digit arithmetic.
        let expect = [
            1.738_716_470_797_611_639_3,
            1.452_298_074_147_381_849_7,
            1.213_061_319_425_266_847_2,
            1.013_233_984_731_179_219,
            0.846_324_164_635_497_633_51,
            0.706_909_363_917_560_296_31,
            0.578_768_435_878_101_277_43,
            0.483_428_033_794_072_888_77,
        ];
        let s = model_signal(2.0, 50.0, &KNEE_TE_MS);
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{a} vs {b}");
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = DecayModel::new(&KNEE_TE_MS);
        for &(i0, t2) in &[(0.8, 40.0), (1.3, 3.0), (0.2, 900.0), (2.0, 27.5)] {
            let (d_i0, d_t2) = m.jacobian(i0, t2);
            let h = 1e-4 * t2;
            let (p, q) = (m.signal(i0, t2 + h), m.signal(i0, t2 - h));
            let hi = 1e-4 * i0;
            let (pi, qi) = (m.signal(i0 + hi, t2), m.signal(i0 - hi, t2));
            for j in 0..8 {
                let fd = (p[j] - q[j]) / (2.0 * h);
                assert!((fd - d_t2[j]).abs() <= 1e-6 * d_t2[j].abs().max(1e-300), "t2 {t2} j {j}");
                let fdi = (pi[j] - qi[j]) / (2.0 * hi);
                assert!((fdi - d_i0[j]).abs() <= 1e-6 * d_i0[j].abs());
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn jacobian_matches_fd_above_twice_the_floor(i0 in 0.01f64..5.0, t2 in 2.0001f64..2000.0) {
            let m = DecayModel::new(&KNEE_TE_MS);
            let (_, d_t2) = m.jacobian(i0, t2);
            let h = 1e-5 * t2;
            let (p, q) = (m.signal(i0, t2 + h), m.signal(i0, t2 - h));
            for j in 0..8 {
                let fd = (p[j] - q[j]) / (2.0 * h);
                proptest::prop_assert!((fd - d_t2[j]).abs() <= 1e-6 * d_t2[j].abs(), "t2 {} j {}", t2, j);
            }
        }
    }

    #[test]
    fn below_floor_is_evaluated_at_floor() {
        let m = DecayModel::new(&KNEE_TE_MS);
        assert_eq!(m.signal(1.0, 0.2), m.signal(1.0, T2_FLOOR_MS));
        assert_eq!(m.jacobian(1.0, -5.0), m.jacobian(1.0, T2_FLOOR_MS));
    }
}
