//! Rotary position embedding over per-head interleaved pairs `(2j, 2j + 1)`.

#[derive(Debug, Clone)]
pub struct Rope {
    num_heads: usize,
    head_dim: usize,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(num_heads: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head_dim must be even");
        let inv_freq = (0..head_dim / 2)
            .map(|j| base.powf(-(2.0 * j as f64) / head_dim as f64))
            .collect();
        Self {
            num_heads,
            head_dim,
            inv_freq,
        }
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn rotate_in_place(&self, x: &mut [f32], position: usize) {
        debug_assert_eq!(x.len(), self.width());
        if position == 0 {
            return;
        }
        let p = position as f64;
        for (j, f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (p * f).sin_cos();
            let (s, c) = (s as f32, c as f32);
            for h in 0..self.num_heads {
                let i = h * self.head_dim + 2 * j;
                let (a, b) = (x[i], x[i + 1]);
                x[i] = a * c - b * s;
                x[i + 1] = a * s + b * c;
            }
        }
    }

    pub fn rotate(&self, x: &[f32], position: usize) -> Vec<f32> {
        let mut out = x.to_vec();
        self.rotate_in_place(&mut out, position);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Scalar reference: rotate each pair by `position * base^(-2j/hd)` in f64.
    fn reference(x: &[f32], position: usize, heads: usize, hd: usize, base: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for h in 0..heads {
            for j in 0..hd / 2 {
                let theta = position as f64 / base.powf(2.0 * j as f64 / hd as f64);
                let a = f64::from(x[h * hd + 2 * j]);
                let b = f64::from(x[h * hd + 2 * j + 1]);
                out[h * hd + 2 * j] = a * theta.cos() - b * theta.sin();
                out[h * hd + 2 * j + 1] = a * theta.sin() + b * theta.cos();
            }
        }
        out
    }

    #[test]
    fn position_zero_is_identity() {
        let rope = Rope::new(2, 8, 10_000.0);
        let k: Vec<f32> = (0..16).map(|i| i as f32 - 7.5).collect();
        assert_eq!(rope.rotate(&k, 0), k);
    }

    #[test]
    fn matches_scalar_reference_at_five() {
        let rope = Rope::new(2, 8, 10_000.0);
        let k: Vec<f32> = (0..16).map(|i| ((i * 37) % 11) as f32 * 0.3 - 1.4).collect();
        let got = rope.rotate(&k, 5);
        let want = reference(&k, 5, 2, 8, 10_000.0);
        for (g, w) in got.iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    proptest! {
        #[test]
        fn preserves_norm(k in proptest::collection::vec(-4.0f32..4.0, 16), pos in 0usize..5000) {
            let rope = Rope::new(4, 4, 10_000.0);
            let before: f64 = k.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let after: f64 = rope.rotate(&k, pos).iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            prop_assert!((before - after).abs() <= 1e-6 * before.max(1e-3));
        }

        #[test]
        fn rotations_compose(k in proptest::collection::vec(-2.0f32..2.0, 8), a in 0usize..300, b in 0usize..300) {
            let rope = Rope::new(1, 8, 500.0);
            let twice = rope.rotate(&rope.rotate(&k, a), b);
            let once = rope.rotate(&k, a + b);
            for (x, y) in twice.iter().zip(&once) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }
    }
}
