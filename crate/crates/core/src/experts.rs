//! Two-layer experts, per-expert low-rank query corrections, and the shared bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, ModelConfig};
use crate::error::{Result, UmoeError};
use crate::tensor::{add_outer, mat_vec, vec_mat, Matrix, Real};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::None => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Gelu => {
                let half = T::lit(0.5);
                let inner = T::lit(SQRT_2_OVER_PI) * (z + T::lit(GELU_CUBIC) * z * z * z);
                half * z * (T::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::lit(0.5);
                let c = T::lit(SQRT_2_OVER_PI);
                let a = T::lit(GELU_CUBIC);
                let th = (c * (z + a * z * z * z)).tanh();
                let dinner = c * (T::one() + T::lit(3.0) * a * z * z);
                half * (T::one() + th) + half * z * (T::one() - th * th) * dinner
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    /// `d × d_v`
    pub w1: Matrix<T>,
    /// `d_v × d`
    pub w2: Matrix<T>,
    pub activation: Activation,
}

impl<T: Real> Expert<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_v: usize, activation: Activation, rng: &mut R) -> Self {
        let std = (2.0 / (d + d_v) as f64).sqrt();
        Self {
            w1: Matrix::randn(d, d_v, std, rng),
            w2: Matrix::randn(d_v, d, std, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            activation: self.activation,
        }
    }

    /// Pre-activation `x · W1` and output `act(x · W1) · W2`.
    pub fn forward_parts(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let z = vec_mat(x, &self.w1);
        let h: Vec<T> = z.iter().map(|&v| self.activation.apply(v)).collect();
        let y = vec_mat(&h, &self.w2);
        (z, y)
    }

    /// Accumulates weight gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &[T], z: &[T], dy: &[T], grad: &mut Expert<T>) -> Vec<T> {
        let h: Vec<T> = z.iter().map(|&v| self.activation.apply(v)).collect();
        add_outer(&mut grad.w2, &h, dy);
        let dh = mat_vec(&self.w2, dy);
        let dz: Vec<T> = dh
            .iter()
            .zip(z)
            .map(|(&g, &v)| g * self.activation.derivative(v))
            .collect();
        add_outer(&mut grad.w1, x, &dz);
        mat_vec(&self.w1, &dz)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

pub fn expert_forward<T: Real>(e: &Expert<T>, x: &[T]) -> Vec<T> {
    e.forward_parts(x).1
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraQuery<T> {
    /// `d × r`
    pub wa: Matrix<T>,
    /// `r × d_k`
    pub wb: Matrix<T>,
}

impl<T: Real> LoraQuery<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            wa: Matrix::zeros(self.wa.rows(), self.wa.cols()),
            wb: Matrix::zeros(self.wb.rows(), self.wb.cols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T> {
    pub experts: Vec<Expert<T>>,
    pub lora: Vec<LoraQuery<T>>,
    pub fixed: Vec<Expert<T>>,
    /// Shared query projection, `d × d_k`.
    pub wq: Matrix<T>,
    /// Shared key projection, `d × d_k`.
    pub wk: Matrix<T>,
}

impl<T: Real> ExpertBank<T> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            experts: self.experts.iter().map(Expert::zeros_like).collect(),
            lora: self.lora.iter().map(LoraQuery::zeros_like).collect(),
            fixed: self.fixed.iter().map(Expert::zeros_like).collect(),
            wq: Matrix::zeros(self.wq.rows(), self.wq.cols()),
            wk: Matrix::zeros(self.wk.rows(), self.wk.cols()),
        }
    }

    pub fn expert_params(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum()
    }

    pub fn lora_params(&self) -> usize {
        self.lora.iter().map(|l| l.wa.len() + l.wb.len()).sum()
    }

    pub fn fixed_params(&self) -> usize {
        self.fixed.iter().map(Expert::param_count).sum()
    }

    /// Low-rank branch input `x · W_a^i`, kept for the backward pass.
    pub(crate) fn lora_down(&self, i: usize, x: &[T]) -> Vec<T> {
        vec_mat(x, &self.lora[i].wa)
    }
}

/// `x · W_q + x · W_a^i · W_b^i`.
pub fn expert_query<T: Real>(bank: &ExpertBank<T>, i: usize, x: &[T]) -> Result<Vec<T>> {
    if i >= bank.lora.len() {
        return Err(UmoeError::IndexOutOfRange {
            index: i,
            len: bank.lora.len(),
        });
    }
    let mut q = vec_mat(x, &bank.wq);
    let low = bank.lora_down(i, x);
    let delta = vec_mat(&low, &bank.lora[i].wb);
    for (a, b) in q.iter_mut().zip(&delta) {
        *a += *b;
    }
    Ok(q)
}

/// Builds `n` experts of shape `d × d_v × d`.
pub fn init_experts<T: Real, R: Rng + ?Sized>(
    n: usize,
    d: usize,
    d_v: usize,
    activation: Activation,
    rng: &mut R,
) -> Vec<Expert<T>> {
    (0..n).map(|_| Expert::init(d, d_v, activation, rng)).collect()
}

/// Attention-side bank for `cfg`: routed experts with LoRA query pairs, fixed experts,
/// shared query and key projections. `W_b` starts at zero.
pub fn init_bank<T: Real>(cfg: &ModelConfig, seed: u64) -> ExpertBank<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.hidden_dim;
    let dk = cfg.key_dim;
    let n = cfg.attn_experts();
    let r = cfg.lora_rank;
    let proj_std = (2.0 / (d + dk) as f64).sqrt();
    let wq = Matrix::randn(d, dk, proj_std, &mut rng);
    let wk = Matrix::randn(d, dk, proj_std, &mut rng);
    let experts = init_experts(n, d, cfg.value_dim, cfg.expert_activation, &mut rng);
    let lora_std = (1.0 / d as f64).sqrt();
    let lora = (0..n)
        .map(|_| LoraQuery {
            wa: Matrix::randn(d, r, lora_std, &mut rng),
            wb: Matrix::zeros(r, dk),
        })
        .collect();
    let fixed = init_experts(cfg.attn_fixed(), d, cfg.value_dim, cfg.expert_activation, &mut rng);
    ExpertBank {
        experts,
        lora,
        fixed,
        wq,
        wk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{count_params, preset, Preset};
    use crate::tensor::rel_max_diff;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_input_maps_to_zero() {
        for act in [Activation::Gelu, Activation::Relu, Activation::None] {
            let e = Expert::<f64>::init(5, 3, act, &mut rng(1));
            assert_eq!(expert_forward(&e, &[0.0; 5]), vec![0.0; 5]);
        }
    }

    #[test]
    fn linear_expert_is_matrix_product() {
        let e = Expert::<f64>::init(6, 4, Activation::None, &mut rng(2));
        let x = Matrix::<f64>::randn(1, 6, 1.0, &mut rng(3)).into_data();
        let w = e.w1.matmul(&e.w2).unwrap();
        assert!(rel_max_diff(&expert_forward(&e, &x), &vec_mat(&x, &w)) < 1e-14);
    }

    #[test]
    fn relu_clamps_negatives() {
        let e = Expert {
            w1: Matrix::<f64>::identity(3),
            w2: Matrix::identity(3),
            activation: Activation::Relu,
        };
        assert_eq!(expert_forward(&e, &[1.0, -2.0, 3.0]), vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for z in [-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(z + h) - Activation::Gelu.apply(z - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_lora_down_projection_gives_shared_query() {
        let cfg = preset(Preset::TinyTest);
        let mut bank = init_bank::<f64>(&cfg, 4);
        for l in &mut bank.lora {
            l.wa.fill(0.0);
            l.wb = Matrix::randn(l.wb.rows(), l.wb.cols(), 1.0, &mut rng(5));
        }
        let x = Matrix::<f64>::randn(1, cfg.hidden_dim, 1.0, &mut rng(6)).into_data();
        let shared = vec_mat(&x, &bank.wq);
        for i in 0..bank.n_experts() {
            assert_eq!(expert_query(&bank, i, &x).unwrap(), shared);
        }
    }

    #[test]
    fn query_matches_dense_sum() {
        let cfg = preset(Preset::TinyTest);
        let mut bank = init_bank::<f64>(&cfg, 7);
        let mut r = rng(8);
        for l in &mut bank.lora {
            l.wb = Matrix::randn(l.wb.rows(), l.wb.cols(), 1.0, &mut r);
        }
        let x = Matrix::<f64>::randn(1, cfg.hidden_dim, 1.0, &mut r).into_data();
        for i in 0..bank.n_experts() {
            let mut w = bank.lora[i].wa.matmul(&bank.lora[i].wb).unwrap();
            w.add_assign(&bank.wq);
            assert!(rel_max_diff(&expert_query(&bank, i, &x).unwrap(), &vec_mat(&x, &w)) < 1e-13);
        }
        assert_eq!(
            expert_query(&bank, 0, &vec![0.0; cfg.hidden_dim]).unwrap(),
            vec![0.0; cfg.key_dim]
        );
        assert!(matches!(
            expert_query(&bank, 99, &x),
            Err(UmoeError::IndexOutOfRange { index: 99, .. })
        ));
    }

    #[test]
    fn init_is_deterministic_and_queries_coincide() {
        let cfg = preset(Preset::TinyTest);
        let a = init_bank::<f64>(&cfg, 11);
        assert_eq!(a, init_bank::<f64>(&cfg, 11));
        assert_ne!(a, init_bank::<f64>(&cfg, 12));
        let x = Matrix::<f64>::randn(1, cfg.hidden_dim, 1.0, &mut rng(1)).into_data();
        let q0 = expert_query(&a, 0, &x).unwrap();
        for i in 1..a.n_experts() {
            assert_eq!(expert_query(&a, i, &x).unwrap(), q0);
        }
    }

    #[test]
    fn bank_size_matches_closed_form_count() {
        let cfg = preset(Preset::TinyTest);
        let bank = init_bank::<f32>(&cfg, 0);
        let count = count_params(&cfg).unwrap();
        let layers = cfg.n_layers as u64;
        // The attention bank owns every expert since the FFN aliases it.
        assert_eq!(bank.expert_params() as u64 * layers, count.expert_bank);
        assert_eq!(bank.lora_params() as u64 * layers, count.lora);
        assert_eq!((bank.wq.len() + bank.wk.len()) as u64 * layers, count.attention_shared);
    }

    #[test]
    fn expert_and_query_gradients_match_finite_differences() {
        let (d, dv, r, dk) = (6, 4, 2, 4);
        let mut g = rng(21);
        let e = Expert::<f64>::init(d, dv, Activation::Gelu, &mut g);
        let x = Matrix::<f64>::randn(1, d, 1.0, &mut g).into_data();
        let w = Matrix::<f64>::randn(1, d, 1.0, &mut g).into_data();
        let loss = |e: &Expert<f64>, x: &[f64]| crate::tensor::dot(&expert_forward(e, x), &w);
        let (z, _) = e.forward_parts(&x);
        let mut grad = e.zeros_like();
        let dx = e.backward(&x, &z, &w, &mut grad);
        let h = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8);
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            assert!(close((loss(&e, &xp) - loss(&e, &xm)) / (2.0 * h), dx[i]));
        }
        for idx in 0..e.w1.len() {
            let mut ep = e.clone();
            let mut em = e.clone();
            ep.w1.data_mut()[idx] += h;
            em.w1.data_mut()[idx] -= h;
            assert!(close((loss(&ep, &x) - loss(&em, &x)) / (2.0 * h), grad.w1.data()[idx]));
        }
        for idx in 0..e.w2.len() {
            let mut ep = e.clone();
            let mut em = e.clone();
            ep.w2.data_mut()[idx] += h;
            em.w2.data_mut()[idx] -= h;
            assert!(close((loss(&ep, &x) - loss(&em, &x)) / (2.0 * h), grad.w2.data()[idx]));
        }

        // Query: q = x W_q + (x W_a) W_b is bilinear, so the gradient of <q, v> is analytic.
        let bank = ExpertBank {
            experts: vec![e.clone()],
            lora: vec![LoraQuery {
                wa: Matrix::randn(d, r, 1.0, &mut g),
                wb: Matrix::randn(r, dk, 1.0, &mut g),
            }],
            fixed: vec![],
            wq: Matrix::randn(d, dk, 1.0, &mut g),
            wk: Matrix::zeros(d, dk),
        };
        let v = Matrix::<f64>::randn(1, dk, 1.0, &mut g).into_data();
        let qloss = |b: &ExpertBank<f64>| crate::tensor::dot(&expert_query(b, 0, &x).unwrap(), &v);
        let low = bank.lora_down(0, &x);
        let dlow = mat_vec(&bank.lora[0].wb, &v);
        for idx in 0..bank.lora[0].wb.len() {
            let (row, col) = (idx / dk, idx % dk);
            let mut bp = bank.clone();
            let mut bm = bank.clone();
            bp.lora[0].wb.data_mut()[idx] += h;
            bm.lora[0].wb.data_mut()[idx] -= h;
            assert!(close((qloss(&bp) - qloss(&bm)) / (2.0 * h), low[row] * v[col]));
        }
        for idx in 0..bank.lora[0].wa.len() {
            let (row, col) = (idx / r, idx % r);
            let mut bp = bank.clone();
            let mut bm = bank.clone();
            bp.lora[0].wa.data_mut()[idx] += h;
            bm.lora[0].wa.data_mut()[idx] -= h;
            assert!(close((qloss(&bp) - qloss(&bm)) / (2.0 * h), x[row] * dlow[col]));
        }
    }

    proptest! {
        #[test]
        fn linear_expert_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut g = rng(seed);
            let e = Expert::<f64>::init(5, 3, Activation::None, &mut g);
            let x = Matrix::<f64>::randn(1, 5, 1.0, &mut g).into_data();
            let y = Matrix::<f64>::randn(1, 5, 1.0, &mut g).into_data();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = expert_forward(&e, &combo);
            let ex = expert_forward(&e, &x);
            let ey = expert_forward(&e, &y);
            for c in 0..5 {
                prop_assert!((lhs[c] - (a * ex[c] + b * ey[c])).abs() < 1e-12);
            }
        }
    }
}
