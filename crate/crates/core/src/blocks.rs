//! Sublayers, the stacked decoder, loss, and the hand-written backward pass.
//!
//! Every sublayer is evaluated one token at a time against a causal cache.
//! The full-sequence forward and the incremental decoder call the same
//! per-token kernels, so cached decoding reproduces the full forward exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, AttnVariant, ModelConfig, ParamCategory, ParamCount};
use crate::error::{Result, UmoeError};
use crate::experts::{init_bank, init_experts, Expert, ExpertBank};
use crate::mixing::{attn_row, mix_rows, rope_in_place, rope_inverse_in_place, DenseAttnParams, HeadShape, MixState};
use crate::router::{balance_loss, balance_loss_prob_grads, route, RouterParams, RoutingDecision};
use crate::tensor::{add_into, add_outer, axpy, dot, mat_vec, softmax, softmax_backward, vec_mat, Matrix, Real};

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct MoeAttnParams<T> {
    pub router: RouterParams<T>,
    pub bank: ExpertBank<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttnParams<T> {
    Dense(DenseAttnParams<T>),
    Moe(MoeAttnParams<T>),
}

/// MoE FFN weights. `None` fields alias the attention sublayer's router,
/// routed experts, or fixed experts of the same layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeFfnParams<T> {
    pub router: Option<RouterParams<T>>,
    pub experts: Option<Vec<Expert<T>>>,
    pub fixed: Option<Vec<Expert<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams<T> {
    Dense(Expert<T>),
    Moe(MoeFfnParams<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// RMSNorm gains, `1 × d`.
    pub attn_norm: Matrix<T>,
    pub ffn_norm: Matrix<T>,
    pub attn: AttnParams<T>,
    pub ffn: FfnParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    /// `vocab × d`
    pub embed: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Matrix<T>,
    /// `d × vocab`
    pub lm_head: Matrix<T>,
}

/// Gradients share the model's layout, including its aliasing.
pub type GradientSet<T> = Model<T>;

/// An activated expert: routed experts by index, fixed experts by their own index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExpertSlot {
    Routed(usize),
    Fixed(usize),
}

fn slot_ref<'a, T>(experts: &'a [Expert<T>], fixed: &'a [Expert<T>], slot: ExpertSlot) -> &'a Expert<T> {
    match slot {
        ExpertSlot::Routed(i) => &experts[i],
        ExpertSlot::Fixed(f) => &fixed[f],
    }
}

fn slot_mut<'a, T>(experts: &'a mut [Expert<T>], fixed: &'a mut [Expert<T>], slot: ExpertSlot) -> &'a mut Expert<T> {
    match slot {
        ExpertSlot::Routed(i) => &mut experts[i],
        ExpertSlot::Fixed(f) => &mut fixed[f],
    }
}

/// Resolved FFN experts of one layer, following aliases.
pub struct FfnView<'a, T> {
    pub router: &'a RouterParams<T>,
    pub experts: &'a [Expert<T>],
    pub fixed: &'a [Expert<T>],
}

struct FfnViewMut<'a, T> {
    router: &'a mut RouterParams<T>,
    experts: &'a mut [Expert<T>],
    fixed: &'a mut [Expert<T>],
}

impl<T: Real> MoeAttnParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            router: RouterParams::new(Matrix::zeros(self.router.w.rows(), self.router.w.cols())),
            bank: self.bank.zeros_like(),
        }
    }
}

fn zeros_experts<T: Real>(e: &[Expert<T>]) -> Vec<Expert<T>> {
    e.iter().map(Expert::zeros_like).collect()
}

impl<T: Real> LayerParams<T> {
    pub fn ffn_view(&self) -> Option<FfnView<'_, T>> {
        let f = match &self.ffn {
            FfnParams::Moe(f) => f,
            FfnParams::Dense(_) => return None,
        };
        let attn = match &self.attn {
            AttnParams::Moe(a) => Some(a),
            AttnParams::Dense(_) => None,
        };
        Some(FfnView {
            router: f.router.as_ref().or(attn.map(|a| &a.router)).expect("aliased router"),
            experts: f
                .experts
                .as_deref()
                .or(attn.map(|a| a.bank.experts.as_slice()))
                .expect("aliased experts"),
            fixed: f
                .fixed
                .as_deref()
                .or(attn.map(|a| a.bank.fixed.as_slice()))
                .expect("aliased fixed experts"),
        })
    }

    fn ffn_view_mut(&mut self) -> Option<FfnViewMut<'_, T>> {
        let LayerParams { attn, ffn, .. } = self;
        let f = match ffn {
            FfnParams::Moe(f) => f,
            FfnParams::Dense(_) => return None,
        };
        let (mut ar, mut ae, mut af) = (None, None, None);
        if let AttnParams::Moe(a) = attn {
            ar = Some(&mut a.router);
            ae = Some(&mut a.bank.experts);
            af = Some(&mut a.bank.fixed);
        }
        Some(FfnViewMut {
            router: f.router.as_mut().or(ar).expect("aliased router"),
            experts: f.experts.as_mut().or(ae).expect("aliased experts"),
            fixed: f.fixed.as_mut().or(af).expect("aliased fixed experts"),
        })
    }

    fn zeros_like(&self) -> Self {
        let attn = match &self.attn {
            AttnParams::Dense(p) => AttnParams::Dense(DenseAttnParams {
                wq: Matrix::zeros(p.wq.rows(), p.wq.cols()),
                wk: Matrix::zeros(p.wk.rows(), p.wk.cols()),
                wv: Matrix::zeros(p.wv.rows(), p.wv.cols()),
                wo: Matrix::zeros(p.wo.rows(), p.wo.cols()),
            }),
            AttnParams::Moe(p) => AttnParams::Moe(p.zeros_like()),
        };
        let ffn = match &self.ffn {
            FfnParams::Dense(e) => FfnParams::Dense(e.zeros_like()),
            FfnParams::Moe(f) => FfnParams::Moe(MoeFfnParams {
                router: f
                    .router
                    .as_ref()
                    .map(|r| RouterParams::new(Matrix::zeros(r.w.rows(), r.w.cols()))),
                experts: f.experts.as_deref().map(zeros_experts),
                fixed: f.fixed.as_deref().map(zeros_experts),
            }),
        };
        Self {
            attn_norm: Matrix::zeros(1, self.attn_norm.cols()),
            ffn_norm: Matrix::zeros(1, self.ffn_norm.cols()),
            attn,
            ffn,
        }
    }
}

macro_rules! collect_tensors {
    ($model:expr, $out:ident, $($m:tt)?) => {{
        use ParamCategory::*;
        $out.push(("embed".to_string(), Embeddings, & $($m)? $model.embed));
        for (l, layer) in (& $($m)? $model.layers).into_iter().enumerate() {
            let p = format!("layers.{l}");
            $out.push((format!("{p}.attn_norm"), LayerNorms, & $($m)? layer.attn_norm));
            $out.push((format!("{p}.ffn_norm"), LayerNorms, & $($m)? layer.ffn_norm));
            match & $($m)? layer.attn {
                AttnParams::Dense(a) => {
                    $out.push((format!("{p}.attn.wq"), AttentionShared, & $($m)? a.wq));
                    $out.push((format!("{p}.attn.wk"), AttentionShared, & $($m)? a.wk));
                    $out.push((format!("{p}.attn.wv"), AttentionShared, & $($m)? a.wv));
                    $out.push((format!("{p}.attn.wo"), AttentionShared, & $($m)? a.wo));
                }
                AttnParams::Moe(a) => {
                    $out.push((format!("{p}.attn.router"), Routers, & $($m)? a.router.w));
                    $out.push((format!("{p}.attn.wq"), AttentionShared, & $($m)? a.bank.wq));
                    $out.push((format!("{p}.attn.wk"), AttentionShared, & $($m)? a.bank.wk));
                    for (i, e) in (& $($m)? a.bank.experts).into_iter().enumerate() {
                        $out.push((format!("{p}.attn.experts.{i}.w1"), ExpertBank, & $($m)? e.w1));
                        $out.push((format!("{p}.attn.experts.{i}.w2"), ExpertBank, & $($m)? e.w2));
                    }
                    for (i, q) in (& $($m)? a.bank.lora).into_iter().enumerate() {
                        $out.push((format!("{p}.attn.lora.{i}.wa"), Lora, & $($m)? q.wa));
                        $out.push((format!("{p}.attn.lora.{i}.wb"), Lora, & $($m)? q.wb));
                    }
                    for (i, e) in (& $($m)? a.bank.fixed).into_iter().enumerate() {
                        $out.push((format!("{p}.attn.fixed.{i}.w1"), FixedExperts, & $($m)? e.w1));
                        $out.push((format!("{p}.attn.fixed.{i}.w2"), FixedExperts, & $($m)? e.w2));
                    }
                }
            }
            match & $($m)? layer.ffn {
                FfnParams::Dense(e) => {
                    $out.push((format!("{p}.ffn.w1"), DenseFfn, & $($m)? e.w1));
                    $out.push((format!("{p}.ffn.w2"), DenseFfn, & $($m)? e.w2));
                }
                FfnParams::Moe(f) => {
                    if let Some(r) = & $($m)? f.router {
                        $out.push((format!("{p}.ffn.router"), Routers, & $($m)? r.w));
                    }
                    if let Some(experts) = & $($m)? f.experts {
                        for (i, e) in experts.into_iter().enumerate() {
                            $out.push((format!("{p}.ffn.experts.{i}.w1"), ExpertBank, & $($m)? e.w1));
                            $out.push((format!("{p}.ffn.experts.{i}.w2"), ExpertBank, & $($m)? e.w2));
                        }
                    }
                    if let Some(fixed) = & $($m)? f.fixed {
                        for (i, e) in fixed.into_iter().enumerate() {
                            $out.push((format!("{p}.ffn.fixed.{i}.w1"), FixedExperts, & $($m)? e.w1));
                            $out.push((format!("{p}.ffn.fixed.{i}.w2"), FixedExperts, & $($m)? e.w2));
                        }
                    }
                }
            }
        }
        $out.push(("final_norm".to_string(), FinalNorm, & $($m)? $model.final_norm));
        $out.push(("lm_head".to_string(), LmHead, & $($m)? $model.lm_head));
    }};
}

impl<T: Real> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.validate()?.into_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        let embed = Matrix::randn(cfg.vocab_size, d, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let ones = Matrix::from_fn(1, d, |_, _| T::one());
            let attn = if cfg.attn_is_moe() {
                AttnParams::Moe(MoeAttnParams {
                    router: RouterParams::init(cfg.attn_experts(), d, &mut rng),
                    bank: init_bank(&cfg, rng.gen()),
                })
            } else {
                AttnParams::Dense(DenseAttnParams::init(d, head_shape(&cfg), &mut rng))
            };
            let ffn = if cfg.ffn_is_moe() {
                let n = cfg.ffn_experts();
                MoeFfnParams {
                    router: (!cfg.shares_router()).then(|| RouterParams::init(n, d, &mut rng)),
                    experts: (!cfg.shares_experts())
                        .then(|| init_experts(n, d, cfg.value_dim, cfg.expert_activation, &mut rng)),
                    fixed: (!cfg.shares_fixed())
                        .then(|| init_experts(cfg.ffn_fixed(), d, cfg.value_dim, cfg.expert_activation, &mut rng)),
                }
                .into()
            } else {
                FfnParams::Dense(Expert::init(d, cfg.ffn_dim, Activation::Gelu, &mut rng))
            };
            layers.push(LayerParams {
                attn_norm: ones.clone(),
                ffn_norm: ones,
                attn,
                ffn,
            });
        }
        let lm_head = Matrix::randn(d, cfg.vocab_size, (1.0 / d as f64).sqrt(), &mut rng);
        Ok(Self {
            embed,
            layers,
            final_norm: Matrix::from_fn(1, d, |_, _| T::one()),
            lm_head,
            cfg,
        })
    }

    pub fn zeros_like(&self) -> GradientSet<T> {
        Model {
            cfg: self.cfg.clone(),
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            final_norm: Matrix::zeros(1, self.final_norm.cols()),
            lm_head: Matrix::zeros(self.lm_head.rows(), self.lm_head.cols()),
        }
    }

    /// Every distinct parameter tensor in a fixed order; aliased tensors appear once.
    pub fn tensors(&self) -> Vec<(String, ParamCategory, &Matrix<T>)> {
        let mut out = Vec::new();
        collect_tensors!(self, out,);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamCategory, &mut Matrix<T>)> {
        let mut out = Vec::new();
        collect_tensors!(self, out, mut);
        out
    }

    /// Parameter totals measured from the instantiated tensors.
    pub fn measured_params(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for (_, cat, m) in self.tensors() {
            let n = m.len() as u64;
            match cat {
                ParamCategory::Embeddings => c.embeddings += n,
                ParamCategory::AttentionShared => c.attention_shared += n,
                ParamCategory::DenseFfn => c.dense_ffn += n,
                ParamCategory::ExpertBank => c.expert_bank += n,
                ParamCategory::FixedExperts => c.fixed_experts += n,
                ParamCategory::Lora => c.lora += n,
                ParamCategory::Routers => c.routers += n,
                ParamCategory::LayerNorms => c.layer_norms += n,
                ParamCategory::FinalNorm => c.final_norm += n,
                ParamCategory::LmHead => c.lm_head += n,
            }
        }
        c.total = c.sum_of_categories();
        c
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::init(&self.cfg, 0).expect("config already validated");
        for ((_, _, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }
}

impl<T> From<MoeFfnParams<T>> for FfnParams<T> {
    fn from(p: MoeFfnParams<T>) -> Self {
        FfnParams::Moe(p)
    }
}

pub fn head_shape(cfg: &ModelConfig) -> HeadShape {
    HeadShape {
        n_heads: cfg.n_heads,
        key_dim: cfg.key_dim,
        value_dim: cfg.value_dim,
        rope_base: Some(cfg.rope_base),
    }
}

// ---------------------------------------------------------------------------
// Norm

pub(crate) fn rmsnorm<T: Real>(x: &[T], gain: &[T], eps: f64) -> (Vec<T>, T) {
    let ms = dot(x, x) / T::lit(x.len() as f64);
    let inv = T::one() / (ms + T::lit(eps)).sqrt();
    (x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect(), inv)
}

fn rmsnorm_backward<T: Real>(x: &[T], gain: &[T], inv: T, dy: &[T], dgain: &mut [T]) -> Vec<T> {
    let d = T::lit(x.len() as f64);
    let mut proj = T::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        proj += gain[i] * dy[i] * x[i];
    }
    let coef = inv * inv * inv * proj / d;
    (0..x.len()).map(|i| inv * gain[i] * dy[i] - x[i] * coef).collect()
}

fn norm_rows<T: Real>(x: &Matrix<T>, gain: &Matrix<T>, eps: f64) -> (Matrix<T>, Vec<T>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (y, inv) = rmsnorm(x.row(t), gain.data(), eps);
        out.row_mut(t).copy_from_slice(&y);
        invs.push(inv);
    }
    (out, invs)
}

// ---------------------------------------------------------------------------
// Per-token kernels

/// Diagnostic overrides for the attention sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixOptions {
    /// Each token attends only to itself.
    pub identity_mixing: bool,
    /// Routed experts get gate 1 instead of their probability.
    pub unit_gates: bool,
    pub disable_rope: bool,
}

#[derive(Clone, Copy, Debug)]
struct Settings {
    attn_k: usize,
    ffn_k: usize,
    key_dim: usize,
    rope_base: Option<f64>,
    postmix: bool,
    renormalize: bool,
    opts: MixOptions,
    heads: HeadShape,
}

impl Settings {
    fn new(cfg: &ModelConfig, opts: MixOptions) -> Self {
        let rope_base = (!opts.disable_rope).then_some(cfg.rope_base);
        Self {
            attn_k: cfg.attn_routed_k(),
            ffn_k: cfg.ffn_routed_k(),
            key_dim: cfg.key_dim,
            rope_base,
            postmix: cfg.attn_variant == AttnVariant::UmoeAttPostmix,
            renormalize: cfg.renormalize_gates,
            opts,
            heads: HeadShape {
                rope_base,
                ..head_shape(cfg)
            },
        }
    }
}

fn effective_gates<T: Real>(d: &RoutingDecision<T>, renormalize: bool, unit: bool) -> Vec<T> {
    if unit {
        vec![T::one(); d.k()]
    } else if renormalize {
        d.renormalized_gates()
    } else {
        d.gates.clone()
    }
}

/// Maps gate gradients back onto the full probability vector.
fn gate_grads_to_probs<T: Real>(d: &RoutingDecision<T>, dgates: &[T], renormalize: bool, unit: bool) -> Vec<T> {
    let mut dp = vec![T::zero(); d.probs.len()];
    if unit {
        return dp;
    }
    if renormalize {
        let s: T = d.gates.iter().copied().sum();
        let inner: T = dgates.iter().zip(&d.gates).map(|(&g, &p)| g * p).sum();
        for (j, &i) in d.indices.iter().enumerate() {
            dp[i] = dgates[j] / s - inner / (s * s);
        }
    } else {
        for (j, &i) in d.indices.iter().enumerate() {
            dp[i] = dgates[j];
        }
    }
    dp
}

/// Causal cache of one attention sublayer for one sequence.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    pub mix: MixState<T>,
    /// Post-mixing only: per position, expert pre-activation and output.
    outputs: Vec<BTreeMap<ExpertSlot, (Vec<T>, Vec<T>)>>,
}

impl<T: Real> AttnCache<T> {
    pub fn for_layer(cfg: &ModelConfig) -> Self {
        let mix = if cfg.attn_is_moe() {
            MixState::new(cfg.key_dim, cfg.hidden_dim, cfg.context_len)
        } else {
            MixState::new(cfg.n_heads * cfg.key_dim, cfg.n_heads * cfg.value_dim, cfg.context_len)
        };
        Self {
            mix,
            outputs: Vec::new(),
        }
    }

    fn expert_output(&mut self, j: usize, slot: ExpertSlot, expert: &Expert<T>) -> &(Vec<T>, Vec<T>) {
        let hidden = self.mix.hidden_row(j);
        self.outputs[j]
            .entry(slot)
            .or_insert_with(|| expert.forward_parts(hidden))
    }
}

#[derive(Clone, Debug)]
struct AttnExpertUse<T> {
    slot: ExpertSlot,
    gate: T,
    /// `u · W_a^i` for routed experts.
    low: Vec<T>,
    /// Rotated query.
    q: Vec<T>,
    a: Vec<T>,
    /// Pre-mixing only: mixed input and expert pre-activation.
    m: Vec<T>,
    z: Vec<T>,
    /// Expert contribution before gating.
    y: Vec<T>,
}

#[derive(Clone, Debug)]
struct MoeAttnToken<T> {
    decision: RoutingDecision<T>,
    uses: Vec<AttnExpertUse<T>>,
}

#[derive(Clone, Debug)]
struct DenseAttnToken<T> {
    q: Vec<T>,
    a: Vec<Vec<T>>,
    o: Vec<T>,
}

#[derive(Clone, Debug)]
enum AttnRecord<T> {
    Dense(DenseAttnToken<T>),
    Moe(MoeAttnToken<T>),
}

#[derive(Clone, Debug)]
struct FfnExpertUse<T> {
    slot: ExpertSlot,
    gate: T,
    z: Vec<T>,
    y: Vec<T>,
}

#[derive(Clone, Debug)]
enum FfnRecord<T> {
    Dense(Vec<T>),
    Moe {
        decision: RoutingDecision<T>,
        uses: Vec<FfnExpertUse<T>>,
    },
}

fn one_hot<T: Real>(len: usize, at: usize) -> Vec<T> {
    let mut v = vec![T::zero(); len];
    v[at] = T::one();
    v
}

fn moe_attn_token<T: Real>(
    s: &Settings,
    p: &MoeAttnParams<T>,
    cache: &mut AttnCache<T>,
    u: &[T],
) -> Result<(Vec<T>, MoeAttnToken<T>)> {
    let bank = &p.bank;
    let t = cache.mix.len();
    let mut key = vec_mat(u, &bank.wk);
    if let Some(base) = s.rope_base {
        rope_in_place(&mut key, t, base);
    }
    cache.mix.cache_step(&key, u)?;
    if s.postmix {
        cache.outputs.push(BTreeMap::new());
    }
    let decision = route(&p.router, u, s.attn_k)?;
    let gates = effective_gates(&decision, s.renormalize, s.opts.unit_gates);
    let shared = vec_mat(u, &bank.wq);
    let d = u.len();
    let mut out = vec![T::zero(); d];
    let active: Vec<(ExpertSlot, T)> = decision
        .indices
        .iter()
        .zip(&gates)
        .map(|(&i, &g)| (ExpertSlot::Routed(i), g))
        .chain((0..bank.fixed.len()).map(|f| (ExpertSlot::Fixed(f), T::one())))
        .collect();
    let mut uses = Vec::with_capacity(active.len());
    for (slot, gate) in active {
        let mut q = shared.clone();
        let low = match slot {
            ExpertSlot::Routed(i) => {
                let low = bank.lora_down(i, u);
                add_into(&mut q, &vec_mat(&low, &bank.lora[i].wb));
                low
            }
            ExpertSlot::Fixed(_) => Vec::new(),
        };
        if let Some(base) = s.rope_base {
            rope_in_place(&mut q, t, base);
        }
        let a = if s.opts.identity_mixing {
            one_hot(t + 1, t)
        } else {
            attn_row(&q, cache.mix.keys(), s.key_dim)
        };
        let expert = slot_ref(&bank.experts, &bank.fixed, slot);
        let (m, z, y) = if s.postmix {
            let mut y = vec![T::zero(); d];
            for (j, &w) in a.iter().enumerate() {
                if w != T::zero() {
                    axpy(&mut y, w, &cache.expert_output(j, slot, expert).1);
                }
            }
            (Vec::new(), Vec::new(), y)
        } else {
            let m = mix_rows(&a, cache.mix.hidden(), d);
            let (z, y) = expert.forward_parts(&m);
            (m, z, y)
        };
        axpy(&mut out, gate, &y);
        uses.push(AttnExpertUse {
            slot,
            gate,
            low,
            q,
            a,
            m,
            z,
            y,
        });
    }
    Ok((out, MoeAttnToken { decision, uses }))
}

fn dense_attn_token<T: Real>(
    s: &Settings,
    p: &DenseAttnParams<T>,
    cache: &mut AttnCache<T>,
    u: &[T],
) -> Result<(Vec<T>, DenseAttnToken<T>)> {
    let HeadShape {
        n_heads,
        key_dim: dk,
        value_dim: dv,
        ..
    } = s.heads;
    let t = cache.mix.len();
    let mut q = vec_mat(u, &p.wq);
    let mut k = vec_mat(u, &p.wk);
    let v = vec_mat(u, &p.wv);
    if let Some(base) = s.rope_base {
        for h in 0..n_heads {
            rope_in_place(&mut q[h * dk..(h + 1) * dk], t, base);
            rope_in_place(&mut k[h * dk..(h + 1) * dk], t, base);
        }
    }
    cache.mix.cache_step(&k, &v)?;
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let mut o = vec![T::zero(); n_heads * dv];
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = &q[h * dk..(h + 1) * dk];
        let scores: Vec<T> = (0..=t)
            .map(|j| dot(qh, &cache.mix.key(j)[h * dk..(h + 1) * dk]) * scale)
            .collect();
        let a = softmax(&scores);
        for (j, &w) in a.iter().enumerate() {
            axpy(
                &mut o[h * dv..(h + 1) * dv],
                w,
                &cache.mix.hidden_row(j)[h * dv..(h + 1) * dv],
            );
        }
        weights.push(a);
    }
    let out = vec_mat(&o, &p.wo);
    Ok((out, DenseAttnToken { q, a: weights, o }))
}

fn moe_ffn_token<T: Real>(s: &Settings, view: &FfnView<'_, T>, u: &[T]) -> Result<(Vec<T>, FfnRecord<T>)> {
    let decision = route(view.router, u, s.ffn_k)?;
    let gates = effective_gates(&decision, s.renormalize, s.opts.unit_gates);
    let mut out = vec![T::zero(); u.len()];
    let active: Vec<(ExpertSlot, T)> = decision
        .indices
        .iter()
        .zip(&gates)
        .map(|(&i, &g)| (ExpertSlot::Routed(i), g))
        .chain((0..view.fixed.len()).map(|f| (ExpertSlot::Fixed(f), T::one())))
        .collect();
    let mut uses = Vec::with_capacity(active.len());
    for (slot, gate) in active {
        let (z, y) = slot_ref(view.experts, view.fixed, slot).forward_parts(u);
        axpy(&mut out, gate, &y);
        uses.push(FfnExpertUse { slot, gate, z, y });
    }
    Ok((out, FfnRecord::Moe { decision, uses }))
}

impl<T: Real> LayerParams<T> {
    fn attn_token(&self, s: &Settings, cache: &mut AttnCache<T>, u: &[T]) -> Result<(Vec<T>, AttnRecord<T>)> {
        match &self.attn {
            AttnParams::Dense(p) => dense_attn_token(s, p, cache, u).map(|(o, r)| (o, AttnRecord::Dense(r))),
            AttnParams::Moe(p) => moe_attn_token(s, p, cache, u).map(|(o, r)| (o, AttnRecord::Moe(r))),
        }
    }

    fn ffn_token(&self, s: &Settings, u: &[T]) -> Result<(Vec<T>, FfnRecord<T>)> {
        match &self.ffn {
            FfnParams::Dense(e) => {
                let (z, y) = e.forward_parts(u);
                Ok((y, FfnRecord::Dense(z)))
            }
            FfnParams::Moe(_) => moe_ffn_token(s, &self.ffn_view().expect("moe ffn"), u),
        }
    }
}

// ---------------------------------------------------------------------------
// Sublayer entry points

/// MoE attention sublayer over a normalized sequence `x` (residual not added).
pub fn umoe_att_sublayer<T: Real>(
    cfg: &ModelConfig,
    params: &MoeAttnParams<T>,
    x: &Matrix<T>,
    opts: MixOptions,
) -> Result<Matrix<T>> {
    if !cfg.attn_is_moe() {
        return Err(UmoeError::InvalidConfig("attention sublayer is not MoE".into()));
    }
    let s = Settings::new(cfg, opts);
    let mut cache = AttnCache::for_layer(cfg);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let (y, _) = moe_attn_token(&s, params, &mut cache, x.row(t))?;
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}

/// FFN-MoE sublayer: per token `Σ_{i∈T} g_i E_i(x) + Σ_f E_f(x)`.
pub fn ffn_moe_sublayer<T: Real>(
    router: &RouterParams<T>,
    experts: &[Expert<T>],
    fixed: &[Expert<T>],
    x: &Matrix<T>,
    k: usize,
    renormalize: bool,
) -> Result<Matrix<T>> {
    let view = FfnView { router, experts, fixed };
    let s = Settings {
        attn_k: 0,
        ffn_k: k,
        key_dim: 0,
        rope_base: None,
        postmix: false,
        renormalize,
        opts: MixOptions::default(),
        heads: HeadShape {
            n_heads: 0,
            key_dim: 0,
            value_dim: 0,
            rope_base: None,
        },
    };
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let (y, _) = moe_ffn_token(&s, &view, x.row(t))?;
        out.row_mut(t).copy_from_slice(&y);
    }
    Ok(out)
}

/// Attention row of one routed expert at `position`, whether or not the router activates it.
pub fn expert_attention_row<T: Real>(
    cfg: &ModelConfig,
    params: &MoeAttnParams<T>,
    x: &Matrix<T>,
    position: usize,
    expert: usize,
) -> Result<Vec<T>> {
    if position >= x.rows() {
        return Err(UmoeError::PositionOutOfRange {
            position,
            len: x.rows(),
        });
    }
    let bank = &params.bank;
    if expert >= bank.n_experts() {
        return Err(UmoeError::IndexOutOfRange {
            index: expert,
            len: bank.n_experts(),
        });
    }
    let mut keys = Vec::with_capacity((position + 1) * cfg.key_dim);
    for j in 0..=position {
        let mut k = vec_mat(x.row(j), &bank.wk);
        rope_in_place(&mut k, j, cfg.rope_base);
        keys.extend(k);
    }
    let mut q = crate::experts::expert_query(bank, expert, x.row(position))?;
    rope_in_place(&mut q, position, cfg.rope_base);
    let mut row = attn_row(&q, &keys, cfg.key_dim);
    row.resize(x.rows(), T::zero());
    Ok(row)
}

// ---------------------------------------------------------------------------
// Full forward

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting<T> {
    pub attn: Option<Vec<RoutingDecision<T>>>,
    pub ffn: Option<Vec<RoutingDecision<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub logits: Matrix<T>,
    pub layers: Vec<LayerRouting<T>>,
    pub balance_loss_coeff: f64,
}

struct LayerTape<T> {
    x_in: Matrix<T>,
    attn_in: Matrix<T>,
    attn_inv: Vec<T>,
    cache: AttnCache<T>,
    attn: Vec<AttnRecord<T>>,
    x_mid: Matrix<T>,
    ffn_in: Matrix<T>,
    ffn_inv: Vec<T>,
    ffn: Vec<FfnRecord<T>>,
}

struct Tape<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerTape<T>>,
    x_final: Matrix<T>,
    final_in: Matrix<T>,
    final_inv: Vec<T>,
    logits: Matrix<T>,
}

impl<T> LayerTape<T> {
    fn attn_decisions(&self) -> Option<Vec<&RoutingDecision<T>>> {
        let ds: Vec<_> = self
            .attn
            .iter()
            .filter_map(|r| match r {
                AttnRecord::Moe(m) => Some(&m.decision),
                AttnRecord::Dense(_) => None,
            })
            .collect();
        (!ds.is_empty() || matches!(self.attn.first(), Some(AttnRecord::Moe(_)))).then_some(ds)
    }

    fn ffn_decisions(&self) -> Option<Vec<&RoutingDecision<T>>> {
        let ds: Vec<_> = self
            .ffn
            .iter()
            .filter_map(|r| match r {
                FfnRecord::Moe { decision, .. } => Some(decision),
                FfnRecord::Dense(_) => None,
            })
            .collect();
        (!ds.is_empty()).then_some(ds)
    }
}

/// Number of MoE sublayers whose router selects at least one expert.
fn routed_sublayers(cfg: &ModelConfig) -> usize {
    let per_layer = usize::from(cfg.attn_is_moe() && cfg.attn_routed_k() > 0)
        + usize::from(cfg.ffn_is_moe() && cfg.ffn_routed_k() > 0);
    per_layer * cfg.n_layers
}

impl<T: Real> Model<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.cfg.context_len {
            return Err(UmoeError::ContextOverflow {
                position: self.cfg.context_len,
                context_len: self.cfg.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(UmoeError::TokenOutOfVocab {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], opts: MixOptions) -> Result<Tape<T>> {
        self.check_tokens(tokens)?;
        let s = Settings::new(&self.cfg, opts);
        let eps = self.cfg.norm_eps;
        let n = tokens.len();
        let d = self.cfg.hidden_dim;
        let mut x = Matrix::zeros(n, d);
        for (t, &id) in tokens.iter().enumerate() {
            x.row_mut(t).copy_from_slice(self.embed.row(id as usize));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (attn_in, attn_inv) = norm_rows(&x, &layer.attn_norm, eps);
            let mut cache = AttnCache::for_layer(&self.cfg);
            let mut x_mid = x.clone();
            let mut attn = Vec::with_capacity(n);
            for t in 0..n {
                let (y, rec) = layer.attn_token(&s, &mut cache, attn_in.row(t))?;
                add_into(x_mid.row_mut(t), &y);
                attn.push(rec);
            }
            let (ffn_in, ffn_inv) = norm_rows(&x_mid, &layer.ffn_norm, eps);
            let mut x_out = x_mid.clone();
            let mut ffn = Vec::with_capacity(n);
            for t in 0..n {
                let (y, rec) = layer.ffn_token(&s, ffn_in.row(t))?;
                add_into(x_out.row_mut(t), &y);
                ffn.push(rec);
            }
            layers.push(LayerTape {
                x_in: x,
                attn_in,
                attn_inv,
                cache,
                attn,
                x_mid,
                ffn_in,
                ffn_inv,
                ffn,
            });
            x = x_out;
        }
        let (final_in, final_inv) = norm_rows(&x, &self.final_norm, eps);
        let logits = final_in.matmul(&self.lm_head)?;
        Ok(Tape {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            final_in,
            final_inv,
            logits,
        })
    }

    fn trace_from(&self, tape: &Tape<T>) -> ForwardTrace<T> {
        let layers = tape
            .layers
            .iter()
            .map(|l| LayerRouting {
                attn: self
                    .cfg
                    .attn_is_moe()
                    .then(|| l.attn_decisions().unwrap_or_default().into_iter().cloned().collect()),
                ffn: self
                    .cfg
                    .ffn_is_moe()
                    .then(|| l.ffn_decisions().unwrap_or_default().into_iter().cloned().collect()),
            })
            .collect();
        ForwardTrace {
            logits: tape.logits.clone(),
            layers,
            balance_loss_coeff: self.cfg.balance_loss_coeff,
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace<T>> {
        self.forward_with(tokens, MixOptions::default())
    }

    pub fn forward_with(&self, tokens: &[u32], opts: MixOptions) -> Result<ForwardTrace<T>> {
        let tape = self.run(tokens, opts)?;
        Ok(self.trace_from(&tape))
    }

    /// Independent forwards over several sequences, evaluated in parallel.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<ForwardTrace<T>>> {
        use rayon::prelude::*;
        batch.par_iter().map(|s| self.forward(s)).collect()
    }

    /// Normalized input of every attention sublayer.
    pub fn attention_inputs(&self, tokens: &[u32]) -> Result<Vec<Matrix<T>>> {
        let tape = self.run(tokens, MixOptions::default())?;
        Ok(tape.layers.into_iter().map(|l| l.attn_in).collect())
    }

    /// Cross-entropy and auxiliary loss of the sequence.
    pub fn loss(&self, tokens: &[u32], targets: &[u32]) -> Result<(T, T)> {
        lm_loss(&self.forward(tokens)?, targets)
    }
}

/// Mean next-token cross-entropy and `α ·` mean balance loss over routed MoE sublayers.
pub fn lm_loss<T: Real>(trace: &ForwardTrace<T>, targets: &[u32]) -> Result<(T, T)> {
    let n = trace.logits.rows();
    if targets.len() != n {
        return Err(UmoeError::LengthMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let vocab = trace.logits.cols();
    let mut ce = T::zero();
    for (t, &target) in targets.iter().enumerate() {
        if target as usize >= vocab {
            return Err(UmoeError::TokenOutOfVocab { id: target, vocab });
        }
        ce += cross_entropy(trace.logits.row(t), target as usize);
    }
    if n > 0 {
        ce /= T::lit(n as f64);
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for l in &trace.layers {
        for ds in [&l.attn, &l.ffn].into_iter().flatten() {
            if ds.first().is_some_and(|d| d.k() > 0) {
                total += balance_loss(ds, ds[0].probs.len())?;
                count += 1;
            }
        }
    }
    let aux = if count == 0 {
        T::zero()
    } else {
        T::lit(trace.balance_loss_coeff) * total / T::lit(count as f64)
    };
    Ok((ce, aux))
}

fn cross_entropy<T: Real>(logits: &[T], target: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    lse - logits[target]
}

// ---------------------------------------------------------------------------
// Backward

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub ce: T,
    pub aux: T,
}

/// Auxiliary-loss gradient w.r.t. every token's router probabilities (same for all tokens).
fn aux_prob_grads<T: Real>(decisions: &[&RoutingDecision<T>], coef: T) -> Option<Vec<T>> {
    let first = decisions.first()?;
    if first.k() == 0 || coef == T::zero() {
        return None;
    }
    let owned: Vec<RoutingDecision<T>> = decisions.iter().map(|&d| d.clone()).collect();
    Some(
        balance_loss_prob_grads(&owned, first.probs.len())
            .into_iter()
            .map(|g| g * coef)
            .collect(),
    )
}

fn router_backward<T: Real>(
    router: &RouterParams<T>,
    grad: &mut RouterParams<T>,
    decision: &RoutingDecision<T>,
    mut dp: Vec<T>,
    aux: Option<&[T]>,
    u: &[T],
    du: &mut [T],
) {
    if let Some(a) = aux {
        add_into(&mut dp, a);
    }
    let dlogits = softmax_backward(&decision.probs, &dp);
    add_outer(&mut grad.w, &dlogits, u);
    add_into(du, &vec_mat(&dlogits, &router.w));
}

impl<T: Real> Model<T> {
    /// Gradients of `ce + aux` w.r.t. every parameter.
    pub fn backward(&self, tokens: &[u32], targets: &[u32]) -> Result<(GradientSet<T>, LossParts<T>)> {
        let mut grads = self.zeros_like();
        let parts = self.accumulate_gradients(tokens, targets, T::one(), &mut grads)?;
        Ok((grads, parts))
    }

    /// Adds `scale ·` the gradient of `ce + aux` into `grads`.
    pub fn accumulate_gradients(
        &self,
        tokens: &[u32],
        targets: &[u32],
        scale: T,
        grads: &mut GradientSet<T>,
    ) -> Result<LossParts<T>> {
        let tape = self.run(tokens, MixOptions::default())?;
        let trace = self.trace_from(&tape);
        let (ce, aux) = lm_loss(&trace, targets)?;
        let s = Settings::new(&self.cfg, MixOptions::default());
        let n = tokens.len();
        let d = self.cfg.hidden_dim;
        let eps_n = T::lit(n.max(1) as f64);

        let mut dx = Matrix::zeros(n, d);
        for t in 0..n {
            let mut dl = softmax(tape.logits.row(t));
            dl[targets[t] as usize] -= T::one();
            dl.iter_mut().for_each(|v| *v = *v * scale / eps_n);
            add_outer(&mut grads.lm_head, tape.final_in.row(t), &dl);
            let dz = mat_vec(&self.lm_head, &dl);
            let dxt = rmsnorm_backward(
                tape.x_final.row(t),
                self.final_norm.data(),
                tape.final_inv[t],
                &dz,
                grads.final_norm.data_mut(),
            );
            dx.row_mut(t).copy_from_slice(&dxt);
        }

        let m = routed_sublayers(&self.cfg);
        let coef = if m == 0 {
            T::zero()
        } else {
            scale * T::lit(self.cfg.balance_loss_coeff / m as f64)
        };

        for (l, lt) in tape.layers.iter().enumerate().rev() {
            let layer = &self.layers[l];
            let gl = &mut grads.layers[l];

            let dffn_in = ffn_backward(layer, gl, &s, lt, &dx, coef);
            for t in 0..n {
                let dxt = rmsnorm_backward(
                    lt.x_mid.row(t),
                    layer.ffn_norm.data(),
                    lt.ffn_inv[t],
                    dffn_in.row(t),
                    gl.ffn_norm.data_mut(),
                );
                add_into(dx.row_mut(t), &dxt);
            }

            let dattn_in = match (&layer.attn, &mut gl.attn) {
                (AttnParams::Dense(p), AttnParams::Dense(g)) => dense_attn_backward(p, g, &s, lt, &dx),
                (AttnParams::Moe(p), AttnParams::Moe(g)) => moe_attn_backward(p, g, &s, lt, &dx, coef),
                _ => unreachable!("gradient layout mirrors the model"),
            };
            for t in 0..n {
                let dxt = rmsnorm_backward(
                    lt.x_in.row(t),
                    layer.attn_norm.data(),
                    lt.attn_inv[t],
                    dattn_in.row(t),
                    gl.attn_norm.data_mut(),
                );
                add_into(dx.row_mut(t), &dxt);
            }
        }
        for (t, &id) in tape.tokens.iter().enumerate() {
            add_into(grads.embed.row_mut(id as usize), dx.row(t));
        }
        Ok(LossParts { ce, aux })
    }
}

fn ffn_backward<T: Real>(
    layer: &LayerParams<T>,
    gl: &mut LayerParams<T>,
    s: &Settings,
    lt: &LayerTape<T>,
    dout: &Matrix<T>,
    coef: T,
) -> Matrix<T> {
    let n = dout.rows();
    let mut du = Matrix::zeros(n, dout.cols());
    match &layer.ffn {
        FfnParams::Dense(e) => {
            let FfnParams::Dense(ge) = &mut gl.ffn else {
                unreachable!("gradient layout mirrors the model")
            };
            for t in 0..n {
                let FfnRecord::Dense(z) = &lt.ffn[t] else {
                    unreachable!()
                };
                let dx = e.backward(lt.ffn_in.row(t), z, dout.row(t), ge);
                du.row_mut(t).copy_from_slice(&dx);
            }
        }
        FfnParams::Moe(_) => {
            let view = layer.ffn_view().expect("moe ffn");
            let gv = gl.ffn_view_mut().expect("moe ffn");
            let decisions = lt.ffn_decisions().unwrap_or_default();
            let aux = aux_prob_grads(&decisions, coef);
            for t in 0..n {
                let FfnRecord::Moe { decision, uses } = &lt.ffn[t] else {
                    unreachable!()
                };
                let u = lt.ffn_in.row(t);
                let g = dout.row(t);
                let mut dgates = Vec::with_capacity(decision.k());
                let mut dut = vec![T::zero(); u.len()];
                for use_ in uses {
                    if let ExpertSlot::Routed(_) = use_.slot {
                        dgates.push(dot(g, &use_.y));
                    }
                    let dy: Vec<T> = g.iter().map(|&v| v * use_.gate).collect();
                    let e = slot_ref(view.experts, view.fixed, use_.slot);
                    let ge = slot_mut(gv.experts, gv.fixed, use_.slot);
                    add_into(&mut dut, &e.backward(u, &use_.z, &dy, ge));
                }
                let dp = gate_grads_to_probs(decision, &dgates, s.renormalize, s.opts.unit_gates);
                router_backward(view.router, gv.router, decision, dp, aux.as_deref(), u, &mut dut);
                du.row_mut(t).copy_from_slice(&dut);
            }
        }
    }
    du
}

fn dense_attn_backward<T: Real>(
    p: &DenseAttnParams<T>,
    g: &mut DenseAttnParams<T>,
    s: &Settings,
    lt: &LayerTape<T>,
    dout: &Matrix<T>,
) -> Matrix<T> {
    let HeadShape {
        n_heads,
        key_dim: dk,
        value_dim: dv,
        ..
    } = s.heads;
    let n = dout.rows();
    let cache = &lt.cache.mix;
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let mut du = Matrix::zeros(n, dout.cols());
    let mut dkeys = Matrix::zeros(n, n_heads * dk);
    let mut dvals = Matrix::zeros(n, n_heads * dv);
    for t in 0..n {
        let AttnRecord::Dense(rec) = &lt.attn[t] else {
            unreachable!()
        };
        let u = lt.attn_in.row(t);
        add_outer(&mut g.wo, &rec.o, dout.row(t));
        let d_o = mat_vec(&p.wo, dout.row(t));
        let mut dq = vec![T::zero(); n_heads * dk];
        for h in 0..n_heads {
            let dho = &d_o[h * dv..(h + 1) * dv];
            let a = &rec.a[h];
            let da: Vec<T> = (0..=t)
                .map(|j| dot(dho, &cache.hidden_row(j)[h * dv..(h + 1) * dv]))
                .collect();
            for (j, &w) in a.iter().enumerate() {
                axpy(&mut dvals.row_mut(j)[h * dv..(h + 1) * dv], w, dho);
            }
            let ds = softmax_backward(a, &da);
            let qh = &rec.q[h * dk..(h + 1) * dk];
            for (j, &sj) in ds.iter().enumerate() {
                let w = sj * scale;
                axpy(&mut dq[h * dk..(h + 1) * dk], w, &cache.key(j)[h * dk..(h + 1) * dk]);
                axpy(&mut dkeys.row_mut(j)[h * dk..(h + 1) * dk], w, qh);
            }
            if let Some(base) = s.rope_base {
                rope_inverse_in_place(&mut dq[h * dk..(h + 1) * dk], t, base);
            }
        }
        add_outer(&mut g.wq, u, &dq);
        add_into(du.row_mut(t), &mat_vec(&p.wq, &dq));
    }
    for j in 0..n {
        let u = lt.attn_in.row(j);
        let mut dk_row = dkeys.row(j).to_vec();
        if let Some(base) = s.rope_base {
            for h in 0..n_heads {
                rope_inverse_in_place(&mut dk_row[h * dk..(h + 1) * dk], j, base);
            }
        }
        add_outer(&mut g.wk, u, &dk_row);
        add_outer(&mut g.wv, u, dvals.row(j));
        let mut acc = mat_vec(&p.wk, &dk_row);
        add_into(&mut acc, &mat_vec(&p.wv, dvals.row(j)));
        add_into(du.row_mut(j), &acc);
    }
    du
}

fn moe_attn_backward<T: Real>(
    p: &MoeAttnParams<T>,
    g: &mut MoeAttnParams<T>,
    s: &Settings,
    lt: &LayerTape<T>,
    dout: &Matrix<T>,
    coef: T,
) -> Matrix<T> {
    let n = dout.rows();
    let d = dout.cols();
    let dk = s.key_dim;
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let bank = &p.bank;
    let cache = &lt.cache;
    let mut du = Matrix::zeros(n, d);
    let mut dkeys = Matrix::zeros(n, dk);
    let mut dshared = Matrix::zeros(n, dk);
    let mut dpost: Vec<BTreeMap<ExpertSlot, Vec<T>>> = vec![BTreeMap::new(); if s.postmix { n } else { 0 }];
    let decisions = lt.attn_decisions().unwrap_or_default();
    let aux = aux_prob_grads(&decisions, coef);

    for t in 0..n {
        let AttnRecord::Moe(rec) = &lt.attn[t] else {
            unreachable!()
        };
        let u = lt.attn_in.row(t);
        let gout = dout.row(t);
        let mut dgates = Vec::with_capacity(rec.decision.k());
        let mut dut = vec![T::zero(); d];
        for use_ in &rec.uses {
            if let ExpertSlot::Routed(_) = use_.slot {
                dgates.push(dot(gout, &use_.y));
            }
            let dy: Vec<T> = gout.iter().map(|&v| v * use_.gate).collect();
            let da: Vec<T> = if s.postmix {
                let mut da = vec![T::zero(); t + 1];
                for (j, &w) in use_.a.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let entry = dpost[j].entry(use_.slot).or_insert_with(|| vec![T::zero(); d]);
                    axpy(entry, w, &dy);
                    da[j] = dot(&dy, &cache.outputs[j][&use_.slot].1);
                }
                da
            } else {
                let e = slot_ref(&bank.experts, &bank.fixed, use_.slot);
                let ge = slot_mut(&mut g.bank.experts, &mut g.bank.fixed, use_.slot);
                let dm = e.backward(&use_.m, &use_.z, &dy, ge);
                let mut da = Vec::with_capacity(t + 1);
                for (j, &w) in use_.a.iter().enumerate() {
                    da.push(dot(&dm, cache.mix.hidden_row(j)));
                    axpy(du.row_mut(j), w, &dm);
                }
                da
            };
            if s.opts.identity_mixing {
                continue;
            }
            let dscores = softmax_backward(&use_.a, &da);
            let mut dq = vec![T::zero(); dk];
            for (j, &sj) in dscores.iter().enumerate() {
                let w = sj * scale;
                axpy(&mut dq, w, cache.mix.key(j));
                axpy(dkeys.row_mut(j), w, &use_.q);
            }
            if let Some(base) = s.rope_base {
                rope_inverse_in_place(&mut dq, t, base);
            }
            add_into(dshared.row_mut(t), &dq);
            if let ExpertSlot::Routed(i) = use_.slot {
                let lora = &bank.lora[i];
                let gl = &mut g.bank.lora[i];
                add_outer(&mut gl.wb, &use_.low, &dq);
                let dlow = mat_vec(&lora.wb, &dq);
                add_outer(&mut gl.wa, u, &dlow);
                add_into(&mut dut, &mat_vec(&lora.wa, &dlow));
            }
        }
        let dp = gate_grads_to_probs(&rec.decision, &dgates, s.renormalize, s.opts.unit_gates);
        router_backward(&p.router, &mut g.router, &rec.decision, dp, aux.as_deref(), u, &mut dut);
        add_into(du.row_mut(t), &dut);
    }

    for (j, per_slot) in dpost.iter().enumerate() {
        for (slot, dy) in per_slot {
            let e = slot_ref(&bank.experts, &bank.fixed, *slot);
            let ge = slot_mut(&mut g.bank.experts, &mut g.bank.fixed, *slot);
            let z = &cache.outputs[j][slot].0;
            let dx = e.backward(lt.attn_in.row(j), z, dy, ge);
            add_into(du.row_mut(j), &dx);
        }
    }

    for j in 0..n {
        let u = lt.attn_in.row(j);
        let mut dkey = dkeys.row(j).to_vec();
        if let Some(base) = s.rope_base {
            rope_inverse_in_place(&mut dkey, j, base);
        }
        add_outer(&mut g.bank.wk, u, &dkey);
        add_outer(&mut g.bank.wq, u, dshared.row(j));
        let mut acc = mat_vec(&bank.wk, &dkey);
        add_into(&mut acc, &mat_vec(&bank.wq, dshared.row(j)));
        add_into(du.row_mut(j), &acc);
    }
    du
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// Token-at-a-time decoder over per-layer caches.
pub struct Decoder<'m, T> {
    model: &'m Model<T>,
    caches: Vec<AttnCache<T>>,
    settings: Settings,
    pos: usize,
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            caches: model.layers.iter().map(|_| AttnCache::for_layer(&model.cfg)).collect(),
            settings: Settings::new(&model.cfg, MixOptions::default()),
            model,
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<T>> {
        let m = self.model;
        if token as usize >= m.cfg.vocab_size {
            return Err(UmoeError::TokenOutOfVocab {
                id: token,
                vocab: m.cfg.vocab_size,
            });
        }
        if self.pos >= m.cfg.context_len {
            return Err(UmoeError::ContextOverflow {
                position: self.pos,
                context_len: m.cfg.context_len,
            });
        }
        let eps = m.cfg.norm_eps;
        let mut x = m.embed.row(token as usize).to_vec();
        for (layer, cache) in m.layers.iter().zip(&mut self.caches) {
            let (u, _) = rmsnorm(&x, layer.attn_norm.data(), eps);
            let (y, _) = layer.attn_token(&self.settings, cache, &u)?;
            add_into(&mut x, &y);
            let (u, _) = rmsnorm(&x, layer.ffn_norm.data(), eps);
            let (y, _) = layer.ffn_token(&self.settings, &u)?;
            add_into(&mut x, &y);
        }
        self.pos += 1;
        let (z, _) = rmsnorm(&x, m.final_norm.data(), eps);
        Ok(vec_mat(&z, &m.lm_head))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

#[derive(Clone, Debug, serde::Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub category: ParamCategory,
    pub checked: usize,
    pub max_abs_diff: f64,
    /// Largest relative error among entries whose difference exceeds the absolute floor.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub rel_tolerance: f64,
    pub abs_floor: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn categories(&self) -> BTreeMap<ParamCategory, bool> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            let e = out.entry(t.category).or_insert(true);
            *e &= t.passed;
        }
        out
    }
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Differences below this are round-off, not disagreement.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-9;

/// Compares analytic gradients of `ce + aux` against central differences on
/// up to `per_tensor` randomly chosen entries of every tensor.
pub fn grad_check(
    model: &Model<f64>,
    tokens: &[u32],
    targets: &[u32],
    per_tensor: usize,
    rel_tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (grads, _) = model.backward(tokens, targets)?;
    let grad_tensors = grads.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |m: &Model<f64>| -> Result<f64> {
        let (ce, aux) = m.loss(tokens, targets)?;
        Ok(ce + aux)
    };
    let mut probe = model.clone();
    let names: Vec<(String, ParamCategory, usize)> =
        model.tensors().into_iter().map(|(n, c, m)| (n, c, m.len())).collect();
    let mut checks = Vec::with_capacity(names.len());
    for (ti, (name, category, len)) in names.into_iter().enumerate() {
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut passed = true;
        for &idx in &picks {
            let original = probe.tensors()[ti].2.data()[idx];
            set_entry(&mut probe, ti, idx, original + GRAD_CHECK_STEP);
            let up = objective(&probe)?;
            set_entry(&mut probe, ti, idx, original - GRAD_CHECK_STEP);
            let down = objective(&probe)?;
            set_entry(&mut probe, ti, idx, original);
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let analytic = grad_tensors[ti].2.data()[idx];
            let diff = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            max_abs = max_abs.max(diff);
            if diff > GRAD_CHECK_ABS_FLOOR {
                let rel = diff / scale;
                max_rel = max_rel.max(rel);
                passed &= rel < rel_tolerance;
            }
        }
        checks.push(TensorCheck {
            name,
            category,
            checked: picks.len(),
            max_abs_diff: max_abs,
            max_rel_error: max_rel,
            passed,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        step: GRAD_CHECK_STEP,
        rel_tolerance,
        abs_floor: GRAD_CHECK_ABS_FLOOR,
        tensors: checks,
        passed,
    })
}

fn set_entry(model: &mut Model<f64>, tensor: usize, idx: usize, value: f64) {
    let mut ts = model.tensors_mut();
    ts[tensor].2.data_mut()[idx] = value;
}

/// Replaces every parameter with seeded normal noise of the given scale,
/// keeping norm gains near one. Useful so that no tensor sits at a special
/// value (for example the zero-initialized LoRA up-projection).
pub fn randomize_params<T: Real>(model: &mut Model<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, cat, m) in model.tensors_mut() {
        let noise = Matrix::<T>::randn(m.rows(), m.cols(), scale, &mut rng);
        let base = matches!(cat, ParamCategory::LayerNorms | ParamCategory::FinalNorm);
        for (v, e) in m.data_mut().iter_mut().zip(noise.data()) {
            *v = if base { T::one() + *e } else { *e };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Preset};
    use crate::tensor::rel_max_diff;

    fn tiny() -> ModelConfig {
        preset(Preset::TinyTest)
    }

    #[test]
    fn rmsnorm_backward_matches_finite_difference() {
        let x = [0.4f64, -1.3, 0.8, 2.0];
        let g = [1.1f64, 0.7, -0.3, 1.5];
        let w = [0.2f64, -0.5, 1.0, 0.3];
        let f = |x: &[f64]| dot(&rmsnorm(x, &g, 1e-6).0, &w);
        let (_, inv) = rmsnorm(&x, &g, 1e-6);
        let mut dg = [0.0; 4];
        let dx = rmsnorm_backward(&x, &g, inv, &w, &mut dg);
        for i in 0..4 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            assert!(((f(&p) - f(&m)) / 2e-6 - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn single_token_logits_are_finite() {
        let m = Model::<f64>::init(&tiny(), 1).unwrap();
        let tr = m.forward(&[5]).unwrap();
        assert_eq!(tr.logits.shape(), (1, 256));
        assert!(tr.logits.is_finite());
        assert!(tr.layers.iter().all(|l| l.attn.is_some() && l.ffn.is_some()));
    }

    #[test]
    fn input_validation() {
        let m = Model::<f64>::init(&tiny(), 1).unwrap();
        assert!(matches!(
            m.forward(&[300]),
            Err(UmoeError::TokenOutOfVocab { id: 300, .. })
        ));
        assert!(matches!(
            m.forward(&vec![1; 65]),
            Err(UmoeError::ContextOverflow { .. })
        ));
        assert!(matches!(m.loss(&[1, 2], &[1]), Err(UmoeError::LengthMismatch { .. })));
    }

    #[test]
    fn measured_params_match_closed_form() {
        {
            let p = Preset::TinyTest;
            let cfg = preset(p);
            let m = Model::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(m.measured_params(), crate::config::count_params(&cfg).unwrap());
        }
        let variants = [
            ModelConfig {
                share_router: true,
                share_fixed_expert: true,
                ..tiny()
            },
            ModelConfig {
                share_experts_across_sublayers: false,
                ..tiny()
            },
            ModelConfig {
                attn_variant: AttnVariant::DenseVanilla,
                k_attn: 0,
                share_experts_across_sublayers: false,
                ..tiny()
            },
        ];
        for cfg in variants {
            let m = Model::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(m.measured_params(), crate::config::count_params(&cfg).unwrap());
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let trace = ForwardTrace {
            logits: Matrix::<f64>::zeros(3, 10),
            layers: vec![],
            balance_loss_coeff: 0.01,
        };
        let (ce, aux) = lm_loss(&trace, &[1, 2, 3]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-14);
        assert_eq!(aux, 0.0);
    }

    #[test]
    fn peaked_logits_give_small_ce() {
        let mut logits = Matrix::<f64>::zeros(2, 5);
        logits.set(0, 3, 50.0);
        logits.set(1, 1, 50.0);
        let trace = ForwardTrace {
            logits,
            layers: vec![],
            balance_loss_coeff: 0.0,
        };
        assert!(lm_loss(&trace, &[3, 1]).unwrap().0 < 1e-20);
    }

    #[test]
    fn aux_on_uniform_routing_is_coefficient() {
        let n = 4;
        let decisions: Vec<_> = (0..n)
            .map(|t| RoutingDecision {
                indices: vec![t],
                gates: vec![0.25],
                probs: vec![0.25; n],
            })
            .collect();
        let trace = ForwardTrace {
            logits: Matrix::<f64>::zeros(4, 3),
            layers: vec![LayerRouting {
                attn: Some(decisions.clone()),
                ffn: Some(decisions),
            }],
            balance_loss_coeff: 0.01,
        };
        let (_, aux) = lm_loss(&trace, &[0, 0, 0, 0]).unwrap();
        assert!((aux - 0.01).abs() < 1e-15);
    }

    #[test]
    fn decoder_reproduces_full_forward() {
        for variant in [
            AttnVariant::UmoeAttPremix,
            AttnVariant::UmoeAttPostmix,
            AttnVariant::DenseVanilla,
        ] {
            let cfg = ModelConfig {
                attn_variant: variant,
                k_attn: if variant == AttnVariant::DenseVanilla { 0 } else { 2 },
                share_experts_across_sublayers: variant != AttnVariant::DenseVanilla,
                ..tiny()
            };
            let m = Model::<f32>::init(&cfg, 3).unwrap();
            let tokens: Vec<u32> = (0..20).map(|i| (i * 37 % 256) as u32).collect();
            let full = m.forward(&tokens).unwrap();
            let mut dec = Decoder::new(&m);
            for (t, &tok) in tokens.iter().enumerate() {
                let logits = dec.step(tok).unwrap();
                assert_eq!(logits.as_slice(), full.logits.row(t), "{variant} at {t}");
            }
        }
    }

    #[test]
    fn gradients_pass_finite_differences_for_each_variant() {
        let base = ModelConfig {
            n_layers: 1,
            hidden_dim: 8,
            value_dim: 4,
            key_dim: 4,
            lora_rank: 2,
            vocab_size: 11,
            n_experts: 4,
            k_attn: 3,
            k_ffn: 3,
            ..tiny()
        };
        let variants = [
            base.clone(),
            ModelConfig {
                attn_variant: AttnVariant::UmoeAttPostmix,
                ..base.clone()
            },
            ModelConfig {
                renormalize_gates: true,
                expert_activation: Activation::Relu,
                ..base.clone()
            },
            ModelConfig {
                share_router: true,
                share_fixed_expert: true,
                ..base.clone()
            },
            ModelConfig {
                attn_variant: AttnVariant::DenseVanilla,
                k_attn: 0,
                share_experts_across_sublayers: false,
                n_heads: 2,
                ffn_variant: crate::config::FfnVariant::Dense,
                k_ffn: 0,
                ffn_dim: 6,
                ..base.clone()
            },
        ];
        for cfg in variants {
            let mut m = Model::<f64>::init(&cfg, 9).unwrap();
            randomize_params(&mut m, 0.5, 10);
            let tokens = [1u32, 4, 7, 2, 9, 4];
            let targets = [4u32, 7, 2, 9, 4, 1];
            let report = grad_check(&m, &tokens, &targets, 12, 1e-4, 5).unwrap();
            for t in &report.tensors {
                assert!(t.passed, "{:?} {} {}", cfg.attn_variant, t.name, t.max_rel_error);
            }
        }
    }

    #[test]
    fn identity_mixing_matches_ffn_moe() {
        let cfg = tiny();
        let m = Model::<f64>::init(&cfg, 4).unwrap();
        let AttnParams::Moe(p) = &m.layers[0].attn else {
            panic!()
        };
        let x = Matrix::<f64>::randn(7, cfg.hidden_dim, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let opts = MixOptions {
            identity_mixing: true,
            ..Default::default()
        };
        let a = umoe_att_sublayer(&cfg, p, &x, opts).unwrap();
        let b = ffn_moe_sublayer(
            &p.router,
            &p.bank.experts,
            &p.bank.fixed,
            &x,
            cfg.attn_routed_k(),
            false,
        )
        .unwrap();
        assert!(rel_max_diff(a.data(), b.data()) < 1e-12);
    }
}
