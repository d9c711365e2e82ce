//! Condition-aware layers.
//!
//! A condition-aware layer owns a static weight `W` and receives, per sample,
//! a conditional weight `W_c` produced by a [`WeightGenerator`] from the
//! condition embedding `c`. The layer applies `W + W_c`, which is the same as
//! applying `W` and `W_c` separately and summing the outputs.
//!
//! Two execution strategies are provided and must agree:
//!
//! * **per-sample**: loop over the batch, fuse `W + W_c[i]`, run one kernel
//!   per sample. This is the reference.
//! * **fused**: fold the batch into channels (`[B, C, H, W] → [1, B·C, H, W]`),
//!   stack the per-sample kernels, and run a single grouped convolution with
//!   `B` times the layer's own group count. Linear layers use one batched
//!   matmul instead.
//!
//! The tape-level functions here are shared by the model; the value-level
//! types ([`CondAwareParam`], [`AdaptiveKernelBank`]) wrap them for direct use.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::autograd::ParamId;
use crate::params::{named_rng, xavier_uniform, ParamRole, ParamStore};
use crate::tensor::{numel_of, Element, Tensor};

/// Which inputs feed the condition embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSources {
    pub class_label: bool,
    pub timestep: bool,
}

impl ConditionSources {
    pub const ALL: Self = ConditionSources {
        class_label: true,
        timestep: true,
    };
    pub const CLASS_ONLY: Self = ConditionSources {
        class_label: true,
        timestep: false,
    };
    pub const TIMESTEP_ONLY: Self = ConditionSources {
        class_label: false,
        timestep: true,
    };

    pub fn is_empty(&self) -> bool {
        !self.class_label && !self.timestep
    }
}

impl Default for ConditionSources {
    fn default() -> Self {
        Self::ALL
    }
}

/// Sinusoidal timestep features: `sin` half followed by `cos` half.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Learned pieces of the condition embedding: a class table with one extra
/// row for the null (unconditional) class, and a two-layer projection of the
/// sinusoidal timestep features.
#[derive(Clone, Debug)]
pub struct ConditionEmbedder {
    pub class_table: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub n_classes: usize,
    pub dim: usize,
    pub timesteps: usize,
}

#[derive(Clone, Debug)]
pub struct ConditionEmbedding<T> {
    /// `[B, d]`
    pub vector: Tensor<T>,
    pub sources: ConditionSources,
}

impl ConditionEmbedder {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_classes: usize,
        dim: usize,
        timesteps: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("cond_dim", "must be ≥ 1"));
        }
        let mut add = |name: &str, init: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Tensor<T>| {
            let full = format!("{prefix}.{name}");
            let mut rng = named_rng(seed, &full);
            store.add(full, ParamRole::Static, init(&mut rng))
        };
        let class_table = add("class_table", &|r| Tensor::randn(&[n_classes + 1, dim], 1.0, r))?;
        let time_w1 = add("time_w1", &|r| xavier_uniform(&[dim, dim], dim, dim, r))?;
        let time_b1 = add("time_b1", &|_| Tensor::zeros(&[dim]))?;
        let time_w2 = add("time_w2", &|r| xavier_uniform(&[dim, dim], dim, dim, r))?;
        let time_b2 = add("time_b2", &|_| Tensor::zeros(&[dim]))?;
        Ok(ConditionEmbedder {
            class_table,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            n_classes,
            dim,
            timesteps,
        })
    }

    /// Index of the reserved unconditional class.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }

    fn check(&self, labels: &[usize], timesteps: &[usize]) -> Result<()> {
        if labels.len() != timesteps.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "{} labels with {} timesteps",
                labels.len(),
                timesteps.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > self.n_classes) {
            return Err(Error::Range(format!(
                "class label {l} not in [0, {}] (last index is the null class)",
                self.n_classes
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= self.timesteps) {
            return Err(Error::Range(format!(
                "timestep {t} not in [0, {})",
                self.timesteps
            )));
        }
        Ok(())
    }

    pub fn class_part<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, labels: &[usize]) -> Result<Var> {
        let table = params.bind(tape, self.class_table);
        tape.gather_rows(table, labels)
    }

    pub fn time_part<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, timesteps: &[usize]) -> Result<Var> {
        let mut feats = Vec::with_capacity(timesteps.len() * self.dim);
        for &t in timesteps {
            feats.extend(sinusoidal_embedding(t, self.dim).into_iter().map(T::from_f64));
        }
        let x = tape.constant(Tensor::new(vec![timesteps.len(), self.dim], feats)?);
        let w1 = params.bind(tape, self.time_w1);
        let b1 = params.bind(tape, self.time_b1);
        let w2 = params.bind(tape, self.time_w2);
        let b2 = params.bind(tape, self.time_b2);
        let h = tape.matmul_nt(x, w1)?;
        let h = tape.add_bias(h, b1, 1)?;
        let h = tape.silu(h);
        let h = tape.matmul_nt(h, w2)?;
        tape.add_bias(h, b2, 1)
    }

    /// `[B, d]` embedding: the sum of the parts named in `sources`.
    pub fn embed<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        labels: &[usize],
        timesteps: &[usize],
        sources: ConditionSources,
    ) -> Result<Var> {
        self.check(labels, timesteps)?;
        if sources.is_empty() {
            return Err(Error::config("can_sources", "at least one condition source is required"));
        }
        let class = sources
            .class_label
            .then(|| self.class_part(tape, params, labels))
            .transpose()?;
        let time = sources
            .timestep
            .then(|| self.time_part(tape, params, timesteps))
            .transpose()?;
        match (class, time) {
            (Some(c), Some(t)) => tape.add(c, t),
            (Some(v), None) | (None, Some(v)) => Ok(v),
            (None, None) => unreachable!("checked above"),
        }
    }

    /// Single-sample embedding; `None` selects the null class.
    pub fn embed_condition<T: Element>(
        &self,
        params: &ParamStore<T>,
        class_label: Option<usize>,
        timestep: usize,
        sources: ConditionSources,
    ) -> Result<ConditionEmbedding<T>> {
        let label = class_label.unwrap_or(self.n_classes);
        if class_label.is_some_and(|l| l >= self.n_classes) {
            return Err(Error::Range(format!(
                "class label {label} not in [0, {})",
                self.n_classes
            )));
        }
        let mut tape = Tape::new();
        let c = self.embed(&mut tape, params, &[label], &[timestep], sources)?;
        Ok(ConditionEmbedding {
            vector: tape.value(c).clone(),
            sources,
        })
    }
}

/// `W_c = reshape(c · mapᵀ)` for `c [B, d]`, `map [P, d]`.
pub fn generate_on_tape<T: Element>(tape: &mut Tape<T>, map: Var, c: Var, target_shape: &[usize]) -> Result<Var> {
    let (ms, cs) = (tape.shape(map).to_vec(), tape.shape(c).to_vec());
    if ms.len() != 2 || cs.len() != 2 || ms[1] != cs[1] || ms[0] != numel_of(target_shape) {
        return Err(Error::shape(format!(
            "generator map {ms:?} for target {target_shape:?} cannot take condition {cs:?}"
        )));
    }
    let flat = tape.matmul_nt(c, map)?;
    let mut shape = vec![cs[0]];
    shape.extend_from_slice(target_shape);
    tape.reshape(flat, &shape)
}

/// Batch-to-channel grouped convolution: sample `i` of `x` is convolved with
/// `kernels[i]`. `spec.groups` is the per-sample group count.
pub fn grouped_batch_conv<T: Element>(tape: &mut Tape<T>, x: Var, kernels: Var, spec: Conv2dSpec) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernels).to_vec();
    let [b, c, h, w] = xs[..] else {
        return Err(Error::shape(format!("expected [B, C, H, W] input, got {xs:?}")));
    };
    let [kb, cout, cin_g, kh, kw] = ks[..] else {
        return Err(Error::shape(format!("expected [B, Cout, Cin/g, kh, kw] kernels, got {ks:?}")));
    };
    if kb != b {
        return Err(Error::shape(format!("{kb} kernels for a batch of {b}")));
    }
    let xr = tape.reshape(x, &[1, b * c, h, w])?;
    let kr = tape.reshape(kernels, &[b * cout, cin_g, kh, kw])?;
    let fused = Conv2dSpec {
        groups: spec.groups * b,
        ..spec
    };
    let y = tape.conv2d(xr, kr, fused)?;
    let ys = tape.shape(y).to_vec();
    tape.reshape(y, &[b, cout, ys[2], ys[3]])
}

/// `x[i] · weights[i]ᵀ` for `x [B, N, in]`, `weights [B, out, in]`.
pub fn batched_linear<T: Element>(tape: &mut Tape<T>, x: Var, weights: Var) -> Result<Var> {
    tape.bmm(x, weights, true)
}

/// Per-sample fused weights `W + W_c[i]`, shape `[B, ...W]`.
pub fn fuse_weights<T: Element>(tape: &mut Tape<T>, w: Var, wc: Var) -> Result<Var> {
    let b = tape.shape(wc)[0];
    let expanded = tape.expand(w, b)?;
    tape.add(expanded, wc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    DwConv,
    PatchEmbed,
    OutProj,
    QkvProj,
    Mlp,
    Head,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::DwConv,
        LayerKind::PatchEmbed,
        LayerKind::OutProj,
        LayerKind::QkvProj,
        LayerKind::Mlp,
        LayerKind::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::DwConv => "dw-conv",
            LayerKind::PatchEmbed => "patch-embed",
            LayerKind::OutProj => "out-proj",
            LayerKind::QkvProj => "qkv-proj",
            LayerKind::Mlp => "mlp",
            LayerKind::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::DwConv | LayerKind::PatchEmbed)
    }
}

/// How a condition-aware layer is executed for a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// One kernel call per sample with `W + W_c[i]`.
    PerSample,
    /// One grouped convolution (or batched matmul) for the whole batch.
    Fused,
    /// `W·x + W_c·x`, the output-sum form.
    OutputSum,
}

/// Applies a weight `w` (conv kernel or `[out, in]` matrix) plus per-sample
/// conditional weights `wc [B, ...w]` to `x`.
pub fn apply_conditional<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    wc: Var,
    conv: Option<Conv2dSpec>,
    strategy: Strategy,
) -> Result<Var> {
    let ws = tape.shape(w).to_vec();
    let wcs = tape.shape(wc).to_vec();
    if wcs.len() != ws.len() + 1 || wcs[1..] != ws[..] {
        return Err(Error::shape(format!(
            "conditional weight {wcs:?} does not match static weight {ws:?}"
        )));
    }
    let b = wcs[0];
    if tape.shape(x)[0] != b {
        return Err(Error::shape(format!(
            "input {:?} with {b} conditional weights",
            tape.shape(x)
        )));
    }
    match (strategy, conv) {
        (Strategy::Fused, Some(spec)) => {
            let k = fuse_weights(tape, w, wc)?;
            grouped_batch_conv(tape, x, k, spec)
        }
        (Strategy::Fused, None) => {
            let k = fuse_weights(tape, w, wc)?;
            batched_linear(tape, x, k)
        }
        (Strategy::OutputSum, Some(spec)) => {
            let stat = tape.conv2d(x, w, spec)?;
            let cond = grouped_batch_conv(tape, x, wc, spec)?;
            tape.add(stat, cond)
        }
        (Strategy::OutputSum, None) => {
            let stat = static_linear(tape, x, w)?;
            let cond = batched_linear(tape, x, wc)?;
            tape.add(stat, cond)
        }
        (Strategy::PerSample, _) => {
            let mut outs = Vec::with_capacity(b);
            for i in 0..b {
                let xi = tape.slice(x, 0, i, 1)?;
                let wci = tape.slice(wc, 0, i, 1)?;
                let wci = tape.reshape(wci, &ws)?;
                let k = tape.add(w, wci)?;
                let y = match conv {
                    Some(spec) => tape.conv2d(xi, k, spec)?,
                    None => {
                        let xs = tape.shape(xi).to_vec();
                        let x2 = tape.reshape(xi, &xs[1..])?;
                        let y = tape.matmul_nt(x2, k)?;
                        let mut s = vec![1];
                        s.extend_from_slice(tape.shape(y));
                        tape.reshape(y, &s)?
                    }
                };
                outs.push(y);
            }
            tape.concat(&outs, 0)
        }
    }
}

/// `x [B, N, in] · wᵀ` with one shared weight.
pub fn static_linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let [b, n, din] = xs[..] else {
        return Err(Error::shape(format!("expected [B, N, in] input, got {xs:?}")));
    };
    let x2 = tape.reshape(x, &[b * n, din])?;
    let y = tape.matmul_nt(x2, w)?;
    tape.reshape(y, &[b, n, ws[0]])
}

/// A bias-free linear map from the condition embedding to a flattened
/// weight. Holds exactly `P × d` parameters.
#[derive(Clone, Debug)]
pub struct WeightGenerator<T> {
    /// `[P, d]`
    pub map_weights: Tensor<T>,
    pub target_shape: Vec<usize>,
    pub shared: bool,
}

impl<T: Element> WeightGenerator<T> {
    /// Zero-initialized, so the generated weight starts at zero for every `c`.
    pub fn zeros(target_shape: &[usize], cond_dim: usize, shared: bool) -> Self {
        WeightGenerator {
            map_weights: Tensor::zeros(&[numel_of(target_shape), cond_dim]),
            target_shape: target_shape.to_vec(),
            shared,
        }
    }

    pub fn new(map_weights: Tensor<T>, target_shape: &[usize], shared: bool) -> Result<Self> {
        let ms = map_weights.shape();
        if ms.len() != 2 || ms[0] != numel_of(target_shape) {
            return Err(Error::shape(format!(
                "generator map {ms:?} cannot produce weights of shape {target_shape:?}"
            )));
        }
        Ok(WeightGenerator {
            map_weights,
            target_shape: target_shape.to_vec(),
            shared,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.map_weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.map_weights.numel()
    }

    /// `c_batch [B, d]` → `[B, ...target_shape]`.
    pub fn generate(&self, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let map = tape.constant(self.map_weights.clone());
        let c = tape.constant(c_batch.clone());
        let out = generate_on_tape(&mut tape, map, c, &self.target_shape)?;
        Ok(tape.value(out).clone())
    }
}

/// A static weight paired with a (possibly shared) generator.
#[derive(Clone, Debug)]
pub struct CondAwareParam<T> {
    pub kind: LayerKind,
    pub static_weight: Tensor<T>,
    pub generator: Arc<WeightGenerator<T>>,
    /// `Some` for convolutional kinds.
    pub conv: Option<Conv2dSpec>,
}

impl<T: Element> CondAwareParam<T> {
    pub fn new(
        kind: LayerKind,
        static_weight: Tensor<T>,
        generator: Arc<WeightGenerator<T>>,
        conv: Option<Conv2dSpec>,
    ) -> Result<Self> {
        if static_weight.shape() != generator.target_shape.as_slice() {
            return Err(Error::shape(format!(
                "static weight {:?} and generated weight {:?} differ",
                static_weight.shape(),
                generator.target_shape
            )));
        }
        if kind.is_conv() != conv.is_some() {
            return Err(Error::Contract(format!(
                "layer kind {} {} a convolution spec",
                kind.name(),
                if conv.is_some() { "does not take" } else { "needs" }
            )));
        }
        Ok(CondAwareParam {
            kind,
            static_weight,
            generator,
            conv,
        })
    }

    fn run(&self, x: &Tensor<T>, c_batch: &Tensor<T>, strategy: Strategy) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(self.static_weight.clone());
        let map = tape.constant(self.generator.map_weights.clone());
        let c = tape.constant(c_batch.clone());
        let wc = generate_on_tape(&mut tape, map, c, &self.generator.target_shape)?;
        let y = apply_conditional(&mut tape, xv, w, wc, self.conv, strategy)?;
        Ok(tape.value(y).clone())
    }

    /// Per-sample loop; the correctness oracle for the fused path.
    pub fn apply_reference(&self, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, c_batch, Strategy::PerSample)
    }

    pub fn apply_fused(&self, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.conv.is_none() {
            return Err(Error::Contract(format!(
                "fused grouped convolution needs a convolutional layer, got {}",
                self.kind.name()
            )));
        }
        self.run(x, c_batch, Strategy::Fused)
    }

    /// Fused path for any kind: grouped convolution or batched matmul.
    pub fn apply_batched(&self, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, c_batch, Strategy::Fused)
    }

    pub fn apply_output_sum(&self, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, c_batch, Strategy::OutputSum)
    }

    /// The layer with `W_c = 0`.
    pub fn apply_static(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(self.static_weight.clone());
        let y = match self.conv {
            Some(spec) => tape.conv2d(xv, w, spec)?,
            None => static_linear(&mut tape, xv, w)?,
        };
        Ok(tape.value(y).clone())
    }
}

/// Mixture weights `softmax(c · routerᵀ) [B, K]` applied to `bases [K, ...]`.
pub fn mix_kernels_on_tape<T: Element>(tape: &mut Tape<T>, bases: Var, router: Var, c: Var) -> Result<Var> {
    let bs = tape.shape(bases).to_vec();
    let rs = tape.shape(router).to_vec();
    let cs = tape.shape(c).to_vec();
    if bs.len() < 2 || rs.len() != 2 || rs[0] != bs[0] || cs.len() != 2 || cs[1] != rs[1] {
        return Err(Error::shape(format!(
            "kernel bank {bs:?} with router {rs:?} and condition {cs:?}"
        )));
    }
    let k = bs[0];
    let p = numel_of(&bs[1..]);
    let logits = tape.matmul_nt(c, router)?;
    let coeffs = tape.softmax(logits)?;
    let flat = tape.reshape(bases, &[k, p])?;
    let mixed = tape.matmul(coeffs, flat)?;
    let mut shape = vec![cs[0]];
    shape.extend_from_slice(&bs[1..]);
    tape.reshape(mixed, &shape)
}

/// Adaptive kernel selection: `K` base kernels combined per sample by
/// softmax coefficients regressed from the condition.
#[derive(Clone, Debug)]
pub struct AdaptiveKernelBank<T> {
    /// `[K, ...kernel]`
    pub base_kernels: Tensor<T>,
    /// `[K, d]`
    pub router_weights: Tensor<T>,
    pub conv: Conv2dSpec,
}

impl<T: Element> AdaptiveKernelBank<T> {
    pub fn new(base_kernels: Tensor<T>, router_weights: Tensor<T>, conv: Conv2dSpec) -> Result<Self> {
        let k = base_kernels.shape()[0];
        if base_kernels.shape().len() != 5 || router_weights.shape().len() != 2 || router_weights.shape()[0] != k {
            return Err(Error::shape(format!(
                "kernel bank {:?} with router {:?}",
                base_kernels.shape(),
                router_weights.shape()
            )));
        }
        Ok(AdaptiveKernelBank {
            base_kernels,
            router_weights,
            conv,
        })
    }

    pub fn num_kernels(&self) -> usize {
        self.base_kernels.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.base_kernels.numel() + self.router_weights.numel()
    }

    /// Per-sample mixed kernels `[B, ...kernel]`.
    pub fn mix(&self, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bases = tape.constant(self.base_kernels.clone());
        let router = tape.constant(self.router_weights.clone());
        let c = tape.constant(c_batch.clone());
        let k = mix_kernels_on_tape(&mut tape, bases, router, c)?;
        Ok(tape.value(k).clone())
    }

    pub fn apply(&self, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bases = tape.constant(self.base_kernels.clone());
        let router = tape.constant(self.router_weights.clone());
        let c = tape.constant(c_batch.clone());
        let k = mix_kernels_on_tape(&mut tape, bases, router, c)?;
        let y = grouped_batch_conv(&mut tape, xv, k, self.conv)?;
        Ok(tape.value(y).clone())
    }
}

/// Shorthand for [`ConditionEmbedder::embed_condition`].
pub fn embed_condition<T: Element>(
    embedder: &ConditionEmbedder,
    params: &ParamStore<T>,
    class_label: Option<usize>,
    timestep: usize,
    sources: ConditionSources,
) -> Result<ConditionEmbedding<T>> {
    embedder.embed_condition(params, class_label, timestep, sources)
}

pub fn generate_conditional_weight<T: Element>(gen: &WeightGenerator<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
    gen.generate(c_batch)
}

pub fn apply_condition_aware_reference<T: Element>(
    layer: &CondAwareParam<T>,
    x: &Tensor<T>,
    c_batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    layer.apply_reference(x, c_batch)
}

pub fn apply_fused_grouped<T: Element>(layer: &CondAwareParam<T>, x: &Tensor<T>, c_batch: &Tensor<T>) -> Result<Tensor<T>> {
    layer.apply_fused(x, c_batch)
}

pub fn apply_adaptive_kernel_selection<T: Element>(
    bank: &AdaptiveKernelBank<T>,
    x: &Tensor<T>,
    c_batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    bank.apply(x, c_batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dw_layer(c: usize, d: usize, seed: u64) -> CondAwareParam<f64> {
        let mut r = rng(seed);
        let gen = WeightGenerator::new(Tensor::randn(&[c * 9, d], 0.3, &mut r), &[c, 1, 3, 3], false).unwrap();
        CondAwareParam::new(
            LayerKind::DwConv,
            Tensor::randn(&[c, 1, 3, 3], 0.5, &mut r),
            Arc::new(gen),
            Some(Conv2dSpec::new(1, 1, c)),
        )
        .unwrap()
    }

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoidal_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    fn embedder() -> (ConditionEmbedder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let e = ConditionEmbedder::register(&mut store, "cond", 4, 8, 100, 3).unwrap();
        (e, store)
    }

    #[test]
    fn class_only_embedding_ignores_timestep() {
        let (e, p) = embedder();
        let a = e.embed_condition(&p, Some(2), 3, ConditionSources::CLASS_ONLY).unwrap();
        let b = e.embed_condition(&p, Some(2), 97, ConditionSources::CLASS_ONLY).unwrap();
        assert!(a.vector.bitwise_eq(&b.vector));
        let t1 = e.embed_condition(&p, Some(0), 7, ConditionSources::TIMESTEP_ONLY).unwrap();
        let t2 = e.embed_condition(&p, Some(3), 7, ConditionSources::TIMESTEP_ONLY).unwrap();
        assert!(t1.vector.bitwise_eq(&t2.vector));
    }

    #[test]
    fn all_sources_is_sum_of_parts() {
        let (e, p) = embedder();
        let all = e.embed_condition(&p, Some(1), 42, ConditionSources::ALL).unwrap();
        let c = e.embed_condition(&p, Some(1), 42, ConditionSources::CLASS_ONLY).unwrap();
        let t = e.embed_condition(&p, Some(1), 42, ConditionSources::TIMESTEP_ONLY).unwrap();
        assert!(all.vector.max_abs_diff(&c.vector.add(&t.vector).unwrap()).unwrap() < 1e-12);
        assert_eq!(all.vector.shape(), &[1, 8]);
    }

    #[test]
    fn embedding_range_errors() {
        let (e, p) = embedder();
        assert!(matches!(e.embed_condition(&p, Some(4), 0, ConditionSources::ALL), Err(Error::Range(_))));
        assert!(matches!(e.embed_condition(&p, Some(0), 100, ConditionSources::ALL), Err(Error::Range(_))));
        // the null class is reachable through None
        assert!(e.embed_condition(&p, None, 0, ConditionSources::ALL).is_ok());
    }

    #[test]
    fn zero_generator_gives_zero_weight() {
        let gen = WeightGenerator::<f32>::zeros(&[16, 1, 3, 3], 8, false);
        let c = Tensor::randn(&[3, 8], 1.0, &mut rng(1));
        let wc = gen.generate(&c).unwrap();
        assert_eq!(wc.shape(), &[3, 16, 1, 3, 3]);
        assert!(wc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_is_linear_in_condition() {
        let gen = WeightGenerator::new(Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng(2)), &[2, 3], false).unwrap();
        let c = Tensor::randn(&[2, 4], 1.0, &mut rng(3));
        let once = gen.generate(&c).unwrap();
        let twice = gen.generate(&c.scale(2.0)).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn generator_parameter_count() {
        let gen = WeightGenerator::<f32>::zeros(&[16, 1, 3, 3], 8, false);
        assert_eq!(gen.param_count(), 1152);
    }

    #[test]
    fn generator_dimension_mismatch() {
        let gen = WeightGenerator::<f32>::zeros(&[4], 8, false);
        assert!(matches!(gen.generate(&Tensor::zeros(&[2, 7])), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_linear_case() {
        // W = [[1]], W_c = [[2]], x = [3] → 9
        let gen = WeightGenerator::new(Tensor::<f64>::full(&[1, 1], 2.0), &[1, 1], false).unwrap();
        let layer = CondAwareParam::new(LayerKind::Mlp, Tensor::full(&[1, 1], 1.0), Arc::new(gen), None).unwrap();
        let x = Tensor::full(&[1, 1, 1], 3.0);
        let c = Tensor::full(&[1, 1], 1.0);
        assert_eq!(layer.apply_reference(&x, &c).unwrap().data(), &[9.0]);
        assert_eq!(layer.apply_batched(&x, &c).unwrap().data(), &[9.0]);
        assert_eq!(layer.apply_output_sum(&x, &c).unwrap().data(), &[9.0]);
    }

    #[test]
    fn zero_conditional_weight_matches_static() {
        let mut layer = dw_layer(4, 3, 5);
        layer.generator = Arc::new(WeightGenerator::zeros(&[4, 1, 3, 3], 3, false));
        let x = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut rng(6));
        let c = Tensor::randn(&[3, 3], 1.0, &mut rng(7));
        let stat = layer.apply_static(&x).unwrap();
        assert!(layer.apply_reference(&x, &c).unwrap().bitwise_eq(&stat));
        assert!(layer.apply_fused(&x, &c).unwrap().bitwise_eq(&stat));
    }

    #[test]
    fn single_sample_fused_is_plain_conv() {
        let layer = dw_layer(4, 3, 8);
        let x = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng(9));
        let c = Tensor::randn(&[1, 3], 1.0, &mut rng(10));
        let k = layer.generator.generate(&c).unwrap().reshape(&[4, 1, 3, 3]).unwrap();
        let fused_k = layer.static_weight.add(&k).unwrap();
        let plain = conv2d(&x, &fused_k, layer.conv.unwrap()).unwrap();
        assert!(layer.apply_fused(&x, &c).unwrap().bitwise_eq(&plain));
    }

    #[test]
    fn zero_kernel_for_one_sample_is_local() {
        // static weight zero and sample-0 condition zero → sample 0 output zero
        let mut layer = dw_layer(3, 2, 11);
        layer.static_weight = Tensor::zeros(&[3, 1, 3, 3]);
        let x = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut rng(12));
        let mut c = Tensor::randn(&[4, 2], 1.0, &mut rng(13));
        c.data_mut()[..2].iter_mut().for_each(|v| *v = 0.0);
        let y = layer.apply_fused(&x, &c).unwrap();
        let per = 3 * 25;
        assert!(y.data()[..per].iter().all(|&v| v == 0.0));
        let reference = layer.apply_reference(&x, &c).unwrap();
        assert!(y.max_abs_diff(&reference).unwrap() < 1e-12);
        assert!(y.data()[per..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fused_requires_conv_kind() {
        let gen = WeightGenerator::<f32>::zeros(&[2, 2], 1, false);
        let layer = CondAwareParam::new(LayerKind::OutProj, Tensor::zeros(&[2, 2]), Arc::new(gen), None).unwrap();
        assert!(layer.apply_fused(&Tensor::zeros(&[1, 1, 2]), &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn shared_generator_gives_same_wc_different_outputs() {
        let gen = Arc::new(WeightGenerator::new(Tensor::<f64>::randn(&[16, 3], 1.0, &mut rng(20)), &[4, 4], true).unwrap());
        let a = CondAwareParam::new(LayerKind::OutProj, Tensor::randn(&[4, 4], 1.0, &mut rng(21)), gen.clone(), None).unwrap();
        let b = CondAwareParam::new(LayerKind::OutProj, Tensor::randn(&[4, 4], 1.0, &mut rng(22)), gen, None).unwrap();
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng(23));
        assert!(a.generator.generate(&c).unwrap().bitwise_eq(&b.generator.generate(&c).unwrap()));
        let x = Tensor::randn(&[2, 5, 4], 1.0, &mut rng(24));
        let (ya, yb) = (a.apply_batched(&x, &c).unwrap(), b.apply_batched(&x, &c).unwrap());
        assert!(ya.max_abs_diff(&yb).unwrap() > 1e-3);
    }

    #[test]
    fn aks_single_kernel_and_uniform_mixture() {
        let mut r = rng(30);
        let spec = Conv2dSpec::new(1, 1, 3);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let c = Tensor::randn(&[2, 5], 1.0, &mut r);

        let base = Tensor::randn(&[1, 3, 1, 3, 3], 1.0, &mut r);
        let bank = AdaptiveKernelBank::new(base.clone(), Tensor::randn(&[1, 5], 1.0, &mut r), spec).unwrap();
        let want = conv2d(&x, &base.clone().reshape(&[3, 1, 3, 3]).unwrap(), spec).unwrap();
        assert!(bank.apply(&x, &c).unwrap().max_abs_diff(&want).unwrap() < 1e-12);

        let bases = Tensor::randn(&[3, 3, 1, 3, 3], 1.0, &mut r);
        let bank = AdaptiveKernelBank::new(bases.clone(), Tensor::zeros(&[3, 5]), spec).unwrap();
        let mixed = bank.mix(&c).unwrap();
        for i in 0..27 {
            let mean = (bases.data()[i] + bases.data()[27 + i] + bases.data()[54 + i]) / 3.0;
            assert!((mixed.data()[i] - mean).abs() < 1e-12);
            assert!((mixed.data()[27 + i] - mean).abs() < 1e-12);
        }
    }
}
