//! Toy diffusion transformer (UViT-style) with selectable condition-aware
//! modules and control methods.
//!
//! Layout of one forward pass:
//!
//! ```text
//! x ─ patch embed ─ +pos ─ [cond token] ─ blocks (long skips) ─ LN ─ head ─ unpatchify
//! block: LN ─ qkv ─ MHA ─ out-proj ─ + ─ LN ─ fc1 ─ GELU ─ dw 3×3 ─ GELU ─ fc2 ─ +
//! ```

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::can::{
    apply_conditional, generate_on_tape, mix_kernels_on_tape, static_linear, ConditionEmbedder, ConditionSources,
    LayerKind, Strategy,
};
use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::params::{named_rng, xavier_uniform, ParamRole, ParamStore};
use crate::tensor::{numel_of, Element, Tensor};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ControlMethod {
    /// Condition-aware weights.
    #[serde(rename = "CAN")]
    Can,
    /// Scale/shift of normalized features regressed from the condition.
    AdaNorm,
    /// The condition embedding prepended as an extra token.
    CondTokens,
    /// Softmax mixture of base kernels (conv layers only).
    #[serde(rename = "AKS")]
    Aks,
}

impl ControlMethod {
    pub const ALL: [ControlMethod; 4] = [
        ControlMethod::Can,
        ControlMethod::AdaNorm,
        ControlMethod::CondTokens,
        ControlMethod::Aks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlMethod::Can => "CAN",
            ControlMethod::AdaNorm => "AdaNorm",
            ControlMethod::CondTokens => "CondTokens",
            ControlMethod::Aks => "AKS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Condition embedding dimension `d`.
    pub cond_dim: usize,
    pub n_classes: usize,
    /// Diffusion steps `T`; bounds the timestep input.
    pub timesteps: usize,
    pub cond_aware_set: BTreeSet<LayerKind>,
    pub control_method: BTreeSet<ControlMethod>,
    /// Inputs feeding the weight generators (or kernel routers).
    pub can_sources: ConditionSources,
    pub skip_connections: bool,
    /// Base kernels per layer when AKS is selected.
    pub aks_kernels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            cond_dim: 64,
            n_classes: 4,
            timesteps: 1000,
            cond_aware_set: [LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj].into(),
            control_method: [ControlMethod::Can, ControlMethod::CondTokens].into(),
            can_sources: ConditionSources::ALL,
            skip_connections: true,
            aks_kernels: 8,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn has(&self, m: ControlMethod) -> bool {
        self.control_method.contains(&m)
    }

    pub fn is_cond_aware(&self, kind: LayerKind) -> bool {
        self.cond_aware_set.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("cond_dim", self.cond_dim),
            ("n_classes", self.n_classes),
            ("timesteps", self.timesteps),
            ("aks_kernels", self.aks_kernels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} does not divide width {}", self.heads, self.width),
            ));
        }
        let can = self.has(ControlMethod::Can);
        let aks = self.has(ControlMethod::Aks);
        if can && aks {
            return Err(Error::config("control_method", "CAN and AKS are alternatives; pick one"));
        }
        if !self.cond_aware_set.is_empty() && !can && !aks {
            return Err(Error::config("cond_aware_set", "must be empty unless control_method includes CAN or AKS"));
        }
        if aks {
            if let Some(k) = self.cond_aware_set.iter().find(|k| !k.is_conv()) {
                return Err(Error::config(
                    "cond_aware_set",
                    format!("AKS only applies to convolutions, not {}", k.name()),
                ));
            }
        }
        if self.can_sources.is_empty() {
            return Err(Error::config("can_sources", "at least one source is required"));
        }
        Ok(())
    }

    /// The same architecture with every condition-aware module and
    /// zero-initializable control removed. Condition tokens stay since they
    /// cannot be made a no-op by initialization.
    pub fn static_counterpart(&self) -> ModelConfig {
        let mut c = self.clone();
        c.cond_aware_set.clear();
        c.control_method
            .retain(|m| !matches!(m, ControlMethod::Can | ControlMethod::Aks | ControlMethod::AdaNorm));
        c
    }
}

/// How a layer's conditional weight is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondControl {
    Generator(ParamId),
    KernelBank { bases: ParamId, router: ParamId },
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub control: Option<CondControl>,
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub qkv: LinearLayer,
    pub out_proj: LinearLayer,
    pub ln2: Norm,
    pub fc1: LinearLayer,
    pub dw: LinearLayer,
    pub fc2: LinearLayer,
    /// `[4·width, d]`: scale/shift for both norms.
    pub ada: Option<(ParamId, ParamId)>,
    /// Long-skip fusion (`2·width → width`) for decoder-side blocks.
    pub skip: Option<(ParamId, ParamId)>,
}

/// Parameter layout and forward logic; holds no weights.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub embedder: ConditionEmbedder,
    pub patch: LinearLayer,
    pub pos: ParamId,
    pub cond_token: Option<(ParamId, ParamId)>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub final_ada: Option<(ParamId, ParamId)>,
    pub head: LinearLayer,
    pub strategy: Strategy,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub static_params: usize,
    pub generators: usize,
    pub control: usize,
    pub total: usize,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Element> Builder<'_, T> {
    fn add(&mut self, name: &str, role: ParamRole, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(name, role, value)
    }

    fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let mut rng = named_rng(self.seed, name);
        let v = xavier_uniform(shape, fan_in, fan_out, &mut rng);
        self.add(name, ParamRole::Static, v)
    }

    fn linear(&mut self, name: &str, dout: usize, din: usize) -> Result<LinearLayer> {
        Ok(LinearLayer {
            w: self.xavier(&format!("{name}.w"), &[dout, din], din, dout)?,
            b: self.add(&format!("{name}.b"), ParamRole::Static, Tensor::zeros(&[dout]))?,
            control: None,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.add(&format!("{name}.gamma"), ParamRole::Static, Tensor::ones(&[dim]))?,
            beta: self.add(&format!("{name}.beta"), ParamRole::Static, Tensor::zeros(&[dim]))?,
        })
    }

    fn zeros(&mut self, name: &str, role: ParamRole, shape: &[usize]) -> Result<ParamId> {
        self.add(name, role, Tensor::zeros(shape))
    }

    fn control(
        &mut self,
        config: &ModelConfig,
        kind: LayerKind,
        name: &str,
        shape: &[usize],
    ) -> Result<Option<CondControl>> {
        if !config.is_cond_aware(kind) {
            return Ok(None);
        }
        let d = config.cond_dim;
        let p = numel_of(shape);
        if config.has(ControlMethod::Aks) {
            let k = config.aks_kernels;
            let mut bank_shape = vec![k];
            bank_shape.extend_from_slice(shape);
            let bases = self.zeros(&format!("aks.{name}.bases"), ParamRole::Control, &bank_shape)?;
            let router_name = format!("aks.{name}.router");
            let mut rng = named_rng(self.seed, &router_name);
            let router = self.add(&router_name, ParamRole::Control, xavier_uniform(&[k, d], d, k, &mut rng))?;
            return Ok(Some(CondControl::KernelBank { bases, router }));
        }
        let id = self.zeros(&format!("gen.{name}"), ParamRole::Generator, &[p, d])?;
        Ok(Some(CondControl::Generator(id)))
    }
}

/// Builds the architecture and its initial weights. Every parameter is
/// initialized from `(seed, name)` alone, so variants that share a parameter
/// name start from the same value.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder { store: &mut store, seed };
    let (w, hid, d) = (config.width, config.hidden(), config.cond_dim);
    let (c, p) = (config.channels, config.patch_size);

    let embedder = ConditionEmbedder::register(b.store, "cond", config.n_classes, d, config.timesteps, seed)?;

    let patch_shape = [w, c, p, p];
    let mut patch = LinearLayer {
        w: b.xavier("patch.w", &patch_shape, c * p * p, w)?,
        b: b.zeros("patch.b", ParamRole::Static, &[w])?,
        control: None,
    };
    let pos = {
        let mut rng = named_rng(seed, "pos");
        b.add("pos", ParamRole::Static, Tensor::randn(&[config.num_patches(), w], 0.02, &mut rng))?
    };
    let cond_token = if config.has(ControlMethod::CondTokens) {
        let mut rng = named_rng(seed, "cond_token.w");
        Some((
            b.add("cond_token.w", ParamRole::Control, xavier_uniform(&[w, d], d, w, &mut rng))?,
            b.zeros("cond_token.b", ParamRole::Control, &[w])?,
        ))
    } else {
        None
    };
    let ada = |b: &mut Builder<T>, name: &str, n: usize| -> Result<Option<(ParamId, ParamId)>> {
        if !config.has(ControlMethod::AdaNorm) {
            return Ok(None);
        }
        Ok(Some((
            b.zeros(&format!("{name}.w"), ParamRole::Control, &[n * w, d])?,
            b.zeros(&format!("{name}.b"), ParamRole::Control, &[n * w])?,
        )))
    };

    let shared_out_proj = b.control(config, LayerKind::OutProj, "out-proj", &[w, w])?;
    let n_in = config.depth / 2;
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let name = format!("blocks.{i}");
        let skip = if config.skip_connections && i >= config.depth - n_in {
            let l = b.linear(&format!("{name}.skip"), w, 2 * w)?;
            Some((l.w, l.b))
        } else {
            None
        };
        let ln1 = b.norm(&format!("{name}.ln1"), w)?;
        let mut qkv = b.linear(&format!("{name}.qkv"), 3 * w, w)?;
        qkv.control = b.control(config, LayerKind::QkvProj, &format!("qkv-proj.{i}"), &[3 * w, w])?;
        let mut out_proj = b.linear(&format!("{name}.proj"), w, w)?;
        out_proj.control = shared_out_proj;
        let ln2 = b.norm(&format!("{name}.ln2"), w)?;
        let mut fc1 = b.linear(&format!("{name}.fc1"), hid, w)?;
        fc1.control = b.control(config, LayerKind::Mlp, &format!("mlp.{i}.fc1"), &[hid, w])?;
        let dw_shape = [hid, 1, 3, 3];
        let mut dw = LinearLayer {
            w: b.xavier(&format!("{name}.dw.w"), &dw_shape, 9, 9)?,
            b: b.zeros(&format!("{name}.dw.b"), ParamRole::Static, &[hid])?,
            control: None,
        };
        dw.control = b.control(config, LayerKind::DwConv, &format!("dw-conv.{i}"), &dw_shape)?;
        let mut fc2 = b.linear(&format!("{name}.fc2"), w, hid)?;
        fc2.control = b.control(config, LayerKind::Mlp, &format!("mlp.{i}.fc2"), &[w, hid])?;
        let ada = ada(&mut b, &format!("{name}.ada"), 4)?;
        blocks.push(Block {
            ln1,
            qkv,
            out_proj,
            ln2,
            fc1,
            dw,
            fc2,
            ada,
            skip,
        });
    }
    patch.control = b.control(config, LayerKind::PatchEmbed, "patch-embed", &patch_shape)?;
    let final_norm = b.norm("final_norm", w)?;
    let final_ada = ada(&mut b, "final_ada", 2)?;
    let mut head = b.linear("head", config.patch_dim(), w)?;
    head.control = b.control(config, LayerKind::Head, "head", &[config.patch_dim(), w])?;

    Ok(Model {
        arch: Architecture {
            config: config.clone(),
            embedder,
            patch,
            pos,
            cond_token,
            blocks,
            final_norm,
            final_ada,
            head,
            strategy: Strategy::Fused,
        },
        params: store,
    })
}

/// Per-forward state: condition embeddings and generated weights.
struct Ctx<'p, T> {
    params: &'p ParamStore<T>,
    strategy: Strategy,
    batch: usize,
    /// `[B, d]` from all sources (tokens, adaptive norm).
    c_full: Var,
    /// `[U, d]` generator input over unique condition keys.
    c_gen: Var,
    inverse: Vec<usize>,
    bound: HashMap<ParamId, Var>,
    generated: HashMap<(ParamId, ParamId), Var>,
}

impl<T: Element> Ctx<'_, T> {
    fn bind(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        *self.bound.entry(id).or_insert_with(|| self.params.bind(tape, id))
    }

    /// `[B, ...shape]` conditional weight; computed once per forward for
    /// each control (so a shared generator yields one tensor).
    fn conditional_weight(&mut self, tape: &mut Tape<T>, control: CondControl, shape: &[usize]) -> Result<Var> {
        let key = match control {
            CondControl::Generator(id) => (id, id),
            CondControl::KernelBank { bases, router } => (bases, router),
        };
        if let Some(&v) = self.generated.get(&key) {
            return Ok(v);
        }
        let unique = match control {
            CondControl::Generator(id) => {
                let map = self.bind(tape, id);
                generate_on_tape(tape, map, self.c_gen, shape)?
            }
            CondControl::KernelBank { bases, router } => {
                let bases = self.bind(tape, bases);
                let router = self.bind(tape, router);
                mix_kernels_on_tape(tape, bases, router, self.c_gen)?
            }
        };
        let u = tape.shape(unique)[0];
        let p = numel_of(shape);
        let flat = tape.reshape(unique, &[u, p])?;
        let rows = tape.gather_rows(flat, &self.inverse)?;
        let mut full = vec![self.batch];
        full.extend_from_slice(shape);
        let v = tape.reshape(rows, &full)?;
        self.generated.insert(key, v);
        Ok(v)
    }

    /// `x [B, N, in]` → `[B, N, out]`.
    fn linear(&mut self, tape: &mut Tape<T>, layer: &LinearLayer, x: Var) -> Result<Var> {
        let w = self.bind(tape, layer.w);
        let y = match layer.control {
            None => static_linear(tape, x, w)?,
            Some(ctrl) => {
                let shape = tape.shape(w).to_vec();
                let wc = self.conditional_weight(tape, ctrl, &shape)?;
                apply_conditional(tape, x, w, wc, None, self.strategy)?
            }
        };
        let b = self.bind(tape, layer.b);
        tape.add_bias(y, b, 2)
    }

    fn conv(&mut self, tape: &mut Tape<T>, layer: &LinearLayer, x: Var, spec: Conv2dSpec) -> Result<Var> {
        let w = self.bind(tape, layer.w);
        let y = match layer.control {
            None => tape.conv2d(x, w, spec)?,
            Some(ctrl) => {
                let shape = tape.shape(w).to_vec();
                let wc = self.conditional_weight(tape, ctrl, &shape)?;
                apply_conditional(tape, x, w, wc, Some(spec), self.strategy)?
            }
        };
        let b = self.bind(tape, layer.b);
        tape.add_bias(y, b, 1)
    }

    fn norm(&mut self, tape: &mut Tape<T>, norm: &Norm, x: Var) -> Result<Var> {
        let g = self.bind(tape, norm.gamma);
        let b = self.bind(tape, norm.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `[B, n·width]` modulation parameters from `SiLU(c)`.
    fn ada(&mut self, tape: &mut Tape<T>, ada: (ParamId, ParamId)) -> Result<Var> {
        let w = self.bind(tape, ada.0);
        let b = self.bind(tape, ada.1);
        let h = tape.silu(self.c_full);
        let y = tape.matmul_nt(h, w)?;
        tape.add_bias(y, b, 1)
    }
}

fn modulate_chunk<T: Element>(tape: &mut Tape<T>, x: Var, mods: Var, idx: usize, width: usize) -> Result<Var> {
    let scale = tape.slice(mods, 1, 2 * idx * width, width)?;
    let shift = tape.slice(mods, 1, (2 * idx + 1) * width, width)?;
    tape.modulate(x, scale, shift)
}

/// `[B, N, C·p·p]` tokens to `[B, C, g·p, g·p]` images; the inverse of
/// [`patchify`].
pub fn unpatchify<T: Element>(tape: &mut Tape<T>, tokens: Var, channels: usize, patch: usize) -> Result<Var> {
    let ts = tape.shape(tokens).to_vec();
    let [b, n, pd] = ts[..] else {
        return Err(Error::shape(format!("unpatchify expects [B, N, C·p·p], got {ts:?}")));
    };
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || pd != channels * patch * patch {
        return Err(Error::shape(format!(
            "tokens {ts:?} do not form a square grid of {channels}×{patch}×{patch} patches"
        )));
    }
    let x = tape.reshape(tokens, &[b, g, g, channels, patch, patch])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[b, channels, g * patch, g * patch])
}

/// `[B, C, H, W]` images to `[B, N, C·p·p]` patch vectors in row-major
/// patch order, each flattened as `(c, i, j)`.
pub fn patchify<T: Element>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let [b, c, h, w] = xs[..] else {
        return Err(Error::shape(format!("patchify expects [B, C, H, W], got {xs:?}")));
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}×{w} image is not divisible into {patch}×{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let v = x.clone().reshape(&[b, c, gh, patch, gw, patch])?;
    crate::kernels::permute(&v, &[0, 2, 4, 1, 3, 5])?.reshape(&[b, gh * gw, c * patch * patch])
}

impl Architecture {
    /// Unique condition keys for the generator input and, per sample, the
    /// index of its key.
    fn condition_keys(&self, labels: &[usize], timesteps: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let src = self.config.can_sources;
        let mut first = Vec::new();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let inverse = labels
            .iter()
            .zip(timesteps)
            .enumerate()
            .map(|(i, (&l, &t))| {
                let key = (if src.class_label { l } else { 0 }, if src.timestep { t } else { 0 });
                *seen.entry(key).or_insert_with(|| {
                    first.push(i);
                    first.len() - 1
                })
            })
            .collect();
        (first, inverse)
    }

    fn uses_generated_weights(&self) -> bool {
        !self.config.cond_aware_set.is_empty()
    }

    /// Predicts noise for `x [B, C, H, W]` at the given labels (the null
    /// class is `n_classes`) and timesteps.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        labels: &[usize],
        timesteps: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        let expect = [labels.len(), cfg.channels, cfg.image_size, cfg.image_size];
        if xs != expect {
            return Err(Error::shape(format!("model input {xs:?}, expected {expect:?}")));
        }
        let batch = xs[0];
        let w = cfg.width;
        let n = cfg.num_patches();

        let c_full = self.embedder.embed(tape, params, labels, timesteps, ConditionSources::ALL)?;
        let (c_gen, inverse) = if self.uses_generated_weights() {
            let (first, inverse) = self.condition_keys(labels, timesteps);
            let ul: Vec<usize> = first.iter().map(|&i| labels[i]).collect();
            let ut: Vec<usize> = first.iter().map(|&i| timesteps[i]).collect();
            (self.embedder.embed(tape, params, &ul, &ut, cfg.can_sources)?, inverse)
        } else {
            (c_full, (0..batch).collect())
        };
        let mut ctx = Ctx {
            params,
            strategy: self.strategy,
            batch,
            c_full,
            c_gen,
            inverse,
            bound: HashMap::new(),
            generated: HashMap::new(),
        };

        // patch embedding
        let p = cfg.patch_size;
        let h = ctx.conv(tape, &self.patch, x, Conv2dSpec::new(p, 0, 1))?;
        let h = tape.reshape(h, &[batch, w, n])?;
        let h = tape.permute(h, &[0, 2, 1])?;
        let pos = ctx.bind(tape, self.pos);
        let pos = tape.expand(pos, batch)?;
        let mut h = tape.add(h, pos)?;

        let extra = if let Some((tw, tb)) = self.cond_token {
            let tw = ctx.bind(tape, tw);
            let tb = ctx.bind(tape, tb);
            let tok = tape.matmul_nt(c_full, tw)?;
            let tok = tape.add_bias(tok, tb, 1)?;
            let tok = tape.reshape(tok, &[batch, 1, w])?;
            h = tape.concat(&[tok, h], 1)?;
            1
        } else {
            0
        };

        let mut skips = Vec::new();
        let n_in = if cfg.skip_connections { cfg.depth / 2 } else { 0 };
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some((sw, sb)) = block.skip {
                let s = skips.pop().expect("one skip per decoder block");
                let cat = tape.concat(&[h, s], 2)?;
                h = ctx.linear(
                    tape,
                    &LinearLayer {
                        w: sw,
                        b: sb,
                        control: None,
                    },
                    cat,
                )?;
            }
            h = self.block_forward(tape, &mut ctx, block, h, extra)?;
            if i < n_in {
                skips.push(h);
            }
        }

        let mut h = ctx.norm(tape, &self.final_norm, h)?;
        if let Some(ada) = self.final_ada {
            let mods = ctx.ada(tape, ada)?;
            h = modulate_chunk(tape, h, mods, 0, w)?;
        }
        if extra > 0 {
            h = tape.slice(h, 1, extra, n)?;
        }
        let out = ctx.linear(tape, &self.head, h)?;
        unpatchify(tape, out, cfg.channels, p)
    }

    /// One transformer block over `[B, extra + N, width]` tokens; the first
    /// `extra` tokens bypass the spatial convolution.
    fn block_forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut Ctx<'_, T>,
        block: &Block,
        x: Var,
        extra: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (w, heads) = (cfg.width, cfg.heads);
        let dh = w / heads;
        let s = tape.shape(x).to_vec();
        let (b, len) = (s[0], s[1]);
        let mods = block.ada.map(|a| ctx.ada(tape, a)).transpose()?;

        // attention
        let mut h = ctx.norm(tape, &block.ln1, x)?;
        if let Some(m) = mods {
            h = modulate_chunk(tape, h, m, 0, w)?;
        }
        let qkv = ctx.linear(tape, &block.qkv, h)?;
        let qkv = tape.reshape(qkv, &[b, len, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let v = tape.slice(qkv, 0, i, 1)?;
            tape.reshape(v, &[b * heads, len, dh])
        };
        let (q, k, v) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let o = tape.bmm(attn, v, false)?;
        let o = tape.reshape(o, &[b, heads, len, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, len, w])?;
        let o = ctx.linear(tape, &block.out_proj, o)?;
        let x = tape.add(x, o)?;

        // feed-forward with a depthwise convolution over the patch grid
        let mut h = ctx.norm(tape, &block.ln2, x)?;
        if let Some(m) = mods {
            h = modulate_chunk(tape, h, m, 1, w)?;
        }
        let h = ctx.linear(tape, &block.fc1, h)?;
        let h = tape.gelu(h);
        let hid = cfg.hidden();
        let g = cfg.grid();
        let n = len - extra;
        let img = if extra > 0 { tape.slice(h, 1, extra, n)? } else { h };
        let sp = tape.permute(img, &[0, 2, 1])?;
        let sp = tape.reshape(sp, &[b, hid, g, g])?;
        let sp = ctx.conv(tape, &block.dw, sp, Conv2dSpec::new(1, 1, hid))?;
        let sp = tape.reshape(sp, &[b, hid, n])?;
        let img = tape.permute(sp, &[0, 2, 1])?;
        let h = if extra > 0 {
            let head = tape.slice(h, 1, 0, extra)?;
            tape.concat(&[head, img], 1)?
        } else {
            img
        };
        let h = tape.gelu(h);
        let h = ctx.linear(tape, &block.fc2, h)?;
        tape.add(x, h)
    }

    /// Distinct generator parameters with the layer kind they serve.
    pub fn generators(&self) -> Vec<(LayerKind, ParamId)> {
        let mut out: Vec<(LayerKind, ParamId)> = Vec::new();
        let mut push = |kind, layer: &LinearLayer| {
            if let Some(CondControl::Generator(id)) = layer.control {
                if !out.iter().any(|&(_, o)| o == id) {
                    out.push((kind, id));
                }
            }
        };
        push(LayerKind::PatchEmbed, &self.patch);
        for b in &self.blocks {
            push(LayerKind::QkvProj, &b.qkv);
            push(LayerKind::OutProj, &b.out_proj);
            push(LayerKind::Mlp, &b.fc1);
            push(LayerKind::DwConv, &b.dw);
            push(LayerKind::Mlp, &b.fc2);
        }
        push(LayerKind::Head, &self.head);
        out
    }
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Inference forward pass on plain tensors.
    pub fn predict(&self, x: &Tensor<T>, labels: &[usize], timesteps: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.arch.forward(&mut tape, &self.params, xv, labels, timesteps)?;
        Ok(tape.value(y).clone())
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.arch.strategy = strategy;
        self
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            if let Some(src) = other.id(self.params.name(id)) {
                self.params.set(id, other.get(src).clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

pub fn count_parameters<T: Element>(model: &Model<T>) -> ParamCounts {
    let p = &model.params;
    let static_params = p.numel_by_role(ParamRole::Static);
    let generators = p.numel_by_role(ParamRole::Generator);
    let control = p.numel_by_role(ParamRole::Control);
    ParamCounts {
        static_params,
        generators,
        control,
        total: static_params + generators + control,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            width: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            cond_dim: 8,
            timesteps: 50,
            ..ModelConfig::default()
        }
    }

    fn input(b: usize, seed: u64) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[b, 1, 8, 8], 1.0, &mut rng);
        let labels = (0..b).map(|i| i % 5).collect();
        let ts = (0..b).map(|i| (i * 7) % 50).collect();
        (x, labels, ts)
    }

    #[test]
    fn config_errors_name_field() {
        let bad = ModelConfig {
            patch_size: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "patch_size"));
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "heads"));
        let bad = ModelConfig {
            control_method: [ControlMethod::CondTokens].into(),
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "cond_aware_set"));
    }

    #[test]
    fn generator_layout_for_default_config() {
        let m = build_model::<f32>(&ModelConfig::default(), 0).unwrap();
        let gens = m.arch.generators();
        let count = |k| gens.iter().filter(|(kind, _)| *kind == k).count();
        assert_eq!(count(LayerKind::DwConv), 4);
        assert_eq!(count(LayerKind::PatchEmbed), 1);
        assert_eq!(count(LayerKind::OutProj), 1);
        assert_eq!(gens.len(), 6);
    }

    #[test]
    fn output_shape_all_modes() {
        let (x, l, t) = input(3, 1);
        for cm in [
            vec![ControlMethod::CondTokens],
            vec![ControlMethod::AdaNorm],
            vec![ControlMethod::Can],
            vec![ControlMethod::Can, ControlMethod::AdaNorm, ControlMethod::CondTokens],
        ] {
            let mut cfg = small();
            cfg.control_method = cm.into_iter().collect();
            if !cfg.has(ControlMethod::Can) {
                cfg.cond_aware_set.clear();
            }
            let m = build_model::<f64>(&cfg, 2).unwrap();
            assert_eq!(m.predict(&x, &l, &t).unwrap().shape(), &[3, 1, 8, 8]);
        }
    }

    #[test]
    fn patchify_unpatchify_roundtrip() {
        let (x, ..) = input(2, 4);
        let tokens = patchify(&x, 2).unwrap();
        assert_eq!(tokens.shape(), &[2, 16, 4]);
        let mut tape = Tape::new();
        let tv = tape.constant(tokens);
        let back = unpatchify(&mut tape, tv, 1, 2).unwrap();
        assert!(tape.value(back).bitwise_eq(&x));
    }

    #[test]
    fn fused_matches_per_sample_model() {
        let mut cfg = small();
        cfg.cond_aware_set = LayerKind::ALL.into_iter().collect();
        let mut m = build_model::<f64>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, id) in m.arch.generators() {
            let s = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::randn(&s, 0.05, &mut rng)).unwrap();
        }
        let (x, l, t) = input(4, 5);
        let fused = m.predict(&x, &l, &t).unwrap();
        let reference = m.clone().with_strategy(Strategy::PerSample).predict(&x, &l, &t).unwrap();
        let sum = m.clone().with_strategy(Strategy::OutputSum).predict(&x, &l, &t).unwrap();
        assert!(fused.max_abs_diff(&reference).unwrap() < 1e-10);
        assert!(fused.max_abs_diff(&sum).unwrap() < 1e-10);
    }

    #[test]
    fn zero_init_controls_reduce_to_static() {
        let mut cfg = small();
        cfg.cond_aware_set = LayerKind::ALL.into_iter().collect();
        cfg.control_method = [ControlMethod::Can, ControlMethod::AdaNorm, ControlMethod::CondTokens].into();
        let (x, l, t) = input(5, 6);
        let base = build_model::<f32>(&cfg.static_counterpart(), 11).unwrap();
        let xf = x.cast::<f32>();
        let want = base.predict(&xf, &l, &t).unwrap();
        for strategy in [Strategy::Fused, Strategy::PerSample, Strategy::OutputSum] {
            let m = build_model::<f32>(&cfg, 11).unwrap().with_strategy(strategy);
            assert!(m.predict(&xf, &l, &t).unwrap().bitwise_eq(&want), "{strategy:?}");
        }
    }
}
