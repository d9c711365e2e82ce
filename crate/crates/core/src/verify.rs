//! Property suites run by `canf verify`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::can::{CondAwareParam, LayerKind, Strategy, WeightGenerator};
use crate::error::Result;
use crate::gradcheck::{grad_check, Differentiable, GradCheckOptions};
use crate::kernels::Conv2dSpec;
use crate::model::{build_model, ControlMethod, Model, ModelConfig};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest observed error (or 0 for exact checks).
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteOutcome {
    fn new(name: &'static str) -> Self {
        SuiteOutcome {
            name,
            passed: 0,
            total: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.total += 1;
        self.worst = self.worst.max(err);
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(what());
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total && self.total > 0
    }
}

/// A random condition-aware convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub batch: usize,
    pub channels: usize,
    pub kernel: usize,
    pub depthwise: bool,
    pub size: usize,
    pub cond_dim: usize,
}

impl ConvCase {
    pub fn random(rng: &mut impl Rng) -> Self {
        const BATCHES: [usize; 5] = [1, 2, 4, 8, 32];
        const CHANNELS: [usize; 3] = [4, 8, 64];
        ConvCase {
            batch: BATCHES[rng.gen_range(0..BATCHES.len())],
            channels: CHANNELS[rng.gen_range(0..CHANNELS.len())],
            kernel: if rng.gen_bool(0.5) { 1 } else { 3 },
            depthwise: rng.gen_bool(0.5),
            size: rng.gen_range(3..=8),
            cond_dim: rng.gen_range(1..=16),
        }
    }

    /// Layer, input and condition batch, drawn at fp64 and cast to `T`.
    pub fn build<T: Element>(&self, seed: u64) -> Result<(CondAwareParam<T>, Tensor<T>, Tensor<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.channels;
        let groups = if self.depthwise { c } else { 1 };
        let ws = [c, c / groups, self.kernel, self.kernel];
        let p: usize = ws.iter().product();
        let gen = WeightGenerator::new(
            Tensor::<f64>::randn(&[p, self.cond_dim], 0.3, &mut rng).cast(),
            &ws,
            false,
        )?;
        let layer = CondAwareParam::new(
            LayerKind::DwConv,
            Tensor::<f64>::randn(&ws, 0.5, &mut rng).cast(),
            Arc::new(gen),
            Some(Conv2dSpec::new(1, self.kernel / 2, groups)),
        )?;
        let x = Tensor::<f64>::randn(&[self.batch, c, self.size, self.size], 1.0, &mut rng).cast();
        let cb = Tensor::<f64>::randn(&[self.batch, self.cond_dim], 1.0, &mut rng).cast();
        Ok((layer, x, cb))
    }
}

/// Fused grouped convolution vs the per-sample loop, at fp32 (≤1e-5) and
/// fp64 (≤1e-10).
pub fn fusion_equivalence(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("fusion-equivalence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let case = ConvCase::random(&mut rng);
        let s = seed.wrapping_add(i as u64);
        let (l32, x32, c32) = case.build::<f32>(s)?;
        let d32 = l32.apply_fused(&x32, &c32)?.max_abs_diff(&l32.apply_reference(&x32, &c32)?)?;
        out.record(d32 <= 1e-5, d32, || format!("{case:?} fp32 diff {d32:e}"));
        let (l64, x64, c64) = case.build::<f64>(s)?;
        let d64 = l64.apply_fused(&x64, &c64)?.max_abs_diff(&l64.apply_reference(&x64, &c64)?)?;
        out.record(d64 <= 1e-10, d64, || format!("{case:?} fp64 diff {d64:e}"));
    }
    Ok(out)
}

/// `(W + W_c)·x` vs `W·x + W_c·x` for convolutional and linear layers.
pub fn distributivity(instances: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("distributivity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (layer, x, c) = if i % 2 == 0 {
            ConvCase::random(&mut rng).build::<f64>(seed ^ i as u64)?
        } else {
            let (din, dout, d) = (rng.gen_range(1..32), rng.gen_range(1..32), rng.gen_range(1..16));
            let b = rng.gen_range(1..8);
            let n = rng.gen_range(1..10);
            let gen = WeightGenerator::new(Tensor::randn(&[dout * din, d], 0.3, &mut rng), &[dout, din], false)?;
            let layer = CondAwareParam::new(
                LayerKind::OutProj,
                Tensor::randn(&[dout, din], 0.5, &mut rng),
                Arc::new(gen),
                None,
            )?;
            (
                layer,
                Tensor::randn(&[b, n, din], 1.0, &mut rng),
                Tensor::randn(&[b, d], 1.0, &mut rng),
            )
        };
        let diff = layer.apply_batched(&x, &c)?.max_abs_diff(&layer.apply_output_sum(&x, &c)?)?;
        out.record(diff <= 1e-6, diff, || format!("instance {i} ({:?}) diff {diff:e}", layer.kind));
    }
    Ok(out)
}

/// Model configurations covering every module kind and control method.
pub fn reduction_variants(base: &ModelConfig) -> Vec<ModelConfig> {
    use ControlMethod::*;
    use LayerKind::*;
    let mut out = Vec::new();
    let sets: [&[LayerKind]; 5] = [
        &[DwConv],
        &[DwConv, PatchEmbed, OutProj],
        &[QkvProj, Mlp],
        &[Head],
        &LayerKind::ALL,
    ];
    for methods in [&[Can][..], &[Can, CondTokens], &[Can, AdaNorm], &[Can, AdaNorm, CondTokens]] {
        for set in sets {
            let mut m = base.clone();
            m.control_method = methods.iter().copied().collect();
            m.cond_aware_set = set.iter().copied().collect();
            out.push(m);
        }
    }
    for methods in [&[AdaNorm][..], &[AdaNorm, CondTokens]] {
        let mut m = base.clone();
        m.control_method = methods.iter().copied().collect();
        m.cond_aware_set.clear();
        out.push(m);
    }
    for set in [&[DwConv][..], &[DwConv, PatchEmbed]] {
        let mut m = base.clone();
        m.control_method = [Aks, CondTokens].into();
        m.cond_aware_set = set.iter().copied().collect();
        out.push(m);
    }
    out
}

/// Zero-initialized controls reproduce the static counterpart bitwise.
pub fn baseline_reduction(base: &ModelConfig, inputs: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::new("baseline-reduction");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 3;
    let xs: Vec<(Tensor<f32>, Vec<usize>, Vec<usize>)> = (0..inputs)
        .map(|_| {
            let x = Tensor::randn(&[b, base.channels, base.image_size, base.image_size], 1.0, &mut rng);
            let l = (0..b).map(|_| rng.gen_range(0..=base.n_classes)).collect();
            let t = (0..b).map(|_| rng.gen_range(0..base.timesteps)).collect();
            (x, l, t)
        })
        .collect();
    for cfg in reduction_variants(base) {
        let m = build_model::<f32>(&cfg, seed)?;
        let s = build_model::<f32>(&cfg.static_counterpart(), seed)?;
        for (x, l, t) in &xs {
            let same = m.predict(x, l, t)?.bitwise_eq(&s.predict(x, l, t)?);
            out.record(same, if same { 0.0 } else { 1.0 }, || {
                format!("{:?} + {:?} differs from its static counterpart", cfg.control_method, cfg.cond_aware_set)
            });
        }
    }
    Ok(out)
}

/// Config of the small model used for gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        width: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        cond_dim: 4,
        n_classes: 3,
        timesteps: 10,
        cond_aware_set: [LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj].into(),
        control_method: [ControlMethod::Can, ControlMethod::CondTokens, ControlMethod::AdaNorm].into(),
        ..ModelConfig::default()
    }
}

/// `Σ proj ⊙ model(x)` over a fixed batch; a smooth scalar of every weight.
pub struct ModelProbe {
    pub model: Model<f64>,
    pub x: Tensor<f64>,
    pub proj: Tensor<f64>,
    pub labels: Vec<usize>,
    pub timesteps: Vec<usize>,
}

impl ModelProbe {
    /// Every parameter (generators and zero-initialized controls included)
    /// is redrawn so no gradient is trivially zero.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = build_model::<f64>(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in model.params.ids().collect::<Vec<_>>() {
            let shape = model.params.get(id).shape().to_vec();
            let std = match model.params.role(id) {
                ParamRole::Static => 0.5,
                _ => 0.2,
            };
            model.params.set(id, Tensor::randn(&shape, std, &mut rng))?;
        }
        let b = 3;
        let s = cfg.image_size;
        Ok(ModelProbe {
            model,
            x: Tensor::randn(&[b, cfg.channels, s, s], 1.0, &mut rng),
            proj: Tensor::randn(&[b, cfg.channels, s, s], 1.0, &mut rng),
            labels: (0..b).map(|i| i % (cfg.n_classes + 1)).collect(),
            timesteps: (0..b).map(|i| (3 * i + 1) % cfg.timesteps).collect(),
        })
    }
}

impl Differentiable for ModelProbe {
    fn loss<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var> {
        let x = tape.constant(self.x.cast());
        let y = self.model.arch.forward(tape, params, x, &self.labels, &self.timesteps)?;
        let p = tape.constant(self.proj.cast());
        let z = tape.mul(y, p)?;
        Ok(tape.sum(z))
    }
}

/// fp64 finite differences over every parameter of the small model,
/// through the fused path.
pub fn model_gradients(seed: u64) -> Result<(SuiteOutcome, usize)> {
    let mut out = SuiteOutcome::new("gradient-check");
    let probe = ModelProbe::new(&gradcheck_config(), seed)?;
    assert_eq!(probe.model.arch.strategy, Strategy::Fused);
    let report = grad_check::<f64, _>(&probe, &probe.model.params, GradCheckOptions::default())?;
    out.total = report.checked;
    out.worst = report.max_rel_err;
    if report.max_rel_err <= 1e-6 {
        out.passed = report.checked;
    } else {
        out.passed = report.checked - 1;
        out.failures.push(format!("max relative error {:e} at {:?}", report.max_rel_err, report.worst));
    }
    Ok((out, probe.model.params.numel()))
}
