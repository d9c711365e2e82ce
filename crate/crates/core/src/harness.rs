//! Synthetic data, training runs, ablation suites, reports and the
//! per-sample vs fused benchmark.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::can::{ConditionSources, LayerKind};
use crate::config::RunConfig;
use crate::diffusion::{ddim_sample, loss_on_tape, make_schedule, mse, noise_batch, GuidanceSpec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernels::{conv2d, conv2d_slices, Conv2dSpec};
use crate::model::{build_model, count_parameters, ControlMethod, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{gemm_slices, Tensor};

/// Images `[N, C, S, S]` in `[-1, 1]` with labels, plus the class templates.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub n_classes: usize,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[n_classes, C, S, S]`
    pub templates: Tensor<f32>,
    pub seed: u64,
}

const JITTER: f64 = 0.05;
const MIN_TEMPLATE_DISTANCE: f64 = 0.5;

/// A smooth random pattern: a few oriented cosine waves, normalized to
/// `[-1, 1]`.
fn template(rng: &mut ChaCha8Rng, channels: usize, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; channels * size * size];
    for c in 0..channels {
        for _ in 0..3 {
            let fx: f64 = rng.gen_range(-1.5..1.5);
            let fy: f64 = rng.gen_range(-1.5..1.5);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.gen_range(0.5..1.0);
            for y in 0..size {
                for x in 0..size {
                    img[(c * size + y) * size + x] += amp * (fx * x as f64 + fy * y as f64 + phase).cos();
                }
            }
        }
    }
    let m = img.iter().fold(0f64, |a, v| a.max(v.abs())).max(1e-9);
    img.iter().map(|v| v / m).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class templates, redrawn until pairwise L2 distances exceed 0.5.
pub fn gen_templates(seed: u64, n_classes: usize, channels: usize, size: usize) -> Result<Vec<Vec<f64>>> {
    if n_classes < 2 {
        return Err(Error::config("n_classes", "the synthetic dataset needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while out.len() < n_classes {
        let t = template(&mut rng, channels, size);
        if out.iter().all(|o| l2(o, &t) > MIN_TEMPLATE_DISTANCE) {
            out.push(t);
        }
    }
    Ok(out)
}

fn jittered(templates: &[Vec<f64>], per_class: usize, rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let k = templates.len();
    let labels: Vec<usize> = (0..per_class * k).map(|i| i % k).collect();
    let mut data = Vec::with_capacity(labels.len() * templates[0].len());
    for &l in &labels {
        for &v in &templates[l] {
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            data.push((v + JITTER * noise).clamp(-1.0, 1.0) as f32);
        }
    }
    let mut s = vec![labels.len()];
    s.extend_from_slice(shape);
    (Tensor::new(s, data).expect("sizes agree"), labels)
}

/// Deterministic class-conditional dataset of 8×8 single-channel images.
pub fn gen_dataset(seed: u64, n_classes: usize, n_per_class: usize) -> Result<SyntheticDataset> {
    gen_dataset_shaped(seed, n_classes, n_per_class, 1, 8)
}

pub fn gen_dataset_shaped(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    channels: usize,
    size: usize,
) -> Result<SyntheticDataset> {
    let templates = gen_templates(seed, n_classes, channels, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let shape = [channels, size, size];
    let (images, labels) = jittered(&templates, n_per_class, &mut rng, &shape);
    let flat: Vec<f64> = templates.concat();
    let mut ts = vec![n_classes];
    ts.extend_from_slice(&shape);
    Ok(SyntheticDataset {
        n_classes,
        images,
        labels,
        templates: Tensor::from_f64_slice(&ts, &flat)?,
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fresh jittered samples of the same templates.
    pub fn heldout(&self, per_class: usize) -> SyntheticDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let shape = &self.templates.shape()[1..];
        let per = crate::tensor::numel_of(shape);
        let templates: Vec<Vec<f64>> = self
            .templates
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let (images, labels) = jittered(&templates, per_class, &mut rng, shape);
        SyntheticDataset {
            images,
            labels,
            ..self.clone()
        }
    }

    /// `[idx.len(), C, S, S]` images and labels at `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.images.numel() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut s = self.images.shape().to_vec();
        s[0] = idx.len();
        (Tensor::new(s, data).expect("sizes agree"), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn min_template_distance(&self) -> f64 {
        let per = self.templates.numel() / self.n_classes;
        let t: Vec<Vec<f64>> = self
            .templates
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                best = best.min(l2(&t[i], &t[j]));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub step_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    /// Held-out loss before any update.
    pub initial_eval_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Mean per-pixel RMS distance of generated samples to their template.
    pub fidelity: f64,
    pub per_class_fidelity: Vec<f64>,
    pub params_total: usize,
}

impl ExperimentReport {
    pub fn final_eval_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_eval_loss, |e| e.eval_loss)
    }
}

/// Held-out denoising loss with noise and timesteps drawn from a fixed
/// stream, so every model is scored on identical draws.
pub fn eval_loss(
    model: &Model<f32>,
    heldout: &SyntheticDataset,
    schedule: &NoiseSchedule,
    repeats: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e7a1);
    let idx: Vec<usize> = (0..heldout.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..repeats {
        for chunk in idx.chunks(batch_size) {
            let (x0, labels) = heldout.batch(chunk);
            let b = noise_batch(&x0, &labels, schedule, 0.0, 0, &mut rng)?;
            let pred = model.predict(&b.x_t, &b.labels, &b.timesteps)?;
            total += mse(&pred, &b.eps)? * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

/// Generates `per_class` samples per class and returns the per-class RMS
/// distance to the template.
/// Guided DDIM samples for `labels`, deterministic in `seed`.
pub fn generate_samples(
    model: &Model<f32>,
    cfg: &RunConfig,
    labels: &[usize],
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    let m = &cfg.model;
    if let Some(&bad) = labels.iter().find(|&&l| l >= m.n_classes) {
        return Err(Error::Range(format!("class {bad} outside 0..{}", m.n_classes)));
    }
    if labels.is_empty() {
        return Err(Error::config("count", "need at least one sample"));
    }
    let schedule = make_schedule(m.timesteps, cfg.train.beta_start, cfg.train.beta_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let g = GuidanceSpec {
        scale: guidance,
        null_class: m.n_classes,
        clip_x0: Some(1.0),
    };
    ddim_sample(model, labels, &[m.channels, m.image_size, m.image_size], &schedule, steps, g, &mut rng)
}

pub fn sample_fidelity(
    model: &Model<f32>,
    data: &SyntheticDataset,
    schedule: &NoiseSchedule,
    per_class: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = data.n_classes;
    let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let g = GuidanceSpec {
        scale: guidance,
        null_class: k,
        clip_x0: Some(1.0),
    };
    let samples = ddim_sample(model, &labels, &data.templates.shape()[1..], schedule, steps, g, &mut rng)?;
    let per = data.templates.numel() / k;
    let mut sums = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        let s = &samples.data()[i * per..(i + 1) * per];
        let t = &data.templates.data()[l * per..(l + 1) * per];
        let d: f64 = s.iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / per as f64;
        sums[l] += d.sqrt();
    }
    Ok(sums.into_iter().map(|s| s / per_class as f64).collect())
}

/// Trains one model and evaluates it.
/// Cosine decay from `base` to a tenth of it over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

pub fn run_train(cfg: &RunConfig, suite: &str, variant: &str) -> Result<(ExperimentReport, Model<f32>)> {
    cfg.validate()?;
    let t = &cfg.train;
    let data = gen_dataset_shaped(
        t.data_seed,
        cfg.model.n_classes,
        t.n_per_class,
        cfg.model.channels,
        cfg.model.image_size,
    )?;
    let heldout = data.heldout(t.heldout_per_class);
    let schedule = make_schedule(cfg.model.timesteps, t.beta_start, t.beta_end)?;
    let mut model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::default());

    // separate streams so data order does not depend on what the model draws
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(10);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(11);

    let initial = eval_loss(&model, &heldout, &schedule, t.eval_repeats, t.batch_size)?;
    let mut epochs = Vec::with_capacity(t.epochs);
    let null = cfg.model.n_classes;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = t.epochs * data.len().div_ceil(t.batch_size);
    let base_lr = opt.config.lr;
    let mut global_step = 0usize;
    for epoch in 0..t.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        let start = Instant::now();
        for (si, chunk) in order.chunks(t.batch_size).enumerate() {
            let (x0, labels) = data.batch(chunk);
            let batch = noise_batch(&x0, &labels, &schedule, t.p_null, null, &mut noise_rng)?;
            let mut tape = Tape::new();
            let loss = loss_on_tape(&model.arch, &mut tape, &model.params, &batch)?;
            let lv = tape.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training diverged: loss {lv} at epoch {epoch}, step {si}")));
            }
            let grads = tape.backward(loss)?;
            opt.config.lr = cosine_lr(base_lr, global_step, total_steps);
            global_step += 1;
            opt.step(&mut model.params, &grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {si}: {e}")))?;
            loss_sum += lv;
            steps += 1;
        }
        let step_ms = start.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64;
        let eval = eval_loss(&model, &heldout, &schedule, t.eval_repeats, t.batch_size)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps.max(1) as f64,
            eval_loss: eval,
            step_ms,
        });
    }
    let per_class = if t.fidelity_per_class > 0 {
        sample_fidelity(&model, &data, &schedule, t.fidelity_per_class, t.sample_steps, t.guidance, cfg.seed)?
    } else {
        Vec::new()
    };
    let fidelity = if per_class.is_empty() {
        f64::NAN
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    let hash = cfg.hash();
    let report = ExperimentReport {
        run_id: format!("{suite}-{variant}-s{}-{}", cfg.seed, &hash[..8]),
        suite: suite.into(),
        variant: variant.into(),
        seed: cfg.seed,
        config_hash: hash,
        config: cfg.serialize(),
        initial_eval_loss: initial,
        epochs,
        fidelity,
        per_class_fidelity: per_class,
        params_total: count_parameters(&model).total,
    };
    Ok((report, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    ModuleSets,
    ConditionSources,
    ControlMethods,
    CanVsAks,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::ModuleSets, Suite::ConditionSources, Suite::ControlMethods, Suite::CanVsAks];

    pub fn name(self) -> &'static str {
        match self {
            Suite::ModuleSets => "module-sets",
            Suite::ConditionSources => "condition-sources",
            Suite::ControlMethods => "control-methods",
            Suite::CanVsAks => "can-vs-aks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::config(
                "suite",
                format!("unknown suite `{s}` (expected module-sets, condition-sources, control-methods or can-vs-aks)"),
            )
        })
    }
}

fn with_can(base: &ModelConfig, set: &[LayerKind]) -> ModelConfig {
    let mut m = base.static_counterpart();
    m.cond_aware_set = set.iter().copied().collect();
    if !set.is_empty() {
        m.control_method.insert(ControlMethod::Can);
    }
    m
}

/// Largest `K ≤ base.aks_kernels` whose kernel banks cost no more
/// parameters than CAN generators on the same layers.
pub fn matched_aks_kernels(can: &ModelConfig) -> Result<usize> {
    let can_params = count_parameters(&build_model::<f32>(can, 0)?).generators;
    let mut k = can.aks_kernels;
    loop {
        let mut aks = can.clone();
        aks.control_method.remove(&ControlMethod::Can);
        aks.control_method.insert(ControlMethod::Aks);
        aks.aks_kernels = k;
        if count_parameters(&build_model::<f32>(&aks, 0)?).control
            - count_parameters(&build_model::<f32>(&aks.static_counterpart(), 0)?).control
            <= can_params
            || k == 1
        {
            return Ok(k);
        }
        k -= 1;
    }
}

/// Variant name and model config for each row of a suite.
pub fn suite_variants(suite: Suite, base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
    use LayerKind::*;
    let full = [DwConv, PatchEmbed, OutProj];
    Ok(match suite {
        Suite::ModuleSets => vec![
            ("baseline".into(), with_can(base, &[])),
            ("dw".into(), with_can(base, &[DwConv])),
            ("dw+patch".into(), with_can(base, &[DwConv, PatchEmbed])),
            ("dw+patch+outproj".into(), with_can(base, &full)),
            ("dw+patch+outproj+head".into(), with_can(base, &[DwConv, PatchEmbed, OutProj, Head])),
        ],
        Suite::ConditionSources => [
            ("timestep-only", ConditionSources::TIMESTEP_ONLY),
            ("class-only", ConditionSources::CLASS_ONLY),
            ("all", ConditionSources::ALL),
        ]
        .into_iter()
        .map(|(name, src)| {
            let mut m = with_can(base, &full);
            m.can_sources = src;
            (name.to_string(), m)
        })
        .collect(),
        Suite::ControlMethods => {
            let mut plain = base.static_counterpart();
            plain.control_method.clear();
            let mk = |methods: &[ControlMethod], set: &[LayerKind]| {
                let mut m = plain.clone();
                m.control_method = methods.iter().copied().collect();
                m.cond_aware_set = set.iter().copied().collect();
                m
            };
            use ControlMethod::*;
            vec![
                ("adanorm".into(), mk(&[AdaNorm], &[])),
                ("cond-tokens".into(), mk(&[CondTokens], &[])),
                ("can".into(), mk(&[Can], &full)),
                ("can+adanorm".into(), mk(&[Can, AdaNorm], &full)),
                ("can+cond-tokens".into(), mk(&[Can, CondTokens], &full)),
            ]
        }
        Suite::CanVsAks => {
            let convs: Vec<LayerKind> = base
                .cond_aware_set
                .iter()
                .copied()
                .filter(|k| k.is_conv())
                .collect();
            let convs = if convs.is_empty() { vec![DwConv, PatchEmbed] } else { convs };
            let can = with_can(base, &convs);
            let mut aks = can.clone();
            aks.control_method.remove(&ControlMethod::Can);
            aks.control_method.insert(ControlMethod::Aks);
            aks.aks_kernels = matched_aks_kernels(&can)?;
            vec![
                ("baseline".into(), with_can(base, &[])),
                ("can".into(), can),
                ("aks".into(), aks),
            ]
        }
    })
}

#[derive(Debug)]
pub struct SuiteRow {
    pub variant: String,
    pub seed: u64,
    pub result: std::result::Result<ExperimentReport, String>,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub suite: Suite,
    pub rows: Vec<SuiteRow>,
}

/// Worker threads for suite rows: `CANF_THREADS` if set, else available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CANF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every variant of `suite` for every seed. Rows that fail carry their
/// error; the others still complete.
pub fn run_ablation(suite: Suite, base: &RunConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let variants = suite_variants(suite, &base.model)?;
    let mut jobs = Vec::new();
    for (name, model) in &variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model = model.clone();
            cfg.seed = seed;
            jobs.push((name.clone(), cfg));
        }
    }
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<SuiteRow>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let threads = worker_threads().min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some((name, cfg)) = jobs.get(i) else { break };
                let result = run_train(cfg, suite.name(), name)
                    .map(|(r, _)| r)
                    .map_err(|e| e.to_string());
                results.lock().expect("result table")[i] = Some(SuiteRow {
                    variant: name.clone(),
                    seed: cfg.seed,
                    result,
                });
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("result table")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();
    Ok(SuiteResult { suite, rows })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_eval_loss: f64,
    pub median_fidelity: f64,
    pub runs: usize,
    pub failures: usize,
}

impl SuiteResult {
    /// Variants in first-seen order with medians over successful seeds.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let rows: Vec<&SuiteRow> = self.rows.iter().filter(|r| r.variant == name).collect();
                let ok: Vec<&ExperimentReport> = rows.iter().filter_map(|r| r.result.as_ref().ok()).collect();
                let mut losses: Vec<f64> = ok.iter().map(|r| r.final_eval_loss()).collect();
                let mut fids: Vec<f64> = ok.iter().map(|r| r.fidelity).collect();
                VariantSummary {
                    variant: name.to_string(),
                    median_eval_loss: median(&mut losses),
                    median_fidelity: median(&mut fids),
                    runs: rows.len(),
                    failures: rows.len() - ok.len(),
                }
            })
            .collect()
    }

    pub fn median_loss(&self, variant: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.variant == variant && s.failures < s.runs)
            .map(|s| s.median_eval_loss)
    }

    pub fn reports(&self) -> impl Iterator<Item = &ExperimentReport> {
        self.rows.iter().filter_map(|r| r.result.as_ref().ok())
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "suite {}\n{:<24} {:>14} {:>12} {:>6}\n",
            self.suite.name(),
            "variant",
            "eval_loss",
            "fidelity",
            "fails"
        );
        for v in self.summary() {
            s.push_str(&format!(
                "{:<24} {:>14.6} {:>12.4} {:>6}\n",
                v.variant, v.median_eval_loss, v.median_fidelity, v.failures
            ));
        }
        for r in &self.rows {
            if let Err(e) = &r.result {
                s.push_str(&format!("error {} seed {}: {e}\n", r.variant, r.seed));
            }
        }
        s
    }
}

/// One line-delimited record per (run, epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub run_id: String,
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Present on the last epoch only.
    pub fidelity: Option<f64>,
    pub step_ms: f64,
    pub config_hash: String,
}

pub fn report_records(report: &ExperimentReport) -> Vec<ReportRecord> {
    let mut out = vec![ReportRecord {
        run_id: report.run_id.clone(),
        suite: report.suite.clone(),
        variant: report.variant.clone(),
        seed: report.seed,
        epoch: 0,
        train_loss: f64::NAN,
        eval_loss: report.initial_eval_loss,
        fidelity: None,
        step_ms: 0.0,
        config_hash: report.config_hash.clone(),
    }];
    let last = report.epochs.len();
    for e in &report.epochs {
        out.push(ReportRecord {
            epoch: e.epoch,
            train_loss: e.train_loss,
            eval_loss: e.eval_loss,
            fidelity: (e.epoch == last).then_some(report.fidelity),
            step_ms: e.step_ms,
            ..out[0].clone()
        });
    }
    if last == 0 {
        out[0].fidelity = Some(report.fidelity);
    }
    out
}

const CSV_HEADER: &str = "run_id,suite,variant,seed,epoch,train_loss,eval_loss,fidelity,step_ms,config_hash";

fn csv_row(r: &ReportRecord) -> String {
    let f = |v: f64| if v.is_finite() { format!("{v:?}") } else { String::new() };
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.suite,
        r.variant,
        r.seed,
        r.epoch,
        f(r.train_loss),
        f(r.eval_loss),
        r.fidelity.map_or(String::new(), f),
        format!("{:.3}", r.step_ms),
        r.config_hash
    )
}

/// Writes `<stem>.csv` and `<stem>.jsonl` into `dir`.
pub fn write_reports<'a>(
    dir: &Path,
    stem: &str,
    reports: impl IntoIterator<Item = &'a ExperimentReport>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.jsonl")))?);
    writeln!(csv, "{CSV_HEADER}")?;
    for report in reports {
        for rec in report_records(report) {
            writeln!(csv, "{}", csv_row(&rec))?;
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(jsonl, "{line}")?;
        }
    }
    csv.flush()?;
    jsonl.flush()?;
    Ok(())
}

/// One layer shape for the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub depthwise: bool,
}

impl BenchShape {
    pub fn label(&self) -> String {
        format!(
            "C{}-{}x{}-k{}{}",
            self.channels,
            self.size,
            self.size,
            self.kernel,
            if self.depthwise { "-dw" } else { "" }
        )
    }

    fn groups(&self) -> usize {
        if self.depthwise {
            self.channels
        } else {
            1
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.channels, self.channels / self.groups(), self.kernel, self.kernel]
    }
}

pub fn default_bench_shapes() -> Vec<BenchShape> {
    vec![
        BenchShape {
            channels: 64,
            size: 8,
            kernel: 3,
            depthwise: true,
        },
        BenchShape {
            channels: 64,
            size: 16,
            kernel: 3,
            depthwise: true,
        },
        BenchShape {
            channels: 64,
            size: 8,
            kernel: 1,
            depthwise: false,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: String,
    pub batch: usize,
    pub per_sample_ms: f64,
    pub fused_ms: f64,
    pub static_ms: f64,
    /// Median over rounds of `per_sample / fused`.
    pub speedup: f64,
    /// Median over rounds of `(fused − static) / static · 100`.
    pub overhead_pct: f64,
    pub max_abs_diff: f64,
}

pub const BENCH_COND_DIM: usize = 64;
pub const BENCH_WARMUP: usize = 2;

struct BenchCase {
    x: Tensor<f32>,
    w: Tensor<f32>,
    map: Tensor<f32>,
    c: Tensor<f32>,
    spec: Conv2dSpec,
    shape: BenchShape,
}

impl BenchCase {
    fn new(shape: BenchShape, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ws = shape.weight_shape();
        let p: usize = ws.iter().product();
        BenchCase {
            x: Tensor::randn(&[batch, shape.channels, shape.size, shape.size], 1.0, &mut rng),
            w: Tensor::randn(&ws, 0.2, &mut rng),
            map: Tensor::randn(&[p, BENCH_COND_DIM], 0.02, &mut rng),
            c: Tensor::randn(&[batch, BENCH_COND_DIM], 1.0, &mut rng),
            spec: Conv2dSpec::new(1, shape.kernel / 2, shape.groups()),
            shape,
        }
    }

    /// Generates and applies one kernel at a time.
    fn per_sample(&self) -> Result<Tensor<f32>> {
        let s = self.x.shape();
        let (b, per) = (s[0], s[1] * s[2] * s[3]);
        let ws = self.shape.weight_shape();
        let p = self.w.numel();
        let mut wc = vec![0f32; p];
        let mut out = Vec::new();
        let mut out_shape = Vec::new();
        for i in 0..b {
            gemm_slices(&self.c.data()[i * BENCH_COND_DIM..][..BENCH_COND_DIM], 1, BENCH_COND_DIM, self.map.data(), p, true, &mut wc);
            for (v, &w) in wc.iter_mut().zip(self.w.data()) {
                *v += w;
            }
            let y = conv2d_slices(&self.x.data()[i * per..][..per], &[1, s[1], s[2], s[3]], &wc, &ws, self.spec)?;
            if out.is_empty() {
                out.reserve(b * y.numel());
                out_shape = y.shape().to_vec();
                out_shape[0] = b;
            }
            out.extend_from_slice(y.data());
        }
        Tensor::new(out_shape, out)
    }

    /// One generator matmul, one grouped convolution.
    fn fused(&self) -> Result<Tensor<f32>> {
        let b = self.x.shape()[0];
        let [co, ci, kh, kw] = self.shape.weight_shape();
        let p = self.w.numel();
        let mut wc = vec![0f32; b * p];
        gemm_slices(self.c.data(), b, BENCH_COND_DIM, self.map.data(), p, true, &mut wc);
        for (i, v) in wc.iter_mut().enumerate() {
            *v += self.w.data()[i % p];
        }
        let k = Tensor::new(vec![b * co, ci, kh, kw], wc)?;
        let s = self.x.shape();
        let spec = Conv2dSpec {
            groups: self.spec.groups * b,
            ..self.spec
        };
        let y = conv2d_slices(self.x.data(), &[1, b * s[1], s[2], s[3]], k.data(), k.shape(), spec)?;
        let ys = y.shape().to_vec();
        y.reshape(&[b, co, ys[2], ys[3]])
    }

    fn static_layer(&self) -> Result<Tensor<f32>> {
        conv2d(&self.x, &self.w, self.spec)
    }
}

fn time_once(f: impl FnOnce() -> Result<Tensor<f32>>) -> Result<f64> {
    let t = Instant::now();
    std::hint::black_box(f()?);
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

pub const BENCH_TOLERANCE: f64 = 1e-5;

/// Largest difference between two strategies' outputs, or a correctness
/// error when it exceeds [`BENCH_TOLERANCE`] (or is not finite).
pub fn agreement_gate(label: &str, per_sample: &Tensor<f32>, fused: &Tensor<f32>) -> Result<f64> {
    let diff = per_sample.max_abs_diff(fused)?;
    if !(diff <= BENCH_TOLERANCE) {
        return Err(Error::Correctness(format!(
            "{label}: per-sample and fused outputs differ by {diff:e}"
        )));
    }
    Ok(diff)
}

/// Median wall-clock of the per-sample, fused and static strategies. Fails
/// with a correctness error, reporting nothing, if the two conditional
/// strategies disagree by more than 1e-5.
pub fn run_bench(shapes: &[BenchShape], batch_sizes: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::config("repeats", "need at least 3 timed repeats"));
    }
    let mut cases = Vec::new();
    for (si, &shape) in shapes.iter().enumerate() {
        for &b in batch_sizes {
            if b == 0 {
                return Err(Error::config("batch", "batch sizes must be ≥ 1"));
            }
            let case = BenchCase::new(shape, b, (si * 1000 + b) as u64);
            let diff = agreement_gate(&format!("{} B={b}", shape.label()), &case.per_sample()?, &case.fused()?)?;
            cases.push((case, diff));
        }
    }
    let mut rows = Vec::with_capacity(cases.len());
    for (case, diff) in &cases {
        for _ in 0..BENCH_WARMUP {
            std::hint::black_box((case.per_sample()?, case.fused()?, case.static_layer()?));
        }
        // strategies alternate within each round so drift hits all three
        let (mut ps, mut fu, mut st, mut ratio, mut over) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..repeats {
            let (p, f, s) = (
                time_once(|| case.per_sample())?,
                time_once(|| case.fused())?,
                time_once(|| case.static_layer())?,
            );
            ps.push(p);
            fu.push(f);
            st.push(s);
            ratio.push(p / f);
            over.push((f - s) / s * 100.0);
        }
        rows.push(BenchRow {
            shape: case.shape.label(),
            batch: case.x.shape()[0],
            per_sample_ms: median(&mut ps),
            fused_ms: median(&mut fu),
            static_ms: median(&mut st),
            speedup: median(&mut ratio),
            overhead_pct: median(&mut over),
            max_abs_diff: *diff,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<16} {:>5} {:>14} {:>10} {:>10} {:>8} {:>10} {:>10}\n",
        "shape", "B", "per_sample_ms", "fused_ms", "static_ms", "speedup", "overhead%", "max_diff"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>5} {:>14.4} {:>10.4} {:>10.4} {:>8.2} {:>10.1} {:>10.1e}\n",
            r.shape, r.batch, r.per_sample_ms, r.fused_ms, r.static_ms, r.speedup, r.overhead_pct, r.max_abs_diff
        ));
    }
    s
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("shape,batch,per_sample_ms,fused_ms,static_ms,speedup,overhead_pct,max_abs_diff\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.shape, r.batch, r.per_sample_ms, r.fused_ms, r.static_ms, r.speedup, r.overhead_pct, r.max_abs_diff
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_separated() {
        let a = gen_dataset(3, 4, 5).unwrap();
        let b = gen_dataset(3, 4, 5).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|&l| l < 4));
        assert!(a.min_template_distance() > 0.5);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(gen_dataset(3, 1, 5).is_err());
    }

    #[test]
    fn suites_have_expected_rows() {
        let base = ModelConfig::default();
        let names = |s| {
            suite_variants(s, &base)
                .unwrap()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            names(Suite::ModuleSets),
            ["baseline", "dw", "dw+patch", "dw+patch+outproj", "dw+patch+outproj+head"]
        );
        assert_eq!(names(Suite::ConditionSources), ["timestep-only", "class-only", "all"]);
        for (_, cfg) in suite_variants(Suite::ControlMethods, &base).unwrap() {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn bench_rejects_few_repeats() {
        assert!(run_bench(&default_bench_shapes(), &[1], 2).is_err());
    }
}
