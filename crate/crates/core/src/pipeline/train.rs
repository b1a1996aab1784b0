use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{rd_loss, RdTerms};
use super::PAD_MULTIPLE;
use crate::autograd::{Graph, Tensor};
use crate::entropy::{quantize_var, QuantizeMode};
use crate::error::{Error, Result};
use crate::metrics_io::random_crop_pair;
use crate::motion::{compensate, estimate_flow, Frame};
use crate::transforms::{motion_codec, residual, stage_prefixes, Model, ResidualMode, TrainingStage};

use super::codec::{FLOW_BLOCK, FLOW_RADIUS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Target distortion weight.
    pub lambda: f64,
    pub stage: TrainingStage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub steps: usize,
    /// Multiplier on `lambda` during residual pre-training.
    pub large_lambda_factor: f64,
}

impl TrainingConfig {
    pub fn new(stage: TrainingStage, lambda: f64) -> Self {
        Self {
            lambda,
            stage,
            learning_rate: match stage {
                TrainingStage::Joint => 1e-5,
                _ => 5e-5,
            },
            batch_size: 8,
            crop: 256,
            seed: 0,
            steps: 1000,
            large_lambda_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.crop == 0 || self.crop % PAD_MULTIPLE != 0 {
            return bad(format!("crop {} must be a positive multiple of {PAD_MULTIPLE}", self.crop));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.large_lambda_factor > 0.0 && self.large_lambda_factor.is_finite()) {
            return bad(format!("large lambda factor must be positive, got {}", self.large_lambda_factor));
        }
        Ok(())
    }

    /// The distortion weight the stage optimizes.
    pub fn stage_lambda(&self) -> f64 {
        match self.stage {
            TrainingStage::ResidualPretrain => self.lambda * self.large_lambda_factor,
            _ => self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: TrainingStage,
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub ms_ssim: f64,
}

impl StepRecord {
    pub fn to_record(&self) -> String {
        format!(
            "stage={} step={} loss={} bpp={} ms_ssim={}",
            self.stage, self.step, self.loss, self.bpp, self.ms_ssim
        )
    }
}

/// Builds the stage's objective on a batch. Stage A scores the motion-compensated
/// prediction; later stages score the residual codec's reconstruction.
#[allow(clippy::too_many_arguments)]
fn objective(
    g: &mut Graph,
    model: &Model,
    stage: TrainingStage,
    x0: Tensor,
    x1: Tensor,
    flow: Tensor,
    quantize: QuantizeMode,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<RdTerms> {
    let (n, _, h, w) = x0.dims4()?;
    let params = &model.params;
    let f = g.constant(flow);
    let y = motion_codec::analysis(g, params, f)?;
    let q = quantize_var(g, y, quantize, rng)?;
    let pf = motion_codec::likelihood(g, params, q)?;
    let rate_f = g.rate_bits(pf);
    let f_hat = motion_codec::synthesis(g, params, q)?;
    let reference = g.constant(x0);
    let warped = g.warp(reference, f_hat)?;
    let xbar = compensate(g, params, warped, reference, f_hat)?;
    let target = g.constant(x1);
    if stage == TrainingStage::Motion {
        return rd_loss(g, target, xbar, rate_f, None, lambda, n * h * w);
    }
    let r = residual::forward(g, params, &model.config, model.config.mode, target, xbar, quantize, rng)?;
    let rate_r = g.add(r.rate_latents, r.rate_hyper)?;
    rd_loss(g, target, r.x_hat, rate_f, Some(rate_r), lambda, n * h * w)
}

fn stack(frames: &[Tensor]) -> Result<Tensor> {
    let shape = frames[0].shape();
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", shape, f.shape())));
        }
        data.extend_from_slice(f.data());
    }
    let mut out = vec![frames.len()];
    out.extend_from_slice(&shape[1..]);
    Tensor::new(&out, data)
}

/// Runs `config.steps` optimizer steps of one stage on `(x0, x1)` pairs,
/// calling `on_step` after each. Parameters outside the stage stay fixed.
pub fn train(
    model: &mut Model,
    config: &TrainingConfig,
    dataset: &[(Frame, Frame)],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    config.stage.check_order(&model.history)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one frame pair".into()));
    }
    for (x0, x1) in dataset {
        if x0.planes().shape() != x1.planes().shape() || x0.channels() != 3 {
            return Err(Error::Shape("training pairs need matching 3-plane frames".into()));
        }
        if x0.height() < config.crop || x0.width() < config.crop {
            return Err(Error::InvalidArgument(format!(
                "crop {} exceeds a {}x{} training frame",
                config.crop,
                x0.width(),
                x0.height()
            )));
        }
    }
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        model.params.set_trainable(name, false);
    }
    for prefix in stage_prefixes(config.stage, model.config.mode) {
        model.params.set_trainable(&format!("{prefix}."), true);
    }

    let lambda = config.stage_lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // flows of uncropped pairs never change, so they are computed once
    let mut flows: Vec<Option<Tensor>> = vec![None; dataset.len()];
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (mut x0s, mut x1s, mut fs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..config.batch_size {
            let i = rng.gen_range(0..dataset.len());
            let (x0, x1) = &dataset[i];
            let whole = x0.height() == config.crop && x0.width() == config.crop;
            let (c0, c1) = if whole {
                (x0.clone(), x1.clone())
            } else {
                random_crop_pair(x0, x1, config.crop, rng.gen())?
            };
            let flow = match &flows[i] {
                Some(f) if whole => f.clone(),
                _ => {
                    let f = estimate_flow(&c1, &c0, FLOW_BLOCK, FLOW_RADIUS)?.to_batch();
                    if whole {
                        flows[i] = Some(f.clone());
                    }
                    f
                }
            };
            x0s.push(c0.to_batch());
            x1s.push(c1.to_batch());
            fs.push(flow);
        }
        let mut g = Graph::new();
        let terms = objective(
            &mut g,
            model,
            config.stage,
            stack(&x0s)?,
            stack(&x1s)?,
            stack(&fs)?,
            QuantizeMode::Train,
            lambda,
            &mut rng,
        )?;
        let record = StepRecord {
            stage: config.stage,
            step,
            loss: g.value(terms.loss).item(),
            bpp: g.value(terms.bpp).item(),
            ms_ssim: g.value(terms.ms_ssim).item(),
        };
        if !record.loss.is_finite() {
            return Err(Error::Diverged(format!("loss {} at step {step}", record.loss)));
        }
        g.backward(terms.loss)?;
        model.params.zero_grad();
        g.write_gradients(&mut model.params);
        model.params.adam_step(config.learning_rate)?;
        on_step(&record);
        records.push(record);
    }
    model.history.push(config.stage);
    model.params.round_to_f32();
    Ok(records)
}

/// Rate-distortion figures of a model on held-out pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdSummary {
    pub loss: f64,
    pub bpp: f64,
    pub ms_ssim: f64,
}

/// Mean full-pipeline objective with rounding quantization and model-estimated
/// rates, each pair padded to a multiple of 32 and scored on its own.
pub fn evaluate_rd(model: &Model, mode: ResidualMode, dataset: &[(Frame, Frame)], lambda: f64) -> Result<RdSummary> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one frame pair".into()));
    }
    let mut model_view = model.clone();
    model_view.config.mode = mode;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = RdSummary { loss: 0.0, bpp: 0.0, ms_ssim: 0.0 };
    for (x0, x1) in dataset {
        let (x0, x1) = (x0.pad_to_multiple(PAD_MULTIPLE), x1.pad_to_multiple(PAD_MULTIPLE));
        let flow = estimate_flow(&x1, &x0, FLOW_BLOCK, FLOW_RADIUS)?.to_batch();
        let mut g = Graph::new();
        let terms = objective(
            &mut g,
            &model_view,
            TrainingStage::Joint,
            x0.to_batch(),
            x1.to_batch(),
            flow,
            QuantizeMode::Infer,
            lambda,
            &mut rng,
        )?;
        sum.loss += g.value(terms.loss).item();
        sum.bpp += g.value(terms.bpp).item();
        sum.ms_ssim += g.value(terms.ms_ssim).item();
    }
    let n = dataset.len() as f64;
    Ok(RdSummary {
        loss: sum.loss / n,
        bpp: sum.bpp / n,
        ms_ssim: sum.ms_ssim / n,
    })
}
