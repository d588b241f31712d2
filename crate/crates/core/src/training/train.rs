use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::{loss_fcn, loss_gie, loss_scn, Extractor, LossWeights};
use super::optim::{Optimizer, OptimizerConfig};
use crate::entropy_models::QuantMode;
use crate::error::{HscError, Result};
use crate::numerics::{RngState, Tensor, Var};
use crate::params::{Ctx, ParamStore};
use crate::pipeline::{Codec, CodecConfig, Fcn, Generator, Gie, Scn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Inversion encoder warm-up.
    Gie,
    /// Both compression networks, encoder and generator frozen.
    Rd,
    /// Everything except the generator.
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Gie, Stage::Rd, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gie => "gie",
            Stage::Rd => "rd",
            Stage::Joint => "joint",
        }
    }

    /// Parameter prefixes updated in this stage.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            Stage::Gie => &["gie."],
            Stage::Rd => &["scn.", "fcn."],
            Stage::Joint => &["gie.", "scn.", "fcn."],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub gie_steps: usize,
    pub rd_steps: usize,
    pub joint_steps: usize,
    /// Images per step.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Learning rate of the joint stage relative to `optimizer.lr`.
    pub joint_lr_scale: f64,
    /// Fraction of each stage, at its end, over which the learning rate
    /// decays linearly to a tenth.
    pub decay_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            gie_steps: 2000,
            rd_steps: 2000,
            joint_steps: 1000,
            batch: 4,
            optimizer: OptimizerConfig::default(),
            joint_lr_scale: 0.3,
            decay_fraction: 0.5,
            seed: 7,
        }
    }
}

impl TrainSchedule {
    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Gie => self.gie_steps,
            Stage::Rd => self.rd_steps,
            Stage::Joint => self.joint_steps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.gie_steps + self.rd_steps + self.joint_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(HscError::Config("batch must be positive".into()));
        }
        if !(self.joint_lr_scale.is_finite() && self.joint_lr_scale > 0.0) {
            return Err(HscError::Config(format!(
                "joint_lr_scale = {}",
                self.joint_lr_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(HscError::Config(format!(
                "decay_fraction = {}",
                self.decay_fraction
            )));
        }
        Ok(())
    }

    fn lr_at(&self, stage: Stage, step: usize) -> f64 {
        let base = match stage {
            Stage::Joint => self.optimizer.lr * self.joint_lr_scale,
            _ => self.optimizer.lr,
        };
        let n = self.steps(stage) as f64;
        let start = n * (1.0 - self.decay_fraction);
        if self.decay_fraction == 0.0 || (step as f64) < start {
            return base;
        }
        let progress = (step as f64 - start) / (n - start).max(1.0);
        base * (1.0 - 0.9 * progress.min(1.0))
    }
}

/// Toy training set drawn from the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_size: 512,
            seed: 11,
        }
    }
}

/// Everything a training run needs, as read from a TOML file with
/// `[codec]`, `[weights]`, `[schedule]` and `[data]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub codec: CodecConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HscError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("training config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.weights.validate()?;
        self.schedule.validate()
    }
}

/// Loss terms of one step (batch means). Terms a stage does not use are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub mlpips: f64,
    pub fsc: f64,
    pub rate_s: f64,
    pub dist_s: f64,
    pub rate_f: f64,
    pub dist_f: f64,
    pub total: f64,
}

impl LossTerms {
    fn accumulate(&mut self, o: &LossTerms, w: f64) {
        self.mse += w * o.mse;
        self.mlpips += w * o.mlpips;
        self.fsc += w * o.fsc;
        self.rate_s += w * o.rate_s;
        self.dist_s += w * o.dist_s;
        self.rate_f += w * o.rate_f;
        self.dist_f += w * o.dist_f;
        self.total += w * o.total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// Global step index across all stages.
    pub step: usize,
    pub stage: Stage,
    pub terms: LossTerms,
}

pub const LOG_HEADER: &str = "step,stage,mse,mlpips,fsc,rate_s,dist_s,rate_f,dist_f,total";

pub fn write_loss_log<W: Write>(log: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER.split(','))?;
    for r in log {
        let t = &r.terms;
        let mut row = vec![r.step.to_string(), r.stage.name().to_string()];
        row.extend(
            [
                t.mse, t.mlpips, t.fsc, t.rate_s, t.dist_s, t.rate_f, t.dist_f, t.total,
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Means of the first and last 10% of a stage's logged totals.
pub fn stage_windows(log: &[LossRecord], stage: Stage) -> Option<(f64, f64)> {
    let totals: Vec<f64> = log
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.terms.total)
        .collect();
    if totals.is_empty() {
        return None;
    }
    let w = (totals.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&totals[..w]), mean(&totals[totals.len() - w..])))
}

pub struct TrainOutcome {
    pub codec: Codec,
    pub log: Vec<LossRecord>,
}

/// The per-image graphs of each stage.
struct Objective {
    config: CodecConfig,
    weights: LossWeights,
    extractor: Extractor,
}

fn scalar(ctx: &Ctx, v: Var) -> f64 {
    ctx.value(v).item()
}

impl Objective {
    fn new(config: &CodecConfig, weights: &LossWeights) -> Self {
        Objective {
            config: config.clone(),
            weights: *weights,
            extractor: Extractor::default(),
        }
    }

    fn split(&self, ctx: &mut Ctx, s: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let cut = c.t * c.d_s;
        Ok((ctx.g.slice(s, 0, cut)?, ctx.g.slice(s, cut, c.code_len())?))
    }

    /// Inversion loss with `x_hat = G_l(s_l, f)` straight from the encoder.
    fn gie(&self, ctx: &mut Ctx, x: &Tensor) -> Result<(LossTerms, Var)> {
        let gen = Generator::new(&self.config);
        let xv = ctx.constant(x.clone());
        let (s, f) = Gie::new(&self.config).forward(ctx, xv)?;
        let (s_s, s_l) = self.split(ctx, s)?;
        let x_hat = gen.g_l(ctx, s_l, f)?;
        let t = loss_gie(ctx, &self.weights, x_hat, xv, f, s_s, &gen, &self.extractor)?;
        let terms = LossTerms {
            mse: scalar(ctx, t.mse),
            mlpips: scalar(ctx, t.mlpips),
            fsc: scalar(ctx, t.fsc),
            total: scalar(ctx, t.total),
            ..Default::default()
        };
        Ok((terms, t.total))
    }

    /// Both rate-distortion losses for given `(S, f)`; also returns the
    /// decoded codes and feature.
    fn rd(
        &self,
        ctx: &mut Ctx,
        s: Var,
        f: Var,
        rng: &mut RngState,
    ) -> Result<(LossTerms, Var, Var, Var)> {
        let scn = Scn::new(&self.config).forward(ctx, s, QuantMode::Noise, rng)?;
        let (dist_s, l_scn) = loss_scn(ctx, s, scn.s_hat, scn.rate, self.weights.lambda3)?;
        let fcn = Fcn::new(&self.config).forward(ctx, f, scn.s_hat, QuantMode::Noise, rng)?;
        let (dist_f, l_fcn) = loss_fcn(ctx, f, fcn.f_hat, fcn.rate, self.weights.lambda4)?;
        let total = ctx.g.add(l_scn, l_fcn)?;
        let terms = LossTerms {
            rate_s: scalar(ctx, scn.rate),
            dist_s: scalar(ctx, dist_s),
            rate_f: scalar(ctx, fcn.rate),
            dist_f: scalar(ctx, dist_f),
            total: scalar(ctx, total),
            ..Default::default()
        };
        Ok((terms, total, scn.s_hat, fcn.f_hat))
    }

    /// `L_SCN + L_FCN + lambda5 * L_GIE` with the inversion loss measured on
    /// the reconstruction from the decoded latents.
    fn joint(&self, ctx: &mut Ctx, x: &Tensor, rng: &mut RngState) -> Result<(LossTerms, Var)> {
        let gen = Generator::new(&self.config);
        let xv = ctx.constant(x.clone());
        let (s, f) = Gie::new(&self.config).forward(ctx, xv)?;
        let (mut terms, rd_total, s_hat, f_hat) = self.rd(ctx, s, f, rng)?;
        let (s_s, _) = self.split(ctx, s)?;
        let (_, s_hat_l) = self.split(ctx, s_hat)?;
        let x_hat = gen.g_l(ctx, s_hat_l, f_hat)?;
        let g = loss_gie(ctx, &self.weights, x_hat, xv, f, s_s, &gen, &self.extractor)?;
        let total = ctx
            .g
            .weighted_sum(&[(1.0, rd_total), (self.weights.lambda5, g.total)])?;
        terms.mse = scalar(ctx, g.mse);
        terms.mlpips = scalar(ctx, g.mlpips);
        terms.fsc = scalar(ctx, g.fsc);
        terms.total = scalar(ctx, total);
        Ok((terms, total))
    }
}

fn add_grads(
    acc: &mut BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    w: f64,
) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.add_scaled(&g, w)?,
            None => {
                acc.insert(name, g.scale(w));
            }
        }
    }
    Ok(())
}

/// Runs the three stages in order on `images`. Batches and quantization
/// noise are drawn from `schedule.seed`, so a run is reproducible.
pub fn train(
    codec: &Codec,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    images: &[Tensor],
) -> Result<TrainOutcome> {
    schedule.validate()?;
    weights.validate()?;
    if images.is_empty() && schedule.total_steps() > 0 {
        return Err(HscError::Config("training set is empty".into()));
    }
    let config = codec.config().clone();
    let mut store = codec.params().clone();
    let mut log = Vec::with_capacity(schedule.total_steps());
    let rng = RngState::derive(schedule.seed, 0x7A11);
    let mut global = 0;
    for stage in Stage::ALL {
        let steps = schedule.steps(stage);
        if steps == 0 {
            continue;
        }
        let mut stage_rng = rng.fork(stage as u64);
        // the encoder is frozen during the RD stage, so its outputs are fixed
        let cached: Vec<(Tensor, Tensor)> = if stage == Stage::Rd {
            let gie = Gie::new(&config);
            images
                .iter()
                .map(|x| gie.forward_values(&store, x))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut opt = Optimizer::new(schedule.optimizer)?;
        let obj = Objective::new(&config, weights);
        let density = Scn::new(&config);
        for step in 0..steps {
            opt.set_lr(schedule.lr_at(stage, step));
            let mut mean = LossTerms::default();
            let mut grads = BTreeMap::new();
            let w = 1.0 / schedule.batch as f64;
            for _ in 0..schedule.batch {
                let i = stage_rng.below(images.len());
                let mut ctx = Ctx::new(&store, stage.trainable());
                let (terms, loss) = match stage {
                    Stage::Gie => obj.gie(&mut ctx, &images[i])?,
                    Stage::Rd => {
                        let s = ctx.constant(cached[i].0.clone());
                        let f = ctx.constant(cached[i].1.clone());
                        let (terms, total, _, _) = obj.rd(&mut ctx, s, f, &mut stage_rng)?;
                        (terms, total)
                    }
                    Stage::Joint => obj.joint(&mut ctx, &images[i], &mut stage_rng)?,
                };
                if !terms.total.is_finite() {
                    return Err(HscError::Divergence {
                        stage: stage.name(),
                        step,
                        loss: terms.total,
                    });
                }
                mean.accumulate(&terms, w);
                add_grads(&mut grads, ctx.gradients(loss)?.1, w)?;
            }
            opt.step(&mut store, &grads)
                .map_err(|_| HscError::Divergence {
                    stage: stage.name(),
                    step,
                    loss: mean.total,
                })?;
            density.density().project(&mut store);
            log.push(LossRecord {
                step: global,
                stage,
                terms: mean,
            });
            global += 1;
        }
    }
    Ok(TrainOutcome {
        codec: Codec::from_params(config, store)?,
        log,
    })
}

/// Mean joint objective over `images`, with quantization noise drawn from
/// `seed`.
pub fn evaluate_joint(
    codec: &Codec,
    weights: &LossWeights,
    images: &[Tensor],
    seed: u64,
) -> Result<LossTerms> {
    let obj = Objective::new(codec.config(), weights);
    let mut rng = RngState::derive(seed, 0xE7A1);
    let mut mean = LossTerms::default();
    for x in images {
        let mut ctx = Ctx::frozen(codec.params());
        let (terms, _) = obj.joint(&mut ctx, x, &mut rng)?;
        mean.accumulate(&terms, 1.0 / images.len() as f64);
    }
    Ok(mean)
}

/// Gradients of one stage's per-image objective, for verification.
pub fn stage_gradients(
    codec: &Codec,
    store: &ParamStore,
    weights: &LossWeights,
    stage: Stage,
    x: &Tensor,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let obj = Objective::new(codec.config(), weights);
    let mut rng = RngState::derive(seed, 0x6C);
    let mut ctx = Ctx::new(store, stage.trainable());
    let loss = match stage {
        Stage::Gie => obj.gie(&mut ctx, x)?.1,
        Stage::Rd => {
            let (s, f) = Gie::new(codec.config()).forward_values(store, x)?;
            let s = ctx.constant(s);
            let f = ctx.constant(f);
            obj.rd(&mut ctx, s, f, &mut rng)?.1
        }
        Stage::Joint => obj.joint(&mut ctx, x, &mut rng)?.1,
    };
    ctx.gradients(loss)
}

/// Parameters of the feature stream's semantic prior and slice context
/// networks.
pub const CONTEXT_PREFIXES: [&str; 2] = ["fcn.prior", "fcn.sce"];

/// Fits only the feature context model, minimizing the noisy-quantization
/// rate of fixed transformed features. `inputs` holds `(s_hat, y)` pairs;
/// the schedule's RD settings (steps, batch, optimizer, seed) are used.
pub fn fit_context(
    codec: &Codec,
    schedule: &TrainSchedule,
    inputs: &[(Tensor, Tensor)],
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if inputs.is_empty() && schedule.rd_steps > 0 {
        return Err(HscError::Config("no inputs for the context model".into()));
    }
    let fcn = Fcn::new(codec.config());
    let mut store = codec.params().clone();
    let mut rng = RngState::derive(schedule.seed, 0xC07E);
    let mut opt = Optimizer::new(schedule.optimizer)?;
    let mut log = Vec::with_capacity(schedule.rd_steps);
    for step in 0..schedule.rd_steps {
        opt.set_lr(schedule.lr_at(Stage::Rd, step));
        let mut mean = 0.0;
        let mut grads = BTreeMap::new();
        let w = 1.0 / schedule.batch as f64;
        for _ in 0..schedule.batch {
            let (s_hat, y) = &inputs[rng.below(inputs.len())];
            let mut ctx = Ctx::new(&store, &CONTEXT_PREFIXES);
            let s = ctx.constant(s_hat.clone());
            let yv = ctx.constant(y.clone());
            let (_, rate, _) = fcn.rate(&mut ctx, yv, s, QuantMode::Noise, &mut rng)?;
            let r = scalar(&ctx, rate);
            if !r.is_finite() {
                return Err(HscError::Divergence {
                    stage: "context",
                    step,
                    loss: r,
                });
            }
            mean += w * r;
            add_grads(&mut grads, ctx.gradients(rate)?.1, w)?;
        }
        opt.step(&mut store, &grads)
            .map_err(|_| HscError::Divergence {
                stage: "context",
                step,
                loss: mean,
            })?;
        log.push(LossRecord {
            step,
            stage: Stage::Rd,
            terms: LossTerms {
                rate_f: mean,
                total: mean,
                ..Default::default()
            },
        });
    }
    Ok(TrainOutcome {
        codec: Codec::from_params(codec.config().clone(), store)?,
        log,
    })
}
