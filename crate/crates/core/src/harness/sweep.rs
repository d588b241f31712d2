//! Rate-distortion sweeps over the feature multiplier, with CSV and SVG
//! output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::bd::{RDCurve, RDPoint};
use super::container::bpp;
use super::metrics::{distortion_suite, TOY_PERCEPTUAL};
use crate::error::{HscError, Result};
use crate::numerics::Tensor;
use crate::pipeline::{sample_dataset, Codec};
use crate::training::losses::{mse, Extractor};
use crate::training::{train, LossWeights, TrainConfig, TrainSchedule};

/// Averages over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub bpp: f64,
    /// Mean squared error of the decoded feature against the encoder's.
    pub feature_mse: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Encodes and decodes every image. For semantics-only streams the feature
/// error is measured on `G_s(ŝ_s)`.
pub fn evaluate_codec(
    codec: &Codec,
    images: &[Tensor],
    semantics_only: bool,
) -> Result<EvalSummary> {
    if images.is_empty() {
        return Err(HscError::Config("empty evaluation set".into()));
    }
    let n = images.len() as f64;
    let (mut rate, mut fmse) = (0.0, 0.0);
    let mut decoded = Vec::with_capacity(images.len());
    for x in images {
        let (s, f) = codec.analyze(x)?;
        let enc = codec.encode_latents(&s, &f, semantics_only)?;
        let bytes = enc.stream.to_bytes();
        let x_hat = codec.decode_bytes(&bytes)?;
        let f_hat = match enc.f_hat {
            Some(f_hat) => f_hat,
            None => {
                let s_s = enc.s_hat.split(codec.config().t)?.s_s;
                codec.generator().g_s_values(codec.params(), &s_s)?
            }
        };
        rate += bpp(bytes.len(), x.shape()[1], x.shape()[2])? / n;
        fmse += mse(&f_hat, &f)? / n;
        decoded.push(x_hat);
    }
    Ok(EvalSummary {
        bpp: rate,
        feature_mse: fmse,
        metrics: distortion_suite(images, &decoded, &Extractor::default())?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub summary: EvalSummary,
}

/// One RD-stage training run per `lambda4`, each starting from `base`
/// (typically an encoder-trained model), evaluated on `eval_images`.
pub fn rd_sweep(
    base: &Codec,
    weights: &LossWeights,
    schedule: &TrainSchedule,
    lambdas: &[f64],
    train_images: &[Tensor],
    eval_images: &[Tensor],
) -> Result<Vec<SweepRow>> {
    let rd_only = TrainSchedule {
        gie_steps: 0,
        joint_steps: 0,
        ..schedule.clone()
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let wrap = |e| HscError::Sweep {
                lambda,
                source: Box::new(e),
            };
            let w = LossWeights {
                lambda4: lambda,
                ..*weights
            };
            let trained = train(base, &rd_only, &w, train_images).map_err(wrap)?;
            let summary = evaluate_codec(&trained.codec, eval_images, false).map_err(wrap)?;
            Ok(SweepRow { lambda, summary })
        })
        .collect()
}

pub fn sweep_curve(rows: &[SweepRow]) -> Result<RDCurve> {
    RDCurve::new(
        rows.iter()
            .map(|r| {
                let mut metrics = r.summary.metrics.clone();
                metrics.insert("feature_mse".into(), r.summary.feature_mse);
                RDPoint {
                    bpp: r.summary.bpp,
                    metrics,
                }
            })
            .collect(),
    )
}

/// Columns `lambda, bpp, feature_mse` and then every metric by name.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let names: Vec<String> = rows
        .first()
        .map(|r| r.summary.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lambda".to_string(), "bpp".into(), "feature_mse".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.lambda.to_string(),
            r.summary.bpp.to_string(),
            r.summary.feature_mse.to_string(),
        ];
        for n in &names {
            let v = r
                .summary
                .metrics
                .get(n)
                .ok_or_else(|| HscError::Curve(format!("row lacks metric {n}")))?;
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve written by [`write_sweep_csv`] (or any CSV with a `bpp`
/// column); every other column except `lambda` becomes a metric.
pub fn read_curve_csv<R: Read>(input: R) -> Result<RDCurve> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let bpp_col = header
        .iter()
        .position(|h| h == "bpp")
        .ok_or_else(|| HscError::Curve("csv has no bpp column".into()))?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| HscError::Curve(format!("not a number: {:?}", &rec[i])))
        };
        let mut metrics = BTreeMap::new();
        for (i, name) in header.iter().enumerate() {
            if i != bpp_col && name != "lambda" {
                metrics.insert(name.to_string(), num(i)?);
            }
        }
        points.push(RDPoint {
            bpp: num(bpp_col)?,
            metrics,
        });
    }
    RDCurve::new(points)
}

/// Line plot of one metric against bpp.
pub fn plot_svg(curves: &[(&str, &RDCurve)], metric: &str) -> Result<String> {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    let mut pts = Vec::new();
    for (_, c) in curves {
        for p in c.points() {
            pts.push((p.bpp, p.metric(metric)?));
        }
    }
    if pts.is_empty() {
        return Err(HscError::Curve("nothing to plot".into()));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{metric}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#,
            sx(v),
            H - M + 14.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            M - 4.0,
            sy(v) + 4.0
        );
    }
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<String> = c
            .points()
            .iter()
            .map(|p| Ok(format!("{:.1},{:.1}", sx(p.bpp), sy(p.metric(metric)?))))
            .collect::<Result<_>>()?;
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for xy in &path {
            let (x, y) = xy.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#,
            W - M - 80.0,
            M + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Settings of an RD evaluation run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub train: TrainConfig,
    /// Feature multipliers to sweep.
    pub lambdas: Vec<f64>,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Metric used for the BD comparison.
    pub metric: String,
    /// Encoder-trained starting point; trained from `train` when absent.
    pub base_model: Option<PathBuf>,
    /// Reference curve CSV for the BD comparison.
    pub reference: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let base = train.weights.lambda4;
        SweepConfig {
            lambdas: [0.5, 1.0, 2.0, 4.0].iter().map(|f| f * base).collect(),
            train,
            eval_size: 20,
            eval_seed: 99,
            metric: TOY_PERCEPTUAL.into(),
            base_model: None,
            reference: None,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| HscError::Config(e.to_string()))?;
        cfg.train.validate()?;
        if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(HscError::Config(format!(
                "invalid lambda list {:?}",
                cfg.lambdas
            )));
        }
        if cfg.eval_size == 0 {
            return Err(HscError::Config("eval_size must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep config serializes")
    }
}

/// Training and evaluation images of a configuration, drawn from the
/// generator of `codec`.
pub fn toy_images(codec: &Codec, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    Ok(sample_dataset(codec, n, seed)?
        .into_iter()
        .map(|s| s.x)
        .collect())
}
