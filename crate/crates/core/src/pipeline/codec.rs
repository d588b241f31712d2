use std::path::Path;

use super::config::CodecConfig;
use super::fcn::{Fcn, SliceDecoder};
use super::generator::{Generator, SynthNoise};
use super::gie::Gie;
use super::scn::Scn;
use super::StyleCodes;
use crate::error::{HscError, Result};
use crate::harness::container::{Header, HscBitstream, FLAG_SEMANTICS_ONLY, VERSION};
use crate::numerics::{RngState, Tensor};
use crate::params::{hash_hex, ModelHash, ParamStore};

/// A complete model: architecture, parameters and their content hash.
#[derive(Clone, Debug)]
pub struct Codec {
    config: CodecConfig,
    config_text: String,
    params: ParamStore,
    hash: ModelHash,
}

/// Encoder-side result: the stream plus the quantized latents it carries.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: HscBitstream,
    pub s_r_hat: Tensor,
    pub s_hat: StyleCodes,
    pub y_hat: Option<Tensor>,
    pub f_hat: Option<Tensor>,
    /// Model rate estimate of the SCN chunk, in bits.
    pub scn_estimated_bits: f64,
    /// Model rate estimates of the FCN chunks, in bits.
    pub fcn_estimated_bits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedLatents {
    pub s_r_hat: Tensor,
    pub s_hat: StyleCodes,
    pub y_hat: Option<Tensor>,
    /// `None` for semantics-only streams.
    pub f_hat: Option<Tensor>,
}

impl Codec {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn init(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let rng = RngState::new(config.seed);
        let mut params = ParamStore::new();
        Generator::new(&config).init_params(&mut params, &mut rng.fork(1))?;
        let gie = Gie::new(&config);
        gie.init_params(&mut params, &mut rng.fork(2));
        let (codes, feature) = latent_means(&config, &params, &mut rng.fork(5))?;
        gie.calibrate(&mut params, &codes, &feature)?;
        Scn::new(&config).init_params(&mut params, &mut rng.fork(3));
        Fcn::new(&config).init_params(&mut params, &mut rng.fork(4));
        Self::from_params(config, params)
    }

    /// Parameters are rounded to `f32` so a saved model reproduces this one.
    pub fn from_params(config: CodecConfig, mut params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.snap_f32();
        let config_text = config.to_toml();
        let hash = params.content_hash(&config_text);
        Ok(Codec {
            config,
            config_text,
            params,
            hash,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn hash(&self) -> ModelHash {
        self.hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.to_bytes(&self.config_text)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, text, _) = ParamStore::from_bytes(bytes)?;
        let config = CodecConfig::from_toml(&text)?;
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn generator(&self) -> Generator {
        Generator::new(&self.config)
    }

    pub fn gie(&self) -> Gie {
        Gie::new(&self.config)
    }

    pub fn scn(&self) -> Scn {
        Scn::new(&self.config)
    }

    pub fn fcn(&self) -> Fcn {
        Fcn::new(&self.config)
    }

    /// GIE inversion of an image into `(S, f)`.
    pub fn analyze(&self, x: &Tensor) -> Result<(StyleCodes, Tensor)> {
        let (s, f) = self.gie().forward_values(&self.params, x)?;
        Ok((StyleCodes::new(self.config.m, self.config.d_s, s)?, f))
    }

    pub fn header(&self, semantics_only: bool) -> Header {
        let [c_f, h_f, w_f] = self.config.feature_shape();
        Header {
            version: VERSION,
            flags: if semantics_only {
                FLAG_SEMANTICS_ONLY
            } else {
                0
            },
            m: self.config.m as u8,
            t: self.config.t as u8,
            k: self.config.k as u8,
            d_s: self.config.d_s as u16,
            latent_len: self.config.r as u16,
            c_f: c_f as u16,
            h_f: h_f as u16,
            w_f: w_f as u16,
            model_hash: self.hash,
        }
    }

    pub fn encode(&self, x: &Tensor, semantics_only: bool) -> Result<Encoded> {
        let (s, f) = self.analyze(x)?;
        self.encode_latents(&s, &f, semantics_only)
    }

    /// Codes given `(S, f)`; the SCN chunk first, then the slices conditioned
    /// on the decoded codes.
    pub fn encode_latents(
        &self,
        s: &StyleCodes,
        f: &Tensor,
        semantics_only: bool,
    ) -> Result<Encoded> {
        let scn = self.scn().code(&self.params, s.flat())?;
        let s_hat = StyleCodes::new(self.config.m, self.config.d_s, scn.s_hat)?;
        let (fcn_chunks, y_hat, f_hat, fcn_bits) = if semantics_only {
            (Vec::new(), None, None, Vec::new())
        } else {
            let coded = self.fcn().code(&self.params, f, s_hat.flat())?;
            (
                coded.chunks,
                Some(coded.y_hat),
                Some(coded.f_hat),
                coded.estimated_bits,
            )
        };
        Ok(Encoded {
            stream: HscBitstream {
                header: self.header(semantics_only),
                scn_chunk: scn.chunk,
                fcn_chunks,
            },
            s_r_hat: scn.s_r_hat,
            s_hat,
            y_hat,
            f_hat,
            scn_estimated_bits: scn.estimated_bits,
            fcn_estimated_bits: fcn_bits,
        })
    }

    /// Rejects streams produced by another model or configuration.
    pub fn check_header(&self, header: &Header) -> Result<()> {
        if header.model_hash != self.hash {
            return Err(HscError::HashMismatch {
                stream: hash_hex(&header.model_hash),
                model: hash_hex(&self.hash),
            });
        }
        let ours = self.header(header.semantics_only());
        let fields: [(&'static str, u64, u64); 8] = [
            ("m", header.m as u64, ours.m as u64),
            ("t", header.t as u64, ours.t as u64),
            ("k", header.k as u64, ours.k as u64),
            ("d_s", header.d_s as u64, ours.d_s as u64),
            (
                "latent_len",
                header.latent_len as u64,
                ours.latent_len as u64,
            ),
            ("c_f", header.c_f as u64, ours.c_f as u64),
            ("h_f", header.h_f as u64, ours.h_f as u64),
            ("w_f", header.w_f as u64, ours.w_f as u64),
        ];
        for (field, value, expected) in fields {
            // k is meaningless for semantics-only streams
            if field == "k" && header.semantics_only() {
                continue;
            }
            if value != expected {
                return Err(HscError::HeaderMismatch {
                    field,
                    value,
                    expected,
                });
            }
        }
        Ok(())
    }

    pub fn decode_latents(&self, stream: &HscBitstream) -> Result<DecodedLatents> {
        self.check_header(&stream.header)?;
        if stream.fcn_chunks.len() != stream.header.fcn_chunks() {
            return Err(HscError::Container(format!(
                "{} feature chunks for a header announcing {}",
                stream.fcn_chunks.len(),
                stream.header.fcn_chunks()
            )));
        }
        let (s_r_hat, s_hat) = self.scn().decode_chunk(&self.params, &stream.scn_chunk)?;
        let s_hat = StyleCodes::new(self.config.m, self.config.d_s, s_hat)?;
        if stream.semantics_only() {
            return Ok(DecodedLatents {
                s_r_hat,
                s_hat,
                y_hat: None,
                f_hat: None,
            });
        }
        let fcn = self.fcn();
        let mut dec = SliceDecoder::new(&fcn, &self.params, s_hat.flat())?;
        for (i, chunk) in stream.fcn_chunks.iter().enumerate() {
            dec.decode_slice(i, chunk)?;
        }
        let (y_hat, f_hat) = dec.finish()?;
        Ok(DecodedLatents {
            s_r_hat,
            s_hat,
            y_hat: Some(y_hat),
            f_hat: Some(f_hat),
        })
    }

    /// `G_l(s_l, f)` when a feature is present, else `G(S)`.
    pub fn synthesize(&self, s: &StyleCodes, f: Option<&Tensor>) -> Result<Tensor> {
        let gen = self.generator();
        match f {
            Some(f) => gen.g_l_values(&self.params, &s.split(self.config.t)?.s_l, f),
            None => gen.full_values(&self.params, s),
        }
    }

    pub fn decode(&self, stream: &HscBitstream) -> Result<Tensor> {
        let lat = self.decode_latents(stream)?;
        self.synthesize(&lat.s_hat, lat.f_hat.as_ref())
    }

    /// Same as [`Codec::decode`] starting from container bytes.
    pub fn decode_bytes(&self, bytes: &[u8]) -> Result<Tensor> {
        self.decode(&HscBitstream::from_bytes(bytes)?)
    }
}

/// Mean style codes and mean (noisy) feature over generator samples.
fn latent_means(
    config: &CodecConfig,
    params: &ParamStore,
    rng: &mut RngState,
) -> Result<(StyleCodes, Tensor)> {
    const SAMPLES: usize = 256;
    let gen = Generator::new(config);
    let mut codes = Tensor::zeros(&[config.code_len()]);
    let mut feature = Tensor::zeros(&config.feature_shape());
    for _ in 0..SAMPLES {
        let z = rng.normal_tensor(&[config.d_s], 1.0);
        let s = gen.codes_from_z(params, &z)?;
        let noise = SynthNoise::sample(config.feature_noise, rng);
        let f = gen.g_s_noisy_values(params, &s.split(config.t)?.s_s, &noise)?;
        codes.add_scaled(s.flat(), 1.0 / SAMPLES as f64)?;
        feature.add_scaled(&f, 1.0 / SAMPLES as f64)?;
    }
    Ok((StyleCodes::new(config.m, config.d_s, codes)?, feature))
}
