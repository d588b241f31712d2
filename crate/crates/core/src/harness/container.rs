//! The `HSC1` bitstream container.
//!
//! ```text
//! offset size
//!      0    4  magic "HSC1"
//!      4    1  version
//!      5    1  flags (bit 0: semantics only)
//!      6    1  m
//!      7    1  t
//!      8    1  k
//!      9    2  d_s
//!     11    2  semantic latent length
//!     13    2  C_f
//!     15    2  H_f
//!     17    2  W_f
//!     19    8  model content hash
//!     27       SCN chunk, then k FCN chunks (absent when semantics only),
//!              each prefixed with a 4-byte payload length
//! ```
//!
//! All integers are little-endian.

use crate::error::{HscError, Result};
use crate::params::ModelHash;
use crate::range_coder::{read_chunk, write_chunk};

pub const MAGIC: &[u8; 4] = b"HSC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 27;
pub const FLAG_SEMANTICS_ONLY: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub flags: u8,
    pub m: u8,
    pub t: u8,
    pub k: u8,
    pub d_s: u16,
    pub latent_len: u16,
    pub c_f: u16,
    pub h_f: u16,
    pub w_f: u16,
    pub model_hash: ModelHash,
}

impl Header {
    pub fn semantics_only(&self) -> bool {
        self.flags & FLAG_SEMANTICS_ONLY != 0
    }

    /// Number of FCN chunks that follow the SCN chunk.
    pub fn fcn_chunks(&self) -> usize {
        if self.semantics_only() {
            0
        } else {
            self.k as usize
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[self.version, self.flags, self.m, self.t, self.k]);
        for v in [self.d_s, self.latent_len, self.c_f, self.h_f, self.w_f] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.model_hash);
    }

    fn parse(data: &[u8]) -> Result<Header> {
        if data.len() < 4 {
            return Err(HscError::Truncated {
                offset: 0,
                needed: HEADER_LEN,
                available: data.len(),
            });
        }
        let magic: [u8; 4] = data[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(HscError::BadMagic { found: magic });
        }
        if data.len() < 5 {
            return Err(HscError::Truncated {
                offset: 4,
                needed: HEADER_LEN - 4,
                available: 0,
            });
        }
        if data[4] != VERSION {
            return Err(HscError::BadVersion(data[4]));
        }
        if data.len() < HEADER_LEN {
            return Err(HscError::Truncated {
                offset: 0,
                needed: HEADER_LEN,
                available: data.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([data[o], data[o + 1]]);
        let flags = data[5];
        if flags & !FLAG_SEMANTICS_ONLY != 0 {
            return Err(HscError::Container(format!(
                "reserved flag bits set: {flags:#04x}"
            )));
        }
        Ok(Header {
            version: data[4],
            flags,
            m: data[6],
            t: data[7],
            k: data[8],
            d_s: u16_at(9),
            latent_len: u16_at(11),
            c_f: u16_at(13),
            h_f: u16_at(15),
            w_f: u16_at(17),
            model_hash: data[19..27].try_into().expect("8 bytes"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HscBitstream {
    pub header: Header,
    pub scn_chunk: Vec<u8>,
    pub fcn_chunks: Vec<Vec<u8>>,
}

impl HscBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.header.write(&mut out);
        write_chunk(&mut out, &self.scn_chunk);
        for c in &self.fcn_chunks {
            write_chunk(&mut out, c);
        }
        out
    }

    /// Parses and validates the layout; magic and version are checked before
    /// anything else is read.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let header = Header::parse(data)?;
        let (scn, mut offset) = read_chunk(data, HEADER_LEN)?;
        let scn_chunk = scn.to_vec();
        let mut fcn_chunks = Vec::with_capacity(header.fcn_chunks());
        for _ in 0..header.fcn_chunks() {
            let (c, next) = read_chunk(data, offset)?;
            fcn_chunks.push(c.to_vec());
            offset = next;
        }
        if offset != data.len() {
            return Err(HscError::Container(format!(
                "{} trailing bytes after the last chunk",
                data.len() - offset
            )));
        }
        Ok(HscBitstream {
            header,
            scn_chunk,
            fcn_chunks,
        })
    }

    pub fn semantics_only(&self) -> bool {
        self.header.semantics_only()
    }

    /// Total container size in bytes.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN
            + 4
            + self.scn_chunk.len()
            + self.fcn_chunks.iter().map(|c| 4 + c.len()).sum::<usize>()
    }

    pub fn bpp(&self, height: usize, width: usize) -> Result<f64> {
        bpp(self.byte_len(), height, width)
    }
}

/// `8 * bytes / (height * width)`.
pub fn bpp(bytes: usize, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(HscError::Container(format!(
            "image dimensions {height}x{width}"
        )));
    }
    Ok(8.0 * bytes as f64 / (height * width) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn header(k: u8, flags: u8) -> Header {
        Header {
            version: VERSION,
            flags,
            m: 8,
            t: 3,
            k,
            d_s: 8,
            latent_len: 16,
            c_f: 16,
            h_f: 8,
            w_f: 8,
            model_hash: [1, 2, 3, 4, 5, 6, 7, 8],
        }
    }

    #[test]
    fn minimal_semantics_only_stream() {
        let bs = HscBitstream {
            header: header(8, FLAG_SEMANTICS_ONLY),
            scn_chunk: vec![],
            fcn_chunks: vec![],
        };
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(HscBitstream::from_bytes(&bytes).unwrap(), bs);
        assert!(bs.bpp(32, 32).unwrap() > 0.0);
    }

    #[test]
    fn k8_stream_has_nine_chunks() {
        let bs = HscBitstream {
            header: header(8, 0),
            scn_chunk: vec![9; 5],
            fcn_chunks: (0..8).map(|i| vec![i as u8; i]).collect(),
        };
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), bs.byte_len());
        let back = HscBitstream::from_bytes(&bytes).unwrap();
        assert_eq!(back.fcn_chunks.len() + 1, 9);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bs = HscBitstream {
            header: header(2, 0),
            scn_chunk: vec![1, 2],
            fcn_chunks: vec![vec![3], vec![4, 5]],
        };
        let bytes = bs.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            HscBitstream::from_bytes(&bad),
            Err(HscError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            HscBitstream::from_bytes(&bad),
            Err(HscError::BadVersion(9))
        ));
        assert!(matches!(
            HscBitstream::from_bytes(&bytes[..bytes.len() - 1]),
            Err(HscError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 200;
        assert!(matches!(
            HscBitstream::from_bytes(&bad),
            Err(HscError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            HscBitstream::from_bytes(&long),
            Err(HscError::Container(_))
        ));
    }

    #[test]
    fn bpp_definition() {
        assert_eq!(bpp(1024, 64, 64).unwrap(), 2.0);
        assert_eq!(bpp(1024, 64, 128).unwrap(), 1.0);
        assert!(bpp(10, 0, 4).is_err());
    }

    #[test]
    fn random_mutations_never_panic() {
        let bs = HscBitstream {
            header: header(3, 0),
            scn_chunk: vec![7; 6],
            fcn_chunks: vec![vec![1; 4], vec![2; 3], vec![]],
        };
        let bytes = bs.to_bytes();
        let mut rng = RngState::new(8);
        for _ in 0..2000 {
            let mut b = bytes.clone();
            let i = rng.below(b.len());
            b[i] ^= 1 << rng.below(8);
            if rng.below(4) == 0 {
                b.truncate(rng.below(b.len()));
            }
            if let Ok(parsed) = HscBitstream::from_bytes(&b) {
                assert_eq!(parsed.to_bytes(), b);
            }
        }
    }
}
