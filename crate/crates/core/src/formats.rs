//! On-disk formats.
//!
//! * Raw frames: binary 16-bit PGM (big-endian samples, maxval 65535) with a
//!   sibling `.json` holding the sensor metadata.
//! * HDR images: `RHDR`, then `u32` LE `h, w, c`, then `f32` LE samples in
//!   row-major, channel-interleaved order.
//! * Parameter sets: `RHNP`, `u32` LE version and record count, then per
//!   record a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//!   `f32` LE data.
//!
//! Float containers store `f32`; values already representable in `f32`
//! round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, NetParams};
use crate::raw_model::{Cfa, HdrImage, RawMosaic};
use crate::tensor::Tensor;

pub const HDR_MAGIC: &[u8; 4] = b"RHDR";
pub const PARAMS_MAGIC: &[u8; 4] = b"RHNP";
pub const PARAMS_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Little-endian reader over a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!("{}: truncated at byte {}", self.what, self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return format_err(format!("{}: {} trailing bytes", self.what, self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

/// Sensor metadata stored next to a PGM frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    pub cfa: Cfa,
    pub black_level: u32,
    pub white_level: u32,
    pub bit_depth: u32,
    pub exposure_ev: f64,
}

impl RawMeta {
    pub fn of(m: &RawMosaic) -> Self {
        Self {
            cfa: m.cfa,
            black_level: m.black_level,
            white_level: m.white_level,
            bit_depth: m.bit_depth,
            exposure_ev: m.exposure_ev,
        }
    }
}

/// Path of the metadata sidecar for a frame.
pub fn raw_sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

/// Whitespace-separated header tokens, skipping `#` comments.
fn pgm_header(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return format_err("pgm: truncated header");
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // one whitespace byte separates the header from the payload
    if i >= bytes.len() {
        return format_err("pgm: missing payload");
    }
    Ok((tokens, i + 1))
}

fn pgm_number(token: &str, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("pgm: bad {what} '{token}'")))
}

/// Returns `(width, height, maxval, payload offset)`.
fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let (tokens, offset) = pgm_header(bytes, 4)?;
    if tokens[0] != "P5" {
        return format_err(format!("pgm: bad magic '{}'", tokens[0]));
    }
    Ok((
        pgm_number(&tokens[1], "width")?,
        pgm_number(&tokens[2], "height")?,
        pgm_number(&tokens[3], "maxval")?,
        offset,
    ))
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, maxval, offset) = parse_pgm(bytes)?;
    if maxval != 65535 {
        return format_err(format!("pgm: maxval {maxval}, expected 65535"));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h * 2 {
        return format_err(format!("pgm: payload {} bytes, expected {}", payload.len(), w * h * 2));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, samples))
}

pub fn write_raw(path: &Path, mosaic: &RawMosaic) -> Result<()> {
    fs::write(path, encode_pgm16(mosaic.width(), mosaic.height(), mosaic.data()))?;
    write_json(&raw_sidecar(path), &RawMeta::of(mosaic))
}

pub fn read_raw(path: &Path) -> Result<RawMosaic> {
    let (w, h, samples) = decode_pgm16(&fs::read(path)?)?;
    let sidecar = raw_sidecar(path);
    if !sidecar.exists() {
        return format_err(format!("missing sidecar {}", sidecar.display()));
    }
    let meta: RawMeta = read_json(&sidecar)?;
    let mut m = RawMosaic::new(
        h,
        w,
        samples,
        meta.black_level,
        meta.white_level,
        meta.bit_depth,
        meta.exposure_ev,
    )?;
    m.cfa = meta.cfa;
    Ok(m)
}

/// 8-bit PGM, used for index maps.
pub fn write_pgm8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(fs::write(path, out)?)
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, offset) = parse_pgm(&bytes)?;
    if maxval > 255 || bytes.len() - offset != w * h {
        return format_err("pgm: not an 8-bit image of the stated size");
    }
    Ok((w, h, bytes[offset..].to_vec()))
}

pub fn encode_hdr(img: &HdrImage) -> Vec<u8> {
    let [h, w, c] = img.shape();
    let mut out = Vec::with_capacity(16 + 4 * h * w * c);
    out.extend_from_slice(HDR_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, img.tensor().data());
    out
}

pub fn decode_hdr(bytes: &[u8]) -> Result<HdrImage> {
    let mut cur = Cursor::new(bytes, "hdr");
    if cur.take(4)? != HDR_MAGIC {
        return format_err("hdr: bad magic");
    }
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let data = cur.f32s(h * w * c)?;
    cur.finish()?;
    HdrImage::new(Tensor::new(&[h, w, c], data)?)
}

pub fn write_hdr(path: &Path, img: &HdrImage) -> Result<()> {
    Ok(fs::write(path, encode_hdr(img))?)
}

pub fn read_hdr(path: &Path) -> Result<HdrImage> {
    decode_hdr(&fs::read(path)?)
}

pub fn encode_params(params: &NetParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<NetParams> {
    let mut cur = Cursor::new(bytes, "params");
    if cur.take(4)? != PARAMS_MAGIC {
        return format_err("params: bad magic");
    }
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let count = cur.u32()?;
    let mut params = NetParams::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("params: name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("params: size overflow".into()))?;
        let data = cur.f32s(n)?;
        if params.get(&name).is_some() {
            return format_err(format!("params: duplicate record '{name}'"));
        }
        params.insert(name, Tensor::new(&shape, data)?);
    }
    cur.finish()?;
    Ok(params)
}

/// Path of the architecture config stored next to a parameter file.
pub fn config_sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

pub fn write_params(path: &Path, params: &NetParams) -> Result<()> {
    Ok(fs::write(path, encode_params(params))?)
}

pub fn read_params(path: &Path) -> Result<NetParams> {
    decode_params(&fs::read(path)?)
}

/// Parameters plus their architecture config.
pub fn write_checkpoint(path: &Path, params: &NetParams, config: &NetConfig) -> Result<()> {
    write_params(path, params)?;
    write_json(&config_sidecar(path), config)
}

/// Loads a checkpoint and checks the arrays against the config.
pub fn read_checkpoint(path: &Path) -> Result<(NetParams, NetConfig)> {
    let params = read_params(path)?;
    let sidecar = config_sidecar(path);
    if !sidecar.exists() {
        return format_err(format!("missing config {}", sidecar.display()));
    }
    let config: NetConfig = read_json(&sidecar)?;
    config.validate()?;
    params.check_against(&crate::net::net_specs(&config))?;
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn pgm_bytes_for_known_frame() {
        let bytes = encode_pgm16(2, 2, &[0, 1, 256, 65535]);
        let mut want = b"P5\n2 2\n65535\n".to_vec();
        want.extend_from_slice(&[0, 0, 0, 1, 1, 0, 255, 255]);
        assert_eq!(bytes, want);
        assert_eq!(decode_pgm16(&bytes).unwrap(), (2, 2, vec![0, 1, 256, 65535]));
    }

    #[test]
    fn pgm_rejects_corruption() {
        let mut bytes = encode_pgm16(2, 2, &[1, 2, 3, 4]);
        bytes[1] = b'2';
        assert!(matches!(decode_pgm16(&bytes), Err(Error::Format(_))));
        let eight = b"P5\n2 2\n255\n\x00\x01\x02\x03".to_vec();
        assert!(decode_pgm16(&eight).is_err());
        let short = encode_pgm16(2, 2, &[1, 2, 3, 4]);
        assert!(decode_pgm16(&short[..short.len() - 1]).is_err());
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert_eq!(decode_pgm16(&bytes).unwrap(), (1, 1, vec![258]));
    }

    #[test]
    fn raw_round_trip_and_missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<u16> = (0..24).map(|_| rng.random_range(0..16384)).collect();
        let m = RawMosaic::new(4, 6, data, 512, 16383, 14, -3.0).unwrap();
        write_raw(&path, &m).unwrap();
        assert_eq!(read_raw(&path).unwrap(), m);
        fs::remove_file(raw_sidecar(&path)).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Format(_))));
    }

    #[test]
    fn hdr_size_and_truncation() {
        let img = HdrImage::new(Tensor::new(&[1, 1, 4], vec![0.0, 1.5, 2.0, 1e6]).unwrap()).unwrap();
        let bytes = encode_hdr(&img);
        assert_eq!(bytes.len(), 4 + 12 + 16);
        assert_eq!(decode_hdr(&bytes).unwrap(), img);
        assert!(decode_hdr(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_hdr(&bad).is_err());
    }

    #[test]
    fn params_round_trip_and_version() {
        let config = NetConfig::default();
        let params = NetParams::from_specs(&crate::net::net_specs(&config), 3);
        let bytes = encode_params(&params);
        assert_eq!(decode_params(&bytes).unwrap(), params);

        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(matches!(decode_params(&wrong), Err(Error::Version { found: 2, expected: 1 })));
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rhnp");
        write_checkpoint(&path, &params, &config).unwrap();
        let (p, c) = read_checkpoint(&path).unwrap();
        assert_eq!((p, c), (params, config));
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rhnp");
        let params = NetParams::from_specs(&crate::net::net_specs(&NetConfig::default()), 3);
        let other = NetConfig {
            base_width: 8,
            ..NetConfig::default()
        };
        write_checkpoint(&path, &params, &other).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn params_record_layout() {
        let mut p = NetParams::new();
        p.insert("ab", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let bytes = encode_params(&p);
        let mut want = b"RHNP".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1f32.to_le_bytes());
        want.extend_from_slice(&(-2f32).to_le_bytes());
        assert_eq!(bytes, want);
    }
}
