//! Binary checkpoint format: versioned header, architecture, little-endian
//! f64 parameter vector, and an echo of the training config.

use crate::engine::CondKind;
use crate::error::{Error, Result};

use super::mlp::{EpsNet, NetArch, TimeMode};

const MAGIC: &[u8; 8] = b"DOOBNET1";
const VERSION: u32 = 1;

fn cond_code(c: CondKind) -> (u32, u32) {
    match c {
        CondKind::None => (0, 0),
        CondKind::Aux { n_aux } => (1, n_aux as u32),
        CondKind::Masked => (2, 0),
        CondKind::MaskOnly => (3, 0),
    }
}

fn cond_from_code(code: u32, aux: u32) -> Result<CondKind> {
    Ok(match code {
        0 => CondKind::None,
        1 => CondKind::Aux { n_aux: aux as usize },
        2 => CondKind::Masked,
        3 => CondKind::MaskOnly,
        _ => return Err(Error::format(format!("unknown conditioning code {code}"))),
    })
}

/// Serialize a network plus the config echo that produced it.
pub fn checkpoint_bytes(net: &EpsNet, config_echo: &str) -> Vec<u8> {
    let arch = net.arch();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.d as u32).to_le_bytes());
    buf.extend_from_slice(&match arch.time_mode {
        TimeMode::Whole => 0u32,
        TimeMode::PerCoord => 1u32,
    }
    .to_le_bytes());
    let (cc, aux) = cond_code(arch.cond);
    buf.extend_from_slice(&cc.to_le_bytes());
    buf.extend_from_slice(&aux.to_le_bytes());
    buf.extend_from_slice(&arch.pad_value.to_le_bytes());
    buf.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &h in &arch.hidden {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for &p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let echo = config_echo.as_bytes();
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(echo);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint back into a network and its config echo.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(EpsNet, String)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a network checkpoint"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let d = r.u32()? as usize;
    let time_mode = match r.u32()? {
        0 => TimeMode::Whole,
        1 => TimeMode::PerCoord,
        t => return Err(Error::format(format!("unknown time mode {t}"))),
    };
    let cc = r.u32()?;
    let aux = r.u32()?;
    let cond = cond_from_code(cc, aux)?;
    let pad_value = r.f64()?;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(r.f64()?);
    }
    let echo_len = r.u32()? as usize;
    let echo = String::from_utf8(r.take(echo_len)?.to_vec())
        .map_err(|_| Error::format("config echo is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    let arch = NetArch { d, hidden, time_mode, cond, pad_value };
    Ok((EpsNet::from_params(arch, params)?, echo))
}
