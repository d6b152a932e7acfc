//! Binary FBO container.
//!
//! Layout, all integers and floats little-endian:
//! `"ZKAM"`, version `u32`, model header (`n: u32`, `lambda: f64`,
//! `k_max: u32`, then `d_k: u32` for `k = 0..=k_max`), frequency header
//! (`d: u32`, `n_max: u32`), block count `u64`, then per block `l` as
//! `d` times `i64`, `k: u32`, `k': u32` and the row-major entries as
//! `(re, im)` pairs of `f64`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::operator::{Fbo, Mode, C64};
use crate::spectral::SpectralModel;

pub const MAGIC: &[u8; 4] = b"ZKAM";
pub const VERSION: u32 = 1;

/// Header fields as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u32,
    pub n: u32,
    pub lambda: f64,
    pub k_max: u32,
    pub dims: Vec<u32>,
    pub d: u32,
    pub n_max: u32,
    pub blocks: u64,
}

pub fn encode_fbo(a: &Fbo) -> Vec<u8> {
    let model = a.model();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.n() as u32).to_le_bytes());
    out.extend_from_slice(&model.lambda_shift().to_le_bytes());
    out.extend_from_slice(&(model.k_max() as u32).to_le_bytes());
    for c in model.clusters() {
        out.extend_from_slice(&(c.dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(a.d() as u32).to_le_bytes());
    out.extend_from_slice(&(a.n_max() as u32).to_le_bytes());
    let count_at = out.len();
    out.extend_from_slice(&0u64.to_le_bytes());
    let mut count = 0u64;
    let nc = model.num_clusters();
    for (l, m) in a.iter() {
        for p in 0..nc {
            let rp = model.range(p);
            for q in 0..nc {
                let rq = model.range(q);
                let v = m.view((rp.start, rq.start), (rp.len(), rq.len()));
                if v.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                    continue;
                }
                count += 1;
                for x in l {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&(model.cluster(p).k as u32).to_le_bytes());
                out.extend_from_slice(&(model.cluster(q).k as u32).to_le_bytes());
                for i in 0..rp.len() {
                    for j in 0..rq.len() {
                        out.extend_from_slice(&v[(i, j)].re.to_le_bytes());
                        out.extend_from_slice(&v[(i, j)].im.to_le_bytes());
                    }
                }
            }
        }
    }
    out[count_at..count_at + 8].copy_from_slice(&count.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                message: format!("truncated file while reading {what}"),
                offset: self.pos as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, message: String, at: usize) -> Error {
        Error::Format {
            message,
            offset: at as u64,
        }
    }
}

fn read_header(r: &mut Reader) -> Result<Header> {
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(r.fail(format!("bad magic {magic:?}"), 0));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}"), 4));
    }
    let n = r.u32("model n")?;
    let lambda = r.f64("model lambda")?;
    let k_max = r.u32("model k_max")?;
    let mut dims = Vec::with_capacity(k_max as usize + 1);
    for _ in 0..=k_max {
        dims.push(r.u32("cluster dimension")?);
    }
    let d = r.u32("frequency d")?;
    let n_max = r.u32("frequency n_max")?;
    let blocks = r.u64("block count")?;
    Ok(Header {
        version,
        n,
        lambda,
        k_max,
        dims,
        d,
        n_max,
        blocks,
    })
}

pub fn decode_header(buf: &[u8]) -> Result<Header> {
    read_header(&mut Reader { buf, pos: 0 })
}

/// Decodes a container against `model`; the header must describe it.
pub fn decode_fbo(buf: &[u8], model: Arc<SpectralModel>) -> Result<Fbo> {
    let mut r = Reader { buf, pos: 0 };
    let h = read_header(&mut r)?;
    let dims: Vec<u32> = model.clusters().iter().map(|c| c.dim as u32).collect();
    if h.n as usize != model.n() || h.lambda.to_bits() != model.lambda_shift().to_bits() || h.dims != dims {
        return Err(r.fail("model header does not match the supplied model".into(), 8));
    }
    let d = h.d as usize;
    let mut out = Fbo::zeros(model.clone(), d, h.n_max as usize);
    let dim = model.total_dim();
    for _ in 0..h.blocks {
        let start = r.pos;
        let mut l: Mode = Vec::with_capacity(d);
        for _ in 0..d {
            l.push(r.i64("mode")?);
        }
        if crate::operator::linf(&l) > h.n_max as usize {
            return Err(r.fail(format!("mode {l:?} exceeds n_max {}", h.n_max), start));
        }
        let k = r.u32("row cluster")? as usize;
        let k2 = r.u32("column cluster")? as usize;
        let find = |k: usize| model.clusters().iter().position(|c| c.k == k);
        let (p, q) = match (find(k), find(k2)) {
            (Some(p), Some(q)) => (p, q),
            _ => return Err(r.fail(format!("unknown cluster pair ({k}, {k2})"), start)),
        };
        let (rows, cols) = (model.range(p).len(), model.range(q).len());
        let mut b = DMatrix::<C64>::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let re = r.f64("entry")?;
                let im = r.f64("entry")?;
                b[(i, j)] = C64::new(re, im);
            }
        }
        if out.coeff(&l).is_none() {
            out.insert_coeff(l.clone(), DMatrix::zeros(dim, dim));
        }
        out.set_block(&l, p, q, &b);
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos), r.pos));
    }
    out.set_hermitian(false);
    Ok(out)
}

/// Writes the container; the file is created exclusively through a
/// temporary sibling and renamed into place.
pub fn save_fbo(path: &Path, a: &Fbo) -> Result<()> {
    let bytes = encode_fbo(a);
    let tmp = path.with_extension("zkam.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_fbo(path: &Path, model: Arc<SpectralModel>) -> Result<Fbo> {
    let buf = std::fs::read(path)?;
    decode_fbo(&buf, model)
}
