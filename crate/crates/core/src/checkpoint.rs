//! Self-describing binary checkpoint (`EEM1`).
//!
//! Layout, all little-endian: magic, u32 version, u32 model tag, u64 `H`,
//! `D`, `S`, `N`, iteration, seed; u32 array count followed by named f64
//! arrays (u16 name length, name, u64 length, values); `N·S` bit-packed
//! states of `⌈H/64⌉` u64 words; u64 trace length and `(u64, f64)` pairs.
//! Cached log-pseudo-joints are not stored; they are recomputed on resume.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::learning::FreeEnergyTrace;
use crate::model::{BscParams, ModelKind, ModelParams, NoisyOrParams, SsscParams};
use crate::state::BinaryState;
use crate::variational::{LatentStateSet, StateSetCollection};

pub const MAGIC: &[u8; 4] = b"EEM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub sets: StateSetCollection,
    pub trace: FreeEnergyTrace,
    pub iteration: usize,
    pub seed: u64,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn param_arrays(params: &ModelParams) -> Vec<(&'static str, Vec<f64>)> {
    match params {
        ModelParams::NoisyOr(p) => vec![("pi", p.pi().to_vec()), ("W", row_major(p.w()))],
        ModelParams::Bsc(p) => vec![
            ("pi", vec![p.pi()]),
            ("sigma2", vec![p.sigma2()]),
            ("W", row_major(p.w())),
        ],
        ModelParams::Sssc(p) => vec![
            ("pi", p.pi().to_vec()),
            ("sigma2", vec![p.sigma2()]),
            ("W", row_major(p.w())),
            ("mu", p.mu().to_vec()),
            ("Psi", row_major(p.psi())),
            ("frozen", vec![if p.mu_psi_frozen() { 1.0 } else { 0.0 }]),
        ],
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("size out of range"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.params, &self.sets, &self.trace, self.iteration, self.seed)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing EEM1 magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let tag = r.u32()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| bad(format!("unknown model tag {tag}")))?;
        let h = r.usize()?;
        let d = r.usize()?;
        let s = r.usize()?;
        let n = r.usize()?;
        let iteration = r.usize()?;
        let seed = r.u64()?;

        let count = r.u32()?;
        let mut arrays = std::collections::BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("array name is not UTF-8"))?.to_string();
            let len = r.usize()?;
            if len > bytes.len() / 8 {
                return Err(bad("array length exceeds file size"));
            }
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
            arrays.insert(name, values);
        }
        let params = build_params(kind, h, d, &mut arrays)?;

        let words = h.div_ceil(64);
        if n.checked_mul(s).and_then(|x| x.checked_mul(words * 8)).is_none_or(|b| b > bytes.len()) {
            return Err(bad("state payload exceeds file size"));
        }
        let mut sets = Vec::with_capacity(n);
        for i in 0..n {
            let mut states = Vec::with_capacity(s);
            for _ in 0..s {
                let ws = (0..words).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
                let st = BinaryState::from_words(&ws, h);
                if st.words() != ws.as_slice() {
                    return Err(bad("state has bits beyond H"));
                }
                states.push(st);
            }
            sets.push(LatentStateSet::from_states(states).map_err(|e| e.context(format!("state set {i}")))?);
        }
        let len = r.usize()?;
        if len > bytes.len() / 16 {
            return Err(bad("trace length exceeds file size"));
        }
        let mut points = Vec::with_capacity(len);
        for _ in 0..len {
            points.push((r.usize()?, r.f64()?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            params,
            sets: StateSetCollection::new(sets),
            trace: FreeEnergyTrace::from_points(points)?,
            iteration,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_bytes(path.as_ref(), &self.to_bytes())
    }

    /// Seed recorded in a checkpoint file, read from its header only.
    pub fn read_seed(path: impl AsRef<Path>) -> Result<u64> {
        use std::io::Read;
        let path = path.as_ref();
        let mut head = [0u8; 60];
        fs::File::open(path)
            .and_then(|mut f| f.read_exact(&mut head))
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        if &head[..4] != MAGIC {
            return Err(bad("missing EEM1 magic").context(path.display().to_string()));
        }
        Ok(u64::from_le_bytes(head[52..60].try_into().expect("8 bytes")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Write through a temporary file so an interrupted save keeps the old one.
pub fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

/// Serialise borrowed run state; identical to [`Checkpoint::to_bytes`].
pub fn encode(
    params: &ModelParams,
    sets: &StateSetCollection,
    trace: &FreeEnergyTrace,
    iteration: usize,
    seed: u64,
) -> Vec<u8> {
    let p = params;
    let (h, d) = (p.latent_dim(), p.observed_dim());
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(p.kind().tag());
    for v in [h, d, sets.set_size(), sets.len(), iteration] {
        w.u64(v as u64);
    }
    w.u64(seed);
    let arrays = param_arrays(p);
    w.u32(arrays.len() as u32);
    for (name, values) in arrays {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
        w.u64(values.len() as u64);
        for v in values {
            w.f64(v);
        }
    }
    for set in sets.sets() {
        for s in set.states() {
            for &word in s.words() {
                w.u64(word);
            }
        }
    }
    w.u64(trace.len() as u64);
    for &(i, v) in trace.points() {
        w.u64(i as u64);
        w.f64(v);
    }
    w.0
}

fn build_params(
    kind: ModelKind,
    h: usize,
    d: usize,
    arrays: &mut std::collections::BTreeMap<String, Vec<f64>>,
) -> Result<ModelParams> {
    let mut get = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = arrays.remove(name).ok_or_else(|| bad(format!("missing array '{name}'")))?;
        if v.len() != len {
            return Err(bad(format!("array '{name}' has {} values, expected {len}", v.len())));
        }
        Ok(v)
    };
    let params = match kind {
        ModelKind::NoisyOr => {
            let pi = get("pi", h)?;
            let w = DMatrix::from_row_slice(d, h, &get("W", d * h)?);
            ModelParams::NoisyOr(NoisyOrParams::new(pi, w)?)
        }
        ModelKind::Bsc => {
            let pi = get("pi", 1)?[0];
            let sigma2 = get("sigma2", 1)?[0];
            let w = DMatrix::from_row_slice(d, h, &get("W", d * h)?);
            ModelParams::Bsc(BscParams::new(pi, sigma2, w)?)
        }
        ModelKind::Sssc => {
            let pi = get("pi", h)?;
            let sigma2 = get("sigma2", 1)?[0];
            let w = DMatrix::from_row_slice(d, h, &get("W", d * h)?);
            let mu = get("mu", h)?;
            let psi = DMatrix::from_row_slice(h, h, &get("Psi", h * h)?);
            let frozen = get("frozen", 1)?[0] != 0.0;
            ModelParams::Sssc(SsscParams::new(pi, sigma2, w, mu, psi, frozen)?)
        }
    };
    if let Some(name) = arrays.keys().next() {
        return Err(bad(format!("unexpected array '{name}'")));
    }
    Ok(params)
}
