//! Versioned binary checkpoint.
//!
//! ```text
//! magic "PLORACKP" | u32 version
//! section config     (key=value text: encoder + run settings)
//! section frozen     (backbone tensors; identical for every run on one base)
//! section trainable  (adapters and head)
//! section state      (merge states, merged user, user table, optimizer)
//! sha256 of everything above
//! ```
//!
//! Sections are `u64` length-prefixed. Integers and reals are little-endian;
//! reals are stored as their exact 64-bit patterns, so a save → load → save
//! cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{Configurable, KvConfig};
use crate::encoder::{Block, EncoderConfig, EncoderModel, Linear, ParamId, Projection};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::optim::{Moments, OptimState};
use crate::plora::{MergeState, PLoRALinear};
use crate::trainer::RunConfig;
use crate::users::{UserId, UserRegistry};

pub const MAGIC: &[u8; 8] = b"PLORACKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub registry: UserRegistry,
    pub run: RunConfig,
    pub optim: Option<OptimState>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, m: &Matrix) {
        self.str(name);
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        self.f64s(m.data());
    }

    fn section(&mut self, body: Writer) {
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    fn tensor(&mut self, expected: &str) -> Result<Matrix> {
        let name = self.str()?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        Matrix::from_vec(rows, cols, self.f64s(n)?)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))
    }

    fn vector(&mut self, expected: &str) -> Result<Vector> {
        Ok(Vector::from_matrix(self.tensor(expected)?))
    }

    fn section(&mut self) -> Result<Reader<'a>> {
        let n = self.len()?;
        Ok(Reader::new(self.take(n)?))
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("trailing bytes in {what} section")));
        }
        Ok(())
    }
}

fn config_text(model: &EncoderModel, run: &RunConfig) -> String {
    let mut pairs = model.config().to_pairs();
    pairs.extend(run.to_pairs());
    KvConfig::from_pairs(pairs).render()
}

fn write_merge_state(w: &mut Writer, s: &MergeState) {
    match s {
        MergeState::Clean => w.u8(0),
        MergeState::MergedGeneric => w.u8(1),
        MergeState::MergedForUser(p) => {
            w.u8(2);
            w.u32(p.len() as u32);
            w.f64s(p.as_slice());
        }
    }
}

fn read_merge_state(r: &mut Reader<'_>) -> Result<MergeState> {
    Ok(match r.u8()? {
        0 => MergeState::Clean,
        1 => MergeState::MergedGeneric,
        2 => {
            let n = r.u32()? as usize;
            MergeState::MergedForUser(Vector::from_vec(r.f64s(n)?)?)
        }
        t => return Err(Error::Format(format!("unknown merge state tag {t}"))),
    })
}

impl Checkpoint {
    pub fn new(model: EncoderModel, registry: UserRegistry, run: RunConfig) -> Self {
        Self {
            model,
            registry,
            run,
            optim: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);

        let mut config = Writer::default();
        config.buf.extend_from_slice(config_text(model, &self.run).as_bytes());
        w.section(config);

        let mut frozen = Writer::default();
        for (name, m) in model.frozen_tensors() {
            frozen.tensor(&name, &m);
        }
        w.section(frozen);

        let mut trainable = Writer::default();
        for id in model.param_ids() {
            let (r, c) = model.param_shape(id);
            let m = Matrix::from_vec(r, c, model.param(id).to_vec()).expect("shape matches data");
            trainable.tensor(&id.name(), &m);
        }
        w.section(trainable);

        let mut state = Writer::default();
        for s in model.merge_states() {
            write_merge_state(&mut state, &s);
        }
        match model.merged_user() {
            Some(u) => {
                state.u8(1);
                state.str(u.as_str());
            }
            None => state.u8(0),
        }
        state.u32(self.registry.d_p() as u32);
        state.u32(self.registry.len() as u32);
        for (u, e) in self.registry.iter() {
            state.str(u.as_str());
            state.u8(u8::from(e.trainable));
            state.f64s(e.embedding.as_slice());
        }
        match &self.optim {
            Some(o) => {
                state.u8(1);
                state.u64(o.step);
                state.u32(o.moments.len() as u32);
                for (name, m) in &o.moments {
                    state.str(name);
                    state.u64(m.m.len() as u64);
                    state.f64s(&m.m);
                    state.f64s(&m.v);
                }
            }
            None => state.u8(0),
        }
        w.section(state);

        let digest: [u8; 32] = Sha256::digest(&w.buf).into();
        w.buf.extend_from_slice(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader::new(&body[HEADER_LEN..]);

        let mut config = r.section()?;
        let text = std::str::from_utf8(config.take(config.buf.len())?)
            .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
        let kv = KvConfig::parse(text)?;
        let mut enc = EncoderConfig::default();
        let mut run = RunConfig::default();
        kv.apply(&mut [&mut enc, &mut run])?;
        enc.validate()?;

        let mut frozen = r.section()?;
        let embedding = frozen.tensor("embedding")?;
        let mut bases = Vec::with_capacity(enc.n_layers);
        for l in 0..enc.n_layers {
            let mut lin = |name: &str| -> Result<Linear> {
                Ok(Linear {
                    weight: frozen.tensor(&format!("block{l}.{name}.weight"))?,
                    bias: frozen.vector(&format!("block{l}.{name}.bias"))?,
                })
            };
            bases.push([lin("q")?, lin("k")?, lin("v")?, lin("o")?, lin("ff_in")?, lin("ff_out")?]);
        }
        frozen.finish("frozen")?;

        let mut trainable = r.section()?;
        let mut adapters = Vec::with_capacity(enc.n_layers);
        for l in 0..enc.n_layers {
            let mut per_proj = Vec::with_capacity(2);
            for p in [Projection::Query, Projection::Value] {
                per_proj.push((
                    trainable.tensor(&ParamId::TaskIn(l, p).name())?,
                    trainable.tensor(&ParamId::SharedOut(l, p).name())?,
                    trainable.tensor(&ParamId::PersonIn(l, p).name())?,
                ));
            }
            adapters.push(per_proj);
        }
        let head_weight = trainable.tensor(&ParamId::HeadWeight.name())?;
        let head_bias = trainable.vector(&ParamId::HeadBias.name())?;
        trainable.finish("trainable")?;

        let mut state = r.section()?;
        let mut blocks = Vec::with_capacity(enc.n_layers);
        for (base, per_proj) in bases.into_iter().zip(adapters) {
            let [q, k, v, o, ff_in, ff_out] = base;
            let mut layers = Vec::with_capacity(2);
            for (lin, (task_in, shared_out, person_in)) in [q, v].into_iter().zip(per_proj) {
                let s = read_merge_state(&mut state)?;
                layers.push(PLoRALinear::from_parts(
                    enc.plora.clone(),
                    lin.weight,
                    lin.bias,
                    task_in,
                    shared_out,
                    person_in,
                    s,
                )?);
            }
            let value = layers.pop().expect("two layers");
            let query = layers.pop().expect("two layers");
            blocks.push(Block {
                query,
                key: k,
                value,
                output: o,
                ff_in,
                ff_out,
            });
        }
        let merged_user = match state.u8()? {
            0 => None,
            1 => Some(UserId::new(state.str()?)?),
            t => return Err(Error::Format(format!("bad merged-user flag {t}"))),
        };
        let model = EncoderModel::from_parts(enc, embedding, blocks, head_weight, head_bias, merged_user)?;

        let d_p = state.u32()? as usize;
        let mut registry = UserRegistry::new(d_p);
        for _ in 0..state.u32()? {
            let user = UserId::new(state.str()?)?;
            let trainable = match state.u8()? {
                0 => false,
                1 => true,
                t => return Err(Error::Format(format!("bad trainable flag {t}"))),
            };
            registry.insert(user, Vector::from_vec(state.f64s(d_p)?)?, trainable)?;
        }
        let optim = match state.u8()? {
            0 => None,
            1 => {
                let step = state.u64()?;
                let mut o = OptimState {
                    step,
                    ..OptimState::default()
                };
                for _ in 0..state.u32()? {
                    let name = state.str()?;
                    let n = state.len()?;
                    let m = state.f64s(n)?;
                    let v = state.f64s(n)?;
                    o.moments.insert(name, Moments { m, v });
                }
                Some(o)
            }
            t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
        };
        state.finish("state")?;
        r.finish("checkpoint")?;
        Ok(Self {
            model,
            registry,
            run,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The raw frozen-tensor section of a serialized checkpoint.
pub fn frozen_region(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut r = Reader::new(&bytes[HEADER_LEN..bytes.len() - DIGEST_LEN]);
    r.section()?;
    Ok(r.section()?.buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::plora::PLoRAConfig;

    fn small() -> Checkpoint {
        let cfg = EncoderConfig {
            vocab_size: 30,
            n_classes: 3,
            max_len: 8,
            d_ff: 10,
            n_layers: 2,
            n_heads: 2,
            plora: PLoRAConfig {
                rank: 2,
                d_p: 3,
                ..PLoRAConfig::default()
            },
            ..EncoderConfig::default()
        }
        .with_d_model(6);
        let mut model = EncoderModel::new(cfg, 4).unwrap();
        let mut rng = Rng::new(4);
        for id in model.param_ids() {
            for v in model.param_mut(id) {
                *v += rng.normal() * 0.1;
            }
        }
        let mut registry = UserRegistry::new(3);
        registry
            .insert(UserId::new("ü-1").unwrap(), Vector::gaussian(3, 1.0, &mut rng).unwrap(), true)
            .unwrap();
        registry.insert(UserId::new("b").unwrap(), Vector::zeros(3), false).unwrap();
        let mut ck = Checkpoint::new(model, registry, RunConfig::default());
        let mut o = OptimState {
            step: 7,
            ..OptimState::default()
        };
        o.moments.insert(
            "head.bias".into(),
            Moments {
                m: vec![0.1, -0.2, 1e-300],
                v: vec![0.0, 3.0, f64::MIN_POSITIVE],
            },
        );
        ck.optim = Some(o);
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = small();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.registry, ck.registry);
        assert_eq!(back.optim, ck.optim);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn merged_state_survives() {
        let mut ck = small();
        let user = UserId::new("ü-1").unwrap();
        let p = ck.registry.get(&user).unwrap().clone();
        ck.model.merge_for_user(Some(&user), &p).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model.merge_states(), ck.model.merge_states());
        assert_eq!(back.model.merged_user(), Some(&user));
        assert_eq!(back.model.folded_embedding(), Some(p));
    }

    #[test]
    fn flipped_byte_is_a_checksum_error() {
        let bytes = small().to_bytes();
        let frozen_start = HEADER_LEN + 8 + (bytes.len() / 3);
        for at in [frozen_start, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum)), "byte {at}");
        }
    }

    #[test]
    fn version_skew_is_rejected() {
        let mut bytes = small().to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = small().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Format(_)) | Err(Error::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Format(_))));
    }

    #[test]
    fn frozen_region_ignores_adapters() {
        let a = small();
        let mut b = a.clone();
        b.model.param_mut(ParamId::HeadBias)[0] += 1.0;
        let (ba, bb) = (a.to_bytes(), b.to_bytes());
        assert_ne!(ba, bb);
        assert_eq!(frozen_region(&ba).unwrap(), frozen_region(&bb).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = small();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), ck.to_bytes());
    }
}
