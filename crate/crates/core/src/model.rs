//! Encoder + head bundled with their parameters, and checkpoint files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{manifest_path, sample_pixel_rows, PixelSetSample};
use crate::encoders::{Encoder, EncoderDims, LtaeOutput, YearDescriptor};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadVariant};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder: EncoderDims,
    pub classes: usize,
    pub decoder_hidden: usize,
    pub variant: HeadVariant,
}

impl Architecture {
    pub fn new(encoder: EncoderDims, classes: usize, variant: HeadVariant) -> Self {
        Architecture {
            encoder,
            classes,
            decoder_hidden: 64,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 || self.decoder_hidden == 0 {
            return Err(Error::Config(
                "need at least two classes and a non-empty decoder".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<R: Real = f32> {
    pub arch: Architecture,
    pub params: ParamStore<R>,
    pub encoder: Encoder,
    pub head: Head,
}

impl<R: Real> Model<R> {
    /// Fresh weights, fully determined by `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &arch.encoder, &mut rng)?;
        let head = Head::new(
            &mut params,
            arch.variant,
            arch.encoder.descriptor_dim,
            arch.classes,
            arch.decoder_hidden,
            &mut rng,
        );
        Ok(Model {
            arch,
            params,
            encoder,
            head,
        })
    }

    pub fn variant(&self) -> HeadVariant {
        self.arch.variant
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn encode(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        rows: &Tensor<R>,
        days: &[u16],
    ) -> Result<LtaeOutput> {
        self.encoder.forward(tape, p, rows, days)
    }

    /// Logits `1 × L` for one parcel-year.
    pub fn logits(
        &self,
        tape: &mut Tape<R>,
        p: &Bound,
        rows: &Tensor<R>,
        days: &[u16],
        feature: Option<&Tensor<R>>,
    ) -> Result<Var> {
        let out = self.encode(tape, p, rows, days)?;
        self.head.forward(tape, p, out.descriptor, feature)
    }

    /// Descriptor of a parcel-year with the pixel draw fixed by `draw_seed`.
    pub fn descriptor(&self, sample: &PixelSetSample, draw_seed: u64) -> Result<YearDescriptor<R>> {
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        self.encoder.encode_year(&self.params, sample, &mut rng)
    }

    /// Cross-entropy of one parcel-year, its gradient flattened in parameter
    /// order, and the ReLU signature of the forward pass.
    pub fn loss_gradient(
        &self,
        rows: &Tensor<R>,
        days: &[u16],
        feature: Option<&Tensor<R>>,
        label: usize,
    ) -> Result<(f64, Vec<f64>, u64)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = self.logits(&mut tape, &p, rows, days, feature)?;
        let loss = tape.cross_entropy(z, label)?;
        let grads = tape.backward(loss)?;
        let flat = p
            .vars()
            .iter()
            .zip(self.params.values())
            .flat_map(|(&v, like)| grads.get(v, like).to_f64())
            .collect();
        Ok((tape.value(loss).data()[0].f64(), flat, tape.relu_signature()))
    }

    pub fn pixel_rows(&self, sample: &PixelSetSample, draw_seed: u64) -> Tensor<R> {
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        sample_pixel_rows(sample, self.arch.encoder.sample_size, &mut rng)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RCWT";
const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian weight file:
/// `magic "RCWT" | version u32 | tensors u32 | per tensor: name_len u16,
/// name utf-8, rank u8, dims rank*u32, values f32*`.
/// The architecture is written to a JSON sidecar (`<path>.json`).
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, serde_json::to_string_pretty(&model.arch)?).map_err(|e| Error::io(&mpath, e))
}

pub fn encode_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.names().iter().zip(model.params.values()) {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Dimension(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let arch_text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let arch: Architecture =
        serde_json::from_str(&arch_text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
    decode_checkpoint(&bytes, arch)
}

pub fn decode_checkpoint(bytes: &[u8], arch: Architecture) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(arch, 0)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::format(pos as u64, "truncated checkpoint"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"RCWT\""));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if count != model.params.len() {
        return Err(Error::format(
            8,
            format!("checkpoint holds {count} tensors, architecture needs {}", model.params.len()),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (name, expected) in model.params.names().iter().zip(model.params.values()) {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let got = String::from_utf8_lossy(take(len)?).into_owned();
        if &got != name {
            return Err(Error::format(0, format!("expected tensor {name}, found {got}")));
        }
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        if shape != expected.shape() {
            return Err(Error::format(
                0,
                format!("tensor {name} has shape {shape:?}, expected {:?}", expected.shape()),
            ));
        }
        let n = expected.len();
        let data: Vec<f32> = take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes in checkpoint"));
    }
    model.params.replace_values(values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        let dims = EncoderDims {
            channels: 3,
            sample_size: 4,
            pse_hidden: 5,
            pse_dim: 6,
            embed_dim: 8,
            heads: 2,
            key_dim: 2,
            descriptor_dim: 12,
            pe_tau: 1000.0,
        };
        Architecture {
            decoder_hidden: 7,
            ..Architecture::new(dims, 4, HeadVariant::DecConcat)
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Model::<f32>::new(arch(), 3).unwrap();
        let b = Model::<f32>::new(arch(), 3).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, Model::<f32>::new(arch(), 4).unwrap().params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rcwt");
        let m = Model::<f32>::new(arch(), 9).unwrap();
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_rejects_wrong_architecture() {
        let m = Model::<f32>::new(arch(), 9).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let mut other = arch();
        other.variant = HeadVariant::Single;
        assert!(matches!(decode_checkpoint(&bytes, other), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1], arch()), Err(Error::Format { .. })));
    }
}
