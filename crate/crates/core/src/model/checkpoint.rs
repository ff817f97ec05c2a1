//! Binary checkpoint format.
//!
//! ```text
//! "ECOC1" | u32 LE header length | JSON header | f64 LE parameter blocks | u64 checksum
//! ```
//!
//! The checksum is the first eight bytes of the SHA-256 digest of everything
//! before it.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ensemble::EcocEnsemble;
use super::layers::Architecture;
use super::onehot::OneHotModel;
use super::{Classifier, Decoder, ModelError};
use crate::codes::{one_hot_matrix, CodeKind, CodewordMatrix};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ECOC1";
const FORMAT_VERSION: u32 = 1;
const PIXEL_RANGE: &str = "unit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ecoc,
    OneHot,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ecoc => "ecoc",
            ModelKind::OneHot => "one-hot",
        }
    }
}

/// Any model a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ecoc(EcocEnsemble),
    OneHot(OneHotModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ecoc(_) => ModelKind::Ecoc,
            Model::OneHot(_) => ModelKind::OneHot,
        }
    }

    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Model::Ecoc(m) => m,
            Model::OneHot(m) => m,
        }
    }

    pub fn into_ecoc(self) -> Result<EcocEnsemble, ModelError> {
        match self {
            Model::Ecoc(m) => Ok(m),
            other => Err(ModelError::WrongKind {
                expected: ModelKind::Ecoc.name(),
                found: other.kind().name(),
            }),
        }
    }

    pub fn into_one_hot(self) -> Result<OneHotModel, ModelError> {
        match self {
            Model::OneHot(m) => Ok(m),
            other => Err(ModelError::WrongKind {
                expected: ModelKind::OneHot.name(),
                found: other.kind().name(),
            }),
        }
    }

    fn architecture(&self) -> &Architecture {
        match self {
            Model::Ecoc(m) => m.architecture(),
            Model::OneHot(m) => m.architecture(),
        }
    }

    fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        match self {
            Model::Ecoc(m) => m.named_params(),
            Model::OneHot(m) => m.named_params(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (classes, codewords) = match self {
            Model::Ecoc(m) => (m.codewords().classes(), m.codewords().clone()),
            Model::OneHot(m) => (m.classes(), one_hot_matrix(m.classes()).expect("at least two classes")),
        };
        let params = self.named_params();
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind(),
            architecture: self.architecture().clone(),
            classes,
            code_length: codewords.length(),
            code_kind: codewords.kind(),
            codewords: codewords.rows().map(<[i8]>::to_vec).collect(),
            pixel_range: PIXEL_RANGE.to_string(),
            blocks: params
                .iter()
                .map(|(name, t)| BlockInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        check_magic(bytes)?;
        let prefix = CHECKPOINT_MAGIC.len() + 4;
        if bytes.len() < prefix {
            return Err(ModelError::Truncated {
                expected: prefix,
                found: bytes.len(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
        let header_end = prefix + header_len;
        if bytes.len() < header_end + 8 {
            return Err(ModelError::Truncated {
                expected: header_end + 8,
                found: bytes.len(),
            });
        }
        let header: Result<Header, _> = serde_json::from_slice(&bytes[prefix..header_end]);
        if let Ok(h) = &header {
            let values: usize = h.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
            let expected = header_end + 8 * values + 8;
            if bytes.len() < expected {
                return Err(ModelError::Truncated {
                    expected,
                    found: bytes.len(),
                });
            }
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != trailer {
            return Err(ModelError::Checksum);
        }
        let header = header.map_err(|e| ModelError::Format(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(ModelError::Version(header.version.to_string()));
        }
        if header.pixel_range != PIXEL_RANGE {
            return Err(ModelError::Format(format!("pixel range {:?}", header.pixel_range)));
        }
        header.architecture.validate()?;
        let codewords = CodewordMatrix::from_rows_unchecked(header.code_kind, header.codewords)?;
        if codewords.classes() != header.classes || codewords.length() != header.code_length {
            return Err(ModelError::Format("codeword dimensions disagree with header".into()));
        }
        let expected = match header.kind {
            ModelKind::Ecoc => EcocEnsemble::expected_shapes(&header.architecture, header.code_length),
            ModelKind::OneHot => OneHotModel::expected_shapes(&header.architecture, header.classes),
        };
        let shapes: Vec<&Vec<usize>> = header.blocks.iter().map(|b| &b.shape).collect();
        if shapes.len() != expected.len() || shapes.iter().zip(&expected).any(|(a, b)| *a != b) {
            return Err(ModelError::Format("parameter blocks do not match the architecture".into()));
        }
        let mut offset = header_end;
        let mut params = Vec::with_capacity(expected.len());
        for shape in expected {
            let n: usize = shape.iter().product();
            let data = body[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            offset += 8 * n;
            params.push(Arc::new(Tensor::new(shape, data)?));
        }
        if offset != body.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", body.len() - offset)));
        }
        match header.kind {
            ModelKind::Ecoc => Ok(Model::Ecoc(EcocEnsemble::from_params(header.architecture, codewords, params)?)),
            ModelKind::OneHot => Ok(Model::OneHot(OneHotModel::from_params(
                header.architecture,
                header.classes,
                params,
            ))),
        }
    }
}

impl From<EcocEnsemble> for Model {
    fn from(m: EcocEnsemble) -> Self {
        Model::Ecoc(m)
    }
}

impl From<OneHotModel> for Model {
    fn from(m: OneHotModel) -> Self {
        Model::OneHot(m)
    }
}

impl Classifier for Model {
    fn input_shape(&self) -> &[usize] {
        self.as_classifier().input_shape()
    }

    fn decoder(&self) -> Decoder<'_> {
        self.as_classifier().decoder()
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        self.as_classifier().logits_on(tape, x)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    architecture: Architecture,
    classes: usize,
    code_length: usize,
    code_kind: CodeKind,
    codewords: Vec<Vec<i8>>,
    pixel_range: String,
    blocks: Vec<BlockInfo>,
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("digest has 32 bytes")
}

fn check_magic(bytes: &[u8]) -> Result<(), ModelError> {
    let n = bytes.len().min(CHECKPOINT_MAGIC.len());
    if bytes[..n] != CHECKPOINT_MAGIC[..n] {
        if n == CHECKPOINT_MAGIC.len() && bytes[..4] == CHECKPOINT_MAGIC[..4] && bytes[4].is_ascii_digit() {
            return Err(ModelError::Version(char::from(bytes[4]).to_string()));
        }
        return Err(ModelError::Magic);
    }
    if n < CHECKPOINT_MAGIC.len() {
        return Err(ModelError::Truncated {
            expected: CHECKPOINT_MAGIC.len(),
            found: n,
        });
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    Model::from_bytes(&std::fs::read(path)?)
}
