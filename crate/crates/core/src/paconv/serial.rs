//! Layer parameter files.
//!
//! JSON: one document with a `format_version`, the modes, the bank shape with a
//! row-major value array (matrix, then input row, then output column), and the
//! ScoreNet layers in order, each with a row-major `in × out` weight array.
//!
//! Binary mirror, little-endian, same value ordering:
//! `b"PACV"`, `u32 version`, `u8 agg`, `u8 relation`, `u8 norm`, `u8 0`,
//! `u32 M`, `u32 C_in`, `u32 C_out`, bank `f64`s, `u32 layer count`, then per
//! layer `u32 in`, `u32 out`, weight `f64`s, bias `f64`s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RelationMode;
use crate::paconv::{Affine, AggMode, NormMode, PAConvLayer, ScoreNet, WeightBank};
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PACV";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankDoc {
    pub m: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetDoc {
    pub d_in: usize,
    pub norm: NormMode,
    pub layers: Vec<Affine<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub format_version: u32,
    pub agg: AggMode,
    pub relation: RelationMode,
    pub bank: BankDoc,
    pub scorenet: ScoreNetDoc,
}

impl LayerDoc {
    pub fn from_layer<T: Real>(layer: &PAConvLayer<T>) -> Self {
        let bank = &layer.bank;
        Self {
            format_version: FORMAT_VERSION,
            agg: layer.agg,
            relation: layer.relation,
            bank: BankDoc {
                m: bank.m(),
                c_in: bank.c_in(),
                c_out: bank.c_out(),
                values: bank.as_slice().iter().map(|v| v.as_f64()).collect(),
            },
            scorenet: ScoreNetDoc {
                d_in: layer.scorenet.d_in(),
                norm: layer.scorenet.norm(),
                layers: layer.scorenet.layers().iter().map(Affine::cast).collect(),
            },
        }
    }

    pub fn to_layer<T: Real>(&self) -> Result<PAConvLayer<T>> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::input(format!(
                "unsupported layer format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let b = &self.bank;
        let bank = WeightBank::from_vec(b.m, b.c_in, b.c_out, b.values.iter().map(|&v| T::lit(v)).collect())?;
        let net = ScoreNet::from_layers(self.scorenet.layers.iter().map(Affine::cast).collect(), self.scorenet.norm)?;
        if net.d_in() != self.scorenet.d_in {
            return Err(Error::input("ScoreNet d_in does not match its first layer"));
        }
        PAConvLayer::new(bank, net, self.agg, self.relation)
    }
}

pub fn layer_to_json<T: Real>(layer: &PAConvLayer<T>) -> String {
    serde_json::to_string_pretty(&LayerDoc::from_layer(layer)).expect("layer documents always serialize")
}

pub fn layer_from_json<T: Real>(text: &str) -> Result<PAConvLayer<T>> {
    let doc: LayerDoc = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
    doc.to_layer()
}

fn agg_code(a: AggMode) -> u8 {
    AggMode::ALL.iter().position(|&x| x == a).unwrap() as u8
}

fn norm_code(n: NormMode) -> u8 {
    NormMode::ALL.iter().position(|&x| x == n).unwrap() as u8
}

fn relation_code(r: RelationMode) -> u8 {
    RelationMode::ALL.iter().position(|&x| x == r).unwrap() as u8
}

pub fn layer_to_binary<T: Real>(layer: &PAConvLayer<T>) -> Vec<u8> {
    let doc = LayerDoc::from_layer(layer);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&[agg_code(doc.agg), relation_code(doc.relation), norm_code(doc.scorenet.norm), 0]);
    for d in [doc.bank.m, doc.bank.c_in, doc.bank.c_out] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &doc.bank.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(doc.scorenet.layers.len() as u32).to_le_bytes());
    for l in &doc.scorenet.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("unexpected end of data, needed {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn bad(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }
}

pub fn layer_from_binary<T: Real>(bytes: &[u8]) -> Result<PAConvLayer<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = c.u32()? as u32;
    let codes = c.take(4)?;
    let agg = *AggMode::ALL.get(codes[0] as usize).ok_or_else(|| c.bad("bad aggregation code"))?;
    let relation = *RelationMode::ALL
        .get(codes[1] as usize)
        .ok_or_else(|| c.bad("bad relation code"))?;
    let norm = *NormMode::ALL.get(codes[2] as usize).ok_or_else(|| c.bad("bad norm code"))?;
    let (m, c_in, c_out) = (c.u32()?, c.u32()?, c.u32()?);
    let values = c.f64s(m * c_in * c_out)?;
    let n_layers = c.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let (in_dim, out_dim) = (c.u32()?, c.u32()?);
        let weight = c.f64s(in_dim * out_dim)?;
        let bias = c.f64s(out_dim)?;
        layers.push(Affine {
            in_dim,
            out_dim,
            weight,
            bias,
        });
    }
    if c.pos != bytes.len() {
        return Err(c.bad("trailing bytes"));
    }
    let d_in = layers.first().map_or(0, |l| l.in_dim);
    LayerDoc {
        format_version: version,
        agg,
        relation,
        bank: BankDoc { m, c_in, c_out, values },
        scorenet: ScoreNetDoc { d_in, norm, layers },
    }
    .to_layer()
}
