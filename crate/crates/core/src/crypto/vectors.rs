//! Hex test-vector records for the primitives, one per line:
//! `op_name \t hex(in_1),hex(in_2),… \t hex(output)`.
//!
//! Integers are fixed-width big-endian: rails/offset/scalars 1 byte,
//! counters and nonces 8 bytes, lengths 4 bytes. Curve points use
//! [`CurveParams::encode_point`] on the toy curve.

use num_bigint::BigUint;
use thiserror::Error;

use super::{
    ec_point_add, ec_scalar_mul, kdf, keystream, mac_tag, rail_fence_decode, rail_fence_encode, CurveParams,
    CurvePoint, RailFenceParams, SymmetricKey,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorRecord {
    pub op: String,
    pub inputs: Vec<Vec<u8>>,
    pub output: Vec<u8>,
}

impl VectorRecord {
    fn new(op: &str, inputs: Vec<Vec<u8>>, output: Vec<u8>) -> Self {
        Self {
            op: op.to_string(),
            inputs,
            output,
        }
    }

    pub fn to_line(&self) -> String {
        let ins: Vec<String> = self.inputs.iter().map(hex_encode).collect();
        format!("{}\t{}\t{}", self.op, ins.join(","), hex_encode(&self.output))
    }

    pub fn parse(line: &str) -> Result<Self, VectorError> {
        let mut fields = line.split('\t');
        let (Some(op), Some(ins), Some(out), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(VectorError::Malformed(line.to_string()));
        };
        let inputs = if ins.is_empty() {
            Vec::new()
        } else {
            ins.split(',').map(hex_decode).collect::<Result<_, _>>()?
        };
        Ok(Self::new(op, inputs, hex_decode(out)?))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VectorError {
    #[error("malformed vector line: {0:?}")]
    Malformed(String),
    #[error("bad hex field: {0:?}")]
    BadHex(String),
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
    #[error("wrong arity for {0}")]
    Arity(String),
    #[error("invalid input for {op}: {reason}")]
    Input { op: String, reason: String },
}

fn hex_encode(bytes: impl AsRef<[u8]>) -> String {
    bytes.as_ref().iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>, VectorError> {
    if !s.len().is_multiple_of(2) || !s.is_ascii() {
        return Err(VectorError::BadHex(s.to_string()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| VectorError::BadHex(s.to_string())))
        .collect()
}

fn key16(bytes: &[u8], op: &str) -> Result<SymmetricKey, VectorError> {
    let arr: [u8; 16] = bytes.try_into().map_err(|_| VectorError::Input {
        op: op.into(),
        reason: "key must be 16 bytes".into(),
    })?;
    Ok(SymmetricKey::new(arr))
}

fn be_u64(bytes: &[u8], op: &str) -> Result<u64, VectorError> {
    let arr: [u8; 8] = bytes.try_into().map_err(|_| VectorError::Input {
        op: op.into(),
        reason: "expected 8-byte integer".into(),
    })?;
    Ok(u64::from_be_bytes(arr))
}

/// Recomputes a record's output from its inputs through the library.
pub fn evaluate(op: &str, inputs: &[Vec<u8>]) -> Result<Vec<u8>, VectorError> {
    let arity = |n: usize| {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(VectorError::Arity(op.to_string()))
        }
    };
    let bad = |reason: String| VectorError::Input { op: op.into(), reason };
    let curve = CurveParams::toy();
    match op {
        "rail_fence_encode" | "rail_fence_decode" => {
            arity(3)?;
            let (&[rails], &[offset]) = (inputs[1].as_slice(), inputs[2].as_slice()) else {
                return Err(bad("rails and offset are single bytes".into()));
            };
            let params = RailFenceParams::new(rails as usize, offset as usize).map_err(|e| bad(e.to_string()))?;
            Ok(if op == "rail_fence_encode" {
                rail_fence_encode(&inputs[0], &params)
            } else {
                rail_fence_decode(&inputs[0], &params)
            })
        }
        "kdf" => {
            arity(3)?;
            Ok(kdf(&key16(&inputs[0], op)?, &inputs[1], be_u64(&inputs[2], op)?).to_vec())
        }
        "keystream" => {
            arity(3)?;
            let len: [u8; 4] = inputs[2].as_slice().try_into().map_err(|_| bad("length is 4 bytes".into()))?;
            Ok(keystream(
                &key16(&inputs[0], op)?,
                be_u64(&inputs[1], op)?,
                u32::from_be_bytes(len) as usize,
            ))
        }
        "mac_tag" => {
            arity(2)?;
            Ok(mac_tag(&key16(&inputs[0], op)?, &inputs[1]).to_vec())
        }
        "ec_point_add" => {
            arity(2)?;
            let p1 = curve.decode_point(&inputs[0]).map_err(|e| bad(e.to_string()))?;
            let p2 = curve.decode_point(&inputs[1]).map_err(|e| bad(e.to_string()))?;
            let sum = ec_point_add(&curve, &p1, &p2).map_err(|e| bad(e.to_string()))?;
            Ok(curve.encode_point(&sum))
        }
        "ec_scalar_mul" => {
            arity(2)?;
            let k = BigUint::from_bytes_be(&inputs[0]);
            let pt = curve.decode_point(&inputs[1]).map_err(|e| bad(e.to_string()))?;
            let prod = ec_scalar_mul(&curve, &k, &pt).map_err(|e| bad(e.to_string()))?;
            Ok(curve.encode_point(&prod))
        }
        other => Err(VectorError::UnknownOp(other.to_string())),
    }
}

/// Checks a record against the library; `Ok(false)` means the output differs.
pub fn verify_record(rec: &VectorRecord) -> Result<bool, VectorError> {
    Ok(evaluate(&rec.op, &rec.inputs)? == rec.output)
}

fn record(op: &str, inputs: Vec<Vec<u8>>) -> VectorRecord {
    let output = evaluate(op, &inputs).expect("generated vectors use valid inputs");
    VectorRecord::new(op, inputs, output)
}

/// The full deterministic vector set.
pub fn generate() -> Vec<VectorRecord> {
    let mut out = Vec::new();
    let zero = vec![0u8; 16];
    let ones = vec![0xffu8; 16];
    let seq: Vec<u8> = (0u8..16).collect();

    let rf_cases: [(&[u8], u8, u8); 6] = [
        (b"HELLOWORLD", 3, 0),
        (b"HELLOWORLD", 3, 1),
        (b"HELLOWORLD", 4, 5),
        (b"AB", 5, 0),
        (b"single rail", 1, 0),
        (b"", 2, 1),
    ];
    for (m, r, o) in rf_cases {
        let enc = record("rail_fence_encode", vec![m.to_vec(), vec![r], vec![o]]);
        let dec = record("rail_fence_decode", vec![enc.output.clone(), vec![r], vec![o]]);
        out.push(enc);
        out.push(dec);
    }

    for (key, label, ctr) in [
        (&zero, b"ratchet".as_slice(), 1u64),
        (&zero, b"ratchet", 2),
        (&ones, b"reg", 0x0123_4567_89ab_cdef),
        (&seq, b"", 0),
    ] {
        out.push(record("kdf", vec![key.clone(), label.to_vec(), ctr.to_be_bytes().to_vec()]));
    }

    for (key, nonce, len) in [(&zero, 1u64, 16u32), (&zero, 2, 16), (&zero, 1, 40), (&seq, 7, 0), (&ones, 3, 20)] {
        out.push(record(
            "keystream",
            vec![key.clone(), nonce.to_be_bytes().to_vec(), len.to_be_bytes().to_vec()],
        ));
    }

    for (key, msg) in [
        (&zero, b"abc".as_slice()),
        (&zero, b"abc\0"),
        (&ones, b"abc"),
        (&seq, b""),
    ] {
        out.push(record("mac_tag", vec![key.clone(), msg.to_vec()]));
    }

    let curve = CurveParams::toy();
    let g = curve.generator().clone();
    let multiple = |k: u32| ec_scalar_mul(&curve, &BigUint::from(k), &g).expect("generator is on curve");
    for (a, b) in [(1, 1), (1, 0), (3, 16), (2, 5), (7, 12), (9, 9)] {
        out.push(record(
            "ec_point_add",
            vec![curve.encode_point(&multiple(a)), curve.encode_point(&multiple(b))],
        ));
    }
    for k in [0u8, 1, 2, 7, 18, 19, 20, 255] {
        out.push(record("ec_scalar_mul", vec![vec![k], curve.encode_point(&g)]));
    }
    out.push(record(
        "ec_scalar_mul",
        vec![vec![5], curve.encode_point(&CurvePoint::Infinity)],
    ));
    out
}

/// Renders [`generate`] as the vector file text (trailing newline included).
pub fn render() -> String {
    generate().iter().map(|r| r.to_line() + "\n").collect()
}
