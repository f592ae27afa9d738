use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;

use super::CryptoError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CurvePoint {
    Infinity,
    Affine { x: BigUint, y: BigUint },
}

impl CurvePoint {
    pub fn affine(x: u64, y: u64) -> Self {
        CurvePoint::Affine {
            x: BigUint::from(x),
            y: BigUint::from(y),
        }
    }

    pub fn is_infinity(&self) -> bool {
        matches!(self, CurvePoint::Infinity)
    }

    pub fn x(&self) -> Option<&BigUint> {
        match self {
            CurvePoint::Infinity => None,
            CurvePoint::Affine { x, .. } => Some(x),
        }
    }
}

impl std::fmt::Display for CurvePoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurvePoint::Infinity => write!(f, "O"),
            CurvePoint::Affine { x, y } => write!(f, "({x}, {y})"),
        }
    }
}

/// Short-Weierstrass curve `y² = x³ + ax + b` over `F_p` with a generator of prime order `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveParams {
    p: BigUint,
    a: BigUint,
    b: BigUint,
    g: CurvePoint,
    n: BigUint,
}

impl CurveParams {
    pub fn new(p: BigUint, a: BigUint, b: BigUint, g: CurvePoint, n: BigUint) -> Result<Self, CryptoError> {
        if p < BigUint::from(3u8) {
            return Err(CryptoError::InvalidCurve("field prime must exceed 2"));
        }
        if n.is_zero() {
            return Err(CryptoError::InvalidCurve("generator order must be positive"));
        }
        let a = a % &p;
        let b = b % &p;
        let disc = (BigUint::from(4u8) * a.modpow(&BigUint::from(3u8), &p) + BigUint::from(27u8) * &b * &b) % &p;
        if disc.is_zero() {
            return Err(CryptoError::InvalidCurve("singular curve (4a³ + 27b² ≡ 0)"));
        }
        let params = Self { p, a, b, g: g.clone(), n };
        if g.is_infinity() || !params.is_on_curve(&g) {
            return Err(CryptoError::InvalidCurve("generator is not an affine curve point"));
        }
        if !ec_scalar_mul(&params, &params.n, &g)?.is_infinity() {
            return Err(CryptoError::InvalidCurve("n·G is not the point at infinity"));
        }
        Ok(params)
    }

    /// `y² = x³ + 2x + 2` over `F_17`, `G = (5, 1)`, `n = 19`.
    pub fn toy() -> Self {
        Self::new(
            BigUint::from(17u8),
            BigUint::from(2u8),
            BigUint::from(2u8),
            CurvePoint::affine(5, 1),
            BigUint::from(19u8),
        )
        .expect("toy curve constants are valid")
    }

    pub fn secp256k1() -> Self {
        let hex = |s: &str| BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex constant");
        Self::new(
            hex("fffffffffffffffffffffffffffffffffffffffffffffffffffffffefffffc2f"),
            BigUint::zero(),
            BigUint::from(7u8),
            CurvePoint::Affine {
                x: hex("79be667ef9dcbbac55a06295ce870b07029bfcdb2dce28d959f2815b16f81798"),
                y: hex("483ada7726a3c4655da4fbfc0e1108a8fd17b448a68554199c47d08ffb10d4b8"),
            },
            hex("fffffffffffffffffffffffffffffffebaaedce6af48a03bbfd25e8cd0364141"),
        )
        .expect("secp256k1 constants are valid")
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn a(&self) -> &BigUint {
        &self.a
    }

    pub fn b(&self) -> &BigUint {
        &self.b
    }

    pub fn generator(&self) -> &CurvePoint {
        &self.g
    }

    pub fn order(&self) -> &BigUint {
        &self.n
    }

    /// Bytes needed for one field element.
    pub fn field_len(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    pub fn is_on_curve(&self, pt: &CurvePoint) -> bool {
        match pt {
            CurvePoint::Infinity => true,
            CurvePoint::Affine { x, y } => {
                if x >= &self.p || y >= &self.p {
                    return false;
                }
                let lhs = (y * y) % &self.p;
                let rhs = (x * x * x + &self.a * x + &self.b) % &self.p;
                lhs == rhs
            }
        }
    }

    pub fn negate(&self, pt: &CurvePoint) -> CurvePoint {
        match pt {
            CurvePoint::Infinity => CurvePoint::Infinity,
            CurvePoint::Affine { x, y } => CurvePoint::Affine {
                x: x.clone(),
                y: (&self.p - y) % &self.p,
            },
        }
    }

    /// Uniform scalar in `[1, n − 1]`.
    pub fn random_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_range(&BigUint::one(), &self.n)
    }

    /// Fixed-width big-endian encoding of a field element.
    pub fn encode_field(&self, v: &BigUint) -> Vec<u8> {
        let raw = v.to_bytes_be();
        let width = self.field_len();
        let mut out = vec![0u8; width.saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    /// `00` for infinity, otherwise `04 ∥ x ∥ y` at field width.
    pub fn encode_point(&self, pt: &CurvePoint) -> Vec<u8> {
        match pt {
            CurvePoint::Infinity => vec![0],
            CurvePoint::Affine { x, y } => {
                let mut out = vec![4];
                out.extend(self.encode_field(x));
                out.extend(self.encode_field(y));
                out
            }
        }
    }

    pub fn decode_point(&self, bytes: &[u8]) -> Result<CurvePoint, CryptoError> {
        let width = self.field_len();
        let pt = match bytes {
            [0] => CurvePoint::Infinity,
            [4, rest @ ..] if rest.len() == 2 * width => CurvePoint::Affine {
                x: BigUint::from_bytes_be(&rest[..width]),
                y: BigUint::from_bytes_be(&rest[width..]),
            },
            _ => return Err(CryptoError::BadPointEncoding),
        };
        if !self.is_on_curve(&pt) {
            return Err(CryptoError::OffCurve);
        }
        Ok(pt)
    }

    fn sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + &self.p - (b % &self.p)) % &self.p
    }

    /// Modular inverse via the extended Euclidean algorithm.
    fn inv(&self, v: &BigUint) -> BigUint {
        let m = BigInt::from(self.p.clone());
        let e = BigInt::from(v.clone()).extended_gcd(&m);
        debug_assert!(e.gcd.is_one());
        e.x.mod_floor(&m).to_biguint().expect("mod_floor is non-negative")
    }
}

pub fn ec_point_add(params: &CurveParams, p1: &CurvePoint, p2: &CurvePoint) -> Result<CurvePoint, CryptoError> {
    if !params.is_on_curve(p1) || !params.is_on_curve(p2) {
        return Err(CryptoError::OffCurve);
    }
    Ok(add_unchecked(params, p1, p2))
}

fn add_unchecked(c: &CurveParams, p1: &CurvePoint, p2: &CurvePoint) -> CurvePoint {
    let (x1, y1, x2, y2) = match (p1, p2) {
        (CurvePoint::Infinity, q) | (q, CurvePoint::Infinity) => return q.clone(),
        (CurvePoint::Affine { x: x1, y: y1 }, CurvePoint::Affine { x: x2, y: y2 }) => (x1, y1, x2, y2),
    };
    let p = &c.p;
    let slope = if x1 == x2 {
        if ((y1 + y2) % p).is_zero() {
            return CurvePoint::Infinity;
        }
        // tangent
        let num = (BigUint::from(3u8) * x1 * x1 + &c.a) % p;
        let den = (BigUint::from(2u8) * y1) % p;
        num * c.inv(&den) % p
    } else {
        c.sub(y2, y1) * c.inv(&c.sub(x2, x1)) % p
    };
    let x3 = c.sub(&c.sub(&(&slope * &slope % p), x1), x2);
    let y3 = c.sub(&(&slope * c.sub(x1, &x3) % p), y1);
    CurvePoint::Affine { x: x3, y: y3 }
}

/// Left-to-right double-and-add.
pub fn ec_scalar_mul(params: &CurveParams, k: &BigUint, pt: &CurvePoint) -> Result<CurvePoint, CryptoError> {
    if !params.is_on_curve(pt) {
        return Err(CryptoError::OffCurve);
    }
    let mut acc = CurvePoint::Infinity;
    for i in (0..k.bits()).rev() {
        acc = add_unchecked(params, &acc, &acc);
        if k.bit(i) {
            acc = add_unchecked(params, &acc, pt);
        }
    }
    Ok(acc)
}
