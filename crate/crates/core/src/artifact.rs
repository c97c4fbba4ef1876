//! Bit-packed mask artifacts.
//!
//! Learned binary masks are pure 0/1 data, so they are stored one bit per
//! element, eight bits to a byte.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic "RMTM" | version u32 = 1 | layer count u32
//! per layer:
//!   name: u16 length + UTF-8
//!   granularity u8 (0 = parameter, 1 = input-channel, 2 = output-channel)
//!   threshold f64
//!   ndim u8 | dims u64 each
//!   bit count u64 | payload ceil(bits / 8) bytes, MSB-first, row-major,
//!   final byte zero-padded
//! metadata:
//!   policy name: u16 length + UTF-8
//!   seed u64
//!   config hash: exactly 32 ASCII hex bytes
//! ```

use crate::error::{Error, Result};
use crate::mask::{Granularity, MaskedLinear};
use crate::tensor::Tensor;
use crate::wire::{self, Reader};

pub const MASK_MAGIC: &[u8; 4] = b"RMTM";
pub const MASK_VERSION: u32 = 1;

/// Pack bits MSB-first: [1,0,1,1,0,0,0,1] becomes 0xB1.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Inverse of `pack_bits`; `n` recovers the unpadded bit count.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Format(format!(
            "{} payload bytes for {} bits",
            bytes.len(),
            n
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(bytes[i / 8] & (0x80 >> (i % 8)) != 0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub threshold: f64,
    pub granularity: Granularity,
    pub bit_count: u64,
    pub payload: Vec<u8>,
}

impl ArtifactLayer {
    pub fn from_layer(layer: &MaskedLinear) -> Self {
        let bits: Vec<bool> = layer.mask_bin().data().iter().map(|&b| b != 0.0).collect();
        ArtifactLayer {
            name: layer.name().to_string(),
            shape: layer.mask_bin().shape().to_vec(),
            threshold: layer.threshold(),
            granularity: layer.granularity(),
            bit_count: bits.len() as u64,
            payload: pack_bits(&bits),
        }
    }

    pub fn bits(&self) -> Result<Vec<bool>> {
        unpack_bits(&self.payload, self.bit_count as usize)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let bits = self.bits()?;
        Tensor::new(
            self.shape.clone(),
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn zero_count(&self) -> Result<usize> {
        Ok(self.bits()?.iter().filter(|&&b| !b).count())
    }

    /// Flat indices of dropped positions.
    pub fn zero_positions(&self) -> Result<Vec<usize>> {
        Ok(self
            .bits()?
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(i, _)| i)
            .collect())
    }
}

/// The durable output of a tuning run: per-layer binary masks plus enough
/// metadata to trace where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskArtifact {
    pub layers: Vec<ArtifactLayer>,
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
}

impl MaskArtifact {
    /// Snapshot the enabled layers of a model.
    pub fn from_layers(
        layers: &[&MaskedLinear],
        policy: impl Into<String>,
        seed: u64,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let hash = config_hash.into();
        validate_hash(&hash)?;
        let recs: Vec<ArtifactLayer> = layers
            .iter()
            .filter(|l| l.enabled())
            .map(|l| ArtifactLayer::from_layer(l))
            .collect();
        if recs.is_empty() {
            return Err(Error::EmptyDomain("artifact of no enabled layers".into()));
        }
        Ok(MaskArtifact { layers: recs, policy: policy.into(), seed, config_hash: hash })
    }

    pub fn sparsity(&self) -> Result<f64> {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for l in &self.layers {
            zeros += l.zero_count()?;
            total += l.bit_count as usize;
        }
        Ok(100.0 * zeros as f64 / total as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        wire::put_u32(&mut out, MASK_VERSION);
        wire::put_u32(&mut out, self.layers.len() as u32);
        for l in &self.layers {
            wire::put_short_string(&mut out, &l.name)?;
            out.push(l.granularity.code());
            wire::put_f64(&mut out, l.threshold);
            out.push(l.shape.len() as u8);
            for &d in &l.shape {
                wire::put_u64(&mut out, d as u64);
            }
            wire::put_u64(&mut out, l.bit_count);
            let expect = (l.bit_count as usize).div_ceil(8);
            if l.payload.len() != expect {
                return Err(Error::Format(format!(
                    "layer '{}': payload of {} bytes for {} bits",
                    l.name,
                    l.payload.len(),
                    l.bit_count
                )));
            }
            out.extend_from_slice(&l.payload);
        }
        wire::put_short_string(&mut out, &self.policy)?;
        wire::put_u64(&mut out, self.seed);
        out.extend_from_slice(self.config_hash.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "mask artifact");
        let magic = r.take(4, "magic")?;
        if magic != MASK_MAGIC {
            return Err(Error::Format(format!(
                "mask artifact: bad magic {:02x?}, expected \"RMTM\"",
                magic
            )));
        }
        let version = r.u32("version")?;
        if version != MASK_VERSION {
            return Err(Error::Format(format!(
                "mask artifact: unsupported version {version}"
            )));
        }
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.short_string("layer name")?;
            let granularity = Granularity::from_code(r.u8("granularity")?)
                .map_err(|e| Error::Format(format!("layer '{name}': {e}")))?;
            let threshold = r.f64("threshold")?;
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let bit_count = r.u64("bit count")?;
            let expect: u64 = shape.iter().map(|&d| d as u64).product();
            if bit_count != expect {
                return Err(Error::Format(format!(
                    "layer '{name}': {bit_count} bits for shape {shape:?}"
                )));
            }
            let payload = r
                .take((bit_count as usize).div_ceil(8), "payload")
                .map_err(|e| Error::Format(format!("layer '{name}': {e}")))?
                .to_vec();
            layers.push(ArtifactLayer { name, shape, threshold, granularity, bit_count, payload });
        }
        let policy = r.short_string("policy")?;
        let seed = r.u64("seed")?;
        let hash_bytes = r.take(32, "config hash")?;
        let config_hash = String::from_utf8(hash_bytes.to_vec())
            .map_err(|_| Error::Format("config hash is not UTF-8".into()))?;
        validate_hash(&config_hash)?;
        r.expect_end()?;
        Ok(MaskArtifact { layers, policy, seed, config_hash })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Install these masks onto a model: named layers get the stored binary
    /// mask and are enabled; everything else is disabled.
    pub fn apply_to(&self, layers: Vec<&mut MaskedLinear>) -> Result<()> {
        use std::collections::BTreeMap;
        let by_name: BTreeMap<&str, &ArtifactLayer> =
            self.layers.iter().map(|l| (l.name.as_str(), l)).collect();
        let mut seen = 0usize;
        for layer in layers {
            match by_name.get(layer.name()) {
                Some(rec) => {
                    if rec.shape != layer.theta().shape() {
                        return Err(Error::Incompatible(format!(
                            "layer '{}': artifact shape {:?} vs model {:?}",
                            layer.name(),
                            rec.shape,
                            layer.theta().shape()
                        )));
                    }
                    layer.set_mask_bin(rec.to_tensor()?)?;
                    layer.set_enabled(true);
                    seen += 1;
                }
                None => layer.set_enabled(false),
            }
        }
        if seen != self.layers.len() {
            return Err(Error::Incompatible(format!(
                "artifact names {} layers, model matched {}",
                self.layers.len(),
                seen
            )));
        }
        Ok(())
    }
}

fn validate_hash(h: &str) -> Result<()> {
    if h.len() != 32 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Format(format!(
            "config hash must be 32 hex bytes, got '{h}'"
        )));
    }
    Ok(())
}

/// Intersection-over-union of the zero-position sets of two artifacts.
/// Both zero sets empty counts as full agreement (1.0).
pub fn mask_iou(a: &MaskArtifact, b: &MaskArtifact) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Incompatible(format!(
            "{} vs {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.name != lb.name || la.shape != lb.shape {
            return Err(Error::Incompatible(format!(
                "layer '{}' {:?} vs '{}' {:?}",
                la.name, la.shape, lb.name, lb.shape
            )));
        }
        let za = la.bits()?;
        let zb = lb.bits()?;
        for (&ba, &bb) in za.iter().zip(&zb) {
            let za = !ba;
            let zb = !bb;
            if za && zb {
                intersection += 1;
            }
            if za || zb {
                union += 1;
            }
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// 128-bit FNV-1a-style digest of a canonical config text, as 32 hex chars.
pub fn config_hash(text: &str) -> String {
    const OFFSET_A: u64 = 0xcbf2_9ce4_8422_2325;
    const OFFSET_B: u64 = 0x6c62_272e_07bb_0142;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut ha = OFFSET_A;
    let mut hb = OFFSET_B;
    for &byte in text.as_bytes() {
        ha = (ha ^ byte as u64).wrapping_mul(PRIME);
        hb = (hb ^ (byte as u64).rotate_left(17)).wrapping_mul(PRIME);
        hb = hb.rotate_left(5);
    }
    format!("{ha:016x}{hb:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn artifact_with(bits_per_layer: Vec<(&str, Vec<bool>)>) -> MaskArtifact {
        let layers = bits_per_layer
            .into_iter()
            .map(|(name, bits)| ArtifactLayer {
                name: name.into(),
                shape: vec![1, bits.len()],
                threshold: 5e-3,
                granularity: Granularity::Parameter,
                bit_count: bits.len() as u64,
                payload: pack_bits(&bits),
            })
            .collect();
        MaskArtifact {
            layers,
            policy: "amt".into(),
            seed: 0,
            config_hash: config_hash("x"),
        }
    }

    #[test]
    fn defined_bit_order() {
        let bits = [true, false, true, true, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0xB1]);
    }

    #[test]
    fn nine_bits_pad_with_zeros() {
        let bits = vec![true; 9];
        let packed = pack_bits(&bits);
        assert_eq!(packed.len(), 2);
        assert_eq!(packed[1], 0x80); // one data bit then 7 zero pad bits
        assert_eq!(unpack_bits(&packed, 9).unwrap(), bits);
    }

    #[test]
    fn file_round_trip() {
        let a = artifact_with(vec![
            ("block0.attn.wq", vec![true, false, true]),
            ("proj", vec![false, false, true, true]),
        ]);
        let bytes = a.to_bytes().unwrap();
        let back = MaskArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(a, back);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_rejected() {
        let a = artifact_with(vec![("l", vec![true])]);
        let mut bytes = a.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(MaskArtifact::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_rejected() {
        let a = artifact_with(vec![("l", vec![true])]);
        let mut bytes = a.to_bytes().unwrap();
        bytes[4] = 9;
        let err = MaskArtifact::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_names_the_layer() {
        let a = artifact_with(vec![("block1.mlp.w2", vec![true; 64])]);
        let bytes = a.to_bytes().unwrap();
        // cut into the layer payload (the trailing 45 bytes are metadata)
        let err = MaskArtifact::from_bytes(&bytes[..bytes.len() - 50]).unwrap_err();
        assert!(err.to_string().contains("block1.mlp.w2"), "{err}");
    }

    #[test]
    fn zero_count_matches_payload_popcount() {
        let bits = vec![true, false, false, true, false, true, true, true, false];
        let a = artifact_with(vec![("l", bits.clone())]);
        let ones: u32 = a.layers[0].payload.iter().map(|b| b.count_ones()).sum();
        let zeros = a.layers[0].zero_count().unwrap();
        assert_eq!(ones as usize, bits.len() - zeros);
    }

    #[test]
    fn iou_identical_is_one() {
        let a = artifact_with(vec![("l", vec![true, false, true, false])]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = artifact_with(vec![("l", vec![false, true, true, true])]);
        let b = artifact_with(vec![("l", vec![true, false, false, false])]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_set_arithmetic() {
        // zeros at {1,2,3} vs {2,3,4}: |{2,3}| / |{1,2,3,4}| = 0.5
        let a = artifact_with(vec![("l", vec![true, false, false, false, true, true])]);
        let b = artifact_with(vec![("l", vec![true, true, false, false, false, true])]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn iou_empty_zero_sets_is_one() {
        let a = artifact_with(vec![("l", vec![true, true])]);
        let b = artifact_with(vec![("l", vec![true, true])]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn iou_shape_mismatch_rejected() {
        let a = artifact_with(vec![("l", vec![true, true])]);
        let b = artifact_with(vec![("l", vec![true, true, true])]);
        assert!(matches!(mask_iou(&a, &b), Err(Error::Incompatible(_))));
    }

    #[test]
    fn hash_shape() {
        let h = config_hash("policy = amt\n");
        assert_eq!(h.len(), 32);
        assert!(h.bytes().all(|b| b.is_ascii_hexdigit()));
        assert_ne!(h, config_hash("policy = mmt\n"));
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..256)) {
            let packed = pack_bits(&bits);
            let back = unpack_bits(&packed, bits.len()).unwrap();
            prop_assert_eq!(&back, &bits);
            prop_assert_eq!(pack_bits(&back), packed);
        }

        #[test]
        fn artifact_bytes_round_trip(
            bits in proptest::collection::vec(any::<bool>(), 1..200),
            seed in any::<u64>(),
        ) {
            let mut a = artifact_with(vec![("layer", bits)]);
            a.seed = seed;
            let bytes = a.to_bytes().unwrap();
            let back = MaskArtifact::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
