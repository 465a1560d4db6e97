//! Checkpoint merging: a minimal named-tensor container plus weighted
//! elementwise averaging of two compatible checkpoints.
//!
//! Container layout, bit-exact: an 8-byte little-endian unsigned length N,
//! then N bytes of UTF-8 JSON mapping each tensor name to
//! `{dtype, shape, offset, len}` (offsets relative to the payload start),
//! then the concatenated raw payload. Canonical files order tensors by
//! name with contiguous offsets, which makes save∘load byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f16")]
    F16,
}

impl Dtype {
    pub fn width(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        })
    }
}

/// One named tensor: row-major little-endian bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} must be non-empty with positive dims",
                self.shape
            )));
        }
        let expected = self.element_count() * self.dtype.width();
        if self.data.len() != expected {
            return Err(Error::Format(format!(
                "tensor {name}: {} data bytes, expected {expected}",
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Decodes to f32 regardless of storage dtype.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// Encodes f64 values into a tensor of the given dtype, rounding to
    /// nearest even.
    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Tensor {
        let data = match dtype {
            Dtype::F32 => values
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
            Dtype::F16 => values
                .iter()
                .flat_map(|&v| f16::from_f64(v).to_le_bytes())
                .collect(),
        };
        Tensor { dtype, shape, data }
    }

    pub fn from_f32_slice(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Tensor {
        let doubles: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Tensor::from_f64(dtype, shape, &doubles)
    }
}

/// A checkpoint: named tensors, unique names, non-empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    pub entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Header map that rejects duplicate tensor names while parsing (a plain
/// JSON map type would silently keep the last duplicate).
struct Header(BTreeMap<String, HeaderEntry>);

impl<'de> Deserialize<'de> for Header {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = Header;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of tensor name to descriptor")
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(
                self,
                mut access: A,
            ) -> std::result::Result<Header, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((name, entry)) = access.next_entry::<String, HeaderEntry>()? {
                    if out.insert(name.clone(), entry).is_some() {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate tensor name: {name}"
                        )));
                    }
                }
                Ok(Header(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

impl TensorMap {
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Format("empty container".to_string()));
        }
        for (name, tensor) in &self.entries {
            tensor.validate(name)?;
        }
        Ok(())
    }

    /// Serializes to the canonical byte layout: tensors in name order,
    /// contiguous payload offsets.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut header = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, tensor) in &self.entries {
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: tensor.dtype,
                    shape: tensor.shape.clone(),
                    offset: payload.len() as u64,
                    len: tensor.data.len() as u64,
                },
            );
            payload.extend_from_slice(&tensor.data);
        }
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "container too short: {} bytes, need at least 8",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[8..];
        if rest.len() < header_len {
            return Err(Error::Format(format!(
                "header says {header_len} bytes but only {} remain",
                rest.len()
            )));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::Format(format!("container header: {e}")))?;
        if header.0.is_empty() {
            return Err(Error::Format("empty container".to_string()));
        }
        let payload = &rest[header_len..];
        let mut expected_payload = 0usize;
        let mut entries = BTreeMap::new();
        for (name, entry) in header.0 {
            let offset = entry.offset as usize;
            let len = entry.len as usize;
            let end = offset.checked_add(len).ok_or_else(|| {
                Error::Format(format!("tensor {name}: offset overflow"))
            })?;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor {name}: payload truncated ({} bytes present, tensor ends at {end})",
                    payload.len()
                )));
            }
            let tensor = Tensor {
                dtype: entry.dtype,
                shape: entry.shape,
                data: payload[offset..end].to_vec(),
            };
            tensor.validate(&name)?;
            expected_payload += len;
            entries.insert(name, tensor);
        }
        if expected_payload != payload.len() {
            return Err(Error::Format(format!(
                "payload size mismatch: {} bytes present, tensors cover {expected_payload}",
                payload.len()
            )));
        }
        Ok(TensorMap { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<TensorMap> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        TensorMap::from_bytes(&bytes)
    }
}

/// Weighted elementwise average of two compatible checkpoints:
/// `out = weight_a · a + (1 − weight_a) · b`, accumulated in double
/// precision and cast back to each tensor's stored dtype. The endpoint
/// weights 1 and 0 copy the corresponding input bit-for-bit.
pub fn merge(a: &TensorMap, b: &TensorMap, weight_a: f64) -> Result<TensorMap> {
    if !(0.0..=1.0).contains(&weight_a) {
        return Err(Error::config(format!(
            "merge weight must be in [0, 1], got {weight_a}"
        )));
    }
    a.validate()?;
    b.validate()?;
    let names_a: BTreeSet<&String> = a.entries.keys().collect();
    let names_b: BTreeSet<&String> = b.entries.keys().collect();
    if names_a != names_b {
        let diff: Vec<&str> = names_a
            .symmetric_difference(&names_b)
            .map(|s| s.as_str())
            .collect();
        return Err(Error::data(format!(
            "merge: tensor name sets differ: {}",
            diff.join(", ")
        )));
    }
    if weight_a == 1.0 {
        return Ok(a.clone());
    }
    if weight_a == 0.0 {
        return Ok(b.clone());
    }
    let mut out = TensorMap::default();
    for (name, ta) in &a.entries {
        let tb = &b.entries[name];
        if ta.shape != tb.shape {
            return Err(Error::data(format!(
                "merge: tensor {name}: shape {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        if ta.dtype != tb.dtype {
            return Err(Error::data(format!(
                "merge: tensor {name}: dtype {} vs {}",
                ta.dtype, tb.dtype
            )));
        }
        let va = ta.to_f32();
        let vb = tb.to_f32();
        let merged: Vec<f64> = va
            .iter()
            .zip(&vb)
            .map(|(&x, &y)| weight_a * x as f64 + (1.0 - weight_a) * y as f64)
            .collect();
        out.insert(name, Tensor::from_f64(ta.dtype, ta.shape.clone(), &merged));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tensor_f32(shape: Vec<usize>, values: &[f32]) -> Tensor {
        Tensor::from_f32_slice(Dtype::F32, shape, values)
    }

    fn random_map(rng: &mut impl Rng, dtype: Dtype, tensors: usize) -> TensorMap {
        let mut map = TensorMap::default();
        for i in 0..tensors {
            let rows = rng.gen_range(1..=4);
            let cols = rng.gen_range(1..=5);
            let values: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-4.0..4.0)).collect();
            map.insert(
                &format!("layer.{i}.weight"),
                Tensor::from_f32_slice(dtype, vec![rows, cols], &values),
            );
        }
        map
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut map = TensorMap::default();
        map.insert("b", tensor_f32(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        map.insert("a", Tensor::from_f32_slice(Dtype::F16, vec![3], &[0.5, -1.25, 8.0]));
        let bytes = map.to_bytes().unwrap();
        let loaded = TensorMap::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, map);
        assert_eq!(loaded.to_bytes().unwrap(), bytes, "canonical round trip");
    }

    #[test]
    fn save_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.tensors");
        let mut map = TensorMap::default();
        map.insert("w", tensor_f32(vec![2], &[1.5, -2.5]));
        map.save(&path).unwrap();
        assert_eq!(TensorMap::load(&path).unwrap(), map);
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let mut map = TensorMap::default();
        map.insert("alpha", tensor_f32(vec![4], &[1.0, 2.0, 3.0, 4.0]));
        let mut bytes = map.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = TensorMap::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn empty_container_rejected_on_save() {
        let err = TensorMap::default().to_bytes().unwrap_err();
        assert!(err.to_string().contains("empty container"));
    }

    #[test]
    fn duplicate_name_in_header_rejected() {
        let payload = [0u8; 8];
        let header = br#"{"t":{"dtype":"f32","shape":[1],"offset":0,"len":4},"t":{"dtype":"f32","shape":[1],"offset":4,"len":4}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&payload);
        let err = TensorMap::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("duplicate tensor name"), "{err}");
    }

    #[test]
    fn payload_size_mismatch_rejected() {
        let mut map = TensorMap::default();
        map.insert("w", tensor_f32(vec![1], &[1.0]));
        let mut bytes = map.to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = TensorMap::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn merge_scalar_mean() {
        let mut a = TensorMap::default();
        a.insert("x", tensor_f32(vec![1], &[2.0]));
        let mut b = TensorMap::default();
        b.insert("x", tensor_f32(vec![1], &[4.0]));
        let out = merge(&a, &b, 0.5).unwrap();
        assert_eq!(out.entries["x"].to_f32(), vec![3.0]);
    }

    #[test]
    fn merge_with_itself_is_identity() {
        let mut rng = crate::seeding::seeded_rng(7, "merge-ident");
        let map = random_map(&mut rng, Dtype::F32, 5);
        for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let out = merge(&map, &map, w).unwrap();
            assert_eq!(out, map, "weight {w}");
        }
    }

    #[test]
    fn merge_matches_elementwise_oracle_exactly_f32() {
        let mut rng = crate::seeding::seeded_rng(11, "merge-oracle");
        for trial in 0..20 {
            let a = random_map(&mut rng, Dtype::F32, 3);
            let mut b = TensorMap::default();
            for (name, ta) in &a.entries {
                let values: Vec<f32> = (0..ta.element_count())
                    .map(|_| rng.gen_range(-4.0..4.0))
                    .collect();
                b.insert(name, Tensor::from_f32_slice(Dtype::F32, ta.shape.clone(), &values));
            }
            let w = rng.gen_range(0.01..0.99);
            let out = merge(&a, &b, w).unwrap();
            for (name, to) in &out.entries {
                let va = a.entries[name].to_f32();
                let vb = b.entries[name].to_f32();
                let got = to.to_f32();
                for i in 0..va.len() {
                    let oracle = (w * va[i] as f64 + (1.0 - w) * vb[i] as f64) as f32;
                    assert_eq!(got[i], oracle, "trial {trial} tensor {name} [{i}]");
                }
            }
        }
    }

    #[test]
    fn merge_endpoints_are_bitwise_copies() {
        let mut rng = crate::seeding::seeded_rng(13, "merge-endpoints");
        let a = random_map(&mut rng, Dtype::F16, 4);
        let mut b = TensorMap::default();
        for (name, ta) in &a.entries {
            let values: Vec<f32> = (0..ta.element_count()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            b.insert(name, Tensor::from_f32_slice(Dtype::F16, ta.shape.clone(), &values));
        }
        assert_eq!(merge(&a, &b, 1.0).unwrap().to_bytes().unwrap(), a.to_bytes().unwrap());
        assert_eq!(merge(&a, &b, 0.0).unwrap().to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn merge_commutes_at_half() {
        let mut rng = crate::seeding::seeded_rng(17, "merge-comm");
        let a = random_map(&mut rng, Dtype::F32, 4);
        let mut b = TensorMap::default();
        for (name, ta) in &a.entries {
            let values: Vec<f32> = (0..ta.element_count()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            b.insert(name, Tensor::from_f32_slice(Dtype::F32, ta.shape.clone(), &values));
        }
        let ab = merge(&a, &b, 0.5).unwrap().to_bytes().unwrap();
        let ba = merge(&b, &a, 0.5).unwrap().to_bytes().unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn merge_linearity_within_one_ulp() {
        let mut rng = crate::seeding::seeded_rng(19, "merge-linear");
        let a = random_map(&mut rng, Dtype::F32, 3);
        let mut b = TensorMap::default();
        let mut a2 = TensorMap::default();
        let mut b2 = TensorMap::default();
        for (name, ta) in &a.entries {
            let values: Vec<f32> = (0..ta.element_count()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            b.insert(name, Tensor::from_f32_slice(Dtype::F32, ta.shape.clone(), &values));
            let doubled_b: Vec<f32> = values.iter().map(|v| v * 2.0).collect();
            b2.insert(name, Tensor::from_f32_slice(Dtype::F32, ta.shape.clone(), &doubled_b));
            let doubled_a: Vec<f32> = ta.to_f32().iter().map(|v| v * 2.0).collect();
            a2.insert(name, Tensor::from_f32_slice(Dtype::F32, ta.shape.clone(), &doubled_a));
        }
        let w = 0.37;
        let merged_doubled = merge(&a2, &b2, w).unwrap();
        let doubled_merged = merge(&a, &b, w).unwrap();
        for (name, t) in &merged_doubled.entries {
            let lhs = t.to_f32();
            let rhs: Vec<f32> = doubled_merged.entries[name].to_f32().iter().map(|v| v * 2.0).collect();
            for i in 0..lhs.len() {
                let ulp_diff = (lhs[i].to_bits() as i64 - rhs[i].to_bits() as i64).abs();
                assert!(ulp_diff <= 1, "{name}[{i}]: {} vs {} ({ulp_diff} ulp)", lhs[i], rhs[i]);
            }
        }
    }

    #[test]
    fn merge_name_mismatch_lists_difference() {
        let mut a = TensorMap::default();
        a.insert("shared", tensor_f32(vec![1], &[1.0]));
        a.insert("only_in_a", tensor_f32(vec![1], &[1.0]));
        let mut b = TensorMap::default();
        b.insert("shared", tensor_f32(vec![1], &[2.0]));
        b.insert("only_in_b", tensor_f32(vec![1], &[2.0]));
        let err = merge(&a, &b, 0.5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("only_in_a") && msg.contains("only_in_b"), "{msg}");
    }

    #[test]
    fn merge_shape_and_dtype_mismatch_name_tensor() {
        let mut a = TensorMap::default();
        a.insert("w", tensor_f32(vec![2], &[1.0, 2.0]));
        let mut b = TensorMap::default();
        b.insert("w", tensor_f32(vec![1, 2], &[1.0, 2.0]));
        let err = merge(&a, &b, 0.5).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");

        let mut c = TensorMap::default();
        c.insert("w", Tensor::from_f32_slice(Dtype::F16, vec![2], &[1.0, 2.0]));
        let err = merge(&a, &c, 0.5).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn merge_rejects_out_of_range_weight() {
        let mut a = TensorMap::default();
        a.insert("w", tensor_f32(vec![1], &[1.0]));
        assert!(merge(&a, &a, 1.5).is_err());
        assert!(merge(&a, &a, -0.1).is_err());
    }

    #[test]
    fn f16_merge_is_within_one_ulp_of_oracle() {
        let mut rng = crate::seeding::seeded_rng(23, "merge-f16");
        let a = random_map(&mut rng, Dtype::F16, 3);
        let mut b = TensorMap::default();
        for (name, ta) in &a.entries {
            let values: Vec<f32> = (0..ta.element_count()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            b.insert(name, Tensor::from_f32_slice(Dtype::F16, ta.shape.clone(), &values));
        }
        let w = 0.5;
        let out = merge(&a, &b, w).unwrap();
        for (name, to) in &out.entries {
            let va = a.entries[name].to_f32();
            let vb = b.entries[name].to_f32();
            let got_bits: Vec<u16> = to
                .data
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            for i in 0..va.len() {
                let oracle = f16::from_f64(w * va[i] as f64 + (1.0 - w) * vb[i] as f64);
                let ulp = (got_bits[i] as i32 - oracle.to_bits() as i32).abs();
                assert!(ulp <= 1, "{name}[{i}]: {ulp} ulp");
            }
        }
    }
}
