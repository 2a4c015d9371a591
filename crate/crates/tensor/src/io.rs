//! Raw tensor blobs: little-endian values, row-major, described by
//! manifest entries.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::float::{DType, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Concatenates tensors into one blob, in iteration order.
pub fn write_blob<'a, F: Real>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<F>)>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: F::DTYPE.as_str().to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in tensor.data() {
            x.write_le(&mut blob);
        }
    }
    (blob, entries)
}

/// Reads one entry, converting from the stored dtype to `F` if needed.
pub fn read_tensor<F: Real>(blob: &[u8], entry: &TensorEntry) -> Result<Tensor<F>> {
    let dtype = DType::parse(&entry.dtype).ok_or_else(|| TensorError::Format(format!("unknown dtype {:?}", entry.dtype)))?;
    let numel: usize = entry.shape.iter().product();
    let width = dtype.size_of();
    let end = entry
        .offset
        .checked_add(numel * width)
        .filter(|&end| end <= blob.len())
        .ok_or_else(|| TensorError::Format(format!("{}: extends past end of blob", entry.name)))?;
    let bytes = &blob[entry.offset..end];
    let data: Vec<F> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| F::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| F::of(f64::read_le(c))).collect(),
    };
    Tensor::new(entry.shape.clone(), data).map_err(|e| TensorError::Format(format!("{}: {e}", entry.name)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn blob_round_trip_is_bitwise(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), split in 1usize..5) {
            let a = Tensor::<f32>::new(vec![vals.len()], vals.clone()).unwrap();
            let b = Tensor::<f32>::full(vec![split, 2], 0.25);
            let (blob, entries) = write_blob([("a", &a), ("b", &b)]);
            prop_assert_eq!(blob.len(), 4 * (vals.len() + 2 * split));
            let a2: Tensor<f32> = read_tensor(&blob, &entries[0]).unwrap();
            let b2: Tensor<f32> = read_tensor(&blob, &entries[1]).unwrap();
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let a = Tensor::<f32>::ones(vec![4]);
        let (blob, entries) = write_blob([("a", &a)]);
        let r: Result<Tensor<f32>> = read_tensor(&blob[..10], &entries[0]);
        assert!(matches!(r, Err(TensorError::Format(_))));
    }

    #[test]
    fn values_are_little_endian_f32() {
        let a = Tensor::<f32>::from_f64(vec![1], &[1.0]).unwrap();
        let (blob, entries) = write_blob([("a", &a)]);
        assert_eq!(blob, 1.0f32.to_le_bytes());
        assert_eq!(entries[0].dtype, "f32");
    }
}
