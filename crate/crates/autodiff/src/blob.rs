use crate::{Real, Result, Tensor, TensorError};

/// Concatenates tensors as little-endian `f32` values in the given order.
pub fn encode_f32_le<T: Real>(tensors: &[&Tensor<T>]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(total * 4);
    for t in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Splits a little-endian `f32` blob into tensors of the given shapes.
/// The blob must be consumed exactly.
pub fn decode_f32_le<T: Real>(bytes: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(TensorError::Invalid {
            op: "decode_f32_le",
            message: format!("blob has {} bytes, manifest describes {expected}", bytes.len()),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            offset += 4 * n;
            Tensor::new(shape.clone(), data)
        })
        .collect()
}
