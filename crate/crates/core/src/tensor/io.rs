//! Tensor files: one JSON header line followed by little-endian values.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DType, Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: [usize; 4],
    pub dtype: DType,
    pub order: String,
}

pub fn write_tensor<T: Real, W: Write>(mut out: W, t: &Tensor<T>) -> Result<()> {
    let header = TensorHeader { shape: t.shape().to_array(), dtype: T::DTYPE, order: "nchw".into() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a tensor stored in either precision and converts it to `T`.
pub fn read_tensor<T: Real, R: BufRead>(mut input: R) -> Result<Tensor<T>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("bad tensor header: {e}")))?;
    if header.order != "nchw" {
        return Err(Error::Format(format!("unsupported tensor order `{}`", header.order)));
    }
    let shape = Shape::from(header.shape);
    let mut bytes = vec![0u8; shape.len() * header.dtype.size()];
    input.read_exact(&mut bytes)?;
    let data = match header.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
    };
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 24)) {
            let t = Tensor::from_vec([2, 3, 2, 2], vals).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let text = String::from_utf8_lossy(&buf[..buf.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        assert_eq!(text, r#"{"shape":[1,2,1,1],"dtype":"f64","order":"nchw"}"#);
        assert_eq!(buf.len(), text.len() + 1 + 16);
    }
}
