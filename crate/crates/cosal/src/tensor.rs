//! Dense row-major tensors. Ops always produce fresh buffers; there is no
//! view or aliasing machinery.

use crate::error::{CosalError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use std::io::{Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CosalError::shape(format!("zero-size dimension in {shape:?}")));
        }
        Ok(())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        Self::check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn randn(shape: &[usize], seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::randn_with(shape, &mut rng)
    }

    pub fn randn_with(shape: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f(rng.normal())).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// 0-dim scalar tensor.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// In-place accumulate; shapes must match exactly.
    pub fn accumulate(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f(x.to_f())).collect(),
        }
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(CosalError::shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Elementwise binary op with trailing-dim broadcasting.
pub fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let out_shape = broadcast_shapes(&a.shape, &b.shape)?;
    if a.shape == out_shape && b.shape == out_shape {
        // Fast path: no broadcasting.
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape: out_shape, data });
    }
    let rank = out_shape.len();
    let pad = |shape: &[usize]| -> Vec<usize> {
        let mut s = vec![1; rank - shape.len()];
        s.extend_from_slice(shape);
        s
    };
    let sa = pad(&a.shape);
    let sb = pad(&b.shape);
    let stride_for = |shape: &[usize]| -> Vec<usize> {
        let mut st = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            st[i] = st[i + 1] * shape[i + 1];
        }
        // Zero stride on broadcast axes.
        for i in 0..rank {
            if shape[i] == 1 {
                st[i] = 0;
            }
        }
        st
    };
    let sta = stride_for(&sa);
    let stb = stride_for(&sb);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[off_a], b.data[off_b]));
        // Odometer increment over out_shape.
        for d in (0..rank).rev() {
            idx[d] += 1;
            off_a += sta[d];
            off_b += stb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= sta[d] * out_shape[d];
            off_b -= stb[d] * out_shape[d];
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Sum `grad` (shaped like the broadcast output) back down to `target_shape`.
/// This is the adjoint of broadcasting.
pub fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, target_shape: &[usize]) -> Tensor<S> {
    if grad.shape == target_shape {
        return grad.clone();
    }
    let rank = grad.shape.len();
    let mut padded = vec![1usize; rank - target_shape.len()];
    padded.extend_from_slice(target_shape);
    let out_strides = {
        let mut st = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            st[i] = st[i + 1] * padded[i + 1];
        }
        for i in 0..rank {
            if padded[i] == 1 {
                st[i] = 0;
            }
        }
        st
    };
    let n: usize = target_shape.iter().product::<usize>().max(1);
    let mut out = vec![S::zero(); n];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in &grad.data {
        out[off] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            idx[d] = 0;
            off -= out_strides[d] * grad.shape[d];
        }
    }
    Tensor { shape: target_shape.to_vec(), data: out }
}

// ── Tensor dump format ──────────────────────────────────────────────────
// magic "GCTN", u32 version, u8 dtype code, u32 rank, u64 dims[],
// little-endian row-major payload.

pub const TENSOR_MAGIC: &[u8; 4] = b"GCTN";
pub const TENSOR_VERSION: u32 = 1;

impl<S: Scalar> Tensor<S> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&[S::DTYPE_CODE])?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            match S::DTYPE_CODE {
                1 => w.write_all(&(x.to_f() as f32).to_le_bytes())?,
                _ => w.write_all(&x.to_f().to_le_bytes())?,
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let err = |reason: &str| CosalError::format("<tensor stream>", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| CosalError::io("<tensor stream>", e))?;
        if &magic != TENSOR_MAGIC {
            return Err(err("bad magic"));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(|e| CosalError::io("<tensor stream>", e))?;
        if u32::from_le_bytes(buf4) != TENSOR_VERSION {
            return Err(err("unsupported version"));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(|e| CosalError::io("<tensor stream>", e))?;
        if dtype[0] != S::DTYPE_CODE {
            return Err(err("dtype mismatch"));
        }
        r.read_exact(&mut buf4).map_err(|e| CosalError::io("<tensor stream>", e))?;
        let rank = u32::from_le_bytes(buf4) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut buf8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut buf8).map_err(|e| CosalError::io("<tensor stream>", e))?;
            shape.push(u64::from_le_bytes(buf8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match S::DTYPE_CODE {
                1 => {
                    r.read_exact(&mut buf4).map_err(|e| CosalError::io("<tensor stream>", e))?;
                    f32::from_le_bytes(buf4) as f64
                }
                _ => {
                    r.read_exact(&mut buf8).map_err(|e| CosalError::io("<tensor stream>", e))?;
                    f64::from_le_bytes(buf8)
                }
            };
            data.push(S::from_f(v));
        }
        Ok(Tensor { shape, data })
    }
}
