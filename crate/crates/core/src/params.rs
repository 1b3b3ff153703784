//! Named parameter storage, gradients and the on-disk parameter blob.

use std::io::{Read, Write};

use crate::error::{MapoError, Result};
use crate::tensor::Matrix;

pub type ParamId = usize;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Flat (param, index) address of the `k`-th scalar across all tensors.
    pub fn locate(&self, mut k: usize) -> (ParamId, usize) {
        for (id, v) in self.values.iter().enumerate() {
            if k < v.len() {
                return (id, k);
            }
            k -= v.len();
        }
        panic!("scalar index out of range");
    }

    /// Little-endian blob: magic, tensor count, then per tensor
    /// `name_len u32, name, rows u32, cols u32, f64 * rows * cols`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, m) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MapoError::InvalidInput("not a parameter blob".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| MapoError::InvalidInput("parameter name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data));
        }
        Ok(store)
    }
}

const MAGIC: &[u8; 8] = b"MAPOPRM1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// One gradient matrix per parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.grads[id].add_assign(g);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.scale_assign(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::sum_of_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let mut store = ParamStore::default();
        store.insert("a", Matrix::from_vec(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        store.insert("b.bias", Matrix::zeros(1, 3));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(ParamStore::read_from(buf.as_slice()).unwrap(), store);
    }

    #[test]
    fn rejects_foreign_blob() {
        assert!(ParamStore::read_from(&b"NOTAPARAMFILE"[..]).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::default();
        store.insert("a", Matrix::zeros(1, 2));
        let mut g = Gradients::zeros_like(&store);
        g.accumulate(0, &Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        assert_eq!(g.clip_global_norm(0.5), 5.0);
        assert!((g.global_norm() - 0.5).abs() < 1e-12);
    }
}
