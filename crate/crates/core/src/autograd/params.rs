//! Named weight storage, the adaptive-moment optimizer, and the PFWT file format.
//!
//! PFWT layout (all little-endian):
//!
//! ```text
//! "PFWT" | version u32 | count u32 |
//!   count × ( name_len u16 | name bytes | rank u8 | rank × extent u32 | f32 data )
//! ```

use std::collections::{BTreeMap, BTreeSet};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PFWT_MAGIC: &[u8; 4] = b"PFWT";
pub const PFWT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

#[derive(Clone, Debug)]
struct Parameter {
    value: Tensor,
    grad: Option<Vec<f64>>,
    state: Option<AdamState>,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                value,
                grad: None,
                state: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for name in self.params.keys().filter(|n| n.starts_with(prefix)) {
            if trainable {
                self.frozen.remove(name);
            } else {
                self.frozen.insert(name.clone());
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) {
        if let Some(p) = self.params.get_mut(name) {
            match &mut p.grad {
                Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
                None => p.grad = Some(grad.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One adaptive-moment update of every trainable parameter, then clears
    /// the gradients. Moment buffers are allocated on a parameter's first step.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(n, p)| !self.frozen.contains(*n) && p.grad.is_none())
        {
            return Err(Error::MissingGradient(name.clone()));
        }
        for (name, p) in self.params.iter_mut() {
            if self.frozen.contains(name) {
                p.grad = None;
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let n = grad.len();
            let state = p.state.get_or_insert_with(|| AdamState {
                first: vec![0.0; n],
                second: vec![0.0; n],
                step: 0,
            });
            state.step += 1;
            let bias1 = 1.0 - BETA1.powi(state.step as i32);
            let bias2 = 1.0 - BETA2.powi(state.step as i32);
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                state.first[i] = BETA1 * state.first[i] + (1.0 - BETA1) * g;
                state.second[i] = BETA2 * state.second[i] + (1.0 - BETA2) * g * g;
                let m = state.first[i] / bias1;
                let v = state.second[i] / bias2;
                values[i] -= learning_rate * m / (v.sqrt() + EPSILON);
            }
        }
        Ok(())
    }

    pub fn has_optimizer_state(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.state.is_some())
    }

    /// Rounds every value to the nearest 32-bit real, so that the in-memory
    /// weights equal what [`ParameterSet::to_bytes`] stores.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PFWT_MAGIC);
        out.extend_from_slice(&PFWT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PFWT_MAGIC {
            return Err(Error::ModelFormat("bad PFWT magic".into()));
        }
        let version = r.u32()?;
        if version != PFWT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported PFWT version {version}"
            )));
        }
        let count = r.u32()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::ModelFormat("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            set.insert(&name, Tensor::new(&shape, data)?)
                .map_err(|e| Error::ModelFormat(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes after PFWT payload",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("PFWT truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_set(1.5);
        p.accumulate_grad("x", &[0.0]);
        p.adam_step(0.1).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut p = scalar_set(3.0);
        let loss = |x: f64| (x - 1.0) * (x - 1.0);
        let start = loss(p.get("x").unwrap().item());
        for _ in 0..100 {
            let x = p.get("x").unwrap().item();
            p.accumulate_grad("x", &[2.0 * (x - 1.0)]);
            p.adam_step(0.05).unwrap();
        }
        assert!(loss(p.get("x").unwrap().item()) < start);
    }

    #[test]
    fn moments_allocated_lazily() {
        let mut p = scalar_set(0.0);
        assert!(!p.has_optimizer_state("x"));
        p.accumulate_grad("x", &[1.0]);
        p.adam_step(0.01).unwrap();
        assert!(p.has_optimizer_state("x"));
        assert!(p.grad("x").is_none());
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut p = scalar_set(0.0);
        assert!(matches!(p.adam_step(0.01), Err(Error::MissingGradient(n)) if n == "x"));
    }

    #[test]
    fn frozen_parameters_do_not_need_gradients() {
        let mut p = scalar_set(2.0);
        p.set_trainable("x", false);
        p.adam_step(0.01).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 2.0);
    }

    #[test]
    fn pfwt_round_trip_and_layout() {
        let mut p = ParameterSet::new();
        p.insert("a.w", Tensor::new(&[2, 1], vec![0.5, -1.25]).unwrap())
            .unwrap();
        p.insert("b", Tensor::new(&[], vec![3.0]).unwrap()).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"PFWT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first record: "a.w", rank 2, extents 2 and 1
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"a.w");
        assert_eq!(bytes[17], 2);
        let back = ParameterSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("a.w").unwrap(), p.get("a.w").unwrap());
        assert_eq!(back.get("b").unwrap().item(), 3.0);
        assert!(ParameterSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
