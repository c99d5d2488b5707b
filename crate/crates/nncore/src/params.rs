use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NnError, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Whether decoupled weight decay applies (matrices and tables, not biases or norms).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named parameter tensors with paired gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: bool,
}

pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), frozen: false }
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let value: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                })
                .collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * std)
                })
                .collect(),
        };
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, shape: shape.to_vec(), grad: vec![T::zero(); n], value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    /// Value and gradient of one parameter, borrowed together.
    #[inline]
    pub fn value_and_grad(&mut self, id: ParamId) -> (&[T], &mut [T]) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Replace a parameter's values by name (used when loading checkpoints).
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        let id = self.find(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.shape != shape {
            return Err(NnError::Shape(format!(
                "parameter `{name}`: expected {:?}, checkpoint has {:?}",
                p.shape, shape
            )));
        }
        for (d, &s) in p.value.iter_mut().zip(values) {
            *d = T::of(s as f64);
        }
        Ok(())
    }

    /// Convert into another precision, keeping names, shapes and values.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::of(v.as_f64())).collect(),
                    grad: vec![U::zero(); p.value.len()],
                    decay: p.decay,
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// FNV-1a digest over names, shapes and value bits, for cheap equality checks.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for &d in &p.shape {
                (d as u64).to_le_bytes().into_iter().for_each(&mut eat);
            }
            for v in &p.value {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", &[64, 64], Init::TruncNormal(0.02), true, &mut rng);
        assert!(s.value(id).iter().all(|v| v.abs() <= 0.04));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut s2 = ParamStore::<f32>::new();
        s2.add("w", &[64, 64], Init::TruncNormal(0.02), true, &mut rng2);
        assert_eq!(s.digest(), s2.digest());
    }

    #[test]
    fn set_values_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        s.add("b", &[3], Init::Zeros, false, &mut rng);
        assert!(s.set_values("b", &[4], &[0.0; 4]).is_err());
        assert!(s.set_values("nope", &[3], &[0.0; 3]).is_err());
        s.set_values("b", &[3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.value(ParamId(0)), &[1.0, 2.0, 3.0]);
    }
}
