//! Named parameter storage shared by every learner.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which sub-network a parameter belongs to. Freezing is per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Base,
    Meta,
    Ensemble,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Base,
        ParamGroup::Meta,
        ParamGroup::Ensemble,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: [bool; 4],
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamGroup, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), p.group, &p.value))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[group.index()]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.is_frozen(self.group(id))
    }

    /// Replaces a parameter's value by name, keeping its shape.
    pub fn load(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config(alloc::format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(alloc::format!(
                "parameter {name}: stored {:?}, loaded {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value in `group`, in order.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325_u64;
        for p in self.params.iter().filter(|p| p.group == group) {
            for byte in p.name.bytes() {
                hash = (hash ^ u64::from(byte)).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    hash = (hash ^ u64::from(byte)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Per-parameter gradient accumulator, indexed like the store.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(params: usize) -> Self {
        Gradients {
            grads: alloc::vec![None; params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// He-normal initialisation for a ReLU-followed convolution kernel.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for small heads.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn freezing_is_per_group() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", ParamGroup::Encoder, Tensor::zeros(&[2]));
        let b = store.add("meta.w", ParamGroup::Meta, Tensor::zeros(&[2]));
        store.set_frozen(ParamGroup::Encoder, true);
        assert!(!store.is_trainable(a));
        assert!(store.is_trainable(b));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.add("enc.w", ParamGroup::Encoder, Tensor::zeros(&[3]));
        let before = store.fingerprint(ParamGroup::Encoder);
        store.get_mut(a).data_mut()[1] = 1e-300;
        assert_ne!(before, store.fingerprint(ParamGroup::Encoder));
        assert_eq!(store.fingerprint(ParamGroup::Meta), ParamStore::new().fingerprint(ParamGroup::Meta));
    }

    #[test]
    fn load_checks_shape() {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Meta, Tensor::zeros(&[2, 2]));
        assert!(store.load("w", Tensor::zeros(&[4])).is_err());
        assert!(store.load("missing", Tensor::zeros(&[4])).is_err());
        assert!(store.load("w", Tensor::full(&[2, 2], 3.0)).is_ok());
    }

    #[test]
    fn kaiming_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = kaiming_normal(&[64, 32, 3, 3], &mut rng);
        let n = t.len() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var}");
    }
}
