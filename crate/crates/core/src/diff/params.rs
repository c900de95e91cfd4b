use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable arrays with gradient slots.
///
/// Entries are kept in name order so that iteration, checkpoint layout and
/// optimizer updates are reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        value.zero_grad();
        self.entries.insert(name, value);
        Ok(())
    }

    /// Registers `{prefix}.w` (`cin x cout`, uniform in
    /// `±sqrt(6 / (cin + cout))`) and, when `bias` is set, a zero `{prefix}.b`.
    pub fn init_linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        let w: Vec<f64> = (0..cin * cout)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.insert(format!("{prefix}.w"), Tensor::matrix(cin, cout, w)?)?;
        if bias {
            self.insert(format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if t.len() != g.len() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                t.len()
            )));
        }
        for (s, v) in t.grad_mut().iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).and_then(Tensor::grad)
    }

    /// Rebuilds a store from saved tensors.
    pub fn from_entries(rng_seed: u64, entries: BTreeMap<String, Tensor>) -> Self {
        let mut store = Self::new(rng_seed);
        for (k, mut v) in entries {
            v.zero_grad();
            store.entries.insert(k, v);
        }
        store
    }

    pub fn to_entries(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, v)| {
                let mut v = v.clone();
                v.clear_grad();
                (k.clone(), v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.init_linear("l", 10, 6, true).unwrap();
        b.init_linear("l", 10, 6, true).unwrap();
        assert_eq!(a.get("l.w").unwrap().data(), b.get("l.w").unwrap().data());
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a.get("l.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("l.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.insert("x", Tensor::scalar(2.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulate_checks_length() {
        let mut s = ParamStore::new(0);
        s.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.accumulate_grad("x", &[1.0, 1.0]).unwrap();
        s.accumulate_grad("x", &[0.5, 0.0]).unwrap();
        assert_eq!(s.grad("x").unwrap(), &[1.5, 1.0]);
        assert!(s.accumulate_grad("x", &[1.0]).is_err());
    }
}
