use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Named, seeded parameters. Initialization draws from one ChaCha stream in
/// registration order, so identical configs and seeds give identical weights.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: false,
        }
    }

    /// Layers built from a frozen store see plain tensors: no parameter gradients
    /// are recorded, but loading values still updates them in place.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a parameter with explicit initial values.
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// `n` draws uniform in `[-bound, bound]` from the init stream.
    pub fn draw_uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let values = self.draw_uniform(shape.iter().product(), bound);
        self.add(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter. Names and shapes must match exactly.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    expected: var.dims().to_vec(),
                    actual: v.dims().to_vec(),
                });
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let ta = a.uniform("w", &[4, 4], 0.5).unwrap();
        let tb = b.uniform("w", &[4, 4], 0.5).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, tb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(va.iter().all(|v| v.abs() <= 0.5));
        assert!(a.uniform("w", &[1], 1.0).is_err());
    }

    #[test]
    fn load_updates_layer_views_in_place() {
        let mut s = ParamStore::new(0, DType::F32).frozen();
        let view = s.constant("b", &[2], 0.0).unwrap();
        let mut values = HashMap::new();
        values.insert("b".to_string(), Tensor::new(&[1.5f32, 2.5], &Device::Cpu).unwrap());
        s.load(&values).unwrap();
        assert_eq!(view.to_vec1::<f32>().unwrap(), vec![1.5, 2.5]);
        values.insert("c".to_string(), Tensor::new(&[0f32], &Device::Cpu).unwrap());
        assert!(s.load(&values).is_err());
    }
}
