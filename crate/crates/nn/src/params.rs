use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// One named parameter tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    name: String,
    value: Tensor4,
    grad: Tensor4,
}

impl ParamBlock {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor4 {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor4 {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor4 {
        &mut self.grad
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameter blocks in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of {name}")));
        }
        let grad = Tensor4::zeros(value.shape());
        self.index.insert(name.clone(), self.blocks.len());
        self.blocks.push(ParamBlock { name, value, grad });
        Ok(())
    }

    /// Uniform init in ±sqrt(1/fan_in).
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor4::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.insert(name, t)
    }

    /// Moves every block of `other` into `self`.
    pub fn extend(&mut self, other: ModelParams) -> Result<()> {
        for b in other.blocks {
            self.insert(b.name, b.value)?;
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock> {
        Ok(&self.blocks[self.position(name)?])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut ParamBlock> {
        let k = self.position(name)?;
        Ok(&mut self.blocks[k])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor4> {
        Ok(&self.block(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor4> {
        Ok(&self.block(name)?.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor4) -> Result<()> {
        let b = self.block_mut(name)?;
        if b.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                b.value.shape(),
                value.shape()
            )));
        }
        b.value = value;
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: &Tensor4) -> Result<()> {
        let b = self.block_mut(name)?;
        b.grad.check_same_shape(g, name)?;
        b.grad.add_assign(g);
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor4::zeros([1, 1, 1, 2])).unwrap();
        assert!(matches!(
            p.insert("a", Tensor4::zeros([1, 1, 1, 1])),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(p.value("b"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn uniform_init_respects_bound_and_seed() {
        let mut a = ModelParams::new();
        let mut b = ModelParams::new();
        a.insert_uniform("w", [4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        b.insert_uniform("w", [4, 3, 3, 3], 27, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(a.value("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.grad("w").unwrap().shape(), [4, 3, 3, 3]);
    }
}
