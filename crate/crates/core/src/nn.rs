//! Named parameter storage and the dense layers built on it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<R: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<R>] {
        &self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn replace_values(&mut self, values: Vec<Tensor<R>>) -> Result<()> {
        if values.len() != self.values.len()
            || values
                .iter()
                .zip(&self.values)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension(
                "replacement parameters do not match the store layout".into(),
            ));
        }
        self.values = values;
        Ok(())
    }

    /// All parameters flattened into one `f64` vector, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.to_f64()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.scalar_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut values = Vec::with_capacity(self.values.len());
        for t in &self.values {
            let n = t.len();
            values.push(Tensor::from_f64(t.shape().to_vec(), &flat[offset..offset + n])?);
            offset += n;
        }
        self.values = values;
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<R>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<R>) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Fully connected layer `x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// He-uniform initialized weights, zero bias.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let w: Vec<R> = (0..inputs * outputs)
            .map(|_| R::of(rng.gen_range(-bound..bound)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![inputs, outputs], w).expect("positive layer dims"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(h, p.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with ReLU between them, and optionally after
/// the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        widths: &[usize],
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, final_relu }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last || self.final_relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        Mlp::new(&mut store, "m", &[3, 4, 2], false, &mut rng);
        let flat = store.flatten();
        assert_eq!(flat.len(), 3 * 4 + 4 + 4 * 2 + 2);
        let mut other = store.clone();
        other.unflatten(&flat).unwrap();
        assert_eq!(other, store);
        assert!(other.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn mlp_shapes_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, "m", &[5, 7, 3], true, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::full(vec![4, 5], 0.5));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
        assert_eq!((mlp.inputs(), mlp.outputs()), (5, 3));
    }
}
