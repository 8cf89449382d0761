//! Parameter storage, convolution layers, and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Real, Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Weight-bound gain giving He-uniform variance `2 / fan_in`.
pub const HE_GAIN: f64 = 2.449_489_742_783_178;

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `graph`. Frozen bindings still let
    /// gradients pass through to the inputs.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Integrity("parameter layout mismatch".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Integrity(format!(
                    "parameter shape mismatch: {} vs {}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            let s = t.shape();
            for d in [s.n, s.c, s.h, s.w] {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Gradients for every parameter bound in `bound`, zeros where none flowed.
    pub fn collect_grads(&self, bound: &Bound<'_, T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Parameters of one store recorded on a graph, indexed by [`ParamId`].
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    /// PyTorch-default uniform init, bound `1/sqrt(fan_in)`, with the weight
    /// bound multiplied by `gain`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = (in_channels * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let wdist = Uniform::new_inclusive(-bound * gain, bound * gain);
        let bdist = Uniform::new_inclusive(-bound, bound);
        let wshape = Shape::new(out_channels, in_channels, k, k);
        let w: Vec<T> = (0..wshape.numel()).map(|_| T::of(wdist.sample(rng))).collect();
        let b: Vec<T> = (0..out_channels).map(|_| T::of(bdist.sample(rng))).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(wshape, w).expect("weight shape"));
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::from_vec(Shape::new(1, out_channels, 1, 1), b).expect("bias shape"),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.geometry)
    }

    /// Multiply-accumulate count for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.geometry.output_size(h, w).expect("conv geometry");
        let k = self.geometry.kernel;
        (self.out_channels * oh * ow * self.in_channels * k * k) as u64
    }

    pub fn set_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        store.get_mut(self.bias).data_mut().fill(T::zero());
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("x", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * v);
            opt.update(&mut store, &[g], 1e-2);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        Conv2d::new(&mut store, "c", 2, 3, ConvGeometry::same3(), 1.0, &mut rng);
        let before = store.checksum();
        let mut opt = Adam::new(&store);
        let grads: Vec<_> = store.tensors().iter().map(|t| Tensor::full(t.shape(), 1.0)).collect();
        opt.update(&mut store, &grads, 0.0);
        assert_eq!(before, store.checksum());
    }

    #[test]
    fn conv_macs_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let c = Conv2d::new(&mut store, "c", 3, 16, ConvGeometry::same3(), 1.0, &mut rng);
        assert_eq!(c.macs(64, 64), 1_769_472);
        let unit = Conv2d::new(&mut store, "u", 1, 1, ConvGeometry::new(1, 1, 0), 1.0, &mut rng);
        assert_eq!(unit.macs(1, 1), 1);
    }
}
