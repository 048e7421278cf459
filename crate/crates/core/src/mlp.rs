//! Small fully connected networks with hand-written backward passes.
//!
//! Hidden layers use ReLU, the output layer is linear. Batches are row-major
//! `[n × dim]` and every matrix product goes through `matrixmultiply::sgemm`,
//! so a row's result never depends on how many other rows share the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out × in]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, relu_follows: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = if relu_follows {
            (6.0 / in_dim as f32).sqrt()
        } else {
            (6.0 / (in_dim + out_dim) as f32).sqrt()
        };
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    /// `y[n × out] = x[n × in] · Wᵀ + b`
    fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        if n == 0 {
            return y;
        }
        unsafe {
            matrixmultiply::sgemm(
                n,
                self.in_dim,
                self.out_dim,
                1.0,
                x.as_ptr(),
                self.in_dim as isize,
                1,
                self.weight.as_ptr(),
                1,
                self.in_dim as isize,
                1.0,
                y.as_mut_ptr(),
                self.out_dim as isize,
                1,
            );
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations kept for the backward pass: the input of every layer.
pub struct MlpTape {
    inputs: Vec<Vec<f32>>,
    n: usize,
}

/// Gradients shaped like the network, `(weight, bias)` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::init(d[0], d[1], i != last, &mut rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), n * self.in_dim());
        let last = self.layers.len() - 1;
        let mut h: Option<Vec<f32>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(h.as_deref().unwrap_or(x), n);
            if i != last {
                relu(&mut y);
            }
            h = Some(y);
        }
        h.unwrap()
    }

    pub fn forward_tape(&self, x: &[f32], n: usize) -> (Vec<f32>, MlpTape) {
        debug_assert_eq!(x.len(), n * self.in_dim());
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&cur, n);
            if i != last {
                relu(&mut y);
            }
            inputs.push(std::mem::replace(&mut cur, y));
        }
        (cur, MlpTape { inputs, n })
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the gradient with respect to the network input.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f32], mut grads: Option<&mut MlpGrads>) -> Vec<f32> {
        let n = tape.n;
        let mut d = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[i];
                if n > 0 {
                    // dW[out × in] += dYᵀ · X
                    unsafe {
                        matrixmultiply::sgemm(
                            layer.out_dim,
                            n,
                            layer.in_dim,
                            1.0,
                            d.as_ptr(),
                            1,
                            layer.out_dim as isize,
                            x.as_ptr(),
                            layer.in_dim as isize,
                            1,
                            1.0,
                            gw.as_mut_ptr(),
                            layer.in_dim as isize,
                            1,
                        );
                    }
                }
                for row in d.chunks_exact(layer.out_dim) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            // dX[n × in] = dY · W
            let mut dx = vec![0.0f32; n * layer.in_dim];
            if n > 0 {
                unsafe {
                    matrixmultiply::sgemm(
                        n,
                        layer.out_dim,
                        layer.in_dim,
                        1.0,
                        d.as_ptr(),
                        layer.out_dim as isize,
                        1,
                        layer.weight.as_ptr(),
                        layer.in_dim as isize,
                        1,
                        0.0,
                        dx.as_mut_ptr(),
                        layer.in_dim as isize,
                        1,
                    );
                }
            }
            if i > 0 {
                // x is the post-ReLU output of layer i-1
                dx.iter_mut().zip(x).for_each(|(g, &a)| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            d = dx;
        }
        d
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
            w.f32s(&l.weight);
            w.f32s(&l.bias);
        }
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let n = r.u32()? as usize;
        if n == 0 {
            return Err(Error::Format("MLP without layers".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let weight = r.f32s()?;
            let bias = r.f32s()?;
            if weight.len() != in_dim * out_dim || bias.len() != out_dim {
                return Err(Error::Format("MLP layer shape mismatch".into()));
            }
            layers.push(Linear {
                in_dim,
                out_dim,
                weight,
                bias,
            });
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Format("MLP layers do not chain".into()));
            }
        }
        Ok(Self { layers })
    }
}

fn relu(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}
