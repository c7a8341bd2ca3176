//! The implicit density head `f(x, R)`.
//!
//! A ReLU MLP scores a (descriptor, rotation) pair with an unnormalized log
//! density. The first dense layer is stored split as `[W_d | W_q]`, so that
//! `W·[d; q] = W_d·d + W_q·q`: the descriptor half is computed once per
//! descriptor and broadcast over every query. Gradients with respect to the
//! parameters and to the query rotation matrix are hand-derived.

pub mod checkpoint;
pub mod encoding;

use nalgebra::Matrix3;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{Rotation, RotationFormat};
pub use encoding::{positional_encode, QueryEncoding};

/// Queries per block in the chunked forward pass.
pub const QUERY_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub descriptor_dim: usize,
    pub pe_frequencies: usize,
    pub hidden_width: usize,
    /// Number of ReLU dense layers, the split first layer included.
    pub hidden_layers: usize,
    pub seed: u64,
    #[serde(default)]
    pub pe_include_raw: bool,
    #[serde(default)]
    pub rotation_format: RotationFormat,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 16,
            pe_frequencies: 3,
            hidden_width: 256,
            hidden_layers: 4,
            seed: 0,
            pe_include_raw: false,
            rotation_format: RotationFormat::Matrix,
        }
    }
}

impl ModelConfig {
    pub fn encoding(&self) -> QueryEncoding {
        QueryEncoding {
            format: self.rotation_format,
            frequencies: self.pe_frequencies,
            include_raw: self.pe_include_raw,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.encoding().dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidConfig(
                "descriptor_dim, hidden_width and hidden_layers must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights of the network, also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub w_desc: Array2<f64>,
    pub w_query: Array2<f64>,
    pub b_first: Array1<f64>,
    pub hidden: Vec<Dense>,
    pub w_out: Array1<f64>,
    pub b_out: Array1<f64>,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_width;
        Self {
            w_desc: Array2::zeros((h, config.descriptor_dim)),
            w_query: Array2::zeros((h, config.query_dim())),
            b_first: Array1::zeros(h),
            hidden: (1..config.hidden_layers)
                .map(|_| Dense {
                    weight: Array2::zeros((h, h)),
                    bias: Array1::zeros(h),
                })
                .collect(),
            w_out: Array1::zeros(h),
            b_out: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Flat views in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.w_desc.as_slice().unwrap(),
            self.w_query.as_slice().unwrap(),
            self.b_first.as_slice().unwrap(),
        ];
        for layer in &self.hidden {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out.push(self.w_out.as_slice().unwrap());
        out.push(self.b_out.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Parameters {
            w_desc,
            w_query,
            b_first,
            hidden,
            w_out,
            b_out,
        } = self;
        let mut out = vec![
            w_desc.as_slice_mut().unwrap(),
            w_query.as_slice_mut().unwrap(),
            b_first.as_slice_mut().unwrap(),
        ];
        for layer in hidden.iter_mut() {
            out.push(layer.weight.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        out.push(w_out.as_slice_mut().unwrap());
        out.push(b_out.as_slice_mut().unwrap());
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// How the first dense layer is evaluated for a batch of descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstLayer {
    /// `W_d·d_i ⊕ W_q·q_j` broadcast over all pairs.
    Broadcast,
    /// Tile every `[d_i; q_j]` pair and multiply by the full `W`.
    Tiled,
}

/// Activations retained from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    descriptor: Vec<f64>,
    input: Array2<f64>,
    activations: Vec<Array2<f64>>,
}

/// One example's contribution to a parameter gradient: the gradient of
/// `Σᵢ weights[i]·f(descriptor, queries[i])`.
#[derive(Debug, Clone, Copy)]
pub struct GradientItem<'a> {
    pub descriptor: &'a [f64],
    pub queries: &'a [Rotation],
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDensityModel {
    config: ModelConfig,
    params: Parameters,
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn he_uniform<R: Rng>(rng: &mut R, a: &mut [f64], fan_in: usize) {
    let limit = (6.0 / fan_in as f64).sqrt();
    a.iter_mut().for_each(|x| *x = rng.gen_range(-limit..limit));
}

impl ImplicitDensityModel {
    /// He-uniform hidden layers, zero output layer: the initial density is uniform.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::init(config, false)
    }

    /// Like [`Self::new`] but the output layer is random too.
    pub fn new_random(config: ModelConfig) -> Result<Self> {
        Self::init(config, true)
    }

    fn init(config: ModelConfig, random_output: bool) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fan_in = config.descriptor_dim + config.query_dim();
        he_uniform(&mut rng, params.w_desc.as_slice_mut().unwrap(), fan_in);
        he_uniform(&mut rng, params.w_query.as_slice_mut().unwrap(), fan_in);
        for layer in &mut params.hidden {
            he_uniform(&mut rng, layer.weight.as_slice_mut().unwrap(), config.hidden_width);
        }
        if random_output {
            he_uniform(&mut rng, params.w_out.as_slice_mut().unwrap(), config.hidden_width);
            params.b_out[0] = rng.gen_range(-1.0..1.0);
        }
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let expect = Parameters::zeros(&config);
        let shapes_match = expect.hidden.len() == params.hidden.len()
            && expect
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.len() == b.len())
            && expect.w_desc.dim() == params.w_desc.dim()
            && expect.w_query.dim() == params.w_query.dim();
        if !shapes_match {
            return Err(Error::DimensionMismatch {
                expected: expect.len(),
                got: params.len(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn encoding(&self) -> QueryEncoding {
        self.config.encoding()
    }

    fn check_descriptor(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.config.descriptor_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.descriptor_dim,
                got: d.len(),
            });
        }
        Ok(())
    }

    pub fn encode_queries(&self, rotations: &[Rotation]) -> Array2<f64> {
        let enc = self.encoding();
        let mut q = Array2::zeros((rotations.len(), enc.dim()));
        for (mut row, r) in q.outer_iter_mut().zip(rotations) {
            enc.encode_into(r, row.as_slice_mut().unwrap());
        }
        q
    }

    /// `W_d·d + b` for the first layer.
    fn descriptor_term(&self, d: &[f64]) -> Array1<f64> {
        let d = ndarray::ArrayView1::from(d);
        self.params.w_desc.dot(&d) + &self.params.b_first
    }

    /// Runs the layers after the first pre-activation; returns all post-ReLU activations.
    fn trunk(&self, mut z: Array2<f64>) -> Vec<Array2<f64>> {
        relu_inplace(&mut z);
        let mut acts = Vec::with_capacity(self.config.hidden_layers);
        acts.push(z);
        for layer in &self.params.hidden {
            let prev = acts.last().unwrap();
            let mut z = Array2::zeros((prev.nrows(), layer.weight.nrows()));
            general_mat_mul(1.0, prev, &layer.weight.t(), 0.0, &mut z);
            z += &layer.bias;
            relu_inplace(&mut z);
            acts.push(z);
        }
        acts
    }

    fn output(&self, last: &Array2<f64>) -> Vec<f64> {
        let b = self.params.b_out[0];
        last.dot(&self.params.w_out).iter().map(|v| v + b).collect()
    }

    fn forward_encoded(&self, first: &Array1<f64>, input: &Array2<f64>) -> Vec<f64> {
        let mut z = Array2::zeros((input.nrows(), self.config.hidden_width));
        general_mat_mul(1.0, input, &self.params.w_query.t(), 0.0, &mut z);
        z += first;
        let acts = self.trunk(z);
        self.output(acts.last().unwrap())
    }

    /// `f(x, Rᵢ)` for every query, evaluated in parallel blocks.
    pub fn forward(&self, descriptor: &[f64], rotations: &[Rotation]) -> Result<Vec<f64>> {
        self.check_descriptor(descriptor)?;
        let first = self.descriptor_term(descriptor);
        let blocks: Vec<Vec<f64>> = rotations
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| self.forward_encoded(&first, &self.encode_queries(chunk)))
            .collect();
        Ok(blocks.concat())
    }

    /// One query at a time with plain loops; the reference for [`Self::forward`].
    pub fn forward_single(&self, descriptor: &[f64], r: &Rotation) -> Result<f64> {
        self.check_descriptor(descriptor)?;
        let p = &self.params;
        let q = self.encoding().encode(r);
        let mut h: Vec<f64> = (0..self.config.hidden_width)
            .map(|i| {
                let row_d = p.w_desc.row(i);
                let row_q = p.w_query.row(i);
                let mut acc = p.b_first[i];
                for (w, x) in row_d.iter().zip(descriptor) {
                    acc += w * x;
                }
                for (w, x) in row_q.iter().zip(&q) {
                    acc += w * x;
                }
                acc.max(0.0)
            })
            .collect();
        for layer in &p.hidden {
            h = (0..layer.weight.nrows())
                .map(|i| {
                    let acc: f64 = layer.weight.row(i).iter().zip(&h).map(|(w, x)| w * x).sum();
                    (acc + layer.bias[i]).max(0.0)
                })
                .collect();
        }
        Ok(p.w_out.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + p.b_out[0])
    }

    pub fn forward_cached(
        &self,
        descriptor: &[f64],
        rotations: &[Rotation],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_descriptor(descriptor)?;
        let first = self.descriptor_term(descriptor);
        let input = self.encode_queries(rotations);
        let mut z = Array2::zeros((input.nrows(), self.config.hidden_width));
        general_mat_mul(1.0, &input, &self.params.w_query.t(), 0.0, &mut z);
        z += &first;
        let activations = self.trunk(z);
        let out = self.output(activations.last().unwrap());
        Ok((
            out,
            ForwardCache {
                descriptor: descriptor.to_vec(),
                input,
                activations,
            },
        ))
    }

    /// Backpropagates `Σᵢ weights[i]·f(x, Rᵢ)`. Accumulates parameter gradients
    /// into `grads` when given; returns the gradient with respect to the
    /// encoded queries (one row per query).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        weights: &[f64],
        mut grads: Option<&mut Parameters>,
    ) -> Array2<f64> {
        let p = &self.params;
        let g = ndarray::ArrayView1::from(weights);
        let last = cache.activations.last().unwrap();
        if let Some(gr) = grads.as_deref_mut() {
            gr.w_out.scaled_add(1.0, &last.t().dot(&g));
            gr.b_out[0] += g.sum();
        }
        // delta = d(objective)/d(pre-activation) of the current layer
        let mut delta = Array2::zeros(last.raw_dim());
        Zip::from(delta.rows_mut())
            .and(last.rows())
            .and(&g)
            .for_each(|mut drow, hrow, &gi| {
                Zip::from(&mut drow)
                    .and(&hrow)
                    .and(&p.w_out)
                    .for_each(|d, &h, &w| *d = if h > 0.0 { gi * w } else { 0.0 });
            });
        for (k, layer) in p.hidden.iter().enumerate().rev() {
            let prev = &cache.activations[k];
            if let Some(gr) = grads.as_deref_mut() {
                general_mat_mul(1.0, &delta.t(), prev, 1.0, &mut gr.hidden[k].weight);
                gr.hidden[k].bias += &delta.sum_axis(Axis(0));
            }
            let mut next = Array2::zeros(prev.raw_dim());
            general_mat_mul(1.0, &delta, &layer.weight, 0.0, &mut next);
            Zip::from(&mut next).and(prev).for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = next;
        }
        if let Some(gr) = grads {
            general_mat_mul(1.0, &delta.t(), &cache.input, 1.0, &mut gr.w_query);
            let col = delta.sum_axis(Axis(0));
            gr.b_first += &col;
            let d = ndarray::ArrayView1::from(&cache.descriptor[..]);
            let outer = col
                .view()
                .insert_axis(Axis(1))
                .dot(&d.insert_axis(Axis(0)));
            gr.w_desc += &outer;
        }
        let mut grad_input = Array2::zeros(cache.input.raw_dim());
        general_mat_mul(1.0, &delta, &p.w_query, 0.0, &mut grad_input);
        grad_input
    }

    /// `f(x, R)` and its gradient with respect to the 3×3 matrix entries of `R`.
    pub fn value_and_input_gradient(
        &self,
        descriptor: &[f64],
        r: &Rotation,
    ) -> Result<(f64, Matrix3<f64>)> {
        if self.config.rotation_format != RotationFormat::Matrix {
            return Err(Error::UnsupportedFormat);
        }
        let (value, cache) = self.forward_cached(descriptor, std::slice::from_ref(r))?;
        let grad_encoded = self.backward(&cache, &[1.0], None);
        let raw = r.to_matrix_row_major();
        let g = self
            .encoding()
            .backprop_to_raw(&raw, grad_encoded.row(0).as_slice().unwrap());
        Ok((value[0], Matrix3::from_row_slice(&g)))
    }

    pub fn input_gradient(&self, descriptor: &[f64], r: &Rotation) -> Result<Matrix3<f64>> {
        Ok(self.value_and_input_gradient(descriptor, r)?.1)
    }

    /// Gradient of `Σ_items Σᵢ wᵢ·f(xᵢ, Rᵢ)` with respect to every parameter.
    /// Items run in parallel; the reduction is in item order.
    pub fn parameter_gradients(&self, batch: &[GradientItem<'_>]) -> Result<Parameters> {
        for item in batch {
            if item.queries.len() != item.weights.len() {
                return Err(Error::DimensionMismatch {
                    expected: item.queries.len(),
                    got: item.weights.len(),
                });
            }
        }
        let parts: Vec<Parameters> = batch
            .par_iter()
            .map(|item| {
                let (_, cache) = self.forward_cached(item.descriptor, item.queries)?;
                let mut g = self.params.zeros_like();
                self.backward(&cache, item.weights, Some(&mut g));
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut total = self.params.zeros_like();
        for g in &parts {
            total.add_assign(g);
        }
        Ok(total)
    }

    /// First-layer pre-activations for every (descriptor, query) pair, rows
    /// ordered descriptor-major: row `b·N_Q + j` holds pair `(b, j)`.
    pub fn first_layer_preactivations(
        &self,
        descriptors: ArrayView2<'_, f64>,
        queries: ArrayView2<'_, f64>,
        strategy: FirstLayer,
    ) -> Array2<f64> {
        let (nb, nq, h) = (descriptors.nrows(), queries.nrows(), self.config.hidden_width);
        let p = &self.params;
        match strategy {
            FirstLayer::Broadcast => {
                let mut qw = Array2::zeros((nq, h));
                general_mat_mul(1.0, &queries, &p.w_query.t(), 0.0, &mut qw);
                let mut dw = descriptors.dot(&p.w_desc.t());
                dw += &p.b_first;
                let mut out = Array2::zeros((nb * nq, h));
                for (b, drow) in dw.outer_iter().enumerate() {
                    let mut block = out.slice_mut(s![b * nq..(b + 1) * nq, ..]);
                    block.assign(&qw);
                    block += &drow;
                }
                out
            }
            FirstLayer::Tiled => {
                let dd = descriptors.ncols();
                let mut x = Array2::zeros((nb * nq, dd + queries.ncols()));
                for b in 0..nb {
                    for j in 0..nq {
                        let mut row = x.row_mut(b * nq + j);
                        row.slice_mut(s![..dd]).assign(&descriptors.row(b));
                        row.slice_mut(s![dd..]).assign(&queries.row(j));
                    }
                }
                let w = ndarray::concatenate(Axis(1), &[p.w_desc.view(), p.w_query.view()])
                    .expect("first layer halves share a row count");
                let mut out = Array2::zeros((nb * nq, h));
                general_mat_mul(1.0, &x, &w.t(), 0.0, &mut out);
                out += &p.b_first;
                out
            }
        }
    }

    /// `f(x_b, R_j)` for all pairs as an `N_B × N_Q` array.
    pub fn forward_batch(
        &self,
        descriptors: ArrayView2<'_, f64>,
        rotations: &[Rotation],
        strategy: FirstLayer,
    ) -> Result<Array2<f64>> {
        if descriptors.ncols() != self.config.descriptor_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.descriptor_dim,
                got: descriptors.ncols(),
            });
        }
        let q = self.encode_queries(rotations);
        let z = self.first_layer_preactivations(descriptors, q.view(), strategy);
        let acts = self.trunk(z);
        let out = self.output(acts.last().unwrap());
        Ok(Array2::from_shape_vec((descriptors.nrows(), rotations.len()), out)
            .expect("one output per pair"))
    }

    pub fn forward_batch_efficient(
        &self,
        descriptors: ArrayView2<'_, f64>,
        rotations: &[Rotation],
    ) -> Result<Array2<f64>> {
        self.forward_batch(descriptors, rotations, FirstLayer::Broadcast)
    }

    /// Upper bound on `|f(x, R)|` over all rotations, from Frobenius norms
    /// (ReLU is 1-Lipschitz and fixes 0).
    pub fn output_bound(&self, descriptor: &[f64]) -> f64 {
        let fro = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let p = &self.params;
        let enc = self.encoding();
        let raw_norm = match enc.format {
            RotationFormat::Matrix => 3f64.sqrt(),
            // quaternion / axis-angle / euler entries bounded by π in magnitude
            f => std::f64::consts::PI * (f.width() as f64).sqrt(),
        };
        let base = enc.format.width() as f64;
        let mut q_norm = (enc.frequencies as f64 * base).sqrt();
        if enc.frequencies == 0 || enc.include_raw {
            q_norm = (q_norm * q_norm + raw_norm * raw_norm).sqrt();
        }
        let mut bound = fro(p.w_desc.as_slice().unwrap()) * fro(descriptor)
            + fro(p.w_query.as_slice().unwrap()) * q_norm
            + fro(p.b_first.as_slice().unwrap());
        for layer in &p.hidden {
            bound = fro(layer.weight.as_slice().unwrap()) * bound
                + fro(layer.bias.as_slice().unwrap());
        }
        fro(p.w_out.as_slice().unwrap()) * bound + p.b_out[0].abs()
    }
}
