//! Named parameter tensors, grouped by role, plus the two layer kinds the
//! model is built from (dense and same-padded convolution).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvShape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SemanticForward,
    SemanticInverse,
    SpatialForward,
    SpatialInverse,
    Update,
    NodeClassifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::SemanticForward,
        ParamGroup::SemanticInverse,
        ParamGroup::SpatialForward,
        ParamGroup::SpatialInverse,
        ParamGroup::Update,
        ParamGroup::NodeClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SemanticForward => "semantic_forward",
            ParamGroup::SemanticInverse => "semantic_inverse",
            ParamGroup::SpatialForward => "spatial_forward",
            ParamGroup::SpatialInverse => "spatial_inverse",
            ParamGroup::Update => "update",
            ParamGroup::NodeClassifier => "node_classifier",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, ParamGroup::SemanticForward | ParamGroup::SemanticInverse)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, ParamGroup::SpatialForward | ParamGroup::SpatialInverse)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// All trainable tensors of a model, in construction order.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    reads: [AtomicU64; 6],
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self.entries.clone(),
            reads: Default::default(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn add(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(rows * cols, data.len());
        self.entries.push(ParamEntry {
            name,
            group,
            rows,
            cols,
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.entries[index].data
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Puts the parameter on the tape; counts a read of its group the first
    /// time it is bound to a given tape.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        let (v, fresh) = tape.param_or_insert_with(id.0, || Tensor::new(e.rows, e.cols, e.data.clone()));
        if fresh {
            self.reads[e.group.index()].fetch_add(1, Ordering::Relaxed);
        }
        v
    }

    pub fn reads(&self, group: ParamGroup) -> u64 {
        self.reads[group.index()].load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    /// Rounds every parameter to the nearest f32, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in &mut e.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, zero biases.
    HeUniform,
    /// Identity on the overlapping dimensions, zero elsewhere.
    Identity,
}

/// `y = x W^T + b` with `W` stored `out x in`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Dense {
        let w = match init {
            Init::HeUniform => {
                let a = (6.0 / inputs as f64).sqrt();
                (0..inputs * outputs).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Identity => {
                let mut w = vec![0.0; inputs * outputs];
                for i in 0..inputs.min(outputs) {
                    w[i * inputs + i] = 1.0;
                }
                w
            }
        };
        let weight = store.add(format!("{name}.weight"), group, outputs, inputs, w);
        let bias = store.add(format!("{name}.bias"), group, 1, outputs, vec![0.0; outputs]);
        Dense {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Var {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        let y = tape.matmul_bt(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub shape: ConvShape,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, shape: ConvShape, init: Init, rng: &mut ChaCha8Rng) -> Conv {
        let k2 = shape.kernel * shape.kernel;
        let fan_in = shape.in_channels * k2;
        let n = shape.out_channels * fan_in;
        let w = match init {
            Init::HeUniform => {
                let a = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Identity => {
                let mut w = vec![0.0; n];
                let center = (shape.kernel / 2) * shape.kernel + shape.kernel / 2;
                for c in 0..shape.in_channels.min(shape.out_channels) {
                    w[(c * shape.in_channels + c) * k2 + center] = 1.0;
                }
                w
            }
        };
        let weight = store.add(format!("{name}.weight"), group, shape.out_channels, fan_in, w);
        let bias = store.add(format!("{name}.bias"), group, 1, shape.out_channels, vec![0.0; shape.out_channels]);
        Conv { weight, bias, shape }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Var {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        tape.conv2d(x, w, b, self.shape)
    }
}

/// Dense layers with ReLU between them and no output activation.
pub fn mlp_forward(layers: &[Dense], store: &ParamStore, tape: &mut Tape, x: Var) -> Var {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(store, tape, h);
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    h
}

/// Convolutions with ReLU between them and a sigmoid on the output.
pub fn conv_stack_forward(layers: &[Conv], store: &ParamStore, tape: &mut Tape, x: Var) -> Var {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(store, tape, h);
        h = if i + 1 < layers.len() { tape.relu(h) } else { tape.sigmoid(h) };
    }
    h
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
