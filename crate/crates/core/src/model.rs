//! Feed-forward classifier: an MLP feature extractor followed by a linear
//! head that grows one row per class as tasks arrive.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_linear, GradTape, Var};
use crate::error::{input, usage, Result};
use crate::rng::derive_seed;
use crate::tensor::{ParamMask, ParamSet, Tensor};

/// Standard deviation of freshly added head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture of the feature extractor. An empty `hidden_dims` gives a
/// plain linear softmax model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl MlpConfig {
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(input("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRow {
    pub class_id: usize,
    /// Task (1-based) in which the class was introduced.
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    config: MlpConfig,
    seed: u64,
    params: ParamSet,
    head: Vec<HeadRow>,
    index: BTreeMap<usize, usize>,
}

pub fn layer_weight_name(layer: usize) -> String {
    format!("backbone.l{layer}.weight")
}

pub fn layer_bias_name(layer: usize) -> String {
    format!("backbone.l{layer}.bias")
}

pub fn head_weight_name(class_id: usize) -> String {
    format!("head.c{class_id:05}.weight")
}

pub fn head_bias_name(class_id: usize) -> String {
    format!("head.c{class_id:05}.bias")
}

pub fn is_head_entry(name: &str) -> bool {
    name.starts_with("head.")
}

/// Seeded backbone initialisation; the head starts empty.
pub fn init_model(config: &MlpConfig, seed: u64) -> Result<ClassifierModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone", 0));
    let mut params = ParamSet::new();
    let mut d_in = config.input_dim;
    for (l, &d_out) in config.hidden_dims.iter().enumerate() {
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect();
        params.insert(layer_weight_name(l), Tensor::new(vec![d_in, d_out], w)?)?;
        params.insert(layer_bias_name(l), Tensor::zeros(vec![d_out]))?;
        d_in = d_out;
    }
    Ok(ClassifierModel {
        config: config.clone(),
        seed,
        params,
        head: Vec::new(),
        index: BTreeMap::new(),
    })
}

impl ClassifierModel {
    /// Rebuilds a model from stored parameters. Head rows are ordered by
    /// class id and tagged with task 0, since the introducing task is not
    /// recorded in the parameter names.
    pub fn from_params(config: &MlpConfig, seed: u64, params: ParamSet) -> Result<ClassifierModel> {
        let mut model = init_model(config, seed)?;
        let mut classes = Vec::new();
        for name in params.names().filter(|n| is_head_entry(n)) {
            let class = name
                .strip_prefix("head.c")
                .and_then(|r| r.strip_suffix(".weight"))
                .map(|c| c.parse::<usize>());
            match class {
                Some(Ok(c)) => classes.push(c),
                Some(Err(_)) => return Err(input(format!("bad head entry name `{name}`"))),
                None => {}
            }
        }
        model = model.expand_head(&classes, 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn head(&self) -> &[HeadRow] {
        &self.head
    }

    pub fn num_classes(&self) -> usize {
        self.head.len()
    }

    /// Logit column of `class_id`, if the class has a head row.
    pub fn class_index(&self, class_id: usize) -> Option<usize> {
        self.index.get(&class_id).copied()
    }

    /// Maps class ids to logit columns.
    pub fn label_indices(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.class_index(c)
                    .ok_or_else(|| input(format!("class {c} has no head row")))
            })
            .collect()
    }

    /// Replaces all parameter values; the layout must stay the same.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_aligned(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: ParamSet) -> Result<ClassifierModel> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// Appends seeded head rows for `new_classes`; existing values are untouched.
    pub fn expand_head(&self, new_classes: &[usize], task_id: usize) -> Result<ClassifierModel> {
        let mut out = self.clone();
        let feat = self.config.feature_dim();
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        for &c in new_classes {
            if out.index.contains_key(&c) {
                return Err(input(format!("class {c} already has a head row")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "head", c as u64));
            let w: Vec<f64> = (0..feat).map(|_| normal.sample(&mut rng)).collect();
            let b = normal.sample(&mut rng);
            out.params.insert(head_weight_name(c), Tensor::vector(w))?;
            out.params.insert(head_bias_name(c), Tensor::vector(vec![b]))?;
            out.index.insert(c, out.head.len());
            out.head.push(HeadRow {
                class_id: c,
                task_id,
            });
        }
        Ok(out)
    }

    /// Backbone entries plus head rows introduced before `task_id`.
    pub fn shared_param_mask(&self, task_id: usize) -> ParamMask {
        let mut names: Vec<String> = self
            .params
            .names()
            .filter(|n| !is_head_entry(n))
            .map(str::to_owned)
            .collect();
        for row in self.head.iter().filter(|r| r.task_id < task_id) {
            names.push(head_weight_name(row.class_id));
            names.push(head_bias_name(row.class_id));
        }
        ParamMask::new(names)
    }

    pub fn backbone_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !is_head_entry(n))
            .map(str::to_owned)
            .collect()
    }

    /// Records the feature extractor on `tape` and returns the feature node.
    pub fn record_backbone(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.config.hidden_dims.len() {
            let w = tape.param(layer_weight_name(l), self.param(&layer_weight_name(l))?.clone());
            let b = tape.param(layer_bias_name(l), self.param(&layer_bias_name(l))?.clone());
            let z = tape.linear(h, w, b)?;
            h = match self.config.activation {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Relu => tape.relu(z)?,
            };
        }
        Ok(h)
    }

    /// Records the head on `tape` applied to `features`; returns logits.
    pub fn record_head(&self, tape: &mut GradTape, features: Var) -> Result<Var> {
        if self.head.is_empty() {
            return Err(usage("head is empty"));
        }
        let mut cols = Vec::with_capacity(self.head.len());
        let mut biases = Vec::with_capacity(self.head.len());
        for row in &self.head {
            let wn = head_weight_name(row.class_id);
            let bn = head_bias_name(row.class_id);
            cols.push(tape.param(wn.clone(), self.param(&wn)?.clone()));
            biases.push(tape.param(bn.clone(), self.param(&bn)?.clone()));
        }
        let w = tape.stack_cols(&cols)?;
        let b = tape.concat(&biases)?;
        tape.linear(features, w, b)
    }

    /// Full forward pass on `tape`; returns the logit node.
    pub fn record(&self, tape: &mut GradTape, x: Var) -> Result<Var> {
        let f = self.record_backbone(tape, x)?;
        self.record_head(tape, f)
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| usage(format!("missing parameter `{name}`")))
    }

    /// Feature extractor output without recording.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut h = inputs.clone();
        for l in 0..self.config.hidden_dims.len() {
            let z = forward_linear(
                &h,
                self.param(&layer_weight_name(l))?,
                self.param(&layer_bias_name(l))?,
            )?;
            h = match self.config.activation {
                Activation::Tanh => z.map(f64::tanh),
                Activation::Relu => z.map(|v| v.max(0.0)),
            };
        }
        Ok(h)
    }

    /// Head weight matrix `[feature_dim, K]` and bias `[K]` in logit order.
    pub fn head_matrix(&self) -> Result<(Tensor, Tensor)> {
        let feat = self.config.feature_dim();
        let k = self.head.len();
        let mut w = vec![0.0; feat * k];
        let mut b = Vec::with_capacity(k);
        for (j, row) in self.head.iter().enumerate() {
            let col = self.param(&head_weight_name(row.class_id))?;
            for (i, &v) in col.data().iter().enumerate() {
                w[i * k + j] = v;
            }
            b.push(self.param(&head_bias_name(row.class_id))?.data()[0]);
        }
        Ok((Tensor::new(vec![feat, k], w)?, Tensor::vector(b)))
    }

    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        if self.head.is_empty() {
            return Err(usage("head is empty"));
        }
        let (w, b) = self.head_matrix()?;
        forward_linear(features, &w, &b)
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.logits_from_features(&self.features(inputs)?)
    }

    /// Argmax class id per row; ties go to the lowest class id.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok(self.argmax_classes(&logits))
    }

    pub(crate) fn argmax_classes(&self, logits: &Tensor) -> Vec<usize> {
        (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for j in 1..row.len() {
                    let better = row[j] > row[best]
                        || (row[j] == row[best] && self.head[j].class_id < self.head[best].class_id);
                    if better {
                        best = j;
                    }
                }
                self.head[best].class_id
            })
            .collect()
    }
}
