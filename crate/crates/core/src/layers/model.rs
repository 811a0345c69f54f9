use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{check_dna_shape, dna_conv, gcn_conv, AttentionRecord, DnaLayerParams};
use super::grouped::{check_grouping, Dense, GroupedWeight};
use crate::error::{config, Error, Result};
use crate::graph::Graph;
use crate::tensor::{check_dropout_rate, concat_last_axis, max_of, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gcn,
    Dna,
}

/// How per-layer representations are combined before the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JkMode {
    /// Use the last representation.
    None,
    Concat,
    Pool,
}

/// Where dropout is applied in the forward pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutPlacement {
    /// On the raw features, on the input of every graph layer, and after the
    /// jumping-knowledge combination.
    EveryLayer,
    /// Once on the projected features entering the layer stack, and once
    /// after the jumping-knowledge combination.
    Ends,
}

macro_rules! cli_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(config(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

cli_enum!(LayerKind { "gcn" => LayerKind::Gcn, "dna" => LayerKind::Dna });
cli_enum!(JkMode { "none" => JkMode::None, "concat" => JkMode::Concat, "pool" => JkMode::Pool });
cli_enum!(DropoutPlacement { "every-layer" => DropoutPlacement::EveryLayer, "ends" => DropoutPlacement::Ends });

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of graph layers after the input projection.
    pub num_layers: usize,
    /// Feature width shared by every layer.
    pub hidden: usize,
    pub groups: usize,
    pub heads: usize,
    pub layer_kind: LayerKind,
    pub jk_mode: JkMode,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub dropout_placement: DropoutPlacement,
    pub window: Option<usize>,
    /// Slack softmax in DNA attention; disabling it is a test hook.
    pub slack: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            groups: 1,
            heads: 1,
            layer_kind: LayerKind::Gcn,
            jk_mode: JkMode::None,
            dropout: 0.5,
            attn_dropout: 0.8,
            dropout_placement: DropoutPlacement::Ends,
            window: None,
            slack: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(config("hidden size must be positive"));
        }
        check_dropout_rate(self.dropout)?;
        check_dropout_rate(self.attn_dropout)?;
        if self.window == Some(0) {
            return Err(config("history window must be at least 1"));
        }
        match self.layer_kind {
            LayerKind::Dna => check_dna_shape(self.hidden, self.heads, self.groups),
            LayerKind::Gcn => check_grouping(self.groups, self.hidden, self.hidden),
        }
    }

    /// Width of the representation entering the classifier.
    pub fn representation_width(&self) -> usize {
        match self.jk_mode {
            JkMode::Concat if self.num_layers > 0 => self.hidden * self.num_layers,
            _ => self.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Gcn(GroupedWeight),
    Dna(DnaLayerParams),
}

/// All trainable tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input: Dense,
    pub layers: Vec<LayerParams>,
    pub classifier: Dense,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, in_features: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input = Dense::glorot(in_features, cfg.hidden, rng);
        let layers = (0..cfg.num_layers)
            .map(|_| match cfg.layer_kind {
                LayerKind::Gcn => GroupedWeight::glorot(cfg.groups, cfg.hidden, cfg.hidden, rng).map(LayerParams::Gcn),
                LayerKind::Dna => {
                    let mut p = DnaLayerParams::glorot(cfg.hidden, cfg.heads, cfg.groups, cfg.window, rng)?;
                    p.slack = cfg.slack;
                    Ok(LayerParams::Dna(p))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Dense::glorot(cfg.representation_width(), num_classes, rng);
        Ok(Self {
            input,
            layers,
            classifier,
        })
    }

    /// Every tensor in canonical order, with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Gcn(w) => out.push((format!("layers.{i}.theta"), w.blocks())),
                LayerParams::Dna(p) => {
                    out.push((format!("layers.{i}.theta_q"), p.theta_q.blocks()));
                    out.push((format!("layers.{i}.theta_k"), p.theta_k.blocks()));
                    out.push((format!("layers.{i}.theta_v"), p.theta_v.blocks()));
                }
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out.push(("classifier.bias".to_string(), &self.classifier.bias));
        out
    }

    /// Mutable view in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        for layer in &mut self.layers {
            match layer {
                LayerParams::Gcn(w) => out.push(w.blocks_mut()),
                LayerParams::Dna(p) => {
                    out.push(p.theta_q.blocks_mut());
                    out.push(p.theta_k.blocks_mut());
                    out.push(p.theta_v.blocks_mut());
                }
            }
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Outputs of one forward pass.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Representation entering the classifier (after jumping knowledge).
    pub representation: Var<'t>,
    /// One record per DNA layer.
    pub records: Vec<AttentionRecord>,
    /// Parameter handles, in [`ModelParams::named_tensors`] order.
    pub params: Vec<Var<'t>>,
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig, in_features: usize, num_classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config, in_features, num_classes, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn in_features(&self) -> usize {
        self.params.input.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.params.classifier.weight.shape()[1]
    }

    /// Runs the network on `x[N, F]`.
    ///
    /// Pipeline: dropout, input projection and ReLU give representation 1;
    /// each graph layer then adds one representation (ReLU after the layer);
    /// jumping knowledge combines the layer outputs; dropout and a dense
    /// classifier give the logits. Parameters are recorded as leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        graph: &Arc<Graph>,
        x: Var<'t>,
        rng: &mut R,
        training: bool,
        trainable: bool,
    ) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let xs = x.shape();
        if xs.len() != 2 || xs[0] != graph.num_nodes() || xs[1] != self.in_features() {
            return Err(Error::Shape {
                op: "forward",
                lhs: xs,
                rhs: vec![graph.num_nodes(), self.in_features()],
            });
        }
        let put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let mut params = Vec::new();

        let every_layer = cfg.dropout_placement == DropoutPlacement::EveryLayer;
        let p = cfg.dropout;

        let (w_in, b_in) = (put(&self.params.input.weight), put(&self.params.input.bias));
        params.extend([w_in, b_in]);
        let x_in = if every_layer { x.dropout(p, rng, training)? } else { x };
        let mut h1 = x_in.matmul(w_in)?.add_bias(b_in)?.relu();
        if !every_layer {
            h1 = h1.dropout(p, rng, training)?;
        }

        let mut history = vec![h1];
        let mut records = Vec::new();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let produced = history.len() + 1;
            let out = match layer {
                LayerParams::Gcn(theta) => {
                    let theta = put(theta.blocks());
                    params.push(theta);
                    let input = *history.last().expect("history starts non-empty");
                    let input = if every_layer { input.dropout(p, rng, training)? } else { input };
                    gcn_conv(graph, input, theta)?
                }
                LayerParams::Dna(dna) => {
                    let weights = dna.on_tape(tape, trainable);
                    params.extend(weights);
                    let inputs = if every_layer {
                        history
                            .iter()
                            .map(|h| h.dropout(p, rng, training))
                            .collect::<Result<Vec<_>>>()?
                    } else {
                        history.clone()
                    };
                    let (out, record) = dna_conv(graph, &inputs, dna, &weights, cfg.attn_dropout, produced, rng, training)
                        .map_err(|e| annotate(e, i))?;
                    records.push(record);
                    out
                }
            };
            history.push(out.relu());
        }

        let layer_outputs = if history.len() > 1 { &history[1..] } else { &history[..] };
        let representation = match cfg.jk_mode {
            JkMode::None => *history.last().expect("history starts non-empty"),
            JkMode::Concat => jk_concat(layer_outputs)?,
            JkMode::Pool => jk_pool(layer_outputs)?,
        };

        let (w_out, b_out) = (put(&self.params.classifier.weight), put(&self.params.classifier.bias));
        params.extend([w_out, b_out]);
        let logits = representation
            .dropout(p, rng, training)?
            .matmul(w_out)?
            .add_bias(b_out)?;
        Ok(ForwardOutput {
            logits,
            representation,
            records,
            params,
        })
    }
}

fn annotate(err: Error, layer: usize) -> Error {
    match err {
        Error::Config(msg) => Error::Config(format!("layer {layer}: {msg}")),
        other => other,
    }
}

/// Feature-axis concatenation of per-layer representations, in layer order.
pub fn jk_concat<'t>(history: &[Var<'t>]) -> Result<Var<'t>> {
    concat_last_axis(history)
}

/// Elementwise maximum over per-layer representations; the earliest layer
/// wins ties and receives the gradient.
pub fn jk_pool<'t>(history: &[Var<'t>]) -> Result<Var<'t>> {
    max_of(history)
}
