use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::spline::build_spline_graph;
use crate::autodiff::{ParamId, ParamStore, Real, SplineGraph, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphbuild::{GraphSample, NUM_CLASSES, PATCH_SIZE};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: [usize; 2],
    pub gnn_channels: Vec<usize>,
    pub decoder_hidden: [usize; 2],
    pub spline_degree: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// `false` feeds encoder features straight to the decoder.
    pub use_gnn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: [8, 16],
            gnn_channels: vec![32, 32, 32],
            decoder_hidden: [64, 32],
            spline_degree: 2,
            kernel_size: 5,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            use_gnn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.spline_degree < 1 {
            return bad("spline_degree must be >= 1".into());
        }
        if self.kernel_size < self.spline_degree + 1 {
            return bad("kernel_size must be >= spline_degree + 1".into());
        }
        let widths = self
            .conv_channels
            .iter()
            .chain(&self.gnn_channels)
            .chain(&self.decoder_hidden);
        if widths.clone().any(|&c| c == 0) {
            return bad("channel widths must be > 0".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must be in [0, 1)".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return bad("batch-norm momentum/eps out of range".into());
        }
        Ok(())
    }

    /// Width of the per-node vector entering the decoder.
    pub fn decoder_input(&self) -> usize {
        if self.use_gnn {
            *self.gnn_channels.last().unwrap_or(&self.conv_channels[1])
        } else {
            self.conv_channels[1]
        }
    }
}

/// Two valid 3^3 convolutions reduce a 5^3 patch to a single voxel.
pub const CONV_KERNEL: usize = 3;
const ENCODER_SPATIAL: usize = PATCH_SIZE + 2 - 2 * CONV_KERNEL;

fn add_bn<T: Real>(s: &mut ParamStore<T>, prefix: &str, c: usize) {
    s.add(&format!("{prefix}.gamma"), Tensor::full(vec![c], T::one()), true);
    s.add(&format!("{prefix}.beta"), Tensor::zeros(vec![c]), true);
    s.add(&format!("{prefix}.running_mean"), Tensor::zeros(vec![c]), false);
    s.add(&format!("{prefix}.running_var"), Tensor::full(vec![c], T::one()), false);
}

fn add_encoder<T: Real>(s: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl rand::Rng) {
    let k = CONV_KERNEL;
    let [c1, c2] = cfg.conv_channels;
    let k3 = k * k * k;
    s.add_uniform("enc.conv1.w", vec![k, k, k, 1, c1], k3, rng);
    s.add_uniform("enc.conv1.b", vec![c1], k3, rng);
    add_bn(s, "enc.bn1", c1);
    s.add_uniform("enc.conv2.w", vec![k, k, k, c1, c2], k3 * c1, rng);
    s.add_uniform("enc.conv2.b", vec![c2], k3 * c1, rng);
    add_bn(s, "enc.bn2", c2);
}

/// Parameters of the node classifier.
pub fn init_error_net<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0x6e6574]);
    let mut s = ParamStore::new();
    add_encoder(&mut s, cfg, &mut rng);
    if cfg.use_gnn {
        let kernels = cfg.kernel_size.pow(3);
        let mut cin = cfg.conv_channels[1];
        for (l, &cout) in cfg.gnn_channels.iter().enumerate() {
            s.add_uniform(&format!("gnn{l}.w"), vec![kernels * cin, cout], cin, &mut rng);
            s.add_uniform(&format!("gnn{l}.root"), vec![cin, cout], cin, &mut rng);
            s.add_uniform(&format!("gnn{l}.b"), vec![cout], cin, &mut rng);
            add_bn(&mut s, &format!("gnn{l}.bn"), cout);
            cin = cout;
        }
    }
    let dims = [cfg.decoder_input(), cfg.decoder_hidden[0], cfg.decoder_hidden[1], NUM_CLASSES];
    for l in 0..3 {
        s.add_uniform(&format!("dec.fc{}.w", l + 1), vec![dims[l], dims[l + 1]], dims[l], &mut rng);
        s.add_uniform(&format!("dec.fc{}.b", l + 1), vec![dims[l + 1]], dims[l], &mut rng);
    }
    Ok(s)
}

/// Parameters of the boundary-patch classifier: shared encoder plus a
/// 1x1x1 convolution head.
pub fn init_pretext<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[0x707265]);
    let mut s = ParamStore::new();
    add_encoder(&mut s, cfg, &mut rng);
    let c = cfg.conv_channels[1];
    s.add_uniform("head.w", vec![c, 1], c, &mut rng);
    s.add_uniform("head.b", vec![1], c, &mut rng);
    Ok(s)
}

/// Copies every encoder tensor (weights and running statistics).
pub fn transfer_encoder<T: Real>(from: &ParamStore<T>, into: &mut ParamStore<T>) -> Result<usize> {
    into.copy_prefix_from(from, "enc.")
}

fn in_layer<V>(name: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Shape { context, detail } => Error::Shape {
            context: format!("{name} ({context})"),
            detail,
        },
        other => other,
    })
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    cfg: &'a ModelConfig,
    train: bool,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.tape.param(self.store, id))
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.store.id(name)
    }

    fn lrelu(&mut self, x: Var) -> Var {
        self.tape.leaky_relu(x, T::of(self.cfg.leaky_slope))
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        let running = (
            self.id(&format!("{prefix}.running_mean"))?,
            self.id(&format!("{prefix}.running_var"))?,
        );
        in_layer(
            prefix,
            self.tape
                .batch_norm(x, g, b, running, self.store, self.cfg.bn_eps, self.train),
        )
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = in_layer(prefix, self.tape.matmul(x, w))?;
        in_layer(prefix, self.tape.add_bias(y, b))
    }

    /// Patches `[B, 5, 5, 5, 1]` -> spatial features `[B, S^3, C]`.
    fn encoder(&mut self, patches: Var) -> Result<Var> {
        let b = self.tape.shape(patches)[0];
        let [c1, c2] = self.cfg.conv_channels;
        let s1 = PATCH_SIZE - CONV_KERNEL + 1;
        let s2 = ENCODER_SPATIAL;

        let w1 = self.p("enc.conv1.w")?;
        let b1 = self.p("enc.conv1.b")?;
        let y = in_layer("enc.conv1", self.tape.conv3d(patches, w1))?;
        let y = in_layer("enc.conv1", self.tape.reshape(y, vec![b * s1 * s1 * s1, c1]))?;
        let y = self.tape.add_bias(y, b1)?;
        let y = self.lrelu(y);
        let y = self.bn(y, "enc.bn1")?;
        let y = self.tape.reshape(y, vec![b, s1, s1, s1, c1])?;

        let w2 = self.p("enc.conv2.w")?;
        let b2 = self.p("enc.conv2.b")?;
        let y = in_layer("enc.conv2", self.tape.conv3d(y, w2))?;
        let y = self.tape.reshape(y, vec![b * s2 * s2 * s2, c2])?;
        let y = self.tape.add_bias(y, b2)?;
        let y = self.lrelu(y);
        let y = self.bn(y, "enc.bn2")?;
        self.tape.reshape(y, vec![b, s2 * s2 * s2, c2])
    }

    /// Node vectors `[B, C]`.
    fn node_features(&mut self, patches: Var) -> Result<Var> {
        let y = self.encoder(patches)?;
        let b = self.tape.shape(y)[0];
        self.tape.reshape(y, vec![b, self.cfg.conv_channels[1]])
    }
}

fn check_patches<T: Real>(tape: &Tape<T>, patches: Var) -> Result<()> {
    let s = tape.shape(patches);
    if s.len() != 5 || s[1..] != [PATCH_SIZE, PATCH_SIZE, PATCH_SIZE, 1] {
        return Err(Error::Shape {
            context: "enc.input".into(),
            detail: format!("expected [B, 5, 5, 5, 1], got {s:?}"),
        });
    }
    Ok(())
}

/// Concatenation of graphs into one disjoint graph.
#[derive(Debug, Clone)]
pub struct GraphBatch<T> {
    pub patches: Tensor<T>,
    pub graph: Arc<SplineGraph<T>>,
    pub labels: Vec<usize>,
    /// Start node of each graph, plus the total.
    pub node_offsets: Vec<usize>,
}

impl<T: Real> GraphBatch<T> {
    pub fn new(samples: &[&GraphSample], cfg: &ModelConfig, blind: bool) -> Result<Self> {
        let mut patches = Vec::new();
        let mut edges = Vec::new();
        let mut pseudo = Vec::new();
        let mut labels = Vec::new();
        let mut node_offsets = vec![0];
        for s in samples {
            s.validate()?;
            let base = *node_offsets.last().unwrap() as u32;
            if blind {
                patches.extend(std::iter::repeat_n(T::zero(), s.patches.len()));
            } else {
                patches.extend(s.patches.iter().map(|&v| T::of(v as f64)));
            }
            edges.extend(s.edges.iter().map(|&[a, b]| [a + base, b + base]));
            pseudo.extend_from_slice(&s.pseudo_coords);
            labels.extend(s.labels.iter().map(|&l| l as usize));
            node_offsets.push(base as usize + s.num_nodes());
        }
        let n = labels.len();
        let graph = build_spline_graph(n, &edges, &pseudo, cfg.kernel_size, cfg.spline_degree)?;
        Ok(Self {
            patches: Tensor::new(vec![n, PATCH_SIZE, PATCH_SIZE, PATCH_SIZE, 1], patches)?,
            graph: Arc::new(graph),
            labels,
            node_offsets,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }
}

/// Node logits `[N, 5]`.
pub fn error_net_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &GraphBatch<T>,
    train: bool,
) -> Result<Var> {
    let patches = tape.constant(batch.patches.clone());
    error_net_forward_from(tape, store, cfg, patches, &batch.graph, train)
}

/// Same as [`error_net_forward`] with the patch input already on the tape.
pub fn error_net_forward_from<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    patches: Var,
    graph: &Arc<SplineGraph<T>>,
    train: bool,
) -> Result<Var> {
    check_patches(tape, patches)?;
    if tape.shape(patches)[0] != graph.num_nodes {
        return Err(Error::Shape {
            context: "enc.input".into(),
            detail: format!("{} patches for {} nodes", tape.shape(patches)[0], graph.num_nodes),
        });
    }
    let mut cx = Ctx {
        tape,
        store,
        cfg,
        train,
    };
    let mut h = cx.node_features(patches)?;
    if cfg.use_gnn {
        for l in 0..cfg.gnn_channels.len() {
            let name = format!("gnn{l}");
            let w = cx.p(&format!("{name}.w"))?;
            let root = cx.p(&format!("{name}.root"))?;
            let b = cx.p(&format!("{name}.b"))?;
            let msg = in_layer(&name, cx.tape.spline_conv(h, w, graph.clone()))?;
            let own = in_layer(&name, cx.tape.matmul(h, root))?;
            let y = cx.tape.add(msg, own)?;
            let y = cx.tape.add_bias(y, b)?;
            let y = cx.lrelu(y);
            h = cx.bn(y, &format!("{name}.bn"))?;
        }
    }
    let y = cx.linear(h, "dec.fc1")?;
    let y = cx.lrelu(y);
    let y = cx.linear(y, "dec.fc2")?;
    let y = cx.lrelu(y);
    cx.linear(y, "dec.fc3")
}

/// Boundary logits `[B]` for patches `[B, 5, 5, 5, 1]`.
pub fn pretext_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    patches: Var,
    train: bool,
) -> Result<Var> {
    check_patches(tape, patches)?;
    let b = tape.shape(patches)[0];
    let mut cx = Ctx {
        tape,
        store,
        cfg,
        train,
    };
    let y = cx.encoder(patches)?;
    let s = cx.tape.shape(y)[1];
    let y = cx.tape.reshape(y, vec![b * s, cfg.conv_channels[1]])?;
    let y = cx.linear(y, "head")?;
    let y = cx.tape.reshape(y, vec![b, s])?;
    Ok(cx.tape.row_mean(y))
}

/// Inference-mode class scores for one sample.
pub fn predict_logits(store: &ParamStore<f32>, cfg: &ModelConfig, sample: &GraphSample, blind: bool) -> Result<Tensor<f32>> {
    let batch = GraphBatch::new(&[sample], cfg, blind)?;
    let mut tape = Tape::new();
    let out = error_net_forward(&mut tape, store, cfg, &batch, false)?;
    Ok(tape.value(out).clone())
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.row_len();
    logits
        .data
        .chunks_exact(k)
        .map(|r| {
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict_classes(store: &ParamStore<f32>, cfg: &ModelConfig, sample: &GraphSample, blind: bool) -> Result<Vec<u8>> {
    Ok(argmax_rows(&predict_logits(store, cfg, sample, blind)?))
}
