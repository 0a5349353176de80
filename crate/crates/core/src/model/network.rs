use super::params::{BatchNorm, Conv, ConvBlock, ConvBnRelu, Decoder, Discriminator, Encoder, Linear, Siamese};
use super::{InferenceParams, ModelParams};
use crate::autograd::{BnMode, Graph, Var};
use crate::data::Modality;
use crate::tensor::Tensor;

/// Rows per forward pass in the value-level helpers.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Parameters are differentiable; batch-norm uses and records batch statistics.
    Train,
    /// Parameters are constants; batch-norm uses running statistics.
    Eval,
}

/// Encoder result: the bottleneck and the pre-pooling skip maps, shallowest first.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

/// Value-level encoder output for a set of spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeValues {
    pub bottleneck: Vec<Vec<f64>>,
    pub embedding: Vec<Vec<f64>>,
}

/// Builds forward computations on a graph.
pub struct Network<'g> {
    pub graph: &'g mut Graph,
    pub mode: Mode,
}

impl<'g> Network<'g> {
    pub fn new(graph: &'g mut Graph, mode: Mode) -> Self {
        Self { graph, mode }
    }

    /// Stacks equal-length rows into a `[1, n, l]` input.
    pub fn input_rows(&mut self, rows: &[&[f64]]) -> Var {
        self.graph.input(rows_tensor(rows))
    }

    fn bind(&mut self, name: String, t: &Tensor) -> Var {
        match self.mode {
            Mode::Train => self.graph.param(&name, t),
            Mode::Eval => self.graph.input(t.clone()),
        }
    }

    fn conv(&mut self, c: &Conv, p: &str, x: Var) -> Var {
        let w = self.bind(format!("{p}.weight"), &c.weight);
        let b = self.bind(format!("{p}.bias"), &c.bias);
        self.graph.conv1d(x, w, b)
    }

    fn bn(&mut self, bn: &BatchNorm, p: &str, x: Var) -> Var {
        let gamma = self.bind(format!("{p}.gamma"), &bn.gamma);
        let beta = self.bind(format!("{p}.beta"), &bn.beta);
        let mode = match self.mode {
            Mode::Train => BnMode::Train { name: p },
            Mode::Eval => BnMode::Eval { mean: bn.running_mean.data(), var: bn.running_var.data() },
        };
        self.graph.batch_norm(x, gamma, beta, mode)
    }

    fn cbr(&mut self, l: &ConvBnRelu, p: &str, x: Var) -> Var {
        let h = self.conv(&l.conv, &format!("{p}.conv"), x);
        let h = self.bn(&l.bn, &format!("{p}.bn"), h);
        self.graph.relu(h)
    }

    fn linear(&mut self, l: &Linear, p: &str, x: Var) -> Var {
        let w = self.bind(format!("{p}.weight"), &l.weight);
        let b = self.bind(format!("{p}.bias"), &l.bias);
        self.graph.linear(x, w, b)
    }

    /// Conv block without pooling, returns the pre-pool activation.
    fn block(&mut self, b: &ConvBlock, p: &str, i: usize, x: Var) -> Var {
        let h = self.cbr(&b[0], &format!("{p}.block{i}.0"), x);
        self.cbr(&b[1], &format!("{p}.block{i}.1"), h)
    }

    /// `x: [1, n, L]`.
    pub fn encode(&mut self, e: &Encoder, p: &str, x: Var) -> EncodeOutput {
        let mut h = x;
        let mut skips = Vec::with_capacity(e.blocks.len());
        for (i, b) in e.blocks.iter().enumerate() {
            let s = self.block(b, p, i, h);
            skips.push(s);
            h = self.graph.max_pool2(s);
        }
        let bottleneck = self.cbr(&e.head, &format!("{p}.head"), h);
        EncodeOutput { bottleneck, skips }
    }

    /// Reconstructs a `[1, n, L]` spectrum in `[0, 1]` from an encoding.
    pub fn decode(&mut self, d: &Decoder, p: &str, enc: &EncodeOutput) -> Var {
        let mut h = enc.bottleneck;
        let levels = d.up.len();
        for i in 0..levels {
            let u = self.graph_conv_t(&d.up[i], &format!("{p}.up{i}"), h);
            let c = self.graph.concat_channels(u, enc.skips[levels - 1 - i]);
            h = self.cbr(&d.fuse[i], &format!("{p}.fuse{i}"), c);
        }
        let out = self.conv(&d.out, &format!("{p}.out"), h);
        self.graph.sigmoid(out)
    }

    fn graph_conv_t(&mut self, c: &Conv, p: &str, x: Var) -> Var {
        let w = self.bind(format!("{p}.weight"), &c.weight);
        let b = self.bind(format!("{p}.bias"), &c.bias);
        self.graph.conv_transpose2(x, w, b)
    }

    /// Real/generated logits `[n, 2]` for a `[1, n, L]` input.
    pub fn discriminate(&mut self, d: &Discriminator, p: &str, x: Var) -> Var {
        let mut h = x;
        for (i, b) in d.blocks.iter().enumerate() {
            let s = self.block(b, p, i, h);
            h = self.graph.max_pool2(s);
        }
        let rows = self.graph.to_rows(h);
        self.linear(&d.fc, &format!("{p}.fc"), rows)
    }

    /// Embeddings `[n, embedding_dim]` of a bottleneck.
    pub fn embed(&mut self, s: &Siamese, p: &str, bottleneck: Var, input_channels: usize) -> Var {
        let mut h = self.graph.regroup(bottleneck, input_channels);
        for (i, b) in s.blocks.iter().enumerate() {
            let a = self.block(b, p, i, h);
            h = self.graph.max_pool2(a);
        }
        let rows = self.graph.to_rows(h);
        self.linear(&s.fc, &format!("{p}.fc"), rows)
    }
}

pub(crate) fn rows_tensor(rows: &[&[f64]]) -> Tensor {
    let l = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * l);
    for r in rows {
        assert_eq!(r.len(), l, "rows differ in length");
        data.extend_from_slice(r);
    }
    Tensor::from_vec(&[1, rows.len(), l], data)
}

fn split_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.dim(1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn encode_values(enc: &Encoder, prefix: &str, s: &Siamese, channels: usize, rows: &[&[f64]]) -> EncodeValues {
    let mut out = EncodeValues { bottleneck: Vec::new(), embedding: Vec::new() };
    for chunk in rows.chunks(CHUNK) {
        let mut g = Graph::new();
        let mut net = Network::new(&mut g, Mode::Eval);
        let x = net.input_rows(chunk);
        let e = net.encode(enc, prefix, x);
        let z = net.embed(s, "s", e.bottleneck, channels);
        let b = net.graph.to_rows(e.bottleneck);
        out.bottleneck.extend(split_rows(g.value(b)));
        out.embedding.extend(split_rows(g.value(z)));
    }
    out
}

fn prefix(m: Modality) -> &'static str {
    match m {
        Modality::M1 => "e1",
        Modality::M2 => "e2",
    }
}

impl InferenceParams {
    /// Bottlenecks and embeddings of spectra of modality `m`, in evaluation mode.
    pub fn encode_values(&self, m: Modality, rows: &[&[f64]]) -> EncodeValues {
        encode_values(self.encoder(m), prefix(m), &self.s, self.config.siamese_input_channels(), rows)
    }

    pub fn embed(&self, m: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        self.encode_values(m, rows).embedding
    }
}

impl ModelParams {
    pub fn encode_values(&self, m: Modality, rows: &[&[f64]]) -> EncodeValues {
        encode_values(self.encoder(m), prefix(m), &self.s, self.config.siamese_input_channels(), rows)
    }

    pub fn embed(&self, m: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        self.encode_values(m, rows).embedding
    }

    /// Encodes with the `from` encoder and decodes with the `to` decoder.
    pub fn translate(&self, from: Modality, to: Modality, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        let dp = match to {
            Modality::M1 => "g1",
            Modality::M2 => "g2",
        };
        for chunk in rows.chunks(CHUNK) {
            let mut g = Graph::new();
            let mut net = Network::new(&mut g, Mode::Eval);
            let x = net.input_rows(chunk);
            let e = net.encode(self.encoder(from), prefix(from), x);
            let y = net.decode(self.decoder(to), dp, &e);
            let r = net.graph.to_rows(y);
            out.extend(split_rows(g.value(r)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::gradcheck::check;
    use crate::model::{ArchConfig, ParamKind, SubNetwork};
    use crate::rng;

    fn rand_rows(n: usize, l: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "net-test", 0);
        Tensor::from_vec(&[1, n, l], (0..n * l).map(|_| r.random_range(0.0..1.0)).collect())
    }

    fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.value(y).shape().to_vec();
        let w = rand_rows(1, shape.iter().product(), seed);
        let w = Tensor::from_vec(&shape, w.into_data());
        g.dot_const(y, &w)
    }

    #[test]
    fn forward_shapes() {
        let cfg = ArchConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let mut net = Network::new(&mut g, Mode::Train);
        let x = net.graph.input(rand_rows(2, 1024, 1));
        let e = net.encode(&p.e1, "e1", x);
        let y = net.decode(&p.g2, "g2", &e);
        let d = net.discriminate(&p.d2, "d2", y);
        let z = net.embed(&p.s, "s", e.bottleneck, cfg.siamese_input_channels());
        assert_eq!(g.value(e.bottleneck).shape(), &[1, 2, 128]);
        for (i, s) in e.skips.iter().enumerate() {
            let (c, l) = cfg.skip_shape(i);
            assert_eq!(g.value(*s).shape(), &[c, 2, l]);
        }
        assert_eq!(g.value(y).shape(), &[1, 2, 1024]);
        assert!(g.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(g.value(d).shape(), &[2, 2]);
        assert_eq!(g.value(z).shape(), &[2, 128]);
    }

    /// Checks gradients with respect to every trainable tensor under `select`.
    fn param_gradcheck(select: &'static str, build: fn(&mut Network, &ModelParams, Var) -> Var) {
        let cfg = ArchConfig::tiny();
        let base = ModelParams::init(&cfg, 5).unwrap();
        let mut names = Vec::new();
        let mut inputs = Vec::new();
        base.for_each(|n, t, kind| {
            if kind == ParamKind::Trainable && SubNetwork::of(n).unwrap().prefix() == select {
                names.push(n.to_string());
                inputs.push(t.clone());
            }
        });
        inputs.push(rand_rows(4, cfg.input_length, 2));
        let report = check(&inputs, 40, 0, |g, vars| {
            for (n, v) in names.iter().zip(vars) {
                g.alias_param(n, *v);
            }
            let mut net = Network::new(g, Mode::Train);
            let y = build(&mut net, &base, vars[names.len()]);
            project(net.graph, y, 77)
        });
        assert!(report.pass_fraction() >= 0.99, "{select}: {report:?}");
    }

    #[test]
    fn encoder_and_siamese_gradients() {
        param_gradcheck("e1", |net, p, x| net.encode(&p.e1, "e1", x).bottleneck);
        param_gradcheck("s", |net, p, x| {
            let e = net.encode(&p.e1, "e1", x);
            net.embed(&p.s, "s", e.bottleneck, p.config.siamese_input_channels())
        });
    }

    #[test]
    fn decoder_and_discriminator_gradients() {
        param_gradcheck("g1", |net, p, x| {
            let e = net.encode(&p.e2, "e2", x);
            net.decode(&p.g1, "g1", &e)
        });
        param_gradcheck("d2", |net, p, x| net.discriminate(&p.d2, "d2", x));
    }

    #[test]
    fn every_skip_reaches_the_decoder_output() {
        let cfg = ArchConfig::tiny();
        let p = ModelParams::init(&cfg, 8).unwrap();
        let x = rand_rows(2, cfg.input_length, 3);
        let mut g = Graph::new();
        let mut net = Network::new(&mut g, Mode::Eval);
        let xi = net.graph.input(x);
        let enc = net.encode(&p.e1, "e1", xi);
        let skips: Vec<Tensor> = enc.skips.iter().map(|s| g.value(*s).clone()).collect();
        let bottleneck = g.value(enc.bottleneck).clone();
        let output_sum = |skips: &[Tensor]| {
            let mut g = Graph::new();
            let mut net = Network::new(&mut g, Mode::Eval);
            let e = EncodeOutput {
                bottleneck: net.graph.input(bottleneck.clone()),
                skips: skips.iter().map(|t| net.graph.input(t.clone())).collect(),
            };
            let y = net.decode(&p.g2, "g2", &e);
            g.value(y).data().iter().sum::<f64>()
        };
        let base = output_sum(&skips);
        for i in 0..skips.len() {
            let mut moved = skips.clone();
            for v in moved[i].data_mut() {
                *v += 1e-3;
            }
            assert!((output_sum(&moved) - base).abs() > 1e-9, "skip {i} has no effect");
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let cfg = ArchConfig::tiny();
        let p = ModelParams::init(&cfg, 1).unwrap().strip_for_inference();
        let x = rand_rows(3, cfg.input_length, 4);
        let rows: Vec<&[f64]> = x.data().chunks(cfg.input_length).collect();
        let all = p.embed(Modality::M2, &rows);
        let one = p.embed(Modality::M2, &rows[1..2]);
        assert_eq!(all[1], one[0]);
    }
}
