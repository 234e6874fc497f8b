//! Network assembly: stem, dense stages, pooling transitions and classifier head.

mod config;
mod cost;

pub use config::{growth_channels, NetworkConfig, Variant};
pub use cost::{CostReport, CostRow};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::nn::{ConvKind, ConvSpec, Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Element, Tensor};

/// A named tensor owned by a [`Model`].
#[derive(Debug, Clone)]
pub struct Named<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvRef {
    pub spec: ConvSpec,
    pub kind: ConvKind,
    pub weight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct NormRef {
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Step {
    Norm(NormRef),
    Act,
    Conv(ConvRef),
    Shuffle(usize),
    Dropout(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerKind {
    Stem(ConvRef),
    /// Steps produce the new channels, which are concatenated onto the input.
    Dense(Vec<Step>),
    Pool(usize),
    Head {
        norm: Option<NormRef>,
        weight: usize,
        bias: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub(crate) kind: LayerKind,
}

/// Result of one forward pass on a tape.
pub struct ForwardPass<T: Element> {
    pub logits: Var,
    /// Running statistics after this pass (changed only in train mode).
    pub stats: Vec<RunningStats<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<Named<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

struct Builder<'a, T: Element> {
    rng: &'a mut ChaCha8Rng,
    slope: f64,
    params: Vec<Named<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Element> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Named { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, kind: ConvKind) -> Result<ConvRef> {
        spec.validate(kind)?;
        let fan_in = (spec.kernel * spec.kernel * spec.in_per_group()) as f64;
        let gain = (2.0 / (1.0 + self.slope * self.slope)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let data = (0..spec.weight_len()).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        let weight = self.push(format!("{name}.weight"), Tensor::from_vec(&spec.weight_shape(kind), data)?);
        Ok(ConvRef { spec, kind, weight })
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<NormRef> {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(&[channels])?);
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[channels])?);
        self.stats.push((name.to_string(), RunningStats::new(channels)));
        Ok(NormRef { channels, gamma, beta, stats: self.stats.len() - 1 })
    }

    fn effcnet_block(&mut self, name: &str, cfg: &NetworkConfig, c: usize, k: usize) -> Result<Vec<Step>> {
        let mut steps = Vec::new();
        if cfg.batch_norm {
            steps.push(Step::Norm(self.norm(&format!("{name}.bn1"), c)?));
        }
        steps.push(Step::Act);
        steps.push(Step::Conv(self.conv(&format!("{name}.dw"), ConvSpec::depthwise(cfg.dw_kernel, c), ConvKind::Depthwise)?));
        if cfg.batch_norm {
            steps.push(Step::Norm(self.norm(&format!("{name}.bn2"), c)?));
        }
        steps.push(Step::Act);
        if cfg.single_pointwise {
            steps.push(Step::Conv(self.conv(&format!("{name}.pw"), ConvSpec::pointwise(c, k), ConvKind::Pointwise)?));
            steps.push(Step::Shuffle(cfg.permute_groups));
        } else {
            let mid = cfg.bottleneck_factor * k;
            steps.push(Step::Conv(self.conv(&format!("{name}.pw1"), ConvSpec::pointwise(c, mid), ConvKind::Pointwise)?));
            steps.push(Step::Shuffle(cfg.permute_groups));
            steps.push(Step::Conv(self.conv(&format!("{name}.pw2"), ConvSpec::pointwise(mid, k), ConvKind::Pointwise)?));
        }
        steps.push(Step::Dropout(cfg.dropout_rate));
        Ok(steps)
    }

    fn condensenet_block(&mut self, name: &str, cfg: &NetworkConfig, c: usize, k: usize) -> Result<Vec<Step>> {
        let g = cfg.groups;
        let mid = cfg.bottleneck_factor * k;
        if !c.is_multiple_of(g) || !mid.is_multiple_of(g) || !k.is_multiple_of(g) {
            bail!(Config, "{}: groups {} must divide {}, {} and {}", name, g, c, mid, k);
        }
        let mut steps = Vec::new();
        if cfg.batch_norm {
            steps.push(Step::Norm(self.norm(&format!("{name}.bn1"), c)?));
        }
        steps.push(Step::Act);
        steps.push(Step::Conv(self.conv(&format!("{name}.gconv1"), ConvSpec::grouped(1, c, mid, g), ConvKind::Grouped)?));
        steps.push(Step::Shuffle(g));
        if cfg.batch_norm {
            steps.push(Step::Norm(self.norm(&format!("{name}.bn2"), mid)?));
        }
        steps.push(Step::Act);
        steps.push(Step::Conv(self.conv(&format!("{name}.gconv3"), ConvSpec::grouped(3, mid, k, g), ConvKind::Grouped)?));
        Ok(steps)
    }
}

impl<T: Element> Model<T> {
    /// Builds the network described by `config` with weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T> { rng: &mut rng, slope: config.leaky_slope, params: Vec::new(), stats: Vec::new() };
        let mut layers = Vec::new();

        let mut c = config.init_channels;
        let stem = b.conv("stem", ConvSpec::standard(3, 3, c), ConvKind::Standard)?;
        layers.push(Layer { name: "stem".into(), in_channels: 3, out_channels: c, kind: LayerKind::Stem(stem) });

        for (d, &blocks) in config.stages.iter().enumerate() {
            let k = config.growth(d);
            for i in 0..blocks {
                let name = format!("stage{d}.block{i}");
                let steps = match config.variant {
                    Variant::Effcnet => b.effcnet_block(&name, &config, c, k)?,
                    Variant::CondensenetStatic => b.condensenet_block(&name, &config, c, k)?,
                };
                layers.push(Layer { name, in_channels: c, out_channels: c + k, kind: LayerKind::Dense(steps) });
                c += k;
            }
            if d + 1 < config.stages.len() {
                layers.push(Layer { name: format!("stage{d}.pool"), in_channels: c, out_channels: c, kind: LayerKind::Pool(2) });
            }
        }

        let norm = if config.batch_norm { Some(b.norm("head.bn", c)?) } else { None };
        let bound = 1.0 / (c as f64).sqrt();
        let w: Vec<T> = (0..c * config.num_classes).map(|_| T::from_f64(b.rng.gen_range(-bound..bound))).collect();
        let weight = b.push("head.linear.weight".into(), Tensor::from_vec(&[c, config.num_classes], w)?);
        let bias = b.push("head.linear.bias".into(), Tensor::zeros(&[config.num_classes])?);
        layers.push(Layer {
            name: "head".into(),
            in_channels: c,
            out_channels: config.num_classes,
            kind: LayerKind::Head { norm, weight, bias },
        });

        let (params, stats) = (b.params, b.stats);
        Ok(Self { config, layers, params, stats })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    /// Batch-norm running statistics, keyed by layer name.
    pub fn running_stats(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats<T>)] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets the classifier weights and bias to zero.
    pub fn zero_head(&mut self) {
        if let Some(Layer { kind: LayerKind::Head { weight, bias, .. }, .. }) = self.layers.last() {
            for i in [*weight, *bias] {
                let p = &mut self.params[i];
                p.value = Tensor::zeros(p.value.shape()).expect("non-empty head");
            }
        }
    }

    /// Registers every parameter on `tape`, tracked for gradients when `train` is set.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> Vec<Var> {
        self.params.iter().map(|p| if train { tape.param(&p.value) } else { tape.constant(p.value.clone()) }).collect()
    }

    /// Runs the network on `input` using already-bound parameter variables.
    pub fn forward_vars<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        params: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        if params.len() != self.params.len() {
            bail!(Shape, "expected {} parameter variables, got {}", self.params.len(), params.len());
        }
        let shape = tape.value(input).shape().to_vec();
        let d = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != d || shape[3] != d {
            bail!(Shape, "expected input [N,3,{},{}], got {:?}", d, d, shape);
        }
        let mut stats: Vec<RunningStats<T>> = self.stats.iter().map(|(_, s)| s.clone()).collect();
        let mut h = input;
        for layer in &self.layers {
            h = match &layer.kind {
                LayerKind::Stem(conv) => apply_conv(tape, h, conv, params)?,
                LayerKind::Dense(steps) => {
                    let mut y = h;
                    for step in steps {
                        y = self.apply_step(tape, y, step, params, &mut stats, mode, rng)?;
                    }
                    tape.concat_channels(&[h, y])?
                }
                LayerKind::Pool(window) => tape.avg_pool(h, *window)?,
                LayerKind::Head { norm, weight, bias } => {
                    let mut y = h;
                    if let Some(norm) = norm {
                        y = self.apply_step(tape, y, &Step::Norm(*norm), params, &mut stats, mode, rng)?;
                    }
                    y = tape.leaky_relu(y, self.config.leaky_slope)?;
                    let extent = tape.value(y).shape()[2];
                    y = tape.avg_pool(y, extent)?;
                    let n = tape.value(y).shape()[0];
                    y = tape.reshape(y, &[n, layer.in_channels])?;
                    tape.linear(y, params[*weight], params[*bias])?
                }
            };
        }
        Ok(ForwardPass { logits: h, stats })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_step<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        step: &Step,
        params: &[Var],
        stats: &mut [RunningStats<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match *step {
            Step::Norm(n) => tape.batch_norm(x, params[n.gamma], params[n.beta], &mut stats[n.stats], mode, BN_MOMENTUM, BN_EPSILON),
            Step::Act => tape.leaky_relu(x, self.config.leaky_slope),
            Step::Conv(ref conv) => apply_conv(tape, x, conv, params),
            Step::Shuffle(groups) => tape.channel_permute(x, groups),
            Step::Dropout(rate) => tape.dropout(x, rate, mode, rng),
        }
    }

    /// Replaces the running statistics with those produced by a train-mode pass.
    pub fn commit_stats(&mut self, stats: Vec<RunningStats<T>>) {
        assert_eq!(stats.len(), self.stats.len(), "running-stat count mismatch");
        for ((_, slot), s) in self.stats.iter_mut().zip(stats) {
            *slot = s;
        }
    }

    /// Eval-mode logits `[N, classes]` for a batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let pass = self.forward_vars(&mut tape, x, &params, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Forward pass that also updates running statistics in train mode.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let pass = self.forward_vars(&mut tape, x, &params, mode, rng)?;
        let logits = tape.value(pass.logits).clone();
        if mode == Mode::Train {
            self.commit_stats(pass.stats);
        }
        Ok(logits)
    }

    /// Copies the model into another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| Named { name: p.name.clone(), value: p.value.cast() }).collect(),
            stats: self.stats.iter().map(|(n, s)| (n.clone(), RunningStats { mean: s.mean.cast(), var: s.var.cast() })).collect(),
        }
    }
}

fn apply_conv<T: Element>(tape: &mut Tape<T>, x: Var, conv: &ConvRef, params: &[Var]) -> Result<Var> {
    let w = params[conv.weight];
    match conv.kind {
        ConvKind::Standard => tape.conv2d_standard(x, w, &conv.spec),
        ConvKind::Depthwise => tape.conv2d_depthwise(x, w, &conv.spec),
        ConvKind::Pointwise => tape.conv2d_pointwise(x, w, &conv.spec),
        ConvKind::Grouped => tape.conv2d_grouped(x, w, &conv.spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::nn::{conv2d_direct, leaky_relu_scalar, shuffle_order, softmax_rows};

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, 3, d, d], data).unwrap()
    }

    fn one_block(classes: usize) -> NetworkConfig {
        NetworkConfig { stages: vec![1], base_growth: 8, num_classes: classes, ..NetworkConfig::effcnet_cifar(classes) }
    }

    #[test]
    fn block_conv_params_and_channels() {
        let model = Model::<f32>::new(one_block(10), 0).unwrap();
        let block = &model.layers()[1];
        assert_eq!((block.in_channels, block.out_channels), (16, 24));
        let conv: usize = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("stage0.block0") && p.name.ends_with(".weight"))
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(conv, 144 + 512 + 256);
    }

    #[test]
    fn dense_channels_chain() {
        let model = Model::<f32>::new(NetworkConfig::effcnet_cifar(10), 0).unwrap();
        let layers = model.layers();
        for pair in layers.windows(2) {
            assert_eq!(pair[0].out_channels, pair[1].in_channels, "{} → {}", pair[0].name, pair[1].name);
        }
        for (i, l) in layers.iter().filter(|l| l.name.starts_with("stage1.block")).enumerate() {
            assert_eq!(l.in_channels, 16 + 60 + 12 * i);
        }
    }

    #[test]
    fn grouped_gconv1_params() {
        let cfg = NetworkConfig { stages: vec![1], ..NetworkConfig::condensenet_cifar(10) };
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let w = model.params().iter().find(|p| p.name == "stage0.block0.gconv1.weight").unwrap();
        assert_eq!(w.value.numel(), 16 * 4 * 8 / 4);
        let cfg = NetworkConfig { stages: vec![1], groups: 1, ..NetworkConfig::condensenet_cifar(10) };
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let w = model.params().iter().find(|p| p.name == "stage0.block0.gconv3.weight").unwrap();
        assert_eq!(w.value.shape(), &[3, 3, 32, 8]);
    }

    #[test]
    fn shape_chain_and_determinism() {
        let model = Model::<f64>::new(one_block(10), 3).unwrap();
        let x = random_input(1, 32, 1);
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.shape(), &[1, 10]);
        assert!(a.bit_eq(&b));
        let p = softmax_rows(&a.to_vec(), 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(model.predict(&random_input(1, 16, 1)).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut model = Model::<f64>::new(NetworkConfig::effcnet_mini(10), 5).unwrap();
        model.zero_head();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let x = tape.constant(random_input(2, 32, 2));
        let pass = model.forward_vars(&mut tape, x, &params, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &[3, 7]).unwrap();
        assert!((tape.value(loss).values()[0] - 10f64.ln()).abs() < 1e-12);
    }

    fn direct_norm_eval(x: &[f64], c: usize, plane: usize, g: &[f64], b: &[f64], s: &RunningStats<f64>) -> Vec<f64> {
        let (m, v) = (s.mean.to_vec(), s.var.to_vec());
        x.iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = (i / plane) % c;
                g[ch] * (x - m[ch]) / (v[ch] + BN_EPSILON).sqrt() + b[ch]
            })
            .collect()
    }

    #[test]
    fn block_matches_manual_composition() {
        let mut model = Model::<f64>::new(one_block(10), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, s) in model.running_stats_mut() {
            let c = s.mean.numel();
            s.mean = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
            s.var = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        }
        for p in model.params_mut() {
            if p.name.ends_with("gamma") || p.name.ends_with("beta") {
                let c = p.value.numel();
                p.value = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
            }
        }
        let param = |name: &str| model.params().iter().find(|p| p.name == name).unwrap().value.clone();
        let stats = |name: &str| model.running_stats().iter().find(|(n, _)| n == name).unwrap().1.clone();
        let x = random_input(2, 32, 9);
        let plane = 32 * 32;

        let stem = conv2d_direct(&x, &param("stem.weight"), &ConvSpec::standard(3, 3, 16)).unwrap();
        let p = "stage0.block0";
        let act = |v: Vec<f64>| v.into_iter().map(|v| leaky_relu_scalar(v, 0.01)).collect::<Vec<_>>();
        let h = direct_norm_eval(
            &stem.to_vec(),
            16,
            plane,
            &param(&format!("{p}.bn1.gamma")).to_vec(),
            &param(&format!("{p}.bn1.beta")).to_vec(),
            &stats(&format!("{p}.bn1")),
        );
        let h = Tensor::from_vec(&[2, 16, 32, 32], act(h)).unwrap();
        let dw_w = param(&format!("{p}.dw.weight")).reshape(&[3, 3, 1, 16]).unwrap();
        let h = conv2d_direct(&h, &dw_w, &ConvSpec::depthwise(3, 16)).unwrap();
        let h = direct_norm_eval(
            &h.to_vec(),
            16,
            plane,
            &param(&format!("{p}.bn2.gamma")).to_vec(),
            &param(&format!("{p}.bn2.beta")).to_vec(),
            &stats(&format!("{p}.bn2")),
        );
        let h = Tensor::from_vec(&[2, 16, 32, 32], act(h)).unwrap();
        let pw1 = param(&format!("{p}.pw1.weight")).reshape(&[1, 1, 16, 32]).unwrap();
        let h = conv2d_direct(&h, &pw1, &ConvSpec::pointwise(16, 32)).unwrap().to_vec();
        let order = shuffle_order(32, 4).unwrap();
        let mut shuffled = vec![0.0; h.len()];
        for n in 0..2 {
            for (dst, &src) in order.iter().enumerate() {
                shuffled[(n * 32 + dst) * plane..][..plane].copy_from_slice(&h[(n * 32 + src) * plane..][..plane]);
            }
        }
        let h = Tensor::from_vec(&[2, 32, 32, 32], shuffled).unwrap();
        let pw2 = param(&format!("{p}.pw2.weight")).reshape(&[1, 1, 32, 8]).unwrap();
        let new = conv2d_direct(&h, &pw2, &ConvSpec::pointwise(32, 8)).unwrap().to_vec();
        let s = stem.to_vec();
        let mut expected = Vec::new();
        for n in 0..2 {
            expected.extend_from_slice(&s[n * 16 * plane..(n + 1) * 16 * plane]);
            expected.extend_from_slice(&new[n * 8 * plane..(n + 1) * 8 * plane]);
        }

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let stem_v = apply_conv(
            &mut tape,
            xv,
            match &model.layers()[0].kind {
                LayerKind::Stem(c) => c,
                _ => unreachable!(),
            },
            &params,
        )
        .unwrap();
        let LayerKind::Dense(steps) = &model.layers()[1].kind else { unreachable!() };
        let mut stats_now: Vec<_> = model.running_stats().iter().map(|(_, s)| s.clone()).collect();
        let mut y = stem_v;
        for step in steps {
            y = model.apply_step(&mut tape, y, step, &params, &mut stats_now, Mode::Eval, &mut rng).unwrap();
        }
        let out = tape.concat_channels(&[stem_v, y]).unwrap();
        let got = tape.value(out).to_vec();
        let worst = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn train_forward_updates_stats() {
        let mut model = Model::<f32>::new(NetworkConfig { dropout_rate: 0.2, ..one_block(10) }, 1).unwrap();
        let before = model.running_stats()[0].1.mean.to_vec();
        let x = random_input(2, 32, 3).cast::<f32>();
        model.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(model.running_stats()[0].1.mean.to_vec(), before);
    }

    #[test]
    fn micro_network_gradient() {
        const EPS: f64 = 1e-4;
        let cfg = NetworkConfig { input_size: 8, init_channels: 4, base_growth: 4, ..one_block(3) };
        let model = Model::<f64>::new(cfg, 2).unwrap();
        let x = random_input(2, 8, 6);
        for target in 0..model.params().len() {
            let f = |tape: &mut Tape<f64>, v: Var| {
                let mut params = model.bind(tape, false);
                params[target] = v;
                let input = tape.constant(x.clone());
                let pass = model.forward_vars(tape, input, &params, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
                tape.softmax_cross_entropy(pass.logits, &[0, 2])
            };
            let err = grad_check(f, &model.params()[target].value, EPS).unwrap();
            assert!(err < 1e-4, "{}: {err}", model.params()[target].name);
        }
    }
}
