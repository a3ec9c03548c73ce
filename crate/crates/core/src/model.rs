//! Four parallel streams, one per attribute: conv blocks per frame, a
//! two-layer LSTM over the 20 frames, then dropout, dense and sigmoid.
//!
//! Frames of a batch are stacked as `[batch * seq, channels, size, size]`
//! with frame `t` of clip `b` at row `b * seq + t`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{augment_clip, kfold, resize, AugmentationSpec};
use crate::error::{invalid, Error, Result};
use crate::metrics::{box_summary, class_error, model_accuracy, quantile, BoxSummary, Frame, Origin, ScorePair};
use crate::nn::gradcheck::{check_params, CheckReport};
use crate::nn::lstm::{lstm_step, LstmVars};
use crate::nn::ops::{conv_out_dim, fold_running_stats, BN_EPSILON};
use crate::nn::optim::{Adam, AdamConfig, StepDecay};
use crate::nn::rng::Rng;
use crate::nn::{checkpoint, Gradients, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::phantom::{CineClip, CLIP_LEN, FRAME_SIZE};
use crate::rubric::{Attribute, AttributeScores, Rubric, View};

/// One value per attribute, serialized as a map keyed by attribute.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerAttribute(pub [f64; 4]);

impl PerAttribute {
    pub fn get(&self, a: Attribute) -> f64 {
        self.0[a.index()]
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / 4.0
    }
}

impl Serialize for PerAttribute {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, f64> = Attribute::ALL.iter().map(|a| (a.key(), self.get(*a))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PerAttribute {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = [0.0; 4];
        for a in Attribute::ALL {
            out[a.index()] = *map
                .get(a.key())
                .ok_or_else(|| serde::de::Error::custom(format!("missing {a}")))?;
        }
        Ok(PerAttribute(out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_norm: bool,
    /// 2x2 max pool, stride 2.
    pub pool: bool,
}

impl ConvSpec {
    /// Conv, batch norm, ReLU, pool.
    pub fn block(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pad,
            batch_norm: true,
            pool: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub attribute: Attribute,
    pub convs: Vec<ConvSpec>,
}

/// Conv depth of each stream: three for clarity, four for the rest.
pub fn stream_depth(a: Attribute) -> usize {
    match a {
        Attribute::LvClarity => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square frame side fed to the network.
    pub input_size: usize,
    /// Gray frames are replicated to this many channels.
    pub channels: usize,
    pub seq_len: usize,
    /// In [`Attribute::ALL`] order.
    pub streams: Vec<StreamConfig>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale widths: a strided first layer and narrow channels keep a
    /// training epoch over 200 clips within a minute on one CPU core.
    fn default() -> Self {
        let convs = vec![
            ConvSpec::block(8, 5, 4, 2),
            ConvSpec::block(16, 3, 1, 1),
            ConvSpec::block(16, 3, 1, 1),
            ConvSpec::block(16, 3, 1, 1),
        ];
        Self::with_stacks(FRAME_SIZE, 3, CLIP_LEN, convs, 32)
    }
}

impl ModelConfig {
    /// Channels (16, 32, 64, 128), 3x3 kernels, LSTM width 128.
    pub fn paper_scale() -> Self {
        let convs = [16, 32, 64, 128]
            .into_iter()
            .map(|c| ConvSpec::block(c, 3, 1, 1))
            .collect();
        Self::with_stacks(FRAME_SIZE, 3, CLIP_LEN, convs, 128)
    }

    /// 8x8 single-channel frames, two per clip; for gradient checks.
    pub fn tiny() -> Self {
        let convs = vec![
            ConvSpec::block(2, 3, 1, 1),
            ConvSpec {
                pool: false,
                ..ConvSpec::block(2, 3, 1, 1)
            },
            ConvSpec {
                pool: false,
                ..ConvSpec::block(2, 3, 1, 1)
            },
            ConvSpec {
                pool: false,
                ..ConvSpec::block(2, 3, 1, 1)
            },
        ];
        Self::with_stacks(8, 1, 2, convs, 3)
    }

    /// Streams share one conv stack; the clarity stream drops the last layer.
    pub fn with_stacks(
        input_size: usize,
        channels: usize,
        seq_len: usize,
        convs: Vec<ConvSpec>,
        lstm_hidden: usize,
    ) -> Self {
        let streams = Attribute::ALL
            .iter()
            .map(|&attribute| StreamConfig {
                attribute,
                convs: convs[..stream_depth(attribute).min(convs.len())].to_vec(),
            })
            .collect();
        Self {
            input_size,
            channels,
            seq_len,
            streams,
            lstm_hidden,
            lstm_layers: 2,
            dropout: 0.32,
        }
    }

    /// Flattened feature width of each stream.
    pub fn validate(&self) -> Result<[usize; 4]> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.channels == 0 || self.seq_len == 0 {
            return bad("input size, channels and sequence length must be positive".into());
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return bad("LSTM needs at least one layer of positive width".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.streams.len() != 4 {
            return bad(format!("expected 4 streams, got {}", self.streams.len()));
        }
        let mut flat = [0; 4];
        for (s, &a) in self.streams.iter().zip(&Attribute::ALL) {
            if s.attribute != a {
                return bad(format!("stream {} is {}, expected {a}", a.index(), s.attribute));
            }
            if s.convs.len() != stream_depth(a) {
                return bad(format!(
                    "{a} stream has {} conv layers, expected {}",
                    s.convs.len(),
                    stream_depth(a)
                ));
            }
            let (mut size, mut ch) = (self.input_size, self.channels);
            for (i, c) in s.convs.iter().enumerate() {
                if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return bad(format!("{a} conv {i}: channels, kernel and stride must be positive"));
                }
                size = conv_out_dim(size, c.kernel, c.stride, c.pad)
                    .map_err(|_| Error::Config(format!("{a} conv {i}: spatial size falls below 1")))?;
                if c.pool {
                    size /= 2;
                }
                if size == 0 {
                    return bad(format!("{a} conv {i}: spatial size falls below 1"));
                }
                ch = c.out_channels;
            }
            flat[a.index()] = ch * size * size;
        }
        Ok(flat)
    }
}

/// Running batch-norm statistics for one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Until the first training step the statistics are the identity
    /// (mean 0, variance 1).
    pub initialized: bool,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
    index: usize,
}

#[derive(Clone, Debug)]
struct ConvIds {
    spec: ConvSpec,
    kernel: ParamId,
    bias: ParamId,
    norm: Option<NormIds>,
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct StreamIds {
    convs: Vec<ConvIds>,
    flat: usize,
    lstm: Vec<LstmIds>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    norms: Vec<RunningNorm<T>>,
    streams: Vec<StreamIds>,
}

/// Batch statistics from one training-mode pass, to fold into the running
/// estimates.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub index: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub enum Pass<'a> {
    /// Batch statistics and dropout drawn from the given generator.
    Train(&'a mut Rng),
    Infer,
}

fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.range(-bound, bound)))
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::new(config, seed)
}

impl<T: Real> Model<T> {
    /// He-uniform conv kernels, uniform `1/sqrt(H)` LSTM weights with forget
    /// bias 1, Glorot-uniform head.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let flat = config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let mut streams = Vec::new();
        let h = config.lstm_hidden;
        for s in &config.streams {
            let key = s.attribute.key();
            let mut in_ch = config.channels;
            let mut convs = Vec::new();
            for (i, c) in s.convs.iter().enumerate() {
                let fan_in = in_ch * c.kernel * c.kernel;
                let bound = (6.0 / fan_in as f64).sqrt();
                let kernel = params.add(
                    format!("{key}.conv{i}.kernel"),
                    uniform(&mut rng, &[c.out_channels, in_ch, c.kernel, c.kernel], bound),
                );
                let bias = params.add(format!("{key}.conv{i}.bias"), Tensor::zeros([c.out_channels]));
                let norm = c.batch_norm.then(|| {
                    let gamma = params.add(
                        format!("{key}.conv{i}.bn.gamma"),
                        Tensor::full([c.out_channels], T::one()),
                    );
                    let beta = params.add(format!("{key}.conv{i}.bn.beta"), Tensor::zeros([c.out_channels]));
                    norms.push(RunningNorm {
                        name: format!("{key}.conv{i}.bn"),
                        mean: Tensor::zeros([c.out_channels]),
                        var: Tensor::full([c.out_channels], T::one()),
                        initialized: false,
                    });
                    NormIds {
                        gamma,
                        beta,
                        index: norms.len() - 1,
                    }
                });
                convs.push(ConvIds {
                    spec: *c,
                    kernel,
                    bias,
                    norm,
                });
                in_ch = c.out_channels;
            }
            let mut lstm = Vec::new();
            let bound = 1.0 / (h as f64).sqrt();
            for l in 0..config.lstm_layers {
                let input = if l == 0 { flat[s.attribute.index()] } else { h };
                let w_input = params.add(format!("{key}.lstm{l}.w_input"), uniform(&mut rng, &[4 * h, input], bound));
                let w_hidden = params.add(format!("{key}.lstm{l}.w_hidden"), uniform(&mut rng, &[4 * h, h], bound));
                let bias = params.add(
                    format!("{key}.lstm{l}.bias"),
                    Tensor::from_fn([4 * h], |i| if (h..2 * h).contains(&i) { T::one() } else { T::zero() }),
                );
                lstm.push(LstmIds {
                    w_input,
                    w_hidden,
                    bias,
                });
            }
            let head_w = params.add(
                format!("{key}.head.weight"),
                uniform(&mut rng, &[1, h], (6.0 / (h as f64 + 1.0)).sqrt()),
            );
            let head_b = params.add(format!("{key}.head.bias"), Tensor::zeros([1]));
            streams.push(StreamIds {
                convs,
                flat: flat[s.attribute.index()],
                lstm,
                head_w,
                head_b,
            });
        }
        Ok(Self {
            config: config.clone(),
            params,
            norms,
            streams,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn norms(&self) -> &[RunningNorm<T>] {
        &self.norms
    }

    /// Parameter ids owned by one stream.
    pub fn stream_params(&self, a: Attribute) -> Vec<ParamId> {
        let prefix = format!("{}.", a.key());
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            norms: self
                .norms
                .iter()
                .map(|n| RunningNorm {
                    name: n.name.clone(),
                    mean: n.mean.cast(),
                    var: n.var.cast(),
                    initialized: n.initialized,
                })
                .collect(),
            streams: self.streams.clone(),
        }
    }

    /// Frames of `clips` as one input tensor. Frames that are not
    /// `input_size` square are resampled; gray is replicated per channel.
    pub fn input_tensor(&self, clips: &[&CineClip]) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = c.input_size;
        let mut data = Vec::with_capacity(clips.len() * c.seq_len * c.channels * s * s);
        for clip in clips {
            if clip.frames.len() != c.seq_len {
                return Err(Error::Clip {
                    clip: clip.id.clone(),
                    message: format!("has {} frames, model expects {}", clip.frames.len(), c.seq_len),
                });
            }
            for f in &clip.frames {
                let resized;
                let frame = if (f.width(), f.height()) == (s, s) {
                    f
                } else {
                    resized = resize(f, s, s).map_err(|e| Error::Clip {
                        clip: clip.id.clone(),
                        message: e.to_string(),
                    })?;
                    &resized
                };
                for _ in 0..c.channels {
                    data.extend(frame.pixels().iter().map(|&v| T::from_f64_lossy(v as f64)));
                }
            }
        }
        Ok(Tensor::new([clips.len() * c.seq_len, c.channels, s, s], data)?)
    }

    /// Records the four stream outputs (`[batch, 1]` each) on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        batch: usize,
        pass: &mut Pass,
    ) -> Result<([Var; 4], Vec<NormUpdate<T>>)> {
        let seq = self.config.seq_len;
        let h = self.config.lstm_hidden;
        let mut updates = Vec::new();
        let mut outputs = Vec::with_capacity(4);
        for s in &self.streams {
            let mut x = input;
            for c in &s.convs {
                let k = tape.param(&self.params, c.kernel);
                let b = tape.param(&self.params, c.bias);
                x = tape.conv2d(x, k, b, c.spec.stride, c.spec.pad)?;
                if let Some(n) = c.norm {
                    let g = tape.param(&self.params, n.gamma);
                    let be = tape.param(&self.params, n.beta);
                    x = match pass {
                        Pass::Train(_) => {
                            let shape = tape.value(x).shape().to_vec();
                            let count = shape[0] * shape[2..].iter().product::<usize>();
                            let (v, cache) = tape.batchnorm_train(x, g, be, BN_EPSILON)?;
                            updates.push(NormUpdate {
                                index: n.index,
                                mean: cache.batch_mean.clone(),
                                var: cache.batch_var.clone(),
                                count,
                            });
                            v
                        }
                        Pass::Infer => {
                            let rn = &self.norms[n.index];
                            tape.batchnorm_infer(x, g, be, &rn.mean, &rn.var, BN_EPSILON)?
                        }
                    };
                }
                x = tape.relu(x);
                if c.spec.pool {
                    x = tape.maxpool2d(x)?;
                }
            }
            let x = tape.reshape(x, &[batch * seq, s.flat])?;
            let mut steps = (0..seq)
                .map(|t| {
                    let rows: Vec<usize> = (0..batch).map(|b| b * seq + t).collect();
                    tape.gather_rows(x, &rows)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            for l in &s.lstm {
                let w = LstmVars {
                    w_input: tape.param(&self.params, l.w_input),
                    w_hidden: tape.param(&self.params, l.w_hidden),
                    bias: tape.param(&self.params, l.bias),
                    hidden: h,
                };
                let mut hs = tape.input(Tensor::zeros([batch, h]));
                let mut cs = tape.input(Tensor::zeros([batch, h]));
                let mut out = Vec::with_capacity(seq);
                for &xt in &steps {
                    (hs, cs) = lstm_step(tape, xt, hs, cs, w)?;
                    out.push(hs);
                }
                steps = out;
            }
            let mut last = *steps.last().expect("seq_len >= 1");
            if let Pass::Train(rng) = pass {
                let rate = self.config.dropout;
                if rate > 0.0 {
                    let keep: Vec<bool> = (0..batch * h).map(|_| !rng.bernoulli(rate)).collect();
                    last = tape.dropout(last, &keep, rate)?;
                }
            }
            let w = tape.param(&self.params, s.head_w);
            let b = tape.param(&self.params, s.head_b);
            let logit = tape.dense(last, w, b)?;
            outputs.push(tape.sigmoid(logit));
        }
        Ok((outputs.try_into().expect("four streams"), updates))
    }

    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>]) {
        for u in updates {
            let n = &mut self.norms[u.index];
            fold_running_stats(&mut n.mean, &mut n.var, !n.initialized, &u.mean, &u.var, u.count);
            n.initialized = true;
        }
    }

    fn record_loss(
        &self,
        tape: &mut Tape<T>,
        clips: &[&CineClip],
        weights: [f64; 4],
        pass: &mut Pass,
    ) -> Result<(Var, [f64; 4], Vec<NormUpdate<T>>)> {
        let input = tape.input(self.input_tensor(clips)?);
        let (outs, updates) = self.forward(tape, input, clips.len(), pass)?;
        let mut total = None;
        let mut per = [0.0; 4];
        for a in Attribute::ALL {
            let target = Tensor::from_fn([clips.len(), 1], |b| {
                T::from_f64_lossy(clips[b].labels.get(a).normalized)
            });
            let l = tape.l1_loss(outs[a.index()], &target)?;
            per[a.index()] = tape.value(l).data()[0].as_f64();
            let l = tape.scale(l, T::from_f64_lossy(weights[a.index()]));
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok((total.expect("four streams"), per, updates))
    }

    /// Weighted sum of per-stream L1 losses against normalized labels.
    pub fn loss(&self, clips: &[&CineClip], weights: [f64; 4], pass: &mut Pass) -> Result<f64> {
        let mut tape = Tape::new();
        let (total, _, _) = self.record_loss(&mut tape, clips, weights, pass)?;
        Ok(tape.value(total).data()[0].as_f64())
    }

    /// The loss, the unweighted stream losses and the parameter gradients.
    pub fn loss_and_grads(
        &self,
        clips: &[&CineClip],
        weights: [f64; 4],
        pass: &mut Pass,
    ) -> Result<(f64, [f64; 4], Gradients<T>, Vec<NormUpdate<T>>)> {
        let mut tape = Tape::new();
        let (total, per, updates) = self.record_loss(&mut tape, clips, weights, pass)?;
        let value = tape.value(total).data()[0].as_f64();
        let grads = tape.backward(total)?;
        Ok((value, per, grads, updates))
    }

    /// Normalized scores in inference mode, processed `batch` clips at a time.
    pub fn predict_batched(&self, clips: &[&CineClip], batch: usize) -> Result<Vec<[f64; 4]>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let input = tape.input(self.input_tensor(chunk)?);
            let (outs, _) = self.forward(&mut tape, input, chunk.len(), &mut Pass::Infer)?;
            for b in 0..chunk.len() {
                out.push(Attribute::ALL.map(|a| tape.value(outs[a.index()]).data()[b].as_f64()));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, clips: &[&CineClip]) -> Result<Vec<[f64; 4]>> {
        self.predict_batched(clips, 8)
    }
}

/// Clips of random frames and labels shaped for `config`.
pub fn random_clips(config: &ModelConfig, count: usize, rng: &mut Rng) -> Result<Vec<CineClip>> {
    let rubric = Rubric::default();
    let s = config.input_size;
    (0..count)
        .map(|i| {
            let frames = (0..config.seq_len)
                .map(|_| {
                    let px = (0..s * s).map(|_| rng.uniform() as f32).collect();
                    Frame::new(s, s, px, Origin::Phantom)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = rubric.scores_from_normalized([0; 4].map(|_| rng.uniform()))?;
            Ok(CineClip {
                id: format!("r{i:03}"),
                view: View::A4C,
                frames,
                labels,
                apex_track: None,
                params: None,
                provenance: "random".into(),
            })
        })
        .collect()
}

/// Finite-difference check of the full four-stream loss at 64-bit, in
/// training mode (batch statistics, a fixed dropout mask) with random loss
/// weights, over `trials` random models and batches.
pub fn check_model_gradients(config: &ModelConfig, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed);
    let mut report = CheckReport::default();
    for _ in 0..trials {
        let model = Model::<f64>::new(config, rng.next_u64())?;
        let batch = 1 + rng.below(2);
        let clips = random_clips(config, batch, &mut rng)?;
        let refs: Vec<&CineClip> = clips.iter().collect();
        let weights = [0; 4].map(|_| rng.range(0.5, 1.5));
        let mask_seed = rng.next_u64();
        let (_, _, grads, _) = model.loss_and_grads(&refs, weights, &mut Pass::Train(&mut Rng::new(mask_seed)))?;
        let mut probe = model.clone();
        report.merge(check_params(model.params(), &grads, |store| {
            probe.params = store.clone();
            probe
                .loss(&refs, weights, &mut Pass::Train(&mut Rng::new(mask_seed)))
                .unwrap_or(f64::NAN)
        }));
    }
    Ok(report)
}

const META_KIND: &str = "echoqa-four-stream";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: ModelConfig,
    norms_initialized: Vec<bool>,
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(CheckpointMeta {
            kind: META_KIND.into(),
            config: self.config.clone(),
            norms_initialized: self.norms.iter().map(|n| n.initialized).collect(),
        })
        .expect("meta serializes");
        let names: Vec<(String, String)> = self
            .norms
            .iter()
            .map(|n| (format!("{}.running_mean", n.name), format!("{}.running_var", n.name)))
            .collect();
        let mut tensors: Vec<(&str, &Tensor<f32>)> =
            self.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        for (n, (m, v)) in self.norms.iter().zip(&names) {
            tensors.push((m, &n.mean));
            tensors.push((v, &n.var));
        }
        Ok(checkpoint::encode(&meta, &tensors)?)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| invalid(format!("checkpoint metadata: {e}")))?;
        if meta.kind != META_KIND {
            return Err(invalid(format!("checkpoint holds {:?}, not a model", meta.kind)));
        }
        let mut model = Model::new(&meta.config, 0)?;
        if meta.norms_initialized.len() != model.norms.len() {
            return Err(invalid("checkpoint norm count does not match its config"));
        }
        let take = |name: &str, into: &mut Tensor<f32>| -> Result<()> {
            let t = ck
                .get(name)
                .ok_or_else(|| invalid(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != into.shape() {
                return Err(invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    into.shape()
                )));
            }
            *into = t.clone();
            Ok(())
        };
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            take(&name, model.params.get_mut(id))?;
        }
        for (n, init) in model.norms.iter_mut().zip(meta.norms_initialized) {
            take(&format!("{}.running_mean", n.name), &mut n.mean)?;
            take(&format!("{}.running_var", n.name), &mut n.var)?;
            n.initialized = init;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()?)
            .map_err(crate::error::io(format!("writing {}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(crate::error::io(format!("reading {}", path.display())))?;
        Self::from_checkpoint(&bytes)
    }
}

/// Scores one clip in inference mode.
pub fn forward_score<T: Real>(model: &Model<T>, clip: &CineClip, rubric: &Rubric) -> Result<AttributeScores> {
    let p = model.predict(&[clip])?;
    rubric.scores_from_normalized(p[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// ADAM first-moment decay.
    pub momentum: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate drops.
    pub decay_interval: usize,
    /// 8 or 12.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    pub loss_weights: [f64; 4],
    #[serde(default)]
    pub augmentation: Option<AugmentationSpec>,
    /// Stop at the first best epoch whose validation MAE is below this for
    /// every attribute.
    #[serde(default)]
    pub target_mae: Option<f64>,
}

impl Default for TrainConfig {
    /// Desk scale: base rate 2e-3. A 200-clip set gives about 15 steps per
    /// epoch, far fewer than the paper's frame-level batches, and at 2e-4 the
    /// two decays freeze training well short of convergence.
    fn default() -> Self {
        Self {
            base_lr: 2e-3,
            momentum: 0.95,
            decay_factor: 0.1,
            decay_interval: 15,
            batch_size: 8,
            max_epochs: 50,
            patience: 8,
            folds: 5,
            seed: 0,
            loss_weights: [1.0; 4],
            augmentation: None,
            target_mae: None,
        }
    }
}

impl TrainConfig {
    /// The published hyperparameters, base rate 2e-4.
    pub fn paper() -> Self {
        Self {
            base_lr: 2e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0) || self.decay_interval == 0 {
            return bad("learning rate, decay factor and decay interval must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size != 8 && self.batch_size != 12 {
            return bad("batch size must be 8 or 12");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max epochs and patience must be positive");
        }
        if self.folds < 2 {
            return bad("cross-validation needs at least 2 folds");
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if self.target_mae.is_some_and(|t| !(t > 0.0)) {
            return bad("target MAE must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base_lr: self.base_lr,
            factor: self.decay_factor,
            interval: self.decay_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-mode loss per stream over the epoch's batches.
    pub train_mae: PerAttribute,
    pub val_mae: PerAttribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation score.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.waited = 0;
            Verdict::Improved
        } else {
            self.waited += 1;
            if self.waited >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Wait
            }
        }
    }
}

pub fn mae_per_attribute(labels: &[[f64; 4]], preds: &[[f64; 4]]) -> PerAttribute {
    let mut out = [0.0; 4];
    for (l, p) in labels.iter().zip(preds) {
        for i in 0..4 {
            out[i] += (p[i] - l[i]).abs();
        }
    }
    PerAttribute(out.map(|v| v / labels.len().max(1) as f64))
}

fn labels_of(clips: &[&CineClip]) -> Vec<[f64; 4]> {
    clips.iter().map(|c| c.labels.normalized()).collect()
}

pub fn train(
    model: &mut Model<f32>,
    train_set: &[&CineClip],
    val_set: &[&CineClip],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| Ok(()))
}

/// Training with a callback after every epoch (e.g. appending to a log).
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &[&CineClip],
    val_set: &[&CineClip],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    let schedule = cfg.schedule();
    let adam_cfg = AdamConfig {
        beta1: cfg.momentum,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&model.params, adam_cfg, schedule);
    let mut rng = Rng::new(cfg.seed);
    let val_labels = labels_of(val_set);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(ParamStore<f32>, Vec<RunningNorm<f32>>)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.at(epoch);
        rng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<CineClip>;
            let batch: Vec<&CineClip> = match &cfg.augmentation {
                Some(spec) => {
                    augmented = chunk
                        .iter()
                        .map(|&i| {
                            let c = train_set[i];
                            CineClip {
                                frames: augment_clip(&c.frames, spec, &mut rng),
                                ..c.clone()
                            }
                        })
                        .collect();
                    augmented.iter().collect()
                }
                None => chunk.iter().map(|&i| train_set[i]).collect(),
            };
            let (_, per, grads, updates) =
                model.loss_and_grads(&batch, cfg.loss_weights, &mut Pass::Train(&mut rng))?;
            if let Some(a) = Attribute::ALL.iter().find(|a| !per[a.index()].is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    stream: a.key().into(),
                });
            }
            if !grads.all_finite() {
                let stream = grads
                    .iter()
                    .find(|(_, g)| !g.is_finite())
                    .map(|(id, _)| model.params.name(id).split('.').next().unwrap_or("?").to_string())
                    .unwrap_or_default();
                return Err(Error::Diverged { epoch, stream });
            }
            adam.step(&mut model.params, &grads, lr);
            model.apply_norm_updates(&updates);
            for i in 0..4 {
                sums[i] += per[i] * batch.len() as f64;
            }
        }
        let train_mae = PerAttribute(sums.map(|s| s / train_set.len() as f64));
        let val_mae = mae_per_attribute(&val_labels, &model.predict(val_set)?);
        if let Some(a) = Attribute::ALL.iter().find(|a| !val_mae.get(**a).is_finite()) {
            return Err(Error::Diverged {
                epoch,
                stream: a.key().into(),
            });
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_mae,
            val_mae,
        };
        on_epoch(&entry)?;
        log.push(entry);
        match stopper.observe(epoch, val_mae.mean()) {
            Verdict::Improved => {
                best = Some((model.params.clone(), model.norms.clone()));
                if cfg.target_mae.is_some_and(|t| val_mae.0.iter().all(|&m| m < t)) {
                    stopped_early = epoch + 1 < cfg.max_epochs;
                    break;
                }
            }
            Verdict::Wait => {}
            Verdict::Stop => {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }
    let (params, norms) = best.expect("the first epoch always improves");
    model.params = params;
    model.norms = norms;
    Ok(TrainOutcome {
        log,
        best_epoch: stopper.best_epoch,
        best_val_mae: stopper.best,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: Attribute,
    /// Report column heading.
    pub column: String,
    pub mae: f64,
    /// Percent, `(1 - mae) * 100`.
    pub accuracy: f64,
    /// Distribution of `predicted - ground truth`.
    pub errors: BoxSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub attributes: Vec<AttributeReport>,
    pub average_accuracy: f64,
}

impl EvalReport {
    pub fn from_predictions(labels: &[[f64; 4]], preds: &[[f64; 4]]) -> Result<Self> {
        if labels.is_empty() || labels.len() != preds.len() {
            return Err(invalid(format!(
                "need matching nonempty label/prediction lists, got {} and {}",
                labels.len(),
                preds.len()
            )));
        }
        let mut attributes = Vec::with_capacity(4);
        for a in Attribute::ALL {
            let i = a.index();
            let pairs = labels
                .iter()
                .zip(preds)
                .map(|(l, p)| ScorePair::new(l[i], p[i]))
                .collect::<Result<Vec<_>>>()?;
            let errors: Vec<f64> = pairs.iter().map(ScorePair::error).collect();
            attributes.push(AttributeReport {
                attribute: a,
                column: a.label().into(),
                mae: class_error(&pairs)?,
                accuracy: model_accuracy(&pairs)?,
                errors: box_summary(&errors)?,
            });
        }
        let average_accuracy = attributes.iter().map(|r| r.accuracy).sum::<f64>() / 4.0;
        Ok(Self {
            clips: labels.len(),
            attributes,
            average_accuracy,
        })
    }

    pub fn mae(&self) -> PerAttribute {
        PerAttribute(Attribute::ALL.map(|a| self.attributes[a.index()].mae))
    }

    /// Accuracy table with one column per attribute plus the average.
    pub fn table(&self) -> String {
        let mut head = String::from("| Metric |");
        let mut acc = String::from("| Accuracy (%) |");
        let mut mae = String::from("| MAE |");
        for r in &self.attributes {
            head += &format!(" {} |", r.column);
            acc += &format!(" {:.2} |", r.accuracy);
            mae += &format!(" {:.4} |", r.mae);
        }
        head += " Average |";
        acc += &format!(" {:.2} |", self.average_accuracy);
        mae += &format!(" {:.4} |", self.mae().mean());
        let rule = format!("|{}", "---|".repeat(self.attributes.len() + 2));
        format!("{head}\n{rule}\n{acc}\n{mae}\n")
    }
}

pub fn evaluate<T: Real>(model: &Model<T>, clips: &[&CineClip]) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(invalid("evaluation needs at least one clip"));
    }
    EvalReport::from_predictions(&labels_of(clips), &model.predict(clips)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub validation: Vec<String>,
    pub epochs: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean_mae: PerAttribute,
    /// Sample standard deviation across folds.
    pub std_mae: PerAttribute,
}

/// One model per fold, each validated (and early-stopped) on its held-out
/// fold.
pub fn cross_validate(clips: &[CineClip], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<CvReport> {
    cfg.validate()?;
    if clips.len() < 5 * cfg.folds {
        return Err(invalid(format!(
            "{} folds need at least {} clips, got {}",
            cfg.folds,
            5 * cfg.folds,
            clips.len()
        )));
    }
    let ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    let folds = kfold(&ids, cfg.folds, cfg.seed)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, val_ids) in folds.into_iter().enumerate() {
        let (val, train_set): (Vec<&CineClip>, Vec<&CineClip>) =
            clips.iter().partition(|c| val_ids.contains(&c.id));
        let mut model = build_model(model_cfg, cfg.seed.wrapping_add(f as u64))?;
        let outcome = train(&mut model, &train_set, &val, cfg)?;
        reports.push(FoldReport {
            fold: f,
            validation: val_ids,
            epochs: outcome.log.len(),
            report: evaluate(&model, &val)?,
        });
    }
    let k = reports.len() as f64;
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for i in 0..4 {
        let v: Vec<f64> = reports.iter().map(|r| r.report.attributes[i].mae).collect();
        mean[i] = v.iter().sum::<f64>() / k;
        std[i] = (v.iter().map(|x| (x - mean[i]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    }
    Ok(CvReport {
        folds: reports,
        mean_mae: PerAttribute(mean),
        std_mae: PerAttribute(std),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub batch: usize,
    pub frames_per_run: usize,
    pub median_ms_per_frame: f64,
    pub p95_ms_per_frame: f64,
    pub frames_per_sec: f64,
}

impl LatencyStats {
    pub fn line(&self) -> String {
        format!(
            "median {:.3} ms/frame, p95 {:.3} ms/frame, {:.1} frames/s (batch {}, {} runs)",
            self.median_ms_per_frame, self.p95_ms_per_frame, self.frames_per_sec, self.batch, self.repetitions
        )
    }
}

/// Wall-clock inference cost per frame. One warm-up run precedes the timed
/// repetitions; each run scores `batch` clips, cycling through `clips`.
pub fn benchmark_inference<T: Real>(
    model: &Model<T>,
    clips: &[&CineClip],
    repetitions: usize,
    batch: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 || batch == 0 || clips.is_empty() {
        return Err(invalid("benchmark needs at least one clip, repetition and batch item"));
    }
    let run: Vec<&CineClip> = (0..batch).map(|i| clips[i % clips.len()]).collect();
    let frames = batch * model.config.seq_len;
    model.predict_batched(&run, batch)?;
    let mut per_frame = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        model.predict_batched(&run, batch)?;
        per_frame.push(t.elapsed().as_secs_f64() * 1e3 / frames as f64);
    }
    per_frame.sort_by(f64::total_cmp);
    let median = quantile(&per_frame, 0.5);
    Ok(LatencyStats {
        repetitions,
        batch,
        frames_per_run: frames,
        median_ms_per_frame: median,
        p95_ms_per_frame: quantile(&per_frame, 0.95),
        frames_per_sec: 1e3 / median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_depths() {
        for cfg in [ModelConfig::default(), ModelConfig::paper_scale(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
            let depths: Vec<usize> = cfg.streams.iter().map(|s| s.convs.len()).collect();
            assert_eq!(depths, [4, 3, 4, 4]);
        }
        assert_eq!(ModelConfig::default().validate().unwrap(), [144, 784, 144, 144]);
    }

    #[test]
    fn collapsing_stack_is_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.streams[0].convs[1].pool = true;
        cfg.streams[0].convs[2].pool = true;
        cfg.streams[0].convs[3].pool = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn train_config_rules() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            batch_size: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            folds: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
