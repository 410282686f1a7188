use rayon::prelude::*;

use super::config::{Conditioning, ModelConfig, StagePosition};
use super::embedding::timestep_embedding;
use super::params::{ModelParams, Route};
use crate::diffusion::ImageTensor;
use crate::nn::{
    concat_channels, dense_backward, dense_forward, silu, silu_backward, upsample2x,
    upsample2x_backward, Conv2d, ConvCache, GroupNorm, NormCache, Scalar,
};
use crate::{Error, Result};

const MAX_GROUPS: usize = 8;
/// Samples per parallel work unit; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Truncated normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// One trainable tensor of the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub route: Route,
    pub(crate) init: Init,
}

impl SlotSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    geom: Conv2d,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct NormLayer {
    norm: GroupNorm,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    weight: usize,
    bias: usize,
}

/// conv -> group norm -> + projected time embedding -> SiLU
#[derive(Debug, Clone)]
struct Block {
    conv: ConvLayer,
    norm: NormLayer,
    time: DenseLayer,
    channels: usize,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Option<ConvLayer>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvLayer,
    blocks: Vec<Block>,
}

/// Architecture of the noise predictor: layer geometry plus the ordered list
/// of parameter slots. Holds no weights.
#[derive(Debug, Clone)]
pub struct Unet {
    config: ModelConfig,
    slots: Vec<SlotSpec>,
    time1: DenseLayer,
    time2: DenseLayer,
    class_embedding: Option<usize>,
    encoder: Vec<EncoderStage>,
    /// Indexed by stage; the deepest stage has no decoder.
    decoder: Vec<DecoderStage>,
    output: ConvLayer,
}

struct Builder<'a> {
    config: &'a ModelConfig,
    slots: Vec<SlotSpec>,
}

impl Builder<'_> {
    fn route(&self, position: Option<StagePosition>) -> Route {
        match position {
            Some(p) if self.config.exclusive_stages.contains(&p) => Route::Exclusive,
            _ => Route::Shared,
        }
    }

    fn slot(&mut self, name: String, shape: Vec<usize>, init: Init, route: Route) -> usize {
        self.slots.push(SlotSpec {
            name,
            shape,
            route,
            init,
        });
        self.slots.len() - 1
    }

    fn conv(&mut self, prefix: &str, geom: Conv2d, route: Route, zero: bool) -> ConvLayer {
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        let shape = vec![geom.out_channels, geom.in_channels, geom.kernel, geom.kernel];
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        ConvLayer {
            geom,
            weight: self.slot(format!("{prefix}.weight"), shape, init, route),
            bias: self.slot(format!("{prefix}.bias"), vec![geom.out_channels], Init::Zeros, route),
        }
    }

    fn dense(&mut self, prefix: &str, din: usize, dout: usize, route: Route) -> DenseLayer {
        DenseLayer {
            weight: self.slot(format!("{prefix}.weight"), vec![dout, din], Init::FanIn(din), route),
            bias: self.slot(format!("{prefix}.bias"), vec![dout], Init::Zeros, route),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, route: Route) -> Block {
        let conv = self.conv(&format!("{prefix}.conv"), Conv2d::new(cin, cout, 3, 1), route, false);
        let norm = NormLayer {
            norm: GroupNorm::new(cout, MAX_GROUPS),
            gamma: self.slot(format!("{prefix}.norm.gamma"), vec![cout], Init::Ones, route),
            beta: self.slot(format!("{prefix}.norm.beta"), vec![cout], Init::Zeros, route),
        };
        let time = self.dense(&format!("{prefix}.time"), self.config.time_embed_dim, cout, route);
        Block {
            conv,
            norm,
            time,
            channels: cout,
        }
    }
}

struct BlockCache<S> {
    conv: ConvCache<S>,
    norm: NormCache<S>,
    pre: Vec<S>,
}

struct EncoderCache<S> {
    down: Option<ConvCache<S>>,
    blocks: Vec<BlockCache<S>>,
}

struct DecoderCache<S> {
    up: ConvCache<S>,
    blocks: Vec<BlockCache<S>>,
}

struct ForwardCache<S> {
    sinusoid: Vec<S>,
    time_pre: Vec<S>,
    time_hidden: Vec<S>,
    temb: Vec<S>,
    encoder: Vec<EncoderCache<S>>,
    decoder: Vec<Option<DecoderCache<S>>>,
    output: ConvCache<S>,
}

/// One training example for [`Unet::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct BatchItem<S> {
    pub x_t: Vec<S>,
    pub t: usize,
    pub eps: Vec<S>,
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

impl Unet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            config,
            slots: Vec::new(),
        };
        let d = config.time_embed_dim;
        let time1 = b.dense("time.dense1", d, d, Route::Shared);
        let time2 = b.dense("time.dense2", d, d, Route::Shared);
        let class_embedding = (config.conditioning == Conditioning::ClassConditional).then(|| {
            b.slot(
                "class_embedding".into(),
                vec![config.n_tasks, d],
                Init::Normal(1.0),
                Route::Shared,
            )
        });

        let stages = config.n_stages;
        let mut encoder = Vec::with_capacity(stages);
        for s in 0..stages {
            let route = b.route((s == 0).then_some(StagePosition::First));
            let cout = config.stage_channels(s);
            let (down, cin) = if s == 0 {
                (None, config.image_channels)
            } else {
                let cprev = config.stage_channels(s - 1);
                let down = b.conv(&format!("enc{s}.down"), Conv2d::new(cprev, cprev, 3, 2), route, false);
                (Some(down), cprev)
            };
            let blocks = vec![
                b.block(&format!("enc{s}.block0"), cin, cout, route),
                b.block(&format!("enc{s}.block1"), cout, cout, route),
            ];
            encoder.push(EncoderStage { down, blocks });
        }

        let mut decoder = Vec::with_capacity(stages - 1);
        for s in 0..stages - 1 {
            let route = b.route((s == 0).then_some(StagePosition::Last));
            let c = config.stage_channels(s);
            let up = b.conv(
                &format!("dec{s}.up"),
                Conv2d::new(config.stage_channels(s + 1), c, 3, 1),
                route,
                false,
            );
            let blocks = vec![
                b.block(&format!("dec{s}.block0"), 2 * c, c, route),
                b.block(&format!("dec{s}.block1"), c, c, route),
            ];
            decoder.push(DecoderStage { up, blocks });
        }
        let out_route = b.route(Some(StagePosition::Last));
        let output = b.conv(
            "dec0.out",
            Conv2d::new(config.base_channels, config.image_channels, 3, 1),
            out_route,
            true,
        );

        Ok(Self {
            config: config.clone(),
            slots: b.slots,
            time1,
            time2,
            class_embedding,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    fn block_forward<S: Scalar>(
        &self,
        block: &Block,
        w: &[&[S]],
        x: &[S],
        size: usize,
        temb: &[S],
    ) -> (Vec<S>, BlockCache<S>) {
        let (c, conv) =
            block
                .conv
                .geom
                .forward(x, size, size, w[block.conv.weight], w[block.conv.bias]);
        let (mut pre, norm) = block
            .norm
            .norm
            .forward(&c, w[block.norm.gamma], w[block.norm.beta]);
        let proj = dense_forward(temb, w[block.time.weight], w[block.time.bias]);
        let plane = size * size;
        for (chan, p) in pre.chunks_mut(plane).zip(&proj) {
            chan.iter_mut().for_each(|v| *v += *p);
        }
        let y = silu(&pre);
        (y, BlockCache { conv, norm, pre })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<S: Scalar>(
        &self,
        block: &Block,
        w: &[&[S]],
        grads: &mut [Vec<S>],
        dy: &[S],
        cache: &BlockCache<S>,
        temb: &[S],
        dtemb: &mut [S],
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let dpre = silu_backward(dy, &cache.pre);
        let plane = dpre.len() / block.channels;
        let dproj: Vec<S> = dpre.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        let (gw, gb) = two_mut(grads, block.time.weight, block.time.bias);
        let dt = dense_backward(&dproj, temb, w[block.time.weight], gw, gb);
        for (a, b) in dtemb.iter_mut().zip(&dt) {
            *a += *b;
        }
        let (gg, gbeta) = two_mut(grads, block.norm.gamma, block.norm.beta);
        let dc = block
            .norm
            .norm
            .backward(&dpre, &cache.norm, w[block.norm.gamma], gg, gbeta);
        let (gw, gb) = two_mut(grads, block.conv.weight, block.conv.bias);
        block
            .conv
            .geom
            .backward(&dc, &cache.conv, w[block.conv.weight], gw, gb, need_input_grad)
    }

    fn forward<S: Scalar>(
        &self,
        w: &[&[S]],
        x: &[S],
        t: usize,
        class: Option<usize>,
    ) -> (Vec<S>, ForwardCache<S>) {
        let d = self.config.time_embed_dim;
        let sinusoid: Vec<S> = timestep_embedding(t as f64, d)
            .expect("validated embedding dim")
            .into_iter()
            .map(S::from_f64)
            .collect();
        let time_pre = dense_forward(&sinusoid, w[self.time1.weight], w[self.time1.bias]);
        let time_hidden = silu(&time_pre);
        let mut temb = dense_forward(&time_hidden, w[self.time2.weight], w[self.time2.bias]);
        if let (Some(slot), Some(c)) = (self.class_embedding, class) {
            for (a, b) in temb.iter_mut().zip(&w[slot][c * d..(c + 1) * d]) {
                *a += *b;
            }
        }

        let mut size = self.config.image_size;
        let mut h = x.to_vec();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let down = stage.down.as_ref().map(|down| {
                let (y, cache) =
                    down.geom
                        .forward(&h, size, size, w[down.weight], w[down.bias]);
                h = y;
                size /= 2;
                cache
            });
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = self.block_forward(block, w, &h, size, &temb);
                h = y;
                blocks.push(cache);
            }
            skips.push(h.clone());
            enc_caches.push(EncoderCache { down, blocks });
        }

        let mut dec_caches: Vec<Option<DecoderCache<S>>> =
            (0..self.decoder.len()).map(|_| None).collect();
        for (s, stage) in self.decoder.iter().enumerate().rev() {
            let cin = self.config.stage_channels(s + 1);
            let up = upsample2x(&h, cin, size, size);
            size *= 2;
            let (u, up_cache) = stage.up.geom.forward(&up, size, size, w[stage.up.weight], w[stage.up.bias]);
            h = concat_channels(&u, &skips[s]);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = self.block_forward(block, w, &h, size, &temb);
                h = y;
                blocks.push(cache);
            }
            dec_caches[s] = Some(DecoderCache {
                up: up_cache,
                blocks,
            });
        }
        let (out, output) =
            self.output
                .geom
                .forward(&h, size, size, w[self.output.weight], w[self.output.bias]);
        (
            out,
            ForwardCache {
                sinusoid,
                time_pre,
                time_hidden,
                temb,
                encoder: enc_caches,
                decoder: dec_caches,
                output,
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        w: &[&[S]],
        cache: &ForwardCache<S>,
        dout: &[S],
        class: Option<usize>,
        grads: &mut [Vec<S>],
    ) {
        let d = self.config.time_embed_dim;
        let mut dtemb = vec![S::zero(); d];
        let temb = &cache.temb;

        let (gw, gb) = two_mut(grads, self.output.weight, self.output.bias);
        let mut dh = self
            .output
            .geom
            .backward(dout, &cache.output, w[self.output.weight], gw, gb, true)
            .expect("input grad requested");

        let mut dskips: Vec<Option<Vec<S>>> = (0..self.encoder.len()).map(|_| None).collect();
        let mut size = self.config.image_size;
        for (s, stage) in self.decoder.iter().enumerate() {
            let dc = cache.decoder[s].as_ref().expect("decoder cache");
            for (block, bc) in stage.blocks.iter().zip(&dc.blocks).rev() {
                dh = self
                    .block_backward(block, w, grads, &dh, bc, temb, &mut dtemb, true)
                    .expect("input grad requested");
            }
            let c = self.config.stage_channels(s);
            let plane = size * size;
            let dskip = dh.split_off(c * plane);
            dskips[s] = Some(dskip);
            let (gw, gb) = two_mut(grads, stage.up.weight, stage.up.bias);
            let dup = stage
                .up
                .geom
                .backward(&dh, &dc.up, w[stage.up.weight], gw, gb, true)
                .expect("input grad requested");
            size /= 2;
            dh = upsample2x_backward(&dup, self.config.stage_channels(s + 1), size, size);
        }

        for (s, stage) in self.encoder.iter().enumerate().rev() {
            if let Some(ds) = dskips[s].take() {
                for (a, b) in dh.iter_mut().zip(&ds) {
                    *a += *b;
                }
            }
            let ec = &cache.encoder[s];
            let n_blocks = stage.blocks.len();
            for (i, (block, bc)) in stage.blocks.iter().zip(&ec.blocks).enumerate().rev() {
                let need = s > 0 || i > 0;
                match self.block_backward(block, w, grads, &dh, bc, temb, &mut dtemb, need) {
                    Some(g) => dh = g,
                    None => debug_assert!(s == 0 && i == 0 && n_blocks > 0),
                }
            }
            if let (Some(down), Some(dcache)) = (&stage.down, &ec.down) {
                let (gw, gb) = two_mut(grads, down.weight, down.bias);
                dh = down
                    .geom
                    .backward(&dh, dcache, w[down.weight], gw, gb, true)
                    .expect("input grad requested");
            }
        }

        if let (Some(slot), Some(c)) = (self.class_embedding, class) {
            for (a, b) in grads[slot][c * d..(c + 1) * d].iter_mut().zip(&dtemb) {
                *a += *b;
            }
        }
        let (gw, gb) = two_mut(grads, self.time2.weight, self.time2.bias);
        let dhidden = dense_backward(&dtemb, &cache.time_hidden, w[self.time2.weight], gw, gb);
        let dpre = silu_backward(&dhidden, &cache.time_pre);
        let (gw, gb) = two_mut(grads, self.time1.weight, self.time1.bias);
        dense_backward(&dpre, &cache.sinusoid, w[self.time1.weight], gw, gb);
    }

    /// Predicted noise for one flattened CHW sample.
    pub fn predict<S: Scalar>(
        &self,
        weights: &[&[S]],
        x_t: &[S],
        t: usize,
        class: Option<usize>,
    ) -> Vec<S> {
        self.forward(weights, x_t, t, class).0
    }

    /// Mean-squared noise-prediction loss over every element of the batch and
    /// its gradient with respect to each slot.
    pub fn loss_and_grad<S: Scalar>(
        &self,
        weights: &[&[S]],
        items: &[BatchItem<S>],
        class: Option<usize>,
    ) -> (f64, Vec<Vec<S>>) {
        let per_item = self.config.image_shape().len();
        let denom = (items.len() * per_item) as f64;
        let scale = S::from_f64(2.0 / denom);
        let partials: Vec<(f64, Vec<Vec<S>>)> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = self.zero_grads::<S>();
                let mut sq = 0.0;
                for item in chunk {
                    let (pred, cache) = self.forward(weights, &item.x_t, item.t, class);
                    let dout: Vec<S> = pred
                        .iter()
                        .zip(&item.eps)
                        .map(|(p, e)| {
                            let r = *p - *e;
                            sq += r.to_f64() * r.to_f64();
                            r * scale
                        })
                        .collect();
                    self.backward(weights, &cache, &dout, class, &mut grads);
                }
                (sq, grads)
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.zero_grads::<S>();
        for (sq, g) in partials {
            total += sq;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        (total / denom, grads)
    }

    /// Same loss as [`Unet::loss_and_grad`] without the backward pass.
    pub fn loss<S: Scalar>(&self, weights: &[&[S]], items: &[BatchItem<S>], class: Option<usize>) -> f64 {
        let per_item = self.config.image_shape().len();
        let sq: f64 = items
            .iter()
            .map(|item| {
                let pred = self.predict(weights, &item.x_t, item.t, class);
                pred.iter()
                    .zip(&item.eps)
                    .map(|(p, e)| (*p - *e).to_f64().powi(2))
                    .sum::<f64>()
            })
            .sum();
        sq / (items.len() * per_item) as f64
    }

    pub fn zero_grads<S: Scalar>(&self) -> Vec<Vec<S>> {
        self.slots.iter().map(|s| vec![S::zero(); s.len()]).collect()
    }

    /// Zero-based class row for the conditioning mode, validating the task id.
    pub fn class_index(&self, task: Option<usize>) -> Result<Option<usize>> {
        match self.config.conditioning {
            Conditioning::Unconditional => Ok(None),
            Conditioning::ClassConditional | Conditioning::SharedRepresentation => {
                let task = task.ok_or_else(|| {
                    Error::Task(format!(
                        "{} model needs a task id",
                        self.config.conditioning.method_name()
                    ))
                })?;
                if task == 0 || task > self.config.n_tasks {
                    return Err(Error::Task(format!(
                        "task {task} outside [1, {}]",
                        self.config.n_tasks
                    )));
                }
                Ok((self.config.conditioning == Conditioning::ClassConditional).then(|| task - 1))
            }
        }
    }
}

/// A UNet bound to the weights of one task, ready for repeated `f32`
/// evaluation.
pub struct Denoiser<'a> {
    unet: &'a Unet,
    weights: Vec<&'a [f32]>,
    class: Option<usize>,
}

impl<'a> Denoiser<'a> {
    pub fn new(unet: &'a Unet, params: &'a ModelParams, task: Option<usize>) -> Result<Self> {
        let class = unet.class_index(task)?;
        let weights = params.weights(unet, task)?;
        Ok(Self {
            unet,
            weights,
            class,
        })
    }

    pub fn predict(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let shape = self.unet.config.image_shape();
        x_t.ensure_shape(shape)?;
        let out = self.unet.predict(&self.weights, x_t.data(), t, self.class);
        Ok(ImageTensor::from_raw(shape, out))
    }
}
