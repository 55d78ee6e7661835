//! The detector: convolutional backbone + transformer encoder, a human
//! decoder that also refines the weight guided embeddings, a gaze-following
//! decoder fed by guided agglomeration, and six prediction heads.

mod checkpoint;
mod config;
pub mod layers;
pub mod params;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{Ablation, Coupling, DecoderTopology, GazeQueryInit, ModelConfig, WgeMode};

use candle_core::{DType, Device, Tensor, D};

use crate::data::SceneImage;
use crate::geometry::{Box, Heatmap};
use crate::{Error, Result};
use layers::{sine_position_encoding, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp};
use params::{Init, ParamStore, Scope};

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
}

impl ConvBlock {
    fn new(s: &mut Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        Ok(Self {
            weight: s.param("weight", &[c_out, c_in, k, k], Init::Normal((2.0 / fan_in).sqrt()))?,
            bias: s.param("bias", &[c_out], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        Ok(x
            .conv2d(&self.weight, padding, stride, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Scene tokens `(batch, T, d_model)` plus their positional encoding `(T, d_model)`.
#[derive(Debug, Clone)]
pub struct EncodedScene {
    pub tokens: Tensor,
    pub pos: Tensor,
}

/// Raw head outputs, each shaped `(batch, N_q, ...)`.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// Corner boxes.
    pub head_box: Tensor,
    /// `[is-head, not-head]` probabilities.
    pub head_conf: Tensor,
    /// `[inside, outside]` probabilities.
    pub watch: Tensor,
    /// Flattened `H_o * W_o` heatmaps.
    pub heatmap: Tensor,
    pub gaze_box: Tensor,
    /// `N_o + 1` class probabilities, last one is no-object.
    pub gaze_class: Tensor,
}

/// One query's predictions copied to the host.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub head_box: Box,
    pub head_conf: [f64; 2],
    pub watch: [f64; 2],
    pub heatmap: Heatmap,
    pub gaze_box: Box,
    pub gaze_class: Vec<f64>,
}

/// All `N_q` candidate triplets of one image.
pub type PredictionSet = Vec<PredictionRow>;

impl Predictions {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.head_box.dim(0)?)
    }

    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.head_box.dim(1)?)
    }

    /// Copies every image's predictions to `f64` host rows.
    pub fn to_host(&self, heatmap_height: usize, heatmap_width: usize) -> Result<Vec<PredictionSet>> {
        let f = |t: &Tensor| -> Result<Vec<Vec<Vec<f64>>>> { Ok(t.to_dtype(DType::F64)?.to_vec3::<f64>()?) };
        let (hb, hc, wi, hm, gb, gc) = (
            f(&self.head_box)?,
            f(&self.head_conf)?,
            f(&self.watch)?,
            f(&self.heatmap)?,
            f(&self.gaze_box)?,
            f(&self.gaze_class)?,
        );
        Ok((0..hb.len())
            .map(|b| {
                (0..hb[b].len())
                    .map(|j| PredictionRow {
                        head_box: Box::new(hb[b][j][0], hb[b][j][1], hb[b][j][2], hb[b][j][3]),
                        head_conf: [hc[b][j][0], hc[b][j][1]],
                        watch: [wi[b][j][0], wi[b][j][1]],
                        heatmap: Heatmap::from_values(heatmap_height, heatmap_width, hm[b][j].clone()),
                        gaze_box: Box::new(gb[b][j][0], gb[b][j][1], gb[b][j][2], gb[b][j][3]),
                        gaze_class: gc[b][j].clone(),
                    })
                    .collect()
            })
            .collect())
    }
}

/// Per-layer decoder tensors, each `(batch, N_q, d_model)`.
#[derive(Debug, Clone, Default)]
pub struct QueryState {
    pub human_queries: Vec<Tensor>,
    pub wge: Vec<Tensor>,
    pub guided_context: Vec<Tensor>,
    pub gaze_pos: Vec<Tensor>,
    pub gaze_queries: Vec<Tensor>,
}

struct Heads {
    head_box: Mlp,
    head_conf: Linear,
    watch: Linear,
    heatmap: Mlp,
    gaze_class: Linear,
    gaze_box: Mlp,
}

pub struct GtrModel {
    config: ModelConfig,
    params: ParamStore,
    backbone: Vec<ConvBlock>,
    input_proj: ConvBlock,
    pos: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    human_query_pos: Tensor,
    wge_init: Tensor,
    human_layers: Vec<DecoderLayer>,
    wge_layers: Vec<DecoderLayer>,
    gaze_static_pos: Option<Tensor>,
    guide_weight: Tensor,
    gaze_layers: Vec<DecoderLayer>,
    human_norm: LayerNorm,
    gaze_norm: LayerNorm,
    heads: Heads,
}

/// `(x_tl, y_tl, s_w, s_h)` in (0,1) to corners with `x_br = x_tl + (1 - x_tl) s_w`,
/// which keeps every box ordered and inside the frame.
fn to_corner_boxes(raw: &Tensor) -> Result<Tensor> {
    let s = candle_nn::ops::sigmoid(raw)?;
    let tl = s.narrow(D::Minus1, 0, 2)?;
    let frac = s.narrow(D::Minus1, 2, 2)?;
    let br = (&tl + tl.affine(-1.0, 1.0)?.mul(&frac)?)?;
    Ok(Tensor::cat(&[&tl, &br], D::Minus1)?)
}

impl GtrModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut params = ParamStore::new(seed, dtype, device.clone());
        let mut root = Scope::new(&mut params, "");
        let d = config.d_model;
        let n_q = config.num_queries;

        let mut backbone = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in config.backbone_channels.iter().enumerate() {
            backbone.push(ConvBlock::new(&mut root.sub(format!("backbone.block{i}")), c_in, c_out, 3)?);
            c_in = c_out;
        }
        let input_proj = ConvBlock::new(&mut root.sub("input_proj"), c_in, d, 1)?;
        let pos = Tensor::from_vec(
            sine_position_encoding(config.token_rows(), config.token_cols(), d),
            (config.num_tokens(), d),
            &device,
        )?
        .to_dtype(dtype)?;

        let encoder = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer::new(&mut root.sub(format!("encoder.{i}")), d, config.n_heads, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut root.sub("encoder_norm"), d)?;

        let human_query_pos = root.param("human_query_pos", &[n_q, d], Init::Normal(1.0))?;
        let wge_init = root.param("wge_init", &[n_q, config.num_tokens()], Init::Normal(1.0))?;
        let layer = |s: &mut Scope, name: String| DecoderLayer::new(&mut s.sub(name), d, config.n_heads, config.ffn_dim);
        let human_layers = (0..config.n_decoder_layers)
            .map(|i| layer(&mut root, format!("human_decoder.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let wge_layers = if config.ablation.wge == WgeMode::Separate {
            (0..config.n_decoder_layers)
                .map(|i| layer(&mut root, format!("wge_decoder.{i}")))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let gaze_static_pos = if config.ablation.decoder == DecoderTopology::SeparateDual {
            Some(root.param("gaze_query_pos", &[n_q, d], Init::Normal(1.0))?)
        } else {
            None
        };
        let guide_weight = root.param(
            "guide.weight",
            &[d, 2 * d],
            Init::Uniform((6.0 / (3 * d) as f64).sqrt()),
        )?;
        let gaze_layers = if config.ablation.decoder == DecoderTopology::Single {
            Vec::new()
        } else {
            (0..config.n_decoder_layers)
                .map(|i| layer(&mut root, format!("gaze_decoder.{i}")))
                .collect::<Result<Vec<_>>>()?
        };
        let human_norm = LayerNorm::new(&mut root.sub("human_norm"), d)?;
        let gaze_norm = LayerNorm::new(&mut root.sub("gaze_norm"), d)?;
        let heads = Heads {
            head_box: Mlp::new(&mut root.sub("head_box"), d, d, 4, 3)?,
            head_conf: Linear::new(&mut root.sub("head_conf"), d, 2)?,
            watch: Linear::new(&mut root.sub("watch"), d, 2)?,
            heatmap: Mlp::new(&mut root.sub("heatmap"), d, d, config.heatmap_cells(), 5)?,
            gaze_class: Linear::new(&mut root.sub("gaze_class"), d, config.num_categories + 1)?,
            gaze_box: Mlp::new(&mut root.sub("gaze_box"), d, d, 4, 3)?,
        };

        Ok(Self {
            config,
            params,
            backbone,
            input_proj,
            pos,
            encoder,
            encoder_norm,
            human_query_pos,
            wge_init,
            human_layers,
            wge_layers,
            gaze_static_pos,
            guide_weight,
            gaze_layers,
            human_norm,
            gaze_norm,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Stacks images into a `(batch, 3, H, W)` tensor after checking their size.
    pub fn images_to_tensor(&self, images: &[&SceneImage]) -> Result<Tensor> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::Shape(format!(
                    "image is {}x{} but the model expects {}x{}; resize the input",
                    img.width, img.height, w, h
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), self.device())?.to_dtype(self.dtype())?)
    }

    /// Backbone, 1x1 projection, flatten and transformer encoder.
    pub fn encode_visual(&self, images: &Tensor) -> Result<EncodedScene> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.config.input_height || w != self.config.input_width {
            return Err(Error::Shape(format!(
                "input is {c}x{h}x{w}, model expects 3x{}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        let mut x = images.affine(4.0, -2.0)?;
        for block in &self.backbone {
            x = block.forward(&x, 2, 1)?.relu()?;
        }
        let x = self.input_proj.forward(&x, 1, 0)?;
        let (b, d, th, tw) = x.dims4()?;
        let mut tokens = x.reshape((b, d, th * tw))?.transpose(1, 2)?.contiguous()?;
        for layer in &self.encoder {
            tokens = layer.forward(&tokens, &self.pos)?;
        }
        Ok(EncodedScene {
            tokens: self.encoder_norm.forward(&tokens)?,
            pos: self.pos.clone(),
        })
    }

    fn decoder_layer_count(&self) -> usize {
        self.config.n_decoder_layers
    }

    /// One human-decoder layer on the query-axis concatenation `[Q ; P_w]`.
    /// In the non-joint w-GE modes the queries run alone and `p_w` passes
    /// through (or through its own layer for the separate mode).
    pub fn human_decoder_layer(&self, l: usize, queries: &Tensor, wge: &Tensor, scene: &EncodedScene) -> Result<(Tensor, Tensor)> {
        let layer = &self.human_layers[l];
        match self.config.ablation.wge {
            WgeMode::Joint => {
                let n_q = queries.dim(1)?;
                let x = Tensor::cat(&[queries, wge], 1)?;
                let y = layer.forward(&x, &scene.tokens, Some(&scene.pos))?;
                Ok((y.narrow(1, 0, n_q)?, y.narrow(1, n_q, n_q)?))
            }
            WgeMode::Separate => Ok((
                layer.forward(queries, &scene.tokens, Some(&scene.pos))?,
                self.wge_layers[l].forward(wge, &scene.tokens, Some(&scene.pos))?,
            )),
            WgeMode::None => Ok((layer.forward(queries, &scene.tokens, Some(&scene.pos))?, wge.clone())),
        }
    }

    /// `V_s = P_w V_e` (token selection) and `P_g = W_g [Q_h ; V_s]`.
    pub fn build_guided_embedding(&self, human_q: &Tensor, wge: &Tensor, scene: &EncodedScene) -> Result<(Tensor, Tensor)> {
        let t = scene.tokens.dim(1)?;
        if wge.dim(D::Minus1)? != t {
            return Err(Error::Config(format!(
                "weight guided embedding width {} does not match the token count {t}",
                wge.dim(D::Minus1)?
            )));
        }
        let context = wge.matmul(&scene.tokens)?;
        let (q_part, s_part) = match (self.config.ablation.wge, self.config.ablation.gaze_query_init) {
            (WgeMode::None, _) | (_, GazeQueryInit::HumanQuery) => (human_q.clone(), context.zeros_like()?),
            (_, GazeQueryInit::WeightGuided) => (human_q.zeros_like()?, context.clone()),
            (_, GazeQueryInit::Both) => (human_q.clone(), context.clone()),
        };
        let joined = Tensor::cat(&[&q_part, &s_part], D::Minus1)?;
        let gaze_pos = joined.broadcast_matmul(&self.guide_weight.t()?)?;
        Ok((context, gaze_pos))
    }

    /// `FFN(MCA(MSA(Q_g + P_g), V_e))` with residuals and pre-norm.
    pub fn gaze_decoder_layer(&self, l: usize, gaze_q: &Tensor, gaze_pos: &Tensor, scene: &EncodedScene) -> Result<Tensor> {
        let x = gaze_q.broadcast_add(gaze_pos)?;
        self.gaze_layers[l].forward(&x, &scene.tokens, Some(&scene.pos))
    }

    /// Applies the six heads to final-layer queries `(batch, N_q, d)`.
    pub fn predict_heads(&self, human_q: &Tensor, gaze_q: &Tensor) -> Result<Predictions> {
        let h = self.human_norm.forward(human_q)?;
        let g = match self.config.ablation.decoder {
            DecoderTopology::Single => h.clone(),
            _ => self.gaze_norm.forward(gaze_q)?,
        };
        let heads = &self.heads;
        Ok(Predictions {
            head_box: to_corner_boxes(&heads.head_box.forward(&h)?)?,
            head_conf: candle_nn::ops::softmax(&heads.head_conf.forward(&h)?, D::Minus1)?,
            watch: candle_nn::ops::softmax(&heads.watch.forward(&h)?, D::Minus1)?,
            heatmap: candle_nn::ops::sigmoid(&heads.heatmap.forward(&g)?)?,
            gaze_box: to_corner_boxes(&heads.gaze_box.forward(&g)?)?,
            gaze_class: candle_nn::ops::softmax(&heads.gaze_class.forward(&g)?, D::Minus1)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Predictions> {
        Ok(self.forward_traced(images)?.0)
    }

    /// Forward pass that also returns every per-layer decoder tensor.
    pub fn forward_traced(&self, images: &Tensor) -> Result<(Predictions, QueryState)> {
        let scene = self.encode_visual(images)?;
        let b = scene.tokens.dim(0)?;
        let (n_q, d) = (self.config.num_queries, self.config.d_model);
        let expand = |t: &Tensor| -> Result<Tensor> { Ok(t.unsqueeze(0)?.expand((b, n_q, t.dim(1)?))?.contiguous()?) };

        // Q_h starts at zero, so the first layer input is just P_h.
        let mut human_q = expand(&self.human_query_pos)?;
        let mut wge = expand(&self.wge_init)?;
        let mut state = QueryState::default();
        for l in 0..self.decoder_layer_count() {
            let (q, w) = self.human_decoder_layer(l, &human_q, &wge, &scene)?;
            human_q = q;
            wge = w;
            state.human_queries.push(human_q.clone());
            state.wge.push(wge.clone());
        }

        if self.config.ablation.decoder == DecoderTopology::Single {
            let preds = self.predict_heads(&human_q, &human_q)?;
            return Ok((preds, state));
        }

        let guided: Vec<(Tensor, Tensor)> = match self.config.ablation.decoder {
            DecoderTopology::SeparateDual => {
                let p = expand(self.gaze_static_pos.as_ref().expect("separate-dual position"))?;
                (0..self.decoder_layer_count())
                    .map(|_| Ok((Tensor::zeros((b, n_q, d), self.dtype(), self.device())?, p.clone())))
                    .collect::<Result<_>>()?
            }
            _ => (0..self.decoder_layer_count())
                .map(|l| self.build_guided_embedding(&state.human_queries[l], &state.wge[l], &scene))
                .collect::<Result<_>>()?,
        };
        let last = self.decoder_layer_count() - 1;
        let mut gaze_q = Tensor::zeros((b, n_q, d), self.dtype(), self.device())?;
        for l in 0..self.decoder_layer_count() {
            let (context, pos) = match (self.config.ablation.decoder, self.config.ablation.coupling) {
                (DecoderTopology::SeparateDual, _) | (_, Coupling::OneToOne) => guided[l].clone(),
                (_, Coupling::LastToAll) => guided[last].clone(),
                (_, Coupling::LastToLast) if l == last => guided[last].clone(),
                (_, Coupling::LastToLast) => {
                    let z = Tensor::zeros((b, n_q, d), self.dtype(), self.device())?;
                    (z.clone(), z)
                }
            };
            gaze_q = self.gaze_decoder_layer(l, &gaze_q, &pos, &scene)?;
            state.guided_context.push(context);
            state.gaze_pos.push(pos);
            state.gaze_queries.push(gaze_q.clone());
        }
        let preds = self.predict_heads(&human_q, &gaze_q)?;
        Ok((preds, state))
    }

    /// Runs the model on host images and copies the predictions back.
    pub fn predict(&self, images: &[&SceneImage]) -> Result<Vec<PredictionSet>> {
        let x = self.images_to_tensor(images)?;
        self.forward(&x)?
            .to_host(self.config.heatmap_height, self.config.heatmap_width)
    }
}
