//! Model configuration and the two encoder variants: a single-stream
//! multitask model for CO2 plumes and a dual-stream cross-attention model
//! for NO2 surface concentration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{DenseHead, SegDecoder};
use crate::nn::{
    FeedForward, LayerNorm, Linear, MultiHeadAttention, PatchEmbedder, PositionalEmbedding,
};
use crate::params::{ParamStore, ParamTensors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the auxiliary weather vector (wind speed, direction encoding,
/// boundary-layer proxy). Fixed by the input format, not configurable.
pub const WEATHER_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Co2,
    No2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Co2 => "co2",
            Variant::No2 => "no2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "co2" => Ok(Variant::Co2),
            "no2" => Ok(Variant::No2),
            other => Err(Error::config(format!(
                "unknown variant {other:?}, expected co2 or no2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub ffn_ratio: usize,
    pub tap_depths: Vec<usize>,
    pub decoder_dim: usize,
    pub s2_bands: usize,
    pub s5p_bands: usize,
    pub num_fuel_classes: usize,
    pub num_seg_classes: usize,
}

/// Tap placement at one third, two thirds, and full depth (deduplicated for
/// shallow stacks).
pub fn default_taps(depth: usize) -> Vec<usize> {
    let mut taps = vec![depth.div_ceil(3), (2 * depth).div_ceil(3), depth];
    taps.sort_unstable();
    taps.dedup();
    taps
}

impl ModelConfig {
    pub fn co2_default() -> Self {
        ModelConfig {
            variant: Variant::Co2,
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            num_heads: 4,
            depth: 6,
            ffn_ratio: 4,
            tap_depths: default_taps(6),
            decoder_dim: 64,
            s2_bands: 12,
            s5p_bands: 1,
            num_fuel_classes: 2,
            num_seg_classes: 2,
        }
    }

    pub fn no2_default() -> Self {
        ModelConfig {
            variant: Variant::No2,
            ..Self::co2_default()
        }
    }

    /// Small double-precision-friendly setup used by the gradient checker.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            variant,
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 2,
            depth: 2,
            ffn_ratio: 2,
            tap_depths: default_taps(2),
            decoder_dim: 16,
            s2_bands: 3,
            s5p_bands: 1,
            num_fuel_classes: 2,
            num_seg_classes: 2,
        }
    }

    pub fn default_for(variant: Variant) -> Self {
        match variant {
            Variant::Co2 => Self::co2_default(),
            Variant::No2 => Self::no2_default(),
        }
    }

    /// Tokens per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per image.
    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config("image_size and patch_size must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::config("embed_dim and num_heads must be positive"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio must be at least 1"));
        }
        if self.decoder_dim == 0 {
            return Err(Error::config("decoder_dim must be positive"));
        }
        if self.s2_bands == 0 || self.s5p_bands == 0 {
            return Err(Error::config("band counts must be positive"));
        }
        if self.num_fuel_classes < 2 || self.num_seg_classes < 2 {
            return Err(Error::config("class counts must be at least 2"));
        }
        if self.tap_depths.is_empty() {
            return Err(Error::config("tap_depths must not be empty"));
        }
        for w in self.tap_depths.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config("tap_depths must be strictly increasing"));
            }
        }
        let first = self.tap_depths[0];
        let last = *self.tap_depths.last().expect("non-empty");
        if first == 0 || last > self.depth {
            return Err(Error::config(format!(
                "tap_depths {:?} must lie within 1..={}",
                self.tap_depths, self.depth
            )));
        }
        if last != self.depth {
            return Err(Error::config(format!(
                "tap_depths {:?} must include the final depth {}",
                self.tap_depths, self.depth
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + ffn(ln2(x)).
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed_dim: usize,
        num_heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), embed_dim)?,
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), embed_dim, num_heads)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), embed_dim)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), embed_dim, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, pt: &ParamTensors<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.self_attention(pt, &self.ln1.forward(pt, x)?)?)?;
        x.add(&self.ffn.forward(pt, &self.ln2.forward(pt, &x)?)?)
    }
}

pub struct EncoderOutput<T: Scalar> {
    /// Spatial tokens after the last block, [n, d].
    pub final_tokens: Tensor<T>,
    /// Spatial-token snapshots keyed by block depth (1-based), each [n, d].
    pub taps: BTreeMap<usize, Tensor<T>>,
    /// Final state of the appended auxiliary token, [d], when one was given.
    pub weather_token_final: Option<Tensor<T>>,
}

/// Stack of encoder blocks with depth taps. The auxiliary token rides along
/// in the sequence but is stripped from every snapshot.
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        depth: usize,
        embed_dim: usize,
        num_heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(EncoderBlock::new(
                store,
                &format!("{prefix}.{i}"),
                embed_dim,
                num_heads,
                hidden,
            )?);
        }
        Ok(Encoder { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn encode<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        tokens: &Tensor<T>,
        extra: Option<&Tensor<T>>,
        tap_depths: &[usize],
    ) -> Result<EncoderOutput<T>> {
        if tokens.rank() != 2 {
            return Err(Error::contract(format!(
                "encoder expects [tokens, embed], got {:?}",
                tokens.shape()
            )));
        }
        let n = tokens.shape()[0];
        let d = tokens.shape()[1];
        let mut seq = match extra {
            Some(e) => {
                if e.shape() != [d] {
                    return Err(Error::contract(format!(
                        "auxiliary token must be [{d}], got {:?}",
                        e.shape()
                    )));
                }
                let row = e.reshape(&[1, d])?;
                Tensor::concat(&[tokens, &row], 0)?
            }
            None => tokens.clone(),
        };

        let spatial = |s: &Tensor<T>| -> Result<Tensor<T>> {
            if extra.is_some() {
                s.slice(0, 0, n)
            } else {
                Ok(s.clone())
            }
        };

        let mut taps = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            seq = block.forward(pt, &seq)?;
            let depth = i + 1;
            if tap_depths.contains(&depth) {
                taps.insert(depth, spatial(&seq)?);
            }
        }

        let final_tokens = match taps.get(&self.blocks.len()) {
            Some(t) => t.clone(),
            None => spatial(&seq)?,
        };
        let weather_token_final = match extra {
            Some(_) => Some(seq.slice(0, n, 1)?.reshape(&[d])?),
            None => None,
        };
        Ok(EncoderOutput {
            final_tokens,
            taps,
            weather_token_final,
        })
    }
}

pub struct Co2Output<T: Scalar> {
    /// Per-pixel class logits, [num_seg_classes, H, W].
    pub seg_logits: Tensor<T>,
    /// Fuel-type logits, [num_fuel_classes].
    pub fuel_logits: Tensor<T>,
    /// Standardized emission-rate estimate, rank 0.
    pub power: Tensor<T>,
}

/// Single-stream multitask model: Sentinel-2 patches plus a projected
/// weather token feed one encoder; segmentation reads depth taps, the fuel
/// and power heads read mean-pooled spatial tokens concatenated with the
/// final weather token.
pub struct Co2Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: PatchEmbedder,
    pos: PositionalEmbedding,
    weather_proj: Linear,
    encoder: Encoder,
    seg: SegDecoder,
    fuel: DenseHead,
    power: DenseHead,
}

impl<T: Scalar> Co2Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.variant != Variant::Co2 {
            return Err(Error::config("Co2Model requires variant co2"));
        }
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        let stem = PatchEmbedder::new(&mut store, "s2.patch", config.patch_size, config.s2_bands, d)?;
        let pos = PositionalEmbedding::new(&mut store, "s2.pos", config.token_count(), d)?;
        let weather_proj = Linear::new(&mut store, "weather.proj", WEATHER_DIM, d)?;
        let encoder = Encoder::new(
            &mut store,
            "enc",
            config.depth,
            d,
            config.num_heads,
            config.ffn_ratio * d,
        )?;
        let seg = SegDecoder::new(
            &mut store,
            "seg",
            &config.tap_depths,
            d,
            config.decoder_dim,
            config.num_seg_classes,
            config.grid(),
            config.patch_size,
        )?;
        let fuel = DenseHead::new(
            &mut store,
            "fuel",
            2 * d,
            config.decoder_dim,
            config.num_fuel_classes,
        )?;
        let power = DenseHead::new(&mut store, "power", 2 * d, config.decoder_dim, 1)?;
        Ok(Co2Model {
            config,
            store,
            stem,
            pos,
            weather_proj,
            encoder,
            seg,
            fuel,
            power,
        })
    }

    fn check_image(&self, image: &Tensor<T>, bands: usize, what: &str) -> Result<()> {
        let want = [bands, self.config.image_size, self.config.image_size];
        if image.shape() != want {
            return Err(Error::contract(format!(
                "{what} image must be {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Embed, encode with the weather token appended after positional
    /// encoding, and run all three heads.
    pub fn forward(
        &self,
        pt: &ParamTensors<T>,
        image: &Tensor<T>,
        weather: &Tensor<T>,
    ) -> Result<Co2Output<T>> {
        self.check_image(image, self.config.s2_bands, "s2")?;
        if weather.shape() != [WEATHER_DIM] {
            return Err(Error::contract(format!(
                "weather vector must be [{WEATHER_DIM}], got {:?}",
                weather.shape()
            )));
        }
        let tokens = self.pos.apply(pt, &self.stem.forward(pt, image)?)?;
        let wtok = self.weather_proj.forward(pt, weather)?;
        let enc = self
            .encoder
            .encode(pt, &tokens, Some(&wtok), &self.config.tap_depths)?;

        let seg_logits = self.seg.forward(pt, &enc.taps)?;

        let pooled_spatial = enc.final_tokens.mean_axis(0)?;
        let wfinal = enc.weather_token_final.as_ref().expect("extra token present");
        let pooled = Tensor::concat(&[&pooled_spatial, wfinal], 0)?;
        let fuel_logits = self.fuel.forward(pt, &pooled)?;
        let power = self.power.forward(pt, &pooled)?.reshape(&[])?;
        Ok(Co2Output {
            seg_logits,
            fuel_logits,
            power,
        })
    }
}

/// One dual-stream block: the S5P track updates itself (self-attention and
/// FFN), then the S2 track runs self-attention, queries the updated S5P
/// tokens through cross-attention, and finishes with its FFN. All sublayers
/// are pre-norm residual; queries in the cross step come from S2 only.
pub struct No2Block {
    s5p_ln1: LayerNorm,
    s5p_attn: MultiHeadAttention,
    s5p_ln2: LayerNorm,
    s5p_ffn: FeedForward,
    s2_ln1: LayerNorm,
    s2_attn: MultiHeadAttention,
    cross_lnq: LayerNorm,
    cross_lnkv: LayerNorm,
    cross_attn: MultiHeadAttention,
    s2_ln2: LayerNorm,
    s2_ffn: FeedForward,
}

impl No2Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed_dim: usize,
        num_heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(No2Block {
            s5p_ln1: LayerNorm::new(store, &format!("{prefix}.s5p.ln1"), embed_dim)?,
            s5p_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.s5p.attn"),
                embed_dim,
                num_heads,
            )?,
            s5p_ln2: LayerNorm::new(store, &format!("{prefix}.s5p.ln2"), embed_dim)?,
            s5p_ffn: FeedForward::new(store, &format!("{prefix}.s5p.ffn"), embed_dim, hidden)?,
            s2_ln1: LayerNorm::new(store, &format!("{prefix}.s2.ln1"), embed_dim)?,
            s2_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.s2.attn"),
                embed_dim,
                num_heads,
            )?,
            cross_lnq: LayerNorm::new(store, &format!("{prefix}.cross.lnq"), embed_dim)?,
            cross_lnkv: LayerNorm::new(store, &format!("{prefix}.cross.lnkv"), embed_dim)?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{prefix}.cross.attn"),
                embed_dim,
                num_heads,
            )?,
            s2_ln2: LayerNorm::new(store, &format!("{prefix}.s2.ln2"), embed_dim)?,
            s2_ffn: FeedForward::new(store, &format!("{prefix}.s2.ffn"), embed_dim, hidden)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        pt: &ParamTensors<T>,
        s2: &Tensor<T>,
        s5p: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = s5p.add(&self.s5p_attn.self_attention(pt, &self.s5p_ln1.forward(pt, s5p)?)?)?;
        let b = b.add(&self.s5p_ffn.forward(pt, &self.s5p_ln2.forward(pt, &b)?)?)?;

        let a = s2.add(&self.s2_attn.self_attention(pt, &self.s2_ln1.forward(pt, s2)?)?)?;
        let a = a.add(&self.cross_attn.cross_attention(
            pt,
            &self.cross_lnq.forward(pt, &a)?,
            &self.cross_lnkv.forward(pt, &b)?,
        )?)?;
        let a = a.add(&self.s2_ffn.forward(pt, &self.s2_ln2.forward(pt, &a)?)?)?;
        Ok((a, b))
    }
}

pub struct No2Output<T: Scalar> {
    /// Standardized surface-concentration estimate, rank 0.
    pub concentration: Tensor<T>,
}

/// Dual-stream model: Sentinel-2 and Sentinel-5P images are patch-embedded
/// separately, fused once per block through cross-attention, and the final
/// mean-pooled S2 tokens feed a single regression head.
pub struct No2Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    s2_stem: PatchEmbedder,
    s2_pos: PositionalEmbedding,
    s5p_stem: PatchEmbedder,
    s5p_pos: PositionalEmbedding,
    blocks: Vec<No2Block>,
    reg: DenseHead,
}

impl<T: Scalar> No2Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.variant != Variant::No2 {
            return Err(Error::config("No2Model requires variant no2"));
        }
        let d = config.embed_dim;
        let n = config.token_count();
        let mut store = ParamStore::new();
        let s2_stem =
            PatchEmbedder::new(&mut store, "s2.patch", config.patch_size, config.s2_bands, d)?;
        let s2_pos = PositionalEmbedding::new(&mut store, "s2.pos", n, d)?;
        let s5p_stem =
            PatchEmbedder::new(&mut store, "s5p.patch", config.patch_size, config.s5p_bands, d)?;
        let s5p_pos = PositionalEmbedding::new(&mut store, "s5p.pos", n, d)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(No2Block::new(
                &mut store,
                &format!("enc.{i}"),
                d,
                config.num_heads,
                config.ffn_ratio * d,
            )?);
        }
        let reg = DenseHead::new(&mut store, "reg", d, config.decoder_dim, 1)?;
        Ok(No2Model {
            config,
            store,
            s2_stem,
            s2_pos,
            s5p_stem,
            s5p_pos,
            blocks,
            reg,
        })
    }

    pub fn forward(
        &self,
        pt: &ParamTensors<T>,
        s2: &Tensor<T>,
        s5p: &Tensor<T>,
    ) -> Result<No2Output<T>> {
        let size = self.config.image_size;
        if s2.shape() != [self.config.s2_bands, size, size] {
            return Err(Error::contract(format!(
                "s2 image must be [{}, {size}, {size}], got {:?}",
                self.config.s2_bands,
                s2.shape()
            )));
        }
        if s5p.shape() != [self.config.s5p_bands, size, size] {
            return Err(Error::contract(format!(
                "s5p image must be [{}, {size}, {size}], got {:?}",
                self.config.s5p_bands,
                s5p.shape()
            )));
        }
        let mut a = self.s2_pos.apply(pt, &self.s2_stem.forward(pt, s2)?)?;
        let mut b = self.s5p_pos.apply(pt, &self.s5p_stem.forward(pt, s5p)?)?;
        for block in &self.blocks {
            let (na, nb) = block.forward(pt, &a, &b)?;
            a = na;
            b = nb;
        }
        let pooled = a.mean_axis(0)?;
        let concentration = self.reg.forward(pt, &pooled)?.reshape(&[])?;
        Ok(No2Output { concentration })
    }
}

/// Variant dispatch wrapper so training, checkpointing, and the CLI can
/// hold either model behind one type.
pub enum Model<T: Scalar> {
    Co2(Co2Model<T>),
    No2(No2Model<T>),
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        match config.variant {
            Variant::Co2 => Ok(Model::Co2(Co2Model::new(config)?)),
            Variant::No2 => Ok(Model::No2(No2Model::new(config)?)),
        }
    }

    pub fn init(&mut self, seed: u64) {
        self.store_mut().init(seed);
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Co2(m) => &m.config,
            Model::No2(m) => &m.config,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config().variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Model::Co2(m) => &m.store,
            Model::No2(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Co2(m) => &mut m.store,
            Model::No2(m) => &mut m.store,
        }
    }
}
