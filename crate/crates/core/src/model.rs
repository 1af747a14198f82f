//! The disentanglement network and its U-Net baseline.
//!
//! An image goes through four sub-networks:
//!
//! - `anatomy`: U-Net with four pooling/upsampling stages and skip
//!   connections, ending in an 8-channel sigmoid map that is binarized by
//!   straight-through rounding;
//! - `modality`: two stride-2 4×4 convolutions, global average pooling and
//!   an MLP to an 8-dimensional vector;
//! - `segmentor`: two 3×3 conv/BN/ReLU layers and a 1×1 conv with a
//!   channel softmax over (BG, LV, MYO, RV);
//! - `decoder`: three 3×3 conv/AdaIN/ReLU layers whose AdaIN statistics come
//!   from an MLP over the modality vector, then a 7×7 conv and `tanh`.
//!
//! The U-Net baseline reuses the anatomy topology with a 4-class softmax head.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Image2D, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::nn::{
    adain, global_avg_pool, image_batch, max_pool2, round_ste, sigmoid, softmax_channels,
    to_vec_f64, upsample2, BatchNorm2d, Conv2d, Init, Linear, ParamStore,
};

pub const ANATOMY_CHANNELS: usize = 8;
pub const MODALITY_DIM: usize = 8;
/// Spatial dims must be a multiple of this (four 2× poolings).
pub const UNET_DIVISOR: usize = 16;
pub const ADAIN_LAYERS: usize = 3;

pub const ANATOMY_PREFIX: &str = "anatomy.";
pub const MODALITY_PREFIX: &str = "modality.";
pub const SEGMENTOR_PREFIX: &str = "segmentor.";
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "SDNET")]
    SdNet,
    #[serde(rename = "UNET")]
    UNet,
}

/// Architecture hyper-parameters, stored in every checkpoint and checked on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    /// Channel widths of the four U-Net stages; the bottleneck reuses the last.
    pub unet_widths: [usize; 4],
    pub anatomy_channels: usize,
    pub modality_dim: usize,
    pub modality_widths: [usize; 2],
    pub modality_hidden: usize,
    pub segmentor_width: usize,
    pub decoder_width: usize,
    pub adain_hidden: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    pub fn sdnet() -> Self {
        Self {
            kind: ModelKind::SdNet,
            unet_widths: [8, 16, 32, 64],
            anatomy_channels: ANATOMY_CHANNELS,
            modality_dim: MODALITY_DIM,
            modality_widths: [16, 32],
            modality_hidden: 32,
            segmentor_width: 32,
            decoder_width: 8,
            adain_hidden: 32,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn unet() -> Self {
        Self {
            kind: ModelKind::UNet,
            ..Self::sdnet()
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::SdNet => Self::sdnet(),
            ModelKind::UNet => Self::unet(),
        }
    }

    /// A tiny configuration for gradient checks and fast tests.
    pub fn toy(kind: ModelKind) -> Self {
        Self {
            kind,
            unet_widths: [2, 2, 2, 2],
            anatomy_channels: ANATOMY_CHANNELS,
            modality_dim: MODALITY_DIM,
            modality_widths: [2, 3],
            modality_hidden: 4,
            segmentor_width: 3,
            decoder_width: 3,
            adain_hidden: 4,
            num_classes: NUM_CLASSES,
        }
    }
}

#[derive(Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

#[derive(Debug)]
struct UNet {
    down: Vec<ConvBnRelu>,
    bottleneck: ConvBnRelu,
    up: Vec<ConvBnRelu>,
    head: Conv2d,
}

impl UNet {
    fn new(store: &mut ParamStore, prefix: &str, widths: [usize; 4], out_ch: usize) -> Result<Self> {
        let mut down = Vec::new();
        let mut in_ch = 1;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ConvBnRelu::new(store, &format!("{prefix}down{i}"), in_ch, w)?);
            in_ch = w;
        }
        let bottleneck = ConvBnRelu::new(store, &format!("{prefix}bottleneck"), in_ch, widths[3])?;
        // Up stage i upsamples, concatenates down stage i and convolves to
        // widths[i - 1] (widths[0] for the last stage).
        let mut up = Vec::new();
        let mut below = widths[3];
        for i in (0..4usize).rev() {
            let out = widths[i.saturating_sub(1)];
            up.push(ConvBnRelu::new(store, &format!("{prefix}up{i}"), below + widths[i], out)?);
            below = out;
        }
        let head = Conv2d::new(store, &format!("{prefix}head"), below, out_ch, 1, 1, 0, true)?;
        Ok(Self {
            down,
            bottleneck,
            up,
            head,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.down {
            h = stage.forward(&h, train)?;
            skips.push(h.clone());
            h = max_pool2(&h)?;
        }
        h = self.bottleneck.forward(&h, train)?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            h = Tensor::cat(&[&upsample2(&h)?, &skip], 1)?;
            h = stage.forward(&h, train)?;
        }
        self.head.forward(&h)
    }
}

#[derive(Debug)]
struct ModalityEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl ModalityEncoder {
    fn new(store: &mut ParamStore, d: &ArchDescriptor) -> Result<Self> {
        let [w1, w2] = d.modality_widths;
        let p = MODALITY_PREFIX;
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{p}conv1"), 1, w1, 4, 2, 1, true)?,
            conv2: Conv2d::new(store, &format!("{p}conv2"), w1, w2, 4, 2, 1, true)?,
            fc1: Linear::new(store, &format!("{p}fc1"), w2, d.modality_hidden, Init::Kaiming(w2))?,
            fc2: Linear::new(
                store,
                &format!("{p}fc2"),
                d.modality_hidden,
                d.modality_dim,
                Init::Kaiming(d.modality_hidden),
            )?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        let pooled = global_avg_pool(&h)?;
        self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)
    }
}

#[derive(Debug)]
struct Segmentor {
    block1: ConvBnRelu,
    block2: ConvBnRelu,
    head: Conv2d,
}

impl Segmentor {
    fn new(store: &mut ParamStore, d: &ArchDescriptor) -> Result<Self> {
        let p = SEGMENTOR_PREFIX;
        let w = d.segmentor_width;
        Ok(Self {
            block1: ConvBnRelu::new(store, &format!("{p}block1"), d.anatomy_channels, w)?,
            block2: ConvBnRelu::new(store, &format!("{p}block2"), w, w)?,
            head: Conv2d::new(store, &format!("{p}head"), w, d.num_classes, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, anatomy: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.block1.forward(anatomy, train)?;
        let h = self.block2.forward(&h, train)?;
        softmax_channels(&self.head.forward(&h)?)
    }
}

#[derive(Debug)]
struct Decoder {
    convs: Vec<Conv2d>,
    film1: Linear,
    film2: Linear,
    out: Conv2d,
    width: usize,
}

impl Decoder {
    fn new(store: &mut ParamStore, d: &ArchDescriptor) -> Result<Self> {
        let p = DECODER_PREFIX;
        let w = d.decoder_width;
        let mut convs = Vec::new();
        let mut in_ch = d.anatomy_channels;
        for i in 0..ADAIN_LAYERS {
            convs.push(Conv2d::new(store, &format!("{p}conv{i}"), in_ch, w, 3, 1, 1, true)?);
            in_ch = w;
        }
        // Small head init keeps gamma ≈ 1 and beta ≈ 0 at the start.
        let film1 = Linear::new(
            store,
            &format!("{p}adain_mlp1"),
            d.modality_dim,
            d.adain_hidden,
            Init::Kaiming(d.modality_dim),
        )?;
        let film2 = Linear::new(
            store,
            &format!("{p}adain_mlp2"),
            d.adain_hidden,
            ADAIN_LAYERS * 2 * w,
            Init::Normal(0.01),
        )?;
        let out = Conv2d::new(store, &format!("{p}out"), w, 1, 7, 1, 3, true)?;
        Ok(Self {
            convs,
            film1,
            film2,
            out,
            width: w,
        })
    }

    fn forward(&self, anatomy: &Tensor, z: &Tensor) -> Result<Tensor> {
        let w = self.width;
        let stats = self.film2.forward(&self.film1.forward(z)?.relu()?)?;
        let mut h = anatomy.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let gamma = (stats.narrow(1, 2 * w * i, w)? + 1.0)?;
            let beta = stats.narrow(1, 2 * w * i + w, w)?;
            h = adain(&conv.forward(&h)?, &gamma, &beta)?.relu()?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

/// Binarized anatomy factor and its pre-threshold values, as tensors.
#[derive(Debug, Clone)]
pub struct AnatomyTensors {
    /// `(B, 8, H, W)`, sigmoid output in `[0, 1]`.
    pub soft: Tensor,
    /// `(B, 8, H, W)`, exactly 0 or 1 (straight-through gradient).
    pub binary: Tensor,
}

#[derive(Debug, Clone)]
pub struct FullOutput {
    pub anatomy: AnatomyTensors,
    /// `(B, 8)`
    pub modality: Tensor,
    /// `(B, 4, H, W)`
    pub probs: Tensor,
    /// `(B, 1, H, W)` in `(-1, 1)`
    pub reconstruction: Tensor,
}

#[derive(Debug)]
struct SdnetParts {
    modality: ModalityEncoder,
    segmentor: Segmentor,
    decoder: Decoder,
}

#[derive(Debug)]
pub struct Model {
    descriptor: ArchDescriptor,
    store: ParamStore,
    unet: UNet,
    parts: Option<SdnetParts>,
}

impl Model {
    pub fn new(descriptor: ArchDescriptor, seed: u64) -> Result<Self> {
        Self::with_dtype(descriptor, seed, DType::F32)
    }

    pub fn with_dtype(descriptor: ArchDescriptor, seed: u64, dtype: DType) -> Result<Self> {
        if descriptor.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}")));
        }
        let mut store = ParamStore::new(seed, dtype);
        let head = match descriptor.kind {
            ModelKind::SdNet => descriptor.anatomy_channels,
            ModelKind::UNet => descriptor.num_classes,
        };
        let unet = UNet::new(&mut store, ANATOMY_PREFIX, descriptor.unet_widths, head)?;
        let parts = match descriptor.kind {
            ModelKind::SdNet => Some(SdnetParts {
                modality: ModalityEncoder::new(&mut store, &descriptor)?,
                segmentor: Segmentor::new(&mut store, &descriptor)?,
                decoder: Decoder::new(&mut store, &descriptor)?,
            }),
            ModelKind::UNet => None,
        };
        Ok(Self {
            descriptor,
            store,
            unet,
            parts,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn kind(&self) -> ModelKind {
        self.descriptor.kind
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.all_vars()
    }

    pub fn segmentor_vars(&self) -> Vec<(String, Var)> {
        self.store
            .params()
            .iter()
            .filter(|(k, _)| k.starts_with(SEGMENTOR_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn sdnet(&self) -> Result<&SdnetParts> {
        self.parts
            .as_ref()
            .ok_or_else(|| Error::Config("operation needs an SDNet model, not the U-Net baseline".into()))
    }

    fn check_unet_dims(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h % UNET_DIVISOR != 0 || w % UNET_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "anatomy encoder needs (B, 1, H, W) with H, W divisible by {UNET_DIVISOR}; got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// `(B, 1, H, W)` → anatomy factor. SDNet only.
    pub fn anatomy_encode(&self, x: &Tensor, train: bool) -> Result<AnatomyTensors> {
        self.sdnet()?;
        Self::check_unet_dims(x)?;
        let soft = sigmoid(&self.unet.forward(x, train)?)?;
        let binary = round_ste(&soft)?;
        Ok(AnatomyTensors { soft, binary })
    }

    /// `(B, 1, H, W)` → `(B, 8)`.
    pub fn modality_encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h < 4 || w < 4 {
            return Err(Error::Shape(format!("modality encoder needs (B, 1, ≥4, ≥4), got {:?}", x.dims())));
        }
        self.sdnet()?.modality.forward(x)
    }

    /// Binary anatomy → class probabilities `(B, 4, H, W)`.
    pub fn segment(&self, anatomy: &Tensor, train: bool) -> Result<Tensor> {
        let parts = self.sdnet()?;
        let (_, c, _, _) = anatomy.dims4()?;
        if c != self.descriptor.anatomy_channels {
            return Err(Error::Shape(format!("segmentor expects {} channels", self.descriptor.anatomy_channels)));
        }
        parts.segmentor.forward(anatomy, train)
    }

    /// (anatomy, modality) → image `(B, 1, H, W)` in `(-1, 1)`.
    pub fn decode(&self, anatomy: &Tensor, z: &Tensor) -> Result<Tensor> {
        let parts = self.sdnet()?;
        let (b, c, _, _) = anatomy.dims4()?;
        if c != self.descriptor.anatomy_channels || z.dims() != [b, self.descriptor.modality_dim] {
            return Err(Error::Shape(format!(
                "decode: anatomy {:?}, modality {:?}",
                anatomy.dims(),
                z.dims()
            )));
        }
        parts.decoder.forward(anatomy, z)
    }

    pub fn forward_full(&self, x: &Tensor, train: bool) -> Result<FullOutput> {
        let anatomy = self.anatomy_encode(x, train)?;
        let modality = self.modality_encode(x)?;
        let probs = self.segment(&anatomy.binary, train)?;
        let reconstruction = self.decode(&anatomy.binary, &modality)?;
        Ok(FullOutput {
            anatomy,
            modality,
            probs,
            reconstruction,
        })
    }

    /// Class probabilities for either model kind.
    pub fn predict_probs(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self.descriptor.kind {
            ModelKind::SdNet => {
                let a = self.anatomy_encode(x, train)?;
                self.segment(&a.binary, train)
            }
            ModelKind::UNet => {
                Self::check_unet_dims(x)?;
                softmax_channels(&self.unet.forward(x, train)?)
            }
        }
    }

    pub fn image_tensor(&self, image: &Image2D) -> Result<Tensor> {
        image_batch(&[&image.pixels], self.dtype())
    }

    pub fn anatomy_factor(&self, image: &Image2D) -> Result<AnatomyFactor> {
        let a = self.anatomy_encode(&self.image_tensor(image)?, false)?;
        AnatomyFactor::from_tensors(&a.binary.get(0)?, &a.soft.get(0)?)
    }

    pub fn modality_factor(&self, image: &Image2D) -> Result<ModalityFactor> {
        ModalityFactor::from_tensor(&self.modality_encode(&self.image_tensor(image)?)?.get(0)?)
    }

    /// Decodes one factor pair in inference mode.
    pub fn decode_factors(&self, anatomy: &AnatomyFactor, modality: &ModalityFactor) -> Result<Array2<f32>> {
        let a = anatomy.binary_tensor(self.dtype())?.unsqueeze(0)?;
        let z = modality.tensor(self.dtype())?.unsqueeze(0)?;
        let img = self.decode(&a, &z)?;
        let (_, _, h, w) = img.dims4()?;
        let values: Vec<f32> = to_vec_f64(&img)?.into_iter().map(|v| v as f32).collect();
        Array2::from_shape_vec((h, w), values).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes).at(path)?;
        Ok(fingerprint(&bytes))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            descriptor: self.descriptor.clone(),
        };
        let meta: HashMap<String, String> = [(
            METADATA_KEY.to_string(),
            serde_json::to_string(&header).expect("header serializes"),
        )]
        .into();
        let snapshot = self.store.snapshot()?;
        safetensors::serialize(snapshot.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    /// Loads a checkpoint, rebuilding the architecture from its descriptor.
    /// Returns the model and the checkpoint fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).at(path)?;
        let model = Self::from_bytes(&bytes, None)?;
        Ok((model, fingerprint(&bytes)))
    }

    /// Like [`Model::load`] but rejects checkpoints whose descriptor differs.
    pub fn load_expecting(path: &Path, expected: &ArchDescriptor) -> Result<(Self, String)> {
        let bytes = fs::read(path).at(path)?;
        let model = Self::from_bytes(&bytes, Some(expected))?;
        Ok((model, fingerprint(&bytes)))
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ArchDescriptor>) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::CorruptCheckpoint("missing architecture descriptor".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointMismatch(format!("unknown format {}", header.format)));
        }
        if let Some(exp) = expected {
            if *exp != header.descriptor {
                return Err(Error::CheckpointMismatch(format!(
                    "descriptor {:?} does not match expected {:?}",
                    header.descriptor, exp
                )));
            }
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::CorruptCheckpoint("no tensors".into()))?;
        let model = Self::with_dtype(header.descriptor, 0, dtype)?;
        let values: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        model.store.restore(&values)?;
        Ok(model)
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.snapshot()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.restore(snapshot)
    }
}

const CHECKPOINT_FORMAT: &str = "sdaug-checkpoint-v1";
const METADATA_KEY: &str = "sdaug";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    descriptor: ArchDescriptor,
}

/// Hex SHA-256 of a checkpoint's bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `channels × H × W`, binary, plus the pre-threshold sigmoid values.
#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyFactor {
    pub channels: Array3<u8>,
    pub pre_threshold: Array3<f32>,
}

impl AnatomyFactor {
    /// Factor without the soft values; `pre_threshold` mirrors the bits.
    pub fn from_binary(channels: Array3<u8>) -> Self {
        let pre_threshold = channels.mapv(f32::from);
        Self { channels, pre_threshold }
    }

    pub(crate) fn from_tensors(binary: &Tensor, soft: &Tensor) -> Result<Self> {
        let (c, h, w) = binary.dims3()?;
        let bits: Vec<u8> = to_vec_f64(binary)?
            .into_iter()
            .map(|v| u8::from(v >= 0.5))
            .collect();
        let pre: Vec<f32> = to_vec_f64(soft)?.into_iter().map(|v| v as f32).collect();
        Ok(Self {
            channels: Array3::from_shape_vec((c, h, w), bits).map_err(|e| Error::Shape(e.to_string()))?,
            pre_threshold: Array3::from_shape_vec((c, h, w), pre).map_err(|e| Error::Shape(e.to_string()))?,
        })
    }

    pub fn binary_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.channels.dim();
        let data: Vec<f32> = self.channels.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFactor {
    pub z: Vec<f32>,
}

impl ModalityFactor {
    pub(crate) fn from_tensor(t: &Tensor) -> Result<Self> {
        let z: Vec<f32> = to_vec_f64(t)?.into_iter().map(|v| v as f32).collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("modality factor"));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.z.clone(), self.z.len(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(seed: u64, h: usize, w: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn anatomy_shapes_and_binary() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 1).unwrap();
        let a = m.anatomy_encode(&rand_input(0, 32, 48), false).unwrap();
        assert_eq!(a.binary.dims(), &[1, 8, 32, 48]);
        assert!(to_vec_f64(&a.binary).unwrap().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn anatomy_rejects_indivisible_dims() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 1).unwrap();
        let err = m.anatomy_encode(&rand_input(0, 225, 32), false).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn inference_is_deterministic() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 4).unwrap();
        let x = rand_input(2, 32, 32);
        let a = m.forward_full(&x, false).unwrap();
        let b = m.forward_full(&x, false).unwrap();
        assert_eq!(to_vec_f64(&a.reconstruction).unwrap(), to_vec_f64(&b.reconstruction).unwrap());
        assert_eq!(to_vec_f64(&a.probs).unwrap(), to_vec_f64(&b.probs).unwrap());
    }

    #[test]
    fn full_output_contracts() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 9).unwrap();
        let out = m.forward_full(&rand_input(5, 32, 32), false).unwrap();
        assert_eq!(out.modality.dims(), &[1, 8]);
        let probs = to_vec_f64(&out.probs).unwrap();
        let hw = 32 * 32;
        for p in 0..hw {
            let s: f64 = (0..4).map(|c| probs[c * hw + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(to_vec_f64(&out.reconstruction).unwrap().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn modality_dim_independent_of_size() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 3).unwrap();
        for (h, w) in [(4, 4), (17, 9), (64, 32)] {
            assert_eq!(m.modality_encode(&rand_input(1, h, w)).unwrap().dims(), &[1, 8]);
        }
    }

    #[test]
    fn unet_baseline_has_no_decoder() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::UNet), 3).unwrap();
        assert!(m.modality_encode(&rand_input(1, 16, 16)).is_err());
        assert_eq!(m.predict_probs(&rand_input(1, 16, 16), false).unwrap().dims(), &[1, 4, 16, 16]);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 11).unwrap();
        let x = rand_input(3, 32, 32);
        // Move BN running stats off their initial values.
        m.forward_full(&x, true).unwrap();
        let bytes = m.to_bytes().unwrap();
        let loaded = Model::from_bytes(&bytes, Some(m.descriptor())).unwrap();
        let a = m.forward_full(&x, false).unwrap();
        let b = loaded.forward_full(&x, false).unwrap();
        assert_eq!(to_vec_f64(&a.reconstruction).unwrap(), to_vec_f64(&b.reconstruction).unwrap());
        assert_eq!(to_vec_f64(&a.probs).unwrap(), to_vec_f64(&b.probs).unwrap());
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_descriptor_mismatch_rejected() {
        let m = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 11).unwrap();
        let bytes = m.to_bytes().unwrap();
        let err = Model::from_bytes(&bytes, Some(&ArchDescriptor::sdnet())).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }
}
