//! Loss terms and the weighted total objective.
//!
//! `total = λ1·rec + λ2·zrec + λ3·dice + λ4·focal`, with all weights 1 on
//! labeled batches and the segmentation weights zeroed on unlabeled ones.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::scalar;

pub const DICE_EPS: f64 = 1e-6;
pub const FOCAL_PT_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub zrec: f64,
    pub dice: f64,
    pub focal: f64,
}

impl LossWeights {
    pub const LABELED: Self = Self {
        rec: 1.0,
        zrec: 1.0,
        dice: 1.0,
        focal: 1.0,
    };
    pub const UNLABELED: Self = Self {
        rec: 1.0,
        zrec: 1.0,
        dice: 0.0,
        focal: 0.0,
    };
    /// The U-Net baseline has no reconstruction path.
    pub const SEGMENTATION_ONLY: Self = Self {
        rec: 0.0,
        zrec: 0.0,
        dice: 1.0,
        focal: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.zrec, self.dice, self.focal];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn rec_loss(image: &Tensor, reconstruction: &Tensor) -> Result<Tensor> {
    same_shape(image, reconstruction, "rec_loss")?;
    Ok((image - reconstruction)?.abs()?.mean_all()?)
}

/// Draws `(batch, dim)` modality vectors from a standard normal prior.
pub fn sample_modality_prior(rng: &mut impl Rng, batch: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..batch * dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (batch, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// L1 between sampled modality vectors and their re-encoding through
/// `decode` and the modality encoder.
pub fn latent_regression_loss(model: &Model, anatomy: &Tensor, z_sampled: &Tensor) -> Result<Tensor> {
    let decoded = model.decode(anatomy, z_sampled)?;
    let z_hat = model.modality_encode(&decoded)?;
    l1_vectors(z_sampled, &z_hat)
}

/// Mean absolute difference between two modality batches.
pub fn l1_vectors(z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    same_shape(z, z_hat, "latent regression")?;
    Ok((z - z_hat)?.abs()?.mean_all()?)
}

/// Soft Dice over the foreground classes; `probs` and `target` are
/// `(B, 4, H, W)`, sums run over batch and pixels.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(probs, target, "dice_loss")?;
    let (_, c, _, _) = probs.dims4()?;
    let inter = (probs * target)?.sum((0, 2, 3))?;
    let psum = probs.sum((0, 2, 3))?;
    let gsum = target.sum((0, 2, 3))?;
    let per_class = ((inter * 2.0)? + DICE_EPS)?.div(&((psum + gsum)? + DICE_EPS)?)?;
    let fg = per_class.narrow(0, 1, c - 1)?.mean_all()?;
    Ok(fg.affine(-1.0, 1.0)?)
}

/// Mean over pixels of `-α (1 - p_t)^γ log p_t`, with `p_t` floored at 1e-7.
pub fn focal_loss(probs: &Tensor, target: &Tensor, params: FocalParams) -> Result<Tensor> {
    same_shape(probs, target, "focal_loss")?;
    if !(params.gamma >= 0.0) || !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(Error::Config(format!("focal parameters out of range: {params:?}")));
    }
    let pt = (probs * target)?.sum(1)?.clamp(FOCAL_PT_FLOOR, 1.0)?;
    let modulating = if params.gamma == 0.0 {
        pt.ones_like()?
    } else {
        pt.affine(-1.0, 1.0)?.powf(params.gamma)?
    };
    let per_pixel = (modulating * pt.log()?)?;
    Ok((per_pixel.mean_all()? * -params.alpha)?)
}

/// The four loss terms for one batch. Segmentation terms are absent on
/// unlabeled batches.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rec: Option<Tensor>,
    pub zrec: Option<Tensor>,
    pub dice: Option<Tensor>,
    pub focal: Option<Tensor>,
}

impl LossTerms {
    pub fn values(&self) -> Result<[Option<f64>; 4]> {
        let v = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose();
        Ok([v(&self.rec)?, v(&self.zrec)?, v(&self.dice)?, v(&self.focal)?])
    }
}

/// Weighted sum of the terms. Zero-weight and absent terms are left out of
/// the graph entirely, so they contribute exactly zero gradient.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let named = [
        ("rec", &terms.rec, weights.rec),
        ("zrec", &terms.zrec, weights.zrec),
        ("dice", &terms.dice, weights.dice),
        ("focal", &terms.focal, weights.focal),
    ];
    let mut total: Option<Tensor> = None;
    for (term, value, weight) in named {
        let Some(t) = value else { continue };
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
        if weight == 0.0 {
            continue;
        }
        let w = (t * weight)?;
        total = Some(match total {
            Some(acc) => (acc + w)?,
            None => w,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::new(0f32, &Device::Cpu)?),
    }
}

/// Scalar form of [`total_loss`].
pub fn total_value(terms: [f64; 4], weights: &LossWeights) -> Result<f64> {
    let names = ["rec", "zrec", "dice", "focal"];
    for (v, term) in terms.iter().zip(names) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
    }
    Ok(weights.rec * terms[0] + weights.zrec * terms[1] + weights.dice * terms[2] + weights.focal * terms[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        scalar(&x).unwrap()
    }

    #[test]
    fn rec_loss_examples() {
        let a = t(vec![0.0; 16], &[1, 1, 4, 4]);
        assert_eq!(s(rec_loss(&a, &a).unwrap()), 0.0);
        let b = t(vec![0.5; 16], &[1, 1, 4, 4]);
        assert!((s(rec_loss(&a, &b).unwrap()) - 0.5).abs() < 1e-12);
        assert!(rec_loss(&a, &t(vec![0.0; 8], &[1, 1, 2, 4])).is_err());
    }

    #[test]
    fn l1_vector_examples() {
        let z = t(vec![1.0; 8], &[1, 8]);
        assert_eq!(s(l1_vectors(&z, &z).unwrap()), 0.0);
        assert_eq!(s(l1_vectors(&z, &z.zeros_like().unwrap()).unwrap()), 1.0);
    }

    fn one_hot_2x2(labels: [u8; 4]) -> Tensor {
        let mut v = vec![0.0; 16];
        for (p, &l) in labels.iter().enumerate() {
            v[l as usize * 4 + p] = 1.0;
        }
        t(v, &[1, 4, 2, 2])
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let g = one_hot_2x2([0, 1, 2, 3]);
        assert!(s(dice_loss(&g, &g).unwrap()) <= 1e-6);
        let bg = one_hot_2x2([0, 0, 0, 0]);
        assert!((s(dice_loss(&bg, &g).unwrap()) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_toy_matches_hand_formula() {
        // Class 1 probabilities {1,1,0,0}; the remaining mass goes to BG.
        let mut p = vec![0.0; 16];
        p[4] = 1.0;
        p[5] = 1.0;
        p[2] = 1.0;
        p[3] = 1.0;
        let probs = t(p, &[1, 4, 2, 2]);
        let g = one_hot_2x2([1, 0, 0, 0]);
        let eps = 1e-6;
        let c1 = (2.0 * 1.0 + eps) / (2.0 + 1.0 + eps);
        let c2 = eps / eps;
        let c3 = eps / eps;
        let expect = 1.0 - (c1 + c2 + c3) / 3.0;
        assert!((s(dice_loss(&probs, &g).unwrap()) - expect).abs() < 1e-6);
    }

    #[test]
    fn focal_examples() {
        let g = one_hot_2x2([0, 1, 2, 3]);
        assert!(s(focal_loss(&g, &g, FocalParams::default()).unwrap()).abs() < 1e-12);

        let p = t(vec![0.5, 0.5, 0.0, 0.0], &[1, 4, 1, 1]);
        let y = t(vec![1.0, 0.0, 0.0, 0.0], &[1, 4, 1, 1]);
        let v = s(focal_loss(&p, &y, FocalParams::default()).unwrap());
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-9);
        assert!((v - 0.04332).abs() < 1e-5);

        // gamma = 0, alpha = 1 is cross-entropy.
        // Channel-major layout: pixel 0 is class 0 at 0.7, pixel 1 is class 2 at 0.4.
        let p = t(vec![0.7, 0.2, 0.1, 0.3, 0.1, 0.4, 0.1, 0.1], &[1, 4, 1, 2]);
        let y = t(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[1, 4, 1, 2]);
        let ce = -(0.7f64.ln() + 0.4f64.ln()) / 2.0;
        let v = s(focal_loss(&p, &y, FocalParams { gamma: 0.0, alpha: 1.0 }).unwrap());
        assert!((v - ce).abs() < 1e-12, "{v} vs {ce}");
    }

    #[test]
    fn focal_monotone_in_pt() {
        let y = t(vec![1.0, 0.0, 0.0, 0.0], &[1, 4, 1, 1]);
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let pt = i as f64 / 100.0;
            let p = t(vec![pt, 1.0 - pt, 0.0, 0.0], &[1, 4, 1, 1]);
            let v = s(focal_loss(&p, &y, FocalParams::default()).unwrap());
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn total_loss_presets() {
        let terms = |v: [f64; 4]| LossTerms {
            rec: Some(t(vec![v[0]], &[])),
            zrec: Some(t(vec![v[1]], &[])),
            dice: Some(t(vec![v[2]], &[])),
            focal: Some(t(vec![v[3]], &[])),
        };
        let x = [0.2, 0.1, 0.3, 0.05];
        assert!((s(total_loss(&terms(x), &LossWeights::LABELED).unwrap()) - 0.65).abs() < 1e-12);
        assert!((s(total_loss(&terms(x), &LossWeights::UNLABELED).unwrap()) - 0.3).abs() < 1e-12);
        assert_eq!(s(total_loss(&terms([0.0; 4]), &LossWeights::LABELED).unwrap()), 0.0);
        assert!((total_value(x, &LossWeights::LABELED).unwrap() - 0.65).abs() < 1e-12);
        let err = total_loss(&terms([0.1, f64::NAN, 0.0, 0.0]), &LossWeights::LABELED).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { term: "zrec" }));
    }

    #[test]
    fn prior_is_seeded() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let za = sample_modality_prior(&mut a, 2, 8, DType::F32).unwrap();
        let zb = sample_modality_prior(&mut b, 2, 8, DType::F32).unwrap();
        assert_eq!(to_vec_f64(&za).unwrap(), to_vec_f64(&zb).unwrap());
    }
}
