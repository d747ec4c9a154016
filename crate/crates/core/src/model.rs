//! The full conditional generator: query encoder feeding the diffusion transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dit::{decode_latent, encode_latent, euler_integrate, gaussian_noise, patchify, Dit, DitConfig, DitInput, DitOutput};
use crate::error::{ModelError, Result};
use crate::focus::{focus_targets, FocusTarget};
use crate::image::{Mask, RgbImage};
use crate::mgsa::{Mgsa, MgsaConfig};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toyworld::{tokenize_text, Canvas, Task, TrainingSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: Canvas,
    pub patch: usize,
    pub mgsa: MgsaConfig,
    pub dit: DitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { canvas: Canvas::default(), patch: 8, mgsa: MgsaConfig::default(), dit: DitConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Validation(m));
        let Canvas { height, width } = self.canvas;
        if self.patch == 0 || height % self.patch != 0 || width % self.patch != 0 {
            return bad(format!("canvas {height}x{width} not divisible by patch {}", self.patch));
        }
        if self.mgsa.d_q % self.mgsa.heads != 0 || self.dit.d_model % self.dit.heads != 0 {
            return bad("model widths must divide into heads".into());
        }
        if self.dit.layers == 0 || self.mgsa.layers == 0 {
            return bad("at least one layer per stack".into());
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.canvas.height / self.patch, self.canvas.width / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        (self.canvas.height / self.patch) * (self.canvas.width / self.patch)
    }

    pub fn d_patch(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Parameters and layout of the query encoder plus generator.
#[derive(Clone, Debug)]
pub struct TryOnModel<T: Scalar> {
    pub config: ModelConfig,
    pub mgsa: Mgsa,
    pub dit: Dit,
    pub store: ParamStore<T>,
}

/// Everything the model reads from a sample, precomputed once.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub instruction: Vec<u32>,
    /// Raw `[0, 1]` patches for the encoder.
    pub ref_patches: Vec<Matrix<T>>,
    /// `[-1, 1]` latents for the generator.
    pub ref_latents: Vec<Matrix<T>>,
    pub pose: Option<Matrix<T>>,
}

#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub task: Task,
    pub cond: Conditioning<T>,
    pub z0: Matrix<T>,
    pub t_v: Matrix<T>,
    pub focus: Vec<FocusTarget>,
    pub target: RgbImage,
    pub target_mask: Mask,
}

pub struct ForwardOut {
    pub tq: Var,
    pub projected: Var,
    pub dit: DitOutput,
}

impl<T: Scalar> TryOnModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.n_tokens();
        let mgsa = Mgsa::new(&mut store, config.mgsa.clone(), n, config.d_patch(), &mut rng);
        let dit = Dit::new(&mut store, config.dit.clone(), config.d_patch(), config.grid(), config.mgsa.d_q, &mut rng);
        Ok(Self { config, mgsa, dit, store })
    }

    pub fn cast<U: Scalar>(&self) -> TryOnModel<U> {
        TryOnModel { config: self.config.clone(), mgsa: self.mgsa.clone(), dit: self.dit.clone(), store: self.store.cast() }
    }

    pub fn conditioning(&self, instruction: &[u32], refs: &[RgbImage], pose: Option<&RgbImage>) -> Result<Conditioning<T>> {
        let p = self.config.patch;
        let canvas = (self.config.canvas.height, self.config.canvas.width);
        if let Some(img) = refs.iter().chain(pose).find(|r| r.size() != canvas) {
            return Err(ModelError::Validation(format!("image {:?} does not match canvas {canvas:?}", img.size())));
        }
        Ok(Conditioning {
            instruction: instruction.to_vec(),
            ref_patches: refs.iter().map(|r| patchify(r, p)).collect::<Result<_>>()?,
            ref_latents: refs.iter().map(|r| encode_latent(r, p)).collect::<Result<_>>()?,
            pose: pose.map(|img| encode_latent(img, p)).transpose()?,
        })
    }

    pub fn prepare(&self, sample: &TrainingSample) -> Result<PreparedSample<T>> {
        let p = self.config.patch;
        let cond = self.conditioning(&sample.instruction, &sample.refs, sample.pose.as_ref())?;
        let target_patches = patchify(&sample.target, p)?;
        Ok(PreparedSample {
            task: sample.task,
            cond,
            z0: encode_latent(&sample.target, p)?,
            t_v: self.mgsa.target_features(&self.store, &target_patches),
            focus: focus_targets(sample, p)?,
            target: sample.target.clone(),
            target_mask: sample.target_mask.clone(),
        })
    }

    /// Encoder plus generator on a noisy latent at time `t`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<T>,
        cond: &Conditioning<T>,
        z_t: &Matrix<T>,
        t: f64,
    ) -> Result<ForwardOut> {
        let tq = self.mgsa.forward(tape, binder, &cond.instruction, &cond.ref_patches)?;
        let projected = self.mgsa.project(tape, binder, tq);
        let input = DitInput { semantic: tq, z_t, refs: &cond.ref_latents, pose: cond.pose.as_ref(), t };
        let dit = self.dit.forward(tape, binder, &input)?;
        Ok(ForwardOut { tq, projected, dit })
    }

    /// Semantic guidance `T_q` as a plain matrix.
    pub fn semantic(&self, cond: &Conditioning<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let mut b = Binder::inference(&self.store);
        let tq = self.mgsa.forward(&mut tape, &mut b, &cond.instruction, &cond.ref_patches)?;
        Ok(tape.value(tq).clone())
    }

    /// Mean token-wise cosine between the projected queries and the target features of `sample`.
    pub fn alignment_cosine(&self, sample: &TrainingSample) -> Result<f64> {
        let prep = self.prepare(sample)?;
        let mut tape = Tape::new();
        let mut b = Binder::inference(&self.store);
        let tq = self.mgsa.forward(&mut tape, &mut b, &prep.cond.instruction, &prep.cond.ref_patches)?;
        let projected = self.mgsa.project(&mut tape, &mut b, tq);
        Ok(crate::mgsa::mean_cosine(tape.value(projected), &prep.t_v))
    }

    /// Predicted velocity for a fixed semantic guidance.
    pub fn velocity(&self, tq: &Matrix<T>, cond: &Conditioning<T>, z_t: &Matrix<T>, t: f64) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let mut b = Binder::inference(&self.store);
        let semantic = tape.constant(tq.clone());
        let input = DitInput { semantic, z_t, refs: &cond.ref_latents, pose: cond.pose.as_ref(), t };
        let out = self.dit.forward(&mut tape, &mut b, &input)?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Euler sampling from Gaussian noise drawn from `rng`.
    pub fn generate<R: Rng + ?Sized>(&self, cond: &Conditioning<T>, steps: usize, rng: &mut R) -> Result<RgbImage> {
        let tq = self.semantic(cond)?;
        let z = gaussian_noise(self.dit.n_tokens, self.dit.d_in, rng);
        let z = euler_integrate(z, steps, |z, t| self.velocity(&tq, cond, z, t))?;
        let Canvas { height, width } = self.config.canvas;
        decode_latent(&z, height, width, self.config.patch)
    }

    /// [`TryOnModel::generate`] with sampler noise from a ChaCha8 stream seeded by `seed`.
    pub fn sample(&self, cond: &Conditioning<T>, steps: usize, seed: u64) -> Result<RgbImage> {
        self.generate(cond, steps, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Conditioning from an instruction string and images, for one-off inference.
    pub fn conditioning_from_text(&self, instruction: &str, refs: &[RgbImage], pose: Option<&RgbImage>) -> Result<Conditioning<T>> {
        let ids = tokenize_text(instruction)?;
        self.conditioning(&ids, refs, pose)
    }
}

/// Anything that can produce a target image for a sample's conditioning.
pub trait Generator {
    fn generate(&self, sample: &TrainingSample, steps: usize, seed: u64) -> Result<RgbImage>;

    /// Mean focus score of the supervised attention maps, when the generator has attention.
    fn focus_score(&self, _sample: &TrainingSample) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl Generator for TryOnModel<f32> {
    fn generate(&self, sample: &TrainingSample, steps: usize, seed: u64) -> Result<RgbImage> {
        let cond = self.conditioning(&sample.instruction, &sample.refs, sample.pose.as_ref())?;
        self.sample(&cond, steps, seed)
    }

    /// Teacher-forced at `t = 0.5` with noise seeded by the sample seed.
    fn focus_score(&self, sample: &TrainingSample) -> Result<Option<f64>> {
        let prep = self.prepare(sample)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
        let eps = gaussian_noise(self.dit.n_tokens, self.dit.d_in, &mut rng);
        let z_t = crate::dit::flow_interpolate(&prep.z0, &eps, 0.5);
        let mut tape = Tape::new();
        let mut b = Binder::inference(&self.store);
        let out = self.forward(&mut tape, &mut b, &prep.cond, &z_t, 0.5)?;
        let heads = self.config.dit.heads;
        let means: Vec<Matrix<f32>> =
            out.dit.attn.iter().map(|&a| crate::pipeline::head_mean_value(tape.value(a), heads)).collect();
        let maps = crate::focus::response_maps(&means, &out.dit.segmap, &prep.focus)?;
        let mut total = 0.0;
        for (m, target) in maps.iter().zip(prep.focus.iter().cycle()) {
            total += crate::focus::focus_score(&m.values, &target.mask)?;
        }
        Ok(Some(total / maps.len().max(1) as f64))
    }
}

/// Returns the ground truth: the sample's own target.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&self, sample: &TrainingSample, _steps: usize, _seed: u64) -> Result<RgbImage> {
        Ok(sample.target.clone())
    }
}
