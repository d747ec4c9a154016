//! Patch latents, flow matching and the joint-sequence diffusion transformer.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ModelError, Result};
use crate::image::RgbImage;
use crate::nn::{sinusoidal, Attention, Linear, Mlp, LN_EPS};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Rearranges an image into `(H/p·W/p) × 3p²` patch tokens, row-major over the patch grid.
/// Each token lists its pixels row by row, channels interleaved.
pub fn patchify<T: Scalar>(img: &RgbImage, p: usize) -> Result<Matrix<T>> {
    let (h, w) = img.size();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(ModelError::Validation(format!("{h}x{w} image is not divisible into {p}-pixel patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let d = 3 * p * p;
    let mut out = Matrix::zeros(gh * gw, d);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.pixel(gy * p + dy, gx * p + dx);
                    for c in 0..3 {
                        row[(dy * p + dx) * 3 + c] = T::of(px[c] as f64);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Matrix<T>, height: usize, width: usize, p: usize) -> Result<RgbImage> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(ModelError::Validation(format!("{height}x{width} is not divisible into {p}-pixel patches")));
    }
    let (gh, gw) = (height / p, width / p);
    if tokens.shape() != (gh * gw, 3 * p * p) {
        return Err(ModelError::Validation(format!("token grid {:?} does not fit {height}x{width}/{p}", tokens.shape())));
    }
    let mut img = RgbImage::filled(height, width, [0.0; 3]);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row(gy * gw + gx);
            for dy in 0..p {
                for dx in 0..p {
                    let i = (dy * p + dx) * 3;
                    let c = [row[i], row[i + 1], row[i + 2]].map(|v| v.f64() as f32);
                    img.put(gy * p + dy, gx * p + dx, c);
                }
            }
        }
    }
    Ok(img)
}

/// Latent of an image: patch tokens of the image rescaled to `[-1, 1]`.
pub fn encode_latent<T: Scalar>(img: &RgbImage, p: usize) -> Result<Matrix<T>> {
    let two = T::of(2.0);
    Ok(patchify::<T>(img, p)?.map(|v| two * v - T::one()))
}

/// Image of a latent, clamped to `[0, 1]`.
pub fn decode_latent<T: Scalar>(z: &Matrix<T>, height: usize, width: usize, p: usize) -> Result<RgbImage> {
    let half = T::of(0.5);
    let mut img = unpatchify(&z.map(|v| (v + T::one()) * half), height, width, p)?;
    img.clamp01();
    Ok(img)
}

/// `t·z0 + (1−t)·eps`.
pub fn flow_interpolate<T: Scalar>(z0: &Matrix<T>, eps: &Matrix<T>, t: T) -> Matrix<T> {
    assert_eq!(z0.shape(), eps.shape(), "flow_interpolate shapes");
    z0.zip_map(eps, |a, e| t * a + (T::one() - t) * e)
}

/// Target velocity `z0 − eps` of the straight path.
pub fn flow_target<T: Scalar>(z0: &Matrix<T>, eps: &Matrix<T>) -> Matrix<T> {
    z0.sub(eps)
}

/// Mean squared error of a predicted velocity against `z0 − eps`.
pub fn flow_loss<T: Scalar>(tape: &mut Tape<T>, velocity: Var, z0: &Matrix<T>, eps: &Matrix<T>) -> Var {
    tape.mse_const(velocity, flow_target(z0, eps))
}

/// Euler integration of `dz/dt = v(z, t)` from `t = 0` to `t = 1` with `steps` uniform steps.
pub fn euler_integrate<T: Scalar, E>(
    mut z: Matrix<T>,
    steps: usize,
    mut velocity: impl FnMut(&Matrix<T>, f64) -> std::result::Result<Matrix<T>, E>,
) -> std::result::Result<Matrix<T>, E> {
    let steps = steps.max(1);
    let dt = T::of(1.0 / steps as f64);
    for k in 0..steps {
        let v = velocity(&z, k as f64 / steps as f64)?;
        for (a, &b) in z.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
    }
    Ok(z)
}

/// Standard-normal starting noise for sampling.
pub fn gaussian_noise<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    Matrix::randn(rows, cols, 1.0, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Semantic,
    Noisy,
    Ref(usize),
}

/// Layout of the joint sequence `[T_q; z_t; r_1; …; r_n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    spans: Vec<(Segment, Range<usize>)>,
}

impl SegmentMap {
    pub fn new(semantic: usize, noisy: usize, refs: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(2 + refs.len());
        let mut at = 0;
        let mut push = |seg, len: usize| {
            spans.push((seg, at..at + len));
            at += len;
        };
        push(Segment::Semantic, semantic);
        push(Segment::Noisy, noisy);
        for (i, &n) in refs.iter().enumerate() {
            push(Segment::Ref(i), n);
        }
        Self { spans }
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_refs(&self) -> usize {
        self.spans.len() - 2
    }

    pub fn range(&self, seg: Segment) -> Option<Range<usize>> {
        self.spans.iter().find(|(s, _)| *s == seg).map(|(_, r)| r.clone())
    }

    pub fn semantic(&self) -> Range<usize> {
        self.spans[0].1.clone()
    }

    pub fn noisy(&self) -> Range<usize> {
        self.spans[1].1.clone()
    }

    pub fn reference(&self, i: usize) -> Result<Range<usize>> {
        self.range(Segment::Ref(i)).ok_or(ModelError::RefIndex { index: i, refs: self.num_refs() })
    }

    /// Segment and within-segment index of a sequence position.
    pub fn locate(&self, pos: usize) -> Option<(Segment, usize)> {
        self.spans.iter().find(|(_, r)| r.contains(&pos)).map(|(s, r)| (*s, pos - r.start))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, layers: 6, mlp_ratio: 4 }
    }
}

/// Pre-norm joint-attention block with adaptive layer-norm conditioning on `t`.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: Attention,
    pub mlp: Mlp,
    d: usize,
}

impl DitBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &DitConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ada: Linear::zero_init(store, &format!("{name}.ada"), d, 6 * d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, cfg.mlp_ratio * d, d, rng),
            d,
        }
    }

    /// Returns the block output and its stacked per-head attention probabilities.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var, cond: Var) -> (Var, Var) {
        let d = self.d;
        let m = self.ada.forward(tape, p, cond);
        let chunk: Vec<Var> = (0..6).map(|i| tape.slice_cols(m, i * d, d)).collect();
        let h = tape.layer_norm(x, T::of(LN_EPS));
        let h = tape.row_affine(h, chunk[1], chunk[0], T::one());
        let (a, probs) = self.attn.forward(tape, p, h, false);
        let x = tape.gated_add(x, a, chunk[2]);
        let h = tape.layer_norm(x, T::of(LN_EPS));
        let h = tape.row_affine(h, chunk[4], chunk[3], T::one());
        let h = self.mlp.forward(tape, p, h);
        (tape.gated_add(x, h, chunk[5]), probs)
    }
}

/// Parameter layout of the generator.
#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
    pub d_in: usize,
    pub n_tokens: usize,
    pub d_sem: usize,
    pub x_embed: Linear,
    pub sem_embed: Linear,
    pub grid_pos: ParamId,
    /// Rows: semantic, noisy, then one per reference slot.
    pub seg_embed: ParamId,
    pub t_mlp: Mlp,
    pub blocks: Vec<DitBlock>,
    pub pose_block: DitBlock,
    pub final_ada: Linear,
    pub head: Linear,
}

pub const MAX_REFS: usize = 3;

/// Conditioning and noisy state for one generator call.
pub struct DitInput<'a, T> {
    pub semantic: Var,
    pub z_t: &'a Matrix<T>,
    pub refs: &'a [Matrix<T>],
    pub pose: Option<&'a Matrix<T>>,
    pub t: f64,
}

pub struct DitOutput {
    /// `N_z × D_in` velocity at the noisy positions.
    pub velocity: Var,
    /// Per layer, head-stacked attention probabilities over the full sequence.
    pub attn: Vec<Var>,
    pub segmap: SegmentMap,
    /// Input of the second block after pose injection (the first block's output when there is one block).
    pub block2_input: Var,
}

/// 2D sine-cosine position code: the first half of each row encodes the token row,
/// the second half its column.
pub fn grid_sincos<T: Scalar>(grid: (usize, usize), dim: usize) -> Matrix<T> {
    let (rows, cols) = grid;
    let half = dim / 2;
    Matrix::from_fn(rows * cols, dim, |n, c| {
        let (r, k) = (n / cols, n % cols);
        if c < half {
            sinusoidal::<T>(r as f64, half, 100.0)[c]
        } else if c < 2 * half {
            sinusoidal::<T>(k as f64, half, 100.0)[c - half]
        } else {
            T::zero()
        }
    })
}

impl Dit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: DitConfig,
        d_in: usize,
        grid: (usize, usize),
        d_sem: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let n_tokens = grid.0 * grid.1;
        let blocks = (0..config.layers).map(|i| DitBlock::new(store, &format!("dit.block{i}"), &config, rng)).collect();
        let pose_block = DitBlock::new(store, "dit.pose_block", &config, rng);
        Self {
            d_in,
            n_tokens,
            d_sem,
            x_embed: Linear::new(store, "dit.x_embed", d_in, d, true, 1.0, rng),
            sem_embed: Linear::new(store, "dit.sem_embed", d_sem, d, true, 1.0, rng),
            grid_pos: store.insert("dit.grid_pos", grid_sincos(grid, d), true),
            seg_embed: store.normal("dit.seg_embed", 2 + MAX_REFS, d, 0.02, rng),
            t_mlp: Mlp::new(store, "dit.t_mlp", d, d, d, rng),
            blocks,
            pose_block,
            final_ada: Linear::zero_init(store, "dit.final_ada", d, 2 * d),
            head: Linear::zero_init(store, "dit.head", d, d_in),
            config,
        }
    }

    fn embed_grid<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: &Matrix<T>, seg: Option<usize>) -> Var {
        let x = tape.constant(x.clone());
        let e = self.x_embed.forward(tape, p, x);
        let pos = p.var(tape, self.grid_pos);
        let e = tape.add(e, pos);
        match seg {
            Some(s) => {
                let table = p.var(tape, self.seg_embed);
                let row = tape.gather(table, &[s]);
                tape.add_row(e, row)
            }
            None => e,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, input: &DitInput<'_, T>) -> Result<DitOutput> {
        let grid = (self.n_tokens, self.d_in);
        if input.z_t.shape() != grid {
            return Err(ModelError::Validation(format!("noisy latent {:?}, expected {grid:?}", input.z_t.shape())));
        }
        if input.refs.is_empty() || input.refs.len() > MAX_REFS {
            return Err(ModelError::Validation(format!("{} references, expected 1..={MAX_REFS}", input.refs.len())));
        }
        if let Some(r) = input.refs.iter().find(|r| r.shape() != grid) {
            return Err(ModelError::Validation(format!("reference latent {:?}, expected {grid:?}", r.shape())));
        }
        if let Some(pose) = input.pose {
            if pose.rows() != self.n_tokens {
                return Err(ModelError::PoseTokens { expected: self.n_tokens, got: pose.rows() });
            }
            if pose.cols() != self.d_in {
                return Err(ModelError::Validation(format!("pose width {} expected {}", pose.cols(), self.d_in)));
            }
        }
        let d = self.config.d_model;
        let n_sem = tape.value(input.semantic).rows();
        if tape.value(input.semantic).cols() != self.d_sem {
            return Err(ModelError::Validation("semantic width mismatch".into()));
        }
        let segmap = SegmentMap::new(n_sem, self.n_tokens, &vec![self.n_tokens; input.refs.len()]);

        let t_code = tape.constant(Matrix::from_vec(1, d, sinusoidal::<T>(input.t * 1000.0, d, 10_000.0)));
        let c = self.t_mlp.forward(tape, p, t_code);
        let cond = tape.silu(c);

        let sem = self.sem_embed.forward(tape, p, input.semantic);
        let table = p.var(tape, self.seg_embed);
        let sem_row = tape.gather(table, &[0]);
        let mut parts = vec![tape.add_row(sem, sem_row), self.embed_grid(tape, p, input.z_t, Some(1))];
        for (i, r) in input.refs.iter().enumerate() {
            parts.push(self.embed_grid(tape, p, r, Some(2 + i)));
        }
        let mut x = tape.concat(&parts);

        let pose_out = input.pose.map(|pose| {
            let e = self.embed_grid(tape, p, pose, None);
            self.pose_block.forward(tape, p, e, cond).0
        });

        let mut attn = Vec::with_capacity(self.blocks.len());
        let mut block2_input = x;
        for (j, block) in self.blocks.iter().enumerate() {
            if j == 1 {
                if let Some(po) = pose_out {
                    x = tape.add_rows_at(x, po, segmap.noisy().start);
                }
                block2_input = x;
            }
            let (y, probs) = block.forward(tape, p, x, cond);
            attn.push(probs);
            x = y;
            if j == 0 && self.blocks.len() == 1 {
                block2_input = x;
            }
        }

        let noisy = tape.slice_rows(x, segmap.noisy().start, self.n_tokens);
        let m = self.final_ada.forward(tape, p, cond);
        let shift = tape.slice_cols(m, 0, d);
        let scale = tape.slice_cols(m, d, d);
        let h = tape.layer_norm(noisy, T::of(LN_EPS));
        let h = tape.row_affine(h, scale, shift, T::one());
        let velocity = self.head.forward(tape, p, h);
        Ok(DitOutput { velocity, attn, segmap, block2_input })
    }
}
