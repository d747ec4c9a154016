//! Causal query encoder over instructions and reference patches, the frozen
//! target-feature extractor and the token-wise cosine alignment loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ModelError, Result};
use crate::nn::{sinusoidal, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toyworld::{Vocab, IMG};

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgsaConfig {
    pub d_q: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    /// Width of the target features.
    pub d_v: usize,
}

impl Default for MgsaConfig {
    fn default() -> Self {
        Self { d_q: 64, heads: 4, layers: 4, max_seq: 256, d_v: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, x: Var) -> Var {
        let h = self.ln1.forward(tape, p, x);
        let (a, _) = self.attn.forward(tape, p, h, true);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, p, x);
        let h = self.mlp.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Parameter layout of the encoder, its learnable queries, the projection head
/// and the frozen target projection.
#[derive(Clone, Debug)]
pub struct Mgsa {
    pub config: MgsaConfig,
    pub n_q: usize,
    pub d_patch: usize,
    pub tok_embed: ParamId,
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub queries: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    /// `D_q → 2·D_q → D_v`.
    pub proj: Mlp,
    /// Never trained.
    pub target_proj: ParamId,
}

impl Mgsa {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: MgsaConfig,
        n_q: usize,
        d_patch: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.d_q;
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("mgsa.block{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    attn: Attention::new(store, &format!("{name}.attn"), d, config.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, rng),
                }
            })
            .collect();
        let target_proj = store.insert(
            "mgsa.target_proj",
            Matrix::randn(d_patch, config.d_v, 1.0 / (d_patch as f64).sqrt(), rng),
            false,
        );
        Self {
            n_q,
            d_patch,
            tok_embed: store.normal("mgsa.tok_embed", Vocab::len(), d, 0.5, rng),
            patch_embed: Linear::new(store, "mgsa.patch_embed", d_patch, d, true, 1.0, rng),
            pos: store.normal("mgsa.pos", config.max_seq, d, 0.1, rng),
            queries: store.normal("mgsa.queries", n_q, d, 0.5, rng),
            blocks,
            ln_f: LayerNorm::new(store, "mgsa.ln_f", d),
            proj: Mlp::new(store, "mgsa.proj", d, 2 * d, config.d_v, rng),
            target_proj,
            config,
        }
    }

    /// Sequence length for an instruction and its references.
    pub fn sequence_len(&self, instruction: &[u32], refs: usize, tokens_per_ref: usize) -> usize {
        instruction.len() - refs + refs * tokens_per_ref + self.n_q
    }

    /// Hidden states at the query positions, `N_q × D_q`.
    ///
    /// Each `IMG` placeholder in `instruction` is replaced by the patch embeddings of
    /// the next reference in `ref_patches`; the queries follow the whole prompt.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &mut Binder<T>,
        instruction: &[u32],
        ref_patches: &[Matrix<T>],
    ) -> Result<Var> {
        let placeholders = instruction.iter().filter(|&&t| t == IMG).count();
        if ref_patches.is_empty() || placeholders != ref_patches.len() {
            return Err(ModelError::RefCount { placeholders, refs: ref_patches.len() });
        }
        if let Some(&bad) = instruction.iter().find(|&&t| t as usize >= Vocab::len()) {
            return Err(ModelError::Validation(format!("token id {bad} outside vocabulary")));
        }
        let len = instruction.len() - placeholders + ref_patches.iter().map(|r| r.rows()).sum::<usize>() + self.n_q;
        if len > self.config.max_seq {
            return Err(ModelError::SequenceTooLong { len, max: self.config.max_seq });
        }
        let table = p.var(tape, self.tok_embed);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let mut next_ref = 0;
        for &tok in instruction {
            if tok == IMG {
                if !run.is_empty() {
                    parts.push(tape.gather(table, &run));
                    run.clear();
                }
                let patches = &ref_patches[next_ref];
                if patches.cols() != self.d_patch {
                    return Err(ModelError::Validation(format!("patch width {} expected {}", patches.cols(), self.d_patch)));
                }
                let x = tape.constant(patches.clone());
                parts.push(self.patch_embed.forward(tape, p, x));
                next_ref += 1;
            } else {
                run.push(tok as usize);
            }
        }
        if !run.is_empty() {
            parts.push(tape.gather(table, &run));
        }
        parts.push(p.var(tape, self.queries));
        let x = tape.concat(&parts);
        let pos = p.var(tape, self.pos);
        let pos = tape.slice_rows(pos, 0, len);
        let mut x = tape.add(x, pos);
        for block in &self.blocks {
            x = block.forward(tape, p, x);
        }
        let x = self.ln_f.forward(tape, p, x);
        Ok(tape.slice_rows(x, len - self.n_q, self.n_q))
    }

    /// `MLP(T_q)`, mapped into the target-feature width.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, p: &mut Binder<T>, tq: Var) -> Var {
        self.proj.forward(tape, p, tq)
    }

    /// `T_v[n] = patch_n · P + pos(n)` with `P` the frozen projection and `pos` a sinusoidal code.
    pub fn target_features<T: Scalar>(&self, store: &ParamStore<T>, target_patches: &Matrix<T>) -> Matrix<T> {
        let mut tv = target_patches.matmul(store.get(self.target_proj));
        for n in 0..tv.rows() {
            let code = sinusoidal::<T>(n as f64, self.config.d_v, 100.0);
            for (o, c) in tv.row_mut(n).iter_mut().zip(code) {
                *o += c;
            }
        }
        tv
    }
}

/// `−(1/N) Σ_n cos(T_v[n], projected[n])`, denominators clamped at [`COSINE_EPS`].
pub fn align_loss<T: Scalar>(tape: &mut Tape<T>, projected: Var, t_v: &Matrix<T>) -> Var {
    tape.cosine_align(projected, t_v.clone(), T::of(COSINE_EPS))
}

/// Mean row-wise cosine similarity of two matrices.
pub fn mean_cosine<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mean_cosine shapes");
    let mut total = 0.0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(u, v)| u.f64() * v.f64()).sum();
        let nx = x.iter().map(|u| u.f64().powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|u| u.f64().powi(2)).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(COSINE_EPS);
    }
    total / a.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::patchify;
    use crate::image::RgbImage;
    use crate::toyworld::{make_task_sample, Canvas, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore<f64>, Mgsa) {
        let mut store = ParamStore::new();
        let cfg = MgsaConfig { d_q: 16, heads: 2, layers: 2, max_seq: 64, d_v: 12 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mgsa::new(&mut store, cfg, 6, 12, &mut rng);
        (store, m)
    }

    fn refs(seed: u64) -> Vec<Matrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2).map(|_| Matrix::randn(6, 12, 1.0, &mut rng)).collect()
    }

    fn forward(store: &ParamStore<f64>, m: &Mgsa, instr: &[u32], r: &[Matrix<f64>]) -> Result<Matrix<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::inference(store);
        let v = m.forward(&mut tape, &mut b, instr, r)?;
        Ok(tape.value(v).clone())
    }

    #[test]
    fn output_shape_and_ref_order_sensitivity() {
        let (store, m) = tiny();
        let instr = [0, 30, IMG, 34, IMG, 1];
        let r = refs(1);
        let out = forward(&store, &m, &instr, &r).unwrap();
        assert_eq!(out.shape(), (6, 16));
        let swapped = forward(&store, &m, &instr, &[r[1].clone(), r[0].clone()]).unwrap();
        assert!(out.max_abs_diff(&swapped) > 1e-6);
    }

    #[test]
    fn last_query_does_not_affect_earlier_ones() {
        let (mut store, m) = tiny();
        let instr = [0, IMG, IMG, 1];
        let r = refs(2);
        let before = forward(&store, &m, &instr, &r).unwrap();
        let q = store.get_mut(m.queries);
        for c in 0..q.cols() {
            let v = q.get(5, c);
            q.set(5, c, v + 1.0);
        }
        let after = forward(&store, &m, &instr, &r).unwrap();
        assert_eq!(before.block(0, 0, 5, 16), after.block(0, 0, 5, 16));
        assert!(before.block(5, 0, 1, 16).max_abs_diff(&after.block(5, 0, 1, 16)) > 0.0);
    }

    #[test]
    fn sequence_limit_and_placeholder_mismatch() {
        let (store, m) = tiny();
        let long: Vec<u32> = std::iter::once(IMG).chain(std::iter::repeat_n(4, 60)).collect();
        assert!(matches!(
            forward(&store, &m, &long, &refs(0)[..1]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(forward(&store, &m, &[0, IMG, 1], &refs(0)), Err(ModelError::RefCount { .. })));
    }

    #[test]
    fn target_features_are_local_and_frozen() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mgsa::new(&mut store, MgsaConfig::default(), 48, 192, &mut rng);
        assert!(!store.is_trainable(m.target_proj));
        let s = make_task_sample(Task::ModelFree, 1, Canvas::default()).unwrap();
        let a = patchify::<f64>(&s.target, 8).unwrap();
        let tv = m.target_features(&store, &a);
        assert_eq!(tv, m.target_features(&store, &a));

        let mut other = s.target.clone();
        other.put(3, 3, [0.0, 1.0, 0.0]);
        let tv2 = m.target_features(&store, &patchify(&other, 8).unwrap());
        for n in 0..48 {
            assert_eq!(tv.row(n) == tv2.row(n), n != 0, "row {n}");
        }

        let black = m.target_features(&store, &patchify(&RgbImage::filled(64, 48, [0.0; 3]), 8).unwrap());
        for n in 0..48 {
            assert_eq!(black.row(n), sinusoidal::<f64>(n as f64, 64, 100.0).as_slice());
        }
    }

    #[test]
    fn align_loss_identities_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tv = Matrix::<f64>::randn(4, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let same = tape.constant(tv.clone());
        let l = align_loss(&mut tape, same, &tv);
        assert!((tape.scalar(l) + 1.0).abs() < 1e-12);
        let neg = tape.constant(tv.map(|v| -v));
        let l = align_loss(&mut tape, neg, &tv);
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);

        let x = Matrix::<f64>::randn(4, 8, 1.0, &mut rng);
        let mut oracle = 0.0;
        for n in 0..4 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for c in 0..8 {
                dot += x.get(n, c) * tv.get(n, c);
                na += x.get(n, c) * x.get(n, c);
                nb += tv.get(n, c) * tv.get(n, c);
            }
            oracle -= dot / (na.sqrt() * nb.sqrt());
        }
        let xv = tape.constant(x.clone());
        let l = align_loss(&mut tape, xv, &tv);
        assert!((tape.scalar(l) - oracle / 4.0).abs() < 1e-6);
        assert!((mean_cosine(&x, &tv) + tape.scalar(l)).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_are_clamped_and_counted() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Matrix::zeros(3, 4));
        let l = align_loss(&mut tape, z, &Matrix::filled(3, 4, 1.0));
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(tape.clamp_events(), 3);
    }
}
