use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Generator;
use crate::toyworld::{
    garment_recon_sample, linf, model_free_sample, model_to_model_sample, multi_garment_sample, random_garment,
    random_person, FilterRecord, Provenance, Slot, Task, TrainingSample, View,
};

use super::PipelineError;

/// Self-synthesis route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Flats reconstructed from a dressed person, paired into a multi-garment sample.
    MultiGarment,
    /// A generated person wearing a known garment, paired into a model-to-model sample.
    ModelToModel,
}

impl SynthKind {
    pub fn task(self) -> Task {
        match self {
            SynthKind::MultiGarment => Task::MultiGarment,
            SynthKind::ModelToModel => Task::ModelToModel,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            SynthKind::MultiGarment => "b1",
            SynthKind::ModelToModel => "b2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCandidate {
    pub id: String,
    pub kind: SynthKind,
    pub sample: TrainingSample,
    pub provenance: Provenance,
    pub filter_record: Option<FilterRecord>,
}

impl SynthCandidate {
    pub fn accepted(&self) -> bool {
        self.filter_record.is_some_and(|r| r.accepted())
    }
}

fn generation_seed(seed: u64, kind: SynthKind, index: usize) -> u64 {
    let k = match kind {
        SynthKind::MultiGarment => 0xB1,
        SynthKind::ModelToModel => 0xB2,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k << 56) ^ index as u64
}

/// Reconstructs both garments of up to `n` dressed source people and pairs the
/// generated flats with the untouched source image.
pub fn synthesize_b1<G: Generator + ?Sized>(
    generator: &G,
    sources: &[(String, TrainingSample)],
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<SynthCandidate>, PipelineError> {
    let eligible = sources.iter().filter(|(_, s)| s.specs.persons.first().is_some_and(|p| p.top.is_some() && p.bottom.is_some()));
    let mut out = Vec::new();
    for (i, (id, src)) in eligible.take(n).enumerate() {
        let person = src.specs.persons[0];
        let canvas = src.canvas();
        let gen_seed = generation_seed(seed, SynthKind::MultiGarment, i);
        let mut flats = Vec::with_capacity(2);
        for (k, slot) in [Slot::Top, Slot::Bottom].into_iter().enumerate() {
            let query = garment_recon_sample(&person, slot, src.seed, canvas)?;
            flats.push(generator.generate(&query, steps, gen_seed ^ ((k as u64) << 48))?);
        }
        let mut sample = multi_garment_sample(&person, src.seed, canvas)?;
        sample.refs = flats;
        out.push(SynthCandidate {
            id: format!("b1_{i:05}"),
            kind: SynthKind::MultiGarment,
            sample,
            provenance: Provenance { source_id: id.clone(), source_seed: src.seed, generation_seed: gen_seed },
            filter_record: None,
        });
    }
    Ok(out)
}

/// Dresses a fresh posed person in each of up to `n` source garments, then asks for
/// that garment on a second fresh person whose target is rendered from specs.
pub fn synthesize_b2<G: Generator + ?Sized>(
    generator: &G,
    sources: &[(String, TrainingSample)],
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<SynthCandidate>, PipelineError> {
    let eligible = sources.iter().filter(|(_, s)| !s.specs.garments.is_empty());
    let mut out = Vec::new();
    for (i, (id, src)) in eligible.take(n).enumerate() {
        let canvas = src.canvas();
        let g = src.specs.garments[0].with_view(View::Front);
        let gen_seed = generation_seed(seed, SynthKind::ModelToModel, i);
        let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
        let pose_source = random_person(canvas, &mut rng);
        let mut other = random_person(canvas, &mut rng);
        while other.garment(g.slot).is_some_and(|o| o.pattern == g.pattern && linf(o.base_color, g.base_color) <= 0.2) {
            other = other.with_garment(g.slot, Some(random_garment(g.slot, canvas, &mut rng)));
        }
        let query = model_free_sample(&pose_source, g, src.seed, canvas)?;
        let generated = generator.generate(&query, steps, gen_seed)?;
        let dressed = query.specs.persons[0];
        let mut sample = model_to_model_sample(&dressed, &other, g.slot, src.seed, canvas)?;
        sample.refs[0] = generated;
        out.push(SynthCandidate {
            id: format!("b2_{i:05}"),
            kind: SynthKind::ModelToModel,
            sample,
            provenance: Provenance { source_id: id.clone(), source_seed: src.seed, generation_seed: gen_seed },
            filter_record: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OracleGenerator;
    use crate::pipeline::filter::{filter_sample, DEFAULT_TAU};
    use crate::toyworld::{make_task_sample, render_person, Canvas};

    fn sources(task: Task, n: u64) -> Vec<(String, TrainingSample)> {
        (0..n).map(|i| (format!("{task}_{i:05}"), make_task_sample(task, 100 + i, Canvas::default()).unwrap())).collect()
    }

    #[test]
    fn zero_requested_gives_nothing() {
        let src = sources(Task::SingleGarment, 2);
        assert!(synthesize_b1(&OracleGenerator, &src, 0, 4, 0).unwrap().is_empty());
        assert!(synthesize_b2(&OracleGenerator, &src, 0, 4, 0).unwrap().is_empty());
    }

    #[test]
    fn b1_target_is_the_source_person_image() {
        let src = sources(Task::GarmentRecon, 4);
        let cands = synthesize_b1(&OracleGenerator, &src, 4, 4, 0).unwrap();
        assert_eq!(cands.len(), 4);
        for (c, (id, s)) in cands.iter().zip(&src) {
            assert_eq!(c.sample.target, s.refs[0]);
            assert_eq!(c.sample.target, render_person(&s.specs.persons[0], Canvas::default()).unwrap().image);
            assert_eq!(&c.provenance.source_id, id);
            assert_eq!(c.sample.task, Task::MultiGarment);
        }
    }

    #[test]
    fn b2_records_source_garment() {
        let src = sources(Task::ModelFree, 3);
        let cands = synthesize_b2(&OracleGenerator, &src, 3, 4, 0).unwrap();
        for (c, (id, s)) in cands.iter().zip(&src) {
            assert_eq!(&c.provenance.source_id, id);
            assert_eq!(c.sample.specs.garments[0], s.specs.garments[0]);
            c.sample.validate().unwrap();
        }
    }

    #[test]
    fn oracle_candidates_pass_both_filters() {
        let b1 = synthesize_b1(&OracleGenerator, &sources(Task::GarmentRecon, 20), 20, 4, 0).unwrap();
        let b2 = synthesize_b2(&OracleGenerator, &sources(Task::ModelFree, 20), 20, 4, 0).unwrap();
        for c in b1.iter().chain(&b2) {
            let r = filter_sample(&c.sample, DEFAULT_TAU).unwrap();
            assert!(r.accepted(), "{} {r:?}", c.id);
        }
    }
}
