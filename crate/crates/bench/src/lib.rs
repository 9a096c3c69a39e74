//! Shared inputs for the criterion benches: one synthetic recording carried
//! through the frontend, segmentation and both embedders.

use fsbed_core::audio::{mel_pcen, FrontendConfig, PcenGram};
use fsbed_core::embed::{embed, l2_normalize, EmbedderSpec, EmbeddingMatrix};
use fsbed_core::proto::{
    build_prototypes, predict_probs, ClassifierWeights, ProbMatrix, Provenance,
};
use fsbed_core::synth::{generate_task, SynthProfile, SynthTask};
use fsbed_core::task::{
    label_support_segments, make_grid, plan_segments, SegmentGrid, SegmentLabel,
};

pub struct Fixture {
    pub task: SynthTask,
    pub gram: PcenGram,
    pub grid: SegmentGrid,
    pub student: EmbeddingMatrix,
    pub weights: ClassifierWeights,
    pub teacher_probs: ProbMatrix,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Fixture {
    pub fn new(profile: &SynthProfile, seed: u64) -> Self {
        let task = generate_task(profile, seed).expect("valid profile");
        let gram = mel_pcen(&task.waveform, &FrontendConfig::default()).expect("frontend");
        let plan = plan_segments(&task.annotations[..5], gram.frame_shift_ms).expect("plan");
        let grid = make_grid(gram.n_frames(), &plan);
        let labels = label_support_segments(&grid, &task.annotations);
        let of = |want: SegmentLabel| -> Vec<usize> {
            labels
                .iter()
                .filter(|l| l.label == want)
                .map(|l| l.index)
                .collect()
        };
        let (pos, neg) = (of(SegmentLabel::Positive), of(SegmentLabel::Negative));

        let prototypes = |spec: &EmbedderSpec| {
            let e = l2_normalize(&embed(spec, &gram, &grid).expect("embed"));
            let w = build_prototypes(&e.select(&pos), &e.select(&neg), Provenance::W1)
                .expect("prototypes");
            (e, w)
        };
        let (student, weights) = prototypes(&EmbedderSpec::student_default());
        let (teacher, teacher_w) = prototypes(&EmbedderSpec::teacher_default());
        let teacher_probs = predict_probs(&teacher_w, &teacher).expect("teacher probs");
        Self {
            task,
            gram,
            grid,
            student,
            weights,
            teacher_probs,
            n_pos: pos.len(),
            n_neg: neg.len(),
        }
    }
}
