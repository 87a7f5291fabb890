//! Shared fixtures for the criterion benchmarks under `benches/`.

use convcap_core::experiment::featurize;
use convcap_core::image::{FeatureSet, ImageFeatures};
use convcap_core::metrics::EvalInstance;
use convcap_core::model::{DecoderKind, Model, ModelConfig};
use convcap_core::synth::{generate, SynthCorpus, SynthSpec};
use convcap_core::text::{select_training_captions, Split, TrainingPair, Vocabulary};

pub struct Fixture {
    pub corpus: SynthCorpus,
    pub vocab: Vocabulary,
    pub features: FeatureSet,
    pub pairs: Vec<TrainingPair>,
}

impl Fixture {
    pub fn new(count: usize) -> Self {
        let corpus = generate(&SynthSpec {
            count,
            ..SynthSpec::default()
        })
        .expect("valid spec");
        let vocab = Vocabulary::build(&corpus.dataset, 1).expect("train split present");
        let features = featurize(&corpus.images, 4, 64, 0).expect("images encode");
        let mut rng = convcap_core::seed::stream(0, "bench", &[]);
        let pairs = select_training_captions(&corpus.dataset, &vocab, Split::Train, 15, &mut rng).expect("pairs");
        Fixture {
            corpus,
            vocab,
            features,
            pairs,
        }
    }

    pub fn model(&self, decoder: DecoderKind, layers: usize, width: usize) -> Model<f32> {
        let cfg = ModelConfig {
            decoder,
            num_layers: layers,
            emb_dim: width,
            hidden: width,
            vocab_size: self.vocab.len(),
            ..ModelConfig::default()
        };
        Model::init(&cfg).expect("valid config")
    }

    pub fn first_features(&self) -> &ImageFeatures {
        self.features.iter().next().expect("nonempty").1
    }

    /// Every image's first caption scored against its remaining ones.
    pub fn eval_instances(&self) -> Vec<EvalInstance> {
        self.corpus
            .dataset
            .records()
            .iter()
            .map(|r| EvalInstance {
                image_id: r.id.clone(),
                candidate: r.captions[0].clone(),
                references: r.captions[1..].to_vec(),
            })
            .collect()
    }
}
