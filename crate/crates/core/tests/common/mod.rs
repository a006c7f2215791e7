#![allow(dead_code)]

use desta_core::caption::{
    default_caption_prompts, generate_dataset, synthesize_metadata, CaptionRecord, CaptionResources, MetadataRecord,
    OfflineParaphraser,
};
use desta_core::config::ProjectConfig;
use desta_core::model::{DestaModel, ModelConfig};
use desta_core::tokenizer::Tokenizer;
use desta_core::trainer::{caption_items, FeatureSource, TrainItem};

pub struct Toy {
    pub cfg: ProjectConfig,
    pub metadata: Vec<MetadataRecord>,
    pub captions: Vec<CaptionRecord>,
}

impl Toy {
    pub fn new(cfg: ProjectConfig, audios: usize, per_audio: usize) -> Self {
        let metadata = synthesize_metadata(audios, cfg.seed, "toy");
        let res = CaptionResources::default();
        let gen = OfflineParaphraser::new(res.lexicon.clone());
        let captions = generate_dataset(&metadata, &res, per_audio, &gen, cfg.seed).records;
        Self {
            cfg,
            metadata,
            captions,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.cfg.model_config(None)
    }

    pub fn model(&self) -> DestaModel {
        DestaModel::new(self.model_config(), self.cfg.seed).unwrap()
    }

    pub fn features(&self) -> FeatureSource {
        FeatureSource::Synthetic {
            base_frames: self.cfg.encoder.frames,
            seed: self.cfg.seed,
        }
    }

    pub fn items(&self, model: &DestaModel) -> Vec<TrainItem> {
        caption_items(
            model,
            &Tokenizer::default(),
            &self.captions,
            &self.metadata,
            &default_caption_prompts(),
            &self.features(),
            self.cfg.seed,
        )
        .unwrap()
    }
}
