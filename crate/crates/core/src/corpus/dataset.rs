use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{generate_grammar, GrammarConfig, TaskGrammar};
use super::video::{sample_video, synthesize_observations, Embeddings, ObservationConfig, PlanVideo, FRAMES};
use crate::error::{Error, Result};

/// One planning problem cut from a video.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanInstance {
    pub task: usize,
    pub video: usize,
    /// Index of the first window action inside the source video.
    pub offset: usize,
    pub actions: Vec<usize>,
    /// `FRAMES x feature_dim`, frame-major.
    pub v_start: Vec<f32>,
    pub v_goal: Vec<f32>,
}

impl PlanInstance {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.v_start.len() / FRAMES
    }
}

/// Sliding windows of `horizon` consecutive actions. Instance `k` covers
/// actions `[k, k + horizon)`; its start observation is the block before the
/// first window action and its goal observation the block after the last.
pub fn window_instances(video: &PlanVideo, horizon: usize) -> Result<Vec<PlanInstance>> {
    if horizon < 2 {
        return Err(Error::config("horizon must be at least 2"));
    }
    if video.observations.len() != video.len() + 1 {
        return Err(Error::config("video observations not synthesised"));
    }
    if horizon > video.len() {
        return Ok(Vec::new());
    }
    Ok((0..=video.len() - horizon)
        .map(|k| PlanInstance {
            task: video.task,
            video: video.id,
            offset: k,
            actions: video.actions[k..k + horizon].to_vec(),
            v_start: video.observations[k].clone(),
            v_goal: video.observations[k + horizon].clone(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PlanInstance>,
    pub test: Vec<PlanInstance>,
    pub seed: u64,
    pub ratio: f64,
}

impl DatasetSplit {
    pub fn horizon(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(PlanInstance::horizon)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.train.first().or(self.test.first()).map(PlanInstance::feature_dim)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles instances with `seed` and cuts at `round(ratio * n)`; the split is
/// over samples, so windows of one video may land on both sides.
pub fn split_dataset(instances: Vec<PlanInstance>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if instances.is_empty() {
        return Err(Error::Empty("no instances to split".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = instances;
    instances.shuffle(&mut rng);
    let n_train = (ratio * instances.len() as f64).round() as usize;
    let test = instances.split_off(n_train);
    Ok(DatasetSplit {
        train: instances,
        test,
        seed,
        ratio,
    })
}

/// Everything needed to regenerate a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub grammar: GrammarConfig,
    pub n_videos: usize,
    pub min_video_len: usize,
    pub max_video_len: usize,
    pub signal_dim: usize,
    pub observation: ObservationConfig,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig::default(),
            n_videos: 2000,
            min_video_len: 8,
            max_video_len: 12,
            signal_dim: 48,
            observation: ObservationConfig {
                noise_sigma: 1.0,
                nuisance_dim: 16,
                nuisance_scale: 1.0,
                ramp_gain: 1.0,
            },
            split_ratio: 0.7,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn feature_dim(&self) -> usize {
        self.signal_dim + self.observation.nuisance_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.n_videos == 0 || self.signal_dim == 0 {
            return Err(Error::config("n_videos and signal_dim must be positive"));
        }
        if self.min_video_len == 0 || self.min_video_len > self.max_video_len {
            return Err(Error::config("bad video length range"));
        }
        if self.max_video_len > self.grammar.actions_per_task {
            return Err(Error::config(format!(
                "max_video_len {} exceeds actions_per_task {}",
                self.max_video_len, self.grammar.actions_per_task
            )));
        }
        Ok(())
    }
}

/// Grammars, embeddings and videos of one synthetic corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub grammars: Vec<TaskGrammar>,
    pub embeddings: Embeddings,
    pub videos: Vec<PlanVideo>,
}

impl Corpus {
    /// Every video draws from its own generator keyed by (seed, video id), so
    /// the result does not depend on generation order.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let grammars = generate_grammar(&config.grammar, config.seed)?;
        let embeddings = Embeddings::generate(
            config.grammar.n_actions,
            config.grammar.n_tasks,
            config.signal_dim,
            config.seed,
        );
        let videos = (0..config.n_videos)
            .map(|id| Self::video(config, &grammars, &embeddings, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            grammars,
            embeddings,
            videos,
        })
    }

    fn video(config: &CorpusConfig, grammars: &[TaskGrammar], embeddings: &Embeddings, id: usize) -> Result<PlanVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id as u64);
        let grammar = &grammars[rng.gen_range(0..grammars.len())];
        let len = rng.gen_range(config.min_video_len..=config.max_video_len);
        let mut video = sample_video(grammar, embeddings, id, len, &mut rng)?;
        synthesize_observations(&mut video, embeddings, &config.observation, &mut rng)?;
        Ok(video)
    }

    pub fn instances(&self, horizon: usize) -> Result<Vec<PlanInstance>> {
        let mut out = Vec::new();
        for v in &self.videos {
            out.extend(window_instances(v, horizon)?);
        }
        Ok(out)
    }

    pub fn split(&self, horizon: usize) -> Result<DatasetSplit> {
        split_dataset(self.instances(horizon)?, self.config.split_ratio, self.config.seed)
    }
}
