use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binary_search_attack, lots_attack, AttackConfig, AttackError, AttackKind, AttackResult};
use crate::data::{sample_indices, Dataset};
use crate::model::Classifier;

/// Which images to attack and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub config: AttackConfig,
    /// Number of correctly classified test images to attack.
    pub images: usize,
    /// Explicit test indices; overrides `images` when present.
    #[serde(default)]
    pub image_ids: Option<Vec<usize>>,
    pub seed: u64,
    /// Target-class training images averaged by LOTS.
    #[serde(default = "default_pool")]
    pub lots_pool: usize,
}

fn default_pool() -> usize {
    50
}

impl CampaignSpec {
    pub fn new(config: AttackConfig, images: usize, seed: u64) -> Self {
        Self {
            config,
            images,
            image_ids: None,
            seed,
            lots_pool: default_pool(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignItem {
    pub image_id: usize,
    pub true_class: usize,
    pub result: AttackResult,
}

fn image_seed(seed: u64, image_id: usize) -> u64 {
    seed ^ 0xd1b5_4a32_d192_ed03u64.wrapping_mul(image_id as u64 + 1)
}

/// Uniform draw among the `classes − 1` classes other than `true_class`,
/// seeded per image so the choice is independent of scheduling.
pub fn choose_target(true_class: usize, classes: usize, seed: u64, image_id: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id));
    let r = rng.random_range(0..classes - 1);
    if r >= true_class {
        r + 1
    } else {
        r
    }
}

/// Test indices to attack: the given ids, or the first `images` correctly
/// classified rows of a seeded permutation.
fn select_images(model: &dyn Classifier, test: &Dataset, spec: &CampaignSpec) -> Result<Vec<usize>, AttackError> {
    if let Some(ids) = &spec.image_ids {
        if let Some(&bad) = ids.iter().find(|&&i| i >= test.len()) {
            return Err(AttackError::Data(format!("image id {bad} outside 0..{}", test.len())));
        }
        return Ok(ids.clone());
    }
    let predicted = model.predict_many(test.images())?;
    Ok(sample_indices(test.len(), test.len(), spec.seed)
        .into_iter()
        .filter(|&i| predicted[i] == test.label(i))
        .take(spec.images)
        .collect())
}

/// Runs one attack per selected image, in parallel, returning items ordered
/// by image id. `pool_source` supplies the LOTS target images.
pub fn run_campaign(
    model: &dyn Classifier,
    test: &Dataset,
    pool_source: &Dataset,
    spec: &CampaignSpec,
    workers: Option<usize>,
) -> Result<Vec<CampaignItem>, AttackError> {
    spec.config.validate()?;
    spec.config.kind.check_compatible(&model.decoder())?;
    if test.classes() < 2 {
        return Err(AttackError::Data("need at least two classes".into()));
    }
    let mut ids = select_images(model, test, spec)?;
    ids.sort_unstable();
    let job = |&image_id: &usize| -> Result<CampaignItem, AttackError> {
        let true_class = test.label(image_id);
        let target = choose_target(true_class, test.classes(), spec.seed, image_id);
        let x = test.image_tensor(image_id);
        let result = match spec.config.kind {
            AttackKind::Lots => {
                let members = pool_source.indices_of_class(target);
                let picked = sample_indices(members.len(), spec.lots_pool, image_seed(spec.seed, image_id) ^ 1);
                let pool: Vec<_> = picked.iter().map(|&k| pool_source.image_tensor(members[k])).collect();
                lots_attack(model, &x, target, &pool, &spec.config)?
            }
            _ => binary_search_attack(model, &x, target, &spec.config)?,
        };
        Ok(CampaignItem {
            image_id,
            true_class,
            result,
        })
    };
    let run = || ids.par_iter().map(job).collect::<Result<Vec<_>, _>>();
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| AttackError::Config(e.to_string()))?
            .install(run),
        None => run(),
    }
}
