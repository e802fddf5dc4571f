use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seed;

/// Knobs for the item catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub num_items: usize,
    /// Number of latent characteristics.
    pub num_chars: usize,
    /// Width of the observable item feature vector.
    pub feature_dim: usize,
    pub num_categories: usize,
    /// Each category prefers this many characteristics.
    pub core_chars_per_category: usize,
    /// Probability that one characteristic draw comes from the category's
    /// preferred set rather than uniformly from all characteristics.
    pub category_affinity: f64,
    /// Inclusive range for the number of characteristic draws per item
    /// (draws are with replacement, then deduplicated).
    pub chars_per_item: [usize; 2],
    pub noise_sigma: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            num_items: 2000,
            num_chars: 32,
            feature_dim: 64,
            num_categories: 8,
            core_chars_per_category: 6,
            category_affinity: 0.8,
            chars_per_item: [1, 3],
            noise_sigma: 0.05,
        }
    }
}

impl CatalogConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("catalog: {m}")));
        if self.num_items == 0 {
            return bad("num_items must be >= 1");
        }
        if self.num_chars < 2 {
            return bad("num_chars must be >= 2");
        }
        if self.feature_dim == 0 || self.num_categories == 0 {
            return bad("feature_dim and num_categories must be >= 1");
        }
        if self.core_chars_per_category == 0 || self.core_chars_per_category > self.num_chars {
            return bad("core_chars_per_category must be in [1, num_chars]");
        }
        let [lo, hi] = self.chars_per_item;
        if lo == 0 || lo > hi {
            return bad("chars_per_item must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.category_affinity) {
            return bad("category_affinity must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

/// Hidden latent structure behind item features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicSpace {
    pub num_chars: usize,
    pub feature_dim: usize,
    /// `num_chars` unit-norm rows of width `feature_dim`.
    pub projection: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Preferred characteristics per category.
    pub category_cores: Vec<Vec<usize>>,
    pub category_affinity: f64,
}

impl CharacteristicSpace {
    /// Per-draw probability of each characteristic for items of `category`.
    pub fn char_distribution(&self, category: usize) -> Vec<f64> {
        let core = &self.category_cores[category];
        let base = (1.0 - self.category_affinity) / self.num_chars as f64;
        let mut w = vec![base; self.num_chars];
        for &c in core {
            w[c] += self.category_affinity / core.len() as f64;
        }
        w
    }

    pub fn sample_char<R: Rng>(&self, category: usize, rng: &mut R) -> usize {
        if rng.gen::<f64>() < self.category_affinity {
            let core = &self.category_cores[category];
            core[rng.gen_range(0..core.len())]
        } else {
            rng.gen_range(0..self.num_chars)
        }
    }

    /// Noise-free feature vector of a characteristic set.
    pub fn mean_projection(&self, chars: &[usize]) -> Vec<f64> {
        let mut f = vec![0.0; self.feature_dim];
        for &c in chars {
            for (x, p) in f.iter_mut().zip(&self.projection[c]) {
                *x += p;
            }
        }
        let n = chars.len().max(1) as f64;
        f.iter_mut().for_each(|x| *x /= n);
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub category_id: usize,
    /// Ground-truth characteristics, sorted. Never fed to models.
    pub char_set: Vec<usize>,
    pub features: Vec<f64>,
}

impl Item {
    pub fn from_chars<R: Rng>(
        space: &CharacteristicSpace,
        item_id: usize,
        category_id: usize,
        mut char_set: Vec<usize>,
        rng: &mut R,
    ) -> Self {
        char_set.sort_unstable();
        char_set.dedup();
        let mut features = space.mean_projection(&char_set);
        if space.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, space.noise_sigma).expect("sigma validated");
            for x in features.iter_mut() {
                *x += noise.sample(rng);
            }
        }
        Self {
            item_id,
            category_id,
            char_set,
            features,
        }
    }
}

/// Builds the latent space and `num_items` items. Pure in `(config, seed)`.
pub fn generate_catalog(
    config: &CatalogConfig,
    seed: u64,
) -> Result<(CharacteristicSpace, Vec<Item>)> {
    config.validate()?;
    let mut rng = seed::stream(seed, "catalog.space", 0);
    let projection = (0..config.num_chars)
        .map(|_| {
            let mut row: Vec<f64> = (0..config.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
            row
        })
        .collect();
    let category_cores = (0..config.num_categories)
        .map(|_| {
            let mut core = sample(&mut rng, config.num_chars, config.core_chars_per_category)
                .into_vec();
            core.sort_unstable();
            core
        })
        .collect();
    let space = CharacteristicSpace {
        num_chars: config.num_chars,
        feature_dim: config.feature_dim,
        projection,
        noise_sigma: config.noise_sigma,
        category_cores,
        category_affinity: config.category_affinity,
    };
    let [lo, hi] = config.chars_per_item;
    let items = (0..config.num_items)
        .map(|id| {
            let mut rng = seed::stream(seed, "catalog.item", id as u64);
            let category = rng.gen_range(0..config.num_categories);
            let draws = rng.gen_range(lo..=hi);
            let chars = (0..draws).map(|_| space.sample_char(category, &mut rng)).collect();
            Item::from_chars(&space, id, category, chars, &mut rng)
        })
        .collect();
    Ok((space, items))
}
