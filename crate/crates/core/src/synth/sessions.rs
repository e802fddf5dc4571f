use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{CharacteristicSpace, Item};
use crate::error::{CoreError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub num_users: usize,
    /// Inclusive range for the size of a user's interest set.
    pub interest_chars: [usize; 2],
    /// Items shown on a raw page before down-sampling and trimming.
    pub page_size: usize,
    pub l_pv: usize,
    pub l_click: usize,
    /// Shortest click history a session may have.
    pub min_history: usize,
    /// Share of page items drawn from items matching the user's interest.
    pub on_interest_rate: f64,
    pub click_slope: f64,
    pub click_bias: f64,
    /// Attempts per session before the label model is declared degenerate.
    pub max_retries: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            interest_chars: [2, 3],
            page_size: 10,
            l_pv: 5,
            l_click: 5,
            min_history: 2,
            on_interest_rate: 0.4,
            click_slope: 4.0,
            click_bias: -6.0,
            max_retries: 1000,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("sessions: {m}")));
        if self.num_users == 0 || self.page_size == 0 || self.l_pv == 0 || self.l_click == 0 {
            return bad("num_users, page_size, l_pv and l_click must be >= 1");
        }
        let [lo, hi] = self.interest_chars;
        if lo == 0 || lo > hi {
            return bad("interest_chars must satisfy 1 <= min <= max");
        }
        if self.min_history == 0 || self.min_history > self.l_click {
            return bad("min_history must lie in [1, l_click]");
        }
        if !(0.0..=1.0).contains(&self.on_interest_rate) {
            return bad("on_interest_rate must lie in [0, 1]");
        }
        if !self.click_slope.is_finite() || self.click_bias.is_nan() {
            return bad("click_slope must be finite and click_bias not NaN");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be >= 1");
        }
        Ok(())
    }
}

/// One page view: the user's click history and the items shown, each with a
/// click label. Lists may carry padded slots, flagged `false` in the masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: usize,
    pub user_id: usize,
    /// Simulated time; test sessions always come after train sessions.
    pub timestamp: u64,
    /// Most recent click first.
    pub click_history: Vec<usize>,
    pub click_mask: Vec<bool>,
    pub pv_items: Vec<usize>,
    pub pv_mask: Vec<bool>,
    pub labels: Vec<u8>,
}

impl Session {
    pub fn valid_history(&self) -> impl Iterator<Item = usize> + '_ {
        self.click_history
            .iter()
            .zip(&self.click_mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| i)
    }

    /// `(item, label)` for every unmasked page slot.
    pub fn valid_pv(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.pv_items
            .iter()
            .zip(&self.labels)
            .zip(&self.pv_mask)
            .filter(|(_, &m)| m)
            .map(|((&i, &y), _)| (i, y))
    }

    /// Keeps sessions that have at least one click-history item and at least
    /// one positive page item.
    pub fn passes_filter(&self) -> bool {
        self.click_mask.iter().any(|&m| m) && self.valid_pv().any(|(_, y)| y == 1)
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.click_history.len() == self.click_mask.len()
            && self.pv_items.len() == self.pv_mask.len()
            && self.pv_items.len() == self.labels.len()
            && self.labels.iter().all(|&y| y <= 1);
        if !ok {
            return Err(CoreError::Data(format!(
                "session {} has inconsistent list lengths or labels",
                self.session_id
            )));
        }
        Ok(())
    }
}

/// Fraction of an item's characteristics that also appear in the history.
pub fn overlap_fraction(item_chars: &[usize], history_chars: &BTreeSet<usize>) -> f64 {
    if item_chars.is_empty() {
        return 0.0;
    }
    let hits = item_chars.iter().filter(|c| history_chars.contains(c)).count();
    hits as f64 / item_chars.len() as f64
}

pub fn click_probability(config: &SessionConfig, overlap: f64) -> f64 {
    diffcore::sigmoid(config.click_slope * overlap + config.click_bias)
}

/// Union of ground-truth characteristics over a session's valid history.
pub fn history_chars(session: &Session, catalog: &[Item]) -> BTreeSet<usize> {
    session
        .valid_history()
        .flat_map(|i| catalog[i].char_set.iter().copied())
        .collect()
}

#[derive(Clone, Debug)]
struct UserProfile {
    /// Items sharing at least one characteristic with `interest`.
    pool: Vec<usize>,
}

fn build_users(
    space: &CharacteristicSpace,
    catalog: &[Item],
    config: &SessionConfig,
    seed: u64,
) -> Vec<UserProfile> {
    let num_categories = space.category_cores.len();
    (0..config.num_users)
        .map(|u| {
            let mut rng = seed::stream(seed, "sessions.user", u as u64);
            let category = rng.gen_range(0..num_categories);
            let target = rng.gen_range(config.interest_chars[0]..=config.interest_chars[1]);
            let mut interest = BTreeSet::new();
            // Bounded so tiny spaces cannot loop forever.
            for _ in 0..target * 64 {
                if interest.len() >= target.min(space.num_chars) {
                    break;
                }
                interest.insert(space.sample_char(category, &mut rng));
            }
            let pool: Vec<usize> = catalog
                .iter()
                .filter(|it| it.char_set.iter().any(|c| interest.contains(c)))
                .map(|it| it.item_id)
                .collect();
            UserProfile { pool }
        })
        .collect()
}

fn sample_distinct<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    pool.choose_multiple(rng, n.min(pool.len())).copied().collect()
}

/// Generates sessions with ids `first_id..first_id + count`.
///
/// Each session picks a user; its click history comes from items matching the
/// user's interest; the page mixes on-interest and uniformly drawn items; each
/// page item is clicked with probability `sigmoid(a·overlap + b)` where
/// `overlap` is the share of the item's characteristics present in the
/// history. Sessions failing the history/positive filter are redrawn.
pub fn generate_sessions(
    space: &CharacteristicSpace,
    catalog: &[Item],
    config: &SessionConfig,
    seed: u64,
    first_id: usize,
    count: usize,
) -> Result<Vec<Session>> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(CoreError::Config("sessions: catalog is empty".into()));
    }
    let users = build_users(space, catalog, config, seed);
    let all_items: Vec<usize> = (0..catalog.len()).collect();
    (first_id..first_id + count)
        .map(|sid| {
            let mut rng = seed::stream(seed, "sessions.page", sid as u64);
            for _ in 0..config.max_retries {
                let user_id = rng.gen_range(0..users.len());
                let user = &users[user_id];
                let pool = if user.pool.is_empty() {
                    &all_items
                } else {
                    &user.pool
                };
                let h_len = rng.gen_range(config.min_history..=config.l_click);
                let mut history = sample_distinct(pool, h_len, &mut rng);
                let n_hist = history.len();
                let mut click_mask = vec![true; n_hist];
                history.resize(config.l_click, 0);
                click_mask.resize(config.l_click, false);

                let hchars: BTreeSet<usize> = history[..n_hist]
                    .iter()
                    .flat_map(|&i| catalog[i].char_set.iter().copied())
                    .collect();
                let mut page = Vec::with_capacity(config.page_size);
                let mut attempts = 0;
                while page.len() < config.page_size && attempts < config.page_size * 20 {
                    attempts += 1;
                    let src = if rng.gen::<f64>() < config.on_interest_rate {
                        pool
                    } else {
                        &all_items
                    };
                    let it = src[rng.gen_range(0..src.len())];
                    if !page.contains(&it) {
                        page.push(it);
                    }
                }
                let labels: Vec<u8> = page
                    .iter()
                    .map(|&it| {
                        let p = click_probability(
                            config,
                            overlap_fraction(&catalog[it].char_set, &hchars),
                        );
                        u8::from(rng.gen::<f64>() < p)
                    })
                    .collect();
                let session = Session {
                    session_id: sid,
                    user_id,
                    timestamp: sid as u64,
                    click_history: history,
                    click_mask,
                    pv_mask: vec![true; page.len()],
                    pv_items: page,
                    labels,
                };
                if session.passes_filter() {
                    return Ok(session);
                }
            }
            Err(CoreError::Config(format!(
                "sessions: no page with a positive label after {} retries (session {}); \
                 check click_slope/click_bias",
                config.max_retries, sid
            )))
        })
        .collect()
}

/// Keeps each negative page item with probability `keep_rate` (positives are
/// always kept), compacts the page, then drops sessions failing the filter.
pub fn downsample_negatives(
    sessions: &[Session],
    keep_rate: f64,
    seed: u64,
) -> Result<Vec<Session>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(CoreError::Config(format!(
            "keep_rate must lie in (0, 1], got {keep_rate}"
        )));
    }
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut rng = seed::stream(seed, "downsample", s.session_id as u64);
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for (it, y) in s.valid_pv() {
            // Always draw so the stream position does not depend on labels.
            let keep = rng.gen::<f64>() < keep_rate;
            if y == 1 || keep {
                items.push(it);
                labels.push(y);
            }
        }
        let kept = Session {
            pv_mask: vec![true; items.len()],
            pv_items: items,
            labels,
            ..s.clone()
        };
        if kept.passes_filter() {
            out.push(kept);
        }
    }
    Ok(out)
}

/// Moves positives to the front (stable within each class), truncates to
/// `l_pv` and pads with masked slots up to exactly `l_pv`.
pub fn page_sort_trim(session: &Session, l_pv: usize) -> Session {
    let valid: Vec<(usize, u8)> = session.valid_pv().collect();
    let ordered: Vec<(usize, u8)> = valid
        .iter()
        .filter(|(_, y)| *y == 1)
        .chain(valid.iter().filter(|(_, y)| *y == 0))
        .copied()
        .take(l_pv)
        .collect();
    let n = ordered.len();
    let mut pv_items: Vec<usize> = ordered.iter().map(|p| p.0).collect();
    let mut labels: Vec<u8> = ordered.iter().map(|p| p.1).collect();
    let mut pv_mask = vec![true; n];
    pv_items.resize(l_pv, 0);
    labels.resize(l_pv, 0);
    pv_mask.resize(l_pv, false);
    Session {
        pv_items,
        pv_mask,
        labels,
        ..session.clone()
    }
}
