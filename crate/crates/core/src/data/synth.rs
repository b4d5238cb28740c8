//! Latent-factor simulator for request logs.
//!
//! Items cluster around category centroids; users prefer a couple of
//! categories. A click is drawn from `σ(base + scale·u·v + pop_bias + noise)`,
//! and cart/purchase are drawn only after a click through their own latent
//! projections, so the three objectives are correlated but distinct.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActionType, Candidate, ItemEvent, Labels, RequestSample};
use crate::error::{Error, Result};

/// 2023-11-14T22:13:20Z; the first request of every simulated log.
pub const EPOCH_START: i64 = 1_700_000_000;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    pub n_requests: usize,
    pub candidates_per_request: usize,
    pub history_max: usize,
    /// Upper bound on clicks a user has before the log starts.
    pub warmup_clicks_max: usize,
    /// Vocabulary size of each categorical profile field.
    pub profile_vocab: Vec<usize>,
    pub n_scenes: usize,
    pub n_days: usize,
    pub rng_seed: u64,
    pub click_rate: f64,
    /// P(cart | click) at the neutral point.
    pub cart_rate: f64,
    /// P(purchase | click) at the neutral point.
    pub purchase_rate: f64,
    /// Multiplier on `u·v` inside the click logit.
    pub signal_scale: f64,
    /// Multiplier on centred log-popularity inside the click logit.
    pub popularity_scale: f64,
    pub noise_std: f64,
    /// Std of an item's offset from its category centroid, relative to the centroid norm.
    pub item_spread: f64,
    /// Fraction of candidates drawn from the user's preferred categories.
    pub relevance_mix: f64,
    /// Zipf exponent of item popularity.
    pub zipf_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 50_000,
            n_items: 5_000,
            n_categories: 50,
            latent_dim: 16,
            n_requests: 210_000,
            candidates_per_request: 10,
            history_max: 256,
            warmup_clicks_max: 48,
            profile_vocab: vec![8, 16],
            n_scenes: 4,
            n_days: 20,
            rng_seed: 42,
            click_rate: 0.12,
            cart_rate: 0.3,
            purchase_rate: 0.2,
            signal_scale: 3.0,
            popularity_scale: 0.5,
            noise_std: 0.5,
            item_spread: 0.6,
            relevance_mix: 0.5,
            zipf_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("latent_dim", self.latent_dim),
            ("n_requests", self.n_requests),
            ("candidates_per_request", self.candidates_per_request),
            ("history_max", self.history_max),
            ("n_scenes", self.n_scenes),
            ("n_days", self.n_days),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_categories > self.n_items {
            return Err(Error::Config("n_categories must not exceed n_items".into()));
        }
        if self.n_scenes > u8::MAX as usize + 1 {
            return Err(Error::Config("n_scenes must fit in u8".into()));
        }
        if self.profile_vocab.iter().any(|&v| v == 0) {
            return Err(Error::Config("profile vocab sizes must be >= 1".into()));
        }
        for (name, r) in [
            ("click_rate", self.click_rate),
            ("cart_rate", self.cart_rate),
            ("purchase_rate", self.purchase_rate),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.relevance_mix) {
            return Err(Error::Config("relevance_mix must be in [0, 1]".into()));
        }
        for (name, v) in [
            ("signal_scale", self.signal_scale),
            ("popularity_scale", self.popularity_scale),
            ("noise_std", self.noise_std),
            ("item_spread", self.item_spread),
            ("zipf_exponent", self.zipf_exponent),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Timestamp of the first second of the final simulated day.
    pub fn last_day_start(&self) -> i64 {
        EPOCH_START + (self.n_days as i64 - 1) * DAY
    }
}

/// Ground-truth latent state of a simulated catalogue and user base.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub latent_dim: usize,
    /// `n_users × latent_dim`, row-major.
    pub user_vecs: Vec<f64>,
    /// `n_items × latent_dim`, row-major.
    pub item_vecs: Vec<f64>,
    /// Positive, sums to 1, long-tailed.
    pub popularity: Vec<f64>,
    pub item_category: Vec<u32>,
    pub user_profile: Vec<Vec<u32>>,
    /// Two preferred categories per user.
    pub user_favorites: Vec<[u32; 2]>,
    pub user_scene: Vec<u8>,
    /// `latent_dim × latent_dim` projections for the post-click objectives.
    pub cart_proj: Vec<f64>,
    pub purchase_proj: Vec<f64>,
    pub click_offset: f64,
    pub cart_offset: f64,
    pub purchase_offset: f64,
    category_items: Vec<Vec<u32>>,
    popularity_cdf: Vec<f64>,
    log_pop_mean: f64,
    signal_scale: f64,
    popularity_scale: f64,
    noise_std: f64,
    relevance_mix: f64,
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

impl World {
    pub fn n_users(&self) -> usize {
        self.user_favorites.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_category.len()
    }

    pub fn user_vec(&self, u: usize) -> &[f64] {
        &self.user_vecs[u * self.latent_dim..(u + 1) * self.latent_dim]
    }

    pub fn item_vec(&self, i: usize) -> &[f64] {
        &self.item_vecs[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    fn pop_bias(&self, item: usize) -> f64 {
        self.popularity_scale * (self.popularity[item].ln() - self.log_pop_mean)
    }

    /// Noise-free click logit; the Bayes-optimal ranking score.
    pub fn click_logit(&self, user: usize, item: usize) -> f64 {
        let uv = crate::tensor::dot(self.user_vec(user), self.item_vec(item));
        self.click_offset + self.signal_scale * uv + self.pop_bias(item)
    }

    fn projected_affinity(&self, proj: &[f64], user: usize, item: usize) -> f64 {
        let k = self.latent_dim;
        let u = self.user_vec(user);
        let v = self.item_vec(item);
        let mut s = 0.0;
        for a in 0..k {
            let mut pv = 0.0;
            for b in 0..k {
                pv += proj[a * k + b] * v[b];
            }
            s += u[a] * pv;
        }
        s
    }

    pub fn cart_logit(&self, user: usize, item: usize) -> f64 {
        self.cart_offset + self.signal_scale * self.projected_affinity(&self.cart_proj, user, item)
    }

    pub fn purchase_logit(&self, user: usize, item: usize) -> f64 {
        self.purchase_offset
            + self.signal_scale * self.projected_affinity(&self.purchase_proj, user, item)
    }

    fn sample_popular(&self, rng: &mut impl Rng) -> u32 {
        let x: f64 = rng.gen();
        let idx = self.popularity_cdf.partition_point(|&c| c < x);
        idx.min(self.n_items() - 1) as u32
    }

    /// Candidate retrieval: a mix of the user's preferred categories and
    /// popularity-weighted exploration.
    pub fn sample_candidate(&self, user: usize, rng: &mut impl Rng) -> u32 {
        if rng.gen::<f64>() < self.relevance_mix {
            let cat = self.user_favorites[user][rng.gen_range(0..2)] as usize;
            let items = &self.category_items[cat];
            if !items.is_empty() {
                return items[rng.gen_range(0..items.len())];
            }
        }
        self.sample_popular(rng)
    }

    /// Draws the label funnel for one impression.
    pub fn draw_labels(&self, user: usize, item: usize, rng: &mut impl Rng) -> Labels {
        let noise = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std).unwrap().sample(rng)
        } else {
            0.0
        };
        let click = rng.gen::<f64>() < sigmoid(self.click_logit(user, item) + noise);
        if !click {
            return Labels::default();
        }
        let cart = rng.gen::<f64>() < sigmoid(self.cart_logit(user, item));
        let purchase = rng.gen::<f64>() < sigmoid(self.purchase_logit(user, item));
        Labels {
            click: 1,
            cart: cart as u8,
            purchase: purchase as u8,
        }
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Bisects an additive logit offset so that the mean of `σ(offset + s_i)`
/// over the given scores hits `target`.
fn calibrate_offset(scores: &[f64], target: f64) -> f64 {
    let mean_at = |o: f64| scores.iter().map(|s| sigmoid(o + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_world(cfg: &SynthConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let k = cfg.latent_dim;
    let unit = 1.0 / (k as f64).sqrt();

    let centroids = normal_vec(&mut rng, cfg.n_categories * k, unit);

    // Every category gets at least one item; the rest are assigned uniformly.
    let mut item_category: Vec<u32> = (0..cfg.n_items)
        .map(|i| {
            if i < cfg.n_categories {
                i as u32
            } else {
                rng.gen_range(0..cfg.n_categories) as u32
            }
        })
        .collect();
    item_category.shuffle(&mut rng);

    let mut item_vecs = normal_vec(&mut rng, cfg.n_items * k, unit * cfg.item_spread);
    for (i, &c) in item_category.iter().enumerate() {
        for a in 0..k {
            item_vecs[i * k + a] += centroids[c as usize * k + a];
        }
    }
    let mut category_items = vec![Vec::new(); cfg.n_categories];
    for (i, &c) in item_category.iter().enumerate() {
        category_items[c as usize].push(i as u32);
    }

    // Zipf popularity over a random permutation of items.
    let mut ranks: Vec<usize> = (0..cfg.n_items).collect();
    ranks.shuffle(&mut rng);
    let mut popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let total: f64 = popularity.iter().sum();
    popularity.iter_mut().for_each(|p| *p /= total);
    let mut acc = 0.0;
    let popularity_cdf: Vec<f64> = popularity
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    let log_pop_mean = popularity.iter().map(|p| p.ln()).sum::<f64>() / cfg.n_items as f64;

    let profile_dirs = normal_vec(&mut rng, cfg.profile_vocab.len() * k, 1.0);
    let mut user_vecs = Vec::with_capacity(cfg.n_users * k);
    let mut user_favorites = Vec::with_capacity(cfg.n_users);
    let mut user_profile = Vec::with_capacity(cfg.n_users);
    let mut user_scene = Vec::with_capacity(cfg.n_users);
    let noise = Normal::new(0.0, unit * 0.5).unwrap();
    for _ in 0..cfg.n_users {
        let a = rng.gen_range(0..cfg.n_categories);
        let b = rng.gen_range(0..cfg.n_categories);
        let w: f64 = rng.gen_range(0.5..1.0);
        let mut u = vec![0.0; k];
        for (x, slot) in u.iter_mut().enumerate() {
            *slot = w * centroids[a * k + x]
                + (1.0 - w) * centroids[b * k + x]
                + noise.sample(&mut rng);
        }
        // Profile fields are noisy functions of the latent vector, so they
        // carry (partial) preference signal.
        let profile: Vec<u32> = cfg
            .profile_vocab
            .iter()
            .enumerate()
            .map(|(f, &vocab)| {
                let proj = crate::tensor::dot(&u, &profile_dirs[f * k..(f + 1) * k]);
                let jitter: f64 = rng.gen_range(-0.5..0.5);
                let z = (proj / (unit * (k as f64).sqrt()) + jitter) * 0.5 + 0.5;
                ((z.clamp(0.0, 0.999_999)) * vocab as f64) as u32
            })
            .collect();
        user_vecs.extend_from_slice(&u);
        user_favorites.push([a as u32, b as u32]);
        user_profile.push(profile);
        user_scene.push(rng.gen_range(0..cfg.n_scenes) as u8);
    }

    let make_proj = |rng: &mut ChaCha8Rng| {
        let mut p = normal_vec(rng, k * k, 0.6 * unit);
        for a in 0..k {
            p[a * k + a] += 0.6;
        }
        p
    };
    let cart_proj = make_proj(&mut rng);
    let purchase_proj = make_proj(&mut rng);

    let mut world = World {
        latent_dim: k,
        user_vecs,
        item_vecs,
        popularity,
        item_category,
        user_profile,
        user_favorites,
        user_scene,
        cart_proj,
        purchase_proj,
        click_offset: 0.0,
        cart_offset: 0.0,
        purchase_offset: 0.0,
        category_items,
        popularity_cdf,
        log_pop_mean,
        signal_scale: cfg.signal_scale,
        popularity_scale: cfg.popularity_scale,
        noise_std: cfg.noise_std,
        relevance_mix: cfg.relevance_mix,
    };

    // Calibrate base rates on impressions drawn the same way the simulator does.
    let n_cal = 4000;
    let noise_d = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());
    let mut click_scores = Vec::with_capacity(n_cal);
    let mut cart_scores = Vec::with_capacity(n_cal);
    let mut purchase_scores = Vec::with_capacity(n_cal);
    for _ in 0..n_cal {
        let u = rng.gen_range(0..cfg.n_users);
        let i = world.sample_candidate(u, &mut rng) as usize;
        let n = noise_d.map_or(0.0, |d| d.sample(&mut rng));
        click_scores.push(world.click_logit(u, i) + n);
        cart_scores.push(world.cart_logit(u, i));
        purchase_scores.push(world.purchase_logit(u, i));
    }
    world.click_offset = calibrate_offset(&click_scores, cfg.click_rate);
    world.cart_offset = calibrate_offset(&cart_scores, cfg.cart_rate);
    world.purchase_offset = calibrate_offset(&purchase_scores, cfg.purchase_rate);
    Ok(world)
}

fn strongest_action(l: &Labels) -> ActionType {
    if l.purchase == 1 {
        ActionType::Purchase
    } else if l.cart == 1 {
        ActionType::Cart
    } else {
        ActionType::Click
    }
}

/// Lazily simulated request log in timestamp order.
pub struct RequestStream<'w> {
    world: &'w World,
    rng: ChaCha8Rng,
    times: Vec<i64>,
    users: Vec<u32>,
    next: usize,
    histories: Vec<VecDeque<ItemEvent>>,
    candidates_per_request: usize,
    history_max: usize,
    n_scenes: usize,
}

impl RequestStream<'_> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Builds the request stream. Users start with a pre-log click history
/// (possibly empty, giving cold-start requests); every simulated click is
/// appended to the user's history shortly after its request.
pub fn simulate_requests<'w>(world: &'w World, cfg: &SynthConfig) -> Result<RequestStream<'w>> {
    cfg.validate()?;
    if world.n_users() != cfg.n_users || world.n_items() != cfg.n_items {
        return Err(Error::Config("world does not match config".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_0f_1095);
    let span = cfg.n_days as i64 * DAY;
    let mut times: Vec<i64> = (0..cfg.n_requests)
        .map(|_| EPOCH_START + rng.gen_range(0..span))
        .collect();
    times.sort_unstable();
    let users: Vec<u32> = (0..cfg.n_requests)
        .map(|_| rng.gen_range(0..cfg.n_users) as u32)
        .collect();

    let history_cap = cfg.history_max.max(cfg.warmup_clicks_max);
    let mut histories = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let n_clicks = if cfg.warmup_clicks_max == 0 {
            0
        } else {
            rng.gen_range(0..=cfg.warmup_clicks_max)
        };
        let mut events = Vec::with_capacity(n_clicks);
        let mut attempts = 0;
        while events.len() < n_clicks && attempts < 50 * n_clicks {
            attempts += 1;
            let item = world.sample_candidate(u, &mut rng);
            let labels = world.draw_labels(u, item as usize, &mut rng);
            if labels.click == 1 {
                events.push((item, strongest_action(&labels)));
            }
        }
        // Pre-log events are spread over the 30 days before the log starts.
        let mut ts: Vec<i64> = (0..events.len())
            .map(|_| EPOCH_START - 1 - rng.gen_range(0..30 * DAY))
            .collect();
        ts.sort_unstable();
        let mut hist = VecDeque::with_capacity(history_cap.min(64));
        for ((item, action), t) in events.into_iter().zip(ts) {
            hist.push_back(ItemEvent {
                item_id: item,
                category: world.item_category[item as usize],
                action,
                timestamp: t,
                scene_id: world.user_scene[u],
            });
            if hist.len() > history_cap {
                hist.pop_front();
            }
        }
        histories.push(hist);
    }

    Ok(RequestStream {
        world,
        rng,
        times,
        users,
        next: 0,
        histories,
        candidates_per_request: cfg.candidates_per_request,
        history_max: cfg.history_max,
        n_scenes: cfg.n_scenes,
    })
}

impl Iterator for RequestStream<'_> {
    type Item = RequestSample;

    fn next(&mut self) -> Option<RequestSample> {
        let r = self.next;
        if r >= self.times.len() {
            return None;
        }
        self.next += 1;
        let world = self.world;
        let ts = self.times[r];
        let user = self.users[r] as usize;

        let hist = &mut self.histories[user];
        let visible: Vec<ItemEvent> = hist.iter().filter(|e| e.timestamp < ts).cloned().collect();
        let start = visible.len().saturating_sub(self.history_max);
        let history = visible[start..].to_vec();

        let mut candidates = Vec::with_capacity(self.candidates_per_request);
        for _ in 0..self.candidates_per_request {
            let item = world.sample_candidate(user, &mut self.rng);
            let labels = world.draw_labels(user, item as usize, &mut self.rng);
            candidates.push(Candidate {
                item_id: item,
                category: world.item_category[item as usize],
                side_features: Vec::new(),
                labels,
            });
        }

        // Scene usually matches the user's habitual scene.
        let scene = if self.rng.gen::<f64>() < 0.8 {
            world.user_scene[user]
        } else {
            self.rng.gen_range(0..self.n_scenes) as u8
        };
        for c in &candidates {
            if c.labels.click == 1 {
                let offset = self.rng.gen_range(1..=120);
                hist.push_back(ItemEvent {
                    item_id: c.item_id,
                    category: c.category,
                    action: strongest_action(&c.labels),
                    timestamp: ts + offset,
                    scene_id: scene,
                });
            }
        }
        // Keep events sorted; clicks from one request share an offset window.
        hist.make_contiguous()
            .sort_by_key(|e| e.timestamp);
        let cap = self.history_max + 4 * self.candidates_per_request;
        while hist.len() > cap {
            hist.pop_front();
        }

        Some(RequestSample {
            request_id: r as u64,
            user_id: user as u32,
            timestamp: ts,
            user_profile: world.user_profile[user].clone(),
            profile_features: Vec::new(),
            history,
            candidates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 300,
            n_items: 400,
            n_categories: 10,
            n_requests: 2000,
            history_max: 32,
            warmup_clicks_max: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_latent_dim_rejected() {
        let cfg = SynthConfig {
            latent_dim: 0,
            ..small()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rates_must_be_open_interval() {
        let cfg = SynthConfig {
            click_rate: 1.0,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn world_is_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let pop_sum: f64 = a.popularity.iter().sum();
        assert!((pop_sum - 1.0).abs() < 1e-12);
        assert!(a.popularity.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn popularity_is_long_tailed() {
        let w = generate_world(&small()).unwrap();
        let mut p = w.popularity.clone();
        p.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top_decile: f64 = p[..p.len() / 10].iter().sum();
        assert!(top_decile > 0.4, "top 10% of items hold {top_decile}");
    }

    #[test]
    fn stream_respects_funnel_and_time() {
        let cfg = small();
        let w = generate_world(&cfg).unwrap();
        let samples: Vec<_> = simulate_requests(&w, &cfg).unwrap().collect();
        assert_eq!(samples.len(), cfg.n_requests);
        let mut prev = i64::MIN;
        let mut cold = 0;
        for s in &samples {
            assert!(s.timestamp >= prev);
            prev = s.timestamp;
            s.validate().unwrap();
            assert!(s.history.len() <= cfg.history_max);
            assert_eq!(s.candidates.len(), cfg.candidates_per_request);
            cold += s.history.is_empty() as usize;
        }
        assert!(cold > 0, "expected some cold-start requests");
        let ctr = samples
            .iter()
            .flat_map(|s| &s.candidates)
            .map(|c| c.labels.click as f64)
            .sum::<f64>()
            / (samples.len() * cfg.candidates_per_request) as f64;
        assert!((ctr - cfg.click_rate).abs() < 0.04, "ctr {ctr}");
    }
}
