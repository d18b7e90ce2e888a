//! Synthetic two-domain dataset with planted structure: genres own
//! disjoint item blocks in both domains, and each genre's items form one
//! alternating A/B cycle. Users walk their genre's cycle with random
//! strides of 1 to 6 phases, so the next item is genuinely uncertain (an
//! irreducible floor for any next-item model), while every user of a
//! genre still ends at the same cycle phase: same-genre users share the
//! held-out next item and nearest-neighbor retrieval carries real
//! signal. A small noise rate swaps occasional events for random
//! same-domain items.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DomainId, Item, UserSequence};

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub users: usize,
    pub items_per_domain: usize,
    pub genres: usize,
    /// Probability that a non-final event is replaced by a random
    /// same-domain item.
    pub noise: f64,
    /// Fraction of users with short (cold-start) histories.
    pub cold_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 200,
            items_per_domain: 60,
            genres: 12,
            noise: 0.05,
            cold_fraction: 0.1,
            seed: 2024,
        }
    }
}

impl SynthSpec {
    pub fn items_per_genre(&self) -> usize {
        assert!(
            self.items_per_domain.is_multiple_of(self.genres),
            "genres must divide items_per_domain"
        );
        self.items_per_domain / self.genres
    }

    /// Cycle length of one genre (its A and B items interleaved).
    pub fn cycle_len(&self) -> usize {
        2 * self.items_per_genre()
    }

    /// The phase every user of this genre ends at; its item is the shared
    /// held-out target. Parity varies across genres so targets land in
    /// both domains.
    pub fn anchor(&self, genre: usize) -> usize {
        (3 * genre + 1) % self.cycle_len()
    }

    /// Global item id at one phase of a genre's cycle: even phases are
    /// domain A, odd phases domain B.
    pub fn cycle_item(&self, genre: usize, phase: usize) -> u32 {
        let per = self.items_per_genre();
        let phase = phase % self.cycle_len();
        if phase.is_multiple_of(2) {
            (genre * per + phase / 2) as u32
        } else {
            (self.items_per_domain + genre * per + (phase - 1) / 2) as u32
        }
    }

    pub fn genre_of_user(&self, user: usize) -> usize {
        user % self.genres
    }
}

/// Catalog items: unique per-item title tokens plus a shared per-genre
/// attribute that links the two domains in the attribute graph.
pub fn generate_items(spec: &SynthSpec) -> Vec<Item> {
    let per = spec.items_per_genre();
    let mut items = Vec::with_capacity(2 * spec.items_per_domain);
    for i in 0..spec.items_per_domain {
        items.push(Item {
            id: i as u32,
            domain: DomainId::A,
            title: format!("movie m{i:03}"),
            attributes: vec![format!("genre{:02}", i / per)],
        });
    }
    for j in 0..spec.items_per_domain {
        let id = spec.items_per_domain + j;
        items.push(Item {
            id: id as u32,
            domain: DomainId::B,
            title: format!("game g{id:03}"),
            attributes: vec![format!("genre{:02}", j / per)],
        });
    }
    items
}

pub fn generate_users(spec: &SynthSpec) -> Vec<UserSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cycle_len = spec.cycle_len();
    let boundary = spec.items_per_domain;
    let n_items = 2 * spec.items_per_domain;
    let mut out = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let genre = spec.genre_of_user(u);
        let cold = rng.random_bool(spec.cold_fraction);
        let len = if cold {
            rng.random_range(4..=6)
        } else {
            rng.random_range(cycle_len + 3..=cycle_len + 12)
        };
        // walk the cycle backward from the anchor with random strides so
        // the final event is exact while earlier phases vary per user
        let anchor = spec.anchor(genre);
        let mut phases = Vec::with_capacity(len);
        let mut phase = anchor;
        phases.push(phase);
        for _ in 1..len {
            phase = (phase + cycle_len - rng.random_range(1..=6)) % cycle_len;
            phases.push(phase);
        }
        phases.reverse();
        let mut events = Vec::with_capacity(len);
        for (i, &p) in phases.iter().enumerate() {
            let scheduled = spec.cycle_item(genre, p);
            let is_final = i == len - 1;
            let id = if !is_final && rng.random_bool(spec.noise) {
                if (scheduled as usize) < boundary {
                    rng.random_range(0..boundary as u32)
                } else {
                    rng.random_range(boundary as u32..n_items as u32)
                }
            } else {
                scheduled
            };
            events.push(id);
        }
        debug_assert_eq!(*events.last().unwrap(), spec.cycle_item(genre, anchor));
        out.push(UserSequence { user_id: u as u32, events });
    }
    out
}

/// Writes `catalog.jsonl` and `interactions.jsonl` into `dir`.
pub fn write_fixture(spec: &SynthSpec, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let items = generate_items(spec);
    let users = generate_users(spec);
    let mut catalog = String::new();
    for item in &items {
        catalog.push_str(&serde_json::to_string(item).expect("item serializes"));
        catalog.push('\n');
    }
    std::fs::write(dir.join("catalog.jsonl"), catalog)?;
    let mut inter = String::new();
    for u in &users {
        inter.push_str(&format!(
            "{{\"user_id\":{},\"events\":{}}}\n",
            u.user_id,
            serde_json::to_string(&u.events).expect("events serialize")
        ));
    }
    std::fs::write(dir.join("interactions.jsonl"), inter)
}
