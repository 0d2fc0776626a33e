//! Balanced corpus generation with a deterministic stratified split.

use serde::{Deserialize, Serialize};
use steerlab_nn::Rng;

use crate::error::Result;
use crate::synth::{SceneClass, SceneSpec, SEEN_STYLES_PER_GROUP, STYLE_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One manifest row; the corpus manifest is a JSON list of these.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub has_lesion: bool,
    pub has_dye: bool,
    pub background_style: u32,
    pub split: Split,
}

impl SceneRecord {
    pub fn spec(&self, image_size: usize) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            has_lesion: self.has_lesion,
            has_dye: self.has_dye,
            background_style: self.background_style,
            image_size,
        }
    }

    pub fn class(&self) -> SceneClass {
        self.spec(32).class()
    }
}

/// Per-class split counts: 70/15/15 with largest-remainder rounding, so the
/// split totals hit the rounded global targets and every class stays within
/// one scene of its exact proportion.
fn split_counts(n_per_class: usize) -> [[usize; 3]; 4] {
    let total = 4 * n_per_class;
    let target = |frac: f64| (frac * total as f64).round() as usize;
    let totals = [target(0.70), target(0.15), 0];
    let totals = [totals[0], totals[1], total - totals[0] - totals[1]];

    let fracs = [0.70f64, 0.15, 0.15];
    let floors: [usize; 3] = [
        (fracs[0] * n_per_class as f64).floor() as usize,
        (fracs[1] * n_per_class as f64).floor() as usize,
        (fracs[2] * n_per_class as f64).floor() as usize,
    ];
    let mut counts = [[floors[0], floors[1], floors[2]]; 4];
    let mut deficits = [0usize; 3];
    for s in 0..3 {
        deficits[s] = totals[s] - 4 * floors[s];
    }
    let mut leftovers = [n_per_class - (floors[0] + floors[1] + floors[2]); 4];
    let mut used = [[false; 3]; 4];

    // distribute remainder units in rounds so no class drifts more than one
    // scene from its exact proportion; ties resolve in class then
    // train/val/test order
    while deficits.iter().any(|&d| d > 0) {
        for c in 0..4 {
            if leftovers[c] == 0 {
                continue;
            }
            let pick = |allow_reuse: bool| -> Option<usize> {
                let mut best: Option<usize> = None;
                for s in 0..3 {
                    if deficits[s] == 0 || (used[c][s] && !allow_reuse) {
                        continue;
                    }
                    let rem = fracs[s] * n_per_class as f64 - floors[s] as f64;
                    let better = match best {
                        None => true,
                        Some(b) => rem > fracs[b] * n_per_class as f64 - floors[b] as f64 + 1e-12,
                    };
                    if better {
                        best = Some(s);
                    }
                }
                best
            };
            if let Some(s) = pick(false).or_else(|| pick(true)) {
                counts[c][s] += 1;
                deficits[s] -= 1;
                leftovers[c] -= 1;
                used[c][s] = true;
            }
        }
    }
    counts
}

/// Generate the balanced corpus manifest: `n_per_class` scenes for each of
/// the four concept combinations, deterministically split 70/15/15.
///
/// Test scenes draw from background styles never used by train/val, so the
/// test split is out-of-distribution in background.
pub fn make_dataset(n_per_class: usize, split_seed: u64) -> Result<Vec<SceneRecord>> {
    assert!(n_per_class >= 1, "n_per_class must be at least 1");
    let counts = split_counts(n_per_class);
    let group_size = STYLE_COUNT / 2;

    let mut records = Vec::with_capacity(4 * n_per_class);
    let root = Rng::new(split_seed, 0);
    for class in SceneClass::ALL {
        let c = class.index();
        let mut rng = root.derive("class", c as u64);
        let group_base = if class == SceneClass::AltBackground { group_size } else { 0 };
        for i in 0..n_per_class {
            let split = if i < counts[c][0] {
                Split::Train
            } else if i < counts[c][0] + counts[c][1] {
                Split::Val
            } else {
                Split::Test
            };
            let style = match split {
                Split::Test => group_base + SEEN_STYLES_PER_GROUP + rng.below((group_size - SEEN_STYLES_PER_GROUP) as u64) as u32,
                _ => group_base + rng.below(SEEN_STYLES_PER_GROUP as u64) as u32,
            };
            records.push(SceneRecord {
                seed: rng.next_u64(),
                has_lesion: class.has_lesion(),
                has_dye: class == SceneClass::DyedLesion,
                background_style: style,
                split,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_scenes_split_28_6_6() {
        let records = make_dataset(10, 7).unwrap();
        assert_eq!(records.len(), 40);
        let count = |s: Split| records.iter().filter(|r| r.split == s).count();
        assert_eq!(count(Split::Train), 28);
        assert_eq!(count(Split::Val), 6);
        assert_eq!(count(Split::Test), 6);
    }

    #[test]
    fn same_seed_gives_identical_manifest() {
        let a = make_dataset(25, 99).unwrap();
        let b = make_dataset(25, 99).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        let c = make_dataset(25, 100).unwrap();
        assert_ne!(ja, serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn class_balance_within_one_of_exact_proportion() {
        for n in [10usize, 33, 100, 501] {
            let records = make_dataset(n, 3).unwrap();
            for split in Split::ALL {
                let frac = match split {
                    Split::Train => 0.70,
                    _ => 0.15,
                };
                for class in SceneClass::ALL {
                    let got = records
                        .iter()
                        .filter(|r| r.split == split && r.class() == class)
                        .count() as f64;
                    let exact = frac * n as f64;
                    assert!(
                        (got - exact).abs() <= 1.0 + 1e-9,
                        "n={n} {split:?} {class:?}: {got} vs exact {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn classes_are_balanced_overall() {
        let records = make_dataset(12, 5).unwrap();
        for class in SceneClass::ALL {
            assert_eq!(records.iter().filter(|r| r.class() == class).count(), 12);
        }
    }

    #[test]
    fn test_split_uses_unseen_background_styles() {
        let records = make_dataset(40, 11).unwrap();
        let group = STYLE_COUNT / 2;
        for r in &records {
            let within = r.background_style % group;
            match r.split {
                Split::Test => assert!(within >= SEEN_STYLES_PER_GROUP),
                _ => assert!(within < SEEN_STYLES_PER_GROUP),
            }
        }
    }

    #[test]
    fn specs_validate() {
        for r in make_dataset(20, 1).unwrap() {
            r.spec(32).validate().unwrap();
        }
    }
}
