//! Deterministic synthetic relational worlds.
//!
//! Categories are partitioned into affordance groups. Each frequent predicate
//! has a characteristic displacement and an object group. Each rare predicate
//! copies the displacement of one frequent predicate and the object group of
//! another frequent predicate's group with one member swapped, so rare
//! predicates that share a layout can only be told apart through the objects
//! they afford.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    split_predicates, BBox, Dataset, ObjectProposal, PredicateVocabulary, Relationship, SceneGraphSample, Splits,
};
use crate::error::{Error, Result};
use crate::model::FeatureProvider;
use crate::seeds::derive_seed;

const PROTOTYPE_STREAM: u64 = 0x70_72_6f_74;
const RULE_STREAM: u64 = 0x72_75_6c_65;
const FEATURE_STREAM: u64 = 0x66_65_61_74;
const PAIR_STREAM: u64 = 0x70_61_69_72;
const MIN_SIZE: f64 = 0.12;
const MAX_SIZE: f64 = 0.22;
const JITTER_TRUNCATION: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_categories: usize,
    pub n_frequent_predicates: usize,
    pub n_rare_predicates: usize,
    pub feature_dim: usize,
    pub mask_resolution: usize,
    /// (train, val, test) sample counts.
    pub samples_per_split: [usize; 3],
    pub noise_sigma: f64,
    pub seed: u64,
    /// Length of every predicate displacement, normalized units.
    pub displacement: f64,
    /// Standard deviation of the per-instance offset around the displacement.
    pub position_jitter: f64,
    /// Frequency of a rare predicate relative to a frequent one, in (0, 1].
    pub rare_weight: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_categories: 12,
            n_frequent_predicates: 6,
            n_rare_predicates: 4,
            feature_dim: 16,
            mask_resolution: 8,
            samples_per_split: [600, 100, 200],
            noise_sigma: 0.1,
            seed: 7,
            displacement: 0.3,
            position_jitter: 0.03,
            rare_weight: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_categories < 4 {
            return bad("n_categories must be at least 4");
        }
        if self.n_frequent_predicates < 1 || self.n_rare_predicates < 1 {
            return bad("need at least one frequent and one rare predicate");
        }
        if self.samples_per_split.iter().any(|&n| n < 1) {
            return bad("every split needs at least one sample");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite nonnegative number");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if self.mask_resolution < 4 {
            return bad("mask_resolution must be at least 4");
        }
        if !(self.position_jitter >= 0.0 && self.displacement >= 0.0) {
            return bad("displacement and position_jitter must be nonnegative");
        }
        if !(self.rare_weight > 0.0 && self.rare_weight <= 1.0) {
            return bad("rare_weight must lie in (0, 1]");
        }
        Ok(())
    }

    fn group_size(&self) -> usize {
        (self.n_categories / 3).clamp(2, 4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateRule {
    /// Mean offset of the object box center from the subject box center.
    pub displacement: (f64, f64),
    /// Object box size relative to the subject box.
    pub scale: (f64, f64),
    pub subject_group: Vec<usize>,
    pub object_group: Vec<usize>,
    /// For rare predicates, the frequent predicate whose displacement is reused.
    pub displacement_source: Option<usize>,
}

/// The generative structure behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    /// Affordance groups of categories.
    pub groups: Vec<Vec<usize>>,
    /// One rule per predicate; frequent predicates first.
    pub rules: Vec<PredicateRule>,
    /// Unit-norm feature prototype per category.
    pub prototypes: Vec<Vec<f64>>,
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<World> {
        config.validate()?;
        let c = config.n_categories;
        let gs = config.group_size();
        let n_groups = c / gs;
        let groups: Vec<Vec<usize>> = (0..n_groups).map(|g| (g * gs..(g + 1) * gs).collect()).collect();
        let complement = |group: &[usize]| (0..c).filter(|x| !group.contains(x)).collect::<Vec<_>>();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[RULE_STREAM]));
        let nf = config.n_frequent_predicates;
        let mut rules = Vec::with_capacity(nf + config.n_rare_predicates);
        for f in 0..nf {
            let theta = PI / 2.0 + 2.0 * PI * f as f64 / nf as f64;
            let displacement = (snap(config.displacement * theta.cos()), snap(config.displacement * theta.sin()));
            let s = rng.random_range(0.8..1.2);
            let object_group = groups[f % n_groups].clone();
            rules.push(PredicateRule {
                displacement,
                scale: (s, s),
                subject_group: complement(&object_group),
                object_group,
                displacement_source: None,
            });
        }
        for r in 0..config.n_rare_predicates {
            let source = (r / 2) % nf;
            let g = (source % n_groups + 1 + r % 2) % n_groups;
            let mut object_group = groups[g].clone();
            let outside = complement(&object_group);
            let slot = rng.random_range(0..object_group.len());
            object_group[slot] = *outside.choose(&mut rng).expect("more categories than one group");
            object_group.sort_unstable();
            rules.push(PredicateRule {
                displacement: rules[source].displacement,
                scale: rules[source].scale,
                subject_group: complement(&object_group),
                object_group,
                displacement_source: Some(source),
            });
        }
        for (i, rule) in rules.iter().enumerate() {
            check_geometry(i, rule, config.position_jitter)?;
        }

        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[PROTOTYPE_STREAM]));
        let prototypes = (0..c)
            .map(|_| {
                let v: Vec<f64> = (0..config.feature_dim).map(|_| prng.sample(StandardNormal)).collect();
                let n = crate::autograd::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();

        Ok(World {
            config: config.clone(),
            groups,
            rules,
            prototypes,
        })
    }

    pub fn vocabulary_names(&self) -> (Vec<String>, Vec<String>) {
        let objects = (0..self.config.n_categories).map(|i| format!("object_{i:02}")).collect();
        let nf = self.config.n_frequent_predicates;
        let predicates = (0..self.rules.len())
            .map(|p| {
                if p < nf {
                    format!("frequent_{p}")
                } else {
                    format!("rare_{}", p - nf)
                }
            })
            .collect();
        (objects, predicates)
    }

    /// Prototype plus isotropic Gaussian noise, seeded by the sample and node.
    pub fn feature(&self, category: usize, sample_seed: u64, node: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, &[FEATURE_STREAM, node as u64]));
        let proto = &self.prototypes[category];
        if self.config.noise_sigma == 0.0 {
            return proto.clone();
        }
        let normal = Normal::new(0.0, self.config.noise_sigma).expect("validated sigma");
        proto.iter().map(|&x| x + normal.sample(&mut rng)).collect()
    }

    fn sample_seed(&self, split: usize, index: usize) -> u64 {
        derive_seed(self.config.seed, &[split as u64, index as u64])
    }

    fn pair_count(&self, split: usize, index: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.sample_seed(split, index), &[PAIR_STREAM]));
        rng.random_range(1..=3usize)
    }

    /// Predicate of every pair slot in a split. Each round lists all frequent
    /// predicates plus the rare ones in proportion `rare_weight`, in index
    /// order, so every prefix has frequent counts at least the rare counts.
    fn predicate_schedule(&self, len: usize) -> Vec<usize> {
        let nf = self.config.n_frequent_predicates;
        let w = self.config.rare_weight;
        let mut out = Vec::with_capacity(len + self.rules.len());
        let mut round = 0u64;
        while out.len() < len {
            let with_rare = ((round + 1) as f64 * w).floor() > (round as f64 * w).floor();
            out.extend(0..nf);
            if with_rare {
                out.extend(nf..self.rules.len());
            }
            round += 1;
        }
        out.truncate(len);
        out
    }

    fn generate_sample(&self, split: usize, index: usize, predicates: &[usize]) -> SceneGraphSample {
        let split_name = ["train", "val", "test"][split];
        let seed = self.sample_seed(split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_pairs = predicates.len();
        let distractor = 2 * n_pairs < 6 && rng.random_bool(0.5);
        let mut proposals = Vec::with_capacity(2 * n_pairs + 1);
        let mut relationships = Vec::with_capacity(n_pairs);
        for &p in predicates {
            let rule = &self.rules[p];
            let subj_cat = *rule.subject_group.choose(&mut rng).expect("nonempty");
            let obj_cat = *rule.object_group.choose(&mut rng).expect("nonempty");
            let (sb, ob) = place_pair(rule, self.config.position_jitter, &mut rng);
            let si = proposals.len();
            proposals.push(ObjectProposal {
                bbox: sb,
                category: Some(subj_cat),
                feature: None,
            });
            proposals.push(ObjectProposal {
                bbox: ob,
                category: Some(obj_cat),
                feature: None,
            });
            relationships.push(Relationship {
                subject_idx: si,
                predicate_id: p,
                object_idx: si + 1,
            });
        }
        if distractor {
            let cat = rng.random_range(0..self.config.n_categories);
            let w = rng.random_range(MIN_SIZE..MAX_SIZE);
            let h = rng.random_range(MIN_SIZE..MAX_SIZE);
            let x = rng.random_range(0.0..1.0 - w);
            let y = rng.random_range(0.0..1.0 - h);
            proposals.push(ObjectProposal {
                bbox: BBox::new(x, y, x + w, y + h),
                category: Some(cat),
                feature: None,
            });
        }
        for (i, prop) in proposals.iter_mut().enumerate() {
            prop.feature = Some(self.feature(prop.category.expect("set above"), seed, i));
        }
        SceneGraphSample {
            sample_id: format!("{split_name}_{index:05}"),
            proposals,
            relationships,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        let mut split_samples: Vec<Vec<SceneGraphSample>> = Vec::with_capacity(3);
        for (split, &n) in self.config.samples_per_split.iter().enumerate() {
            // output order is fixed by index regardless of scheduling
            let counts: Vec<usize> = (0..n).into_par_iter().map(|i| self.pair_count(split, i)).collect();
            let schedule = self.predicate_schedule(counts.iter().sum());
            let mut offsets = Vec::with_capacity(n);
            let mut acc = 0;
            for &c in &counts {
                offsets.push(acc);
                acc += c;
            }
            let samples: Vec<SceneGraphSample> = (0..n)
                .into_par_iter()
                .map(|i| self.generate_sample(split, i, &schedule[offsets[i]..offsets[i] + counts[i]]))
                .collect();
            split_samples.push(samples);
        }
        let test = split_samples.pop().expect("three splits");
        let val = split_samples.pop().expect("three splits");
        let train = split_samples.pop().expect("three splits");

        let (object_categories, predicates) = self.vocabulary_names();
        let mut counts = vec![0u64; predicates.len()];
        for s in &train {
            for r in &s.relationships {
                counts[r.predicate_id] += 1;
            }
        }
        let nf = self.config.n_frequent_predicates;
        let (frequent_ids, rare_ids) = split_predicates(&counts, nf)?;
        if frequent_ids != (0..nf).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "training counts {counts:?} do not separate frequent from rare predicates"
            )));
        }
        let ds = Dataset {
            vocabulary: PredicateVocabulary {
                object_categories,
                predicates,
                frequent_ids,
                rare_ids,
            },
            splits: Splits { train, val, test },
            generator: Some(serde_json::json!({ "synthworld": self.config, "seed": self.config.seed })),
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn generate_world(config: &WorldConfig) -> Result<Dataset> {
    World::build(config)?.generate()
}

/// Rounds away floating-point residue such as `cos(pi/2)`.
fn snap(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

fn check_geometry(index: usize, rule: &PredicateRule, jitter: f64) -> Result<()> {
    let max_off = JITTER_TRUNCATION * jitter;
    for (axis, d, s) in [("x", rule.displacement.0, rule.scale.0), ("y", rule.displacement.1, rule.scale.1)] {
        let need = MAX_SIZE / 2.0 + MAX_SIZE * s / 2.0 + d.abs() + max_off;
        if need > 1.0 {
            return Err(Error::InfeasibleGeometry {
                rule: index,
                message: format!("displacement {d:.3} along {axis} does not fit in the unit square"),
            });
        }
    }
    Ok(())
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= JITTER_TRUNCATION {
            return z * sigma;
        }
    }
}

fn place_pair(rule: &PredicateRule, jitter: f64, rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    let w = rng.random_range(MIN_SIZE..MAX_SIZE);
    let h = rng.random_range(MIN_SIZE..MAX_SIZE);
    let (ow, oh) = (w * rule.scale.0, h * rule.scale.1);
    let dx = rule.displacement.0 + truncated_normal(rng, jitter);
    let dy = rule.displacement.1 + truncated_normal(rng, jitter);
    // subject center range keeping both boxes inside the unit square
    let lo_x = (w / 2.0).max(ow / 2.0 - dx);
    let hi_x = (1.0 - w / 2.0).min(1.0 - ow / 2.0 - dx);
    let lo_y = (h / 2.0).max(oh / 2.0 - dy);
    let hi_y = (1.0 - h / 2.0).min(1.0 - oh / 2.0 - dy);
    let cx = if hi_x > lo_x { rng.random_range(lo_x..hi_x) } else { lo_x };
    let cy = if hi_y > lo_y { rng.random_range(lo_y..hi_y) } else { lo_y };
    let subj = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
    let (ox, oy) = (cx + dx, cy + dy);
    let obj = BBox::new(ox - ow / 2.0, oy - oh / 2.0, ox + ow / 2.0, oy + oh / 2.0);
    (clamp_box(subj), clamp_box(obj))
}

fn clamp_box(b: BBox) -> BBox {
    BBox::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(1.0), b.y2.min(1.0))
}

/// Binary `L x L` mask, row-major with row index increasing with `y`. A cell
/// is set when its center lies inside the box; boxes that cover no center
/// set the single cell containing the box center.
pub fn rasterize_mask(bbox: &BBox, side: usize) -> Vec<f64> {
    let l = side as f64;
    let mut mask = vec![0.0; side * side];
    let mut any = false;
    for r in 0..side {
        let cy = (r as f64 + 0.5) / l;
        if cy < bbox.y1 || cy > bbox.y2 {
            continue;
        }
        for c in 0..side {
            let cx = (c as f64 + 0.5) / l;
            if cx >= bbox.x1 && cx <= bbox.x2 {
                mask[r * side + c] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = bbox.center();
        let c = ((cx * l).floor() as usize).min(side - 1);
        let r = ((cy * l).floor() as usize).min(side - 1);
        mask[r * side + c] = 1.0;
    }
    mask
}

/// Regenerates features from category prototypes instead of reading the
/// stored ones. Samples are identified by id, so the same proposal always
/// gets the same noise.
pub struct SyntheticFeatures<'w> {
    world: &'w World,
}

impl<'w> SyntheticFeatures<'w> {
    pub fn new(world: &'w World) -> Self {
        SyntheticFeatures { world }
    }
}

impl FeatureProvider for SyntheticFeatures<'_> {
    fn dim(&self) -> usize {
        self.world.config.feature_dim
    }

    fn features(&self, sample: &SceneGraphSample) -> Result<Vec<Vec<f64>>> {
        let seed = sample
            .sample_id
            .bytes()
            .fold(derive_seed(self.world.config.seed, &[FEATURE_STREAM]), |acc, b| {
                derive_seed(acc, &[b as u64])
            });
        sample
            .proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cat = p.category.ok_or_else(|| {
                    Error::validation(&sample.sample_id, format!("proposals[{i}].category"), "synthetic features need a category")
                })?;
                if cat >= self.world.config.n_categories {
                    return Err(Error::validation(&sample.sample_id, format!("proposals[{i}].category"), "unknown category"));
                }
                Ok(self.world.feature(cat, seed, i))
            })
            .collect()
    }
}
