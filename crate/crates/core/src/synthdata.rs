//! Deterministic generator of a dermatology-shaped synthetic dataset.
//!
//! Classes are partitioned into groups. Images mostly reveal the group (far
//! shots more so, near shots also carry class detail), while each focused
//! metadata field separates the classes of one group only. Which question is
//! worth asking therefore depends on what the images suggest.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::case::{Case, ImageRecord, Severity};
use crate::error::{Error, Result};
use crate::rng::{fingerprint, stream, StreamRng};
use crate::schema::{AnswerValue, FieldKind, FieldSpec, MetadataSchema, ViewType};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldFocus {
    /// Every class has its own answer table.
    AllClasses,
    /// Only the classes of this group have distinct tables; all other classes
    /// share one background table.
    Group { group: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldGenKind {
    Categorical {
        cardinality: usize,
    },
    /// Integer-rounded value; class means are spread over `class_mean_range`.
    Scalar {
        class_mean_range: (f64, f64),
        class_sd: f64,
        global_mean: f64,
        global_sd: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGen {
    pub name: String,
    pub kind: FieldGenKind,
    /// Probability the answer follows the class table rather than noise.
    pub informativeness: f64,
    pub unknown_rate: f64,
    pub focus: FieldFocus,
    pub screen_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    /// Class `c` belongs to group `c % num_groups`.
    pub num_groups: usize,
    pub min_images: usize,
    pub max_images: usize,
    /// Sampling probability of near / far / other views.
    pub view_probs: [f64; 3],
    /// Per view: weight of the group direction in the image mean.
    pub group_scale: [f64; 3],
    /// Per view: weight of the class direction in the image mean.
    pub class_scale: [f64; 3],
    /// Per view: standard deviation of the per-coordinate image noise.
    pub noise_sigma: [f64; 3],
    /// Mass a focused table puts on the class's own option.
    pub table_peak: f64,
    pub fields: Vec<FieldGen>,
    /// Low / Medium / High share of cases.
    pub severity_proportions: [f64; 3],
    pub severity_map: Vec<Severity>,
    pub rater_panel_size: usize,
    pub rater_temperature: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let names = [
            "age",
            "itching",
            "bleeding",
            "scaling",
            "pain",
            "spreading",
            "blistering",
            "fever",
            "body_part",
            "duration",
            "skin_type",
            "sun_exposure",
        ];
        let fields = names
            .iter()
            .enumerate()
            .map(|(id, name)| {
                let (kind, informativeness, focus) = match id {
                    0 => (
                        FieldGenKind::Scalar {
                            class_mean_range: (25.0, 70.0),
                            class_sd: 10.0,
                            global_mean: 47.0,
                            global_sd: 18.0,
                        },
                        0.8,
                        FieldFocus::AllClasses,
                    ),
                    1..=6 => (
                        FieldGenKind::Categorical { cardinality: 4 },
                        0.8,
                        FieldFocus::Group {
                            group: (id - 1) / 2,
                        },
                    ),
                    7 => (
                        FieldGenKind::Categorical { cardinality: 3 },
                        0.8,
                        FieldFocus::AllClasses,
                    ),
                    _ => (
                        FieldGenKind::Categorical { cardinality: 3 },
                        0.0,
                        FieldFocus::AllClasses,
                    ),
                };
                FieldGen {
                    name: name.to_string(),
                    kind,
                    informativeness,
                    unknown_rate: 0.05,
                    focus,
                    screen_id: id / 2,
                }
            })
            .collect();
        let mut severity_map = vec![Severity::Low; 6];
        severity_map.extend([Severity::Medium; 4]);
        severity_map.extend([Severity::High; 2]);
        GeneratorConfig {
            num_classes: 12,
            embedding_dim: 16,
            train_cases: 2000,
            val_cases: 500,
            test_cases: 500,
            num_groups: 3,
            min_images: 2,
            max_images: 6,
            view_probs: [0.45, 0.4, 0.15],
            group_scale: [0.8, 1.4, 0.6],
            class_scale: [0.9, 0.35, 0.2],
            noise_sigma: [1.0, 1.1, 2.0],
            table_peak: 0.85,
            fields,
            severity_proportions: [0.56, 0.36, 0.08],
            severity_map,
            rater_panel_size: 10,
            rater_temperature: 1.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 || self.embedding_dim == 0 {
            return bad("need at least 2 classes and a positive embedding dimension".into());
        }
        if self.num_groups == 0 || self.num_groups > self.num_classes {
            return bad(format!("num_groups must be in 1..={}", self.num_classes));
        }
        if self.min_images == 0 || self.min_images > self.max_images {
            return bad("image counts need 1 <= min_images <= max_images".into());
        }
        let probs_ok = |p: &[f64]| {
            p.iter().all(|x| (0.0..=1.0).contains(x)) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !probs_ok(&self.view_probs) {
            return bad("view_probs must be probabilities summing to 1".into());
        }
        if !probs_ok(&self.severity_proportions) {
            return bad("severity_proportions must be probabilities summing to 1".into());
        }
        if self.severity_map.len() != self.num_classes {
            return bad(format!(
                "severity_map has {} entries for {} classes",
                self.severity_map.len(),
                self.num_classes
            ));
        }
        for s in Severity::ALL {
            if self.severity_proportions[s.index()] > 0.0 && !self.severity_map.contains(&s) {
                return bad(format!(
                    "severity {s:?} has positive proportion but no class"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.table_peak) || self.noise_sigma.iter().any(|s| *s < 0.0) {
            return bad("table_peak must be in [0,1] and noise_sigma non-negative".into());
        }
        if self.rater_panel_size == 0 || !(self.rater_temperature > 0.0) {
            return bad("rater panel needs at least one rater and a positive temperature".into());
        }
        for f in &self.fields {
            if !(0.0..=1.0).contains(&f.informativeness) || !(0.0..=1.0).contains(&f.unknown_rate) {
                return bad(format!(
                    "field `{}`: informativeness and unknown_rate must be in [0,1]",
                    f.name
                ));
            }
            if let FieldFocus::Group { group } = f.focus {
                if group >= self.num_groups {
                    return bad(format!(
                        "field `{}` focuses on missing group {group}",
                        f.name
                    ));
                }
            }
            if let FieldGenKind::Categorical { cardinality } = f.kind {
                if cardinality < 2 {
                    return bad(format!("field `{}` needs at least two options", f.name));
                }
            }
        }
        Ok(())
    }

    /// Short hash of the full configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )[..16]
            .to_string()
    }

    pub fn class_prior(&self) -> Vec<f64> {
        let count = |s: Severity| self.severity_map.iter().filter(|x| **x == s).count() as f64;
        self.severity_map
            .iter()
            .map(|s| self.severity_proportions[s.index()] / count(*s))
            .collect()
    }

    pub fn group_of(&self, class: usize) -> usize {
        class % self.num_groups
    }
}

/// The hidden generative parameters, kept for oracles and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub group_dirs: Vec<Vec<f64>>,
    pub class_dirs: Vec<Vec<f64>>,
    /// `tables[field][class]`: answer distribution over options; empty for
    /// scalar fields.
    pub tables: Vec<Vec<Vec<f64>>>,
    /// Per scalar field, the class means; empty for categorical fields.
    pub scalar_means: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    fn build(config: &GeneratorConfig) -> Self {
        let mut rng = stream(config.seed, "synth:world");
        let d = config.embedding_dim;
        let unit = |rng: &mut StreamRng| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let group_dirs = (0..config.num_groups).map(|_| unit(&mut rng)).collect();
        let class_dirs = (0..config.num_classes).map(|_| unit(&mut rng)).collect();
        let mut tables = Vec::new();
        let mut scalar_means = Vec::new();
        for f in &config.fields {
            match &f.kind {
                FieldGenKind::Scalar {
                    class_mean_range: (lo, hi),
                    ..
                } => {
                    tables.push(Vec::new());
                    scalar_means.push(
                        (0..config.num_classes)
                            .map(|_| rng.random_range(*lo..=*hi))
                            .collect(),
                    );
                }
                FieldGenKind::Categorical { cardinality } => {
                    scalar_means.push(Vec::new());
                    let c = *cardinality;
                    let random_table = |rng: &mut StreamRng| {
                        let w: Vec<f64> = (0..c)
                            .map(|_| -rng.random::<f64>().max(1e-300).ln())
                            .collect();
                        let s: f64 = w.iter().sum();
                        w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
                    };
                    let peaked = |opt: usize| {
                        (0..c)
                            .map(|o| {
                                if o == opt {
                                    config.table_peak
                                } else {
                                    (1.0 - config.table_peak) / (c - 1) as f64
                                }
                            })
                            .collect::<Vec<f64>>()
                    };
                    let per_class = match f.focus {
                        FieldFocus::AllClasses => (0..config.num_classes)
                            .map(|_| random_table(&mut rng))
                            .collect(),
                        FieldFocus::Group { group } => {
                            let background = random_table(&mut rng);
                            let offset = rng.random_range(0..c);
                            let mut rank = 0;
                            (0..config.num_classes)
                                .map(|class| {
                                    if config.group_of(class) == group {
                                        rank += 1;
                                        peaked((rank - 1 + offset) % c)
                                    } else {
                                        background.clone()
                                    }
                                })
                                .collect()
                        }
                    };
                    tables.push(per_class);
                }
            }
        }
        SyntheticWorld {
            group_dirs,
            class_dirs,
            tables,
            scalar_means,
        }
    }

    pub fn image_mean(&self, config: &GeneratorConfig, class: usize, view: ViewType) -> Vec<f64> {
        let v = view.index();
        let g = &self.group_dirs[config.group_of(class)];
        g.iter()
            .zip(&self.class_dirs[class])
            .map(|(a, b)| config.group_scale[v] * a + config.class_scale[v] * b)
            .collect()
    }

    /// Probability of each option (excluding Unknown) for a field and class,
    /// mixing the class table with the uniform noise distribution.
    pub fn answer_probs(&self, config: &GeneratorConfig, field: usize, class: usize) -> Vec<f64> {
        let inf = config.fields[field].informativeness;
        let t = &self.tables[field][class];
        t.iter()
            .map(|p| inf * p + (1.0 - inf) / t.len() as f64)
            .collect()
    }

    /// Unnormalized log posterior over classes for a case under the true
    /// generative model.
    pub fn log_posterior(&self, config: &GeneratorConfig, case: &Case) -> Vec<f64> {
        let prior = config.class_prior();
        (0..config.num_classes)
            .map(|c| {
                if prior[c] == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut lp = prior[c].ln();
                for im in &case.images {
                    let mean = self.image_mean(config, c, im.view);
                    let s = config.noise_sigma[im.view.index()].max(1e-9);
                    lp -= im
                        .embedding
                        .iter()
                        .zip(&mean)
                        .map(|(x, m)| (x - m).powi(2))
                        .sum::<f64>()
                        / (2.0 * s * s);
                }
                for (fid, (f, ans)) in config.fields.iter().zip(&case.metadata).enumerate() {
                    match (&f.kind, ans) {
                        (
                            FieldGenKind::Categorical { cardinality },
                            AnswerValue::Categorical(o),
                        ) if o < cardinality => {
                            lp += self.answer_probs(config, fid, c)[*o].max(1e-300).ln();
                        }
                        (
                            FieldGenKind::Scalar {
                                class_sd,
                                global_mean,
                                global_sd,
                                ..
                            },
                            AnswerValue::Scalar(x),
                        ) => {
                            let pdf = |m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / s;
                            let inf = f.informativeness;
                            let dens = inf * pdf(self.scalar_means[fid][c], *class_sd)
                                + (1.0 - inf) * pdf(*global_mean, *global_sd);
                            lp += dens.max(1e-300).ln();
                        }
                        _ => {}
                    }
                }
                lp
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub schema: MetadataSchema,
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
    pub world: SyntheticWorld,
}

fn sample_index(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|l| ((l - m) / temperature).exp())
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn generate_case(
    config: &GeneratorConfig,
    world: &SyntheticWorld,
    prior: &[f64],
    case_id: u64,
) -> Case {
    let mut rng = stream(config.seed, &format!("synth:case:{case_id}"));
    let label = sample_index(&mut rng, prior);
    let n_images = rng.random_range(config.min_images..=config.max_images);
    let images = (0..n_images)
        .map(|_| {
            let view = ViewType::ALL[sample_index(&mut rng, &config.view_probs)];
            let noise =
                Normal::new(0.0, config.noise_sigma[view.index()]).expect("validated sigma");
            let embedding = world
                .image_mean(config, label, view)
                .into_iter()
                .map(|m| m + noise.sample(&mut rng))
                .collect();
            ImageRecord { view, embedding }
        })
        .collect();
    let metadata = config
        .fields
        .iter()
        .enumerate()
        .map(|(fid, f)| {
            let informed = rng.random_bool(f.informativeness);
            let value = match &f.kind {
                FieldGenKind::Categorical { cardinality } => {
                    let o = if informed {
                        sample_index(&mut rng, &world.tables[fid][label])
                    } else {
                        rng.random_range(0..*cardinality)
                    };
                    AnswerValue::Categorical(o)
                }
                FieldGenKind::Scalar {
                    class_sd,
                    global_mean,
                    global_sd,
                    ..
                } => {
                    let (m, s) = if informed {
                        (world.scalar_means[fid][label], *class_sd)
                    } else {
                        (*global_mean, *global_sd)
                    };
                    let x: f64 = Normal::new(m, s).expect("valid sd").sample(&mut rng);
                    AnswerValue::Scalar(x.round().clamp(1.0, 100.0))
                }
            };
            if rng.random_bool(f.unknown_rate) {
                match f.kind {
                    FieldGenKind::Categorical { cardinality } => {
                        AnswerValue::Categorical(cardinality)
                    }
                    FieldGenKind::Scalar { .. } => AnswerValue::ScalarUnknown,
                }
            } else {
                value
            }
        })
        .collect();
    let mut case = Case {
        case_id,
        images,
        metadata,
        label,
        difficulty: 0.0,
        severity: config.severity_map[label],
    };
    let posterior = softmax(
        &world.log_posterior(config, &case),
        config.rater_temperature,
    );
    let votes = (0..config.rater_panel_size)
        .filter(|_| sample_index(&mut rng, &posterior) == label)
        .count();
    case.difficulty = 1.0 - votes as f64 / config.rater_panel_size as f64;
    case
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Generates the train/validation/test splits and the schema. Case ids are
/// consecutive across splits; scalar percentiles come from the train split.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticData> {
    config.validate()?;
    let world = SyntheticWorld::build(config);
    let prior = config.class_prior();
    let make = |start: usize, n: usize| -> Vec<Case> {
        use rayon::prelude::*;
        (start..start + n)
            .into_par_iter()
            .map(|id| generate_case(config, &world, &prior, id as u64))
            .collect()
    };
    let train = make(0, config.train_cases);
    let val = make(config.train_cases, config.val_cases);
    let test = make(config.train_cases + config.val_cases, config.test_cases);
    let fields = config
        .fields
        .iter()
        .enumerate()
        .map(|(id, f)| {
            let kind = match f.kind {
                FieldGenKind::Categorical { cardinality } => FieldKind::categorical(cardinality),
                FieldGenKind::Scalar { global_mean, .. } => {
                    let mut xs: Vec<f64> = train
                        .iter()
                        .filter_map(|c| match c.metadata[id] {
                            AnswerValue::Scalar(x) => Some(x),
                            _ => None,
                        })
                        .collect();
                    xs.sort_by(f64::total_cmp);
                    if xs.is_empty() {
                        FieldKind::scalar(global_mean, global_mean, global_mean)
                    } else {
                        FieldKind::scalar(
                            percentile(&xs, 0.1),
                            percentile(&xs, 0.5),
                            percentile(&xs, 0.9),
                        )
                    }
                }
            };
            FieldSpec {
                id,
                name: f.name.clone(),
                kind,
                screen_id: f.screen_id,
            }
        })
        .collect();
    let schema = MetadataSchema::new(fields)?;
    Ok(SyntheticData {
        schema,
        train,
        val,
        test,
        world,
    })
}

/// A configuration where metadata carries no class information at all.
pub fn uninformative(mut config: GeneratorConfig) -> GeneratorConfig {
    for f in &mut config.fields {
        f.informativeness = 0.0;
    }
    config
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train_cases: 200,
            val_cases: 50,
            test_cases: 50,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_prior_sums_to_one() {
        let c = GeneratorConfig::default();
        c.validate().unwrap();
        assert!((c.class_prior().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c.fields.len(), 12);
        assert_eq!(
            c.fields.iter().filter(|f| f.informativeness > 0.0).count(),
            8
        );
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let c = GeneratorConfig {
            severity_proportions: [0.5, 0.3, 0.1],
            ..Default::default()
        };
        assert!(matches!(generate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn cases_are_valid_and_ids_disjoint() {
        let c = small();
        let d = generate(&c).unwrap();
        let mut ids = Vec::new();
        for case in d.train.iter().chain(&d.val).chain(&d.test) {
            case.validate(&d.schema, c.num_classes).unwrap();
            assert!((2..=6).contains(&case.images.len()));
            assert!((0.0..=1.0).contains(&case.difficulty));
            ids.push(case.case_id);
        }
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.schema, b.schema);
        let c = generate(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn focused_tables_single_out_group_members() {
        let c = GeneratorConfig::default();
        let w = SyntheticWorld::build(&c);
        let t = &w.tables[1];
        let outside: Vec<usize> = (0..c.num_classes).filter(|k| c.group_of(*k) != 0).collect();
        for k in &outside {
            assert_eq!(t[*k], t[outside[0]]);
        }
        for k in (0..c.num_classes).filter(|k| c.group_of(*k) == 0) {
            assert!(t[k].iter().any(|p| (*p - c.table_peak).abs() < 1e-12));
        }
    }
}
