use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, InstanceKind, Slide};
use crate::diffcore::Tensor;
use crate::init::{derive_seed, rng, ModelRng};

/// Generator settings. Instances are Gaussian noise plus additive patterns:
///
/// * every instance of cohort `c` carries the cohort style `style_strength·S_c`;
/// * witness instances of a class-`y` bag (`y ≥ 1`) add
///   `shared_strength·M_y + cohort_strength·P_{c,y}`;
/// * class-0 bags receive decoys instead: `decoy_strength·P_{c',y'}` with the
///   pattern of the next cohort `c' = (c+1) mod k` and a random `y' ≥ 1`.
///
/// Patterns come from `motif_seed`, sampling from `seed`, so two configs that
/// share `motif_seed` describe the same task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cohorts: usize,
    pub classes: usize,
    pub patients_per_cohort: Vec<usize>,
    /// Inclusive range.
    pub slides_per_patient: [usize; 2],
    /// Inclusive range.
    pub tiles_per_slide: [usize; 2],
    pub instance: InstanceKind,
    pub shared_strength: f64,
    pub cohort_strength: f64,
    pub style_strength: f64,
    pub decoy_strength: f64,
    /// Mixes each cohort's class prior towards class `c mod m`.
    pub bias_strength: f64,
    /// Explicit per-cohort class priors; overrides `bias_strength`.
    pub class_priors: Option<Vec<Vec<f64>>>,
    pub witness_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub motif_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cohorts: 3,
            classes: 2,
            patients_per_cohort: vec![40, 30, 20],
            slides_per_patient: [1, 2],
            tiles_per_slide: [8, 16],
            instance: InstanceKind::Tiles { channels: 1, side: 16 },
            shared_strength: 1.0,
            cohort_strength: 1.0,
            style_strength: 0.5,
            decoy_strength: 0.0,
            bias_strength: 0.0,
            class_priors: None,
            witness_fraction: 0.25,
            noise_std: 1.0,
            seed: 0,
            motif_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let err = |m: String| Err(DatasetError::Config(m));
        if self.cohorts == 0 {
            return err("need at least one cohort".into());
        }
        if self.classes < 2 {
            return err("need at least two classes".into());
        }
        if self.patients_per_cohort.len() != self.cohorts {
            return err(format!(
                "patients_per_cohort has {} entries for {} cohorts",
                self.patients_per_cohort.len(),
                self.cohorts
            ));
        }
        if self.patients_per_cohort.contains(&0) {
            return err("every cohort needs at least one patient".into());
        }
        for (name, [lo, hi]) in [
            ("slides_per_patient", self.slides_per_patient),
            ("tiles_per_slide", self.tiles_per_slide),
        ] {
            if lo == 0 || lo > hi {
                return err(format!("{name} range [{lo}, {hi}] invalid"));
            }
        }
        if self.instance.width() == 0 {
            return err("instances must have positive width".into());
        }
        for (name, v) in [
            ("shared_strength", self.shared_strength),
            ("cohort_strength", self.cohort_strength),
            ("style_strength", self.style_strength),
            ("decoy_strength", self.decoy_strength),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return err(format!("bias_strength must be in [0, 1], got {}", self.bias_strength));
        }
        if !(self.witness_fraction > 0.0 && self.witness_fraction <= 1.0) {
            return err(format!("witness_fraction must be in (0, 1], got {}", self.witness_fraction));
        }
        if let Some(p) = &self.class_priors {
            if p.len() != self.cohorts || p.iter().any(|r| r.len() != self.classes) {
                return err("class_priors must be cohorts x classes".into());
            }
            for (c, row) in p.iter().enumerate() {
                if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return err(format!("class_priors row {c} is not a distribution"));
                }
            }
        }
        Ok(())
    }

    /// Class distribution of each cohort.
    pub fn priors(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.class_priors {
            return p.clone();
        }
        let m = self.classes;
        let b = self.bias_strength;
        (0..self.cohorts)
            .map(|c| {
                (0..m)
                    .map(|y| (1.0 - b) / m as f64 + if y == c % m { b } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Number of witness (or decoy) instances in a slide of `n` instances.
    pub fn witness_count(&self, n: usize) -> usize {
        ((self.witness_fraction * n as f64).round() as usize).clamp(1, n)
    }
}

/// The additive patterns of one task, each of instance width with unit RMS.
#[derive(Clone, Debug, PartialEq)]
pub struct Motifs {
    /// `class[y]`; index 0 (background) is unused and zero.
    pub class: Vec<Vec<f64>>,
    /// `cohort[c][y]`; `y = 0` unused and zero.
    pub cohort: Vec<Vec<Vec<f64>>>,
    pub style: Vec<Vec<f64>>,
}

impl Motifs {
    pub fn new(config: &SynthConfig) -> Self {
        let w = config.instance.width();
        let mut r = rng(config.motif_seed);
        let pattern = |r: &mut ModelRng| {
            let mut v: Vec<f64> = (0..w).map(|_| normal(r)).collect();
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / w as f64).sqrt();
            v.iter_mut().for_each(|x| *x /= rms);
            v
        };
        let class = (0..config.classes)
            .map(|y| if y == 0 { vec![0.0; w] } else { pattern(&mut r) })
            .collect();
        let cohort = (0..config.cohorts)
            .map(|_| {
                (0..config.classes)
                    .map(|y| if y == 0 { vec![0.0; w] } else { pattern(&mut r) })
                    .collect()
            })
            .collect();
        let style = (0..config.cohorts).map(|_| pattern(&mut r)).collect();
        Self { class, cohort, style }
    }
}

fn normal(r: &mut ModelRng) -> f64 {
    StandardNormal.sample(r)
}

fn draw_class(r: &mut ModelRng, prior: &[f64]) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (y, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return y;
        }
    }
    prior.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Generates a dataset. Every patient draws from its own stream derived from
/// `seed`, so the result is independent of generation order.
pub fn generate(config: &SynthConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let motifs = Motifs::new(config);
    let priors = config.priors();
    let (k, m, w) = (config.cohorts, config.classes, config.instance.width());
    let mut slides = Vec::new();
    for c in 0..k {
        for p in 0..config.patients_per_cohort[c] {
            let mut r = rng(derive_seed(config.seed, ((c as u64) << 32) | p as u64));
            let label = draw_class(&mut r, &priors[c]);
            let patient_id = format!("c{c}-p{p:04}");
            let n_slides = r.random_range(config.slides_per_patient[0]..=config.slides_per_patient[1]);
            for s in 0..n_slides {
                let n = r.random_range(config.tiles_per_slide[0]..=config.tiles_per_slide[1]);
                let mut marked = vec![false; n];
                if label > 0 || (config.decoy_strength > 0.0 && k > 1) {
                    for i in sample(&mut r, n, config.witness_count(n)) {
                        marked[i] = true;
                    }
                }
                let mut data = Vec::with_capacity(n * w);
                let mut tile_labels = Vec::with_capacity(n);
                for &is_marked in &marked {
                    let mut v: Vec<f64> = (0..w)
                        .map(|_| config.noise_std * normal(&mut r))
                        .collect();
                    add(&mut v, &motifs.style[c], config.style_strength);
                    let mut tile_label = 0;
                    if is_marked && label > 0 {
                        add(&mut v, &motifs.class[label], config.shared_strength);
                        add(&mut v, &motifs.cohort[c][label], config.cohort_strength);
                        tile_label = label;
                    } else if is_marked {
                        let y = r.random_range(1..m);
                        add(&mut v, &motifs.cohort[(c + 1) % k][y], config.decoy_strength);
                    }
                    data.extend(v.into_iter().map(|x| x as f32 as f64));
                    tile_labels.push(tile_label);
                }
                slides.push(Slide {
                    slide_id: format!("{patient_id}-s{s}"),
                    patient_id: patient_id.clone(),
                    cohort: c,
                    label,
                    instances: Tensor::matrix(n, w, data),
                    tile_labels,
                });
            }
        }
    }
    Ok(Dataset {
        cohorts: k,
        classes: m,
        kind: config.instance,
        slides,
    })
}

fn add(v: &mut [f64], pattern: &[f64], strength: f64) {
    if strength != 0.0 {
        for (x, p) in v.iter_mut().zip(pattern) {
            *x += strength * p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            cohorts: 2,
            patients_per_cohort: vec![6, 4],
            instance: InstanceKind::Features { d: 8 },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn seed_changes_samples_not_motifs() {
        let a = small();
        let b = SynthConfig { seed: 9, ..small() };
        assert_eq!(Motifs::new(&a), Motifs::new(&b));
        assert_ne!(generate(&a).unwrap(), generate(&b).unwrap());
    }

    #[test]
    fn witness_count_per_positive_bag() {
        let cfg = SynthConfig {
            witness_fraction: 0.3,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        for s in &d.slides {
            let w = s.tile_labels.iter().filter(|&&l| l > 0).count();
            if s.label > 0 {
                let want = 0.3 * s.len() as f64;
                assert!((w as f64 - want).abs() <= 1.0, "{w} vs {want}");
                assert!(s.tile_labels.iter().all(|&l| l == 0 || l == s.label));
            } else {
                assert_eq!(w, 0);
            }
        }
    }

    #[test]
    fn priors_follow_bias() {
        let cfg = SynthConfig {
            bias_strength: 0.6,
            ..small()
        };
        let p = cfg.priors();
        assert!((p[0][0] - 0.8).abs() < 1e-12 && (p[1][1] - 0.8).abs() < 1e-12);
        let explicit = SynthConfig {
            class_priors: Some(vec![vec![0.86, 0.14], vec![0.69, 0.31]]),
            ..small()
        };
        assert_eq!(explicit.priors()[1], vec![0.69, 0.31]);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { classes: 1, ..small() },
            SynthConfig { patients_per_cohort: vec![3], ..small() },
            SynthConfig { witness_fraction: 0.0, ..small() },
            SynthConfig { tiles_per_slide: [4, 2], ..small() },
            SynthConfig { shared_strength: -1.0, ..small() },
            SynthConfig { class_priors: Some(vec![vec![0.5, 0.4], vec![0.5, 0.5]]), ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(DatasetError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn values_are_f32_representable() {
        let d = generate(&small()).unwrap();
        for s in &d.slides {
            assert!(s.instances.data().iter().all(|&x| (x as f32 as f64).to_bits() == x.to_bits()));
        }
    }

    #[test]
    fn tile_geometry() {
        let cfg = SynthConfig {
            patients_per_cohort: vec![2, 2, 2],
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        assert!(d.slides.iter().all(|s| s.instances.cols() == 256));
    }
}
