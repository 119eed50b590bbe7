use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::Matrix;

/// Generator settings. Classes are split by id: the first
/// `num_classes − dev_classes − test_classes` ids train, then dev, then test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    pub dev_classes: usize,
    pub test_classes: usize,
    pub latent_dim: usize,
    pub frame_dim: usize,
    pub frames_per_utterance: [usize; 2],
    pub noise_sigma: f64,
    /// Scale of the class-latent contribution relative to the phone prototype.
    pub latent_weight: f64,
    pub phones_per_class: [usize; 2],
    pub phone_inventory_size: usize,
    pub utterances_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 112,
            dev_classes: 16,
            test_classes: 32,
            latent_dim: 8,
            frame_dim: 20,
            frames_per_utterance: [10, 30],
            noise_sigma: 1.0,
            latent_weight: 0.5,
            phones_per_class: [3, 6],
            phone_inventory_size: 12,
            utterances_per_class: 6,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn train_classes(&self) -> usize {
        self.num_classes.saturating_sub(self.dev_classes + self.test_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("latent_dim", self.latent_dim),
            ("frame_dim", self.frame_dim),
            ("phone_inventory_size", self.phone_inventory_size),
            ("utterances_per_class", self.utterances_per_class),
            ("frames_per_utterance min", self.frames_per_utterance[0]),
            ("phones_per_class min", self.phones_per_class[0]),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!(Config, "{} must be at least 1", name);
            }
        }
        if self.frames_per_utterance[0] > self.frames_per_utterance[1] {
            bail!(Config, "frames_per_utterance range is empty: {:?}", self.frames_per_utterance);
        }
        if self.phones_per_class[0] > self.phones_per_class[1] {
            bail!(Config, "phones_per_class range is empty: {:?}", self.phones_per_class);
        }
        if self.dev_classes + self.test_classes >= self.num_classes {
            bail!(
                Config,
                "no training classes left: {} total, {} dev, {} test",
                self.num_classes,
                self.dev_classes,
                self.test_classes
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!(Config, "noise_sigma must be finite and non-negative");
        }
        if !self.latent_weight.is_finite() {
            bail!(Config, "latent_weight must be finite");
        }
        Ok(())
    }

    pub fn split_of(&self, class_id: usize) -> Split {
        let train = self.train_classes();
        if class_id < train {
            Split::Train
        } else if class_id < train + self.dev_classes {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    /// The keyword's "spelling": a 0-based phone sequence.
    pub phones: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub frames: Matrix,
    /// 0-based phone label per frame.
    pub frame_phone_labels: Vec<usize>,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub classes: Vec<ClassInfo>,
    pub utterances: Vec<SyntheticUtterance>,
}

impl Corpus {
    pub fn class_ids(&self, split: Split) -> Vec<usize> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    pub fn utterance_ids(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len()).filter(|&i| self.utterances[i].split == split).collect()
    }

    /// Text-side input for a class: phone frequencies over the inventory.
    pub fn text_features(&self, class_id: usize) -> Option<Vec<f64>> {
        let info = self.classes.get(class_id)?;
        let mut f = vec![0.0; self.spec.phone_inventory_size];
        let inv = 1.0 / info.phones.len() as f64;
        for &p in &info.phones {
            f[p] += inv;
        }
        Some(f)
    }

    /// Text inputs for every class, indexed by class id.
    pub fn lexicon(&self) -> Vec<Vec<f64>> {
        (0..self.classes.len()).map(|c| self.text_features(c).expect("class exists")).collect()
    }
}

/// Draws a corpus. Each class gets a latent code and a phone sequence; each
/// frame is the prototype of its phone plus a phone-specific projection of the
/// class latent plus isotropic Gaussian noise. Phones are stretched uniformly
/// over the utterance length.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (f_dim, l_dim, n_phones) = (spec.frame_dim, spec.latent_dim, spec.phone_inventory_size);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let prototypes: Vec<Vec<f64>> = (0..n_phones).map(|_| (0..f_dim).map(|_| normal(&mut rng)).collect()).collect();
    let proj_scale = spec.latent_weight / libm::sqrt(l_dim as f64);
    let projections: Vec<Matrix> = (0..n_phones)
        .map(|_| {
            let data = (0..f_dim * l_dim).map(|_| proj_scale * normal(&mut rng)).collect();
            Matrix::from_vec(f_dim, l_dim, data).expect("shape")
        })
        .collect();

    let mut classes = Vec::with_capacity(spec.num_classes);
    let mut latents = Vec::with_capacity(spec.num_classes);
    for id in 0..spec.num_classes {
        let z: Vec<f64> = (0..l_dim).map(|_| normal(&mut rng)).collect();
        let len = rng.random_range(spec.phones_per_class[0]..=spec.phones_per_class[1]);
        let phones = (0..len).map(|_| rng.random_range(0..n_phones)).collect();
        classes.push(ClassInfo { id, phones, split: spec.split_of(id) });
        latents.push(z);
    }

    // Noise-free frame for every (class, phone) used.
    let clean = |class: usize, phone: usize| -> Vec<f64> {
        let z = &latents[class];
        let g = &projections[phone];
        (0..f_dim).map(|d| prototypes[phone][d] + crate::linalg::dot(g.row(d), z)).collect()
    };

    let mut utterances = Vec::with_capacity(spec.num_classes * spec.utterances_per_class);
    for info in &classes {
        let per_phone: Vec<Vec<f64>> = info.phones.iter().map(|&p| clean(info.id, p)).collect();
        for _ in 0..spec.utterances_per_class {
            let t_len = rng.random_range(spec.frames_per_utterance[0]..=spec.frames_per_utterance[1]);
            let l = info.phones.len();
            let mut frames = Matrix::zeros(t_len, f_dim);
            let mut labels = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let slot = t * l / t_len;
                labels.push(info.phones[slot]);
                let row = frames.row_mut(t);
                for d in 0..f_dim {
                    row[d] = per_phone[slot][d] + spec.noise_sigma * normal(&mut rng);
                }
            }
            utterances.push(SyntheticUtterance {
                frames,
                frame_phone_labels: labels,
                class_id: info.id,
                split: info.split,
            });
        }
    }
    Ok(Corpus { spec: spec.clone(), classes, utterances })
}
