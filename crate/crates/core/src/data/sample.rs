use crate::error::{Error, Result};

pub const UNKNOWN_CLASS: &str = "unknown";
pub const MIN_DAY: i32 = 1;
pub const MAX_DAY: i32 = 366;

/// One parcel: a `T x N x C` pixel-set series observed on `days`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub id: String,
    /// Day-of-year of each observation. Strictly increasing.
    pub days: Vec<i32>,
    /// Row-major `T x N x C` reflectances.
    pub pixels: Vec<f32>,
    pub n_pixels: usize,
    pub channels: usize,
    pub label: Option<usize>,
}

impl TimeSeriesSample {
    pub fn new(
        id: impl Into<String>,
        days: Vec<i32>,
        pixels: Vec<f32>,
        n_pixels: usize,
        channels: usize,
        label: Option<usize>,
    ) -> Result<Self> {
        let sample = Self {
            id: id.into(),
            days,
            pixels,
            n_pixels,
            channels,
            label,
        };
        sample.check_shape()?;
        Ok(sample)
    }

    pub fn timesteps(&self) -> usize {
        self.days.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.days.len(), self.n_pixels, self.channels]
    }

    /// Spectral vector of pixel `n` at timestep `t`.
    pub fn pixel(&self, t: usize, n: usize) -> &[f32] {
        let start = (t * self.n_pixels + n) * self.channels;
        &self.pixels[start..start + self.channels]
    }

    /// All pixels of timestep `t`, `N x C` row-major.
    pub fn timestep(&self, t: usize) -> &[f32] {
        let len = self.n_pixels * self.channels;
        &self.pixels[t * len..(t + 1) * len]
    }

    pub(crate) fn check_shape(&self) -> Result<()> {
        let [t, n, c] = self.shape();
        if t == 0 || n == 0 || c == 0 {
            return Err(Error::invalid(format!(
                "sample {}: shape [{t}, {n}, {c}] has an empty axis",
                self.id
            )));
        }
        if self.pixels.len() != t * n * c {
            return Err(Error::Dimension(format!(
                "sample {}: {} pixel values for shape [{t}, {n}, {c}]",
                self.id,
                self.pixels.len()
            )));
        }
        Ok(())
    }

    /// Full invariant check for stored or generated samples.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(w) = self.days.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "sample {}: days not strictly increasing ({} then {})",
                self.id, w[0], w[1]
            )));
        }
        if let Some(d) = self.days.iter().find(|&&d| !(MIN_DAY..=MAX_DAY).contains(&d)) {
            return Err(Error::invalid(format!(
                "sample {}: day {d} outside [{MIN_DAY}, {MAX_DAY}]",
                self.id
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sample {}: non-finite pixel", self.id)));
        }
        if let Some(label) = self.label {
            if label >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {}: label {label} >= {num_classes} classes",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One domain's samples plus its class inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TimeSeriesSample>,
    /// `K` class names; exactly one entry is [`UNKNOWN_CLASS`].
    pub class_names: Vec<String>,
    pub domain_id: String,
    pub channels: usize,
}

impl Dataset {
    pub fn new(
        samples: Vec<TimeSeriesSample>,
        class_names: Vec<String>,
        domain_id: impl Into<String>,
        channels: usize,
    ) -> Result<Self> {
        let ds = Self {
            samples,
            class_names,
            domain_id: domain_id.into(),
            channels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn unknown_index(&self) -> usize {
        self.class_names
            .iter()
            .position(|c| c == UNKNOWN_CLASS)
            .expect("validated dataset has an unknown class")
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn validate_classes(class_names: &[String]) -> Result<()> {
        if class_names.is_empty() {
            return Err(Error::invalid("class list is empty"));
        }
        let unknown = class_names.iter().filter(|c| *c == UNKNOWN_CLASS).count();
        if unknown != 1 {
            return Err(Error::invalid(format!(
                "class list must contain \"{UNKNOWN_CLASS}\" exactly once (found {unknown})"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::validate_classes(&self.class_names)?;
        for s in &self.samples {
            if s.channels != self.channels {
                return Err(Error::Dimension(format!(
                    "sample {} has {} channels, dataset has {}",
                    s.id, s.channels, self.channels
                )));
            }
            s.validate(self.num_classes())?;
        }
        Ok(())
    }

    /// Samples per class label; unlabeled samples are not counted.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for label in self.samples.iter().filter_map(|s| s.label) {
            counts[label] += 1;
        }
        counts
    }

    /// Same samples with labels removed.
    pub fn without_labels(&self) -> Dataset {
        let mut ds = self.clone();
        for s in &mut ds.samples {
            s.label = None;
        }
        ds
    }

    /// Relabels samples onto `classes` by name. Labels whose name is not in
    /// `classes` map to its unknown entry. Every name in `classes` other than
    /// unknown must exist in this dataset's inventory.
    pub fn remap_classes(&self, classes: &[String]) -> Result<Dataset> {
        Self::validate_classes(classes)?;
        let target_unknown = classes.iter().position(|c| c == UNKNOWN_CLASS).unwrap();
        for name in classes {
            if !self.class_names.contains(name) {
                return Err(Error::Dimension(format!(
                    "class {name:?} is not part of dataset {} (classes: {:?})",
                    self.domain_id, self.class_names
                )));
            }
        }
        let mapping: Vec<usize> = self
            .class_names
            .iter()
            .map(|name| classes.iter().position(|c| c == name).unwrap_or(target_unknown))
            .collect();
        let mut ds = self.clone();
        ds.class_names = classes.to_vec();
        for s in &mut ds.samples {
            s.label = s.label.map(|l| mapping[l]);
        }
        Ok(ds)
    }

    /// Keeps classes with at least `min_examples` labeled samples; the rest
    /// are folded into unknown.
    pub fn select_frequent_classes(&self, min_examples: usize) -> Result<Dataset> {
        let counts = self.class_counts();
        let keep: Vec<String> = self
            .class_names
            .iter()
            .zip(&counts)
            .filter(|(name, &count)| *name == UNKNOWN_CLASS || count >= min_examples)
            .map(|(name, _)| name.clone())
            .collect();
        self.remap_classes(&keep)
    }

    /// Subset by sample indices, preserving the class inventory.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            domain_id: self.domain_id.clone(),
            channels: self.channels,
        }
    }

    /// Concatenates the samples of `other` (same inventory and channel count).
    pub fn merged(&self, other: &Dataset) -> Result<Dataset> {
        if other.class_names != self.class_names || other.channels != self.channels {
            return Err(Error::Dimension(
                "datasets with different classes or channels cannot be merged".into(),
            ));
        }
        let mut ds = self.clone();
        ds.samples.extend(other.samples.iter().cloned());
        Ok(ds)
    }
}
