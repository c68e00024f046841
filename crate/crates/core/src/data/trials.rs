use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A set of equally shaped multichannel trials, optionally labeled.
///
/// Samples are stored trial-major, then channel-major: trial `i`, channel `c`
/// and time `k` live at `(i * channels + c) * samples + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    channels: usize,
    samples: usize,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
    pub fs: f64,
    pub classes: usize,
    /// Per-trial session tag.
    pub sessions: Option<Vec<u16>>,
    pub participant: Option<u16>,
}

impl TrialSet {
    pub fn new(
        channels: usize,
        samples: usize,
        data: Vec<f64>,
        labels: Option<Vec<usize>>,
        fs: f64,
        classes: usize,
    ) -> Result<Self> {
        let per = channels * samples;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::shape(
                "trial_set",
                format!("{} values do not form trials of {channels} x {samples}", data.len()),
            ));
        }
        let n = data.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape("trial_set", format!("{} labels for {n} trials", l.len())));
            }
            if let Some(&label) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        Ok(Self {
            channels,
            samples,
            data,
            labels,
            fs,
            classes,
            sessions: None,
            participant: None,
        })
    }

    pub fn with_sessions(mut self, sessions: Vec<u16>) -> Result<Self> {
        if sessions.len() != self.len() {
            return Err(Error::shape(
                "trial_set",
                format!("{} session tags for {} trials", sessions.len(), self.len()),
            ));
        }
        self.sessions = Some(sessions);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.channels * self.samples)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Drops labels, e.g. to hand a target session to training.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let per = self.channels * self.samples;
        &self.data[i * per..(i + 1) * per]
    }

    pub fn trial_mut(&mut self, i: usize) -> &mut [f64] {
        let per = self.channels * self.samples;
        &mut self.data[i * per..(i + 1) * per]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f64] {
        let start = (i * self.channels + c) * self.samples;
        &self.data[start..start + self.samples]
    }

    pub fn channel_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let start = (i * self.channels + c) * self.samples;
        &mut self.data[start..start + self.samples]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Self {
            channels: self.channels,
            samples: self.samples,
            data,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            fs: self.fs,
            classes: self.classes,
            sessions: self.sessions.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
            participant: self.participant,
        }
    }

    /// Concatenates two sets with identical geometry.
    pub fn concat(&self, other: &TrialSet) -> Result<Self> {
        if self.channels != other.channels || self.samples != other.samples {
            return Err(Error::shape(
                "trial_set",
                format!(
                    "cannot concatenate {}x{} with {}x{}",
                    self.channels, self.samples, other.channels, other.samples
                ),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let sessions = match (&self.sessions, &other.sessions) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Self {
            channels: self.channels,
            samples: self.samples,
            data,
            labels,
            fs: self.fs,
            classes: self.classes.max(other.classes),
            sessions,
            participant: self.participant,
        })
    }

    /// Trials `indices` as a `[b, 1, channels, samples]` network input.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Tensor::new(&[indices.len(), 1, self.channels, self.samples], data).expect("batch geometry")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// Number of trials per class.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut counts = vec![0; self.classes];
            for &y in l {
                counts[y] += 1;
            }
            counts
        })
    }
}
