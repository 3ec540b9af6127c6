//! Synthetic federated datasets.
//!
//! Features are Gaussian blobs around class means on a sphere, so a linear
//! classifier can learn them. Client label mixes follow one of three skew
//! regimes: a fraction of single-class clients, Dirichlet label proportions,
//! or per-client feature noise with balanced labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::daca::ClusterAssignment;
use crate::error::{Error, Result};
use crate::hetero::{ClientLabelStats, LabelDistribution};
use crate::jfvo::SharingPlan;
use crate::rng::{rng_for, SimRng};

const TAG_MEANS: u64 = 0x4D45_414E;
const TAG_CLIENT: u64 = 0x434C_4E54;
const TAG_TEST: u64 = 0x5445_5354;
const TAG_SHARE: u64 = 0x5348_4152;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCounts {
    Uniform(usize),
    PerClient(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkewMode {
    /// The first `round(fraction·K)` clients each hold one distinct class;
    /// the rest hold balanced labels.
    SingleClassFraction { fraction: f64 },
    Dirichlet { alpha: f64 },
    /// Client `k` draws a share `strength` of its samples from class
    /// `k mod Y` and the rest evenly from all classes. With `K` a multiple of
    /// `Y` the pooled distribution stays uniform and every client has EMD
    /// `strength·2(Y−1)/Y`.
    DominantClass { strength: f64 },
    /// Balanced labels; client `k` adds Gaussian noise of standard deviation
    /// `levels[k % levels.len()]` to every feature.
    FeatureNoise { levels: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub num_clients: usize,
    pub num_classes: usize,
    pub samples_per_client: SampleCounts,
    pub skew_mode: SkewMode,
    pub rng_seed: u64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Norm of every class mean.
    #[serde(default = "default_class_radius")]
    pub class_radius: f64,
    /// Test pool size relative to the total training volume.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_feature_dim() -> usize {
    32
}
fn default_class_radius() -> f64 {
    4.0
}
fn default_test_fraction() -> f64 {
    0.2
}

impl Scenario {
    pub fn dominant_class(num_clients: usize, num_classes: usize, samples: usize, strength: f64, seed: u64) -> Self {
        Self {
            skew_mode: SkewMode::DominantClass { strength },
            ..Self::label_skew(num_clients, num_classes, samples, 0.0, seed)
        }
    }

    pub fn label_skew(num_clients: usize, num_classes: usize, samples: usize, fraction: f64, seed: u64) -> Self {
        Self {
            num_clients,
            num_classes,
            samples_per_client: SampleCounts::Uniform(samples),
            skew_mode: SkewMode::SingleClassFraction { fraction },
            rng_seed: seed,
            feature_dim: default_feature_dim(),
            class_radius: default_class_radius(),
            test_fraction: default_test_fraction(),
        }
    }

    pub fn sample_counts(&self) -> Result<Vec<usize>> {
        let counts = match &self.samples_per_client {
            SampleCounts::Uniform(n) => vec![*n; self.num_clients],
            SampleCounts::PerClient(v) => v.clone(),
        };
        if counts.len() != self.num_clients {
            return Err(Error::Dimension {
                expected: self.num_clients,
                got: counts.len(),
            });
        }
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::validation("at least 2 clients are required"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("at least 2 classes are required"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim must be positive"));
        }
        if !(self.class_radius >= 0.0) {
            return Err(Error::validation("class_radius must be non-negative"));
        }
        if !(self.test_fraction > 0.0) {
            return Err(Error::validation("test_fraction must be positive"));
        }
        if self.sample_counts()?.contains(&0) {
            return Err(Error::validation("every client needs at least one sample"));
        }
        match &self.skew_mode {
            SkewMode::SingleClassFraction { fraction } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::validation(format!("fraction {fraction} outside [0, 1]")));
                }
                let single = self.num_single_class();
                if single > self.num_classes {
                    return Err(Error::validation(format!(
                        "{single} single-class clients need distinct classes but only {} exist",
                        self.num_classes
                    )));
                }
            }
            SkewMode::Dirichlet { alpha } => {
                if !(*alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::validation(format!("dirichlet alpha {alpha} must be positive")));
                }
            }
            SkewMode::DominantClass { strength } => {
                if !(0.0..=1.0).contains(strength) {
                    return Err(Error::validation(format!("strength {strength} outside [0, 1]")));
                }
            }
            SkewMode::FeatureNoise { levels } => {
                if levels.is_empty() || levels.iter().any(|l| !(*l >= 0.0)) {
                    return Err(Error::validation("noise levels must be non-empty and non-negative"));
                }
            }
        }
        Ok(())
    }

    fn num_single_class(&self) -> usize {
        match self.skew_mode {
            SkewMode::SingleClassFraction { fraction } => {
                (fraction * self.num_clients as f64).round() as usize
            }
            _ => 0,
        }
    }
}

/// One client's (or the test pool's) samples, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub label_distribution: LabelDistribution,
    /// Per-sample pseudo-class from the binned injected-noise magnitude.
    pub strata: Option<Vec<usize>>,
    pub feature_distribution: Option<LabelDistribution>,
}

impl ClientDataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::Dimension {
                expected: dim * labels.len(),
                got: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::validation(format!("label {bad} outside {num_classes} classes")));
        }
        let label_distribution = histogram(&labels, num_classes)?;
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            label_distribution,
            strata: None,
            feature_distribution: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_counts(&self) -> Vec<usize> {
        counts(&self.labels, self.num_classes)
    }

    fn refresh(&mut self) -> Result<()> {
        self.label_distribution = histogram(&self.labels, self.num_classes)?;
        if let Some(s) = &self.strata {
            self.feature_distribution = Some(histogram(s, self.num_classes)?);
        }
        Ok(())
    }

    /// Sample count with the distribution used for heterogeneity: the
    /// feature pseudo-classes when present, labels otherwise.
    pub fn stats(&self) -> ClientLabelStats {
        let dist = self
            .feature_distribution
            .clone()
            .unwrap_or_else(|| self.label_distribution.clone());
        ClientLabelStats::new(self.len(), dist)
    }

    /// Little-endian dump: `u32 d, u32 n_k, u32 Y`, then `n_k·d` f32
    /// features and `n_k` u16 labels.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Unsupported("more classes than a u16 label holds".into()));
        }
        for v in [self.dim, self.len(), self.num_classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &x in &self.features {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&(y as u16).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        let mut header = [0usize; 3];
        for h in &mut header {
            r.read_exact(&mut u32buf)?;
            *h = u32::from_le_bytes(u32buf) as usize;
        }
        let [dim, n, y] = header;
        let mut features = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            r.read_exact(&mut u32buf)?;
            features.push(f32::from_le_bytes(u32buf) as f64);
        }
        let mut u16buf = [0u8; 2];
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u16buf)?;
            labels.push(u16::from_le_bytes(u16buf) as usize);
        }
        Self::new(dim, y, features, labels)
    }
}

fn counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut c = vec![0usize; num_classes];
    for &y in labels {
        c[y] += 1;
    }
    c
}

fn histogram(labels: &[usize], num_classes: usize) -> Result<LabelDistribution> {
    LabelDistribution::from_counts(&counts(labels, num_classes))
}

/// Largest-remainder apportionment of `total` items to `weights`
/// (ties to the lowest index).
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn class_means(scenario: &Scenario) -> Vec<Vec<f64>> {
    let (d, y, r) = (scenario.feature_dim, scenario.num_classes, scenario.class_radius);
    if y <= d {
        (0..y)
            .map(|c| {
                let mut v = vec![0.0; d];
                v[c] = r;
                v
            })
            .collect()
    } else {
        let mut rng = rng_for(scenario.rng_seed, &[TAG_MEANS]);
        (0..y)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * r / norm).collect()
            })
            .collect()
    }
}

fn draw_samples(
    rng: &mut SimRng,
    means: &[Vec<f64>],
    class_counts: &[usize],
    noise: f64,
    noise_cap: f64,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let d = means[0].len();
    let y = means.len();
    let mut labels: Vec<usize> = class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(labels.len() * d);
    let mut strata = Vec::with_capacity(labels.len());
    for &label in &labels {
        let mut energy = 0.0;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            let extra = if noise > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                noise * e
            } else {
                0.0
            };
            energy += extra * extra;
            features.push(means[label][j] + z + extra);
        }
        let rms = (energy / d as f64).sqrt();
        let bin = if noise_cap > 0.0 {
            ((rms / noise_cap * y as f64) as usize).min(y - 1)
        } else {
            0
        };
        strata.push(bin);
    }
    (features, labels, strata)
}

/// Generated training clients, test pool and the pooled global distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub clients: Vec<ClientDataset>,
    pub test: ClientDataset,
    pub global: LabelDistribution,
    /// Pooled feature pseudo-class histogram in feature-noise mode.
    pub global_feature: Option<LabelDistribution>,
}

impl GeneratedData {
    /// Per-client statistics and the matching global distribution.
    pub fn heterogeneity_inputs(&self) -> (Vec<ClientLabelStats>, LabelDistribution) {
        let stats = self.clients.iter().map(ClientDataset::stats).collect();
        let g = self.global_feature.clone().unwrap_or_else(|| self.global.clone());
        (stats, g)
    }
}

pub fn pooled_label_distribution(clients: &[ClientDataset]) -> Result<LabelDistribution> {
    let y = clients.first().map(|c| c.num_classes).unwrap_or(0);
    let mut total = vec![0usize; y];
    for c in clients {
        for (t, n) in total.iter_mut().zip(c.label_counts()) {
            *t += n;
        }
    }
    LabelDistribution::from_counts(&total)
}

pub fn generate(scenario: &Scenario) -> Result<GeneratedData> {
    scenario.validate()?;
    let n_per = scenario.sample_counts()?;
    let y = scenario.num_classes;
    let means = class_means(scenario);
    let single = scenario.num_single_class();
    let noise_cap = match &scenario.skew_mode {
        SkewMode::FeatureNoise { levels } => 1.5 * levels.iter().copied().fold(0.0, f64::max),
        _ => 0.0,
    };

    let mut clients = Vec::with_capacity(scenario.num_clients);
    for (k, &n_k) in n_per.iter().enumerate() {
        let mut rng = rng_for(scenario.rng_seed, &[TAG_CLIENT, k as u64]);
        let (class_counts, noise) = match &scenario.skew_mode {
            SkewMode::SingleClassFraction { .. } if k < single => {
                let mut c = vec![0; y];
                c[k] = n_k;
                (c, 0.0)
            }
            SkewMode::SingleClassFraction { .. } => (apportion(n_k, &vec![1.0; y]), 0.0),
            SkewMode::Dirichlet { alpha } => {
                let gamma = Gamma::new(*alpha, 1.0)
                    .map_err(|e| Error::validation(format!("dirichlet alpha: {e}")))?;
                let mut w: Vec<f64> = (0..y).map(|_| gamma.sample(&mut rng)).collect();
                if w.iter().sum::<f64>() <= 0.0 {
                    // Tiny alpha can underflow every draw; put the mass on one class.
                    w = vec![0.0; y];
                    w[rng.random_range(0..y)] = 1.0;
                }
                (apportion(n_k, &w), 0.0)
            }
            SkewMode::DominantClass { strength } => {
                let mut w = vec![(1.0 - strength) / y as f64; y];
                w[k % y] += strength;
                (apportion(n_k, &w), 0.0)
            }
            SkewMode::FeatureNoise { levels } => {
                (apportion(n_k, &vec![1.0; y]), levels[k % levels.len()])
            }
        };
        let (features, labels, strata) = draw_samples(&mut rng, &means, &class_counts, noise, noise_cap);
        let mut ds = ClientDataset::new(scenario.feature_dim, y, features, labels)?;
        if matches!(scenario.skew_mode, SkewMode::FeatureNoise { .. }) {
            ds.strata = Some(strata);
            ds.refresh()?;
        }
        clients.push(ds);
    }

    let global = pooled_label_distribution(&clients)?;
    let global_feature = if matches!(scenario.skew_mode, SkewMode::FeatureNoise { .. }) {
        let mut total = vec![0usize; y];
        for c in &clients {
            for &s in c.strata.as_ref().unwrap() {
                total[s] += 1;
            }
        }
        Some(LabelDistribution::from_counts(&total)?)
    } else {
        None
    };

    let n_total: usize = n_per.iter().sum();
    let n_test = ((n_total as f64 * scenario.test_fraction).round() as usize).max(y);
    let mut rng = rng_for(scenario.rng_seed, &[TAG_TEST]);
    let test_counts = apportion(n_test, global.probs());
    let (features, labels, _) = draw_samples(&mut rng, &means, &test_counts, 0.0, 0.0);
    let test = ClientDataset::new(scenario.feature_dim, y, features, labels)?;

    Ok(GeneratedData {
        clients,
        test,
        global,
        global_feature,
    })
}

/// Copy shared samples from each head into its members.
///
/// Every member of cluster `m` receives the same `n_m^s` samples, drawn
/// uniformly without replacement from the head's dataset. Heads are left
/// untouched.
pub fn apply_sharing(
    datasets: &[ClientDataset],
    assignment: &ClusterAssignment,
    plan: &SharingPlan,
    rng_seed: u64,
) -> Result<Vec<ClientDataset>> {
    let mut out = datasets.to_vec();
    for (&m, &vol) in &plan.volumes {
        if !assignment.heads.contains(&m) {
            return Err(Error::validation(format!("sharing plan references unknown head {m}")));
        }
        let head = datasets
            .get(m)
            .ok_or_else(|| Error::validation(format!("head {m} out of range")))?;
        if vol > head.len() {
            return Err(Error::ConstraintViolation(format!(
                "head {m} shares {vol} samples but holds only {}",
                head.len()
            )));
        }
        let members = match assignment.members.get(&m) {
            Some(c) if !c.is_empty() && vol > 0 => c,
            _ => continue,
        };
        let mut rng = rng_for(rng_seed, &[TAG_SHARE, m as u64]);
        let picked = rand::seq::index::sample(&mut rng, head.len(), vol).into_vec();
        for &c in members {
            let dst = out
                .get_mut(c)
                .ok_or_else(|| Error::validation(format!("member {c} out of range")))?;
            for &i in &picked {
                dst.features.extend_from_slice(head.feature(i));
                dst.labels.push(head.labels[i]);
            }
            match (&mut dst.strata, &head.strata) {
                (Some(s), Some(hs)) => s.extend(picked.iter().map(|&i| hs[i])),
                (None, None) => {}
                _ => return Err(Error::validation("mixed feature-stratified and plain datasets")),
            }
            dst.refresh()?;
        }
    }
    Ok(out)
}

/// Write one `client_<k>.bin` per client into `dir`.
pub fn dump_clients(dir: &Path, datasets: &[ClientDataset]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, ds) in datasets.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("client_{k}.bin")))?);
        ds.write_binary(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::validation(format!("{} is too short for an IDX file", path.display())));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(Error::validation(format!(
            "{}: magic {magic:#010x}, expected {expected_magic:#010x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xFF) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 4 + 4 * i;
        let raw = bytes
            .get(off..off + 4)
            .ok_or_else(|| Error::validation("truncated IDX header"))?;
        dims.push(u32::from_be_bytes(raw.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::validation("truncated IDX payload"))?
        .to_vec();
    Ok((dims, data))
}

/// Load an IDX image/label pair (unsigned byte data), scaling pixels to [0, 1].
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<ClientDataset> {
    let (img_dims, pixels) = read_idx(images, 0x0000_0803)?;
    let (lbl_dims, lbl) = read_idx(labels, 0x0000_0801)?;
    if img_dims[0] != lbl_dims[0] {
        return Err(Error::Dimension {
            expected: img_dims[0],
            got: lbl_dims[0],
        });
    }
    let dim = img_dims[1..].iter().product();
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    ClientDataset::new(dim, num_classes, features, lbl.iter().map(|&y| y as usize).collect())
}

/// Per-class sample counts of every client, keyed by client id.
pub fn class_histograms(datasets: &[ClientDataset]) -> BTreeMap<usize, Vec<usize>> {
    datasets.iter().enumerate().map(|(k, d)| (k, d.label_counts())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetero::{average_emd, emd, mix_distribution};
    #[test]
    fn regeneration_is_bit_identical() {
        let s = Scenario::label_skew(4, 5, 50, 0.5, 11);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let mut other = s.clone();
        other.rng_seed = 12;
        assert_ne!(generate(&s).unwrap().clients, generate(&other).unwrap().clients);
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let mut s = Scenario::label_skew(6, 10, 400, 0.0, 3);
        s.skew_mode = SkewMode::Dirichlet { alpha: 1e6 };
        let data = generate(&s).unwrap();
        let u = LabelDistribution::uniform(10);
        for c in &data.clients {
            assert!(emd(&c.label_distribution, &u).unwrap() < 0.05);
        }
    }

    #[test]
    fn all_single_class_average_emd() {
        let y = 10;
        let s = Scenario::label_skew(10, y, 60, 1.0, 1);
        let data = generate(&s).unwrap();
        let (stats, g) = data.heterogeneity_inputs();
        let expected = 2.0 * (y as f64 - 1.0) / y as f64;
        assert!((average_emd(&stats, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dominant_class_emd_is_linear_in_strength() {
        for strength in [0.0, 0.3, 0.7, 1.0] {
            let data = generate(&Scenario::dominant_class(10, 5, 100, strength, 4)).unwrap();
            let (stats, g) = data.heterogeneity_inputs();
            assert_eq!(g, LabelDistribution::uniform(5));
            let expected = strength * 1.6;
            assert!((average_emd(&stats, &g).unwrap() - expected).abs() < 0.02, "{strength}");
        }
    }

    #[test]
    fn too_many_single_class_clients() {
        let s = Scenario::label_skew(6, 5, 10, 1.0, 1);
        assert!(matches!(generate(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_noise_gives_identical_feature_distributions() {
        let mut s = Scenario::label_skew(4, 5, 100, 0.0, 2);
        s.skew_mode = SkewMode::FeatureNoise { levels: vec![0.0] };
        let data = generate(&s).unwrap();
        let first = data.clients[0].feature_distribution.clone().unwrap();
        for c in &data.clients {
            assert_eq!(c.feature_distribution.as_ref().unwrap(), &first);
        }

        s.skew_mode = SkewMode::FeatureNoise { levels: vec![0.0, 1.0, 2.0, 3.0] };
        let data = generate(&s).unwrap();
        let (stats, g) = data.heterogeneity_inputs();
        assert!(average_emd(&stats, &g).unwrap() > 0.5);
    }

    #[test]
    fn test_pool_follows_global() {
        let s = Scenario::label_skew(5, 5, 100, 0.6, 9);
        let data = generate(&s).unwrap();
        assert_eq!(data.test.len(), 100);
        assert!(emd(&data.test.label_distribution, &data.global).unwrap() < 0.02);
    }

    fn shared_setup() -> (Vec<ClientDataset>, ClusterAssignment) {
        let s = Scenario::label_skew(3, 4, 1200, 1.0 / 3.0, 5);
        let data = generate(&s).unwrap();
        // Client 0 single-class; clients 1, 2 balanced. Head 1 shares to 0 and 2.
        let a = ClusterAssignment::from_head_of(&[Some(1), None, Some(1)]);
        (data.clients, a)
    }

    #[test]
    fn zero_volume_is_a_no_op() {
        let (ds, a) = shared_setup();
        let plan = SharingPlan {
            volumes: [(1, 0)].into(),
            ..Default::default()
        };
        assert_eq!(apply_sharing(&ds, &a, &plan, 1).unwrap(), ds);
    }

    #[test]
    fn multicast_copies_identical_subsets() {
        let (ds, a) = shared_setup();
        let vol = 300;
        let plan = SharingPlan {
            volumes: [(1, vol)].into(),
            ..Default::default()
        };
        let out = apply_sharing(&ds, &a, &plan, 4).unwrap();
        assert_eq!(out[1], ds[1]);
        let tail = |k: usize| {
            let d = &out[k];
            (
                d.features[ds[k].features.len()..].to_vec(),
                d.labels[ds[k].labels.len()..].to_vec(),
            )
        };
        assert_eq!(tail(0), tail(2));
        let before: usize = ds.iter().map(ClientDataset::len).sum();
        let after: usize = out.iter().map(ClientDataset::len).sum();
        assert_eq!(after, before + 2 * vol);
    }

    #[test]
    fn volume_above_head_size_is_rejected() {
        let (ds, a) = shared_setup();
        let plan = SharingPlan {
            volumes: [(1, 1201)].into(),
            ..Default::default()
        };
        assert!(matches!(apply_sharing(&ds, &a, &plan, 1), Err(Error::ConstraintViolation(_))));
        let unknown = SharingPlan {
            volumes: [(0, 1)].into(),
            ..Default::default()
        };
        assert!(matches!(apply_sharing(&ds, &a, &unknown, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn full_share_matches_mixture_in_seed_average() {
        let mut s = Scenario::label_skew(3, 4, 1000, 0.0, 8);
        s.skew_mode = SkewMode::Dirichlet { alpha: 0.5 };
        let data = generate(&s).unwrap();
        let a = ClusterAssignment::from_head_of(&[None, Some(0), None]);
        let plan = SharingPlan {
            volumes: [(0, 1000)].into(),
            ..Default::default()
        };
        let (_, expected) = mix_distribution(
            1000,
            &data.clients[1].label_distribution,
            1000,
            &data.clients[0].label_distribution,
        )
        .unwrap();
        let seeds = 5;
        let mut avg = vec![0.0; 4];
        for seed in 0..seeds {
            let out = apply_sharing(&data.clients, &a, &plan, seed).unwrap();
            for (a, p) in avg.iter_mut().zip(out[1].label_distribution.probs()) {
                *a += p / seeds as f64;
            }
        }
        let gap: f64 = avg.iter().zip(expected.probs()).map(|(a, b)| (a - b).abs()).sum();
        assert!(gap <= 0.1, "gap {gap}");
    }

    #[test]
    fn binary_round_trip() {
        let s = Scenario::label_skew(2, 3, 7, 0.5, 1);
        let data = generate(&s).unwrap();
        let mut buf = Vec::new();
        data.clients[0].write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 7 * 32 * 4 + 7 * 2);
        let back = ClientDataset::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.labels, data.clients[0].labels);
        for (a, b) in back.features.iter().zip(&data.clients[0].features) {
            assert!((a - b).abs() < 1e-5);
        }
        let dir = tempfile::tempdir().unwrap();
        dump_clients(dir.path(), &data.clients).unwrap();
        assert!(dir.path().join("client_1.bin").exists());
    }

    #[test]
    fn idx_loader() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut ib = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        ib.extend([0u8, 255, 51, 102, 1, 2, 3, 4]);
        std::fs::write(&img, ib).unwrap();
        std::fs::write(&lbl, [0u8, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let ds = load_idx(&img, &lbl, 2).unwrap();
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.features[1], 1.0);
        assert!(load_idx(&lbl, &img, 2).is_err());
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 7);
    }
}
