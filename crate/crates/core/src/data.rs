//! Synthetic point-process datasets on the unit square.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointset::PointSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Thomas,
    Matern,
    Mixture,
}

impl SimKind {
    pub const ALL: [SimKind; 3] = [SimKind::Thomas, SimKind::Matern, SimKind::Mixture];

    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::Thomas => "thomas",
            SimKind::Matern => "matern",
            SimKind::Mixture => "mixture",
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

/// Mixture component means.
pub const MIXTURE_MEANS: [[f64; 2]; 3] = [[0.3, 0.3], [0.5, 0.7], [0.7, 0.3]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: SimKind,
    /// Expected number of parents (cluster processes).
    pub parent_rate: f64,
    /// Expected number of children per parent.
    pub child_rate: f64,
    /// Thomas offset and mixture component standard deviation.
    pub sigma: f64,
    /// Matérn disc radius.
    pub radius: f64,
    /// Expected number of mixture points before discarding.
    pub mixture_rate: f64,
    /// Parents are drawn on `[-buffer, 1 + buffer]²`.
    pub buffer: f64,
}

impl SimConfig {
    pub fn thomas() -> Self {
        Self {
            kind: SimKind::Thomas,
            parent_rate: 3.0,
            child_rate: 5.0,
            sigma: 0.01,
            radius: 0.1,
            mixture_rate: 64.0,
            buffer: 0.05,
        }
    }

    pub fn matern() -> Self {
        Self {
            kind: SimKind::Matern,
            buffer: 0.1,
            ..Self::thomas()
        }
    }

    pub fn mixture() -> Self {
        Self {
            kind: SimKind::Mixture,
            sigma: 0.05,
            buffer: 0.0,
            ..Self::thomas()
        }
    }

    pub fn for_kind(kind: SimKind) -> Self {
        match kind {
            SimKind::Thomas => Self::thomas(),
            SimKind::Matern => Self::matern(),
            SimKind::Mixture => Self::mixture(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.parent_rate, self.child_rate, self.mixture_rate, self.buffer];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("rates and buffer must be finite and non-negative".into()));
        }
        let needs_sigma = matches!(self.kind, SimKind::Thomas | SimKind::Mixture);
        if needs_sigma && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.kind == SimKind::Matern && !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("radius must be positive".into()));
        }
        Ok(())
    }
}

fn poisson(rate: f64, rng: &mut impl Rng) -> usize {
    if rate == 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn inside_unit(p: &[f64; 2]) -> bool {
    p.iter().all(|v| *v > 0.0 && *v < 1.0)
}

fn parents(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let m = poisson(cfg.parent_rate, rng);
    let (lo, hi) = (-cfg.buffer, 1.0 + cfg.buffer);
    (0..m).map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).collect()
}

fn collect(points: Vec<[f64; 2]>) -> PointSet {
    let coords = points.into_iter().filter(inside_unit).flatten().collect();
    PointSet::new(2, coords).expect("two coordinates per point")
}

/// Gaussian clusters around uniformly placed parents; parents are not emitted.
pub fn simulate_thomas(cfg: &SimConfig, rng: &mut impl Rng) -> PointSet {
    let offset = Normal::new(0.0, cfg.sigma).expect("valid sigma");
    let mut pts = Vec::new();
    for p in parents(cfg, rng) {
        for _ in 0..poisson(cfg.child_rate, rng) {
            pts.push([p[0] + offset.sample(rng), p[1] + offset.sample(rng)]);
        }
    }
    collect(pts)
}

/// Children uniform in discs of radius `cfg.radius` around each parent.
pub fn simulate_matern(cfg: &SimConfig, rng: &mut impl Rng) -> PointSet {
    let mut pts = Vec::new();
    for p in parents(cfg, rng) {
        for _ in 0..poisson(cfg.child_rate, rng) {
            let r = cfg.radius * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            pts.push([p[0] + r * a.cos(), p[1] + r * a.sin()]);
        }
    }
    collect(pts)
}

/// Equal-weight mixture of three isotropic Gaussians.
pub fn simulate_mixture(cfg: &SimConfig, rng: &mut impl Rng) -> PointSet {
    let noise = Normal::new(0.0, cfg.sigma).expect("valid sigma");
    let n = poisson(cfg.mixture_rate, rng);
    let pts = (0..n)
        .map(|_| {
            let c = MIXTURE_MEANS[rng.gen_range(0..MIXTURE_MEANS.len())];
            [c[0] + noise.sample(rng), c[1] + noise.sample(rng)]
        })
        .collect();
    collect(pts)
}

pub fn simulate(cfg: &SimConfig, rng: &mut impl Rng) -> PointSet {
    match cfg.kind {
        SimKind::Thomas => simulate_thomas(cfg, rng),
        SimKind::Matern => simulate_matern(cfg, rng),
        SimKind::Mixture => simulate_mixture(cfg, rng),
    }
}

/// Random stream for realization `index` of a dataset with `seed`.
pub fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub const MIN_COUNT: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: SimKind,
    pub seed: u64,
    pub train: Vec<PointSet>,
    pub val: Vec<PointSet>,
    pub test: Vec<PointSet>,
}

/// Split sizes `⌊0.6c⌋ / ⌊0.2c⌋ / remainder`.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 6 / 10;
    let val = count * 2 / 10;
    (train, val, count - train - val)
}

/// `count` nonempty realizations split 60/20/20.
pub fn make_dataset_with(cfg: &SimConfig, count: usize, seed: u64) -> Result<Dataset> {
    if count < MIN_COUNT {
        return Err(Error::Config(format!("count must be at least {MIN_COUNT}, got {count}")));
    }
    cfg.validate()?;
    let mut sets = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = realization_rng(seed, i as u64);
        let mut tries = 0;
        let set = loop {
            let s = simulate(cfg, &mut rng);
            if !s.is_empty() {
                break s;
            }
            tries += 1;
            if tries > 100_000 {
                return Err(Error::Config("simulation keeps producing empty realizations".into()));
            }
        };
        sets.push(set);
    }
    let (a, b, _) = split_sizes(count);
    let test = sets.split_off(a + b);
    let val = sets.split_off(a);
    Ok(Dataset {
        kind: cfg.kind,
        seed,
        train: sets,
        val,
        test,
    })
}

pub fn make_dataset(kind: SimKind, count: usize, seed: u64) -> Result<Dataset> {
    make_dataset_with(&SimConfig::for_kind(kind), count, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: String,
    pub val: String,
    pub test: String,
    pub seed: u64,
    pub kind: String,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_jsonl(path: &Path, sets: &[PointSet]) -> Result<()> {
    let mut text = String::new();
    for s in sets {
        text.push_str(&s.to_json());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_jsonl(path: &Path, dim: usize) -> Result<Vec<PointSet>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| PointSet::from_json(l, dim))
        .collect()
}

impl Dataset {
    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `manifest.json`
    /// into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, sets) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_jsonl(&dir.join(format!("{name}.jsonl")), sets)?;
        }
        let manifest = Manifest {
            train: "train.jsonl".into(),
            val: "val.jsonl".into(),
            test: "test.jsonl".into(),
            seed: self.seed,
            kind: self.kind.to_string(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset from a manifest file or a directory containing one.
    /// Relative split paths are resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        Ok(Self {
            kind: m.kind.parse()?,
            seed: m.seed,
            train: read_jsonl(&resolve(&m.train), 2)?,
            val: read_jsonl(&resolve(&m.val), 2)?,
            test: read_jsonl(&resolve(&m.test), 2)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn no_parents_means_no_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [SimKind::Thomas, SimKind::Matern] {
            let cfg = SimConfig {
                parent_rate: 0.0,
                ..SimConfig::for_kind(kind)
            };
            assert!(simulate(&cfg, &mut rng).is_empty());
        }
        let cfg = SimConfig {
            mixture_rate: 0.0,
            ..SimConfig::mixture()
        };
        assert!(simulate(&cfg, &mut rng).is_empty());
    }

    #[test]
    fn tiny_sigma_collapses_children_onto_parents() {
        let cfg = SimConfig {
            sigma: 1e-12,
            buffer: 0.0,
            ..SimConfig::thomas()
        };
        for seed in 0..50 {
            let ps = parents(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let s = simulate_thomas(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for p in s.points() {
                assert!(ps.iter().any(|q| (p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn matern_children_stay_near_a_parent() {
        // Parents are recovered by replaying the same stream.
        let cfg = SimConfig::matern();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ps = parents(&cfg, &mut rng);
            let s = simulate_matern(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for p in s.points() {
                let near = ps
                    .iter()
                    .any(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() <= cfg.radius + 1e-12);
                assert!(near);
            }
        }
    }

    #[test]
    fn emitted_points_are_inside_the_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in SimKind::ALL {
            for _ in 0..200 {
                let s = simulate(&SimConfig::for_kind(kind), &mut rng);
                assert!(s.points().all(|p| p.iter().all(|v| *v > 0.0 && *v < 1.0)));
            }
        }
    }

    #[test]
    fn split_sizes_follow_sixty_twenty_twenty() {
        assert_eq!(split_sizes(1000), (600, 200, 200));
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(7), (4, 1, 2));
        assert!(make_dataset(SimKind::Thomas, 3, 0).is_err());
    }

    #[test]
    fn datasets_are_deterministic_and_nonempty() {
        let a = make_dataset(SimKind::Thomas, 40, 7).unwrap();
        let b = make_dataset(SimKind::Thomas, 40, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (24, 8, 8));
        assert!(a.train.iter().chain(&a.val).chain(&a.test).all(|s| !s.is_empty()));
        let c = make_dataset(SimKind::Thomas, 40, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn files_round_trip_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(SimKind::Mixture, 10, 3).unwrap();
        let m1 = ds.write(&dir.path().join("a")).unwrap();
        let m2 = ds.write(&dir.path().join("b")).unwrap();
        for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
            let x = fs::read(dir.path().join("a").join(f)).unwrap();
            let y = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        assert_eq!(Dataset::load(&m1).unwrap(), ds);
        assert_eq!(Dataset::load(m2.parent().unwrap()).unwrap(), ds);
    }
}
