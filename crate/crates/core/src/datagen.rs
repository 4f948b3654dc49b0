//! Synthetic SE(2) navigation data: a random-heading walk for ground truth,
//! GPS fixes and odometry with Gaussian noise at known variances, and
//! on-disk datasets described by a manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NoiseParams;
use crate::learner::TrajectoryExample;
use crate::liegroup::{Pose2, TangentVec};
use crate::smoother::SmootherConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    pub step_length: f64,
    pub heading_std: f64,
}

/// Named generating parameters shipped as config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub theta_star: NoiseParams,
    pub motion: Motion,
}

const BUILTIN_PRESETS: [(&str, &str); 2] = [
    ("d1", include_str!("../presets/d1.toml")),
    ("d2", include_str!("../presets/d2.toml")),
];

impl Preset {
    /// A built-in preset by name, or a preset file by path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let lower = name_or_path.to_ascii_lowercase();
        if let Some((_, text)) = BUILTIN_PRESETS.iter().find(|(n, _)| *n == lower) {
            return Self::parse(text);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Config(format!(
                "unknown preset '{name_or_path}' (built-in: d1, d2)"
            )));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let preset: Preset =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid preset: {e}")))?;
        preset.validate()?;
        Ok(preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.theta_star.validate()?;
        if !(self.motion.step_length > 0.0 && self.motion.step_length.is_finite()) {
            return Err(Error::Config("step_length must be positive".into()));
        }
        if !(self.motion.heading_std >= 0.0 && self.motion.heading_std.is_finite()) {
            return Err(Error::Config("heading_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub len: usize,
    pub n_traj: usize,
    pub theta_star: NoiseParams,
    pub motion: Motion,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(Error::Config(format!("trajectory length must be at least 2, got {}", self.len)));
        }
        Preset {
            name: String::new(),
            theta_star: self.theta_star,
            motion: self.motion,
        }
        .validate()
    }
}

/// Ground truth and measurements of one trajectory. `odom[i]` links poses
/// `i` and `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub gt: Vec<Pose2>,
    pub gps: Vec<Vector2<f64>>,
    pub odom: Vec<Pose2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gt.len();
        if n == 0 || self.gps.len() != n || self.odom.len() + 1 != n {
            return Err(Error::InvalidGraph(format!(
                "trajectory has {} poses, {} gps and {} odometry records",
                n,
                self.gps.len(),
                self.odom.len()
            )));
        }
        Ok(())
    }

    pub fn to_example(&self, smoother: SmootherConfig) -> Result<TrajectoryExample> {
        TrajectoryExample::from_measurements(&self.gps, &self.odom, self.gt.clone(), smoother)
    }
}

/// Pose 0 at the identity; every step moves `step_length` forward after
/// turning by a heading increment drawn from `N(0, heading_std²)`.
pub fn generate_gt<R: Rng + ?Sized>(len: usize, motion: &Motion, rng: &mut R) -> Vec<Pose2> {
    let turn = Normal::new(0.0, motion.heading_std).expect("heading_std is finite and nonnegative");
    let mut poses = Vec::with_capacity(len);
    if len == 0 {
        return poses;
    }
    poses.push(Pose2::identity());
    for _ in 1..len {
        let step = Pose2::new(motion.step_length, 0.0, turn.sample(rng));
        let next = poses.last().expect("nonempty").compose(&step);
        poses.push(next);
    }
    poses
}

/// GPS: position plus `N(0, diag(θ_gps))`. Odometry: `Exp(η) ∘ (gt_{i−1}⁻¹ ∘ gt_i)`
/// with `η ~ N(0, diag(θ_odom))`. Variances are used as given, so zero
/// yields exact measurements.
pub fn simulate_measurements<R: Rng + ?Sized>(gt: &[Pose2], theta_star: &NoiseParams, rng: &mut R) -> Trajectory {
    let mut noise = |var: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * var.sqrt()
    };
    let mut gps = Vec::with_capacity(gt.len());
    let mut odom = Vec::with_capacity(gt.len().saturating_sub(1));
    for (i, pose) in gt.iter().enumerate() {
        if i > 0 {
            let eta = TangentVec::new(
                noise(theta_star.odom[0]),
                noise(theta_star.odom[1]),
                noise(theta_star.odom[2]),
            );
            odom.push(eta.exp().compose(&gt[i - 1].between(pose)));
        }
        gps.push(pose.translation() + Vector2::new(noise(theta_star.gps[0]), noise(theta_star.gps[1])));
    }
    Trajectory {
        gt: gt.to_vec(),
        gps,
        odom,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    GroundTruth = 0,
    Noise = 1,
}

/// Independent stream per (split, trajectory, purpose), so trajectory `i`
/// does not depend on how many others are generated.
fn stream_rng(seed: u64, split: u64, index: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 48) | ((index as u64) << 8) | purpose as u64);
    rng
}

pub fn generate_trajectory(config: &GenConfig, split: u64, index: usize) -> Trajectory {
    let gt = generate_gt(config.len, &config.motion, &mut stream_rng(config.seed, split, index, Purpose::GroundTruth));
    simulate_measurements(&gt, &config.theta_star, &mut stream_rng(config.seed, split, index, Purpose::Noise))
}

pub fn generate(config: &GenConfig, split: u64) -> Result<Vec<Trajectory>> {
    config.validate()?;
    Ok((0..config.n_traj).map(|i| generate_trajectory(config, split, i)).collect())
}

#[derive(Serialize, Deserialize)]
struct Line {
    t: usize,
    #[serde(flatten)]
    body: Body,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    PoseGt { x: f64, y: f64, theta: f64 },
    Gps { x: f64, y: f64 },
    Odom { dx: f64, dy: f64, dtheta: f64 },
}

/// JSON lines: per time step the ground-truth pose and GPS fix, followed
/// for `t ≥ 1` by the odometry from `t − 1` to `t`.
pub fn write_trajectory<W: Write>(traj: &Trajectory, out: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    let mut emit = |line: Line| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")
    };
    for (t, pose) in traj.gt.iter().enumerate() {
        emit(Line {
            t,
            body: Body::PoseGt {
                x: pose.x(),
                y: pose.y(),
                theta: pose.theta(),
            },
        })?;
        emit(Line {
            t,
            body: Body::Gps {
                x: traj.gps[t][0],
                y: traj.gps[t][1],
            },
        })?;
        if t > 0 {
            let z = &traj.odom[t - 1];
            emit(Line {
                t,
                body: Body::Odom {
                    dx: z.x(),
                    dy: z.y(),
                    dtheta: z.theta(),
                },
            })?;
        }
    }
    w.flush()
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut gt = Vec::new();
    let mut gps = Vec::new();
    let mut odom = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let (slot, expected) = match rec.body {
            Body::PoseGt { x, y, theta } => {
                gt.push(Pose2::new(x, y, theta));
                ("pose_gt", gt.len() - 1)
            }
            Body::Gps { x, y } => {
                gps.push(Vector2::new(x, y));
                ("gps", gps.len() - 1)
            }
            Body::Odom { dx, dy, dtheta } => {
                odom.push(Pose2::new(dx, dy, dtheta));
                ("odom", odom.len())
            }
        };
        if rec.t != expected {
            return Err(parse_err(i + 1, format!("{slot} record has t = {}, expected {expected}", rec.t)));
        }
    }
    let traj = Trajectory { gt, gps, odom };
    traj.validate().map_err(|e| parse_err(0, e.to_string()))?;
    Ok(traj)
}

/// Records every dataset file opened through it.
#[derive(Debug, Default)]
pub struct AccessLog {
    paths: Mutex<Vec<PathBuf>>,
}

impl AccessLog {
    pub fn record(&self, path: &Path) {
        self.paths.lock().expect("access log poisoned").push(path.to_path_buf());
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.lock().expect("access log poisoned").clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training set of the finite-difference learner.
    Train,
    /// Training set of the energy-based baseline.
    TrainLeo,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TrainLeo, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TrainLeo => "train_leo",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitShape {
    pub split: Split,
    pub n_traj: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub preset: String,
    pub theta_star: NoiseParams,
    pub motion: Motion,
    pub seed: u64,
    pub splits: Vec<SplitShape>,
}

impl Manifest {
    /// Five training trajectories of length 100, five of length 300 for
    /// the baseline, twenty test trajectories of length 300.
    pub fn with_default_shape(preset: &Preset, seed: u64) -> Self {
        Self::new(preset, seed, (5, 100), (5, 300), (20, 300))
    }

    pub fn new(
        preset: &Preset,
        seed: u64,
        train: (usize, usize),
        train_leo: (usize, usize),
        test: (usize, usize),
    ) -> Self {
        let shape = |split, (n_traj, len)| SplitShape { split, n_traj, len };
        Self {
            preset: preset.name.clone(),
            theta_star: preset.theta_star,
            motion: preset.motion,
            seed,
            splits: vec![
                shape(Split::Train, train),
                shape(Split::TrainLeo, train_leo),
                shape(Split::Test, test),
            ],
        }
    }

    pub fn shape(&self, split: Split) -> Option<SplitShape> {
        self.splits.iter().copied().find(|s| s.split == split)
    }

    pub fn gen_config(&self, split: Split) -> Result<GenConfig> {
        let shape = self
            .shape(split)
            .ok_or_else(|| Error::Config(format!("manifest has no {} split", split.dir_name())))?;
        Ok(GenConfig {
            len: shape.len,
            n_traj: shape.n_traj,
            theta_star: self.theta_star,
            motion: self.motion,
            seed: self.seed,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn trajectory_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.dir_name()).join(format!("traj_{index:03}.jsonl"))
}

/// Writes every split of `manifest` under `dir`, plus the manifest itself.
pub fn make_dataset(manifest: &Manifest, dir: &Path) -> Result<()> {
    for shape in &manifest.splits {
        let config = manifest.gen_config(shape.split)?;
        config.validate()?;
        let split_dir = dir.join(shape.split.dir_name());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        for index in 0..shape.n_traj {
            let traj = generate_trajectory(&config, shape.split.stream_id(), index);
            let path = trajectory_path(dir, shape.split, index);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_trajectory(&traj, file).map_err(|e| Error::io(&path, e))?;
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads the first `limit` (default all) trajectories of a split.
pub fn load_split(dir: &Path, split: Split, limit: Option<usize>, audit: Option<&AccessLog>) -> Result<Vec<Trajectory>> {
    let manifest = Manifest::read(dir)?;
    let shape = manifest
        .shape(split)
        .ok_or_else(|| Error::Config(format!("{} has no {} split", dir.display(), split.dir_name())))?;
    let count = match limit {
        Some(n) if n > shape.n_traj => {
            return Err(Error::Config(format!(
                "requested {n} {} trajectories but only {} exist",
                split.dir_name(),
                shape.n_traj
            )))
        }
        Some(n) => n,
        None => shape.n_traj,
    };
    (0..count)
        .map(|i| {
            let path = trajectory_path(dir, split, i);
            if let Some(log) = audit {
                log.record(&path);
            }
            read_trajectory(&path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn d1() -> Preset {
        Preset::load("d1").unwrap()
    }

    #[test]
    fn builtin_presets_parse() {
        let a = d1();
        assert_eq!(a.theta_star.to_array(), [0.25, 0.25, 0.01, 0.01, 0.0025]);
        let b = Preset::load("D2").unwrap();
        assert_eq!(b.theta_star.to_array(), [2.25, 2.25, 0.04, 0.04, 0.01]);
        assert_eq!(b.motion, Motion { step_length: 1.0, heading_std: 0.1 });
        assert!(Preset::load("d3").is_err());
        assert!(Preset::parse("name = \"x\"\n[theta_star]\ngps=[0,1]\nodom=[1,1,1]\n[motion]\nstep_length=1\nheading_std=0\n").is_err());
    }

    #[test]
    fn straight_line() {
        let motion = Motion { step_length: 1.0, heading_std: 0.0 };
        let poses = generate_gt(3, &motion, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(poses, vec![Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.0, 0.0, 0.0), Pose2::new(2.0, 0.0, 0.0)]);
    }

    #[test]
    fn steps_have_fixed_length_and_are_seeded() {
        let motion = Motion { step_length: 1.5, heading_std: 0.3 };
        let a = generate_gt(50, &motion, &mut ChaCha8Rng::seed_from_u64(4));
        let b = generate_gt(50, &motion, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        for w in a.windows(2) {
            assert_abs_diff_eq!(w[0].between(&w[1]).translation().norm(), 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_noise_measurements_are_exact() {
        let motion = Motion { step_length: 1.0, heading_std: 0.2 };
        let gt = generate_gt(20, &motion, &mut ChaCha8Rng::seed_from_u64(1));
        let traj = simulate_measurements(&gt, &NoiseParams::from_array([0.0; 5]), &mut ChaCha8Rng::seed_from_u64(2));
        for (p, z) in gt.iter().zip(&traj.gps) {
            assert_eq!(p.translation(), *z);
        }
        for (w, z) in gt.windows(2).zip(&traj.odom) {
            assert!(crate::liegroup::ominus(&w[0].between(&w[1]), z).as_vector().amax() < 1e-15);
        }
    }

    #[test]
    fn gps_noise_variance_and_whiteness() {
        let theta = NoiseParams::new([0.25, 2.25], [0.01, 0.01, 0.0025]).unwrap();
        let gt = vec![Pose2::identity(); 10_000];
        let traj = simulate_measurements(&gt, &theta, &mut ChaCha8Rng::seed_from_u64(9));
        for c in 0..2 {
            let e: Vec<f64> = traj.gps.iter().map(|z| z[c]).collect();
            let var = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
            assert!((var / theta.gps[c] - 1.0).abs() < 0.05, "channel {c}: {var}");
            let lag1 = e.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (e.len() - 1) as f64 / var;
            assert!(lag1.abs() < 0.05, "lag-1 autocorrelation {lag1}");
        }
    }

    #[test]
    fn topology_and_seed_isolation() {
        let p = d1();
        let config = |n_traj| GenConfig {
            len: 30,
            n_traj,
            theta_star: p.theta_star,
            motion: p.motion,
            seed: 17,
        };
        let few = generate(&config(2), 0).unwrap();
        let many = generate(&config(6), 0).unwrap();
        assert_eq!(few[0], many[0]);
        assert_ne!(many[0], many[1]);
        for t in &many {
            assert_eq!((t.gt.len(), t.gps.len(), t.odom.len()), (30, 30, 29));
        }
        assert_ne!(generate(&config(1), 1).unwrap()[0], few[0]);
        assert!(generate(&GenConfig { len: 1, ..config(1) }, 0).is_err());
    }

    #[test]
    fn trajectory_file_roundtrip_and_format() {
        let p = d1();
        let config = GenConfig { len: 4, n_traj: 1, theta_star: p.theta_star, motion: p.motion, seed: 3 };
        let traj = generate_trajectory(&config, 0, 0);
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4 + 4 + 3);
        assert!(lines[0].starts_with(r#"{"t":0,"kind":"pose_gt","x":"#));
        assert!(lines[1].starts_with(r#"{"t":0,"kind":"gps","x":"#));
        assert!(lines[4].starts_with(r#"{"t":1,"kind":"odom","dx":"#));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, &text).unwrap();
        assert_eq!(read_trajectory(&path).unwrap(), traj);

        fs::write(&path, text.replace("\"t\":2,\"kind\":\"gps\"", "\"t\":5,\"kind\":\"gps\"")).unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Parse { line: 7, .. })));
        fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dataset_regenerates_byte_identical() {
        let manifest = Manifest::new(&d1(), 11, (2, 10), (1, 12), (3, 15));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset(&manifest, a.path()).unwrap();
        let reread = Manifest::read(a.path()).unwrap();
        assert_eq!(reread, manifest);
        make_dataset(&reread, b.path()).unwrap();
        for split in Split::ALL {
            let shape = manifest.shape(split).unwrap();
            for i in 0..shape.n_traj {
                let fa = fs::read(trajectory_path(a.path(), split, i)).unwrap();
                let fb = fs::read(trajectory_path(b.path(), split, i)).unwrap();
                assert_eq!(fa, fb);
            }
        }
        let log = AccessLog::default();
        let test = load_split(a.path(), Split::Test, None, Some(&log)).unwrap();
        assert_eq!(test.len(), 3);
        assert_eq!(test[0].len(), 15);
        assert_eq!(log.paths().len(), 3);
        assert!(load_split(a.path(), Split::Train, Some(5), None).is_err());
    }

    #[test]
    fn default_shape() {
        let m = Manifest::with_default_shape(&d1(), 0);
        let dims: Vec<_> = Split::ALL.iter().map(|s| m.shape(*s).map(|x| (x.n_traj, x.len)).unwrap()).collect();
        assert_eq!(dims, vec![(5, 100), (5, 300), (20, 300)]);
    }
}
