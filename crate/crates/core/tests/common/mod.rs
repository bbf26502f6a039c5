#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use msflow::flow::State;
use msflow::harness::{cmd_train, ExperimentConfig};
use msflow::net::VelocityNet;
use msflow::rng;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn gmm_config() -> ExperimentConfig {
    ExperimentConfig::load(configs_dir().join("gmm_inpaint.toml")).unwrap()
}

/// The flow trained from the GMM config, trained once per test binary.
/// Every call returns a copy with fresh counters.
pub fn trained_gmm_net() -> VelocityNet {
    static NET: OnceLock<VelocityNet> = OnceLock::new();
    NET.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        cmd_train(&gmm_config(), dir.path()).unwrap();
        VelocityNet::load(dir.path().join("model.ckpt")).unwrap()
    })
    .clone()
}

pub fn random_state(d: usize, seed: u64) -> State {
    rng::standard_normal(&mut rng::seeded(seed), d)
}

/// `|a - b| / |b|`, or `|a - b|` when `b` vanishes.
pub fn rel_err(a: &State, b: &State) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(x: &State, eps: f64, mut f: impl FnMut(&State) -> f64) -> State {
    State::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        p[i] += eps;
        let mut m = x.clone();
        m[i] -= eps;
        (f(&p) - f(&m)) / (2.0 * eps)
    })
}

/// Euclidean nearest-neighbour distance from `x` to `cloud`, skipping the
/// entry at `skip`.
pub fn nn_distance(x: &State, cloud: &[State], skip: Option<usize>) -> f64 {
    cloud
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, c)| (x - c).norm())
        .fold(f64::INFINITY, f64::min)
}
