//! Stored K-FAC and gradient-descent trajectories on the ill-conditioned toy
//! regression. Set `KFAC_PIPE_REGEN_FIXTURE=1` to rewrite the file.

use std::path::PathBuf;

use kfac_pipe::kfac::{train_toy, ConvergenceFixture};

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_convergence.json")
}

fn load() -> ConvergenceFixture {
    let path = fixture_path();
    if std::env::var_os("KFAC_PIPE_REGEN_FIXTURE").is_some() {
        let f = ConvergenceFixture::generate().unwrap();
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut text = serde_json::to_string_pretty(&f).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn trajectories_replay_bit_identically() {
    let f = load();
    let kfac = train_toy(&f.kfac).unwrap();
    let gd = train_toy(&f.gd_best).unwrap();
    for (a, b) in kfac.points.iter().zip(&f.kfac_trajectory.points) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "kfac step {}", a.step);
    }
    for (a, b) in gd.points.iter().zip(&f.gd_trajectory.points) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "gd step {}", a.step);
    }
    assert_eq!(kfac, f.kfac_trajectory);
    assert_eq!(gd, f.gd_trajectory);
}

#[test]
fn stored_fixture_matches_a_fresh_run() {
    assert_eq!(load(), ConvergenceFixture::generate().unwrap());
}

#[test]
fn kfac_needs_fewer_steps_than_the_best_gradient_descent() {
    let f = load();
    assert_eq!(f.gd_grid.len(), 5);
    let best = f.gd_steps_to_target.iter().flatten().min().copied().unwrap();
    assert_eq!(f.gd_steps(), Some(best));
    let kfac = f.kfac_steps().unwrap();
    assert!(kfac < best, "kfac {kfac} vs gd {best}");
    assert!(f.kfac_trajectory.max_staleness >= 1);
}
