use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use flcleaner::cvae::{CvaeConfig, CvaeState};
use flcleaner::data::write_idx;
use flcleaner::harness::ExperimentConfig;
use flcleaner::nn::WeightVector;
use flcleaner_ffi::*;

fn last_error() -> String {
    let p = flc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn weights(values: &[f64]) -> *mut FlcWeights {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { flc_weights_from_values(values.as_ptr(), values.len(), &mut h) }, FlcStatus::Ok);
    h
}

fn values(h: *const FlcWeights) -> Vec<f64> {
    let n = unsafe { flc_weights_len(h) };
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { flc_weights_get(h, buf.as_mut_ptr(), n) }, FlcStatus::Ok);
    buf
}

#[test]
fn model_init_is_seeded() {
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(flc_model_init_mlp(6, 4, 3, 9, &mut a), FlcStatus::Ok);
        assert_eq!(flc_model_init_mlp(6, 4, 3, 9, &mut b), FlcStatus::Ok);
    }
    assert_eq!(unsafe { flc_weights_len(a) }, 6 * 4 + 4 + 4 * 3 + 3);
    assert_eq!(values(a), values(b));
    unsafe {
        flc_weights_free(a);
        flc_weights_free(b);
    }
}

#[test]
fn weight_bytes_round_trip() {
    let h = weights(&[1.5, -2.0, 0.25]);
    let mut size = 0;
    unsafe {
        assert_eq!(flc_weights_to_bytes(h, ptr::null_mut(), 0, &mut size), FlcStatus::Ok);
        assert_eq!(size, 8 + 3 * 8);
        let mut small = vec![0u8; size - 1];
        assert_eq!(flc_weights_to_bytes(h, small.as_mut_ptr(), small.len(), &mut size), FlcStatus::BufferTooSmall);
        let mut buf = vec![0u8; size];
        assert_eq!(flc_weights_to_bytes(h, buf.as_mut_ptr(), buf.len(), &mut size), FlcStatus::Ok);
        assert_eq!(buf, WeightVector::new(vec![1.5, -2.0, 0.25]).to_bytes());

        let mut back = ptr::null_mut();
        assert_eq!(flc_weights_from_bytes(buf.as_ptr(), buf.len(), &mut back), FlcStatus::Ok);
        assert_eq!(values(back), vec![1.5, -2.0, 0.25]);
        assert_eq!(flc_weights_from_bytes(buf.as_ptr(), buf.len() - 3, &mut back), FlcStatus::Io);
        flc_weights_free(back);
        flc_weights_free(h);
    }
}

#[test]
fn trust_propagation_hand_trace() {
    let eps = [0.01, 0.012, 0.013, 0.50, 0.52];
    let mut benign = [9u8; 5];
    let mut delta = 0.0;
    let s = unsafe { flc_trust_propagate(eps.as_ptr(), eps.len(), 0.3, benign.as_mut_ptr(), &mut delta) };
    assert_eq!(s, FlcStatus::Ok);
    assert_eq!(benign, [1, 1, 1, 0, 0]);
    assert!((delta - 0.153).abs() < 1e-12);

    let s = unsafe { flc_trust_propagate(eps.as_ptr(), eps.len(), 1.5, benign.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, FlcStatus::InvalidArgument);
    assert!(last_error().contains("lambda"));
    let s = unsafe { flc_trust_propagate(ptr::null(), 3, 0.3, benign.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, FlcStatus::NullPointer);
}

#[test]
fn geometric_median_of_collinear_points() {
    let points = [0.0, 0.0, 1.0, 0.0, 5.0, 0.0];
    let mut out = [0.0; 2];
    let mut iters = 0;
    let s = unsafe { flc_geometric_median(points.as_ptr(), 3, 2, 1e-10, 10_000, out.as_mut_ptr(), &mut iters) };
    assert_eq!(s, FlcStatus::Ok);
    assert!((out[0] - 1.0).abs() < 1e-6 && out[1].abs() < 1e-9, "{out:?}");
    assert!(iters > 0);
    let s = unsafe { flc_geometric_median(points.as_ptr(), 3, 0, 1e-10, 10, out.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, FlcStatus::InvalidArgument);
}

#[test]
fn fedavg_weights_by_dataset_size() {
    let a = weights(&[0.0, 4.0]);
    let b = weights(&[8.0, 0.0]);
    let models = [a as *const FlcWeights, b as *const FlcWeights];
    let sizes = [3usize, 1];
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(flc_fedavg(models.as_ptr(), sizes.as_ptr(), 2, &mut out), FlcStatus::Ok);
        assert_eq!(values(out), vec![2.0, 3.0]);
        let odd = weights(&[1.0]);
        let mismatched = [a as *const FlcWeights, odd as *const FlcWeights];
        let mut bad = ptr::null_mut();
        assert_ne!(flc_fedavg(mismatched.as_ptr(), sizes.as_ptr(), 2, &mut bad), FlcStatus::Ok);
        assert!(bad.is_null());
        for h in [a, b, out, odd] {
            flc_weights_free(h);
        }
    }
}

#[test]
fn cvae_checkpoint_scores_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let state = CvaeState::new(6, 3, &CvaeConfig { hidden: 5, latent_dim: 2, ..Default::default() }).unwrap();
    let path = dir.path().join("cvae.ckpt");
    state.save(&path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { flc_cvae_load(c_path.as_ptr(), &mut h) }, FlcStatus::Ok);
    assert_eq!(unsafe { flc_cvae_input_dim(h) }, 6);
    let nam = [0.5, 0.4, 0.6, 0.5, 0.2, 0.9];
    let mut err = -1.0;
    assert_eq!(unsafe { flc_cvae_reconstruction_error(h, nam.as_ptr(), nam.len(), 1, &mut err) }, FlcStatus::Ok);
    assert_eq!(err, flcleaner::cvae::reconstruction_error(&state, &nam, 1).unwrap());
    assert_eq!(unsafe { flc_cvae_reconstruction_error(h, nam.as_ptr(), 5, 1, &mut err) }, FlcStatus::InvalidArgument);
    assert_eq!(unsafe { flc_cvae_reconstruction_error(h, nam.as_ptr(), 6, 3, &mut err) }, FlcStatus::InvalidArgument);
    unsafe { flc_cvae_free(h) };

    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { flc_cvae_load(missing.as_ptr(), &mut h) }, FlcStatus::Io);
}

fn synthetic_mnist(dir: &std::path::Path) {
    let idx = |n: usize, offset: usize| {
        let labels: Vec<u8> = (0..n).map(|i| ((i + offset) % 10) as u8).collect();
        let pixels: Vec<u8> = labels
            .iter()
            .flat_map(|&l| (0..784).map(move |p| if p / 28 / 3 == l as usize { 220 } else { (p % 7) as u8 }))
            .collect();
        (pixels, labels)
    };
    let (p, l) = idx(400, 0);
    write_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"), &p, 28, 28, &l).unwrap();
    let (p, l) = idx(150, 3);
    write_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), &p, 28, 28, &l).unwrap();
}

#[test]
fn run_experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    synthetic_mnist(&data);
    let cfg = ExperimentConfig {
        data_dir: data,
        train_limit: 0,
        test_limit: 0,
        rounds: 2,
        num_clients: 4,
        participation: 1.0,
        attacker_fraction: 0.25,
        hidden: 8,
        local_epochs: 1,
        trigger_size: 20,
        warmup_epochs: 1,
        harvest_epochs: 1,
        cvae_epochs: 2,
        cvae_hidden: 6,
        cvae_latent: 2,
        plots: false,
        ..Default::default()
    };
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = dir.path().join("out");
    let c_cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let c_out = CString::new(out.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { flc_run_experiment(c_cfg.as_ptr(), c_out.as_ptr()) }, FlcStatus::Ok);
    assert!(out.join("rounds.csv").is_file());
    assert!(out.join("summary.json").is_file());

    std::fs::write(&cfg_path, "num_clients = 0\n").unwrap();
    assert_eq!(unsafe { flc_run_experiment(c_cfg.as_ptr(), c_out.as_ptr()) }, FlcStatus::Config);
    assert!(last_error().contains("num_clients"));
}

/// Compiles `smoke.c` against the generated header and static library.
#[test]
fn header_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libflcleaner_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "11100 0.153\n23\nerror set\n");
}
