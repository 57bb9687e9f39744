//! Drives the C API end to end from Rust: file round trips, bitwise
//! agreement with the core library, and the error paths a C caller hits.

use std::ffi::{CStr, CString};
use std::path::Path;

use rclarc::clarc::{corrected_forward, multi_pclarc_apply, save_bank, CavBank, NegativeSet};
use rclarc::concepts::{Cav, CavMethod};
use rclarc::harness::{backdoor_experiment, prepare, DatasetSpec, ModeSpec, PreparedExperiment};
use rclarc::rng::SplitMix64;
use rclarc::synthdata::Split;
use rclarc::Vector;

use rclarc_ffi::*;

fn small_backdoor() -> PreparedExperiment {
    let mut config = backdoor_experiment(6);
    if let DatasetSpec::Backdoor { synth } = &mut config.dataset {
        synth.samples_per_class = 120;
    }
    config.training.epochs = 80;
    config.cav.n_pairs = 40;
    prepare(&config.resolve(None)).unwrap()
}

struct SavedRun {
    _dir: tempfile::TempDir,
    model: CString,
    bank: CString,
    data: CString,
    manifest: CString,
    probes: CString,
}

fn save_run(prepared: &PreparedExperiment, dir: tempfile::TempDir) -> SavedRun {
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    let model_path = dir.path().join("model.json");
    let bank_path = dir.path().join("bank.json");
    let data_path = dir.path().join("data.jsonl");
    let manifest_path = dir.path().join("manifest.json");
    let probes_path = dir.path().join("probes.json");
    prepared.model.save(&model_path, None).unwrap();
    save_bank(&bank_path, &prepared.records).unwrap();
    prepared.dataset.save_jsonl(&data_path).unwrap();
    prepared
        .dataset
        .save_manifest(&manifest_path, "backdoor", prepared.config.seed, None)
        .unwrap();
    std::fs::write(&probes_path, serde_json::to_string_pretty(&prepared.probes).unwrap())
        .unwrap();
    SavedRun {
        model: c(&model_path),
        bank: c(&bank_path),
        data: c(&data_path),
        manifest: c(&manifest_path),
        probes: c(&probes_path),
        _dir: dir,
    }
}

fn last_error() -> String {
    let ptr = rclarc_last_error_message();
    assert!(!ptr.is_null(), "a failing call must leave a message");
    unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string()
}

#[test]
fn model_and_corrector_agree_with_core_bitwise() {
    let prepared = small_backdoor();
    let saved = save_run(&prepared, tempfile::tempdir().unwrap());

    unsafe {
        let model = rclarc_model_load(saved.model.as_ptr());
        assert!(!model.is_null());
        assert_eq!(rclarc_model_input_dim(model), prepared.model.input_dim());
        assert_eq!(rclarc_model_output_dim(model), prepared.model.output_dim());

        let corrector = rclarc_corrector_load(
            model,
            saved.bank.as_ptr(),
            saved.data.as_ptr(),
            saved.manifest.as_ptr(),
            saved.probes.as_ptr(),
            CString::new("rclarc-both").unwrap().as_ptr(),
        );
        assert!(!corrector.is_null(), "corrector load failed: {}", last_error());
        assert_eq!(rclarc_corrector_bank_len(corrector), prepared.records.len());

        let mode = prepared.correction_mode(ModeSpec::RclarcBoth);
        let mut rows = prepared.dataset.split_indices(Split::Test);
        rows.extend(prepared.dataset.split_indices(Split::TestArtifact));
        let out_dim = prepared.model.output_dim();
        let mut pass_through = 0usize;
        let mut applied = 0usize;
        for row in rows {
            let x = prepared.dataset.sample(row);
            let expected_plain = prepared.model.forward(&x).unwrap();
            let expected =
                corrected_forward(&prepared.model, &x, &mode, prepared.bank.as_ref()).unwrap();

            let mut plain = vec![0.0; out_dim];
            let status = rclarc_model_forward(
                model,
                x.as_slice().as_ptr(),
                x.dim(),
                plain.as_mut_ptr(),
                out_dim,
            );
            assert_eq!(status, RclarcStatus::Ok);
            let mut logits = vec![0.0; out_dim];
            let mut count = usize::MAX;
            let status = rclarc_corrector_forward(
                corrector,
                x.as_slice().as_ptr(),
                x.dim(),
                logits.as_mut_ptr(),
                out_dim,
                &mut count,
            );
            assert_eq!(status, RclarcStatus::Ok);

            for i in 0..out_dim {
                assert_eq!(plain[i].to_bits(), expected_plain.get(i).to_bits());
                assert_eq!(logits[i].to_bits(), expected.logits.get(i).to_bits());
            }
            assert_eq!(count, expected.applied.len());
            match count {
                0 => pass_through += 1,
                _ => applied += 1,
            }

            let mut class = usize::MAX;
            let status =
                rclarc_model_predict(model, x.as_slice().as_ptr(), x.dim(), &mut class);
            assert_eq!(status, RclarcStatus::Ok);
            assert_eq!(class, prepared.model.predict_class(&x).unwrap());
        }
        assert!(pass_through > 0, "no sample exercised the pass-through path");
        assert!(applied > 0, "no sample exercised the corrected path");

        rclarc_corrector_free(corrector);
        rclarc_model_free(model);
    }
}

#[test]
fn failure_paths_report_status_and_message() {
    let prepared = small_backdoor();
    let saved = save_run(&prepared, tempfile::tempdir().unwrap());

    unsafe {
        assert!(rclarc_model_load(std::ptr::null()).is_null());
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert!(rclarc_model_load(missing.as_ptr()).is_null());
        assert!(last_error().contains("model.json"));

        let model = rclarc_model_load(saved.model.as_ptr());
        assert!(!model.is_null());

        // Unknown mode string.
        let bad_mode = CString::new("sometimes").unwrap();
        let corrector = rclarc_corrector_load(
            model,
            saved.bank.as_ptr(),
            saved.data.as_ptr(),
            saved.manifest.as_ptr(),
            std::ptr::null(),
            bad_mode.as_ptr(),
        );
        assert!(corrector.is_null());
        assert!(last_error().contains("sometimes"));

        // Probe-gated mode without a probes file.
        let mode = CString::new("rclarc-artifact").unwrap();
        let corrector = rclarc_corrector_load(
            model,
            saved.bank.as_ptr(),
            saved.data.as_ptr(),
            saved.manifest.as_ptr(),
            std::ptr::null(),
            mode.as_ptr(),
        );
        assert!(corrector.is_null());
        assert!(last_error().contains("probes"));

        // Wrong buffer sizes.
        let input_dim = rclarc_model_input_dim(model);
        let x = vec![0.25; input_dim];
        let mut out = vec![0.0; 1];
        let status =
            rclarc_model_forward(model, x.as_ptr(), input_dim, out.as_mut_ptr(), out.len());
        assert_eq!(status, RclarcStatus::InvalidArgument);
        let status = rclarc_model_forward(
            model,
            x.as_ptr(),
            input_dim.saturating_sub(1),
            out.as_mut_ptr(),
            out.len(),
        );
        assert_eq!(status, RclarcStatus::InvalidArgument);

        // Non-finite input.
        let bad = vec![f64::NAN; input_dim];
        let mut logits = vec![0.0; rclarc_model_output_dim(model)];
        let status = rclarc_model_forward(
            model,
            bad.as_ptr(),
            input_dim,
            logits.as_mut_ptr(),
            logits.len(),
        );
        assert_eq!(status, RclarcStatus::InvalidArgument);

        rclarc_model_free(model);
        rclarc_model_free(std::ptr::null_mut());
        rclarc_corrector_free(std::ptr::null_mut());
    }
}

#[test]
fn projection_matches_library_call() {
    let mut rng = SplitMix64::new(77);
    let dim = 7;
    let n_directions = 3;
    let normal = |rng: &mut SplitMix64| -> Vec<f64> { (0..dim).map(|_| rng.next_normal()).collect() };
    let a = normal(&mut rng);
    let anchor = normal(&mut rng);
    let mut flat = Vec::new();
    for _ in 0..n_directions {
        flat.extend(normal(&mut rng).iter().map(|v| 2.0 * v));
    }

    let mut out = vec![0.0; dim];
    let status = unsafe {
        rclarc_project(a.as_ptr(), dim, flat.as_ptr(), n_directions, anchor.as_ptr(), out.as_mut_ptr())
    };
    assert_eq!(status, RclarcStatus::Ok);

    let anchor_v = Vector::new(anchor.clone()).unwrap();
    let cavs: Vec<Cav> = (0..n_directions)
        .map(|i| {
            Cav::new(
                format!("d{i}"),
                0,
                Vector::new(flat[i * dim..(i + 1) * dim].to_vec()).unwrap(),
                anchor_v.clone(),
                CavMethod::Pattern,
                true,
            )
            .unwrap()
        })
        .collect();
    let negatives: Vec<NegativeSet> = (0..n_directions)
        .map(|i| NegativeSet::new(format!("d{i}"), vec![0], vec![anchor_v.clone()]).unwrap())
        .collect();
    let bank = CavBank::new(cavs, negatives).unwrap();
    let expected = multi_pclarc_apply(&Vector::new(a).unwrap(), &bank, &[0, 1, 2]).unwrap();
    for i in 0..dim {
        assert_eq!(out[i].to_bits(), expected.activation.get(i).to_bits());
    }

    // A zero direction is rejected.
    let zeros = vec![0.0; dim * 2];
    let status = unsafe {
        rclarc_project(out.as_ptr(), dim, zeros.as_ptr(), 2, anchor.as_ptr(), out.as_mut_ptr())
    };
    assert_eq!(status, RclarcStatus::InvalidArgument);
}

#[test]
fn generated_header_covers_the_surface() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rclarc.h");
    let header = std::fs::read_to_string(header_path).unwrap();
    for symbol in [
        "rclarc_version",
        "rclarc_last_error_message",
        "rclarc_model_load",
        "rclarc_model_free",
        "rclarc_model_input_dim",
        "rclarc_model_output_dim",
        "rclarc_model_forward",
        "rclarc_model_predict",
        "rclarc_corrector_load",
        "rclarc_corrector_free",
        "rclarc_corrector_bank_len",
        "rclarc_corrector_forward",
        "rclarc_project",
        "RCLARC_STATUS_OK",
        "RCLARC_STATUS_NUMERIC_ERROR",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
    let version = unsafe { CStr::from_ptr(rclarc_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
