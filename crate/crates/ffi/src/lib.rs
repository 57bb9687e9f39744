//! C ABI over the correction library. Handles are opaque pointers owned by
//! the caller and released with the matching `_free` function; every
//! fallible call either returns a status code or a null pointer and leaves
//! a message for [`rclarc_last_error_message`]. No call unwinds across the
//! boundary.
//!
//! The generated header lives at `include/rclarc.h`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rclarc::clarc::{
    corrected_forward, load_bank, multi_pclarc_apply, CavBank, ClarcError, Condition,
    CorrectionMode, LinearProbe, NegativeSet,
};
use rclarc::concepts::{Cav, CavMethod};
use rclarc::harness::{bank_from_records, negative_sets_for_records, HarnessError, ModeSpec};
use rclarc::linalg::MathError;
use rclarc::nn::NnError;
use rclarc::synthdata::{LabeledDataset, SynthError};
use rclarc::{MlpModel, Vector};

/// Result of every fallible call. Anything but OK leaves a message for
/// [`rclarc_last_error_message`] on the calling thread.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RclarcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument failed validation (wrong length, unknown mode, ...).
    InvalidArgument = 2,
    /// A file could not be read or parsed.
    IoError = 3,
    /// The computation failed numerically.
    NumericError = 4,
    /// A string argument was not valid UTF-8.
    Utf8Error = 5,
}

/// A loaded feed-forward model. Create with [`rclarc_model_load`], release
/// with [`rclarc_model_free`].
pub struct RclarcModel {
    inner: MlpModel,
}

/// A model bundled with a direction bank and a correction mode, ready for
/// corrected inference. Create with [`rclarc_corrector_load`], release with
/// [`rclarc_corrector_free`].
pub struct RclarcCorrector {
    model: MlpModel,
    bank: CavBank,
    mode: CorrectionMode,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    let stored = CString::new(message).expect("NUL bytes stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(stored));
}

fn fail_null(name: &str) -> RclarcStatus {
    set_error(format!("{name} must not be null"));
    RclarcStatus::NullPointer
}

// Shape and dimension complaints are caller mistakes; everything else in
// the math layer is a genuine numeric failure.
fn math_status(e: &MathError) -> RclarcStatus {
    match e {
        MathError::DimensionMismatch { .. }
        | MathError::ShapeMismatch { .. }
        | MathError::NotSquare { .. }
        | MathError::EmptyBasis => RclarcStatus::InvalidArgument,
        _ => RclarcStatus::NumericError,
    }
}

fn nn_status(e: &NnError) -> RclarcStatus {
    match e {
        NnError::Io { .. } | NnError::BadModelFile { .. } => RclarcStatus::IoError,
        NnError::Math(e) => math_status(e),
        NnError::NonFiniteLoss { .. } => RclarcStatus::NumericError,
        _ => RclarcStatus::InvalidArgument,
    }
}

fn clarc_status(e: &ClarcError) -> RclarcStatus {
    match e {
        ClarcError::Io { .. } | ClarcError::BadFile { .. } => RclarcStatus::IoError,
        ClarcError::Math(e) => math_status(e),
        _ => RclarcStatus::InvalidArgument,
    }
}

fn synth_status(e: &SynthError) -> RclarcStatus {
    match e {
        SynthError::Io { .. } | SynthError::BadFile { .. } => RclarcStatus::IoError,
        SynthError::Math(e) => math_status(e),
        _ => RclarcStatus::InvalidArgument,
    }
}

fn harness_status(e: &HarnessError) -> RclarcStatus {
    match e {
        HarnessError::Io { .. } => RclarcStatus::IoError,
        HarnessError::Math(e) => math_status(e),
        HarnessError::Attribution(_) => RclarcStatus::NumericError,
        HarnessError::Nn(e) => nn_status(e),
        HarnessError::Clarc(e) => clarc_status(e),
        HarnessError::Synth(e) => synth_status(e),
        HarnessError::Concept(_) | HarnessError::ConfigError(_) => RclarcStatus::InvalidArgument,
    }
}

/// Null and UTF-8 checked `&str` view of a C string argument.
unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, RclarcStatus> {
    if ptr.is_null() {
        return Err(fail_null(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        RclarcStatus::Utf8Error
    })
}

unsafe fn slice_arg<'a>(
    ptr: *const f64,
    len: usize,
    name: &str,
) -> Result<&'a [f64], RclarcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail_null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn vector_arg(values: &[f64], name: &str) -> Result<Vector, RclarcStatus> {
    Vector::new(values.to_vec()).map_err(|e| {
        set_error(format!("{name}: {e}"));
        RclarcStatus::InvalidArgument
    })
}

/// Copies `v` into the caller's buffer, which must hold exactly `len` values.
unsafe fn write_out(v: &Vector, out: *mut f64, len: usize, name: &str) -> Result<(), RclarcStatus> {
    if out.is_null() {
        return Err(fail_null(name));
    }
    if len != v.dim() {
        set_error(format!("{name} holds {len} values but {} are needed", v.dim()));
        return Err(RclarcStatus::InvalidArgument);
    }
    std::ptr::copy_nonoverlapping(v.as_slice().as_ptr(), out, len);
    Ok(())
}

fn guard<T>(what: &str, body: impl FnOnce() -> Result<T, RclarcStatus>) -> Result<T, RclarcStatus> {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(result) => result,
        Err(_) => {
            set_error(format!("internal panic during {what}"));
            Err(RclarcStatus::NumericError)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rclarc_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message describing the last failure on the calling thread, or null if no
/// call failed yet. The pointer stays valid until the next failing call on
/// the same thread.
#[no_mangle]
pub extern "C" fn rclarc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(message) => message.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Loads a model saved by the library or CLI. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_load(path: *const c_char) -> *mut RclarcModel {
    let loaded = guard("model load", || {
        let path = str_arg(path, "path")?;
        MlpModel::load(Path::new(path)).map_err(|e| {
            set_error(e.to_string());
            nn_status(&e)
        })
    });
    match loaded {
        Ok(loaded) => Box::into_raw(Box::new(RclarcModel { inner: loaded.model })),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Releases a model handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_free(model: *mut RclarcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of the model; 0 if `model` is null.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_input_dim(model: *const RclarcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of output logits; 0 if `model` is null.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_output_dim(model: *const RclarcModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Uncorrected forward pass. `x` holds `x_len` inputs and `out` must hold
/// exactly `out_len == output_dim` values.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_forward(
    model: *const RclarcModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> RclarcStatus {
    let result = guard("forward", || {
        let Some(model) = model.as_ref() else { return Err(fail_null("model")) };
        let x = vector_arg(slice_arg(x, x_len, "x")?, "x")?;
        let logits = model.inner.forward(&x).map_err(|e| {
            set_error(e.to_string());
            nn_status(&e)
        })?;
        write_out(&logits, out, out_len, "out")
    });
    result.err().unwrap_or(RclarcStatus::Ok)
}

/// Uncorrected class prediction (argmax of the logits) into `out_class`.
#[no_mangle]
pub unsafe extern "C" fn rclarc_model_predict(
    model: *const RclarcModel,
    x: *const f64,
    x_len: usize,
    out_class: *mut usize,
) -> RclarcStatus {
    let result = guard("predict", || {
        let Some(model) = model.as_ref() else { return Err(fail_null("model")) };
        if out_class.is_null() {
            return Err(fail_null("out_class"));
        }
        let x = vector_arg(slice_arg(x, x_len, "x")?, "x")?;
        let class = model.inner.predict_class(&x).map_err(|e| {
            set_error(e.to_string());
            nn_status(&e)
        })?;
        *out_class = class;
        Ok(())
    });
    result.err().unwrap_or(RclarcStatus::Ok)
}

fn build_condition(
    mode: ModeSpec,
    class_map: BTreeMap<String, std::collections::BTreeSet<usize>>,
    probes: Option<BTreeMap<String, LinearProbe>>,
) -> Result<CorrectionMode, RclarcStatus> {
    let need_probes = || {
        probes.clone().ok_or_else(|| {
            set_error(format!("mode {:?} needs a probes file", mode.label()));
            RclarcStatus::InvalidArgument
        })
    };
    Ok(match mode {
        ModeSpec::Vanilla => CorrectionMode::Vanilla,
        ModeSpec::Pclarc => CorrectionMode::PClArC,
        ModeSpec::RclarcClass => CorrectionMode::RClArC(Condition::Class { class_map }),
        ModeSpec::RclarcArtifact => {
            CorrectionMode::RClArC(Condition::Artifact { probes: need_probes()? })
        }
        ModeSpec::RclarcBoth => {
            CorrectionMode::RClArC(Condition::Both { class_map, probes: need_probes()? })
        }
    })
}

/// Bundles a model with a saved direction bank and correction mode.
///
/// `bank_path` is a bank JSON written by `fit-cav`; `data_path` and
/// `manifest_path` are the dataset pair the bank's negative ids refer to
/// (needed to rebuild the anchor activations); `probes_path` is a probe map
/// JSON written by `fit-probe` and may be null for modes that do not use
/// probes. `mode` is one of `vanilla`, `pclarc`, `rclarc-class`,
/// `rclarc-artifact`, `rclarc-both`. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn rclarc_corrector_load(
    model: *const RclarcModel,
    bank_path: *const c_char,
    data_path: *const c_char,
    manifest_path: *const c_char,
    probes_path: *const c_char,
    mode: *const c_char,
) -> *mut RclarcCorrector {
    let built = guard("corrector load", || {
        let Some(model) = model.as_ref() else { return Err(fail_null("model")) };
        let model = model.inner.clone();
        let bank_path = str_arg(bank_path, "bank_path")?;
        let data_path = str_arg(data_path, "data_path")?;
        let manifest_path = str_arg(manifest_path, "manifest_path")?;
        let mode = ModeSpec::parse(str_arg(mode, "mode")?).map_err(|e| {
            set_error(e.to_string());
            RclarcStatus::InvalidArgument
        })?;

        let records = load_bank(Path::new(bank_path)).map_err(|e| {
            set_error(e.to_string());
            clarc_status(&e)
        })?;
        let dataset = LabeledDataset::load(Path::new(data_path), Path::new(manifest_path))
            .map_err(|e| {
                set_error(e.to_string());
                synth_status(&e)
            })?;
        let negative_sets = negative_sets_for_records(&dataset, &model, &records)
            .map_err(|e| {
                set_error(e.to_string());
                harness_status(&e)
            })?;
        let bank = bank_from_records(&records, &negative_sets).map_err(|e| {
            set_error(e.to_string());
            harness_status(&e)
        })?;
        if bank.layer() != 0 && bank.layer() != model.split_layer() {
            set_error(format!(
                "bank layer {} does not match the model split layer {}",
                bank.layer(),
                model.split_layer()
            ));
            return Err(RclarcStatus::InvalidArgument);
        }

        let probes = match probes_path.is_null() {
            true => None,
            false => {
                let path = str_arg(probes_path, "probes_path")?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    set_error(format!("{path}: {e}"));
                    RclarcStatus::IoError
                })?;
                let probes: BTreeMap<String, LinearProbe> =
                    serde_json::from_str(&text).map_err(|e| {
                        set_error(format!("{path}: {e}"));
                        RclarcStatus::IoError
                    })?;
                Some(probes)
            }
        };
        let class_map = dataset
            .artifacts
            .iter()
            .map(|a| (a.id.clone(), a.associated_classes.clone()))
            .collect();
        let mode = build_condition(mode, class_map, probes)?;
        if let CorrectionMode::RClArC(condition) = &mode {
            condition.validate_coverage(&bank).map_err(|e| {
                set_error(e.to_string());
                RclarcStatus::InvalidArgument
            })?;
        }
        Ok(RclarcCorrector { model, bank, mode })
    });
    match built {
        Ok(corrector) => Box::into_raw(Box::new(corrector)),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Releases a corrector handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rclarc_corrector_free(corrector: *mut RclarcCorrector) {
    if !corrector.is_null() {
        drop(Box::from_raw(corrector));
    }
}

/// Number of directions in the corrector's bank; 0 if `corrector` is null.
#[no_mangle]
pub unsafe extern "C" fn rclarc_corrector_bank_len(corrector: *const RclarcCorrector) -> usize {
    corrector.as_ref().map_or(0, |c| c.bank.len())
}

/// Forward pass under the corrector's mode. `logits` must hold exactly
/// `logits_len == output_dim` values. When `applied_count` is non-null it
/// receives the number of directions suppressed for this sample (0 means
/// the output equals the uncorrected forward pass bit for bit).
#[no_mangle]
pub unsafe extern "C" fn rclarc_corrector_forward(
    corrector: *const RclarcCorrector,
    x: *const f64,
    x_len: usize,
    logits: *mut f64,
    logits_len: usize,
    applied_count: *mut usize,
) -> RclarcStatus {
    let result = guard("corrected forward", || {
        let Some(corrector) = corrector.as_ref() else { return Err(fail_null("corrector")) };
        let x = vector_arg(slice_arg(x, x_len, "x")?, "x")?;
        let out = corrected_forward(&corrector.model, &x, &corrector.mode, Some(&corrector.bank))
            .map_err(|e| {
                set_error(e.to_string());
                clarc_status(&e)
            })?;
        write_out(&out.logits, logits, logits_len, "logits")?;
        if !applied_count.is_null() {
            *applied_count = out.applied.len();
        }
        Ok(())
    });
    result.err().unwrap_or(RclarcStatus::Ok)
}

/// Stateless joint suppression: removes from `a` every component along the
/// given directions, measured relative to `anchor`. `directions` is row-major
/// with `n_directions` rows of `dim` values; `a`, `anchor`, and `out` hold
/// `dim` values each. Directions must be nonzero but need not be normalized
/// or orthogonal.
#[no_mangle]
pub unsafe extern "C" fn rclarc_project(
    a: *const f64,
    dim: usize,
    directions: *const f64,
    n_directions: usize,
    anchor: *const f64,
    out: *mut f64,
) -> RclarcStatus {
    let result = guard("projection", || {
        let a = vector_arg(slice_arg(a, dim, "a")?, "a")?;
        let anchor = vector_arg(slice_arg(anchor, dim, "anchor")?, "anchor")?;
        let flat = slice_arg(directions, n_directions.checked_mul(dim).ok_or_else(|| {
            set_error("n_directions * dim overflows");
            RclarcStatus::InvalidArgument
        })?, "directions")?;
        if n_directions == 0 {
            set_error("n_directions must be positive");
            return Err(RclarcStatus::InvalidArgument);
        }

        let mut cavs = Vec::with_capacity(n_directions);
        let mut negatives = Vec::with_capacity(n_directions);
        for i in 0..n_directions {
            let row = vector_arg(&flat[i * dim..(i + 1) * dim], "directions")?;
            let cav = Cav::new(format!("d{i}"), 0, row, anchor.clone(), CavMethod::Pattern, true)
                .map_err(|e| {
                    set_error(format!("direction {i}: {e}"));
                    RclarcStatus::InvalidArgument
                })?;
            cavs.push(cav);
            negatives.push(
                NegativeSet::new(format!("d{i}"), vec![0], vec![anchor.clone()]).expect(
                    "singleton negative set is well-formed",
                ),
            );
        }
        let bank = CavBank::new(cavs, negatives).map_err(|e| {
            set_error(e.to_string());
            RclarcStatus::InvalidArgument
        })?;
        let subset: Vec<usize> = (0..n_directions).collect();
        let corrected = multi_pclarc_apply(&a, &bank, &subset).map_err(|e| {
            set_error(e.to_string());
            clarc_status(&e)
        })?;
        write_out(&corrected.activation, out, dim, "out")
    });
    result.err().unwrap_or(RclarcStatus::Ok)
}
