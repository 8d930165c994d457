//! C interface to the mixoe library.
//!
//! Every function returns a [`MixoeStatus`]. On failure the message is kept
//! per thread and can be fetched with [`mixoe_last_error`]. Pointers to
//! arrays must be valid for the stated lengths; output arrays are written
//! only on success.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixoe::metrics;
use mixoe::mixing;
use mixoe::model::{Classifier, Mlp, MlpSpec};
use mixoe::scoring::{self, Scorer};
use mixoe::splits::{self, EnvironmentSpec};
use mixoe::trainer::Checkpoint;
use mixoe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidData = 3,
    InvalidInput = 4,
    Unsupported = 5,
    Io = 6,
    Parse = 7,
    Checkpoint = 8,
    Divergence = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixoeScorer {
    Msp = 0,
    Odin = 1,
    Energy = 2,
}

impl From<MixoeScorer> for Scorer {
    fn from(s: MixoeScorer) -> Self {
        match s {
            MixoeScorer::Msp => Scorer::Msp,
            MixoeScorer::Odin => Scorer::Odin,
            MixoeScorer::Energy => Scorer::Energy,
        }
    }
}

/// Holdout environments produced by [`mixoe_splits_make`].
pub struct MixoeSplitSet {
    specs: Vec<EnvironmentSpec>,
}

/// A classifier restored from a checkpoint.
pub struct MixoeModel {
    model: Mlp,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MixoeStatus {
    match e {
        Error::InvalidArgument(_) => MixoeStatus::InvalidArgument,
        Error::InvalidData(_) => MixoeStatus::InvalidData,
        Error::InvalidInput(_) => MixoeStatus::InvalidInput,
        Error::Unsupported(_) => MixoeStatus::Unsupported,
        Error::Divergence { .. } => MixoeStatus::Divergence,
        Error::Checkpoint { .. } => MixoeStatus::Checkpoint,
        Error::Io { .. } => MixoeStatus::Io,
        Error::Parse { .. } => MixoeStatus::Parse,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MixoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MixoeStatus::Ok
        }
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("{name} is null"));
            MixoeStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MixoeStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn string(p: *const c_char, name: &'static str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{name} is not valid UTF-8"))))
}

unsafe fn strings(p: *const *const c_char, len: usize, name: &'static str) -> Result<Vec<String>, Fail> {
    input(p, len, name)?.iter().map(|&s| string(s, name)).collect()
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mixoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mixoe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Tie-aware AUROC with ID as the positive class.
#[no_mangle]
pub unsafe extern "C" fn mixoe_auroc(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let id = input(id_scores, n_id, "id_scores")?;
        let ood = input(ood_scores, n_ood, "ood_scores")?;
        let out = out_ref(out, "out")?;
        *out = metrics::auroc(id, ood)?;
        Ok(())
    })
}

/// Fraction of OOD scores rejected at the threshold accepting `tpr_target`
/// of ID.
#[no_mangle]
pub unsafe extern "C" fn mixoe_tnr_at_tpr(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    tpr_target: f64,
    out: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let id = input(id_scores, n_id, "id_scores")?;
        let ood = input(ood_scores, n_ood, "ood_scores")?;
        let out = out_ref(out, "out")?;
        *out = metrics::tnr_at_tpr(id, ood, tpr_target)?;
        Ok(())
    })
}

/// Scores each of `rows` logit vectors of length `k`. A non-positive
/// `temperature` selects the scorer's default.
#[no_mangle]
pub unsafe extern "C" fn mixoe_score(
    scorer: MixoeScorer,
    logits: *const f64,
    rows: usize,
    k: usize,
    temperature: f64,
    out: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let scorer = Scorer::from(scorer);
        let tau = if temperature > 0.0 {
            temperature
        } else {
            scorer.default_temperature()
        };
        let z = input(logits, rows * k, "logits")?;
        let out = output(out, rows, "out")?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()).into());
        }
        let scores = z
            .chunks(k)
            .map(|row| match scorer {
                Scorer::Msp => scoring::score_msp(row),
                Scorer::Odin => scoring::score_odin(row, tau),
                Scorer::Energy => scoring::score_energy(row, tau),
            })
            .collect::<mixoe::Result<Vec<f64>>>()?;
        out.copy_from_slice(&scores);
        Ok(())
    })
}

/// `λ·onehot(label) + (1−λ)·uniform` over `k` classes.
#[no_mangle]
pub unsafe extern "C" fn mixoe_soft_target(label: usize, k: usize, lambda: f64, out: *mut f64) -> MixoeStatus {
    guard(|| {
        let y = mixing::one_hot(label, k)?;
        let t = mixing::make_soft_target(&y, lambda)?;
        output(out, k, "out")?.copy_from_slice(t.probs());
        Ok(())
    })
}

/// `λ·x_in + (1−λ)·x_out`, elementwise over `len` values.
#[no_mangle]
pub unsafe extern "C" fn mixoe_mix_linear(
    x_in: *const f64,
    x_out: *const f64,
    len: usize,
    lambda: f64,
    out: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let a = ArrayD::from_shape_vec(IxDyn(&[len]), input(x_in, len, "x_in")?.to_vec()).expect("1-D shape");
        let b = ArrayD::from_shape_vec(IxDyn(&[len]), input(x_out, len, "x_out")?.to_vec()).expect("1-D shape");
        let mixed = mixing::mix_linear(&a, &b, lambda)?;
        output(out, len, "out")?.copy_from_slice(mixed.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Pastes a box of `x_out` into `x_in` (both `channels×height×width`). The
/// box centre is drawn from a generator seeded with `seed`; the ID share
/// after clipping goes to `lambda_adjusted`.
#[no_mangle]
pub unsafe extern "C" fn mixoe_mix_cut(
    x_in: *const f64,
    x_out: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    lambda: f64,
    seed: u64,
    out: *mut f64,
    lambda_adjusted: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let len = channels * height * width;
        let dims = IxDyn(&[channels, height, width]);
        let a = ArrayD::from_shape_vec(dims.clone(), input(x_in, len, "x_in")?.to_vec()).expect("matching length");
        let b = ArrayD::from_shape_vec(dims, input(x_out, len, "x_out")?.to_vec()).expect("matching length");
        let adjusted = out_ref(lambda_adjusted, "lambda_adjusted")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mixed, lam) = mixing::mix_cut(&a, &b, lambda, &mut rng)?;
        output(out, len, "out")?.copy_from_slice(mixed.as_slice().expect("standard layout"));
        *adjusted = lam;
        Ok(())
    })
}

/// Draws `n_splits` holdout environments over `classes`.
#[no_mangle]
pub unsafe extern "C" fn mixoe_splits_make(
    dataset: *const c_char,
    classes: *const *const c_char,
    n_classes: usize,
    coarse_sources: *const *const c_char,
    n_coarse: usize,
    n_ood: usize,
    n_splits: u32,
    seed: u64,
    out: *mut *mut MixoeSplitSet,
) -> MixoeStatus {
    guard(|| {
        let dataset = string(dataset, "dataset")?;
        let classes = strings(classes, n_classes, "classes")?;
        let coarse = strings(coarse_sources, n_coarse, "coarse_sources")?;
        let out = out_ref(out, "out")?;
        let specs = splits::make_holdout_splits(&dataset, &classes, &coarse, n_ood, n_splits, seed)?;
        *out = Box::into_raw(Box::new(MixoeSplitSet { specs }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixoe_splits_len(set: *const MixoeSplitSet, out: *mut usize) -> MixoeStatus {
    guard(|| {
        let set = set.as_ref().ok_or(Fail::Null("set"))?;
        *out_ref(out, "out")? = set.specs.len();
        Ok(())
    })
}

/// Manifest text of split `index` (0-based). Free with
/// [`mixoe_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mixoe_splits_manifest(
    set: *const MixoeSplitSet,
    index: usize,
    out: *mut *mut c_char,
) -> MixoeStatus {
    guard(|| {
        let set = set.as_ref().ok_or(Fail::Null("set"))?;
        let out = out_ref(out, "out")?;
        let spec = set.specs.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("split {index} out of range for {} splits", set.specs.len()))
        })?;
        *out = into_c_string(spec.to_manifest());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixoe_splits_free(set: *mut MixoeSplitSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Rebuilds the classifier recorded in a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mixoe_model_load(path: *const c_char, out: *mut *mut MixoeModel) -> MixoeStatus {
    guard(|| {
        let path = string(path, "path")?;
        let out = out_ref(out, "out")?;
        let ckpt = Checkpoint::load(Path::new(&path), None)?;
        let spec: MlpSpec = serde_json::from_str(&ckpt.architecture).map_err(|e| Error::Checkpoint {
            path: path.clone().into(),
            reason: format!("unknown architecture: {e}"),
        })?;
        let mut model = Mlp::new(spec, 0)?;
        ckpt.restore(&mut model)?;
        *out = Box::into_raw(Box::new(MixoeModel { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixoe_model_input_dim(model: *const MixoeModel, out: *mut usize) -> MixoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_ref(out, "out")? = m.model.input_dim();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixoe_model_num_classes(model: *const MixoeModel, out: *mut usize) -> MixoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        *out_ref(out, "out")? = m.model.num_classes();
        Ok(())
    })
}

/// Logits for `rows` inputs of `input_dim` values each, written row-major
/// into `out` (`rows × num_classes`).
#[no_mangle]
pub unsafe extern "C" fn mixoe_model_forward(
    model: *const MixoeModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
) -> MixoeStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        let d = m.input_dim();
        let x = input(inputs, rows * d, "inputs")?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("inputs contain non-finite values".into()).into());
        }
        let x = Array2::from_shape_vec((rows, d), x.to_vec()).expect("rows × input_dim");
        let logits = m.forward(&x);
        output(out, rows * m.num_classes(), "out")?.copy_from_slice(logits.as_slice().expect("standard layout"));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixoe_model_free(model: *mut MixoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
