//! C ABI over the foleygen pipeline.
//!
//! Conventions: every constructor returns `FgStatus` and writes the new
//! opaque handle through an out pointer; handles are freed with the matching
//! `*_free` (null is a no-op). Any non-`FG_STATUS_OK` return leaves a message
//! readable via `fg_last_error_message` (thread-local, valid until the next
//! call on the same thread). Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use foleygen::featurizer::FeaturizerConfig;
use foleygen::infer::{generate, GenConfig};
use foleygen::lm::{load_checkpoint, LMParams};
use foleygen::masks::Mechanism;
use foleygen::rvq::{load_model, save_tokens, RVQModel, TokenGrid};
use foleygen::toy_data::Waveform;
use foleygen::visual::{load_external_embeddings, VisualFeatures};
use foleygen::wav::write_wav;
use foleygen::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    /// File could not be read or written.
    Io = 1,
    /// File contents malformed (bad magic, truncation).
    Format = 2,
    /// Bad configuration or missing artifact.
    Config = 3,
    /// Dimension mismatch between artifacts.
    Shape = 4,
    /// Argument rejected by validation.
    Invalid = 5,
    /// Numerical failure (non-finite values).
    Numeric = 6,
    /// A required pointer argument was null.
    NullPointer = 7,
    /// A string argument was not valid UTF-8.
    Utf8 = 8,
    /// Internal panic caught at the boundary.
    Panic = 9,
}

/// Attention mechanism selector, mirroring the config values.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgMechanism {
    AllFrame = 0,
    CausalVisual = 1,
    FrameSpecific = 2,
}

impl From<FgMechanism> for Mechanism {
    fn from(m: FgMechanism) -> Mechanism {
        match m {
            FgMechanism::AllFrame => Mechanism::AllFrame,
            FgMechanism::CausalVisual => Mechanism::CausalVisual,
            FgMechanism::FrameSpecific => Mechanism::FrameSpecific,
        }
    }
}

pub struct FgCodec(RVQModel);
pub struct FgModel(LMParams);
pub struct FgFeaturizer(FeaturizerConfig);
pub struct FgVisual(VisualFeatures);
pub struct FgAudio(Waveform);
pub struct FgTokens(TokenGrid);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FgStatus {
    match e {
        Error::Io { .. } => FgStatus::Io,
        Error::Format(_) => FgStatus::Format,
        Error::Config(_) => FgStatus::Config,
        Error::Shape(_) => FgStatus::Shape,
        Error::Invalid(_) => FgStatus::Invalid,
        Error::Numeric(_) => FgStatus::Numeric,
    }
}

fn fail(e: Error) -> FgStatus {
    set_error(&e.to_string());
    status_of(&e)
}

/// Runs `f` with panics converted to FG_STATUS_PANIC.
fn guarded(f: impl FnOnce() -> FgStatus) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic caught at the FFI boundary");
            FgStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be a valid nul-terminated string.
unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, FgStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(FgStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path argument is not valid UTF-8");
            Err(FgStatus::Utf8)
        }
    }
}

macro_rules! nonnull {
    ($p:expr, $what:expr) => {
        if $p.is_null() {
            set_error(concat!("null pointer argument: ", $what));
            return FgStatus::NullPointer;
        }
    };
}

fn emit<T>(out: *mut *mut T, value: T) {
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Crate version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread ("" if none).
/// The pointer stays valid until the next foleygen call on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- codec -------------------------------------------------------------------

/// Loads an RVQM codec file.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_codec_load(path: *const c_char, out: *mut *mut FgCodec) -> FgStatus {
    guarded(|| {
        nonnull!(out, "out");
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_model(&path) {
            Ok(m) => {
                emit(out, FgCodec(m));
                FgStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `c` must come from fg_codec_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_codec_free(c: *mut FgCodec) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of codebooks (0 for null).
///
/// # Safety
/// `c` must come from fg_codec_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_codec_n_q(c: *const FgCodec) -> usize {
    c.as_ref().map_or(0, |c| c.0.config.n_q)
}

/// Codes per codebook (0 for null).
///
/// # Safety
/// `c` must come from fg_codec_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_codec_codebook_size(c: *const FgCodec) -> usize {
    c.as_ref().map_or(0, |c| c.0.config.codebook_size)
}

// ---- model -------------------------------------------------------------------

/// Loads an FGLM checkpoint.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_model_load(path: *const c_char, out: *mut *mut FgModel) -> FgStatus {
    guarded(|| {
        nonnull!(out, "out");
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(&path) {
            Ok(m) => {
                emit(out, FgModel(m));
                FgStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `m` must come from fg_model_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_model_free(m: *mut FgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Token streams the model predicts per step (0 for null).
///
/// # Safety
/// `m` must come from fg_model_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_model_n_q(m: *const FgModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.config.n_q)
}

/// Delayed steps one generation emits (0 for null).
///
/// # Safety
/// `m` must come from fg_model_load (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_model_gen_steps(m: *const FgModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.config.max_s - 1)
}

// ---- featurizer ----------------------------------------------------------------

/// Builds the tone-probe featurizer used when the codec was trained.
/// `tones` lists the class tone frequencies in Hz.
///
/// # Safety
/// `tones` must point to `n_tones` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_featurizer_new(
    tones: *const f64,
    n_tones: usize,
    d: usize,
    hop: usize,
    sample_rate: u32,
    out: *mut *mut FgFeaturizer,
) -> FgStatus {
    guarded(|| {
        nonnull!(out, "out");
        nonnull!(tones, "tones");
        let tones = std::slice::from_raw_parts(tones, n_tones);
        match FeaturizerConfig::for_tones(tones, d, hop, sample_rate) {
            Ok(fz) => {
                emit(out, FgFeaturizer(fz));
                FgStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `f` must come from fg_featurizer_new (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_featurizer_free(f: *mut FgFeaturizer) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

// ---- visual features -----------------------------------------------------------

/// Loads a VEMB embedding file.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_visual_load(path: *const c_char, out: *mut *mut FgVisual) -> FgStatus {
    guarded(|| {
        nonnull!(out, "out");
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_external_embeddings(&path) {
            Ok(v) => {
                emit(out, FgVisual(v));
                FgStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Wraps a caller-provided T x D_v row-major feature matrix.
///
/// # Safety
/// `feats` must point to `t * d_v` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_visual_from_buffer(
    feats: *const f64,
    t: usize,
    d_v: usize,
    frame_rate_v: u32,
    out: *mut *mut FgVisual,
) -> FgStatus {
    guarded(|| {
        nonnull!(out, "out");
        nonnull!(feats, "feats");
        if t == 0 || d_v == 0 || frame_rate_v == 0 {
            set_error("visual features need t >= 1, d_v >= 1, frame_rate_v >= 1");
            return FgStatus::Invalid;
        }
        let data = std::slice::from_raw_parts(feats, t * d_v).to_vec();
        let Ok(mat) = ndarray_from(data, t, d_v) else {
            set_error("feature buffer does not form a T x D_v matrix");
            return FgStatus::Shape;
        };
        emit(out, FgVisual(VisualFeatures { feats: mat, frame_rate_v }));
        FgStatus::Ok
    })
}

fn ndarray_from(
    data: Vec<f64>,
    t: usize,
    d_v: usize,
) -> Result<foleygen::ndarray::Array2<f64>, foleygen::ndarray::ShapeError> {
    foleygen::ndarray::Array2::from_shape_vec((t, d_v), data)
}

/// # Safety
/// `v` must come from a fg_visual_* constructor (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_visual_free(v: *mut FgVisual) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Visual frame count (0 for null).
///
/// # Safety
/// `v` must come from a fg_visual_* constructor (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_visual_t(v: *const FgVisual) -> usize {
    v.as_ref().map_or(0, |v| v.0.t())
}

// ---- generation -----------------------------------------------------------------

/// Samples one audio clip with classifier-free guidance. On success writes a
/// waveform handle to `out_audio` and, when `out_tokens` is non-null, the
/// token grid to `out_tokens`.
///
/// # Safety
/// Handles must come from their constructors; `out_audio` must be valid;
/// `out_tokens` may be null.
#[no_mangle]
pub unsafe extern "C" fn fg_generate(
    model: *const FgModel,
    codec: *const FgCodec,
    fz: *const FgFeaturizer,
    visual: *const FgVisual,
    mechanism: FgMechanism,
    cfg_scale: f64,
    top_k: usize,
    temperature: f64,
    seed: u64,
    out_audio: *mut *mut FgAudio,
    out_tokens: *mut *mut FgTokens,
) -> FgStatus {
    guarded(|| {
        nonnull!(model, "model");
        nonnull!(codec, "codec");
        nonnull!(fz, "fz");
        nonnull!(visual, "visual");
        nonnull!(out_audio, "out_audio");
        let model = &*model;
        let g = GenConfig {
            cfg_scale,
            top_k,
            temperature,
            max_steps: model.0.config.max_s - 1,
            seed,
        };
        match generate(&model.0, &(*codec).0, &(*fz).0, &(*visual).0, &g, mechanism.into()) {
            Ok((grid, wave)) => {
                emit(out_audio, FgAudio(wave));
                if !out_tokens.is_null() {
                    emit(out_tokens, FgTokens(grid));
                }
                FgStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

// ---- audio ------------------------------------------------------------------------

/// Sample count (0 for null).
///
/// # Safety
/// `a` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_audio_len(a: *const FgAudio) -> usize {
    a.as_ref().map_or(0, |a| a.0.samples.len())
}

/// Sample rate in Hz (0 for null).
///
/// # Safety
/// `a` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_audio_sample_rate(a: *const FgAudio) -> u32 {
    a.as_ref().map_or(0, |a| a.0.sample_rate)
}

/// Copies up to `cap` samples into `dst`; returns the full sample count.
///
/// # Safety
/// `dst` must point to at least `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn fg_audio_samples(a: *const FgAudio, dst: *mut f32, cap: usize) -> usize {
    let Some(a) = a.as_ref() else { return 0 };
    if !dst.is_null() {
        let n = a.0.samples.len().min(cap);
        std::ptr::copy_nonoverlapping(a.0.samples.as_ptr(), dst, n);
    }
    a.0.samples.len()
}

/// Writes the waveform as 16-bit PCM WAV.
///
/// # Safety
/// `a` must come from fg_generate; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn fg_audio_save_wav(a: *const FgAudio, path: *const c_char) -> FgStatus {
    guarded(|| {
        nonnull!(a, "audio");
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_wav(&path, &(*a).0) {
            Ok(()) => FgStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `a` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_audio_free(a: *mut FgAudio) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

// ---- tokens -------------------------------------------------------------------------

/// Codebook count (0 for null).
///
/// # Safety
/// `t` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_tokens_n_q(t: *const FgTokens) -> usize {
    t.as_ref().map_or(0, |t| t.0.n_q())
}

/// Frames per codebook (0 for null).
///
/// # Safety
/// `t` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_tokens_len(t: *const FgTokens) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Code at (codebook k, frame idx); -1 when out of range or null.
///
/// # Safety
/// `t` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_tokens_at(t: *const FgTokens, k: usize, idx: usize) -> i32 {
    t.as_ref()
        .and_then(|t| t.0.codes.get(k))
        .and_then(|row| row.get(idx))
        .map_or(-1, |&c| c as i32)
}

/// Writes the grid as an RVQT token file.
///
/// # Safety
/// `t` must come from fg_generate; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn fg_tokens_save(t: *const FgTokens, path: *const c_char) -> FgStatus {
    guarded(|| {
        nonnull!(t, "tokens");
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_tokens(&path, &(*t).0) {
            Ok(()) => FgStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `t` must come from fg_generate (or be null).
#[no_mangle]
pub unsafe extern "C" fn fg_tokens_free(t: *mut FgTokens) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
