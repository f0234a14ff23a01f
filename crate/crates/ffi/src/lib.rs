//! C interface. Every function returns a [`DmStatus`]; on failure the
//! message is kept per thread and read with [`dm_last_error`]. Models are
//! opaque handles released with [`dm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffmark::autodiff::Rng;
use diffmark::codec::{logits_to_bits, WatermarkBits};
use diffmark::dsp::{AttackSpec, AudioClip, DitherPdf};
use diffmark::io::load_model_file;
use diffmark::model::Model;
use diffmark::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Distortions accepted by [`dm_attack`]. `param` meaning per kind:
/// SNR in dB, echo attenuation (100 ms delay), crop rate, unused (TPDF),
/// cutoff in Hz, unused (0.3-8 kHz), level, stretch factor (above 1 shortens).
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmAttackKind {
    None = 0,
    GaussianNoise = 1,
    Echo = 2,
    RearCrop = 3,
    Dither = 4,
    Lowpass = 5,
    Bandpass = 6,
    PinkNoise = 7,
    TimeStretch = 8,
}

/// A loaded checkpoint.
pub struct DmModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> DmStatus {
    match err {
        Error::Io { .. } => DmStatus::Io,
        Error::Format { .. } | Error::Checksum { .. } | Error::Version { .. } | Error::MissingTensors(_) => {
            DmStatus::Format
        }
        Error::NonFinite(_) | Error::GradCheck(_) => DmStatus::Numeric,
        _ => DmStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`dm_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (DmStatus, String)>) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DmStatus, String) {
    (DmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (DmStatus, String) {
    (DmStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(m: *const DmModel) -> Result<&'a Model, (DmStatus, String)> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `cap`. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dm_model_load(path: *const c_char, out: *mut *mut DmModel) -> DmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_model_file(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DmModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`dm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dm_model_free(model: *mut DmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Payload length, clip length in samples and sample rate of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn dm_model_info(
    model: *const DmModel,
    payload_bits: *mut usize,
    clip_len: *mut usize,
    sample_rate: *mut u32,
) -> DmStatus {
    guard(|| {
        let m = model_ref(model)?;
        if let Some(p) = payload_bits.as_mut() {
            *p = m.payload_bits();
        }
        if let Some(p) = clip_len.as_mut() {
            *p = m.clip_len();
        }
        if let Some(p) = sample_rate.as_mut() {
            *p = m.config.audio.sample_rate;
        }
        Ok(())
    })
}

/// Synthesizes one watermarked clip carrying `bits` (values 0 or 1),
/// conditioned on the mel spectrogram of `cond_samples`. Both the
/// conditioning clip and `out` hold exactly the model's clip length.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn dm_generate(
    model: *const DmModel,
    cond_samples: *const f64,
    cond_len: usize,
    bits: *const u8,
    n_bits: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cond = slice(cond_samples, cond_len, "cond_samples")?;
        let bits = slice(bits, n_bits, "bits")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if cond_len != m.clip_len() || n_bits != m.payload_bits() {
            return Err(invalid(format!(
                "model expects {} conditioning samples and {} bits",
                m.clip_len(),
                m.payload_bits()
            )));
        }
        if out_len < m.clip_len() {
            return Err((DmStatus::BufferTooSmall, format!("output needs {} samples", m.clip_len())));
        }
        let payload = WatermarkBits::new(bits.to_vec()).map_err(lib_err)?;
        let clip = AudioClip::new(cond.to_vec(), m.config.audio.sample_rate).map_err(lib_err)?;
        let c = m.conditioning(&[&clip]).map_err(lib_err)?;
        let y = m
            .synthesize(Some(std::slice::from_ref(&payload)), &c, &mut Rng::new(seed))
            .map_err(lib_err)?;
        ptr::copy_nonoverlapping(y[0].samples.as_ptr(), out, m.clip_len());
        Ok(())
    })
}

/// Decodes `n_bits` bits from a clip of any length. `confidence`, when not
/// null, receives the mean of `|2 sigmoid(logit) - 1|`.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn dm_extract(
    model: *const DmModel,
    samples: *const f64,
    len: usize,
    bits_out: *mut u8,
    n_bits: usize,
    confidence: *mut f64,
) -> DmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = slice(samples, len, "samples")?;
        if bits_out.is_null() {
            return Err(null("bits_out"));
        }
        if n_bits < m.payload_bits() {
            return Err((DmStatus::BufferTooSmall, format!("payload has {} bits", m.payload_bits())));
        }
        let clip = AudioClip::new(x.to_vec(), m.config.audio.sample_rate).map_err(lib_err)?;
        let logits = m.extract_logits(&clip).map_err(lib_err)?;
        let bits = logits_to_bits(&logits).map_err(lib_err)?;
        ptr::copy_nonoverlapping(bits.bits().as_ptr(), bits_out, bits.len());
        if let Some(c) = confidence.as_mut() {
            *c = logits.iter().map(|z| (2.0 / (1.0 + (-z).exp()) - 1.0).abs()).sum::<f64>() / logits.len() as f64;
        }
        Ok(())
    })
}

fn attack_spec(kind: DmAttackKind, param: f64) -> AttackSpec {
    match kind {
        DmAttackKind::None => AttackSpec::None,
        DmAttackKind::GaussianNoise => AttackSpec::GaussianNoise { snr_db: param },
        DmAttackKind::Echo => AttackSpec::Echo {
            attenuation: param,
            delay_ms: 100.0,
        },
        DmAttackKind::RearCrop => AttackSpec::RearCrop { rate: param },
        DmAttackKind::Dither => AttackSpec::Dither { pdf: DitherPdf::Tpdf },
        DmAttackKind::Lowpass => AttackSpec::Lowpass { cutoff_hz: param },
        DmAttackKind::Bandpass => AttackSpec::Bandpass {
            low_hz: 300.0,
            high_hz: 8000.0,
        },
        DmAttackKind::PinkNoise => AttackSpec::PinkNoise { level: param },
        DmAttackKind::TimeStretch => AttackSpec::TimeStretch { factor: param },
    }
}

/// Applies one distortion. Crops and stretches change the length, so the
/// result length goes to `*out_len`; when `out_cap` is too small nothing is
/// written except `*out_len` and the status is `BUFFER_TOO_SMALL`.
///
/// # Safety
/// `samples` must be valid for `len` values, `out` for `out_cap` values.
#[no_mangle]
pub unsafe extern "C" fn dm_attack(
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    kind: DmAttackKind,
    param: f64,
    seed: u64,
    out: *mut f64,
    out_cap: usize,
    out_len: *mut usize,
) -> DmStatus {
    guard(|| {
        let x = slice(samples, len, "samples")?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let spec = attack_spec(kind, param);
        spec.validate().map_err(lib_err)?;
        let clip = AudioClip::new(x.to_vec(), sample_rate).map_err(lib_err)?;
        let y = spec.apply(&clip, &mut Rng::new(seed)).map_err(lib_err)?;
        *out_len = y.len();
        if out.is_null() || out_cap < y.len() {
            return Err((DmStatus::BufferTooSmall, format!("result has {} samples", y.len())));
        }
        ptr::copy_nonoverlapping(y.samples.as_ptr(), out, y.len());
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
