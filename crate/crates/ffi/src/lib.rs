//! C ABI over `desta-core`.
//!
//! Every fallible function returns a [`DestaStatus`]. On failure a message is
//! stored per thread and can be read with [`desta_last_error`]. Strings handed
//! out by this library must be released with [`desta_string_free`]; model
//! handles with [`desta_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use desta_core::caption::{validate_caption, Lexicon, MetadataRecord};
use desta_core::config::ProjectConfig;
use desta_core::encoder::synthesize_features;
use desta_core::eval::{exact_match, zero_shot_metrics, AllowedSetDetector, ZeroShotResponse};
use desta_core::model::DestaModel;
use desta_core::tensor::checkpoint::Checkpoint;
use desta_core::tokenizer::Tokenizer;
use desta_core::trainer::{cosine_lr, instruction_prompt, load_weights};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DestaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    OutOfRange = 4,
    Io = 5,
    Model = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct DestaHandle {
    model: DestaModel,
    config: ProjectConfig,
    tokenizer: Tokenizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut m = msg.into();
    m.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(m).expect("NULs removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(DestaStatus, String);

type FfiResult<T> = Result<T, Fail>;

fn fail<T>(status: DestaStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> DestaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DestaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DestaStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(DestaStatus::NullArgument, format!("`{name}` is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(DestaStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn out_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .or_else(|_| fail(DestaStatus::InvalidArgument, "result contains a NUL byte"))
}

fn parse_record(json: &str) -> FfiResult<MetadataRecord> {
    let r: MetadataRecord = serde_json::from_str(json)
        .or_else(|e| fail(DestaStatus::InvalidArgument, format!("metadata: {e}")))?;
    r.validate()
        .or_else(|e| fail(DestaStatus::InvalidArgument, e.to_string()))?;
    Ok(r)
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn desta_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn desta_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a model. `config_toml` may be NULL for the toy preset.
///
/// # Safety
/// `config_toml` must be NULL or a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn desta_model_new(config_toml: *const c_char, seed: u64, out: *mut *mut DestaHandle) -> DestaStatus {
    guard(|| {
        if out.is_null() {
            return fail(DestaStatus::NullArgument, "`out` is null");
        }
        let mut config = if config_toml.is_null() {
            ProjectConfig::toy()
        } else {
            ProjectConfig::parse(str_arg(config_toml, "config_toml")?)
                .or_else(|e| fail(DestaStatus::InvalidArgument, e.to_string()))?
        };
        config.seed = seed;
        let model = DestaModel::new(config.model_config(None), seed)
            .or_else(|e| fail(DestaStatus::Model, e.to_string()))?;
        *out = Box::into_raw(Box::new(DestaHandle {
            model,
            config,
            tokenizer: Tokenizer::default(),
        }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be NULL or come from [`desta_model_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn desta_model_free(handle: *mut DestaHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn handle_mut<'a>(h: *mut DestaHandle) -> FfiResult<&'a mut DestaHandle> {
    h.as_mut()
        .map_or_else(|| fail(DestaStatus::NullArgument, "`handle` is null"), Ok)
}

/// Loads trainable weights from a training checkpoint file.
///
/// # Safety
/// `handle` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn desta_model_load_checkpoint(handle: *mut DestaHandle, path: *const c_char) -> DestaStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(path).or_else(|e| fail(DestaStatus::Io, e.to_string()))?;
        load_weights(&mut h.model, ckpt).or_else(|e| fail(DestaStatus::Model, e.to_string()))
    })
}

/// Sets the LoRA scale; must lie in [0, 1].
///
/// # Safety
/// `handle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn desta_model_set_lora_scale(handle: *mut DestaHandle, scale: f64) -> DestaStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        if !(0.0..=1.0).contains(&scale) {
            return fail(DestaStatus::OutOfRange, format!("scale {scale} outside [0, 1]"));
        }
        h.model
            .set_lora_scale(scale)
            .or_else(|e| fail(DestaStatus::Model, e.to_string()))
    })
}

/// # Safety
/// `handle` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn desta_model_trainable_params(handle: *mut DestaHandle, out: *mut usize) -> DestaStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        if out.is_null() {
            return fail(DestaStatus::NullArgument, "`out` is null");
        }
        *out = h.model.count_trainable_params().total;
        Ok(())
    })
}

/// Greedy answer to `instruction` about the audio described by
/// `metadata_json` (one metadata record; features are synthesised from it).
/// The result must be released with [`desta_string_free`].
///
/// # Safety
/// `handle` must be a live handle; strings valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn desta_model_generate(
    handle: *mut DestaHandle,
    metadata_json: *const c_char,
    instruction: *const c_char,
    max_new_tokens: usize,
    out: *mut *mut c_char,
) -> DestaStatus {
    guard(|| {
        let h = handle_mut(handle)?;
        if out.is_null() {
            return fail(DestaStatus::NullArgument, "`out` is null");
        }
        let record = parse_record(str_arg(metadata_json, "metadata_json")?)?;
        let instruction = str_arg(instruction, "instruction")?;
        let cfg = &h.config;
        let frames = cfg.paths.synthetic_frames.unwrap_or(cfg.encoder.frames);
        let features = synthesize_features(&record, cfg.encoder.feature_dim, frames, cfg.seed);
        let enc = h
            .model
            .encode(&features)
            .or_else(|e| fail(DestaStatus::Model, e.to_string()))?;
        let prompt = instruction_prompt(&h.tokenizer, &record.transcript, instruction);
        let ids = h
            .model
            .generate(Some(&enc), &prompt, max_new_tokens)
            .or_else(|e| fail(DestaStatus::Model, e.to_string()))?;
        *out = out_string(h.tokenizer.decode(&ids))?;
        Ok(())
    })
}

/// 1 when the strings agree after answer normalization, 0 when not, -1 on
/// invalid input.
///
/// # Safety
/// Both arguments must be valid strings.
#[no_mangle]
pub unsafe extern "C" fn desta_exact_match(prediction: *const c_char, label: *const c_char) -> c_int {
    let mut result = -1;
    let status = guard(|| {
        let p = str_arg(prediction, "prediction")?;
        let l = str_arg(label, "label")?;
        result = exact_match(p, l, None) as c_int;
        Ok(())
    });
    if status == DestaStatus::Ok {
        result
    } else {
        -1
    }
}

/// Zero-shot metrics over line-delimited JSON responses, each
/// `{"question_id","text","label","allowed":[...]}`. Accuracy is NaN when
/// nothing followed the instruction.
///
/// # Safety
/// `responses_jsonl` must be a valid string; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn desta_zero_shot_metrics(
    responses_jsonl: *const c_char,
    success_rate: *mut f64,
    accuracy: *mut f64,
    following_rate: *mut f64,
) -> DestaStatus {
    guard(|| {
        if success_rate.is_null() || accuracy.is_null() || following_rate.is_null() {
            return fail(DestaStatus::NullArgument, "output pointer is null");
        }
        let text = str_arg(responses_jsonl, "responses_jsonl")?;
        let responses: Vec<ZeroShotResponse> = desta_core::jsonl::parse_str(text)
            .or_else(|e| fail(DestaStatus::InvalidArgument, e.to_string()))?;
        let r = zero_shot_metrics(&responses, &AllowedSetDetector)
            .or_else(|e| fail(DestaStatus::InvalidArgument, e.to_string()))?;
        *success_rate = r.success_rate;
        *accuracy = r.accuracy.unwrap_or(f64::NAN);
        *following_rate = r.following_rate;
        Ok(())
    })
}

/// Checks a caption against its metadata with the shipped lexicon. Writes 1
/// to `passed` when it is accepted, else 0; rejection reasons are then
/// available from [`desta_last_error`].
///
/// # Safety
/// Strings must be valid; `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn desta_validate_caption(
    caption: *const c_char,
    metadata_json: *const c_char,
    passed: *mut c_int,
) -> DestaStatus {
    guard(|| {
        if passed.is_null() {
            return fail(DestaStatus::NullArgument, "`passed` is null");
        }
        let caption = str_arg(caption, "caption")?;
        let record = parse_record(str_arg(metadata_json, "metadata_json")?)?;
        let report = validate_caption(caption, &record, &Lexicon::default());
        if !report.passed() {
            set_error(report.reasons.join(", "));
        }
        *passed = report.passed() as c_int;
        Ok(())
    })
}

/// Cosine-annealed learning rate with linear warmup. Infallible.
#[no_mangle]
pub extern "C" fn desta_cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64, warmup_steps: usize) -> f64 {
    cosine_lr(step, total_steps, lr_max, lr_min, warmup_steps)
}
