//! C ABI over `modalnet`.
//!
//! Models are opaque handles created by `mn_model_*` constructors and
//! released with `mn_model_free`. Every fallible call returns an
//! [`MnStatus`]; the message of the most recent failure on the calling
//! thread is available through `mn_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use modalnet::cost::cost_report;
use modalnet::graph::AttentionMode;
use modalnet::model::{build_model, parse_architecture, ModalityInputs, Model, ModelConfig, DEFAULT_TABLE};
use modalnet::params::Ratio;
use modalnet::{Error, Shape, Tensor};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Numeric = 4,
    Label = 5,
    Table = 6,
    Graph = 7,
    Resolution = 8,
    Input = 9,
    Config = 10,
    Checkpoint = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Attention applied to every connection of a freshly built model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnAttention {
    None = 0,
    Static = 1,
    SelfAttention = 2,
    OneShot = 3,
}

/// Input streams, in the order `mn_model_forward` takes them.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnModality {
    Rgb = 0,
    Flow = 1,
    Object = 2,
}

/// Opaque model handle.
pub struct MnModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MnBuildOptions {
    pub width_num: u64,
    pub width_den: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Zero keeps the table's value.
    pub num_classes: usize,
    /// Zero keeps the table's value.
    pub object_channels: usize,
    pub attention: MnAttention,
    pub seed: u64,
}

impl Default for MnAttention {
    fn default() -> Self {
        MnAttention::None
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MnCost {
    pub total_params: u64,
    pub total_flops: u64,
    pub attention_param_ratio: f64,
    pub attention_flops_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MnStatus {
    match e.category() {
        "shape" => MnStatus::Shape,
        "numeric" => MnStatus::Numeric,
        "label" => MnStatus::Label,
        "table" => MnStatus::Table,
        "graph" => MnStatus::Graph,
        "resolution" => MnStatus::Resolution,
        "input" => MnStatus::Input,
        "checkpoint" => MnStatus::Checkpoint,
        "io" => MnStatus::Io,
        _ => MnStatus::Config,
    }
}

struct Fail(MnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(MnStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const MnModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn config_from(opts: &MnBuildOptions) -> Result<ModelConfig, Fail> {
    let width_scale = Ratio::new(opts.width_num, opts.width_den)?;
    Ok(ModelConfig {
        width_scale,
        frames: opts.frames,
        height: opts.height,
        width: opts.width,
        num_classes: (opts.num_classes > 0).then_some(opts.num_classes),
        object_channels: (opts.object_channels > 0).then_some(opts.object_channels),
        attention: match opts.attention {
            MnAttention::None => AttentionMode::None,
            MnAttention::Static => AttentionMode::Static,
            MnAttention::SelfAttention => AttentionMode::SelfAttention,
            MnAttention::OneShot => AttentionMode::OneShot,
        },
        seed: opts.seed,
        ..ModelConfig::default()
    })
}

unsafe fn emit(out: *mut *mut MnModel, model: Model) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(MnModel { inner: model }));
    Ok(())
}

/// Defaults matching the library: width 1/8, 4 frames of 16x16, no attention.
#[no_mangle]
pub extern "C" fn mn_build_options_default() -> MnBuildOptions {
    let c = ModelConfig::default();
    MnBuildOptions {
        width_num: c.width_scale.num,
        width_den: c.width_scale.den,
        frames: c.frames,
        height: c.height,
        width: c.width,
        num_classes: 0,
        object_channels: 0,
        attention: MnAttention::None,
        seed: c.seed,
    }
}

/// Builds a model from a JSON architecture table, or from the built-in
/// table when `table_json` is null.
///
/// # Safety
/// `table_json` must be null or a NUL-terminated string; `opts` and `out`
/// must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mn_model_build(
    table_json: *const c_char,
    opts: *const MnBuildOptions,
    out: *mut *mut MnModel,
) -> MnStatus {
    guard(|| {
        let text = if table_json.is_null() { DEFAULT_TABLE } else { str_arg(table_json, "table_json")? };
        let opts = opts.as_ref().ok_or_else(|| null("opts"))?;
        let table = parse_architecture(text)?;
        let model = build_model(&table, &config_from(opts)?)?;
        emit(out, model)
    })
}

/// Loads a model saved under `dir` with file stem `stem`.
///
/// # Safety
/// `dir` and `stem` must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_load(dir: *const c_char, stem: *const c_char, out: *mut *mut MnModel) -> MnStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let model = Model::load(&dir, str_arg(stem, "stem")?)?;
        emit(out, model)
    })
}

/// # Safety
/// `model` must come from this library; `dir` and `stem` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mn_model_save(model: *const MnModel, dir: *const c_char, stem: *const c_char) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Fail(MnStatus::Io, format!("{}: {e}", dir.display())))?;
        m.save(&dir, str_arg(stem, "stem")?)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mn_model_free(model: *mut MnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_num_classes(model: *const MnModel, out: *mut usize) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.num_classes;
        Ok(())
    })
}

/// Channel count the model expects for `modality`.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_input_channels(model: *const MnModel, modality: MnModality, out: *mut usize) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = match modality {
            MnModality::Rgb => 3,
            MnModality::Flow => 2,
            MnModality::Object => m
                .blocks
                .values()
                .find(|b| b.spec.kind == modalnet::blocks::BlockKind::Object)
                .map(|b| b.in_channels)
                .unwrap_or(0),
        };
        *out.as_mut().ok_or_else(|| null("out"))? = c;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_param_count(model: *const MnModel, out: *mut u64) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.total_elements() as u64;
        Ok(())
    })
}

unsafe fn stream(
    data: *const f64,
    len: usize,
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Option<Tensor>, Fail> {
    if data.is_null() {
        return Ok(None);
    }
    let shape = Shape::new(n, t, h, w, c);
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Ok(Some(Tensor::from_vec(shape, values)?))
}

/// Runs the model on `batch` clips of `frames` frames at the model's
/// configured size. Inputs are `(N, T, H, W, C)` row-major with channels
/// fastest; a null stream is treated as absent. Writes `batch * classes`
/// logits to `logits`.
///
/// # Safety
/// Every non-null input pointer must reference `*_len` readable doubles;
/// `logits` must reference `logits_len` writable doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mn_model_forward(
    model: *const MnModel,
    batch: usize,
    frames: usize,
    rgb: *const f64,
    rgb_len: usize,
    flow: *const f64,
    flow_len: usize,
    object: *const f64,
    object_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (h, w) = (m.config.height, m.config.width);
        let mut object_c = 0;
        mn_model_input_channels(model, MnModality::Object, &mut object_c);
        let inputs = ModalityInputs {
            rgb: stream(rgb, rgb_len, batch, frames, h, w, 3)?,
            flow: stream(flow, flow_len, batch, frames, h, w, 2)?,
            object: stream(object, object_len, batch, frames, h, w, object_c)?,
        };
        let out = m.logits(&inputs)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len < out.len() {
            return Err(Fail(MnStatus::BufferTooSmall, format!("need {} logits, buffer holds {logits_len}", out.len())));
        }
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, out.len());
        Ok(())
    })
}

/// Static cost accounting for `batch` clips of `frames` frames.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_cost(model: *const MnModel, batch: usize, frames: usize, out: *mut MnCost) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let r = cost_report(m, batch, frames);
        *out.as_mut().ok_or_else(|| null("out"))? = MnCost {
            total_params: r.total_params,
            total_flops: r.total_flops,
            attention_param_ratio: r.attention_param_ratio,
            attention_flops_ratio: r.attention_flops_ratio,
        };
        Ok(())
    })
}

/// Writes the model's connectivity as Graphviz DOT to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mn_model_export_dot(model: *const MnModel, path: *const c_char) -> MnStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.graph().export_dot(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length.
///
/// # Safety
/// `buf` must be null or reference `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
