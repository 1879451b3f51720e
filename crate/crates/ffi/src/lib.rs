//! C ABI over `loragen`.
//!
//! Every object crosses the boundary as an opaque pointer that must be
//! released with its `_free` function. Every fallible call returns an
//! [`LgStatus`]; on failure the message is kept per thread and can be read
//! with [`lg_last_error`]. Panics are caught at the boundary and reported as
//! [`LgStatus::Panic`].
//!
//! Output buffers follow one convention: the caller passes a capacity, the
//! callee always stores the required length in `*written`, and returns
//! [`LgStatus::BufferTooSmall`] without touching the buffer if it does not fit.
//!
//! Handles are not synchronized. Use one handle from one thread at a time.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use loragen::bench;
use loragen::config::RunConfig;
use loragen::container::{self, Container, Kind};
use loragen::cvae::CvaeModel;
use loragen::data::TaskSuite;
use loragen::model::BaseModel;
use loragen::pipeline::{self, Harvest, Paths};
use loragen::task_vector::{ConditionSource, TaskVector};
use loragen::Error;

/// Result code of every fallible call. Values are stable.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Panic = 4,
    Dimension = 10,
    Length = 11,
    Input = 12,
    Config = 13,
    Parse = 14,
    Layout = 15,
    Training = 16,
    Divergence = 17,
    ConditionSource = 18,
    Dependency = 19,
    Version = 20,
    Container = 21,
    Io = 22,
}

impl LgStatus {
    fn of(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => Self::Dimension,
            Error::Length { .. } => Self::Length,
            Error::Input(_) => Self::Input,
            Error::Config { .. } => Self::Config,
            Error::Parse { .. } => Self::Parse,
            Error::Layout { .. } => Self::Layout,
            Error::Training { .. } => Self::Training,
            Error::Divergence { .. } => Self::Divergence,
            Error::ConditionSource { .. } => Self::ConditionSource,
            Error::Dependency { .. } => Self::Dependency,
            Error::Version { .. } => Self::Version,
            Error::Container(_) => Self::Container,
            Error::Io { .. } => Self::Io,
        }
    }

    fn name(self) -> &'static CStr {
        match self {
            Self::Ok => c"ok",
            Self::NullPointer => c"null-pointer",
            Self::InvalidUtf8 => c"invalid-utf8",
            Self::BufferTooSmall => c"buffer-too-small",
            Self::Panic => c"panic",
            Self::Dimension => c"dimension",
            Self::Length => c"length",
            Self::Input => c"input",
            Self::Config => c"config",
            Self::Parse => c"parse",
            Self::Layout => c"layout",
            Self::Training => c"training",
            Self::Divergence => c"divergence",
            Self::ConditionSource => c"condition-source",
            Self::Dependency => c"dependency",
            Self::Version => c"version",
            Self::Container => c"container",
            Self::Io => c"io",
        }
    }
}

/// Condition source of a generator, as seen from C.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgConditionSource {
    SampleDerived = 0,
    DescriptionDerived = 1,
}

impl From<ConditionSource> for LgConditionSource {
    fn from(s: ConditionSource) -> Self {
        match s {
            ConditionSource::SampleDerived => Self::SampleDerived,
            ConditionSource::DescriptionDerived => Self::DescriptionDerived,
        }
    }
}

/// Fixed facts about a loaded generator.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LgGeneratorInfo {
    /// Trainable parameters of the CVAE.
    pub param_count: usize,
    /// Length of one generated adapter vector.
    pub output_len: usize,
    /// Length of the condition vector it expects.
    pub condition_len: usize,
    pub rank: usize,
    pub n_layers: usize,
    pub source: LgConditionSource,
}

/// Run configuration.
pub struct LgConfig(RunConfig);

/// A trained generator with its normalization statistics.
pub struct LgGenerator(CvaeModel);

/// An output directory with its suite and base model loaded. Checkpoints
/// are read on first use per rank.
pub struct LgWorkspace {
    cfg: RunConfig,
    paths: Paths,
    suite: TaskSuite,
    model: BaseModel,
    harvests: HashMap<usize, Harvest>,
}

impl LgWorkspace {
    fn harvest(&mut self, rank: usize) -> loragen::Result<&Harvest> {
        if !self.harvests.contains_key(&rank) {
            let h = pipeline::load_harvest(&self.paths, rank, self.suite.n_tasks())?;
            self.harvests.insert(rank, h);
        }
        Ok(&self.harvests[&rank])
    }

    fn task(&self, task_id: usize) -> loragen::Result<()> {
        if task_id < self.suite.n_tasks() {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "task {task_id} does not exist (suite has {})",
                self.suite.n_tasks()
            )))
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|b| *b != 0);
    let c = CString::new(bytes).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Internal failure: status plus message.
struct Fail(LgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(LgStatus::of(&e), e.to_string())
    }
}

type Outcome = Result<(), Fail>;

fn guard(f: impl FnOnce() -> Outcome) -> LgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LgStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LgStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies `data` into the caller buffer under the length convention.
unsafe fn write_out<T: Copy>(data: &[T], buf: *mut T, cap: usize, written: *mut usize) -> Outcome {
    if written.is_null() {
        return Err(null("written"));
    }
    *written = data.len();
    if cap < data.len() {
        return Err(Fail(
            LgStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", data.len()),
        ));
    }
    if !data.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    }
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(p))));
    }
}

// ---- errors and version ----

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Short static name of a status code, such as `"dependency"`.
#[no_mangle]
pub extern "C" fn lg_status_name(status: LgStatus) -> *const c_char {
    status.name().as_ptr()
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the buffer size needed including the NUL; nothing is
/// written when `cap` is smaller than that. The message is empty after a
/// successful call.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn lg_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes_with_nul();
        if !buf.is_null() && cap >= bytes.len() {
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        }
        bytes.len()
    })
}

// ---- configuration ----

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn lg_config_default(out: *mut *mut LgConfig) -> LgStatus {
    guard(|| put(out, LgConfig(RunConfig::default())))
}

/// Parses `key = value` text, validated.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_config_parse(text: *const c_char, out: *mut *mut LgConfig) -> LgStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        put(out, LgConfig(RunConfig::parse(text)?))
    })
}

/// Reads and validates a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_config_load(path: *const c_char, out: *mut *mut LgConfig) -> LgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, LgConfig(RunConfig::load(path.as_ref())?))
    })
}

/// Sets one key and revalidates. On failure the configuration is unchanged.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lg_config_set(cfg: *mut LgConfig, key: *const c_char, value: *const c_char) -> LgStatus {
    guard(|| {
        let cfg = deref_mut(cfg, "cfg")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(key, value)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Renders the configuration as `key = value` text.
///
/// # Safety
/// `cfg` must be a live handle; `buf` valid for `cap` bytes; `written` valid.
/// `*written` receives the size including the NUL.
#[no_mangle]
pub unsafe extern "C" fn lg_config_to_text(
    cfg: *const LgConfig,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?;
        let text = CString::new(cfg.0.to_text()).map_err(|e| Fail(LgStatus::Input, e.to_string()))?;
        let bytes = text.as_bytes_with_nul();
        write_out(
            std::slice::from_raw_parts(bytes.as_ptr().cast::<c_char>(), bytes.len()),
            buf,
            cap,
            written,
        )
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lg_config_free(cfg: *mut LgConfig) {
    free(cfg)
}

// ---- generator ----

/// Loads a generator and its normalization sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_generator_load(path: *const c_char, out: *mut *mut LgGenerator) -> LgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, LgGenerator(pipeline::load_generator(path.as_ref())?))
    })
}

/// # Safety
/// `generator` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_generator_info(generator: *const LgGenerator, out: *mut LgGeneratorInfo) -> LgStatus {
    guard(|| {
        let g = &deref(generator, "generator")?.0;
        let out = deref_mut(out, "out")?;
        *out = LgGeneratorInfo {
            param_count: g.param_count(),
            output_len: g.layout.param_count(),
            condition_len: g.config.d_task,
            rank: g.layout.rank,
            n_layers: g.config.n_layers,
            source: g.source.into(),
        };
        Ok(())
    })
}

/// Draws one adapter vector for a raw condition vector with a given seed.
/// The condition is taken to come from the generator's own source.
///
/// # Safety
/// `condition` valid for `condition_len` floats; `out` valid for `cap`
/// floats; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_generator_sample(
    generator: *const LgGenerator,
    condition: *const f32,
    condition_len: usize,
    seed: u64,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let g = &deref(generator, "generator")?.0;
        let cond = TaskVector {
            task_id: 0,
            source: g.source,
            values: slice_arg(condition, condition_len, "condition")?.to_vec(),
        };
        let values = pipeline::generate(g, &cond, seed)?;
        write_out(&values, out, cap, written)
    })
}

/// Writes `values` as an adapter container laid out for this generator.
///
/// # Safety
/// `values` valid for `len` floats; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lg_generator_save_adapter(
    generator: *const LgGenerator,
    values: *const f32,
    len: usize,
    seed: u64,
    path: *const c_char,
) -> LgStatus {
    guard(|| {
        let g = &deref(generator, "generator")?.0;
        let values = slice_arg(values, len, "values")?;
        let path = str_arg(path, "path")?;
        container::encode_adapter(values, &g.layout, None, Some(g.source), seed)?.save(path.as_ref())?;
        Ok(())
    })
}

/// # Safety
/// `generator` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lg_generator_free(generator: *mut LgGenerator) {
    free(generator)
}

// ---- adapters ----

/// Reads the flat values of an adapter container.
///
/// # Safety
/// `path` a NUL-terminated string; `out` valid for `cap` floats; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_adapter_read(path: *const c_char, out: *mut f32, cap: usize, written: *mut usize) -> LgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let c = Container::load(path.as_ref())?;
        c.expect_kind(Kind::Adapter)?;
        let adapter = container::decode_adapter(&c)?;
        write_out(&adapter.flatten(), out, cap, written)
    })
}

// ---- workspace ----

/// Opens the output directory of `cfg`: loads the suite and base model.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_open(cfg: *const LgConfig, out: *mut *mut LgWorkspace) -> LgStatus {
    guard(|| {
        let cfg = deref(cfg, "cfg")?.0.clone();
        let paths = Paths::new(&cfg);
        let suite = pipeline::load_suite(&paths)?;
        let model = pipeline::load_base_model(&paths)?;
        put(
            out,
            LgWorkspace {
                cfg,
                paths,
                suite,
                model,
                harvests: HashMap::new(),
            },
        )
    })
}

/// # Safety
/// `ws` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_n_tasks(ws: *const LgWorkspace, out: *mut usize) -> LgStatus {
    guard(|| {
        let n = deref(ws, "ws")?.suite.n_tasks();
        *deref_mut(out, "out")? = n;
        Ok(())
    })
}

/// Path of the workspace's generator for the configured rank, source and
/// depth, NUL-terminated.
///
/// # Safety
/// `ws` a live handle; `buf` valid for `cap` bytes; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_generator_path(
    ws: *const LgWorkspace,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let ws = deref(ws, "ws")?;
        let path: PathBuf = ws.paths.generator(ws.cfg.rank, ws.cfg.condition, ws.cfg.cvae_layers);
        let text = CString::new(path.to_string_lossy().into_owned())
            .map_err(|e| Fail(LgStatus::Input, e.to_string()))?;
        let bytes = text.as_bytes_with_nul();
        write_out(
            std::slice::from_raw_parts(bytes.as_ptr().cast::<c_char>(), bytes.len()),
            buf,
            cap,
            written,
        )
    })
}

/// The condition vector of `task_id` in the generator's source, exactly as
/// the command line builds it.
///
/// # Safety
/// Handles live; `out` valid for `cap` floats; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_condition(
    ws: *mut LgWorkspace,
    generator: *const LgGenerator,
    task_id: usize,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let ws = deref_mut(ws, "ws")?;
        let g = &deref(generator, "generator")?.0;
        ws.task(task_id)?;
        let cond = condition(ws, g, task_id)?;
        write_out(&cond.values, out, cap, written)
    })
}

fn condition(ws: &mut LgWorkspace, g: &CvaeModel, task_id: usize) -> loragen::Result<TaskVector> {
    let cfg = ws.cfg.clone();
    let suite = ws.suite.clone();
    let h = ws.harvest(g.layout.rank)?;
    Ok(pipeline::conditions(&cfg, &suite, h, g.source)?.swap_remove(task_id))
}

/// Condition vector for free text, scaled like the task descriptions.
///
/// # Safety
/// Handles live; `text` NUL-terminated; `out` valid for `cap` floats;
/// `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_describe(
    ws: *mut LgWorkspace,
    rank: usize,
    text: *const c_char,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let ws = deref_mut(ws, "ws")?;
        let text = str_arg(text, "text")?;
        let cfg = ws.cfg.clone();
        let norm = pipeline::description_norm(ws.harvest(rank)?);
        let v = pipeline::describe(&cfg, text, norm, 0)?;
        write_out(&v.values, out, cap, written)
    })
}

/// Generates the adapter for `task_id` with the same seed as
/// `loragen generate --task`, so both produce identical values.
///
/// # Safety
/// Handles live; `out` valid for `cap` floats; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_generate(
    ws: *mut LgWorkspace,
    generator: *const LgGenerator,
    task_id: usize,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> LgStatus {
    guard(|| {
        let ws = deref_mut(ws, "ws")?;
        let g = &deref(generator, "generator")?.0;
        ws.task(task_id)?;
        let cond = condition(ws, g, task_id)?;
        let seed = pipeline::generation_seed(&ws.cfg, g.layout.rank, g.config.n_layers, g.source, task_id);
        let values = pipeline::generate(g, &cond, seed)?;
        write_out(&values, out, cap, written)
    })
}

/// Test-split accuracy of the base model with the adapter `values` of the
/// given rank applied.
///
/// # Safety
/// `ws` live; `values` valid for `len` floats; `accuracy` valid.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_evaluate(
    ws: *const LgWorkspace,
    task_id: usize,
    rank: usize,
    values: *const f32,
    len: usize,
    accuracy: *mut f64,
) -> LgStatus {
    guard(|| {
        let ws = deref(ws, "ws")?;
        ws.task(task_id)?;
        let values = slice_arg(values, len, "values")?;
        let layout = loragen::model::AdapterLayout::for_model(&ws.model.config, rank)?;
        let acc = bench::evaluate(&ws.model, values, &layout, &ws.suite.tasks[task_id])?;
        *deref_mut(accuracy, "accuracy")? = acc;
        Ok(())
    })
}

/// # Safety
/// `ws` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lg_workspace_free(ws: *mut LgWorkspace) {
    free(ws)
}
