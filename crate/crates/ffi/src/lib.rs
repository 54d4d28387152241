//! C ABI over the graphlora toolkit.
//!
//! Objects cross the boundary as opaque handles (`GlGraph`, `GlModel`,
//! `GlMatrix`) created by `gl_*_load`/producer calls and released with the
//! matching `gl_*_free`. Every fallible call returns a [`GlStatus`]; the
//! message of the most recent failure on the calling thread is available
//! through [`gl_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use graphlora::graphio::{self, DiffusionConfig, Graph};
use graphlora::lora::AdaptedModel;
use graphlora::objectives::{self, KernelConfig};
use graphlora::pipeline::{self, Checkpoint, RunConfig};
use graphlora::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    InvalidInput = 10,
    Contract = 11,
    Format = 12,
    Protocol = 13,
    Training = 14,
    Condition = 15,
    Numeric = 16,
    /// A verification command ran but its check failed.
    Verification = 17,
    Config = 18,
    Io = 19,
    Panic = 99,
}

impl From<&Error> for GlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => GlStatus::InvalidInput,
            Error::Contract(_) => GlStatus::Contract,
            Error::Format { .. } | Error::Json(_) => GlStatus::Format,
            Error::Protocol(_) => GlStatus::Protocol,
            Error::Training(_) => GlStatus::Training,
            Error::Condition(_) => GlStatus::Condition,
            Error::Numeric(_) => GlStatus::Numeric,
            Error::Verification(_) => GlStatus::Verification,
            Error::Config(_) => GlStatus::Config,
            Error::Io { .. } => GlStatus::Io,
        }
    }
}

/// Loaded attributed graph.
pub struct GlGraph(Graph);

/// Fine-tuned model (frozen backbone, adapters, projector, head).
pub struct GlModel(AdaptedModel);

/// Dense row-major matrix of doubles.
pub struct GlMatrix(Matrix);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(GlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(GlStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(GlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn matrix_arg(data: *const f64, rows: usize, cols: usize, what: &str) -> FfiResult<Matrix> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(GlStatus::InvalidArgument, format!("{what} size overflows")))?;
    Ok(Matrix::from_vec(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a graph directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out_graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_graph_load(dir: *const c_char, out_graph: *mut *mut GlGraph) -> GlStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let g = graphio::load_graph(Path::new(text(dir, "dir")?))?;
        *slot = boxed(GlGraph(g));
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle from [`gl_graph_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_graph_free(graph: *mut GlGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node count, feature dimension and class count of `graph`.
///
/// # Safety
/// `graph` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn gl_graph_shape(
    graph: *const GlGraph,
    nodes: *mut usize,
    feature_dim: *mut usize,
    classes: *mut usize,
) -> GlStatus {
    guard(|| {
        let g = &borrow(graph, "graph")?.0;
        for (p, v) in [(nodes, g.n()), (feature_dim, g.feature_dim()), (classes, g.classes())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Personalized PageRank diffusion of `graph` with teleport `alpha`
/// (closed form, self-loops as in the default configuration).
///
/// # Safety
/// `graph` must be a live handle; `out_matrix` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_ppr_diffusion(
    graph: *const GlGraph,
    alpha: f64,
    out_matrix: *mut *mut GlMatrix,
) -> GlStatus {
    guard(|| {
        let g = &borrow(graph, "graph")?.0;
        let slot = out(out_matrix, "out_matrix")?;
        let cfg = DiffusionConfig {
            alpha,
            ..DiffusionConfig::default()
        };
        *slot = boxed(GlMatrix(graphio::ppr_diffusion(g, &cfg)?));
        Ok(())
    })
}

/// Squared MMD between two row-major sample sets with the median-heuristic
/// Gaussian kernel.
///
/// # Safety
/// `x` must hold `nx * dim` doubles, `y` `ny * dim`; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mmd(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    dim: usize,
    out_value: *mut f64,
) -> GlStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let (x, y) = (matrix_arg(x, nx, dim, "x")?, matrix_arg(y, ny, dim, "y")?);
        *slot = objectives::mmd(&x, &y, &KernelConfig::default())?;
        Ok(())
    })
}

/// Loads a fine-tuned model directory written by the `finetune` command.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_model_load(dir: *const c_char, out_model: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let model = Checkpoint::load(Path::new(text(dir, "dir")?))?.into_model()?;
        *slot = boxed(GlModel(model));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`gl_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Final-layer embeddings of every node of `graph`.
///
/// # Safety
/// `model` and `graph` must be live handles; `out_matrix` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_model_embed(
    model: *const GlModel,
    graph: *const GlGraph,
    out_matrix: *mut *mut GlMatrix,
) -> GlStatus {
    guard(|| {
        let (m, g) = (&borrow(model, "model")?.0, &borrow(graph, "graph")?.0);
        let slot = out(out_matrix, "out_matrix")?;
        let p = graphio::sym_norm_adj(g);
        *slot = boxed(GlMatrix(m.forward(g.features(), &p)?.0.h_sum));
        Ok(())
    })
}

/// Predicted class of every node of `graph`, written to `labels`
/// (capacity `len`, at least the node count).
///
/// # Safety
/// `model` and `graph` must be live handles; `labels` valid for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn gl_model_predict(
    model: *const GlModel,
    graph: *const GlGraph,
    labels: *mut u32,
    len: usize,
) -> GlStatus {
    guard(|| {
        let (m, g) = (&borrow(model, "model")?.0, &borrow(graph, "graph")?.0);
        if labels.is_null() {
            return Err(null("labels"));
        }
        if len < g.n() {
            return Err(Fail(
                GlStatus::BufferTooSmall,
                format!("labels holds {len} entries, graph has {} nodes", g.n()),
            ));
        }
        let pred = pipeline::predict(m, g.features(), &graphio::sym_norm_adj(g))?;
        let dst = std::slice::from_raw_parts_mut(labels, len);
        for (d, p) in dst.iter_mut().zip(pred) {
            *d = p as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `matrix` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn gl_matrix_shape(matrix: *const GlMatrix, rows: *mut usize, cols: *mut usize) -> GlStatus {
    guard(|| {
        let m = &borrow(matrix, "matrix")?.0;
        if let Some(r) = rows.as_mut() {
            *r = m.rows();
        }
        if let Some(c) = cols.as_mut() {
            *c = m.cols();
        }
        Ok(())
    })
}

/// Copies the row-major contents of `matrix` into `buf` (capacity `len`).
///
/// # Safety
/// `matrix` must be a live handle; `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gl_matrix_copy(matrix: *const GlMatrix, buf: *mut f64, len: usize) -> GlStatus {
    guard(|| {
        let m = &borrow(matrix, "matrix")?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = m.data();
        if len < data.len() {
            return Err(Fail(
                GlStatus::BufferTooSmall,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `matrix` must be null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_matrix_free(matrix: *mut GlMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Runs a pipeline command (`pretrain`, `finetune`, `eval`, `ablate`,
/// `theory`, `gradcheck`) with a JSON run configuration (empty string for
/// defaults). On success `out_report` receives the JSON report, to be freed
/// with [`gl_string_free`]. Commands whose own check fails still write the
/// report and return `Verification`.
///
/// # Safety
/// `command` and `config_json` must be NUL-terminated strings; `out_report`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_run(
    command: *const c_char,
    config_json: *const c_char,
    out_report: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let slot = out(out_report, "out_report")?;
        *slot = std::ptr::null_mut();
        let command = text(command, "command")?;
        let json = text(config_json, "config_json")?;
        let mut cfg = if json.trim().is_empty() {
            RunConfig::default()
        } else {
            RunConfig::from_json_str(json)?
        };
        cfg.apply_env();
        let (report, pass) = match command {
            "pretrain" => (serde_json::to_string(&pipeline::cmd_pretrain(&cfg)?), true),
            "finetune" => {
                let r = pipeline::cmd_finetune(&cfg)?;
                (serde_json::to_string(&r), r.freeze_audit_pass)
            }
            "eval" => (serde_json::to_string(&pipeline::cmd_eval(&cfg)?), true),
            "ablate" => {
                let r = pipeline::cmd_ablate(&cfg)?;
                (serde_json::to_string(&r), r.all_isolated)
            }
            "theory" => {
                let r = pipeline::cmd_theory(&cfg)?;
                (serde_json::to_string(&r), r.all_pass)
            }
            "gradcheck" => {
                let r = pipeline::cmd_gradcheck(&cfg)?;
                (serde_json::to_string(&r), r.all_pass)
            }
            other => {
                return Err(Fail(GlStatus::InvalidArgument, format!("unknown command {other:?}")));
            }
        };
        let report = report.map_err(Error::from)?;
        *slot = CString::new(report)
            .map_err(|_| Fail(GlStatus::Format, "report contains NUL".into()))?
            .into_raw();
        if pass {
            Ok(())
        } else {
            Err(Fail(GlStatus::Verification, format!("{command} check failed")))
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
