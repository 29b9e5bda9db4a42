//! C ABI over the core engine: load a checkpoint, run prediction and
//! per-cell deconvolution, and compute the evaluation metrics.
//!
//! Conventions: every fallible call returns 0 on success and a negative
//! code otherwise, with a message retrievable via `bitro_last_error`.
//! All matrices cross the boundary as row-major f64. Handles are opaque
//! and must be released with `bitro_model_free` exactly once.

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::{c_char, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bitro::eval::{js_divergence, pcc_overall};
use bitro::mil::deconvolve_values;
use bitro::model::predict;
use bitro::params::ParamTree;
use bitro::pipeline::model_space_to_log1p;
use bitro::Tensor;

pub const BITRO_OK: c_int = 0;
pub const BITRO_ERR_NULL: c_int = -1;
pub const BITRO_ERR_INVALID: c_int = -2;
pub const BITRO_ERR_FAILED: c_int = -3;
pub const BITRO_ERR_PANIC: c_int = -4;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

/// Opaque trained-model handle.
pub struct BitroModel {
    tree: ParamTree,
}

fn guard<F: FnOnce() -> c_int>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            BITRO_ERR_PANIC
        }
    }
}

/// Copies the most recent error message on this thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message
/// length in bytes, or 0 when no error has occurred.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (length query).
#[no_mangle]
pub unsafe extern "C" fn bitro_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static crate version string, NUL-terminated.
#[no_mangle]
pub extern "C" fn bitro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a `.bitro` checkpoint from `path` into a fresh handle
/// written to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
/// pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn bitro_model_load(
    path: *const c_char,
    out: *mut *mut BitroModel,
) -> c_int {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("null pointer argument");
            return BITRO_ERR_NULL;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return BITRO_ERR_INVALID;
            }
        };
        match ParamTree::load(Path::new(path)) {
            Ok(tree) => {
                *out = Box::into_raw(Box::new(BitroModel { tree }));
                BITRO_OK
            }
            Err(e) => {
                set_error(e.to_string());
                BITRO_ERR_FAILED
            }
        }
    })
}

/// Releases a handle. Passing null is a no-op.
///
/// # Safety
/// `model` must be a handle from `bitro_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bitro_model_free(model: *mut BitroModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of genes the model predicts; 0 on null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bitro_model_n_genes(model: *const BitroModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).tree.arch.genes.len()
}

/// Raw per-cell feature width the model expects; 0 on null.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn bitro_model_feature_dim(model: *const BitroModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).tree.arch.feature_dim
}

/// Copies gene name `index` into `buf` (NUL-terminated, truncated to
/// `cap`). Returns the name's byte length, or 0 when out of range.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `cap` writable
/// bytes, or be null (length query).
#[no_mangle]
pub unsafe extern "C" fn bitro_model_gene_name(
    model: *const BitroModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if model.is_null() {
        return 0;
    }
    let genes = &(*model).tree.arch.genes;
    if index >= genes.len() {
        return 0;
    }
    let name = &genes[index];
    if !buf.is_null() && cap > 0 {
        let n = name.len().min(cap - 1);
        std::ptr::copy_nonoverlapping(name.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    }
    name.len()
}

unsafe fn run_predict(
    model: *const BitroModel,
    n_cells: usize,
    coords: *const f64,
    features: *const f64,
    feature_width: usize,
    out_expr: *mut f64,
    out_cells: *mut f64,
) -> c_int {
    if model.is_null() || coords.is_null() || features.is_null() || out_expr.is_null() {
        set_error("null pointer argument");
        return BITRO_ERR_NULL;
    }
    let tree = &(*model).tree;
    if n_cells == 0 {
        set_error("n_cells must be >= 1");
        return BITRO_ERR_INVALID;
    }
    if feature_width != tree.arch.feature_dim {
        set_error(format!(
            "model expects feature width {}, got {feature_width}",
            tree.arch.feature_dim
        ));
        return BITRO_ERR_INVALID;
    }
    let coord_slice = std::slice::from_raw_parts(coords, n_cells * 2);
    let xy: Vec<(f64, f64)> = coord_slice.chunks_exact(2).map(|c| (c[0], c[1])).collect();
    let feats = std::slice::from_raw_parts(features, n_cells * feature_width);
    let raw = match Tensor::new(vec![n_cells, feature_width], feats.to_vec()) {
        Ok(t) => t,
        Err(e) => {
            set_error(e.to_string());
            return BITRO_ERR_FAILED;
        }
    };
    let run = || -> bitro::Result<()> {
        let (y, attention) = predict(tree, &xy, &raw, None)?;
        let y_log = model_space_to_log1p(tree, &y)?;
        let g = y_log.len();
        std::ptr::copy_nonoverlapping(y_log.as_ptr(), out_expr, g);
        if !out_cells.is_null() {
            let cells = deconvolve_values(&attention, &y_log)?;
            std::ptr::copy_nonoverlapping(cells.data().as_ptr(), out_cells, n_cells * g);
        }
        Ok(())
    };
    match run() {
        Ok(()) => BITRO_OK,
        Err(e) => {
            set_error(e.to_string());
            BITRO_ERR_FAILED
        }
    }
}

/// Predicts log1p expression for one bag of cells.
///
/// `coords` is n_cells×2 row-major slide coordinates, `features` is
/// n_cells×feature_width raw (uncompressed) per-cell features, and
/// `out_expr` receives `bitro_model_n_genes` values.
///
/// # Safety
/// Pointers must cover the stated extents; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn bitro_predict(
    model: *const BitroModel,
    n_cells: usize,
    coords: *const f64,
    features: *const f64,
    feature_width: usize,
    out_expr: *mut f64,
) -> c_int {
    guard(|| run_predict(model, n_cells, coords, features, feature_width, out_expr, std::ptr::null_mut()))
}

/// Predicts one bag and redistributes the prediction to its member
/// cells via the attention weights. `out_expr` receives G values and
/// `out_cells` receives n_cells×G row-major values whose per-gene
/// column sums equal `out_expr`.
///
/// # Safety
/// Pointers must cover the stated extents; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn bitro_deconvolve(
    model: *const BitroModel,
    n_cells: usize,
    coords: *const f64,
    features: *const f64,
    feature_width: usize,
    out_expr: *mut f64,
    out_cells: *mut f64,
) -> c_int {
    guard(|| {
        if out_cells.is_null() {
            set_error("null pointer argument");
            return BITRO_ERR_NULL;
        }
        run_predict(model, n_cells, coords, features, feature_width, out_expr, out_cells)
    })
}

/// Pearson correlation between two length-n vectors, written to `out`.
///
/// # Safety
/// `a`, `b` must cover n values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitro_pcc(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("null pointer argument");
            return BITRO_ERR_NULL;
        }
        let av = std::slice::from_raw_parts(a, n);
        let bv = std::slice::from_raw_parts(b, n);
        match pcc_overall(av, bv) {
            Ok(v) => {
                *out = v;
                BITRO_OK
            }
            Err(e) => {
                set_error(e.to_string());
                BITRO_ERR_FAILED
            }
        }
    })
}

/// Jensen-Shannon divergence (natural log) between two nonnegative
/// length-n vectors, written to `out`.
///
/// # Safety
/// `a`, `b` must cover n values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bitro_js(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> c_int {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("null pointer argument");
            return BITRO_ERR_NULL;
        }
        let av = std::slice::from_raw_parts(a, n);
        let bv = std::slice::from_raw_parts(b, n);
        match js_divergence(av, bv) {
            Ok(v) => {
                *out = v;
                BITRO_OK
            }
            Err(e) => {
                set_error(e.to_string());
                BITRO_ERR_FAILED
            }
        }
    })
}
