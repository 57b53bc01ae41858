//! C interface to the feature store and the ranker.
//!
//! Every function returns an [`LoStatus`]; on failure a message is kept per
//! thread and can be read with [`lo_last_error`]. Handles are opaque and must
//! be released with the matching `*_close` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use linkedout::checkpoint::Checkpoint;
use linkedout::service::{RankRequest, Snapshot};
use linkedout::store::FeatureStore;
use linkedout::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    NotFound = 6,
    InvalidInput = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// An opened feature store.
pub struct LoStore {
    inner: FeatureStore,
}

/// A store paired with the ranker head of the checkpoint that built it.
pub struct LoRanker {
    snapshot: Snapshot,
    d_z: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> LoStatus {
    match e {
        Error::Io { .. } => LoStatus::Io,
        Error::Format(_) | Error::Corruption(_) | Error::Truncated { .. } => LoStatus::Format,
        Error::Version(_) => LoStatus::Version,
        Error::NotFound(_) => LoStatus::NotFound,
        Error::Input(_) | Error::Shape(_) | Error::Length(_) | Error::Config(_) => LoStatus::InvalidInput,
        _ => LoStatus::Internal,
    }
}

struct Failure(LoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LoStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LoStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LoStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens the store at `path` (the `.lnki` index must sit beside it).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lo_store_open(path: *const c_char, out: *mut *mut LoStore) -> LoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let inner = FeatureStore::open(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(LoStore { inner }));
        Ok(())
    })
}

/// Releases a store. Null is ignored.
///
/// # Safety
/// `store` must come from `lo_store_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lo_store_close(store: *mut LoStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of records.
///
/// # Safety
/// `store` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn lo_store_len(store: *const LoStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.len())
}

/// Embedding width.
///
/// # Safety
/// `store` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn lo_store_dim(store: *const LoStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.meta().d_z)
}

/// Copies the embedding of `item_id` into `out` (capacity `cap` floats).
///
/// # Safety
/// `store` must be a live handle and `out` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn lo_store_get(store: *const LoStore, item_id: u32, out: *mut f32, cap: usize) -> LoStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        let rec = s.inner.get(item_id)?;
        if cap < rec.z.len() {
            return Err(Failure(
                LoStatus::BufferTooSmall,
                format!("embedding has {} floats, buffer holds {cap}", rec.z.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(rec.z.as_ptr(), out, rec.z.len());
        Ok(())
    })
}

/// Loads a checkpoint and the store it built; fails on a version mismatch.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lo_ranker_open(
    store_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut LoRanker,
) -> LoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let (ck, hash) = Checkpoint::load(&path_arg(checkpoint_path, "checkpoint_path")?)?;
        let d_z = ck.model.config().d_z;
        let store = FeatureStore::open_for(&path_arg(store_path, "store_path")?, &hash, d_z)?;
        let snapshot = Snapshot::from_store(&store, ck.model.ranker_params())?;
        *out = Box::into_raw(Box::new(LoRanker { snapshot, d_z }));
        Ok(())
    })
}

/// Releases a ranker. Null is ignored.
///
/// # Safety
/// `ranker` must come from `lo_ranker_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lo_ranker_close(ranker: *mut LoRanker) {
    if !ranker.is_null() {
        drop(Box::from_raw(ranker));
    }
}

/// Embedding width of the ranker's catalog.
///
/// # Safety
/// `ranker` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn lo_ranker_dim(ranker: *const LoRanker) -> usize {
    ranker.as_ref().map_or(0, |r| r.d_z)
}

/// Ranks the whole catalog for a history (oldest first) and writes up to `k`
/// results, best first, into `out_ids` and `out_scores`. `out_len` receives
/// the count written.
///
/// # Safety
/// `history` must hold `history_len` ids; `out_ids` and `out_scores` must
/// each hold `k` elements; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lo_ranker_rank(
    ranker: *const LoRanker,
    history: *const u32,
    history_len: usize,
    k: usize,
    out_ids: *mut u32,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> LoStatus {
    guard(|| {
        let r = ranker.as_ref().ok_or_else(|| null("ranker"))?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        *out_len = 0;
        let history = slice_arg(history, history_len, "history")?.to_vec();
        let req = RankRequest {
            history,
            candidates: None,
            k,
            cold_start_fallback: false,
        };
        let items = r.snapshot.rank(&req)?;
        if out_ids.is_null() || out_scores.is_null() {
            return Err(null("output buffer"));
        }
        for (i, (id, score)) in items.iter().enumerate() {
            *out_ids.add(i) = *id;
            *out_scores.add(i) = *score;
        }
        *out_len = items.len();
        Ok(())
    })
}
