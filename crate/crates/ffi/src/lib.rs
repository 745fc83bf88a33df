//! C ABI over the `facesearch` library.
//!
//! Every fallible function returns an [`FsStatus`]; on failure a message is
//! available from [`fs_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that must be released with their `_free`
//! function. Strings returned through `char **` out-parameters are owned by the
//! caller and released with [`fs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use facesearch::backbone::{self, BaseArch, Network};
use facesearch::cleaner::{self, CleanParams};
use facesearch::marginloss::{self, LossParams};
use facesearch::searchspace::{default_space, Combination, SearchSpace, N_PARAMS};
use facesearch::synthdata::{self, DatasetSpec, LabeledDataset};
use facesearch::{agent, cli, traineval, Error};
use ndarray::{Array2, ArrayView2};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Degenerate = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loss hyper-parameters: `cos(m1·θ + m2) − m3` for the target logit, scaled by
/// `s_p`, and `s_n` for the others.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FsLossParams {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub s_p: f64,
    pub s_n: f64,
}

impl From<FsLossParams> for LossParams {
    fn from(p: FsLossParams) -> Self {
        LossParams {
            m1: p.m1,
            m2: p.m2,
            m3: p.m3,
            s_p: p.s_p,
            s_n: p.s_n,
        }
    }
}

/// Base MLP shape before depth and width ratios are applied.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FsBaseArch {
    pub input_dim: usize,
    pub base_depth: usize,
    pub base_width: usize,
    pub embed_dim: usize,
}

impl From<FsBaseArch> for BaseArch {
    fn from(b: FsBaseArch) -> Self {
        BaseArch {
            input_dim: b.input_dim,
            base_depth: b.base_depth,
            base_width: b.base_width,
            embed_dim: b.embed_dim,
        }
    }
}

/// Labeled synthetic dataset.
pub struct FsDataset(LabeledDataset);

/// Per-parameter value grids.
pub struct FsSearchSpace(SearchSpace);

/// MLP backbone.
pub struct FsNetwork(Network);

struct Failure(FsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidSpec(_)
            | Error::InvalidArgument(_)
            | Error::OffGrid { .. }
            | Error::TokenOutOfRange { .. }
            | Error::InsufficientPairs { .. } => FsStatus::InvalidArgument,
            Error::Shape(_) => FsStatus::Shape,
            Error::EmptyClass(_)
            | Error::DegenerateCentroid(_)
            | Error::DegenerateEmbedding { .. }
            | Error::UndefinedRatio { .. }
            | Error::DegenerateDataset(_)
            | Error::Diverged { .. } => FsStatus::Degenerate,
            Error::Io { .. } | Error::RawIo(_) => FsStatus::Io,
            Error::Format(_) | Error::SchemaVersion { .. } | Error::Json(_) | Error::Csv(_) => FsStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> FsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            FsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FsStatus::InvalidArgument, msg.into())
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> FfiResult {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> FfiResult<Array2<f64>> {
    let n = rows.checked_mul(cols).ok_or_else(|| invalid(format!("{what} is too large")))?;
    let data = slice(p, n, what)?;
    Ok(ArrayView2::from_shape((rows, cols), data)
        .map_err(|e| Failure(FsStatus::Shape, e.to_string()))?
        .to_owned())
}

fn copy_into(dst: &mut [f64], src: &Array2<f64>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains NUL"))
}

/// Message for the last failed call on this thread, or NULL. The pointer stays
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string produced by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a dataset from a JSON spec. Missing fields take their defaults;
/// NULL or `"{}"` gives the default spec.
///
/// # Safety
/// `spec_json` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_generate(spec_json: *const c_char, out: *mut *mut FsDataset) -> FsStatus {
    guard(|| {
        let spec = if spec_json.is_null() {
            DatasetSpec::default()
        } else {
            let text = as_str(spec_json, "spec_json")?;
            let mut value = serde_json::to_value(DatasetSpec::default()).map_err(Error::from)?;
            let patch: serde_json::Value = serde_json::from_str(text).map_err(Error::from)?;
            let obj = patch.as_object().ok_or_else(|| invalid("spec_json must be an object"))?;
            for (k, v) in obj {
                value[k] = v.clone();
            }
            serde_json::from_value(value).map_err(Error::from)?
        };
        let ds = synthdata::generate_dataset(&spec)?;
        write_out(out, Box::into_raw(Box::new(FsDataset(ds))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_load(path: *const c_char, out: *mut *mut FsDataset) -> FsStatus {
    guard(|| {
        let ds = LabeledDataset::load(as_str(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(FsDataset(ds))), "out")
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_save(ds: *const FsDataset, path: *const c_char) -> FsStatus {
    guard(|| Ok(as_ref(ds, "ds")?.0.save(as_str(path, "path")?)?))
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_len(ds: *const FsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_n_classes(ds: *const FsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_classes)
}

/// Copies the labels into `out` (capacity `cap`). Fails with
/// `BufferTooSmall` when `cap < fs_dataset_len(ds)`.
///
/// # Safety
/// `ds` must be a live handle; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_labels(ds: *const FsDataset, out: *mut usize, cap: usize) -> FsStatus {
    guard(|| {
        let labels = &as_ref(ds, "ds")?.0.labels;
        if cap < labels.len() {
            return Err(Failure(
                FsStatus::BufferTooSmall,
                format!("need {} labels, buffer holds {cap}", labels.len()),
            ));
        }
        slice_mut(out, labels.len(), "out")?.copy_from_slice(labels);
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_dataset_free(ds: *mut FsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Cleans `ds`. The cleaned dataset goes to `cleaned_out` and, when
/// `report_json_out` is not NULL, the cleaning report as a JSON string.
///
/// # Safety
/// `ds` must be a live handle; `cleaned_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_clean(
    ds: *const FsDataset,
    tau_intra: f64,
    tau_inter: f64,
    leave_one_out: c_int,
    cleaned_out: *mut *mut FsDataset,
    report_json_out: *mut *mut c_char,
) -> FsStatus {
    guard(|| {
        let ds = as_ref(ds, "ds")?;
        if cleaned_out.is_null() {
            return Err(null("cleaned_out"));
        }
        let params = CleanParams {
            leave_one_out: leave_one_out != 0,
            ..CleanParams::new(tau_intra, tau_inter)
        };
        let (cleaned, report) = cleaner::clean(&ds.0, &params)?;
        if !report_json_out.is_null() {
            let json = serde_json::to_string(&report).map_err(Error::from)?;
            report_json_out.write(into_c_string(json)?);
        }
        cleaned_out.write(Box::into_raw(Box::new(FsDataset(cleaned))));
        Ok(())
    })
}

/// Mean margin loss of `b` row embeddings `x` (b × d) against `k` class
/// weights `w` (k × d). `logits_out` may be NULL or hold b × k values.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn fs_loss_forward(
    x: *const f64,
    y: *const usize,
    b: usize,
    w: *const f64,
    k: usize,
    d: usize,
    params: FsLossParams,
    loss_out: *mut f64,
    logits_out: *mut f64,
) -> FsStatus {
    guard(|| {
        let xm = matrix(x, b, d, "x")?;
        let wm = matrix(w, k, d, "w")?;
        let labels = slice(y, b, "y")?;
        let out = marginloss::loss_forward(&xm, labels, &wm, &params.into())?;
        if !logits_out.is_null() {
            copy_into(slice_mut(logits_out, b * k, "logits_out")?, &out.logits);
        }
        write_out(loss_out, out.loss, "loss_out")
    })
}

/// Loss and its gradients with respect to `x` (b × d) and `w` (k × d).
///
/// # Safety
/// Pointers must reference arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn fs_loss_backward(
    x: *const f64,
    y: *const usize,
    b: usize,
    w: *const f64,
    k: usize,
    d: usize,
    params: FsLossParams,
    loss_out: *mut f64,
    grad_x_out: *mut f64,
    grad_w_out: *mut f64,
) -> FsStatus {
    guard(|| {
        let xm = matrix(x, b, d, "x")?;
        let wm = matrix(w, k, d, "w")?;
        let labels = slice(y, b, "y")?;
        let g = marginloss::loss_backward(&xm, labels, &wm, &params.into())?;
        copy_into(slice_mut(grad_x_out, b * d, "grad_x_out")?, &g.grad_x);
        copy_into(slice_mut(grad_w_out, k * d, "grad_w_out")?, &g.grad_w);
        write_out(loss_out, g.loss, "loss_out")
    })
}

/// `acc · (cost / target_cost)^alpha`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_reward(acc: f64, cost: f64, target_cost: f64, alpha: f64, out: *mut f64) -> FsStatus {
    guard(|| write_out(out, agent::reward(acc, cost, target_cost, alpha)?, "out"))
}

/// Data and loss difficulty of a combination given as nine values in the
/// order tau_intra, tau_inter, m1, m2, m3, s_p, s_n, D, W.
///
/// # Safety
/// `values` must hold nine doubles; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_difficulty(values: *const f64, data_out: *mut f64, loss_out: *mut f64) -> FsStatus {
    guard(|| {
        let v: [f64; N_PARAMS] = slice(values, N_PARAMS, "values")?.try_into().expect("nine values");
        let (d, l) = cli::difficulty(&Combination::from_values(v));
        write_out(data_out, d, "data_out")?;
        write_out(loss_out, l, "loss_out")
    })
}

/// True-accept rate at the threshold that meets `far_target` on the impostor scores.
///
/// # Safety
/// Score pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fs_tar_at_far(
    genuine: *const f64,
    n_genuine: usize,
    impostor: *const f64,
    n_impostor: usize,
    far_target: f64,
    out: *mut f64,
) -> FsStatus {
    guard(|| {
        let g = slice(genuine, n_genuine, "genuine")?;
        let i = slice(impostor, n_impostor, "impostor")?;
        write_out(out, traineval::tar_at_far(g, i, far_target)?, "out")
    })
}

/// The built-in grids.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_space_default(out: *mut *mut FsSearchSpace) -> FsStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(FsSearchSpace(default_space()))), "out"))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_space_load(path: *const c_char, out: *mut *mut FsSearchSpace) -> FsStatus {
    guard(|| {
        let space = SearchSpace::load(as_str(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(FsSearchSpace(space))), "out")
    })
}

/// Writes the nine grid sizes.
///
/// # Safety
/// `space` must be a live handle; `sizes_out` must hold nine elements.
#[no_mangle]
pub unsafe extern "C" fn fs_space_sizes(space: *const FsSearchSpace, sizes_out: *mut usize) -> FsStatus {
    guard(|| {
        let sizes = as_ref(space, "space")?.0.sizes();
        slice_mut(sizes_out, N_PARAMS, "sizes_out")?.copy_from_slice(&sizes);
        Ok(())
    })
}

/// Maps nine grid indices to their values.
///
/// # Safety
/// `tokens` and `values_out` must hold nine elements.
#[no_mangle]
pub unsafe extern "C" fn fs_space_decode(space: *const FsSearchSpace, tokens: *const usize, values_out: *mut f64) -> FsStatus {
    guard(|| {
        let c = as_ref(space, "space")?.0.decode(slice(tokens, N_PARAMS, "tokens")?)?;
        slice_mut(values_out, N_PARAMS, "values_out")?.copy_from_slice(&c.values());
        Ok(())
    })
}

/// Maps nine on-grid values back to grid indices.
///
/// # Safety
/// `values` and `tokens_out` must hold nine elements.
#[no_mangle]
pub unsafe extern "C" fn fs_space_encode(space: *const FsSearchSpace, values: *const f64, tokens_out: *mut usize) -> FsStatus {
    guard(|| {
        let v: [f64; N_PARAMS] = slice(values, N_PARAMS, "values")?.try_into().expect("nine values");
        let tokens = as_ref(space, "space")?.0.encode(&Combination::from_values(v))?;
        slice_mut(tokens_out, N_PARAMS, "tokens_out")?.copy_from_slice(&tokens);
        Ok(())
    })
}

/// # Safety
/// `space` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_space_free(space: *mut FsSearchSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Builds a freshly initialised network from a base shape and expansion ratios.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_network_instantiate(
    base: FsBaseArch,
    depth_ratio: f64,
    width_ratio: f64,
    seed: u64,
    out: *mut *mut FsNetwork,
) -> FsStatus {
    guard(|| {
        let net = backbone::instantiate(&base.into(), depth_ratio, width_ratio, seed)?;
        write_out(out, Box::into_raw(Box::new(FsNetwork(net))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_network_load(path: *const c_char, out: *mut *mut FsNetwork) -> FsStatus {
    guard(|| {
        let net = Network::load(as_str(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(FsNetwork(net))), "out")
    })
}

/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fs_network_save(net: *const FsNetwork, path: *const c_char) -> FsStatus {
    guard(|| Ok(as_ref(net, "net")?.0.save(as_str(path, "path")?)?))
}

/// Input width, or 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_network_input_dim(net: *const FsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.config.input_dim())
}

/// Embedding width, or 0 for NULL.
///
/// # Safety
/// `net` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_network_embed_dim(net: *const FsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.config.embed_dim())
}

/// Multiply-add count of one forward pass for a single input row.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_network_flops(net: *const FsNetwork, out: *mut u64) -> FsStatus {
    guard(|| write_out(out, backbone::flops(&as_ref(net, "net")?.0.config), "out"))
}

/// Embeds `rows` inputs of width `cols` into `out` (rows × embed_dim).
///
/// # Safety
/// `x` must hold rows × cols doubles and `out` rows × embed_dim.
#[no_mangle]
pub unsafe extern "C" fn fs_network_forward(
    net: *const FsNetwork,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> FsStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.0;
        let emb = net.embed(&matrix(x, rows, cols, "x")?)?;
        copy_into(slice_mut(out, emb.len(), "out")?, &emb);
        Ok(())
    })
}

/// # Safety
/// `net` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_network_free(net: *mut FsNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
