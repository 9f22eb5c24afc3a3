//! C ABI over the fitted service-time models.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`UcStatus`];
//! on failure the message is available from [`uc_last_error_message`] on the
//! same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use urbanctx::baselines::FittedLognormal;
use urbanctx::boosting::{LssEnsemble, ModelCheckpoint};
use urbanctx::conformal::CpsModel;
use urbanctx::eval::AnyDistribution;
use urbanctx::geo::{GeoPoint, Tessellation};
use urbanctx::metrics::{pinball, CrpsScore};
use urbanctx::{Error, PredictiveDistribution};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UcStatus {
    Ok = 0,
    NullPointer = 1,
    /// Input failed validation (bad value, shape, or file contents).
    InvalidArgument = 2,
    Io = 3,
    /// Computation failed for valid input.
    Internal = 4,
    Panic = 5,
}

/// A lognormal location-scale boosted model.
pub struct UcLssModel(LssEnsemble);

/// A Mondrian conformal predictive system.
pub struct UcCpsModel(CpsModel);

/// One predictive distribution over service time in seconds.
pub struct UcDistribution(AnyDistribution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UcStatus {
    match e {
        Error::Io(_) => UcStatus::Io,
        Error::Context { source, .. } => status_of(source),
        e if e.is_validation() || matches!(e, Error::Shape { .. } | Error::Json(_)) => UcStatus::InvalidArgument,
        _ => UcStatus::Internal,
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (UcStatus, String)>) -> UcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UcStatus::Panic
        }
    }
}

fn lift(e: Error) -> (UcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UcStatus, String) {
    (UcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (UcStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (UcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), (UcStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

unsafe fn features<'a>(x: *const f64, n: usize) -> Result<&'a [f64], (UcStatus, String)> {
    if x.is_null() && n > 0 {
        return Err(null("feature array"));
    }
    Ok(if n == 0 { &[] } else { std::slice::from_raw_parts(x, n) })
}

fn read_value(path: &Path) -> Result<serde_json::Value, (UcStatus, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| lift(Error::Io(e).context(path.display().to_string())))?;
    serde_json::from_str(&text).map_err(|e| (UcStatus::InvalidArgument, format!("{}: {e}", path.display())))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an LSS model from a checkpoint or from a `fit` model export.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uc_lss_load(path: *const c_char, out: *mut *mut UcLssModel) -> UcStatus {
    guard(|| {
        let v = read_value(path_arg(path)?)?;
        let ck = v.get("checkpoint").cloned().unwrap_or(v);
        let ck: ModelCheckpoint = serde_json::from_value(ck).map_err(|e| lift(e.into()))?;
        ck.validate().map_err(lift)?;
        let ModelCheckpoint::Lss { mu, log_sigma, .. } = ck else {
            return Err((UcStatus::InvalidArgument, "checkpoint is not an LSS model".into()));
        };
        write_out(out, Box::into_raw(Box::new(UcLssModel(LssEnsemble { mu, log_sigma }))))
    })
}

/// Number of features the model expects.
///
/// # Safety
/// `model` must come from [`uc_lss_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn uc_lss_n_features(model: *const UcLssModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.mu.n_features)
}

/// Predict the distribution for one feature vector.
///
/// # Safety
/// `model` from [`uc_lss_load`]; `x` points to `n` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_lss_predict(
    model: *const UcLssModel,
    x: *const f64,
    n: usize,
    out: *mut *mut UcDistribution,
) -> UcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = features(x, n)?;
        if x.len() != m.0.mu.n_features {
            return Err(lift(Error::Shape {
                expected: m.0.mu.n_features,
                actual: x.len(),
            }));
        }
        let d = m.0.predict_row(x).map_err(lift)?;
        write_out(
            out,
            Box::into_raw(Box::new(UcDistribution(AnyDistribution::Lognormal(d)))),
        )
    })
}

/// # Safety
/// `model` must come from [`uc_lss_load`] or be NULL; it must not be used after.
#[no_mangle]
pub unsafe extern "C" fn uc_lss_free(model: *mut UcLssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Load a conformal model from a `fit` export or a bare model object.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uc_cps_load(path: *const c_char, out: *mut *mut UcCpsModel) -> UcStatus {
    guard(|| {
        let v = read_value(path_arg(path)?)?;
        let body = v.get("cps").cloned().unwrap_or(v);
        let m: CpsModel = serde_json::from_value(body).map_err(|e| lift(e.into()))?;
        if m.residuals.is_empty()
            || m.residuals.len() != m.edges.len() + 1
            || m.residuals
                .iter()
                .any(|r| r.is_empty() || r.windows(2).any(|w| w[0] > w[1]))
        {
            return Err((UcStatus::InvalidArgument, "malformed conformal model".into()));
        }
        write_out(out, Box::into_raw(Box::new(UcCpsModel(m))))
    })
}

/// # Safety
/// `model` from [`uc_cps_load`]; `x` points to `n` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_cps_predict(
    model: *const UcCpsModel,
    x: *const f64,
    n: usize,
    out: *mut *mut UcDistribution,
) -> UcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.predict_row(features(x, n)?).map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(UcDistribution(AnyDistribution::Cps(d)))))
    })
}

/// # Safety
/// `model` must come from [`uc_cps_load`] or be NULL; it must not be used after.
#[no_mangle]
pub unsafe extern "C" fn uc_cps_free(model: *mut UcCpsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Lognormal with log-scale location `mu` and scale `sigma > 0`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uc_lognormal_new(mu: f64, sigma: f64, out: *mut *mut UcDistribution) -> UcStatus {
    guard(|| {
        let d = FittedLognormal::new(mu, sigma).map_err(lift)?;
        write_out(
            out,
            Box::into_raw(Box::new(UcDistribution(AnyDistribution::Lognormal(d)))),
        )
    })
}

/// # Safety
/// `dist` from a constructor above; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_dist_cdf(dist: *const UcDistribution, y: f64, out: *mut f64) -> UcStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        write_out(out, d.0.cdf(y))
    })
}

/// Generalized inverse CDF for `0 < tau < 1`.
///
/// # Safety
/// `dist` from a constructor above; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_dist_quantile(dist: *const UcDistribution, tau: f64, out: *mut f64) -> UcStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        if !(tau > 0.0 && tau < 1.0) {
            return Err((UcStatus::InvalidArgument, format!("tau {tau} outside (0, 1)")));
        }
        write_out(out, d.0.quantile(tau))
    })
}

/// Continuous ranked probability score against observation `y` seconds.
///
/// # Safety
/// `dist` from a constructor above; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_dist_crps(dist: *const UcDistribution, y: f64, out: *mut f64) -> UcStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        let v = d.0.crps(y);
        if !v.is_finite() {
            return Err((UcStatus::InvalidArgument, format!("CRPS undefined at y = {y}")));
        }
        write_out(out, v)
    })
}

/// Central interval holding `coverage` of the mass.
///
/// # Safety
/// `dist` from a constructor above; `lo` and `hi` valid.
#[no_mangle]
pub unsafe extern "C" fn uc_dist_interval(
    dist: *const UcDistribution,
    coverage: f64,
    lo: *mut f64,
    hi: *mut f64,
) -> UcStatus {
    guard(|| {
        let d = dist.as_ref().ok_or_else(|| null("distribution"))?;
        if !(coverage > 0.0 && coverage < 1.0) {
            return Err((UcStatus::InvalidArgument, format!("coverage {coverage} outside (0, 1)")));
        }
        if lo.is_null() || hi.is_null() {
            return Err(null("output pointer"));
        }
        let (a, b) = d.0.central_interval(coverage);
        write_out(lo, a)?;
        write_out(hi, b)
    })
}

/// # Safety
/// `dist` from a constructor above or NULL; it must not be used after.
#[no_mangle]
pub unsafe extern "C" fn uc_dist_free(dist: *mut UcDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// Axial coordinates of the hexagon holding (`lat`, `lon`) in the
/// tessellation centred at (`origin_lat`, `origin_lon`) with edge `edge_m`.
///
/// # Safety
/// `q` and `r` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn uc_point_to_cell(
    origin_lat: f64,
    origin_lon: f64,
    edge_m: f64,
    lat: f64,
    lon: f64,
    q: *mut i32,
    r: *mut i32,
) -> UcStatus {
    guard(|| {
        if q.is_null() || r.is_null() {
            return Err(null("output pointer"));
        }
        let origin = GeoPoint::new(origin_lat, origin_lon).map_err(lift)?;
        let tess = Tessellation::new("ffi", origin, edge_m).map_err(lift)?;
        let a = tess
            .point_to_axial(GeoPoint::new(lat, lon).map_err(lift)?)
            .map_err(lift)?;
        write_out(q, a.q)?;
        write_out(r, a.r)
    })
}

/// Pinball loss of prediction `yhat` at level `tau`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uc_pinball(y: f64, yhat: f64, tau: f64, out: *mut f64) -> UcStatus {
    guard(|| write_out(out, pinball(y, yhat, tau).map_err(lift)?))
}
