//! C ABI over `mfadvlab`. Networks are opaque handles; every fallible call
//! returns an `MfStatus` and leaves a message retrievable with
//! `mf_last_error`. Matrices are row-major. Norm codes: 1, 2, and 0 for inf.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mfadvlab::attack::{self, AttackSpec};
use mfadvlab::error::Error;
use mfadvlab::net::{Arch, Network, NetworkConfig};
use mfadvlab::theory::{self, Norm, NormPair, TheoryParams};
use ndarray::ArrayView2;

/// A sampled random network.
pub struct MfNetwork(Network);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    UnsupportedPair = 4,
    Numeric = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfArch {
    Vanilla = 0,
    Residual = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Dimension { .. } => MfStatus::DimensionMismatch,
        Error::UnsupportedPair { .. } => MfStatus::UnsupportedPair,
        Error::NonFinite(_) | Error::Degenerate(_) => MfStatus::Numeric,
        _ => MfStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MfStatus, String)>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MfStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MfStatus::Panic
        }
    }
}

fn lib<T>(r: mfadvlab::Result<T>) -> Result<T, (MfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), (MfStatus, String)> {
    if p.is_null() {
        Err((MfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn norm_pair(p: i32, q: i32) -> Result<NormPair, (MfStatus, String)> {
    match (Norm::from_code(p), Norm::from_code(q)) {
        (Some(p), Some(q)) => Ok(NormPair::new(p, q)),
        _ => Err((MfStatus::InvalidArgument, format!("unknown norm code in ({p}, {q}); use 1, 2 or 0 for inf"))),
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Samples a network with activation slopes `u` (positive side) and `v`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mf_network_new(
    arch: MfArch,
    d: usize,
    k: usize,
    l: usize,
    n: usize,
    sigma_w2: f64,
    sigma_b2: f64,
    u: f64,
    v: f64,
    seed: u64,
    out: *mut *mut MfNetwork,
) -> MfStatus {
    guard(|| {
        nonnull(out, "out")?;
        let arch = match arch {
            MfArch::Vanilla => Arch::Vanilla,
            MfArch::Residual => Arch::Residual,
        };
        let cfg = NetworkConfig { d, k, l, n, sigma_w2, sigma_b2, u, v, arch };
        let net = lib(Network::sample(&cfg, seed))?;
        *out = Box::into_raw(Box::new(MfNetwork(net)));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `net` must be null or a handle from `mf_network_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_network_free(net: *mut MfNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input and output dimensions of a network.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_network_dims(net: *const MfNetwork, d: *mut usize, k: *mut usize) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(d, "d")?;
        nonnull(k, "k")?;
        *d = (*net).0.config.d;
        *k = (*net).0.config.k;
        Ok(())
    })
}

/// Network output `f(x)` into `out[0..k]`.
///
/// # Safety
/// `x` must hold `d` doubles and `out` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn mf_network_forward(
    net: *const MfNetwork,
    x: *const f64,
    d: usize,
    out: *mut f64,
    k: usize,
) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(x, "x")?;
        nonnull(out, "out")?;
        let net = &(*net).0;
        lib(check(net.config.k, k, "output length"))?;
        let f = lib(net.output(std::slice::from_raw_parts(x, d)))?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(f.as_slice().expect("contiguous"));
        Ok(())
    })
}

fn check(expected: usize, got: usize, what: &'static str) -> mfadvlab::Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

/// Exact linear region at `x`: `f(y) = J y + a` near `x`. `j` receives the
/// k-by-d Jacobian row-major, `a` the k offsets.
///
/// # Safety
/// `x` must hold `d` doubles, `j` room for `k * d` and `a` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn mf_network_linear_region(
    net: *const MfNetwork,
    x: *const f64,
    d: usize,
    j: *mut f64,
    a: *mut f64,
) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(x, "x")?;
        nonnull(j, "j")?;
        nonnull(a, "a")?;
        let net = &(*net).0;
        let k = net.config.k;
        let r = lib(net.linear_region(std::slice::from_raw_parts(x, d)))?;
        let js = std::slice::from_raw_parts_mut(j, k * net.config.d);
        for (dst, src) in js.iter_mut().zip(r.j.iter()) {
            *dst = *src;
        }
        std::slice::from_raw_parts_mut(a, k).copy_from_slice(r.a.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Dimension factor `beta_{p,q}` for input dimension `d` and output dimension `k`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_beta(p: i32, q: i32, d: usize, k: usize, out: *mut f64) -> MfStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = lib(theory::beta(norm_pair(p, q)?, d, k))?;
        Ok(())
    })
}

/// Mean-field upper bound `eps * beta * omega^{L/2}` for the network's
/// hyperparameters.
///
/// # Safety
/// `net` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_adv_loss_bound(net: *const MfNetwork, p: i32, q: i32, eps: f64, out: *mut f64) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(out, "out")?;
        let params = TheoryParams::from_config(&(*net).0.config);
        *out = lib(theory::adv_loss_bound(&params, norm_pair(p, q)?, eps))?;
        Ok(())
    })
}

/// `(p, q)` operator norm of a row-major `rows` by `cols` matrix.
///
/// # Safety
/// `m` must hold `rows * cols` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_operator_norm(m: *const f64, rows: usize, cols: usize, p: i32, q: i32, out: *mut f64) -> MfStatus {
    guard(|| {
        nonnull(m, "m")?;
        nonnull(out, "out")?;
        let view = ArrayView2::from_shape((rows, cols), std::slice::from_raw_parts(m, rows * cols))
            .map_err(|e| (MfStatus::DimensionMismatch, e.to_string()))?;
        *out = lib(attack::operator_norm(view, norm_pair(p, q)?))?;
        Ok(())
    })
}

/// Multi-restart PGD maximizing `||f(x + eta) - f(x)||_q` over
/// `||eta||_p <= eps`. Writes the best perturbation and its loss.
///
/// # Safety
/// `x` and `eta` must hold `d` doubles; `loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_pgd_attack(
    net: *const MfNetwork,
    x: *const f64,
    d: usize,
    p: i32,
    q: i32,
    eps: f64,
    iters: usize,
    restarts: usize,
    seed: u64,
    eta: *mut f64,
    loss: *mut f64,
) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(x, "x")?;
        nonnull(eta, "eta")?;
        nonnull(loss, "loss")?;
        let mut spec = AttackSpec::new(norm_pair(p, q)?, eps, iters, restarts);
        spec.seed = seed;
        let r = lib(attack::pgd_attack(&(*net).0, std::slice::from_raw_parts(x, d), &spec))?;
        std::slice::from_raw_parts_mut(eta, d).copy_from_slice(&r.eta);
        *loss = r.loss;
        Ok(())
    })
}

/// Predicted success probability of a single signed-gradient step of size
/// `eps` on a scalar-output network at an input of norm sqrt(d).
///
/// # Safety
/// `net` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mf_flip_probability(net: *const MfNetwork, eps: f64, out: *mut f64) -> MfStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(out, "out")?;
        *out = lib(theory::flip_probability(&TheoryParams::from_config(&(*net).0.config), eps))?;
        Ok(())
    })
}
