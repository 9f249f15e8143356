//! C ABI over `fbpc-core`.
//!
//! Objects are opaque heap handles created by `fbpc_*` constructors and
//! released with the matching `*_free`. Every fallible call returns an
//! [`FbpcStatus`]; on failure the message is available from
//! [`fbpc_last_error_message`] on the same thread. Structured arguments
//! (architectures, training and sampler configs) are passed as JSON strings
//! using the same schema as the CLI config file; `NULL` selects defaults.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fbpc_core::baselines::{random_coreset, train_bpc_fkl, BpcConfig};
use fbpc_core::data::{make_image_toy, make_synthetic, Dataset};
use fbpc_core::fbpc::{train_fbpc, FbpcConfig, Pseudocoreset};
use fbpc_core::models::{ArchitectureSpec, ParameterVector};
use fbpc_core::posteriors::{generate_expert_trajectories, ExpertConfig, TrajectoryPool};
use fbpc_core::rng::{derived, seeded};
use fbpc_core::sghmc::{evaluate_ensemble, sghmc_sample, SghmcConfig};
use fbpc_core::FbpcError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Validation = 4,
    Dimension = 5,
    Unsupported = 6,
    Capability = 7,
    NumericalRank = 8,
    Divergence = 9,
    NonConvergence = 10,
    Io = 11,
    Format = 12,
    Panic = 13,
}

impl From<&FbpcError> for FbpcStatus {
    fn from(e: &FbpcError) -> Self {
        match e {
            FbpcError::Dimension(_) => FbpcStatus::Dimension,
            FbpcError::Config(_) => FbpcStatus::Config,
            FbpcError::Unsupported(_) => FbpcStatus::Unsupported,
            FbpcError::Validation(_) => FbpcStatus::Validation,
            FbpcError::Divergence(_) => FbpcStatus::Divergence,
            FbpcError::NonConvergence { .. } => FbpcStatus::NonConvergence,
            FbpcError::Capability(_) => FbpcStatus::Capability,
            FbpcError::NumericalRank(_) => FbpcStatus::NumericalRank,
            FbpcError::Io { .. } => FbpcStatus::Io,
            FbpcError::Format { .. } => FbpcStatus::Format,
        }
    }
}

pub struct FbpcDataset(Dataset);
pub struct FbpcPool(TrajectoryPool);
pub struct FbpcCoreset(Pseudocoreset);
pub struct FbpcSamples {
    spec: ArchitectureSpec,
    samples: Vec<ParameterVector>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FbpcStatus, String);

impl From<FbpcError> for Failure {
    fn from(e: FbpcError) -> Self {
        Failure(FbpcStatus::from(&e), e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome<()>) -> FbpcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FbpcStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            FbpcStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(FbpcStatus::NullArgument, format!("{what} is NULL")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(Failure(FbpcStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FbpcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn json_or_default<T: serde::de::DeserializeOwned + Default>(
    p: *const c_char,
    what: &str,
) -> Outcome<T> {
    if p.is_null() {
        return Ok(T::default());
    }
    parse_json(string(p, what)?, what)
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Outcome<T> {
    serde_json::from_str(s)
        .map_err(|e| Failure(FbpcStatus::InvalidArgument, format!("{what}: {e}")))
}

unsafe fn spec_from(p: *const c_char) -> Outcome<ArchitectureSpec> {
    let spec: ArchitectureSpec = parse_json(string(p, "architecture")?, "architecture")?;
    spec.validate()?;
    Ok(spec)
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Outcome<()> {
    if out.is_null() {
        return Err(Failure(
            FbpcStatus::NullArgument,
            "output pointer is NULL".into(),
        ));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn check_out<T>(out: *mut T) -> Outcome<()> {
    if out.is_null() {
        Err(Failure(
            FbpcStatus::NullArgument,
            "output pointer is NULL".into(),
        ))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or `NULL`. Valid until the
/// next `fbpc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fbpc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// `kind` is `two_moons`, `gaussian_blobs` or `rings`.
#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_synthetic(
    kind: *const c_char,
    num_classes: usize,
    n_train: usize,
    n_test: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut FbpcDataset,
) -> FbpcStatus {
    guard(|| {
        let kind = string(kind, "kind")?.parse()?;
        emit(
            out,
            FbpcDataset(make_synthetic(
                kind,
                num_classes,
                n_train,
                n_test,
                noise,
                seed,
            )?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_image_toy(
    side: usize,
    num_classes: usize,
    n_per_class: usize,
    seed: u64,
    out: *mut *mut FbpcDataset,
) -> FbpcStatus {
    guard(|| {
        emit(
            out,
            FbpcDataset(make_image_toy(side, num_classes, n_per_class, seed)?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_load(
    path: *const c_char,
    out: *mut *mut FbpcDataset,
) -> FbpcStatus {
    guard(|| {
        let p = PathBuf::from(string(path, "path")?);
        emit(out, FbpcDataset(Dataset::load(&p)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_save(
    ds: *const FbpcDataset,
    path: *const c_char,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        Ok(ds.0.save(&PathBuf::from(string(path, "path")?))?)
    })
}

/// Writes the class count and the train/test sizes.
#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_shape(
    ds: *const FbpcDataset,
    num_classes: *mut usize,
    n_train: *mut usize,
    n_test: *mut usize,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        check_out(num_classes)?;
        check_out(n_train)?;
        check_out(n_test)?;
        *num_classes = ds.0.num_classes;
        *n_train = ds.0.train.len();
        *n_test = ds.0.test.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_dataset_free(ds: *mut FbpcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// `architecture` is an architecture JSON object; `experts` an expert
/// config JSON object or `NULL`.
#[no_mangle]
pub unsafe extern "C" fn fbpc_pool_generate(
    ds: *const FbpcDataset,
    architecture: *const c_char,
    experts: *const c_char,
    seed: u64,
    out: *mut *mut FbpcPool,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        let spec = spec_from(architecture)?;
        let cfg: ExpertConfig = json_or_default(experts, "experts")?;
        emit(
            out,
            FbpcPool(generate_expert_trajectories(&spec, &ds.0, &cfg, seed)?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_pool_load(dir: *const c_char, out: *mut *mut FbpcPool) -> FbpcStatus {
    guard(|| {
        emit(
            out,
            FbpcPool(TrajectoryPool::load(&PathBuf::from(string(dir, "dir")?))?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_pool_save(pool: *const FbpcPool, dir: *const c_char) -> FbpcStatus {
    guard(|| {
        let pool = borrow(pool, "pool")?;
        Ok(pool.0.save(&PathBuf::from(string(dir, "dir")?))?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_pool_free(pool: *mut FbpcPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_random(
    ds: *const FbpcDataset,
    ipc: usize,
    seed: u64,
    out: *mut *mut FbpcCoreset,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        emit(
            out,
            FbpcCoreset(random_coreset(&ds.0, ipc, &mut derived(seed, &["init"]))?),
        )
    })
}

/// Multi-architecture training over `n_pools` pools, one per architecture.
#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_train_fbpc(
    ds: *const FbpcDataset,
    pools: *const *const FbpcPool,
    n_pools: usize,
    config: *const c_char,
    ipc: usize,
    seed: u64,
    out: *mut *mut FbpcCoreset,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        if pools.is_null() || n_pools == 0 {
            return Err(Failure(
                FbpcStatus::NullArgument,
                "need at least one pool".into(),
            ));
        }
        let pools: Vec<TrajectoryPool> = std::slice::from_raw_parts(pools, n_pools)
            .iter()
            .map(|&p| borrow(p, "pool").map(|p| p.0.clone()))
            .collect::<Outcome<_>>()?;
        let specs: Vec<ArchitectureSpec> = pools.iter().map(|p| p.spec.clone()).collect();
        let cfg: FbpcConfig = json_or_default(config, "config")?;
        let (pc, _) = train_fbpc(&specs, &pools, &ds.0, ipc, &cfg, seed)?;
        emit(out, FbpcCoreset(pc))
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_train_bpc_fkl(
    ds: *const FbpcDataset,
    pool: *const FbpcPool,
    config: *const c_char,
    ipc: usize,
    seed: u64,
    out: *mut *mut FbpcCoreset,
) -> FbpcStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        let pool = borrow(pool, "pool")?;
        let cfg: BpcConfig = json_or_default(config, "config")?;
        let (pc, _) = train_bpc_fkl(&pool.0.spec, &pool.0, &ds.0, ipc, &cfg, seed)?;
        emit(out, FbpcCoreset(pc))
    })
}

/// Writes the row count and the flattened per-row input size.
#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_shape(
    pc: *const FbpcCoreset,
    rows: *mut usize,
    input_dim: *mut usize,
) -> FbpcStatus {
    guard(|| {
        let pc = borrow(pc, "coreset")?;
        check_out(rows)?;
        check_out(input_dim)?;
        *rows = pc.0.len();
        *input_dim = pc.0.input_dim();
        Ok(())
    })
}

/// Copies `rows × input_dim` values; `len` must match exactly.
#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_copy_inputs(
    pc: *const FbpcCoreset,
    buf: *mut f64,
    len: usize,
) -> FbpcStatus {
    guard(|| {
        let pc = borrow(pc, "coreset")?;
        check_out(buf)?;
        if len != pc.0.u.len() {
            return Err(Failure(
                FbpcStatus::Dimension,
                format!("buffer holds {len} values, coreset has {}", pc.0.u.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(pc.0.u.as_ptr(), buf, len);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_copy_labels(
    pc: *const FbpcCoreset,
    buf: *mut i64,
    len: usize,
) -> FbpcStatus {
    guard(|| {
        let pc = borrow(pc, "coreset")?;
        check_out(buf)?;
        let labels = pc.0.labels();
        if len != labels.len() {
            return Err(Failure(
                FbpcStatus::Dimension,
                format!("buffer holds {len} labels, coreset has {}", labels.len()),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            *buf.add(i) = l as i64;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_save(
    pc: *const FbpcCoreset,
    path: *const c_char,
) -> FbpcStatus {
    guard(|| {
        let pc = borrow(pc, "coreset")?;
        Ok(pc.0.save(
            &PathBuf::from(string(path, "path")?),
            serde_json::Value::Null,
        )?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_load(
    path: *const c_char,
    out: *mut *mut FbpcCoreset,
) -> FbpcStatus {
    guard(|| {
        let (pc, _) = Pseudocoreset::load(&PathBuf::from(string(path, "path")?))?;
        emit(out, FbpcCoreset(pc))
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_coreset_free(pc: *mut FbpcCoreset) {
    if !pc.is_null() {
        drop(Box::from_raw(pc));
    }
}

/// SGHMC posterior samples on the coreset. `sghmc` is a sampler config JSON
/// object or `NULL`.
#[no_mangle]
pub unsafe extern "C" fn fbpc_samples_draw(
    architecture: *const c_char,
    pc: *const FbpcCoreset,
    sghmc: *const c_char,
    seed: u64,
    out: *mut *mut FbpcSamples,
) -> FbpcStatus {
    guard(|| {
        let spec = spec_from(architecture)?;
        let pc = borrow(pc, "coreset")?;
        let cfg: SghmcConfig = json_or_default(sghmc, "sghmc")?;
        let samples = sghmc_sample(&spec, &pc.0, &cfg, &mut seeded(seed))?;
        emit(out, FbpcSamples { spec, samples })
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_samples_count(
    s: *const FbpcSamples,
    count: *mut usize,
) -> FbpcStatus {
    guard(|| {
        let s = borrow(s, "samples")?;
        check_out(count)?;
        *count = s.samples.len();
        Ok(())
    })
}

/// Bayesian-model-averaged accuracy and NLL on the dataset's test split.
#[no_mangle]
pub unsafe extern "C" fn fbpc_samples_evaluate(
    s: *const FbpcSamples,
    ds: *const FbpcDataset,
    accuracy: *mut f64,
    nll: *mut f64,
) -> FbpcStatus {
    guard(|| {
        let s = borrow(s, "samples")?;
        let ds = borrow(ds, "dataset")?;
        check_out(accuracy)?;
        check_out(nll)?;
        let r = evaluate_ensemble(&s.spec, &s.samples, &ds.0.test)?;
        *accuracy = r.accuracy;
        *nll = r.nll;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fbpc_samples_free(s: *mut FbpcSamples) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
