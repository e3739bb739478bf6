//! C ABI surface: opaque handles for the game, policy pools, and belief
//! models, plus flat functions for belief evaluation, search cross-play,
//! and the statistical tests. Every fallible call returns a status code;
//! the most recent error message is kept per thread and retrievable with
//! `gbc_last_error`.

use gbc_core::belief::{train_belief, BeliefNet, TrainConfig, TrainMode};
use gbc_core::coordination::{
    clopper_pearson, evaluate_crossplay, permutation_test, BeliefSampler, ExactSampler,
    GroundedSampler, NetSampler, SearchConfig, Seat, Tail,
};
use gbc_core::env::{GameConfig, MiniHanabi};
use gbc_core::policy::{scripted_pool, PolicyPool};
use gbc_core::tensor::{load_checkpoint, save_checkpoint};
use gbc_core::toolkit::{
    eval_ce_curve, ExactEvaluator, GroundedEvaluator, LearnedEvaluator,
};
use libc::{c_char, c_double, c_int, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::sync::Arc;

/// Status codes returned by every fallible function.
pub const GBC_OK: c_int = 0;
pub const GBC_ERR_NULL_ARGUMENT: c_int = 1;
pub const GBC_ERR_INVALID_ARGUMENT: c_int = 2;
pub const GBC_ERR_UTF8: c_int = 3;
pub const GBC_ERR_IO: c_int = 4;
pub const GBC_ERR_INTERNAL: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(code: c_int, msg: &str) -> c_int {
    set_error(msg);
    code
}

/// Copies the current thread's last error message (NUL-terminated,
/// truncated to `len` bytes) into `buf`. Returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn gbc_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

pub struct GbcGame(Arc<MiniHanabi>);
pub struct GbcPool(Arc<PolicyPool>);
pub struct GbcBelief(Arc<BeliefNet>);

unsafe fn utf8<'a>(ptr: *const c_char) -> Result<&'a str, c_int> {
    if ptr.is_null() {
        return Err(fail(GBC_ERR_NULL_ARGUMENT, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(GBC_ERR_UTF8, "string argument is not valid UTF-8"))
}

macro_rules! nonnull {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => return fail(GBC_ERR_NULL_ARGUMENT, concat!(stringify!($ptr), " is null")),
        }
    };
}

macro_rules! out_ptr {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => return fail(GBC_ERR_NULL_ARGUMENT, concat!(stringify!($ptr), " is null")),
        }
    };
}

/// Creates the default two-color, three-rank Mini-Hanabi game.
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_new_default(out: *mut *mut GbcGame) -> c_int {
    let out = out_ptr!(out);
    *out = Box::into_raw(Box::new(GbcGame(Arc::new(MiniHanabi::default_mini()))));
    GBC_OK
}

/// Creates a single-color, five-rank game (five hidden identities).
///
/// # Safety
/// `out` must point to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_new_five_identity(out: *mut *mut GbcGame) -> c_int {
    let out = out_ptr!(out);
    match MiniHanabi::new(GameConfig::five_identity()) {
        Ok(game) => {
            *out = Box::into_raw(Box::new(GbcGame(Arc::new(game))));
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

/// # Safety
/// `game` must be a live handle from a `gbc_game_new_*` call, or null.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_free(game: *mut GbcGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}

/// # Safety
/// `game` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_num_identities(game: *const GbcGame) -> c_int {
    match game.as_ref() {
        Some(g) => g.0.config.num_identities() as c_int,
        None => -1,
    }
}

/// # Safety
/// `game` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_hand_size(game: *const GbcGame) -> c_int {
    match game.as_ref() {
        Some(g) => g.0.config.hand_size as c_int,
        None => -1,
    }
}

/// # Safety
/// `game` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gbc_game_max_score(game: *const GbcGame) -> c_int {
    match game.as_ref() {
        Some(g) => g.0.config.max_score() as c_int,
        None => -1,
    }
}

/// Builds a pool of `n` scripted conventions diversified by seed and color
/// relabelling.
///
/// # Safety
/// `game` must be a live handle; `out` must point to a writable slot.
#[no_mangle]
pub unsafe extern "C" fn gbc_pool_new_scripted(
    game: *const GbcGame,
    n: size_t,
    seed: u64,
    out: *mut *mut GbcPool,
) -> c_int {
    let game = nonnull!(game);
    let out = out_ptr!(out);
    if n == 0 {
        return fail(GBC_ERR_INVALID_ARGUMENT, "pool size must be >= 1");
    }
    match scripted_pool(game.0.clone(), n, seed) {
        Ok(pool) => {
            *out = Box::into_raw(Box::new(GbcPool(Arc::new(pool))));
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

/// # Safety
/// `pool` must be a live handle, or null.
#[no_mangle]
pub unsafe extern "C" fn gbc_pool_free(pool: *mut GbcPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gbc_pool_len(pool: *const GbcPool) -> c_int {
    match pool.as_ref() {
        Some(p) => p.0.len() as c_int,
        None => -1,
    }
}

/// Trains the belief transformer on pool self-play (single-threaded,
/// deterministic for a fixed seed).
///
/// # Safety
/// `pool` must be a live handle; `out` must point to a writable slot.
#[no_mangle]
pub unsafe extern "C" fn gbc_belief_train(
    pool: *const GbcPool,
    steps: u64,
    seed: u64,
    out: *mut *mut GbcBelief,
) -> c_int {
    let pool = nonnull!(pool);
    let out = out_ptr!(out);
    let config = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    match train_belief(pool.0.clone(), &config, TrainMode::SingleThread) {
        Ok((net, _)) => {
            *out = Box::into_raw(Box::new(GbcBelief(Arc::new(net))));
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn gbc_belief_load(path: *const c_char, out: *mut *mut GbcBelief) -> c_int {
    let out = out_ptr!(out);
    let path = match utf8(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let ckpt = match load_checkpoint(Path::new(path)) {
        Ok(c) => c,
        Err(e) => return fail(GBC_ERR_IO, &e.to_string()),
    };
    match BeliefNet::from_checkpoint(ckpt) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(GbcBelief(Arc::new(net))));
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

/// # Safety
/// `belief` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gbc_belief_save(belief: *const GbcBelief, path: *const c_char) -> c_int {
    let belief = nonnull!(belief);
    let path = match utf8(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match save_checkpoint(Path::new(path), &belief.0.to_checkpoint()) {
        Ok(()) => GBC_OK,
        Err(e) => fail(GBC_ERR_IO, &e.to_string()),
    }
}

/// # Safety
/// `belief` must be a live handle, or null.
#[no_mangle]
pub unsafe extern "C" fn gbc_belief_free(belief: *mut GbcBelief) {
    if !belief.is_null() {
        drop(Box::from_raw(belief));
    }
}

pub const GBC_EVALUATOR_LEARNED: c_int = 0;
pub const GBC_EVALUATOR_GROUNDED: c_int = 1;
pub const GBC_EVALUATOR_EXACT: c_int = 2;

/// Mean hand cross-entropy (nats per occupied slot, averaged over all
/// timesteps) of a belief model on pool self-play. `belief` may be null
/// for the grounded and exact evaluators.
///
/// # Safety
/// Handles must be live; `out_mean` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn gbc_belief_eval_ce(
    pool: *const GbcPool,
    belief: *const GbcBelief,
    evaluator: c_int,
    games: size_t,
    seed: u64,
    out_mean: *mut c_double,
) -> c_int {
    let pool = nonnull!(pool);
    let out_mean = out_ptr!(out_mean);
    let curve = match evaluator {
        GBC_EVALUATOR_LEARNED => match belief.as_ref() {
            Some(b) => eval_ce_curve(&pool.0, &LearnedEvaluator(b.0.clone()), games, seed),
            None => {
                return fail(
                    GBC_ERR_NULL_ARGUMENT,
                    "the learned evaluator needs a belief handle",
                )
            }
        },
        GBC_EVALUATOR_GROUNDED => eval_ce_curve(&pool.0, &GroundedEvaluator, games, seed),
        GBC_EVALUATOR_EXACT => eval_ce_curve(&pool.0, &ExactEvaluator, games, seed),
        other => {
            return fail(
                GBC_ERR_INVALID_ARGUMENT,
                &format!("unknown evaluator {other}"),
            )
        }
    };
    match curve {
        Ok(points) => {
            let total: f64 = points.iter().map(|p| p.mean * p.n_games as f64).sum();
            let n: f64 = points.iter().map(|p| p.n_games as f64).sum();
            *out_mean = total / n;
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

pub const GBC_SAMPLER_EXACT: c_int = 0;
pub const GBC_SAMPLER_GROUNDED: c_int = 1;
pub const GBC_SAMPLER_NET: c_int = 2;

/// Cross-play of a belief-driven search seat (blueprint = pool member
/// `blueprint`) against pool member `partner`. `belief` is only consulted
/// for the net sampler.
///
/// # Safety
/// Handles must be live; `out_mean` and `out_sem` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gbc_search_crossplay(
    pool: *const GbcPool,
    belief: *const GbcBelief,
    sampler: c_int,
    blueprint: size_t,
    partner: size_t,
    games: size_t,
    samples_per_decision: size_t,
    rollouts_per_move: size_t,
    seed: u64,
    out_mean: *mut c_double,
    out_sem: *mut c_double,
) -> c_int {
    let pool = nonnull!(pool);
    let out_mean = out_ptr!(out_mean);
    let out_sem = out_ptr!(out_sem);
    if blueprint >= pool.0.len() || partner >= pool.0.len() {
        return fail(GBC_ERR_INVALID_ARGUMENT, "pool index out of range");
    }
    let partner_policy = pool.0.members[partner].clone();
    let sampler: Arc<dyn BeliefSampler<MiniHanabi>> = match sampler {
        GBC_SAMPLER_EXACT => Arc::new(ExactSampler {
            partner: partner_policy.clone(),
        }),
        GBC_SAMPLER_GROUNDED => Arc::new(GroundedSampler),
        GBC_SAMPLER_NET => match belief.as_ref() {
            Some(b) => Arc::new(NetSampler { net: b.0.clone() }),
            None => {
                return fail(GBC_ERR_NULL_ARGUMENT, "the net sampler needs a belief handle")
            }
        },
        other => {
            return fail(GBC_ERR_INVALID_ARGUMENT, &format!("unknown sampler {other}"))
        }
    };
    let config = SearchConfig {
        samples_per_decision,
        rollouts_per_move,
        deviation_margin: 0.0,
        seed,
    };
    let search_seat = Seat::Search {
        blueprint: pool.0.members[blueprint].clone(),
        belief: sampler,
        pool: pool.0.members.clone(),
        config,
    };
    let partner_seat = Seat::Policy(partner_policy);
    match evaluate_crossplay(&pool.0.game, &search_seat, &partner_seat, games, seed) {
        Ok(report) => {
            *out_mean = report.mean;
            *out_sem = report.sem;
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

pub const GBC_TAIL_ONE: c_int = 1;
pub const GBC_TAIL_TWO: c_int = 2;

/// Permutation test for a difference in means between two score lists,
/// with a 99% Clopper-Pearson interval on the Monte Carlo p-value.
///
/// # Safety
/// `a`/`b` must point to `len_a`/`len_b` doubles; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn gbc_permutation_test(
    a: *const c_double,
    len_a: size_t,
    b: *const c_double,
    len_b: size_t,
    resamples: size_t,
    tail: c_int,
    seed: u64,
    out_p: *mut c_double,
    out_lower: *mut c_double,
    out_upper: *mut c_double,
) -> c_int {
    if a.is_null() || b.is_null() {
        return fail(GBC_ERR_NULL_ARGUMENT, "score arrays must not be null");
    }
    let out_p = out_ptr!(out_p);
    let out_lower = out_ptr!(out_lower);
    let out_upper = out_ptr!(out_upper);
    let xs = std::slice::from_raw_parts(a, len_a);
    let ys = std::slice::from_raw_parts(b, len_b);
    let tail = match tail {
        GBC_TAIL_ONE => Tail::One,
        GBC_TAIL_TWO => Tail::Two,
        other => return fail(GBC_ERR_INVALID_ARGUMENT, &format!("unknown tail {other}")),
    };
    match permutation_test(xs, ys, resamples, tail, seed) {
        Ok(report) => {
            *out_p = report.p_value;
            *out_lower = report.lower;
            *out_upper = report.upper;
            GBC_OK
        }
        Err(e) => fail(GBC_ERR_INTERNAL, &e.to_string()),
    }
}

/// Exact binomial confidence interval for `hits` successes in `n` trials.
///
/// # Safety
/// Out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gbc_clopper_pearson(
    hits: size_t,
    n: size_t,
    alpha: c_double,
    out_lower: *mut c_double,
    out_upper: *mut c_double,
) -> c_int {
    let out_lower = out_ptr!(out_lower);
    let out_upper = out_ptr!(out_upper);
    if n == 0 || hits > n || !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return fail(GBC_ERR_INVALID_ARGUMENT, "need 0 < alpha < 1 and hits <= n >= 1");
    }
    let (lo, hi) = clopper_pearson(hits, n, alpha);
    *out_lower = lo;
    *out_upper = hi;
    GBC_OK
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn game_and_pool_lifecycle() {
        unsafe {
            let mut game: *mut GbcGame = ptr::null_mut();
            assert_eq!(gbc_game_new_default(&mut game), GBC_OK);
            assert_eq!(gbc_game_num_identities(game), 6);
            assert_eq!(gbc_game_hand_size(game), 2);
            assert_eq!(gbc_game_max_score(game), 6);
            let mut pool: *mut GbcPool = ptr::null_mut();
            assert_eq!(gbc_pool_new_scripted(game, 3, 0, &mut pool), GBC_OK);
            assert_eq!(gbc_pool_len(pool), 3);
            gbc_pool_free(pool);
            gbc_game_free(game);

            let mut five: *mut GbcGame = ptr::null_mut();
            assert_eq!(gbc_game_new_five_identity(&mut five), GBC_OK);
            assert_eq!(gbc_game_num_identities(five), 5);
            gbc_game_free(five);
        }
    }

    #[test]
    fn null_arguments_produce_codes_and_messages() {
        unsafe {
            assert_eq!(
                gbc_game_new_default(ptr::null_mut()),
                GBC_ERR_NULL_ARGUMENT
            );
            let mut buf = [0 as c_char; 256];
            let len = gbc_last_error(buf.as_mut_ptr(), buf.len());
            assert!(len > 0);
            let msg = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
            assert!(msg.contains("null"), "message: {msg}");
            assert_eq!(gbc_game_num_identities(ptr::null()), -1);
            assert_eq!(gbc_pool_len(ptr::null()), -1);
            gbc_game_free(ptr::null_mut());
            gbc_pool_free(ptr::null_mut());
            gbc_belief_free(ptr::null_mut());
        }
    }

    #[test]
    fn grounded_ce_through_the_abi() {
        unsafe {
            let mut game: *mut GbcGame = ptr::null_mut();
            assert_eq!(gbc_game_new_default(&mut game), GBC_OK);
            let mut pool: *mut GbcPool = ptr::null_mut();
            assert_eq!(gbc_pool_new_scripted(game, 2, 1, &mut pool), GBC_OK);
            let mut mean = f64::NAN;
            assert_eq!(
                gbc_belief_eval_ce(pool, ptr::null(), GBC_EVALUATOR_GROUNDED, 10, 7, &mut mean),
                GBC_OK
            );
            assert!(mean.is_finite() && mean > 0.0 && mean <= 6f64.ln() + 1e-9);
            // learned evaluator without a belief handle must fail cleanly
            assert_eq!(
                gbc_belief_eval_ce(pool, ptr::null(), GBC_EVALUATOR_LEARNED, 10, 7, &mut mean),
                GBC_ERR_NULL_ARGUMENT
            );
            gbc_pool_free(pool);
            gbc_game_free(game);
        }
    }

    #[test]
    fn belief_train_save_load_round_trip() {
        unsafe {
            let mut game: *mut GbcGame = ptr::null_mut();
            assert_eq!(gbc_game_new_default(&mut game), GBC_OK);
            let mut pool: *mut GbcPool = ptr::null_mut();
            assert_eq!(gbc_pool_new_scripted(game, 1, 0, &mut pool), GBC_OK);
            let mut belief: *mut GbcBelief = ptr::null_mut();
            // zero training steps: the initialized (exactly uniform) model
            assert_eq!(gbc_belief_train(pool, 0, 3, &mut belief), GBC_OK);
            let dir = tempfile::tempdir().unwrap();
            let path = CString::new(
                dir.path().join("belief.ckpt").to_str().unwrap().to_owned(),
            )
            .unwrap();
            assert_eq!(gbc_belief_save(belief, path.as_ptr()), GBC_OK);
            let mut reloaded: *mut GbcBelief = ptr::null_mut();
            assert_eq!(gbc_belief_load(path.as_ptr(), &mut reloaded), GBC_OK);
            let mut ce_a = 0.0;
            let mut ce_b = 0.0;
            assert_eq!(
                gbc_belief_eval_ce(pool, belief, GBC_EVALUATOR_LEARNED, 4, 5, &mut ce_a),
                GBC_OK
            );
            assert_eq!(
                gbc_belief_eval_ce(pool, reloaded, GBC_EVALUATOR_LEARNED, 4, 5, &mut ce_b),
                GBC_OK
            );
            assert_eq!(ce_a, ce_b);
            assert!((ce_a - 6f64.ln()).abs() < 1e-9);
            gbc_belief_free(belief);
            gbc_belief_free(reloaded);
            gbc_pool_free(pool);
            gbc_game_free(game);

            let mut missing: *mut GbcBelief = ptr::null_mut();
            let bad = CString::new("/nonexistent/no.ckpt").unwrap();
            assert_eq!(gbc_belief_load(bad.as_ptr(), &mut missing), GBC_ERR_IO);
        }
    }

    #[test]
    fn search_crossplay_through_the_abi() {
        unsafe {
            let mut game: *mut GbcGame = ptr::null_mut();
            assert_eq!(gbc_game_new_default(&mut game), GBC_OK);
            let mut pool: *mut GbcPool = ptr::null_mut();
            assert_eq!(gbc_pool_new_scripted(game, 2, 4, &mut pool), GBC_OK);
            let mut mean = f64::NAN;
            let mut sem = f64::NAN;
            assert_eq!(
                gbc_search_crossplay(
                    pool,
                    ptr::null(),
                    GBC_SAMPLER_GROUNDED,
                    0,
                    0,
                    3,
                    4,
                    8,
                    11,
                    &mut mean,
                    &mut sem,
                ),
                GBC_OK
            );
            assert!(mean.is_finite() && (0.0..=6.0).contains(&mean));
            assert!(sem.is_finite() && sem >= 0.0);
            assert_eq!(
                gbc_search_crossplay(
                    pool,
                    ptr::null(),
                    GBC_SAMPLER_GROUNDED,
                    5,
                    0,
                    1,
                    1,
                    1,
                    0,
                    &mut mean,
                    &mut sem,
                ),
                GBC_ERR_INVALID_ARGUMENT
            );
            gbc_pool_free(pool);
            gbc_game_free(game);
        }
    }

    #[test]
    fn stats_through_the_abi() {
        unsafe {
            let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
            let (mut p, mut lo, mut hi) = (0.0, 0.0, 0.0);
            assert_eq!(
                gbc_permutation_test(
                    xs.as_ptr(),
                    xs.len(),
                    xs.as_ptr(),
                    xs.len(),
                    2000,
                    GBC_TAIL_TWO,
                    0,
                    &mut p,
                    &mut lo,
                    &mut hi,
                ),
                GBC_OK
            );
            assert!(p >= 0.9 && lo <= p && p <= hi);
            assert_eq!(
                gbc_permutation_test(
                    ptr::null(),
                    0,
                    xs.as_ptr(),
                    xs.len(),
                    10,
                    GBC_TAIL_ONE,
                    0,
                    &mut p,
                    &mut lo,
                    &mut hi,
                ),
                GBC_ERR_NULL_ARGUMENT
            );

            assert_eq!(gbc_clopper_pearson(50, 100, 0.01, &mut lo, &mut hi), GBC_OK);
            assert!(lo < 0.5 && 0.5 < hi);
            assert_eq!(
                gbc_clopper_pearson(5, 4, 0.01, &mut lo, &mut hi),
                GBC_ERR_INVALID_ARGUMENT
            );
        }
    }
}
