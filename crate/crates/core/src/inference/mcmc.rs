use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::InferenceError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STFCHAIN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adaptation schedule of the random-walk proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub enabled: bool,
    /// Iterations run with the initial proposal before any update.
    pub fixed_iters: usize,
    pub update_every: usize,
    /// Adaptation stops after this fraction of the chain.
    pub freeze_fraction: f64,
    pub ridge: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fixed_iters: 1000,
            update_every: 100,
            freeze_fraction: 0.25,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpointing {
    pub path: PathBuf,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_iter: usize,
    pub adapt: AdaptConfig,
    /// Initial proposal covariance; `0.01 I` when absent.
    pub initial_cov: Option<DMatrix<f64>>,
    pub checkpoint: Option<Checkpointing>,
}

impl SamplerSettings {
    pub fn new(n_iter: usize) -> Self {
        Self {
            n_iter,
            adapt: AdaptConfig::default(),
            initial_cov: None,
            checkpoint: None,
        }
    }

    fn warmup(&self) -> usize {
        if self.adapt.enabled {
            (self.adapt.freeze_fraction * self.n_iter as f64).ceil() as usize
        } else {
            0
        }
    }
}

/// One sampler run. `states[i]` is the state after iteration `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub states: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub accepted: usize,
    pub accepted_after_warmup: usize,
    pub warmup: usize,
    pub seed: u64,
    pub stream: u64,
    pub proposal: DMatrix<f64>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.proposal.nrows()
    }

    /// Acceptance rate once adaptation has stopped (overall if it never ran).
    pub fn acceptance_rate(&self) -> f64 {
        let after = self.len().saturating_sub(self.warmup);
        if after == 0 {
            return self.accepted as f64 / self.len().max(1) as f64;
        }
        self.accepted_after_warmup as f64 / after as f64
    }

    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[k]).collect()
    }

    /// Indices kept after discarding `burn_in` and thinning by `thin`.
    pub fn retained(&self, burn_in: usize, thin: usize) -> impl Iterator<Item = usize> {
        (burn_in.min(self.len())..self.len()).step_by(thin.max(1))
    }
}

/// Gaussian random-walk Metropolis step with a fixed proposal.
#[derive(Debug, Clone)]
pub struct RwmhKernel {
    factor: DMatrix<f64>,
}

impl RwmhKernel {
    pub fn new(cov: &DMatrix<f64>) -> Option<Self> {
        let chol = cov.clone().cholesky()?;
        Some(Self { factor: chol.l() })
    }

    /// Advance `(z, lp)` in place; returns whether the proposal was accepted.
    pub fn step<F, R>(&self, target: &F, z: &mut [f64], lp: &mut f64, rng: &mut R) -> bool
    where
        F: Fn(&[f64]) -> f64 + ?Sized,
        R: Rng + ?Sized,
    {
        let d = z.len();
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.factor * e;
        let proposal: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let lp_new = target(&proposal);
        let u: f64 = rng.gen();
        if lp_new.is_finite() && u.ln() < lp_new - *lp {
            z.copy_from_slice(&proposal);
            *lp = lp_new;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SamplerState {
    seed: u64,
    stream: u64,
    word_pos: u128,
    z: Vec<f64>,
    lp: f64,
    proposal: DMatrix<f64>,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    count: u64,
    accepted: u64,
    accepted_after: u64,
    states: Vec<Vec<f64>>,
    log_post: Vec<f64>,
}

impl SamplerState {
    fn push_moments(&mut self, z: &[f64]) {
        let x = DVector::from_column_slice(z);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }
}

/// Adaptive random-walk Metropolis on `log_target`, with independent streams
/// per `(seed, stream)`.
pub fn adaptive_rwmh<F>(
    log_target: &F,
    init: &[f64],
    settings: &SamplerSettings,
    seed: u64,
    stream: u64,
) -> Result<Chain, InferenceError>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let d = init.len();
    let lp = log_target(init);
    if !lp.is_finite() {
        return Err(InferenceError::InvalidInit(lp));
    }
    let proposal = match &settings.initial_cov {
        Some(c) if c.nrows() == d && c.ncols() == d => c.clone(),
        Some(_) => return Err(InferenceError::Dimension("initial proposal covariance".into())),
        None => DMatrix::identity(d, d) * 0.01,
    };
    let mut state = SamplerState {
        seed,
        stream,
        word_pos: 0,
        z: init.to_vec(),
        lp,
        proposal,
        mean: DVector::zeros(d),
        m2: DMatrix::zeros(d, d),
        count: 0,
        accepted: 0,
        accepted_after: 0,
        states: Vec::with_capacity(settings.n_iter),
        log_post: Vec::with_capacity(settings.n_iter),
    };
    state.push_moments(init);
    run(log_target, state, settings)
}

/// Continue a run from a checkpoint file.
pub fn resume_rwmh<F>(log_target: &F, path: &Path, settings: &SamplerSettings) -> Result<Chain, InferenceError>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let state = read_state(path)?;
    run(log_target, state, settings)
}

fn run<F>(log_target: &F, mut st: SamplerState, settings: &SamplerSettings) -> Result<Chain, InferenceError>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let d = st.z.len();
    let mut rng = ChaCha8Rng::seed_from_u64(st.seed);
    rng.set_stream(st.stream);
    rng.set_word_pos(st.word_pos);
    let warmup = settings.warmup();
    let adapt = settings.adapt;
    let mut kernel = RwmhKernel::new(&st.proposal).unwrap_or_else(|| {
        let ridge = DMatrix::identity(d, d) * adapt.ridge.max(1e-300);
        RwmhKernel::new(&(&st.proposal + ridge)).expect("ridged proposal is positive definite")
    });
    while st.states.len() < settings.n_iter {
        let i = st.states.len();
        if adapt.enabled && i >= adapt.fixed_iters && i < warmup && i % adapt.update_every.max(1) == 0 && st.count > 1 {
            let emp = &st.m2 / (st.count - 1) as f64;
            let cand = (emp + DMatrix::identity(d, d) * adapt.ridge) * (2.38 * 2.38 / d as f64);
            if let Some(k) = RwmhKernel::new(&cand) {
                kernel = k;
                st.proposal = cand;
            }
        }
        let mut z = std::mem::take(&mut st.z);
        let ok = kernel.step(log_target, &mut z, &mut st.lp, &mut rng);
        st.z = z;
        if ok {
            st.accepted += 1;
            if i >= warmup {
                st.accepted_after += 1;
            }
        }
        let z = st.z.clone();
        st.push_moments(&z);
        st.states.push(z);
        st.log_post.push(st.lp);
        if let Some(cp) = &settings.checkpoint {
            if cp.every > 0 && st.states.len() % cp.every == 0 {
                st.word_pos = rng.get_word_pos();
                write_state(&cp.path, &st)?;
            }
        }
    }
    Ok(Chain {
        states: st.states,
        log_post: st.log_post,
        accepted: st.accepted as usize,
        accepted_after_warmup: st.accepted_after as usize,
        warmup: warmup.min(settings.n_iter),
        seed: st.seed,
        stream: st.stream,
        proposal: st.proposal,
    })
}

fn ck_err(path: &Path, message: impl ToString) -> InferenceError {
    InferenceError::Checkpoint {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn write_state(path: &Path, st: &SamplerState) -> Result<(), InferenceError> {
    let d = st.z.len();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [st.seed, st.stream, d as u64, st.count, st.accepted, st.accepted_after, st.states.len() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&st.word_pos.to_le_bytes());
    let mut floats = |xs: &mut dyn Iterator<Item = f64>| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    floats(&mut st.z.iter().copied());
    floats(&mut std::iter::once(st.lp));
    floats(&mut st.proposal.iter().copied());
    floats(&mut st.mean.iter().copied());
    floats(&mut st.m2.iter().copied());
    floats(&mut st.states.iter().flatten().copied());
    floats(&mut st.log_post.iter().copied());
    // write then rename so a crash never leaves a torn file
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| ck_err(path, e))?;
    f.write_all(&buf).map_err(|e| ck_err(path, e))?;
    f.sync_all().map_err(|e| ck_err(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ck_err(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.buf.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        (0..n).map(|_| self.take::<8>().map(f64::from_le_bytes)).collect()
    }
}

fn read_state(path: &Path) -> Result<SamplerState, InferenceError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| ck_err(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take::<8>().ok_or_else(|| ck_err(path, "truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err(path, "not a chain checkpoint"));
    }
    let version = c.take::<4>().map(u32::from_le_bytes).ok_or_else(|| ck_err(path, "truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let bad = || ck_err(path, "truncated body");
    let mut ints = [0u64; 7];
    for v in ints.iter_mut() {
        *v = c.u64().ok_or_else(bad)?;
    }
    let [seed, stream, d, count, accepted, accepted_after, n] = ints;
    let (d, n) = (d as usize, n as usize);
    let word_pos = c.take::<16>().map(u128::from_le_bytes).ok_or_else(bad)?;
    let z = c.f64s(d).ok_or_else(bad)?;
    let lp = c.f64s(1).ok_or_else(bad)?[0];
    let proposal = DMatrix::from_vec(d, d, c.f64s(d * d).ok_or_else(bad)?);
    let mean = DVector::from_vec(c.f64s(d).ok_or_else(bad)?);
    let m2 = DMatrix::from_vec(d, d, c.f64s(d * d).ok_or_else(bad)?);
    let flat = c.f64s(n * d).ok_or_else(bad)?;
    let states = if d == 0 { vec![vec![]; n] } else { flat.chunks(d).map(|s| s.to_vec()).collect() };
    let log_post = c.f64s(n).ok_or_else(bad)?;
    if c.pos != buf.len() {
        return Err(ck_err(path, "trailing bytes"));
    }
    Ok(SamplerState {
        seed,
        stream,
        word_pos,
        z,
        lp,
        proposal,
        mean,
        m2,
        count,
        accepted,
        accepted_after,
        states,
        log_post,
    })
}

/// States and log posterior stored in a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<f64>), InferenceError> {
    let st = read_state(path)?;
    Ok((st.states, st.log_post))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(z: &[f64]) -> f64 {
        -0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let s = SamplerSettings::new(3000);
        let a = adaptive_rwmh(&normal, &[0.5, -0.5], &s, 7, 0).unwrap();
        let b = adaptive_rwmh(&normal, &[0.5, -0.5], &s, 7, 0).unwrap();
        assert_eq!(a, b);
        let c = adaptive_rwmh(&normal, &[0.5, -0.5], &s, 7, 1).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        let mut short = SamplerSettings::new(1500);
        short.checkpoint = Some(Checkpointing {
            path: path.clone(),
            every: 500,
        });
        adaptive_rwmh(&normal, &[0.1, 0.2], &short, 3, 2).unwrap();
        let full = SamplerSettings::new(4000);
        let resumed = resume_rwmh(&normal, &path, &full).unwrap();
        let direct = adaptive_rwmh(&normal, &[0.1, 0.2], &full, 3, 2).unwrap();
        assert_eq!(resumed.states, direct.states);
        assert_eq!(resumed.log_post, direct.log_post);
    }

    #[test]
    fn bad_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"NOTACHAIN").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn degenerate_target_does_not_crash() {
        // a target that rejects every move keeps the empirical covariance at zero
        let target = |z: &[f64]| if z.iter().all(|v| *v == 0.0) { 0.0 } else { f64::NEG_INFINITY };
        let chain = adaptive_rwmh(&target, &[0.0, 0.0], &SamplerSettings::new(3000), 1, 0).unwrap();
        assert_eq!(chain.accepted, 0);
        assert!(chain.proposal.iter().all(|v| v.is_finite()));
    }
}
