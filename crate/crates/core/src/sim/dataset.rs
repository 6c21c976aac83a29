//! Binary transition dataset: generation, persistence, loading.
//!
//! Little-endian layout, magic "LDKL", fixed-size records. Frames are stored
//! as f32; the clean frames are written and measurement/control noise is
//! applied at load/train time so one dataset serves every noise level.

use super::{
    render, step_dynamics, wrap_angle, Measurement, NoiseConfig, PendulumParams, PendulumState,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub const MAGIC: &[u8; 4] = b"LDKL";
pub const FORMAT_VERSION: u16 = 1;

/// Wrapper for ground-truth metadata that must never reach a model input.
/// Reads are counted so the training path can prove it stayed clean.
#[derive(Debug, Clone)]
pub struct EvalOnly<T> {
    value: T,
    reads: Arc<AtomicUsize>,
}

impl<T> EvalOnly<T> {
    fn new(value: T, reads: Arc<AtomicUsize>) -> Self {
        EvalOnly { value, reads }
    }

    /// Access the wrapped value for evaluation purposes. Every call is
    /// counted on the owning dataset's taint counter.
    pub fn for_eval(&self) -> &T {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.value
    }
}

/// True states bracketing one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStates {
    pub state_t: PendulumState,
    pub state_t1: PendulumState,
}

/// One training tuple (x_t, u_t, x_{t+1}) plus evaluation-only true states.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x_t: Measurement,
    pub u: f64,
    pub x_t1: Measurement,
    pub states: EvalOnly<TransitionStates>,
}

impl Transition {
    /// The model-visible part of the tuple.
    pub fn model_view(&self) -> (&Measurement, f64, &Measurement) {
        (&self.x_t, self.u, &self.x_t1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub h: usize,
    pub w: usize,
    pub channels_per_frame: usize,
    pub frames_per_measurement: usize,
    pub count: usize,
    pub episode_len: usize,
    pub seed: u64,
    pub params: PendulumParams,
    pub noise: NoiseConfig,
}

/// A loaded dataset with its taint counter for true-state reads.
#[derive(Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
    taint: Arc<AtomicUsize>,
}

impl Dataset {
    /// Number of times any true-state record has been read so far.
    pub fn taint_reads(&self) -> usize {
        self.taint.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

struct CountingWriter<W: Write> {
    inner: W,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        Ok(())
    }

    fn put_f32(&mut self, v: f32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn put_f64(&mut self, v: f64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
}

/// Generate `count` transitions by rolling out random-torque episodes and
/// write them to `path`. Deterministic given (seed, config): episode i uses
/// an RNG stream seeded with `seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    count: usize,
    episode_len: usize,
    params: &PendulumParams,
    noise: &NoiseConfig,
    h: usize,
    w: usize,
    seed: u64,
    path: &Path,
) -> Result<DatasetHeader> {
    if count == 0 {
        return Err(Error::config("dataset needs count >= 1".to_string()));
    }
    if episode_len == 0 {
        return Err(Error::config("dataset needs episode length >= 1".to_string()));
    }
    params.validate()?;
    noise.validate()?;
    // The dynamics disturbance during generation comes from the noise config.
    let mut gen_params = params.clone();
    gen_params.dynamics_noise_std = noise.sigma_dyn2.sqrt();

    let header = DatasetHeader {
        h,
        w,
        channels_per_frame: 1,
        frames_per_measurement: 2,
        count,
        episode_len,
        seed,
        params: gen_params.clone(),
        noise: *noise,
    };

    let file = File::create(path)?;
    let mut out = CountingWriter { inner: BufWriter::new(file) };
    write_header(&mut out, &header)?;

    let mut written = 0usize;
    let mut episode = 0u64;
    while written < count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(episode));
        episode += 1;

        let mut state = PendulumState::new(
            wrap_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
            rng.gen_range(-1.0..1.0),
        );
        let mut frame_prev = render(&state, h, w)?;
        let mut frame_curr = frame_prev.clone(); // first measurement duplicates the frame

        for _ in 0..episode_len {
            if written >= count {
                break;
            }
            let u = rng.gen_range(-gen_params.torque_limit..gen_params.torque_limit);
            let next = step_dynamics(&state, u, &gen_params, &mut rng);
            let frame_next = render(&next, h, w)?;

            let x_t = Measurement::stack(&frame_prev, &frame_curr)?;
            let x_t1 = Measurement::stack(&frame_curr, &frame_next)?;
            write_record(&mut out, &x_t, u, &x_t1, &state, &next)?;
            written += 1;

            frame_prev = frame_curr;
            frame_curr = frame_next;
            state = next;
        }
    }
    out.inner.flush()?;
    Ok(header)
}

fn write_header<W: Write>(out: &mut CountingWriter<W>, hd: &DatasetHeader) -> Result<()> {
    out.put(MAGIC)?;
    out.put(&FORMAT_VERSION.to_le_bytes())?;
    out.put(&(hd.h as u16).to_le_bytes())?;
    out.put(&(hd.w as u16).to_le_bytes())?;
    out.put(&(hd.channels_per_frame as u16).to_le_bytes())?;
    out.put(&(hd.frames_per_measurement as u16).to_le_bytes())?;
    out.put(&(hd.count as u32).to_le_bytes())?;
    out.put(&(hd.episode_len as u32).to_le_bytes())?;
    out.put(&hd.seed.to_le_bytes())?;
    for v in [
        hd.params.mass,
        hd.params.length,
        hd.params.gravity,
        hd.params.dt,
        hd.params.torque_limit,
        hd.params.dynamics_noise_std,
    ] {
        out.put_f64(v)?;
    }
    for v in [hd.noise.sigma_x2, hd.noise.sigma_u2, hd.noise.sigma_dyn2] {
        out.put_f64(v)?;
    }
    Ok(())
}

fn write_record<W: Write>(
    out: &mut CountingWriter<W>,
    x_t: &Measurement,
    u: f64,
    x_t1: &Measurement,
    s_t: &PendulumState,
    s_t1: &PendulumState,
) -> Result<()> {
    for &v in x_t.frames.data() {
        out.put_f32(v as f32)?;
    }
    out.put_f32(u as f32)?;
    for &v in x_t1.frames.data() {
        out.put_f32(v as f32)?;
    }
    for v in [s_t.angle, s_t.velocity, s_t1.angle, s_t1.velocity] {
        out.put_f32(v as f32)?;
    }
    Ok(())
}

struct CountingReader<R: Read> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> CountingReader<R> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), offset: self.offset, msg: msg.into() }
    }

    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.fail(format!("truncated file while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Load a dataset written by [`generate_dataset`]. Fails atomically: either
/// every record parses or no transitions are returned.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };

    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(r.fail(format!(
            "bad magic {magic:?}, expected {MAGIC:?} (\"LDKL\")"
        )));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let channels_per_frame = r.u16("channels")? as usize;
    let frames_per_measurement = r.u16("frames")? as usize;
    let count = r.u32("count")? as usize;
    let episode_len = r.u32("episode_len")? as usize;
    let seed = r.u64("seed")?;
    let params = PendulumParams {
        mass: r.f64("mass")?,
        length: r.f64("length")?,
        gravity: r.f64("gravity")?,
        dt: r.f64("dt")?,
        torque_limit: r.f64("torque_limit")?,
        dynamics_noise_std: r.f64("dynamics_noise_std")?,
    };
    let noise = NoiseConfig {
        sigma_x2: r.f64("sigma_x2")?,
        sigma_u2: r.f64("sigma_u2")?,
        sigma_dyn2: r.f64("sigma_dyn2")?,
    };
    if h == 0 || w == 0 || channels_per_frame == 0 || frames_per_measurement == 0 {
        return Err(r.fail("zero-sized geometry in header"));
    }

    let taint = Arc::new(AtomicUsize::new(0));
    let plane = h * w;
    let channels = channels_per_frame * frames_per_measurement;
    let mut transitions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut read_measurement = |r: &mut CountingReader<BufReader<File>>| -> Result<Measurement> {
            let mut data = Vec::with_capacity(channels * plane);
            for _ in 0..channels * plane {
                data.push(r.f32("frame data")? as f64);
            }
            Ok(Measurement { frames: Tensor::new(vec![channels, h, w], data)? })
        };
        let x_t = read_measurement(&mut r)?;
        let u = r.f32("control")? as f64;
        let x_t1 = read_measurement(&mut r)?;
        let states = TransitionStates {
            state_t: PendulumState {
                angle: r.f32("state angle")? as f64,
                velocity: r.f32("state velocity")? as f64,
            },
            state_t1: PendulumState {
                angle: r.f32("next state angle")? as f64,
                velocity: r.f32("next state velocity")? as f64,
            },
        };
        transitions.push(Transition {
            x_t,
            u,
            x_t1,
            states: EvalOnly::new(states, Arc::clone(&taint)),
        });
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(r.fail("trailing bytes after final record"));
    }

    Ok(Dataset {
        header: DatasetHeader {
            h,
            w,
            channels_per_frame,
            frames_per_measurement,
            count,
            episode_len,
            seed,
            params,
            noise,
        },
        transitions,
        taint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ldkl");
        let params = PendulumParams::default();
        let noise = NoiseConfig { sigma_x2: 0.3, sigma_u2: 0.1, sigma_dyn2: 0.0 };
        let header = generate_dataset(12, 5, &params, &noise, 16, 16, 7, &path).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.header, header);
        assert_eq!(ds.len(), 12);
        for t in &ds.transitions {
            assert_eq!(t.x_t.frames.shape(), &[2, 16, 16]);
            // Clean frames stay in [0, 1].
            assert!(t.x_t.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let st = t.states.for_eval();
            assert!(st.state_t.angle.abs() <= std::f64::consts::PI + 1e-6);
        }
        assert!(ds.taint_reads() >= 12);
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ldkl"), dir.path().join("b.ldkl"));
        let params = PendulumParams::default();
        let noise = NoiseConfig { sigma_x2: 0.0, sigma_u2: 0.0, sigma_dyn2: 1.0 };
        generate_dataset(10, 4, &params, &noise, 16, 16, 7, &p1).unwrap();
        generate_dataset(10, 4, &params, &noise, 16, 16, 7, &p2).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b1, b2);
    }

    #[test]
    fn truncated_file_reports_offset_and_returns_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ldkl");
        generate_dataset(4, 4, &PendulumParams::default(), &NoiseConfig::none(), 16, 16, 1, &path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Format { offset, msg, .. } => {
                assert!(offset > 0);
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_names_expected_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ldkl");
        std::fs::write(&path, b"NOPE-this-is-not-a-dataset").unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("LDKL"), "{err}");
    }

    #[test]
    fn taint_counter_counts_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ldkl");
        generate_dataset(3, 3, &PendulumParams::default(), &NoiseConfig::none(), 16, 16, 9, &path)
            .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.taint_reads(), 0);
        let _ = ds.transitions[0].states.for_eval();
        assert_eq!(ds.taint_reads(), 1);
        let (_x, _u, _x1) = ds.transitions[1].model_view();
        assert_eq!(ds.taint_reads(), 1);
    }
}
