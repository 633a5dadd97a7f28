//! Binary file formats.
//!
//! Trajectory format (little-endian): magic "CHA1", system tag (u8),
//! 3 reserved bytes, T (u64), m (u64), dt (f64), then T*m f64 values
//! time-major. Model format: magic "CHM1", a spec descriptor
//! (kind u8, layer count u16, widths u32 list, activation u8), then the
//! parameter tensors in layer order as f64. Both round-trip bit-exactly.

use crate::autodiff::Activation;
use crate::dynamics::{SystemTag, Trajectory};
use crate::models::{ConvEmulatorSpec, Layer, MlpSpec, ModelParams, NetSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const TRAJ_MAGIC: &[u8; 4] = b"CHA1";
const MODEL_MAGIC: &[u8; 4] = b"CHM1";

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn trajectory_to_bytes(traj: &Trajectory) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + traj.states().len() * 8);
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.push(traj.system as u8);
    buf.extend_from_slice(&[0u8; 3]);
    put_u64(&mut buf, traj.len() as u64);
    put_u64(&mut buf, traj.dim() as u64);
    put_f64(&mut buf, traj.dt);
    for &v in traj.states() {
        put_f64(&mut buf, v);
    }
    buf
}

pub fn trajectory_from_bytes(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TRAJ_MAGIC {
        return Err(Error::Format("bad trajectory magic".into()));
    }
    let tag = SystemTag::from_u8(r.u8()?)?;
    r.take(3)?;
    let steps = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let dt = r.f64()?;
    let states = r.f64_vec(steps.checked_mul(dim).ok_or_else(|| {
        Error::Format("trajectory size overflow".into())
    })?)?;
    r.done()?;
    Trajectory::new(dt, tag, steps, dim, states)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    atomic_write(path, &trajectory_to_bytes(traj))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    trajectory_from_bytes(&buf)
}

fn kind_byte(spec: &NetSpec) -> u8 {
    match spec {
        NetSpec::Mlp(s) if !s.residual => 0,
        NetSpec::Mlp(_) => 1,
        NetSpec::Conv(s) if !s.residual => 2,
        NetSpec::Conv(_) => 3,
    }
}

fn activation_byte(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Gelu => 1,
        Activation::Tanh => 2,
        Activation::Linear => 3,
    }
}

fn activation_from(b: u8) -> Result<Activation> {
    match b {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Gelu),
        2 => Ok(Activation::Tanh),
        3 => Ok(Activation::Linear),
        _ => Err(Error::Format(format!("unknown activation byte {b}"))),
    }
}

pub fn model_to_bytes(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.push(kind_byte(&model.spec));
    buf.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    // widths: MLP layer widths, or [radius, channels...] for conv nets
    let widths: Vec<u32> = match &model.spec {
        NetSpec::Mlp(s) => s.widths.iter().map(|&w| w as u32).collect(),
        NetSpec::Conv(s) => {
            let mut v = vec![s.kernel_radius as u32];
            v.extend(s.channels.iter().map(|&c| c as u32));
            v
        }
    };
    buf.extend_from_slice(&(widths.len() as u16).to_le_bytes());
    for w in &widths {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf.push(activation_byte(model.spec.activation()));
    for layer in &model.layers {
        for &v in layer.w.data() {
            put_f64(&mut buf, v);
        }
        for &v in layer.b.data() {
            put_f64(&mut buf, v);
        }
    }
    buf
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let kind = r.u8()?;
    let layer_count = r.u16()? as usize;
    let width_count = r.u16()? as usize;
    let mut widths = Vec::with_capacity(width_count);
    for _ in 0..width_count {
        widths.push(r.u32()? as usize);
    }
    let activation = activation_from(r.u8()?)?;
    let spec = match kind {
        0 | 1 => {
            let mut s = MlpSpec::new(widths.clone(), activation);
            s.residual = kind == 1;
            if s.widths.len() != layer_count + 1 {
                return Err(Error::Format("width list and layer count disagree".into()));
            }
            NetSpec::Mlp(s)
        }
        2 | 3 => {
            if widths.len() < 2 {
                return Err(Error::Format("conv descriptor too short".into()));
            }
            NetSpec::Conv(ConvEmulatorSpec {
                kernel_radius: widths[0],
                channels: widths[1..].to_vec(),
                activation,
                residual: kind == 3,
            })
        }
        _ => return Err(Error::Format(format!("unknown model kind {kind}"))),
    };
    spec.validate()?;
    let mut layers = Vec::with_capacity(layer_count);
    match &spec {
        NetSpec::Mlp(s) => {
            for win in s.widths.windows(2) {
                let (i, o) = (win[0], win[1]);
                let w = r.f64_vec(o * i)?;
                let b = r.f64_vec(o)?;
                layers.push(Layer {
                    w: Tensor::new(vec![o, i], w)?,
                    b: Tensor::new(vec![o], b)?,
                });
            }
        }
        NetSpec::Conv(s) => {
            let k = 2 * s.kernel_radius + 1;
            let mut seq = vec![1usize];
            seq.extend_from_slice(&s.channels);
            seq.push(1);
            for win in seq.windows(2) {
                let (ci, co) = (win[0], win[1]);
                let w = r.f64_vec(co * ci * k)?;
                let b = r.f64_vec(co)?;
                layers.push(Layer {
                    w: Tensor::new(vec![co, ci, k], w)?,
                    b: Tensor::new(vec![co], b)?,
                });
            }
        }
    }
    if layers.len() != layer_count {
        return Err(Error::Format("layer count mismatch".into()));
    }
    r.done()?;
    Ok(ModelParams { spec, layers })
}

pub fn write_model(path: &Path, model: &ModelParams) -> Result<()> {
    atomic_write(path, &model_to_bytes(model))
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    model_from_bytes(&buf)
}

/// Write via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, SystemSpec};
    use crate::models::MlpSpec;

    #[test]
    fn trajectory_roundtrip_is_bit_exact() {
        let spec = SystemSpec::l63_classic();
        let traj = simulate(&spec, &[1.0, 1.0, 1.0], 50, 0.01, 0, 2).unwrap();
        let bytes = trajectory_to_bytes(&traj);
        let back = trajectory_from_bytes(&bytes).unwrap();
        let bytes2 = trajectory_to_bytes(&back);
        assert_eq!(bytes, bytes2);
        assert_eq!(back.system, SystemTag::L63);
        assert_eq!(back.dt, traj.dt);
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let mlp = ModelParams::init(
            NetSpec::Mlp(MlpSpec::new(vec![3, 16, 3], Activation::Gelu).residual()),
            7,
        )
        .unwrap();
        let bytes = model_to_bytes(&mlp);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&back), bytes);
        assert_eq!(back.spec, mlp.spec);

        let conv = ModelParams::init(
            NetSpec::Conv(ConvEmulatorSpec {
                channels: vec![8, 8],
                kernel_radius: 2,
                activation: Activation::Gelu,
                residual: true,
            }),
            9,
        )
        .unwrap();
        let bytes = model_to_bytes(&conv);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(trajectory_from_bytes(b"XXXX").is_err());
        let spec = SystemSpec::l63_classic();
        let traj = simulate(&spec, &[1.0, 1.0, 1.0], 5, 0.01, 0, 1).unwrap();
        let mut bytes = trajectory_to_bytes(&traj);
        bytes.truncate(bytes.len() - 3);
        assert!(trajectory_from_bytes(&bytes).is_err());
        bytes[0] = b'Z';
        assert!(trajectory_from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_roundtrip_through_disk() {
        let dir = std::env::temp_dir().join("chaos_ot_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.bin");
        let spec = SystemSpec::L96 {
            m: 6,
            forcing: 8.0,
        };
        let traj = simulate(&spec, &spec.default_initial_state(1), 20, 0.05, 5, 2).unwrap();
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(trajectory_to_bytes(&back), trajectory_to_bytes(&traj));
        std::fs::remove_dir_all(&dir).ok();
    }
}
