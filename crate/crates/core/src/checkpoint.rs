//! Binary run-state snapshots. Tensors are stored as raw little-endian
//! f64 bit patterns so a save/load round trip is exact, which is what lets
//! a resumed run reproduce an uninterrupted one.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::{Arch, SegModelParams, TeacherState};
use crate::optim::Sgd;
use crate::trainer::{EpochRecord, TrainState};

const MAGIC: &[u8; 8] = b"DSSNCKPT";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, ArrayD<f64>)]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.iter() {
            w.write_u64::<LittleEndian>(v.to_bits())?;
        }
    }
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_tensors<R: Read>(r: &mut R) -> std::io::Result<Vec<(String, ArrayD<f64>)>> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(r.read_u64::<LittleEndian>()?));
        }
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push((name, t));
    }
    Ok(out)
}

fn write_opt_f64<W: Write>(w: &mut W, v: Option<f64>) -> std::io::Result<()> {
    match v {
        Some(x) => {
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(x.to_bits())
        }
        None => w.write_u8(0),
    }
}

fn read_opt_f64<R: Read>(r: &mut R) -> std::io::Result<Option<f64>> {
    Ok(match r.read_u8()? {
        0 => None,
        _ => Some(f64::from_bits(r.read_u64::<LittleEndian>()?)),
    })
}

/// Writes the full training state plus the configuration hash it belongs
/// to. The file appears atomically: it is written to a sibling temp path
/// and renamed into place.
pub fn save_checkpoint(state: &TrainState, config_hash: &[u8; 32], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        let inner = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_all(config_hash)?;
            w.write_u64::<LittleEndian>(state.seed)?;
            w.write_u64::<LittleEndian>(state.epoch as u64)?;
            let arch = serde_json::to_string(&state.student.arch).expect("arch serializes");
            w.write_u32::<LittleEndian>(arch.len() as u32)?;
            w.write_all(arch.as_bytes())?;
            write_tensors(w, &state.student.tensors)?;
            w.write_u64::<LittleEndian>(state.teacher.alpha.to_bits())?;
            write_tensors(w, &state.teacher.params.tensors)?;
            w.write_u64::<LittleEndian>(state.optimizer.momentum.to_bits())?;
            w.write_u64::<LittleEndian>(state.optimizer.weight_decay.to_bits())?;
            write_tensors(w, &state.optimizer.velocity)?;
            w.write_u32::<LittleEndian>(state.history.len() as u32)?;
            for r in &state.history {
                w.write_u64::<LittleEndian>(r.epoch as u64)?;
                for v in [
                    r.lr,
                    r.losses.sup,
                    r.losses.cl_ls,
                    r.losses.cl_hs,
                    r.losses.w2s_l,
                    r.losses.w2s_h,
                    r.losses.total,
                    r.losses.selected_px_l,
                    r.losses.selected_px_h,
                ] {
                    w.write_u64::<LittleEndian>(v.to_bits())?;
                }
                write_opt_f64(w, r.val_miou_teacher)?;
                write_opt_f64(w, r.val_miou_student)?;
            }
            w.flush()
        };
        inner(&mut w).map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a checkpoint back, returning the state and the configuration hash
/// recorded at save time. The caller decides whether that hash matches.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, [u8; 32])> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(Error::checkpoint_mismatch(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != VERSION {
        return Err(Error::checkpoint_mismatch(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let inner = |r: &mut BufReader<File>| -> std::io::Result<(TrainState, [u8; 32])> {
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let epoch = r.read_u64::<LittleEndian>()? as usize;
        let arch_json = read_string(r)?;
        let arch: Arch = serde_json::from_str(&arch_json)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let student_tensors = read_tensors(r)?;
        let alpha = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let teacher_tensors = read_tensors(r)?;
        let momentum = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let weight_decay = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let velocity = read_tensors(r)?;
        let n_hist = r.read_u32::<LittleEndian>()? as usize;
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let epoch = r.read_u64::<LittleEndian>()? as usize;
            let mut vals = [0.0f64; 9];
            for v in vals.iter_mut() {
                *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
            }
            let val_miou_teacher = read_opt_f64(r)?;
            let val_miou_student = read_opt_f64(r)?;
            history.push(EpochRecord {
                epoch,
                lr: vals[0],
                losses: crate::losses::LossBundle {
                    sup: vals[1],
                    cl_ls: vals[2],
                    cl_hs: vals[3],
                    w2s_l: vals[4],
                    w2s_h: vals[5],
                    total: vals[6],
                    selected_px_l: vals[7],
                    selected_px_h: vals[8],
                },
                val_miou_teacher,
                val_miou_student,
            });
        }
        let state = TrainState {
            student: SegModelParams {
                arch: arch.clone(),
                tensors: student_tensors,
            },
            teacher: TeacherState {
                params: SegModelParams {
                    arch,
                    tensors: teacher_tensors,
                },
                alpha,
            },
            optimizer: Sgd {
                momentum,
                weight_decay,
                velocity,
            },
            epoch,
            seed,
            history,
        };
        Ok((state, hash))
    };
    let (state, hash) = inner(&mut r).map_err(io_err(path))?;
    state.student.arch.validate()?;
    Ok((state, hash))
}
