//! Segmentation model: a small conv encoder, a conv decoder with bilinear
//! logit upsampling, softmax prediction, and the EMA teacher update. Plain
//! (inference) and tape (training) forwards share the same kernels.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::types::{randn, FeatureMap, ImageBatch, LogitMap, ProbMap};

/// One 3x3 conv layer of the encoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Network shape: a stack of 3x3 conv+ReLU encoder layers followed by a
/// 3x3 conv+ReLU and a 1x1 classifier head, with logits upsampled back to
/// input resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder: Vec<ConvSpec>,
    pub decoder_hidden: usize,
}

impl Arch {
    /// Default desk-scale network: total stride 4, feature width 64.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            encoder: vec![
                ConvSpec { out_channels: 32, stride: 2 },
                ConvSpec { out_channels: 32, stride: 1 },
                ConvSpec { out_channels: 64, stride: 2 },
                ConvSpec { out_channels: 64, stride: 1 },
            ],
            decoder_hidden: 64,
        }
    }

    /// Narrow variant for gradient probing; under 500 parameters for C=3.
    pub fn probe(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            encoder: vec![
                ConvSpec { out_channels: 4, stride: 2 },
                ConvSpec { out_channels: 4, stride: 2 },
            ],
            decoder_hidden: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be at least 2"));
        }
        if self.in_channels == 0 || self.decoder_hidden == 0 {
            return Err(Error::validation("channel counts must be positive"));
        }
        if self.encoder.is_empty() {
            return Err(Error::validation("encoder needs at least one layer"));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.out_channels == 0 {
                return Err(Error::validation(format!(
                    "encoder layer {i} has zero channels"
                )));
            }
            if l.stride == 0 {
                return Err(Error::validation(format!("encoder layer {i} has zero stride")));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.encoder.iter().map(|l| l.stride).product()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().expect("validated non-empty").out_channels
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.in_channels;
        for l in &self.encoder {
            total += l.out_channels * c_in * 9 + l.out_channels;
            c_in = l.out_channels;
        }
        total += self.decoder_hidden * c_in * 9 + self.decoder_hidden;
        total += self.num_classes * self.decoder_hidden + self.num_classes;
        total
    }
}

/// Student (or teacher) parameters: named tensors in a fixed order. Names
/// with the `enc` prefix form the encoder; `dec`/`head` form the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModelParams {
    pub arch: Arch,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl SegModelParams {
    /// Index of the first decoder tensor within `tensors`.
    pub fn decoder_start(&self) -> usize {
        2 * self.arch.encoder.len()
    }
}

/// EMA shadow of the student. Never receives gradients; it only tracks the
/// student through [`ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: SegModelParams,
    pub alpha: f64,
}

impl TeacherState {
    /// Starts the teacher as an exact copy of the student.
    pub fn from_student(student: &SegModelParams, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::validation("ema alpha must be in [0, 1]"));
        }
        Ok(Self {
            params: student.clone(),
            alpha,
        })
    }
}

/// He-normal initialization, deterministic in `seed`.
pub fn init_model(arch: &Arch, seed: u64) -> Result<SegModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: Vec<(String, ArrayD<f64>)> = Vec::new();
    let mut c_in = arch.in_channels;
    for (i, l) in arch.encoder.iter().enumerate() {
        tensors.push((format!("enc{i}.w"), conv_init(l.out_channels, c_in, 3, &mut rng)));
        tensors.push((format!("enc{i}.b"), ArrayD::zeros(IxDyn(&[l.out_channels]))));
        c_in = l.out_channels;
    }
    tensors.push(("dec.w".into(), conv_init(arch.decoder_hidden, c_in, 3, &mut rng)));
    tensors.push(("dec.b".into(), ArrayD::zeros(IxDyn(&[arch.decoder_hidden]))));
    tensors.push((
        "head.w".into(),
        conv_init(arch.num_classes, arch.decoder_hidden, 1, &mut rng),
    ));
    tensors.push(("head.b".into(), ArrayD::zeros(IxDyn(&[arch.num_classes]))));
    Ok(SegModelParams {
        arch: arch.clone(),
        tensors,
    })
}

fn conv_init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| std * randn(rng))
}

fn check_input(arch: &Arch, images: &ImageBatch) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if c != arch.in_channels {
        return Err(Error::validation(format!(
            "input has {c} channels, expected {}",
            arch.in_channels
        )));
    }
    let s = arch.stride();
    if h % s != 0 || w % s != 0 {
        return Err(Error::validation(format!(
            "input {h}x{w} is not divisible by the total stride {s}"
        )));
    }
    Ok(())
}

fn tensor4<'a>(params: &'a SegModelParams, idx: usize) -> Array4<f64> {
    params.tensors[idx]
        .1
        .view()
        .into_dimensionality::<Ix4>()
        .expect("conv weight is rank 4")
        .to_owned()
}

fn tensor1<'a>(params: &'a SegModelParams, idx: usize) -> Array1<f64> {
    params.tensors[idx]
        .1
        .view()
        .into_dimensionality::<Ix1>()
        .expect("bias is rank 1")
        .to_owned()
}

/// Inference-path encoder: conv 3x3 + ReLU per layer.
pub fn encode(params: &SegModelParams, images: &ImageBatch) -> Result<FeatureMap> {
    check_input(&params.arch, images)?;
    let mut x = images.clone();
    for i in 0..params.arch.encoder.len() {
        let w = tensor4(params, 2 * i);
        let b = tensor1(params, 2 * i + 1);
        x = kernels::conv2d_forward(&x, &w, &b, params.arch.encoder[i].stride, 1);
        x.mapv_inplace(|v| v.max(0.0));
    }
    Ok(x)
}

/// Inference-path decoder: conv 3x3 + ReLU, 1x1 head, bilinear upsample of
/// the logits back to input resolution.
pub fn decode(params: &SegModelParams, feature: &FeatureMap) -> Result<LogitMap> {
    let (_, d, fh, fw) = feature.dim();
    if d != params.arch.feature_dim() {
        return Err(Error::validation(format!(
            "feature has {d} channels, expected {}",
            params.arch.feature_dim()
        )));
    }
    let ds = params.decoder_start();
    let w = tensor4(params, ds);
    let b = tensor1(params, ds + 1);
    let mut x = kernels::conv2d_forward(feature, &w, &b, 1, 1);
    x.mapv_inplace(|v| v.max(0.0));
    let w = tensor4(params, ds + 2);
    let b = tensor1(params, ds + 3);
    let x = kernels::conv2d_forward(&x, &w, &b, 1, 0);
    let s = params.arch.stride();
    Ok(kernels::upsample_bilinear(&x, fh * s, fw * s))
}

/// Per-pixel channel softmax.
pub fn predict_probs(logits: &LogitMap) -> Result<ProbMap> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("logits contain non-finite values"));
    }
    Ok(kernels::softmax_channels(logits))
}

/// Parameter leaves registered on a tape, aligned with
/// `SegModelParams::tensors`.
pub struct TapeParams {
    pub vars: Vec<Var>,
}

pub fn params_onto_tape(tape: &mut Tape, params: &SegModelParams) -> TapeParams {
    let vars = params
        .tensors
        .iter()
        .map(|(_, t)| tape.param(t.clone()))
        .collect();
    TapeParams { vars }
}

/// Training-path encoder on the tape; mirrors [`encode`].
pub fn encode_on_tape(
    tape: &mut Tape,
    arch: &Arch,
    tp: &TapeParams,
    images: Var,
) -> Var {
    let mut x = images;
    for (i, l) in arch.encoder.iter().enumerate() {
        let c = tape.conv2d(x, tp.vars[2 * i], tp.vars[2 * i + 1], l.stride, 1);
        x = tape.relu(c);
    }
    x
}

/// Training-path decoder on the tape; mirrors [`decode`].
pub fn decode_on_tape(tape: &mut Tape, arch: &Arch, tp: &TapeParams, feature: Var) -> Var {
    let ds = 2 * arch.encoder.len();
    let c = tape.conv2d(feature, tp.vars[ds], tp.vars[ds + 1], 1, 1);
    let r = tape.relu(c);
    let logits = tape.conv2d(r, tp.vars[ds + 2], tp.vars[ds + 3], 1, 0);
    let shape = tape.value(logits).shape().to_vec();
    let s = arch.stride();
    tape.upsample_bilinear(logits, shape[2] * s, shape[3] * s)
}

/// EMA update, elementwise: teacher = alpha * teacher + (1 - alpha) * student.
pub fn ema_update(teacher: &mut TeacherState, student: &SegModelParams) -> Result<()> {
    if teacher.params.tensors.len() != student.tensors.len() {
        return Err(Error::validation("teacher/student tensor counts differ"));
    }
    let alpha = teacher.alpha;
    for ((tn, tt), (sn, st)) in teacher
        .params
        .tensors
        .iter_mut()
        .zip(student.tensors.iter())
    {
        if tn != sn || tt.shape() != st.shape() {
            return Err(Error::validation(format!(
                "teacher tensor {tn} does not match student tensor {sn}"
            )));
        }
        tt.zip_mut_with(st, |t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_noise_batch(b: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, h, w), |_| randn(&mut rng))
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Arch::toy(4);
        let a = init_model(&arch, 5).unwrap();
        let b = init_model(&arch, 5).unwrap();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for ((na, ta), (nb, tb)) in a.tensors.iter().zip(b.tensors.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        let c = init_model(&arch, 6).unwrap();
        assert_ne!(a.tensors[0].1, c.tensors[0].1);
    }

    #[test]
    fn logits_have_class_channels_and_finite_values() {
        let arch = Arch::toy(5);
        let params = init_model(&arch, 1).unwrap();
        let images = unit_noise_batch(2, 32, 32, 2).mapv(|v| v.clamp(0.0, 1.0));
        let feat = encode(&params, &images).unwrap();
        assert_eq!(feat.dim(), (2, 64, 8, 8));
        let logits = decode(&params, &feat).unwrap();
        assert_eq!(logits.dim(), (2, 5, 32, 32));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn initial_logit_std_is_sane_on_unit_noise() {
        let arch = Arch::toy(4);
        let params = init_model(&arch, 7).unwrap();
        let images = unit_noise_batch(2, 32, 32, 3);
        let logits = decode(&params, &encode(&params, &images).unwrap()).unwrap();
        let mean = logits.mean().unwrap();
        let std = logits.mapv(|v| (v - mean) * (v - mean)).mean().unwrap().sqrt();
        assert!(std > 0.01 && std < 10.0, "logit std {std}");
    }

    #[test]
    fn encode_shape_follows_stride() {
        let arch = Arch::toy(2);
        assert_eq!(arch.stride(), 4);
        let params = init_model(&arch, 2).unwrap();
        let images = unit_noise_batch(1, 64, 64, 4);
        let feat = encode(&params, &images).unwrap();
        assert_eq!(feat.dim(), (1, 64, 16, 16));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let arch = Arch::toy(2);
        let params = init_model(&arch, 2).unwrap();
        let images = unit_noise_batch(1, 30, 64, 4);
        assert!(encode(&params, &images).is_err());
    }

    #[test]
    fn batched_encode_equals_per_item_encode() {
        let arch = Arch::toy(3);
        let params = init_model(&arch, 9).unwrap();
        let images = unit_noise_batch(3, 16, 16, 10);
        let batched = encode(&params, &images).unwrap();
        for i in 0..3 {
            let single = images.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
            let f = encode(&params, &single).unwrap();
            let diff = (&f.index_axis(Axis(0), 0) - &batched.index_axis(Axis(0), i))
                .mapv(f64::abs)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(diff == 0.0, "item {i} differs by {diff}");
        }
    }

    #[test]
    fn decode_of_zero_feature_is_spatially_constant() {
        let arch = Arch::toy(4);
        let params = init_model(&arch, 11).unwrap();
        let feat = Array4::<f64>::zeros((1, 64, 8, 8));
        let logits = decode(&params, &feat).unwrap();
        for c in 0..4 {
            let v0 = logits[(0, c, 0, 0)];
            assert!(logits
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), c)
                .iter()
                .all(|&v| (v - v0).abs() < 1e-12));
        }
    }

    #[test]
    fn predict_probs_contract() {
        let arch = Arch::toy(3);
        let params = init_model(&arch, 12).unwrap();
        let images = unit_noise_batch(1, 16, 16, 13).mapv(|v| v.clamp(0.0, 1.0));
        let logits = decode(&params, &encode(&params, &images).unwrap()).unwrap();
        let probs = predict_probs(&logits).unwrap();
        let (b, c, h, w) = probs.dim();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (0..c).map(|ci| probs[(bi, ci, y, x)]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    let arg_p = (0..c)
                        .max_by(|&i, &j| {
                            probs[(bi, i, y, x)].partial_cmp(&probs[(bi, j, y, x)]).unwrap()
                        })
                        .unwrap();
                    let arg_l = (0..c)
                        .max_by(|&i, &j| {
                            logits[(bi, i, y, x)].partial_cmp(&logits[(bi, j, y, x)]).unwrap()
                        })
                        .unwrap();
                    assert_eq!(arg_p, arg_l);
                }
            }
        }
        let bad = logits.mapv(|v| v * f64::INFINITY);
        assert!(predict_probs(&bad).is_err());
    }

    #[test]
    fn ema_single_update_value() {
        let arch = Arch::probe(3);
        let mut student = init_model(&arch, 1).unwrap();
        for (_, t) in student.tensors.iter_mut() {
            t.fill(0.0);
        }
        let mut teacher = TeacherState::from_student(&student, 0.996).unwrap();
        for (_, t) in teacher.params.tensors.iter_mut() {
            t.fill(1.0);
        }
        ema_update(&mut teacher, &student).unwrap();
        for (_, t) in &teacher.params.tensors {
            assert!(t.iter().all(|&v| (v - 0.996).abs() < 1e-15));
        }
    }

    #[test]
    fn ema_alpha_zero_copies_student() {
        let arch = Arch::probe(2);
        let student = init_model(&arch, 3).unwrap();
        let other = init_model(&arch, 4).unwrap();
        let mut teacher = TeacherState::from_student(&other, 0.0).unwrap();
        ema_update(&mut teacher, &student).unwrap();
        for ((_, t), (_, s)) in teacher.params.tensors.iter().zip(student.tensors.iter()) {
            assert_eq!(t, s);
        }
    }

    #[test]
    fn ema_matches_geometric_closed_form() {
        for alpha in [0.0, 0.5, 0.996] {
            let arch = Arch::probe(2);
            let student = init_model(&arch, 5).unwrap();
            let init = init_model(&arch, 6).unwrap();
            let mut teacher = TeacherState::from_student(&init, alpha).unwrap();
            let k = 10;
            for _ in 0..k {
                ema_update(&mut teacher, &student).unwrap();
            }
            let ak = alpha.powi(k);
            for (i, (_, t)) in teacher.params.tensors.iter().enumerate() {
                let expect = init.tensors[i].1.mapv(|v| v * ak)
                    + student.tensors[i].1.mapv(|v| v * (1.0 - ak));
                let diff = (t - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(diff < 1e-10, "alpha {alpha} tensor {i} diff {diff}");
            }
        }
    }

    #[test]
    fn teacher_stays_in_envelope_of_student_iterates() {
        let arch = Arch::probe(2);
        let mut student = init_model(&arch, 8).unwrap();
        let init = init_model(&arch, 9).unwrap();
        let mut teacher = TeacherState::from_student(&init, 0.9).unwrap();
        let mut lo: Vec<ArrayD<f64>> = init.tensors.iter().map(|(_, t)| t.clone()).collect();
        let mut hi = lo.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..25 {
            for (i, (_, t)) in student.tensors.iter_mut().enumerate() {
                t.mapv_inplace(|v| v + 0.1 * (rng.random::<f64>() - 0.5));
                lo[i].zip_mut_with(t, |l, &s| *l = l.min(s));
                hi[i].zip_mut_with(t, |h, &s| *h = h.max(s));
            }
            ema_update(&mut teacher, &student).unwrap();
            for (i, (_, t)) in teacher.params.tensors.iter().enumerate() {
                for ((&v, &l), &h) in t.iter().zip(lo[i].iter()).zip(hi[i].iter()) {
                    assert!(v >= l - 1e-12 && v <= h + 1e-12);
                }
            }
        }
    }

    #[test]
    fn ema_rejects_mismatched_shapes() {
        let student = init_model(&Arch::probe(2), 1).unwrap();
        let other = init_model(&Arch::probe(3), 1).unwrap();
        let mut teacher = TeacherState::from_student(&other, 0.5).unwrap();
        assert!(ema_update(&mut teacher, &student).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward_exactly() {
        let arch = Arch::toy(3);
        let params = init_model(&arch, 14).unwrap();
        let images = unit_noise_batch(2, 16, 16, 15).mapv(|v| v.clamp(0.0, 1.0));
        let feat_plain = encode(&params, &images).unwrap();
        let logits_plain = decode(&params, &feat_plain).unwrap();

        let mut tape = Tape::new();
        let tp = params_onto_tape(&mut tape, &params);
        let x = tape.constant(images.clone());
        let feat = encode_on_tape(&mut tape, &arch, &tp, x);
        let logits = decode_on_tape(&mut tape, &arch, &tp, feat);
        assert_eq!(tape.value(feat), &feat_plain.into_dyn());
        assert_eq!(tape.value(logits), &logits_plain.into_dyn());
    }

    #[test]
    fn probe_arch_stays_under_budget() {
        let arch = Arch::probe(3);
        assert!(arch.param_count() <= 500, "{} params", arch.param_count());
    }

    #[test]
    fn decoder_weight_gradient_matches_finite_differences() {
        let arch = Arch::probe(3);
        let params = init_model(&arch, 16).unwrap();
        let images = unit_noise_batch(1, 8, 8, 17).mapv(|v| v.clamp(0.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let probe =
            Array4::from_shape_fn((1, 3, 8, 8), |_| rng.random::<f64>() - 0.5).into_dyn();

        let loss_of = |p: &SegModelParams| -> f64 {
            let logits = decode(p, &encode(p, &images).unwrap()).unwrap();
            (&logits.into_dyn() * &probe).sum()
        };

        let mut tape = Tape::new();
        let tp = params_onto_tape(&mut tape, &params);
        let x = tape.constant(images.clone());
        let feat = encode_on_tape(&mut tape, &arch, &tp, x);
        let logits = decode_on_tape(&mut tape, &arch, &tp, feat);
        let weighted = tape.mul_const(logits, probe.clone());
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss);

        let ds = params.decoder_start();
        let gw = grads.wrt(tp.vars[ds]).clone();
        let h = 1e-5;
        for flat in [0usize, 7, 19, 33] {
            let mut pp = params.clone();
            pp.tensors[ds].1.as_slice_mut().unwrap()[flat] += h;
            let mut pm = params.clone();
            pm.tensors[ds].1.as_slice_mut().unwrap()[flat] -= h;
            let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
            let an = gw.as_slice().unwrap()[flat];
            let rel = (fd - an).abs() / an.abs().max(1e-8);
            assert!(rel < 1e-4, "flat {flat}: fd {fd} analytic {an} rel {rel}");
        }
    }
}
