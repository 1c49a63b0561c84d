//! Training objectives: waveform/spectral reconstruction, hinge adversarial
//! terms with feature matching over a multi-resolution mel discriminator
//! ensemble, the masked-frame objective, and the depth prediction objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::DiscConfig;
use crate::error::{CodecError, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::spectral::{mel_and_log_mel_graph, stft_mag_graph, SpectrogramConfig, WindowKind};

const LEAKY_SLOPE: f64 = 0.1;

/// Mean absolute error between two waveforms of equal length.
pub fn recon_time_loss(x_hat: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(x_hat.shape(), x.shape(), "time loss: length mismatch");
    x_hat.sub(x).abs().mean_all()
}

/// Split `bins` frequency bins into `subbands` contiguous bands. The
/// remainder is spread one bin at a time over the leading bands, so sizes
/// differ by at most one.
pub fn subband_sizes(bins: usize, subbands: usize) -> Result<Vec<usize>> {
    if subbands == 0 || subbands > bins {
        return Err(CodecError::Invalid(format!(
            "cannot split {bins} frequency bins into {subbands} bands"
        )));
    }
    let base = bins / subbands;
    let extra = bins % subbands;
    Ok((0..subbands)
        .map(|i| base + usize::from(i < extra))
        .collect())
}

/// Spectral reconstruction: mean absolute magnitude error within each
/// frequency band, averaged over bands. Band-wise averaging keeps quiet
/// high-frequency bands from being drowned out by low-frequency energy.
pub fn recon_freq_loss(
    x_hat: &Tensor,
    x: &Tensor,
    cfg: &SpectrogramConfig,
    subbands: usize,
) -> Result<Tensor> {
    let sizes = subband_sizes(cfg.bins(), subbands)?;
    let mag_hat = stft_mag_graph(x_hat, cfg)?;
    let mag = stft_mag_graph(x, cfg)?;
    let diff = mag_hat.sub(&mag).abs();
    let mut acc: Option<Tensor> = None;
    let mut start = 0;
    for &size in &sizes {
        let band = diff.narrow(1, start, size).mean_all();
        acc = Some(match acc {
            Some(a) => a.add(&band),
            None => band,
        });
        start += size;
    }
    Ok(acc.unwrap().scale(1.0 / subbands as f64))
}

/// One spectrogram discriminator: mel and log-mel spectrograms stacked as a
/// two-channel image, four strided 3x3 convolutions, and a one-channel
/// logit head. Returns the logits and the four post-activation feature maps.
pub struct Discriminator {
    convs: Vec<Conv2d>,
    out: Conv2d,
    spec: SpectrogramConfig,
    sample_rate: u32,
}

impl Discriminator {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        sample_rate: u32,
        hop: usize,
        fft_mult: usize,
        mel_bins: usize,
        hidden: usize,
    ) -> Self {
        let spec = SpectrogramConfig {
            fft_size: hop * fft_mult,
            hop,
            window: WindowKind::Hann,
            mel_bins,
            fmin: 0.0,
            fmax: None,
        };
        let widths = [
            (hidden / 8).max(1),
            (hidden / 4).max(1),
            (hidden / 2).max(1),
            hidden,
        ];
        let strides = [(2, 2), (2, 2), (2, 2), (1, 1)];
        let mut convs = Vec::new();
        let mut c_in = 2;
        for (i, (&w, &s)) in widths.iter().zip(strides.iter()).enumerate() {
            convs.push(Conv2d::new(
                ps,
                &format!("{prefix}.conv{i}"),
                rng,
                c_in,
                w,
                (3, 3),
                s,
                (1, 1),
            ));
            c_in = w;
        }
        let out = Conv2d::new(ps, &format!("{prefix}.out"), rng, c_in, 1, (3, 3), (1, 1), (1, 1));
        Discriminator { convs, out, spec, sample_rate }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let both = mel_and_log_mel_graph(x, self.sample_rate, &self.spec)?;
        let frames = both.shape()[0];
        let mel = self.spec.mel_bins;
        // (frames, 2 * mel) laid out [mel | log-mel] -> (frames, mel, 2).
        let img = both.reshape(&[frames, 2, mel]).permute(&[0, 2, 1]);
        let mut h = img;
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
            feats.push(h.clone());
        }
        let logits = self.out.forward(&h);
        Ok((logits, feats))
    }
}

/// The full discriminator bank, one member per STFT resolution.
pub struct DiscriminatorEnsemble {
    pub members: Vec<Discriminator>,
}

impl DiscriminatorEnsemble {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: &DiscConfig,
        sample_rate: u32,
    ) -> Self {
        let members = cfg
            .hops
            .iter()
            .zip(cfg.hidden.iter())
            .enumerate()
            .map(|(i, (&hop, &hidden))| {
                Discriminator::new(
                    ps,
                    &format!("{prefix}.m{i}"),
                    rng,
                    sample_rate,
                    hop,
                    cfg.fft_mult,
                    cfg.mel_bins,
                    hidden,
                )
            })
            .collect();
        DiscriminatorEnsemble { members }
    }

    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
        self.members.iter().map(|m| m.forward(x)).collect()
    }
}

fn hinge_real(logits: &Tensor) -> Tensor {
    // mean(relu(1 - D(x)))
    logits.scale(-1.0).add_scalar(1.0).relu().mean_all()
}

fn hinge_fake(logits: &Tensor) -> Tensor {
    // mean(relu(1 + D(x_hat)))
    logits.add_scalar(1.0).relu().mean_all()
}

/// Hinge discriminator objective averaged over ensemble members:
/// `(1/K) sum_k [mean(relu(1 - D_k(x))) + mean(relu(1 + D_k(x_hat)))]`.
pub fn disc_loss(real_logits: &[Tensor], fake_logits: &[Tensor]) -> Tensor {
    assert_eq!(real_logits.len(), fake_logits.len(), "disc loss: member count");
    assert!(!real_logits.is_empty(), "disc loss: empty ensemble");
    let k = real_logits.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        let term = hinge_real(r).add(&hinge_fake(f));
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.unwrap().scale(1.0 / k)
}

/// Hinge generator objective: `(1/K) sum_k mean(relu(1 - D_k(x_hat)))`.
pub fn gen_adv_loss(fake_logits: &[Tensor]) -> Tensor {
    assert!(!fake_logits.is_empty(), "generator adversarial loss: empty ensemble");
    let k = fake_logits.len() as f64;
    let mut acc: Option<Tensor> = None;
    for f in fake_logits {
        let term = hinge_real(f);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.unwrap().scale(1.0 / k)
}

/// Feature matching: mean absolute difference between real and generated
/// feature maps, averaged over maps and members.
pub fn feature_match_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Tensor {
    assert_eq!(real.len(), fake.len(), "feature match: member count");
    assert!(!real.is_empty(), "feature match: empty ensemble");
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (r_maps, f_maps) in real.iter().zip(fake) {
        assert_eq!(r_maps.len(), f_maps.len(), "feature match: map count");
        for (r, f) in r_maps.iter().zip(f_maps) {
            let term = f.sub(&r.stop_grad()).abs().mean_all();
            acc = Some(match acc {
                Some(a) => a.add(&term),
                None => term,
            });
            count += 1;
        }
    }
    acc.expect("feature match: no feature maps").scale(1.0 / count as f64)
}

/// Masked-frame objective. With `mse_masked` the loss is the mean squared
/// error over masked rows only; otherwise it is the mean absolute error over
/// every frame (compatibility mode).
pub fn mae_loss(pred: &Tensor, target: &Tensor, mask: &[bool], mse_masked: bool) -> Tensor {
    assert_eq!(pred.shape(), target.shape(), "masked loss: shape mismatch");
    assert_eq!(pred.shape()[0], mask.len(), "masked loss: mask length");
    if mse_masked {
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        if idx.is_empty() {
            return Tensor::scalar_const(0.0);
        }
        let p = pred.gather_rows(&idx);
        let t = target.gather_rows(&idx);
        p.sub(&t).sqr().mean_all()
    } else {
        pred.sub(target).abs().mean_all()
    }
}

/// Depth prediction objective: mean squared error between predicted and
/// actual layer embeddings; targets never carry gradient.
pub fn ar_loss(pred: &Tensor, target: &Tensor) -> Tensor {
    assert_eq!(pred.shape(), target.shape(), "depth loss: shape mismatch");
    pred.sub(&target.stop_grad()).sqr().mean_all()
}

/// Scalar loss components of one generator step, as logged.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GenLossParts {
    pub l_adv: f64,
    pub l_feat: f64,
    pub l_rec: f64,
    pub l_mae: f64,
    pub l_ar: f64,
    pub l_commit: f64,
}

/// Combine loss parts into the training objective:
/// `l_adv + l_feat + l_rec + lambda_mae * l_mae + lambda_ar * l_ar + l_commit`.
/// (`l_commit` already includes its own weight and is zero when disabled.)
pub fn total_generator_loss(parts: &GenLossParts, lambda_mae: f64, lambda_ar: f64) -> Result<f64> {
    let total = parts.l_adv
        + parts.l_feat
        + parts.l_rec
        + lambda_mae * parts.l_mae
        + lambda_ar * parts.l_ar
        + parts.l_commit;
    if !total.is_finite() {
        return Err(CodecError::Invalid(format!(
            "non-finite generator loss: {parts:?}"
        )));
    }
    Ok(total)
}

/// Graph-side counterpart of [`total_generator_loss`]; same weighting.
pub fn weighted_total(
    l_adv: &Tensor,
    l_feat: &Tensor,
    l_rec: &Tensor,
    l_mae: &Tensor,
    l_ar: &Tensor,
    l_commit: &Tensor,
    lambda_mae: f64,
    lambda_ar: f64,
) -> Tensor {
    l_adv
        .add(l_feat)
        .add(l_rec)
        .add(&l_mae.scale(lambda_mae))
        .add(&l_ar.scale(lambda_ar))
        .add(l_commit)
}

/// One training-log line; serialized as JSON per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: u8,
    #[serde(flatten)]
    pub parts: GenLossParts,
    pub l_disc: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    #[test]
    fn time_loss_matches_hand_sum() {
        let a = leaf(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let b = leaf(&[4], vec![0.0, -1.0, 1.5, 3.0]);
        let expect = (1.0 + 1.0 + 1.0 + 0.0) / 4.0;
        assert!((recon_time_loss(&a, &b).scalar() - expect).abs() < 1e-12);
    }

    #[test]
    fn subband_sizes_spread_remainder() {
        assert_eq!(subband_sizes(129, 4).unwrap(), vec![33, 32, 32, 32]);
        assert_eq!(subband_sizes(5, 2).unwrap(), vec![3, 2]);
        assert_eq!(subband_sizes(8, 4).unwrap(), vec![2, 2, 2, 2]);
        assert!(subband_sizes(3, 4).is_err());
    }

    #[test]
    fn freq_loss_matches_scalar_oracle() {
        let cfg = SpectrogramConfig {
            fft_size: 8,
            hop: 4,
            window: WindowKind::Hann,
            mel_bins: 4,
            fmin: 0.0,
            fmax: None,
        };
        let mut r = rng(3);
        let n = 24;
        let xs: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = leaf(&[n], xs.clone());
        let y = leaf(&[n], ys.clone());
        let got = recon_freq_loss(&x, &y, &cfg, 2).unwrap().scalar();

        // Oracle: plain magnitudes, explicit band partition [3, 2], mean
        // absolute difference per band, then mean across bands.
        let mx = crate::spectral::magnitude(&crate::spectral::stft(&xs, &cfg).unwrap());
        let my = crate::spectral::magnitude(&crate::spectral::stft(&ys, &cfg).unwrap());
        let frames = mx.nrows();
        let mut bands = [0.0f64; 2];
        for (bi, range) in [(0, 0..3), (1, 3..5)] {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for t in 0..frames {
                for b in range.clone() {
                    sum += (mx[[t, b]] - my[[t, b]]).abs();
                    cnt += 1;
                }
            }
            bands[bi] = sum / cnt as f64;
        }
        let expect = (bands[0] + bands[1]) / 2.0;
        assert!(
            (got - expect).abs() < 1e-9,
            "freq loss {got} vs oracle {expect}"
        );
    }

    #[test]
    fn hinge_losses_match_hand_computation() {
        // Two members with known logits.
        let real = vec![leaf(&[2], vec![0.5, 2.0]), leaf(&[1], vec![-1.0])];
        let fake = vec![leaf(&[2], vec![-0.5, 1.5]), leaf(&[1], vec![0.25])];
        // member 0: real hinge mean(relu(1-0.5), relu(1-2)) = 0.25
        //           fake hinge mean(relu(0.5), relu(2.5)) = 1.5
        // member 1: real hinge relu(2) = 2, fake hinge relu(1.25) = 1.25
        let expect_d = ((0.25 + 1.5) + (2.0 + 1.25)) / 2.0;
        assert!((disc_loss(&real, &fake).scalar() - expect_d).abs() < 1e-12);
        // generator: member 0 mean(relu(1.5), relu(-0.5)) = 0.75;
        //            member 1 relu(0.75) = 0.75
        let expect_g = (0.75 + 0.75) / 2.0;
        assert!((gen_adv_loss(&fake).scalar() - expect_g).abs() < 1e-12);
    }

    #[test]
    fn feature_match_matches_hand_computation() {
        let real = vec![vec![leaf(&[2], vec![1.0, 2.0]), leaf(&[1], vec![0.0])]];
        let fake = vec![vec![leaf(&[2], vec![2.0, 0.0]), leaf(&[1], vec![3.0])]];
        // maps: mean(|1|, |2|) = 1.5 and |3| = 3 -> mean = 2.25
        assert!((feature_match_loss(&real, &fake).scalar() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_uses_only_masked_rows() {
        let pred = leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let target = leaf(&[3, 2], vec![0.0, 0.0, 3.0, 4.0, 4.0, 8.0]);
        let mask = [true, false, true];
        // masked rows 0 and 2: squared errors (1,4) and (1,4) -> mean 2.5
        let got = mae_loss(&pred, &target, &mask, true).scalar();
        assert!((got - 2.5).abs() < 1e-12);
        // compatibility mode: mean |diff| over all six entries
        let all = (1.0 + 2.0 + 0.0 + 0.0 + 1.0 + 2.0) / 6.0;
        let got = mae_loss(&pred, &target, &mask, false).scalar();
        assert!((got - all).abs() < 1e-12);
        // no masked rows -> exactly zero
        assert_eq!(mae_loss(&pred, &target, &[false; 3], true).scalar(), 0.0);
    }

    #[test]
    fn ar_loss_blocks_target_gradient() {
        let pred = leaf(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let target = leaf(&[2, 1, 2], vec![0.0, 0.0, 0.0, 0.0]);
        let loss = ar_loss(&pred, &target);
        assert!((loss.scalar() - (1.0 + 4.0 + 9.0 + 16.0) / 4.0).abs() < 1e-12);
        loss.backward();
        assert!(target.grad().is_none(), "targets must not receive gradient");
        assert!(pred.grad().is_some());
    }

    #[test]
    fn total_weighting_reference_point() {
        let parts = GenLossParts { l_mae: 2.0, l_ar: 5.0, ..Default::default() };
        let total = total_generator_loss(&parts, 0.5, 0.1).unwrap();
        assert_eq!(total, 1.5);
        let bad = GenLossParts { l_rec: f64::NAN, ..Default::default() };
        assert!(total_generator_loss(&bad, 0.5, 0.1).is_err());
    }

    #[test]
    fn graph_total_matches_scalar_total() {
        let parts = GenLossParts {
            l_adv: 0.25,
            l_feat: 1.5,
            l_rec: 0.75,
            l_mae: 2.0,
            l_ar: 5.0,
            l_commit: 0.125,
        };
        let t = weighted_total(
            &Tensor::scalar_const(parts.l_adv),
            &Tensor::scalar_const(parts.l_feat),
            &Tensor::scalar_const(parts.l_rec),
            &Tensor::scalar_const(parts.l_mae),
            &Tensor::scalar_const(parts.l_ar),
            &Tensor::scalar_const(parts.l_commit),
            0.5,
            0.1,
        );
        assert!(
            (t.scalar() - total_generator_loss(&parts, 0.5, 0.1).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn ensemble_shapes_and_gradients() {
        let cfg = DiscConfig {
            hidden: vec![8, 16],
            hops: vec![8, 16],
            fft_mult: 2,
            mel_bins: 4,
        };
        let mut ps = ParamSet::new();
        let mut r = rng(11);
        let ens = DiscriminatorEnsemble::new(&mut ps, "disc", &mut r, &cfg, 8000);
        assert_eq!(ens.members.len(), 2);
        let n = 128;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.21).sin() * 0.5).collect();
        let xt = Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[n]), x).unwrap());
        let outs = ens.forward_all(&xt).unwrap();
        for (logits, feats) in &outs {
            assert_eq!(feats.len(), 4, "one feature map per strided conv");
            assert_eq!(logits.shape()[2], 1, "single-channel logits");
        }
        // Gradient flows from the generator objective back to the waveform.
        let fake_logits: Vec<Tensor> = outs.iter().map(|(l, _)| l.clone()).collect();
        let loss = gen_adv_loss(&fake_logits);
        loss.backward();
        let g = xt.grad().expect("waveform gradient");
        assert!(g.iter().any(|&v| v != 0.0), "gradient reached the waveform");
    }

    #[test]
    fn masked_loss_gradcheck() {
        use crate::autodiff::gradcheck;
        let mut r = rng(5);
        let pred = Tensor::leaf(crate::nn::init_uniform(&mut r, &[4, 3], 1.0));
        let target = Tensor::constant(crate::nn::init_uniform(&mut r, &[4, 3], 1.0));
        let mask = [true, false, true, true];
        gradcheck::check(
            &[pred.clone()],
            |ins| mae_loss(&ins[0], &target, &mask, true),
            1e-5,
            1e-5,
            1e-9,
        )
        .unwrap();
    }

    #[test]
    fn ensemble_is_deterministic() {
        let build = || {
            let cfg = DiscConfig {
                hidden: vec![8],
                hops: vec![8],
                fft_mult: 2,
                mel_bins: 4,
            };
            let mut ps = ParamSet::new();
            let mut r = rng(17);
            let ens = DiscriminatorEnsemble::new(&mut ps, "disc", &mut r, &cfg, 8000);
            let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.13).cos()).collect();
            let xt = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[64]), x).unwrap());
            ens.forward_all(&xt).unwrap()[0].0.to_array()
        };
        assert_eq!(build(), build());
    }
}
