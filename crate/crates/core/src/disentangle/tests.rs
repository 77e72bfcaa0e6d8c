use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Target;
use crate::seqmodels::TcnConfig;
use crate::autograd::check::max_param_grad_error;

fn tiny_cfg(s: usize) -> SteerConfig {
    SteerConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::Tcn,
            tcn: TcnConfig { blocks: 2, channels: 8, fc: vec![8], dropout: 0.0, kernel_size: 2 },
            scale: 1.0,
            ..Default::default()
        },
        hyper: SteerHyperparams { nz: 4, sensitive_dim: s, ..Default::default() },
        attributes: ["sex", "age", "race"][..s].iter().map(|a| a.to_string()).collect(),
        decoder_blocks: 1,
        disc_width: 8,
        disc_layers: 3,
        disc_slope: 0.2,
        disc_steps: 1,
        predictor_hidden: 4,
    }
}

fn sample(rng: &mut ChaCha8Rng, id: usize, len: usize, m: usize) -> TaskSample {
    let x = Array2::from_shape_fn((m, len), |_| rng.random_range(-1.0..1.0));
    let y = (0..len).map(|t| 5.0 + x[[0, t]]).collect();
    TaskSample { record_id: format!("r{id}"), x, target: Target::Sofa(y), statics: vec![] }
}

fn toy_set(n: usize, lens: &[usize], m: usize, s: usize, seed: u64) -> SteerSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<TaskSample> = (0..n).map(|i| sample(&mut rng, i, lens[i % lens.len()], m)).collect();
    let sensitive = (0..n).map(|i| (0..s).map(|j| if (i + j) % 5 == 4 { None } else { Some((i + j) % 2 == 0) }).collect()).collect();
    SteerSet { samples, sensitive }
}

#[test]
fn zero_initialised_logvar_heads_give_unit_variance() {
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 0).unwrap();
    let set = toy_set(2, &[6, 4], 3, 1, 0);
    let batch = Batch::from_samples(&set.samples, &[0, 1]);
    for p in model.encode_batch(&batch, &model.zero_noise(&batch)).unwrap() {
        assert!(p.z_logvar.iter().chain(p.b_logvar.iter()).all(|v| *v == 0.0));
        assert_eq!(p.z_sample, p.z_mu);
        assert_eq!(p.b_sample, p.b_mu);
    }
}

#[test]
fn posteriors_ignore_padding() {
    for mode in [LatentMode::PerTimestep, LatentMode::Pooled] {
        let mut cfg = tiny_cfg(1);
        cfg.hyper.latent_mode = mode;
        let model = SteerModel::new(&cfg, Task::Sofa, 3, 1).unwrap();
        let set = toy_set(2, &[4, 9], 3, 1, 1);
        let alone = Batch::from_samples(&set.samples, &[0]);
        let padded = Batch::from_samples(&set.samples, &[0, 1]);
        let a = &model.encode_batch(&alone, &model.zero_noise(&alone)).unwrap()[0];
        let b = &model.encode_batch(&padded, &model.zero_noise(&padded)).unwrap()[0];
        for (x, y) in a.z_mu.iter().chain(a.b_mu.iter()).zip(b.z_mu.iter().chain(b.b_mu.iter())) {
            assert!((x - y).abs() < 1e-12, "{mode:?}");
        }
    }
}

#[test]
fn reparameterization_statistics() {
    let mu = Array2::zeros((1, 100_000));
    let draws = reparameterize(&mu, &Array2::zeros((1, 100_000)), 3);
    let mean = draws.mean().unwrap();
    let var = draws.mapv(|v| (v - mean).powi(2)).mean().unwrap();
    assert!(mean.abs() <= 0.02, "{mean}");
    assert!((var - 1.0).abs() <= 0.05, "{var}");
    assert_eq!(draws, reparameterize(&mu, &Array2::zeros((1, 100_000)), 3));
    let mu = Array2::from_elem((2, 3), 1.5);
    let tight = reparameterize(&mu, &Array2::from_elem((2, 3), -1e6), 4);
    assert!(tight.iter().all(|v| (v - 1.5).abs() < 0.05));
}

#[test]
fn closed_form_kl_examples() {
    assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lv: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(gaussian_kl(&mu, &lv) > 0.0);
    }
}

#[test]
fn elbo_terms_from_values() {
    let x = Array2::from_shape_fn((4, 2), |(t, c)| (t * 2 + c) as f64);
    let part = LatentPartition {
        z_mu: Array2::zeros((4, 2)),
        z_logvar: Array2::zeros((4, 2)),
        b_mu: Array2::zeros((4, 1)),
        b_logvar: Array2::zeros((4, 1)),
        z_sample: Array2::zeros((4, 2)),
        b_sample: Array2::zeros((4, 1)),
    };
    assert_eq!(elbo_terms(&x, &x, &part, &[true; 4], true), (0.0, 0.0));
    let shifted = &x + 1.0;
    let (recon, _) = elbo_terms(&x, &shifted, &part, &[true, true, false, true], false);
    assert_eq!(recon, -0.5 * 6.0);
    let (recon, _) = elbo_terms(&x, &shifted, &part, &[true; 4], true);
    assert_eq!(recon, -0.5 * 8.0 / 4.0);
}

/// Recon and KL of the batched tape path, per record, via the value oracle.
fn oracle_elbo(model: &SteerModel, set: &SteerSet, idx: &[usize]) -> (f64, f64) {
    let batch = Batch::from_samples(&set.samples, idx);
    let noise = model.zero_noise(&batch);
    let mut tape = Tape::new();
    let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
    let x_hat = tape.value(f.x_hat).clone();
    let parts = model.encode_batch(&batch, &noise).unwrap();
    let t = batch.t_max();
    let (mut r, mut k) = (0.0, 0.0);
    for (b, p) in parts.iter().enumerate() {
        let len = batch.lengths[b];
        let x = set.samples[idx[b]].x.t().to_owned();
        let xh = x_hat.slice(s![b * t..b * t + len, ..]).to_owned();
        let (rr, kk) = elbo_terms(&x, &xh, p, &vec![true; len], model.cfg.hyper.scale_elbo_by_t);
        r += rr;
        k += kk;
    }
    (r / idx.len() as f64, k / idx.len() as f64)
}

#[test]
fn batched_elbo_matches_oracle_and_ignores_padding() {
    for scale in [true, false] {
        let mut cfg = tiny_cfg(1);
        cfg.hyper.scale_elbo_by_t = scale;
        let model = SteerModel::new(&cfg, Task::Sofa, 3, 2).unwrap();
        let set = toy_set(2, &[5, 8], 3, 1, 2);
        let breakdown = |idx: &[usize]| {
            let batch = Batch::from_samples(&set.samples, idx);
            model.batch_breakdown(&set, &batch, &model.zero_noise(&batch)).unwrap()
        };
        let (one, two, pair) = (breakdown(&[0]), breakdown(&[1]), breakdown(&[0, 1]));
        let (r, k) = oracle_elbo(&model, &set, &[0, 1]);
        assert!((pair.recon - r).abs() < 1e-9 && (pair.kl - k).abs() < 1e-9);
        assert!((2.0 * pair.recon - one.recon - two.recon).abs() < 1e-9);
        assert!((2.0 * pair.kl - one.kl - two.kl).abs() < 1e-9);
        assert!((pair.total - pair.recombine(&model.cfg.hyper)).abs() < 1e-12);
    }
}

#[test]
fn predictiveness_examples() {
    let mut model = SteerModel::new(&tiny_cfg(3), Task::Sofa, 3, 3).unwrap();
    let set = toy_set(6, &[5], 3, 3, 3);
    let batch = Batch::from_samples(&set.samples, &[0, 1, 2, 3, 4, 5]);
    let noise = model.zero_noise(&batch);
    let pred = |model: &SteerModel| {
        let mut tape = Tape::new();
        let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
        let v = model.predictiveness_var(&mut tape, &model.params, &f, &set, &batch);
        tape.scalar(v)
    };
    for (_, out) in &model.predictors {
        model.params.get_mut(out.w).fill(0.0);
        model.params.get_mut(out.b).fill(0.0);
    }
    assert!((pred(&model) - 3.0 * 0.5f64.ln()).abs() < 1e-12);

    // confident and right on every labelled record of attribute 0 only
    let single = SteerSet {
        samples: set.samples.clone(),
        sensitive: set.sensitive.iter().map(|l| vec![l[0].map(|_| true), None, None]).collect(),
    };
    let out = model.predictors[0].1.clone();
    model.params.get_mut(out.b).assign(&ndarray::arr2(&[[-40.0, 40.0]]));
    let mut tape = Tape::new();
    let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
    let v = model.predictiveness_var(&mut tape, &model.params, &f, &single, &batch);
    assert!(tape.scalar(v).abs() < 1e-30);
}

#[test]
fn predictiveness_is_additive_over_attributes() {
    let model = SteerModel::new(&tiny_cfg(3), Task::Sofa, 3, 4).unwrap();
    let set = toy_set(7, &[5, 6], 3, 3, 4);
    let idx: Vec<usize> = (0..7).collect();
    let batch = Batch::from_samples(&set.samples, &idx);
    let noise = model.zero_noise(&batch);
    let mut tape = Tape::new();
    let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
    let v = model.predictiveness_var(&mut tape, &model.params, &f, &set, &batch);
    let joint = tape.scalar(v);
    let pooled = tape.value(f.pooled_b).clone();
    let mut sum = 0.0;
    for (j, (l0, l1)) in model.predictors.iter().enumerate() {
        // plain forward for attribute j alone
        let h = (pooled.column(j).to_owned().insert_axis(Axis(1)).dot(model.params.get(l0.w)) + model.params.get(l0.b))
            .mapv(|v| v.max(0.0));
        let logits = h.dot(model.params.get(l1.w)) + model.params.get(l1.b);
        let (labels, weights) = set.column(&idx, j);
        let (mut ll, mut w) = (0.0, 0.0);
        for (r, (y, wt)) in labels.iter().zip(&weights).enumerate() {
            let row = logits.row(r);
            let lse = (row[0].exp() + row[1].exp()).ln();
            ll += wt * (row[*y] - lse);
            w += wt;
        }
        sum += ll / w;
    }
    assert!((joint - sum).abs() < 1e-12, "{joint} vs {sum}");
}

#[test]
fn tc_estimate_examples() {
    let mut model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 5).unwrap();
    let set = toy_set(3, &[6], 3, 1, 5);
    let batch = Batch::from_samples(&set.samples, &[0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = model.draw_noise(&batch, &mut rng);
    let last = model.disc.last().unwrap().clone();
    model.disc_params.get_mut(last.w).fill(0.0);
    model.disc_params.get_mut(last.b).fill(0.0);
    let b = model.batch_breakdown(&set, &batch, &noise).unwrap();
    assert_eq!(b.tc, 0.0);

    let joint = Array2::from_shape_fn((5, 5), |(_, c)| c as f64);
    let noise = StepNoise { eps_z: Array2::zeros((0, 4)), eps_b: Array2::zeros((0, 1)), perms: vec![vec![4, 2, 0, 1, 3]] };
    let (real, fake) = model.real_and_fake(&joint, &noise);
    assert_eq!(real, fake);
    let one = Batch::from_samples(&set.samples, &[0]);
    let mut pooled = tiny_cfg(1);
    pooled.hyper.latent_mode = LatentMode::Pooled;
    let pm = SteerModel::new(&pooled, Task::Sofa, 3, 5).unwrap();
    assert_eq!(pm.disc_rows(&one).len(), 1);
}

#[test]
fn tc_is_near_zero_for_independent_latents() {
    let mut cfg = tiny_cfg(1);
    cfg.hyper.nz = 2;
    cfg.disc_width = 32;
    let mut model = SteerModel::new(&cfg, Task::Sofa, 3, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let joint = Array2::from_shape_simple_fn((n, 3), || rng.sample::<f64, _>(StandardNormal));
    let mut opt = Optimizer::adam(1e-3, &model.disc_params);
    for _ in 0..300 {
        let rows: Vec<usize> = (0..256).map(|_| rng.random_range(0..n)).collect();
        let real = joint.select(Axis(0), &rows);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let noise = StepNoise { eps_z: Array2::zeros((0, 2)), eps_b: Array2::zeros((0, 1)), perms: vec![perm] };
        let (real, fake) = model.real_and_fake(&real, &noise);
        let mut tape = Tape::new();
        let l = model.disc_loss_with(&mut tape, &model.disc_params, &real, &fake);
        let g = tape.backward(l).for_store(&model.disc_params);
        opt.step(&mut model.disc_params, &g);
    }
    let mut tape = Tape::new();
    let j = tape.constant(joint);
    let tc = model.tc_var(&mut tape, &model.disc_params, j);
    assert!(tape.scalar(tc).abs() <= 0.1, "{}", tape.scalar(tc));
}

#[test]
fn tc_detects_a_shared_binary_factor() {
    // z and b both encode one fair coin; I(z; b) is close to ln 2.
    let mut cfg = tiny_cfg(1);
    cfg.hyper.nz = 2;
    cfg.disc_width = 32;
    let mut model = SteerModel::new(&cfg, Task::Sofa, 3, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let mut joint = Array2::zeros((n, 3));
    for mut row in joint.rows_mut() {
        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
        row[0] = 2.0 * s + rng.sample::<f64, _>(StandardNormal) * 0.5;
        row[1] = rng.sample::<f64, _>(StandardNormal);
        row[2] = 3.0 * s + rng.sample::<f64, _>(StandardNormal) * 0.3;
    }
    let mut opt = Optimizer::adam(1e-3, &model.disc_params);
    for _ in 0..600 {
        let rows: Vec<usize> = (0..256).map(|_| rng.random_range(0..n)).collect();
        let real = joint.select(Axis(0), &rows);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let noise = StepNoise { eps_z: Array2::zeros((0, 2)), eps_b: Array2::zeros((0, 1)), perms: vec![perm] };
        let (real, fake) = model.real_and_fake(&real, &noise);
        let mut tape = Tape::new();
        let l = model.disc_loss_with(&mut tape, &model.disc_params, &real, &fake);
        let g = tape.backward(l).for_store(&model.disc_params);
        opt.step(&mut model.disc_params, &g);
    }
    let mut tape = Tape::new();
    let j = tape.constant(joint);
    let tc = model.tc_var(&mut tape, &model.disc_params, j);
    let tc = tape.scalar(tc);
    assert!(tc > 0.5 && tc < 0.8, "{tc}");
}

#[test]
fn steer_loss_arithmetic() {
    let h = SteerHyperparams { beta: 1e-4, alpha: 0.5, gamma: 0.5, theta: 5.0, ..Default::default() };
    let parts = LossBreakdown { recon: -10.0, kl: 0.0, predictiveness: -0.7, tc: 0.2, l_ctp: 2.0, total: 0.0 };
    assert!((steer_loss(&parts, &h, 1.0 / 10.0) - 10.4501).abs() < 1e-12);
    let zero = SteerHyperparams { beta: 0.0, alpha: 0.0, gamma: 0.0, theta: 0.0, ..h.clone() };
    assert_eq!(steer_loss(&parts, &zero, 0.1), 0.0);
    let doubled = SteerHyperparams { theta: 10.0, ..h.clone() };
    let diff = steer_loss(&parts, &doubled, 0.1) - steer_loss(&parts, &h, 0.1);
    assert!((diff - 5.0 * 2.0).abs() < 1e-12);
}

#[test]
fn clinical_head_reads_z_only() {
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 7).unwrap();
    let set = toy_set(3, &[6, 4], 3, 1, 7);
    let batch = Batch::from_samples(&set.samples, &[0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = model.draw_noise(&batch, &mut rng);
    let mut tape = Tape::new();
    let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
    let l = model.l_ctp_var(&mut tape, &f, &batch).unwrap();
    let grads = tape.backward(l).for_store(&model.params);
    for lin in [&model.b_mu, &model.b_logvar] {
        for id in [lin.w, lin.b] {
            assert!(grads[id.index()].as_ref().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
        }
    }

    let constant = SteerSet {
        samples: set.samples.iter().map(|s| TaskSample { target: Target::Sofa(vec![5.0; s.len()]), ..s.clone() }).collect(),
        sensitive: set.sensitive.clone(),
    };
    let mut m3 = model.clone();
    m3.params.get_mut(m3.clinical.w).fill(0.0);
    m3.params.get_mut(m3.clinical.b).fill(3.0);
    let batch = Batch::from_samples(&constant.samples, &[0, 1, 2]);
    let mut tape = Tape::new();
    let f = m3.forward_with(&mut tape, &m3.params, &batch, &noise);
    let l = m3.l_ctp_var(&mut tape, &f, &batch).unwrap();
    assert!((tape.scalar(l) - 4.0).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    for mode in [LatentMode::PerTimestep, LatentMode::Pooled] {
        let mut cfg = tiny_cfg(1);
        cfg.hyper.latent_mode = mode;
        let mut model = SteerModel::new(&cfg, Task::Sofa, 3, 8).unwrap();
        // move the zero-initialised logvar heads off zero
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for lin in [model.z_logvar.clone(), model.b_logvar.clone()] {
            model.params.get_mut(lin.w).mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let set = toy_set(2, &[6, 5], 3, 1, 8);
        let batch = Batch::from_samples(&set.samples, &[0, 1]);
        let noise = model.draw_noise(&batch, &mut rng);
        type Pick = fn(&TermVars) -> Var;
        let picks: [(&str, Pick); 5] =
            [("recon", |t| t.recon), ("kl", |t| t.kl), ("pred", |t| t.pred), ("tc", |t| t.tc), ("l_ctp", |t| t.l_ctp)];
        for (name, pick) in picks {
            let err = max_param_grad_error(&model.params, 1e-5, 1e-4, |tape, store| {
                let f = model.forward_with(tape, store, &batch, &noise);
                let t = model.terms_with(tape, store, &model.disc_params, &f, &set, &batch).unwrap();
                pick(&t)
            });
            assert!(err <= 1e-4, "{mode:?} {name}: {err}");
        }
        let mut tape = Tape::new();
        let f = model.forward_with(&mut tape, &model.params, &batch, &noise);
        let (real, fake) = model.real_and_fake(tape.value(f.joint), &noise);
        let err = max_param_grad_error(&model.disc_params, 1e-5, 1e-4, |tape, store| {
            model.disc_loss_with(tape, store, &real, &fake)
        });
        assert!(err <= 1e-4, "{mode:?} discriminator: {err}");
    }
}

#[test]
fn training_stays_finite_and_is_deterministic() {
    let set = toy_set(6, &[6, 8, 5], 3, 1, 9);
    let cfg = TrainConfig { epochs: 100, batch_size: 3, lr: 5e-3, ..Default::default() };
    let run = || {
        let mut model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 9).unwrap();
        let h = train_steer(&mut model, &set, &SteerSet::default(), &cfg).unwrap();
        (h, model.params.fingerprint(), model.disc_params.fingerprint())
    };
    let (h, p, d) = run();
    assert_eq!(h.train.len(), 100);
    assert!(h.train.iter().all(LossBreakdown::is_finite));
    assert!(h.train.iter().all(|b| (b.total - b.recombine(&tiny_cfg(1).hyper)).abs() < 1e-9));
    assert_eq!(run(), (h, p, d));
}

#[test]
fn vae_ablation_improves_reconstruction() {
    let mut set = toy_set(6, &[6, 8, 5], 3, 1, 10);
    // smooth per-record waves leave structure to learn
    for (i, s) in set.samples.iter_mut().enumerate() {
        s.x = Array2::from_shape_fn(s.x.dim(), |(c, t)| (0.7 * t as f64 + i as f64 + c as f64 * 1.3).sin());
    }
    let mut cfg = tiny_cfg(1);
    cfg.hyper = SteerHyperparams { gamma: 0.0, alpha: 0.0, nz: 4, ..Default::default() };
    let mut model = SteerModel::new(&cfg, Task::Sofa, 3, 10).unwrap();
    let tc = TrainConfig { epochs: 100, batch_size: 3, lr: 5e-3, ..Default::default() };
    let h = train_steer(&mut model, &set, &SteerSet::default(), &tc).unwrap();
    let windows: Vec<f64> = h.train.chunks(10).map(|w| w.iter().map(|b| b.recon).sum::<f64>() / 10.0).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] > pair[0], "{windows:?}");
    }
}

#[test]
fn sanitized_latents_keep_clinical_outputs() {
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 11).unwrap();
    let set = toy_set(4, &[6, 4], 3, 1, 11);
    let discard = noise_out_sensitive(&model, &set.samples, SanitizeMode::Discard, 0, 2).unwrap();
    let noise = noise_out_sensitive(&model, &set.samples, SanitizeMode::Noise, 0, 2).unwrap();
    assert_eq!(discard.z, noise.z);
    for (a, b) in discard.z.iter().zip(&noise.z) {
        assert_eq!(model.clinical_from_z(a), model.clinical_from_z(b));
    }
    let preds = model.predict(&set.samples, 2).unwrap();
    for (p, z) in preds.iter().zip(&discard.z) {
        assert_eq!(p, &model.clinical_from_z(z).column(0).to_vec());
    }
    assert!(discard.b.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    assert!(noise.b.iter().any(|b| b.iter().any(|v| *v != 0.0)));
}

#[test]
fn probes_on_removed_sensitive_part_are_at_chance() {
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 12).unwrap();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<TaskSample> = (0..n).map(|i| sample(&mut rng, i, 3, 3)).collect();
    // the label is planted in x, so the unsanitised b could carry it
    let labels: Vec<bool> = samples.iter().map(|s| s.x[[0, 0]] > 0.0).collect();
    let set = SteerSet { samples, sensitive: labels.iter().map(|l| vec![Some(*l)]).collect() };
    let cfg = ProbeConfig { epochs: 5, n_boot: 100, ..Default::default() };
    let (tr, te) = (SteerSet { samples: set.samples[..2000].to_vec(), sensitive: set.sensitive[..2000].to_vec() },
        SteerSet { samples: set.samples[2000..].to_vec(), sensitive: set.sensitive[2000..].to_vec() });
    for (mode, lo, hi) in [(SanitizeMode::Discard, 0.5, 0.5), (SanitizeMode::Noise, 0.45, 0.55)] {
        let a = noise_out_sensitive(&model, &tr.samples, mode, 1, 256).unwrap().pooled_b();
        let b = noise_out_sensitive(&model, &te.samples, mode, 2, 256).unwrap().pooled_b();
        let auc = probe_auc(&a, &tr, &b, &te, 0, &cfg).unwrap().point;
        assert!((lo..=hi).contains(&auc), "{mode:?}: {auc}");
    }
}

#[test]
fn untrained_model_b_probe_is_near_chance() {
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 13).unwrap();
    let set = toy_set(600, &[5, 7], 3, 1, 13);
    // labels independent of x
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let set = SteerSet { sensitive: set.sensitive.iter().map(|_| vec![Some(rng.random::<bool>())]).collect(), ..set };
    let tr = SteerSet { samples: set.samples[..300].to_vec(), sensitive: set.sensitive[..300].to_vec() };
    let te = SteerSet { samples: set.samples[300..].to_vec(), sensitive: set.sensitive[300..].to_vec() };
    let report = disentanglement_eval(&model, &tr, &te, &ProbeConfig { epochs: 10, n_boot: 100, ..Default::default() }, 64).unwrap();
    assert!((report.auc_from_b[0].point - 0.5).abs() < 0.1, "{:?}", report.auc_from_b[0]);
    assert!(report.to_csv().lines().count() == 4);
}

#[test]
fn config_validation() {
    let mut cfg = tiny_cfg(1);
    cfg.attributes.push("age".into());
    assert!(SteerModel::new(&cfg, Task::Sofa, 3, 0).is_err());
    let mut cfg = tiny_cfg(1);
    cfg.hyper.gamma = -1.0;
    assert!(SteerModel::new(&cfg, Task::Sofa, 3, 0).is_err());
    let model = SteerModel::new(&tiny_cfg(1), Task::Sofa, 3, 0).unwrap();
    let set = toy_set(2, &[5], 4, 1, 0);
    let batch = Batch::from_samples(&set.samples, &[0, 1]);
    assert!(matches!(model.batch_breakdown(&set, &batch, &model.zero_noise(&batch)), Err(Error::Shape(_))));
}
