use mtldr_core::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use mtldr_core::model::Example;
use mtldr_core::tokens::{BOS, EOS, PAD};
use mtldr_core::training::{lr_at, nll_loss, total_loss, total_loss_value, RunConfig, Trainer, METRICS_HEADER};
use mtldr_core::wret::compose_total_value;
use mtldr_core::{Graph, SeededRng, Tape, Tensor};

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "d_model = 16\nheads = 2\ncomponents = 2\nencoder_layers = 1\ndecoder_layers = 1\nffn_mult = 2\n\
         latent_dim = 4\nflow_layers = 2\naudio_len = 12\nvocab_size = 64\nmax_decode_len = 12\nmax_target_len = 10\n\
         batch_size = 2\naccum_steps = 2\nmax_lr = 1e-2\nwarmup_steps = 3\n",
    )
    .unwrap()
}

fn random_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let src_len = 3 + rng.below(6);
            let mut source = vec![BOS];
            source.extend((0..src_len).map(|_| 4 + rng.below(60)));
            source.push(EOS);
            let mut target = vec![BOS];
            target.extend((0..1 + rng.below(5)).map(|_| 4 + rng.below(60)));
            target.push(EOS);
            let (frames, blocks) = (5 + rng.below(15), 1 + rng.below(3));
            Example {
                id: format!("r{i}"),
                source,
                target,
                audio: Some(rng.normal_tensor(&[frames, 40], 1.0)),
                video: Some(rng.normal_tensor(&[blocks, 2048], 1.0)),
            }
        })
        .collect()
}

#[test]
fn nll_fixtures() {
    let t = Tape::<f64>::new();
    let mut forced = vec![0.0; 3 * 5];
    for (i, &c) in [4, 1, 2].iter().enumerate() {
        forced[i * 5 + c] = 200.0;
    }
    let logits = t.constant(Tensor::new(&[3, 5], forced).unwrap());
    assert!(t.item(nll_loss(&t, logits, &[4, 1, 2]).unwrap()) < 1e-80);

    let uniform = t.constant(Tensor::zeros(&[4, 7]));
    assert!((t.item(nll_loss(&t, uniform, &[1, 2, 3, 4]).unwrap()) - 7f64.ln()).abs() < 1e-12);

    // Hand computation over a vocabulary of 3.
    let rows = [[1.0, 2.0, 3.0], [0.0, 0.0, 1.0], [2.0, -1.0, 0.5]];
    let targets = [2, 1, 1];
    let mut expect = 0.0;
    for (r, &k) in rows.iter().zip(&targets) {
        let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
        expect -= (r[k].exp() / z).ln();
    }
    expect /= 3.0;
    let logits = t.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    assert!((t.item(nll_loss(&t, logits, &targets).unwrap()) - expect).abs() < 1e-12);

    // PAD positions are excluded from the mean.
    let logits = t.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
    let first = {
        let r = rows[0];
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        -(r[2].exp() / z).ln()
    };
    assert!((t.item(nll_loss(&t, logits, &[2, PAD, PAD]).unwrap()) - first).abs() < 1e-12);
    assert!(nll_loss(&t, logits, &[PAD, PAD, PAD]).is_err());
    assert!(nll_loss(&t, logits, &[1, 2]).is_err());
    assert!(nll_loss(&t, logits, &[1, 2, 3]).is_err());
}

#[test]
fn total_loss_composition() {
    let t = Tape::<f64>::new();
    let nll = t.constant(Tensor::scalar(2.345678));
    assert_eq!(t.item(total_loss(&t, nll, None, 0.1).unwrap()), 2.345678 * 0.1);
    assert_eq!(t.item(total_loss(&t, nll, None, 1.0).unwrap()), 2.345678);
    let zero_latent = compose_total_value(0.3, 0.2, 0.1, 0.05, 0.0, 0.0);
    let latent_var = t.constant(Tensor::scalar(zero_latent));
    let with_zero = t.item(total_loss(&t, nll, Some(latent_var), 0.1).unwrap());
    assert_eq!(with_zero, 2.345678 * 0.1 + 0.3);

    let mut rng = SeededRng::new(3);
    for _ in 0..50 {
        let (n, l, w) = (rng.uniform() * 5.0, rng.uniform() * 20.0 - 5.0, rng.uniform());
        let got = t.item(total_loss(&t, t.constant(Tensor::scalar(n)), Some(t.constant(Tensor::scalar(l))), w).unwrap());
        assert_eq!(got.to_bits(), total_loss_value(n, Some(l), w).to_bits());
    }
}

#[test]
fn schedule_knots() {
    let (max, warm) = (3e-5, 10_000);
    assert_eq!(lr_at(0, max, warm), 0.0);
    assert_eq!(lr_at(warm, max, warm), max);
    assert!((lr_at(4 * warm, max, warm) - max / 2.0).abs() < 1e-20);
    assert!((lr_at(warm + 1, max, warm) - lr_at(warm, max, warm)).abs() < 1e-4 * max);
    assert!((lr_at(warm - 1, max, warm) - max).abs() < 1e-3 * max);
    assert_eq!(lr_at(5_000, max, warm), max / 2.0);
    assert!(lr_at(1_000_000, max, warm) < lr_at(100_000, max, warm));
}

#[test]
fn config_parsing() {
    let d = RunConfig::default();
    assert_eq!(d.train.epochs, 55);
    assert_eq!(d.train.accum_steps, 5);
    assert_eq!(d.train.warmup_steps, 10_000);
    assert_eq!(d.train.max_lr, 3e-5);
    assert_eq!(d.train.mle_weight, 0.1);
    assert_eq!(d.train.ranking_margin, 0.001);
    assert_eq!(d.model.d_model, 512);
    assert_eq!(d.model.max_source_len, 512);

    let c = RunConfig::parse("# desk run\nd_model=64 # width\nheads = 4\n\nranking_margin = 0.002\nuse_audio=false\n").unwrap();
    assert_eq!((c.model.d_model, c.model.heads, c.model.use_audio), (64, 4, false));
    assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);

    for bad in ["bogus = 1", "d_model", "heads = x", "warmup_steps = 0", "d_model = 30\nheads = 4", "use_video=false\nuse_audio=false", "max_lr = -1"] {
        assert!(RunConfig::parse(bad).is_err(), "{bad}");
    }
}

fn params_equal(a: &Trainer, b: &Trainer, tol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, na, ta), (_, nb, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        worst = worst.max(ta.max_abs_diff(tb));
    }
    assert!(worst <= tol, "max parameter difference {worst}");
    worst
}

#[test]
fn accumulation_matches_large_batch() {
    let data = random_examples(3, 11);
    let batch: Vec<usize> = vec![0, 1, 2];
    for accum in [1usize, 2, 5] {
        let mut cfg = tiny_config();
        cfg.train.accum_steps = accum;
        let mut a: Trainer = Trainer::new(cfg.clone(), None).unwrap();
        let mut b: Trainer = Trainer::new(cfg, None).unwrap();
        for _ in 0..2 {
            let micro = vec![batch.clone(); accum];
            let big = vec![batch.iter().copied().cycle().take(3 * accum).collect::<Vec<_>>()];
            let ma = a.step_on(&data, &micro).unwrap();
            let mb = b.step_on(&data, &big).unwrap();
            assert!((ma.total - mb.total).abs() < 1e-9);
        }
        params_equal(&a, &b, 1e-9);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let data = random_examples(6, 12);
    let mut tr: Trainer = Trainer::new(tiny_config(), None).unwrap();
    let mut touched = vec![false; tr.store.len()];
    for step in 0..20u64 {
        let idx = [(2 * step as usize) % 6, (2 * step as usize + 1) % 6];
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        {
            let g = Graph::new(&tr.store);
            let noise = batch.iter().map(|e| SeededRng::stream(9, &e.id, step)).collect();
            let prior = SeededRng::new(step).normal_tensor(&[2, 4], 1.0);
            let loss = tr.model.batch_loss(&g, &batch, Some(noise), &prior, &tr.cfg.train.weights()).unwrap();
            g.tape.backward(loss.total).unwrap();
            for (id, grad) in g.param_grads() {
                if grad.data().iter().any(|&v| v != 0.0) {
                    touched[tr.store.iter().position(|(p, _, _)| p == id).unwrap()] = true;
                }
            }
        }
        tr.step(&data).unwrap();
    }
    let dead: Vec<&str> = tr
        .store
        .iter()
        .enumerate()
        .filter(|(k, (id, _, _))| !touched[*k] && !tr.store.is_frozen(*id))
        .map(|(_, (_, n, _))| n)
        .collect();
    assert_eq!(tr.store.iter().filter(|(id, _, _)| tr.store.is_frozen(*id)).count(), 2);
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn resume_reproduces_trajectory_bit_exactly() {
    let data = random_examples(5, 13);
    let mut straight: Trainer = Trainer::new(tiny_config(), None).unwrap();
    let mut first: Trainer = Trainer::new(tiny_config(), None).unwrap();
    for _ in 0..2 {
        let a = straight.step(&data).unwrap();
        let b = first.step(&data).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let mut resumed: Trainer = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    for _ in 0..3 {
        let a = straight.step(&data).unwrap();
        let b = resumed.step(&data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    params_equal(&straight, &resumed, 0.0);
}

#[test]
fn checkpoint_format() {
    let mut tr: Trainer = Trainer::new(tiny_config(), None).unwrap();
    tr.step(&random_examples(4, 14)).unwrap();
    let bytes = tr.checkpoint().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let text = String::from_utf8_lossy(&bytes);
    for seg in ["config", "embeddings", "dfhc", "wret", "fusion", "decoder", "optimizer"] {
        assert!(text.contains(seg), "segment {seg}");
    }
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(Checkpoint::<f64>::from_bytes(&wrong).unwrap_err().to_string().contains("version 99"));
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::<f64>::from_bytes(b"NOPE").is_err());
    assert!(Checkpoint::<f64>::load(std::path::Path::new("/nonexistent/x.ckpt")).is_err());
}

#[test]
fn non_finite_loss_aborts_step() {
    let data = random_examples(2, 15);
    let mut tr: Trainer = Trainer::new(tiny_config(), None).unwrap();
    let id = tr.model.decoder.out.w;
    let shape = tr.store.get(id).shape().to_vec();
    tr.store.set(id, Tensor::full(&shape, f64::NAN)).unwrap();
    let err = tr.step(&data).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn fit_writes_metrics_and_checkpoints() {
    let dir = tempdir();
    let mut cfg = tiny_config();
    cfg.train.epochs = 3;
    cfg.train.patience = 1;
    let train = random_examples(4, 16);
    let valid = random_examples(2, 17);
    let mut tr: Trainer = Trainer::new(cfg, None).unwrap();
    let mut seen = 0;
    let hist = tr.fit(&train, &valid, Some(&dir), |_| seen += 1).unwrap();
    assert_eq!(seen, hist.len());
    assert!(hist.iter().any(|m| m.val_total.is_some()));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), hist.len() + 1);
    assert!(dir.join("best.ckpt").exists() && dir.join("last.ckpt").exists());
    assert!(tr.state.epoch >= 3 || tr.state.stopped);
    assert!(tr.fit(&[], &valid, None, |_| {}).is_err());
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mtldr-train-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
