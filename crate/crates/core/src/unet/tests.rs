use super::*;
use crate::tensor::{layer_norm, linear, silu};

fn small_config() -> ModelConfig {
    ModelConfig {
        variant: "test".into(),
        stage_dims: [8, 16, 32],
        encoder_depths: [1, 1, 1, 0],
        bottleneck_depth: 1,
        decoder_depths: [1, 1, 1, 0],
        cond_dim: 6,
        window: 2,
        state_dim: 2,
        num_classes: 3,
        flags: ModelFlags::default(),
    }
}

fn jitter(model: &mut Model<f64>, names: impl Fn(&str) -> bool, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = model.params.ids().filter(|&id| names(model.params.name(id))).collect();
    for id in ids {
        let shape = model.params.get(id).shape().to_vec();
        let n: Tensor<f64> = rng.normal(&shape);
        model.params.get_mut(id).add_assign(&n.scale(0.3)).unwrap();
    }
}

fn p<'a>(m: &'a Model<f64>, name: &str) -> &'a Tensor<f64> {
    m.params.by_name(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let d = w.numel();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, &wj), &bj) in row.iter_mut().zip(w.data()).zip(b.data()) {
            *v = *v * wj + bj;
        }
    }
    out
}

/// Swin-style merge written with explicit strided slices.
fn merge_oracle(x: &Tensor<f64>, m: &Model<f64>, prefix: &str) -> Tensor<f64> {
    let [b, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let at = |bi: usize, i: usize, j: usize, k: usize| x.data()[((bi * h + i) * w + j) * c + k];
    let mut out = Vec::new();
    for bi in 0..b {
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                out.extend((0..c).map(|k| at(bi, i, j, k)));
                out.extend((0..c).map(|k| at(bi, i + 1, j, k)));
                out.extend((0..c).map(|k| at(bi, i, j + 1, k)));
                out.extend((0..c).map(|k| at(bi, i + 1, j + 1, k)));
            }
        }
    }
    let cat = Tensor::from_vec(&[b, h / 2, w / 2, 4 * c], out).unwrap();
    let n = affine(
        &layer_norm(&cat, 1e-6).unwrap(),
        p(m, &format!("{prefix}.norm.weight")),
        p(m, &format!("{prefix}.norm.bias")),
    );
    linear(&n, p(m, &format!("{prefix}.reduction.weight")), None).unwrap()
}

fn expand_oracle(x: &Tensor<f64>, m: &Model<f64>, prefix: &str) -> Tensor<f64> {
    let [b, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let y = linear(x, p(m, &format!("{prefix}.proj.weight")), None).unwrap();
    let half = c / 2;
    let mut out = vec![0.0; b * 4 * h * w * half];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for p1 in 0..2 {
                    for p2 in 0..2 {
                        for k in 0..half {
                            let src = ((bi * h + i) * w + j) * 2 * c + (p1 * 2 + p2) * half + k;
                            let dst = ((bi * 2 * h + 2 * i + p1) * 2 * w + 2 * j + p2) * half + k;
                            out[dst] = y.data()[src];
                        }
                    }
                }
            }
        }
    }
    let up = Tensor::from_vec(&[b, 2 * h, 2 * w, half], out).unwrap();
    affine(
        &layer_norm(&up, 1e-6).unwrap(),
        p(m, &format!("{prefix}.norm.weight")),
        p(m, &format!("{prefix}.norm.bias")),
    )
}

#[test]
fn zero_time_embedding_is_sin_zero_then_cos_one() {
    let e: Tensor<f64> = timestep_embedding(&[0.0], TIME_FREQ_DIM);
    assert_eq!(e.shape(), &[1, 256]);
    assert!(e.data()[..128].iter().all(|&v| v == 0.0));
    assert!(e.data()[128..].iter().all(|&v| v == 1.0));
}

#[test]
fn time_embedding_frequencies() {
    let e: Tensor<f64> = timestep_embedding(&[3.0], 8);
    for k in 0..4 {
        let f = 10_000f64.powf(-(k as f64) / 4.0);
        assert!((e.data()[k] - (3.0 * f).sin()).abs() < 1e-15);
        assert!((e.data()[4 + k] - (3.0 * f).cos()).abs() < 1e-15);
    }
}

#[test]
fn merge_concatenates_in_swin_order() {
    // [1, 2, 2, 1] with distinct values: the folded token lists (0,0), (1,0), (0,1), (1,1).
    let idx = fold_index(1, 2, 2, 1, 2, &MERGE_ORDER);
    assert_eq!(idx, vec![0, 2, 1, 3]);
}

#[test]
fn fold_then_unfold_is_identity() {
    for p in 1..4 {
        let (b, h, w, c) = (2, 3 * p, 2 * p, 3);
        let fold = fold_index(b, h, w, c, p, &raster_offsets(p));
        let unfold = unfold_index(b, h / p, w / p, c, p);
        let round: Vec<usize> = unfold.iter().map(|&i| fold[i]).collect();
        assert_eq!(round, (0..b * h * w * c).collect::<Vec<_>>());
    }
}

#[test]
fn merge_rejects_odd_grid_and_expand_doubles_it() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(0);
    let mut init = Init::new(&mut store, &mut rng);
    let m = MergeParams::init(&mut init, "m", 4).unwrap();
    let e = ExpandParams::init(&mut init, "e", 4).unwrap();
    assert!(patch_merge(&Tensor::zeros(&[3, 4, 4]), &m, &store).is_err());
    let merged = patch_merge(&Rng::new(1).normal(&[4, 6, 4]), &m, &store).unwrap();
    assert_eq!(merged.shape(), &[2, 3, 8]);
    let up = patch_expand(&Rng::new(2).normal(&[2, 3, 4]), &e, &store).unwrap();
    assert_eq!(up.shape(), &[4, 6, 2]);
    assert!(ExpandParams::init(&mut Init::new(&mut ParamStore::<f64>::new(), &mut Rng::new(0)), "x", 3).is_err());
}

#[test]
fn manifest_matches_built_store() {
    for cfg in [small_config(), ModelConfig::preset("T").unwrap()] {
        let model: Model<f32> = build_model(&cfg, 4).unwrap();
        let manifest = param_manifest(&cfg).unwrap();
        assert_eq!(manifest.len(), model.params.len());
        for ((name, shape), (_, n2, t)) in manifest.iter().zip(model.params.iter()) {
            assert_eq!(name, n2);
            assert_eq!(shape.as_slice(), t.shape());
        }
        assert_eq!(count_params(&cfg).unwrap(), model.num_params());
    }
}

#[test]
fn parameter_names_follow_the_stage_scheme() {
    let names: Vec<String> = param_manifest(&ModelConfig::preset("S").unwrap())
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for want in [
        "embed.weight",
        "t_embed.fc1.weight",
        "label_embed.table",
        "encoder.stage1.block0.attn.q.weight",
        "encoder.stage1.block1.vssm.ss2d.dir3.a_log",
        "encoder.merge2.reduction.weight",
        "bottleneck.block0.ffn.fc2.bias",
        "decoder.expand1.proj.weight",
        "decoder.stage3.block2.adaln.ffn.weight",
        "head.linear.weight",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert!(!names
        .iter()
        .any(|n| n.starts_with("encoder.stage4") || n.starts_with("decoder.stage4")));
    assert!(!names.iter().any(|n| n.contains("merge3") || n.contains("expand3")));
}

#[test]
fn disabling_attention_drops_attention_parameters_only() {
    let mut cfg = small_config();
    let full = count_params(&cfg).unwrap();
    cfg.flags.disable_attention = true;
    let lean = param_manifest(&cfg).unwrap();
    assert!(!lean.iter().any(|(n, _)| n.contains(".attn.")));
    let attn: usize = [8usize, 16, 32, 32, 32, 16, 8]
        .iter()
        .map(|&d| 4 * d * d + 3 * d + 6 * 3 * d + 3 * d)
        .sum();
    assert_eq!(
        full - lean.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>(),
        attn
    );
}

#[test]
fn output_is_zero_at_init_and_has_eight_channels() {
    let model: Model<f64> = build_model(&small_config(), 2).unwrap();
    let z: Tensor<f64> = Rng::new(3).normal(&[2, 8, 8, 4]);
    let out = model.forward(&z, &[5.0, 900.0], &[0, 3]).unwrap();
    assert_eq!(out.shape(), &[2, 8, 8, 8]);
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn init_model_equals_composition_of_resampling_maps() {
    let cfg = small_config();
    let mut model: Model<f64> = build_model(&cfg, 7).unwrap();
    jitter(&mut model, |n| !n.contains(".block"), 8);
    let z: Tensor<f64> = Rng::new(9).normal(&[2, 8, 8, 4]);
    let (t, labels) = ([17.0, 640.0], [2usize, 3]);
    let got = model.forward(&z, &t, &labels).unwrap();

    let m = &model;
    let x0 = linear(&z, p(m, "embed.weight"), Some(p(m, "embed.bias"))).unwrap();
    let x1 = merge_oracle(&x0, m, "encoder.merge1");
    let x2 = merge_oracle(&x1, m, "encoder.merge2");
    let mut x = x2.add(&x2).unwrap();
    x = expand_oracle(&x, m, "decoder.expand2").add(&x1).unwrap();
    x = expand_oracle(&x, m, "decoder.expand1").add(&x0).unwrap();

    let freqs: Tensor<f64> = timestep_embedding(&t, TIME_FREQ_DIM);
    let h = silu(&linear(&freqs, p(m, "t_embed.fc1.weight"), Some(p(m, "t_embed.fc1.bias"))).unwrap()).unwrap();
    let temb = linear(&h, p(m, "t_embed.fc2.weight"), Some(p(m, "t_embed.fc2.bias"))).unwrap();
    let table = p(m, "label_embed.table");
    let c = cfg.cond_dim;
    let mut cond = temb.clone();
    for (bi, &l) in labels.iter().enumerate() {
        for j in 0..c {
            cond.data_mut()[bi * c + j] += table.data()[l * c + j];
        }
    }
    let mods = linear(
        &silu(&cond).unwrap(),
        p(m, "head.adaln.weight"),
        Some(p(m, "head.adaln.bias")),
    )
    .unwrap();
    let n = layer_norm(&x, 1e-6).unwrap();
    let d = 8;
    let tokens = 64;
    let mut y = n.clone();
    for bi in 0..2 {
        let row = &mods.data()[bi * 2 * d..(bi + 1) * 2 * d];
        for tok in 0..tokens {
            for j in 0..d {
                let v = &mut y.data_mut()[(bi * tokens + tok) * d + j];
                *v = *v * row[j] + row[d + j];
            }
        }
    }
    let want = linear(&y, p(m, "head.linear.weight"), Some(p(m, "head.linear.bias"))).unwrap();
    let err = got.max_abs_diff(&want).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn null_label_row_starts_at_zero_and_labels_are_bounded() {
    let model: Model<f64> = build_model(&small_config(), 1).unwrap();
    let table = model.params.get(model.layout.label_table);
    assert_eq!(table.shape(), &[4, 6]);
    assert!(table.data()[18..].iter().all(|&v| v == 0.0));
    let z = Tensor::zeros(&[1, 8, 8, 4]);
    assert!(matches!(model.forward(&z, &[1.0], &[4]), Err(Error::Contract(_))));
    assert!(model.forward(&Tensor::zeros(&[1, 6, 8, 4]), &[1.0], &[0]).is_err());
    assert!(model.forward(&z, &[1.0, 2.0], &[0]).is_err());
}

#[test]
fn patch_size_and_isotropic_flags_preserve_output_shape() {
    let mut cfg = small_config();
    cfg.flags.patch_size = 2;
    let mut model: Model<f64> = build_model(&cfg, 3).unwrap();
    jitter(&mut model, |n| n.starts_with("head."), 4);
    let z: Tensor<f64> = Rng::new(5).normal(&[1, 8, 8, 4]);
    let out = model.forward(&z, &[10.0], &[1]).unwrap();
    assert_eq!(out.shape(), &[1, 8, 8, 8]);
    assert!(out.max_abs() > 0.0);

    let mut cfg = small_config();
    cfg.flags.isotropic_mode = true;
    let model: Model<f64> = build_model(&cfg, 3).unwrap();
    assert!(!model
        .params
        .iter()
        .any(|(_, n, _)| n.contains("merge") || n.contains("expand")));
    let out = model.forward(&Rng::new(6).normal(&[1, 6, 6, 4]), &[10.0], &[1]).unwrap();
    assert_eq!(out.shape(), &[1, 6, 6, 8]);
}

#[test]
fn odd_blocks_use_shifted_windows_unless_disabled() {
    let model: Model<f32> = build_model(&ModelConfig::preset("T").unwrap(), 0).unwrap();
    let shifts: Vec<bool> = model.layout.decoder[0].iter().map(|b| b.spec.shifted).collect();
    assert_eq!(shifts, vec![false, true, false]);
    let mut cfg = ModelConfig::preset("T").unwrap();
    cfg.flags.disable_shift = true;
    let model: Model<f32> = build_model(&cfg, 0).unwrap();
    assert!(model.layout.encoder.iter().flatten().all(|b| !b.spec.shifted));
}

#[test]
fn split_output_separates_channels() {
    let out = Tensor::<f64>::from_f64(&[1, 8], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
    let (eps, logit) = split_output(&out).unwrap();
    assert_eq!(eps.to_f64_vec(), vec![0., 1., 2., 3.]);
    assert_eq!(logit.to_f64_vec(), vec![4., 5., 6., 7.]);
}
