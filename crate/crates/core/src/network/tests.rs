use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::counters;
use crate::gradcheck::{check_params, dyadic_tensor};
use crate::ssm::{Discretization, ScanMode};

fn tiny(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        variant,
        stem_channels: 2,
        stage_channels: [4, 8, 16, 32],
        state_dim: 4,
        sra_heads: [1, 2, 2, 4],
        ..NetworkConfig::reference(variant)
    }
}

fn input(c: usize, e: usize, seed: u64) -> Tensor<f64> {
    dyadic_tensor(&[c, e, e, e], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn configs() -> Vec<(String, NetworkConfig)> {
    let mut v: Vec<(String, NetworkConfig)> = Variant::ALL.iter().map(|&x| (x.name().to_string(), tiny(x))).collect();
    for ms in [Multiscale::Msv1, Multiscale::Msv2, Multiscale::Msv3, Multiscale::Msv4] {
        for scope in [MsScope::Encoder, MsScope::All] {
            v.push((
                format!("mamba_3d_{}_{scope:?}", ms.name()),
                NetworkConfig { multiscale: ms, multiscale_scope: scope, ..tiny(Variant::Mamba3d) },
            ));
        }
    }
    v.push((
        "trans_sra_msv2_all".into(),
        NetworkConfig { multiscale: Multiscale::Msv2, multiscale_scope: MsScope::All, ..tiny(Variant::TransSra) },
    ));
    v.push((
        "trans_sra_pool".into(),
        NetworkConfig { reduction_kind: Reduction::AvgPool, ..tiny(Variant::TransSra) },
    ));
    v.push((
        "mamba_1d_ungated_zoh_par_dual".into(),
        NetworkConfig {
            gated: false,
            scan: ScanOptions { discretization: Discretization::Zoh, mode: ScanMode::Parallel },
            directions: Some(vec![Direction::ForwardW, Direction::Random]),
            ..tiny(Variant::Mamba1d)
        },
    ));
    v
}

#[test]
fn reference_network_has_four_encoder_and_three_decoder_stages() {
    let (net, ps) = Network::build(&NetworkConfig::default(), 0).unwrap();
    assert_eq!(net.encoder.len(), 4);
    assert_eq!(net.decoder.len(), 3);
    assert_eq!(net.param_count(), ps.numel());
    let text = net.describe([128; 3]).unwrap();
    for s in ["ES1.f", "ES2.h", "ES3.h", "ES4.h", "DS1.g", "DS2.fuse", "DS3.h", "head.out"] {
        assert!(text.contains(s), "{s} missing from\n{text}");
    }
    assert!(ps.find("ES1.h.ssm0.a_log").is_some());
    assert_eq!(text, net.describe([128; 3]).unwrap());
    let csv = net.describe_csv([128; 3]).unwrap();
    assert!(csv.starts_with("layer,type,in_shape,out_shape,params\n"));
    assert!(csv.contains("ES4.h,mamba_3d,256x8x8x8,256x8x8x8,"));
}

#[test]
fn parameters_match_formulas_and_are_seed_deterministic() {
    for (name, cfg) in configs() {
        let (net, ps) = Network::build(&cfg, 7).unwrap();
        assert_eq!(net.param_count(), ps.numel(), "{name}");
        let total: usize = net.plan([16; 3]).unwrap().iter().map(|r| r.params).sum();
        assert_eq!(total, ps.numel(), "{name}");
        let (_, again) = Network::build(&cfg, 7).unwrap();
        assert!(ps.iter().zip(again.iter()).all(|(a, b)| a == b), "{name}");
    }
}

#[test]
fn analytic_macs_equal_the_instrumented_counter() {
    for (name, cfg) in configs() {
        let (net, ps) = Network::build(&cfg, 1).unwrap();
        let x = input(1, 16, 2);
        let (r, counted) = counters::count_macs(|| net.forward(&ps, &x, Phase::Infer).unwrap());
        assert_eq!(r.0.shape(), &[3, 16, 16, 16]);
        assert_eq!(net.cost([16; 3]).unwrap().macs, counted, "{name}");
    }
}

#[test]
fn indivisible_inputs_are_refused() {
    let (net, ps) = Network::build(&tiny(Variant::Mamba3d), 0).unwrap();
    let x = Tensor::<f64>::zeros(&[1, 16, 16, 24]);
    assert!(matches!(net.forward(&ps, &x, Phase::Infer), Err(Error::Divisibility { multiple: 16, .. })));
    let x = Tensor::<f64>::zeros(&[1, 16, 16, 40]);
    assert!(matches!(net.plan([16, 16, 40]), Err(Error::Divisibility { .. })));
    assert!(net.forward(&ps, &x, Phase::Infer).is_err());
    let x = Tensor::<f64>::zeros(&[2, 16, 16, 16]);
    assert!(matches!(net.forward(&ps, &x, Phase::Infer), Err(Error::Dim { .. })));
}

#[test]
fn vanilla_attention_at_full_size_hits_the_memory_guard() {
    let (net, ps) = Network::build(&NetworkConfig::reference(Variant::TransVanilla), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 128, 128, 128]);
    match net.forward(&ps.cast::<f32>(), &x, Phase::Infer) {
        Err(Error::AttentionMemory { layer, entries, limit }) => {
            assert_eq!(layer, "ES1.h");
            assert_eq!(entries, 64u64.pow(6));
            assert_eq!(limit, DEFAULT_ATTENTION_LIMIT);
        }
        other => panic!("expected the guard, got {:?}", other.map(|r| r.0.shape().to_vec())),
    }
    let cost = net.cost([128; 3]).unwrap();
    assert!(cost.exceeds_guard());
    assert_eq!(cost.peak_attention_entries, 64u64.pow(6));
    let (sra, _) = Network::build(&NetworkConfig::reference(Variant::TransSra), 0).unwrap();
    assert!(!sra.cost([128; 3]).unwrap().exceeds_guard());
}

#[test]
fn zero_head_gives_constant_logits() {
    let (net, mut ps) = Network::build(&tiny(Variant::Mamba3d), 0).unwrap();
    ps.get_mut(net.head_out.w).fill(0.0);
    let bias = net.head_out.b.unwrap();
    ps.get_mut(bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let (y, _) = net.forward(&ps, &input(1, 16, 0), Phase::Infer).unwrap();
    for (k, chunk) in y.data().chunks(16 * 16 * 16).enumerate() {
        assert!(chunk.iter().all(|&v| v == [0.5, -1.0, 2.0][k]));
    }
}

#[test]
fn forward_matches_stage_by_stage_composition() {
    let cfg = NetworkConfig { stem_channels: 4, stage_channels: [4, 8, 16, 32], ..tiny(Variant::Mamba3d) };
    let (net, ps) = Network::build(&cfg, 3).unwrap();
    let x = input(1, 16, 4);
    let (y, _) = net.forward(&ps, &x, Phase::Infer).unwrap();

    let s0 = net.stem.forward(&ps, &x).unwrap().0;
    let e1 = net.encoder[0].forward(&ps, &s0, Phase::Infer).unwrap().0;
    let e2 = net.encoder[1].forward(&ps, &e1, Phase::Infer).unwrap().0;
    let e3 = net.encoder[2].forward(&ps, &e2, Phase::Infer).unwrap().0;
    let e4 = net.encoder[3].forward(&ps, &e3, Phase::Infer).unwrap().0;
    let dec = |d: &DecoderStage, h: &Tensor<f64>, skip: &Tensor<f64>| {
        let up = d.g.forward(&ps, h).unwrap().0;
        let f = d.fuse.forward(&ps, &Tensor::concat0(&[&up, skip]).unwrap()).unwrap().0;
        match &d.body {
            DecoderBody::Layer(l) => l.forward(&ps, &f, Phase::Infer).unwrap().0,
            DecoderBody::Stage(s) => s.forward(&ps, &f, Phase::Infer).unwrap().0,
        }
    };
    let d1 = dec(&net.decoder[0], &e4, &e3);
    let d2 = dec(&net.decoder[1], &d1, &e2);
    let d3 = dec(&net.decoder[2], &d2, &e1);
    assert_eq!(d3.shape(), &[4, 8, 8, 8]);
    let u = net.head_up.forward(&ps, &d3).unwrap().0.add(&s0).unwrap();
    let expected = net.head_out.forward(&ps, &u).unwrap();
    assert!(y.max_abs_diff(&expected) <= 1e-8);
    assert_eq!(y, net.forward(&ps, &x, Phase::Infer).unwrap().0);
}

#[test]
fn swapping_the_sequence_layers_keeps_the_convolutions() {
    let (_, sra) = Network::build(&NetworkConfig::reference(Variant::TransSra), 0).unwrap();
    let (_, mamba) = Network::build(&NetworkConfig::reference(Variant::Mamba3d), 0).unwrap();
    let conv_params = |ps: &ParamStore<f64>| -> Vec<(String, Vec<usize>)> {
        ps.iter()
            .filter(|(n, _)| !n.contains(".h."))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    };
    assert_eq!(conv_params(&sra), conv_params(&mamba));
}

#[test]
fn combined_variant_equals_the_three_flags() {
    let mt = NetworkConfig::reference(Variant::Mamba3dMt);
    let flags = NetworkConfig {
        dwconv: Some(DwKind::D3),
        multiscale: Multiscale::Msv4,
        multiscale_scope: MsScope::All,
        directions: Some(vec![Direction::ForwardW, Direction::HFirst, Direction::DFirst]),
        ..NetworkConfig::reference(Variant::Mamba3d)
    };
    let (a, pa) = Network::build(&mt, 0).unwrap();
    let (b, pb) = Network::build(&flags, 0).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    let names = |ps: &ParamStore<f64>| ps.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&pa), names(&pb));
}

#[test]
fn invalid_configs_are_rejected() {
    let msv4_trans = NetworkConfig { multiscale: Multiscale::Msv4, ..tiny(Variant::TransSra) };
    match Network::build(&msv4_trans, 0) {
        Err(Error::Config(m)) => assert!(m.contains("MSv4 is Mamba-specific")),
        other => panic!("{:?}", other.map(|_| ())),
    }
    let msv4_1d = NetworkConfig { multiscale: Multiscale::Msv4, ..tiny(Variant::Mamba1d) };
    assert!(matches!(Network::build(&msv4_1d, 0), Err(Error::Config(_))));
    let heads = NetworkConfig { sra_heads: [3, 2, 4, 8], ..tiny(Variant::TransSra) };
    assert!(matches!(Network::build(&heads, 0), Err(Error::Config(_))));
    let dirs = NetworkConfig { directions: Some(vec![Direction::HFirst]), ..tiny(Variant::TransSra) };
    assert!(matches!(Network::build(&dirs, 0), Err(Error::Config(_))));
    let parsed: std::result::Result<NetworkConfig, _> = toml_like_unknown_key();
    assert!(parsed.is_err());
}

fn toml_like_unknown_key() -> std::result::Result<NetworkConfig, serde::de::value::Error> {
    use serde::de::value::MapDeserializer;
    use serde::de::IntoDeserializer;
    let m = vec![("not_a_key", 1u32)];
    NetworkConfig::deserialize(MapDeserializer::new(m.into_iter().map(|(k, v)| (k, v.into_deserializer()))))
}

#[test]
fn zero_upstream_gradient_and_masked_classes() {
    let (net, ps) = Network::build(&tiny(Variant::Mamba3d), 2).unwrap();
    let x = input(1, 16, 5);
    let (y, cache) = net.forward(&ps, &x, Phase::Train).unwrap();
    let mut g = Grads::zeros_like(&ps);
    let gx = net.backward(&ps, &cache, &Tensor::zeros(y.shape()), &mut g).unwrap();
    assert!(g.all_zero());
    assert!(gx.data().iter().all(|&v| v == 0.0));

    let vox = 16 * 16 * 16;
    let gy = Tensor::from_fn(y.shape(), |i| if i / vox == 0 { 1.0 } else { 0.0 });
    let mut g = Grads::zeros_like(&ps);
    net.backward(&ps, &cache, &gy, &mut g).unwrap();
    let gw = g.get(net.head_out.w);
    let c0 = net.cfg.stem_channels;
    assert!(gw.data()[c0..].iter().all(|&v| v == 0.0));
    assert!(gw.data()[..c0].iter().any(|&v| v != 0.0));
    let gb = g.get(net.head_out.b.unwrap());
    assert_eq!(&gb.data()[1..], &[0.0, 0.0]);
}

#[test]
fn infer_caches_cannot_be_differentiated() {
    let (net, ps) = Network::build(&tiny(Variant::Mamba1d), 0).unwrap();
    let (y, cache) = net.forward(&ps, &input(1, 16, 0), Phase::Infer).unwrap();
    let mut g = Grads::zeros_like(&ps);
    assert!(matches!(net.backward(&ps, &cache, &y, &mut g), Err(Error::MissingSavedState(_))));
}

#[test]
fn network_gradients() {
    for (name, cfg) in [
        ("mamba_3d", tiny(Variant::Mamba3d)),
        ("mamba_3dmt", tiny(Variant::Mamba3dMt)),
        ("trans_sra", tiny(Variant::TransSra)),
        (
            "mamba_1d_msv2_all",
            NetworkConfig { multiscale: Multiscale::Msv2, multiscale_scope: MsScope::All, ..tiny(Variant::Mamba1d) },
        ),
    ] {
        let cfg = NetworkConfig { stem_channels: 4, stage_channels: [4, 4, 4, 4], sra_heads: [1, 1, 2, 2], ..cfg };
        let (net, ps) = Network::build(&cfg, 4).unwrap();
        let r = check_params(
            name,
            &ps,
            &input(1, 16, 6),
            |ps, x| Ok(net.forward(ps, x, Phase::Train)?.0),
            |ps, x, w| {
                let (_, c) = net.forward(ps, x, Phase::Train)?;
                let mut g = Grads::zeros_like(ps);
                let gx = net.backward(ps, &c, w, &mut g)?;
                Ok((gx, g))
            },
            1,
            1e-4,
            9,
        )
        .unwrap();
        let checked: usize = r.groups.iter().map(|g| g.checked).sum();
        assert!(checked >= 20);
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn non_finite_activations_name_the_layer() {
    let (net, mut ps) = Network::build(&tiny(Variant::Mamba3d), 0).unwrap();
    let id = ps.find("ES2.h.out.b").unwrap();
    ps.get_mut(id).data_mut()[0] = f64::NAN;
    match net.forward(&ps, &input(1, 16, 0), Phase::Infer) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, "ES2.h"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn batches_run_per_sample() {
    let (net, ps) = Network::build(&tiny(Variant::Mamba1d), 0).unwrap();
    let a = input(1, 16, 1);
    let b = input(1, 16, 2);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let batch = Tensor::new(&[2, 1, 16, 16, 16], data).unwrap();
    let (y, caches) = net.forward_batch(&ps, &batch, Phase::Infer).unwrap();
    assert_eq!(y.shape(), &[2, 3, 16, 16, 16]);
    assert_eq!(caches.len(), 2);
    let yb = net.forward(&ps, &b, Phase::Infer).unwrap().0;
    assert_eq!(&y.data()[yb.len()..], yb.data());
    assert!(net.forward_batch(&ps, &a, Phase::Infer).is_err());
}

