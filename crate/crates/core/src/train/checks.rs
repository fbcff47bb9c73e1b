//! Registry of finite-difference gradient checks over every op, block and
//! network variant, at fixed small shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    multi_head_attention, multi_head_attention_backward, AttnConfig, AttnLayer, ConvBlock, DwKind, MambaConfig,
    MambaLayer, Multiscale, SeqKind, SeqLayer, StageBody,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check, check_params, dyadic_tensor, GradReport};
use crate::network::{MsScope, Network, NetworkConfig, Variant};
use crate::nn::{self, ConvSpec};
use crate::params::{Builder, Grads, ParamStore};
use crate::scan_order::Direction;
use crate::ssm::{selective_scan, selective_scan_backward, Discretization, Phase, ScanMode, ScanOptions, SsmRef};
use crate::tensor::{matmul, matmul_backward, Tensor};

/// Tolerance for maps that are linear in every input.
pub const LINEAR_TOL: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Component names with their tolerances, in suite order.
pub const COMPONENTS: &[(&str, f64)] = &[
    ("identity", 0.0),
    ("linear", LINEAR_TOL),
    ("matmul", LINEAR_TOL),
    ("conv3d", LINEAR_TOL),
    ("conv3d_strided", LINEAR_TOL),
    ("tconv3d", LINEAR_TOL),
    ("dwconv1d", LINEAR_TOL),
    ("dwconv3d", LINEAR_TOL),
    ("layer_norm", DEFAULT_TOL),
    ("silu", DEFAULT_TOL),
    ("softplus", DEFAULT_TOL),
    ("softmax", DEFAULT_TOL),
    ("selective_scan", DEFAULT_TOL),
    ("selective_scan_zoh_parallel", DEFAULT_TOL),
    ("attention_kernel", DEFAULT_TOL),
    ("dice_ce_loss", DEFAULT_TOL),
    ("conv_block", DEFAULT_TOL),
    ("mamba_1d", DEFAULT_TOL),
    ("mamba_3d", DEFAULT_TOL),
    ("mamba_tri", DEFAULT_TOL),
    ("mamba_msv4", DEFAULT_TOL),
    ("attention_vanilla", DEFAULT_TOL),
    ("attention_sra", DEFAULT_TOL),
    ("attention_sra_pool", DEFAULT_TOL),
    ("stage_msv1", DEFAULT_TOL),
    ("stage_msv2", DEFAULT_TOL),
    ("stage_msv3", DEFAULT_TOL),
    ("stage_msv4", DEFAULT_TOL),
    ("network_mamba_1d", DEFAULT_TOL),
    ("network_mamba_3d", DEFAULT_TOL),
    ("network_mamba_3dmt", DEFAULT_TOL),
    ("network_trans_sra", DEFAULT_TOL),
    ("network_trans_vanilla", DEFAULT_TOL),
    ("network_mamba_3d_msv4", DEFAULT_TOL),
];

pub fn tolerance(name: &str) -> Option<f64> {
    COMPONENTS.iter().find(|(n, _)| *n == name).map(|&(_, t)| t)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    dyadic_tensor(shape, &mut rng(seed))
}

/// Checks a primitive; `bug` negates the first returned gradient.
fn op<F, G>(name: &str, names: &[&str], inputs: Vec<Tensor<f64>>, fwd: F, grad: G, bug: bool) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    G: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let tol = tolerance(name).unwrap_or(DEFAULT_TOL);
    check(
        name,
        names,
        inputs,
        fwd,
        |v, w| {
            let mut g = grad(v, w)?;
            if bug {
                g[0] = g[0].scale(-1.0);
            }
            Ok(g)
        },
        24,
        tol,
        7,
    )
}

/// Checks a parameterized layer built by `make` on input `x`.
fn layer<L, C>(
    name: &str,
    x: Tensor<f64>,
    samples: usize,
    bug: bool,
    make: impl FnOnce(&mut Builder<'_>) -> Result<L>,
    fwd: impl Fn(&L, &ParamStore<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, C)>,
    bwd: impl Fn(&L, &ParamStore<f64>, &C, &Tensor<f64>, &mut Grads<f64>) -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    let mut ps = ParamStore::new();
    let mut r = rng(5);
    let l = make(&mut Builder::new(&mut ps, &mut r))?;
    check_params(
        name,
        &ps,
        &x,
        |ps, x| Ok(fwd(&l, ps, x)?.0),
        |ps, x, w| {
            let (_, c) = fwd(&l, ps, x)?;
            let mut g = Grads::zeros_like(ps);
            let gx = bwd(&l, ps, &c, w, &mut g)?;
            Ok((if bug { gx.scale(-1.0) } else { gx }, g))
        },
        samples,
        tolerance(name).unwrap_or(DEFAULT_TOL),
        9,
    )
}

fn mamba_layer(name: &str, cfg: MambaConfig, x: Tensor<f64>, bug: bool) -> Result<GradReport> {
    layer(
        name,
        x,
        4,
        bug,
        |b| MambaLayer::new(b, "m", cfg, 3),
        |l, ps, x| l.forward(ps, x, Phase::Train),
        |l, ps, c, g, gr| l.backward(ps, c, g, gr),
    )
}

fn attn_layer(name: &str, cfg: AttnConfig, x: Tensor<f64>, bug: bool) -> Result<GradReport> {
    layer(
        name,
        x,
        4,
        bug,
        |b| AttnLayer::new(b, "a", cfg),
        |l, ps, x| l.forward(ps, x),
        |l, ps, c, g, gr| l.backward(ps, c, g, gr),
    )
}

fn stage(name: &str, scheme: Multiscale, bug: bool) -> Result<GradReport> {
    let msv4 = scheme == Multiscale::Msv4;
    let factory = move |b: &mut Builder<'_>, n: &str, c: usize| -> Result<SeqLayer> {
        let cfg = MambaConfig { state_dim: 2, dw: DwKind::D3, multiscale: msv4, ..MambaConfig::new(c) };
        Ok(SeqLayer::Mamba(MambaLayer::new(b, n, cfg, 1)?))
    };
    layer(
        name,
        t(&[2, 2, 2, 2], 4),
        3,
        bug,
        |b| StageBody::new(b, scheme, 2, 4, 1, SeqKind::Mamba, &factory),
        |l, ps, x| l.forward(ps, x, Phase::Train),
        |l, ps, c, g, gr| l.backward(ps, c, g, gr),
    )
}

/// The smallest network of each variant: 16³ input, 4-channel stages.
pub fn tiny_network(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        stem_channels: 4,
        stage_channels: [4, 4, 4, 4],
        state_dim: 2,
        sra_heads: [1, 1, 2, 2],
        ffn_expand: 2,
        ..NetworkConfig::reference(variant)
    }
}

fn network(name: &str, cfg: NetworkConfig, bug: bool) -> Result<GradReport> {
    let (net, ps) = Network::build(&cfg, 4)?;
    check_params(
        name,
        &ps,
        &t(&[1, 16, 16, 16], 6),
        |ps, x| Ok(net.forward(ps, x, Phase::Train)?.0),
        |ps, x, w| {
            let (_, c) = net.forward(ps, x, Phase::Train)?;
            let mut g = Grads::zeros_like(ps);
            let gx = net.backward(ps, &c, w, &mut g)?;
            Ok((if bug { gx.scale(-1.0) } else { gx }, g))
        },
        1,
        DEFAULT_TOL,
        9,
    )
}

fn scan(name: &str, opts: ScanOptions, bug: bool) -> Result<GradReport> {
    let (l, c, n) = (16, 3, 4);
    let mut inputs = vec![t(&[l, c], 1)];
    let mut r = rng(2);
    let p = crate::ssm::SsmParams::init(c, n, &mut r);
    inputs.extend(p.tensors().iter().map(|(_, x)| (*x).clone()));
    op(
        name,
        &["u", "a_log", "d", "w_delta", "b_delta", "w_b", "w_c"],
        inputs,
        |v| Ok(selective_scan(&v[0], view(v), opts, Phase::Infer)?.0),
        |v, g| {
            let (_, cache) = selective_scan(&v[0], view(v), opts, Phase::Train)?;
            let gr = selective_scan_backward(g, &cache, view(v))?;
            let mut out = vec![gr.input];
            out.extend(gr.params.tensors().iter().map(|(_, x)| (*x).clone()));
            Ok(out)
        },
        bug,
    )
}

fn view(v: &[Tensor<f64>]) -> SsmRef<'_, f64> {
    SsmRef { a_log: &v[1], d: &v[2], w_delta: &v[3], b_delta: &v[4], w_b: &v[5], w_c: &v[6] }
}

fn conv(name: &str, spec: ConvSpec, input: [usize; 3], transposed: bool, bug: bool) -> Result<GradReport> {
    let x = t(&[spec.in_channels, input[0], input[1], input[2]], 1);
    let w = t(&if transposed { spec.tconv_weight_shape() } else { spec.weight_shape() }, 2);
    let b = t(&[spec.out_channels], 3);
    op(
        name,
        &["x", "w", "b"],
        vec![x, w, b],
        |v| {
            if transposed {
                nn::tconv3d(&v[0], &spec, &v[1], Some(&v[2]))
            } else {
                nn::conv3d(&v[0], &spec, &v[1], Some(&v[2]))
            }
        },
        |v, g| {
            let gr = if transposed {
                nn::tconv3d_backward(&v[0], &spec, &v[1], g)?
            } else {
                nn::conv3d_backward(&v[0], &spec, &v[1], g)?
            };
            Ok(vec![gr.input, gr.weight, gr.bias.expect("bias")])
        },
        bug,
    )
}

/// Runs one named check. `inject_bug` flips the sign of the input gradient
/// so the check must fail.
pub fn run_component(name: &str, inject_bug: bool) -> Result<GradReport> {
    let bug = inject_bug;
    let tri = vec![Direction::ForwardW, Direction::HFirst, Direction::DFirst];
    let small = |c, dw| MambaConfig { state_dim: 3, dw, ..MambaConfig::new(c) };
    match name {
        "identity" => op(name, &["x"], vec![t(&[4, 5], 1)], |v| Ok(v[0].clone()), |_, w| Ok(vec![w.clone()]), bug),
        "linear" => op(
            name,
            &["x", "w", "b"],
            vec![t(&[5, 4], 1), t(&[4, 3], 2), t(&[3], 3)],
            |v| nn::linear(&v[0], &v[1], Some(&v[2])),
            |v, g| {
                let gr = nn::linear_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias])
            },
            bug,
        ),
        "matmul" => op(
            name,
            &["a", "b"],
            vec![t(&[3, 4], 1), t(&[4, 2], 2)],
            |v| matmul(&v[0], &v[1]),
            |v, g| {
                let (ga, gb) = matmul_backward(&v[0], &v[1], g)?;
                Ok(vec![ga, gb])
            },
            bug,
        ),
        "conv3d" => conv(name, ConvSpec::cubic(2, 3, 3, 1, 1), [3, 4, 3], false, bug),
        "conv3d_strided" => conv(name, ConvSpec::cubic(2, 2, 3, 2, 1), [4, 4, 6], false, bug),
        "tconv3d" => conv(name, ConvSpec::cubic(3, 2, 2, 2, 0), [2, 3, 2], true, bug),
        "dwconv1d" => op(
            name,
            &["x", "w", "b"],
            vec![t(&[2, 9], 1), t(&[2, 4], 2), t(&[2], 3)],
            |v| nn::dwconv1d(&v[0], &v[1], &v[2]),
            |v, g| {
                let gr = nn::dwconv1d_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias.expect("bias")])
            },
            bug,
        ),
        "dwconv3d" => op(
            name,
            &["x", "w", "b"],
            vec![t(&[2, 3, 4, 3], 1), t(&[2, 1, 3, 3, 3], 2), t(&[2], 3)],
            |v| nn::dwconv3d(&v[0], &v[1], &v[2]),
            |v, g| {
                let gr = nn::dwconv3d_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias.expect("bias")])
            },
            bug,
        ),
        "layer_norm" => op(
            name,
            &["x", "gain", "shift"],
            vec![t(&[4, 6], 1), t(&[6], 2), t(&[6], 3)],
            |v| Ok(nn::layer_norm(&v[0], &v[1], &v[2], 1e-5)?.0),
            |v, g| {
                let (_, c) = nn::layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
                let gr = nn::layer_norm_backward(&c, &v[1], g)?;
                Ok(vec![gr.input, gr.gain, gr.shift])
            },
            bug,
        ),
        "silu" => op(
            name,
            &["x"],
            vec![t(&[3, 5], 1).scale(4.0)],
            |v| Ok(nn::silu(&v[0])),
            |v, g| Ok(vec![nn::silu_backward(&v[0], g)?]),
            bug,
        ),
        "softplus" => op(
            name,
            &["x"],
            vec![t(&[3, 5], 1).scale(4.0)],
            |v| Ok(nn::softplus(&v[0])),
            |v, g| Ok(vec![nn::softplus_backward(&v[0], g)?]),
            bug,
        ),
        "softmax" => op(
            name,
            &["x"],
            vec![t(&[3, 5], 1).scale(2.0)],
            |v| nn::softmax(&v[0]),
            |v, g| Ok(vec![nn::softmax_backward(&nn::softmax(&v[0])?, g)?]),
            bug,
        ),
        "selective_scan" => scan(name, ScanOptions::default(), bug),
        "selective_scan_zoh_parallel" => scan(
            name,
            ScanOptions { discretization: Discretization::Zoh, mode: ScanMode::Parallel },
            bug,
        ),
        "attention_kernel" => op(
            name,
            &["q", "k", "v"],
            vec![t(&[5, 4], 1), t(&[3, 4], 2), t(&[3, 4], 3)],
            |v| Ok(multi_head_attention(&v[0], &v[1], &v[2], 2)?.0),
            |v, g| {
                let (_, c) = multi_head_attention(&v[0], &v[1], &v[2], 2)?;
                let (gq, gk, gv) = multi_head_attention_backward(&c, g)?;
                Ok(vec![gq, gk, gv])
            },
            bug,
        ),
        "dice_ce_loss" => {
            let labels = [0u8, 1, 2, 2, 1, 0, 0, 0, 1, 2, 1, 1];
            op(
                name,
                &["logits"],
                vec![t(&[3, 2, 2, 3], 1).scale(2.0)],
                |v| Ok(Tensor::scalar(super::dice_ce_loss(&v[0], &labels)?.0.total())),
                |v, w| Ok(vec![super::dice_ce_loss(&v[0], &labels)?.1.scale(w.data()[0])]),
                bug,
            )
        }
        "conv_block" => layer(
            name,
            t(&[2, 4, 4, 4], 1),
            6,
            bug,
            |b| ConvBlock::new(b, "f", ConvSpec::cubic(2, 4, 3, 2, 1), false),
            |l, ps, x| l.forward(ps, x),
            |l, ps, c, g, gr| l.backward(ps, c, g, gr),
        ),
        "mamba_1d" => mamba_layer(name, small(4, DwKind::D1), t(&[4, 2, 3, 2], 1), bug),
        "mamba_3d" => mamba_layer(name, small(4, DwKind::D3), t(&[4, 2, 3, 2], 1), bug),
        "mamba_tri" => mamba_layer(
            name,
            MambaConfig { directions: tri, scan: ScanOptions { mode: ScanMode::Parallel, ..Default::default() }, ..small(4, DwKind::D3) },
            t(&[4, 2, 3, 2], 1),
            bug,
        ),
        "mamba_msv4" => mamba_layer(name, MambaConfig { multiscale: true, ..small(2, DwKind::D3) }, t(&[2, 2, 2, 3], 1), bug),
        "attention_vanilla" => attn_layer(name, AttnConfig::new(4, 2, 1), t(&[4, 2, 2, 2], 1), bug),
        "attention_sra" => attn_layer(name, AttnConfig::new(4, 1, 2), t(&[4, 2, 4, 2], 1), bug),
        "attention_sra_pool" => attn_layer(
            name,
            AttnConfig { reduction_kind: crate::blocks::Reduction::AvgPool, ..AttnConfig::new(4, 2, 2) },
            t(&[4, 2, 4, 2], 1),
            bug,
        ),
        "stage_msv1" => stage(name, Multiscale::Msv1, bug),
        "stage_msv2" => stage(name, Multiscale::Msv2, bug),
        "stage_msv3" => stage(name, Multiscale::Msv3, bug),
        "stage_msv4" => stage(name, Multiscale::Msv4, bug),
        "network_mamba_1d" => network(name, tiny_network(Variant::Mamba1d), bug),
        "network_mamba_3d" => network(name, tiny_network(Variant::Mamba3d), bug),
        "network_mamba_3dmt" => network(name, tiny_network(Variant::Mamba3dMt), bug),
        "network_trans_sra" => network(name, tiny_network(Variant::TransSra), bug),
        "network_trans_vanilla" => network(name, tiny_network(Variant::TransVanilla), bug),
        "network_mamba_3d_msv4" => network(
            name,
            NetworkConfig { multiscale: Multiscale::Msv4, multiscale_scope: MsScope::Encoder, ..tiny_network(Variant::Mamba3d) },
            bug,
        ),
        _ => Err(Error::Config(format!(
            "unknown gradient-check component {name:?}; known: {}",
            COMPONENTS.iter().map(|c| c.0).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_and_identity_is_exact() {
        for &(name, _) in COMPONENTS.iter().filter(|c| !c.0.starts_with("network") && !c.0.starts_with("stage")) {
            let r = run_component(name, false).unwrap();
            assert!(r.passed(), "{r}");
        }
        assert_eq!(run_component("identity", false).unwrap().max_rel_err(), 0.0);
    }

    #[test]
    fn injected_bugs_are_caught() {
        for name in ["identity", "linear", "selective_scan", "mamba_3d", "stage_msv2"] {
            let r = run_component(name, true).unwrap();
            assert!(!r.passed(), "{r}");
            assert_eq!(r.component, name);
        }
    }

    #[test]
    fn unknown_components_are_config_errors() {
        assert!(matches!(run_component("nope", false), Err(Error::Config(_))));
        assert!(COMPONENTS.iter().all(|c| tolerance(c.0) == Some(c.1)));
    }
}
