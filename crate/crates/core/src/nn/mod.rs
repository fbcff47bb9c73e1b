//! Layer primitives with forward maps and their adjoints.

mod act;
mod conv;
mod linear;
mod norm;

pub use act::{
    inv_softplus, sigmoid, sigmoid_scalar, silu, silu_backward, silu_grad_scalar, silu_scalar,
    softmax, softmax_backward, softplus, softplus_backward, softplus_scalar,
};
pub(crate) use act::{softmax_row, softmax_row_backward};
pub use conv::{
    conv3d, conv3d_backward, dwconv1d, dwconv1d_backward, dwconv3d, dwconv3d_backward, tconv3d,
    tconv3d_backward, ConvGrads, ConvSpec,
};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{layer_norm, layer_norm_backward, NormCache, NormGrads, NormSpec};

#[cfg(test)]
mod adjoint_tests {
    use super::*;
    use crate::gradcheck::{check, dyadic_tensor};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn conv_case(spec: ConvSpec, input: [usize; 3], transposed: bool, seed: u64) {
        let mut r = rng(seed);
        let x = dyadic_tensor(&[spec.in_channels, input[0], input[1], input[2]], &mut r);
        let wshape = if transposed { spec.tconv_weight_shape() } else { spec.weight_shape() };
        let w = dyadic_tensor(&wshape, &mut r);
        let b = dyadic_tensor(&[spec.out_channels], &mut r);
        let fwd = |v: &[Tensor<f64>]| {
            if transposed {
                tconv3d(&v[0], &spec, &v[1], Some(&v[2]))
            } else {
                conv3d(&v[0], &spec, &v[1], Some(&v[2]))
            }
        };
        let rep = check(
            "conv",
            &["x", "w", "b"],
            vec![x, w, b],
            fwd,
            |v, g| {
                let gr = if transposed {
                    tconv3d_backward(&v[0], &spec, &v[1], g)?
                } else {
                    conv3d_backward(&v[0], &spec, &v[1], g)?
                };
                Ok(vec![gr.input, gr.weight, gr.bias.unwrap()])
            },
            40,
            TOL,
            seed,
        )
        .unwrap();
        assert!(rep.passed(), "{spec:?} transposed={transposed}\n{rep}");
    }

    #[test]
    fn conv_adjoints() {
        conv_case(ConvSpec::cubic(2, 3, 3, 1, 1), [4, 4, 4], false, 1);
        conv_case(ConvSpec::cubic(2, 3, 3, 2, 1), [5, 4, 6], false, 2);
        conv_case(
            ConvSpec { groups: 3, ..ConvSpec::cubic(3, 3, 3, 1, 1) },
            [3, 4, 5],
            false,
            3,
        );
        conv_case(ConvSpec::cubic(3, 2, 2, 2, 0), [2, 3, 2], true, 4);
        conv_case(ConvSpec::cubic(2, 2, 3, 2, 1), [2, 2, 3], true, 5);
    }

    #[test]
    fn dwconv_adjoints() {
        let mut r = rng(6);
        let x = dyadic_tensor(&[2, 9], &mut r);
        let w = dyadic_tensor(&[2, 4], &mut r);
        let b = dyadic_tensor(&[2], &mut r);
        let rep = check(
            "dwconv1d",
            &["x", "w", "b"],
            vec![x, w, b],
            |v| dwconv1d(&v[0], &v[1], &v[2]),
            |v, g| {
                let gr = dwconv1d_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias.unwrap()])
            },
            30,
            TOL,
            6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");

        let x = dyadic_tensor(&[2, 3, 4, 5], &mut r);
        let w = dyadic_tensor(&[2, 1, 5, 5, 5], &mut r);
        let b = dyadic_tensor(&[2], &mut r);
        let rep = check(
            "dwconv3d",
            &["x", "w", "b"],
            vec![x, w, b],
            |v| dwconv3d(&v[0], &v[1], &v[2]),
            |v, g| {
                let gr = dwconv3d_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias.unwrap()])
            },
            40,
            TOL,
            7,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn linear_and_norm_adjoints() {
        let mut r = rng(8);
        let x = dyadic_tensor(&[5, 4], &mut r);
        let w = dyadic_tensor(&[4, 3], &mut r);
        let b = dyadic_tensor(&[3], &mut r);
        let rep = check(
            "linear",
            &["x", "w", "b"],
            vec![x, w, b],
            |v| linear(&v[0], &v[1], Some(&v[2])),
            |v, g| {
                let gr = linear_backward(&v[0], &v[1], g)?;
                Ok(vec![gr.input, gr.weight, gr.bias])
            },
            20,
            1e-6,
            8,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");

        let x = dyadic_tensor(&[4, 6], &mut r);
        let gn = dyadic_tensor(&[6], &mut r);
        let sh = dyadic_tensor(&[6], &mut r);
        let rep = check(
            "layer_norm",
            &["x", "gain", "shift"],
            vec![x, gn, sh],
            |v| layer_norm(&v[0], &v[1], &v[2], 1e-5).map(|r| r.0),
            |v, g| {
                let (_, c) = layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
                let gr = layer_norm_backward(&c, &v[1], g)?;
                Ok(vec![gr.input, gr.gain, gr.shift])
            },
            24,
            TOL,
            9,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn activation_adjoints() {
        let mut r = rng(10);
        let x = dyadic_tensor(&[3, 5], &mut r).scale(4.0);
        for (name, f, b) in [
            ("silu", silu::<f64> as fn(&Tensor<f64>) -> Tensor<f64>, silu_backward::<f64> as fn(&Tensor<f64>, &Tensor<f64>) -> crate::Result<Tensor<f64>>),
            ("softplus", softplus::<f64>, softplus_backward::<f64>),
        ] {
            let rep = check(name, &["x"], vec![x.clone()], |v| Ok(f(&v[0])), |v, g| Ok(vec![b(&v[0], g)?]), 15, TOL, 11)
                .unwrap();
            assert!(rep.passed(), "{rep}");
        }
        let rep = check(
            "softmax",
            &["x"],
            vec![x],
            |v| softmax(&v[0]),
            |v, g| Ok(vec![softmax_backward(&softmax(&v[0])?, g)?]),
            15,
            TOL,
            12,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
    }
}
