use proptest::prelude::*;

use super::testing::*;
use super::*;
use crate::curvature::CurvatureKind;
use crate::tensor::{ConvGeometry, Tensor};

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn v(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec()).unwrap()
}

fn linear(w: Tensor) -> Layer {
    Layer::Linear(Linear::new(w).unwrap())
}

fn bias(b: &[f64]) -> Layer {
    Layer::Bias(BiasAdd::new(v(b)))
}

fn act(kind: ActivationKind) -> Layer {
    Layer::Activation(Activation::new(kind))
}

fn geom(c: usize, h: usize, w: usize, k: usize) -> ConvGeometry {
    ConvGeometry { channels: c, height: h, width: w, kernel: (k, k), stride: (1, 1), pad: (0, 0) }
}

fn set_param(layers: &mut [Layer], li: usize, slot: usize, theta: &[f64]) {
    let mut ps = layers[li].params_mut();
    ps[slot].data_mut().copy_from_slice(theta);
}

/// FD Hessian of the loss w.r.t. one parameter of a sequence.
fn fd_param_hessian(layers: &[Layer], li: usize, slot: usize, x: &Tensor, y: &Tensor, loss: LossKind) -> Tensor {
    let theta = layers[li].params()[slot].data().to_vec();
    fd_hessian(
        |p| {
            let mut ls = layers.to_vec();
            set_param(&mut ls, li, slot, p);
            loss_value(&ls, x, y, loss)
        },
        &theta,
        1e-4,
    )
}

fn explicit_blocks(layers: &[Layer], caches: &[LayerCache], h: &Tensor, kind: CurvatureKind) -> (Tensor, Vec<Vec<Tensor>>) {
    let (hx, blocks) = sequence_hbp_explicit(layers, caches, h.clone(), kind, true).unwrap();
    (hx.unwrap(), blocks.into_iter().map(|b| b.iter().map(|m| m.to_dense()).collect()).collect())
}

fn matfree_blocks(layers: &[Layer], caches: &[LayerCache], h: &Tensor, kind: CurvatureKind) -> (Tensor, Vec<Vec<Tensor>>) {
    let (hx, ops) = sequence_hbp_matfree(layers, caches, crate::curvature::matrix_operator(h.clone()), kind).unwrap();
    let n = caches[0].input.len();
    let hx = assemble(n, |e| hx(e));
    let blocks = ops
        .iter()
        .zip(layers)
        .map(|(layer_ops, l)| layer_ops.iter().zip(l.params()).map(|(op, p)| assemble(p.len(), |e| op(e))).collect())
        .collect();
    (hx, blocks)
}

fn mlp(seed: u64, sizes: &[usize], kind: ActivationKind) -> Vec<Layer> {
    let mut r = rng(seed);
    let mut layers = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        layers.push(linear(random_tensor(&mut r, &[w[1], w[0]], 1.0)));
        layers.push(Layer::Bias(BiasAdd::new(random_tensor(&mut r, &[w[1]], 0.5))));
        if i + 2 < sizes.len() {
            layers.push(act(kind));
        }
    }
    layers
}

fn conv_net(seed: u64) -> (Vec<Layer>, Tensor) {
    let mut r = rng(seed);
    let g = geom(2, 4, 4, 2);
    let conv = Conv2d::new(random_tensor(&mut r, &[3, g.patch_len()], 1.0), g).unwrap();
    let pool =
        IndexSelect::max_pool(ConvGeometry { channels: 3, height: 3, width: 3, kernel: (2, 2), stride: (1, 1), pad: (0, 0) })
            .unwrap();
    let layers = vec![
        Layer::Conv2d(conv),
        Layer::Bias(BiasAdd::per_channel(random_tensor(&mut r, &[3], 0.5), 9)),
        act(ActivationKind::Sigmoid),
        Layer::IndexSelect(pool),
        Layer::Reshape(Reshape { extents: vec![12] }),
        linear(random_tensor(&mut r, &[2, 12], 1.0)),
    ];
    (layers, random_tensor(&mut r, &[2, 16], 1.0))
}

fn skip_net(seed: u64) -> Vec<Layer> {
    let mut r = rng(seed);
    vec![
        linear(random_tensor(&mut r, &[3, 2], 1.0)),
        Layer::Skip(Skip::new(vec![
            linear(random_tensor(&mut r, &[3, 3], 1.0)),
            bias(&[0.1, -0.2, 0.3]),
            act(ActivationKind::Sigmoid),
        ])),
        act(ActivationKind::Tanh),
        linear(random_tensor(&mut r, &[2, 3], 1.0)),
    ]
}

#[test]
fn forward_examples() {
    let (y, _) = linear(Tensor::identity(2)).forward(&v(&[3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[3.0, 4.0]);
    let (y, _) = act(ActivationKind::Sigmoid).forward(&v(&[0.0])).unwrap();
    assert_eq!(y.data(), &[0.5]);
    let r = Layer::Reshape(Reshape { extents: vec![4] });
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, _) = r.forward(&x).unwrap();
    assert_eq!(y.extents(), &[4]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn forward_shape_mismatch_is_error() {
    let l = linear(Tensor::identity(2));
    assert!(l.forward(&v(&[1.0, 2.0, 3.0])).is_err());
    assert!(bias(&[1.0]).forward(&v(&[1.0, 2.0])).is_err());
}

#[test]
fn vjp_examples() {
    let l = linear(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let (_, cache) = l.forward(&v(&[1.0, 1.0])).unwrap();
    let (gx, gp) = l.vjp(&cache, &v(&[1.0, 0.0])).unwrap();
    assert_eq!(gx.data(), &[1.0, 2.0]);
    // δW = δz xᵀ = [[1, 1], [0, 0]]
    assert_eq!(gp[0].data(), &[1.0, 0.0, 1.0, 0.0]);

    let relu = act(ActivationKind::Relu);
    let (_, cache) = relu.forward(&v(&[1.0, -2.0])).unwrap();
    let (gx, _) = relu.vjp(&cache, &v(&[5.0, 7.0])).unwrap();
    assert_eq!(gx.data(), &[5.0, 0.0]);

    let b = bias(&[0.5, 0.5]);
    let (_, cache) = b.forward(&v(&[1.0, 2.0])).unwrap();
    let (gx, gp) = b.vjp(&cache, &v(&[3.0, -1.0])).unwrap();
    assert_eq!(gx.data(), &[3.0, -1.0]);
    assert_eq!(gp[0].data(), &[3.0, -1.0]);
}

#[test]
fn vjp_matches_fd_gradient() {
    let layers = mlp(3, &[3, 4, 2], ActivationKind::Tanh);
    let x = v(&[0.3, -0.7, 0.2]);
    let y = v(&[1.0, -1.0]);
    let (caches, _) = run(&layers, &x, &y, LossKind::Square);
    let (out, _) = sequence_forward(&layers, &x).unwrap();
    let g = loss_forward_grad_hess(LossKind::Square, &out, &y).unwrap().grad;
    let mut cs = caches.clone();
    let (gx, gp) = sequence_backward(&layers, &mut cs, &g).unwrap();
    let fx = fd_gradient(|p| loss_value(&layers, &v(p), &y, LossKind::Square), x.data(), 1e-6);
    for (a, b) in gx.data().iter().zip(&fx) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
    for li in [0, 3] {
        let theta = layers[li].params()[0].data().to_vec();
        let fp = fd_gradient(
            |p| {
                let mut ls = layers.clone();
                set_param(&mut ls, li, 0, p);
                loss_value(&ls, &x, &y, LossKind::Square)
            },
            &theta,
            1e-6,
        );
        for (a, b) in gp[li][0].data().iter().zip(&fp) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn linear_hbp_example() {
    let l = linear(t(&[vec![1.0, -1.0]]));
    let (_, cache) = l.forward(&v(&[1.0, 2.0])).unwrap();
    let h = t(&[vec![3.0]]);
    let out = l.hbp_explicit(&cache, &h, &v(&[0.0]), CurvatureKind::HessianExact, true).unwrap();
    assert_eq!(out.params[0].to_dense().data(), t(&[vec![3.0, 6.0], vec![6.0, 12.0]]).data());
    assert_eq!(out.input.unwrap().data(), t(&[vec![3.0, -3.0], vec![-3.0, 3.0]]).data());
}

#[test]
fn sigmoid_hbp_example() {
    let a = act(ActivationKind::Sigmoid);
    let (_, cache) = a.forward(&v(&[0.0])).unwrap();
    let out = a.hbp_explicit(&cache, &t(&[vec![1.0]]), &v(&[0.0]), CurvatureKind::HessianExact, true).unwrap();
    assert_eq!(out.input.unwrap().data(), &[0.0625]);
}

#[test]
fn activation_second_derivatives_match_fd() {
    for kind in [ActivationKind::Sigmoid, ActivationKind::Tanh] {
        for x in [-3.0, -0.4, 0.0, 0.9, 2.5] {
            let (_, d1, d2) = kind.eval(x);
            let h = 1e-5;
            let fd1 = (kind.eval(x + h).0 - kind.eval(x - h).0) / (2.0 * h);
            let fd2 = (kind.eval(x + h).1 - kind.eval(x - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-9);
            assert!((d2 - fd2).abs() < 1e-9);
        }
    }
    assert_eq!(ActivationKind::Sigmoid.eval(1000.0).0, 1.0);
    assert_eq!(ActivationKind::Sigmoid.eval(-1000.0).0, 0.0);
}

#[test]
fn index_select_hbp_is_permutation_sandwich() {
    let s = Layer::IndexSelect(IndexSelect::fixed(vec![2, 0], 3).unwrap());
    let (z, cache) = s.forward(&v(&[1.0, 2.0, 3.0])).unwrap();
    assert_eq!(z.data(), &[3.0, 1.0]);
    let h = t(&[vec![1.0, 2.0], vec![2.0, 5.0]]);
    let hx = s.hbp_explicit(&cache, &h, &v(&[0.0, 0.0]), CurvatureKind::Ggn, true).unwrap().input.unwrap();
    let pi = t(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
    assert_eq!(hx.data(), h.sandwich(&pi).unwrap().data());
    assert!(IndexSelect::fixed(vec![3], 3).is_err());
}

#[test]
fn max_pool_ties_select_lowest_index() {
    let g = ConvGeometry { channels: 1, height: 2, width: 2, kernel: (2, 2), stride: (2, 2), pad: (0, 0) };
    let p = Layer::IndexSelect(IndexSelect::max_pool(g).unwrap());
    let x = Tensor::new(&[1, 4], vec![1.0, 4.0, 4.0, 0.0]).unwrap();
    let (z, cache) = p.forward(&x).unwrap();
    assert_eq!(z.data(), &[4.0]);
    let (gx, _) = p.vjp(&cache, &v(&[1.0])).unwrap();
    assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn square_loss_examples() {
    let l = loss_forward_grad_hess(LossKind::Square, &v(&[1.0, 2.0]), &v(&[0.0, 0.0])).unwrap();
    assert_eq!(l.value, 5.0);
    assert_eq!(l.grad.data(), &[2.0, 4.0]);
    assert_eq!(l.hessian.data(), Tensor::identity(2).scale(2.0).data());
}

#[test]
fn cross_entropy_examples() {
    let l = loss_forward_grad_hess(LossKind::SoftmaxCrossEntropy, &v(&[0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
    assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(l.grad.data(), &[-0.5, 0.5]);
    assert_eq!(l.hessian.data(), t(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).data());
    assert!(loss_forward_grad_hess(LossKind::SoftmaxCrossEntropy, &v(&[0.0, 0.0]), &v(&[0.7, 0.7])).is_err());
    assert!(loss_forward_grad_hess(LossKind::Square, &v(&[0.0, 0.0]), &v(&[0.0])).is_err());
    let big = loss_forward_grad_hess(LossKind::SoftmaxCrossEntropy, &v(&[800.0, -800.0]), &v(&[0.0, 1.0])).unwrap();
    assert!((big.value - 1600.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_hessian_rows_sum_to_zero_and_psd() {
    let mut r = rng(11);
    for _ in 0..20 {
        let x = random_tensor(&mut r, &[5], 4.0);
        let l = loss_forward_grad_hess(LossKind::SoftmaxCrossEntropy, &x, &v(&[0.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        for i in 0..5 {
            let s: f64 = (0..5).map(|j| l.hessian.at(i, j)).sum();
            assert!(s.abs() < 1e-15);
        }
        assert!(min_eig(&l.hessian) >= -1e-15);
        let fd = fd_hessian(
            |p| loss_forward_grad_hess(LossKind::SoftmaxCrossEntropy, &v(p), &v(&[0.0, 0.0, 1.0, 0.0, 0.0])).unwrap().value,
            x.data(),
            1e-4,
        );
        assert!(rel_err(&fd, &l.hessian) < 1e-5);
    }
}

#[test]
fn linear_modules_have_no_second_term() {
    let (layers, x) = conv_net(5);
    let y = v(&[0.2, -0.1]);
    let (caches, _) = run(&layers, &x, &y, LossKind::Square);
    for (l, c) in layers.iter().zip(&caches) {
        if matches!(l, Layer::Activation(_)) {
            continue;
        }
        assert!(l.second_input(c, c.grad_out().unwrap(), CurvatureKind::HessianExact).unwrap().is_none());
        assert!(l.second_params(c, CurvatureKind::HessianExact).unwrap().iter().all(Option::is_none));
    }
}

fn check_explicit_matches_matfree(layers: &[Layer], x: &Tensor, y: &Tensor, loss: LossKind) {
    let (caches, l) = run(layers, x, y, loss);
    for kind in CurvatureKind::ALL {
        let (ex, eb) = explicit_blocks(layers, &caches, &l.hessian, kind);
        let (mx, mb) = matfree_blocks(layers, &caches, &l.hessian, kind);
        let scale = ex.max_abs().max(1.0);
        assert!(ex.max_abs_diff(&mx) <= 1e-12 * scale, "{kind}: input {}", ex.max_abs_diff(&mx));
        assert!(crate::tensor::symmetry_defect(&ex).unwrap() <= 1e-10 * scale);
        for (li, (a, b)) in eb.iter().zip(&mb).enumerate() {
            for (p, q) in a.iter().zip(b) {
                let s = p.max_abs().max(1.0);
                assert!(p.max_abs_diff(q) <= 1e-12 * s, "{kind}: layer {li} {}", p.max_abs_diff(q));
                assert!(crate::tensor::symmetry_defect(p).unwrap() <= 1e-10 * s);
            }
        }
    }
}

#[test]
fn explicit_matches_matfree_mlp() {
    for (seed, kind) in [(1, ActivationKind::Sigmoid), (2, ActivationKind::Tanh), (3, ActivationKind::Relu)] {
        let layers = mlp(seed, &[3, 4, 3, 2], kind);
        check_explicit_matches_matfree(&layers, &v(&[0.5, -1.0, 0.25]), &v(&[0.0, 1.0]), LossKind::SoftmaxCrossEntropy);
        check_explicit_matches_matfree(&layers, &v(&[0.5, -1.0, 0.25]), &v(&[0.3, 1.0]), LossKind::Square);
    }
}

#[test]
fn explicit_matches_matfree_conv() {
    let (layers, x) = conv_net(7);
    check_explicit_matches_matfree(&layers, &x, &v(&[0.2, -0.7]), LossKind::Square);
}

#[test]
fn explicit_matches_matfree_skip() {
    let layers = skip_net(9);
    check_explicit_matches_matfree(&layers, &v(&[0.4, -0.3]), &v(&[0.0, 1.0]), LossKind::SoftmaxCrossEntropy);
}

fn check_exact_matches_fd(layers: &[Layer], x: &Tensor, y: &Tensor, loss: LossKind, tol: f64) {
    let (caches, l) = run(layers, x, y, loss);
    let (hx, blocks) = explicit_blocks(layers, &caches, &l.hessian, CurvatureKind::HessianExact);
    let fx = fd_hessian(|p| loss_value(layers, &v(p).reshape(x.extents()).unwrap(), y, loss), x.data(), 1e-4);
    assert!(rel_err(&hx, &fx) < tol, "input rel err {}", rel_err(&hx, &fx));
    for (li, bs) in blocks.iter().enumerate() {
        for (slot, b) in bs.iter().enumerate() {
            let fd = fd_param_hessian(layers, li, slot, x, y, loss);
            assert!(rel_err(b, &fd) < tol, "layer {li} slot {slot}: {}", rel_err(b, &fd));
        }
    }
}

#[test]
fn exact_hessian_matches_fd_mlp() {
    let layers = mlp(21, &[4, 3, 2], ActivationKind::Sigmoid);
    check_exact_matches_fd(&layers, &v(&[0.1, 0.9, -0.5, 0.3]), &v(&[1.0, 0.0]), LossKind::Square, 1e-5);
    let layers = mlp(22, &[3, 3, 3], ActivationKind::Tanh);
    check_exact_matches_fd(&layers, &v(&[0.1, 0.9, -0.5]), &v(&[0.0, 0.0, 1.0]), LossKind::SoftmaxCrossEntropy, 1e-5);
}

#[test]
fn skip_exact_hessian_matches_fd() {
    let mut r = rng(4);
    let layers = vec![Layer::Skip(Skip::new(vec![
        linear(random_tensor(&mut r, &[2, 2], 1.5)),
        bias(&[0.2, -0.4]),
        act(ActivationKind::Sigmoid),
    ]))];
    check_exact_matches_fd(&layers, &v(&[0.7, -0.2]), &v(&[1.0, 0.5]), LossKind::Square, 1e-5);
    check_exact_matches_fd(&skip_net(5), &v(&[0.7, -0.2]), &v(&[1.0, 0.0]), LossKind::SoftmaxCrossEntropy, 1e-5);
}

#[test]
fn skip_examples() {
    let x = v(&[0.3, -0.8]);
    let y = v(&[0.0, 0.0]);
    let h = t(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
    let zero = Skip::new(vec![linear(Tensor::zeros(&[2, 2]))]);
    let (_, mut cache) = Layer::Skip(zero.clone()).forward(&x).unwrap();
    let layer = Layer::Skip(zero);
    layer.backward(&mut cache, &y).unwrap();
    let hx = layer.hbp_explicit(&cache, &h, &y, CurvatureKind::HessianExact, true).unwrap().input.unwrap();
    assert_eq!(hx.data(), h.data());

    let a = t(&[vec![1.0, 2.0], vec![0.0, -1.0]]);
    let lin = Layer::Skip(Skip::new(vec![linear(a.clone())]));
    let (_, mut cache) = lin.forward(&x).unwrap();
    lin.backward(&mut cache, &v(&[0.3, 0.1])).unwrap();
    let hx = lin.hbp_explicit(&cache, &h, &v(&[0.3, 0.1]), CurvatureKind::HessianExact, true).unwrap().input.unwrap();
    let ia = a.add(&Tensor::identity(2)).unwrap();
    assert!(hx.max_abs_diff(&h.sandwich(&ia).unwrap()) < 1e-15);
}

#[test]
fn conv_exact_hessian_matches_fd() {
    let mut r = rng(8);
    let g = geom(1, 3, 3, 2);
    let layers = vec![Layer::Conv2d(Conv2d::new(random_tensor(&mut r, &[1, 4], 1.0), g).unwrap()), act(ActivationKind::Sigmoid)];
    let x = random_tensor(&mut r, &[1, 9], 1.0);
    check_exact_matches_fd(&layers, &x, &v(&[0.1, 0.9, 0.4, 0.3]), LossKind::Square, 1e-5);
    let (layers, x) = conv_net(12);
    check_exact_matches_fd(&layers, &x, &v(&[0.5, -0.5]), LossKind::Square, 1e-5);
}

#[test]
fn conv_one_by_one_equals_linear() {
    let w = t(&[vec![0.5, -1.5]]);
    let g = geom(2, 1, 1, 1);
    let conv = Layer::Conv2d(Conv2d::new(w.clone(), g).unwrap());
    let lin = linear(w);
    let x = Tensor::new(&[2, 1], vec![0.3, 0.8]).unwrap();
    let h = t(&[vec![1.7]]);
    let (_, cc) = conv.forward(&x).unwrap();
    let (_, lc) = lin.forward(&v(&[0.3, 0.8])).unwrap();
    let a = conv.hbp_explicit(&cc, &h, &v(&[0.0]), CurvatureKind::HessianExact, true).unwrap();
    let b = lin.hbp_explicit(&lc, &h, &v(&[0.0]), CurvatureKind::HessianExact, true).unwrap();
    assert!(a.input.unwrap().max_abs_diff(b.input.as_ref().unwrap()) < 1e-15);
    assert!(a.params[0].to_dense().max_abs_diff(&b.params[0].to_dense()) < 1e-15);
}

#[test]
fn conv_zero_hessian_and_gradient_give_zero_blocks() {
    let mut r = rng(2);
    let g = geom(1, 3, 3, 2);
    let conv = Layer::Conv2d(Conv2d::new(random_tensor(&mut r, &[2, 4], 1.0), g).unwrap());
    let (_, c) = conv.forward(&random_tensor(&mut r, &[1, 9], 1.0)).unwrap();
    let out = conv.hbp_explicit(&c, &Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8]), CurvatureKind::HessianExact, true).unwrap();
    assert_eq!(out.input.unwrap().max_abs(), 0.0);
    assert_eq!(out.params[0].to_dense().max_abs(), 0.0);
}

#[test]
fn conv_weight_shape_checked() {
    assert!(Conv2d::new(Tensor::zeros(&[1, 3]), geom(1, 3, 3, 2)).is_err());
}

#[test]
fn relu_ggn_equals_exact() {
    let layers = mlp(31, &[3, 5, 2], ActivationKind::Relu);
    let (caches, l) = run(&layers, &v(&[0.4, -0.2, 1.0]), &v(&[0.0, 1.0]), LossKind::SoftmaxCrossEntropy);
    let (_, exact) = explicit_blocks(&layers, &caches, &l.hessian, CurvatureKind::HessianExact);
    let (_, ggn) = explicit_blocks(&layers, &caches, &l.hessian, CurvatureKind::Ggn);
    for (a, b) in exact.iter().flatten().zip(ggn.iter().flatten()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn hbp_rejects_bad_output_hessian() {
    let l = linear(Tensor::identity(2));
    let (_, c) = l.forward(&v(&[1.0, 1.0])).unwrap();
    let g = v(&[0.0, 0.0]);
    assert!(l.hbp_explicit(&c, &Tensor::identity(3), &g, CurvatureKind::Ggn, true).is_err());
    assert!(l.hbp_explicit(&c, &t(&[vec![1.0, 2.0], vec![0.0, 1.0]]), &g, CurvatureKind::Ggn, true).is_err());
}

#[test]
fn missing_gradient_pass_is_error() {
    let layers = mlp(1, &[2, 2], ActivationKind::Sigmoid);
    let (_, caches) = sequence_forward(&layers, &v(&[1.0, 1.0])).unwrap();
    assert!(sequence_hbp_explicit(&layers, &caches, Tensor::identity(2), CurvatureKind::Ggn, false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn psd_kinds_give_psd_blocks(seed in 0u64..10_000) {
        let layers = mlp(seed, &[3, 3, 3], ActivationKind::Sigmoid);
        let mut r = rng(seed ^ 0xa5);
        let x = random_tensor(&mut r, &[3], 2.0);
        let (caches, l) = run(&layers, &x, &v(&[0.0, 1.0, 0.0]), LossKind::SoftmaxCrossEntropy);
        for kind in [CurvatureKind::Ggn, CurvatureKind::PchClip, CurvatureKind::PchAbs] {
            let (_, blocks) = explicit_blocks(&layers, &caches, &l.hessian, kind);
            for b in blocks.iter().flatten() {
                prop_assert!(min_eig(b) >= -1e-10 * b.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn explicit_output_is_symmetric(seed in 0u64..10_000) {
        let layers = mlp(seed, &[2, 3, 2], ActivationKind::Tanh);
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2], 1.0);
        let (caches, _) = run(&layers, &x, &v(&[0.5, 0.5]), LossKind::Square);
        let h = random_symmetric(&mut r, 2);
        let (hx, blocks) = explicit_blocks(&layers, &caches, &h, CurvatureKind::HessianExact);
        prop_assert!(crate::tensor::symmetry_defect(&hx).unwrap() <= 1e-12);
        for b in blocks.iter().flatten() {
            prop_assert!(crate::tensor::symmetry_defect(b).unwrap() <= 1e-12);
        }
    }
}
