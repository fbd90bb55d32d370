use lpdet_autodiff::{Tape, Tensor, TensorError, WarpRegion};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv_identity_kernel_preserves_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 3, 3], vec![1.0; 9]));
    let w = tape.param(t(&[1, 1, 1, 1], vec![1.0]));
    let b = tape.param(t(&[1], vec![0.0]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y).data(), &[1.0; 9]);
}

#[test]
fn conv_same_padding_and_stride_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let w = tape.param(Tensor::zeros(vec![2, 1, 3, 3]));
    let b = tape.param(Tensor::zeros(vec![2]));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    let y2 = tape.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y2), &[1, 2, 2, 2]);
}

#[test]
fn conv_rejects_channel_mismatch_and_zero_stride() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.param(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = tape.param(Tensor::zeros(vec![1]));
    assert!(matches!(
        tape.conv2d(x, w, b, 1, 1),
        Err(TensorError::ChannelMismatch { input: 2, weight: 3 })
    ));
    let w2 = tape.param(Tensor::zeros(vec![1, 2, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w2, b, 0, 1),
        Err(TensorError::InvalidStride { .. })
    ));
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.param(Tensor::full(vec![1, 2, 4, 4], 7.0));
    let yc = tape.maxpool2d(c, 2, 2).unwrap();
    assert!(tape.value(yc).data().iter().all(|&v| v == 7.0));

    assert!(matches!(
        tape.maxpool2d(x, 3, 1),
        Err(TensorError::WindowTooLarge { .. })
    ));
}

#[test]
fn maxpool_ties_route_gradient_to_first_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn relu_and_linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], vec![-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let z = tape.param(t(&[1], vec![0.0]));
    let rz = tape.relu(z).unwrap();
    let l = tape.sum(rz).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[0.0]);

    let mut tape = Tape::<f64>::new();
    let input = tape.param(t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.param(t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zero = tape.param(Tensor::zeros(vec![3]));
    let out = tape.linear(input, eye, zero).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(input).data());
    let bad = tape.param(Tensor::zeros(vec![3, 2]));
    assert!(tape.linear(input, bad, zero).is_err());
}

#[test]
fn l2norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[1, 2, 1, 1], vec![3.0, 4.0]));
    let s = tape.param(t(&[2], vec![1.0, 1.0]));
    let y = tape.l2norm(x, s).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-9 && (v[1] - 0.8).abs() < 1e-9);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![1, 3, 1, 1]));
    let s = tape.param(Tensor::full(vec![3], 20.0));
    let y = tape.l2norm(x, s).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.is_finite()));
    assert!(tape.grad(s).unwrap().iter().all(|g| g.is_finite()));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[3], vec![1.0, -2.0, 0.5]));
    let l = tape.sum(x).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(tape.backward(l), Err(TensorError::BackwardTwice));
    tape.reset_grads();
    tape.backward(l).unwrap();

    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], vec![1.0, 2.0]));
    let y = tape.add(x, x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    assert!(matches!(
        {
            let mut t2 = Tape::new();
            let v = t2.param(Tensor::<f64>::zeros(vec![2]));
            t2.backward(v)
        },
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn vars_from_other_tapes_are_rejected() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.param(Tensor::zeros(vec![1]));
    let _ = b.param(Tensor::zeros(vec![1]));
    assert_eq!(b.relu(x), Err(TensorError::ForeignVar));
}

#[test]
fn non_finite_inputs_are_errors() {
    assert!(matches!(
        Tensor::new(vec![1], vec![f64::NAN]),
        Err(TensorError::NonFinite { .. })
    ));
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[1], vec![1e300]));
    assert!(matches!(
        tape.scale(x, 1e300),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn roi_warp_aligned_block_is_copied() {
    let (h, w, s) = (8usize, 8usize, 4usize);
    let data: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
    let mut tape = Tape::<f64>::new();
    let f = tape.param(t(&[1, 1, h, w], data.clone()));
    let region = WarpRegion {
        batch: 0,
        x0: 2.0 / w as f64,
        y0: 3.0 / h as f64,
        x1: 6.0 / w as f64,
        y1: 7.0 / h as f64,
    };
    let y = tape.roi_warp(f, &[region], s).unwrap();
    let out = tape.value(y).data();
    for i in 0..s {
        for j in 0..s {
            assert!((out[i * s + j] - data[(3 + i) * w + 2 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn roi_warp_constant_map_gives_constant_patch() {
    let mut tape = Tape::<f64>::new();
    let f = tape.param(Tensor::full(vec![2, 3, 5, 7], 0.25));
    let r = WarpRegion {
        batch: 1,
        x0: 0.1,
        y0: 0.2,
        x1: 0.95,
        y1: 0.6,
    };
    let y = tape.roi_warp(f, &[r, WarpRegion { batch: 0, ..r }], 6).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 6, 6]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let bad = WarpRegion { x1: 0.1, ..r };
    assert!(matches!(
        tape.roi_warp(f, &[bad], 6),
        Err(TensorError::InvalidRegion { index: 0 })
    ));
}

#[test]
fn flatten_head_orders_rows_by_cell_then_anchor() {
    // 2 anchors x 3 values on a 1x2 map.
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let x = tape.param(t(&[1, 6, 1, 2], data));
    let y = tape.flatten_head(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 3]);
    // channel c at cell x is stored at c*2 + x.
    let expect: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .iter()
        .flat_map(|&(cell, a)| (0..3).map(move |k| ((a * 3 + k) * 2 + cell) as f64))
        .collect();
    assert_eq!(tape.value(y).data(), expect.as_slice());
}

#[test]
fn loss_ops_examples() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.param(t(&[2, 2], vec![0.0, 0.0, 0.0, 20.0]));
    let eq = tape.softmax_ce(logits, &[1, 0], &[true, false]).unwrap();
    assert!((tape.value(eq).data()[0] - 2f64.ln()).abs() < 1e-12);
    let sat = tape.softmax_ce(logits, &[0, 1], &[false, true]).unwrap();
    assert!(tape.value(sat).data()[0] < 1e-8);
    assert!(matches!(
        tape.softmax_ce(logits, &[0, 1], &[false, false]),
        Err(TensorError::EmptySelection { .. })
    ));

    let z = tape.param(t(&[2], vec![0.0, -10.0]));
    let b1 = tape.bce_logits(z, &[1.0, 0.0], &[true, false]).unwrap();
    assert!((tape.value(b1).data()[0] - 2f64.ln()).abs() < 1e-12);
    let b2 = tape.bce_logits(z, &[1.0, 0.0], &[false, true]).unwrap();
    assert!((tape.value(b2).data()[0] - (-10f64).exp().ln_1p()).abs() < 1e-15);
    assert!((tape.value(b2).data()[0] - 4.54e-5).abs() < 1e-7);

    let p = tape.param(t(&[1, 3], vec![0.0, 0.5, 2.0]));
    let l = tape.smooth_l1(p, &[0.0; 3], &[1.0]).unwrap();
    assert!((tape.value(l).data()[0] - (0.125 + 1.5)).abs() < 1e-15);
}
