//! Central-difference gradient suites shared by the focused tests and the
//! acceptance runner. Each entry is (check name, worst relative error).

use rand::Rng;
use sparamdx_core::models::{
    build_cnn, build_mlp, build_transformer, ArchKind, ArchitectureDescriptor, Hyper, Model, Scale, TransformerConfig,
};
use sparamdx_core::tensor::{Graph, Tensor};

use super::{gradcheck, project, random_tensor, rel_err, rng, FD_STEP};

fn record(out: &mut Vec<(String, f64)>, name: &str, err: f64) {
    out.push((name.to_string(), err));
}

/// Every differentiable graph primitive.
pub fn primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    matmul_and_batch_matmul(&mut out);
    elementwise_ops(&mut out);
    shape_ops(&mut out);
    convolutions(&mut out);
    layernorm_dropout_cross_entropy(&mut out);
    out
}

fn matmul_and_batch_matmul(out: &mut Vec<(String, f64)>) {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let w = random_tensor(&mut r, &[4, 5], 1.0);
    record(
        out,
        "matmul",
        gradcheck(&[a, w], false, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 100)
        }),
    );

    let a = random_tensor(&mut r, &[2, 2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[2, 2, 4, 5], 1.0);
    record(
        out,
        "batch_matmul",
        gradcheck(&[a.clone(), b], false, |g, v| {
            let y = g.batch_matmul(v[0], v[1], false).unwrap();
            project(g, y, 101)
        }),
    );
    let bt = random_tensor(&mut r, &[2, 2, 5, 4], 1.0);
    record(
        out,
        "batch_matmul_t",
        gradcheck(&[a, bt], false, |g, v| {
            let y = g.batch_matmul(v[0], v[1], true).unwrap();
            project(g, y, 102)
        }),
    );
}

fn elementwise_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[3, 4], 2.0);
    let b = random_tensor(&mut r, &[3, 4], 2.0);
    let bias = random_tensor(&mut r, &[4], 1.0);
    record(
        out,
        "add",
        gradcheck(&[a.clone(), b.clone()], false, |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, 1)
        }),
    );
    record(
        out,
        "add_broadcast",
        gradcheck(&[a.clone(), bias], false, |g, v| {
            let y = g.add_broadcast(v[0], v[1]).unwrap();
            project(g, y, 2)
        }),
    );
    record(
        out,
        "mul",
        gradcheck(&[a.clone(), b], false, |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, 3)
        }),
    );
    record(
        out,
        "scale",
        gradcheck(&[a.clone()], false, |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 4)
        }),
    );
    for (name, which) in [("gelu", 0), ("silu", 1), ("sigmoid", 2), ("softmax", 3)] {
        record(
            out,
            name,
            gradcheck(&[a.clone()], false, |g, v| {
                let y = match which {
                    0 => g.gelu(v[0]),
                    1 => g.silu(v[0]),
                    2 => g.sigmoid(v[0]),
                    _ => g.softmax(v[0]),
                };
                project(g, y, 5)
            }),
        );
    }
    record(out, "sum", gradcheck(&[a], false, |g, v| g.sum(v[0])));
}

fn shape_ops(out: &mut Vec<(String, f64)>) {
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    record(
        out,
        "reshape",
        gradcheck(&[a.clone()], false, |g, v| {
            let y = g.reshape(v[0], &[6, 4]).unwrap();
            project(g, y, 6)
        }),
    );
    record(
        out,
        "permute",
        gradcheck(&[a.clone()], false, |g, v| {
            let y = g.permute(v[0], &[2, 0, 1]).unwrap();
            project(g, y, 7)
        }),
    );
    record(
        out,
        "mean_axis1",
        gradcheck(&[a], false, |g, v| {
            let y = g.mean_axis1(v[0]).unwrap();
            project(g, y, 8)
        }),
    );
}

fn convolutions(out: &mut Vec<(String, f64)>) {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 9, 3], 1.0);
    let w = random_tensor(&mut r, &[3, 3, 4], 1.0);
    let dw = random_tensor(&mut r, &[3, 3], 1.0);
    for stride in [1, 2] {
        for padding in [0, 1] {
            record(
                out,
                "conv1d",
                gradcheck(&[x.clone(), w.clone()], false, |g, v| {
                    let y = g.conv1d(v[0], v[1], stride, padding).unwrap();
                    project(g, y, 9)
                }),
            );
            record(
                out,
                "depthwise",
                gradcheck(&[x.clone(), dw.clone()], false, |g, v| {
                    let y = g.depthwise_conv1d(v[0], v[1], stride, padding).unwrap();
                    project(g, y, 10)
                }),
            );
        }
    }
    let s = random_tensor(&mut r, &[2, 3], 1.0);
    record(
        out,
        "scale_channels",
        gradcheck(&[x, s], false, |g, v| {
            let y = g.scale_channels(v[0], v[1]).unwrap();
            project(g, y, 11)
        }),
    );
}

fn layernorm_dropout_cross_entropy(out: &mut Vec<(String, f64)>) {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 6], 2.0);
    let gamma = random_tensor(&mut r, &[6], 1.5);
    let beta = random_tensor(&mut r, &[6], 1.0);
    record(
        out,
        "layernorm",
        gradcheck(&[x.clone(), gamma, beta], false, |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-5).unwrap();
            project(g, y, 12)
        }),
    );
    record(
        out,
        "dropout",
        gradcheck(&[x], true, |g, v| {
            let y = g.dropout(v[0], 0.3).unwrap();
            project(g, y, 13)
        }),
    );
    let logits = random_tensor(&mut r, &[4, 7], 3.0);
    record(out, "cross_entropy", gradcheck(&[logits], false, |g, v| g.cross_entropy(v[0], &[0, 3, 6, 3]).unwrap()));
}

pub fn model_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone());
    let out = model.forward_graph(&mut g, xv).unwrap();
    let l = g.cross_entropy(out.logits, labels).unwrap();
    g.value(l).data()[0]
}

/// Finite-difference check on `n` randomly chosen parameter scalars.
pub fn param_gradcheck(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], n: usize, seed: u64) -> f64 {
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone());
    let out = model.forward_graph(&mut g, xv).unwrap();
    let l = g.cross_entropy(out.logits, labels).unwrap();
    let grads = g.backward(l).unwrap().param_grads();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for _ in 0..n {
        let (id, grad) = &grads[r.random_range(0..grads.len())];
        let j = r.random_range(0..grad.numel());
        let p0 = model.params.get(*id).data()[j];
        probe.params.get_mut(*id).data_mut()[j] = p0 + FD_STEP;
        let up = model_loss(&probe, x, labels);
        probe.params.get_mut(*id).data_mut()[j] = p0 - FD_STEP;
        let down = model_loss(&probe, x, labels);
        probe.params.get_mut(*id).data_mut()[j] = p0;
        worst = worst.max(rel_err(grad.data()[j], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn batch(len: usize, b: usize) -> Tensor<f64> {
    random_tensor(&mut rng(len as u64), &[b, len], 1.5)
}

/// Full-size models on sampled parameters, plus small variants of the CNN
/// and transformer checked on many more.
pub fn architectures() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let m = build_mlp::<f64>(402).unwrap();
    record(&mut out, "mlp", param_gradcheck(&m, &batch(402, 3), &[0, 4, 6], 12, 1));
    let m = build_cnn::<f64>(402).unwrap();
    record(&mut out, "cnn", param_gradcheck(&m, &batch(402, 2), &[1, 5], 8, 2));
    let m = build_transformer::<f64>(416).unwrap();
    record(&mut out, "transformer", param_gradcheck(&m, &batch(416, 2), &[2, 3], 8, 3));

    let cnn = ArchitectureDescriptor {
        input_len: 128,
        channels: 2,
        n_classes: 7,
        hyper: Hyper::preset(ArchKind::Cnn, Scale::Desk),
    };
    let m = Model::<f64>::build(&cnn, 4).unwrap();
    record(&mut out, "cnn (desk)", param_gradcheck(&m, &batch(128, 3), &[0, 1, 2], 40, 4));
    let vit = ArchitectureDescriptor {
        input_len: 64,
        channels: 1,
        n_classes: 7,
        hyper: Hyper::Transformer(TransformerConfig {
            d_model: 16,
            heads: 4,
            layers: 2,
            mlp_hidden: 32,
            ..Default::default()
        }),
    };
    let m = Model::<f64>::build(&vit, 5).unwrap();
    record(&mut out, "transformer (small)", param_gradcheck(&m, &batch(64, 3), &[0, 1, 2], 40, 5));
    out
}
