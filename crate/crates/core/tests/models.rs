mod common;

use common::grads::{self, batch};
use common::{random_tensor, rng};
use sparamdx_core::models::{
    build_cnn, build_mlp, build_transformer, ArchitectureDescriptor, Hyper, Mode, Model, ModelError, TransformerConfig,
};
use sparamdx_core::tensor::{Graph, ParamId, Tensor};

#[test]
fn architecture_gradients() {
    for (name, err) in grads::architectures() {
        assert!(err <= 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn paper_models_emit_probabilities() {
    let x = batch(402, 3).cast::<f32>();
    let mlp = build_mlp::<f32>(402).unwrap();
    let cnn = build_cnn::<f32>(402).unwrap();
    let vit = build_transformer::<f32>(416).unwrap();
    let xt = batch(416, 3).cast::<f32>();
    for (m, input) in [(&mlp, &x), (&cnn, &x), (&vit, &xt)] {
        let p = m.forward(input).unwrap();
        assert_eq!(p.shape(), &[3, 7]);
        for row in p.rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert_eq!(m.extract_latent(input).unwrap().shape(), &[3, m.descriptor.latent_len()]);
    }
    assert_eq!(mlp.descriptor.latent_len(), 64);
    assert_eq!(cnn.descriptor.latent_len(), 1024);
    assert_eq!(vit.descriptor.latent_len(), 512);
}

#[test]
fn invalid_inputs_are_rejected() {
    let e = build_cnn::<f32>(32).unwrap_err();
    assert!(e.to_string().contains("64"), "{e}");
    let e = build_transformer::<f32>(402).unwrap_err();
    assert!(e.to_string().contains("416"), "{e}");
    let mlp = build_mlp::<f32>(201).unwrap();
    let err = mlp.forward(&batch(100, 1).cast()).unwrap_err();
    assert_eq!(err, ModelError::InputLength { expected: 201, got: 100 });
}

#[test]
fn eval_is_deterministic_and_train_mode_drops() {
    let x = batch(201, 4).cast::<f32>();
    let mut m = build_mlp::<f32>(201).unwrap();
    let a = m.forward(&x).unwrap();
    assert_eq!(a, m.forward(&x).unwrap());
    m.set_mode(Mode::Train);
    assert_ne!(a, m.forward(&x).unwrap());
    m.set_mode(Mode::Eval);
    assert_eq!(a, m.forward(&x).unwrap());
}

#[test]
fn initialization_is_seeded() {
    let d = ArchitectureDescriptor::mlp(201);
    let a = Model::<f32>::build(&d, 5).unwrap();
    let b = Model::<f32>::build(&d, 5).unwrap();
    let c = Model::<f32>::build(&d, 6).unwrap();
    assert_eq!(a.params.get(ParamId(0)), b.params.get(ParamId(0)));
    assert_ne!(a.params.get(ParamId(0)), c.params.get(ParamId(0)));
}

#[test]
fn mbconv_identity_shortcut() {
    let cnn = build_cnn::<f64>(201).unwrap();
    // block 1 keeps 256 channels at stride 1
    let x = random_tensor(&mut rng(9), &[2, 11, 256], 1.0);
    let mut g = Graph::new(false, 0);
    let xv = g.input(x.clone());
    let with = cnn.cnn_block(&mut g, 1, xv, true).unwrap();
    let without = cnn.cnn_block(&mut g, 1, xv, false).unwrap();
    for ((a, b), x) in g.value(with).data().iter().zip(g.value(without).data()).zip(x.data()) {
        assert!((a - (b + x)).abs() < 1e-12);
    }
    // block 0 downsamples, so a shortcut is impossible
    let x0 = g.input(Tensor::zeros(&[1, 11, 64]));
    assert!(cnn.cnn_block(&mut g, 0, x0, true).is_err());
}

fn small_transformer(seed: u64) -> Model<f64> {
    let desc = ArchitectureDescriptor {
        input_len: 96,
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
    Model::build(&desc, seed).unwrap()
}

#[test]
fn attention_rows_are_distributions() {
    let m = small_transformer(6);
    let mut g = Graph::new(false, 0);
    let x = g.input(batch(96, 3));
    let (_, maps) = m.forward_with_attention(&mut g, x).unwrap();
    assert_eq!(maps.len(), 2);
    for a in maps {
        assert_eq!(g.shape(a), &[3, 4, 6, 6]);
        for row in g.value(a).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn pooled_output_ignores_token_order_without_positions() {
    let mut m = small_transformer(7);
    let pos = m.params.find("pos").unwrap();
    m.params.get_mut(pos).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let x = batch(96, 2);
    let order = [3, 0, 5, 1, 4, 2];
    let mut shuffled = x.data().to_vec();
    for b in 0..2 {
        for (t, &src) in order.iter().enumerate() {
            let row = &x.data()[b * 96..(b + 1) * 96];
            shuffled[b * 96 + t * 16..b * 96 + (t + 1) * 16].copy_from_slice(&row[src * 16..(src + 1) * 16]);
        }
    }
    let shuffled = Tensor::new(&[2, 96], shuffled).unwrap();
    let a = m.extract_latent(&x).unwrap();
    let b = m.extract_latent(&shuffled).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-5, "{u} vs {v}");
    }

    // with positions restored the order matters again
    let mut placed = small_transformer(7);
    placed.params.get_mut(pos).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
    let a = placed.extract_latent(&x).unwrap();
    let b = placed.extract_latent(&shuffled).unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(u, v)| (u - v).abs() > 1e-3));
}
