use rand::SeedableRng;
use stfocal::io::*;
use stfocal::{DesignVariant, Error, ModelConfig, Network, SeededRng, Tensor};

fn net() -> Network<f64> {
    let mut c = ModelConfig::preset("tiny").unwrap();
    c.network.embed_dim = 4;
    c.network.frames = 2;
    c.network.height = 32;
    c.network.width = 32;
    c.network.num_classes = 3;
    c.focal.variant = DesignVariant::Alternating;
    Network::new(&c, 3).unwrap()
}

#[test]
fn tensor_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let x: Tensor<f64> = Tensor::randn(&[2, 3, 4], 1.0, &mut SeededRng::seed_from_u64(0));
    write_tensor(&path, &x).unwrap();
    assert_eq!(read_tensor::<f64>(&path).unwrap(), x);
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"shape: 2 3 4\n"));
    assert_eq!(bytes.len(), "shape: 2 3 4\n".len() + 24 * 8);
}

#[test]
fn truncated_tensor_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let mut bytes = tensor_to_bytes(&Tensor::<f64>::zeros(&[3]));
    bytes.pop();
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_tensor::<f64>(&path), Err(Error::Format { .. })));
    std::fs::write(&path, b"dims: 3\n").unwrap();
    assert!(matches!(read_tensor::<f64>(&path), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let a = net();
    save_checkpoint(&path, &a).unwrap();
    let b = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(a.config(), b.config());
    assert_eq!(a.store.len(), b.store.len());
    for ((_, na, va), (_, nb, vb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(va.shape(), vb.shape());
        assert!(va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let x = Tensor::randn(&[1, 2, 32, 32, 3], 1.0, &mut SeededRng::seed_from_u64(1));
    assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
}

#[test]
fn bad_magic_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"hello\n").unwrap();
    match load_checkpoint::<f64>(&path) {
        Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected a format error, got {:?}", other.map(|_| ())),
    }
    let missing = dir.path().join("nope.ckpt");
    match load_checkpoint::<f64>(&missing) {
        Err(Error::Io { path: p, .. }) => assert_eq!(p, missing),
        other => panic!("expected an I/O error, got {:?}", other.map(|_| ())),
    }
    assert!(matches!(read_tensor::<f64>(&missing), Err(Error::Io { .. })));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &net()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));
}
