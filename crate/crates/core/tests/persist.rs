mod common;

use std::path::Path;

use common::{resampled_core, same_state};
use pdetrace::domain::Domain;
use pdetrace::nn::{Activation, Model, NnError};
use pdetrace::solver::persist::{self, PersistError, SignatureStatus, SigningKey};
use pdetrace::solver::SolveOptions;
use pdetrace::tensor::Tensor;
use proptest::prelude::*;

fn key() -> SigningKey {
    SigningKey::from_bytes(&[7u8; 32])
}

fn flip(path: &Path, at: usize) {
    let mut bytes = std::fs::read(path).unwrap();
    bytes[at] ^= 0x01;
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn core_state_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.jno");
    let (mut a, _) = resampled_core(1);
    a.solve(&SolveOptions::new(5)).unwrap();
    a.save(&path, None).unwrap();
    let (mut b, net) = resampled_core(1);
    b.load(&path, None).unwrap();
    assert_eq!(persist::to_bytes(&a.to_artifact()), persist::to_bytes(&b.to_artifact()));
    assert!(b.history().same_values(a.history()));
    assert!(net.params().iter().all(|(k, v)| a.models()[0].params()[k].bitwise_eq(v)));
}

#[test]
fn resumed_training_ends_at_the_same_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.jno");
    let (mut full, full_net) = resampled_core(2);
    full.solve(&SolveOptions::new(9)).unwrap();
    let (mut first, _) = resampled_core(2);
    first.solve(&SolveOptions::new(4)).unwrap();
    first.save(&path, None).unwrap();
    let (mut resumed, net) = resampled_core(2);
    resumed.load(&path, None).unwrap();
    resumed.solve(&SolveOptions::new(5)).unwrap();
    assert!(resumed.history().same_values(full.history()));
    let p = full_net.params();
    assert!(net.params().iter().all(|(k, v)| p[k].bitwise_eq(v)));
    assert!(same_state(&resumed, &full));
}

#[test]
fn domain_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("domain.jno");
    let mut d = Domain::disk((0.0, 0.0), 1.0, 0.3).unwrap().repeat(2).unwrap();
    d.tensor_variable("k", Tensor::new([2, 1, 1], vec![0.7, 1.3]).unwrap()).unwrap();
    d.sample("interior", 6, 11).unwrap();
    persist::save(&d.to_artifact(), &path, None).unwrap();
    let back = Domain::from_artifact(&persist::load(&path, None).unwrap()).unwrap();
    assert!(back.same_data(&d));
    assert_eq!(persist::to_bytes(&back.to_artifact()), persist::to_bytes(&d.to_artifact()));
}

#[test]
fn model_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.jno");
    let a = Model::deeponet("op", 1, 2, 4, 6, 3).unwrap();
    a.save(&path, Some(&key())).unwrap();
    let b = Model::deeponet("op", 1, 2, 4, 6, 99).unwrap();
    b.initialize_from(&path, Some(&key().verifying_key())).unwrap();
    let pa = a.params();
    assert!(b.params().iter().all(|(k, v)| pa[k].bitwise_eq(v)));

    let wrong = Model::mlp("m", 2, &[3], 1, Activation::Tanh, 0).unwrap();
    assert!(wrong.initialize_from(&path, None).is_err());
}

#[test]
fn tamper_is_caught_by_hash_and_signature() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.jno");
    let (a, _) = resampled_core(4);
    a.save(&path, Some(&key())).unwrap();
    let vk = key().verifying_key();
    assert_eq!(persist::signature_status(&path, Some(&vk)).unwrap(), SignatureStatus::Valid);

    let len = std::fs::metadata(&path).unwrap().len() as usize;
    flip(&path, len - 3);
    assert!(matches!(
        persist::load(&path, None),
        Err(PersistError::HashMismatch | PersistError::CorruptPayload { .. })
    ));
    assert!(matches!(persist::load(&path, Some(&vk)), Err(PersistError::SignatureInvalid)));
    assert_eq!(persist::signature_status(&path, Some(&vk)).unwrap(), SignatureStatus::Invalid);
    assert_eq!(persist::signature_status(&path, None).unwrap(), SignatureStatus::Invalid);

    let other = SigningKey::from_bytes(&[8u8; 32]).verifying_key();
    flip(&path, len - 3);
    assert!(persist::load(&path, None).is_ok());
    assert!(matches!(persist::load(&path, Some(&other)), Err(PersistError::SignatureInvalid)));
}

#[test]
fn tampered_checkpoint_reports_checksum_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.jno");
    let m = Model::mlp("m", 2, &[3], 1, Activation::Tanh, 0).unwrap();
    m.save(&path, None).unwrap();
    let len = std::fs::metadata(&path).unwrap().len() as usize;
    flip(&path, len - 1);
    assert!(matches!(m.initialize_from(&path, None), Err(NnError::ChecksumFailure(_))));
}

#[test]
fn missing_signature_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jno");
    Model::mlp("m", 2, &[3], 1, Activation::Tanh, 0).unwrap().save(&path, None).unwrap();
    assert_eq!(persist::signature_status(&path, None).unwrap(), SignatureStatus::Unsigned);
    assert!(matches!(
        persist::load(&path, Some(&key().verifying_key())),
        Err(PersistError::SignatureMissing(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_single_byte_flip_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let m = Model::mlp("m", 2, &[4], 1, Activation::Tanh, 5).unwrap();
        let bytes = persist::to_bytes(&m.to_artifact());
        let mut bad = bytes.clone();
        bad[pos.index(bytes.len())] ^= 1 << bit;
        prop_assert!(persist::from_bytes(&bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jno");
        m.save(&path, Some(&key())).unwrap();
        std::fs::write(&path, &bad).unwrap();
        prop_assert!(matches!(
            persist::load(&path, Some(&key().verifying_key())),
            Err(PersistError::SignatureInvalid)
        ));
    }
}
