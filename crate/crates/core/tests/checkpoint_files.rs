use std::fs;

use seprep_core::ckpt::{self, Kind};
use seprep_core::data::{gen_domain, DomainSpec, Transform};
use seprep_core::seprep::{assemble, fuse_model};
use seprep_core::{Arch, Error, Form, ModelBundle};

#[test]
fn files_roundtrip_and_expose_form_in_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Arch::parse("widths=4-8,classes=3").unwrap();
    let sources: Vec<ModelBundle<f32>> = (0..3).map(|s| ModelBundle::init(&arch, s).unwrap()).collect();
    let sep = assemble(&sources).unwrap();
    let fused = fuse_model(&sep).unwrap();
    for (name, model, form) in [("sep.ck", &sep, Form::SepRep), ("fused.ck", &fused, Form::Fused)] {
        let path = dir.path().join(name);
        ckpt::save_model(model, &path).unwrap();
        let meta = ckpt::read_metadata(&path).unwrap();
        assert_eq!((meta.kind, meta.form), (Kind::Model, Some(form)));
        assert_eq!(&ckpt::load_model(&path).unwrap(), model);
    }

    let set = gen_domain(&DomainSpec::new(Transform::Blur(1), 3, 2), 3).unwrap();
    let path = dir.path().join("set.sprn");
    ckpt::save_dataset(&set, &path).unwrap();
    assert_eq!(ckpt::load_dataset(&path).unwrap(), set);
    assert!(matches!(ckpt::load_model(&path), Err(Error::ManifestMismatch(_))));

    let bytes = fs::read(dir.path().join("sep.ck")).unwrap();
    fs::write(dir.path().join("cut.ck"), &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(ckpt::load_model(dir.path().join("cut.ck")), Err(Error::TruncatedPayload { .. })));
    assert!(matches!(ckpt::load_model(dir.path().join("absent.ck")), Err(Error::Io(_))));
}
