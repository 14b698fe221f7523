use seprep_core::adapt::{kd_distill, KdConfig, Teacher};
use seprep_core::ckpt;
use seprep_core::data::{gen_domain, split, DomainSpec, Transform};
use seprep_core::metrics::accuracy;
use seprep_core::nn::{sgd_step, train_source, Arch, ModelBundle, TrainConfig};
use seprep_core::seprep::{predict, Criterion, WeightMode};
use seprep_core::tensor::{Tape, Tensor};
use seprep_core::{Result, SplitMix64};

fn test_accuracy(model: &ModelBundle<f32>, images: &Tensor<f32>, labels: &[usize]) -> f64 {
    let (p, _) = predict(model, images, &WeightMode::PerBatch, Criterion::Entropy).unwrap();
    accuracy(&p, labels).unwrap()
}

#[test]
fn source_training_fits_a_separable_domain() {
    let train = gen_domain(&DomainSpec::new(Transform::Identity, 30, 1), 10).unwrap();
    let model = train_source(&train, &Arch::toy(), &TrainConfig::default()).unwrap();
    let acc = test_accuracy(&model, &train.images, &train.labels);
    assert!(acc >= 99.0, "train accuracy {acc}");
}

#[test]
fn rotation_opens_a_domain_gap() {
    let spec = |t, seed| DomainSpec::new(t, 60, seed);
    let identity = gen_domain(&spec(Transform::Identity, 3), 10).unwrap();
    let (train, test) = split(&identity, (0.5, 0.5), 4).unwrap();
    let rotated = gen_domain(&spec(Transform::Rotate(30.0), 5), 10).unwrap();
    let model = train_source(&train, &Arch::toy(), &TrainConfig::default()).unwrap();
    let same = test_accuracy(&model, &test.images, &test.labels);
    let shifted = test_accuracy(&model, &rotated.images, &rotated.labels);
    assert!(same - shifted >= 15.0, "identity {same} vs rotated {shifted}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let arch = Arch::parse("widths=4-8,classes=4").unwrap();
    let data = gen_domain(&DomainSpec::new(Transform::Noise(0.1), 6, 7), 4).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 9, ..TrainConfig::default() };
    let a = ckpt::model_to_bytes(&train_source(&data, &arch, &cfg).unwrap()).unwrap();
    let b = ckpt::model_to_bytes(&train_source(&data, &arch, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 10, ..cfg };
    assert_ne!(a, ckpt::model_to_bytes(&train_source(&data, &arch, &other).unwrap()).unwrap());
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let arch = Arch::parse("widths=4-8,classes=4").unwrap();
    let data = gen_domain(&DomainSpec::new(Transform::Identity, 4, 1), 4).unwrap();
    let cfg = TrainConfig { epochs: 0, seed: 5, ..TrainConfig::default() };
    let trained = train_source(&data, &arch, &cfg).unwrap();
    let init = ModelBundle::<f32>::init(&arch, SplitMix64::new(5).next_u64()).unwrap();
    assert_eq!(trained, init);
}

/// Teacher with fixed one-hot predictions.
struct OneHot(Tensor<f64>);

impl Teacher<f64> for OneHot {
    fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    fn soft_targets(&self, _: &Tensor<f64>, _: f64) -> Result<Tensor<f64>> {
        Ok(self.0.clone())
    }
}

/// At temperature 1 a one-hot teacher reduces distillation to cross-entropy
/// on the teacher's argmax.
#[test]
fn distillation_at_unit_temperature_is_cross_entropy() {
    let arch = Arch::parse("widths=4-8,classes=3").unwrap();
    let student = ModelBundle::<f64>::init(&arch, 3).unwrap();
    let mut rng = SplitMix64::new(4);
    let n = 12;
    let x = Tensor::new(&[n, 3, 16, 16], (0..n * 768).map(|_| rng.next_f64()).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut onehot = vec![0.0; n * 3];
    labels.iter().enumerate().for_each(|(i, &y)| onehot[i * 3 + y] = 1.0);
    let targets = Tensor::new(&[n, 3], onehot).unwrap();

    let cfg = KdConfig { temperature: 1.0, epochs: 1, batch_size: n, lr: 0.05, ..KdConfig::default() };
    let distilled = kd_distill(&OneHot(targets.clone()), &student, &x, &cfg).unwrap();

    let mut manual = student.clone();
    let tape = Tape::new();
    let pass = manual.forward_train(&tape, &x).unwrap();
    let ce = tape.soft_cross_entropy(pass.logits[0], &targets).unwrap();
    let grads = tape.backward(ce).unwrap();
    manual.store_grads(&pass, &grads).unwrap();
    sgd_step(&mut manual, cfg.lr, cfg.head_lr_mult).unwrap();

    let (a, b) = (distilled.forward_eval(&x).unwrap(), manual.forward_eval(&x).unwrap());
    assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
}
