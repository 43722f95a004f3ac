import numpy as np
import pytest

from pnp3d import numerics as nx
from pnp3d.classifier import (
    ClassifierConfig, ClassifierParams, TrainingDiverged, cross_entropy, evaluate, forward_classifier,
    softmax, train,
)
from pnp3d.core import PnpConfig, count_params
from pnp3d.data import SHAPES, DatasetError, Split, SynthDataset, generate_dataset, sample_cloud
from pnp3d.gradcheck import numeric_grad, rel_error

SMALL = SynthDataset(n_points=32, train_per_class=4, test_per_class=2)


def small_cfg(**kw):
    base = dict(lift_dim=8, pnp=PnpConfig(channels=8, neighbors=4, reduction=2), epochs=1, batch_size=4)
    return ClassifierConfig(**{**base, **kw})


# dataset


def test_sphere_without_noise_lies_on_unit_sphere():
    pts = sample_cloud("sphere", 512, 0.0, seed=3, index=0)
    assert np.max(np.abs(np.linalg.norm(pts - pts.mean(axis=0), axis=1) - 1.0)) < 1e-9


@pytest.mark.parametrize("shape", SHAPES)
def test_clouds_are_normalized(shape):
    pts = sample_cloud(shape, 200, 0.02, seed=0, index=5)
    assert np.abs(pts.mean(axis=0)).max() < 1e-12
    assert abs(np.linalg.norm(pts, axis=1).max() - 1.0) < 1e-12


def test_dataset_deterministic():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    for x, y in zip(a, b):
        assert x.clouds.tobytes() == y.clouds.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    other = generate_dataset(SynthDataset(n_points=32, train_per_class=4, test_per_class=2, seed=1))
    assert not np.array_equal(a[0].clouds, other[0].clouds)


def test_dataset_stratified_and_disjoint():
    train_split, test_split = generate_dataset(SynthDataset(n_points=16, train_per_class=7, test_per_class=3))
    counts = np.bincount(train_split.labels)
    assert counts.max() - counts.min() <= 1 and len(counts) == 4
    assert np.bincount(test_split.labels).tolist() == [3, 3, 3, 3]
    for cloud in test_split.clouds:
        assert not any(np.array_equal(cloud, c) for c in train_split.clouds)


def test_dataset_validation():
    with pytest.raises(DatasetError):
        SynthDataset(classes=("sphere", "pyramid"))
    with pytest.raises(DatasetError):
        SynthDataset(n_points=8)


# forward pass


@pytest.mark.parametrize("use_pnp", [False, True])
def test_logits_shape_and_permutation_invariance(use_pnp):
    cfg = small_cfg(use_pnp=use_pnp)
    params = ClassifierParams.init(cfg)
    params.set_training(False)
    cloud = generate_dataset(SMALL)[0].clouds[0]
    logits = forward_classifier(cloud, cfg, params).value
    assert logits.shape == (4,)
    perm = np.random.default_rng(0).permutation(len(cloud))
    assert np.max(np.abs(forward_classifier(cloud[perm], cfg, params).value - logits)) < 1e-12
    assert forward_classifier(cloud, cfg, params).value.tobytes() == logits.tobytes()


def test_forward_rejects_bad_shape():
    cfg = small_cfg()
    with pytest.raises(nx.ShapeError):
        forward_classifier(np.zeros((10, 2)), cfg, ClassifierParams.init(cfg))


def test_classifier_gradients():
    cfg = small_cfg()
    params = ClassifierParams.init(cfg)
    # random affine/running stats: with beta == 0, all-zero graph rows sit exactly on a ReLU kink
    rng = np.random.default_rng(0)
    for bn in (params.lift.bn, params.pnp.theta.bn, params.pnp.phi.bn, params.pnp.psi.bn):
        c = bn.channels
        bn.gamma, bn.beta = rng.uniform(0.5, 1.5, c), rng.uniform(-0.5, 0.5, c)
        bn.running_mean, bn.running_var = rng.normal(0, 0.3, c), rng.uniform(0.5, 2.0, c)
    params.set_training(False)
    clouds, labels = generate_dataset(SMALL)[0].clouds[:3], np.array([0, 1, 2])
    tape = nx.Tape()
    logits = forward_classifier(clouds, cfg, params, tape=tape)
    _, dlogits = cross_entropy(logits.value, labels)
    grads = tape.backward(dlogits)

    def loss():
        return cross_entropy(forward_classifier(clouds, cfg, params).value, labels)[0]

    for name, tensor in params.trainable().items():
        assert rel_error(grads[name], numeric_grad(loss, tensor)) < 1e-5, name


# loss


def test_cross_entropy_gradient_at_uniform_logits():
    _, grad = cross_entropy(np.zeros((1, 4)), np.array([2]))
    np.testing.assert_allclose(grad[0], [0.25, 0.25, -0.75, 0.25])


def test_cross_entropy_stable_for_large_logits():
    loss, grad = cross_entropy(np.array([[1000.0, 0.0, -1000.0]]), np.array([1]))
    assert loss == pytest.approx(1000.0) and np.all(np.isfinite(grad))


def test_softmax_sums_to_one():
    p = softmax(np.random.default_rng(0).normal(scale=30, size=(50, 7)))
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


# training


def test_one_epoch_on_eight_samples():
    train_split, test_split = generate_dataset(SynthDataset(n_points=32, train_per_class=2, test_per_class=1))
    report, _ = train(small_cfg(), train_split, test_split)
    assert len(train_split) == 8
    assert np.isfinite(report.loss[0])
    assert 0 <= report.train_acc[0] <= 1 and 0 <= report.test_acc[0] <= 1
    assert np.sum(report.confusion) == len(test_split)


def test_loss_decreases_on_separable_toy():
    spec = SynthDataset(classes=("sphere", "cube"), n_points=32, train_per_class=8, test_per_class=2, rotate=False)
    train_split, test_split = generate_dataset(spec)
    cfg = small_cfg(use_pnp=False, classes=2, lr=0.01, epochs=5, batch_size=len(train_split))
    report, _ = train(cfg, train_split, test_split)
    assert all(b < a for a, b in zip(report.loss, report.loss[1:])), report.loss


def test_training_deterministic():
    train_split, test_split = generate_dataset(SMALL)
    a, _ = train(small_cfg(epochs=2), train_split, test_split)
    b, _ = train(small_cfg(epochs=2), train_split, test_split)
    assert a.to_dict() == b.to_dict()


def test_divergence_names_epoch():
    train_split, test_split = generate_dataset(SMALL)
    broken = train_split.clouds.copy()
    broken[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(small_cfg(use_pnp=False), Split(broken, train_split.labels), test_split)


def test_end_only_evaluation():
    train_split, test_split = generate_dataset(SMALL)
    full, _ = train(small_cfg(epochs=2), train_split, test_split)
    last, _ = train(small_cfg(epochs=2), train_split, test_split, eval_every_epoch=False)
    assert last.test_acc == full.test_acc[-1:]
    assert last.loss == full.loss


def test_evaluate_confusion_totals():
    cfg = small_cfg()
    _, test_split = generate_dataset(SMALL)
    acc, conf = evaluate(ClassifierParams.init(cfg), cfg, test_split)
    assert conf.sum() == len(test_split)
    assert acc == pytest.approx(np.trace(conf) / len(test_split))


def test_baseline_nests_inside_pnp_model():
    with_pnp = ClassifierParams.init(small_cfg(use_pnp=True))
    baseline = ClassifierParams.init(small_cfg(use_pnp=False))
    extra = with_pnp.n_params() - baseline.n_params()
    assert extra == count_params(small_cfg().pnp)["total"] > 0
    full = with_pnp.trainable()
    for name, tensor in baseline.trainable().items():
        np.testing.assert_array_equal(full[name], tensor)


def test_checkpoint_keys_must_match():
    params = ClassifierParams.init(small_cfg(use_pnp=False))
    with pytest.raises(KeyError):
        params.load(ClassifierParams.init(small_cfg(use_pnp=True)).named_tensors())


def test_config_rejects_mismatched_channels():
    with pytest.raises(ValueError):
        ClassifierConfig(lift_dim=8, pnp=PnpConfig(channels=16, reduction=8))
