import csv
import json

import numpy as np
import pytest

from oracle import central_diff, rel_err
from smda.autodiff import Graph, NonFiniteError, Tensor, grad_of
from smda.config import validate
from smda.data import Dataset, generate_shapes_dataset
from smda.losses import LossWeights, class_loss
from smda.nn import SGD, Dense, Flatten, Network, init_params, small_cnn, tiny_cnn
from smda.transforms import COMBINED, Compose, CutOut, HFlip, MixUp, Rescale, Rotate, apply_image
from smda.training import (
    PairedBatch,
    benchmark,
    build_paired_batch,
    compute_losses,
    evaluate,
    fit,
    invariance_layers,
    iter_batches,
    train_step,
)

MIXED = dict(COMBINED, cutout={"p": 0.5}, mixup={"p": 0.5}, cutmix={"p": 0.5})


@pytest.fixture(scope="module")
def shapes16():
    return generate_shapes_dataset(2, 16, seed=0)


def _batch(images, labels, specs):
    aug = np.stack([apply_image(s, img, images) for s, img in zip(specs, images)])
    return PairedBatch(images, aug, list(specs), np.asarray(labels))


def _params(net):
    return [p.data.copy() for p in net.parameters()]


# -- paired batches -------------------------------------------------------------------


def test_disabled_config_gives_identical_pairs(shapes16):
    b = build_paired_batch(shapes16, [0, 5, 7], {}, seed=0)
    assert b.augmented.tobytes() == b.originals.tobytes()
    assert all(not s.specs for s in b.specs)


def test_batch_invariants_and_determinism(shapes16):
    idx = np.arange(12)
    a = build_paired_batch(shapes16, idx, MIXED, seed=3, epoch=2)
    b = build_paired_batch(shapes16, idx, MIXED, seed=3, epoch=2)
    assert a.augmented.tobytes() == b.augmented.tobytes() and a.specs == b.specs
    for k, spec in enumerate(a.specs):
        np.testing.assert_array_equal(a.augmented[k], apply_image(spec, a.originals[k], a.originals))
    np.testing.assert_array_equal(a.labels, shapes16.labels[idx])
    assert a.aug_targets.shape == (12, 10)
    np.testing.assert_allclose(a.aug_targets.sum(axis=1), 1.0, rtol=1e-12)


def test_mixup_lambda_recorded(shapes16):
    b = build_paired_batch(shapes16, np.arange(8), {"mixup": {"p": 1.0}}, seed=1)
    assert len(b.mixed_labels) == 8
    for k, label, partner_label, lam in b.mixed_labels:
        (step,) = b.specs[k].specs
        assert isinstance(step, MixUp) and lam == step.lam and step.partner != k
        assert (label, partner_label) == (b.labels[k], b.labels[step.partner])
        assert b.aug_targets[k, label] == pytest.approx(lam + (1 - lam) * (label == partner_label))


def test_batch_errors(shapes16):
    with pytest.raises(ValueError):
        build_paired_batch(shapes16, [], {}, seed=0)
    with pytest.raises(IndexError):
        build_paired_batch(shapes16, [999], {}, seed=0)


def test_threaded_batches_match_sequential(shapes16):
    seq = list(iter_batches(shapes16, MIXED, 4, seed=2, epoch=1, threads=0))
    par = list(iter_batches(shapes16, MIXED, 4, seed=2, epoch=1, threads=3))
    assert len(seq) == len(par) == 5
    for a, b in zip(seq, par):
        assert a.augmented.tobytes() == b.augmented.tobytes() and a.specs == b.specs


# -- the train step ----------------------------------------------------------------------


@pytest.mark.parametrize("report", [False, True])
def test_class_only_update_bit_equals_plain_training(shapes16, report):
    batch = build_paired_batch(shapes16, np.arange(6), COMBINED, seed=0)
    net_a, net_b = small_cnn(input_size=16), small_cnn(input_size=16)
    init_params(net_a, 1)
    init_params(net_b, 1)
    opt_a = SGD(net_a.parameters(), lr=0.05, momentum=0.9)
    opt_b = SGD(net_b.parameters(), lr=0.05, momentum=0.9)
    for _ in range(2):
        train_step(net_a, batch, LossWeights(1, 0, 0), opt_a, report_saliency=report)
        with Graph():
            logits = net_b(Tensor(np.concatenate([batch.originals, batch.augmented])))
            loss = class_loss(logits[:6], logits[6:], batch.labels)
            opt_b.step([g.data for g in grad_of(loss, net_b.parameters())])
    for a, b in zip(net_a.parameters(), net_b.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_identity_batch_has_zero_saliency_loss(shapes16):
    batch = build_paired_batch(shapes16, np.arange(6), {}, seed=0)
    net = small_cnn(input_size=16)
    init_params(net, 2)
    with_sal = compute_losses(net, batch, LossWeights(1, 1, 0))
    with Graph():
        without = compute_losses(net, batch, LossWeights(1, 0, 0))
    assert with_sal.report.l_sal == 0.0
    assert not with_sal.report.sal_distances.any()
    for a, b in zip(with_sal.grads, without.grads):
        np.testing.assert_array_equal(a, b)


def test_total_is_weighted_sum(shapes16):
    batch = build_paired_batch(shapes16, np.arange(4), COMBINED, seed=5)
    net = small_cnn(input_size=16)
    init_params(net, 0)
    r = compute_losses(net, batch, LossWeights(0.7, 2.0, 0.3), layers=invariance_layers({}, net)).report
    assert r.l_sal > 0 and r.l_inv > 0
    assert abs(r.l_total - (0.7 * r.l_class + 2.0 * r.l_sal + 0.3 * r.l_inv)) < 1e-12


def test_beta_zero_reports_but_excludes_saliency(shapes16):
    batch = build_paired_batch(shapes16, np.arange(4), {"rotate": {"p": 1.0}}, seed=0)
    net = small_cnn(input_size=16)
    init_params(net, 0)
    r = compute_losses(net, batch, LossWeights(1, 0, 0)).report
    assert r.l_sal > 0 and r.l_total == r.l_class


def _tiny_batch():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(2, 3, 8, 8))
    return _batch(images, [1, 4], [Compose((HFlip(), Rotate(6.0))), Compose((Rescale(1.08),))])


def test_total_gradient_matches_finite_differences():
    net = tiny_cnn()
    init_params(net, 3)
    batch = _tiny_batch()
    w = LossWeights(1, 1, 0.5)
    layers = invariance_layers({}, net)
    grads = compute_losses(net, batch, w, layers).grads

    def total(_):
        with Graph():
            return compute_losses(net, batch, w, layers, report_saliency=False).report.l_total

    for p, g in zip(net.parameters(), grads):
        orig = p.data

        def f(v, p=p):
            p.data = v
            try:
                return total(v)
            finally:
                p.data = orig

        assert rel_err(g, central_diff(f, orig)) < 1e-3


def test_saliency_term_gradient_is_wired():
    net = tiny_cnn()
    init_params(net, 3)
    batch = _tiny_batch()
    full = compute_losses(net, batch, LossWeights(1, 1, 0)).grads
    with Graph():
        cls = compute_losses(net, batch, LossWeights(1, 0, 0)).grads
    assert any(not np.array_equal(a, b) for a, b in zip(full, cls))


def test_two_phase_order_independence(shapes16):
    batch = build_paired_batch(shapes16, np.arange(6), MIXED, seed=4)
    net = small_cnn(input_size=16)
    init_params(net, 4)
    w = LossWeights(1, 1, 1)
    layers = invariance_layers({}, net)
    a = compute_losses(net, batch, w, layers, sal_first=False)
    with Graph():
        b = compute_losses(net, batch, w, layers, sal_first=True)
    assert abs(a.report.l_total - b.report.l_total) <= 1e-12 * abs(a.report.l_total)
    for ga, gb in zip(a.grads, b.grads):
        assert rel_err(ga, gb) < 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_diagnostic(shapes16):
    batch = build_paired_batch(shapes16, np.arange(2), {}, seed=0)
    net = tiny_cnn(input_size=16)
    init_params(net, 0)
    net.layers[0].weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError) as exc:
        train_step(net, batch, LossWeights(1, 1, 0), SGD(net.parameters(), lr=0.1))
    assert exc.value.node_id is not None and exc.value.kind


def test_train_step_is_deterministic(shapes16):
    batch = build_paired_batch(shapes16, np.arange(6), MIXED, seed=9)
    out = []
    for _ in range(2):
        net = small_cnn(input_size=16)
        init_params(net, 6)
        opt = SGD(net.parameters(), lr=0.02, momentum=0.9)
        reps = [train_step(net, batch, LossWeights(1, 1, 0), opt) for _ in range(2)]
        out.append(([r.l_total for r in reps], b"".join(p.data.tobytes() for p in net.parameters())))
    assert out[0] == out[1]


# -- evaluation ------------------------------------------------------------------------------


def _constant_net(logits):
    dense = Dense(4, len(logits))
    dense.weight.data = np.zeros((len(logits), 4))
    dense.bias.data = np.array(logits, dtype=float)
    return Network([Flatten(), dense])


def test_evaluate_constant_logits():
    ds = Dataset(np.zeros((10, 1, 2, 2)), [0, 1, 1, 1, 2, 2, 0, 1, 2, 2], num_classes=3)
    assert evaluate(_constant_net([0.0, 1.0, 0.5]), ds) == 0.4
    # ties resolve to the lowest index
    assert evaluate(_constant_net([2.0, 2.0, 2.0]), ds) == 0.2


def test_evaluate_memorized_set():
    images = np.eye(10).reshape(10, 1, 2, 5)
    dense = Dense(10, 10)
    dense.weight.data = np.eye(10)
    dense.bias.data = np.zeros(10)
    ds = Dataset(images, np.arange(10))
    assert evaluate(Network([Flatten(), dense]), ds, batch_size=3) == 1.0


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(tiny_cnn(), Dataset(np.zeros((0, 3, 8, 8)), np.zeros(0)))


# -- timing and the epoch loop ------------------------------------------------------------------


def test_benchmark_ratio_above_one(shapes16):
    net = small_cnn(input_size=16)
    init_params(net, 0)
    batches = [build_paired_batch(shapes16, np.arange(8), COMBINED, seed=0, epoch=k) for k in range(2)]
    base, sal, ratio = benchmark(net, batches, warmup=2, measured=5)
    assert base > 0 and ratio == pytest.approx(sal / base) and ratio > 1.0
    with pytest.raises(ValueError):
        benchmark(net, batches, warmup=0, measured=0)


def _fit_config(**kw):
    cfg = {
        "augment": MIXED,
        "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 0.0},
        "optimizer": {"lr": 0.02, "momentum": 0.9},
        "batch_size": 5,
        "epochs": 2,
        "seed": 1,
        "checkpoint_every": 1,
    }
    cfg.update(kw)
    return cfg


def test_fit_outputs_and_determinism(tmp_path, shapes16):
    test = generate_shapes_dataset(1, 16, seed=0, split="test")
    runs = []
    for name in ("a", "b"):
        net = small_cnn(input_size=16)
        init_params(net, 0)
        hist = fit(net, shapes16, test, _fit_config(), out_dir=tmp_path / name)
        runs.append(hist)
    assert [h.row() for h in runs[0]] == [h.row() for h in runs[1]]

    out = tmp_path / "a"
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 4
    for line in lines:
        validate(json.loads(line), "metrics")
    strip = lambda s: [{k: v for k, v in json.loads(l).items() if k != "ms"} for l in s]  # noqa: E731
    assert strip(lines) == strip((tmp_path / "b" / "metrics.jsonl").read_text().splitlines())
    rows = list(csv.DictReader(open(out / "epochs.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert {"train_acc", "test_acc", "l_class", "l_sal", "l_inv", "l_total", "sal_distance"} <= set(rows[0])
    assert (out / "checkpoint_epoch001.smda").exists() and (out / "checkpoint_epoch002.smda").exists()


def test_fit_threads_do_not_change_results(monkeypatch, shapes16):
    hist = []
    for threads in ("0", "2"):
        monkeypatch.setenv("SMDA_THREADS", threads)
        net = small_cnn(input_size=16)
        init_params(net, 0)
        hist.append([h.row() for h in fit(net, shapes16, None, _fit_config(epochs=1))])
    assert hist[0][0]["l_total"] == hist[1][0]["l_total"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_nan_names_iteration(shapes16):
    net = small_cnn(input_size=16)
    init_params(net, 0)
    net.layers[-1].bias.data[0] = np.inf
    with pytest.raises(NonFiniteError, match="iteration 0"):
        fit(net, shapes16, None, _fit_config(epochs=1))


def test_cutout_batches_train(shapes16):
    batch = _batch(shapes16.images[:2], shapes16.labels[:2], [CutOut((0, 0, 8, 8)), Compose(())])
    net = small_cnn(input_size=16)
    init_params(net, 0)
    r = compute_losses(net, batch, LossWeights(1, 1, 0)).report
    assert len(r.sal_distances) == 2 and r.sal_distances[1] == 0.0 and r.sal_distances[0] > 0
