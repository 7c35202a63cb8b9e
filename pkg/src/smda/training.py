"""Paired batches, the combined train step, evaluation, timing and the epoch loop."""

from __future__ import annotations

import csv
import json
import logging
import os
import queue
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Graph, NonFiniteError, Tensor, grad_of, no_grad
from .data import Dataset
from .losses import ALL_INVALID, LossReport, LossWeights, class_loss, combined_loss, invariance_loss, saliency_distance
from .nn import SGD, Network, last_conv_block_output
from .saliency import SaliencyMap, channel_reduce, input_gradients, target_weights
from .transforms import (
    CutMix,
    MixUp,
    apply_image,
    compose_expected_map,
    flatten,
    invert_on_map,
    label_weights,
    sample_spec,
    uses_expected_map,
)

log = logging.getLogger(__name__)


@dataclass
class PairedBatch:
    originals: np.ndarray
    augmented: np.ndarray
    specs: list
    labels: np.ndarray
    partner_indices: list = field(default_factory=list)
    mixed_labels: list = field(default_factory=list)
    aug_targets: np.ndarray | None = None  # (B, K) label weights of the augmented block

    def __len__(self) -> int:
        return len(self.labels)


def build_paired_batch(ds: Dataset, indices, config: dict, seed: int, epoch: int = 0) -> PairedBatch:
    """Originals plus one augmented copy each; sample ``k`` uses seed ``(seed, epoch, indices[k])``.

    MixUp/CutMix partners are positions inside the same batch.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("batch must not be empty")
    if indices.min() < 0 or indices.max() >= len(ds):
        raise IndexError("batch index out of range")
    originals = ds.images[indices]
    labels = ds.labels[indices]
    shape = originals.shape[2:]
    b = len(indices)
    specs, augmented, partners, mixed = [], np.empty_like(originals), [], []
    targets = np.zeros((b, ds.num_classes))
    for k, idx in enumerate(indices):
        spec = sample_spec(config, (seed, epoch, int(idx)), shape, num_partners=b, self_index=k)
        specs.append(spec)
        augmented[k] = apply_image(spec, originals[k], originals)
        targets[k] = label_weights(spec, labels[k], labels, ds.num_classes, shape)
        for step in flatten(spec):
            if isinstance(step, MixUp):
                mixed.append((k, int(labels[k]), int(labels[step.partner]), step.lam))
            elif isinstance(step, CutMix):
                frac = step.rect[2] * step.rect[3] / float(shape[0] * shape[1])
                mixed.append((k, int(labels[k]), int(labels[step.partner]), 1.0 - frac))
        partners.append([s.partner for s in flatten(spec) if isinstance(s, (MixUp, CutMix))])
    return PairedBatch(originals, augmented, specs, labels, partners, mixed, targets)


def _pair_distances(maps: Tensor, batch: PairedBatch):
    """Per-pair saliency distances (graph tensors) and an optional warning."""
    b = len(batch)
    dists, warning = [], None
    originals = [SaliencyMap(maps[i]) for i in range(b)]
    for i, spec in enumerate(batch.specs):
        aug = maps[b + i]
        if uses_expected_map(spec):
            expected, mask = compose_expected_map(spec, originals[i], originals)
            d = saliency_distance(aug, expected.values, mask)
        else:
            inv, mask = invert_on_map(spec, SaliencyMap(aug))
            d = saliency_distance(originals[i].values, inv.values, mask)
        if d is None:
            warning = ALL_INVALID
            continue
        dists.append(d)
    return dists, warning


@dataclass
class StepResult:
    report: LossReport
    grads: list


def compute_losses(
    net: Network,
    batch: PairedBatch,
    w: LossWeights,
    layers: Sequence[int] = (),
    metric: str = "l2",
    report_saliency: bool = True,
    sal_first: bool = False,
) -> StepResult:
    """Everything in a train step except the parameter update.

    Must run inside an active graph.  ``sal_first`` builds the saliency term
    before the class term (both orders give the same objective).
    """
    b = len(batch)
    x = Tensor(np.concatenate([batch.originals, batch.augmented]), requires_grad=True)
    capture = list(layers) if w.gamma > 0 else []
    logits, captured = net.forward(x, capture=capture)
    want_sal = w.beta > 0 or report_saliency

    def sal_term():
        if not want_sal:
            return None, np.zeros(0), None
        k = logits.shape[1]
        aug_t = batch.aug_targets if batch.aug_targets is not None else target_weights(batch.labels, k)
        targets = np.concatenate([target_weights(batch.labels, k), aug_t])
        grads = input_gradients(net, x, targets, differentiable=w.beta > 0, retain_graph=True, logits=logits)
        dists, warning = _pair_distances(channel_reduce(grads), batch)
        values = np.array([float(d.data) for d in dists])
        if not dists:
            return Tensor(0.0), values, warning
        total = dists[0]
        for d in dists[1:]:
            total = total + d
        return total / b, values, warning

    def class_term():
        aug_labels = batch.aug_targets if batch.mixed_labels else None
        return class_loss(logits[:b], logits[b:], batch.labels, aug_labels)

    if sal_first:
        l_sal, dists, warning = sal_term()
        l_class = class_term()
    else:
        l_class = class_term()
        l_sal, dists, warning = sal_term()

    l_inv = None
    if w.gamma > 0:
        orig = {i: captured[i][:b] for i in capture}
        aug = {i: captured[i][b:] for i in capture}
        l_inv = invariance_loss(orig, aug, capture, metric)

    total = combined_loss(l_class if w.alpha > 0 else None, l_sal if w.beta > 0 else None, l_inv, w)
    if not np.isfinite(total.data).all():
        (total.graph or Graph()).check_finite()
        raise NonFiniteError("non-finite total loss")

    params = net.parameters()
    grads = grad_of(total, params) if total.requires_grad else [Tensor(np.zeros(p.shape)) for p in params]
    grads = [g.data for g in grads]
    for (name, _), g in zip(net.named_parameters(), grads):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")

    report = LossReport(
        l_class=float(l_class.data),
        l_sal=float(l_sal.data) if l_sal is not None else 0.0,
        l_inv=float(l_inv.data) if l_inv is not None else 0.0,
        l_total=float(total.data),
        sal_distances=dists,
        warning=warning,
        total=total,
    )
    return StepResult(report, grads)


def train_step(
    net: Network,
    batch: PairedBatch,
    w: LossWeights,
    opt: SGD,
    layers: Sequence[int] = (),
    metric: str = "l2",
    report_saliency: bool = True,
) -> LossReport:
    """Forward on originals+augmented, the weighted losses, one backward, one SGD step."""
    with Graph():
        result = compute_losses(net, batch, w, layers, metric, report_saliency)
    opt.step(result.grads)
    result.report.total = None
    return result.report


def evaluate(net: Network, ds: Dataset, batch_size: int = 250) -> float:
    """Fraction of samples whose arg-max logit (lowest index on ties) equals the label."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = any(getattr(l, "training", False) for l in net.layers)
    net.eval()
    correct = 0
    with no_grad():
        for lo in range(0, len(ds), batch_size):
            logits = net(Tensor(ds.images[lo : lo + batch_size])).data
            correct += int((np.argmax(logits, axis=1) == ds.labels[lo : lo + batch_size]).sum())
    net.train(was_training)
    return correct / len(ds)


def benchmark(
    net: Network,
    batches: Sequence[PairedBatch],
    warmup: int = 100,
    measured: int = 100,
    weights: LossWeights = LossWeights(1.0, 1.0, 0.0),
    layers: Sequence[int] = (),
) -> tuple[float, float, float]:
    """Mean ms per iteration of forward+backward without and with the saliency path.

    Batches are built beforehand, so data loading and augmentation are not
    timed.  The first ``warmup`` iterations of each variant are discarded.
    """
    if measured < 1 or warmup < 0:
        raise ValueError("need measured >= 1 and warmup >= 0")
    baseline = LossWeights(weights.alpha or 1.0, 0.0, weights.gamma)

    def run(w: LossWeights, report: bool) -> float:
        elapsed = 0.0
        for it in range(warmup + measured):
            batch = batches[it % len(batches)]
            t0 = time.perf_counter()
            with Graph():
                compute_losses(net, batch, w, layers, report_saliency=report)
            if it >= warmup:
                elapsed += time.perf_counter() - t0
        return 1000.0 * elapsed / measured

    base_ms = run(baseline, False)
    sal_ms = run(weights, True)
    return base_ms, sal_ms, sal_ms / base_ms


# ---------------------------------------------------------------------------
# epoch loop


def invariance_layers(config: dict, net: Network) -> list[int]:
    """Configured layer set; ``null`` or absent means the last conv block's output."""
    layers = config.get("invariance_layers")
    return [last_conv_block_output(net)] if layers is None else list(layers)


def _batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 1 << 20]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def worker_threads() -> int:
    """SMDA_THREADS caps helper threads; unset or 0 means sequential."""
    try:
        return max(int(os.environ.get("SMDA_THREADS", "0")), 0)
    except ValueError:
        return 0


def iter_batches(ds: Dataset, config: dict, batch_size: int, seed: int, epoch: int, threads: int = 0) -> Iterator[PairedBatch]:
    """Paired batches for one epoch, optionally built ahead on worker threads.

    Batch content depends only on ``(seed, epoch, sample index)``, so the
    stream is identical with or without workers.
    """
    chunks = _batch_indices(len(ds), batch_size, seed, epoch)
    if threads <= 0:
        for idx in chunks:
            yield build_paired_batch(ds, idx, config, seed, epoch)
        return

    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: queue.Queue = queue.Queue()
        ahead = 2 * threads
        it = iter(chunks)
        for idx in it:
            pending.put(pool.submit(build_paired_batch, ds, idx, config, seed, epoch))
            if pending.qsize() >= ahead:
                break
        while not pending.empty():
            yield pending.get().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.put(pool.submit(build_paired_batch, ds, nxt, config, seed, epoch))


@dataclass
class EpochSummary:
    epoch: int
    train_acc: float
    test_acc: float
    l_class: float
    l_sal: float
    l_inv: float
    l_total: float
    sal_distance: float

    def row(self) -> dict:
        return dict(self.__dict__)


def fit(
    net: Network,
    train: Dataset,
    test: Dataset | None,
    config: dict,
    out_dir=None,
    on_epoch: Callable[[EpochSummary], None] | None = None,
) -> list[EpochSummary]:
    """Train for ``config['epochs']`` epochs.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one line per iteration),
    ``epochs.csv`` and checkpoints every ``checkpoint_every`` epochs.
    A non-finite value aborts with :class:`NonFiniteError` naming the
    iteration.
    """
    from .io import save_checkpoint

    wd = config.get("weights", {})
    w = LossWeights(wd.get("alpha", 1.0), wd.get("beta", 1.0), wd.get("gamma", 0.0))
    opt_cfg = config.get("optimizer", {})
    opt = SGD(net.parameters(), lr=opt_cfg.get("lr", 0.01), momentum=opt_cfg.get("momentum", 0.9))
    layers = invariance_layers(config, net)
    metric = config.get("distance", "l2")
    seed = int(config.get("seed", 0))
    batch_size = int(config.get("batch_size", 16))
    epochs = int(config.get("epochs", 30))
    every = int(config.get("checkpoint_every", 0))
    report_sal = bool(config.get("report_saliency", True))
    augment = config.get("augment", {})
    threads = worker_threads()

    out = Path(out_dir) if out_dir is not None else None
    metrics_f = csv_f = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.jsonl", "w")
        csv_f = open(out / "epochs.csv", "w", newline="")
        writer = csv.DictWriter(csv_f, fieldnames=list(EpochSummary.__dataclass_fields__))
        writer.writeheader()

    history: list[EpochSummary] = []
    iteration = 0
    try:
        for epoch in range(1, epochs + 1):
            net.train()
            sums = np.zeros(5)
            steps = 0
            for batch in iter_batches(train, augment, batch_size, seed, epoch, threads):
                t0 = time.perf_counter()
                try:
                    rep = train_step(net, batch, w, opt, layers, metric, report_sal)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"iteration {iteration}: {exc}", exc.node_id, exc.kind) from exc
                ms = 1000.0 * (time.perf_counter() - t0)
                if rep.warning:
                    log.warning("iteration %d: %s", iteration, rep.warning)
                if metrics_f is not None:
                    metrics_f.write(rep.to_json(iteration, ms, epoch=epoch) + "\n")
                sums += (rep.l_class, rep.l_sal, rep.l_inv, rep.l_total, rep.sal_distance)
                steps += 1
                iteration += 1
            means = sums / max(steps, 1)
            summary = EpochSummary(
                epoch,
                evaluate(net, train),
                evaluate(net, test) if test is not None and len(test) else float("nan"),
                *(float(v) for v in means),
            )
            history.append(summary)
            log.info("epoch %d: %s", epoch, json.dumps(summary.row()))
            if writer is not None:
                writer.writerow(summary.row())
                csv_f.flush()
                metrics_f.flush()
            if out is not None and every and epoch % every == 0:
                save_checkpoint(net, out / f"checkpoint_epoch{epoch:03d}.smda")
            if on_epoch is not None:
                on_epoch(summary)
    finally:
        if metrics_f is not None:
            metrics_f.close()
            csv_f.close()
    return history
