"""``smda`` command line: gen-data, train, eval, saliency, bench.

Exit status: 0 ok, 2 usage or config error, 3 I/O error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Tensor, no_grad
from .config import ConfigError, load_run_config, validate
from .data import CLASSES, Dataset, load_dataset, make_splits, save_dataset
from .io import FormatError, load_checkpoint, load_tensor, save_checkpoint, save_tensor, write_pgm
from .losses import LossWeights
from .nn import init_params, small_cnn, tiny_cnn
from .saliency import gradcam, relu_rule_saliency, smoothgrad, vanilla_saliency

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("gradient", "deconv", "guided", "smoothgrad", "gradcam")

log = logging.getLogger("smda")


class UsageError(Exception):
    pass


def build_network(arch: str, input_size: int = 32, num_classes: int = 10, channels: int = 3):
    if arch == "small_cnn":
        return small_cnn(num_classes, channels, input_size)
    if arch == "small_cnn_bn":
        return small_cnn(num_classes, channels, input_size, batchnorm=True)
    if arch == "tiny_cnn":
        return tiny_cnn(num_classes, channels, input_size)
    raise UsageError(f"unknown architecture {arch!r}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be at least 1")
    if args.size < 16:
        raise UsageError("--size must be at least 16")
    test_per_class = args.test_per_class if args.test_per_class is not None else max(args.per_class // 4, 1)
    if test_per_class < 1:
        raise UsageError("--test-per-class must be at least 1")
    out = Path(args.out or "data")
    train, test = make_splits(args.per_class, test_per_class, args.size, args.seed or 0)
    save_dataset(out, train, test)
    for split in (train, test):
        counts = np.bincount(split.labels, minlength=split.num_classes)
        print(f"{split.split}: {len(split)} images")
        for name, c in zip(CLASSES, counts):
            print(f"  {name:<9} {c}")
    return EXIT_OK


def _run_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "data", None):
        overrides["data"] = {"path": args.data}
    if getattr(args, "weights", None):
        try:
            w = LossWeights.parse(args.weights)
        except ValueError as exc:
            raise UsageError(f"--weights: {exc}") from None
        overrides["weights"] = {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma}
    if args.out:
        overrides["out"] = args.out
    return load_run_config(args.config, overrides)


def _datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    data = cfg.get("data", {})
    if "path" in data:
        p = Path(data["path"])
        if not (p / "meta.json").is_file():
            raise UsageError(f"dataset not found at {p}")
        return load_dataset(p)
    return make_splits(data.get("per_class", 200), data.get("test_per_class", 50), data.get("size", 32), data.get("seed", 0))


def cmd_train(args) -> int:
    from .training import fit

    cfg = _run_config(args)
    w = cfg["weights"]
    try:
        LossWeights(w.get("alpha", 1.0), w.get("beta", 1.0), w.get("gamma", 0.0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train, test = _datasets(cfg)
    c, h, _ = train.shape
    net = build_network(cfg["arch"], h, train.num_classes, c)
    init_params(net, cfg["seed"])
    out = Path(cfg.get("out", "run"))
    _write_json(out / "config.json", cfg)
    history = fit(net, train, test, cfg, out)
    save_checkpoint(net, out / "model.smda")
    best = max(history, key=lambda s: s.test_acc)
    summary = {
        "epochs": len(history),
        "weights": cfg["weights"],
        "final_train_acc": history[-1].train_acc,
        "final_test_acc": history[-1].test_acc,
        "best_test_acc": best.test_acc,
        "best_epoch": best.epoch,
        "history": [s.row() for s in history],
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "history"}))
    return EXIT_OK


def _load_net(path):
    try:
        return load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError, FormatError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    from .training import evaluate

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    net = _load_net(args.checkpoint)
    if not args.data or not (Path(args.data) / "meta.json").is_file():
        raise UsageError("--data must point at a dataset directory")
    train, test = load_dataset(args.data)
    ds = test if args.split == "test" else train
    acc = evaluate(net, ds)
    result = {"split": args.split, "n": len(ds), "accuracy": acc}
    print(json.dumps(result))
    if args.out:
        _write_json(Path(args.out) / "eval.json", result)
    return EXIT_OK


def _images(args) -> np.ndarray:
    if args.images:
        arr = load_tensor(args.images)
        return arr[None] if arr.ndim == 3 else arr
    if args.data:
        if not (Path(args.data) / "meta.json").is_file():
            raise UsageError(f"dataset not found at {args.data}")
        _, test = load_dataset(args.data)
        return test.images
    raise UsageError("give --images or --data")


def saliency_for(net, img: np.ndarray, target: int, method: str, n: int = 25, sigma: float | None = None, seed: int = 0):
    if method == "gradient":
        return vanilla_saliency(net, img, target)
    if method in ("deconv", "guided"):
        return relu_rule_saliency(net, img, target, method)
    if method == "smoothgrad":
        return smoothgrad(net, img, target, n=n, sigma=sigma, seed=seed)
    if method == "gradcam":
        return gradcam(net, img, target)
    raise UsageError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def cmd_saliency(args) -> int:
    methods = [m.strip() for m in args.method.split(",")]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    net = _load_net(args.checkpoint)
    net.eval()
    images = _images(args)
    indices = [int(i) for i in args.index.split(",")] if args.index else list(range(min(len(images), 4)))
    out = Path(args.out or "saliency")
    out.mkdir(parents=True, exist_ok=True)
    for i in indices:
        if not 0 <= i < len(images):
            raise UsageError(f"image index {i} out of range")
        img = images[i]
        with no_grad():
            logits = net(Tensor(img[None])).data[0]
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        predicted = int(np.argmax(logits))
        if args.target_class == "predicted":
            target = predicted
        else:
            try:
                target = int(args.target_class)
            except ValueError:
                raise UsageError("--target-class must be 'predicted' or an integer") from None
            if not 0 <= target < len(logits):
                raise UsageError(f"--target-class {target} out of range")
        for m in methods:
            smap = saliency_for(net, img, target, m, args.n, args.sigma, args.seed or 0)
            stem = f"img{i:04d}_{m}"
            write_pgm(out / f"{stem}.pgm", smap.numpy())
            if args.raw:
                save_tensor(out / f"{stem}.smda", smap.numpy())
            sidecar = {
                "image": i,
                "method": m,
                "predicted_class": predicted,
                "confidence": float(probs[predicted]),
                "target_class": target,
                "pgm": f"{stem}.pgm",
                "height": smap.shape[0],
                "width": smap.shape[1],
            }
            validate(sidecar, "saliency")
            _write_json(out / f"{stem}.json", sidecar)
            print(f"{stem}.pgm target={target} predicted={predicted}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .training import benchmark, build_paired_batch, invariance_layers

    if args.warmup < 0 or args.measured < 1:
        raise UsageError("--warmup must be >= 0 and --measured >= 1")
    if args.batch_size < 1:
        raise UsageError("--batch-size must be >= 1")
    cfg = load_run_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    seed = cfg["seed"]
    size = cfg.get("data", {}).get("size", 32)
    train, _ = make_splits(max(args.batch_size // 10 + 1, 2) * 4, 1, size, seed)
    net = build_network(cfg["arch"], size)
    init_params(net, seed)
    rng = np.random.default_rng(seed)
    batches = [build_paired_batch(train, rng.choice(len(train), args.batch_size, replace=False), cfg["augment"], seed, k) for k in range(4)]
    w = cfg["weights"]
    weights = LossWeights(w.get("alpha", 1.0), w.get("beta", 1.0) or 1.0, w.get("gamma", 0.0))
    base, sal, ratio = benchmark(net, batches, args.warmup, args.measured, weights, invariance_layers(cfg, net))
    report = {
        "arch": cfg["arch"],
        "batch_size": args.batch_size,
        "warmup": args.warmup,
        "measured": args.measured,
        "baseline_ms": base,
        "saliency_ms": sal,
        "ratio": ratio,
    }
    validate(report, "bench")
    print(f"warmup={args.warmup} measured={args.measured}")
    print(f"baseline {base:.2f} ms/iter  saliency {sal:.2f} ms/iter  ratio {ratio:.2f}")
    _write_json(Path(args.out or ".") / "bench.json", report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config JSON")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="smda", description="Saliency-guided augmentation training engine.", parents=[common])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic shapes dataset")
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-per-class", type=int)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a network")
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--weights", help="alpha,beta,gamma")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("saliency", parents=[common], help="export saliency maps as PGM")
    s.add_argument("--checkpoint")
    s.add_argument("--images", help="SMDA file with (C,H,W) or (N,C,H,W) images")
    s.add_argument("--data", help="dataset directory (test split is used)")
    s.add_argument("--index", help="comma-separated image indices")
    s.add_argument("--method", default="gradient", help="comma-separated: " + ", ".join(METHODS))
    s.add_argument("--target-class", default="predicted")
    s.add_argument("--n", type=int, default=25, help="SmoothGrad samples")
    s.add_argument("--sigma", type=float, help="SmoothGrad noise level (default 0.1 x range)")
    s.add_argument("--raw", action="store_true", help="also dump unscaled values as SMDA")
    s.set_defaults(func=cmd_saliency)

    b = sub.add_parser("bench", parents=[common], help="time baseline vs saliency iterations")
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--measured", type=int, default=100)
    b.add_argument("--batch-size", type=int, default=16)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"smda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"smda: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"smda: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
