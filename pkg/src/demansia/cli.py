"""Command-line surface: train, eval, check, bench, export-dataset.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure
(tolerance violation or non-finite loss), 4 I/O or corrupt checkpoint.
Every command is deterministic given --seed; numbers print with %.6g.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from .attention import attention_flop_count, make_attention_params, multi_head_attention
from .checkpoint import parse_kv_text, read_tensors, write_tensors
from .errors import CheckpointError, ConfigError, DomainError, NumericError
from .model import DeMansiaConfig, config_from_arrays, make_model, predict
from .numerics import Tape, Tensor, backward, finite_diff_coords, rel_err
from .ssm import (
    ContinuousSSM,
    apply_causal_kernel,
    scan_flop_count,
    selective_scan_parallel,
    selective_scan_sequential,
    ssm_conv_kernel,
    ssm_recurrence,
)
from .token_labeling import make_patch_targets, synth_dense_dataset, total_loss
from .training import TrainConfig, evaluate, train

__all__ = ["main", "entry"]


def _field_kinds(cls) -> dict[str, str]:
    return {
        f.name: f.type if isinstance(f.type, str) else f.type.__name__
        for f in dataclasses.fields(cls)
    }


_MODEL_FIELDS = _field_kinds(DeMansiaConfig)
_TRAIN_FIELDS = _field_kinds(TrainConfig)


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _coerce(name: str, kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {name}: expected a boolean, got {raw!r}")
    return raw


def _load_configs(path: str | None, overrides: dict) -> tuple[DeMansiaConfig, TrainConfig]:
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    pairs: dict[str, str] = {}
    if path is not None:
        pairs.update(parse_kv_text(Path(path).read_text()))
    for key, raw in pairs.items():
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _coerce(key, _MODEL_FIELDS[key], raw)
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, _TRAIN_FIELDS[key], raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in _MODEL_FIELDS:
            model_kwargs[key] = value
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = value
    required = ("d_model", "n_layers", "image_size", "patch_size", "n_classes", "n_state")
    missing = [k for k in required if k not in model_kwargs]
    if missing:
        raise ConfigError(f"config is missing required keys: {', '.join(missing)}")
    return DeMansiaConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    types = {"int": int, "float": float, "str": str}
    for fields in (_MODEL_FIELDS, _TRAIN_FIELDS):
        for name, kind in fields.items():
            if kind == "bool":
                parser.add_argument(f"--{name}", default=None, type=lambda r, n=name: _coerce(n, "bool", r))
            else:
                parser.add_argument(f"--{name}", default=None, type=types.get(kind, str))


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in list(_MODEL_FIELDS) + list(_TRAIN_FIELDS)}
    model_cfg, train_cfg = _load_configs(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set = synth_dense_dataset(train_cfg.seed, train_cfg.n_train, model_cfg.image_size, model_cfg.n_classes)
    eval_set = synth_dense_dataset(train_cfg.seed + 1, train_cfg.n_eval, model_cfg.image_size, model_cfg.n_classes)
    model = make_model(model_cfg, seed=train_cfg.seed)
    log = print if args.verbose else None
    rows = train(
        model,
        train_set,
        eval_set,
        train_cfg,
        csv_path=out / "metrics.csv",
        ckpt_path=out / "checkpoint.dmns",
        log=log,
    )
    last = rows[-1]
    print(
        f"done: steps={last['step']} top1={_fmt(last['top1'])} top5={_fmt(last['top5'])} "
        f"train_loss={_fmt(last['train_loss'])}"
    )
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.dmns'}")
    return 0


def cmd_eval(args) -> int:
    tensors = read_tensors(args.checkpoint)
    cfg = config_from_arrays(tensors)
    model = make_model(cfg, seed=0)
    state = {k: v for k, v in tensors.items() if not k.startswith(("config.", "ema.", "opt."))}
    model.load_state(state)
    if args.ema:
        model.load_state({k[len("ema."):]: v for k, v in tensors.items() if k.startswith("ema.")})
    dataset = synth_dense_dataset(args.seed, args.n_samples, cfg.image_size, cfg.n_classes)
    modes = {"on": [True], "off": [False], "both": [False, True]}[args.fusion]
    for fused in modes:
        top1, top5, loss = evaluate(model, dataset, use_fusion=fused)
        tag = "on" if fused else "off"
        print(f"fusion={tag} top1={_fmt(top1)} top5={_fmt(top5)} loss={_fmt(loss)}")
    return 0


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------


def _check_scan(seed_count=10) -> float:
    worst = 0.0
    from .ssm import SelectionParams

    for seed in range(seed_count):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 9))
        s = SelectionParams(
            w_b=Tensor(rng.uniform(-0.6, 0.6, (n, d))),
            w_c=Tensor(rng.uniform(-0.6, 0.6, (n, d))),
            w_delta=Tensor(rng.uniform(-0.6, 0.6, (1, d))),
            delta_bias=Tensor(rng.uniform(-1.5, 0.5, d)),
        )
        a = Tensor(-rng.uniform(0.5, 2.0, (d, n)))
        for m in range(1, 66):
            x = Tensor(rng.uniform(-1, 1, (m, d)))
            seq = selective_scan_sequential(x, a, s)
            par = selective_scan_parallel(x, a, s)
            worst = max(worst, rel_err(seq, par))
    return worst


def _check_kernel(cases=40) -> float:
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 65))
        sys_ = ContinuousSSM(
            -rng.uniform(0.2, 3.0, (d, n)), rng.uniform(-1, 1, (d, n)), rng.uniform(-1, 1, (d, n))
        )
        disc = sys_.discretize(float(rng.uniform(0.05, 0.8)), m)
        x = rng.uniform(-1, 1, (m, d))
        worst = max(
            worst,
            rel_err(ssm_recurrence(disc, sys_.C, x), apply_causal_kernel(x, ssm_conv_kernel(disc, sys_.C, m))),
        )
    return worst


def _check_grad(coords_per_tensor=3) -> float:
    from .model import PRESETS

    model = make_model(PRESETS["micro"], seed=11)
    sample = synth_dense_dataset(12, 1, 32, 10)[0]
    target = make_patch_targets(sample.dense_map, 4)

    def loss_value() -> float:
        cls, patch = model.forward(sample.image)
        return float(total_loss(cls, sample.label, patch, target, 0.5).data)

    with Tape():
        cls, patch = model.forward(sample.image)
        backward(total_loss(cls, sample.label, patch, target, 0.5))
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, t in model.parameters().items():
        k = min(coords_per_tensor, t.size)
        coords = rng.choice(t.size, size=k, replace=False)
        fd = finite_diff_coords(lambda _: loss_value(), t, coords)
        got = t.grad.reshape(-1)[coords] if t.grad is not None else np.zeros(k)
        for g, f in zip(got, fd):
            denom = max(1.0, abs(g), abs(f))
            worst = max(worst, abs(g - f) / denom)
    return worst


def _check_fusion(cases=200) -> float:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(cases):
        k = int(rng.integers(2, 12))
        j = int(rng.integers(1, 30))
        cls = rng.uniform(-3, 3, k)
        patch = rng.uniform(-3, 3, (j, k))
        fused = predict(Tensor(cls), Tensor(patch)).data
        for c in range(k):
            best = max(patch[r, c] for r in range(j))
            worst = max(worst, abs(fused[c] - (cls[c] + 0.5 * best)))
    return worst


def cmd_check(args) -> int:
    suites = {
        "scan": (_check_scan, 1e-10),
        "kernel": (_check_kernel, 1e-10),
        "grad": (_check_grad, 1e-4),
        "fusion": (_check_fusion, 1e-12),
    }
    fn, tol = suites[args.kind]
    worst = fn()
    status = "pass" if worst <= tol else "FAIL"
    print(f"check {args.kind}: worst error {_fmt(worst)} (tolerance {_fmt(tol)}) {status}")
    return 0 if worst <= tol else 3


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------


def _bench_attention(lengths, seed) -> tuple[list[int], list[float]]:
    # small embedding width keeps the linear projection terms from masking
    # the quadratic attention core over the default 64..1024 length span
    rng = np.random.default_rng(seed)
    p = make_attention_params(rng, d_model=8, d_k=16, d_v=16, h=2)
    counts, seconds = [], []
    for n in lengths:
        counts.append(attention_flop_count(n, p))
        x = Tensor(rng.uniform(-1, 1, (n, p.d_model)))
        t0 = time.perf_counter()
        multi_head_attention(x, p)
        seconds.append(time.perf_counter() - t0)
    return counts, seconds


def _bench_scan(lengths, seed) -> tuple[list[int], list[float]]:
    from .ssm import SelectionParams

    rng = np.random.default_rng(seed)
    d, n_state = 16, 8
    s = SelectionParams(
        w_b=Tensor(rng.uniform(-0.6, 0.6, (n_state, d))),
        w_c=Tensor(rng.uniform(-0.6, 0.6, (n_state, d))),
        w_delta=Tensor(rng.uniform(-0.6, 0.6, (1, d))),
        delta_bias=Tensor(rng.uniform(-1.5, 0.5, d)),
    )
    a = Tensor(-rng.uniform(0.5, 2.0, (d, n_state)))
    counts, seconds = [], []
    for m in lengths:
        counts.append(scan_flop_count(m, d, n_state))
        x = Tensor(rng.uniform(-1, 1, (m, d)))
        t0 = time.perf_counter()
        selective_scan_sequential(x, a, s)
        seconds.append(time.perf_counter() - t0)
    return counts, seconds


def _loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def cmd_bench(args) -> int:
    lengths = args.lengths
    if len(lengths) < 5 or min(lengths) < 1 or max(lengths) / min(lengths) < 8:
        print("bench needs >= 5 lengths spanning at least 8x", file=sys.stderr)
        return 2
    runner = {"attention": _bench_attention, "scan": _bench_scan}[args.kind]
    counts, seconds = runner(lengths, args.seed)
    flop_slope = _loglog_slope(lengths, counts)
    wall_slope = _loglog_slope(lengths, [max(s, 1e-9) for s in seconds])
    print(f"{'length':>8} {'flops':>16} {'seconds':>12}")
    for n, c, s in zip(lengths, counts, seconds):
        print(f"{n:>8} {c:>16} {_fmt(s):>12}")
    print(f"flop log-log slope: {_fmt(flop_slope)} (gated metric)")
    print(f"wall log-log slope: {_fmt(wall_slope)} (informational)")
    if args.csv:
        lines = ["# wall_seconds: " + ",".join(f"{n}={_fmt(s)}" for n, s in zip(lengths, seconds))]
        lines.append("length,flops")
        lines += [f"{n},{c}" for n, c in zip(lengths, counts)]
        Path(args.csv).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# dataset export
# ---------------------------------------------------------------------------


def cmd_export_dataset(args) -> int:
    data = synth_dense_dataset(args.seed, args.n_samples, args.image_size, args.n_classes)
    blob = {
        "images": np.stack([s.image for s in data]),
        "labels": np.asarray([float(s.label) for s in data]),
        "maps": np.stack([s.dense_map.scores for s in data]),
    }
    write_tensors(args.out, blob)
    print(f"wrote {args.n_samples} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demansia", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on the synthetic dense-map task")
    p_train.add_argument("--config", default=None, help="key = value config file")
    p_train.add_argument("--out", default="runs/train", help="output directory")
    p_train.add_argument("--verbose", action="store_true")
    _add_override_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--seed", type=int, default=1)
    p_eval.add_argument("--n-samples", type=int, default=256)
    p_eval.add_argument("--fusion", choices=["on", "off", "both"], default="both")
    p_eval.add_argument("--ema", action="store_true", help="evaluate the shadow parameters")
    p_eval.set_defaults(fn=cmd_eval)

    p_check = sub.add_parser("check", help="run an oracle suite")
    p_check.add_argument("kind", choices=["grad", "scan", "kernel", "fusion"])
    p_check.set_defaults(fn=cmd_check)

    p_bench = sub.add_parser("bench", help="complexity benchmark")
    p_bench.add_argument("kind", choices=["attention", "scan"])
    p_bench.add_argument("--lengths", type=int, nargs="+", default=[64, 128, 256, 512, 1024])
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--csv", default=None)
    p_bench.set_defaults(fn=cmd_bench)

    p_export = sub.add_parser("export-dataset", help="write images and dense maps to a container")
    p_export.add_argument("--seed", type=int, default=0)
    p_export.add_argument("--n-samples", type=int, default=64)
    p_export.add_argument("--image-size", type=int, default=32)
    p_export.add_argument("--n-classes", type=int, default=10)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(fn=cmd_export_dataset)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
