"""Command-line front end.

Exit codes: 0 success, 2 usage or validation failure, 3 runtime numeric
failure. ``PCMA_THREADS`` caps kernel thread pools; ``--deterministic``
forces single-threaded kernels and fixed summation order for bitwise
reproducible runs. Thread limits are applied before the numerical modules
load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]

_THREAD_ENV_KEYS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _configure_threads(limit: int | None) -> None:
    if limit is None:
        return
    if "numpy" not in sys.modules:
        for key in _THREAD_ENV_KEYS:
            os.environ.setdefault(key, str(limit))
    else:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=limit)
        except Exception:
            pass


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def _cmd_gen_data(args) -> int:
    from .synthdata import generate, write_dataset

    scenes = generate(
        seed=args.seed,
        count=args.count,
        frames=args.frames,
        height=args.height,
        width=args.width,
        n_classes=args.classes,
        noise=args.noise,
        audio_dim=args.audio_dim,
    )
    info = {
        "seed": args.seed,
        "frames": args.frames,
        "height": args.height,
        "width": args.width,
        "n_classes": args.classes,
        "noise": args.noise,
        "audio_dim": args.audio_dim,
    }
    write_dataset(args.out, scenes, info)
    _print_json({"dataset": str(args.out), "scenes": len(scenes)})
    return 0


def _load_config(path: str):
    from .trainer import split_config

    raw = Path(path).read_text()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return split_config(data)


def _cmd_train(args) -> int:
    from .trainer import train

    net_config, train_config = _load_config(args.config)
    summary = train(net_config, train_config, args.data, args.out)
    _print_json(summary)
    return 0


def _cmd_eval(args) -> int:
    from .trainer import evaluate

    _print_json(evaluate(args.checkpoint, args.data))
    return 0


def _cmd_infer(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .container import write_tensor
    from .decoder import Network
    from .synthdata import load_scene
    from .trainer import predict_scene

    config, params = load_checkpoint(args.checkpoint)
    net = Network(config, params)
    scene = load_scene(args.scene)
    probs, mask, ratios = predict_scene(net, scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "prediction.pcmt", np.round(probs * 255.0).astype(np.uint8))
    write_tensor(out / "mask.pcmt", mask.astype(np.uint8))
    _print_json({
        "prediction": str(out / "prediction.pcmt"),
        "mask": str(out / "mask.pcmt"),
        "mask_ratios": {f"m{k}": v for k, v in sorted(ratios.items())},
    })
    return 0


def _cmd_flops(args) -> int:
    from .flops import attention_flops

    if not 0.0 <= args.ratio <= 1.0:
        raise ValueError(f"--ratio must lie in [0, 1], got {args.ratio}")
    if args.n < 1 or args.c < 1:
        raise ValueError("--n and --c must be positive")
    n_selected = int(args.n * args.ratio)
    msa, qsca = attention_flops(args.n, args.c, n_selected)
    _print_json({
        "n_tokens": args.n,
        "channels": args.c,
        "n_selected": n_selected,
        "msa": msa,
        "qsca": qsca,
        "ratio": qsca / msa,
    })
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcma",
        description="Audio-visual segmentation with progressive confident masking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--frames", type=int, default=2)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--classes", type=int, default=6)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--audio-dim", type=int, default=128)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--config", required=True, help="JSON config (network + optimization)")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint over a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(func=_cmd_eval)

    inf = sub.add_parser("infer", help="segment one scene with a checkpoint")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--scene", required=True)
    inf.add_argument("--out", required=True)
    inf.set_defaults(func=_cmd_infer)

    fl = sub.add_parser("flops", help="evaluate the attention cost closed forms")
    fl.add_argument("--n", type=int, required=True, help="token count")
    fl.add_argument("--c", type=int, required=True, help="channel width")
    fl.add_argument("--ratio", type=float, default=1.0, help="kept-query fraction")
    fl.set_defaults(func=_cmd_flops)

    for p in (gen, tr, ev, inf, fl):
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded kernels, bitwise reproducible")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    env_threads = os.environ.get("PCMA_THREADS")
    if args.deterministic:
        _configure_threads(1)
    elif env_threads:
        try:
            _configure_threads(max(1, int(env_threads)))
        except ValueError:
            print(f"ignoring malformed PCMA_THREADS={env_threads!r}", file=sys.stderr)

    if args.deterministic:
        from .tensor import set_deterministic

        set_deterministic(True)

    from .container import ContainerError
    from .tensor import NumericError

    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except AssertionError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ContainerError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
