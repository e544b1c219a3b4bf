"""Command-line entry point: train, eval, bench, grad-check, report.

Exit codes: 0 success, 1 failed check, 2 invalid configuration,
3 corrupted/incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, evaluate, train
from .envs import ENV_BUILDERS
from .errors import CheckpointError, ConfigError, QForgeError
from .gradcheck import check_gradients
from .models import ModelConfig, build_model, load_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3


def available_presets() -> list:
    files = resources.files("qforge").joinpath("presets")
    return sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("qforge").joinpath("presets", f"{name}.json")
    if not path.is_file():
        raise ConfigError(
            f"unknown preset {name!r}; available presets: {', '.join(available_presets())}"
        )
    return json.loads(path.read_text())


def parse_overrides(pairs: list) -> list:
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key.strip(), value))
    return out


def apply_overrides(config: dict, overrides: list) -> dict:
    for key, value in overrides:
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return config


def resolve_config(args) -> dict:
    if bool(args.preset) == bool(args.config):
        raise ConfigError("provide exactly one of --preset or --config")
    if args.preset:
        config = load_preset(args.preset)
    else:
        with open(args.config) as fh:
            config = json.load(fh)
    apply_overrides(config, parse_overrides(args.set))
    for section in ("env", "model", "agent"):
        if section not in config:
            raise ConfigError(f"config is missing the {section!r} section")
    if config["env"] not in ENV_BUILDERS:
        raise ConfigError(
            f"env: unknown environment {config['env']!r}; available: {sorted(ENV_BUILDERS)}"
        )
    return config


def output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    env_out = os.environ.get("QFORGE_OUT")
    return Path(env_out) if env_out else Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def cmd_train(args) -> int:
    config = resolve_config(args)
    try:
        mcfg = ModelConfig.from_dict(config["model"])
        acfg = AgentConfig(**config["agent"])
    except (ConfigError, TypeError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "train",
        "preset": args.preset,
        "seed": args.seed,
        "out": str(out),
        "version": __version__,
        "env": config["env"],
        "model": mcfg.to_dict(),
        "agent": acfg.to_dict(),
    }
    with open(out / "run.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    summary = train(acfg, mcfg, config["env"], seed=args.seed, out_dir=out)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if args.figures:
        from .report import render_run

        render_run(out)
    print(f"run complete: {out}/metrics.csv")
    if summary["last_eval_avg_reward"] is not None:
        print(f"last eval avg reward: {summary['last_eval_avg_reward']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    env_name = args.env
    if env_name is None:
        # fall back to the run manifest sitting next to the checkpoint
        manifest = Path(args.checkpoint).parent / "run.json"
        if manifest.exists():
            env_name = json.loads(manifest.read_text())["env"]
        else:
            print("error: --env required (no run.json next to checkpoint)", file=sys.stderr)
            return EXIT_CONFIG
    avg = evaluate(model, env_name, episodes=args.episodes, base_seed=args.seed)
    print(avg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        new = not (out / "eval.csv").exists()
        with open(out / "eval.csv", "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["checkpoint", "env", "episodes", "avg_reward"])
            writer.writerow([args.checkpoint, env_name, args.episodes, repr(avg)])
    return EXIT_OK


BENCH_CONFIGS = {
    "dcqn": dict(variant="dcqn", conv=((8, 8, 4), (16, 4, 2), (16, 3, 1)), fc=(128, 64)),
    "dtqn_vit": dict(variant="dtqn_vit", patch=16, embed=32, depth=1, heads=2,
                     ff_dim=64, fc=(128, 64, 32)),
    "dtqn_proj": dict(variant="dtqn_proj", embed=64, depth=1, heads=2, ff_dim=128),
    "conv_transformer": dict(variant="conv_transformer",
                             conv=((8, 8, 4), (16, 4, 2), (16, 3, 1)),
                             embed=32, depth=1, heads=2, ff_dim=64),
}


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for name, kwargs in BENCH_CONFIGS.items():
        cfg = ModelConfig(frames=2, actions=4, **kwargs)
        model = build_model(cfg, rng)
        x = rng.standard_normal((args.batch, cfg.frames, *cfg.input_hw))

        def forward_only():
            return model.q_values(x)

        def forward_backward():
            q = model.q_values(x)
            q.sum().backward()
            for _, p in model.parameters():
                p.grad = None

        row = {"variant": name, "params": model.param_count(), "batch": args.batch}
        for label, fn in (("forward", forward_only), ("train", forward_backward)):
            for _ in range(args.warmup):
                fn()
            times = []
            for _ in range(args.iters):
                t0 = time.perf_counter()
                fn()
                times.append((time.perf_counter() - t0) * 1e3)
            # statistics over post-warmup iterations only
            row[f"{label}_ms_mean"] = float(np.mean(times))
            row[f"{label}_ms_std"] = float(np.std(times))
        rows.append(row)
        print(
            f"{name:>17s}  params {row['params']:>9d}  "
            f"forward {row['forward_ms_mean']:8.3f} ± {row['forward_ms_std']:6.3f} ms  "
            f"fwd+bwd {row['train_ms_mean']:8.3f} ± {row['train_ms_std']:6.3f} ms"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        from .report import render_bench

        render_bench(rows, out)
        print(f"wrote {out}/bench.csv and {out}/bench.png")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .layers import GatedTXLLayer

    rng = np.random.default_rng(args.seed)
    tol = 1e-4
    failures = 0

    def report(name, worst):
        nonlocal failures
        ok = worst < tol
        failures += 0 if ok else 1
        print(f"{name:>22s}  max rel err {worst:.3e}  {'ok' if ok else 'FAIL'}")

    layer = GatedTXLLayer(8, 2, 16, rng)
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
    params = [("x", x)] + layer.parameters()
    report("gated_txl_layer", check_gradients(lambda: layer(x).sum(), params, rng))

    for name, kwargs in BENCH_CONFIGS.items():
        cfg = ModelConfig(frames=2, actions=3, input_hw=(12, 12), **_tiny(kwargs))
        model = build_model(cfg, rng)
        xin = rng.standard_normal((2, 2, 12, 12))
        report(
            name,
            check_gradients(
                lambda: model.q_values(xin, training=name == "dcqn").sum(),
                model.parameters(),
                rng,
                max_per_param=4,
            ),
        )
    return EXIT_OK if failures == 0 else EXIT_FAIL


def _tiny(kwargs: dict) -> dict:
    small = dict(kwargs)
    if "conv" in small:
        small["conv"] = ((4, 3, 2), (8, 3, 1))
    if "fc" in small:
        small["fc"] = tuple(8 for _ in small["fc"])
    if "patch" in small:
        small["patch"] = 4
    if "embed" in small:
        small["embed"] = 8
        small["ff_dim"] = 16
    return small


def cmd_report(args) -> int:
    from .report import render_run

    written = render_run(args.run, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qforge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training session")
    p.add_argument("--preset", help="named preset (see --preset help on error)")
    p.add_argument("--config", help="path to a JSON config file")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="output directory (falls back to $QFORGE_OUT)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. agent.n_episodes=200")
    p.add_argument("--figures", action="store_true",
                   help="render reward/loss/epsilon figures after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    p.add_argument("checkpoint")
    p.add_argument("--env", help="environment name (default: run.json next to checkpoint)")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="append the result to <out>/eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time forward / forward+backward per variant")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write bench.csv and bench.png here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="figure directory (default: the run directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except QForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
