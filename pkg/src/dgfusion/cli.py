"""Command-line entry points: ``dgf``, ``scenegen`` and ``losskit``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .kvconfig import ConfigError, from_mapping, read_kv


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=float))


# -- scenegen -------------------------------------------------------------------------


def _scene_config(path: str | None):
    from .scenegen.types import SceneConfig

    return from_mapping(SceneConfig, read_kv(path)) if path else SceneConfig()


def cmd_data_make(args) -> int:
    from .harness.train import resolve_path
    from .scenegen.dataset import make_dataset

    cfg = _scene_config(args.config)
    n = {k: getattr(args, k) if getattr(args, k) is not None else getattr(cfg, k)
         for k in ("n_train", "n_val", "n_test")}
    out = resolve_path(args.out)
    manifest = make_dataset(cfg, n["n_train"], n["n_val"], n["n_test"], out, force=args.force)
    print(f"wrote {len(manifest['entries'])} samples to {out}")
    return 0


def _add_data_make_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value scene config")
    p.add_argument("--out", default="data", help="dataset root (default: data)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty root")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.set_defaults(func=cmd_data_make)


def scenegen_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scenegen", description="synthetic multimodal scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_data_make_args(sub.add_parser("make", help="write a dataset with manifest"))
    return _run(parser, argv)


# -- losskit --------------------------------------------------------------------------


def _load_array(path: str, names: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Blocks ``names`` from a DGFS file; a lone array for single-name ``.npy`` input."""
    from .scenegen.io import read_blocks

    if path.endswith(".npy"):
        if len(names) != 1:
            raise ConfigError(f"{path}: .npy holds one array but {names} are needed")
        return {names[0]: np.load(path)}
    _, _, blocks = read_blocks(path)
    if len(names) == 1 and names[0] not in blocks and len(blocks) == 1:
        return {names[0]: next(iter(blocks.values()))}
    missing = [n for n in names if n not in blocks]
    if missing:
        raise ConfigError(f"{path}: missing blocks {missing}")
    return {n: blocks[n] for n in names}


def cmd_losskit_eval(args) -> int:
    from . import diffmath as dm
    from .losskit.losses import LossWeights, loss_depth_total, loss_total, make_report

    weights = from_mapping(LossWeights, read_kv(args.weights)) if args.weights else LossWeights()
    pred = _load_array(args.pred, ("depth",))["depth"].astype(np.float64)
    gt = _load_array(args.gt, ("lidar_depth", "lidar_valid"))
    rgb = _load_array(args.rgb, ("rgb",))["rgb"]
    pan = _load_array(args.pan, ("class_id", "instance_id"))
    depth = loss_depth_total(dm.Tensor(pred), gt["lidar_depth"], gt["lidar_valid"].astype(bool), rgb,
                             pan["class_id"], pan["instance_id"], weights)
    total = loss_total(None, None, depth.total, weights)
    _emit(make_report(total, depth=depth).as_dict())
    return 0


def cmd_losskit_oracle(args) -> int:
    from .losskit.suite import run

    result = run(n_cases=args.cases, seed=args.seed)
    _emit(result)
    worst = max(v for k, v in result.items() if not k.startswith("_"))
    return 0 if worst <= 1e-12 else 1


def _add_losskit_args(sub) -> None:
    ev = sub.add_parser("eval", help="depth-loss report for one prediction")
    ev.add_argument("--pred", required=True, help="predicted depth (.npy or DGFS block 'depth')")
    ev.add_argument("--gt", required=True, help="DGFS file with lidar_depth and lidar_valid")
    ev.add_argument("--rgb", required=True, help="DGFS file with an rgb block")
    ev.add_argument("--pan", required=True, help="DGFS file with class_id and instance_id")
    ev.add_argument("--weights", help="key = value loss weights")
    ev.set_defaults(func=cmd_losskit_eval)
    orc = sub.add_parser("oracle", help="compare every loss with its brute-force loop")
    orc.add_argument("--cases", type=int, default=100)
    orc.add_argument("--seed", type=int, default=0)
    orc.set_defaults(func=cmd_losskit_oracle)


def losskit_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="losskit", description="depth, segmentation and condition losses")
    _add_losskit_args(parser.add_subparsers(dest="command", required=True))
    return _run(parser, argv)


# -- dgf ------------------------------------------------------------------------------


def _train_config(args):
    from .harness.train import parse_toggle, read_train_config

    overrides = dict(parse_toggle(t) for t in (args.toggle or []))
    for key in ("steps", "seed", "data_root", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    return read_train_config(args.config, overrides)


def cmd_train(args) -> int:
    from .harness.train import train

    cfg = _train_config(args)
    if not cfg.out_dir:
        cfg = replace(cfg, out_dir=f"runs/seed{cfg.seed}")
    result = train(cfg, log=lambda s: print(s, file=sys.stderr), log_every=args.log_every)
    _emit({"out_dir": cfg.out_dir, **result.report()["val"], "loss_curve": None})
    return 0


def cmd_eval(args) -> int:
    from .harness.train import evaluate

    report = evaluate(args.ckpt, args.split, args.data_root)
    _emit(report.as_dict())
    return 0


def cmd_ablate(args) -> int:
    from .harness.ablation import format_table, run_ablation_suite, write_report

    cfg = _train_config(args)
    report = run_ablation_suite(cfg, list(range(cfg.seed, cfg.seed + args.seeds)),
                                log=lambda s: print(s, file=sys.stderr))
    path = write_report(report, args.out)
    print(format_table(report))
    print(f"report: {path}")
    return 0 if all(c["passed"] for c in report["checks"].values()) else 1


def cmd_gradcheck(args) -> int:
    from .harness.gradcheck import grad_check

    report = grad_check(seed=args.seed, max_entries=args.entries)
    print(report.summary())
    if args.json:
        _emit(report.as_dict())
    return 0 if report.passed else 1


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run config (model.* and loss.* keys allowed)")
    p.add_argument("--toggle", action="append", metavar="KEY=BOOL",
                   help="ablation toggle, repeatable: use_ct, use_aux_depth_head, use_dt, "
                        "use_smoothness, use_tau_filter")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root", dest="data_root")


def dgf_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dgf", description="depth-guided multimodal fusion at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset commands").add_subparsers(dest="data_command", required=True)
    _add_data_make_args(data.add_parser("make", help="generate the synthetic dataset"))

    tr = sub.add_parser("train", help="train one configuration")
    _add_train_args(tr)
    tr.add_argument("--out-dir", dest="out_dir")
    tr.add_argument("--log-every", type=int, default=100)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--split", default="val", choices=("train", "val", "test"))
    ev.add_argument("--data-root", dest="data_root")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="architecture and loss ablation tables")
    _add_train_args(ab)
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--out", default="ablation.json")
    ab.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference check on the tiny model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--entries", type=int, default=2, help="coordinates sampled per tensor")
    gc.add_argument("--json", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    lk = sub.add_parser("losskit", help="loss tools")
    _add_losskit_args(lk.add_subparsers(dest="losskit_command", required=True))
    return _run(parser, argv)


def _run(parser: argparse.ArgumentParser, argv) -> int:
    from .fusenet.checkpoint import CheckpointError
    from .scenegen.dataset import DatasetError
    from .scenegen.io import FormatError

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FormatError, CheckpointError, FileNotFoundError) as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dgf_main())


def scenegen_entry() -> None:
    sys.exit(scenegen_main())


def losskit_entry() -> None:
    sys.exit(losskit_main())


if __name__ == "__main__":
    main()
