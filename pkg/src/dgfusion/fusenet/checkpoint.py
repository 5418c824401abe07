"""Checkpoints in the DGFS block format: one f64 block per parameter plus a
``__meta__`` block holding UTF-8 JSON (config, config hash, step)."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from ..kvconfig import config_hash, from_mapping
from ..scenegen.io import FormatError, read_blocks, write_blocks
from .config import ModelConfig
from .layers import Params
from .model import build_params

META = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: Params, cfg: ModelConfig, step: int, extra: dict | None = None) -> None:
    meta = {
        "model_config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "step": int(step),
        "seed": params.seed,
    }
    if extra:
        meta.update(extra)
    arrays = dict(params.state())
    arrays[META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    write_blocks(path, cfg.height, cfg.width, arrays)


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig, dict]:
    try:
        h, w, arrays = read_blocks(path)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None
    except FormatError as e:
        raise CheckpointError(f"{path}: {e}") from None
    if META not in arrays:
        raise CheckpointError(f"{path}: missing metadata block")
    meta = json.loads(arrays.pop(META).tobytes().decode("utf-8"))
    cfg = from_mapping(ModelConfig, meta["model_config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match its stored config")
    if (cfg.height, cfg.width) != (h, w):
        raise CheckpointError("checkpoint header size disagrees with its config")
    params = build_params(cfg, meta.get("seed", 0))
    try:
        params.load_state(arrays)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from None
    return params, cfg, meta
