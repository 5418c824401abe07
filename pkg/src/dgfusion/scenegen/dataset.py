from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict
from pathlib import Path

from .generate import generate_scene
from .io import load_sample, save_sample
from .types import ConditionLabel, MultimodalSample, SceneConfig

SPLITS = ("train", "val", "test")
# seeds of different splits never collide for n < SPLIT_STRIDE
SPLIT_STRIDE = 1_000_000
MANIFEST = "manifest.json"


class DatasetError(RuntimeError):
    pass


def split_seeds(base_seed: int, split: str, n: int) -> list[int]:
    off = base_seed * 3 * SPLIT_STRIDE + SPLITS.index(split) * SPLIT_STRIDE
    return [off + i for i in range(n)]


def make_dataset(
    cfg: SceneConfig,
    n_train: int,
    n_val: int,
    n_test: int,
    root: str | Path,
    force: bool = False,
) -> dict:
    """Write samples and ``manifest.json`` under ``root``.

    Conditions are assigned round-robin over the 8 weather/time pairs within
    each split, so per-condition counts differ by at most one.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"{root} exists and is not empty (use --force)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        (root / split).mkdir(exist_ok=True)
        for i, seed in enumerate(split_seeds(cfg.seed, split, n)):
            cond = ConditionLabel.from_index(i % 8)
            sample = generate_scene(cfg, seed, cond)
            rel = f"{split}/{i:06d}.dgfs"
            save_sample(sample, root / rel)
            entries.append({
                "path": rel, "split": split, "weather": cond.weather,
                "time": cond.time, "seed": seed,
            })
    manifest = {"version": 1, "config": asdict(cfg), "entries": entries}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"unreadable manifest {path}: {e}") from None
    for e in manifest.get("entries", []):
        if not {"path", "split", "weather", "time", "seed"} <= set(e):
            raise DatasetError(f"manifest entry missing fields: {e}")
    return manifest


def load_split(root: str | Path, split: str) -> list[MultimodalSample]:
    root = Path(root)
    manifest = read_manifest(root)
    out = []
    for e in manifest["entries"]:
        if e["split"] != split:
            continue
        p = root / e["path"]
        if not p.is_file():
            raise DatasetError(f"manifest lists missing file {p}")
        out.append(load_sample(p))
    return out


def manifest_checksum(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / MANIFEST).read_bytes()).hexdigest()


def dataset_checksum(root: str | Path) -> str:
    """Hash of the manifest and every sample file it lists."""
    root = Path(root)
    h = hashlib.sha256((root / MANIFEST).read_bytes())
    for e in read_manifest(root)["entries"]:
        h.update((root / e["path"]).read_bytes())
    return h.hexdigest()
