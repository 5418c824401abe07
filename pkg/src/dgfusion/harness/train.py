"""Seeded training loop, evaluation, and run configuration."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .. import diffmath as dm
from ..fusenet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..fusenet.config import ModelConfig
from ..fusenet.layers import Params
from ..fusenet.model import build_params, forward
from ..kvconfig import ConfigError, config_hash, from_mapping, read_kv
from ..losskit.losses import (
    LossReport,
    LossWeights,
    loss_cond,
    loss_depth_total,
    loss_seg,
    loss_total,
    make_report,
)
from ..scenegen.dataset import DatasetError, load_split, read_manifest
from ..scenegen.types import MultimodalSample
from .metrics import DepthAccumulator, MetricsReport, confusion_matrix, iou_from_confusion
from .optim import AdamW

OUTPUT_ROOT_ENV = "DGF_OUTPUT_ROOT"
TOGGLES = ("use_ct", "use_aux_depth_head", "use_dt", "use_smoothness", "use_tau_filter")
MODEL_TOGGLES = TOGGLES[:3]
ADVERSE_WEATHERS = ("fog", "snow")


def resolve_path(path: str | Path) -> Path:
    """Relative paths are taken under ``$DGF_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    poly_power: float = 0.9
    weight_decay: float = 0.01
    seed: int = 0
    use_ct: bool = True
    use_aux_depth_head: bool = True
    use_dt: bool = True
    use_smoothness: bool = True
    use_tau_filter: bool = True
    data_root: str = "data"
    out_dir: str = ""
    eval_every: int = 0
    eval_train: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.lr <= 0 or self.poly_power < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0; poly_power and weight_decay >= 0")

    def model_config(self) -> ModelConfig:
        """The model config with this run's architectural toggles applied."""
        return replace(self.model, **{k: getattr(self, k) for k in MODEL_TOGGLES},
                       d_min=self.loss.d_min, d_max=self.loss.d_max)

    def with_toggles(self, **toggles: bool) -> "TrainConfig":
        bad = set(toggles) - set(TOGGLES)
        if bad:
            raise ConfigError(f"unknown toggles {sorted(bad)}")
        return replace(self, **toggles)

    def hash(self) -> str:
        return config_hash(self)


def train_config_from_mapping(values: dict[str, Any]) -> TrainConfig:
    """Flat ``key = value`` pairs; ``model.*`` and ``loss.*`` keys go to the nested configs."""
    top, model, loss = {}, {}, {}
    for key, v in values.items():
        if key.startswith("model."):
            model[key[6:]] = v
        elif key.startswith("loss."):
            loss[key[5:]] = v
        else:
            top[key] = v
    try:
        return from_mapping(TrainConfig, {
            **top,
            "model": from_mapping(ModelConfig, model),
            "loss": from_mapping(LossWeights, loss),
        })
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def read_train_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    values = read_kv(path) if path else {}
    values.update(overrides or {})
    return train_config_from_mapping(values)


def parse_toggle(text: str) -> tuple[str, bool]:
    """``key=bool`` as given on the command line."""
    if "=" not in text:
        raise ConfigError(f"toggle {text!r} is not key=bool")
    key, value = (s.strip() for s in text.split("=", 1))
    if key not in TOGGLES:
        raise ConfigError(f"unknown toggle {key!r}; expected one of {TOGGLES}")
    low = value.lower()
    if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
        raise ConfigError(f"toggle {key}: {value!r} is not a bool")
    return key, low in ("true", "1", "yes", "on")


# -- data ---------------------------------------------------------------------------


@dataclass
class SplitData:
    """A split held as stacked arrays so batches are plain fancy indexing."""

    images: dict[str, np.ndarray]
    rgb: np.ndarray
    lidar_depth: np.ndarray
    lidar_valid: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray
    condition: np.ndarray
    depth_true: np.ndarray
    weather: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[MultimodalSample], modalities) -> "SplitData":
        if not samples:
            raise DatasetError("split is empty")
        return cls(
            images={m: np.stack([s.modality(m) for s in samples]) for m in modalities},
            rgb=np.stack([s.rgb for s in samples]),
            lidar_depth=np.stack([s.lidar_raw.depth for s in samples]),
            lidar_valid=np.stack([s.lidar_raw.valid for s in samples]),
            class_id=np.stack([s.panoptic.class_id for s in samples]),
            instance_id=np.stack([s.panoptic.instance_id for s in samples]),
            condition=np.array([s.condition.index for s in samples], dtype=np.int64),
            depth_true=np.stack([s.depth_true for s in samples]),
            weather=np.array([s.condition.weather for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.condition)

    def take(self, idx) -> "SplitData":
        idx = np.asarray(idx)
        return SplitData(
            images={m: a[idx] for m, a in self.images.items()},
            **{f.name: getattr(self, f.name)[idx] for f in dataclasses.fields(self) if f.name != "images"},
        )


def _check_dataset(manifest: dict, mcfg: ModelConfig) -> None:
    dcfg = manifest.get("config", {})
    if "n_classes" in dcfg and dcfg["n_classes"] != mcfg.n_classes:
        raise DatasetError(f"dataset has {dcfg['n_classes']} classes, model expects {mcfg.n_classes}")
    hw = (dcfg.get("height"), dcfg.get("width"))
    if None not in hw and hw != (mcfg.height, mcfg.width):
        raise DatasetError(f"dataset images are {hw}, model expects {(mcfg.height, mcfg.width)}")


def load_data(root: str | Path, split: str, mcfg: ModelConfig) -> SplitData:
    root = resolve_path(root)
    _check_dataset(read_manifest(root), mcfg)
    return SplitData.from_samples(load_split(root, split), mcfg.modalities)


# -- losses ---------------------------------------------------------------------------


def compute_losses(out, batch: SplitData, weights: LossWeights,
                   use_smoothness: bool = True, use_tau_filter: bool = True) -> tuple[dm.Tensor, LossReport]:
    """Only the parts whose branch exists enter the graph."""
    seg = loss_seg(out.seg_logits, batch.class_id)
    cond = None if out.cond_logits is None else loss_cond(out.cond_logits, batch.condition)
    depth = None
    if out.depth_pred is not None:
        depth = loss_depth_total(out.depth_pred, batch.lidar_depth, batch.lidar_valid, batch.rgb,
                                 batch.class_id, batch.instance_id, weights,
                                 use_smoothness=use_smoothness, use_tau_filter=use_tau_filter)
    total = loss_total(seg, cond, None if depth is None else depth.total, weights)
    return total, make_report(total, seg, cond, depth)


# -- evaluation -------------------------------------------------------------------------


def evaluate_params(params: Params, mcfg: ModelConfig, data: SplitData, batch_size: int = 8) -> MetricsReport:
    cm = np.zeros((mcfg.n_classes, mcfg.n_classes), dtype=np.int64)
    depth_all, depth_adv = DepthAccumulator(), DepthAccumulator()
    correct = 0
    with dm.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.take(np.arange(start, min(start + batch_size, len(data))))
            out = forward(params, mcfg, b.images, with_depth_head=mcfg.use_aux_depth_head)
            pred = out.seg_logits.data.argmax(axis=1)
            cm += confusion_matrix(b.class_id, pred, mcfg.n_classes)
            if out.cond_logits is not None:
                correct += int((out.cond_logits.data.argmax(axis=-1) == b.condition).sum())
            if out.depth_pred is not None:
                dp = out.depth_pred.data
                for i in range(len(b)):
                    args = (dp[i], b.depth_true[i], b.lidar_depth[i], b.lidar_valid[i])
                    depth_all.add(*args)
                    if b.weather[i] in ADVERSE_WEATHERS:
                        depth_adv.add(*args)
    miou, per_class = iou_from_confusion(cm)
    d = depth_all.result()
    return MetricsReport(
        mIoU=miou,
        per_class_iou=per_class,
        depth_mae=d["depth_mae"],
        depth_log_rmse=d["depth_log_rmse"],
        depth_log_rmse_lidar=d["depth_log_rmse_lidar"],
        depth_log_rmse_adverse=depth_adv.result()["depth_log_rmse"],
        condition_accuracy=correct / len(data) if mcfg.use_ct else None,
        n_samples=len(data),
    )


def evaluate(checkpoint: str | Path, split: str = "val", data_root: str | Path | None = None) -> MetricsReport:
    """Reload a checkpoint and score it on ``split``.

    Refuses when the dataset's class count or image size disagrees with the
    checkpoint's model config, or the stored config hash does not verify.
    """
    params, mcfg, meta = load_checkpoint(resolve_path(checkpoint))
    root = data_root if data_root is not None else meta.get("data_root")
    if root is None:
        raise CheckpointError("no data root given and none recorded in the checkpoint")
    return evaluate_params(params, mcfg, load_data(root, split, mcfg))


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    params: Params
    model_config: ModelConfig
    val: MetricsReport
    train: MetricsReport | None
    loss_curve: list[float]
    initial_report: LossReport
    history: list[dict] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "config_hash": self.config.hash(),
            "model_config_hash": config_hash(self.model_config),
            "n_params": self.params.count(),
            "steps": self.config.steps,
            "seed": self.config.seed,
            "toggles": {k: getattr(self.config, k) for k in TOGGLES},
            "initial_loss": self.initial_report.as_dict(),
            "loss_curve": self.loss_curve,
            "val": self.val.as_dict(),
            "train": None if self.train is None else self.train.as_dict(),
            "history": self.history,
        }


def batch_indices(n: int, batch_size: int, steps: int, seed: int):
    """Batches taken in order from a stream of seeded epoch permutations."""
    rng = np.random.default_rng([seed, 0x5EED])
    buf = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def train(cfg: TrainConfig, log: Callable[[str], None] | None = None, log_every: int = 100) -> TrainResult:
    mcfg = cfg.model_config()
    # any dataset problem surfaces here, before a single step is taken
    train_data = load_data(cfg.data_root, "train", mcfg)
    val_data = load_data(cfg.data_root, "val", mcfg)

    params = build_params(mcfg, cfg.seed)
    opt = AdamW(params, cfg.lr, cfg.steps, cfg.poly_power, cfg.weight_decay)
    curve: list[float] = []
    history: list[dict] = []
    initial = None
    for step, idx in enumerate(batch_indices(len(train_data), cfg.batch_size, cfg.steps, cfg.seed)):
        batch = train_data.take(idx)
        params.zero_grad()
        out = forward(params, mcfg, batch.images, with_depth_head=mcfg.use_aux_depth_head)
        total, rep = compute_losses(out, batch, cfg.loss, cfg.use_smoothness, cfg.use_tau_filter)
        dm.backward(total)
        lr = opt.step(step)
        curve.append(rep.L_total)
        if initial is None:
            initial = rep
        if log and (step % log_every == 0 or step == cfg.steps - 1):
            log(f"step {step:5d}  loss {rep.L_total:.4f}  lr {lr:.2e}")
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
            m = evaluate_params(params, mcfg, val_data)
            history.append({"step": step + 1, "val_mIoU": m.mIoU, "val_depth_log_rmse": m.depth_log_rmse})

    val = evaluate_params(params, mcfg, val_data)
    val.loss_curve = curve
    tr = evaluate_params(params, mcfg, train_data) if cfg.eval_train else None
    result = TrainResult(cfg, params, mcfg, val, tr, curve, initial, history)
    if cfg.out_dir:
        write_run(result, resolve_path(cfg.out_dir))
    return result


def write_run(result: TrainResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    save_checkpoint(out_dir / "checkpoint.dgfs", result.params, result.model_config, cfg.steps,
                    extra={"data_root": cfg.data_root, "train_config_hash": cfg.hash()})
    (out_dir / "report.json").write_text(json.dumps(result.report(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
