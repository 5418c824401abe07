"""Finite-difference check of the full multi-task loss on the tiny model."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ..diffmath import Tensor, check_grads
from ..fusenet.config import ModelConfig, tiny_config
from ..fusenet.model import build_params, forward
from ..losskit.losses import LossWeights
from ..scenegen.generate import generate_scene
from ..scenegen.types import ConditionLabel, SceneConfig
from .train import SplitData, compute_losses

THRESHOLD = 1e-4


def group_of(name: str) -> str:
    """Parameter group = name without its final component (``fusion.lidar.0.q.w`` -> ``fusion.lidar.0.q``)."""
    return name.rsplit(".", 1)[0]


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    per_group: dict[str, float]
    n_checked: int
    threshold: float = THRESHOLD

    @property
    def worst_group(self) -> str:
        return max(self.per_group, key=self.per_group.get)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_group.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} gradcheck: {len(self.per_tensor)} tensors in {len(self.per_group)} groups, "
                f"{self.n_checked} coordinates; max rel err {self.max_rel_err:.3e} "
                f"(worst group {self.worst_group}); threshold {self.threshold:.0e}")

    def as_dict(self) -> dict:
        return {"passed": self.passed, "max_rel_err": self.max_rel_err, "worst_group": self.worst_group,
                "threshold": self.threshold, "n_checked": self.n_checked,
                "per_group": self.per_group}


def tiny_batch(cfg: ModelConfig, n: int = 1, seed: int = 0) -> SplitData:
    scene = SceneConfig(height=cfg.height, width=cfg.width, stride_multiple=cfg.stem * 8,
                        n_objects_min=2, n_objects_max=3, seed=seed)
    samples = [generate_scene(scene, seed * 1000 + i, ConditionLabel.from_index((3 * i + 2) % 8))
               for i in range(n)]
    return SplitData.from_samples(samples, cfg.modalities)


def grad_check(cfg: ModelConfig | None = None, seed: int = 0, max_entries: int = 2,
               eps: float = 1e-5, weights: LossWeights | None = None,
               prefixes: tuple[str, ...] | None = None) -> GradCheckReport:
    """Backward of the total loss vs central differences, sampling each parameter tensor.

    ``prefixes`` restricts the check to matching parameter names.
    """
    cfg = cfg or tiny_config()
    weights = weights or LossWeights(d_min=cfg.d_min, d_max=cfg.d_max)
    params = build_params(cfg, seed)
    batch = tiny_batch(cfg, seed=seed)

    def loss() -> Tensor:
        out = forward(params, cfg, batch.images, with_depth_head=cfg.use_aux_depth_head)
        return compute_losses(out, batch, weights)[0]

    checked = {n: t for n, t in params.items() if prefixes is None or n.startswith(prefixes)}
    if not checked:
        raise ValueError(f"no parameters match {prefixes}")
    results = check_grads(loss, checked, eps=eps, max_entries=max_entries,
                          rng=np.random.default_rng([seed, 11]))
    per_tensor = {r.name: r.rel_err for r in results}
    per_group: dict[str, float] = {}
    for r in results:
        g = group_of(r.name)
        per_group[g] = max(per_group.get(g, 0.0), r.rel_err)
    return GradCheckReport(per_tensor, per_group, sum(r.n_checked for r in results))


@contextmanager
def corrupted_rule(op: str, factor: float = 1.5):
    """Scale the backward rule of every ``op`` node created inside the block.

    Exists as a negative control: a gradient check run under it must fail.
    """
    original = Tensor.__dict__["_result"]
    inner = original.__func__

    def patched(cls, data, parents, backward, op_name):
        if op_name == op:
            rule = backward

            def backward(g):
                return tuple(None if x is None else x * factor for x in rule(g))
        return inner(cls, data, parents, backward, op_name)

    Tensor._result = classmethod(patched)
    try:
        yield
    finally:
        Tensor._result = original
