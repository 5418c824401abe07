"""Non-overlapping K x K window partition with reflect padding."""
from __future__ import annotations

from dataclasses import dataclass

from .. import diffmath as dm
from ..diffmath import ContractViolation, Tensor


@dataclass(frozen=True)
class WindowLayout:
    n: int  # images
    channels: int
    height: int
    width: int
    k: int

    @property
    def rows(self) -> int:
        return -(-self.height // self.k)

    @property
    def cols(self) -> int:
        return -(-self.width // self.k)

    @property
    def per_image(self) -> int:
        return self.rows * self.cols

    @property
    def pad(self) -> tuple[int, int]:
        return self.rows * self.k - self.height, self.cols * self.k - self.width


def window_partition(x: Tensor, k: int) -> tuple[Tensor, WindowLayout]:
    """[N,]C,H,W -> (N * n_windows, C, k, k), windows in row-major order per image."""
    x = dm.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = dm.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    lay = WindowLayout(n, c, h, w, k)
    ph, pw = lay.pad
    if ph or pw:
        x = dm.pad2d(x, (0, ph, 0, pw), "reflect")
    y = dm.reshape(x, (n, c, lay.rows, k, lay.cols, k))
    y = dm.transpose(y, (0, 2, 4, 1, 3, 5))
    return dm.reshape(y, (n * lay.per_image, c, k, k)), lay


def window_reassemble(windows: Tensor, lay: WindowLayout, squeeze: bool = False) -> Tensor:
    """Inverse of :func:`window_partition`, cropping the reflect padding."""
    b, c, k, k2 = windows.shape
    if b != lay.n * lay.per_image or k != lay.k or k2 != lay.k:
        raise ContractViolation(f"window tensor {windows.shape} does not match layout {lay}")
    y = dm.reshape(windows, (lay.n, lay.rows, lay.cols, c, k, k))
    y = dm.transpose(y, (0, 3, 1, 4, 2, 5))
    y = dm.reshape(y, (lay.n, c, lay.rows * k, lay.cols * k))
    if lay.pad != (0, 0):
        y = y[:, :, : lay.height, : lay.width]
    if squeeze:
        y = dm.reshape(y, y.shape[1:])
    return y


def windows_to_tokens(windows: Tensor) -> Tensor:
    """(B, C, k, k) -> (B, k*k, C)."""
    b, c, k, _ = windows.shape
    return dm.transpose(dm.reshape(windows, (b, c, k * k)), (0, 2, 1))


def tokens_to_windows(tokens: Tensor, k: int) -> Tensor:
    b, t, c = tokens.shape
    return dm.reshape(dm.transpose(tokens, (0, 2, 1)), (b, c, k, k))
