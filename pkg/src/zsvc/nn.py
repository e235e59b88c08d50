"""Differentiable tensor layer used by the model, losses and trainer.

Reverse-mode autodiff is delegated to torch; this module pins the
numerical contract around it (shape validation with readable errors,
leaky-relu slope, deterministic single-threaded execution) and provides
the finite-difference gradient checker used throughout the test suite.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

Tensor = torch.Tensor
Parameter = torch.nn.Parameter

LEAKY_SLOPE = 0.1


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    """Temporarily switch the default floating dtype (float32 or float64)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def _shape_error(op: str, a: Tensor, b: Tensor, detail: str = "") -> ValidationError:
    msg = f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
    return ValidationError(f"{msg} ({detail})" if detail else msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("add", a, b) from None
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error("mul", a, b) from None
    return a * b


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1] * groups:
        raise _shape_error("conv1d", x, weight, "input B x C x L, weight O x C/groups x K")
    return F.conv1d(x, weight, bias, stride, padding, dilation, groups)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[0]:
        raise _shape_error("conv_transpose1d", x, weight, "input B x C x L, weight C x O x K")
    return F.conv_transpose1d(x, weight, bias, stride, padding)


def leaky_relu(x: Tensor) -> Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def embedding(indices: Tensor, table: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ValidationError(f"embedding table must be 2-D, got {tuple(table.shape)}")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise ValidationError(f"embedding index out of range for table {tuple(table.shape)}")
    return F.embedding(indices, table)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise _shape_error("layer_norm", x, weight)
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def concat(tensors: Sequence[Tensor], dim: int) -> Tensor:
    shapes = [list(t.shape) for t in tensors]
    for s in shapes[1:]:
        a, b = list(shapes[0]), list(s)
        a.pop(dim), b.pop(dim)
        if a != b:
            raise ValidationError(f"concat: incompatible shapes {shapes}")
    return torch.cat(list(tensors), dim)


class ChannelLayerNorm(torch.nn.Module):
    """Layer norm over the channel axis of a ``B x C x T`` tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(torch.ones(channels))
        self.bias = Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x.transpose(1, -1), self.weight, self.bias, self.eps).transpose(1, -1)


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: Optional[float] = None,
               max_coords: Optional[int] = None, seed: int = 0,
               analytic: Optional[Sequence[Tensor]] = None) -> float:
    """Max relative error between autodiff and central finite differences.

    The denominator is ``|ad| + |fd|`` floored at 1e-3 of the largest
    analytic gradient magnitude.

    ``fn`` re-evaluates the scalar loss from the current values of
    ``params``. With ``max_coords`` only that many seeded coordinates per
    parameter are probed. Central differences at ``eps`` and ``eps / 2`` are
    combined by Richardson extrapolation. The default step is 1e-6 in float64 and 1e-2 in
    lower precision, balancing truncation against roundoff.

    ``analytic`` supplies precomputed gradients to judge instead of running
    ``fn`` backward, e.g. float32 gradients against a float64 copy of ``fn``.
    """
    params = list(params)
    if eps is None:
        eps = 1e-6 if params and params[0].dtype == torch.float64 else 1e-2
    if analytic is None:
        for p in params:
            p.grad = None
        backward(fn())
        analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    elif len(analytic) != len(params):
        raise ValidationError(f"grad_check: {len(analytic)} analytic gradients for {len(params)} parameters")
    rng = np.random.default_rng(seed)
    # coordinates with near-zero gradient are judged against the overall scale
    scale = max((float(g.abs().max()) for g in analytic if g.numel()), default=0.0)
    floor = max(1e-8, 1e-3 * scale)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = np.sort(rng.choice(coords.size, max_coords, replace=False))
            for i in coords:
                orig = flat[i].item()

                def central(h):
                    flat[i] = orig + h
                    hi = flat[i].item()
                    up = float(fn())
                    flat[i] = orig - h
                    lo = flat[i].item()
                    down = float(fn())
                    flat[i] = orig
                    return (up - down) / (hi - lo)

                # Richardson extrapolation cancels the O(h^2) truncation term
                fd = (4.0 * central(eps / 2) - central(eps)) / 3.0
                ad = float(g.view(-1)[i])
                err = abs(ad - fd) / max(floor, abs(ad) + abs(fd))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def check_gradients(build: Callable[[torch.dtype], Tuple[Callable[[], Tensor], Sequence[Tensor]]],
                    dtype: torch.dtype = torch.float32, max_coords: Optional[int] = None, seed: int = 0) -> float:
    """grad_check at ``dtype`` for a loss rebuilt per precision.

    ``build(dtype)`` returns ``(fn, params)`` with identical values up to
    rounding. float64 is checked against its own finite differences. Below
    float64 the autodiff gradients are judged against finite differences of
    the float64 build: roundoff and kinks (abs, leaky ReLU) defeat any single
    low-precision step size, while the float64 reference resolves both.
    """
    if dtype == torch.float64:
        with precision(torch.float64):
            fn, params = build(torch.float64)
            return grad_check(fn, params, max_coords=max_coords, seed=seed)
    with precision(dtype):
        fn, params = build(dtype)
        params = list(params)
        for p in params:
            p.grad = None
        backward(fn())
        grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
        for p in params:
            p.grad = None
    with precision(torch.float64):
        fn64, params64 = build(torch.float64)
        return grad_check(fn64, params64, max_coords=max_coords, seed=seed, analytic=grads)
