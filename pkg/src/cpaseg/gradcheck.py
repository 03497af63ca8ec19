"""Central finite-difference checks for primitives and whole networks.

All checks run in 64-bit precision. A check reduces the output to a scalar
through a fixed random projection (a plain sum would make, for example,
softmax gradients vanish identically) and compares analytic and numeric
gradients with the relative error

    max|analytic - numeric| / max(max|analytic|, max|numeric|)

per parameter group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import CPABlock
from .model import ModelConfig, SegmentationModel
from .nn import Module
from .tensor import Tensor

STEP = 1e-3
# ReLU (and max-pool) kinks sit within 1e-3 of many activations in a full network
NETWORK_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss_fn: Callable[[], float], arr: np.ndarray, coords: Sequence[tuple], step: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. the given entries of ``arr`` (perturbed in place)."""
    out = np.empty(len(coords))
    for n, idx in enumerate(coords):
        orig = arr[idx]
        arr[idx] = orig + step
        up = loss_fn()
        arr[idx] = orig - step
        down = loss_fn()
        arr[idx] = orig
        out[n] = (up - down) / (2 * step)
    return out


def _coords(rng: np.random.Generator, shape: tuple[int, ...], limit: int | None) -> list[tuple]:
    everything = list(np.ndindex(*shape))
    if limit is None or len(everything) <= limit:
        return everything
    pick = rng.choice(len(everything), size=limit, replace=False)
    return [everything[i] for i in sorted(pick)]


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    step: float = STEP,
) -> CheckResult:
    """Gradient check of ``fn(*tensors)`` w.r.t. every entry of every input."""
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        T.sum_all(T.mul(out, Tensor(proj))).backward()

        def loss() -> float:
            with T.no_grad():
                return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

        worst, count = 0.0, 0
        for leaf, arr in zip(leaves, arrays):
            coords = list(np.ndindex(*arr.shape))
            num = numeric_grad(loss, arr, coords, step)
            ana = np.array([leaf.grad[c] for c in coords]) if leaf.grad is not None else np.zeros(len(coords))
            worst = max(worst, rel_err(ana, num))
            count += len(coords)
    return CheckResult(name, worst, count)


def check_module(
    module: Module,
    forward: Callable[[], Tensor],
    group_of: Callable[[str], str],
    per_param: int | None = 6,
    seed: int = 0,
    step: float = NETWORK_STEP,
) -> list[CheckResult]:
    """Check a module's parameter gradients, grouped by ``group_of(param_name)``.

    ``module`` must already hold 64-bit parameters and ``forward`` must
    build its input in 64-bit. At most ``per_param`` random entries per
    parameter tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        module.zero_grad()
        out = forward()
        proj = rng.standard_normal(out.shape)
        T.sum_all(T.mul(out, Tensor(proj))).backward()

        def loss() -> float:
            with T.no_grad():
                return float((forward().data * proj).sum())

        groups: dict[str, list[np.ndarray]] = {}
        counts: dict[str, int] = {}
        for name, p in module.named_parameters():
            coords = _coords(rng, p.shape, per_param)
            num = numeric_grad(loss, p.data, coords, step)
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            ana = np.array([grad[c] for c in coords])
            g = group_of(name)
            groups.setdefault(g, []).append(np.stack([ana, num]))
            counts[g] = counts.get(g, 0) + len(coords)
    results = []
    for g, pairs in groups.items():
        both = np.concatenate(pairs, axis=1)
        results.append(CheckResult(g, rel_err(both[0], both[1]), counts[g]))
    return results


# ---------------------------------------------------------------------------
# The suite behind ``cpaseg gradcheck``
# ---------------------------------------------------------------------------


def primitive_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    # keep inputs away from the relu / max-pool kinks so central differences are valid
    away = lambda *s: np.sign(r(*s)) * rng.uniform(0.1, 1.0, s)
    labels = rng.integers(0, 3, size=(2, 3, 4))
    bn_mean, bn_var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    return [
        check_function("matmul", T.matmul, [r(2, 3, 4), r(2, 4, 5)], seed),
        check_function("softmax_rows", T.softmax_rows, [r(2, 4, 5)], seed),
        check_function("transpose", lambda x: T.transpose(x, (0, 2, 1)), [r(2, 3, 4)], seed),
        check_function("conv2d", lambda x, w, b: T.conv2d(x, w, b, 1, 1, 1), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)], seed),
        check_function(
            "conv2d_strided_dilated",
            lambda x, w, b: T.conv2d(x, w, b, 2, 2, 2),
            [r(1, 2, 7, 7), r(3, 2, 3, 3), r(3)],
            seed,
        ),
        check_function(
            "batchnorm2d_train",
            lambda x, g, b: T.batchnorm2d(x, g, b, None, None, True),
            [r(3, 3, 4, 4), r(3), r(3)],
            seed,
        ),
        check_function(
            "batchnorm2d_eval",
            lambda x, g, b: T.batchnorm2d(x, g, b, bn_mean, bn_var, False),
            [r(2, 3, 3, 3), r(3), r(3)],
            seed,
        ),
        check_function("relu", T.relu, [away(2, 3, 4, 4)], seed),
        check_function("sigmoid", T.sigmoid, [r(2, 3, 2, 2)], seed),
        check_function("add", T.add, [r(2, 3, 2, 2), r(2, 3, 2, 2)], seed),
        check_function("mul_broadcast", T.mul, [r(2, 3, 2, 2), r(2, 3, 1, 1)], seed),
        check_function("scalar_mul", T.scalar_mul, [r(), r(2, 3, 2, 2)], seed),
        check_function("avg_pool2d", lambda x: T.avg_pool2d(x, 2, 2), [r(2, 2, 4, 4)], seed),
        check_function("max_pool2d", lambda x: T.max_pool2d(x, 3, 2, 1), [r(1, 2, 6, 6)], seed),
        check_function("global_avg_pool", T.global_avg_pool, [r(2, 3, 3, 3)], seed),
        check_function("bilinear_up", lambda x: T.bilinear_resize(x, 7, 9), [r(1, 2, 3, 4)], seed),
        check_function("bilinear_down", lambda x: T.bilinear_resize(x, 3, 2), [r(1, 2, 6, 5)], seed),
        check_function("crop2d", lambda x: T.crop2d(x, 1, 2, 3, 2), [r(1, 2, 5, 5)], seed),
        check_function("cross_entropy", lambda z: T.cross_entropy(z, labels), [r(2, 3, 3, 4)], seed),
    ]


def cpa_group(name: str) -> str:
    if name.endswith("gamma_c"):
        return "gamma_c"
    if name.endswith("attention.gamma"):
        return "gamma_s"
    if name.endswith(".weight") and name.count(".") == 2 and name.startswith("pathways"):
        return "w_s"
    if ".bn." in name:
        return "batchnorm"
    if name.startswith("proj"):
        return "proj_conv"
    if any(k in name for k in (".key.", ".query.", ".value.")):
        return "kqv_conv"
    return "pathway_conv"


def cpa_suite(seed: int = 0, channels: int = 16, extent: int = 8) -> list[CheckResult]:
    with T.precision(np.float64):
        block = CPABlock(np.random.default_rng(seed), channels).astype(np.float64)
        x = np.random.default_rng(seed + 1).standard_normal((2, channels, extent, extent))
        results = check_module(block, lambda: block(Tensor(x)), cpa_group, per_param=None, seed=seed)
        results.append(check_function("cpa_input", block, [x], seed, step=NETWORK_STEP))
    return results


def model_group(name: str) -> str:
    return name.split(".")[0]


def model_suite(seed: int = 0, extent: int = 32, variant: str = "cpa", per_param: int = 4) -> list[CheckResult]:
    """End-to-end encode -> attention -> decode check at toy size."""
    with T.precision(np.float64):
        config = ModelConfig.build(variant)
        model = SegmentationModel(config, seed=seed).astype(np.float64)
        x = np.random.default_rng(seed + 1).standard_normal((2, 3, extent, extent))
        return check_module(model, lambda: model(Tensor(x)), model_group, per_param=per_param, seed=seed)


def run_all(seed: int = 0) -> list[CheckResult]:
    return primitive_suite(seed) + cpa_suite(seed) + model_suite(seed)
