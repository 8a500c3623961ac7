"""End-to-end finite-difference check of the network's parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import MaskLog
from .model import ModelConfig, as_tensors, forward, init_params
from .tensor import GradTape, Tensor, backward, mul, tsum

__all__ = ["MICRO", "GradReport", "relative_error", "run_gradcheck"]

MICRO = ModelConfig(
    channels=8,
    in_channels=3,
    res_before=1,
    res_after=1,
    graph_blocks=1,
    heads=2,
    window=7,
    stride=4,
    precision="float64",
)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish identically (e.g. the key bias,
    which shifts every similarity in a row equally) from comparing two
    round-off residues.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.errors.items(), key=lambda kv: kv[1])

    def lines(self) -> list[str]:
        width = max(len(k) for k in self.errors)
        out = [
            f"{name:<{width}}  {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}"
            for name, err in self.errors.items()
        ]
        name, err = self.worst
        out.append(f"max relative error {err:.3e} ({name}); tolerance {self.tolerance:g}")
        return out


def run_gradcheck(
    config: ModelConfig = MICRO,
    seed: int = 0,
    size: int = 15,
    h: float = 1e-5,
    max_entries: int = 24,
    tolerance: float = 1e-3,
    corrupt: str | None = None,
) -> GradReport:
    """Compare reverse-mode gradients with central differences.

    The objective is a fixed random linear functional of the predicted
    residual.  Every parameter tensor is checked on up to ``max_entries``
    randomly chosen entries; attention masks are held at their unperturbed
    values.  Errors are normalised by the larger of the two gradient norms,
    floored at 1e-5 of the norm of the full gradient.  ``corrupt`` names a parameter whose analytic gradient is
    deliberately perturbed (negative control).
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, zero_tail=False)
    for name, arr in params.items():
        # nonzero biases and varied slopes exercise every path
        if name.endswith("b") or name.endswith("slope"):
            params[name] = rng.uniform(0.05, 0.4, size=arr.shape).astype(arr.dtype)
    image = rng.uniform(0, 1, size=(size, size, config.in_channels)).astype(config.dtype)
    probe = Tensor(rng.standard_normal((size, size, config.in_channels)).astype(config.dtype))

    def objective(p) -> Tensor:
        return tsum(mul(forward(Tensor(image), p, config), probe))

    pt = as_tensors(params, requires_grad=True)
    with MaskLog() as masks:
        with GradTape() as tape:
            loss = objective(pt)
    grads = backward(tape, loss)
    # gradients far below the model-wide scale are compared absolutely
    floor = 1e-5 * float(np.sqrt(sum(np.sum(grads[t] ** 2) for t in pt.values())))

    def value() -> float:
        with masks.replay():
            return objective(as_tensors(params)).item()

    errors = {}
    for name, arr in params.items():
        analytic_full = np.array(grads[pt[name]])
        if name == corrupt:
            analytic_full = analytic_full * 1.05 + 1e-3
        flat = arr.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_entries:
            picks = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(picks))
        for n, idx in enumerate(picks):
            old = flat[idx]
            flat[idx] = old + h
            up = value()
            flat[idx] = old - h
            down = value()
            flat[idx] = old
            numeric[n] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic_full.reshape(-1)[picks], numeric, floor)
    return GradReport(errors, tolerance)
