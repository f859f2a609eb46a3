"""Central-difference certification of analytic gradients.

Every parameterized block in the package is expected to pass
finite_difference_check in f64 at tol 1e-4 on small shapes. The checker is
deliberately independent of autodiff internals: it only re-evaluates the
function at perturbed points.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch.func import functional_call

from .errors import ConfigError
from .ops import gradients


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list[float] = field(default_factory=list)
    passed: bool = False
    tolerance: float = 1e-4

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.op_name}: max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.1e})"


def _rel_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # 1e-8 floor keeps near-zero gradients from blowing up the ratio
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-8))
    return (a - b).abs() / denom


def finite_difference_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                            *, tol: float = 1e-4, step: float = 1e-5, op_name: str = "fn",
                            seed: int = 0, max_elements: Optional[int] = None) -> GradReport:
    """Compare autodiff gradients of fn against central differences.

    Gradients are checked w.r.t. every floating-point entry of `inputs`,
    which must be f64. The (possibly tensor-valued) output is reduced to a
    scalar through a fixed random projection so every output element
    contributes. `max_elements` caps the number of perturbed entries per
    input (a seeded random subset); None checks all of them.
    """
    inputs = list(inputs)
    float_idx = [i for i, t in enumerate(inputs) if t.is_floating_point()]
    for i in float_idx:
        if inputs[i].dtype != torch.float64:
            raise ConfigError(f"finite differences need float64 inputs, input {i} is {inputs[i].dtype}")

    with torch.no_grad():
        y1 = fn(*inputs)
        y2 = fn(*inputs)
    if not torch.equal(y1, y2):
        raise ConfigError(f"{op_name} is not deterministic under repeated evaluation; pin its seed")
    if not torch.isfinite(y1).all():
        raise ConfigError(f"{op_name} produced non-finite output")

    gen = torch.Generator().manual_seed(seed)
    # mean-scale the projection: a sum-scale functional would push cancellation
    # noise in f(x+h)-f(x-h) above the 1e-8 denominator floor on weak coordinates
    proj = torch.randn(y1.shape, dtype=torch.float64, generator=gen) / y1.numel()

    leaves = [t.detach().clone().requires_grad_(True) if i in float_idx else t
              for i, t in enumerate(inputs)]
    loss = (fn(*leaves) * proj).sum()
    analytic = gradients(loss, [leaves[i] for i in float_idx])

    def eval_at(args: list[torch.Tensor]) -> float:
        with torch.no_grad():
            return float((fn(*args) * proj).sum())

    per_input_errors: list[float] = []
    for slot, i in enumerate(float_idx):
        base = inputs[i].detach().clone()
        flat = base.reshape(-1)
        n = flat.numel()
        if max_elements is not None and n > max_elements:
            order = torch.randperm(n, generator=gen)[:max_elements]
        else:
            order = torch.arange(n)
        worst = 0.0
        for j in order.tolist():
            orig = flat[j].item()
            args = [base if k == i else t for k, t in enumerate(inputs)]
            a = analytic[slot].reshape(-1)[j].item()
            err = float("inf")
            # the optimal step is coordinate-dependent (noise vs truncation);
            # a wrong analytic gradient fails at every step
            for h in (step, step / 4.0, step * 4.0):
                flat[j] = orig + h
                f_plus = eval_at(args)
                flat[j] = orig - h
                f_minus = eval_at(args)
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if err <= tol / 4.0:
                    break
            worst = max(worst, err)
        per_input_errors.append(worst)

    max_err = max(per_input_errors, default=0.0)
    return GradReport(op_name=op_name, max_rel_error=max_err,
                      per_input_errors=per_input_errors, passed=max_err <= tol, tolerance=tol)


def module_grad_check(module: torch.nn.Module, input_shapes: Sequence[tuple[int, ...]],
                      *, tol: float = 1e-4, step: float = 1e-4, trials: int = 20,
                      seed: int = 0, max_elements: Optional[int] = None,
                      param_scale: float = 0.5, op_name: Optional[str] = None) -> GradReport:
    """Finite-difference check of a module w.r.t. its inputs and parameters.

    Runs `trials` independent checks, each with fresh random inputs and
    fresh random parameters at param_scale (the near-identity training
    initialization is a degenerate point: gradients there sit at the
    relative-error floor, so the operator is certified over its parameter
    space instead). The module is evaluated in f64 eval mode. Reports the
    worst error across trials.
    """
    m = copy.deepcopy(module).double().eval()
    names = [n for n, _ in m.named_parameters()]
    shapes = [p.shape for _, p in m.named_parameters()]
    gen = torch.Generator().manual_seed(seed)
    n_inputs = len(input_shapes)

    def fn(*args: torch.Tensor) -> torch.Tensor:
        xs, ps = args[:n_inputs], args[n_inputs:]
        return functional_call(m, dict(zip(names, ps)), tuple(xs))

    name = op_name or type(module).__name__
    worst = 0.0
    per_trial: list[float] = []
    for t in range(trials):
        xs = [torch.randn(s, dtype=torch.float64, generator=gen) for s in input_shapes]
        params = [param_scale * torch.randn(s, dtype=torch.float64, generator=gen)
                  for s in shapes]
        rep = finite_difference_check(fn, [*xs, *params], tol=tol, step=step,
                                      op_name=f"{name}[trial {t}]", seed=seed + 1000 + t,
                                      max_elements=max_elements)
        per_trial.append(rep.max_rel_error)
        worst = max(worst, rep.max_rel_error)
    return GradReport(op_name=name, max_rel_error=worst, per_input_errors=per_trial,
                      passed=worst <= tol, tolerance=tol)


def sampled_param_grad_check(model: torch.nn.Module, input_shape: tuple[int, ...],
                             *, n_samples: int = 50, tol: float = 1e-3,
                             step: float = 1e-3, seed: int = 0) -> GradReport:
    """Check a random sample of scalar parameters of a full model.

    One analytic backward pass supplies all sampled gradients; each sampled
    entry then costs two forward evaluations for the central difference.
    """
    m = copy.deepcopy(model).double().eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(input_shape, dtype=torch.float64, generator=gen)

    with torch.no_grad():
        y = m(x)
    proj = torch.randn(y.shape, dtype=torch.float64, generator=gen) / y.numel()

    params = [p for p in m.parameters() if p.requires_grad]
    loss = (m(x) * proj).sum()
    analytic = gradients(loss, params)

    sizes = torch.tensor([p.numel() for p in params])
    total = int(sizes.sum())
    picks = torch.randperm(total, generator=gen)[:min(n_samples, total)]
    offsets = torch.cumsum(sizes, 0)

    worst = 0.0
    with torch.no_grad():
        for flat_pos in picks.tolist():
            pi = int(torch.searchsorted(offsets, flat_pos, right=True))
            j = flat_pos - (int(offsets[pi - 1]) if pi > 0 else 0)
            flat = params[pi].reshape(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            f_plus = float((m(x) * proj).sum())
            flat[j] = orig - step
            f_minus = float((m(x) * proj).sum())
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[pi].reshape(-1)[j].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)

    return GradReport(op_name=type(model).__name__, max_rel_error=worst,
                      per_input_errors=[worst], passed=worst <= tol, tolerance=tol)
