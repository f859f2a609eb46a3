"""Release-gate verification: gradient certification and brute-force oracles.

Two suites. "gradcheck" certifies every parameterized block against
central finite differences in f64. "oracles" checks the scan against a
literal recurrence, permutation/wiring laws against exact identities, and
the metric pipeline against a per-pixel loop.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .blocks import (ADFF, MCAttnConfig, McatBottleneck, MonteCarloAttention,
                     PatchEmbed, SSMcatBlock)
from .data import CLASS_NAMES
from .gradcheck import finite_difference_check, module_grad_check, sampled_param_grad_check
from .metrics import ConfusionCounts, compute_metrics, confusion_accumulate
from .network import ModelConfig, build_model, tiny_config
from .ops import channel_shuffle
from .phantom import check_ring_containment, generate_phantom, PhantomSpec
from .ssm import SS2D, VSSBlock, cross_merge, cross_scan, selective_scan, selective_scan_reference


def _zero_residual_branches(block: SSMcatBlock) -> None:
    with torch.no_grad():
        for m in block.conv_branch:
            m.expand.weight.zero_()
            m.expand.bias.zero_()
        for m in block.mamba_branch:
            m.out_proj.weight.zero_()


def confusion_bruteforce(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionCounts:
    """Per-pixel, per-class tally loop; oracle for confusion_accumulate."""
    counts = ConfusionCounts(num_classes)
    p, g = pred.ravel(), gt.ravel()
    for c in range(num_classes):
        tp = fp = fn = tn = 0
        for i in range(p.size):
            hit, truth = p[i] == c, g[i] == c
            if hit and truth:
                tp += 1
            elif hit:
                fp += 1
            elif truth:
                fn += 1
            else:
                tn += 1
        counts.tp[c], counts.fp[c], counts.fn[c], counts.tn[c] = tp, fp, fn, tn
    return counts


def run_gradcheck_suite(trials: int = 20, tol: float = 1e-4, seed: int = 0,
                        max_elements: Optional[int] = 48,
                        log: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Finite-difference certification of every parameterized block."""
    checks: list[tuple[str, Callable[[], object]]] = []
    mc = MCAttnConfig(pool_sizes=(1, 2))

    def add_module(name, module, shapes, block_tol=tol):
        checks.append((name, lambda: module_grad_check(
            module, shapes, tol=block_tol, trials=trials, seed=seed,
            max_elements=max_elements, op_name=name)))

    add_module("conv2d", nn.Conv2d(3, 4, 3, padding=1), [(2, 3, 5, 5)])
    add_module("batch_norm", nn.BatchNorm2d(4), [(3, 4, 5, 5)])
    add_module("layer_norm", nn.LayerNorm(6), [(4, 6)])
    add_module("linear", nn.Linear(5, 7), [(3, 5)])
    add_module("monte_carlo_attention", MonteCarloAttention(4, mc), [(1, 4, 6, 6)])
    add_module("mcat_bottleneck", McatBottleneck(8, mcattn=mc), [(1, 8, 6, 6)])
    add_module("ss2d", SS2D(4, state_dim=2), [(1, 4, 3, 3)])
    add_module("vss_block", VSSBlock(4, state_dim=2), [(1, 4, 3, 3)])
    add_module("ss_mcat_ssm_block", SSMcatBlock(8, state_dim=2, mcattn=mc), [(1, 8, 4, 4)])
    add_module("adff_fuse", ADFF(4), [(2, 4, 4, 4), (2, 4, 4, 4)])

    def full_model():
        cfg = tiny_config(base_dim=8, stage_dims=(8, 16, 32, 64), ssm_state_dim=2, seed=seed)
        model = build_model(cfg)
        return sampled_param_grad_check(model, (1, 3, 64, 64), n_samples=50,
                                        tol=1e-3, seed=seed)
    checks.append(("full_model_sampled", full_model))

    results = []
    for name, run in checks:
        report = run()
        rec = {"name": name, "passed": bool(report.passed),
               "max_rel_error": float(report.max_rel_error),
               "tolerance": float(report.tolerance)}
        results.append(rec)
        if log:
            log(f"[{'PASS' if rec['passed'] else 'FAIL'}] gradcheck/{name}: "
                f"max_rel_error={rec['max_rel_error']:.3e} (tol {rec['tolerance']:.0e})")
    return results


def run_oracle_suite(seed: int = 0, log: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Brute-force oracles plus permutation, wiring, and shape laws."""
    results: list[dict] = []

    def record(name: str, passed: bool, detail: str = "") -> None:
        results.append({"name": name, "passed": bool(passed), "detail": detail})
        if log:
            log(f"[{'PASS' if passed else 'FAIL'}] oracle/{name}" + (f": {detail}" if detail else ""))

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(50):
        b = int(torch.randint(1, 3, (1,), generator=gen))
        c = int(torch.randint(1, 5, (1,), generator=gen))
        l = int(torch.randint(1, 17, (1,), generator=gen))
        n = int(torch.randint(1, 5, (1,), generator=gen))
        u = torch.randn(b, c, l, dtype=torch.float64, generator=gen)
        delta = torch.rand(b, c, l, dtype=torch.float64, generator=gen) * 0.5 + 0.01
        A = -torch.rand(c, n, dtype=torch.float64, generator=gen) * 2
        B = torch.randn(b, n, l, dtype=torch.float64, generator=gen)
        C = torch.randn(b, n, l, dtype=torch.float64, generator=gen)
        D = torch.randn(c, dtype=torch.float64, generator=gen)
        got = selective_scan(u, delta, A, B, C, D).numpy()
        want = selective_scan_reference(u, delta, A, B, C, D)
        denom = np.maximum(np.abs(want), 1.0)
        worst = max(worst, float(np.max(np.abs(got - want) / denom)))
    record("selective_scan_vs_recurrence", worst <= 1e-6, f"max_rel_error={worst:.2e}")

    x = torch.randn(2, 3, 5, 7, generator=gen)
    merged = cross_merge(cross_scan(x), 5, 7)
    record("cross_merge_of_cross_scan_is_4x", torch.equal(merged, 4 * x))

    block = SSMcatBlock(8, state_dim=2, mcattn=MCAttnConfig(pool_sizes=(1, 2)))
    _zero_residual_branches(block)
    block.eval()
    xb = torch.randn(2, 8, 6, 6, generator=gen)
    record("zeroed_block_is_channel_shuffle",
           torch.equal(block(xb), channel_shuffle(xb, 2)))

    vss = VSSBlock(6, state_dim=2)
    with torch.no_grad():
        vss.out_proj.weight.zero_()
    vss.eval()
    xv = torch.randn(2, 6, 5, 5, generator=gen)
    record("zeroed_vss_block_is_identity", torch.equal(vss(xv), xv))

    rng = np.random.default_rng(seed)
    metric_ok = True
    detail = ""
    for trial in range(100):
        k = int(rng.integers(2, 8))
        h, w = int(rng.integers(2, 33)), int(rng.integers(2, 33))
        gt = rng.integers(0, k, size=(h, w))
        pred = rng.integers(0, k, size=(h, w))
        fast = confusion_accumulate(pred, gt, ConfusionCounts(k))
        slow = confusion_bruteforce(pred, gt, k)
        if not all(np.array_equal(getattr(fast, f), getattr(slow, f))
                   for f in ("tp", "fp", "fn", "tn")):
            metric_ok = False
            detail = f"count mismatch at trial {trial}"
            break
        rep_f = compute_metrics(fast)
        rep_s = compute_metrics(slow)
        for name in rep_f.per_class:
            for key, vf in rep_f.per_class[name].items():
                vs = rep_s.per_class[name][key]
                if math.isnan(vf) != math.isnan(vs) or \
                        (not math.isnan(vf) and abs(vf - vs) > 1e-12):
                    metric_ok = False
                    detail = f"ratio mismatch {name}/{key} at trial {trial}"
        for name, vals in rep_f.per_class.items():
            iou, dc = vals["IoU"], vals["DC"]
            if not math.isnan(iou) and abs(dc - 2 * iou / (1 + iou)) > 1e-9:
                metric_ok = False
                detail = f"Dice-IoU duality broken for {name} at trial {trial}"
    record("metrics_vs_pixel_loop", metric_ok, detail)

    big = generate_phantom(seed, PhantomSpec(canvas=(128, 128)))
    ring_ok = all(check_ring_containment(generate_phantom(s, PhantomSpec(canvas=(96, 96))).mask)
                  for s in range(seed, seed + 100))
    record("phantom_ring_containment_100_seeds", ring_ok and big.mask.shape == (128, 128))

    embed = PatchEmbed(3, 96)
    with torch.no_grad():
        out = embed(torch.zeros(1, 3, 224, 224))
    record("patch_embed_shape_224", tuple(out.shape) == (1, 96, 56, 56))

    cfg = tiny_config(seed=seed)
    model = build_model(cfg).eval()
    with torch.no_grad():
        logits = model(torch.randn(1, 3, 64, 64, generator=gen))
    record("tiny_model_shape_law", tuple(logits.shape) == (1, cfg.num_classes, 64, 64))

    return results


def run_suites(which: str = "all", trials: int = 20, seed: int = 0,
               log: Optional[Callable[[str], None]] = None) -> dict:
    checks: list[dict] = []
    if which in ("gradcheck", "all"):
        checks += [dict(c, suite="gradcheck") for c in
                   run_gradcheck_suite(trials=trials, seed=seed, log=log)]
    if which in ("oracles", "all"):
        checks += [dict(c, suite="oracles") for c in run_oracle_suite(seed=seed, log=log)]
    if not checks:
        raise ValueError(f"unknown suite {which!r}")
    return {"suite": which, "passed": all(c["passed"] for c in checks), "checks": checks}
