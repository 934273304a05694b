"""Shared test utilities: brute-force metric oracles (independent of the
library implementations), a finite-difference gradient checker, and a CLI
runner."""

from __future__ import annotations

import numpy as np
import torch

from psgbench.cli import main as cli_main


def brute_force_auroc(scores, labels) -> float:
    """Explicit pair enumeration: P(pos > neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes required")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def brute_force_c_index(hazards, events, times) -> float:
    """Explicit loop over ordered pairs with Harrell's comparability rule."""
    hazards = np.asarray(hazards, dtype=np.float64)
    events = np.asarray(events)
    times = np.asarray(times, dtype=np.float64)
    concordant = tied = comparable = 0
    n = len(hazards)
    for i in range(n):
        if events[i] != 1:
            continue
        for j in range(n):
            if times[i] < times[j]:
                comparable += 1
                if hazards[i] > hazards[j]:
                    concordant += 1
                elif hazards[i] == hazards[j]:
                    tied += 1
    if comparable == 0:
        raise ValueError("no comparable pairs")
    return (concordant + 0.5 * tied) / comparable


def brute_force_coxph(hazards, events, times) -> float:
    """Naive partial likelihood: explicit risk sets, plain exp/log."""
    hazards = np.asarray(hazards, dtype=np.float64)
    n_events = int(np.sum(events))
    if n_events == 0:
        return 0.0
    total = 0.0
    for i in range(len(hazards)):
        if events[i] != 1:
            continue
        risk = [j for j in range(len(hazards)) if times[j] >= times[i]]
        total += hazards[i] - np.log(np.sum(np.exp(hazards[risk])))
    return -total / n_events


def finite_difference_check(
    loss_fn,
    named_params: dict[str, torch.Tensor],
    h: float = 1e-4,
    max_entries_per_tensor: int = 6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Every tensor is covered; within a tensor up to ``max_entries_per_tensor``
    deterministic random entries are perturbed. Run at float64. Per-entry
    denominators are floored at the gradient's global RMS: at the fixed step
    h the O(h^2) truncation term dominates entries whose own magnitude is far
    below the gradient scale, while any actually wrong gradient still shows
    an error orders of magnitude above 1e-4.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(named_params.values()), allow_unused=True)
    all_flat = torch.cat(
        [g.reshape(-1) for g in grads if g is not None]
        or [torch.zeros(1, dtype=torch.float64)]
    )
    grad_rms = float(all_flat.pow(2).mean().sqrt())
    floor = max(grad_rms, 1e-6)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (name, p), g in zip(named_params.items(), grads):
        flat = p.detach().reshape(-1)
        grad_flat = (
            torch.zeros_like(flat) if g is None else g.detach().reshape(-1)
        )
        n = flat.numel()
        idx = rng.choice(n, size=min(max_entries_per_tensor, n), replace=False)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            ad = grad_flat[i].item()
            rel = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            worst = max(worst, rel)
    return worst


def run_cli(*argv: str) -> int:
    return cli_main(list(argv))


def read_bytes_tree(root) -> dict[str, bytes]:
    """All files under a directory keyed by relative path, for byte compares."""
    from pathlib import Path

    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
