"""Adam with bias correction, global-norm clipping and a non-finite guard."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"opt.m.{k}": t for k, t in self.m.items()}
        out.update({f"opt.v.{k}": t for k, t in self.v.items()})
        return out

    def load_tensors(self, tensors: dict[str, torch.Tensor], step: int) -> None:
        self.step = step
        self.m = {k[len("opt.m."):]: t.clone() for k, t in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: t.clone() for k, t in tensors.items() if k.startswith("opt.v.")}


def grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``.
    Returns the clipped gradients and the pre-clip norm."""
    norm = grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@torch.no_grad()
def apply_update(model: torch.nn.Module, grads: dict[str, torch.Tensor], state: AdamState,
                 lr: float) -> float:
    """One Adam step in place. Returns the L2 norm of the parameter change.

    Raises NonFiniteGradient (and leaves params and state untouched) if any
    gradient entry is NaN or infinite.
    """
    params = dict(model.named_parameters())
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}; update rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    delta_sq = 0.0
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        delta = -lr * (m / c1) / ((v / c2).sqrt() + state.eps)
        p.add_(delta)
        delta_sq += float((delta.double() ** 2).sum())
    return math.sqrt(delta_sq)
