"""Analytic gradients of the training objective and the central-difference
oracle that audits them.

``backward`` differentiates the full objective with respect to every
trainable parameter (the adapter pairs and the head) and nothing else.
``grad_check`` compares those gradients against central differences of
the forward-only loss at randomly probed entries, skipping probes where
an L1 penalty argument sits close enough to zero that the subgradient
choice is ambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import vit
from .adapters import final_loss
from .errors import ConfigError, InconclusiveCheckError, InputError, NumericError
from .numerics import make_rng
from .vit import VitModel, batch_loss_tensor, is_trainable_name, named_params

GradientSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class ParamRef:
    name: str
    shape: tuple[int, ...]
    trainable: bool


def param_refs(model: VitModel) -> list[ParamRef]:
    return [ParamRef(n, tuple(t.data.shape), is_trainable_name(n)) for n, t in named_params(model)]


def backward(
    model: VitModel,
    batch,
    alpha: float,
    preserve_on: bool = True,
    diversify_on: bool = True,
) -> tuple[float, GradientSet]:
    """Loss value and exact gradients for every trainable parameter.

    The loss equals the forward-only objective bitwise, since both walk
    the same tape. Gradients of the L1 terms use sign(x) with
    sign(0) = 0.
    """
    if len(batch.labels) == 0:
        raise InputError("empty batch")
    for _, t in named_params(model):
        t.grad = None
    loss = batch_loss_tensor(
        model, batch.images, batch.labels, alpha, preserve_on=preserve_on, diversify_on=diversify_on
    )
    ag.backprop(loss)
    grads: GradientSet = {}
    for name, t in named_params(model):
        if not is_trainable_name(name):
            t.grad = None
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = np.array(g)
        t.grad = None
    return float(loss.data), grads


def central_diff(f, x: float, h: float) -> float:
    """(f(x + h) - f(x - h)) / (2 h)."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def finite_diff(
    model: VitModel,
    batch,
    alpha: float,
    param,
    entry: int,
    h: float,
    preserve_on: bool = True,
    diversify_on: bool = True,
) -> float:
    """Central difference of the objective along one parameter entry."""
    if h <= 0:
        raise ConfigError(f"step size must be positive, got {h}")
    name = param.name if isinstance(param, ParamRef) else param
    if not is_trainable_name(name):
        raise ConfigError(f"parameter {name} is frozen; no gradient is defined for it")
    flat = vit.get_param(model, name).data.reshape(-1)
    saved = float(flat[entry])

    def f(p):
        flat[entry] = p
        return final_loss(model, batch, alpha, preserve_on=preserve_on, diversify_on=diversify_on)

    try:
        return central_diff(f, saved, h)
    finally:
        flat[entry] = saved


def _ambiguity_floor(model: VitModel) -> dict[str, float]:
    """Smallest |entry| of any L1 argument each adapter parameter feeds."""
    floors: dict[str, float] = {}
    for b, block in enumerate(model.blocks):
        for proj in ("wq", "wv"):
            lin = getattr(block.attn, proj)
            if lin.group is None:
                continue
            deltas = [m.delta() for m in lin.group.modules]
            w = lin.base.data
            n = len(deltas)
            preserve_min = [float(np.abs(w.T @ d).min()) for d in deltas]
            pair_min = {}
            for i in range(n):
                for j in range(i + 1, n):
                    pair_min[(i, j)] = float(np.abs(deltas[i].T @ deltas[j]).min())
            for i in range(n):
                lows = [preserve_min[i]]
                lows += [v for (a, c), v in pair_min.items() if i in (a, c)]
                floor = min(lows)
                prefix = f"blocks.{b}.attn.{proj}.lora.{i}"
                floors[f"{prefix}.A"] = floor
                floors[f"{prefix}.B"] = floor
    return floors


def grad_check(
    model: VitModel,
    batch,
    alpha: float,
    samples: int,
    rng: np.random.Generator,
    ambiguity_tol: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over randomly probed trainable entries.

    Probes whose L1 arguments contain an entry below ``ambiguity_tol`` in
    magnitude are skipped; if fewer than half the probes survive, the
    check is inconclusive.
    """
    if samples < 1:
        raise ConfigError(f"need at least one probe, got {samples}")
    refs = [r for r in param_refs(model) if r.trainable]
    sizes = np.array([int(np.prod(r.shape)) for r in refs])
    offsets = np.cumsum(sizes)
    total = int(offsets[-1])
    _, grads = backward(model, batch, alpha)
    floors = _ambiguity_floor(model) if alpha != 0.0 else {}
    max_rel = 0.0
    accepted = 0
    for _ in range(samples):
        flat_idx = int(rng.integers(0, total))
        ref_idx = int(np.searchsorted(offsets, flat_idx, side="right"))
        ref = refs[ref_idx]
        entry = flat_idx - (int(offsets[ref_idx - 1]) if ref_idx > 0 else 0)
        if floors.get(ref.name, np.inf) < ambiguity_tol:
            continue
        accepted += 1
        p0 = float(vit.get_param(model, ref.name).data.reshape(-1)[entry])
        h = 1e-5 * max(1.0, abs(p0))
        numeric = finite_diff(model, batch, alpha, ref, entry, h)
        analytic = float(grads[ref.name].reshape(-1)[entry])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        max_rel = max(max_rel, rel)
    if accepted < samples / 2:
        raise InconclusiveCheckError(f"only {accepted} of {samples} probes were unambiguous")
    return max_rel


def make_probe_model(seed: int):
    """The canonical small model and batch used for gradient auditing.

    Two heads on an 8-dim single-block transformer with a two-module
    rank-2 group per adapted projection. Weights are re-drawn at a
    healthy scale (std 0.4) so activations and penalty arguments sit
    far from the L1 kinks and no gradient is vanishingly small.
    """
    from .data import Batch

    cfg = vit.VitConfig(
        image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2, mlp_ratio=2.0, num_classes=2
    )
    model = vit.init_vit(cfg, make_rng(seed, 0))
    vit.inject_groups(model, rank=2, n=2, rng=make_rng(seed, 1))
    rng = make_rng(seed, 2)
    for name, t in named_params(model):
        if name.endswith(".scale"):
            t.data[...] = 1.0 + 0.1 * rng.normal(0.0, 1.0, t.data.shape)
        elif name.endswith(".offset"):
            t.data[...] = 0.1 * rng.normal(0.0, 1.0, t.data.shape)
        else:
            t.data[...] = rng.normal(0.0, 0.4, t.data.shape)
    images = make_rng(seed, 3).random((4, 8, 8))
    labels = make_rng(seed, 4).integers(0, cfg.num_classes, 4)
    return model, Batch(images=images, labels=labels, tags=[("probe", i) for i in range(4)])
