"""Central finite-difference checks for every differentiable op.

Each suite builds a scalar loss from float64 leaves. Non-scalar op outputs
are contracted with a fixed random weight tensor so every output entry
contributes to the checked gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor

STEP = 1e-5
FLOOR = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: list[Tensor],
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    step: float = STEP,
) -> tuple[float, int]:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    With ``max_entries`` set, that many (leaf, index) pairs are sampled
    uniformly over all leaf entries; otherwise every entry is checked.
    """
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    entries = [(i, j) for i, t in enumerate(leaves) for j in range(t.data.size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[k] for k in sorted(pick)]

    worst = 0.0
    with ad.no_grad():
        for i, j in entries:
            flat = leaves[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            num = (up - down) / (2 * step)
            err = float(rel_error(np.array(analytic[i].reshape(-1)[j]), np.array(num)))
            worst = max(worst, err)
    return worst, len(entries)


def _contract(out: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# -- suites ---------------------------------------------------------------------


def suite_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return lambda: _contract(ad.matmul(a, b), np.random.default_rng(1)), [a, b]


def suite_layer_norm(rng):
    x, g, b = _leaf(rng, 5, 8), _leaf(rng, 8), _leaf(rng, 8)
    return lambda: _contract(ad.layer_norm(x, g, b, 1e-5), np.random.default_rng(2)), [x, g, b]


def suite_softmax(rng):
    x = _leaf(rng, 4, 6)
    return lambda: _contract(ad.softmax(x), np.random.default_rng(3)), [x]


def suite_log_softmax(rng):
    x = _leaf(rng, 3, 5)
    return lambda: _contract(ad.log_softmax(x), np.random.default_rng(4)), [x]


def suite_gelu(rng):
    x = _leaf(rng, 12, scale=2.0)
    return lambda: _contract(ad.gelu(x), np.random.default_rng(5)), [x]


def suite_cross_entropy(rng):
    x = _leaf(rng, 7)
    return lambda: ad.cross_entropy(x, 3), [x]


def suite_elementwise(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    v = _leaf(rng, 4)

    def f():
        y = ad.tanh(a * b + v) - ad.exp(a * 0.3) + ad.log(c)
        y = ad.concat([y[0:2], ad.transpose(y[1:3]).reshape(2, 4)], axis=0)
        return _contract(y, np.random.default_rng(6)) + y.mean()

    return f, [a, b, c, v]


def suite_attention(rng):
    d, heads = 8, 2
    q, kv = _leaf(rng, 3, d), _leaf(rng, 5, d)
    params = [_leaf(rng, d, d, scale=0.5) if n.startswith("w") else _leaf(rng, d, scale=0.1)
              for n in AttentionParams.names]
    ap = AttentionParams(*params)
    return (
        lambda: _contract(ad.multi_head_attention(q, kv, kv, heads, ap), np.random.default_rng(7)),
        [q, kv] + params,
    )


def suite_score_pool(rng):
    from .model import HierarchyNet

    cfg = toy_config()
    m = HierarchyNet(cfg, rng.normal(size=(cfg.category_count, cfg.embed_dim)), seed=3)
    f = _leaf(rng, cfg.category_count, cfg.width)
    m.params["score.b"].data[:] = rng.normal(size=cfg.category_count)
    return (
        lambda: _contract(m.score_pool(f), np.random.default_rng(8)),
        [f, m.params["score.w"], m.params["score.b"]],
    )


def toy_config(**kw):
    """Toy end-to-end config: 16x16 image, patch 8, D=16, L=2, M=1, c=9, depth 3."""
    from .model import ModelConfig

    base = dict(
        level_sizes=(2, 3, 4), embed_dim=12, image_size=16, patch_size=8, width=16,
        encoder_blocks=2, decoder_blocks=1, heads=2, mlp_ratio=2, dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def toy_labels():
    from .hierarchy import loads_hierarchy
    from .model import LabelIndex

    h = loads_hierarchy(
        "# levels: order family species\n"
        "A\t-\nB\t-\nA1\tA\nA2\tA\nB1\tB\n"
        "S1\tA1\nS2\tA1\nS3\tA2\nS4\tB1\n"
    )
    return LabelIndex(h)


def suite_full_model(rng, max_entries: int = 240):
    """Full model loss on a two-sample batch, randomly sampled parameter entries."""
    from .model import HierarchyNet, hierarchical_loss, patchify

    cfg = toy_config()
    labels = toy_labels()
    h = labels.h
    m = HierarchyNet(cfg, rng.normal(size=(cfg.category_count, cfg.embed_dim)), seed=11)
    # larger weights than the training init so every path carries signal
    for name, t in m.params.items():
        if not name.endswith((".g",)):
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    imgs = [rng.random((16, 16, 3)) for _ in range(2)]
    xs = [Tensor(patchify(im, cfg)) for im in imgs]
    targets = [
        (h.path_to(h.id_of("S2", 2)), 2),
        (h.path_to(h.id_of("B1", 1)), 1),
    ]

    def f():
        total = None
        for x, (path, level) in zip(xs, targets):
            s, lv = m.forward(x)
            li = hierarchical_loss(s, lv, path, level, labels)
            total = li if total is None else total + li
        return total * 0.5

    return f, m.parameters(), max_entries


SUITES: dict[str, Callable] = {
    "matmul": suite_matmul,
    "layer_norm": suite_layer_norm,
    "softmax": suite_softmax,
    "log_softmax": suite_log_softmax,
    "gelu": suite_gelu,
    "cross_entropy": suite_cross_entropy,
    "elementwise": suite_elementwise,
    "attention": suite_attention,
    "score_pool": suite_score_pool,
    "full_model": suite_full_model,
}


def run(ops: list[str] | None = None, seed: int = 0, tol: float = OP_TOL,
        model_tol: float = MODEL_TOL) -> list[CheckResult]:
    names = list(SUITES) if not ops else ops
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck ops {unknown}; choose from {sorted(SUITES)}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, len(name)])
        built = SUITES[name](rng)
        max_entries = built[2] if len(built) > 2 else None
        err, n = check_gradients(built[0], built[1], max_entries=max_entries,
                                 rng=np.random.default_rng(seed))
        results.append(CheckResult(name, err, n, model_tol if name == "full_model" else tol))
    return results
