"""Level-category hybrid prediction network.

A ViT encoder turns patches into token embeddings; a cross-attention
decoder uses one word-vector query per category to read those tokens and
produce one embedding per category. Each category embedding is pooled to a
scalar score by its own head, and a linear level predictor maps the full
score vector to a choice of hierarchy depth.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import AttentionParams, Tensor
from .distortion import resize_bilinear
from .hierarchy import Hierarchy, HierarchyError

LAMBDA = 1.0
MOMENTUM = 0.9


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream for ``label`` derived from one user seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode())]))


@dataclass(frozen=True)
class ModelConfig:
    level_sizes: tuple[int, ...]
    embed_dim: int
    image_size: int = 64
    patch_size: int = 8
    width: int = 64
    encoder_blocks: int = 4
    decoder_blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    word_queries: bool = True
    eps: float = 1e-5
    init_std: float | None = None
    crop_pad: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ModelError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ModelError("width must be divisible by heads")
        if not self.level_sizes or min(self.level_sizes) < 1:
            raise ModelError("every level needs at least one category")
        object.__setattr__(self, "level_sizes", tuple(int(n) for n in self.level_sizes))

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def category_count(self) -> int:
        return sum(self.level_sizes)

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    @property
    def level_slices(self) -> list[tuple[int, int]]:
        bounds = np.cumsum((0,) + self.level_sizes)
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def pad(self) -> int:
        return self.image_size // 8 if self.crop_pad is None else self.crop_pad

    def to_json(self) -> dict:
        d = asdict(self)
        d["level_sizes"] = list(self.level_sizes)
        return d

    @classmethod
    def for_hierarchy(cls, h: Hierarchy, embed_dim: int, **kw) -> "ModelConfig":
        sizes = tuple(len(h.nodes_at_level(k)) for k in range(h.depth))
        return cls(level_sizes=sizes, embed_dim=embed_dim, **kw)


@dataclass(frozen=True)
class Prediction:
    level: int
    path: tuple[int, ...]
    scores: np.ndarray
    level_logits: np.ndarray


# -- image ingestion ----------------------------------------------------------------


def ingest(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Resize to ``image_size + pad`` ahead of cropping."""
    side = cfg.image_size + cfg.pad
    return resize_bilinear(np.asarray(img, dtype=np.float64), side, side)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    top = (img.shape[0] - size) // 2
    left = (img.shape[1] - size) // 2
    return img[top : top + size, left : left + size]


def augment(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop plus horizontal flip with probability 1/2."""
    top = int(rng.integers(0, img.shape[0] - size + 1))
    left = int(rng.integers(0, img.shape[1] - size + 1))
    out = img[top : top + size, left : left + size]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return out


def patchify(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(N, 3 p^2) matrix; patch i in raster order, each flattened row-major."""
    s, p = cfg.image_size, cfg.patch_size
    if img.shape != (s, s, 3):
        raise ModelError(f"expected a {s}x{s}x3 image, got {img.shape}")
    g = s // p
    blocks = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(g * g, p * p * 3)


def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    s, p = cfg.image_size, cfg.patch_size
    g = s // p
    return patches.reshape(g, g, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(s, s, 3)


# -- model ----------------------------------------------------------------------


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class HierarchyNet:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, cfg: ModelConfig, queries: np.ndarray, seed: int = 0):
        queries = np.asarray(queries, dtype=np.float64)
        if queries.shape != (cfg.category_count, cfg.embed_dim):
            raise ModelError(
                f"query matrix {queries.shape} does not match "
                f"({cfg.category_count}, {cfg.embed_dim})"
            )
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.queries = queries.astype(self.dtype)
        self.params: dict[str, Tensor] = {}
        self._init(derive_rng(seed, "init"))

    # parameter construction

    def _add(self, name, arr):
        self.params[name] = ad.parameter(arr, dtype=self.dtype, name=name)

    def _std(self, fan_in: int) -> float:
        # None: 1/sqrt(fan_in), which plain SGD needs at toy widths
        return self.cfg.init_std if self.cfg.init_std is not None else fan_in ** -0.5

    def _linear(self, rng, name, n_in, n_out):
        self._add(f"{name}.w", _trunc_normal(rng, (n_in, n_out), self._std(n_in)))
        self._add(f"{name}.b", np.zeros(n_out))

    def _norm(self, name, d):
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _block(self, rng, name):
        d = self.cfg.width
        self._norm(f"{name}.ln1", d)
        for proj in ("q", "k", "v", "o"):
            self._add(f"{name}.attn.w{proj}", _trunc_normal(rng, (d, d), self._std(d)))
            self._add(f"{name}.attn.b{proj}", np.zeros(d))
        self._norm(f"{name}.ln2", d)
        self._linear(rng, f"{name}.mlp1", d, d * self.cfg.mlp_ratio)
        self._linear(rng, f"{name}.mlp2", d * self.cfg.mlp_ratio, d)

    def _init(self, rng):
        cfg = self.cfg
        d, c = cfg.width, cfg.category_count
        self._linear(rng, "patch", cfg.patch_dim, d)
        n_tokens = cfg.n_patches + (0 if cfg.word_queries else 1)
        emb_std = 0.02 if cfg.init_std is None else cfg.init_std
        self._add("pos", _trunc_normal(rng, (n_tokens, d), emb_std))
        if not cfg.word_queries:
            self._add("cls", _trunc_normal(rng, (1, d), emb_std))
        for i in range(cfg.encoder_blocks):
            self._block(rng, f"enc.{i}")
        if cfg.word_queries:
            self._linear(rng, "query", cfg.embed_dim, d)
            for i in range(cfg.decoder_blocks):
                self._block(rng, f"dec.{i}")
            self._add("score.w", _trunc_normal(rng, (c, d), self._std(d)))
            self._add("score.b", np.zeros(c))
        else:
            self._linear(rng, "head", d, c)
        self._linear(rng, "level", c, cfg.depth)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # forward pieces

    def _attn(self, prefix: str) -> AttentionParams:
        return AttentionParams(*(self.params[f"{prefix}.attn.{n}"] for n in AttentionParams.names))

    def _ln(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], self.cfg.eps)

    def _mlp(self, x, name):
        h = ad.gelu(ad.linear(x, self.params[f"{name}.mlp1.w"], self.params[f"{name}.mlp1.b"]))
        return ad.linear(h, self.params[f"{name}.mlp2.w"], self.params[f"{name}.mlp2.b"])

    def _encoder_block(self, z, name):
        zn = self._ln(z, f"{name}.ln1")
        z = ad.multi_head_attention(zn, zn, zn, self.cfg.heads, self._attn(name)) + z
        return self._mlp(self._ln(z, f"{name}.ln2"), name) + z

    def _decoder_block(self, f, keys, name):
        f = ad.multi_head_attention(
            self._ln(f, f"{name}.ln1"), keys, keys, self.cfg.heads, self._attn(name)
        ) + f
        return self._mlp(self._ln(f, f"{name}.ln2"), name) + f

    def embed(self, patches) -> Tensor:
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, self.dtype))
        z = ad.linear(x, self.params["patch.w"], self.params["patch.b"])
        if not self.cfg.word_queries:
            z = ad.concat([self.params["cls"], z], axis=0)
        return z + self.params["pos"]

    def encode(self, patches) -> Tensor:
        z = self.embed(patches)
        for i in range(self.cfg.encoder_blocks):
            z = self._encoder_block(z, f"enc.{i}")
        return z

    def project_queries(self, queries: np.ndarray | Tensor | None = None) -> Tensor:
        v = self.queries if queries is None else queries
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, self.dtype))
        return ad.linear(v, self.params["query.w"], self.params["query.b"])

    def decode(self, z: Tensor, queries=None) -> Tensor:
        f = self.project_queries(queries)
        for i in range(self.cfg.decoder_blocks):
            f = self._decoder_block(f, z, f"dec.{i}")
        return f

    def score_pool(self, f: Tensor) -> Tensor:
        if f.shape[0] != self.cfg.category_count:
            raise ModelError(f"{f.shape[0]} category embeddings, expected {self.cfg.category_count}")
        return (f * self.params["score.w"]).sum(axis=1) + self.params["score.b"]

    def predict_level(self, s: Tensor) -> Tensor:
        c = self.cfg.category_count
        out = ad.linear(s.reshape(1, c), self.params["level.w"], self.params["level.b"])
        return out.reshape(self.cfg.depth)

    def forward(self, patches) -> tuple[Tensor, Tensor]:
        """Return (category scores [c], level logits [depth])."""
        z = self.encode(patches)
        if self.cfg.word_queries:
            s = self.score_pool(self.decode(z))
        else:
            cls = z[0:1]
            s = ad.linear(cls, self.params["head.w"], self.params["head.b"]).reshape(
                self.cfg.category_count
            )
        return s, self.predict_level(s)

    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.params.items()}
        state["buffer.queries"] = self.queries
        return state

    def save(self, path, category_names: Sequence[str] = (), extra: dict | None = None) -> None:
        meta = {"config": self.cfg.to_json(), "categories": list(category_names)}
        if extra:
            meta.update(extra)
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["HierarchyNet", dict]:
        tensors, meta = checkpoint.load(path)
        cfg_d = dict(meta["config"])
        cfg_d["level_sizes"] = tuple(cfg_d["level_sizes"])
        cfg = ModelConfig(**cfg_d)
        model = cls(cfg, tensors.pop("buffer.queries"))
        missing = set(model.params) - set(tensors)
        if missing:
            raise ModelError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, t in model.params.items():
            if tensors[name].shape != t.shape:
                raise ModelError(f"shape mismatch for {name}: {tensors[name].shape} vs {t.shape}")
            t.data = tensors[name].astype(model.dtype)
        return model, meta


# -- labels and loss -------------------------------------------------------------------


class LabelIndex:
    """Maps hierarchy node ids to score-vector positions (canonical order)."""

    def __init__(self, h: Hierarchy):
        self.h = h
        self.order = h.categories()
        self.pos = {nid: i for i, nid in enumerate(self.order)}
        self.slices = h.level_slices()

    def target(self, nid: int) -> int:
        """Position of ``nid`` inside its level's slice."""
        lo, _ = self.slices[self.h.level_of(nid)]
        return self.pos[nid] - lo

    def names(self) -> list[str]:
        return [self.h.name(n) for n in self.order]


def loss_terms(
    s: Tensor,
    level_logits: Tensor,
    path: Sequence[int],
    level: int,
    labels: LabelIndex,
    lam: float = LAMBDA,
    level_term: bool = True,
) -> list[tuple[str, Tensor]]:
    """Named CE terms: the level term plus one per level down to ``level``."""
    if len(path) < level + 1:
        raise ModelError(f"path of length {len(path)} cannot carry level {level}")
    if not 0 <= level < len(labels.slices):
        raise ModelError(f"level {level} outside hierarchy depth")
    terms = []
    if level_term:
        terms.append(("level", ad.cross_entropy(level_logits, level)))
    for k in range(level + 1):
        lo, hi = labels.slices[k]
        ce = ad.cross_entropy(s[lo:hi], labels.target(path[k]))
        terms.append((labels.h.level_names[k], ce * lam if lam != 1.0 else ce))
    return terms


def hierarchical_loss(s, level_logits, path, level, labels, lam=LAMBDA, level_term=True) -> Tensor:
    terms = loss_terms(s, level_logits, path, level, labels, lam, level_term)
    total = terms[0][1]
    for _, t in terms[1:]:
        total = total + t
    return total


# -- training --------------------------------------------------------------------------


@dataclass
class TrainSample:
    image: np.ndarray
    path: tuple[int, ...]
    level: int

    def __post_init__(self):
        if len(self.path) != self.level + 1:
            raise ModelError("category path length must equal level + 1")


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 0.01
    momentum: float = MOMENTUM
    batch: int = 16
    epochs: int = 10
    augment: bool = True
    lam: float = LAMBDA
    clip_norm: float | None = 1.0
    cosine: bool = False  # anneal lr to 0 over the run

    def lr_at(self, step: int, total: int) -> float:
        if not self.cosine or total <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainResult:
    model: HierarchyNet
    losses: list[float] = field(default_factory=list)


def train(
    samples: Sequence[TrainSample],
    model: HierarchyNet,
    labels: LabelIndex,
    schedule: TrainSchedule,
    seed: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum; returns per-epoch mean training loss."""
    if not samples:
        raise ModelError("cannot train on an empty dataset")
    cfg = model.cfg
    rng = derive_rng(seed, "train")
    prepared = [ingest(s.image, cfg) for s in samples]
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    losses = []
    per_epoch = math.ceil(len(samples) / schedule.batch)
    total_steps = per_epoch * schedule.epochs
    step = 0
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), schedule.batch):
            batch = order[start : start + schedule.batch]
            for p in params:
                p.zero_grad()
            batch_loss = None
            for i in batch:
                img = (
                    augment(prepared[i], cfg.image_size, rng)
                    if schedule.augment
                    else center_crop(prepared[i], cfg.image_size)
                )
                s, lv = model.forward(patchify(img, cfg))
                li = hierarchical_loss(s, lv, samples[i].path, samples[i].level, labels, schedule.lam)
                batch_loss = li if batch_loss is None else batch_loss + li
            batch_loss = batch_loss * (1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch at {start}")
            batch_loss.backward()
            if schedule.clip_norm is not None:
                clip_grad_norm(params, schedule.clip_norm)
            ad.sgd_step(params, velocity, schedule.lr_at(step, total_steps), schedule.momentum)
            step += 1
            total += value * len(batch)
        losses.append(total / len(samples))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return TrainResult(model, losses)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def evaluate_loss(samples: Sequence[TrainSample], model: HierarchyNet, labels: LabelIndex) -> float:
    """Mean loss without augmentation or parameter updates."""
    vals = []
    with ad.no_grad():
        for smp in samples:
            img = center_crop(ingest(smp.image, model.cfg), model.cfg.image_size)
            s, lv = model.forward(patchify(img, model.cfg))
            vals.append(hierarchical_loss(s, lv, smp.path, smp.level, labels).item())
    return math.fsum(vals) / len(vals)


# -- inference ---------------------------------------------------------------------------


def constrained_path(scores: np.ndarray, level: int, labels: LabelIndex) -> tuple[int, ...]:
    """Top-level argmax, then argmax restricted to children of the chosen node."""
    h = labels.h
    candidates = h.nodes_at_level(0)
    path = []
    for _ in range(level + 1):
        best = max(candidates, key=lambda n: (scores[labels.pos[n]], -labels.pos[n]))
        path.append(best)
        candidates = h.children(best)
    return tuple(path)


def infer(img: np.ndarray, model: HierarchyNet, labels: LabelIndex) -> Prediction:
    cfg = model.cfg
    if labels.h.depth != cfg.depth or len(labels.order) != cfg.category_count:
        raise HierarchyError("hierarchy does not match the model configuration")
    with ad.no_grad():
        x = patchify(center_crop(ingest(img, cfg), cfg.image_size), cfg)
        s, lv = model.forward(x)
    scores = s.data.astype(np.float64)
    logits = lv.data.astype(np.float64)
    level = int(np.argmax(logits))
    return Prediction(level, constrained_path(scores, level, labels), scores, logits)


def with_dtype(cfg: ModelConfig, dtype: str) -> ModelConfig:
    return replace(cfg, dtype=dtype)
