"""Extractor, averaged parallel bottlenecks, classifier and conditional domain discriminator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .diffcore import (
    LinearLayer,
    ShapeError,
    linear_backward,
    linear_forward,
    make_rng,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax,
    softmax_backward,
)

CHECKPOINT_MAGIC = "GSDE1"


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden: int = 64
    bottleneck: int = 16
    num_classes: int = 2
    extractor_layers: int = 2
    disc_hidden: int = 64

    def validate(self) -> None:
        for name in ("input_dim", "hidden", "bottleneck", "num_classes", "extractor_layers", "disc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"model dimension {name} must be positive")


@dataclass
class GrlSchedule:
    gamma: float = 10.0
    max_progress_iters: int = 1000

    def progress(self, iteration: int) -> float:
        return min(max(iteration / max(self.max_progress_iters, 1), 0.0), 1.0)


def lam(schedule: GrlSchedule, progress: float) -> float:
    """Adaptation ramp ``2 / (1 + exp(-gamma * progress)) - 1``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-schedule.gamma * progress)) - 1.0


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list  # extractor pre-activations
    acts: list  # extractor inputs per layer (acts[0] = x)
    backbone: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class DiscCache:
    fused: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray


class GsdeModel:
    def __init__(self, dims: ModelDims, extractor, bottlenecks, classifier, discriminator,
                 init_seed: Optional[int] = None):
        self.dims = dims
        self.extractor: list[LinearLayer] = list(extractor)
        self.bottlenecks: list[LinearLayer] = list(bottlenecks)
        self.classifier: LinearLayer = classifier
        self.discriminator: list[LinearLayer] = list(discriminator)
        self.init_seed = init_seed

    @property
    def k(self) -> int:
        return len(self.bottlenecks)

    # -- parameters ---------------------------------------------------------

    def named_layers(self):
        for i, layer in enumerate(self.extractor):
            yield f"extractor.{i}", layer
        for i, layer in enumerate(self.bottlenecks):
            yield f"bottleneck.{i}", layer
        yield "classifier", self.classifier
        for i, layer in enumerate(self.discriminator):
            yield f"discriminator.{i}", layer

    def feature_path_layers(self) -> list[LinearLayer]:
        return self.extractor + self.bottlenecks + [self.classifier]

    def parameters(self):
        for _, layer in self.named_layers():
            yield from layer.params()

    def named_parameters(self):
        for name, layer in self.named_layers():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def copy(self) -> "GsdeModel":
        return GsdeModel(self.dims, [l.copy() for l in self.extractor],
                         [l.copy() for l in self.bottlenecks], self.classifier.copy(),
                         [l.copy() for l in self.discriminator], self.init_seed)

    def fingerprint(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_parameters()])

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray) -> ForwardCache:
        if x.ndim != 2 or x.shape[1] != self.dims.input_dim:
            raise ShapeError(f"input has shape {x.shape}, expected (*, {self.dims.input_dim})")
        acts, pre = [x], []
        h = x
        for layer in self.extractor:
            z = linear_forward(layer, h)
            pre.append(z)
            h = relu_forward(z)
            acts.append(h)
        backbone = acts.pop()
        f = linear_forward(self.bottlenecks[0], backbone)
        for b in self.bottlenecks[1:]:
            f = f + linear_forward(b, backbone)
        f = f / self.k
        logits = linear_forward(self.classifier, f)
        return ForwardCache(x, pre, acts, backbone, f, logits, softmax(logits))

    def backward(self, cache: ForwardCache, grad_features: Optional[np.ndarray] = None,
                 grad_logits: Optional[np.ndarray] = None) -> None:
        """Accumulate feature-path parameter gradients."""
        g_f = np.zeros_like(cache.features) if grad_features is None else grad_features.copy()
        if grad_logits is not None:
            g_f += linear_backward(self.classifier, cache.features, grad_logits)
        g_f /= self.k
        g_bb = linear_backward(self.bottlenecks[0], cache.backbone, g_f)
        for b in self.bottlenecks[1:]:
            g_bb += linear_backward(b, cache.backbone, g_f)
        g = g_bb
        for layer, z, a in zip(reversed(self.extractor), reversed(cache.pre), reversed(cache.acts)):
            g = linear_backward(layer, a, relu_backward(z, g))

    def disc_forward(self, fused: np.ndarray) -> DiscCache:
        expect = self.dims.bottleneck * self.dims.num_classes
        if fused.ndim != 2 or fused.shape[1] != expect:
            raise ShapeError(f"fused input has shape {fused.shape}, expected (*, {expect})")
        z = linear_forward(self.discriminator[0], fused)
        h = relu_forward(z)
        logits = linear_forward(self.discriminator[1], h)
        return DiscCache(fused, z, h, logits)

    def disc_backward(self, cache: DiscCache, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulate discriminator gradients; return gradient w.r.t. the fused input."""
        g = linear_backward(self.discriminator[1], cache.hidden, grad_logits)
        return linear_backward(self.discriminator[0], cache.fused, relu_backward(cache.pre, g))

    def save(self, path) -> None:
        save_checkpoint(self, path)


def init_model(dims: ModelDims, k: int = 5, seed: int = 0) -> GsdeModel:
    """Fresh model; every layer draws from its own sub-seed of ``seed``."""
    if k < 1:
        raise ValueError("need at least one bottleneck")
    dims.validate()
    ext, h_in = [], dims.input_dim
    for i in range(dims.extractor_layers):
        ext.append(LinearLayer.init_uniform(h_in, dims.hidden, make_rng(seed, 1, i)))
        h_in = dims.hidden
    bns = [LinearLayer.init_uniform(dims.hidden, dims.bottleneck, make_rng(seed, 2, j)) for j in range(k)]
    clf = LinearLayer.init_uniform(dims.bottleneck, dims.num_classes, make_rng(seed, 3))
    disc = [
        LinearLayer.init_uniform(dims.bottleneck * dims.num_classes, dims.disc_hidden, make_rng(seed, 4, 0)),
        LinearLayer.init_uniform(dims.disc_hidden, 1, make_rng(seed, 4, 1)),
    ]
    return GsdeModel(dims, ext, bns, clf, disc, init_seed=seed)


def features(m: GsdeModel, x: np.ndarray) -> np.ndarray:
    return m.forward(x).features


def class_probs(m: GsdeModel, f: np.ndarray) -> np.ndarray:
    if f.ndim != 2 or f.shape[1] != m.dims.bottleneck:
        raise ShapeError(f"features have shape {f.shape}, expected (*, {m.dims.bottleneck})")
    return softmax(linear_forward(m.classifier, f))


def multilinear(f: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise flattened outer product; block ``c`` holds ``p[:, c] * f``."""
    if f.ndim != 2 or p.ndim != 2 or f.shape[0] != p.shape[0]:
        raise ShapeError(f"cannot fuse features {f.shape} with probabilities {p.shape}")
    return (p[:, :, None] * f[:, None, :]).reshape(f.shape[0], -1)


def multilinear_backward(f: np.ndarray, p: np.ndarray, upstream: np.ndarray):
    """Return (d/df, d/dp) given the gradient w.r.t. the fused rows."""
    g = upstream.reshape(f.shape[0], p.shape[1], f.shape[1])
    return np.einsum("nkb,nk->nb", g, p), np.einsum("nkb,nb->nk", g, f)


def domain_logits(m: GsdeModel, fused: np.ndarray) -> np.ndarray:
    return m.disc_forward(fused).logits


def domain_probs(m: GsdeModel, x: np.ndarray) -> np.ndarray:
    """Discriminator output (probability of 'source') for raw inputs."""
    c = m.forward(x)
    return sigmoid(domain_logits(m, multilinear(c.features, c.probs))).ravel()


def grl_backward(upstream: np.ndarray, l_am: float) -> np.ndarray:
    return -l_am * upstream


def predict(m: GsdeModel, x: np.ndarray) -> np.ndarray:
    return m.forward(x).probs


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(m: GsdeModel, path) -> None:
    d = m.dims
    lines = [CHECKPOINT_MAGIC,
             f"dims,{d.input_dim},{d.hidden},{d.bottleneck},{d.num_classes},"
             f"{d.extractor_layers},{d.disc_hidden},{m.k}"]
    for name, p in m.named_parameters():
        rows, cols = (p.shape[0], p.shape[1]) if p.ndim == 2 else (p.shape[0], 1)
        lines.append(",".join([name, str(rows), str(cols)] + [format(float(v), ".17g") for v in p.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> GsdeModel:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    head = text[1].split(",")
    if head[0] != "dims" or len(head) != 8:
        raise ValueError(f"{path}: malformed dims line")
    vals = [int(v) for v in head[1:]]
    dims = ModelDims(*vals[:6])
    m = init_model(dims, k=vals[6], seed=0)
    params = dict(m.named_parameters())
    seen = set()
    for line in text[2:]:
        name, rows, cols, *values = line.split(",")
        if name not in params:
            raise ValueError(f"{path}: unknown parameter block {name}")
        target = params[name]
        arr = np.array([float(v) for v in values], dtype=np.float64)
        if arr.size != int(rows) * int(cols) or arr.size != target.size:
            raise ValueError(f"{path}: block {name} has wrong size")
        target[...] = arr.reshape(target.shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: missing blocks {sorted(missing)}")
    m.init_seed = None
    return m
