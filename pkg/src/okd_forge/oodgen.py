"""Disruptive augmentations used as out-of-distribution data generators.

Every function takes a batch as an ``ndarray`` (or :class:`Tensor`), never
modifies it, and returns a new array of the same shape.  Randomness comes only
from the ``rng`` argument, so a fixed generator state gives bit-identical output.
Several functions accept keyword overrides (``m=``, ``partner=``, ``perms=``…)
that replace the random draw; these exist for testing and for composing
augmentations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError, ParameterError, UsageError

KINDS = (
    "identity",
    "cutmix",
    "mixup",
    "cutmix_mixup",
    "jigsaw",
    "gaussian_noise",
    "adv_gradient",
    "wave_mixup",
    "wave_noise",
    "wave_mask",
)
JIGSAW_PRESETS = (4, 16, 64)


def _array(batch) -> np.ndarray:
    return np.asarray(batch.data if isinstance(batch, T.Tensor) else batch, dtype=np.float64)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _images(x: np.ndarray, who: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{who} needs an N×C×H×W batch, got shape {x.shape}")


def _waves(x: np.ndarray, who: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{who} needs an N×C×L batch, got shape {x.shape}")


def identity(batch, rng=None) -> np.ndarray:
    return _array(batch).copy()


def mixup(batch, rng, beta_a: float = 1.0, beta_b: float = 1.0, *, m=None, partner=None) -> np.ndarray:
    """``m * x_i + (1 - m) * x_partner(i)`` with ``m ~ Beta(beta_a, beta_b)`` per example."""
    x = _array(batch)
    n = x.shape[0]
    if n < 2:
        raise DataError("mixup needs a batch of at least 2 examples")
    if m is None:
        m = rng.beta(beta_a, beta_b, size=n)
    if partner is None:
        partner = rng.permutation(n)
    m = _bcast(np.broadcast_to(np.asarray(m, dtype=np.float64), (n,)), x.ndim)
    return m * x + (1.0 - m) * x[np.asarray(partner)]


def cutmix_boxes(n: int, height: int, width: int, m: np.ndarray, rng) -> np.ndarray:
    """Boxes ``(top, left, h, w)`` covering area fraction ``1 - m`` of the image.

    Sides are ``H*sqrt(1-m)`` and ``W*sqrt(1-m)`` rounded to whole pixels; the
    box position is uniform over placements that keep it inside the image.
    """
    cut = np.sqrt(np.clip(1.0 - np.asarray(m, dtype=np.float64), 0.0, 1.0))
    hs = np.rint(height * cut).astype(np.int64)
    ws = np.rint(width * cut).astype(np.int64)
    tops = rng.integers(0, height - hs + 1)
    lefts = rng.integers(0, width - ws + 1)
    return np.stack([tops, lefts, hs, ws], axis=1)


def paste_boxes(base, source, boxes) -> np.ndarray:
    """Copy each ``source[i]`` rectangle ``boxes[i]`` verbatim into ``base[i]``."""
    out = _array(base).copy()
    src = _array(source)
    for i, (top, left, h, w) in enumerate(np.asarray(boxes, dtype=np.int64)):
        out[i, :, top : top + h, left : left + w] = src[i, :, top : top + h, left : left + w]
    return out


def cutmix(batch, rng, beta_a: float = 1.0, beta_b: float = 1.0, *, m=None, partner=None) -> np.ndarray:
    x = _array(batch)
    _images(x, "cutmix")
    n, _, h, w = x.shape
    if m is None:
        m = rng.beta(beta_a, beta_b, size=n)
    if partner is None:
        partner = rng.permutation(n)
    m = np.broadcast_to(np.asarray(m, dtype=np.float64), (n,))
    boxes = cutmix_boxes(n, h, w, m, rng)
    return paste_boxes(x, x[np.asarray(partner)], boxes)


def cutmix_mixup(batch, rng, beta_a: float = 1.0, beta_b: float = 1.0, *, alpha=None) -> np.ndarray:
    """``alpha * mixup(x) + (1 - alpha) * cutmix(x)``, ``alpha ~ Beta`` per example.

    The two passes draw independent partners, so an output can blend three images.
    """
    x = _array(batch)
    _images(x, "cutmix_mixup")
    n = x.shape[0]
    if alpha is None:
        alpha = rng.beta(beta_a, beta_b, size=n)
    mixed = mixup(x, rng, beta_a, beta_b)
    cut = cutmix(x, rng, beta_a, beta_b)
    a = _bcast(np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)), x.ndim)
    return a * mixed + (1.0 - a) * cut


def jigsaw_grid(k: int, height: int, width: int) -> int:
    """Side of the patch grid for ``k`` patches; validates divisibility."""
    g = math.isqrt(k)
    if k < 1 or g * g != k:
        raise ParameterError(f"jigsaw k must be a perfect square, got {k}")
    if height % g or width % g:
        raise DimensionError(f"jigsaw grid {g}x{g} does not divide image {height}x{width}")
    return g


def jigsaw(batch, k: int, rng, *, perms=None) -> np.ndarray:
    """Cut each image into a ``sqrt(k) x sqrt(k)`` grid and shuffle the patches.

    ``perms[i][dst] = src`` gives, for image ``i``, which patch lands in slot ``dst``.
    """
    x = _array(batch)
    _images(x, "jigsaw")
    n, c, h, w = x.shape
    g = jigsaw_grid(k, h, w)
    ph, pw = h // g, w // g
    patches = x.reshape(n, c, g, ph, g, pw).transpose(0, 2, 4, 1, 3, 5).reshape(n, k, c, ph, pw)
    if perms is None:
        perms = np.stack([rng.permutation(k) for _ in range(n)])
    perms = np.asarray(perms, dtype=np.int64)
    shuffled = np.take_along_axis(patches, perms[:, :, None, None, None], axis=1)
    return shuffled.reshape(n, g, g, c, ph, pw).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)


def gaussian_noise(batch, sigma: float, rng) -> np.ndarray:
    x = _array(batch)
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)


def adv_gradient(batch, labels, model, epsilon: float) -> np.ndarray:
    """One signed-gradient ascent step on the model's cross-entropy.

    The model's parameters are left untouched (a frozen copy is differentiated).
    """
    from .distill import cross_entropy  # local import avoids a module cycle

    x = _array(batch)
    if epsilon < 0:
        raise ParameterError("epsilon must be non-negative")
    if model is None or labels is None:
        raise UsageError("adv_gradient needs labels and a differentiable model")
    if epsilon == 0:
        return x.copy()
    frozen = model.clone(requires_grad=False) if hasattr(model, "clone") else model
    xt = T.Tensor(x, requires_grad=True)
    with T.enable_grad():
        loss = cross_entropy(labels, frozen(xt), 1.0)
        if not loss.requires_grad:
            raise UsageError("model output does not depend on its input; no gradient available")
        loss.backward()
    if xt.grad is None:
        raise UsageError("no input gradient was produced")
    return x + epsilon * np.sign(xt.grad)


def wave_mask(batch, fraction: float, rng, *, starts=None) -> np.ndarray:
    """Zero one contiguous segment of ``round(fraction * L)`` samples per example."""
    x = _array(batch)
    _waves(x, "wave_mask")
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"mask fraction must be in [0, 1], got {fraction}")
    n, _, length = x.shape
    span = int(math.floor(fraction * length + 0.5))
    if starts is None:
        starts = rng.integers(0, length - span + 1, size=n)
    out = x.copy()
    for i, s in enumerate(np.asarray(starts, dtype=np.int64)):
        out[i, :, s : s + span] = 0.0
    return out


def wave_noise(batch, sigma: float, rng) -> np.ndarray:
    x = _array(batch)
    _waves(x, "wave_noise")
    return gaussian_noise(x, sigma, rng)


def wave_mixup(batch, rng, beta_a: float = 1.0, beta_b: float = 1.0, **overrides) -> np.ndarray:
    x = _array(batch)
    _waves(x, "wave_mixup")
    return mixup(x, rng, beta_a, beta_b, **overrides)


@dataclass(frozen=True)
class Augmentor:
    """A named generator configuration; call it on a batch to draw ``A(x)``."""

    kind: str = "identity"
    beta_a: float = 1.0
    beta_b: float = 1.0
    k: int = 4
    sigma: float = 0.1
    epsilon: float = 0.03
    mask_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentor kind {self.kind!r}; choose from {KINDS}")
        for name in ("beta_a", "beta_b"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("sigma", "epsilon", "mask_fraction"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.mask_fraction > 1:
            raise ParameterError("mask_fraction must be <= 1")
        g = math.isqrt(self.k) if self.k > 0 else 0
        if self.kind == "jigsaw" and (self.k < 1 or g * g != self.k):
            raise ParameterError(f"jigsaw k must be a perfect square, got {self.k}")

    def __call__(self, batch, rng, labels=None, model=None) -> np.ndarray:
        kind = self.kind
        if kind == "identity":
            return identity(batch)
        if kind == "mixup":
            return mixup(batch, rng, self.beta_a, self.beta_b)
        if kind == "cutmix":
            return cutmix(batch, rng, self.beta_a, self.beta_b)
        if kind == "cutmix_mixup":
            return cutmix_mixup(batch, rng, self.beta_a, self.beta_b)
        if kind == "jigsaw":
            return jigsaw(batch, self.k, rng)
        if kind == "gaussian_noise":
            return gaussian_noise(batch, self.sigma, rng)
        if kind == "adv_gradient":
            return adv_gradient(batch, labels, model, self.epsilon)
        if kind == "wave_mixup":
            return wave_mixup(batch, rng, self.beta_a, self.beta_b)
        if kind == "wave_noise":
            return wave_noise(batch, self.sigma, rng)
        return wave_mask(batch, self.mask_fraction, rng)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Augmentor":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown augmentor keys: {sorted(unknown)}")
        return cls(**d)
