"""Domain-shift split synthesis from context embeddings, plus a synthetic DG benchmark.

The split pipeline clusters each class's feature vectors into ``K`` context
domains with k-means, sends a random half of each class's domains to training
and the other half to testing, and carves a validation set out of the training
examples.  :func:`generate_synthetic` builds a small image dataset whose domain
shift is known by construction, for desk-scale experiments.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import DataError, SpecError

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")
VAL_FRACTION = 0.2


# -- k-means --------------------------------------------------------------
@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list[float]  # assignment-step objective per iteration of the kept restart
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(gen.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(gen.choice(n, p=d2 / total))
        else:
            nxt = int(gen.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int) -> KMeansResult:
    n, k = len(x), len(centroids)
    prev = None
    history: list[float] = []
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        obj = float(d2[np.arange(n), assign].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-300:
            raise RuntimeError(f"k-means objective increased at iteration {it}: {history[-1]} -> {obj}")
        history.append(obj)
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign
        new = np.empty_like(centroids)
        own = d2[np.arange(n), assign].copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # empty cluster: move to the point farthest from its centroid
                far = int(own.argmax())
                new[j] = x[far]
                own[far] = -1.0
        centroids = new
    final = x - centroids[assign]
    return KMeansResult(assign, centroids, float((final * final).sum()), history, it)


def kmeans(features, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 20) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Assignment ties go to the lowest centroid index.  A cluster that empties is
    re-seeded at the point farthest from its assigned centroid.
    """
    x = np.asarray(features.data if isinstance(features, T.Tensor) else features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"features must be N×D, got {x.shape}")
    if k < 1:
        raise DataError("k must be positive")
    if len(x) < k:
        raise DataError(f"need at least k={k} points, got {len(x)}")
    best = None
    for restart in range(n_init):
        gen = rngmod.stream(seed, "kmeans", restart)
        res = _lloyd(x, _plusplus(x, k, gen), max_iter)
        if best is None or res.objective < best.objective:
            best = res
    return best


# -- feature tables and splits --------------------------------------------
@dataclass
class FeatureTable:
    ids: list[str]
    features: np.ndarray
    class_labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        n = len(self.ids)
        if self.features.ndim != 2 or len(self.features) != n or len(self.class_labels) != n:
            raise DataError("ids, features and class_labels must have matching row counts")
        if len(set(self.ids)) != n:
            raise DataError("feature ids must be unique")

    @classmethod
    def load(cls, manifest_path) -> "FeatureTable":
        """Read ``{ids, class_labels, feature_file}`` JSON plus its ODT1 blob."""
        path = Path(manifest_path)
        meta = json.loads(path.read_text())
        unknown = set(meta) - {"ids", "class_labels", "feature_file"}
        if unknown:
            raise DataError(f"unknown feature manifest keys: {sorted(unknown)}")
        feats = T.load_tensor(path.parent / meta["feature_file"]).data
        return cls(meta["ids"], feats, meta["class_labels"])

    def save(self, manifest_path, feature_file: str = "features.odt") -> Path:
        path = Path(manifest_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        T.save_tensor(path.parent / feature_file, self.features)
        meta = {"ids": self.ids, "class_labels": self.class_labels.tolist(), "feature_file": feature_file}
        path.write_text(json.dumps(meta) + "\n")
        return path


@dataclass
class DomainSplit:
    """Per-example domain id and role, plus the ``K`` and seed that made it."""

    ids: list[str]
    classes: np.ndarray
    domains: np.ndarray
    roles: np.ndarray
    k: int
    split_seed: int

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype="<U5")
        if not (len(self.ids) == len(self.classes) == len(self.domains) == len(self.roles)):
            raise DataError("split columns have different lengths")
        bad = set(self.roles.tolist()) - set(ROLES)
        if bad:
            raise DataError(f"unknown roles {sorted(bad)}")
        self._index = {i: n for n, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def roles_for(self, ids) -> np.ndarray:
        try:
            return self.roles[[self._index[str(i)] for i in ids]]
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]!r} is not in the split") from exc

    def count(self, role: str) -> int:
        return int((self.roles == role).sum())

    def domains_with_role(self, cls: int, role: str) -> set[int]:
        mask = (self.classes == cls) & (self.roles == role)
        return set(self.domains[mask].tolist())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "class", "domain", "role"])
        for n in sorted(range(len(self.ids)), key=lambda n: self.ids[n]):
            w.writerow([self.ids[n], int(self.classes[n]), int(self.domains[n]), self.roles[n]])
        return buf.getvalue()

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def load_csv(cls, path, k: int = 0, split_seed: int = 0) -> "DomainSplit":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and list(rows[0]) != ["id", "class", "domain", "role"]:
            raise DataError("split CSV header must be id,class,domain,role")
        return cls(
            [r["id"] for r in rows],
            [int(r["class"]) for r in rows],
            [int(r["domain"]) for r in rows],
            [r["role"] for r in rows],
            k or (max((int(r["domain"]) for r in rows), default=-1) + 1),
            split_seed,
        )


def _assign_val(roles: np.ndarray, gen: np.random.Generator) -> None:
    """Relabel ``round(0.2 * n_train)`` uniformly chosen train rows as val, in place."""
    pool = np.flatnonzero(roles == "train")
    n_val = int(math.floor(VAL_FRACTION * len(pool) + 0.5))
    roles[gen.choice(pool, size=n_val, replace=False)] = "val"


def build_domain_splits(
    table: FeatureTable,
    k: int = 10,
    split_seed: int = 0,
    *,
    max_iter: int = 100,
    n_init: int = 20,
    normalize: bool = False,
) -> DomainSplit:
    """Cluster each class into ``k`` context domains and split domains 50/50.

    The train side receives the extra domain when a class has an odd count.
    """
    x = table.features
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    n = len(table.ids)
    domains = np.full(n, -1, dtype=np.int64)
    roles = np.empty(n, dtype="<U5")
    for cls in np.unique(table.class_labels):
        rows = np.flatnonzero(table.class_labels == cls)
        if len(rows) < 2:
            raise DataError(f"class {cls} has {len(rows)} example(s); need at least 2 to split")
        kc = k
        if len(rows) < k:
            log.warning("class %d has only %d examples; using K=%d", cls, len(rows), len(rows))
            kc = len(rows)
        res = kmeans(x[rows], kc, seed=rngmod.derive_key(split_seed, "kmeans", int(cls)) % 2**63,
                     max_iter=max_iter, n_init=n_init)
        domains[rows] = res.assignments
        found = np.unique(res.assignments)
        shuffled = rngmod.stream(split_seed, rngmod.SPLIT, int(cls)).permutation(found)
        n_train = (len(found) + 1) // 2
        train_doms = set(shuffled[:n_train].tolist())
        roles[rows] = np.where(np.isin(res.assignments, list(train_doms)), "train", "test")
    _assign_val(roles, rngmod.stream(split_seed, "val"))
    return DomainSplit(table.ids, table.class_labels, domains, roles, k, split_seed)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    order = np.lexsort((np.arange(len(w)), -(exact - base)))
    base[order[:short]] += 1
    return base


def _stratified_pick(rows: np.ndarray, classes: np.ndarray, total: int, gen) -> np.ndarray:
    labels = np.unique(classes[rows])
    counts = np.array([(classes[rows] == c).sum() for c in labels])
    alloc = _largest_remainder(total, counts)
    picked = [gen.choice(rows[classes[rows] == c], size=a, replace=False) for c, a in zip(labels, alloc)]
    return np.sort(np.concatenate(picked)) if picked else rows[:0]


def subsample_2k(split: DomainSplit, rng: np.random.Generator, n_train: int = 1600, n_val: int = 400) -> DomainSplit:
    """Keep exactly ``n_train`` train and ``n_val`` val examples, stratified by class.

    Dropped train/val examples leave the split entirely; test rows are untouched.
    When a role is short but the pool suffices, the pool is re-divided; when the
    pool itself is short everything is kept and re-divided 4:1.
    """
    roles = split.roles
    tr, va = np.flatnonzero(roles == "train"), np.flatnonzero(roles == "val")
    pool = np.concatenate([tr, va])
    if len(pool) == 0:
        raise DataError("split has no train or val examples")
    new_roles = roles.copy()
    keep = np.ones(len(roles), dtype=bool)
    if len(tr) >= n_train and len(va) >= n_val:
        keep_tr = _stratified_pick(tr, split.classes, n_train, rng)
        keep_va = _stratified_pick(va, split.classes, n_val, rng)
        keep[pool] = False
        keep[keep_tr] = keep[keep_va] = True
    else:
        if len(pool) >= n_train + n_val:
            log.warning("role sizes %d/%d too small; re-dividing the pool", len(tr), len(va))
            chosen = _stratified_pick(pool, split.classes, n_train + n_val, rng)
            val_size = n_val
        else:
            log.warning("pool of %d < %d; keeping all and re-dividing 4:1", len(pool), n_train + n_val)
            chosen = np.sort(pool)
            val_size = int(math.floor(len(pool) * n_val / (n_train + n_val) + 0.5))
        keep[pool] = False
        keep[chosen] = True
        vals = _stratified_pick(chosen, split.classes, val_size, rng)
        new_roles[chosen] = "train"
        new_roles[vals] = "val"
    idx = np.flatnonzero(keep)
    return DomainSplit(
        [split.ids[i] for i in idx], split.classes[idx], split.domains[idx], new_roles[idx], split.k, split.split_seed
    )


@dataclass
class SplitReport:
    id_accuracy: float
    ood_accuracy: float
    gap: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_split_report(split: DomainSplit, predictions) -> SplitReport:
    """ID accuracy on val rows, OOD accuracy on test rows.

    ``predictions`` maps id -> predicted class (or is aligned with ``split.ids``).
    """
    if isinstance(predictions, dict):
        lookup = {str(k): int(v) for k, v in predictions.items()}
    else:
        lookup = {i: int(p) for i, p in zip(split.ids, np.asarray(predictions))}

    def acc(role):
        rows = np.flatnonzero(split.roles == role)
        if len(rows) == 0:
            raise DataError(f"split has no {role} rows")
        missing = [split.ids[r] for r in rows if split.ids[r] not in lookup]
        if missing:
            raise DataError(f"no prediction for {role} id {missing[0]!r}")
        return float(np.mean([lookup[split.ids[r]] == split.classes[r] for r in rows]))

    ida, ooda = acc("val"), acc("test")
    return SplitReport(ida, ooda, ida - ooda)


# -- synthetic domain-shift benchmark --------------------------------------
@dataclass
class LabeledDataset:
    """Examples with class labels and (optional) domain labels."""

    ids: list[str]
    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    domains: np.ndarray | None = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)
        n = len(self.ids)
        if len(self.x) != n or len(self.labels) != n or (self.domains is not None and len(self.domains) != n):
            raise DataError("ids, x, labels and domains must have matching lengths")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])


@dataclass
class SyntheticDGSpec:
    """Images whose class is a foreground shape and whose domain is the background.

    A domain is a background colour plus a sinusoidal texture. With
    ``shared_styles`` every class sees the same background per domain, so the
    background says nothing about the label and test domains are simply
    backgrounds never seen in training. Without it each (class, domain) cell
    draws its own background.
    """

    num_classes: int = 4
    num_domains: int = 6
    samples_per_cell: int = 60
    image_side: int = 32
    motif_strength: float = 2.0
    motif_size: tuple[int, int] = (10, 16)
    style_strength: float = 0.5
    texture_strength: float = 0.3
    shared_styles: bool = True
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.motif_size = tuple(int(v) for v in self.motif_size)
        for name in ("num_classes", "num_domains", "samples_per_cell", "image_side"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be positive")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if self.image_side % 8:
            raise SpecError("image_side must be a multiple of 8 so every jigsaw preset tiles it")
        lo, hi = self.motif_size
        if not 6 <= lo <= hi <= self.image_side:
            raise SpecError(f"motif_size must satisfy 6 <= lo <= hi <= image_side, got {self.motif_size}")
        if min(self.motif_strength, self.style_strength, self.texture_strength, self.noise_level) < 0:
            raise SpecError("strengths and noise_level must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motif_size"] = list(self.motif_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDGSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _motif(cls: int, size: int, seed: int) -> np.ndarray:
    """Binary ``size``×``size`` mask drawing the shape of class ``cls``."""
    m = np.zeros((size, size))
    t = max(1, size // 6)
    mid = size // 2
    if cls == 0:  # two horizontal bars
        m[mid - 3 * t : mid - 2 * t, :] = 1
        m[mid + 2 * t : mid + 3 * t, :] = 1
    elif cls == 1:  # two vertical bars
        m[:, mid - 3 * t : mid - 2 * t] = 1
        m[:, mid + 2 * t : mid + 3 * t] = 1
    elif cls == 2:  # plus sign
        m[mid - t // 2 - 1 : mid + t // 2 + 1, :] = 1
        m[:, mid - t // 2 - 1 : mid + t // 2 + 1] = 1
    elif cls == 3:  # square outline
        m[: t + 1, :] = m[-t - 1 :, :] = 1
        m[:, : t + 1] = m[:, -t - 1 :] = 1
    elif cls == 4:  # diagonal cross
        i = np.arange(size)
        for w in range(t):
            m[i, np.clip(i + w, 0, size - 1)] = 1
            m[i, np.clip(size - 1 - i - w, 0, size - 1)] = 1
    elif cls == 5:  # filled centre block
        m[mid - 2 * t : mid + 2 * t, mid - 2 * t : mid + 2 * t] = 1
    else:  # beyond the hand-drawn set: a fixed random 4×4 block pattern
        cells = rngmod.stream(seed, "motif", cls).random((4, 4)) < 0.5
        m = np.kron(cells, np.ones((size // 4 + 1, size // 4 + 1)))[:size, :size].astype(np.float64)
    return m


def _synthetic_roles(spec: SyntheticDGSpec, classes: np.ndarray, domains: np.ndarray) -> np.ndarray:
    roles = np.empty(len(classes), dtype="<U5")
    for c in range(spec.num_classes):
        rows = np.flatnonzero(classes == c)
        if spec.num_domains == 1:
            # no shift: the one domain is divided by example instead
            perm = rngmod.stream(spec.seed, rngmod.SPLIT, c).permutation(rows)
            n_train = (len(rows) + 1) // 2
            roles[perm[:n_train]] = "train"
            roles[perm[n_train:]] = "test"
            continue
        order = rngmod.stream(spec.seed, rngmod.SPLIT, c).permutation(spec.num_domains)
        train_doms = order[: (spec.num_domains + 1) // 2]
        roles[rows] = np.where(np.isin(domains[rows], train_doms), "train", "test")
    _assign_val(roles, rngmod.stream(spec.seed, "val"))
    return roles


def generate_synthetic(spec: SyntheticDGSpec) -> tuple[LabeledDataset, DomainSplit]:
    """Render the benchmark and its train/val/test split.

    Pixels are standardised with the mean and std of the non-test rows.
    """
    side, n_cell = spec.image_side, spec.samples_per_cell
    gen = rngmod.stream(spec.seed, rngmod.DATA)
    yy, xx = np.mgrid[0:side, 0:side] / side
    lo, hi = spec.motif_size
    images, classes, domains = [], [], []
    for c in range(spec.num_classes):
        for d in range(spec.num_domains):
            style = rngmod.stream(spec.seed, "style", d) if spec.shared_styles else rngmod.stream(spec.seed, "style", c, d)
            colour = style.uniform(0.0, 1.0, 3) * spec.style_strength
            freq, theta = style.uniform(2, 8), style.uniform(0, np.pi)
            tex_colour = style.uniform(-1, 1, 3) * spec.texture_strength
            direction = xx * np.cos(theta) + yy * np.sin(theta)
            for _ in range(n_cell):
                wave = np.sin(2 * np.pi * freq * direction + gen.uniform(0, 2 * np.pi))
                img = colour[:, None, None] + tex_colour[:, None, None] * wave[None]
                size = int(gen.integers(lo, hi + 1))
                top, left = (int(v) for v in gen.integers(0, side - size + 1, size=2))
                sign = 1.0 if gen.random() < 0.5 else -1.0
                amp = spec.motif_strength * gen.uniform(0.6, 1.4) * sign
                img[:, top : top + size, left : left + size] += amp * _motif(c, size, spec.seed)[None]
                img += spec.noise_level * gen.standard_normal(img.shape)
                images.append(img)
                classes.append(c)
                domains.append(d)
    x = np.stack(images)
    classes, domains = np.array(classes), np.array(domains)
    roles = _synthetic_roles(spec, classes, domains)
    source = x[roles != "test"]
    x = (x - source.mean()) / source.std()
    width = len(str(len(x) - 1))
    ids = [f"s{i:0{width}d}" for i in range(len(x))]
    data = LabeledDataset(ids, x, classes, spec.num_classes, domains)
    return data, DomainSplit(ids, classes, domains, roles, spec.num_domains, spec.seed)


DATASET_FORMAT = "okd-forge-dataset/1"


def save_dataset(directory, data: LabeledDataset, split: DomainSplit, spec: dict | None = None) -> Path:
    """Write ``manifest.json``, ``x.odt`` and ``split.csv`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    T.save_tensor(out / "x.odt", data.x)
    split.save_csv(out / "split.csv")
    manifest = {
        "format": DATASET_FORMAT,
        "num_classes": data.num_classes,
        "input_shape": list(data.input_shape),
        "k": split.k,
        "split_seed": split.split_seed,
        "ids": data.ids,
        "labels": data.labels.tolist(),
        "domains": None if data.domains is None else data.domains.tolist(),
        "data_file": "x.odt",
        "split_file": "split.csv",
        "spec": spec,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def load_dataset(directory, split_file=None) -> tuple[LabeledDataset, DomainSplit]:
    """Inverse of :func:`save_dataset`; ``split_file`` overrides the bundled split."""
    src = Path(directory)
    try:
        meta = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{src} has no manifest.json") from exc
    if meta.get("format") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {meta.get('format')!r}")
    x = T.load_tensor(src / meta["data_file"]).data
    data = LabeledDataset(meta["ids"], x, meta["labels"], meta["num_classes"], meta["domains"])
    if tuple(meta["input_shape"]) != data.input_shape:
        raise DataError("manifest input_shape does not match the stored tensor")
    split = DomainSplit.load_csv(split_file or src / meta["split_file"], meta["k"], meta["split_seed"])
    missing = set(data.ids) - set(split.ids)
    if missing and split_file is None:
        raise DataError(f"split is missing {len(missing)} dataset ids")
    return data, split
