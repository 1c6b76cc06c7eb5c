"""Seeded synthetic multimodal classification data and the MMDS file format.

Each modality places class centroids on mutually orthogonal random
directions (when the dimension allows it) at a radius proportional to a
per-(modality, class) separability, then adds spherical Gaussian noise.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError

DATASET_MAGIC = b"MMDS"
DATASET_VERSION = 1


@dataclass
class SeparabilityProfile:
    """``separability[m, c]`` in [0, 1] scales class c's centroid radius in modality m.

    ``spread`` multiplies ``noise_sigma`` per class (defaults to ones).
    """

    separability: np.ndarray
    noise_sigma: float = 1.0
    radius: float = 3.0
    spread: Optional[np.ndarray] = None

    def __post_init__(self):
        self.separability = np.asarray(self.separability, dtype=np.float64)
        if self.separability.ndim != 2:
            raise ConfigError("separability must be an M x C matrix")
        if np.any(~np.isfinite(self.separability)) or np.any(self.separability < 0) or np.any(self.separability > 1):
            raise ConfigError("separability entries must lie in [0, 1]")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if not self.radius >= 0:
            raise ConfigError("radius must be non-negative")
        c = self.separability.shape[1]
        self.spread = np.ones(c) if self.spread is None else np.asarray(self.spread, dtype=np.float64)
        if self.spread.shape != (c,) or np.any(self.spread <= 0):
            raise ConfigError("spread must hold one positive value per class")


@dataclass
class MultimodalDataset:
    features: List[np.ndarray]
    labels: np.ndarray
    num_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.labels.size
        if n == 0:
            raise ConfigError("dataset has no samples")
        if not self.features:
            raise ConfigError("dataset has no modalities")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        for m, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != n or f.shape[1] < 1:
                raise ConfigError(f"modality {m} features have shape {f.shape}, expected ({n}, d)")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels outside [0, C)")
        if self.train_idx.size == 0 or self.test_idx.size == 0:
            raise ConfigError("both splits must be nonempty")
        both = np.concatenate([self.train_idx, self.test_idx])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ConfigError("train/test splits must be disjoint and cover every sample")

    @property
    def M(self) -> int:
        return len(self.features)

    @property
    def C(self) -> int:
        return self.num_classes

    @property
    def N(self) -> int:
        return int(self.labels.size)

    @property
    def dims(self) -> List[int]:
        return [f.shape[1] for f in self.features]

    def subset(self, idx):
        return [f[idx] for f in self.features], self.labels[idx]

    def train(self):
        return self.subset(self.train_idx)

    def test(self):
        return self.subset(self.test_idx)

    def __eq__(self, other):
        if not isinstance(other, MultimodalDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.M == other.M
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.test_idx, other.test_idx)
        )


def class_directions(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    """C unit vectors in R^dim, orthonormal when C <= dim."""
    g = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T
    return (g / np.linalg.norm(g, axis=0)).T


def stratified_split(labels, num_classes, train_fraction, rng):
    train, test = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1) if idx.size > 1 else idx.size
        train.append(idx[:n_train])
        test.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def generate(
    M: int,
    C: int,
    dims: Sequence[int],
    n_per_class: int,
    profile: SeparabilityProfile,
    seed: int,
    train_fraction: float = 0.8,
) -> MultimodalDataset:
    """Draw a class-balanced multimodal dataset; pure function of its arguments.

    Random draws are consumed in an order that does not depend on the
    separability values, so changing the profile with a fixed seed moves
    centroids without reshuffling the noise.
    """
    dims = [int(d) for d in dims]
    if M < 1 or C < 2 or n_per_class < 1 or len(dims) != M or any(d < 1 for d in dims):
        raise ConfigError(f"invalid generator arguments M={M} C={C} dims={dims} n_per_class={n_per_class}")
    if profile.separability.shape != (M, C):
        raise ConfigError(f"separability shape {profile.separability.shape} != ({M}, {C})")
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    n_per_class = int(n_per_class)
    if n_per_class < 2:
        raise ConfigError("n_per_class must be at least 2 so both splits are nonempty")

    geo_ss, noise_ss, split_ss = np.random.SeedSequence(seed).spawn(3)
    geo_rng = np.random.default_rng(geo_ss)
    noise_rng = np.random.default_rng(noise_ss)
    labels = np.repeat(np.arange(C), n_per_class)
    features = []
    for m in range(M):
        dirs = class_directions(geo_rng, C, dims[m])
        centroids = profile.radius * profile.separability[m][:, None] * dirs
        noise = noise_rng.standard_normal((labels.size, dims[m]))
        sigma = profile.noise_sigma * profile.spread[labels]
        features.append(centroids[labels] + sigma[:, None] * noise)
    train_idx, test_idx = stratified_split(labels, C, train_fraction, np.random.default_rng(split_ss))
    return MultimodalDataset(
        features,
        labels,
        C,
        train_idx,
        test_idx,
        meta={"seed": seed, "generator": "gaussian"},
    )


def complementary_assignment(M: int, C: int, seed: int) -> List[np.ndarray]:
    """Seeded partition of the classes into M equal groups, one per modality."""
    if C % M:
        raise ConfigError(f"C={C} is not divisible by M={M}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(C)
    return [np.sort(perm[m * (C // M):(m + 1) * (C // M)]) for m in range(M)]


def complementary_preset(
    M: int = 3,
    C: int = 6,
    seed: int = 0,
    n_per_class: int = 125,
    dim: int = 16,
    strong: float = 1.0,
    weak: float = 0.25,
    noise_sigma: float = 1.0,
    radius: float = 3.0,
) -> MultimodalDataset:
    """Each modality separates its own group of C/M classes well and the rest poorly."""
    sep = np.full((M, C), weak)
    groups = complementary_assignment(M, C, seed)
    for m, g in enumerate(groups):
        sep[m, g] = strong
    profile = SeparabilityProfile(sep, noise_sigma=noise_sigma, radius=radius)
    ds = generate(M, C, [dim] * M, n_per_class, profile, seed)
    ds.meta.update(preset="complementary", groups=[g.tolist() for g in groups])
    return ds


def fast_modality_preset(
    M: int = 3,
    C: int = 6,
    seed: int = 0,
    n_per_class: int = 125,
    dim: int = 16,
    fast_modality: int = 0,
    fast: float = 0.9,
    slow: float = 0.5,
    noise_sigma: float = 1.0,
    radius: float = 3.0,
) -> MultimodalDataset:
    """One modality is uniformly easier than the others."""
    if not 0 <= fast_modality < M:
        raise ConfigError("fast_modality out of range")
    sep = np.full((M, C), slow)
    sep[fast_modality] = fast
    profile = SeparabilityProfile(sep, noise_sigma=noise_sigma, radius=radius)
    ds = generate(M, C, [dim] * M, n_per_class, profile, seed)
    ds.meta.update(preset="fast-modality", fast_modality=fast_modality)
    return ds


# ------------------------------------------------------------------ MMDS I/O


def dataset_bytes(ds: MultimodalDataset) -> bytes:
    out = [DATASET_MAGIC, struct.pack("<IIII", DATASET_VERSION, ds.M, ds.C, ds.N)]
    out.append(struct.pack(f"<{ds.M}I", *ds.dims))
    feats = [f.astype("<f8") for f in ds.features]
    for i in range(ds.N):
        out.append(struct.pack("<I", int(ds.labels[i])))
        for f in feats:
            out.append(f[i].tobytes())
    for idx in (ds.train_idx, ds.test_idx):
        out.append(struct.pack("<I", idx.size))
        out.append(idx.astype("<u4").tobytes())
    return b"".join(out)


def save(ds: MultimodalDataset, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(buf: bytes) -> MultimodalDataset:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated file while reading {what}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def u32(what):
        return struct.unpack("<I", take(4, what))[0]

    if take(4, "magic") != DATASET_MAGIC:
        raise ParseError("not an MMDS dataset", offset=0)
    version = u32("version")
    if version != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {version}", offset=4)
    m, c, n = u32("M"), u32("C"), u32("N")
    if m < 1 or c < 2:
        raise ParseError(f"invalid header M={m} C={c}", offset=8)
    if n == 0:
        raise ParseError("dataset has no samples", offset=16)
    dims = [u32("dims") for _ in range(m)]
    if any(d < 1 for d in dims):
        raise ParseError("zero feature dimension", offset=20)
    record = 4 + 8 * sum(dims)
    body = take(record * n, "samples")
    dtype = np.dtype([("label", "<u4")] + [(f"x{k}", "<f8", (d,)) for k, d in enumerate(dims)])
    rec = np.frombuffer(body, dtype=dtype, count=n)
    labels = rec["label"].astype(np.int64)
    features = [rec[f"x{k}"].astype(np.float64) for k in range(m)]
    splits = []
    for name in ("train", "test"):
        size = u32(f"{name} split size")
        splits.append(np.frombuffer(take(4 * size, f"{name} split"), dtype="<u4").astype(np.int64))
    if pos != len(buf):
        raise ParseError("trailing bytes after split trailer", offset=pos)
    try:
        return MultimodalDataset(features, labels, c, splits[0], splits[1])
    except ConfigError as exc:
        raise ParseError(f"invalid dataset contents: {exc}", offset=pos) from exc


def load(path) -> MultimodalDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
