"""Per-modality feed-forward classifiers, the ensemble container, SGD with
momentum, and the binary checkpoint format."""

import hashlib
import struct
from typing import List, Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .tensor import Tensor

VARIANTS = ("independent", "smcl", "cmcl", "dmcl", "dmcl-random-teacher")

CHECKPOINT_MAGIC = b"MCLF"
CHECKPOINT_VERSION = 1


class ModalityNetwork:
    """Affine/ReLU stack mapping one modality's features to class logits.

    ``params`` alternates weight (fan_in x fan_out) and bias (fan_out,)
    tensors. ``velocity`` holds one momentum buffer per parameter.
    """

    def __init__(self, modality_id: int, layer_sizes: Sequence[int], params: List[Tensor]):
        self.modality_id = int(modality_id)
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.params = params
        self.velocity = [np.zeros_like(p.data) for p in params]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def weights(self) -> List[Tensor]:
        return self.params[0::2]

    def biases(self) -> List[Tensor]:
        return self.params[1::2]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def copy(self) -> "ModalityNetwork":
        clone = ModalityNetwork(
            self.modality_id,
            self.layer_sizes,
            [Tensor(p.data.copy(), requires_grad=True) for p in self.params],
        )
        clone.velocity = [v.copy() for v in self.velocity]
        return clone

    def digest(self) -> str:
        """Hash of parameters and velocity, for cheap bit-identity checks."""
        h = hashlib.sha256()
        for arr in [p.data for p in self.params] + self.velocity:
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"ModalityNetwork(modality_id={self.modality_id}, layer_sizes={list(self.layer_sizes)})"


def init_network(modality_id: int, layer_sizes: Sequence[int], seed: int) -> ModalityNetwork:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return ModalityNetwork(modality_id, sizes, params)


def _as_batch(net: ModalityNetwork, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.data.ndim == 1:
        x = Tensor(x.data[None, :])
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"modality {net.modality_id} expects {net.input_dim} features, got {x.shape[1]}")
    return x


def _hidden(net: ModalityNetwork, x: Tensor, n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = tn.add_bias(tn.matmul(h, net.params[2 * i]), net.params[2 * i + 1])
        if i < net.n_layers - 1:
            h = tn.relu(h)
    return h


def forward(net: ModalityNetwork, x) -> Tensor:
    """Logits for a batch (rows of ``x``); records a graph unless under no_grad."""
    return _hidden(net, _as_batch(net, x), net.n_layers)


def penultimate_features(net: ModalityNetwork, x) -> Tensor:
    """Post-ReLU activations of the last hidden layer."""
    if net.n_layers < 2:
        raise ContractError("network has no hidden layer")
    return _hidden(net, _as_batch(net, x), net.n_layers - 1)


def sgd_momentum_step(net: ModalityNetwork, lr: float, momentum: float):
    """v <- momentum * v + grad; theta <- theta - lr * v. Consumes the grads."""
    if any(p.grad is None for p in net.params):
        raise ContractError(f"missing gradients for modality {net.modality_id}")
    for i, p in enumerate(net.params):
        v = momentum * net.velocity[i] + p.grad
        net.velocity[i] = v
        p.data = p.data - lr * v
        p.grad = None


class Ensemble:
    """M disjoint modality networks sharing a class count and a training variant."""

    def __init__(self, networks: List[ModalityNetwork], num_classes: int, variant: str = "dmcl"):
        if not networks:
            raise ConfigError("an ensemble needs at least one network")
        if num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if [n.modality_id for n in networks] != list(range(len(networks))):
            raise ConfigError("modality ids must be 0..M-1 in order")
        for n in networks:
            if n.num_classes != num_classes:
                raise ConfigError(f"modality {n.modality_id} outputs {n.num_classes} classes, expected {num_classes}")
        ids = {id(p) for n in networks for p in n.params}
        if len(ids) != sum(len(n.params) for n in networks):
            raise ConfigError("networks must not share parameters")
        self.networks = networks
        self.num_classes = int(num_classes)
        self.variant = variant

    @property
    def M(self) -> int:
        return len(self.networks)

    @property
    def input_dims(self) -> List[int]:
        return [n.input_dim for n in self.networks]

    def __len__(self):
        return len(self.networks)

    def __getitem__(self, m) -> ModalityNetwork:
        return self.networks[m]

    def copy(self) -> "Ensemble":
        return Ensemble([n.copy() for n in self.networks], self.num_classes, self.variant)

    def __repr__(self):
        return f"Ensemble(M={self.M}, C={self.num_classes}, variant={self.variant!r})"


def network_seeds(seed: int, m: int) -> List[int]:
    """Independent per-network init seeds derived from one experiment seed."""
    children = np.random.SeedSequence(seed).spawn(m)
    return [int(c.generate_state(1)[0]) for c in children]


def build_ensemble(
    input_dims: Sequence[int],
    num_classes: int,
    hidden: Sequence[int] = (64,),
    variant: str = "dmcl",
    seed: int = 0,
) -> Ensemble:
    seeds = network_seeds(seed, len(input_dims))
    nets = [
        init_network(m, [d, *hidden, num_classes], s)
        for m, (d, s) in enumerate(zip(input_dims, seeds))
    ]
    return Ensemble(nets, num_classes, variant)


# ---------------------------------------------------------------- checkpoint


def checkpoint_bytes(ensemble: Ensemble) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, ensemble.M, ensemble.num_classes)]
    for net in ensemble.networks:
        out.append(struct.pack("<II", net.modality_id, net.n_layers))
        for w, b in zip(net.weights(), net.biases()):
            rows, cols = w.shape
            out.append(struct.pack("<II", rows, cols))
            out.append(w.data.astype("<f8").tobytes(order="C"))
            out.append(b.data.astype("<f8").tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(ensemble: Ensemble, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ensemble))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def checkpoint_from_bytes(buf: bytes, variant: str = "dmcl") -> Ensemble:
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("not an MCLF checkpoint", offset=0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    m = r.u32("M")
    c = r.u32("C")
    nets = []
    for _ in range(m):
        mid = r.u32("modality id")
        n_layers = r.u32("layer count")
        if n_layers < 1:
            raise ParseError("network with zero layers", offset=r.pos - 4)
        params, sizes = [], []
        for _ in range(n_layers):
            start = r.pos
            rows = r.u32("rows")
            cols = r.u32("cols")
            if rows < 1 or cols < 1 or (sizes and sizes[-1] != rows):
                raise ParseError(f"inconsistent layer shape {rows}x{cols}", offset=start)
            if not sizes:
                sizes.append(rows)
            sizes.append(cols)
            params.append(Tensor(r.f64(rows * cols, "weights").reshape(rows, cols), requires_grad=True))
            params.append(Tensor(r.f64(cols, "biases"), requires_grad=True))
        nets.append(ModalityNetwork(mid, sizes, params))
    if r.pos != len(buf):
        raise ParseError("trailing bytes after checkpoint", offset=r.pos)
    try:
        return Ensemble(nets, c, variant)
    except ConfigError as exc:
        raise ParseError(f"invalid checkpoint contents: {exc}", offset=r.pos) from exc


def load_checkpoint(path, variant: str = "dmcl") -> Ensemble:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), variant)


def parameter_vector(net: ModalityNetwork, include_velocity: bool = False) -> np.ndarray:
    arrays = [p.data.reshape(-1) for p in net.params]
    if include_velocity:
        arrays += [v.reshape(-1) for v in net.velocity]
    return np.concatenate(arrays)

