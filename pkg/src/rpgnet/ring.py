"""Parameter rings and the gather/scatter machinery that generates kernels.

A ring ``W`` of length ``N`` feeds every bound layer.  Layer ``i`` reads the
slice ``u[offset:offset + N_i]`` of an evenly sampled index array ``u`` and
applies a per-layer sign reflection and scale::

    K_i[j] = g_i * s_j * W[u[offset + j]]

The gradient of ``W`` is the sum over layers of the transposed map applied
to each kernel gradient.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import detrand
from .config import ConfigError

MODES = {
    "perm+sign": (True, True),
    "perm": (True, False),
    "sign": (False, True),
    "none": (False, False),
}

# Sub-seed layout under one master seed.  Ring r lives in its own 2**32 lane;
# layer sign seeds follow master + 2 + global layer index.
RING_LANE = 1 << 32
INIT_OFFSET = 1 << 31


@dataclass
class ParameterRing:
    id: int
    size: int
    values: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("ring size must be >= 1")
        if self.values.shape != (self.size,):
            raise ValueError(f"ring {self.id}: expected {self.size} values, "
                             f"got shape {self.values.shape}")


@dataclass
class IndexPlan:
    ring_id: int
    total: int
    indices: np.ndarray
    offsets: dict
    shuffle_seed: int
    extra_seed: int
    ring_size: int = 0

    def counts(self):
        return np.bincount(self.indices, minlength=self.ring_size)


@dataclass
class GeneratorBinding:
    layer_id: str
    ring_id: int
    offset: int
    length: int
    sign_seed: int
    scale: float = 1.0
    perm_on: bool = True
    sign_on: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"{self.layer_id}: scale must be positive")


def build_index_plan(ring_size, layer_sizes, shuffle_seed, extra_seed,
                     layer_ids=None, ring_id=0):
    """Even-sampling index array for ``layer_sizes`` drawn from a ring.

    ``floor(M / N)`` full copies of ``range(N)`` are followed by ``M mod N``
    distinct extras (without replacement, from ``extra_seed``); the whole
    array is then shuffled with ``shuffle_seed`` and cut into contiguous
    per-layer slices in declaration order.
    """
    if ring_size < 1:
        raise ValueError("ring size must be >= 1")
    layer_sizes = [int(n) for n in layer_sizes]
    if not layer_sizes:
        raise ValueError("at least one layer is required")
    if any(n < 1 for n in layer_sizes):
        raise ValueError("layer sizes must be >= 1")
    if layer_ids is None:
        layer_ids = list(range(len(layer_sizes)))
    if len(layer_ids) != len(layer_sizes):
        raise ValueError("layer_ids and layer_sizes differ in length")

    total = sum(layer_sizes)
    copies, extra = divmod(total, ring_size)
    base = np.arange(ring_size, dtype=np.int64)
    parts = [base] * copies
    if extra:
        parts.append(detrand.shuffle(base, extra_seed)[:extra])
    u = detrand.shuffle(np.concatenate(parts), shuffle_seed)

    offsets = {}
    pos = 0
    for lid, n in zip(layer_ids, layer_sizes):
        offsets[lid] = pos
        pos += n
    return IndexPlan(ring_id, total, u, offsets, shuffle_seed, extra_seed,
                     ring_size)


def _check_binding(ring, b, plan):
    if b.ring_id != ring.id or plan.ring_id != ring.id:
        raise ValueError(f"{b.layer_id}: binding/plan/ring ids disagree")
    if b.offset < 0 or b.length < 1 or b.offset + b.length > plan.total:
        raise ValueError(f"{b.layer_id}: slice [{b.offset}, {b.offset + b.length})"
                         f" outside plan of length {plan.total}")


def gather_indices(b, plan, ring_size):
    """Ring index read by each kernel element of binding ``b``."""
    if b.perm_on:
        return plan.indices[b.offset:b.offset + b.length]
    return np.arange(b.offset, b.offset + b.length, dtype=np.int64) % ring_size


def coefficients(b, dtype):
    """Per-element multiplier ``g * s`` in the ring's dtype."""
    if b.sign_on:
        coef = b.scale * detrand.signs(b.sign_seed, b.length)
    else:
        coef = np.full(b.length, b.scale)
    return coef.astype(dtype)


def generate_kernel(ring, b, plan):
    """Flat kernel ``K = g * s * W[u[offset:offset + N_i]]``; ``W`` is not touched."""
    _check_binding(ring, b, plan)
    idx = gather_indices(b, plan, ring.size)
    return coefficients(b, ring.values.dtype) * ring.values[idx]


def scatter_gradient(grad_k, b, plan, grad_w):
    """Accumulate ``R_i^T grad_k`` into ``grad_w`` in place and return it."""
    grad_k = np.asarray(grad_k).reshape(-1)
    if grad_k.shape[0] != b.length:
        raise ValueError(f"{b.layer_id}: gradient has {grad_k.shape[0]} elements, "
                         f"binding expects {b.length}")
    if b.offset + b.length > plan.total:
        raise ValueError(f"{b.layer_id}: binding outside plan")
    idx = gather_indices(b, plan, grad_w.shape[0])
    contrib = coefficients(b, grad_w.dtype) * grad_k
    grad_w += np.bincount(idx, weights=contrib,
                          minlength=grad_w.shape[0]).astype(grad_w.dtype)
    return grad_w


def init_ring(ring, scheme="normal", seed=None):
    """Fill ``ring.values`` in place with i.i.d. N(0, 1) samples.

    Kaiming fan-in scaling is carried by each binding's ``scale``, so the
    ring itself is always unit variance.
    """
    if scheme != "normal":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if seed is None:
        seed = ring.init_seed
    ring.init_seed = seed
    ring.values[:] = detrand.normal(seed, ring.size).astype(ring.values.dtype)
    return ring


def _resolve_groups(config, grouping):
    layers = config.generated_layers
    if grouping == "global":
        return {l.name: 0 for l in layers}
    if grouping in ("block", "per_block"):
        blocks = sorted({l.block for l in layers})
        rank = {b: i for i, b in enumerate(blocks)}
        return {l.name: rank[l.block] for l in layers}
    if isinstance(grouping, dict):
        names = {l.name for l in layers}
        unknown = set(grouping) - names
        if unknown:
            raise ConfigError(f"grouping names unknown layers: {sorted(unknown)}")
        missing = names - set(grouping)
        if missing:
            raise ConfigError(f"layers not assigned to any ring: {sorted(missing)}")
        for name, g in grouping.items():
            if isinstance(g, (list, tuple, set)):
                raise ConfigError(f"{name}: assigned to {len(g)} rings, need one")
        labels = sorted(set(grouping.values()), key=str)
        rank = {g: i for i, g in enumerate(labels)}
        return {l.name: rank[grouping[l.name]] for l in layers}
    raise ConfigError(f"unknown grouping {grouping!r}")


def _resolve_size(spec, group_total):
    if isinstance(spec, float):
        if not 0 < spec:
            raise ConfigError("ring fraction must be positive")
        return max(1, int(round(spec * group_total)))
    n = int(spec)
    if n < 1:
        raise ConfigError("ring size must be >= 1")
    return n


def assign_rings(config, grouping="global", ring_sizes=1.0, seed=0,
                 mode="perm+sign", scale=True, dtype=np.float32):
    """Create rings, index plans and bindings for every generated layer.

    ``ring_sizes`` is an int (absolute), a float (fraction of the group's
    kernel count) or a list with one such entry per group.  Returns
    ``(rings, plans, bindings)`` with bindings keyed by layer name in layer
    order.  Rings are initialized from their lane's init seed.
    """
    try:
        perm_on, sign_on = MODES[mode]
    except KeyError:
        raise ConfigError(f"unknown mode {mode!r}") from None
    group_of = _resolve_groups(config, grouping)
    n_groups = max(group_of.values()) + 1 if group_of else 0
    if n_groups == 0:
        raise ConfigError("model has no generated layers")
    if isinstance(ring_sizes, (list, tuple)):
        if len(ring_sizes) != n_groups:
            raise ConfigError(f"{len(ring_sizes)} ring sizes for {n_groups} groups")
        size_specs = list(ring_sizes)
    else:
        size_specs = [ring_sizes] * n_groups

    layer_index = {l.name: i for i, l in enumerate(config.layers)}
    members = [[] for _ in range(n_groups)]
    for layer in config.generated_layers:
        members[group_of[layer.name]].append(layer)

    rings, plans, bindings = [], [], {}
    for r, group in enumerate(members):
        if not group:
            raise ConfigError(f"ring group {r} is empty")
        lane = detrand.derive_seed(seed, r * RING_LANE)
        sizes = [l.kernel_size_flat for l in group]
        n = _resolve_size(size_specs[r], sum(sizes))
        ring = ParameterRing(r, n, np.zeros(n, dtype=dtype),
                             detrand.derive_seed(lane, INIT_OFFSET))
        init_ring(ring)
        plan = build_index_plan(n, sizes, lane, detrand.derive_seed(lane, 1),
                                [l.name for l in group], ring_id=r)
        rings.append(ring)
        plans.append(plan)
    for layer in config.generated_layers:
        r = group_of[layer.name]
        g = math.sqrt(2.0 / layer.fan_in) if scale else 1.0
        bindings[layer.name] = GeneratorBinding(
            layer.name, r, plans[r].offsets[layer.name], layer.kernel_size_flat,
            detrand.derive_seed(seed, 2 + layer_index[layer.name]), g,
            perm_on, sign_on)
    return rings, plans, bindings


@dataclass
class RingGenerator:
    """Rings plus the fixed transforms that produce each bound layer's kernel.

    Gather indices and coefficients are precomputed once; ``W`` itself is
    read fresh on every :meth:`kernels` call.
    """

    rings: list
    plans: list
    bindings: dict
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        self._cache = {}
        for name, b in self.bindings.items():
            ring = self.rings[b.ring_id]
            _check_binding(ring, b, self.plans[b.ring_id])
            self._cache[name] = (gather_indices(b, self.plans[b.ring_id], ring.size),
                                 coefficients(b, ring.values.dtype))

    @classmethod
    def build(cls, config, **kwargs):
        return cls(*assign_rings(config, **kwargs))

    @property
    def dtype(self):
        return self.rings[0].values.dtype

    def kernel(self, name):
        idx, coef = self._cache[name]
        return coef * self.rings[self.bindings[name].ring_id].values[idx]

    def kernels(self):
        return {name: self.kernel(name) for name in self.bindings}

    def scatter(self, kernel_grads):
        """Fresh per-ring gradients from kernel gradients, in binding order."""
        grads = [np.zeros_like(r.values) for r in self.rings]
        for name, b in self.bindings.items():
            g = np.asarray(kernel_grads[name]).reshape(-1)
            if g.shape[0] != b.length:
                raise ValueError(f"{name}: gradient length {g.shape[0]} != {b.length}")
            idx, coef = self._cache[name]
            grads[b.ring_id] += np.bincount(
                idx, weights=coef * g, minlength=grads[b.ring_id].shape[0]
            ).astype(grads[b.ring_id].dtype)
        return grads

    def apply_masks(self):
        for rid, mask in self.masks.items():
            self.rings[rid].values[mask] = 0

    @property
    def size(self):
        return sum(r.size for r in self.rings)
