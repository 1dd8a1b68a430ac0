"""Helpers tying configs, rings and networks together for the CLI and tests."""

import numpy as np

from .config import build_config
from .nn.model import Network
from .ring import RingGenerator


def parse_ring_size(text):
    """``"4500"`` -> 4500, ``"25%"`` -> 0.25, ``"0.25"`` -> 0.25."""
    if isinstance(text, (int, float)):
        return text
    text = str(text).strip()
    if text.endswith("%"):
        return float(text[:-1]) / 100.0
    if any(c in text for c in ".eE"):
        return float(text)
    return int(text)


def build_model(arch, in_shape, num_classes=10, ring_size=1.0, grouping="global",
                mode="perm+sign", seed=0, precision=32, widths=None,
                generate_head=True, scale=True):
    config = build_config(arch, in_shape, num_classes, widths, generate_head)
    dtype = np.float32 if precision == 32 else np.float64
    gen = RingGenerator.build(config, grouping=grouping, ring_sizes=ring_size,
                              seed=seed, mode=mode, scale=scale, dtype=dtype)
    return Network(config, gen, dtype=dtype, seed=seed)


def conventional_copy(model):
    """Same architecture with every kernel owned, initialized to ``model``'s kernels."""
    kernels = {k: v.copy() for k, v in model.kernels().items()}
    base = Network(model.config, None, kernels, dtype=model.dtype)
    for name, st in model.bn.items():
        other = base.bn[name]
        other.gamma.data[:] = st.gamma.data
        other.beta.data[:] = st.beta.data
        other.running_mean[:] = st.running_mean
        other.running_var[:] = st.running_var
    for name, p in model.biases.items():
        base.biases[name].data[:] = p.data
    return base
