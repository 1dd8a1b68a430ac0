"""Recurrent parameter generators: many layers' kernels from one shared ring."""

from .config import ModelConfig, LayerSpec, micro_resnet, tiny_net
from .ring import (GeneratorBinding, IndexPlan, ParameterRing, RingGenerator,
                   assign_rings, build_index_plan, generate_kernel, init_ring,
                   scatter_gradient)

__version__ = "0.1.0"
