"""Architecture descriptions shared by the ring machinery and the network.

A model is a flat list of :class:`LayerSpec` executed in order.  Each layer
reads the previous layer's output; ``residual_add`` additionally adds the
output of the layer named in ``src``.
"""

from dataclasses import asdict, dataclass, field
from typing import Optional

LAYER_KINDS = (
    "conv2d", "dense", "batchnorm", "relu", "maxpool", "avgpool",
    "residual_add", "flatten",
)
WEIGHTED_KINDS = ("conv2d", "dense")


class ConfigError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False
    generated: bool = False
    block: int = 0
    src: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "batchnorm" and self.generated:
            raise ConfigError(f"{self.name}: batch-norm layers are never generated")
        if self.generated and self.kind not in WEIGHTED_KINDS:
            raise ConfigError(f"{self.name}: only conv2d/dense can be generated")

    @property
    def kernel_shape(self):
        if self.kind == "conv2d":
            k = self.kernel_size
            return (self.out_channels, self.in_channels, k, k)
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        return ()

    @property
    def kernel_size_flat(self):
        n = 1
        for d in self.kernel_shape:
            n *= d
        return n if self.kernel_shape else 0

    @property
    def fan_in(self):
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_size ** 2
        if self.kind == "dense":
            return self.in_channels
        return 0


@dataclass
class ModelConfig:
    arch: str
    in_shape: tuple
    num_classes: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.in_shape = tuple(self.in_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        seen = set()
        for layer in self.layers:
            if layer.kind == "residual_add" and layer.src not in seen:
                raise ConfigError(f"{layer.name}: residual source {layer.src!r} "
                                  "must precede it")
            seen.add(layer.name)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def weighted_layers(self):
        return [l for l in self.layers if l.kind in WEIGHTED_KINDS]

    @property
    def generated_layers(self):
        return [l for l in self.layers if l.generated]

    @property
    def dense_kernel_count(self):
        """Kernel parameters of every generated layer, i.e. the no-sharing size."""
        return sum(l.kernel_size_flat for l in self.generated_layers)

    @property
    def num_blocks(self):
        return len({l.block for l in self.generated_layers})

    def to_dict(self):
        return {
            "arch": self.arch,
            "in_shape": list(self.in_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            arch=d["arch"],
            in_shape=tuple(d["in_shape"]),
            num_classes=d["num_classes"],
            layers=[LayerSpec(**l) for l in d["layers"]],
        )


def _conv_bn_relu(layers, prefix, cin, cout, block, stride=1, relu=True):
    layers.append(LayerSpec(f"{prefix}.conv", "conv2d", cin, cout, 3, stride, 1,
                            generated=True, block=block))
    layers.append(LayerSpec(f"{prefix}.bn", "batchnorm", cout, cout, block=block))
    if relu:
        layers.append(LayerSpec(f"{prefix}.relu", "relu", block=block))


def tiny_net(in_shape=(1, 28, 28), num_classes=10, widths=(8, 16, 16, 32),
             generate_head=True):
    """Four conv-bn-relu stages (max-pool after the 2nd and 4th) and a dense head.

    Every conv stage is its own block, the head joins the last block.
    """
    if len(widths) != 4:
        raise ConfigError("tiny_net takes exactly four widths")
    layers = []
    cin = in_shape[0]
    for i, w in enumerate(widths):
        _conv_bn_relu(layers, f"s{i + 1}", cin, w, block=i)
        if i in (1, 3):
            layers.append(LayerSpec(f"s{i + 1}.pool", "maxpool", kernel_size=2,
                                    stride=2, block=i))
        cin = w
    h = in_shape[1] // 4
    w_ = in_shape[2] // 4
    layers.append(LayerSpec("gap", "avgpool", kernel_size=min(h, w_),
                            stride=min(h, w_), block=3))
    layers.append(LayerSpec("flatten", "flatten", block=3))
    layers.append(LayerSpec("head", "dense", cin, num_classes, bias=True,
                            generated=generate_head, block=3))
    return ModelConfig("tiny", in_shape, num_classes, layers)


def micro_resnet(in_shape=(3, 32, 32), num_classes=10, widths=(16, 32, 64),
                 generate_head=True):
    """Stem conv plus three two-conv residual blocks and a dense head.

    Blocks after the first open with a stride-2 conv-bn-relu so the residual
    pair always adds tensors of equal shape.  The stem belongs to block 0 and
    the head to the last block.
    """
    if len(widths) != 3:
        raise ConfigError("micro_resnet takes exactly three widths")
    layers = []
    _conv_bn_relu(layers, "stem", in_shape[0], widths[0], block=0)
    entry = "stem.relu"
    cin = widths[0]
    h, w = in_shape[1], in_shape[2]
    for b, width in enumerate(widths):
        p = f"b{b + 1}"
        if b > 0:
            _conv_bn_relu(layers, f"{p}.down", cin, width, block=b, stride=2)
            entry = f"{p}.down.relu"
            h, w = (h + 1) // 2, (w + 1) // 2
        _conv_bn_relu(layers, f"{p}.c1", width, width, block=b)
        _conv_bn_relu(layers, f"{p}.c2", width, width, block=b, relu=False)
        layers.append(LayerSpec(f"{p}.add", "residual_add", block=b, src=entry))
        layers.append(LayerSpec(f"{p}.out", "relu", block=b))
        entry = f"{p}.out"
        cin = width
    last = len(widths) - 1
    layers.append(LayerSpec("gap", "avgpool", kernel_size=h, stride=h, block=last))
    layers.append(LayerSpec("flatten", "flatten", block=last))
    layers.append(LayerSpec("head", "dense", cin, num_classes, bias=True,
                            generated=generate_head, block=last))
    return ModelConfig("micro_resnet", in_shape, num_classes, layers)


ARCHITECTURES = {"tiny": tiny_net, "micro_resnet": micro_resnet}


def build_config(arch, in_shape, num_classes=10, widths=None, generate_head=True):
    try:
        builder = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}") from None
    kwargs = {"generate_head": generate_head}
    if widths is not None:
        kwargs["widths"] = tuple(widths)
    return builder(in_shape, num_classes, **kwargs)
