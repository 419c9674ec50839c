"""Network architectures, head/body/tail splitting, and inversion-network mirroring."""
import copy
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError


class NetworkSpec(tc.Sequential):
    """A classifier with named cut points.

    ``cuts`` maps a name (``"B2"``, ``"RB1"``...) to the index of the first
    layer after that block; ``boundaries`` is the set of indices where a cut
    may legally fall.
    """

    def __init__(self, layers, input_shape, classes, cuts=None, boundaries=None):
        super().__init__(layers, input_shape)
        if self.output_shape != (classes,):
            raise ShapeError(f"network output {self.output_shape} != ({classes},)", got=self.output_shape)
        self.classes = classes
        self.cuts = dict(cuts or {})
        self.boundaries = set(boundaries) if boundaries is not None else set(range(1, len(self.layers)))


def _check_image_shape(input_shape, min_side):
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must be (C, H, W), got {tuple(input_shape)}", got=tuple(input_shape))
    _, h, w = input_shape
    if h < min_side or w < min_side:
        raise ShapeError(
            f"input {tuple(input_shape)} too small: need H, W >= {min_side}",
            got=tuple(input_shape), minimum=min_side,
        )


def build_convnet(input_shape, classes, rng=None, widths=(8, 16, 32, 32), hidden=64):
    """Four conv->relu blocks (max-pool after blocks 2 and 4), then a dense classifier.

    Cut names ``B1``..``B4`` mark block ends; ``RB1``..``RB3`` alias ``B1``..``B3``
    so head-depth sweeps address both architectures the same way.
    """
    _check_image_shape(input_shape, 8)
    if rng is None:
        rng = np.random.default_rng(0)
    c, h, w = input_shape
    w1, w2, w3, w4 = widths
    layers = [
        tc.Conv2d(c, w1, 3, 1, 1, rng=rng), tc.ReLU(),
        tc.Conv2d(w1, w2, 3, 1, 1, rng=rng), tc.ReLU(), tc.MaxPool2d(2),
        tc.Conv2d(w2, w3, 3, 1, 1, rng=rng), tc.ReLU(),
        tc.Conv2d(w3, w4, 3, 1, 1, rng=rng), tc.ReLU(), tc.MaxPool2d(2),
        tc.Flatten(),
        tc.Dense(w4 * (h // 4) * (w // 4), hidden, rng=rng), tc.ReLU(),
        tc.Dense(hidden, classes, rng=rng),
    ]
    cuts = {"B1": 2, "B2": 5, "B3": 7, "B4": 10}
    cuts.update({"RB1": 2, "RB2": 5, "RB3": 7})
    return NetworkSpec(layers, input_shape, classes, cuts)


def build_small_resnet(input_shape, classes, blocks=3, rng=None, width=8, hidden=64):
    """Stem + 2 or 3 residual blocks + global average pool + dense classifier."""
    if blocks not in (2, 3):
        raise ConfigError(f"blocks must be 2 or 3, got {blocks}", key="blocks", value=blocks)
    _check_image_shape(input_shape, 8)
    if rng is None:
        rng = np.random.default_rng(0)
    c, h, w = input_shape
    layers = [tc.Conv2d(c, width, 3, 1, 1, rng=rng), tc.BatchNorm2d(width), tc.ReLU()]
    channels = [width, 2 * width, 4 * width][:blocks]
    cuts = {}
    cin = width
    for i, cout in enumerate(channels):
        layers.append(tc.ResidualBlock(cin, cout, stride=1 if i == 0 else 2, rng=rng))
        cuts[f"RB{i + 1}"] = len(layers)
        cin = cout
    spatial = h
    for _ in channels[1:]:
        spatial = (spatial + 1) // 2
    layers += [
        tc.AvgPool2d(spatial),
        tc.Flatten(),
        tc.Dense(cin, hidden, rng=rng), tc.ReLU(),
        tc.Dense(hidden, classes, rng=rng),
    ]
    # cuts inside the stem or inside a block's skip span are not allowed
    boundaries = set(range(3, len(layers)))
    return NetworkSpec(layers, input_shape, classes, cuts, boundaries)


@dataclass(frozen=True)
class SplitSpec:
    head_end: int
    body_end: int

    def validate(self, network):
        n = len(network.layers)
        if not 0 < self.head_end < self.body_end < n:
            raise ConfigError(
                f"need 0 < head_end < body_end < {n}, got {self.head_end}, {self.body_end}",
                head_end=self.head_end, body_end=self.body_end,
            )
        for idx in (self.head_end, self.body_end):
            if idx not in network.boundaries:
                raise ConfigError(
                    f"cut at layer {idx} falls inside a block", index=idx,
                    allowed=sorted(network.boundaries),
                )


def split_at(network, cut):
    """SplitSpec for a named cut; the tail is always the final classifier layer."""
    if cut not in network.cuts:
        raise ConfigError(f"unknown cut {cut!r}; choose from {sorted(network.cuts)}", key="cut", value=cut)
    return SplitSpec(network.cuts[cut], len(network.layers) - 1)


def clone_layers(layers):
    """Deep copies with fresh identities, so caches never cross copies."""
    out = copy.deepcopy(list(layers))
    for layer in out:
        _refresh_uid(layer)
    return out


def _refresh_uid(layer):
    layer.uid = next(tc._uid)
    if isinstance(layer, tc.ResidualBlock):
        for _, child in layer._children():
            _refresh_uid(child)
        _refresh_uid(layer.out_relu)


@dataclass
class SplitModel:
    head: tc.Sequential
    body: tc.Sequential
    tail: tc.Sequential
    spec: SplitSpec
    classes: int

    def forward(self, x, training=False):
        return self.tail(self.body(self.head(x, training), training), training)

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def layers(self):
        return self.head.layers + self.body.layers + self.tail.layers

    def join(self):
        """Reassemble an unsplit network (copies of the current weights)."""
        layers = clone_layers(self.layers())
        return NetworkSpec(layers, self.head.input_shape, self.classes)

    def segments(self):
        return {"head": self.head, "body": self.body, "tail": self.tail}

    def state_dict(self):
        return {f"{seg}.{k}": v for seg, net in self.segments().items() for k, v in net.state_dict().items()}

    def load_state_dict(self, state):
        for seg, net in self.segments().items():
            prefix = seg + "."
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def clone(self):
        return SplitModel(
            tc.Sequential(clone_layers(self.head.layers), self.head.input_shape),
            tc.Sequential(clone_layers(self.body.layers), self.body.input_shape),
            tc.Sequential(clone_layers(self.tail.layers), self.tail.input_shape),
            self.spec, self.classes,
        )


def split(network, spec):
    """Partition ``network`` into head/body/tail copies carrying the same weights."""
    if isinstance(spec, str):
        spec = split_at(network, spec)
    spec.validate(network)
    layers = clone_layers(network.layers)
    head = tc.Sequential(layers[:spec.head_end], network.input_shape)
    body = tc.Sequential(layers[spec.head_end:spec.body_end], head.output_shape)
    tail = tc.Sequential(layers[spec.body_end:], body.output_shape)
    return SplitModel(head, body, tail, spec, network.classes)


def _mirror(layer, rng):
    """Transposed convs (in forward order of the inversion) undoing ``layer``'s resampling."""
    if isinstance(layer, tc.Conv2d):
        return [_transpose_of(layer.in_shape, layer.cin, layer.cout, layer.k, layer.stride, layer.padding, rng)]
    if isinstance(layer, (tc.MaxPool2d, tc.AvgPool2d)):
        c = layer.in_shape[0]
        return [_transpose_of(layer.in_shape, c, c, layer.k, layer.stride, 0, rng)]
    if isinstance(layer, tc.ResidualBlock):
        convs = [child for name, child in layer.main if isinstance(child, tc.Conv2d)]
        return [t for conv in reversed(convs) for t in _mirror(conv, rng)]
    if isinstance(layer, (tc.ReLU, tc.BatchNorm2d, tc.Sigmoid)):
        return []
    raise ShapeError(f"cannot mirror layer kind {layer.kind!r} ({layer.name})", layer=layer.name, kind=layer.kind)


def _transpose_of(in_shape, cin, cout, k, stride, padding, rng):
    _, h, _ = in_shape
    out_h = (h + 2 * padding - k) // stride + 1
    output_padding = h - ((out_h - 1) * stride - 2 * padding + k)
    return tc.ConvTranspose2d(cout, cin, k, stride, padding, output_padding, rng=rng)


def build_inversion(head, rng=None):
    """Mirror of ``head`` mapping smashed data back to images in [0, 1]."""
    if len(head.input_shape) != 3:
        raise ShapeError(f"head input must be an image (C, H, W), got {head.input_shape}", got=head.input_shape)
    if rng is None:
        rng = np.random.default_rng(0)
    tconvs = [t for layer in reversed(head.layers) for t in _mirror(layer, rng)]
    if not tconvs:
        raise ShapeError("head has no convolution or pooling layer to invert")
    layers = []
    for i, t in enumerate(tconvs):
        if i:
            layers.append(tc.ReLU())
        layers.append(t)
    layers.append(tc.Sigmoid())
    net = tc.Sequential(layers, head.output_shape)
    if net.output_shape != head.input_shape:
        raise ShapeError(
            f"inversion output {net.output_shape} does not restore head input {head.input_shape}",
            expected=head.input_shape, got=net.output_shape,
        )
    return net


def client_server_params(model):
    """(client-side, server-side) parameter counts."""
    return model.head.param_count() + model.tail.param_count(), model.body.param_count()
