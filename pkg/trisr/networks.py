"""The three players: generator (theta), critic (psi) and feature extractor (phi)."""

from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from trisr import tensor as T
from trisr.exceptions import CheckpointError, ShapeError
from trisr.schemas import NetworkKind, NetworkSpec, Owner
from trisr.tensor import Tensor

KERNEL = 3

OWNERS = {
    NetworkKind.GENERATOR: Owner.THETA,
    NetworkKind.CRITIC: Owner.PSI,
    NetworkKind.FEATURE_EXTRACTOR: Owner.PHI,
}


class ParameterSet:
    """Named trainable tensors of one player, iterated in sorted-name order."""

    def __init__(self, owner: Owner, dtype=np.float32):
        self.owner = owner
        self.dtype = np.dtype(dtype)
        self._tensors: Dict[str, Tensor] = {}

    def create(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"Duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return sorted(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._tensors[name]) for name in self.names()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._tensors) - set(arrays))
        extra = sorted(set(arrays) - set(self._tensors))
        if missing or extra:
            raise CheckpointError(
                f"{self.owner.value} parameters do not match checkpoint "
                f"(missing: {missing[:3]}, unexpected: {extra[:3]})"
            )
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != parameter shape {t.shape}")
            # In place, so forward closures keep seeing the same Tensor objects
            t.data = arr.astype(self.dtype, copy=True)


class Network(NamedTuple):
    spec: NetworkSpec
    params: ParameterSet
    forward: Callable[[Tensor], Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _add_conv(params: ParameterSet, prefix: str, cin: int, cout: int, k: int = KERNEL) -> None:
    params.create(f"{prefix}.weight", (cout, cin, k, k, k))
    params.create(f"{prefix}.bias", (cout,))


def _conv(params: ParameterSet, prefix: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{prefix}.weight"]
    return T.conv3d(x, w, params[f"{prefix}.bias"], stride=stride, padding=w.shape[-1] // 2)


def _check_input(x: Tensor, in_channels: int, min_size: int, what: str) -> None:
    if x.ndim != 5 or x.shape[1] != in_channels:
        raise ShapeError(f"{what} expects input (N, {in_channels}, D, H, W), got {x.shape}")
    if min(x.shape[2:]) < min_size:
        raise ShapeError(f"{what} needs spatial dims >= {min_size}, got {x.shape[2:]}")


# ---------------------------------------------------------------- generator

def build_generator(spec: NetworkSpec, dtype=np.float32, seed: Optional[int] = None) -> Network:
    """RRDB trunk followed by one x2 sub-pixel stage: (N,1,d,h,w) -> (N,1,2d,2h,2w)."""
    b, g, slope = spec.base_channels, spec.growth_channels, spec.leaky_slope
    params = ParameterSet(Owner.THETA, dtype)

    _add_conv(params, "head", spec.in_channels, b)
    for i in range(spec.num_rrdb):
        for j in range(3):
            for m in range(5):
                _add_conv(params, f"rrdb.{i}.dense.{j}.conv.{m}", b + m * g, b if m == 4 else g)
    _add_conv(params, "trunk", b, b)
    _add_conv(params, "upconv", b, b * spec.scale ** 3)
    _add_conv(params, "tail", b, spec.in_channels)

    def dense_block(x: Tensor, prefix: str) -> Tensor:
        features = [x]
        for m in range(4):
            out = _conv(params, f"{prefix}.conv.{m}", T.concat(features, axis=1))
            features.append(T.leaky_relu(out, slope))
        out = _conv(params, f"{prefix}.conv.4", T.concat(features, axis=1))
        return T.add(x, T.mul(out, spec.res_scale))

    def rrdb(x: Tensor, i: int) -> Tensor:
        out = x
        for j in range(3):
            out = dense_block(out, f"rrdb.{i}.dense.{j}")
        return T.add(x, T.mul(out, spec.res_scale))

    def forward(x: Tensor) -> Tensor:
        _check_input(x, spec.in_channels, 4, "generator")
        feat = _conv(params, "head", x)
        out = feat
        for i in range(spec.num_rrdb):
            out = rrdb(out, i)
        out = T.add(_conv(params, "trunk", out), feat)
        out = T.pixel_shuffle3d(_conv(params, "upconv", out), spec.scale)
        out = T.leaky_relu(out, slope)
        return _conv(params, "tail", out)

    net = Network(spec, params, forward)
    if seed is not None:
        kaiming_init(params, seed, slope)
    return net


# ---------------------------------------------------------------- critic

def build_critic(spec: NetworkSpec, dtype=np.float32, seed: Optional[int] = None) -> Network:
    """Strided conv stages with instance norm, global mean pool, 1x1x1 conv to one logit.

    C emits raw logits; the sigmoid lives in the losses.
    """
    if not spec.stages:
        raise ValueError("critic needs at least one stage")
    params = ParameterSet(Owner.PSI, dtype)
    cin = spec.in_channels
    for i, (channels, _) in enumerate(spec.stages):
        _add_conv(params, f"stage.{i}.conv", cin, channels)
        cin = channels
    _add_conv(params, "logit", cin, 1, k=1)

    def forward(x: Tensor) -> Tensor:
        _check_input(x, spec.in_channels, 2 ** len(spec.stages), "critic")
        dims = x.shape[2:]
        for _, stride in spec.stages:
            dims = tuple(T.conv_output_size(n, KERNEL, stride, KERNEL // 2) for n in dims)
        if int(np.prod(dims)) < 2:
            raise ShapeError(f"critic input {x.shape[2:]} collapses to {dims} before the last norm")

        out = x
        for i, (_, stride) in enumerate(spec.stages):
            out = _conv(params, f"stage.{i}.conv", out, stride=stride)
            out = T.leaky_relu(T.instance_norm(out), spec.leaky_slope)
        out = T.mean(out, axis=(2, 3, 4), keepdims=True)
        out = _conv(params, "logit", out)
        return T.reshape(out, (x.shape[0],))

    net = Network(spec, params, forward)
    if seed is not None:
        kaiming_init(params, seed, spec.leaky_slope)
    return net


# ---------------------------------------------------------------- feature extractor

FE_MIN_SIZE = 16


def build_feature_extractor(spec: NetworkSpec, dtype=np.float32, seed: Optional[int] = None) -> Network:
    """ResNet10 convolutional trunk: stem plus one BasicBlock per stage, no pooling or FC.

    There is no normalization anywhere in the trunk, so features keep the absolute
    intensity scale of the input.
    """
    if not spec.stages:
        raise ValueError("feature extractor needs at least one stage")
    params = ParameterSet(Owner.PHI, dtype)
    c = spec.base_channels
    _add_conv(params, "stem", spec.in_channels, c)

    projected = []
    cin = c
    for i, (channels, stride) in enumerate(spec.stages):
        _add_conv(params, f"layer.{i}.conv.0", cin, channels)
        _add_conv(params, f"layer.{i}.conv.1", channels, channels)
        needs_proj = stride != 1 or cin != channels
        if needs_proj:
            _add_conv(params, f"layer.{i}.downsample", cin, channels, k=1)
        projected.append(needs_proj)
        cin = channels

    def relu(x: Tensor) -> Tensor:
        return T.leaky_relu(x, 0.0)

    def basic_block(x: Tensor, i: int, stride: int) -> Tensor:
        out = relu(_conv(params, f"layer.{i}.conv.0", x, stride=stride))
        out = _conv(params, f"layer.{i}.conv.1", out)
        skip = x
        if projected[i]:
            skip = _conv(params, f"layer.{i}.downsample", x, stride=stride)
        return relu(T.add(out, skip))

    def forward(x: Tensor) -> Tensor:
        _check_input(x, spec.in_channels, FE_MIN_SIZE, "feature extractor")
        out = relu(_conv(params, "stem", x))
        for i, (_, stride) in enumerate(spec.stages):
            out = basic_block(out, i, stride)
        return out

    net = Network(spec, params, forward)
    if seed is not None:
        kaiming_init(params, seed, spec.leaky_slope)
    return net


BUILDERS = {
    NetworkKind.GENERATOR: build_generator,
    NetworkKind.CRITIC: build_critic,
    NetworkKind.FEATURE_EXTRACTOR: build_feature_extractor,
}


def build_network(spec: NetworkSpec, dtype=np.float32, seed: Optional[int] = None) -> Network:
    return BUILDERS[spec.kind](spec, dtype=dtype, seed=seed)


def kaiming_init(params: ParameterSet, seed: int, negative_slope: float = 0.0) -> None:
    """Conv weights ~ N(0, gain / sqrt(Cin * k^3)) with gain sqrt(2 / (1 + a^2)); biases 0."""
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + negative_slope ** 2))
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data = np.zeros(t.shape, dtype=params.dtype)
            continue
        fan_in = int(np.prod(t.shape[1:]))
        std = gain / np.sqrt(fan_in)
        t.data = rng.normal(0.0, std, size=t.shape).astype(params.dtype)
        t.grad = None
