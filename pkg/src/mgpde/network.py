"""Resolution-agnostic U-Net mapping a diffusivity field to a solution field.

Encoder level ``i`` runs conv -> batch norm -> LeakyReLU at ``N / 2**i`` and
keeps the result as a skip; a 2x mean pool moves to the next level. Each
decoder level upsamples with a stride-2 transpose conv, concatenates the skip
and merges with a conv. A final conv + sigmoid gives one output channel.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .functional import BNState, Reducer
from .tensor import ShapeError, Tensor, as_tensor, concat, leaky_relu, log, sigmoid


class AdaptationError(ValueError):
    pass


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 3
    base_filters: int = 16
    spatial_rank: int = 2
    leaky_slope: float = 0.01
    kernel_size: int = 3
    # parameter-free preprocessing of the diffusivity input
    input_transform: str = "log"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.input_transform not in ("log", "none"):
            raise ValueError(f"input_transform must be 'log' or 'none', got {self.input_transform!r}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def min_extent(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "conv" or "convT"
    cin: int
    cout: int
    stride: int = 1
    norm: bool = True  # batch norm + LeakyReLU; False means the sigmoid output layer

    def param_shapes(self, k: int, rank: int) -> list[tuple[str, tuple[int, ...]]]:
        ks = (k,) * rank
        kshape = (self.cout, self.cin) + ks if self.kind == "conv" else (self.cin, self.cout) + ks
        shapes = [(f"{self.name}.weight", kshape), (f"{self.name}.bias", (self.cout,))]
        if self.norm:
            shapes += [(f"{self.name}.bn.gamma", (self.cout,)), (f"{self.name}.bn.beta", (self.cout,))]
        return shapes


@dataclass
class Architecture:
    encoder: list[Layer]
    up: list[list[Layer]]  # indexed by level; up[0] feeds the finest merge
    merge: list[Layer]
    out: Layer

    def walk(self) -> list[Layer]:
        """Layers in declaration (parameter) order."""
        layers = list(self.encoder)
        for lvl in reversed(range(len(self.merge))):
            layers += self.up[lvl]
            layers.append(self.merge[lvl])
        layers.append(self.out)
        return layers

    def to_json(self) -> dict:
        return {
            "encoder": [asdict(l) for l in self.encoder],
            "up": [[asdict(l) for l in blk] for blk in self.up],
            "merge": [asdict(l) for l in self.merge],
            "out": asdict(self.out),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        return cls(
            [Layer(**l) for l in d["encoder"]],
            [[Layer(**l) for l in blk] for blk in d["up"]],
            [Layer(**l) for l in d["merge"]],
            Layer(**d["out"]),
        )


def base_architecture(spec: UNetSpec) -> Architecture:
    D = spec.depth
    enc = [Layer(f"enc{i}", "conv", 1 if i == 0 else spec.filters(i - 1), spec.filters(i)) for i in range(D)]
    up, merge = [], []
    for i in range(D):
        below = spec.filters(D - 1) if i == D - 1 else spec.filters(i + 1)
        up.append([Layer(f"up{i}.0", "convT", below, spec.filters(i), stride=2)])
        merge.append(Layer(f"merge{i}", "conv", 2 * spec.filters(i), spec.filters(i)))
    out = Layer("out", "conv", spec.filters(0), 1, norm=False)
    return Architecture(enc, up, merge, out)


@dataclass
class ModelState:
    spec: UNetSpec
    arch: Architecture
    params: dict[str, Tensor]
    bn: dict[str, BNState]
    history: list[dict] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names()]

    def param_names(self) -> list[str]:
        k, r = self.spec.kernel_size, self.spec.spatial_rank
        return [n for layer in self.arch.walk() for n, _ in layer.param_shapes(k, r)]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        off = 0
        for p in self.parameters():
            p.data = np.array(flat[off : off + p.size]).reshape(p.shape)
            off += p.size

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def bn_names(self) -> list[str]:
        return [l.name for l in self.arch.walk() if l.norm]

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(
            {"spec": asdict(self.spec), "arch": self.arch.to_json()},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def copy(self) -> "ModelState":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        bn = {n: s.copy() for n, s in self.bn.items()}
        return ModelState(self.spec, copy.deepcopy(self.arch), params, bn, copy.deepcopy(self.history))


def _init_layer(layer: Layer, spec: UNetSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    k, r = spec.kernel_size, spec.spatial_rank
    out = {}
    gain = np.sqrt(2.0 / (1.0 + spec.leaky_slope**2))
    for name, shape in layer.param_shapes(k, r):
        if name.endswith(".weight"):
            fan_in = layer.cin * k**r
            bound = gain * np.sqrt(3.0 / fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            out[name] = np.ones(shape)
        else:
            out[name] = np.zeros(shape)
    return out


def build(spec: UNetSpec, seed: int = 0) -> ModelState:
    """Fresh model: Kaiming-uniform kernels, zero biases, unit/zero BN affine."""
    arch = base_architecture(spec)
    rng = np.random.default_rng(seed)
    params, bn = {}, {}
    for layer in arch.walk():
        for n, a in _init_layer(layer, spec, rng).items():
            params[n] = Tensor(a, requires_grad=True, name=n)
        if layer.norm:
            bn[layer.name] = BNState.fresh(layer.cout)
    return ModelState(spec, arch, params, bn, [{"event": "build", "seed": seed}])


def adapt(state: ModelState, seed: int) -> ModelState:
    """Deepen the finest decoder level.

    The last transpose conv of the finest up block is removed and replaced by
    (conv, stride-1 transpose conv, transpose conv with the removed stride), so
    output shapes are unchanged. All other layers keep their weights.
    """
    if state.spec.depth < 2:
        raise AdaptationError("adaptation needs depth >= 2; a depth-1 net has no decoder level to deepen")
    new = state.copy()
    block = new.arch.up[0]
    removed = block[-1]
    if removed.kind != "convT":
        raise AdaptationError(f"expected a transpose conv at the end of the finest up block, found {removed.kind}")
    serial = sum(1 for h in state.history if h.get("event") == "adapt") + 1
    F0 = state.spec.filters(0)
    added = [
        Layer(f"up0.a{serial}.conv", "conv", removed.cin, F0),
        Layer(f"up0.a{serial}.tconv1", "convT", F0, F0, stride=1),
        Layer(f"up0.a{serial}.tconv2", "convT", F0, removed.cout, stride=removed.stride),
    ]
    new.arch.up[0] = block[:-1] + added
    for n, _ in removed.param_shapes(state.spec.kernel_size, state.spec.spatial_rank):
        del new.params[n]
    new.bn.pop(removed.name, None)
    rng = np.random.default_rng(seed)
    for layer in added:
        for n, a in _init_layer(layer, state.spec, rng).items():
            new.params[n] = Tensor(a, requires_grad=True, name=n)
        new.bn[layer.name] = BNState.fresh(layer.cout)
    new.history.append(
        {"event": "adapt", "seed": seed, "removed": removed.name, "added": [l.name for l in added]}
    )
    return new


def check_input(spec: UNetSpec, shape: tuple[int, ...]) -> None:
    r = spec.spatial_rank
    if len(shape) != 2 + r:
        raise ShapeError(f"expected input of rank {2 + r} (batch, channel, spatial...), got shape {shape}")
    if shape[1] != 1:
        raise ShapeError(f"expected 1 input channel, got {shape[1]}")
    sp = shape[2:]
    if len(set(sp)) != 1:
        raise ShapeError(f"spatial extents must be equal, got {sp}")
    n = sp[0]
    if n & (n - 1) or n < spec.min_extent:
        raise ShapeError(
            f"spatial extent {n} must be a power of two >= {spec.min_extent} for depth {spec.depth}"
        )


def _apply(layer: Layer, x: Tensor, state: ModelState, training: bool, reducer: Reducer | None) -> Tensor:
    p = state.params
    k = state.spec.kernel_size
    pad = (k - 1) // 2
    w, b = p[f"{layer.name}.weight"], p[f"{layer.name}.bias"]
    if layer.kind == "conv":
        y = F.conv(x, w, b, stride=layer.stride, padding=pad)
    else:
        y = F.conv_transpose(x, w, b, stride=layer.stride, padding=pad, output_padding=layer.stride - 1)
    if not layer.norm:
        return y
    y = F.batchnorm(
        y, p[f"{layer.name}.bn.gamma"], p[f"{layer.name}.bn.beta"], state.bn[layer.name],
        training=training, momentum=state.spec.bn_momentum, reducer=reducer,
    )
    return leaky_relu(y, state.spec.leaky_slope)


def forward(state: ModelState, nu_batch, training: bool = False, reducer: Reducer | None = None) -> Tensor:
    """Predict interior solution values in (0, 1), same shape as ``nu_batch``."""
    x = as_tensor(nu_batch)
    check_input(state.spec, x.shape)
    if state.spec.input_transform == "log":
        x = log(x)
    arch = state.arch
    skips = []
    for layer in arch.encoder:
        x = _apply(layer, x, state, training, reducer)
        skips.append(x)
        x = F.downsample2(x, "mean")
    for lvl in reversed(range(len(arch.merge))):
        for layer in arch.up[lvl]:
            x = _apply(layer, x, state, training, reducer)
        skip = skips[lvl]
        if x.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"skip mismatch at level {lvl}: decoder {x.shape[2:]} vs encoder {skip.shape[2:]}")
        x = concat([x, skip], axis=1)
        x = _apply(arch.merge[lvl], x, state, training, reducer)
    return sigmoid(_apply(arch.out, x, state, training, reducer))


CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(state: ModelState, path: str | Path, extra: dict | None = None) -> None:
    """Header JSON, then little-endian float64 parameters in declaration order, then BN stats."""
    names = state.param_names()
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(state.spec),
        "fingerprint": state.fingerprint,
        "adaptation_history": state.history,
        "architecture": state.arch.to_json(),
        "parameters": [[n, list(state.params[n].shape)] for n in names],
        "bn_layers": state.bn_names(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [np.ascontiguousarray(state.params[n].data, dtype="<f8").tobytes() for n in names]
    for n in state.bn_names():
        parts.append(np.ascontiguousarray(state.bn[n].mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(state.bn[n].var, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    from .fieldio import FormatError

    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    required = {"version", "spec", "fingerprint", "adaptation_history", "architecture", "parameters", "bn_layers"}
    if not isinstance(header, dict) or required - set(header):
        missing = sorted(required - set(header)) if isinstance(header, dict) else sorted(required)
        raise FormatError(f"{path}: header missing {missing}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    try:
        spec = UNetSpec(**header["spec"])
        arch = Architecture.from_json(header["architecture"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if len(raw) < 8 + hlen or (len(raw) - 8 - hlen) % 8:
        raise FormatError(f"{path}: truncated payload")
    buf = np.frombuffer(raw, dtype="<f8", offset=8 + hlen)
    need = sum(int(np.prod(s)) for _, s in header["parameters"])
    need += sum(2 * l.cout for l in arch.walk() if l.norm)
    if buf.size != need:
        raise FormatError(f"{path}: payload has {buf.size} values, expected {need}")
    off = 0
    params = {}
    for n, s in header["parameters"]:
        size = int(np.prod(s))
        params[n] = Tensor(buf[off : off + size].astype(np.float64).reshape(s), requires_grad=True, name=n)
        off += size
    bn = {}
    couts = {l.name: l.cout for l in arch.walk()}
    for n in header["bn_layers"]:
        c = couts[n]
        bn[n] = BNState(buf[off : off + c].astype(np.float64), buf[off + c : off + 2 * c].astype(np.float64))
        off += 2 * c
    state = ModelState(spec, arch, params, bn, header["adaptation_history"])
    if state.fingerprint != header["fingerprint"]:
        raise FormatError(f"{path}: fingerprint mismatch")
    return state, header.get("extra", {})
