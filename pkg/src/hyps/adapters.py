"""Low-rank adapters around a frozen linear layer.

Supported tuning modes::

    full, linear-probe   Wx + b                      (W, b trainable)
    lora                 Wx + b + s A_up relu(A_down x)
    seqlora              h + s B_up relu(B_down h),   h = Wx + b
    cps                  Wx + b + s_a A_up relu(A_down x) + s_b B_up relu(B_down h)
    pissa                (W_res + P_up P_down) x + b
    hyps                 h + s B_up relu(B_down h),   h = (W_res + P_up P_down) x + b

Up-projections start at zero and down-projections are Kaiming-normal, so every
mode reproduces the base layer at initialisation. The PiSSA factors are the
top-``r`` singular triplets of W with sqrt(sigma) folded into each side; the
frozen residual is built from the remaining (tail) triplets.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigError, ShapeError
from .linalg import as_matrix, kaiming_init, relu, svd


class Variant(str, enum.Enum):
    FULL = "full"
    LINEAR_PROBE = "linear-probe"
    LORA = "lora"
    SEQLORA = "seqlora"
    CPS = "cps"
    PISSA = "pissa"
    HYPS = "hyps"

    @classmethod
    def parse(cls, text) -> "Variant":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "-")
        aliases = {"fulltuning": "full", "full-tuning": "full", "linearprobe": "linear-probe",
                   "linear-probing": "linear-probe", "pissa-only": "pissa"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown variant {text!r}; expected one of {names}") from None

    @property
    def uses_parallel(self) -> bool:
        return self in (Variant.LORA, Variant.CPS)

    @property
    def uses_sequential(self) -> bool:
        return self in (Variant.SEQLORA, Variant.CPS, Variant.HYPS)

    @property
    def uses_split(self) -> bool:
        return self in (Variant.PISSA, Variant.HYPS)

    @property
    def is_peft(self) -> bool:
        return self not in (Variant.FULL, Variant.LINEAR_PROBE)


@dataclass(frozen=True)
class AdapterSpec:
    variant: Variant
    rank_a: int = 8
    rank_b: int | None = None
    scale_a: float = 1.0
    scale_b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.rank_b is None:
            object.__setattr__(self, "rank_b", self.rank_a)
        if self.variant.is_peft:
            for label, r in (("rank_a", self.rank_a), ("rank_b", self.rank_b)):
                if int(r) != r or r < 1:
                    raise ConfigError(f"{label} must be a positive integer, got {r}")

    def check_shape(self, m: int, n: int, layer: str = "layer") -> None:
        if not self.variant.is_peft:
            return
        bound = min(m, n)
        used = []
        if self.variant.uses_parallel or self.variant.uses_split:
            used.append(("rank_a", self.rank_a))
        if self.variant.uses_sequential:
            used.append(("rank_b", self.rank_b))
        for label, r in used:
            if r > bound:
                raise ConfigError(
                    f"{label}={r} exceeds min(m, n)={bound} for {layer} of shape ({m}, {n})"
                )


@dataclass
class LinearLayer:
    w: np.ndarray
    b: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.w = as_matrix(self.w, "weight")
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if b.shape[0] != self.w.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} does not match weight rows {self.w.shape[0]}")
        self.b = b

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


@dataclass
class LoRABranch:
    a_up: Parameter
    a_down: Parameter
    scale: float


@dataclass
class SeqLoRABranch:
    b_up: Parameter
    b_down: Parameter
    scale: float


@dataclass
class PiSSASplit:
    w_pri_up: Parameter
    w_pri_down: Parameter
    w_res: Parameter

    @property
    def rank(self) -> int:
        return self.w_pri_up.value.shape[1]


def split_weight(w, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(pri_up, pri_down, res)`` with ``res`` from the tail triplets."""
    w = as_matrix(w, "weight")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ConfigError(f"split rank {r} outside [1, {min(m, n)}] for weight of shape ({m}, {n})")
    dec = svd(w)
    root = np.sqrt(dec.sigma[:r])
    up = dec.u[:, :r] * root
    down = root[:, None] * dec.v[:, :r].T
    res = (dec.u[:, r:] * dec.sigma[r:]) @ dec.v[:, r:].T
    return up, down, res


def collapse_pissa(split: PiSSASplit) -> np.ndarray:
    """Fold the trained primary factors back into one dense weight."""
    return split.w_res.value + split.w_pri_up.value @ split.w_pri_down.value


@dataclass
class AdaptedLinear:
    name: str
    spec: AdapterSpec
    w: Parameter
    b: Parameter
    lora: LoRABranch | None = None
    seq: SeqLoRABranch | None = None
    pissa: PiSSASplit | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.value.shape

    def parameters(self) -> dict[str, Parameter]:
        out = {"w": self.w, "b": self.b}
        if self.lora is not None:
            out["a_up"] = self.lora.a_up
            out["a_down"] = self.lora.a_down
        if self.seq is not None:
            out["b_up"] = self.seq.b_up
            out["b_down"] = self.seq.b_down
        if self.pissa is not None:
            out["pri_up"] = self.pissa.w_pri_up
            out["pri_down"] = self.pissa.w_pri_down
            out["w_res"] = self.pissa.w_res
        return out

    def forward(self, x) -> np.ndarray:
        """Evaluate on column vectors: ``x`` is (n,) or (n, k)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        m, n = self.shape
        if x.ndim != 2 or x.shape[0] != n:
            raise ShapeError(f"{self.name or 'layer'} expects input with {n} rows, got {x.shape}")
        bias = self.b.value[:, None]
        if self.pissa is not None:
            h = (self.pissa.w_res.value + self.pissa.w_pri_up.value @ self.pissa.w_pri_down.value) @ x + bias
        else:
            h = self.w.value @ x + bias
        out = h
        if self.lora is not None:
            out = out + self.lora.scale * (self.lora.a_up.value @ relu(self.lora.a_down.value @ x))
        if self.seq is not None:
            out = out + self.seq.scale * (self.seq.b_up.value @ relu(self.seq.b_down.value @ h))
        return out[:, 0] if squeeze else out

    def apply(self, tape: ad.Tape, x) -> ad.Var:
        """Row-layout evaluation on a tape: ``x`` is (..., n), result (..., m)."""
        b = tape.param(self.b)
        if self.pissa is not None:
            h = ad.linear(x, tape.param(self.pissa.w_res), b)
            h = h + ad.linear(ad.linear(x, tape.param(self.pissa.w_pri_down)), tape.param(self.pissa.w_pri_up))
        else:
            h = ad.linear(x, tape.param(self.w), b)
        out = h
        if self.lora is not None:
            z = ad.relu(ad.linear(x, tape.param(self.lora.a_down)))
            out = out + ad.scale(ad.linear(z, tape.param(self.lora.a_up)), self.lora.scale)
        if self.seq is not None:
            z = ad.relu(ad.linear(h, tape.param(self.seq.b_down)))
            out = out + ad.scale(ad.linear(z, tape.param(self.seq.b_up)), self.seq.scale)
        return out


def init_adapted(layer: LinearLayer, spec: AdapterSpec, rng: np.random.Generator, name: str = "") -> AdaptedLinear:
    m, n = layer.shape
    spec.check_shape(m, n, name or "layer")
    v = spec.variant
    base_trainable = not v.is_peft
    prefix = f"{name}." if name else ""
    w = Parameter(prefix + "w", layer.w.copy(), base_trainable)
    b = Parameter(prefix + "b", layer.b.copy(), base_trainable)
    out = AdaptedLinear(name=name, spec=spec, w=w, b=b)
    if v.uses_parallel:
        r = spec.rank_a
        out.lora = LoRABranch(
            a_up=Parameter(prefix + "a_up", np.zeros((m, r)), True),
            a_down=Parameter(prefix + "a_down", kaiming_init(r, n, rng), True),
            scale=spec.scale_a,
        )
    if v.uses_split:
        up, down, res = split_weight(layer.w, spec.rank_a)
        out.pissa = PiSSASplit(
            w_pri_up=Parameter(prefix + "pri_up", up, True),
            w_pri_down=Parameter(prefix + "pri_down", down, True),
            w_res=Parameter(prefix + "w_res", res, False),
        )
    if v.uses_sequential:
        r = spec.rank_b
        out.seq = SeqLoRABranch(
            b_up=Parameter(prefix + "b_up", np.zeros((m, r)), True),
            b_down=Parameter(prefix + "b_down", kaiming_init(r, m, rng), True),
            scale=spec.scale_b,
        )
    return out


def layer_trainable_params(m: int, n: int, spec: AdapterSpec) -> int:
    ra, rb = spec.rank_a, spec.rank_b
    v = spec.variant
    if v in (Variant.FULL, Variant.LINEAR_PROBE):
        return m * n + m
    count = 0
    if v.uses_parallel or v.uses_split:
        count += ra * (m + n)
    if v.uses_sequential:
        count += 2 * rb * m
    return count


def trainable_params(inventory: Iterable[tuple[int, int]], spec: AdapterSpec) -> int:
    """Closed-form trainable scalar count over a list of (m, n) layer shapes."""
    shapes = list(inventory)
    if not shapes:
        raise ConfigError("layer inventory is empty")
    return sum(layer_trainable_params(int(m), int(n), spec) for m, n in shapes)


def encode_adapters(layers: Iterable[AdaptedLinear]) -> bytes:
    """Serialise adapted layers (all sharing one spec) into the checkpoint container."""
    from . import checkpoint

    layers = list(layers)
    if not layers:
        raise ConfigError("no layers to save")
    spec = layers[0].spec
    if any(layer.spec != spec for layer in layers):
        raise ConfigError("all layers in one adapter checkpoint must share a spec")
    inventory, tensors = [], {}
    for layer in layers:
        params = layer.parameters()
        inventory.append({"name": layer.name, "m": layer.shape[0], "n": layer.shape[1], "params": list(params)})
        for key, p in params.items():
            tensors[f"{layer.name}/{key}"] = p.value
    manifest = {
        "kind": "adapters",
        "variant": spec.variant.value,
        "rank_a": spec.rank_a,
        "rank_b": spec.rank_b,
        "scale_a": spec.scale_a,
        "scale_b": spec.scale_b,
        "layers": inventory,
    }
    return checkpoint.encode(manifest, tensors)


def decode_adapters(blob: bytes) -> list[AdaptedLinear]:
    from . import checkpoint
    from .errors import FormatError

    manifest, tensors = checkpoint.decode(blob)
    if manifest.get("kind") != "adapters":
        raise FormatError(f"not an adapter checkpoint (kind={manifest.get('kind')!r})", 16)
    try:
        spec = AdapterSpec(manifest["variant"], manifest["rank_a"], manifest["rank_b"],
                           manifest["scale_a"], manifest["scale_b"])
        out = []
        for entry in manifest["layers"]:
            name = entry["name"]
            t = {k: tensors[f"{name}/{k}"] for k in entry["params"]}
            prefix = f"{name}." if name else ""
            trainable = not spec.variant.is_peft

            def p(key, train):
                return Parameter(prefix + key, t[key].copy(), train)

            layer = AdaptedLinear(name, spec, p("w", trainable), p("b", trainable))
            if "a_up" in t:
                layer.lora = LoRABranch(p("a_up", True), p("a_down", True), spec.scale_a)
            if "b_up" in t:
                layer.seq = SeqLoRABranch(p("b_up", True), p("b_down", True), spec.scale_b)
            if "pri_up" in t:
                layer.pissa = PiSSASplit(p("pri_up", True), p("pri_down", True), p("w_res", False))
            if layer.shape != (entry["m"], entry["n"]):
                raise FormatError(f"layer {name}: weight shape {layer.shape} disagrees with manifest", 16)
            out.append(layer)
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"malformed adapter manifest: {exc}", 16) from None
    return out


def save_adapters(path, layers: Iterable[AdaptedLinear]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_adapters(layers))


def load_adapters(path) -> list[AdaptedLinear]:
    with open(path, "rb") as fh:
        return decode_adapters(fh.read())
