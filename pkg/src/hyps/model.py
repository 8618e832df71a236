"""A miniature Swin-style encoder-decoder for single-class 3-D segmentation.

Encoder: 2x2x2 patch embedding into ``embed_dim`` tokens, then blocks of

    h = h + WindowAttention(LN(h));  h = h + MLP2(relu(MLP1(LN(h))))

alternating plain (W-MSA) and cyclically shifted (SW-MSA) windows. The shifted
variant rolls the grid by ``window // 2`` and does not mask wrap-around pairs.

Decoder: per-token linear mixing of the encoder output with the embedding skip,
nearest-neighbour upsampling back to voxel resolution, a per-voxel linear skip
from the input intensities, and a sigmoid read-out.

Only the Q, K, V, O and the two MLP projections of each block are adapter
attachment points; they are listed by :meth:`ToySegModel.registry`.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .adapters import AdaptedLinear, AdapterSpec, LinearLayer, Variant, init_adapted, layer_trainable_params
from .autodiff import Parameter, Tape
from .errors import ConfigError, ShapeError
from .linalg import kaiming_init, make_rng

ROLES = ("Q", "K", "V", "O", "MLP1", "MLP2")
_ROLE_SUFFIX = {"Q": "attn.q", "K": "attn.k", "V": "attn.v", "O": "attn.o", "MLP1": "mlp.fc1", "MLP2": "mlp.fc2"}
PATCH_EMBED = 2


@dataclass(frozen=True)
class ToyModelConfig:
    patch: int = 16
    embed_dim: int = 16
    depths: tuple[int, ...] = (2,)
    heads: int = 2
    window: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.patch < PATCH_EMBED or self.patch % PATCH_EMBED:
            raise ConfigError(f"patch={self.patch} must be a positive multiple of {PATCH_EMBED}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim={self.embed_dim} must be divisible by heads={self.heads}")
        if self.window < 1 or self.grid % self.window:
            raise ConfigError(f"window={self.window} must divide the token grid side {self.grid}")
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be positive, got {self.depths}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")

    @property
    def grid(self) -> int:
        return self.patch // PATCH_EMBED

    @property
    def hidden(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        return cls(**{**d, "depths": tuple(d.get("depths", (2,)))})


def block_names(config: ToyModelConfig) -> list[tuple[str, bool]]:
    """(prefix, shifted) for every block, shifted on odd positions in a stage."""
    out = []
    for s, depth in enumerate(config.depths):
        for i in range(depth):
            out.append((f"stage{s}.block{i}", i % 2 == 1))
    return out


def layer_inventory(config: ToyModelConfig, fused_qkv: bool = False) -> list[tuple[int, int]]:
    """(m, n) shapes of every attachment point.

    ``fused_qkv`` counts Q, K and V as one (3d, d) projection instead of three.
    """
    d, hid = config.embed_dim, config.hidden
    per_block = [(3 * d, d)] if fused_qkv else [(d, d)] * 3
    per_block = per_block + [(d, d), (hid, d), (d, hid)]
    return per_block * sum(config.depths)


def decoder_param_count(config: ToyModelConfig) -> int:
    d = config.embed_dim
    # dec.w_h, dec.w_e, dec.b1, dec.w_in, dec.b2, dec.w_out, dec.b_out
    return 2 * d * d + d + d + d + d + 1


def encoder_fixed_param_count(config: ToyModelConfig) -> int:
    """Encoder scalars outside the attachment points (embedding and norms)."""
    d = config.embed_dim
    return d * PATCH_EMBED**3 + d + sum(config.depths) * 4 * d


@dataclass
class ToySegModel:
    config: ToyModelConfig
    params: dict[str, Parameter]
    layers: dict[str, AdaptedLinear]
    spec: AdapterSpec = field(default_factory=lambda: AdapterSpec(Variant.FULL))

    # -- bookkeeping ------------------------------------------------------
    def registry(self) -> list[tuple[str, str, tuple[int, int]]]:
        out = []
        for prefix, _ in block_names(self.config):
            for role in ROLES:
                name = f"{prefix}.{_ROLE_SUFFIX[role]}"
                out.append((name, role, self.layers[name].shape))
        return out

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self.params)
        for layer in self.layers.values():
            for p in layer.parameters().values():
                out[p.name] = p
        return dict(sorted(out.items()))

    def is_decoder(self, name: str) -> bool:
        return name.startswith("dec.")

    def count_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values() if p.trainable)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ShapeError(f"{k}: expected shape {p.value.shape}, got {v.shape}")
            p.value = v.copy()

    def copy(self) -> "ToySegModel":
        return copy.deepcopy(self)

    # -- forward ----------------------------------------------------------
    def forward(self, tape: Tape, x) -> ad.Var:
        """Probabilities (B, S, S, S) for an input batch (B, S, S, S)."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        s = cfg.patch
        if x.ndim != 4 or x.shape[1:] != (s, s, s):
            raise ShapeError(f"model expects input (B, {s}, {s}, {s}), got {x.shape}")
        bsz, g, pe = x.shape[0], cfg.grid, PATCH_EMBED
        patches = (
            x.reshape(bsz, g, pe, g, pe, g, pe)
            .transpose(0, 1, 3, 5, 2, 4, 6)
            .reshape(bsz, g, g, g, pe**3)
        )
        p = {k: tape.param(v) for k, v in self.params.items()}
        emb = ad.linear(patches, p["embed.w"], p["embed.b"])
        h = emb
        for prefix, shifted in block_names(cfg):
            h = self.block(tape, h, prefix, shifted, p)

        z = ad.linear(h, p["dec.w_h"]) + ad.linear(emb, p["dec.w_e"], p["dec.b1"])
        z = ad.relu(z)
        up = ad.upsample_nearest(z, pe, (1, 2, 3))
        skip = ad.linear(x[..., None], p["dec.w_in"], p["dec.b2"])
        u = ad.relu(up + skip)
        logits = ad.linear(u, p["dec.w_out"], p["dec.b_out"])
        return ad.sigmoid(ad.reshape(logits, x.shape))

    def block(self, tape: Tape, h, prefix: str, shifted: bool, p: dict | None = None) -> ad.Var:
        """One encoder block on tokens ``h`` of shape (B, G, G, G, d)."""
        if p is None:
            p = {k: tape.param(v) for k, v in self.params.items() if k.startswith(prefix + ".")}
        cfg = self.config
        t = ad.layer_norm(h, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
        qkvo = [self.layers[f"{prefix}.{_ROLE_SUFFIX[r]}"] for r in ("Q", "K", "V", "O")]
        h = h + window_attention(t, qkvo, cfg.heads, cfg.window, shifted)
        t = ad.layer_norm(h, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
        t = ad.relu(self.layers[f"{prefix}.mlp.fc1"].apply(tape, t))
        return h + self.layers[f"{prefix}.mlp.fc2"].apply(tape, t)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        out = self.forward(Tape(grad_enabled=False), x).value
        return out[0] if single else out


def window_partition(x, window: int) -> ad.Var:
    """(B, G, G, G, d) -> (B * (G/w)^3, w^3, d)."""
    bsz, g, _, _, d = x.shape
    n = g // window
    x = ad.reshape(x, (bsz, n, window, n, window, n, window, d))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return ad.reshape(x, (bsz * n**3, window**3, d))


def window_merge(x, bsz: int, grid: int, window: int) -> ad.Var:
    """Inverse of :func:`window_partition`."""
    n = grid // window
    d = x.shape[-1]
    x = ad.reshape(x, (bsz, n, n, n, window, window, window, d))
    x = ad.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return ad.reshape(x, (bsz, grid, grid, grid, d))


def window_attention(tokens, qkvo: list[AdaptedLinear], heads: int, window: int, shifted: bool) -> ad.Var:
    """Multi-head self-attention inside non-overlapping window^3 groups."""
    tape = tokens.tape
    bsz, g, _, _, d = tokens.shape
    if g % window:
        raise ShapeError(f"token grid side {g} is not divisible by window {window}")
    if d % heads:
        raise ShapeError(f"token dim {d} is not divisible by heads {heads}")
    shift = window // 2 if shifted else 0
    t = tokens
    if shift:
        t = ad.roll(t, (-shift, -shift, -shift), (1, 2, 3))
    win = window_partition(t, window)
    nw, tw = win.shape[0], win.shape[1]
    dh = d // heads
    q_layer, k_layer, v_layer, o_layer = qkvo

    def split_heads(v):
        return ad.transpose(ad.reshape(v, (nw, tw, heads, dh)), (0, 2, 1, 3))

    q = split_heads(q_layer.apply(tape, win))
    k = split_heads(k_layer.apply(tape, win))
    v = split_heads(v_layer.apply(tape, win))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (nw, tw, d))
    out = o_layer.apply(tape, out)
    out = window_merge(out, bsz, g, window)
    if shift:
        out = ad.roll(out, (shift, shift, shift), (1, 2, 3))
    return out


def _plain_layer(name: str, w: np.ndarray, b: np.ndarray) -> AdaptedLinear:
    return AdaptedLinear(
        name=name,
        spec=AdapterSpec(Variant.FULL),
        w=Parameter(f"{name}.w", w, True),
        b=Parameter(f"{name}.b", b, True),
    )


def build_model(config: ToyModelConfig | None = None, rng: np.random.Generator | int = 0) -> ToySegModel:
    """Fresh, fully trainable model; everything is drawn from ``rng``."""
    config = config or ToyModelConfig()
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    d, hid = config.embed_dim, config.hidden
    params: dict[str, Parameter] = {}

    def add(name, value):
        params[name] = Parameter(name, np.asarray(value, dtype=np.float64), True)

    add("embed.w", kaiming_init(d, PATCH_EMBED**3, rng))
    add("embed.b", np.zeros(d))
    layers: dict[str, AdaptedLinear] = {}
    for prefix, _ in block_names(config):
        add(f"{prefix}.norm1.g", np.ones(d))
        add(f"{prefix}.norm1.b", np.zeros(d))
        add(f"{prefix}.norm2.g", np.ones(d))
        add(f"{prefix}.norm2.b", np.zeros(d))
        for role in ("Q", "K", "V", "O"):
            name = f"{prefix}.{_ROLE_SUFFIX[role]}"
            layers[name] = _plain_layer(name, kaiming_init(d, d, rng) * 0.5, np.zeros(d))
        name = f"{prefix}.mlp.fc1"
        layers[name] = _plain_layer(name, kaiming_init(hid, d, rng), np.zeros(hid))
        name = f"{prefix}.mlp.fc2"
        layers[name] = _plain_layer(name, kaiming_init(d, hid, rng) * 0.5, np.zeros(d))
    add("dec.w_h", kaiming_init(d, d, rng))
    add("dec.w_e", kaiming_init(d, d, rng))
    add("dec.b1", np.zeros(d))
    add("dec.w_in", kaiming_init(d, 1, rng))
    add("dec.b2", np.zeros(d))
    add("dec.w_out", kaiming_init(1, d, rng))
    add("dec.b_out", np.zeros(1))
    return ToySegModel(config=config, params=params, layers=layers)


def attach_adapters(model: ToySegModel, spec: AdapterSpec, rng: np.random.Generator | int = 0):
    """Wrap every attachment point per ``spec`` and apply the freezing policy.

    Returns ``(adapted_model, partition)``; the input model is not modified.
    Encoder parameters outside the attachment points are frozen for every
    mode except full tuning; the decoder always stays trainable.
    """
    from .train import ParamPartition

    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    v = spec.variant
    for name, _, (m, n) in model.registry():
        spec.check_shape(m, n, name)
    out = model.copy()
    out.spec = spec
    for name, p in out.params.items():
        p.trainable = v is Variant.FULL or out.is_decoder(name)
    for name, layer in model.layers.items():
        base = LinearLayer(layer.w.value, layer.b.value)
        if v.is_peft:
            out.layers[name] = init_adapted(base, spec, rng, name=name)
        else:
            out.layers[name] = _plain_layer(name, base.w.copy(), base.b.copy())
    return out, ParamPartition.from_model(out)


def closed_form_trainable(config: ToyModelConfig, spec: AdapterSpec) -> int:
    """Trainable scalars of an adapted model, from shapes alone."""
    from .adapters import trainable_params

    count = trainable_params(layer_inventory(config), spec) + decoder_param_count(config)
    if spec.variant is Variant.FULL:
        count += encoder_fixed_param_count(config)
    return count


def sliding_window_infer(model: ToySegModel, volume, patch: int | None = None) -> np.ndarray:
    """Non-overlapping tiled inference; the volume is zero-padded then cropped."""
    patch = patch or model.config.patch
    if patch != model.config.patch:
        raise ShapeError(f"model was built for {model.config.patch}^3 tiles, not {patch}^3")
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ShapeError(f"expected a 3-D volume, got shape {vol.shape}")
    padded_shape = tuple(-(-s // patch) * patch for s in vol.shape)
    padded = np.zeros(padded_shape)
    padded[: vol.shape[0], : vol.shape[1], : vol.shape[2]] = vol
    out = np.empty(padded_shape)
    for i in range(0, padded_shape[0], patch):
        for j in range(0, padded_shape[1], patch):
            for k in range(0, padded_shape[2], patch):
                tile = padded[i : i + patch, j : j + patch, k : k + patch]
                out[i : i + patch, j : j + patch, k : k + patch] = model.predict(tile)
    return out[: vol.shape[0], : vol.shape[1], : vol.shape[2]]


def save_model(path, model: ToySegModel) -> None:
    spec = model.spec
    manifest = {
        "kind": "toy-seg-model",
        "architecture": model.config.to_dict(),
        "variant": spec.variant.value,
        "rank_a": spec.rank_a,
        "rank_b": spec.rank_b,
        "scale_a": spec.scale_a,
        "scale_b": spec.scale_b,
        "layers": [{"name": n, "role": r, "m": s[0], "n": s[1]} for n, r, s in model.registry()],
        "trainable": sorted(k for k, p in model.parameters().items() if p.trainable),
    }
    checkpoint.save(path, manifest, model.state())


def load_model(path) -> ToySegModel:
    from .errors import FormatError

    manifest, tensors = checkpoint.load(path)
    if manifest.get("kind") != "toy-seg-model":
        raise FormatError(f"not a model checkpoint (kind={manifest.get('kind')!r})", 16)
    config = ToyModelConfig.from_dict(manifest["architecture"])
    spec = AdapterSpec(manifest["variant"], manifest["rank_a"], manifest["rank_b"],
                       manifest["scale_a"], manifest["scale_b"])
    base = build_model(config, 0)
    model = base if spec.variant is Variant.FULL else attach_adapters(base, spec, 0)[0]
    model.spec = spec
    model.load_state(tensors)
    trainable = set(manifest.get("trainable", []))
    for k, p in model.parameters().items():
        p.trainable = k in trainable
    return model


def layer_trainable_breakdown(model: ToySegModel) -> dict[str, int]:
    """Closed-form per-layer counts for the current adapter spec."""
    return {n: layer_trainable_params(*s, model.spec) for n, _, s in model.registry()}
