"""TranSalNet topology at configurable scale.

A toy strided CNN encoder emits features at 1/8, 1/16 and 1/32 of the input
resolution. Each is projected by a 1x1 convolution and (optionally) refined
by a two-layer pre-norm transformer encoder. A seven-block decoder fuses the
three streams by upsampling and elementwise products and ends in a sigmoid.

Naming follows the usual convention of the architecture: ``x1`` is the
deepest (1/32) feature, ``x3`` the shallowest (1/8).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, TapeError
from .io import load_tsal, save_tsal

VARIANTS = {
    # name: (E1, E2, E3, SC, loss, backbone)
    "BaseNet": (False, False, False, False, "BCE", "res"),
    "BaseNet+": (True, False, False, False, "BCE", "res"),
    "SkipNet": (False, False, False, True, "BCE", "res"),
    "TranSalNet_Res_BCE": (True, True, True, True, "BCE", "res"),
    "BaseNet(L_CB)": (False, False, False, False, "CB", "res"),
    "BaseNet+(L_CB)": (True, False, False, False, "CB", "res"),
    "SkipNet(L_CB)": (False, False, False, True, "CB", "res"),
    "TranSalNet_Res": (True, True, True, True, "CB", "res"),
    "TranSalNet_Dense": (True, True, True, True, "CB", "dense"),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches.

    The defaults are a toy scale that trains on a CPU in seconds;
    :meth:`full_scale` gives the published widths and head counts.
    ``decoder_channels`` lists the outputs of blocks 3-6; blocks 1 and 2 emit
    ``d2`` and ``d3`` channels so they can be multiplied with the skips.
    """

    input_w: int = 64
    input_h: int = 64
    backbone: str = "res"
    stem_channels: tuple = (8, 8)
    c8: int = 12
    c16: int = 16
    c32: int = 16
    d1: int = 16
    d2: int = 16
    d3: int = 8
    h1: int = 4
    h2: int = 4
    h3: int = 2
    layers: int = 2
    mlp_ratio: int = 4
    decoder_channels: tuple = (8, 8, 8, 8)
    use_e1: bool = True
    use_e2: bool = True
    use_e3: bool = True
    use_skip_connections: bool = True
    loss_kind: str = "CB"

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(self.stem_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        self.validate()

    def validate(self):
        if self.input_w % 32 or self.input_h % 32 or self.input_w <= 0 or self.input_h <= 0:
            raise ConfigError(f"input size {self.input_w}x{self.input_h} must be a positive multiple of 32")
        for d, h, i in ((self.d1, self.h1, 1), (self.d2, self.h2, 2), (self.d3, self.h3, 3)):
            if h < 1 or d % h:
                raise ConfigError(f"transformer {i}: dim {d} not divisible by {h} heads")
        if len(self.stem_channels) != 2 or len(self.decoder_channels) != 4:
            raise ConfigError("stem_channels needs 2 entries and decoder_channels 4")
        if self.backbone not in ("res", "dense"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.loss_kind not in ("BCE", "CB"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if not self.use_skip_connections and (self.use_e2 or self.use_e3):
            raise ConfigError("transformer encoders 2 and 3 only feed skip connections")
        if self.layers < 1 or self.mlp_ratio < 1:
            raise ConfigError("layers and mlp_ratio must be >= 1")

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(input_w=384, input_h=288, stem_channels=(64, 256), c8=512, c16=1024,
                    c32=2048, d1=768, d2=768, d3=512, h1=12, h2=12, h3=8,
                    decoder_channels=(256, 128, 64, 32))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_variant(cls, name, **overrides):
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
        e1, e2, e3, sc, loss, backbone = VARIANTS[name]
        kw = dict(use_e1=e1, use_e2=e2, use_e3=e3, use_skip_connections=sc,
                  loss_kind=loss, backbone=backbone)
        kw.update(overrides)
        return cls(**kw)

    def with_size(self, width, height):
        return replace(self, input_w=width, input_h=height)

    def to_dict(self):
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return canonical_json(self.to_dict())

    # derived geometry

    def tap_shapes(self):
        """Spatial (h, w) of x1, x2, x3."""
        return tuple((self.input_h // s, self.input_w // s) for s in (32, 16, 8))

    def tap_channels(self):
        return self.c32, self.c16, self.c8

    def stage_channels(self):
        return self.stem_channels + (self.c8, self.c16, self.c32)

    def dims(self):
        return self.d1, self.d2, self.d3

    def heads(self):
        return self.h1, self.h2, self.h3

    def active_streams(self):
        return (1, 2, 3) if self.use_skip_connections else (1,)

    def transformer_enabled(self, i):
        return (self.use_e1, self.use_e2, self.use_e3)[i - 1]

    def block_channels(self):
        """Output channels of decoder blocks 1-6."""
        return (self.d2, self.d3) + self.decoder_channels


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class ModelParams:
    """Named learnable tensors plus BatchNorm running statistics."""

    def __init__(self, tensors=None, buffers=None):
        self.tensors = dict(tensors or {})
        self.buffers = dict(buffers or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def num_parameters(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        """Gradient store: one array per parameter, zero where nothing flowed."""
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in self.tensors.items()}

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return ModelParams(
            {k: T.Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()})


# ---------------------------------------------------------------------------
# construction


def _uniform(rng, shape, fan_in, gain=6.0):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.tensors = {}
        self.buffers = {}

    def add(self, name, value):
        self.tensors[name] = T.Tensor(value, requires_grad=True, name=name)

    def conv(self, name, cin, cout, k, bias=0.0, gain=6.0):
        self.add(f"{name}.w", _uniform(self.rng, (cout, cin, k, k), cin * k * k, gain))
        self.add(f"{name}.b", np.full(cout, bias))

    def bn(self, name, c):
        self.add(f"{name}.gamma", np.ones(c))
        self.add(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.mean"] = np.zeros(c)
        self.buffers[f"{name}.var"] = np.ones(c)

    def ln(self, name, d):
        self.add(f"{name}.gamma", np.ones(d))
        self.add(f"{name}.beta", np.zeros(d))

    def linear(self, name, din, dout):
        self.add(f"{name}.w", _uniform(self.rng, (din, dout), din, gain=3.0))
        self.add(f"{name}.b", np.zeros(dout))


def init_params(config, seed=0):
    """Fresh parameters for every component that ``config`` activates."""
    b = _Builder(seed)
    chans = (3,) + config.stage_channels()
    for s in range(5):
        cin, cout = chans[s], chans[s + 1]
        b.conv(f"encoder.stage{s + 1}.conv", cin, cout, 3)
        b.bn(f"encoder.stage{s + 1}.bn", cout)
        if s >= 2:
            if config.backbone == "res":
                b.conv(f"encoder.stage{s + 1}.unit.conv", cout, cout, 3)
                b.bn(f"encoder.stage{s + 1}.unit.bn", cout)
            else:
                b.conv(f"encoder.stage{s + 1}.dense.conv", cout, cout, 3)
                b.bn(f"encoder.stage{s + 1}.dense.bn", cout)
                b.conv(f"encoder.stage{s + 1}.transition.conv", 2 * cout, cout, 1)
                b.bn(f"encoder.stage{s + 1}.transition.bn", cout)
    taps = config.tap_channels()
    shapes = config.tap_shapes()
    for i in config.active_streams():
        d = config.dims()[i - 1]
        b.conv(f"reduce{i}", taps[i - 1], d, 1)
        if config.transformer_enabled(i):
            p = f"transformer{i}"
            b.add(f"{p}.pos", _trunc_normal(b.rng, (d,) + shapes[i - 1]))
            hidden = config.mlp_ratio * d
            for layer in range(config.layers):
                q = f"{p}.layer{layer}"
                b.ln(f"{q}.ln1", d)
                for proj in ("wq", "wk", "wv", "wo"):
                    b.linear(f"{q}.attn.{proj}", d, d)
                b.ln(f"{q}.ln2", d)
                b.linear(f"{q}.mlp.fc1", d, hidden)
                b.linear(f"{q}.mlp.fc2", hidden, d)
    cin = config.d1
    for i, cout in enumerate(config.block_channels(), start=1):
        b.conv(f"decoder.block{i}.conv", cin, cout, 3)
        b.bn(f"decoder.block{i}.bn", cout)
        cin = cout
    # small weights + bias -1: initial maps sit near sigmoid(-1) ~ 0.27, not saturated
    b.conv("decoder.block7.conv", cin, 1, 3, bias=-1.0, gain=0.1)
    return ModelParams(b.tensors, b.buffers)


# ---------------------------------------------------------------------------
# forward


class _Ctx:
    def __init__(self, params, training, trace):
        self.p = params
        self.training = training
        self.trace = trace

    def conv(self, name, x, stride=1):
        return T.conv2d(x, self.p[f"{name}.w"], self.p[f"{name}.b"], stride=stride)

    def bn(self, name, x):
        train = self.training and x.shape[0] >= 2
        return T.batch_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"],
                            self.p.buffers[f"{name}.mean"], self.p.buffers[f"{name}.var"], train)

    def conv_bn_relu(self, name, x, stride=1):
        return T.relu(self.bn(f"{name}.bn", self.conv(f"{name}.conv", x, stride)))

    def linear(self, name, x):
        return T.linear(x, self.p[f"{name}.w"], self.p[f"{name}.b"])

    def ln(self, name, x):
        return T.layer_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"])


def encoder_forward(ctx, config, img):
    """Toy backbone; returns (x1, x2, x3) at strides 32, 16, 8."""
    x = img
    taps = []
    for s in range(1, 6):
        name = f"encoder.stage{s}"
        x = ctx.conv_bn_relu(name, x, stride=2)
        if s >= 3:
            if config.backbone == "res":
                y = ctx.bn(f"{name}.unit.bn", ctx.conv(f"{name}.unit.conv", x))
                x = T.relu(T.add(x, y))
            else:
                y = ctx.conv_bn_relu(f"{name}.dense", x)
                x = ctx.conv_bn_relu(f"{name}.transition", T.concat([x, y], axis=1))
            taps.append(x)
    x3, x2, x1 = taps
    return x1, x2, x3


def _split_heads(x, heads):
    n, t, d = x.shape
    return T.transpose(T.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, t, h * dh))


def attention(ctx, name, z, heads):
    """Multi-head self-attention over tokens ``z`` of shape (N, T, d)."""
    q = _split_heads(ctx.linear(f"{name}.wq", z), heads)
    k = _split_heads(ctx.linear(f"{name}.wk", z), heads)
    v = _split_heads(ctx.linear(f"{name}.wv", z), heads)
    dh = z.shape[-1] // heads
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = T.softmax(scores)
    if ctx.trace is not None:
        ctx.trace.setdefault("attention", []).append(probs.data.copy())
    return ctx.linear(f"{name}.wo", _merge_heads(T.matmul(probs, v)))


def transformer_encoder_forward(ctx, config, x, which):
    """Project ``x`` to the encoder width, add POS, run the layers, restore the grid.

    A disabled encoder reduces to its 1x1 projection.
    """
    z = ctx.conv(f"reduce{which}", x)
    if not config.transformer_enabled(which):
        return z
    p = f"transformer{which}"
    n, d, h, w = z.shape
    z = T.add_broadcast(z, ctx.p[f"{p}.pos"])
    z = T.transpose(T.reshape(z, (n, d, h * w)), (0, 2, 1))
    heads = config.heads()[which - 1]
    for layer in range(config.layers):
        q = f"{p}.layer{layer}"
        z = T.add(attention(ctx, f"{q}.attn", ctx.ln(f"{q}.ln1", z), heads), z)
        hidden = T.gelu(ctx.linear(f"{q}.mlp.fc1", ctx.ln(f"{q}.ln2", z)))
        z = T.add(ctx.linear(f"{q}.mlp.fc2", hidden), z)
    return T.reshape(T.transpose(z, (0, 2, 1)), (n, d, h, w))


def decoder_forward(ctx, config, xc1, xc2=None, xc3=None):
    """Blocks 1-7. Without skip connections ``xc2``/``xc3`` are ignored."""
    skips = {2: xc2, 3: xc3}
    x = xc1
    for i in range(1, 7):
        if i >= 2:
            x = T.upsample_nearest_2x(x)
            if i in skips and config.use_skip_connections:
                x = T.relu(T.mul(x, skips[i]))
        x = ctx.conv_bn_relu(f"decoder.block{i}", x)
    return T.sigmoid(ctx.conv("decoder.block7.conv", x))


def check_images(images, config):
    arr = images.data if isinstance(images, T.Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ConfigError(f"expected images shaped (N, 3, H, W), got {arr.shape}")
    if arr.shape[2:] != (config.input_h, config.input_w):
        raise ConfigError(
            f"image size {arr.shape[3]}x{arr.shape[2]} != configured {config.input_w}x{config.input_h}")
    return arr


def model_forward(images, config, params, training=False, trace=None):
    """Predicted maps of shape (N, 1, H, W), values in (0, 1).

    Pass a dict as ``trace`` to collect attention probabilities and the
    intermediate feature maps.
    """
    img = images if isinstance(images, T.Tensor) else T.Tensor(check_images(images, config))
    ctx = _Ctx(params, training, trace)
    x1, x2, x3 = encoder_forward(ctx, config, img)
    xc1 = transformer_encoder_forward(ctx, config, x1, 1)
    xc2 = xc3 = None
    if config.use_skip_connections:
        xc2 = transformer_encoder_forward(ctx, config, x2, 2)
        xc3 = transformer_encoder_forward(ctx, config, x3, 3)
    if trace is not None:
        trace.update(x1=x1.data, x2=x2.data, x3=x3.data, xc1=xc1.data,
                     xc2=None if xc2 is None else xc2.data,
                     xc3=None if xc3 is None else xc3.data)
    return decoder_forward(ctx, config, xc1, xc2, xc3)


def model_backward(loss_grad, tape, output, params):
    """Backpropagate ``loss_grad`` (shaped like the output) into ``params``.

    Returns the gradient store; parameters off the active path get zeros.
    """
    if tape is None or not tape.records:
        raise TapeError("no forward pass recorded")
    params.zero_grad()
    g = np.asarray(loss_grad, dtype=np.float64).reshape(output.shape)
    tape.backward(output, g)
    return params.grads()


def forward_backward(images, config, params, loss_grad_fn, training=True):
    """Run forward on a tape, then backward with ``loss_grad_fn(pred) -> (value, grad)``."""
    with T.Tape() as tape:
        out = model_forward(images, config, params, training=training)
    value, grad = loss_grad_fn(out.data)
    grads = model_backward(grad, tape, out, params)
    return value, out.data, grads


def predict(images, config, params):
    """Eval-mode prediction as an (N, H, W) array."""
    return model_forward(images, config, params, training=False).data[:, 0]


# ---------------------------------------------------------------------------
# checkpoints


def _file_name(name):
    return name.replace("/", "_") + ".tsal"


def save_checkpoint(path, config, params, extra=None):
    """Write one TSAL file per tensor plus ``manifest.json``."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    (path / "buffers").mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_dict(), "tensors": {}, "buffers": {}}
    for name, t in sorted(params.tensors.items()):
        rel = f"tensors/{_file_name(name)}"
        save_tsal(path / rel, t.data)
        manifest["tensors"][name] = rel
    for name, buf in sorted(params.buffers.items()):
        rel = f"buffers/{_file_name(name)}"
        save_tsal(path / rel, buf)
        manifest["buffers"][name] = rel
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")


def load_checkpoint(path):
    """Load ``(config, params)`` and check every shape against the config."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path} has no manifest.json") from None
    config = ModelConfig.from_dict(manifest["config"])
    ref = init_params(config, seed=0)
    if set(manifest["tensors"]) != set(ref.tensors):
        missing = sorted(set(ref.tensors) - set(manifest["tensors"]))
        extra = sorted(set(manifest["tensors"]) - set(ref.tensors))
        raise ConfigError(f"checkpoint does not match config (missing {missing}, unexpected {extra})")
    tensors, buffers = {}, {}
    for name, rel in manifest["tensors"].items():
        arr = load_tsal(path / rel).astype(np.float64)
        if arr.shape != ref[name].shape:
            raise ConfigError(f"{name}: shape {arr.shape} != expected {ref[name].shape}")
        tensors[name] = T.Tensor(arr, requires_grad=True, name=name)
    for name, rel in manifest["buffers"].items():
        arr = load_tsal(path / rel).astype(np.float64)
        if name not in ref.buffers or arr.shape != ref.buffers[name].shape:
            raise ConfigError(f"buffer {name} does not match config")
        buffers[name] = arr
    return config, ModelParams(tensors, buffers)
