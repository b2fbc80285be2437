"""Recurrent stacked hourglass network.

Each hourglass contracts with one conv + 2x2 max-pool per level, expands
with nearest upsampling, and merges by addition. The skip connection of
every level runs through a ConvGRU (or, for the non-recurrent variant, a
plain convolution with the same output count). Two hourglasses are
stacked: the second one sees the first one's head output concatenated with
the input frame.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ops
from .core.optim import he_init, zeros
from .core.tensor import Tensor, get_default_dtype


@dataclass
class NetworkConfig:
    levels: int = 7
    channels: int = 64
    kernel: int = 3
    stacks: int = 2
    embedding_dim: int = 16
    recurrent: bool = True
    head_mode: str = "embeddings"  # or "class_logits"
    num_classes: int | None = None
    in_channels: int = 1
    padding: str = "zero"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.stacks < 1:
            raise ValueError("stacks must be >= 1")
        if self.head_mode not in ("embeddings", "class_logits"):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.head_mode == "embeddings" and self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.head_mode == "class_logits" and (self.num_classes is None or self.num_classes < 2):
            raise ValueError("class_logits mode needs num_classes >= 2")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")

    @property
    def out_channels(self) -> int:
        return self.embedding_dim if self.head_mode == "embeddings" else int(self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RecurrentState:
    """Hidden tensors indexed ``hidden[stack][level]``; empty when non-recurrent."""
    hidden: list = field(default_factory=list)

    @classmethod
    def zeros(cls, config: NetworkConfig, batch: int, height: int, width: int) -> "RecurrentState":
        if not config.recurrent:
            return cls([[] for _ in range(config.stacks)])
        dt = get_default_dtype()
        hidden = []
        for _ in range(config.stacks):
            hidden.append([
                Tensor(np.zeros((batch, config.channels, height >> lv, width >> lv), dtype=dt))
                for lv in range(config.levels)
            ])
        return cls(hidden)

    def detach(self) -> "RecurrentState":
        return RecurrentState([[Tensor(h.data) for h in s] for s in self.hidden])


def convgru_step(x: Tensor, h_prev: Tensor, params: dict, padding: str = "zero") -> Tensor:
    """One ConvGRU update.

    ``params`` holds ``wzr``/``bzr`` (update and reset gates, stacked along
    the output axis) and ``wh``/``bh`` (candidate); all kernels act on the
    channel concatenation of input and (reset) hidden state.
    """
    if x.shape[0] != h_prev.shape[0] or x.shape[2:] != h_prev.shape[2:]:
        raise ValueError(f"input {x.shape} and hidden state {h_prev.shape} are not congruent")
    C = h_prev.shape[1]
    xh = ops.concat_channels(x, h_prev)
    zr = ops.sigmoid(ops.conv2d(xh, params["wzr"], params["bzr"], padding))
    z = ops.slice_channels(zr, 0, C)
    r = ops.slice_channels(zr, C, 2 * C)
    cand = ops.tanh(ops.conv2d(ops.concat_channels(x, r * h_prev), params["wh"], params["bh"], padding))
    # (1 - z) * h + z * cand == h + z * (cand - h)
    return h_prev + z * (cand - h_prev)


def _conv_relu(x, params, prefix, padding):
    return ops.relu(ops.conv2d(x, params[prefix + ".w"], params[prefix + ".b"], padding))


def hourglass_forward(x: Tensor, state_slice: list, params: dict, prefix: str,
                      config: NetworkConfig) -> tuple[Tensor, list]:
    """Run one hourglass. Returns (features, new hidden states per level)."""
    H, W = x.shape[2:]
    div = 1 << config.levels
    if H % div or W % div:
        raise ValueError(f"spatial extent {H}x{W} not divisible by 2**levels={div}")
    new_state = []
    pad = config.padding

    def level(inp, lv):
        contracted = _conv_relu(inp, params, f"{prefix}.down{lv}", pad)
        if config.recurrent:
            g = {k: params[f"{prefix}.gru{lv}.{k}"] for k in ("wzr", "bzr", "wh", "bh")}
            skip = convgru_step(contracted, state_slice[lv], g, pad)
            new_state.append(skip)
        else:
            skip = _conv_relu(contracted, params, f"{prefix}.skip{lv}", pad)
        if lv + 1 < config.levels:
            deeper = level(ops.max_pool2d(contracted), lv + 1)
            merged = skip + ops.upsample2x(deeper)
        else:
            merged = skip
        return _conv_relu(merged, params, f"{prefix}.up{lv}", pad)

    feats = level(x, 0)
    return feats, new_state


def init_params(config: NetworkConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialised weights, zero biases, in a deterministic order."""
    C, k = config.channels, config.kernel
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, ks):
        params[name + ".w"] = he_init((cout, cin, ks, ks), rng)
        params[name + ".b"] = zeros((cout,))

    for s in range(config.stacks):
        cin = config.in_channels if s == 0 else config.in_channels + config.out_channels
        for lv in range(config.levels):
            conv(f"hg{s}.down{lv}", cin if lv == 0 else C, C, k)
            if config.recurrent:
                params[f"hg{s}.gru{lv}.wzr"] = he_init((2 * C, 2 * C, k, k), rng)
                params[f"hg{s}.gru{lv}.bzr"] = zeros((2 * C,))
                params[f"hg{s}.gru{lv}.wh"] = he_init((C, 2 * C, k, k), rng)
                params[f"hg{s}.gru{lv}.bh"] = zeros((C,))
            else:
                conv(f"hg{s}.skip{lv}", C, C, k)
            conv(f"hg{s}.up{lv}", C, C, k)
        conv(f"head{s}", C, config.out_channels, 1)
    for name, p in params.items():
        p.name = name
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


class RecurrentHourglassNet:
    def __init__(self, config: NetworkConfig, params: dict[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def zero_state(self, batch: int, height: int, width: int) -> RecurrentState:
        return RecurrentState.zeros(self.config, batch, height, width)

    def stacked_forward(self, frame: Tensor, state: RecurrentState) -> tuple[list[Tensor], RecurrentState]:
        """Return the head output of every stack and the updated state."""
        cfg = self.config
        outs, new_hidden = [], []
        inp = frame
        for s in range(cfg.stacks):
            feats, hs = hourglass_forward(inp, state.hidden[s], self.params, f"hg{s}", cfg)
            head = ops.conv2d(feats, self.params[f"head{s}.w"], self.params[f"head{s}.b"])
            outs.append(head)
            new_hidden.append(hs)
            inp = ops.concat_channels(head, frame)
        return outs, RecurrentState(new_hidden)

    def run_sequence(self, frames: list[Tensor], state: RecurrentState | None = None):
        """Thread the recurrent state through ``frames`` (reset to zero unless given).

        Returns a list with one per-stack output list per frame, and the final state.
        """
        if len(frames) == 0:
            raise ValueError("empty frame sequence")
        B, _, H, W = frames[0].shape
        if state is None:
            state = self.zero_state(B, H, W)
        results = []
        for f in frames:
            if f.shape != frames[0].shape:
                raise ValueError(f"frame shape {f.shape} differs from {frames[0].shape}")
            outs, state = self.stacked_forward(f, state)
            results.append(outs)
        return results, state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {a.shape} != {p.shape}")
            p.data = np.ascontiguousarray(a, dtype=get_default_dtype())
