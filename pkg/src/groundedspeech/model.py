"""Joint-space encoders.

The utterance encoder maps an acoustic feature matrix through a strided
1-D convolution (full border mode), a stack of residualized recurrent
highway layers, an attention pooling step, and L2 normalization into the
shared semantic space. The image encoder is a linear projection of a
precomputed image feature vector, likewise normalized. A text variant
replaces the convolution with an embedding lookup and takes the top
layer's final state instead of attention pooling.

One recurrent highway timestep runs L "microsteps": each produces a
candidate state h through tanh and a transform gate t through a sigmoid,
then interpolates h against the incoming state. Only the first microstep
sees the external input. Parameters live in a flat dict under canonical
names ("conv.K", "rhn1.H.U2", "attn.W", ...), which is also the checkpoint
entry naming scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .container import read_container, write_container
from .numcore import Tensor
from .seeding import substream


class VocabularyError(ValueError):
    """Token id outside the configured vocabulary."""


@dataclass(frozen=True)
class ModelConfig:
    kind: str                      # "speech" or "text"
    hidden_size: int
    rhn_layers: int                # stack depth k
    microsteps: int                # recurrence depth L
    image_dim: int
    # speech front end
    input_dim: int = 0             # acoustic feature dimension
    conv_length: int = 0
    conv_size: int = 0             # output channels
    conv_stride: int = 0
    attn_hidden: int = 0
    # text front end
    embed_dim: int = 0
    vocab_size: int = 0
    residual: bool = True

    def __post_init__(self):
        if self.kind not in ("speech", "text"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.hidden_size < 1 or self.rhn_layers < 1 or self.microsteps < 1:
            raise ValueError("hidden_size, rhn_layers and microsteps must all be >= 1")
        if self.kind == "speech" and (self.conv_length < 1 or self.conv_stride < 1):
            raise ValueError("speech models need conv_length >= 1 and conv_stride >= 1")

    def with_vocab(self, vocab_size: int) -> "ModelConfig":
        return replace(self, vocab_size=vocab_size)


# Named configurations; the four retrieval setups plus a desk-scale one.
PRESETS = {
    "flickr8k-speech": ModelConfig(
        kind="speech", input_dim=37, conv_length=6, conv_size=64, conv_stride=2,
        rhn_layers=4, microsteps=2, hidden_size=1024, attn_hidden=128, image_dim=4096),
    "coco-speech": ModelConfig(
        kind="speech", input_dim=13, conv_length=6, conv_size=64, conv_stride=3,
        rhn_layers=5, microsteps=2, hidden_size=512, attn_hidden=512, image_dim=4096),
    "flickr8k-text": ModelConfig(
        kind="text", embed_dim=300, rhn_layers=1, microsteps=1,
        hidden_size=1024, image_dim=4096),
    "coco-text": ModelConfig(
        kind="text", embed_dim=300, rhn_layers=1, microsteps=1,
        hidden_size=1024, image_dim=4096),
    # small enough to train and gradient-check on a laptop-scale corpus
    "micro-speech": ModelConfig(
        kind="speech", input_dim=13, conv_length=2, conv_size=4, conv_stride=1,
        rhn_layers=2, microsteps=2, hidden_size=8, attn_hidden=8, image_dim=16),
    "micro-text": ModelConfig(
        kind="text", embed_dim=6, rhn_layers=2, microsteps=2,
        hidden_size=8, image_dim=16),
}


@dataclass
class RhnLayerParams:
    """Weights of one stack layer: input projections (first microstep only)
    plus per-microstep state projections and biases, for both the candidate
    (H) and the transform gate (T)."""
    wh: Tensor
    wt: Tensor
    uh: list
    bh: list
    ut: list
    bt: list

    @property
    def microsteps(self) -> int:
        return len(self.uh)


@dataclass
class UtteranceEncoding:
    embedding: Tensor          # (hidden,) unit norm
    layer_states: list         # k tensors (n_steps, hidden), post-residual
    attention: np.ndarray      # (n_steps,) pooling weights
    n_steps: int


@dataclass
class TextEncoding:
    embedding: Tensor
    layer_states: list
    n_steps: int


# ---------------------------------------------------------------------------
# functional pieces


def conv1d_full(feats: np.ndarray, kernel: Tensor, bias: Tensor, stride: int,
                n_frames: int | None = None) -> Tensor:
    """Strided 1-D convolution with full border mode (s-1 zero frames each side).

    ``feats`` is a constant (T, D) input; ``kernel`` is (s, D, channels).
    Rows past ``n_frames`` are treated as padding and produce no windows, so
    appending padding frames never changes the output.
    """
    s, d_in, _ = kernel.data.shape
    x = np.asarray(feats, dtype=kernel.data.dtype)
    if x.ndim != 2 or x.shape[1] != d_in:
        raise nc.ShapeMismatchError(f"conv input {x.shape} does not match kernel {kernel.data.shape}")
    t = x.shape[0] if n_frames is None else int(n_frames)
    if t < 1:
        raise nc.EmptySequenceError("convolution over an empty sequence")
    padded = np.zeros((t + 2 * (s - 1), d_in), dtype=x.dtype)
    padded[s - 1:s - 1 + t] = x[:t]
    n_steps = (t + s - 2) // stride + 1
    pos = stride * np.arange(n_steps)[:, None] + np.arange(s)[None, :]
    windows = padded[pos].reshape(n_steps, s * d_in)
    flat_kernel = nc.reshape(kernel, (s * d_in, kernel.data.shape[2]))
    return nc.add(nc.matmul(Tensor(windows), flat_kernel), bias)


def conv_step_count(n_frames: int, conv_length: int, stride: int) -> int:
    return (n_frames + conv_length - 2) // stride + 1


def _microstep(xh_row, xt_row, state: Tensor, lp: RhnLayerParams, l: int) -> Tensor:
    """One recurrence microstep; ``xh_row``/``xt_row`` are the input
    projections, consumed only at l == 1."""
    i = l - 1
    h_pre = nc.add(nc.matmul(lp.uh[i], state), lp.bh[i])
    t_pre = nc.add(nc.matmul(lp.ut[i], state), lp.bt[i])
    if l == 1:
        h_pre = nc.add(h_pre, xh_row)
        t_pre = nc.add(t_pre, xt_row)
    h = nc.tanh(h_pre)
    t_gate = nc.sigmoid(t_pre)
    return nc.add(nc.mul(h, t_gate), nc.mul(state, 1.0 - t_gate))


def rhn_microstep(x: Tensor | None, state: Tensor, l: int, lp: RhnLayerParams) -> Tensor:
    """Single microstep on an explicit input vector (l == 1 consumes x)."""
    if not 1 <= l <= lp.microsteps:
        raise ValueError(f"microstep index {l} outside 1..{lp.microsteps}")
    if l == 1:
        if x is None:
            raise ValueError("microstep 1 requires the external input")
        return _microstep(nc.matmul(lp.wh, x), nc.matmul(lp.wt, x), state, lp, l)
    return _microstep(None, None, state, lp, l)


def rhn_layer(x_seq: Tensor, lp: RhnLayerParams, s0: Tensor | None = None) -> Tensor:
    """Run the recurrence over a (T, D) sequence, emitting the top-microstep
    state at every timestep as a (T, hidden) matrix. Initial state is zero."""
    t_len = x_seq.data.shape[0]
    hidden = lp.uh[0].data.shape[0]
    # input enters only at microstep 1: project the whole sequence at once
    xh = nc.matmul(x_seq, nc.transpose(lp.wh))
    xt = nc.matmul(x_seq, nc.transpose(lp.wt))
    state = s0 if s0 is not None else Tensor(np.zeros(hidden, dtype=x_seq.data.dtype))
    rows = []
    for t in range(t_len):
        state = _microstep(nc.get_row(xh, t), nc.get_row(xt, t), state, lp, 1)
        for l in range(2, lp.microsteps + 1):
            state = _microstep(None, None, state, lp, l)
        rows.append(state)
    return nc.stack_rows(rows)


def rhn_stack(x_seq: Tensor, layers: list, residual: bool = True,
              s0: list | None = None) -> list:
    """Compose stack layers; each residual layer adds its input elementwise.

    Residual addition only applies where input and output widths agree (a
    first layer fed d conv channels into a wider hidden size stays plain).
    Returns every layer's output sequence, post-residual.
    """
    outputs = []
    current = x_seq
    for n, lp in enumerate(layers):
        out = rhn_layer(current, lp, None if s0 is None else s0[n])
        if residual and current.data.shape[1] == out.data.shape[1]:
            out = nc.add(out, current)
        outputs.append(out)
        current = out
    return outputs


def attention_pool(states: Tensor, attn_w: Tensor, attn_u: Tensor, mask=None):
    """Weighted sum over timesteps; weights from a one-hidden-layer scorer.

    Returns (pooled (hidden,), weights (T,) tensor).
    """
    proj = nc.tanh(nc.matmul(states, nc.transpose(attn_w)))
    logits = nc.reshape(nc.matmul(proj, nc.transpose(attn_u)), (states.data.shape[0],))
    weights = nc.masked_time_softmax(logits, mask)
    return nc.matmul(weights, states), weights


def encode_image_vec(vec: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    v = np.asarray(vec, dtype=a.data.dtype)
    if v.shape != (a.data.shape[1],):
        raise nc.ShapeMismatchError(f"image vector {v.shape} does not match projection {a.data.shape}")
    return nc.l2_normalize(nc.affine(Tensor(v), a, b))


# ---------------------------------------------------------------------------
# parameter construction and the model facades


def _glorot(rng, shape, dtype):
    fan_in, fan_out = shape[1] if len(shape) > 1 else shape[0], shape[0]
    if len(shape) == 3:  # conv kernel (s, D, channels)
        fan_in, fan_out = shape[0] * shape[1], shape[2]
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


def _init_rhn_params(cfg: ModelConfig, rng, dtype, in_dim: int) -> dict:
    params = {}
    for n in range(1, cfg.rhn_layers + 1):
        width = in_dim if n == 1 else cfg.hidden_size
        params[f"rhn{n}.H.W"] = _glorot(rng, (cfg.hidden_size, width), dtype)
        params[f"rhn{n}.T.W"] = _glorot(rng, (cfg.hidden_size, width), dtype)
        for l in range(1, cfg.microsteps + 1):
            params[f"rhn{n}.H.U{l}"] = _glorot(rng, (cfg.hidden_size, cfg.hidden_size), dtype)
            params[f"rhn{n}.H.b{l}"] = np.zeros(cfg.hidden_size, dtype=dtype)
            params[f"rhn{n}.T.U{l}"] = _glorot(rng, (cfg.hidden_size, cfg.hidden_size), dtype)
            # transform gate starts mostly closed so early training carries state
            params[f"rhn{n}.T.b{l}"] = np.full(cfg.hidden_size, -1.0, dtype=dtype)
    return params


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """Fresh parameter dict under canonical names, Glorot-uniform weights."""
    rng = substream(seed, "init")
    arrays = {}
    if cfg.kind == "speech":
        arrays["conv.K"] = _glorot(rng, (cfg.conv_length, cfg.input_dim, cfg.conv_size), dtype)
        arrays["conv.b"] = np.zeros(cfg.conv_size, dtype=dtype)
        arrays.update(_init_rhn_params(cfg, rng, dtype, cfg.conv_size))
        arrays["attn.W"] = _glorot(rng, (cfg.attn_hidden, cfg.hidden_size), dtype)
        arrays["attn.U"] = _glorot(rng, (1, cfg.attn_hidden), dtype)
    else:
        if cfg.vocab_size < 1:
            raise ValueError("text model needs vocab_size set (ModelConfig.with_vocab)")
        arrays["emb.E"] = _glorot(rng, (cfg.vocab_size, cfg.embed_dim), dtype)
        arrays.update(_init_rhn_params(cfg, rng, dtype, cfg.embed_dim))
    arrays["img.A"] = _glorot(rng, (cfg.hidden_size, cfg.image_dim), dtype)
    arrays["img.b"] = np.zeros(cfg.hidden_size, dtype=dtype)
    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}


class _ModelBase:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def layer_params(self, n: int) -> RhnLayerParams:
        p = self.params
        ls = range(1, self.config.microsteps + 1)
        return RhnLayerParams(
            wh=p[f"rhn{n}.H.W"], wt=p[f"rhn{n}.T.W"],
            uh=[p[f"rhn{n}.H.U{l}"] for l in ls], bh=[p[f"rhn{n}.H.b{l}"] for l in ls],
            ut=[p[f"rhn{n}.T.U{l}"] for l in ls], bt=[p[f"rhn{n}.T.b{l}"] for l in ls])

    def stack_params(self) -> list:
        return [self.layer_params(n) for n in range(1, self.config.rhn_layers + 1)]

    def encode_image(self, vec: np.ndarray) -> Tensor:
        return encode_image_vec(vec, self.params["img.A"], self.params["img.b"])

    def cast(self, dtype):
        """Copy of the model with parameters in another precision."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True)
                  for k, v in self.params.items()}
        return type(self)(self.config, params)

    def save(self, path) -> None:
        write_container(path, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path, config: ModelConfig):
        arrays = read_container(path)
        expected = set(init_params(config, seed=0).keys())
        if set(arrays.keys()) != expected:
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise ValueError(f"checkpoint does not match config: missing {sorted(missing)}, unexpected {sorted(extra)}")
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


class SpeechModel(_ModelBase):
    """Utterance and image encoders sharing one joint space."""

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "SpeechModel":
        if config.kind != "speech":
            raise ValueError("SpeechModel needs a speech config")
        return cls(config, init_params(config, seed, dtype))

    def encode_utterance(self, feats: np.ndarray, n_frames: int | None = None) -> UtteranceEncoding:
        cfg = self.config
        conv_out = conv1d_full(feats, self.params["conv.K"], self.params["conv.b"],
                               cfg.conv_stride, n_frames=n_frames)
        layer_seqs = rhn_stack(conv_out, self.stack_params(), residual=cfg.residual)
        pooled, weights = attention_pool(layer_seqs[-1], self.params["attn.W"], self.params["attn.U"])
        return UtteranceEncoding(
            embedding=nc.l2_normalize(pooled),
            layer_states=layer_seqs,
            attention=weights.data.copy(),
            n_steps=conv_out.data.shape[0])


class TextModel(_ModelBase):
    """Word-sequence encoder: embedding lookup, stack, last state of the top layer."""

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "TextModel":
        if config.kind != "text":
            raise ValueError("TextModel needs a text config")
        return cls(config, init_params(config, seed, dtype))

    def encode_text(self, token_ids) -> TextEncoding:
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise VocabularyError("token sequence must be non-empty and 1-D")
        vocab = self.params["emb.E"].data.shape[0]
        if (ids < 0).any() or (ids >= vocab).any():
            bad = ids[(ids < 0) | (ids >= vocab)][0]
            raise VocabularyError(f"token id {int(bad)} outside vocabulary of {vocab}")
        embedded = nc.gather_rows(self.params["emb.E"], ids)
        layer_seqs = rhn_stack(embedded, self.stack_params(), residual=self.config.residual)
        final = nc.get_row(layer_seqs[-1], ids.size - 1)
        return TextEncoding(
            embedding=nc.l2_normalize(final),
            layer_states=layer_seqs,
            n_steps=ids.size)
