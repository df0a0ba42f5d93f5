"""Stacked binary recurrent encoder and the twin reconstruction decoders.

The encoder is a plain LSTM with ``2 * n_bits`` units followed by a binary
LSTM with ``n_bits`` units whose hidden state *is* the bitcode.  Each decoder
(forward and reverse) is an LSTM with ``n_bits`` units, another with
``2 * n_bits`` units and a linear read-out to the feature dimension.  The
bitcode is both the initial hidden state of a decoder's first layer and its
input at every step.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import BatchNormState, Params

ENC1, ENC2 = "enc1", "enc2"
DIRECTIONS = ("fwd", "rev")

MODEL_MAGIC = b"MSH1"
MODEL_VERSION = 1
KIND_ENCODER, KIND_DECODER = 0, 1


class ModelFormatError(ValueError):
    pass


def _round_f32(params: Params) -> Params:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


@dataclass
class EncoderModel:
    n_features: int
    n_bits: int
    params: Params
    bn: BatchNormState

    def __post_init__(self):
        if self.n_bits <= 0 or self.n_features <= 0:
            raise nn.ConfigurationError("n_bits and n_features must be positive")
        expected = {
            f"{ENC1}.Wx": (self.n_features, 8 * self.n_bits),
            f"{ENC1}.Wh": (2 * self.n_bits, 8 * self.n_bits),
            f"{ENC2}.Wx": (2 * self.n_bits, 4 * self.n_bits),
            f"{ENC2}.Wh": (self.n_bits, 4 * self.n_bits),
            f"{ENC2}.gamma": (self.n_bits,),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise nn.ConfigurationError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, n_features: int, n_bits: int, seed: int = 0) -> "EncoderModel":
        if n_bits <= 0 or n_features <= 0:
            raise nn.ConfigurationError("n_bits and n_features must be positive")
        rng = np.random.default_rng(seed)
        params: Params = {}
        nn.init_lstm(params, ENC1, n_features, 2 * n_bits, rng)
        nn.init_lstm(params, ENC2, 2 * n_bits, n_bits, rng)
        nn.init_batchnorm(params, ENC2, n_bits)
        return cls(n_features, n_bits, params, BatchNormState.fresh(n_bits))

    @classmethod
    def zeros(cls, n_features: int, n_bits: int) -> "EncoderModel":
        model = cls.init(n_features, n_bits)
        model.params = nn.zeros_like(model.params)
        return model

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.n_features, self.n_bits,
                            {k: v.copy() for k, v in self.params.items()}, self.bn.copy())

    def rounded(self) -> "EncoderModel":
        """Copy with parameters and statistics rounded to float32 precision."""
        bn = self.bn.copy()
        bn.running_mean = bn.running_mean.astype(np.float32).astype(np.float64)
        bn.running_var = bn.running_var.astype(np.float32).astype(np.float64)
        return EncoderModel(self.n_features, self.n_bits, _round_f32(self.params), bn)


@dataclass
class DecoderModel:
    n_features: int
    n_bits: int
    params: Params

    @classmethod
    def init(cls, n_features: int, n_bits: int, seed: int = 1) -> "DecoderModel":
        rng = np.random.default_rng(seed)
        params: Params = {}
        for d in DIRECTIONS:
            nn.init_lstm(params, f"{d}.l1", n_bits, n_bits, rng)
            nn.init_lstm(params, f"{d}.l2", n_bits, 2 * n_bits, rng)
            nn.init_dense(params, f"{d}.out", 2 * n_bits, n_features, rng)
        return cls(n_features, n_bits, params)

    def copy(self) -> "DecoderModel":
        return DecoderModel(self.n_features, self.n_bits, {k: v.copy() for k, v in self.params.items()})

    def rounded(self) -> "DecoderModel":
        return DecoderModel(self.n_features, self.n_bits, _round_f32(self.params))


@dataclass
class EncoderState:
    h1: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    code: np.ndarray
    t: int = 0
    pre: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, model: EncoderModel) -> "EncoderState":
        n = model.n_bits
        # sign(0) = +1 gives the code before any clip has been seen
        return cls(np.zeros((1, 2 * n)), np.zeros((1, 2 * n)), np.zeros((1, n)), np.ones((1, n)))

    @property
    def bitcode(self) -> np.ndarray:
        return self.code[0].astype(np.int8)


def _check_features(model: EncoderModel, f: np.ndarray) -> None:
    if f.shape[-1] != model.n_features:
        raise nn.ConfigurationError(f"feature dimension {f.shape[-1]} != model's {model.n_features}")


def encode_step(model: EncoderModel, state: EncoderState, f: np.ndarray):
    """Advance ``state`` by one clip; returns ``(new_state, bitcode)``.

    Inference-mode batch norm is always used, so the result depends only on the
    model, the previous state and ``f``.  ``state`` itself is not modified.
    """
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    _check_features(model, f)
    h1, c1, _ = nn.lstm_forward(nn.lstm_view(model.params, ENC1), f, state.h1, state.c1)
    code, c2, pre, _ = nn.binary_lstm_forward(model.params, ENC2, model.bn, h1, state.code, state.c2)
    new = EncoderState(h1, c1, c2, code, state.t + 1, pre)
    return new, new.bitcode


def encode_sequence(model: EncoderModel, features: np.ndarray):
    """Encode a whole ``(T, n_features)`` sequence clip by clip.

    Returns ``(final, per_step, prebitcode)``: the last bitcode, an int8
    ``(T, n_bits)`` array with the bitcode after every clip, and the real
    activation whose sign gives ``final``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("encode_sequence needs a non-empty (T, n_features) array")
    _check_features(model, features)
    state = EncoderState.initial(model)
    per_step = np.empty((len(features), model.n_bits), dtype=np.int8)
    for t, f in enumerate(features):
        state, per_step[t] = encode_step(model, state, f)
    return per_step[-1].copy(), per_step, state.pre[0].copy()


# ------------------------------------------------------- batched training path

@dataclass
class EncoderTrace:
    caches1: list
    caches2: list
    codes: list
    pres: list
    bn_means: list
    bn_vars: list


def encoder_forward(model: EncoderModel, X: np.ndarray, training: bool = False,
                    relaxed: bool = False) -> EncoderTrace:
    """Run the encoder over ``X`` of shape ``(T, B, n_features)``.

    In training mode every timestep normalises the cell state with its own
    batch statistics; these are recorded in the trace but running statistics
    are left untouched (see :func:`update_running_stats`).  A batch of one
    has no spread to normalise by and always uses the running statistics.
    """
    T, B, _ = X.shape
    training = training and B > 1
    _check_features(model, X)
    n = model.n_bits
    h1 = np.zeros((B, 2 * n)); c1 = np.zeros((B, 2 * n))
    code = np.ones((B, n)); c2 = np.zeros((B, n))
    p1 = nn.lstm_view(model.params, ENC1)
    tr = EncoderTrace([], [], [], [], [], [])
    for t in range(T):
        h1, c1, cache1 = nn.lstm_forward(p1, X[t], h1, c1)
        code, c2, pre, cache2 = nn.binary_lstm_forward(model.params, ENC2, model.bn, h1, code, c2,
                                                       training=training, relaxed=relaxed)
        tr.caches1.append(cache1); tr.caches2.append(cache2)
        tr.codes.append(code); tr.pres.append(pre)
        if training:
            tr.bn_means.append(cache2.bn.mean); tr.bn_vars.append(cache2.bn.var)
    return tr


def update_running_stats(model: EncoderModel, trace: EncoderTrace) -> None:
    for mean, var in zip(trace.bn_means, trace.bn_vars):
        model.bn.update(mean, var)


def encoder_backward(model: EncoderModel, trace: EncoderTrace, d_code: np.ndarray | None = None,
                     d_pre: np.ndarray | None = None) -> Params:
    """BPTT from gradients on the final bitcode and/or the final prebitcode."""
    grads = nn.zeros_like(model.params)
    B = trace.codes[-1].shape[0]
    n = model.n_bits
    p1 = nn.lstm_view(model.params, ENC1)
    dh2 = np.zeros((B, n)) if d_code is None else d_code.copy()
    dc2 = np.zeros((B, n))
    dh1 = np.zeros((B, 2 * n)); dc1 = np.zeros((B, 2 * n))
    zero_pre = np.zeros((B, n))
    for t in range(len(trace.codes) - 1, -1, -1):
        dpre = d_pre if (t == len(trace.codes) - 1 and d_pre is not None) else zero_pre
        dx2, dh2, dc2 = nn.binary_lstm_backward(model.params, grads, ENC2, trace.caches2[t],
                                                dh2, dpre, dc2)
        _, dh1, dc1 = nn.lstm_backward(p1, grads, ENC1, trace.caches1[t], dh1 + dx2, dc1)
    return grads


@dataclass
class DecoderTrace:
    b: np.ndarray
    caches: dict
    outputs: dict


def decoder_forward(decoders: DecoderModel, b: np.ndarray, T: int) -> DecoderTrace:
    """Run both decoders for ``T`` steps from bitcodes ``b`` of shape ``(B, n_bits)``.

    ``outputs['rev'][j]`` reconstructs clip ``T - 1 - j``.
    """
    if T < 1:
        raise ValueError("decoder length must be at least 1")
    if b.shape[-1] != decoders.n_bits:
        raise nn.ConfigurationError(f"bitcode width {b.shape[-1]} != decoder's {decoders.n_bits}")
    B = b.shape[0]
    n = decoders.n_bits
    caches, outputs = {}, {}
    for d in DIRECTIONS:
        p1 = nn.lstm_view(decoders.params, f"{d}.l1")
        p2 = nn.lstm_view(decoders.params, f"{d}.l2")
        h1, c1 = b, np.zeros((B, n))
        h2, c2 = np.zeros((B, 2 * n)), np.zeros((B, 2 * n))
        steps, ys = [], np.empty((T, B, decoders.n_features))
        for t in range(T):
            h1, c1, k1 = nn.lstm_forward(p1, b, h1, c1)
            h2, c2, k2 = nn.lstm_forward(p2, h1, h2, c2)
            ys[t] = nn.dense_forward(decoders.params, f"{d}.out", h2)
            steps.append((k1, k2, h2))
        caches[d] = steps
        outputs[d] = ys
    return DecoderTrace(b, caches, outputs)


def decoder_backward(decoders: DecoderModel, trace: DecoderTrace, d_out: dict):
    """Return ``(grads, d_b)`` given gradients on both decoders' outputs."""
    grads = nn.zeros_like(decoders.params)
    b = trace.b
    B, n = b.shape
    db = np.zeros_like(b)
    for d in DIRECTIONS:
        p1 = nn.lstm_view(decoders.params, f"{d}.l1")
        p2 = nn.lstm_view(decoders.params, f"{d}.l2")
        dh1 = np.zeros((B, n)); dc1 = np.zeros((B, n))
        dh2 = np.zeros((B, 2 * n)); dc2 = np.zeros((B, 2 * n))
        for t in range(len(trace.caches[d]) - 1, -1, -1):
            k1, k2, h2 = trace.caches[d][t]
            dh2 = dh2 + nn.dense_backward(decoders.params, grads, f"{d}.out", h2, d_out[d][t])
            dx2, dh2, dc2 = nn.lstm_backward(p2, grads, f"{d}.l2", k2, dh2, dc2)
            dx1, dh1, dc1 = nn.lstm_backward(p1, grads, f"{d}.l1", k1, dh1 + dx2, dc1)
            db += dx1
        db += dh1  # initial hidden state of layer 1 is the bitcode
    return grads, db


def decode(decoders: DecoderModel, b: np.ndarray, T: int):
    """Reconstruct ``(forward, reverse)`` sequences of ``T`` clips from one bitcode.

    ``reverse[j]`` is the reverse decoder's estimate of clip ``T - 1 - j``.
    """
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    tr = decoder_forward(decoders, b, T)
    return tr.outputs["fwd"][:, 0, :], tr.outputs["rev"][:, 0, :]


# ------------------------------------------------------------ serialisation

def _write_blocks(fh, blocks: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ModelFormatError("truncated model file")
    return data


def _read_blocks(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    blocks = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, ln).decode()
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
        blocks[name] = data.reshape(shape).astype(np.float64)
    return blocks


def save_model(model: EncoderModel | DecoderModel, path: str | Path) -> None:
    """Write an encoder or decoder as a little-endian ``MSH1`` file.

    Layout: magic, u32 version, u32 kind, u32 n_bits, u32 n_features,
    u32 layer count with (input, hidden) u32 pairs, then named float32
    blocks (u32 name length, name, u32 ndim, u32 dims, row-major data).
    Encoders append their batch-norm running statistics as two more blocks.
    """
    if isinstance(model, EncoderModel):
        kind = KIND_ENCODER
        layers = [(model.n_features, 2 * model.n_bits), (2 * model.n_bits, model.n_bits)]
        blocks = dict(model.params)
        blocks["bn.running_mean"] = model.bn.running_mean
        blocks["bn.running_var"] = model.bn.running_var
    else:
        kind = KIND_DECODER
        n = model.n_bits
        layers = [(n, n), (n, 2 * n), (n, n), (n, 2 * n)]
        blocks = dict(model.params)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<4I", MODEL_VERSION, kind, model.n_bits, model.n_features))
        fh.write(struct.pack("<I", len(layers)))
        for a, b in layers:
            fh.write(struct.pack("<2I", a, b))
        _write_blocks(fh, blocks)


def load_model(path: str | Path) -> EncoderModel | DecoderModel:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: not a model file (bad magic)")
        version, kind, n_bits, n_features = struct.unpack("<4I", _read_exact(fh, 16))
        if version != MODEL_VERSION:
            raise ModelFormatError(f"{path}: unsupported model version {version}")
        (n_layers,) = struct.unpack("<I", _read_exact(fh, 4))
        _read_exact(fh, 8 * n_layers)
        blocks = _read_blocks(fh)
    if kind == KIND_ENCODER:
        bn = BatchNormState(blocks.pop("bn.running_mean"), blocks.pop("bn.running_var"))
        return EncoderModel(n_features, n_bits, blocks, bn)
    if kind == KIND_DECODER:
        return DecoderModel(n_features, n_bits, blocks)
    raise ModelFormatError(f"{path}: unknown model kind {kind}")
