"""Training regimes for the primary autoencoder and the look-ahead secondaries.

Regimes:

* ``ssth-rt``   autoencoder trained on full videos.
* ``ssth-rt+``  same, alternating full and truncated batches 1:1.
* ``ssth-rt++`` trained exactly like ``ssth-rt+`` (only the codebook differs).
* ``la-reco``   secondary encoder sees a prefix; the frozen decoders must
  reconstruct the whole sequence from its bitcode.
* ``la-code``   secondary encoder sees a prefix; its final prebitcode is pulled
  towards the frozen primary's full-video bitcode.

Batch losses are sums over the videos of the batch.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import FeatureSequence
from .encoder import (DecoderModel, EncoderModel, decoder_backward, decoder_forward,
                      encode_sequence, encoder_backward, encoder_forward, update_running_stats)

log = logging.getLogger(__name__)

PRIMARY_REGIMES = ("ssth-rt", "ssth-rt+", "ssth-rt++")
SECONDARY_REGIMES = ("la-reco", "la-code")
REGIMES = PRIMARY_REGIMES + SECONDARY_REGIMES
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass
class TrainingConfig:
    regime: str = "ssth-rt"
    n_bits: int = 32
    epochs: int = 60
    lr: float = 5e-3
    batch_size: int = 40
    alphas: tuple[float, ...] = ALPHA_GRID
    seed: int = 0
    bucket_width: int = 8
    grad_clip: float = nn.GRAD_CLIP_NORM

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.n_bits < 1 or self.epochs < 0 or self.batch_size < 1 or self.bucket_width < 1:
            raise ValueError("n_bits, batch_size and bucket_width must be positive, epochs >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas or any(not 0 < a <= 1 for a in self.alphas):
            raise ValueError("alphas must be a non-empty list of values in (0, 1]")

    @classmethod
    def secondary(cls, regime: str = "la-code", **kw) -> "TrainingConfig":
        kw.setdefault("epochs", 15)
        kw.setdefault("lr", 5e-4)
        return cls(regime=regime, **kw)

    @property
    def is_secondary(self) -> bool:
        return self.regime in SECONDARY_REGIMES


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(p) for p in raw.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw.strip("\"'")


def read_kv(path: str | Path, allowed: set[str]) -> dict:
    """Parse ``key = value`` lines (``#`` comments, comma-separated lists)."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}; expected one of {', '.join(sorted(allowed))}")
        values[key] = _parse_value(raw)
    return values


def read_config(path: str | Path | None = None, **overrides) -> TrainingConfig:
    """Build a :class:`TrainingConfig` from a ``key = value`` file plus overrides.

    Recognised keys are the config field names.  Secondary regimes get the
    secondary defaults unless the file or ``overrides`` set them.
    """
    values = read_kv(path, {f.name for f in fields(TrainingConfig)}) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "alphas" in values and not isinstance(values["alphas"], tuple):
        values["alphas"] = (values["alphas"],)
    if values.get("regime") in SECONDARY_REGIMES:
        return TrainingConfig.secondary(**values)
    return TrainingConfig(**values)


def write_config(cfg: TrainingConfig, path: str | Path) -> None:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ data handling

def observed_length(T: int, alpha: float) -> int:
    if not 0 < alpha <= 1:
        raise ValueError(f"observation level must lie in (0, 1], got {alpha}")
    # the epsilon absorbs binary representation error, e.g. 0.7 * 10 = 6.999...
    return max(1, math.floor(alpha * T + 1e-9))


def truncate(features: np.ndarray, alpha: float) -> np.ndarray:
    """First ``max(1, floor(alpha * T))`` clips of a sequence."""
    return features[:observed_length(len(features), alpha)]


@dataclass
class Batch:
    indices: np.ndarray  # positions in the dataset
    video_ids: np.ndarray
    X: np.ndarray  # (T, B, n_features), trimmed to the shortest member


def bucket_of(length: int, width: int) -> int:
    return length // width


def make_batches(dataset: Sequence[FeatureSequence], batch_size: int,
                 rng: np.random.Generator | int, bucket_width: int = 8) -> list[Batch]:
    """One epoch of batches drawn from length buckets, in random order.

    Videos are grouped by ``length // bucket_width``; each bucket is shuffled
    and cut into batches, and the batches of all buckets are shuffled together.
    Every batch is trimmed to its shortest member.
    """
    if not len(dataset):
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    buckets: dict[int, list[int]] = {}
    for i, seq in enumerate(dataset):
        buckets.setdefault(bucket_of(len(seq), bucket_width), []).append(i)
    groups = []
    for key in sorted(buckets):
        members = np.array(buckets[key])[rng.permutation(len(buckets[key]))]
        groups += [members[s:s + batch_size] for s in range(0, len(members), batch_size)]
    batches = []
    for gi in rng.permutation(len(groups)):
        idx = groups[gi]
        T = min(len(dataset[i]) for i in idx)
        X = np.stack([dataset[i].clips[:T] for i in idx], axis=1).astype(np.float64)
        batches.append(Batch(idx, np.array([dataset[i].video_id for i in idx]), X))
    return batches


# ------------------------------------------------------------------- losses

def loss_reconstruction(f: np.ndarray, fwd: np.ndarray, rev: np.ndarray) -> float:
    """Sum over clips of ``|f_j - fwd_j| + |f_j - rev~_j|`` (Euclidean norms).

    ``rev`` is in the reverse decoder's generation order, so ``rev[j]`` is
    compared with ``f[T - 1 - j]``.
    """
    f, fwd, rev = (np.asarray(a, dtype=np.float64) for a in (f, fwd, rev))
    if not f.shape == fwd.shape == rev.shape:
        raise ValueError(f"shape mismatch: {f.shape}, {fwd.shape}, {rev.shape}")
    nf, _ = nn.l2_norm_rows(f - fwd)
    nr, _ = nn.l2_norm_rows(f[::-1] - rev)
    return float(nf.sum() + nr.sum())


def loss_la_code(beta: np.ndarray, target: np.ndarray) -> float:
    """Euclidean distance between a prebitcode and a {-1, +1} target bitcode."""
    beta = np.asarray(beta, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if beta.shape != target.shape:
        raise ValueError(f"dimension mismatch: {beta.shape} vs {target.shape}")
    return float(np.sqrt(((beta - target) ** 2).sum()))


def _reconstruction_terms(X: np.ndarray, outputs: dict):
    """Batched reconstruction loss and its gradient w.r.t. decoder outputs."""
    nf, gf = nn.l2_norm_rows(outputs["fwd"] - X)
    nr, gr = nn.l2_norm_rows(outputs["rev"] - X[::-1])
    return float(nf.sum() + nr.sum()), {"fwd": gf, "rev": gr}


def primary_loss(enc: EncoderModel, dec: DecoderModel, X: np.ndarray,
                 training: bool = True, relaxed: bool = False) -> float:
    tr = encoder_forward(enc, X, training=training, relaxed=relaxed)
    return _reconstruction_terms(X, decoder_forward(dec, tr.codes[-1], X.shape[0]).outputs)[0]


def la_reco_loss(sec: EncoderModel, dec: DecoderModel, X_prefix: np.ndarray, X_full: np.ndarray,
                 training: bool = True, relaxed: bool = False) -> float:
    tr = encoder_forward(sec, X_prefix, training=training, relaxed=relaxed)
    outputs = decoder_forward(dec, tr.codes[-1], X_full.shape[0]).outputs
    return _reconstruction_terms(X_full, outputs)[0]


def la_code_loss(sec: EncoderModel, X_prefix: np.ndarray, targets: np.ndarray,
                 training: bool = True, relaxed: bool = False) -> float:
    tr = encoder_forward(sec, X_prefix, training=training, relaxed=relaxed)
    return float(nn.l2_norm_rows(tr.pres[-1] - targets)[0].sum())


def primary_loss_and_grads(enc: EncoderModel, dec: DecoderModel, X: np.ndarray,
                           training: bool = True, relaxed: bool = False):
    """Autoencoder loss on ``X`` (T, B, F) and gradients for both models."""
    tr = encoder_forward(enc, X, training=training, relaxed=relaxed)
    dtr = decoder_forward(dec, tr.codes[-1], X.shape[0])
    loss, d_out = _reconstruction_terms(X, dtr.outputs)
    dec_grads, db = decoder_backward(dec, dtr, d_out)
    enc_grads = encoder_backward(enc, tr, d_code=db)
    return loss, enc_grads, dec_grads, tr


def la_reco_loss_and_grads(sec: EncoderModel, dec: DecoderModel, X_prefix: np.ndarray,
                           X_full: np.ndarray, training: bool = True, relaxed: bool = False):
    """Frozen decoders rebuild the full ``X_full`` from the prefix's bitcode."""
    tr = encoder_forward(sec, X_prefix, training=training, relaxed=relaxed)
    dtr = decoder_forward(dec, tr.codes[-1], X_full.shape[0])
    loss, d_out = _reconstruction_terms(X_full, dtr.outputs)
    _, db = decoder_backward(dec, dtr, d_out)
    return loss, encoder_backward(sec, tr, d_code=db), tr


def la_code_loss_and_grads(sec: EncoderModel, X_prefix: np.ndarray, targets: np.ndarray,
                           training: bool = True, relaxed: bool = False):
    """Sum over the batch of ``|prebitcode - target|``; gradients for ``sec``."""
    tr = encoder_forward(sec, X_prefix, training=training, relaxed=relaxed)
    norms, g = nn.l2_norm_rows(tr.pres[-1] - targets)
    return float(norms.sum()), encoder_backward(sec, tr, d_pre=g), tr


# ----------------------------------------------------------------- training

@dataclass
class TrainingHistory:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def add(self, epoch: int, loss: float) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, l in zip(self.epochs, self.losses):
                w.writerow([e, repr(l)])


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    enc_ss, dec_ss, batch_ss, alpha_ss = ss.spawn(4)
    return (int(enc_ss.generate_state(1)[0]), int(dec_ss.generate_state(1)[0]),
            np.random.default_rng(batch_ss), np.random.default_rng(alpha_ss))


def _check_dataset(dataset: Sequence[FeatureSequence]) -> int:
    if not len(dataset):
        raise ValueError("training dataset is empty")
    dims = {s.n_features for s in dataset}
    if len(dims) != 1:
        raise ValueError(f"mixed feature dimensions in dataset: {sorted(dims)}")
    return dims.pop()


EpochCallback = Callable[[int, float], None]


def train_primary(config: TrainingConfig, dataset: Sequence[FeatureSequence],
                  encoder: EncoderModel | None = None, decoders: DecoderModel | None = None,
                  on_epoch: EpochCallback | None = None):
    """Train an encoder/decoder pair; returns ``(encoder, decoders, history)``.

    ``ssth-rt+`` and ``ssth-rt++`` truncate every second batch at an
    observation level drawn uniformly from ``config.alphas``.  Returned
    parameters are rounded to float32 so they equal what a saved model holds.
    """
    if config.regime not in PRIMARY_REGIMES:
        raise ValueError(f"{config.regime!r} is not a primary regime")
    n_features = _check_dataset(dataset)
    enc_seed, dec_seed, batch_rng, alpha_rng = _streams(config.seed)
    enc = encoder.copy() if encoder is not None else EncoderModel.init(n_features, config.n_bits, enc_seed)
    dec = decoders.copy() if decoders is not None else DecoderModel.init(n_features, config.n_bits, dec_seed)
    augment = config.regime != "ssth-rt"
    history = TrainingHistory()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for k, batch in enumerate(make_batches(dataset, config.batch_size, batch_rng, config.bucket_width)):
            X = batch.X
            if augment and k % 2 == 1:
                alpha = float(alpha_rng.choice(config.alphas))
                X = X[:observed_length(len(X), alpha)]
            loss, g_enc, g_dec, tr = primary_loss_and_grads(enc, dec, X)
            grads = nn.clip_grad_norm({**{"e:" + k_: v for k_, v in g_enc.items()},
                                       **{"d:" + k_: v for k_, v in g_dec.items()}}, config.grad_clip)
            enc.params = nn.sgd_step(enc.params, {k_[2:]: v for k_, v in grads.items() if k_[0] == "e"},
                                     config.lr)
            dec.params = nn.sgd_step(dec.params, {k_[2:]: v for k_, v in grads.items() if k_[0] == "d"},
                                     config.lr)
            update_running_stats(enc, tr)
            total += loss
            count += X.shape[1]
        history.add(epoch, total / count)
        log.info("%s epoch %d loss %.4f", config.regime, epoch, total / count)
        if on_epoch:
            on_epoch(epoch, total / count)
    return enc.rounded(), dec.rounded(), history


def full_video_codes(encoder: EncoderModel, dataset: Sequence[FeatureSequence]) -> np.ndarray:
    """Inference-mode full-video bitcodes, shape ``(len(dataset), n_bits)``."""
    return np.stack([encode_sequence(encoder, s.clips)[0] for s in dataset]).astype(np.float64)


def train_secondary(regime: str, primary: EncoderModel, decoders: DecoderModel | None,
                    config: TrainingConfig, dataset: Sequence[FeatureSequence],
                    on_epoch: EpochCallback | None = None):
    """Distil a predictive secondary encoder from frozen primary models.

    The secondary starts as a copy of ``primary`` and only ever sees a prefix
    of each batch (observation level drawn per batch from ``config.alphas``).
    Its batch norm keeps the primary's running statistics and runs in
    inference mode, so training optimises exactly the codes issued at query
    time.

    ``la-reco`` backpropagates the full-sequence reconstruction error through
    the frozen ``decoders``; ``la-code`` regresses the secondary's final
    prebitcode onto the primary's full-video bitcode.  Returns
    ``(secondary, history)``; ``primary`` and ``decoders`` are not modified.
    """
    if regime not in SECONDARY_REGIMES:
        raise ValueError(f"{regime!r} is not a secondary regime")
    if regime == "la-reco" and decoders is None:
        raise ValueError("la-reco needs the primary's trained decoders")
    n_features = _check_dataset(dataset)
    if primary.n_features != n_features or (decoders is not None and decoders.n_bits != primary.n_bits):
        raise ValueError("primary/decoder sizes do not match the dataset")
    if config.n_bits != primary.n_bits:
        config = replace(config, n_bits=primary.n_bits)
    _, _, batch_rng, alpha_rng = _streams(config.seed)
    sec = primary.copy()
    targets = full_video_codes(primary, dataset) if regime == "la-code" else None
    history = TrainingHistory()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for batch in make_batches(dataset, config.batch_size, batch_rng, config.bucket_width):
            alpha = float(alpha_rng.choice(config.alphas))
            X_prefix = batch.X[:observed_length(len(batch.X), alpha)]
            if regime == "la-code":
                loss, grads, _ = la_code_loss_and_grads(sec, X_prefix, targets[batch.indices],
                                                        training=False)
            else:
                loss, grads, _ = la_reco_loss_and_grads(sec, decoders, X_prefix, batch.X, training=False)
            sec.params = nn.sgd_step(sec.params, nn.clip_grad_norm(grads, config.grad_clip), config.lr)
            total += loss
            count += batch.X.shape[1]
        history.add(epoch, total / count)
        log.info("%s epoch %d loss %.4f", regime, epoch, total / count)
        if on_epoch:
            on_epoch(epoch, total / count)
    return sec.rounded(), history
