"""Trajectory classification directly on INR parameters.

Stream matrices stack every layer of the selected INR streams row by row.
A shared row-wise encoder (affine, batch norm, ReLU blocks) maps each row
to a wider feature vector, a column-wise max over rows gives one latent per
subject, and a small head turns it into a logit.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .inr import InrArchitecture, InrParams

STREAMS = ("space", "time", "combined")
_ALIASES = {"s": "space", "t": "time", "c": "combined", "com": "combined",
            "space": "space", "time": "time", "combined": "combined"}

MODEL_MAGIC = b"INRC0001"


class ModelFormatError(ValueError):
    pass


def parse_selection(sel) -> tuple[str, ...]:
    """Canonical stream tuple from e.g. ``"t+c"``, ``["space"]`` or ``{"t", "s"}``."""
    if isinstance(sel, str):
        parts = [p for p in sel.replace(",", "+").split("+") if p.strip()]
    else:
        parts = list(sel)
    names = set()
    for p in parts:
        key = p.strip().lower()
        if key not in _ALIASES:
            raise ValueError(f"unknown stream {p!r}")
        names.add(_ALIASES[key])
    if not names:
        raise ValueError("stream selection must not be empty")
    return tuple(s for s in STREAMS if s in names)


def selection_name(sel) -> str:
    return "+".join(s[0] for s in parse_selection(sel))


@dataclass
class StreamMatrix:
    values: np.ndarray
    selection: tuple[str, ...]
    subject_id: str | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def entries(self) -> int:
        return self.values.size


def stream_blocks(params: InrParams, stream: str) -> list[np.ndarray]:
    if stream == "space":
        if params.space_imag:
            return [m for pair in zip(params.space, params.space_imag) for m in pair]
        return list(params.space)
    if stream == "time":
        return list(params.time)
    if stream == "combined":
        return list(params.combined)
    raise ValueError(f"unknown stream {stream!r}")


def stack_stream_params(params: InrParams, selection, subject_id: str | None = None) -> StreamMatrix:
    """Row-stack the weight rows and bias row of every layer in the selected streams."""
    sel = parse_selection(selection)
    blocks = [b for s in sel for b in stream_blocks(params, s)]
    return StreamMatrix(np.concatenate(blocks, axis=0), sel, subject_id)


def stacked_entry_count(arch: InrArchitecture, selection) -> int:
    """Entry count of a stream matrix without building one."""
    from .inr import stream_parameter_count
    return sum(stream_parameter_count(arch, s) for s in parse_selection(selection))


# --------------------------------------------------------------------------
# encoder + head


@dataclass
class EncoderClassifier:
    """Row-wise encoder with a two-layer classification head.

    ``blocks`` are stacked ``(in + 1) x out`` matrices, each followed by
    batch norm and ReLU; ``head`` holds the two fully connected layers.
    """

    input_width: int
    widths: tuple[int, ...]
    head_hidden: int
    dropout: float
    blocks: list[dc.Tensor]
    norms: list[dc.BatchNormState]
    head: list[dc.Tensor]
    selection: tuple[str, ...] = ()

    @classmethod
    def create(cls, input_width: int, widths=(128, 256, 512), head_hidden: int = 64,
               dropout: float = 0.2, rng: np.random.Generator | None = None,
               dtype=np.float32, selection=()) -> "EncoderClassifier":
        widths = tuple(int(w) for w in widths)
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"encoder widths must strictly increase, got {widths}")
        rng = rng if rng is not None else np.random.default_rng(0)

        def layer(n_in, n_out):
            P = np.zeros((n_in + 1, n_out), dtype=dtype)
            bound = 1.0 / np.sqrt(n_in)
            P[:-1] = rng.uniform(-bound, bound, size=(n_in, n_out))
            return dc.Tensor(P, requires_grad=True)

        dims = (input_width,) + widths
        blocks = [layer(a, b) for a, b in zip(dims, dims[1:])]
        norms = [dc.BatchNormState.create(w, dtype) for w in widths]
        head = [layer(widths[-1], head_hidden), layer(head_hidden, 1)]
        return cls(input_width, widths, head_hidden, dropout, blocks, norms, head,
                   tuple(selection))

    def parameters(self) -> list[dc.Tensor]:
        out = list(self.blocks)
        for n in self.norms:
            out += [n.gamma, n.beta]
        return out + list(self.head)

    @property
    def dtype(self):
        return self.blocks[0].value.dtype


def _canonical_rows(M: np.ndarray) -> np.ndarray:
    # a fixed row order makes pooled outputs bitwise independent of input order
    return M[np.lexsort(M.T[::-1])]


def _encode_rows(model: EncoderClassifier, matrices: Sequence[np.ndarray], train: bool,
                 tape: dc.Tape | None) -> dc.Tensor:
    for M in matrices:
        if M.ndim != 2 or M.shape[1] != model.input_width:
            raise dc.DimensionError(
                f"stream matrix width {M.shape[-1]} does not match encoder input {model.input_width}")
    rows = [_canonical_rows(np.asarray(M, dtype=model.dtype)) for M in matrices]
    x = dc.Tensor(np.concatenate(rows, axis=0))
    for P, norm in zip(model.blocks, model.norms):
        x = dc.relu(dc.batchnorm_rows(dc.linear(P, x, tape), norm, train, tape), tape)
    return dc.maxpool_columns(x, [r.shape[0] for r in rows], tape)


def encode(P, model: EncoderClassifier, train: bool = False) -> np.ndarray:
    """Latent vector of one stream matrix (infer mode by default)."""
    M = P.values if isinstance(P, StreamMatrix) else np.asarray(P)
    return _encode_rows(model, [M], train, None).value[0]


def _logits(model, matrices, train, rng, tape):
    latent = _encode_rows(model, matrices, train, tape)
    h = dc.relu(dc.linear(model.head[0], latent, tape), tape)
    h = dc.dropout(h, model.dropout, rng, train, tape)
    return dc.linear(model.head[1], h, tape)


def predict_logits(model: EncoderClassifier, matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Inference-mode logits, one matrix at a time."""
    return np.array([float(_logits(model, [np.asarray(M)], False, None, None).value[0, 0])
                     for M in matrices])


@dataclass
class TrainingHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "train_acc"])
            for k, (l, a) in enumerate(zip(self.loss, self.accuracy), start=1):
                w.writerow([k, f"{l:.8g}", f"{a:.4f}"])


def train_classifier(matrices: Sequence[np.ndarray], labels: Sequence[int], rng: np.random.Generator,
                     epochs: int = 100, batch_size: int = 8, lr: float = 1e-3,
                     widths=(128, 256, 512), head_hidden: int = 64, dropout: float = 0.2,
                     dtype=np.float32, selection=()) -> tuple[EncoderClassifier, TrainingHistory]:
    """Mini-batch Adam on binary cross-entropy over logits."""
    y = np.asarray(labels, dtype=np.int64)
    if len(matrices) != y.size or y.size == 0:
        raise ValueError(f"{len(matrices)} matrices but {y.size} labels")
    if np.unique(y).size < 2:
        raise ValueError("training set must contain both classes")
    mats = [np.asarray(M, dtype=dtype) for M in matrices]
    model = EncoderClassifier.create(mats[0].shape[1], widths, head_hidden, dropout, rng, dtype, selection)
    params = model.parameters()
    arrays = [p.value for p in params]
    state = dc.AdamState(lr=lr)
    history = TrainingHistory()
    for _ in range(epochs):
        order = rng.permutation(y.size)
        total, correct = 0.0, 0
        for s in range(0, y.size, batch_size):
            idx = order[s:s + batch_size]
            if idx.size < 2:
                # a single subject still gives many rows for batch norm, but keep
                # batches comparable by folding the leftover into the previous one
                continue
            tape = dc.Tape()
            for p in params:
                p.zero_grad()
            z = _logits(model, [mats[i] for i in idx], True, rng, tape)
            loss = dc.bce_with_logit(z, y[idx], tape)
            tape.backward(loss)
            dc.adam_step(arrays, [p.grad for p in params], state)
            total += float(loss.value) * idx.size
            correct += int(np.sum((z.value[:, 0] > 0) == (y[idx] == 1)))
        seen = y.size - (y.size % batch_size == 1)
        history.loss.append(total / seen)
        history.accuracy.append(100.0 * correct / seen)
    return model, history


def classify_trajectory(params: InrParams, model: EncoderClassifier, selection=None) -> tuple[float, int]:
    """Probability of the AD-like class and the thresholded label (1 = AD-like)."""
    sel = parse_selection(selection) if selection is not None else model.selection
    if model.selection and sel != model.selection:
        raise ValueError(f"model was trained on {model.selection}, not {sel}")
    M = stack_stream_params(params, sel).values
    if M.shape[1] != model.input_width:
        raise ValueError(f"INR hidden size {M.shape[1]} does not match model input {model.input_width}")
    z = predict_logits(model, [M])[0]
    prob = float(dc.sigmoid(np.array([z]))[0])
    return prob, int(prob > 0.5)


# --------------------------------------------------------------------------
# INRC0001 persistence


def model_bytes(model: EncoderClassifier) -> bytes:
    sel = "+".join(model.selection).encode()
    out = [MODEL_MAGIC,
           struct.pack("<IIIIf", model.input_width, len(model.widths), model.head_hidden, len(sel),
                       model.dropout),
           struct.pack(f"<{len(model.widths)}I", *model.widths), sel]
    for norm in model.norms:
        for arr in (norm.running_mean, norm.running_var):
            out.append(np.asarray(arr, dtype="<f4").tobytes())
    for p in model.parameters():
        out.append(np.asarray(p.value, dtype="<f4").tobytes())
    return b"".join(out)


def write_model(model: EncoderClassifier, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def read_model(path) -> EncoderClassifier:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {raw[:8]!r}, expected {MODEL_MAGIC!r}")
    try:
        off = 8
        width, nw, hh, nsel, drop = struct.unpack_from("<IIIIf", raw, off)
        off += 20
        widths = struct.unpack_from(f"<{nw}I", raw, off)
        off += 4 * nw
        sel = raw[off:off + nsel].decode()
        off += nsel
        model = EncoderClassifier.create(width, widths, hh, float(drop), np.random.default_rng(0),
                                         np.float32, tuple(s for s in sel.split("+") if s))

        def take(n):
            nonlocal off
            if off + 4 * n > len(raw):
                raise ModelFormatError(f"{path}: truncated at offset {off}")
            a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32)
            off += 4 * n
            return a

        for norm in model.norms:
            n = norm.running_mean.size
            norm.running_mean = take(n)
            norm.running_var = take(n)
        for p in model.parameters():
            p.value[...] = take(p.value.size).reshape(p.shape)
    except struct.error as exc:
        raise ModelFormatError(f"{path}: malformed header: {exc}") from exc
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model

