"""Adam optimization, zero-padded batching, the training loop, checkpoints.

Mini-batches are processed one utterance at a time with gradients scaled by
1/batch, which makes the batch objective exactly the mean of per-item losses.
Each padded item is trimmed back to its own frame count before the forward
pass, so padding can never leak into losses or statistics; the equality
between padded-batch and per-item losses is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import dsp
from .model import ModelConfig, MultiStageModel, total_loss_batch
from .nn import Array, ParamStore, f32_clean

CHECKPOINT_MAGIC = b"SATCN001"


class FormatError(ValueError):
    """Malformed checkpoint file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 16
    epochs: int = 80
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


class AdamState:
    """First/second moment tensors aligned with the store, plus step count."""

    def __init__(self, store: ParamStore):
        self.m = {name: np.zeros_like(p.value) for name, p in store.params()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.params()}
        self.step = 0


def adam_step(store: ParamStore, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name, p in store.params():
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"non-finite gradient in parameter {name}")
    if cfg.clip_norm is not None:
        norm_sq = sum(float((p.grad ** 2).sum()) for _, p in store.params())
        norm = norm_sq ** 0.5
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for _, p in store.params():
                p.grad *= scale
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, p in store.params():
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * p.grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * p.grad ** 2
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.value = f32_clean(p.value - update)
        p.grad[...] = 0.0


@dataclass
class PaddedBatch:
    """Equal-length sample arrays plus each item's true length."""

    noisy: Array  # (n, max_len)
    clean: Array
    lengths: np.ndarray
    sample_rate: int


def pad_batch(items: list[tuple[dsp.Waveform, dsp.Waveform]]) -> PaddedBatch:
    """Zero-pad every (noisy, clean) pair to the longest utterance."""
    if not items:
        raise ValueError("cannot pad an empty batch")
    rates = {noisy.sample_rate for noisy, _ in items} | {
        clean.sample_rate for _, clean in items
    }
    if len(rates) != 1:
        raise ValueError(f"mixed sample rates in batch: {sorted(rates)}")
    for noisy, clean in items:
        if len(noisy) != len(clean):
            raise ValueError(
                f"noisy/clean length mismatch: {len(noisy)} vs {len(clean)}"
            )
    lengths = np.array([len(noisy) for noisy, _ in items], dtype=np.int64)
    max_len = int(lengths.max())
    noisy_arr = np.zeros((len(items), max_len))
    clean_arr = np.zeros((len(items), max_len))
    for i, (noisy, clean) in enumerate(items):
        noisy_arr[i, : len(noisy)] = noisy.samples
        clean_arr[i, : len(clean)] = clean.samples
    return PaddedBatch(noisy_arr, clean_arr, lengths, items[0][0].sample_rate)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    stage_losses: tuple[float, ...]
    total: float

    def line(self) -> str:
        cols = [str(self.epoch), str(self.step)]
        cols += [repr(v) for v in self.stage_losses]
        cols.append(repr(self.total))
        return "\t".join(cols)


def batch_spectra(
    batch: PaddedBatch, win: dsp.AnalysisWindow
) -> tuple[list, list]:
    """Magnitudes of every item trimmed back to its own frame count, so
    batch padding cannot reach losses or statistics."""
    xs, cleans = [], []
    for i in range(batch.noisy.shape[0]):
        t_frames = dsp.frame_count(int(batch.lengths[i]), win)
        x_mag, _ = dsp.stft(dsp.Waveform(batch.noisy[i], batch.sample_rate), win)
        s_mag, _ = dsp.stft(dsp.Waveform(batch.clean[i], batch.sample_rate), win)
        xs.append(x_mag.values[:, :t_frames])
        cleans.append(s_mag.values[:, :t_frames])
    return xs, cleans


def batch_losses_and_grads(
    model: MultiStageModel, batch: PaddedBatch, win: dsp.AnalysisWindow
) -> tuple[list[float], float]:
    """One batched forward/backward; gradients of the mean per-item total
    loss accumulate into the model.  Returns per-stage means and the mean
    total."""
    xs, cleans = batch_spectra(batch, win)
    trace = model.forward_batch(xs, "train")
    stage_means, item_totals = total_loss_batch(trace, cleans)
    model.backward_batch(trace, cleans)
    return stage_means, float(np.mean(item_totals))


def fit(
    model: MultiStageModel,
    dataset: list[tuple[dsp.Waveform, dsp.Waveform]],
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
) -> list[StepRecord]:
    """Seeded-shuffle epoch loop over (noisy, clean) pairs.

    When ``checkpoint_path`` is given, the model with the best epoch-mean
    total loss seen so far is kept there; on divergence the last good file is
    preserved and TrainingDivergedError is raised.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    win = dsp.hann_window(model.config.fft_size, model.config.hop)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(model.store)
    records: list[StepRecord] = []
    best_total = float("inf")
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_totals = []
        for start in range(0, len(dataset), cfg.batch):
            chunk = order[start : start + cfg.batch]
            batch = pad_batch([dataset[i] for i in chunk])
            stage_means, total_mean = batch_losses_and_grads(model, batch, win)
            step += 1
            if not np.isfinite(total_mean):
                raise TrainingDivergedError(
                    f"total loss became non-finite at epoch {epoch} step {step}"
                )
            adam_step(model.store, state, cfg)
            records.append(StepRecord(epoch, step, tuple(stage_means), total_mean))
            epoch_totals.append(total_mean)
        epoch_mean = float(np.mean(epoch_totals))
        if checkpoint_path is not None and epoch_mean < best_total:
            best_total = epoch_mean
            save_checkpoint(model, checkpoint_path, state)
    return records


# ---------------------------------------------------------------------------
# checkpoint format: little-endian binary
#   magic "SATCN001"
#   8 x int32: stages hidden bottleneck stacks blocks_per_stack kernel fft_size hop
#   1 x int64: seed
#   1 x int32: tensor count
#   per tensor: int32 name length, UTF-8 name, int32 rank, rank x int32 extents,
#               float32 data (row-major)
# Tensors are parameters in store order, then buffers, then (optionally) Adam
# state under "adam.m." / "adam.v." prefixes plus a 1-element "adam.step".
# ---------------------------------------------------------------------------

def _tensor_bytes(name: str, value: Array) -> bytes:
    encoded = name.encode("utf-8")
    parts = [struct.pack("<i", len(encoded)), encoded]
    parts.append(struct.pack("<i", value.ndim))
    parts.append(struct.pack(f"<{value.ndim}i", *value.shape))
    parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(
    model: MultiStageModel, path: str, state: AdamState | None = None
):
    cfg = model.config
    tensors: list[tuple[str, Array]] = []
    tensors += [(name, p.value) for name, p in model.store.params()]
    tensors += list(model.store.buffers())
    if state is not None:
        tensors += [(f"adam.m.{name}", v) for name, v in state.m.items()]
        tensors += [(f"adam.v.{name}", v) for name, v in state.v.items()]
        tensors.append(("adam.step", np.array([float(state.step)])))
    blob = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<8i",
            cfg.stages,
            cfg.hidden,
            cfg.bottleneck,
            cfg.stacks,
            cfg.blocks_per_stack,
            cfg.kernel,
            cfg.fft_size,
            cfg.hop,
        ),
        struct.pack("<q", cfg.seed),
        struct.pack("<i", len(tensors)),
    ]
    blob += [_tensor_bytes(name, value) for name, value in tensors]
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated: needed {n} bytes, had {len(self.data) - self.offset}",
                self.offset,
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def i4(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def i8(self) -> int:
        return struct.unpack("<q", self.take(8))[0]


def load_checkpoint(path: str) -> tuple[MultiStageModel, AdamState | None]:
    """Rebuild a model (and optionally its optimizer state) from a file.

    The tensor list must cover every parameter and buffer exactly once with
    matching shapes, and the file must contain nothing after the last tensor.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic", 0)
    stages, hidden, bottleneck, stacks, blocks_per_stack, kernel, fft_size, hop = (
        struct.unpack("<8i", r.take(32))
    )
    seed = r.i8()
    try:
        config = ModelConfig(
            stages, hidden, bottleneck, stacks, blocks_per_stack,
            kernel, fft_size, hop, seed,
        )
    except ValueError as exc:
        raise FormatError(f"invalid config: {exc}", len(CHECKPOINT_MAGIC)) from exc
    n_tensors = r.i4()
    if n_tensors < 0:
        raise FormatError(f"negative tensor count {n_tensors}", r.offset - 4)
    tensors: dict[str, Array] = {}
    for _ in range(n_tensors):
        name_len = r.i4()
        if name_len <= 0:
            raise FormatError(f"bad name length {name_len}", r.offset - 4)
        name = r.take(name_len).decode("utf-8")
        rank = r.i4()
        if rank < 0:
            raise FormatError(f"bad rank {rank} for {name}", r.offset - 4)
        extents = struct.unpack(f"<{rank}i", r.take(4 * rank))
        count = int(np.prod(extents)) if rank else 1
        raw = r.take(4 * count)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}", r.offset)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(extents)
    if r.offset != len(data):
        raise FormatError(f"{len(data) - r.offset} trailing bytes", r.offset)

    model = MultiStageModel(config)
    for name, p in model.store.params():
        if name not in tensors:
            raise FormatError(f"missing parameter {name}", len(data))
        if tensors[name].shape != p.value.shape:
            raise FormatError(
                f"shape mismatch for {name}: file {tensors[name].shape} "
                f"vs model {p.value.shape}",
                len(data),
            )
        p.value = tensors.pop(name)
    for name, buf in model.store.buffers():
        if name not in tensors:
            raise FormatError(f"missing buffer {name}", len(data))
        if tensors[name].shape != buf.shape:
            raise FormatError(f"shape mismatch for buffer {name}", len(data))
        buf[...] = tensors.pop(name)

    state = None
    if tensors:
        if "adam.step" not in tensors:
            raise FormatError(
                f"unexpected tensors without optimizer state: {sorted(tensors)[:3]}",
                len(data),
            )
        state = AdamState(model.store)
        state.step = int(tensors.pop("adam.step")[0])
        for name, _ in model.store.params():
            for prefix, dest in (("adam.m.", state.m), ("adam.v.", state.v)):
                key = prefix + name
                if key not in tensors:
                    raise FormatError(f"missing optimizer tensor {key}", len(data))
                dest[name] = tensors.pop(key)
        if tensors:
            raise FormatError(f"unknown tensors: {sorted(tensors)[:3]}", len(data))
    return model, state
