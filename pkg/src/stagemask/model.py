"""Multi-stage mask model: stage chaining, fusion wiring, losses, enhancement.

Stage 1 sees the input magnitude, stage 2 the first estimate, and every later
stage sees a fusion of (previous mask applied to the original magnitude) with
the running estimate.  Estimates cascade multiplicatively, so they can only
shrink: ``est[k] = mask[k] * est[k-1]`` with ``est[0]`` the input.

Forward passes run over mini-batches held as lists of (F, T_i) tensors; batch
normalization couples the items in train mode (statistics over batch x time),
everything else treats them independently.  ``forward``/``backward`` wrap the
batched path for the common single-utterance case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp, nn
from .blocks import FusionBlock, Stage
from .nn import Array, ParamStore


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyper-parameters plus the STFT geometry and init seed."""

    stages: int
    hidden: int
    bottleneck: int
    stacks: int
    blocks_per_stack: int
    kernel: int = 3
    fft_size: int = 512
    hop: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("stages", "hidden", "bottleneck", "stacks", "blocks_per_stack"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.fft_size < 4 or self.fft_size % 2 != 0:
            raise ValueError(f"fft_size must be even and >= 4, got {self.fft_size}")
        if self.hop < 1:
            raise ValueError(f"hop must be >= 1, got {self.hop}")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def num_fusions(self) -> int:
        return max(0, self.stages - 2)


@dataclass
class BatchTrace:
    """Everything one batched forward produced, plus caches when training.

    ``masks[k][i]`` is stage k+1's mask for item i; ``estimates[k][i]`` the
    cascade after stage k, with ``estimates[0]`` the inputs themselves.
    """

    inputs: list[Array]
    masks: list[list[Array]]
    estimates: list[list[Array]]
    fused: list[list[Array]]
    mode: str
    stage_caches: list | None = None
    fusion_caches: list | None = None

    @property
    def n_items(self) -> int:
        return len(self.inputs)


@dataclass
class ForwardTrace:
    """Single-utterance view over a batch-of-one trace."""

    input: Array
    masks: list[Array]
    estimates: list[Array]  # estimates[0] is the input, estimates[k] after stage k
    fused: list[Array]
    mode: str
    batch: BatchTrace


class MultiStageModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        f = config.freq_bins
        self.stages = [
            Stage(
                self.store,
                f"stage{k + 1}",
                f,
                config.bottleneck,
                config.hidden,
                config.kernel,
                config.stacks,
                config.blocks_per_stack,
                rng,
            )
            for k in range(config.stages)
        ]
        self.fusions = [
            FusionBlock(self.store, f"fusion{k}", f, rng)
            for k in range(3, config.stages + 1)
        ]

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.config.freq_bins:
            raise ValueError(
                f"expected ({self.config.freq_bins}, T) input, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError("input magnitude contains non-finite values")
        if x.min() < 0:
            raise ValueError("input magnitude must be non-negative")
        return x

    def forward_batch(
        self, xs: list[Array], mode: str = "eval", mask_hook=None
    ) -> BatchTrace:
        """Run all stages over a mini-batch in lockstep.

        ``mask_hook(stage_index, mask) -> mask`` substitutes each item's mask
        right after the sigmoid (eval-mode test hook only).
        """
        if not xs:
            raise ValueError("empty batch")
        xs = [self._check_input(x) for x in xs]
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train" and mask_hook is not None:
            raise ValueError("mask_hook is an eval-only test hook")

        train = mode == "train"
        masks: list[list[Array]] = []
        estimates: list[list[Array]] = [xs]
        fused: list[list[Array]] = []
        stage_caches = [] if train else None
        fusion_caches = [] if train else None
        for k, stage in enumerate(self.stages, start=1):
            if k == 1:
                xin = xs
            elif k == 2:
                xin = estimates[1]
            else:
                fc = {} if train else None
                masked = [m * x for m, x in zip(masks[k - 2], xs)]
                xin = self.fusions[k - 3].forward(masked, estimates[k - 1], fc)
                fused.append(xin)
                if train:
                    fusion_caches.append(fc)
            sc = {} if train else None
            stage_masks = stage.forward(xin, mode, sc)
            if train:
                stage_caches.append(sc)
            if mask_hook is not None:
                stage_masks = [mask_hook(k, m) for m in stage_masks]
            masks.append(stage_masks)
            estimates.append([m * e for m, e in zip(stage_masks, estimates[k - 1])])
        return BatchTrace(
            xs, masks, estimates, fused, mode, stage_caches, fusion_caches
        )

    def forward(self, x: Array, mode: str = "eval", mask_hook=None) -> ForwardTrace:
        batch = self.forward_batch([x], mode, mask_hook)
        return ForwardTrace(
            batch.inputs[0],
            [m[0] for m in batch.masks],
            [e[0] for e in batch.estimates],
            [f[0] for f in batch.fused],
            mode,
            batch,
        )

    # -- backward -----------------------------------------------------------

    def backward_batch(
        self, trace: BatchTrace, cleans: list[Array], scale: float = 1.0
    ) -> list[Array]:
        """Accumulate parameter gradients of ``scale * mean-over-items of the
        per-item total losses`` and return gradients w.r.t. the inputs."""
        if trace.mode != "train":
            raise ValueError("backward needs a trace from a train-mode forward")
        if len(cleans) != trace.n_items:
            raise ValueError(f"{len(cleans)} targets for {trace.n_items} items")
        k_stages = self.config.stages
        n = trace.n_items
        xs = trace.inputs
        est = trace.estimates
        g_est = [[np.zeros_like(x) for x in xs] for _ in range(k_stages + 1)]
        g_masks = [[np.zeros_like(x) for x in xs] for _ in range(k_stages)]
        gxs = [np.zeros_like(x) for x in xs]
        item_scale = scale / n
        for k in range(1, k_stages + 1):
            for i in range(n):
                g_est[k][i] += item_scale * nn.mean_abs_loss_backward(
                    est[k][i], cleans[i]
                )
        for k in range(k_stages, 0, -1):
            # est[k] = masks[k-1] * est[k-1], elementwise per item
            for i in range(n):
                g_masks[k - 1][i] += g_est[k][i] * est[k - 1][i]
                g_est[k - 1][i] += g_est[k][i] * trace.masks[k - 1][i]
            d_xin = self.stages[k - 1].backward(
                g_masks[k - 1], trace.stage_caches[k - 1]
            )
            if k == 1:
                for i in range(n):
                    gxs[i] += d_xin[i]
            elif k == 2:
                for i in range(n):
                    g_est[1][i] += d_xin[i]
            else:
                da, db = self.fusions[k - 3].backward(
                    d_xin, trace.fusion_caches[k - 3]
                )
                for i in range(n):
                    g_masks[k - 2][i] += da[i] * xs[i]
                    gxs[i] += da[i] * trace.masks[k - 2][i]
                    g_est[k - 1][i] += db[i]
        for i in range(n):
            gxs[i] += g_est[0][i]
        return gxs

    def backward(self, trace: ForwardTrace, clean: Array, scale: float = 1.0) -> Array:
        return self.backward_batch(trace.batch, [clean], scale)[0]

    # -- inference ----------------------------------------------------------

    def enhance(self, x: dsp.Waveform, mask_hook=None) -> dsp.Waveform:
        """Full pipeline: analyze, mask through all stages, resynthesize with
        the input's own phase, truncate to the input length.

        One hop of zeros is added on each side before analysis and sliced off
        after synthesis: overlap-add division is ill-conditioned for masked
        spectra at samples the window barely covers, so every real sample is
        kept in fully-overlapped territory instead.
        """
        if len(x) < self.config.fft_size:
            raise ValueError(
                f"input length {len(x)} is shorter than one frame "
                f"({self.config.fft_size})"
            )
        hop = self.config.hop
        win = dsp.hann_window(self.config.fft_size, hop)
        padded = dsp.Waveform(
            np.concatenate([np.zeros(hop), x.samples, np.zeros(hop)]), x.sample_rate
        )
        mag, phase = dsp.stft(padded, win)
        trace = self.forward(mag.values, "eval", mask_hook=mask_hook)
        out_mag = dsp.Spectrogram(
            trace.estimates[-1], hop, self.config.fft_size
        )
        out = dsp.istft(out_mag, phase, win, hop + len(x), x.sample_rate)
        return dsp.Waveform(out.samples[hop:], x.sample_rate)

    # -- bookkeeping --------------------------------------------------------

    def count_parameters(self) -> dict[str, int]:
        """Exact parameter counts by component (trainable tensors only)."""
        store = self.store
        sa = store.count("stage1.sa.")
        tcn = store.count("stage1.stack")
        glue = store.count("stage1.bottleneck.") + store.count("stage1.out_proj.")
        per_stage = store.count("stage1.")
        fusion = store.count("fusion3.") if self.fusions else 0
        return {
            "sa_block": sa,
            "tcn_blocks": tcn,
            "stage_glue": glue,
            "per_stage": per_stage,
            "fusion_block": fusion,
            "total": store.count(),
        }


def build_model(config: ModelConfig) -> MultiStageModel:
    """Deterministic seeded construction; same config twice gives
    bit-identical parameters."""
    return MultiStageModel(config)


def total_loss(trace: ForwardTrace, clean: Array) -> tuple[list[float], float]:
    """Per-stage mean absolute spectral errors and their sum.

    Stage k's loss compares ``mask[k] * est[k-1]`` (already cached as
    ``est[k]``) against the clean magnitude.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != trace.input.shape:
        raise ValueError(
            f"clean shape {clean.shape} != input shape {trace.input.shape}"
        )
    per_stage = [nn.mean_abs_loss(est, clean) for est in trace.estimates[1:]]
    return per_stage, float(sum(per_stage))


def total_loss_batch(
    trace: BatchTrace, cleans: list[Array]
) -> tuple[list[float], list[float]]:
    """Stage means over the batch and per-item totals (equal item weight)."""
    if len(cleans) != trace.n_items:
        raise ValueError(f"{len(cleans)} targets for {trace.n_items} items")
    per_item_stage = [
        [nn.mean_abs_loss(trace.estimates[k][i], cleans[i])
         for k in range(1, len(trace.estimates))]
        for i in range(trace.n_items)
    ]
    stage_means = [
        float(np.mean([row[k] for row in per_item_stage]))
        for k in range(len(per_item_stage[0]))
    ]
    item_totals = [float(sum(row)) for row in per_item_stage]
    return stage_means, item_totals
