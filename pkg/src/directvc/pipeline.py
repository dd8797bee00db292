"""Three training stages and the two conversion paths.

Stage 1 trains the phone recognizer (MFCC -> phone posteriors), stage 2 maps
posteriors of the target speaker to that speaker's log spectrogram, and
stage 3 trains a single MFCC -> target-spectrogram network on pairs produced
by running stages 1+2 as an aligner over a multi-speaker corpus.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dsp import DspConfig, MfccSequence, Spectrogram, Waveform, cmvn, griffin_lim, mfcc, stft
from .mdn import nll_loss_fn, point_estimate_linear
from .neural import (NetworkConfig, Network, adam_init, adam_step, backward, build_network,
                     clip_gradients, cross_entropy, forward, softmax)

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Shared structural hyper-parameters; networks 1-3 differ only in I/O dims and head."""

    prenet_layers: int = 3
    prenet_units: int | None = None
    dropout_rate: float = 0.2
    cbhg_units: int = 512
    conv_bank_k: int = 8
    bank_channels: int | None = None
    highway_layers: int = 8
    gru_units: int = 512
    mixtures: int = 5
    isotropic: bool = False

    def network_config(self, input_dim: int, output_dim: int, head_kind: str) -> NetworkConfig:
        return NetworkConfig(input_dim=input_dim, output_dim=output_dim, head_kind=head_kind, **asdict(self))

    @classmethod
    def from_network_config(cls, cfg: NetworkConfig) -> "Architecture":
        d = asdict(cfg)
        for k in ("input_dim", "output_dim", "head_kind"):
            d.pop(k)
        return cls(**d)


FULL_ARCH = Architecture()
TOY_ARCH = Architecture(prenet_units=32, cbhg_units=64, conv_bank_k=4, bank_channels=16, highway_layers=2,
                        gru_units=32, mixtures=5, dropout_rate=0.2)


@dataclass(frozen=True)
class StageConfig:
    segment_frames: int = 401
    segment_hop: int | None = None
    epochs: int = 20
    batch_segments: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    grad_clip: float = 10.0
    arch: Architecture = TOY_ARCH
    warm_start: bool = False

    def __post_init__(self):
        if self.segment_frames <= 0 or self.batch_segments <= 0 or self.epochs < 0:
            raise PipelineError("segment_frames and batch_segments must be positive, epochs non-negative")
        if self.segment_hop is not None and self.segment_hop <= 0:
            raise PipelineError("segment_hop must be positive")
        if self.learning_rate <= 0:
            raise PipelineError("learning_rate must be positive")


@dataclass
class PpgSequence:
    frames: np.ndarray

    def __post_init__(self):
        rows = self.frames.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9) or np.any(self.frames < 0):
            raise PipelineError("PPG rows must be probability vectors")


@dataclass
class Stage3Pair:
    input: MfccSequence
    target: Spectrogram

    def __post_init__(self):
        if self.input.n_frames != self.target.n_frames:
            raise PipelineError(f"pair frame counts differ: {self.input.n_frames} vs {self.target.n_frames}")


@dataclass
class TrainResult:
    net: Network
    losses: list[float] = field(default_factory=list)


# ---------------------------------------------------------------- features


def source_features(w: Waveform, dsp: DspConfig = DspConfig()) -> MfccSequence:
    return cmvn(mfcc(w, dsp))


def log_spectrogram(w: Waveform, dsp: DspConfig = DspConfig()) -> np.ndarray:
    return np.log1p(stft(w, dsp).frames)


def inverse_log(y: np.ndarray) -> np.ndarray:
    return np.maximum(np.expm1(y), 0.0)


# ---------------------------------------------------------------- training loop


def segment(n: int, length: int, hop: int) -> list[tuple[int, int]]:
    """Window bounds covering ``n`` frames; the last window may be short."""
    out, s = [], 0
    while True:
        out.append((s, min(n, s + length)))
        if s + length >= n:
            return out
        s += hop


def _make_batches(examples, cfg: StageConfig, epoch: int):
    hop = cfg.segment_hop or cfg.segment_frames
    segs = [(i, a, b) for i, (x, _) in enumerate(examples) for a, b in segment(len(x), cfg.segment_frames, hop)]
    order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(segs))
    for start in range(0, len(order), cfg.batch_segments):
        chosen = [segs[k] for k in order[start : start + cfg.batch_segments]]
        t = max(b - a for _, a, b in chosen)
        x0, y0 = examples[chosen[0][0]]
        xb = np.zeros((len(chosen), t, x0.shape[1]))
        yb = np.zeros((len(chosen), t) + y0.shape[1:], dtype=y0.dtype)
        mb = np.zeros((len(chosen), t))
        for j, (i, a, b) in enumerate(chosen):
            x, y = examples[i]
            xb[j, : b - a] = x[a:b]
            yb[j, : b - a] = y[a:b]
            mb[j, : b - a] = 1.0
        yield xb, yb, mb


def train_network(net: Network, examples, loss_fn, cfg: StageConfig,
                  on_epoch: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Minibatch Adam on per-frame-averaged loss; returns the per-epoch mean frame loss trajectory."""
    state = adam_init(net)
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        net.train()
        total, frames = 0.0, 0.0
        for xb, yb, mb in _make_batches(examples, cfg, epoch):
            out = forward(net, xb, seed=int(np.random.default_rng([cfg.seed, 11, step]).integers(2**62)), mask=mb)
            loss, dout = loss_fn(out, yb, mb)
            n = mb.sum()
            grads = backward(net, dout / n)
            clip_gradients(grads, cfg.grad_clip)
            adam_step(net, grads, state, cfg.learning_rate)
            total += loss
            frames += n
            step += 1
        losses.append(total / frames)
        net.eval()
        log.info("epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, net)
    net.eval()
    return TrainResult(net, losses)


# ---------------------------------------------------------------- stages


def _check_nonempty(items, what):
    if len(items) == 0:
        raise PipelineError(f"empty {what}")


def train_stage1(corpus, cfg: StageConfig, dsp: DspConfig = DspConfig(), n_phones: int | None = None,
                 on_epoch=None) -> TrainResult:
    """Phone recognizer on labelled multi-speaker audio.

    ``corpus`` is an iterable of utterances exposing ``load()``, ``labels()``
    and ``name`` (see corpus.Utterance), or of ``(MfccSequence, labels)`` tuples.
    """
    examples = []
    for u in corpus:
        if isinstance(u, tuple):
            m, labels, name = u[0], np.asarray(u[1]), "utterance"
        else:
            m, labels, name = source_features(u.load(dsp.sample_rate), dsp), u.labels(), u.name
        if len(labels) != m.n_frames:
            raise PipelineError(f"{name}: {len(labels)} labels for {m.n_frames} frames")
        examples.append((m.frames, labels))
    _check_nonempty(examples, "stage-1 corpus")
    p = n_phones or int(max(int(l.max()) for _, l in examples)) + 1
    net = build_network(cfg.arch.network_config(examples[0][0].shape[1], p, "softmax"), cfg.seed)
    return train_network(net, examples, cross_entropy, cfg, on_epoch)


def compute_ppg(net1: Network, m: MfccSequence) -> PpgSequence:
    if net1.config.head_kind != "softmax":
        raise PipelineError("phone recognizer must have a softmax head")
    if m.order != net1.config.input_dim:
        raise PipelineError(f"MFCC order {m.order} != recognizer input {net1.config.input_dim}")
    return PpgSequence(softmax(forward(net1.eval(), m.frames)))


def train_stage2(net1: Network, corpus, cfg: StageConfig, dsp: DspConfig = DspConfig(), on_epoch=None) -> TrainResult:
    """PPG -> target-speaker log-spectrogram mapper (MDN head) on target-speaker audio."""
    examples = []
    for u in corpus:
        w = u if isinstance(u, Waveform) else u.load(dsp.sample_rate)
        ppg = compute_ppg(net1, source_features(w, dsp))
        examples.append((ppg.frames, log_spectrogram(w, dsp)))
    _check_nonempty(examples, "stage-2 corpus")
    ncfg = cfg.arch.network_config(net1.config.output_dim, dsp.n_bins, "mdn")
    net = build_network(ncfg, cfg.seed)
    return train_network(net, examples, nll_loss_fn(ncfg.mixtures, ncfg.output_dim, ncfg.isotropic), cfg, on_epoch)


def mdn_readout(net: Network, x: np.ndarray) -> np.ndarray:
    """Point estimate of the network's mixture output (log-magnitude domain)."""
    c = net.config
    h = forward(net.eval(), x, hidden=True)
    return point_estimate_linear(h, net.params["out.w"], net.params["out.b"], c.mixtures, c.output_dim)


def cascade_spectrogram(net1: Network, net2: Network, m: MfccSequence, dsp: DspConfig = DspConfig()) -> Spectrogram:
    ppg = compute_ppg(net1, m)
    return Spectrogram(inverse_log(mdn_readout(net2, ppg.frames)), dsp.frame_hop / dsp.sample_rate, dsp.fft_size)


def direct_spectrogram(net3: Network, m: MfccSequence, dsp: DspConfig = DspConfig()) -> Spectrogram:
    if m.order != net3.config.input_dim:
        raise PipelineError(f"MFCC order {m.order} != network input {net3.config.input_dim}")
    return Spectrogram(inverse_log(mdn_readout(net3, m.frames)), dsp.frame_hop / dsp.sample_rate, dsp.fft_size)


def synthesize_stage3_pairs(net1: Network, net2: Network, corpus, dsp: DspConfig = DspConfig()) -> list[Stage3Pair]:
    """Aligned (normalized MFCC, cascade spectrogram) pairs for the direct network."""
    pairs = []
    for u in corpus:
        w = u if isinstance(u, Waveform) else u.load(dsp.sample_rate)
        m = source_features(w, dsp)
        pairs.append(Stage3Pair(m, cascade_spectrogram(net1, net2, m, dsp)))
    return pairs


def warm_start_from(net: Network, donor: Network) -> Network:
    """Copy every parameter except the input layer from ``donor`` (same architecture, same head)."""
    for k, v in donor.params.items():
        if k.startswith("prenet.0.") or k not in net.params or net.params[k].shape != v.shape:
            continue
        net.params[k] = v.copy()
    for k, v in donor.buffers.items():
        if k in net.buffers and net.buffers[k].shape == v.shape:
            net.buffers[k] = v.copy()
    return net


def train_stage3(pairs: Sequence[Stage3Pair], cfg: StageConfig, init_from: Network | None = None,
                 on_epoch=None) -> TrainResult:
    _check_nonempty(pairs, "stage-3 pair set")
    examples = [(p.input.frames, np.log1p(p.target.frames)) for p in pairs]
    ncfg = cfg.arch.network_config(examples[0][0].shape[1], examples[0][1].shape[1], "mdn")
    net = build_network(ncfg, cfg.seed)
    if cfg.warm_start:
        if init_from is None:
            raise PipelineError("warm_start requested without a donor network")
        warm_start_from(net, init_from)
    return train_network(net, examples, nll_loss_fn(ncfg.mixtures, ncfg.output_dim, ncfg.isotropic), cfg, on_epoch)


# ---------------------------------------------------------------- conversion


def convert(net3: Network, w: Waveform, dsp: DspConfig = DspConfig()) -> tuple[Spectrogram, Waveform]:
    spec = direct_spectrogram(net3, source_features(w, dsp), dsp)
    return spec, griffin_lim(spec, dsp)


def baseline_convert(net1: Network, net2: Network, w: Waveform, dsp: DspConfig = DspConfig()) -> tuple[Spectrogram, Waveform]:
    spec = cascade_spectrogram(net1, net2, source_features(w, dsp), dsp)
    return spec, griffin_lim(spec, dsp)


@dataclass
class DirectPath:
    """Conversion with network 3 alone. ``spectrogram`` is the timed region; ``vocode`` is not."""

    net3: Network
    dsp: DspConfig = DspConfig()

    def spectrogram(self, w: Waveform) -> Spectrogram:
        return direct_spectrogram(self.net3, source_features(w, self.dsp), self.dsp)

    def vocode(self, s: Spectrogram) -> Waveform:
        return griffin_lim(s, self.dsp)

    def __call__(self, w):
        s = self.spectrogram(w)
        return s, self.vocode(s)

    @property
    def networks(self):
        return [self.net3]


@dataclass
class CascadePath:
    net1: Network
    net2: Network
    dsp: DspConfig = DspConfig()

    def spectrogram(self, w: Waveform) -> Spectrogram:
        return cascade_spectrogram(self.net1, self.net2, source_features(w, self.dsp), self.dsp)

    def vocode(self, s: Spectrogram) -> Waveform:
        return griffin_lim(s, self.dsp)

    def __call__(self, w):
        s = self.spectrogram(w)
        return s, self.vocode(s)

    @property
    def networks(self):
        return [self.net1, self.net2]
