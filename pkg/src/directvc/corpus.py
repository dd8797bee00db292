"""Synthetic phone-labelled multi-speaker corpus and WAV manifest handling.

Each utterance is a random phone sequence rendered by additive harmonic
synthesis (voiced excitation at the speaker's pitch) plus spectrally shaped
noise, both weighted by a formant envelope that the speaker's formant scale
and spectral tilt modify. Every speaker renders the same phone sequence for a
given utterance index, so parallel references exist for evaluation even
though training never pairs them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DspConfig, Waveform, n_frames, read_wav, write_wav

CROSSFADE_S = 0.010


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticPhone:
    id: int
    formant_centers: tuple
    bandwidths: tuple
    amplitudes: tuple = ()
    voicing: float = 1.0
    noise: float = 0.05

    def __post_init__(self):
        if len(self.formant_centers) < 2 or len(self.bandwidths) != len(self.formant_centers):
            raise CorpusError(f"phone {self.id}: need >= 2 formants with matching bandwidths")
        if not self.amplitudes:
            object.__setattr__(self, "amplitudes", tuple(1.0 for _ in self.formant_centers))


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: str
    formant_scale: float
    pitch_hz: float
    spectral_tilt: float  # dB per octave
    role: str = "multi"

    def __post_init__(self):
        if not 0.7 <= self.formant_scale <= 1.4:
            raise CorpusError(f"speaker {self.id}: formant_scale {self.formant_scale} outside [0.7, 1.4]")
        if not 60 <= self.pitch_hz <= 400:
            raise CorpusError(f"speaker {self.id}: pitch {self.pitch_hz} outside [60, 400] Hz")


DEFAULT_PHONES = (
    SyntheticPhone(0, (730, 1090, 2440), (90, 110, 160)),
    SyntheticPhone(1, (270, 2290, 3010), (60, 100, 140), (1.0, 0.6, 0.5)),
    SyntheticPhone(2, (300, 870, 2240), (60, 90, 140), (1.0, 0.8, 0.3)),
    SyntheticPhone(3, (530, 1840, 2480), (70, 100, 140), (1.0, 0.7, 0.5)),
    SyntheticPhone(4, (570, 840, 2410), (70, 90, 150), (1.0, 0.9, 0.3)),
    SyntheticPhone(5, (4500, 6500), (900, 1100), (1.0, 0.8), voicing=0.0, noise=1.0),
    SyntheticPhone(6, (2500, 3500), (500, 700), (1.0, 0.7), voicing=0.0, noise=1.0),
    SyntheticPhone(7, (250, 1200, 2200), (50, 200, 250), (1.0, 0.1, 0.05), noise=0.02),
)

DEFAULT_SPEAKERS = (
    SyntheticSpeaker("multi0", 0.85, 100.0, -6.0),
    SyntheticSpeaker("multi1", 0.95, 140.0, -4.0),
    SyntheticSpeaker("multi2", 1.05, 180.0, -5.0),
    SyntheticSpeaker("multi3", 1.15, 240.0, -3.5),
    SyntheticSpeaker("source", 0.90, 115.0, -6.5, role="source"),
    SyntheticSpeaker("target", 1.25, 215.0, -2.5, role="target"),
)


@dataclass(frozen=True)
class CorpusSpec:
    phones: tuple = DEFAULT_PHONES
    speakers: tuple = DEFAULT_SPEAKERS
    utterances_per_speaker: int = 20
    utterance_seconds: float = 2.0
    seed: int = 0
    min_phone_s: float = 0.12
    max_phone_s: float = 0.28
    background_noise: float = 0.01
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.phones or not self.speakers:
            raise CorpusError("corpus needs at least one phone and one speaker")
        if self.utterances_per_speaker <= 0 or self.utterance_seconds <= 0:
            raise CorpusError("utterance count and length must be positive")
        ids = [s.id for s in self.speakers]
        if len(set(ids)) != len(ids):
            raise CorpusError("speaker ids must be unique")
        nyq = self.sample_rate / 2
        for p in self.phones:
            if any(not 0 < f < nyq for f in p.formant_centers):
                raise CorpusError(f"phone {p.id}: formant outside (0, {nyq}) Hz")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        d["phones"] = tuple(SyntheticPhone(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                            for p in d["phones"])
        d["speakers"] = tuple(SyntheticSpeaker(**s) for s in d["speakers"])
        return cls(**d)


@dataclass
class Segment:
    phone: int
    start: int
    end: int


def phone_sequence(spec: CorpusSpec, utt_index: int) -> list[Segment]:
    """Phone segmentation for utterance ``utt_index``; shared by every speaker."""
    rng = np.random.default_rng([spec.seed, 1, utt_index])
    n = int(round(spec.utterance_seconds * spec.sample_rate))
    segs, pos, prev = [], 0, -1
    while pos < n:
        choices = [p.id for p in spec.phones if p.id != prev] or [spec.phones[0].id]
        ph = int(rng.choice(choices))
        dur = int(rng.uniform(spec.min_phone_s, spec.max_phone_s) * spec.sample_rate)
        end = min(n, pos + dur)
        if n - end < spec.min_phone_s * spec.sample_rate / 2:
            end = n
        segs.append(Segment(ph, pos, end))
        pos, prev = end, ph
    return segs


def envelope(phone: SyntheticPhone, speaker: SyntheticSpeaker, freqs: np.ndarray) -> np.ndarray:
    f = np.asarray(freqs, dtype=np.float64)
    env = np.full(f.shape, 1e-3)
    for fc, bw, amp in zip(phone.formant_centers, phone.bandwidths, phone.amplitudes):
        fc, bw = fc * speaker.formant_scale, bw * speaker.formant_scale
        env += amp / (1.0 + ((f - fc) / (0.5 * bw)) ** 2)
    tilt = 10.0 ** (speaker.spectral_tilt * np.log2(np.maximum(f, 50.0) / 500.0) / 20.0)
    return env * tilt


def _segment_weights(segs: list[Segment], n: int, sample_rate: int) -> np.ndarray:
    """Per-sample mixing weight of every segment, with short linear crossfades."""
    ramp = max(1, int(CROSSFADE_S * sample_rate))
    t = np.arange(n)
    w = np.zeros((len(segs), n))
    for i, s in enumerate(segs):
        lo = s.start - ramp / 2 if i > 0 else -np.inf
        hi = s.end + ramp / 2 if i < len(segs) - 1 else np.inf
        up = np.clip((t - lo) / ramp, 0.0, 1.0) if np.isfinite(lo) else np.ones(n)
        down = np.clip((hi - t) / ramp, 0.0, 1.0) if np.isfinite(hi) else np.ones(n)
        w[i] = np.minimum(up, down)
    return w / np.maximum(w.sum(axis=0), 1e-12)


def render_utterance(segs: list[Segment], speaker: SyntheticSpeaker, phones, sample_rate: int = 16000,
                     noise_seed: int = 0, pitch_jitter: float = 0.0, background: float = 0.0) -> Waveform:
    by_id = {p.id: p for p in phones}
    n = segs[-1].end
    rng = np.random.default_rng(noise_seed)
    f0 = speaker.pitch_hz * (1.0 + pitch_jitter)
    k = np.arange(1, int(0.95 * (sample_rate / 2) / f0) + 1)
    hfreq = k * f0
    phases = rng.uniform(0, 2 * np.pi, size=len(k))
    weights = _segment_weights(segs, n, sample_rate)
    t = np.arange(n) / sample_rate

    amp = np.zeros((n, len(k)))
    for w, s in zip(weights, segs):
        ph = by_id[s.phone]
        if ph.voicing > 0:
            amp += np.outer(w, ph.voicing * envelope(ph, speaker, hfreq))
    voiced = np.einsum("nk,nk->n", amp, np.sin(2 * np.pi * np.outer(t, hfreq) + phases))

    noise = np.zeros(n)
    bins = np.fft.rfftfreq(n, 1.0 / sample_rate)
    for w, s in zip(weights, segs):
        ph = by_id[s.phone]
        white = rng.standard_normal(n)
        shaped = np.fft.irfft(np.fft.rfft(white) * envelope(ph, speaker, bins), n=n)
        noise += w * ph.noise * shaped * np.sqrt(len(k))
    x = voiced + noise
    x = 0.1 * x / max(np.sqrt(np.mean(x * x)), 1e-12)
    if background > 0:
        x = x + background * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


def frame_labels(segs: list[Segment], cfg: DspConfig) -> np.ndarray:
    """Phone id at the centre sample of every STFT frame."""
    total = segs[-1].end
    t = n_frames(total, cfg.frame_len, cfg.frame_hop)
    centers = np.arange(t) * cfg.frame_hop + cfg.frame_len // 2
    starts = np.array([s.start for s in segs])
    idx = np.searchsorted(starts, centers, side="right") - 1
    return np.array([segs[i].phone for i in idx], dtype=np.int64)


def utterance_seed(spec: CorpusSpec, speaker_index: int, utt_index: int) -> int:
    return int(np.random.default_rng([spec.seed, 2, speaker_index, utt_index]).integers(2**63))


def render_corpus_utterance(spec: CorpusSpec, speaker_index: int, utt_index: int,
                            noise_seed: int | None = None) -> tuple[Waveform, list[Segment]]:
    segs = phone_sequence(spec, utt_index)
    seed = utterance_seed(spec, speaker_index, utt_index) if noise_seed is None else noise_seed
    jitter = np.random.default_rng(seed).uniform(-0.02, 0.02)
    w = render_utterance(segs, spec.speakers[speaker_index], spec.phones, spec.sample_rate, seed, jitter,
                         spec.background_noise)
    return w, segs


@dataclass
class Utterance:
    audio_path: Path
    speaker: str
    label_path: Path | None = None
    _labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return self.audio_path.stem

    @property
    def index(self) -> int:
        """Trailing integer of the file stem (utterance index in generated corpora), or -1."""
        tail = self.name.rsplit("_", 1)[-1]
        return int(tail) if tail.isdigit() else -1

    def load(self, sample_rate: int = 16000) -> Waveform:
        return read_wav(self.audio_path, sample_rate)

    def labels(self) -> np.ndarray:
        if self.label_path is None:
            raise CorpusError(f"{self.audio_path}: no label file")
        if self._labels is None:
            text = self.label_path.read_text().split()
            self._labels = np.array([int(v) for v in text], dtype=np.int64)
        return self._labels


@dataclass
class Corpus:
    utterances: list[Utterance]
    root: Path | None = None

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def select(self, speakers=None, indices=None) -> "Corpus":
        keep = [u for u in self.utterances
                if (speakers is None or u.speaker in speakers) and (indices is None or u.index in indices)]
        return Corpus(keep, self.root)


def generate_corpus(spec: CorpusSpec, out_dir, cfg: DspConfig = DspConfig()) -> Path:
    """Render every (speaker, utterance) pair to WAV + label files; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create {out}: {e}") from e
    lines = []
    for si, spk in enumerate(spec.speakers):
        spk_dir = out / spk.id
        spk_dir.mkdir(exist_ok=True)
        for ui in range(spec.utterances_per_speaker):
            w, segs = render_corpus_utterance(spec, si, ui)
            stem = f"{spk.id}_{ui:03d}"
            wav_rel = Path(spk.id) / f"{stem}.wav"
            lab_rel = Path(spk.id) / f"{stem}.lab"
            try:
                write_wav(out / wav_rel, w)
                labels = frame_labels(segs, cfg)
                (out / lab_rel).write_text("".join(f"{v}\n" for v in labels))
            except OSError as e:
                raise CorpusError(f"failed writing {out / wav_rel}: {e}") from e
            lines.append(f"{wav_rel.as_posix()}\t{spk.id}\t{lab_rel.as_posix()}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    (out / "corpus.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> Corpus:
    """Parse a tab-separated manifest: audio_path, speaker_id, label_path or '-'.

    Relative paths resolve against the manifest's directory. Blank lines and
    lines starting with '#' are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    root = path.parent
    utts = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3 or not all(f.strip() for f in fields):
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        audio = root / fields[0].strip()
        if not audio.exists():
            raise CorpusError(f"{path}:{lineno}: missing audio file {audio}")
        label = None
        if fields[2].strip() != "-":
            label = root / fields[2].strip()
            if not label.exists():
                raise CorpusError(f"{path}:{lineno}: missing label file {label}")
        utts.append(Utterance(audio, fields[1].strip(), label))
    return Corpus(utts, root)


def load_spec(corpus_root) -> CorpusSpec | None:
    p = Path(corpus_root) / "corpus.json"
    return CorpusSpec.from_dict(json.loads(p.read_text())) if p.exists() else None
