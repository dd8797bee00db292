"""End-to-end distillation experiment on a generated corpus.

Speaker roles come from the corpus spec: ``multi`` speakers train the phone
recognizer and supply stage-3 inputs, the ``target`` speaker trains stage 2,
and the ``source`` speaker is only ever converted. Utterance indices below
``n_train`` are used for training; the following ``n_eval`` indices are held
out. Phone accuracy is reported on the held-out utterances of the training
speakers and, separately, on the never-seen source speaker.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusSpec, generate_corpus, load_manifest, load_spec
from .dsp import DspConfig, mfcc, mfcc_from_magnitudes
from .eval import McdReport, mcd_batch
from .neural import Network
from .pipeline import (CascadePath, DirectPath, StageConfig, compute_ppg, source_features,
                       synthesize_stage3_pairs, train_stage1, train_stage2, train_stage3)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = CorpusSpec()
    stage1: StageConfig = StageConfig(epochs=30, batch_segments=4, learning_rate=3e-3, seed=1)
    stage2: StageConfig = StageConfig(epochs=60, batch_segments=2, learning_rate=2e-3, seed=2)
    # shorter overlapping windows give the direct network more, more varied updates per epoch
    stage3: StageConfig = StageConfig(epochs=30, batch_segments=4, learning_rate=3e-3, seed=3, warm_start=True,
                                      segment_frames=100, segment_hop=50)
    n_train: int = 10
    n_eval: int = 10
    align: str = "frame"


@dataclass
class ExperimentResult:
    net1: Network
    net2: Network
    net3: Network
    stage1_losses: list[float]
    stage2_losses: list[float]
    stage3_losses: list[float]
    stage1_accuracy: float
    stage1_source_accuracy: float
    unconverted: McdReport
    cascade: McdReport
    direct: McdReport
    eval_names: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return "\n".join([
            f"stage-1 held-out frame accuracy: {self.stage1_accuracy:.4f} "
            f"(unseen source speaker {self.stage1_source_accuracy:.4f})",
            f"MCD source vs target:   {self.unconverted.mean:8.3f} dB (sd {self.unconverted.stddev:.3f})",
            f"MCD cascade vs target:  {self.cascade.mean:8.3f} dB (sd {self.cascade.stddev:.3f})",
            f"MCD direct vs target:   {self.direct.mean:8.3f} dB (sd {self.direct.stddev:.3f})",
        ])


def roles(spec: CorpusSpec) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"multi": [], "source": [], "target": []}
    for s in spec.speakers:
        out.setdefault(s.role, []).append(s.id)
    return out


def _frame_accuracy(net1: Network, utterances, dsp: DspConfig) -> float:
    hits = total = 0
    for u in utterances:
        pred = compute_ppg(net1, source_features(u.load(), dsp)).frames.argmax(axis=1)
        hits += int(np.sum(pred == u.labels()))
        total += len(pred)
    return hits / max(total, 1)


def run_experiment(workdir, cfg: ExperimentConfig = ExperimentConfig(), dsp: DspConfig = DspConfig()) -> ExperimentResult:
    workdir = Path(workdir)
    manifest = workdir / "manifest.tsv"
    if not manifest.exists():
        generate_corpus(cfg.corpus, workdir, dsp)
    spec = load_spec(workdir) or cfg.corpus
    corpus = load_manifest(manifest)
    r = roles(spec)
    if not (r["multi"] and r["source"] and r["target"]):
        raise ValueError("corpus needs multi, source and target speaker roles")
    train_idx = set(range(cfg.n_train))
    eval_idx = set(range(cfg.n_train, cfg.n_train + cfg.n_eval))
    multi_train = corpus.select(set(r["multi"]), train_idx)

    log.info("stage 1 on %d utterances", len(multi_train))
    s1 = train_stage1(multi_train, cfg.stage1, dsp, n_phones=len(spec.phones))
    src_eval = corpus.select(set(r["source"][:1]), eval_idx)
    acc_multi = _frame_accuracy(s1.net, corpus.select(set(r["multi"]), eval_idx), dsp)
    acc_source = _frame_accuracy(s1.net, src_eval, dsp)

    log.info("stage 2")
    s2 = train_stage2(s1.net, corpus.select(set(r["target"][:1]), train_idx), cfg.stage2, dsp)
    log.info("stage 3 pair synthesis")
    pairs = synthesize_stage3_pairs(s1.net, s2.net, multi_train, dsp)
    s3 = train_stage3(pairs, cfg.stage3, init_from=s2.net)

    cascade, direct = CascadePath(s1.net, s2.net, dsp), DirectPath(s3.net, dsp)
    tgt_eval = {u.index: u for u in corpus.select(set(r["target"][:1]), eval_idx)}
    unconv, casc, dirc, names = [], [], [], []
    for u in src_eval:
        w = u.load()
        ref = mfcc(tgt_eval[u.index].load(), dsp)
        unconv.append((ref, mfcc(w, dsp)))
        casc.append((ref, mfcc_from_magnitudes(cascade.spectrogram(w).frames, dsp)))
        dirc.append((ref, mfcc_from_magnitudes(direct.spectrogram(w).frames, dsp)))
        names.append(u.name)
    return ExperimentResult(
        s1.net, s2.net, s3.net, s1.losses, s2.losses, s3.losses, acc_multi, acc_source,
        mcd_batch(unconv, cfg.align), mcd_batch(casc, cfg.align), mcd_batch(dirc, cfg.align), names,
    )


def run_benchmark(net1: Network, net2: Network, net3: Network, utterances, repeats: int = 3,
                  dsp: DspConfig = DspConfig()):
    """Time each network and both conversion paths on the same utterances (vocoding excluded)."""
    from .eval import SummaryTable, bench_convert
    from .neural import param_count
    from .pipeline import mdn_readout

    feats = [source_features(w, dsp) for w in utterances]
    ppgs = [compute_ppg(net1, m).frames for m in feats]
    r1 = bench_convert(lambda w: compute_ppg(net1, source_features(w, dsp)), utterances, repeats,
                       "Network 1", param_count(net1))
    r2 = bench_convert(lambda p: mdn_readout(net2, p), ppgs, repeats, "Network 2", param_count(net2))
    direct = bench_convert(DirectPath(net3, dsp), utterances, repeats, "Network 3")
    cascade = bench_convert(CascadePath(net1, net2, dsp), utterances, repeats, "Baseline (Network 1 + Network 2)")
    return SummaryTable(r1, r2, direct, cascade, direct)
