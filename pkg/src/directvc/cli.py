"""directvc command line: corpus generation, training stages, conversion, evaluation, benchmarking.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .dsp import DspConfig, DspError, mfcc, read_wav, write_wav
from .eval import EvalError, mcd_batch, mcd_report_tsv
from .neural import NetworkError, build_network, load_checkpoint, save_checkpoint
from .pipeline import (FULL_ARCH, TOY_ARCH, Architecture, CascadePath, DirectPath, PipelineError, StageConfig,
                       synthesize_stage3_pairs, train_stage1, train_stage2, train_stage3)

log = logging.getLogger("directvc")

ARCHES = {"toy": TOY_ARCH, "full": FULL_ARCH,
          "bench": Architecture(cbhg_units=64, conv_bank_k=4, highway_layers=2, gru_units=64)}
RUNTIME_ERRORS = (DspError, EvalError, NetworkError, PipelineError, corpus_mod.CorpusError, OSError, ValueError)


class UsageError(Exception):
    pass


def _arch_from(args) -> Architecture:
    arch = ARCHES[args.arch]
    overrides = {k: getattr(args, k) for k in ("cbhg_units", "gru_units", "highway_layers", "conv_bank_k",
                                             "prenet_units", "mixtures") if getattr(args, k, None) is not None}
    return replace(arch, **overrides)


def _add_arch_flags(p):
    p.add_argument("--arch", choices=sorted(ARCHES), default="toy", help="architecture preset")
    p.add_argument("--cbhg-units", type=int)
    p.add_argument("--gru-units", type=int)
    p.add_argument("--highway-layers", type=int)
    p.add_argument("--conv-bank-k", type=int)
    p.add_argument("--prenet-units", type=int)
    p.add_argument("--mixtures", type=int)


def _parse_indices(text):
    if text is None:
        return None
    if ":" in text:
        a, b = text.split(":", 1)
        return set(range(int(a), int(b)))
    return {int(v) for v in text.split(",") if v}


def _load_stage(path, tag):
    if path is None:
        raise PipelineError(f"training needs the stage-{tag[-1]} checkpoint ({tag}); pass --{tag}")
    if not Path(path).exists():
        raise PipelineError(f"{tag} checkpoint not found: {path}")
    net, stage = load_checkpoint(path)
    if stage != tag:
        raise PipelineError(f"{path} is tagged {stage!r}, expected {tag!r}")
    return net


# ---------------------------------------------------------------- subcommands


def cmd_gen_corpus(args) -> int:
    if not args.out:
        raise UsageError("gen-corpus requires --out")
    spec = corpus_mod.CorpusSpec(utterances_per_speaker=args.utterances, utterance_seconds=args.seconds,
                                 seed=args.seed)
    manifest = corpus_mod.generate_corpus(spec, args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    if args.stage not in (1, 2, 3) or not args.out or not args.manifest:
        raise UsageError("train requires --stage {1,2,3}, --manifest and --out")
    # prerequisites are checked before any data is touched
    net1 = _load_stage(args.net1, "net1") if args.stage in (2, 3) else None
    net2 = _load_stage(args.net2, "net2") if args.stage == 3 else None
    corpus = corpus_mod.load_manifest(args.manifest)
    speakers = set(args.speakers.split(",")) if args.speakers else None
    corpus = corpus.select(speakers, _parse_indices(args.indices))
    cfg = StageConfig(segment_frames=args.segment_frames, segment_hop=args.segment_hop, epochs=args.epochs, batch_segments=args.batch,
                      learning_rate=args.lr, seed=args.seed, arch=_arch_from(args), warm_start=args.warm_start)
    if args.stage == 1:
        result = train_stage1(corpus, cfg, n_phones=args.phones)
    elif args.stage == 2:
        result = train_stage2(net1, corpus, cfg)
    else:
        pairs = synthesize_stage3_pairs(net1, net2, corpus)
        result = train_stage3(pairs, cfg, init_from=net2)
    tag = f"net{args.stage}"
    save_checkpoint(args.out, result.net, tag)
    load_checkpoint(args.out)
    loss_log = Path(args.loss_log or f"{args.out}.loss.tsv")
    loss_log.write_text("epoch\tloss\n" + "".join(f"{i}\t{v:.10g}\n" for i, v in enumerate(result.losses)))
    log.info("wrote %s (%s) and %s", args.out, tag, loss_log)
    return 0


def cmd_convert(args) -> int:
    if not args.model or not args.input or not args.out:
        raise UsageError("convert requires --model, --in and --out")
    dsp = DspConfig(griffin_lim_iters=args.gl_iters)
    if args.mode == "direct":
        if len(args.model) != 1:
            raise UsageError("direct mode takes exactly one checkpoint (net3)")
        path = DirectPath(_load_stage(args.model[0], "net3"), dsp)
    else:
        if len(args.model) != 2:
            raise UsageError("cascade mode takes two checkpoints (net1 net2)")
        path = CascadePath(_load_stage(args.model[0], "net1"), _load_stage(args.model[1], "net2"), dsp)
    spec, wav = path(read_wav(args.input, dsp.sample_rate))
    write_wav(args.out, wav)
    if args.spec_out:
        np.save(args.spec_out, spec.frames)
    return 0


def _eval_pairs(args):
    pairs = []
    if args.pairs:
        for lineno, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise EvalError(f"{args.pairs}:{lineno}: expected target<TAB>converted")
            root = Path(args.pairs).parent
            pairs.append((root / fields[0], root / fields[1]))
    targets, converted = args.target or [], args.converted or []
    if len(targets) != len(converted):
        raise UsageError("--target and --converted must be given the same number of times")
    pairs += [(Path(a), Path(b)) for a, b in zip(targets, converted)]
    if not pairs:
        raise UsageError("eval needs --pairs or --target/--converted")
    return pairs


def cmd_eval(args) -> int:
    pairs = _eval_pairs(args)
    feats = [(mfcc(read_wav(t)), mfcc(read_wav(c))) for t, c in pairs]
    report = mcd_batch(feats, args.align)
    text = mcd_report_tsv(report, [c.name for _, c in pairs])
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    arch = _arch_from(args)
    dsp = DspConfig()
    nets = {}
    for tag in ("net1", "net2", "net3"):
        path = getattr(args, tag)
        nets[tag] = _load_stage(path, tag) if path else None
    p = nets["net1"].config.output_dim if nets["net1"] else args.phones
    nets["net1"] = nets["net1"] or build_network(arch.network_config(dsp.mfcc_order, p, "softmax"), args.seed)
    nets["net2"] = nets["net2"] or build_network(arch.network_config(p, dsp.n_bins, "mdn"), args.seed + 1)
    nets["net3"] = nets["net3"] or build_network(arch.network_config(dsp.mfcc_order, dsp.n_bins, "mdn"), args.seed + 2)
    spec = corpus_mod.CorpusSpec(utterances_per_speaker=args.utterances, utterance_seconds=args.seconds, seed=args.seed)
    src = [i for i, s in enumerate(spec.speakers) if s.role == "source"][0]
    utts = [corpus_mod.render_corpus_utterance(spec, src, i)[0] for i in range(args.utterances)]
    from .experiment import run_benchmark

    table = run_benchmark(nets["net1"], nets["net2"], nets["net3"], utts, args.repeats, dsp)
    if args.out:
        Path(args.out).write_text(table.to_tsv())
    print(f"{args.utterances} utterances x {args.seconds:g} s, best of {args.repeats}, vocoding excluded")
    print(table.summary())
    return 0


def cmd_experiment(args) -> int:
    if not args.workdir:
        raise UsageError("experiment requires --workdir")
    from .experiment import ExperimentConfig, run_experiment

    res = run_experiment(args.workdir, ExperimentConfig(corpus=corpus_mod.CorpusSpec(seed=args.seed)))
    out = Path(args.workdir)
    save_checkpoint(out / "net1.pvc", res.net1, "net1")
    save_checkpoint(out / "net2.pvc", res.net2, "net2")
    save_checkpoint(out / "net3.pvc", res.net3, "net3")
    print(res.summary())
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="directvc", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON file of option defaults; command-line flags take precedence")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render the synthetic multi-speaker corpus")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utterances", type=int, default=20, help="utterances per speaker")
    p.add_argument("--seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3))
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--net1")
    p.add_argument("--net2")
    p.add_argument("--speakers", help="comma-separated speaker ids to train on")
    p.add_argument("--indices", help="utterance indices, 'a:b' or comma list")
    p.add_argument("--phones", type=int, help="phone inventory size (stage 1)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--segment-frames", type=int, default=401)
    p.add_argument("--segment-hop", type=int, help="segment hop in frames (default: --segment-frames)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warm-start", action="store_true", help="stage 3: initialize from net2")
    p.add_argument("--loss-log")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert a WAV with the direct network or the cascade")
    p.add_argument("--mode", choices=("direct", "cascade"), default="direct")
    p.add_argument("--model", nargs="+", help="net3 (direct) or net1 net2 (cascade)")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--spec-out", help="also save the pre-vocoder magnitude spectrogram (.npy)")
    p.add_argument("--gl-iters", type=int, default=60)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="MCD between target and converted WAVs")
    p.add_argument("--pairs", help="TSV of target<TAB>converted paths")
    p.add_argument("--target", action="append")
    p.add_argument("--converted", action="append")
    p.add_argument("--align", choices=("frame", "dtw"), default="frame")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="conversion time and parameter counts, cascade vs direct")
    p.add_argument("--net1")
    p.add_argument("--net2")
    p.add_argument("--net3")
    p.add_argument("--utterances", type=int, default=30)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--phones", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the table as TSV")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_bench, arch="bench")

    p = sub.add_parser("experiment", help="generate a corpus and run all stages plus MCD evaluation")
    p.add_argument("--workdir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_experiment)
    ap.subcommands = sub.choices
    return ap


def parse_args(argv=None):
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            defaults = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            ap.error(f"cannot read config {known.config}: {e}")
        command = next((a for a in argv if a in ap.subcommands), None)
        if command is not None:
            ap.subcommands[command].set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    return ap, ap.parse_args(argv)


def main(argv=None) -> int:
    ap, args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"directvc: error: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"directvc: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
