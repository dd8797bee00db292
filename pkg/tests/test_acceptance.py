"""Acceptance criteria, one test each; every test records a PASS/FAIL line for the terminal summary."""
import math

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import TINY_ARCH, jittered, record_criterion, toy_config
from directvc.corpus import CorpusSpec, frame_labels, generate_corpus, render_corpus_utterance
from directvc.dsp import DspConfig
from directvc.eval import mcd, relative_reduction
from directvc.mdn import head_width, mdn_nll, mdn_pdf, nll_loss_fn, split_head, MdnParams
from directvc.neural import build_network, checkpoint_bytes, cross_entropy, grad_check, load_checkpoint, param_count, save_checkpoint
from directvc.pipeline import (FULL_ARCH, CascadePath, DirectPath, StageConfig, source_features,
                               synthesize_stage3_pairs, train_stage1, train_stage2, train_stage3)


def test_criterion_1_table_arithmetic():
    t = relative_reduction(12.13, 6.73)
    p = relative_reduction(12515404, 7268623)
    ok = t == 44.5 and p == 41.9
    record_criterion(1, ok, f"time reduction {t}%, parameter reduction {p}%")
    assert ok


def test_criterion_2_mcd_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 40))
    b = a.copy()
    b[:, 3] += 1.0
    d = rng.standard_normal((20, 40))
    zero = mcd(a, a)
    unit = mcd(a, b)
    expected = 10 / math.log(10) * math.sqrt(2)
    homog = max(abs(mcd(a, a + k * d) - k * mcd(a, a + d)) / (k * mcd(a, a + d)) for k in (0.1, 0.5, 2.0, 7.0))
    ok = zero == 0.0 and abs(unit - expected) < 1e-9 and homog < 1e-12
    record_criterion(2, ok, f"identical {zero} dB, unit difference {unit:.12f} dB, homogeneity rel err {homog:.1e}")
    assert ok


def test_criterion_3_mdn_correctness():
    rng = np.random.default_rng(1)
    worst_mass = 0.0
    for m in (1, 2, 3):
        for _ in range(3):
            p = split_head(rng.normal(0, 1, size=(1, 3 * m)), m, 1)
            mass, _ = quad(lambda x: mdn_pdf(p, np.array([[x]]))[0], -50, 50, points=sorted(p.means[0, :, 0]),
                           limit=400, epsabs=1e-12, epsrel=1e-12)
            worst_mass = max(worst_mass, abs(mass - 1.0))
    x = np.array([[0.4, -0.9]])
    at_mean, _ = mdn_nll(MdnParams(np.ones((1, 1)), x[:, None, :], np.ones((1, 1, 2))), x)
    ln2pi_err = abs(at_mean - math.log(2 * math.pi))

    mix, dim = 3, 2
    raw = rng.normal(0, 0.7, size=(4, head_width(mix, dim)))
    target = rng.standard_normal((4, dim))
    _, grad = mdn_nll(split_head(raw, mix, dim), target)
    worst_grad = 0.0
    for idx in np.ndindex(raw.shape):
        hi, lo = raw.copy(), raw.copy()
        hi[idx] += 1e-6
        lo[idx] -= 1e-6
        num = (mdn_nll(split_head(hi, mix, dim), target)[0] - mdn_nll(split_head(lo, mix, dim), target)[0]) / 2e-6
        worst_grad = max(worst_grad, abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-3))
    ok = worst_mass < 1e-6 and ln2pi_err < 1e-9 and worst_grad < 1e-6
    record_criterion(3, ok, f"quadrature |mass-1| {worst_mass:.1e}, ln(2pi) err {ln2pi_err:.1e}, "
                            f"gradient rel err {worst_grad:.1e}")
    assert ok


def test_criterion_4_gradient_integrity():
    x = np.random.default_rng(2).standard_normal((2, 6, 3))
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    soft = jittered(toy_config("softmax"), seed=1)
    labels = np.random.default_rng(3).integers(0, 4, size=(2, 6))
    rep_s = grad_check(soft, x, labels, cross_entropy, seed=5, mask=mask)
    mdn_cfg = toy_config("mdn", output_dim=2)
    mdn = jittered(mdn_cfg, seed=2)
    target = np.random.default_rng(4).standard_normal((2, 6, 2))
    rep_m = grad_check(mdn, x, target, nll_loss_fn(mdn_cfg.mixtures, 2), seed=6, mask=mask)
    sizes = (param_count(soft), param_count(mdn))
    ok = max(sizes) <= 5000 and rep_s.max_rel_error < 1e-4 and rep_m.max_rel_error < 1e-4
    record_criterion(4, ok, f"softmax stack ({sizes[0]} params) max rel err {rep_s.max_rel_error:.1e}, "
                            f"MDN stack ({sizes[1]} params) max rel err {rep_m.max_rel_error:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_5_latency_and_size():
    from directvc.cli import ARCHES
    from directvc.experiment import run_benchmark
    dsp = DspConfig()
    arch = ARCHES["bench"]
    n1 = build_network(arch.network_config(40, 8, "softmax"), 0)
    n2 = build_network(arch.network_config(8, 257, "mdn"), 1)
    n3 = build_network(arch.network_config(40, 257, "mdn"), 2)
    spec = CorpusSpec(utterances_per_speaker=30)
    utts = [render_corpus_utterance(spec, 4, i)[0] for i in range(30)]
    table = run_benchmark(n1, n2, n3, utts, repeats=3, dsp=dsp)
    ratio = table.proposed.total_seconds / table.baseline.total_seconds
    size_ok = []
    for phones in (8, 39, 61):
        c = [FULL_ARCH.network_config(40, phones, "softmax"), FULL_ARCH.network_config(phones, 257, "mdn"),
             FULL_ARCH.network_config(40, 257, "mdn")]
        counts = [param_count(build_network(cfg, 0)) for cfg in c]
        size_ok.append(counts[2] < counts[0] + counts[1])
    ok = ratio < 0.6 and all(size_ok)
    record_criterion(5, ok, f"net3 {table.proposed.total_seconds:.3f} s vs cascade {table.baseline.total_seconds:.3f} s "
                            f"(ratio {ratio:.3f}, reduction {table.time_reduction}%), parameter inequality holds "
                            f"for P=8,39,61: {all(size_ok)}")
    print(table.summary())
    assert ok


@pytest.mark.slow
def test_criterion_6_distillation_experiment(tmp_path):
    from directvc.experiment import run_experiment
    res = run_experiment(tmp_path / "corpus")
    print(res.summary())
    s2, s3 = res.stage2_losses[:5], res.stage3_losses[:5]
    a = res.stage1_accuracy > 0.9
    b = all(y < x for x, y in zip(s2, s2[1:])) and all(y < x for x, y in zip(s3, s3[1:]))
    c = res.cascade.mean < res.unconverted.mean and res.direct.mean < res.unconverted.mean
    d = res.direct.mean <= res.cascade.mean + 0.3
    ok = a and b and c and d
    record_criterion(6, ok, f"(a) held-out acc {res.stage1_accuracy:.3f} "
                            f"[unseen source speaker {res.stage1_source_accuracy:.3f}] {'ok' if a else 'FAIL'}; "
                            f"(b) early losses decrease {'ok' if b else 'FAIL'}; "
                            f"(c) MCD source {res.unconverted.mean:.2f} cascade {res.cascade.mean:.2f} "
                            f"direct {res.direct.mean:.2f} dB {'ok' if c else 'FAIL'}; "
                            f"(d) direct - cascade {res.direct.mean - res.cascade.mean:+.2f} dB {'ok' if d else 'FAIL'}")
    assert ok


def _tiny_run(short_spec):
    dsp = DspConfig()
    waves = {(s, u): render_corpus_utterance(short_spec, s, u) for s in (0, 1, 5) for u in (0, 1)}
    cfg = StageConfig(epochs=2, batch_segments=2, learning_rate=3e-3, seed=0, arch=TINY_ARCH)
    labelled = [(source_features(waves[s, u][0]), frame_labels(waves[s, u][1], dsp)) for s in (0, 1) for u in (0, 1)]
    n1 = train_stage1(labelled, cfg, n_phones=8).net
    n2 = train_stage2(n1, [waves[5, u][0] for u in (0, 1)], cfg).net
    n3 = train_stage3(synthesize_stage3_pairs(n1, n2, [waves[s, 0][0] for s in (0, 1)]), cfg).net
    src = render_corpus_utterance(short_spec, 4, 3)[0]
    gl = DspConfig(griffin_lim_iters=3)
    outs = [p(src) for p in (DirectPath(n3, gl), CascadePath(n1, n2, gl))]
    return (n1, n2, n3), outs


def test_criterion_7_determinism(short_spec, tmp_path):
    spec = CorpusSpec(utterances_per_speaker=1, utterance_seconds=0.5, seed=11)
    digests = []
    for d in ("a", "b"):
        generate_corpus(spec, tmp_path / d)
        digests.append(sorted((p.relative_to(tmp_path / d).as_posix(), p.read_bytes())
                              for p in (tmp_path / d).rglob("*") if p.is_file()))
    corpus_ok = digests[0] == digests[1]
    nets_a, outs_a = _tiny_run(short_spec)
    nets_b, outs_b = _tiny_run(short_spec)
    nets_ok = all(checkpoint_bytes(x) == checkpoint_bytes(y) for x, y in zip(nets_a, nets_b))
    conv_ok = all(np.array_equal(sa.frames, sb.frames) and np.array_equal(wa.samples, wb.samples)
                  for (sa, wa), (sb, wb) in zip(outs_a, outs_b))
    ok = corpus_ok and nets_ok and conv_ok
    record_criterion(7, ok, f"corpus bytes equal {corpus_ok}, stage 1-3 checkpoints equal {nets_ok}, "
                            f"conversions equal {conv_ok}")
    assert ok


def test_criterion_8_checkpoint_round_trip(short_spec, tmp_path):
    nets, outs = _tiny_run(short_spec)
    loaded, bytes_ok = [], True
    for i, net in enumerate(nets, 1):
        p, q = tmp_path / f"n{i}.pvc", tmp_path / f"n{i}b.pvc"
        save_checkpoint(p, net, f"net{i}")
        back, stage = load_checkpoint(p)
        save_checkpoint(q, back, stage)
        bytes_ok &= p.read_bytes() == q.read_bytes() and stage == f"net{i}"
        loaded.append(back)
    src = render_corpus_utterance(short_spec, 4, 3)[0]
    gl = DspConfig(griffin_lim_iters=3)
    after = [DirectPath(loaded[2], gl)(src), CascadePath(loaded[0], loaded[1], gl)(src)]
    same = all(np.array_equal(a[0].frames, b[0].frames) and np.array_equal(a[1].samples, b[1].samples)
               for a, b in zip(outs, after))
    ok = bytes_ok and same
    record_criterion(8, ok, f"save-load-save bytes identical {bytes_ok}, direct and cascade outputs identical {same}")
    assert ok
