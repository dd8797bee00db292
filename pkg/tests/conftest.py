import numpy as np
import pytest

from directvc.corpus import CorpusSpec, render_corpus_utterance
from directvc.neural import NetworkConfig, build_network
from directvc.pipeline import Architecture

TINY_ARCH = Architecture(prenet_units=8, cbhg_units=16, conv_bank_k=2, bank_channels=4, highway_layers=1,
                         gru_units=8, mixtures=2)

_criteria: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str):
    _criteria[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_criteria[n])


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])


def toy_config(head="softmax", input_dim=3, output_dim=4, **kw):
    base = dict(prenet_units=4, cbhg_units=4, conv_bank_k=2, bank_channels=4, highway_layers=2, gru_units=4,
                mixtures=2, dropout_rate=0.2)
    base.update(kw)
    return NetworkConfig(input_dim=input_dim, output_dim=output_dim, head_kind=head, **base)


def jittered(cfg, seed=0, scale=0.3):
    """A network whose biases sit away from zero, so no ReLU is evaluated at its kink."""
    net = build_network(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for k in sorted(net.params):
        net.params[k] = net.params[k] + scale * rng.standard_normal(net.params[k].shape)
    return net


@pytest.fixture(scope="session")
def short_spec():
    return CorpusSpec(utterances_per_speaker=4, utterance_seconds=0.6)


@pytest.fixture(scope="session")
def short_waves(short_spec):
    """(speaker index, utterance index) -> (waveform, segments) for a few short renderings."""
    return {(s, u): render_corpus_utterance(short_spec, s, u) for s in range(6) for u in range(4)}
