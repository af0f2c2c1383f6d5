import numpy as np
import pytest

from weam import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def redraw(module, rng, scale=1.0):
    """Re-draw every parameter at O(1) scale.

    At the default 0.1 init many gradient coordinates sit around 1e-9, where
    central differences are dominated by round-off.
    """
    for p in module.parameters():
        p.data[...] = rng.uniform(-scale, scale, p.shape)
    return module


def tiny_model(seed=0, d=4, layers=1, src_vocab=7, tgt_vocab=7, dropout=0.0, scale=None, max_len=64):
    from weam.model import ModelConfig, Seq2SeqVAE

    rng = np.random.default_rng(seed)
    model = Seq2SeqVAE(ModelConfig(src_vocab, tgt_vocab, d=d, layers=layers, dropout=dropout, max_len=max_len), rng)
    if scale is not None:
        redraw(model, rng, scale)
    return model


def tiny_batch(seed=0, batch=2, src_vocab=7, tgt_vocab=7, max_src=4, max_tgt=3):
    """Random padded batch; targets end with EOS (id 2), content ids start at 3."""
    from weam.data import Batch

    rng = np.random.default_rng(seed)
    src = np.zeros((batch, max_src), np.int64)
    tgt = np.zeros((batch, max_tgt + 1), np.int64)
    for b in range(batch):
        n = max_src if b == 0 else int(rng.integers(1, max_src + 1))
        src[b, :n] = rng.integers(3, src_vocab, size=n)
        m = max_tgt if b == 0 else int(rng.integers(1, max_tgt + 1))
        tgt[b, :m] = rng.integers(3, tgt_vocab, size=m)
        tgt[b, m] = 2
    return Batch(src, src != 0, tgt, tgt != 0)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion, with any recorded detail

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        outcome = "xfailed" if hasattr(report, "wasxfail") and report.skipped else report.outcome
        _CRITERIA[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        label = {"passed": "PASS", "failed": "FAIL", "xfailed": "FAIL (known; expected failure)"}.get(outcome, outcome.upper())
        num, title = name.split("_")[2], " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({title}): {label}" + (f" -- {detail}" if detail else ""))
