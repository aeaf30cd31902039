import numpy as np
import pytest

from advrep.synth import SynthSpec, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six speakers per class, four 1.5 s utterances each."""
    spec = SynthSpec(n_speakers_per_class=6, utterances_per_speaker=4, duration_s=1.5, seed=3)
    out = tmp_path_factory.mktemp("corpus")
    return spec, generate_corpus(spec, out)


@pytest.fixture(scope="session")
def tiny_store(tiny_corpus):
    from advrep.dsp import featurize_manifest

    store, report = featurize_manifest(tiny_corpus[1])
    assert not report.errors
    return store


# acceptance criteria: one summary line per criterion, filled from test outcomes

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")
    config.stash[_CRITERIA] = {}


@pytest.fixture
def detail(request):
    """List the test appends human-readable measurements to."""
    notes = []
    request.node.stash_notes = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    notes = getattr(item, "stash_notes", [])
    item.config.stash[_CRITERIA][n] = (title, "PASS" if rep.passed else "FAIL", "; ".join(notes))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        title, status, notes = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{notes}]" if notes else ""))
