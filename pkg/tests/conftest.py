import numpy as np
import pytest

from wtal_collab.config import ExperimentConfig
from wtal_collab.data import Dataset, load_dataset
from wtal_collab.synth import SynthSpec, generate, synthesize

TINY_SPEC = dict(num_videos=12, num_classes=4, dim=8, t_min=40, t_max=60, seg_count=(2, 3),
                 seg_len=(6, 10), vlp_bleed=3, seed=3)

FAST = dict(T_sample=32, warmup_iters=4, iters_per_step=3, cycles=1, batch_videos=2,
            cbp_d_model=16, cbp_heads=2, vlp_heads=2, n_prompts=2)


def in_memory(spec, split=None):
    records, features, meta = synthesize(spec)
    meta = {**meta, "num_classes": spec.num_classes}
    if split is not None:
        records = [r for r in records if r.split == split]
    return Dataset(records, features, spec.num_classes, meta, digest="mem")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return SynthSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    return in_memory(tiny_spec, "train")


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory, tiny_spec):
    out = tmp_path_factory.mktemp("tiny")
    generate(tiny_spec, out)
    return out


@pytest.fixture(scope="session")
def tiny_disk_train(tiny_dir):
    return load_dataset(tiny_dir, "train")


@pytest.fixture
def fast_cfg():
    return ExperimentConfig(**FAST)


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; a test that dies before recording logs FAIL."""
    seen = []

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        seen.append(line)
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    yield record
    if not seen:
        line = f"FAIL {request.node.name}: raised before reporting"
        ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: s.split("criterion ")[-1]):
            terminalreporter.write_line(line)
