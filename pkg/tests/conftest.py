import pytest

from hcpc.config import RunConfig, load_config
from hcpc.datagen import generate_dataset, write_dataset

TINY = [
    "data.n_train=24",
    "data.n_valid=8",
    "data.n_test=8",
    "data.seq_len_frames=64",
    "frame.conv_channels=16",
    "frame.n_negatives=8",
    "segmenter.d_model=16",
    "segmenter.n_windows=8",
    "unit.d_prime=16",
    "unit.hidden=16",
    "unit.codebook_size=8",
    "train.batch_size=8",
    "train.pretrain_epochs=1",
    "train.joint_epochs=2",
    "train.warmup_epochs=1",
]


def tiny_config(*extra: str) -> RunConfig:
    return load_config(None, TINY + list(extra))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    manifest, examples = generate_dataset(tiny_config().data)
    write_dataset(manifest, examples, out)
    return out


# --- acceptance summary: one line per criterion -----------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    key = marker.args[0]
    ok, details = _criteria.get(key, (True, []))
    detail = dict(item.user_properties).get("detail")
    if report.when == "call" and detail:
        details = details + [detail]
    _criteria[key] = (ok and report.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k.split()[0])):
        ok, details = _criteria[key]
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
