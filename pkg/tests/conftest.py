import csv

import numpy as np
import pytest

from plce.dsp import write_wav
from plce.model import ModelConfig, build_model, save_weights
from plce.training import synthetic_noise, synthetic_speech

TINY = ModelConfig(stages=5, channels=4, lstm_units=8)


def write_sources(root, n=3, seconds=0.2, snrs=(0.0, 5.0, 10.0), seed=0):
    """Clean and noise WAVs plus a source manifest for ``plce mix``."""
    rng = np.random.default_rng(seed)
    rows = []
    k = int(seconds * 16000)
    for i in range(n):
        write_wav(root / f"c{i}.wav", synthetic_speech(k, rng))
        write_wav(root / f"n{i}.wav", synthetic_noise(2 * k, rng))
        rows.append([f"c{i}.wav", f"n{i}.wav", snrs[i % len(snrs)], 100 + i])
    with open(root / "sources.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clean_path", "noise_path", "snr_db", "seed"])
        w.writerows(rows)
    return root / "sources.csv"


@pytest.fixture(scope="session")
def mix_dir(tmp_path_factory):
    from plce.cli import main

    root = tmp_path_factory.mktemp("corpus")
    src = write_sources(root)
    assert main(["mix", "--manifest", str(src), "--out-dir", str(root / "mixed")]) == 0
    return root / "mixed"


@pytest.fixture(scope="session")
def tiny_model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "tiny.bin"
    save_weights(build_model(TINY, seed=11), path)
    return path


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_VERDICTS]

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
