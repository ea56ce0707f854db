import json

import pytest

from cinet.data import GeneratorConfig, generate_dataset, write_dataset
from cinet.model import ModelConfig
from cinet.train import STAGE_TERMS, StageConfig, TrainConfig

TINY_SIZE = 16


def tiny_config(**changes):
    """Three one-epoch stages on 16x16 images; fast enough for unit tests."""
    stages = (
        StageConfig(1, 6e-3, STAGE_TERMS[0]),
        StageConfig(1, 2e-3, STAGE_TERMS[1]),
        StageConfig(1, 2e-3, STAGE_TERMS[2], "poly"),
    )
    base = dict(seed=3, batch_size=2, stages=stages, model=ModelConfig(image_size=(TINY_SIZE, TINY_SIZE)))
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(GeneratorConfig(seed=1, height=TINY_SIZE, width=TINY_SIZE), 4)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_samples):
    path = tmp_path_factory.mktemp("tiny_data")
    write_dataset(path, tiny_samples, GeneratorConfig(seed=1, height=TINY_SIZE, width=TINY_SIZE))
    return path


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
