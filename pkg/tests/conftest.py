import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SCRIPTS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def hist(values):
    """ColorHistogram with the same 64-bin row on every channel."""
    from cdva.media import ColorHistogram

    row = np.zeros(64)
    for k, v in values.items():
        row[k] = v
    return ColorHistogram(np.tile(row, (3, 1)))


@pytest.fixture(scope="session")
def extractor():
    from cdva.config import PipelineConfig
    from cdva.extract import FrameExtractor

    return FrameExtractor(PipelineConfig())


@pytest.fixture(scope="session")
def small_corpus():
    """Extracted (database, queries, ground-truth records) of a 3-query planted corpus."""
    from cdva.config import PipelineConfig, load_models
    from cdva.extract import extract_manifest
    from cdva.media import VideoManifest
    from cdva.synth import planted_corpus

    db, qs, gt = planted_corpus(n_queries=3, n_distractors=5, seed=5)
    cfg = PipelineConfig()
    models = load_models(cfg)
    ext = lambda recs: [extract_manifest(VideoManifest.from_record(r), cfg, models).video for r in recs]
    return ext(db), ext(qs), gt


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
