import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four 12x12 views of the two-sphere scene with distractors; cheap enough for unit tests."""
    from prunefield.synth import (DistractorSpec, dataset_from_arrays, inject_distractors,
                                  render_clean, two_sphere_cameras, two_sphere_scene)

    scene = two_sphere_scene()
    cams, _ = two_sphere_cameras(4, 12)
    imgs, masks = [], []
    spec = DistractorSpec(per_view_probability=1.0, count_range=(1, 1), size_range=(0.1, 0.12), seed=3)
    for i, c in enumerate(cams):
        img, _ = render_clean(scene, c)
        dirty, m = inject_distractors(img, spec, i)
        imgs.append(dirty)
        masks.append(m)
    return dataset_from_arrays(np.stack(imgs), cams, masks=np.stack(masks))


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one summary line per acceptance criterion; printed after the run."""
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
