import numpy as np
import pytest

from ovsemi.data_synth import SceneSpec, generate_scene
from ovsemi.ovs_teacher import OracleEmbedder, OVSTeacher, build_prompt_set
from ovsemi.trainer import TrainConfig, TrainData

ACCEPTANCE_LINES = []

SMALL_SPEC = SceneSpec(seed=1, image_size=(24, 24), radius_range=(4, 7))


def small_data(n_labeled=4, n_in=8, n_out=6, spec=SMALL_SPEC):
    scenes = [generate_scene(spec, i) for i in range(n_labeled + n_in)]
    oods = [generate_scene(spec, i, ood=True) for i in range(n_out)]
    data = TrainData([(s.image, s.label) for s in scenes[:n_labeled]],
                     [s.image for s in scenes[n_labeled:]],
                     [(f"o{i}", s.image) for i, s in enumerate(oods)])
    emb = OracleEmbedder(spec.all_class_names, noise=1.0)
    teacher = OVSTeacher(build_prompt_set(spec.in_class_names, spec.ood_class_names), emb)
    labels = {f"o{i}": teacher(s.image, key=f"o{i}", semantic=s.semantic) for i, s in enumerate(oods)}
    return data, labels


def small_config(**kw):
    base = dict(n_labeled=2, n_unlabeled_in=2, n_unlabeled_out=2, crop_size=16, width=8,
                epochs=2, iters_per_epoch=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy():
    return small_data()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
