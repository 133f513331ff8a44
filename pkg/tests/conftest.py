import pytest

from mgd.data import SyntheticSceneSpec, generate_synthetic, partition
from mgd.models import DEEP, WIDE, TeacherEnsemble, build_toy_teacher, freeze
from mgd.train import DataBundle

N_CLASSES = 4


@pytest.fixture(scope="session")
def tiny_sets():
    train_ds = generate_synthetic(
        SyntheticSceneSpec(n_classes=N_CLASSES, image_size=(32, 32), seed=21), 16
    )
    val_ds = generate_synthetic(
        SyntheticSceneSpec(n_classes=N_CLASSES, image_size=(32, 32), seed=22), 8
    )
    return train_ds, val_ds


@pytest.fixture(scope="session")
def tiny_bundle(tiny_sets):
    train_ds, val_ds = tiny_sets
    protocol = partition(train_ds.ids, fraction="1/4", seed=3)
    return DataBundle(train=train_ds, val=val_ds, protocol=protocol, n_classes=N_CLASSES)


@pytest.fixture(scope="session")
def tiny_teachers():
    # untrained but frozen: sufficient for wiring/mechanics tests
    t_d = freeze(build_toy_teacher(DEEP, N_CLASSES, seed=31))
    t_w = freeze(build_toy_teacher(WIDE, N_CLASSES, seed=32))
    return TeacherEnsemble(t_d=t_d, t_w=t_w)
