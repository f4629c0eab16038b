import pytest
import torch

from flowtok import dataset as ds
from flowtok import teacher as teacher_mod


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small synthetic dataset shared across tests."""
    spec = ds.DatasetSpec(train_count=256, val_count=96, test_count=96, generation_seed=7)
    root = ds.generate_synthetic(spec, tmp_path_factory.mktemp("data"))
    return ds.ShapesDataset(root)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_data):
    """Quickly trained teacher; accuracy floor relaxed for the tiny train set."""
    cfg = teacher_mod.TeacherConfig(epochs=120, lr=2e-3, min_train_acc=0.9, seed=0)
    return teacher_mod.train_teacher(tiny_data, cfg)


@pytest.fixture()
def gen0():
    return torch.Generator().manual_seed(0)
