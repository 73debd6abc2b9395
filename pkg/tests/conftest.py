import pytest

from builders import box, make_frame, synthetic_dataset
from config import ChainConfig, GbdtHyperparams, PspConfig, SuccessModelConfig
from picking.geometry import adjacency_graph
from picking.learn import train_chain
from picking.pick import make_action
from picking.success import PspModel, TrueSuccessModel


@pytest.fixture
def flat_box_frame():
    """One 0.4 x 0.3 x 0.1 box centered at (0.6, 0.5)"""
    return make_frame(box(1, 0.6, 0.5, 0.4, 0.3, 0.1))


@pytest.fixture
def center_action(flat_box_frame):
    return make_action(flat_box_frame, 0.6, 0.5, 0.0, 1)


@pytest.fixture
def adjacency(flat_box_frame):
    return adjacency_graph(flat_box_frame)


@pytest.fixture
def oracle():
    return TrueSuccessModel.from_config(SuccessModelConfig())


@pytest.fixture
def psp():
    return PspModel.from_config(PspConfig())


@pytest.fixture
def zero_chain():
    """GBDT chain with no boosting rounds trained on all-zero deltas; predicts exactly 0"""
    config = ChainConfig(kind="gbdt", gbdt=GbdtHyperparams(n_rounds=0))
    return train_chain(synthetic_dataset(), "gbdt", config, seed=0)
