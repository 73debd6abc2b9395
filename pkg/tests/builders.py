"""Hand-built scenes, frames and datasets shared by the tests"""

import numpy as np

from config import CONVEYOR_BOUNDS, NoiseConfig
from picking.datagen import Dataset, TrainingPair
from picking.scene import PackageKind, PackageSpec, Scene, render_sensor

RES = 0.005


def box(pid, x, y, length, width, height, yaw=0.0, kind=PackageKind.BOX, base=0.0, tilt=(0.0, 0.0)):
    return PackageSpec(id=pid, kind=kind, center=(x, y, base + height / 2), yaw=yaw,
                       dims=(length, width, height), top_tilt=tilt)


def make_scene(*packages, bounds=CONVEYOR_BOUNDS, seed=0):
    return Scene(packages=tuple(packages), bounds=tuple(bounds), seed=seed)


def make_frame(*packages, resolution=RES, bounds=CONVEYOR_BOUNDS):
    return render_sensor(make_scene(*packages, bounds=bounds), resolution)


def synthetic_dataset(n=20, delta=(0.0, 0.0, 0.0), seed=5):
    rng = np.random.default_rng(seed)
    pairs = [
        TrainingPair(phi=rng.normal(size=78), delta=tuple(delta), p_low=0.1, p_high=0.2, provenance=(0, i, 0),
                     origin=(0.5, 0.5, 0.0), target_segment=1)
        for i in range(n)
    ]
    return Dataset(train=pairs, test=pairs[: n // 4], noise=NoiseConfig(), seed=0, split_fraction=0.8)


class ConstantChain:
    """Stand-in chain that always predicts the same delta"""
    feature_dim = 78

    def __init__(self, delta):
        self.delta = np.asarray(delta, dtype=float)

    def predict_batch(self, phi):
        phi = np.atleast_2d(phi)
        return np.tile(self.delta, (phi.shape[0], 1))
