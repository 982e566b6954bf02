import numpy as np
import pytest

from manhattan_vp.geometry import GravityObservation, GravityQuality, manhattan_rotation_error_deg
from manhattan_vp.minimal_solvers import SolverId
from manhattan_vp.synthetic import SyntheticConfig, generate_instance, minimal_config


def noiseless_minimal(solver: SolverId, seed: int, index: int = 0):
    """Noiseless minimal instance whose lines are in the solver's slot order."""
    rng = np.random.default_rng([seed, index, 99])
    return generate_instance(minimal_config(solver), rng)


def best_error(frames, gt):
    """(rotation error in degrees, relative focal error) of the frame closest to GT."""
    errs = [
        (manhattan_rotation_error_deg(fr.rotation, gt.rotation), abs(fr.focal - gt.focal) / gt.focal)
        for fr in frames
    ]
    return min(errs)


def exact_gravity(inst):
    return GravityObservation(inst.gravity_gt, GravityQuality.EXACT)


# scenes shared by the robust tests (outliers, 1 px noise, realistic segment lengths)
RANSAC_SCENE = SyntheticConfig(
    lines_per_direction=20,
    sigma_image_px=1.0,
    outlier_fraction=0.3,
    sigma_gravity_deg=5.0,
    min_segment_px=20.0,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
