import numpy as np
import pytest

from coherence_audit.metrics import ResponseProfile


def make_profile(original, perturbed, ids=None):
    n = len(original)
    ids = ids or [f"p{i:04d}" for i in range(n)]
    return ResponseProfile(tuple(ids), np.asarray(original, float), np.asarray(perturbed, float))


@pytest.fixture
def profile_factory():
    return make_profile
