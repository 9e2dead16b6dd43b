import numpy as np
import pytest
import torch

from proxydistill import (
    ClassifierHead,
    DomainSpec,
    MLPExtractor,
    ShiftSpec,
    StudentModel,
    compose_teacher,
    configure_determinism,
    generate_domain,
)
from proxydistill.models import build_projector
from proxydistill.utils import make_generator


def pytest_configure(config):
    configure_determinism(True)


@pytest.fixture(scope="session")
def tiny_spec():
    return DomainSpec(name="tiny", num_classes=3, samples_per_class=20,
                      label_space_id="tiny-space", seed=5,
                      image_size=(8, 8, 3))


@pytest.fixture(scope="session")
def tiny_domain(tiny_spec):
    return generate_domain(tiny_spec)


@pytest.fixture(scope="session")
def shifted_spec():
    return DomainSpec(name="tiny-shift", num_classes=3, samples_per_class=20,
                      label_space_id="tiny-space", seed=5,
                      image_size=(8, 8, 3),
                      shift=ShiftSpec(color_rotation=0.8,
                                      texture_noise_sigma=0.1,
                                      background_bias=0.1))


@pytest.fixture(scope="session")
def shifted_domain(shifted_spec):
    return generate_domain(shifted_spec)


def small_extractor(seed=0, feature_dim=16, image_size=(8, 8, 3)):
    """Cheap frozen extractor over flattened tiny images."""
    in_dim = int(np.prod(image_size))
    return MLPExtractor(in_dim, feature_dim, hidden=(24,),
                        generator=make_generator(seed, "test-extractor"))


@pytest.fixture()
def frozen_extractor():
    return small_extractor().freeze()


@pytest.fixture()
def tiny_pipeline(frozen_extractor):
    proj = build_projector("teacher-block", frozen_extractor.out_dim, 12,
                           make_generator(1, "test-proj"))
    head = ClassifierHead(12, 3, make_generator(1, "test-head"))
    return compose_teacher(frozen_extractor, proj, head)


@pytest.fixture()
def tiny_student():
    ext = small_extractor(seed=2, feature_dim=12)
    head = ClassifierHead(12, 3, make_generator(2, "student-head"))
    return StudentModel(ext, head)


def assert_params_equal(a: torch.nn.Module, b: torch.nn.Module):
    pa = dict(a.named_parameters())
    pb = dict(b.named_parameters())
    assert pa.keys() == pb.keys()
    for k in pa:
        assert torch.equal(pa[k], pb[k]), f"parameter {k} differs"
