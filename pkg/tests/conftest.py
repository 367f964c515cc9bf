import numpy as np
import pytest
import torch

from seeable.models.data_models import PerturbationConfig, SubmaskScheme
from seeable.services.discrepancy_factory import DiscrepancyFactory
from seeable.services.prototype_geometry import make_simplex_prototypes
from seeable.services.synthetic_corpus import SyntheticFaceGenerator, synth_corpus


@pytest.fixture(scope="session")
def generator():
    return SyntheticFaceGenerator(image_size=64, seed=0)


@pytest.fixture
def face(generator):
    return generator.render(generator.identity(0), 0)


@pytest.fixture
def large_face():
    gen = SyntheticFaceGenerator(image_size=128, seed=3)
    return gen.render(gen.identity(0), 0)


@pytest.fixture
def factory():
    return DiscrepancyFactory(SubmaskScheme(rows=4, cols=4), PerturbationConfig())


@pytest.fixture
def small_factory():
    return DiscrepancyFactory(SubmaskScheme(rows=2, cols=2), PerturbationConfig())


@pytest.fixture
def protos_16_5():
    """D=16, K=5，原型 0 保留"""
    return make_simplex_prototypes(16, 5, reserve_offset=1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 个真实视频(3 个留出) + 3 个伪造视频，32×32"""
    out = tmp_path_factory.mktemp("corpus")
    return synth_corpus(12, 2, 0, out, image_size=32, held_out_frac=0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    # 线程数固定，保证浮点归约顺序一致
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)
