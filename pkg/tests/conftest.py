import numpy as np
import pytest
import torch

from weaksep import datasets, toydata
from weaksep.datasets import MixtureSpec, class_range
from weaksep.sepmodel import ArchConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_arch():
    # small enough for finite-difference sweeps, same layer kinds as the default
    return ArchConfig(conv_channels=(3, 4), fc_units=6, latent_dim=2)


@pytest.fixture(scope="session")
def micro_corpus_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return toydata.write_toy_corpus(root, labels=range(3), clips_per_class=12, seed=0)


@pytest.fixture(scope="session")
def micro_corpus(micro_corpus_root):
    return datasets.load_corpus(micro_corpus_root)


@pytest.fixture(scope="session")
def micro_manifest(micro_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("mixdata")
    spec = MixtureSpec(classes=class_range(0, 3), components=2, counts=(12, 6, 6), seed=3)
    path = datasets.synthesize_to_dir(spec, micro_corpus, out)
    return datasets.read_manifest(path)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
