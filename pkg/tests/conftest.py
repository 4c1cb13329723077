import pytest
import torch

from sanpose.data import SynthConfig, load_dataset, synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """A tiny synthetic dataset: 4 train identities x 3 poses, 2 test identities."""
    root = tmp_path_factory.mktemp("synth_small")
    synth_generate(SynthConfig(identities=4, poses=3, test_identities=2, seed=3), root)
    return root


@pytest.fixture(scope="session")
def small_train(small_root):
    return load_dataset(small_root, "train")


@pytest.fixture(scope="session")
def small_test(small_root):
    return load_dataset(small_root, "test")
