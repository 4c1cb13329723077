import pytest
import torch

from sanpose.discriminator import Discriminator, DiscriminatorConfig, ResBlock
from sanpose.errors import SizeMismatchError
from sanpose.generator import init_weights

from fd import check_params


@pytest.fixture(scope="module")
def disc():
    return init_weights(Discriminator(DiscriminatorConfig(base_channels=8)), seed=0)


def test_output_in_open_interval(disc):
    g = torch.Generator().manual_seed(0)
    a = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    b = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
    p = disc(a, b)
    assert p.shape == (4,)
    assert ((p > 0) & (p < 1)).all()


def test_zero_logit_gives_half(disc):
    d = init_weights(Discriminator(DiscriminatorConfig(base_channels=8)), seed=0)
    with torch.no_grad():
        d.head.weight.zero_()
        d.head.bias.zero_()
    p = d(torch.zeros(1, 3, 32, 32), torch.ones(1, 3, 32, 32))
    assert p.item() == 0.5


def test_deterministic(disc):
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(disc(x, -x), disc(x, -x))


def test_size_mismatch(disc):
    with pytest.raises(SizeMismatchError):
        disc(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 16, 16))


def test_residual_identity_when_branch_zeroed():
    block = ResBlock(8)
    for p in block.branch.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(block(x), x)


def test_structure_counts():
    d = Discriminator(DiscriminatorConfig())
    assert len(d.blocks) == 3
    assert sum(isinstance(m, torch.nn.Conv2d) and m.stride == (2, 2) for m in d.down) == 2


def test_gradients_match_finite_differences():
    d = init_weights(Discriminator(DiscriminatorConfig(base_channels=4, image_size=(8, 8))),
                     seed=1, gain=0.3).double()
    g = torch.Generator().manual_seed(3)
    a = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    b = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1

    def loss():
        p = d(a, b)
        return torch.log(p).sum() + torch.log(1 - d(b, a)).sum()

    assert check_params(loss, list(d.parameters()), n_samples=60) >= 0.95
