import numpy as np
import pytest
import torch

from fewseg.errors import GridTooSmall, ShapeMismatch
from fewseg.ms_adapter import (PYRAMID_SIZES, ChannelGate, MsfaConfig, MultiScaleAdapter,
                               adaptive_avg_pool, pyramid_pool)

from conftest import central_difference, rel_err


def brute_pool(x: np.ndarray, s: int) -> np.ndarray:
    """Loop-based oracle: bin i covers [floor(i*g/s), floor((i+1)*g/s))."""
    B, C, H, W = x.shape
    out = np.zeros((B, C, s, s))
    for i in range(s):
        r0, r1 = (i * H) // s, ((i + 1) * H) // s
        for j in range(s):
            c0, c1 = (j * W) // s, ((j + 1) * W) // s
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(-2, -1))
    return out


@pytest.mark.parametrize("g", [8, 12, 16, 64])
def test_pool_matches_brute_force(g):
    x = np.random.default_rng(g).standard_normal((2, 5, g, g))
    for lvl, s in zip(pyramid_pool(torch.from_numpy(x)), PYRAMID_SIZES):
        np.testing.assert_allclose(lvl.numpy(), brute_pool(x, s), atol=1e-12)


def test_pool_small_example():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert adaptive_avg_pool(x, 1).item() == 2.5
    torch.testing.assert_close(adaptive_avg_pool(x, 2), x)


def test_grid_too_small():
    with pytest.raises(GridTooSmall):
        pyramid_pool(torch.zeros(1, 4, 4, 4))
    with pytest.raises(GridTooSmall):
        adaptive_avg_pool(torch.zeros(1, 1, 3, 3), 4)
    with pytest.raises(GridTooSmall):
        MultiScaleAdapter(4)(torch.zeros(1, 4, 7, 7))


def test_pool_mean_preserved_when_divisible():
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    for lvl in pyramid_pool(x):
        torch.testing.assert_close(lvl.mean(dim=(-2, -1)), x.mean(dim=(-2, -1)))


def test_pool_invariant_to_within_bin_permutation():
    x = torch.randn(1, 2, 16, 16, dtype=torch.float64)
    y = x.clone()
    # swap two pixels that share a bin at the coarsest non-trivial level (2x2 bins of 8)
    y[..., 0, 0], y[..., 7, 7] = x[..., 7, 7], x[..., 0, 0]
    torch.testing.assert_close(adaptive_avg_pool(y, 2), adaptive_avg_pool(x, 2))


class TestGate:
    def _forced(self, value):
        gate = ChannelGate(8, 4).double()
        with torch.no_grad():
            gate.fc2.weight.zero_()
            gate.fc2.bias.fill_(value)
        return gate

    def test_forced_open(self):
        x = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(self._forced(50.0)(x), x, atol=1e-15, rtol=1e-15)

    def test_forced_closed(self):
        x = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        assert self._forced(-50.0)(x).abs().max() < 1e-20

    def test_range(self):
        g = ChannelGate(8).gate(torch.randn(3, 8, 8, 8) * 10)
        assert g.shape == (3, 8) and ((g > 0) & (g < 1)).all()


class TestAdapter:
    def setup_method(self):
        torch.manual_seed(0)
        self.msfa = MultiScaleAdapter(8, MsfaConfig()).double()

    def _open_gate(self):
        with torch.no_grad():
            self.msfa.channel.fc2.weight.zero_()
            self.msfa.channel.fc2.bias.fill_(50.0)

    @pytest.mark.parametrize("g", [8, 16, 24])
    def test_shape(self, g):
        x = torch.randn(2, 8, g, g, dtype=torch.float64)
        assert self.msfa(x).shape == x.shape

    def test_constant_map_gives_four_c(self):
        self._open_gate()
        x = torch.full((1, 8, 16, 16), 1.75, dtype=torch.float64)
        torch.testing.assert_close(self.msfa(x), 4 * x)

    def test_constant_fixpoint_of_each_level(self):
        x = torch.full((1, 8, 16, 16), -0.3, dtype=torch.float64)
        for lvl in pyramid_pool(x):
            torch.testing.assert_close(lvl, torch.full_like(lvl, -0.3))

    def test_linear_with_open_gate(self):
        self._open_gate()
        a = torch.randn(1, 8, 16, 16, dtype=torch.float64)
        b = torch.randn(1, 8, 16, 16, dtype=torch.float64)
        torch.testing.assert_close(self.msfa(2 * a - b), 2 * self.msfa(a) - self.msfa(b))

    def test_wrong_channels(self):
        with pytest.raises(ShapeMismatch):
            self.msfa(torch.zeros(1, 4, 8, 8, dtype=torch.float64))

    def test_wrong_level_count(self):
        with pytest.raises(ShapeMismatch):
            self.msfa.fuse_pyramid([torch.zeros(1, 8, 1, 1)], 8)

    def test_gradients(self):
        x = torch.randn(1, 8, 16, 16, dtype=torch.float64)
        w = torch.randn(1, 8, 16, 16, dtype=torch.float64)

        def f():
            return (self.msfa(x) * w).sum()

        self.msfa.zero_grad()
        f().backward()
        rng = np.random.default_rng(1)
        for name, p in self.msfa.named_parameters():
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), min(3, flat.numel()), replace=False):
                num = central_difference(f, flat, int(i))
                assert rel_err(p.grad.view(-1)[i].item(), num) < 1e-4, name
