import pytest
import torch

from omniseg.backbone import Backbone
from omniseg.errors import ContractViolation

from helpers import randomize


@pytest.fixture
def net():
    torch.manual_seed(0)
    return Backbone(8).double()


def test_pyramid_shapes(net):
    out = net(torch.rand(2, 3, 64, 64, dtype=torch.float64))
    assert [tuple(o.shape) for o in out] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    assert all(torch.isfinite(o).all() for o in out)


def test_rejects_non_divisible(net):
    with pytest.raises(ContractViolation):
        net(torch.rand(1, 3, 48, 64, dtype=torch.float64))


def test_identity_hook_is_bit_identical(net):
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    calls = []

    def hook(stage, m):
        calls.append(stage)
        return m

    for a, b in zip(net(x), net(x, hook)):
        assert torch.equal(a, b)
    assert calls == [2, 3, 4]


def test_views_are_independent(net):
    x = torch.rand(3, 3, 64, 64, dtype=torch.float64)
    full = net(x)
    single = net(x[1:2])
    perm = net(x[[2, 0, 1]])
    for f, s, p in zip(full, single, perm):
        assert torch.equal(f[1:2], s)
        assert torch.equal(f[[2, 0, 1]], p)


def test_deterministic(net):
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    for a, b in zip(net(x), net(x)):
        assert torch.equal(a, b)


def receptive_radius():
    r, j = 1, 2  # stem: 3x3 at stride 1 input
    radii = []
    for _ in range(4):
        r += j  # stride-2 down conv
        j *= 2
        r += 2 * j  # two 3x3 convs
        radii.append(r)
    return radii


def test_translation_by_32px_shifts_outputs(net):
    randomize(net, 1, 0.2)
    big = torch.rand(1, 3, 416, 416, dtype=torch.float64)
    size, shift = 384, 32
    with torch.no_grad():
        a = net(big[:, :, :size, :size])
        b = net(big[:, :, shift:, shift:])
    for level, (oa, ob, rad) in enumerate(zip(a, b, receptive_radius())):
        s = 2 ** (level + 2)
        d = shift // s
        # output p of crop b sees the same pixels as output p + d of crop a; keep both away from padding
        ps = [p for p in range(ob.shape[-1]) if s * p - rad >= 0 and s * (p + d) + rad <= size - 1]
        assert ps, level
        lo, hi = ps[0], ps[-1] + 1
        diff = (oa[..., lo + d : hi + d, lo + d : hi + d] - ob[..., lo:hi, lo:hi]).abs().max()
        assert diff <= 1e-5 * max(1.0, float(oa.abs().max()))
