import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn as tnn

from zsvc import nn
from zsvc.errors import ValidationError


def test_forward_anchors():
    x = torch.randn(1, 2, 5)
    w = torch.randn(3, 2, 3)
    assert nn.conv1d(x, w, padding=1).shape == (1, 3, 5)
    assert float(torch.tanh(torch.tensor(0.0))) == 0.0
    assert float(torch.sigmoid(torch.tensor(0.0))) == 0.5
    table = torch.arange(12.0).view(4, 3)
    np.testing.assert_array_equal(nn.embedding(torch.tensor([2]), table)[0].numpy(), [6.0, 7.0, 8.0])
    assert float(nn.leaky_relu(torch.tensor(-1.0))) == pytest.approx(-0.1)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ValidationError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ValidationError, match="conv1d"):
        nn.conv1d(torch.zeros(1, 2, 5), torch.zeros(3, 4, 3))
    with pytest.raises(ValidationError):
        nn.add(torch.zeros(2, 3), torch.zeros(4, 3))
    with pytest.raises(ValidationError):
        nn.concat([torch.zeros(2, 3), torch.zeros(3, 4)], dim=0)
    with pytest.raises(ValidationError):
        nn.embedding(torch.tensor([5]), torch.zeros(4, 2))


def test_backward_calculus():
    x = nn.Parameter(torch.tensor(3.0, dtype=torch.float64))
    nn.backward(x * x)
    assert float(x.grad) == 6.0
    v = nn.Parameter(torch.ones(8, dtype=torch.float64))
    nn.backward(v.mean())
    np.testing.assert_array_equal(v.grad.numpy(), np.full(8, 1 / 8))


def test_unreachable_gradient_stays_zero():
    p = nn.Parameter(torch.ones(3))
    q = nn.Parameter(torch.ones(3))
    p.grad = torch.zeros(3)
    nn.backward((q * 2).sum())
    assert not p.grad.any()


def test_backward_requires_scalar():
    with pytest.raises(ValidationError):
        nn.backward(nn.Parameter(torch.ones(3)) * 2)


def test_grad_check_quadratic():
    with nn.precision(torch.float64):
        a = torch.tensor([[2.0, 0.5], [0.5, 1.0]])
        x = nn.Parameter(torch.tensor([0.3, -0.7]))
        assert nn.grad_check(lambda: x @ a @ x, [x]) < 1e-6


def _chain(dtype):
    with nn.precision(dtype):
        torch.manual_seed(0)
        conv = tnn.Conv1d(8, 8, 3, padding=1)
        x = torch.randn(1, 8, 16)
        params = list(conv.parameters())
        return nn.grad_check(lambda: torch.tanh(conv(x)).mean(), params)


def test_grad_check_conv_tanh_mean():
    assert _chain(torch.float32) < 1e-2
    assert _chain(torch.float64) < 1e-4


def _layer_cases():
    yield "linear", lambda: tnn.Linear(6, 4), lambda: torch.randn(3, 6)
    yield "conv1d_strided_dilated", lambda: tnn.Conv1d(3, 4, 5, stride=2, padding=4, dilation=2), \
        lambda: torch.randn(2, 3, 20)
    yield "conv1d_grouped", lambda: tnn.Conv1d(4, 4, 5, groups=2, padding=2), lambda: torch.randn(1, 4, 12)
    yield "conv_transpose1d", lambda: tnn.ConvTranspose1d(3, 2, 8, stride=4, padding=2), lambda: torch.randn(1, 3, 6)
    yield "conv2d", lambda: tnn.Conv2d(1, 3, (5, 1), (3, 1), padding=(2, 0)), lambda: torch.randn(1, 1, 12, 2)
    yield "channel_layer_norm", lambda: nn.ChannelLayerNorm(5), lambda: torch.randn(2, 5, 7)


@pytest.mark.parametrize("name,make,inp", list(_layer_cases()), ids=[c[0] for c in _layer_cases()])
@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-2), (torch.float64, 1e-4)])
def test_layer_gradients(name, make, inp, dtype, tol):
    with nn.precision(dtype):
        torch.manual_seed(1)
        layer = make()
        x = nn.Parameter(inp())
        proj = None

        def fn():
            nonlocal proj
            y = torch.tanh(layer(x))
            if proj is None:
                proj = torch.randn(y.shape, generator=torch.Generator().manual_seed(2))
            return (y * proj).sum()

        assert nn.grad_check(fn, [x] + list(layer.parameters())) < tol


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-2), (torch.float64, 1e-4)])
def test_elementwise_and_structural_gradients(dtype, tol):
    with nn.precision(dtype):
        torch.manual_seed(3)
        x = nn.Parameter(torch.rand(4, 5) + 0.5)
        table = nn.Parameter(torch.randn(6, 3))
        idx = torch.tensor([0, 2, 2, 5])
        w = torch.randn(4, 8)

        def fn():
            a = torch.sigmoid(x) * torch.exp(0.3 * x) + torch.log(x)
            b = nn.concat([a[:, 1:4], nn.embedding(idx, table)], dim=1)
            return (b * w[:, :6]).sum() + F.avg_pool1d(a[None], 2, 2).sum()

        assert nn.grad_check(fn, [x, table]) < tol


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-2), (torch.float64, 1e-4)])
def test_leaky_relu_gradient_away_from_kink(dtype, tol):
    with nn.precision(dtype):
        base = torch.tensor([-2.0, -0.5, 0.4, 1.5, -1.1, 0.9])
        x = nn.Parameter(base.clone())
        w = torch.linspace(0.5, 1.5, 6)
        assert nn.grad_check(lambda: (nn.leaky_relu(x) * w).sum(), [x]) < tol


def test_determinism_bitwise():
    def run():
        torch.manual_seed(0)
        conv = tnn.Conv1d(4, 4, 3, padding=1)
        x = torch.randn(2, 4, 32)
        nn.backward(torch.tanh(conv(x)).pow(2).mean())
        return [p.grad.clone() for p in conv.parameters()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)
