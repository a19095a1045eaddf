import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cruse_kd import functional as CF
from cruse_kd.errors import ConfigurationError, ContractError, ShapeError


def test_matmul_matches_hand_product():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[5.0], [6.0]])
    assert torch.equal(CF.matmul(a, b), torch.tensor([[17.0], [39.0]]))


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeError):
        CF.matmul(torch.ones(2, 3), torch.ones(2, 3))


def test_causal_conv_halves_frequency():
    y = CF.causal_conv2d(torch.randn(2, 1, 7, 80), torch.randn(4, 1, 2, 3), torch.zeros(4))
    assert y.shape == (2, 4, 7, 40)


def _naive_causal_conv(x, w, b, sf):
    # Direct sum over the kernel with explicit zero padding.
    bsz, cin, t, f = x.shape
    cout, _, kt, kf = w.shape
    pf = (kf - 1) // 2
    fo = (f + 2 * pf - kf) // sf + 1
    out = np.zeros((bsz, cout, t, fo))
    xn, wn = x.numpy(), w.numpy()
    for n in range(bsz):
        for o in range(cout):
            for tt in range(t):
                for ff in range(fo):
                    acc = b[o].item()
                    for i in range(cin):
                        for dt in range(kt):
                            src_t = tt - (kt - 1) + dt
                            if src_t < 0:
                                continue
                            for df in range(kf):
                                src_f = ff * sf - pf + df
                                if 0 <= src_f < f:
                                    acc += wn[o, i, dt, df] * xn[n, i, src_t, src_f]
                    out[n, o, tt, ff] = acc
    return out


def test_causal_conv_matches_direct_sum():
    x = torch.randn(2, 3, 5, 8, dtype=torch.float64)
    w = torch.randn(4, 3, 2, 3, dtype=torch.float64)
    b = torch.randn(4, dtype=torch.float64)
    np.testing.assert_allclose(CF.causal_conv2d(x, w, b).numpy(), _naive_causal_conv(x, w, b, 2), atol=1e-12)


def test_causal_conv_ignores_future_frames():
    w = torch.randn(3, 2, 2, 3, dtype=torch.float64)
    x = torch.randn(1, 2, 9, 16, dtype=torch.float64)
    base = CF.causal_conv2d(x, w)
    for t in range(8):
        probe = x.clone()
        probe[:, :, t + 1:] += torch.randn_like(probe[:, :, t + 1:])
        assert torch.equal(CF.causal_conv2d(probe, w)[:, :, : t + 1], base[:, :, : t + 1])


def test_kernel_wider_than_input_rejected():
    with pytest.raises(ConfigurationError):
        CF.causal_conv2d(torch.randn(1, 1, 3, 1), torch.randn(1, 1, 2, 4))


def test_transpose_chain_restores_extent():
    x = torch.randn(1, 3, 4, 5)
    for f in (10, 20, 40, 80):
        x = CF.causal_transpose_conv2d(x, torch.randn(x.shape[1], 2, 2, 3))
        assert x.shape[-1] == f and x.shape[2] == 4


def test_transpose_odd_target():
    y = CF.causal_transpose_conv2d(torch.randn(1, 2, 3, 5), torch.randn(2, 1, 2, 3), out_freq=9)
    assert y.shape[-1] == 9


def test_transpose_unreachable_target():
    with pytest.raises(ConfigurationError):
        CF.causal_transpose_conv2d(torch.randn(1, 2, 3, 5), torch.randn(2, 1, 2, 3), out_freq=20)


def test_transpose_is_causal():
    w = torch.randn(2, 3, 2, 3, dtype=torch.float64)
    x = torch.randn(1, 2, 8, 5, dtype=torch.float64)
    base = CF.causal_transpose_conv2d(x, w)
    for t in range(7):
        probe = x.clone()
        probe[:, :, t + 1:] = torch.randn_like(probe[:, :, t + 1:])
        assert torch.equal(CF.causal_transpose_conv2d(probe, w)[:, :, : t + 1], base[:, :, : t + 1])


def test_transpose_is_adjoint_of_strided_conv():
    # <conv(x), y> == <x, conv^T(y)> when both use the same kernel and padding.
    x = torch.randn(1, 2, 4, 10, dtype=torch.float64)
    w = torch.randn(3, 2, 1, 3, dtype=torch.float64)
    y = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    lhs = (CF.causal_conv2d(x, w) * y).sum()
    rhs = (x * CF.causal_transpose_conv2d(y, w, out_freq=10)).sum()
    assert lhs.item() == pytest.approx(rhs.item(), rel=1e-12)


def test_grouped_gru_count_teacher_bottleneck():
    assert CF.grouped_gru_param_count(960, 960, 4) == 1_388_160


def test_grouped_gru_count_indivisible():
    with pytest.raises(ConfigurationError):
        CF.grouped_gru_param_count(10, 10, 4)


def _gru_weights(groups, di, h, dtype=torch.float64):
    return (
        torch.randn(groups, 3 * h, di, dtype=dtype) * 0.5,
        torch.randn(groups, 3 * h, h, dtype=dtype) * 0.5,
        torch.randn(groups, 3 * h, dtype=dtype) * 0.1,
        torch.randn(groups, 3 * h, dtype=dtype) * 0.1,
    )


def test_single_group_matches_torch_gru():
    w_ih, w_hh, b_ih, b_hh = _gru_weights(1, 5, 6)
    ref = torch.nn.GRU(5, 6, batch_first=True).double()
    with torch.no_grad():
        ref.weight_ih_l0.copy_(w_ih[0])
        ref.weight_hh_l0.copy_(w_hh[0])
        ref.bias_ih_l0.copy_(b_ih[0])
        ref.bias_hh_l0.copy_(b_hh[0])
    x = torch.randn(3, 7, 5, dtype=torch.float64)
    torch.testing.assert_close(CF.gru_sequence(x, w_ih, w_hh, b_ih, b_hh), ref(x)[0], rtol=1e-12, atol=1e-12)


def test_groups_are_independent_grus():
    w_ih, w_hh, b_ih, b_hh = _gru_weights(3, 2, 4)
    x = torch.randn(2, 5, 6, dtype=torch.float64)
    y = CF.gru_sequence(x, w_ih, w_hh, b_ih, b_hh)
    for g in range(3):
        alone = CF.gru_sequence(x[..., 2 * g: 2 * g + 2], w_ih[g:g + 1], w_hh[g:g + 1], b_ih[g:g + 1], b_hh[g:g + 1])
        torch.testing.assert_close(y[..., 4 * g: 4 * g + 4], alone)


def test_shuffle_interleaves_groups():
    w = _gru_weights(2, 3, 2)
    x = torch.randn(1, 4, 6, dtype=torch.float64)
    plain = CF.gru_sequence(x, *w)
    mixed = CF.gru_sequence(x, *w, shuffle=True)
    torch.testing.assert_close(mixed[..., 0::2], plain[..., :2])
    torch.testing.assert_close(mixed[..., 1::2], plain[..., 2:])


def test_gru_bad_width():
    with pytest.raises(ConfigurationError):
        CF.gru_sequence(torch.randn(1, 2, 7), *_gru_weights(2, 3, 2, torch.float32))


def _naive_cln(x, gain, bias, eps):
    out = torch.empty_like(x)
    for t in range(x.shape[2]):
        prefix = x[:, :, : t + 1]
        mean = prefix.mean(dim=(1, 2, 3), keepdim=True)
        var = prefix.var(dim=(1, 2, 3), unbiased=False, keepdim=True)
        out[:, :, t] = ((x[:, :, t: t + 1] - mean) / torch.sqrt(var + eps))[:, :, 0]
    return out * gain.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)


def test_cln_matches_prefix_statistics():
    x = torch.randn(2, 3, 6, 5, dtype=torch.float64) * 3 + 1
    gain, bias = torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    torch.testing.assert_close(CF.cumulative_layer_norm(x, gain, bias), _naive_cln(x, gain, bias, 1e-5))


def test_cln_first_frame_uses_only_itself():
    x = torch.randn(1, 2, 4, 3, dtype=torch.float64)
    y = CF.cumulative_layer_norm(x, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    first = x[:, :, 0]
    expect = (first - first.mean()) / torch.sqrt(first.var(unbiased=False) + 1e-5)
    torch.testing.assert_close(y[:, :, 0], expect)


def test_cln_constant_input_is_finite():
    y = CF.cumulative_layer_norm(torch.full((1, 2, 5, 4), 7.0), torch.ones(2), torch.zeros(2))
    assert torch.isfinite(y).all() and torch.allclose(y, torch.zeros_like(y))


def test_grad_check_quadratic():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)
    assert CF.grad_check(lambda: (w ** 2).sum() + w.prod(), [w]) < 1e-7


def test_grad_check_detects_wrong_gradient():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert CF.grad_check(lambda: Wrong.apply(w), [w]) > 0.1


def test_grad_check_requires_float64():
    w = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractError):
        CF.grad_check(lambda: w.sum(), [w])


def test_grad_check_requires_scalar():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ContractError):
        CF.grad_check(lambda: w * 2, [w])


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 5), st.sampled_from([4, 6, 8]), st.integers(0, 10_000))
def test_primitive_chain_gradients(b, c, t, f, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(b, c, t, f, dtype=torch.float64, generator=gen)
    w = torch.randn(2, c, 2, 3, dtype=torch.float64, generator=gen).requires_grad_()
    wt = torch.randn(2, 1, 2, 3, dtype=torch.float64, generator=gen).requires_grad_()
    gain = (torch.rand(2, dtype=torch.float64, generator=gen) + 0.5).requires_grad_()
    bias = torch.randn(2, dtype=torch.float64, generator=gen).requires_grad_()

    def objective():
        h = CF.cumulative_layer_norm(CF.causal_conv2d(x, w), gain, bias)
        return torch.tanh(CF.causal_transpose_conv2d(h, wt, out_freq=f)).pow(2).sum()

    assert CF.grad_check(objective, [w, wt, gain, bias]) < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.sampled_from([1, 2]), st.integers(0, 10_000))
def test_grouped_gru_gradients(b, t, groups, seed):
    gen = torch.Generator().manual_seed(seed)
    params = [p.requires_grad_() for p in (
        torch.randn(groups, 6, 2, dtype=torch.float64, generator=gen),
        torch.randn(groups, 6, 2, dtype=torch.float64, generator=gen),
        torch.randn(groups, 6, dtype=torch.float64, generator=gen),
        torch.randn(groups, 6, dtype=torch.float64, generator=gen),
    )]
    x = torch.randn(b, t, 2 * groups, dtype=torch.float64, generator=gen)
    assert CF.grad_check(lambda: CF.gru_sequence(x, *params).sin().sum(), params) < 1e-4
    assert math.isfinite(CF.gru_sequence(x, *params).sum().item())
