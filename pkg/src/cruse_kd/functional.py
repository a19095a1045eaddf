"""Causal neural primitives used by the CRUSE model.

Tensors are plain ``torch.Tensor`` objects and reverse-mode differentiation is
torch autograd; this module adds the causal building blocks on top of it.
All primitives take activations laid out as ``[batch, channel, time, freq]``
(the GRU takes ``[batch, time, features]``) and never let an output frame see
a later input frame.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, ContractError, ShapeError


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[m, k]`` and ``[k, n]`` with a shape-checked error."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def causal_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 2)) -> Tensor:
    """2-D convolution that is causal along time.

    ``kt - 1`` zero frames are prepended on the past side only; frequency is
    zero-padded symmetrically by ``(kf - 1) // 2`` bins.

    Args:
        x: ``[b, c_in, t, f]`` input.
        weight: ``[c_out, c_in, kt, kf]`` kernel.
        bias: optional ``[c_out]`` bias.
        stride: ``(st, sf)``.

    Returns:
        ``[b, c_out, t', f']`` with ``f' = floor((f + 2*pad - kf) / sf) + 1``.
    """
    st, sf = _pair(stride)
    if st <= 0 or sf <= 0:
        raise ConfigurationError(f"strides must be positive, got {(st, sf)}")
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"causal_conv2d expects 4-D input and kernel, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {weight.shape[1]} input channels, input has {x.shape[1]}")
    kt, kf = weight.shape[-2:]
    pf = (kf - 1) // 2
    if kf > x.shape[-1] + 2 * pf:
        raise ConfigurationError(f"kernel width {kf} exceeds padded frequency extent {x.shape[-1] + 2 * pf}")
    x = F.pad(x, (pf, pf, kt - 1, 0))
    return F.conv2d(x, weight, bias, stride=(st, sf))


def causal_transpose_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 2),
    out_freq: int | None = None,
) -> Tensor:
    """Transposed convolution, causal along time.

    The trailing ``kt - 1`` output frames (look-ahead) are cropped so output
    frame ``t`` depends on input frames ``<= t``. Frequency padding mirrors
    :func:`causal_conv2d`, so an encoder extent ``f_enc`` with ``f = f_enc / sf``
    is reproduced exactly.

    Args:
        x: ``[b, c_in, t, f]`` input.
        weight: ``[c_in, c_out, kt, kf]`` kernel (torch transposed layout).
        bias: optional ``[c_out]``.
        stride: ``(1, sf)``; time stride must be 1.
        out_freq: target frequency extent, default ``sf * f``.
    """
    st, sf = _pair(stride)
    if st != 1 or sf <= 0:
        raise ConfigurationError(f"transposed conv needs time stride 1 and positive freq stride, got {(st, sf)}")
    if x.dim() != 4 or weight.dim() != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"causal_transpose_conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    kt, kf = weight.shape[-2:]
    t, f = x.shape[-2:]
    target = sf * f if out_freq is None else int(out_freq)
    pf = (kf - 1) // 2
    natural = (f - 1) * sf - 2 * pf + kf
    out_pad = target - natural
    if not 0 <= out_pad < sf:
        raise ConfigurationError(
            f"frequency extent {f} cannot reach {target} with kernel {kf}, stride {sf}"
        )
    y = F.conv_transpose2d(x, weight, bias, stride=(1, sf), padding=(0, pf), output_padding=(0, out_pad))
    return y[:, :, :t, :]


def gru_sequence(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    shuffle: bool = False,
) -> Tensor:
    """Run a grouped GRU over a sequence, zero initial state.

    Group ``g`` maps the contiguous input slice ``[g*di, (g+1)*di)`` to the
    output slice ``[g*h, (g+1)*h)`` with its own standard GRU
    (torch gate ordering: reset, update, candidate).

    Args:
        x: ``[b, t, groups * di]``.
        w_ih: ``[groups, 3h, di]``.
        w_hh: ``[groups, 3h, h]``.
        b_ih, b_hh: ``[groups, 3h]``.
        shuffle: interleave the group outputs (channel rearrangement), so
            output unit ``k*groups + g`` comes from group ``g``.

    Returns:
        ``[b, t, groups * h]``.
    """
    groups, three_h, di = w_ih.shape
    h = three_h // 3
    b, t, d_in = x.shape
    if d_in != groups * di:
        raise ConfigurationError(f"input width {d_in} does not split into {groups} groups of {di}")
    if w_hh.shape != (groups, 3 * h, h):
        raise ShapeError(f"w_hh has shape {tuple(w_hh.shape)}, expected {(groups, 3 * h, h)}")

    xg = x.reshape(b, t, groups, di)
    gi = torch.einsum("btgd,gkd->btgk", xg, w_ih) + b_ih
    state = x.new_zeros(b, groups, h)
    outs = []
    for i in range(t):
        gh = torch.einsum("bgh,gkh->bgk", state, w_hh) + b_hh
        i_r, i_z, i_n = gi[:, i].chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        state = (1 - z) * n + z * state
        outs.append(state)
    y = torch.stack(outs, dim=1)  # [b, t, g, h]
    if shuffle:
        y = y.transpose(2, 3)
    return y.reshape(b, t, groups * h)


def grouped_gru_param_count(d_in: int, d_out: int, groups: int) -> int:
    if d_in % groups or d_out % groups:
        raise ConfigurationError(f"widths {d_in}->{d_out} not divisible by {groups} groups")
    di, h = d_in // groups, d_out // groups
    return groups * 3 * (di * h + h * h + 2 * h)


def cumulative_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Causal layer norm with running statistics.

    Frame ``t`` is normalised with the mean and variance of every value in
    frames ``0..t`` (all channels and frequencies), then scaled and shifted
    per channel.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    b, c, t, f = x.shape
    frame_sum = x.sum(dim=(1, 3))  # [b, t]
    frame_sq = (x * x).sum(dim=(1, 3))
    count = torch.arange(1, t + 1, dtype=x.dtype, device=x.device) * (c * f)
    mean = torch.cumsum(frame_sum, dim=1) / count
    var = torch.cumsum(frame_sq, dim=1) / count - mean * mean
    var = var.clamp_min(0.0)
    mean = mean[:, None, :, None]
    std = torch.sqrt(var + eps)[:, None, :, None]
    return (x - mean) / std * gain.view(1, c, 1, 1) + bias.view(1, c, 1, 1)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare autograd gradients with central finite differences.

    ``fn`` is called with no arguments and must return a scalar that depends
    on ``params`` (float64 leaf tensors with ``requires_grad``); parameters
    are perturbed in place.

    The per-component error is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is ``1e-3`` of the largest finite-difference magnitude, so
    components many orders below the gradient scale are judged absolutely.

    Returns:
        The maximum error over all components of all parameters.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("grad_check requires float64 parameters")
    out = fn()
    if out.numel() != 1:
        raise ContractError(f"grad_check needs a scalar objective, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, list(params), allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach().clone() for p, g in zip(params, analytic)]

    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            est = torch.empty_like(flat)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = fn().item()
                flat[k] = orig - h
                down = fn().item()
                flat[k] = orig
                est[k] = (up - down) / (2 * h)
            numeric.append(est.view_as(p))

    scale = max((n.abs().max().item() for n in numeric if n.numel()), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst
