"""Tests for checked tensor ops, parameter sets and the gradient checker"""

from collections import OrderedDict

import numpy as np
import pytest
import torch
from torch import nn

from adaptrack.errors import ConfigurationError, DimensionError, NumericalError
from adaptrack.numerics import (
    DTYPE,
    ParameterSet,
    as_tensor,
    check_finite,
    conv2d,
    grad_check,
    matmul,
    softmax,
)


def _loop_conv(x, k, b, stride, padding):
    """Direct nested-loop cross-correlation"""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[i, c, r * stride + u, s * stride + v] * k[o, c, u, v]
                    out[i, o, r, s] = acc
    return out


class TestConv2d:
    @pytest.mark.parametrize(
        "shape,kernel,stride,padding",
        [
            ((1, 1, 5, 5), (1, 1, 3, 3), 1, 0),
            ((2, 3, 8, 8), (4, 3, 3, 3), 1, 1),
            ((1, 2, 7, 6), (3, 2, 2, 3), 2, 0),
            ((1, 3, 8, 8), (2, 3, 4, 4), 4, 0),
        ],
    )
    def test_matches_loop_oracle(self, shape, kernel, stride, padding):
        rng = np.random.default_rng(0)
        x = rng.normal(size=shape)
        k = rng.normal(size=kernel)
        b = rng.normal(size=kernel[0])
        out = conv2d(as_tensor(x), as_tensor(k), as_tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.numpy(), _loop_conv(x, k, b, stride, padding), atol=1e-12)

    def test_unbatched_input(self):
        x = torch.rand((2, 5, 5), dtype=DTYPE)
        k = torch.rand((3, 2, 3, 3), dtype=DTYPE)
        assert conv2d(x, k).shape == (3, 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channel mismatch"):
            conv2d(torch.zeros((1, 2, 5, 5), dtype=DTYPE), torch.zeros((1, 3, 3, 3), dtype=DTYPE))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError, match="larger than padded input"):
            conv2d(torch.zeros((1, 1, 2, 2), dtype=DTYPE), torch.zeros((1, 1, 3, 3), dtype=DTYPE))


class TestMatmulSoftmax:
    def test_matmul_shapes(self):
        a = torch.rand((2, 3, 4), dtype=DTYPE)
        b = torch.rand((2, 4, 5), dtype=DTYPE)
        assert matmul(a, b).shape == (2, 3, 5)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(DimensionError, match="inner extents"):
            matmul(torch.zeros((2, 3), dtype=DTYPE), torch.zeros((2, 3), dtype=DTYPE))

    def test_matmul_needs_2d(self):
        with pytest.raises(DimensionError):
            matmul(torch.zeros(3, dtype=DTYPE), torch.zeros((3, 3), dtype=DTYPE))

    def test_softmax_rows(self):
        x = torch.randn((4, 7), dtype=DTYPE) * 30
        p = softmax(x, axis=-1)
        np.testing.assert_allclose(p.sum(dim=-1).numpy(), 1.0, atol=1e-12)
        assert bool((p > 0).all()) and bool((p <= 1).all())

    def test_softmax_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(torch.zeros((2, 2), dtype=DTYPE), axis=3)

    def test_check_finite(self):
        with pytest.raises(NumericalError, match="sample"):
            check_finite(torch.tensor([1.0, float("nan")], dtype=DTYPE), "sample")


class TestParameterSet:
    def _module(self, seed):
        torch.manual_seed(seed)
        return nn.Sequential(nn.Linear(3, 2), nn.BatchNorm1d(2)).to(DTYPE)

    def test_buffers_included_and_frozen(self):
        pset = ParameterSet.from_module(self._module(0))
        assert "1.running_mean" in pset.entries
        assert "1.num_batches_tracked" not in pset.entries
        assert "1.running_mean" not in pset.trainable_names()
        assert "0.weight" in pset.trainable_names()

    def test_blend_is_elementwise_ema(self):
        a, b = self._module(0), self._module(1)
        pa, pb = ParameterSet.from_module(a), ParameterSet.from_module(b)
        expected = {n: 0.25 * t.detach() + 0.75 * pb[n].detach() for n, t in pa.items()}
        pa.blend_(pb, 0.25)
        for name, t in pa.items():
            torch.testing.assert_close(t.detach(), expected[name], rtol=0, atol=1e-15)
        # entries are the module's own tensors
        assert a[0].weight.data_ptr() == pa["0.weight"].data_ptr()

    def test_schema_mismatch(self):
        pa = ParameterSet.from_module(nn.Linear(3, 2).to(DTYPE))
        pb = ParameterSet.from_module(nn.Linear(3, 4).to(DTYPE))
        with pytest.raises(ConfigurationError, match="schemas differ"):
            pa.blend_(pb, 0.5)

    def test_freeze_unknown(self):
        pset = ParameterSet.from_module(nn.Linear(3, 2).to(DTYPE))
        with pytest.raises(ConfigurationError, match="Unknown parameter"):
            pset.freeze(["nope"])

    def test_freeze_where(self):
        module = nn.Linear(3, 2).to(DTYPE)
        pset = ParameterSet.from_module(module)
        pset.freeze_where(lambda name: name.endswith("bias"))
        assert pset.trainable_names() == ["weight"]
        assert not module.bias.requires_grad

    def test_snapshot_load_and_digest(self):
        pset = ParameterSet.from_module(self._module(0))
        saved = pset.snapshot()
        before = pset.digest()
        with torch.no_grad():
            pset["0.weight"].add_(1.0)
        assert pset.digest() != before
        pset.load_(saved)
        assert pset.digest() == before


class TestGradCheck:
    def test_sum_of_squares(self):
        p = torch.randn((3, 4), dtype=DTYPE, requires_grad=True)
        params = ParameterSet(OrderedDict(p=p))
        report = grad_check(lambda: (p**2).sum(), params, tol=1e-8)
        assert report.passed
        assert report.max_error < 1e-8

    def test_detects_wrong_gradient(self):
        p = (torch.rand(5, dtype=DTYPE) + 0.5).requires_grad_(True)
        params = ParameterSet(OrderedDict(p=p))
        # autograd sees p, the function is p^2
        report = grad_check(lambda: (p * p.detach()).sum(), params)
        assert not report.passed
        assert report.max_error == pytest.approx(0.5, abs=1e-6)

    def test_frozen_entries_report_zero(self):
        p = torch.rand(3, dtype=DTYPE, requires_grad=True)
        q = torch.rand(3, dtype=DTYPE, requires_grad=True)
        params = ParameterSet(OrderedDict(p=p, q=q), frozen=["q"])
        report = grad_check(lambda: (p * q).sum(), params)
        assert torch.equal(report.analytic["q"], torch.zeros(3, dtype=DTYPE))
        assert report.errors["q"] == 0.0
        assert report.passed

    def test_non_scalar_rejected(self):
        p = torch.rand(3, dtype=DTYPE, requires_grad=True)
        with pytest.raises(DimensionError, match="scalar"):
            grad_check(lambda: p * 2, ParameterSet(OrderedDict(p=p)))

    def test_bad_eps(self):
        p = torch.rand(3, dtype=DTYPE, requires_grad=True)
        with pytest.raises(ConfigurationError):
            grad_check(lambda: p.sum(), ParameterSet(OrderedDict(p=p)), eps=0.0)
