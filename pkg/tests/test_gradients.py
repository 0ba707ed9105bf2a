"""Finite-difference checks of every differentiable block"""

import pytest
import torch

from adaptrack.gradients import CHECKS, gradient_suite


@pytest.mark.parametrize("name", ["focal", "l1", "giou", "psot", "head"])
def test_check_passes(name):
    report = CHECKS[name](torch.Generator().manual_seed(0))
    assert report.errors
    assert report.passed, f"{name}: {report.max_error:.3e}"


@pytest.mark.slow
def test_full_suite():
    reports = gradient_suite(seed=1)
    assert set(reports) == {
        "focal", "l1", "giou", "psot", "dca_attention", "encoder", "head", "total"
    }
    failed = {name: r.max_error for name, r in reports.items() if not r.passed}
    assert not failed


@pytest.mark.slow
def test_total_covers_every_block():
    report = CHECKS["total"](torch.Generator().manual_seed(0))
    for prefix in ("encoder.", "head.", "adapters.fog."):
        checked = [n for n in report.errors if n.startswith(prefix)]
        assert checked, prefix
        assert any(report.analytic[n].abs().sum() > 0 for n in checked), prefix
    assert report.passed, f"{report.max_error:.3e}"
