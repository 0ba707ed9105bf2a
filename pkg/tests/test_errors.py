"""Tests for custom exceptions"""

import warnings

from adaptrack.errors import (
    CheckpointError,
    ConfigurationError,
    DimensionError,
    NumericalError,
    SinkhornConvergenceWarning,
    AdaptrackError,
    ValidationError,
)


class TestHierarchy:
    def test_validation_errors_share_base(self):
        """Test that every error derives from AdaptrackError"""
        for cls in (ValidationError, DimensionError, ConfigurationError):
            assert issubclass(cls, AdaptrackError)

    def test_dimension_error_is_validation_error(self):
        """Test that shape errors can be caught as validation errors"""
        error = DimensionError("extent mismatch")
        assert isinstance(error, ValidationError)
        assert "extent mismatch" in str(error)


class TestNumericalError:
    def test_message_names_location(self):
        """Test that the message names where the NaN appeared"""
        error = NumericalError("softmax")
        assert error.where == "softmax"
        assert "softmax" in str(error)
        assert error.diagnostics is None

    def test_diagnostics_attached(self):
        """Test that diagnostics survive on the exception"""
        error = NumericalError("loss term total", {"cls": 1.0, "psot": float("nan")})
        assert error.diagnostics["cls"] == 1.0
        assert "loss term total" in str(error)
        assert isinstance(error, AdaptrackError)


class TestCheckpointError:
    def test_path_and_message(self):
        """Test that the path is part of the message"""
        error = CheckpointError("unsupported format 7", "/tmp/run/checkpoint.pt")
        assert error.path == "/tmp/run/checkpoint.pt"
        assert error.message == "unsupported format 7"
        assert "/tmp/run/checkpoint.pt" in str(error)
        assert isinstance(error, AdaptrackError)


class TestSinkhornWarning:
    def test_is_user_warning(self):
        """Test that the warning can be filtered like any UserWarning"""
        assert issubclass(SinkhornConvergenceWarning, UserWarning)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            warnings.warn("residual 1e-3", SinkhornConvergenceWarning)
        assert caught[0].category is SinkhornConvergenceWarning
