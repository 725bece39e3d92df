"""Tests for granger/core/config.py — environment-backed process config."""
import os
from unittest.mock import patch

import pytest


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _make_fresh_config():
    """Return a brand-new Config instance (bypasses the module-level singleton)."""
    from granger.core.config import Config

    return Config()


# ---------------------------------------------------------------------------
# get_parameter
# ---------------------------------------------------------------------------


class TestGetParameter:
    def test_reads_environment(self):
        with patch.dict(os.environ, {"GRANGER_TEST_PARAM": "abc"}):
            assert _make_fresh_config().get_parameter("GRANGER_TEST_PARAM") == "abc"

    def test_default_when_unset(self):
        with patch.dict(os.environ, {}, clear=False):
            os.environ.pop("GRANGER_TEST_PARAM", None)
            assert _make_fresh_config().get_parameter("GRANGER_TEST_PARAM", default="x") == "x"

    def test_missing_without_default_raises(self):
        with patch.dict(os.environ, {}, clear=False):
            os.environ.pop("GRANGER_TEST_PARAM", None)
            with pytest.raises(ValueError, match="GRANGER_TEST_PARAM"):
                _make_fresh_config().get_parameter("GRANGER_TEST_PARAM")


# ---------------------------------------------------------------------------
# workers
# ---------------------------------------------------------------------------


class TestWorkers:
    def test_defaults_to_serial(self):
        with patch.dict(os.environ, {}, clear=False):
            os.environ.pop("GRANGER_WORKERS", None)
            assert _make_fresh_config().workers == 1

    def test_reads_integer(self):
        with patch.dict(os.environ, {"GRANGER_WORKERS": "4"}):
            assert _make_fresh_config().workers == 4

    @pytest.mark.parametrize("raw", ["zero", "0", "-3"])
    def test_invalid_values_fall_back_to_one(self, raw, caplog):
        with patch.dict(os.environ, {"GRANGER_WORKERS": raw}):
            assert _make_fresh_config().workers == 1
        assert "GRANGER_WORKERS" in caplog.text
