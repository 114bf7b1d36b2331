"""
Unit tests for the self-verification suite.
"""

import pytest

from error_handling import ConfigurationError, VerificationError
from estimators import SolverConfig
from verification import (
    PROPERTIES,
    PropertyOutcome,
    VerifyContext,
    outcome_table,
    raise_on_failure,
    run_verification,
    sabotage_scale,
)

FAST_PROPERTIES = [
    "scalar-anchors",
    "estimator-path-mse",
    "arcsine-law",
    "cross-covariance",
    "objective-gradients",
    "map-scalar-oracle",
    "conjugate-gradients",
    "truncated-normal",
    "mse-ordering",
]


class TestVerificationSuite:
    """Test cases for run_verification on reduced trial counts."""

    def setup_method(self):
        self.ctx = VerifyContext(trials=2000, seed=0)

    def test_property_names_unique(self):
        names = [name for name, _, _ in PROPERTIES]
        assert len(names) == len(set(names))
        assert set(FAST_PROPERTIES) <= set(names)

    def test_fast_properties_pass(self):
        outcomes = run_verification(self.ctx, only=FAST_PROPERTIES)
        failed = [f"{o.name}: {o.detail}" for o in outcomes if not o.passed]
        assert not failed, f"Failed properties: {failed}"
        assert [o.name for o in outcomes] == [n for n, _, _ in PROPERTIES if n in FAST_PROPERTIES]

    def test_orthogonality_passes(self):
        outcome = run_verification(self.ctx, only=["residual-orthogonality"])[0]
        assert outcome.passed, outcome.detail

    def test_sabotage_is_detected(self):
        ctx = VerifyContext(trials=2000, seed=0, e_scale=sabotage_scale("e-matrix-scale"))
        outcomes = run_verification(ctx, only=["scalar-anchors", "lmmse-mse-vs-mc"])
        assert [o.passed for o in outcomes] == [False, False]

    def test_unknown_property(self):
        with pytest.raises(ConfigurationError, match="no-such-property"):
            run_verification(self.ctx, only=["scalar-anchors", "no-such-property"])


class TestVerificationHelpers:
    """Test cases for sabotage modes and the outcome helpers."""

    def test_sabotage_scale(self):
        assert sabotage_scale(None) == 1.0
        assert sabotage_scale("e-matrix-scale") == 1.5
        with pytest.raises(ConfigurationError):
            sabotage_scale("flip-signs")

    def test_outcome_table(self):
        outcomes = [
            PropertyOutcome(name="a", passed=True, detail="ok"),
            PropertyOutcome(name="b", passed=False, detail="off by 3"),
        ]
        table = outcome_table(outcomes)
        assert table.columns == ["property", "status", "detail"]
        assert [row["status"] for row in table.rows] == ["PASS", "FAIL"]

    def test_raise_on_failure(self):
        raise_on_failure([PropertyOutcome(name="a", passed=True, detail="ok")])
        with pytest.raises(VerificationError) as info:
            raise_on_failure(
                [
                    PropertyOutcome(name="a", passed=True, detail="ok"),
                    PropertyOutcome(name="b", passed=False, detail="bad"),
                ]
            )
        assert info.value.details["failed"] == ["b"]


@pytest.mark.slow
class TestFullVerification:
    """Full-scale runs of the property suite."""

    def test_default_suite_passes(self):
        outcomes = run_verification(VerifyContext(solver=SolverConfig.desk_scale()))
        failed = [f"{o.name}: {o.detail}" for o in outcomes if not o.passed]
        assert not failed, f"Failed properties: {failed}"

    def test_million_draw_checks(self):
        ctx = VerifyContext(trials=1_000_000, seed=1)
        outcomes = run_verification(ctx, only=["arcsine-law", "residual-orthogonality"])
        assert all(o.passed for o in outcomes), [o.detail for o in outcomes]
