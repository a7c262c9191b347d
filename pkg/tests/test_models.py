"""
Tests for learner traces, chain traces and run results.
"""

import json
import math

import numpy as np
import pytest

from particle_sysid.core import ParameterVector, RandomStream
from particle_sysid.errors import InputError
from particle_sysid.models import ChainTrace, LearnerTrace, RunResult, SearchState, TraceRecord


def make_chain(values, names=("a",)):
    chain = ChainTrace(names, seed=7, config={"algorithm": "mh"})
    for m, value in enumerate(values):
        theta = ParameterVector({names[0]: float(value)})
        chain.append(theta, log_target=-float(m), accepted=m % 2 == 0, logz=-2.0 * m)
    return chain


class TestLearnerTrace:
    """Test the per-iteration learner history."""

    def test_frame_columns(self):
        trace = LearnerTrace()
        trace.append(TraceRecord(0, {"Q": 1.0, "R": 2.0}, -10.0))
        trace.append(TraceRecord(1, {"Q": 0.8, "R": 1.5}, -9.0, 0.5, False))
        frame = trace.to_frame()
        assert list(frame.columns) == ["iter", "Q", "R", "logZ", "step_length", "accepted"]
        assert frame["accepted"].tolist() == [True, False]
        np.testing.assert_array_equal(trace.values("Q"), [1.0, 0.8])
        assert trace[1].step_length == 0.5

    def test_csv(self, tmp_path):
        trace = LearnerTrace()
        trace.append(TraceRecord(0, {"Q": 1.0}, -3.25))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,Q,logZ,step_length,accepted"
        assert lines[1].startswith("0,1,-3.25,")


class TestChainTrace:
    """Test chain storage, summaries and serialization."""

    def test_default_burn_in(self):
        chain = make_chain(range(25))
        assert chain.default_burn_in() == 2
        assert chain.resolve_burn_in(None) == 2

    def test_burn_in_must_leave_samples(self):
        chain = make_chain(range(5))
        with pytest.raises(InputError):
            chain.resolve_burn_in(5)
        with pytest.raises(InputError):
            chain.resolve_burn_in(-1)

    def test_unknown_parameter(self):
        with pytest.raises(InputError):
            make_chain([1.0, 2.0]).samples("b")

    def test_summary_of_known_samples(self):
        x = RandomStream(0).standard_normal(4000)
        summary = make_chain(x).summary(burn_in=0)["a"]
        assert set(summary) == {"mean", "sd", "q025", "q05", "q25", "median", "q75", "q95", "q975", "iact", "ess"}
        assert summary["mean"] == pytest.approx(np.mean(x))
        assert summary["sd"] == pytest.approx(np.std(x, ddof=1))
        assert summary["median"] == pytest.approx(np.median(x))
        assert summary["q025"] < summary["q25"] < summary["q75"] < summary["q975"]
        assert summary["ess"] == pytest.approx(4000 / summary["iact"])

    def test_constant_chain_has_no_iact(self):
        summary = make_chain([3.0] * 20).summary()["a"]
        assert summary["sd"] == 0.0
        assert summary["iact"] is None
        assert summary["ess"] is None

    def test_acceptance_rate(self):
        assert make_chain(range(4)).acceptance_rate == 0.5
        assert math.isnan(ChainTrace(("a",)).acceptance_rate)

    def test_summary_frame(self):
        frame = make_chain(range(30), names=("b",)).summary_frame()
        assert frame["parameter"].tolist() == ["b"]
        assert "ess" in frame.columns

    def test_jsonl_round_trip(self, tmp_path):
        chain = make_chain([0.5, 1.5, 2.5])
        chain.logz[1] = math.nan
        path = tmp_path / "chain.jsonl"
        chain.to_jsonl(path)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["m"] for r in records] == [0, 1, 2]
        assert records[1]["logZ"] is None
        assert set(records[0]) == {"m", "theta", "log_target", "logZ", "accepted"}

        loaded = ChainTrace.from_jsonl(path, seed=7)
        assert list(loaded.param_names) == ["a"]
        np.testing.assert_array_equal(loaded.samples("a"), [0.5, 1.5, 2.5])
        assert loaded.accepted == chain.accepted
        assert math.isnan(loaded.logz[1])
        assert loaded.seed == 7

    def test_empty_jsonl(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("\n")
        with pytest.raises(InputError):
            ChainTrace.from_jsonl(path)

    def test_trajectories_kept_when_requested(self):
        chain = ChainTrace(("a",), trajectories=[])
        path = np.zeros((3, 1))
        chain.append(ParameterVector({"a": 1.0}), 0.0, True, trajectory=path)
        path[0, 0] = 9.0
        assert chain.trajectories[0][0, 0] == 0.0

    def test_to_dict(self):
        data = make_chain(range(4)).to_dict()
        assert data == {"param_names": ["a"], "length": 4, "acceptance_rate": 0.5, "seed": 7,
                        "config": {"algorithm": "mh"}}


class TestResultRecords:
    """Test run results and learner states."""

    def test_run_result_drops_empty_fields(self):
        data = RunResult(algorithm="pem", model="lgss-demo", theta={"A": 0.9}).to_dict()
        assert "posterior" not in data
        assert "error" not in data
        assert data["status"] == "success"
        assert data["exit_code"] == 0

    def test_failed_run_keeps_error(self):
        result = RunResult(algorithm="pg", model="dengue", status="failed", exit_code=3,
                           error={"type": "CapabilityError", "message": "x"})
        assert result.to_dict()["error"]["type"] == "CapabilityError"

    def test_search_state_dict(self):
        theta = ParameterVector({"Q": 1.0, "R": 2.0}, {"Q": (0.0, math.inf)}, free=("Q",))
        state = SearchState(theta, step_length=0.25, iteration=3, stopped="converged")
        assert state.to_dict() == {"theta": {"Q": 1.0, "R": 2.0}, "free": ["Q"], "iterations": 3,
                                   "step_length": 0.25, "stopped": "converged"}
