import dataclasses

import pytest

from talkforge.errors import ContractError
from talkforge.latency import (
    CostModel,
    LatencyReport,
    Scenario,
    StageTiming,
    multi_codebook_mtp_scenario,
    simulate_cost,
    single_codebook_flow_scenario,
)


class TestScenario:
    def test_first_chunk_arithmetic(self):
        s = Scenario()
        assert s.frames_first_chunk() == 10  # 0.8 s at 12.5 frames/s
        assert s.tokens_needed() == 4        # ceil(10 / 3)

    @pytest.mark.parametrize("n_mtp", range(6))
    def test_backbone_call_law(self, n_mtp):
        mtp = Scenario(n_mtp=n_mtp, mode="mtp")
        assert mtp.backbone_calls() == -(-10 // (n_mtp + 1))
        plain = Scenario(n_mtp=n_mtp, mode="backbone_only")
        assert plain.backbone_calls() == 10


class TestSimulateCost:
    def test_reference_totals(self):
        # calibrated defaults must reproduce the two headline totals:
        # baseline 725.90 ms, direct multi-codebook + 4 MTP stages 348.86 ms
        costs = CostModel()
        base = simulate_cost(costs, single_codebook_flow_scenario())
        ours = simulate_cost(costs, multi_codebook_mtp_scenario())
        assert abs(base.mean("total") - 725.90) < 1e-6
        assert abs(ours.mean("total") - 348.86) < 1e-6
        ratio = base.mean("total") / ours.mean("total")
        assert abs(ratio - 2.08) < 0.05

    def test_zero_costs_give_zero_total(self):
        costs = CostModel(0.0, 0.0, 0.0, 0.0)
        report = simulate_cost(costs, Scenario())
        assert report.mean("total") == 0.0

    def test_vocoder_cost_additivity(self):
        a = simulate_cost(CostModel(vocoder_direct_ms=50.0), Scenario())
        b = simulate_cost(CostModel(vocoder_direct_ms=100.0), Scenario())
        assert b.mean("vocoder") == 2 * a.mean("vocoder")
        assert b.mean("thinker") == a.mean("thinker")
        assert b.mean("talker") == a.mean("talker")
        assert abs((b.mean("total") - a.mean("total")) - 50.0) < 1e-9

    def test_negative_cost_rejected(self):
        with pytest.raises(ContractError):
            CostModel(thinker_token_ms=-1.0)

    def test_unknown_profile_rejected(self):
        with pytest.raises(ContractError):
            simulate_cost(CostModel(), Scenario(vocoder="magic"))

    def test_simulated_residual_is_zero(self):
        report = simulate_cost(CostModel(), Scenario())
        for timing in report.first_chunk:
            assert abs(timing.residual_ms) < 1e-9


class TestReport:
    def make_report(self):
        timings = [StageTiming(10.0, 20.0, 5.0, 36.0), StageTiming(12.0, 18.0, 5.0, 36.0)]
        return LatencyReport(
            mode="mtp", n_mtp=4, seed=0, repetitions=2, source="live",
            first_chunk=timings, frames_first_chunk=10, backbone_calls_first_chunk=2,
        )

    def test_mean_and_stderr(self):
        report = self.make_report()
        assert report.mean("thinker") == 11.0
        assert report.stderr("thinker") == pytest.approx(1.0)
        assert report.stderr("vocoder") == 0.0

    def test_residual_identity(self):
        report = self.make_report()
        t = report.first_chunk[0]
        assert t.residual_ms == pytest.approx(36.0 - 35.0)
        assert t.total_ms == pytest.approx(
            t.thinker_ms + t.talker_ms + t.vocoder_ms + t.residual_ms)

    def test_csv_rows_schema(self):
        rows = self.make_report().csv_rows()
        assert all(set(r) == {"stage", "ms", "mean", "stderr"} for r in rows)
        stages = {r["stage"] for r in rows}
        assert stages == {"thinker", "talker", "vocoder", "total"}

    def test_json_roundtrip_fields(self):
        d = self.make_report().to_dict()
        assert d["summary"]["talker"]["mean_ms"] == 19.0
        assert len(d["first_chunk"]) == 2
