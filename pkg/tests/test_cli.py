"""Command-line behavior: outputs, exit codes, determinism."""

import json

import numpy as np
import pytest

import archslim as a
from archslim.cli import main

from helpers import bn_tensor, conv_tensor, low_rank_conv, random_net


@pytest.fixture
def net_path(rng, tmp_path):
    path = tmp_path / "net.nwf"
    a.write_weights(random_net(rng), path)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestUsageErrors:
    def test_delta_out_of_range_names_flag(self, net_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["plan", net_path, "--delta", "1.5"])
        assert err.value.code == 1
        assert "--delta" in capsys.readouterr().err

    def test_unknown_flag(self, net_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["plan", net_path, "--bogus"])
        assert err.value.code == 1

    def test_delta_and_target_conflict(self, net_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["plan", net_path, "--delta", "0.9", "--target", "params:0.5"])
        assert err.value.code == 1

    def test_bad_target_format(self, net_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["plan", net_path, "--target", "watts:0.5"])
        assert err.value.code == 1
        assert "--target" in capsys.readouterr().err

    def test_bad_input_shape(self, net_path, capsys):
        with pytest.raises(SystemExit) as err:
            main(["stats", net_path, "--input-shape", "3,32"])
        assert err.value.code == 1

    def test_missing_subcommand(self, capsys):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--version"])
        assert err.value.code == 0
        assert capsys.readouterr().out.strip() == f"3as {a.__version__}"


class TestDataErrors:
    def test_missing_file(self, capsys):
        code, _, err = run(["stats", "no-such.nwf"], capsys)
        assert code == 2
        assert "error" in err

    def test_corrupt_file(self, tmp_path, capsys):
        path = tmp_path / "bad.nwf"
        path.write_bytes(b"XXXX garbage")
        code, _, err = run(["plan", str(path)], capsys)
        assert code == 2

    def test_stale_plan(self, rng, tmp_path, capsys):
        net1, net2 = tmp_path / "a.nwf", tmp_path / "b.nwf"
        a.write_weights(random_net(rng), net1)
        a.write_weights(random_net(np.random.default_rng(9)), net2)
        plan = tmp_path / "plan.json"
        assert main(["plan", str(net1), "-o", str(plan)]) == 0
        capsys.readouterr()
        code, _, err = run(
            ["prune", str(net2), "--plan", str(plan), "-o", str(tmp_path / "s.nwf")],
            capsys,
        )
        assert code == 2
        assert "different weights" in err


class TestAnalyze:
    def test_csv_to_stdout(self, net_path, capsys):
        code, out, _ = run(["analyze", net_path], capsys)
        assert code == 0
        assert out.startswith("layer,n,alpha")

    def test_report_and_output_files(self, net_path, tmp_path, capsys):
        csv = tmp_path / "curves.csv"
        report = tmp_path / "report.json"
        code, out, _ = run(
            ["analyze", net_path, "-o", str(csv), "--report", str(report)], capsys
        )
        assert code == 0
        assert out == ""
        assert csv.read_text().startswith("layer,n,alpha")
        doc = json.loads(report.read_text())
        for entry in doc["layers"]:
            assert 1 <= entry["selected"] <= entry["filters"]
            assert len(entry["alpha"]) == entry["filters"]

    def test_zero_variance_layer_warned_and_omitted(self, rng, tmp_path, capsys):
        dead = np.ones((4, 1, 3, 3), np.float32) * np.arange(
            1, 5, dtype=np.float32
        ).reshape(4, 1, 1, 1)
        net = a.build_network(
            [
                conv_tensor("dead", dead),
                conv_tensor("live", rng.normal(size=(4, 4, 3, 3)), follows="dead"),
            ]
        )
        path = tmp_path / "z.nwf"
        a.write_weights(net, path)
        code, out, err = run(["analyze", str(path)], capsys)
        assert code == 0
        assert "dead" in err and "warning" in err
        assert "dead," not in out
        assert "live," in out


class TestPlanPruneStudent:
    def test_plan_file_valid(self, net_path, tmp_path, capsys):
        plan_path = tmp_path / "plan.json"
        code, _, _ = run(["plan", net_path, "-o", str(plan_path)], capsys)
        assert code == 0
        plan = a.plan_from_json(plan_path.read_text())
        for e in plan.entries:
            assert 1 <= e.kept_filters <= e.original_filters

    def test_prune_then_stats_pipeline(self, net_path, tmp_path, capsys):
        plan_path = tmp_path / "plan.json"
        slim_path = tmp_path / "slim.nwf"
        audit_path = tmp_path / "audit.json"
        assert main(["plan", net_path, "-o", str(plan_path)]) == 0
        assert (
            main(
                [
                    "prune", net_path, "--plan", str(plan_path),
                    "--criterion", "l2", "-o", str(slim_path),
                    "--audit", str(audit_path),
                ]
            )
            == 0
        )
        capsys.readouterr()
        slim = a.read_weights(slim_path)
        plan = a.plan_from_json(plan_path.read_text())
        kept = plan.kept_by_layer()
        for rec in slim.conv_layers():
            assert rec.shape[0] == kept[rec.name]
        audit = json.loads(audit_path.read_text())
        assert audit["criterion"] == "l2"
        for name, idx in audit["layers"].items():
            assert idx == sorted(idx)
            assert len(idx) == kept[name]
        code, out, _ = run(
            ["stats", net_path, "--after", str(slim_path)], capsys
        )
        assert code == 0
        assert "TOTAL" in out

    def test_prune_inline_delta(self, net_path, tmp_path, capsys):
        slim_path = tmp_path / "slim.nwf"
        code, _, _ = run(
            ["prune", net_path, "--delta", "0.8", "-o", str(slim_path)], capsys
        )
        assert code == 0
        a.read_weights(slim_path)

    def test_student_manifest_chains_channels(self, rng, tmp_path, capsys):
        tensors = []
        prev = None
        for i, rank in enumerate((2, 3, 1)):
            name = f"conv{i}"
            tensors.append(
                a.LayerTensor(
                    name,
                    a.LayerKind.CONV2D,
                    low_rank_conv(rng, 16, 3 if prev is None else 16, 3, rank),
                    follows=prev,
                )
            )
            prev = name
        path = tmp_path / "r.nwf"
        a.write_weights(a.build_network(tensors), path)
        code, out, _ = run(["student", str(path), "--delta", "0.99"], capsys)
        assert code == 0
        doc = json.loads(out)
        convs = [e for e in doc["layers"] if e["kind"] == "conv2d"]
        assert [e["out_channels"] for e in convs] == [2, 3, 1]
        assert [e["in_channels"] for e in convs] == [3, 2, 3]

    def test_stats_json(self, net_path, capsys):
        code, out, _ = run(["stats", net_path, "--json"], capsys)
        assert code == 0
        doc = json.loads(out)
        assert doc["total_params"] == sum(
            e["params"] for e in doc["per_layer"]
        )

    def test_stats_macs_halved(self, net_path, capsys):
        _, flops_out, _ = run(["stats", net_path, "--json"], capsys)
        _, macs_out, _ = run(["stats", net_path, "--json", "--macs"], capsys)
        flops = json.loads(flops_out)
        macs = json.loads(macs_out)
        assert macs["total_flops"] * 2 == flops["total_flops"]


class TestDeterminism:
    def test_repeated_runs_byte_identical(self, net_path, tmp_path, capsys):
        outs = []
        for tag in ("one", "two"):
            base = tmp_path / tag
            base.mkdir()
            csv = base / "curves.csv"
            plan = base / "plan.json"
            slim = base / "slim.nwf"
            assert main(["analyze", net_path, "-o", str(csv)]) == 0
            assert main(["plan", net_path, "-o", str(plan)]) == 0
            assert (
                main(["prune", net_path, "--plan", str(plan), "-o", str(slim)]) == 0
            )
            outs.append(
                (csv.read_bytes(), plan.read_bytes(), slim.read_bytes())
            )
        assert outs[0] == outs[1]
