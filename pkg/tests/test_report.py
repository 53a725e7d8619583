import numpy as np
import pytest

from disp.model import BlockGates, ones_gates
from disp.pruner import extract
from disp.report import RunManifest, append_manifest, read_manifests, report_architecture
from disp.selection import GateVector


def test_full_model_report(tiny_spec):
    report = report_architecture(ones_gates(tiny_spec), spec=tiny_spec, p=1.0)
    assert report.widths[["s1", "s2", "s3", "s4", "s5"]].values.tolist() == [[16, 16, 16, 32, 16]] * 2
    assert np.all(report.dim_preservation["preserved"] == 1.0)
    assert report.summary["ratio"].iloc[0] == 1.0
    assert report.summary["target_ratio"].iloc[0] == 1.0


def test_fully_pruned_block(tiny_spec):
    d, m = tiny_spec.d, tiny_spec.d_mid
    closed = BlockGates.from_vectors([GateVector.zeros(d)] * 3 + [GateVector.zeros(m), GateVector.zeros(d)])
    report = report_architecture([BlockGates.ones(tiny_spec), closed], spec=tiny_spec)
    rows = report.widths.set_index("block")
    assert rows.loc[1].tolist() == [0, 0, 0, 0, 0]
    assert rows.loc[0].tolist() == [16, 16, 16, 32, 16]
    assert np.all(report.dim_preservation["preserved"] == 0.5)


def test_report_from_pruned_model_writes_csvs(tmp_path, tiny_model, tiny_spec):
    gates = ones_gates(tiny_spec)
    gates[0].s2 = GateVector([1] * 8 + [0] * 8).as_tensor()
    report = report_architecture(extract(tiny_model, gates), out_dir=tmp_path)
    assert set(report.paths) == {"widths", "dim_preservation", "summary"}
    assert (tmp_path / "widths.csv").read_text().splitlines()[0] == "block,s1,s2,s3,s4,s5"
    assert len((tmp_path / "dim_preservation.csv").read_text().splitlines()) == tiny_spec.d + 1
    first = (tmp_path / "widths.csv").read_bytes()
    report_architecture(extract(tiny_model, gates), out_dir=tmp_path)
    assert (tmp_path / "widths.csv").read_bytes() == first


def test_manifest_is_append_only(tmp_path):
    append_manifest(tmp_path, RunManifest(command="pretrain", config={"lambda": 6.0}, seeds={"seed": 0}))
    append_manifest(tmp_path, RunManifest(command="search", inputs={"corpus.txt": "abc"}))
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 2
    manifests = read_manifests(tmp_path)
    assert [m.command for m in manifests] == ["pretrain", "search"]
    assert manifests[0].config["lambda"] == 6.0
    assert manifests[1].version


def test_no_manifest_yet(tmp_path):
    assert read_manifests(tmp_path) == []


def test_summary_carries_whole_model_ratio(tiny_model, tiny_spec):
    gates = ones_gates(tiny_spec)
    gates[1].s4 = GateVector([1] * 8 + [0] * 24).as_tensor()
    pruned = extract(tiny_model, gates)
    summary = report_architecture(pruned).summary.iloc[0]
    dense_count = sum(t.size for t in tiny_model.params.values())
    assert summary["total_params_dense"] == dense_count
    assert summary["total_params_model"] == pruned.total_param_count()
    assert summary["model_ratio"] == pytest.approx(pruned.total_param_count() / dense_count)
    assert summary["ratio"] < summary["model_ratio"] < 1.0
