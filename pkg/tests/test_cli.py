import json
import xml.etree.ElementTree as ET

import pytest

from lgnet.cli import main

COMMANDS = [
    "gen-data", "propose", "train-stage1", "train-stage2",
    "eval", "localize", "ablate", "plot",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny end-to-end run: dataset, proposals, both stages."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    props = root / "props"
    stage1 = root / "stage1.lgn"
    stage2 = root / "stage2.lgn"
    assert main([
        "gen-data", "--out", str(data), "--seed", "3",
        "--n-train", "12", "--n-val", "6", "--n-test", "6",
    ]) == 0
    assert main(["propose", "--images", str(data), "--out", str(props), "--top-k", "16"]) == 0
    assert main([
        "train-stage1", "--data", str(data), "--out", str(stage1),
        "--seed", "3", "--epochs", "2", "--batch-size", "6", "--lr", "0.05",
    ]) == 0
    assert main([
        "train-stage2", "--data", str(data), "--model", str(stage1),
        "--proposals", str(props), "--out", str(stage2),
        "--seed", "3", "--epochs", "1", "--batch-size", "6", "--top-k", "16",
    ]) == 0
    return root


class TestParsing:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_help_exits_zero(self, command, capsys):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--config" in out

    def test_unknown_flag_is_usage_error(self):
        assert main(["gen-data", "--out", "x", "--frobnicate"]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["transmogrify"]) == 1

    def test_missing_required_flag_is_usage_error(self):
        assert main(["eval", "--model", "m.lgn"]) == 1


class TestErrors:
    def test_missing_data_dir_is_data_error(self, tmp_path):
        assert main([
            "eval", "--model", str(tmp_path / "no.lgn"), "--data", str(tmp_path / "no"),
        ]) == 2

    def test_stage2_eval_without_proposals_is_data_error(self, workspace):
        assert main([
            "eval", "--model", str(workspace / "stage2.lgn"),
            "--data", str(workspace / "data"),
        ]) == 2


class TestEval:
    def test_prints_percent_tsv(self, workspace, capsys):
        assert main([
            "eval", "--model", str(workspace / "stage1.lgn"),
            "--data", str(workspace / "data"), "--split", "test",
        ]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "mA\tAcc\tPrec\tRec\tF1"
        values = [float(v) for v in out[1].split("\t")]
        assert len(values) == 5
        assert all(0.0 <= v <= 100.0 for v in values)

    def test_writes_report_files(self, workspace, tmp_path, capsys):
        out = tmp_path / "report.json"
        assert main([
            "eval", "--model", str(workspace / "stage2.lgn"),
            "--data", str(workspace / "data"), "--proposals", str(workspace / "props"),
            "--out", str(out),
        ]) == 0
        capsys.readouterr()
        report = json.loads(out.read_text())
        assert set(report) == {"mA", "accuracy", "precision", "recall", "f1"}
        tsv = out.with_suffix(".tsv").read_text().strip()
        assert len(tsv.split("\t")) == 5

    def test_dump_affinity_writes_csv_per_image(self, workspace, tmp_path, capsys):
        dump = tmp_path / "affinity"
        assert main([
            "eval", "--model", str(workspace / "stage2.lgn"),
            "--data", str(workspace / "data"), "--proposals", str(workspace / "props"),
            "--split", "val", "--dump-affinity", str(dump),
        ]) == 0
        capsys.readouterr()
        files = sorted(dump.glob("*_affinity.csv"))
        assert len(files) == 6
        rows = files[0].read_text().strip().splitlines()
        assert len(rows) == 8  # attributes
        assert len(rows[0].split(",")) == 16  # proposals

    def test_byte_identical_across_runs(self, workspace, tmp_path, capsys):
        outs = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            assert main([
                "eval", "--model", str(workspace / "stage1.lgn"),
                "--data", str(workspace / "data"), "--out", str(path),
            ]) == 0
            outs.append(path.read_bytes())
        capsys.readouterr()
        assert outs[0] == outs[1]


class TestLocalize:
    def test_writes_jsonl_overlays_and_heatmaps(self, workspace, tmp_path, capsys):
        out = tmp_path / "loc"
        assert main([
            "localize", "--model", str(workspace / "stage2.lgn"),
            "--data", str(workspace / "data"), "--split", "test",
            "--proposals", str(workspace / "props"), "--out", str(out), "--heatmaps",
        ]) == 0
        capsys.readouterr()
        records = [json.loads(line) for line in (out / "localizations.jsonl").read_text().splitlines()]
        assert len(records) == 6 * 8  # images x attributes
        for record in records:
            assert set(record) >= {"image_id", "attribute_id", "box", "degenerate", "top_proposals"}
            affs = [p["affinity"] for p in record["top_proposals"]]
            assert affs == sorted(affs, reverse=True)
            assert len(affs) == 5
        # gt overlap reported exactly when a ground-truth box exists
        from lgnet.synthdata import load_dataset

        splits, _ = load_dataset(workspace / "data")
        gt = {(s.image_id, i) for s in splits["test"] for i in s.gt_boxes}
        for record in records:
            assert (("iou_gt" in record)
                    == ((record["image_id"], record["attribute_id"]) in gt))
        assert len(list((out / "overlays").glob("*.ppm"))) == 6
        assert len(list((out / "heatmaps").glob("*.pgm"))) == 6 * 8


class TestLocalizeUniformModel:
    def test_uniform_checkpoint_cannot_localize(self, workspace, tmp_path, capsys):
        uniform = tmp_path / "uniform.lgn"
        assert main([
            "train-stage2", "--data", str(workspace / "data"),
            "--model", str(workspace / "stage1.lgn"),
            "--proposals", str(workspace / "props"), "--out", str(uniform),
            "--seed", "3", "--epochs", "1", "--batch-size", "6",
            "--top-k", "16", "--affinity", "uniform",
        ]) == 0
        capsys.readouterr()
        assert main([
            "localize", "--model", str(uniform), "--data", str(workspace / "data"),
            "--proposals", str(workspace / "props"), "--out", str(tmp_path / "loc"),
        ]) == 2


class TestAblate:
    def test_prints_both_arms(self, workspace, tmp_path, capsys):
        out = tmp_path / "ablation.json"
        assert main([
            "ablate", "--name", "no_guidance", "--data", str(workspace / "data"),
            "--proposals", str(workspace / "props"), "--seed", "3",
            "--epochs", "1", "--batch-size", "6", "--top-k", "16", "--out", str(out),
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "ablation: no_guidance"
        assert lines[1].startswith("arm")
        assert lines[2].split("\t")[0].strip() == "uniform"
        assert lines[3].split("\t")[0].strip() == "guided"
        payload = json.loads(out.read_text())
        assert [arm["label"] for arm in payload["arms"]] == ["uniform", "guided"]


class TestPlot:
    def test_svg_has_one_polyline_per_series(self, workspace, tmp_path, capsys):
        log = workspace / "stage1.log.csv"
        out = tmp_path / "curves.svg"
        assert main(["plot", "--log", str(log), "--out", str(out)]) == 0
        capsys.readouterr()
        tree = ET.parse(out)
        ns = {"svg": "http://www.w3.org/2000/svg"}
        polylines = tree.getroot().findall(".//svg:polyline", ns)
        header = log.read_text().splitlines()[0].split(",")
        assert len(polylines) == len(header) - 1

    def test_empty_log_is_data_error(self, tmp_path):
        log = tmp_path / "empty.csv"
        log.write_text("epoch,lr\n")
        assert main(["plot", "--log", str(log), "--out", str(tmp_path / "x.svg")]) == 2
