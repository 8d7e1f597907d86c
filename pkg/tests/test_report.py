"""Table formatting, figure files, and graymap bytes."""

import numpy as np
import pytest

from xmodal.errors import ConfigError, DimensionError
from xmodal.evaluate import AblationReport, ArmResult, ProbeResult
from xmodal.report import (
    ARM_LABELS,
    format_ablation_table,
    render_report,
    save_ablation_chart,
    save_saliency,
    save_training_curves,
    write_pgm,
)
from xmodal.trainer import MetricsRecord

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def build_report(with_failed=True):
    report = AblationReport(seed=5, n_train_clips=70, n_test_clips=30)
    accs = {"full": 0.9, "cross_only": 0.52, "div_only": 0.31,
            "concat": 0.77, "random_init": 1 / 3}
    for arm_name, acc in accs.items():
        arm = ArmResult(arm=arm_name)
        if with_failed and arm_name == "concat":
            arm.failed = True
            arm.fail_reason = "non-finite loss at iteration 9"
        else:
            arm.probes = [
                ProbeResult(task, modality, acc + 0.001 * j, 70, 30, 5)
                for j, (task, modality) in enumerate([
                    ("shape_class", "rgb"), ("shape_class", "sod"),
                    ("motion_class", "rgb"), ("motion_class", "sod"),
                ])
            ]
        report.arms.append(arm)
    return report


class TestTable:
    def test_values_verbatim_and_row_order(self):
        report = build_report(with_failed=False)
        table = format_ablation_table(report)
        lines = table.splitlines()
        labels = [line.split("  ")[0].strip() for line in lines[1:]]
        assert labels == ["Random weights", "Only L_div", "Only L_cross",
                          "Concat", "Our"]
        for arm in report.arms:
            for p in arm.probes:
                assert repr(p.accuracy) in table
        # every cell must parse back to the exact stored float
        our_row = lines[labels.index("Our") + 1].split()
        assert [float(v) for v in our_row[1:]] == [
            p.accuracy for p in report.arm("full").probes
        ]

    def test_failed_arm_cells(self):
        table = format_ablation_table(build_report(with_failed=True))
        concat_line = [l for l in table.splitlines()
                       if l.startswith("Concat")][0]
        assert concat_line.split()[1:] == ["failed"] * 4

    def test_sweep_section(self):
        report = build_report(with_failed=False)
        report.sweep = [
            (2.0, 1.0, ProbeResult("shape_class", "rgb", 0.8, 70, 30, 5)),
            (1.0, 2.0, ProbeResult("shape_class", "rgb", 0.6, 70, 30, 5)),
        ]
        table = format_ablation_table(report)
        assert "loss-weight sweep" in table
        assert "w_cross=2.0 w_div=1.0 accuracy=0.8" in table

    def test_unknown_arm_rejected(self):
        report = AblationReport(seed=0, n_train_clips=1, n_test_clips=1)
        report.arms = [ArmResult(arm="mystery")]
        with pytest.raises(ConfigError, match="mystery"):
            format_ablation_table(report)

    def test_labels_cover_all_standard_arms(self):
        assert set(ARM_LABELS) == {"random_init", "div_only", "cross_only",
                                   "concat", "full"}


def fake_records(n=50):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        vals = rng.uniform(0.1, 1.0, size=6)
        out.append(MetricsRecord(i, *vals.tolist(), 0.5, 0.01))
    return out


class TestFigures:
    def test_training_curves_png(self, tmp_path):
        path = tmp_path / "curves.png"
        save_training_curves(fake_records(), path)
        data = path.read_bytes()
        assert data.startswith(PNG_MAGIC)
        assert len(data) > 1000

    def test_training_curves_need_records(self, tmp_path):
        with pytest.raises(ConfigError):
            save_training_curves([], tmp_path / "x.png")

    def test_ablation_chart_png(self, tmp_path):
        path = tmp_path / "chart.png"
        save_ablation_chart(build_report(), path)
        assert path.read_bytes().startswith(PNG_MAGIC)

    def test_chart_needs_a_completed_arm(self, tmp_path):
        report = AblationReport(seed=0, n_train_clips=1, n_test_clips=1)
        report.arms = [ArmResult(arm="full", failed=True)]
        with pytest.raises(ConfigError):
            save_ablation_chart(report, tmp_path / "x.png")

    def test_render_report_writes_expected_files(self, tmp_path):
        written = render_report(build_report(), tmp_path / "out",
                                records=fake_records())
        names = sorted(p.name for p in written)
        assert names == ["ablation_accuracy.png", "report.txt",
                         "training_curves.png"]
        for p in written:
            assert p.exists() and p.stat().st_size > 0


class TestGraymap:
    def test_exact_bytes(self, tmp_path):
        # peak 2.0 maps to 255; 1.0 to round(127.5) = 128 (banker's to even)
        gray = np.array([[0.0, 1.0, 2.0], [2.0, 0.0, 1.0]])
        path = tmp_path / "m.pgm"
        write_pgm(gray, path)
        expected = b"P5\n3 2\n255\n" + bytes([0, 128, 255, 255, 0, 128])
        assert path.read_bytes() == expected

    def test_zero_map_all_black(self, tmp_path):
        path = tmp_path / "z.pgm"
        write_pgm(np.zeros((4, 5)), path)
        data = path.read_bytes()
        assert data == b"P5\n5 4\n255\n" + bytes(20)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(DimensionError):
            write_pgm(np.zeros((3, 4, 5)), tmp_path / "x.pgm")

    def test_save_saliency_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        sal = np.abs(rng.standard_normal((3, 8, 9)))
        pgm, raw = save_saliency(sal, tmp_path / "sal.out")
        assert pgm.name == "sal.pgm" and raw.name == "sal.f64"
        back = np.fromfile(raw, dtype="<f8").reshape(3, 8, 9)
        assert np.array_equal(back, sal)
        assert pgm.read_bytes().startswith(b"P5\n9 8\n255\n")
