"""Tables, CSV schema, and figure rendering."""

import numpy as np

from emucount import report
from emucount.metrics import Histogram
from emucount.trainer import AblationRow, AlignmentProbe, EpochLog, EvalResult

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def result(g0=1.0):
    return EvalResult(games={0: g0, 1: 1.5, 2: None, 3: None}, rmse=2.0)


def test_format_table_aligns_and_dashes_missing():
    text = report.format_table(["metric", "level", "value"],
                               report.metrics_rows(result()))
    lines = text.splitlines()
    assert lines[0].startswith("metric")
    assert any("-" in line for line in lines[2:])   # blank GAME level rendered as -
    assert "rmse" in text


def test_write_csv_formats_floats(tmp_path):
    path = tmp_path / "m.csv"
    report.write_csv(path, ["metric", "level", "value"],
                     [["game", 0, 1.23456789], ["game", 2, None]])
    lines = path.read_text().strip().splitlines()
    assert lines[1] == "game,0,1.234568"
    assert lines[2] == "game,2,"


def test_histogram_text_bars():
    hist = Histogram(bin_width=0.04, counts=[3, 1])
    text = report.histogram_text(hist)
    assert "75.00%" in text and "#" in text


def test_figures_render_png(tmp_path):
    history = [EpochLog(epoch=e, l_bl=1.0 / e, l_cl=0.5 / e, val_game0=2.0 / e,
                        val_rmse=3.0 / e) for e in (1, 2, 3)]
    report.save_training_curves(tmp_path / "c.png", history)

    rows = [AblationRow(name="baseline", result=result(2.0), param_count=100),
            AblationRow(name="+ap", result=result(1.0), param_count=120)]
    report.save_ablation_chart(tmp_path / "a.png", rows)

    probe = AlignmentProbe(hist_rgb=Histogram(0.04, [2, 2]),
                           hist_thermal=Histogram(0.04, [1, 3]),
                           ratios_rgb=np.array([0.01, 0.05]),
                           ratios_thermal=np.array([0.02, 0.06]))
    report.save_alignment_figure(tmp_path / "h.png", probe)
    report.save_density_figure(tmp_path / "d.png", np.random.rand(4, 4), 3.5)

    for name in ("c.png", "a.png", "h.png", "d.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG_MAGIC
