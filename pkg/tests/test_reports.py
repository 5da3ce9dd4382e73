"""CSV round-trips and deterministic figure rendering."""

from narob.container import content_digest
from narob.reports import (comparison_figure, heatmap_figure, read_csv_rows,
                           sweep_figure, trainlog_figure, write_csv)


def test_csv_round_trip(tmp_path):
    p = tmp_path / "t.csv"
    rows = [("bfs", "openbook", 0, 0.5, 0.01), ("bfs", "baseline", 1, 0.25, 0.0)]
    write_csv(p, ["task", "variant", "seed", "f1_mean", "f1_std"], rows)
    back = read_csv_rows(p)
    assert back == [("bfs", "openbook", "0", "0.5", "0.01"),
                    ("bfs", "baseline", "1", "0.25", "0.0")]


def test_empty_rows_give_header_only_csv(tmp_path):
    p = tmp_path / "e.csv"
    write_csv(p, ["a", "b"], [])
    assert p.read_text().strip() == "a,b"
    assert read_csv_rows(p) == []


SUMMARY = [("bfs", "baseline", 2, 0.4, 0.02), ("bfs", "openbook", 2, 0.6, 0.01),
           ("minimum", "baseline", 2, 0.9, 0.0), ("minimum", "openbook", 2, 0.92, 0.0)]


def test_figures_are_deterministic(tmp_path):
    a = comparison_figure(SUMMARY, tmp_path / "a.svg")
    b = comparison_figure(SUMMARY, tmp_path / "b.svg")
    assert content_digest(a) == content_digest(b)


def test_comparison_figure_sorted_by_improvement(tmp_path):
    svg = open(comparison_figure(SUMMARY, tmp_path / "c.svg")).read()
    # bfs improves by 0.2, minimum by 0.02, so bfs is labeled first
    assert svg.index(">bfs<") < svg.index(">minimum<")


def test_heatmap_labels_match_csv_values(tmp_path):
    rows = [("bfs", "bfs", "0.625"), ("bfs", "minimum", "0.375"),
            ("minimum", "bfs", "0.1875"), ("minimum", "minimum", "0.8125")]
    svg = open(heatmap_figure(rows, tmp_path / "h.svg")).read()
    for _, _, w in rows:
        assert f"{float(w):.3f}" in svg


def test_sweep_and_trainlog_figures_render(tmp_path):
    rows = [("bfs", 16, 0, 0.5, 0.0), ("bfs", 32, 0, 0.6, 0.0),
            ("bfs", 32, 1, 0.7, 0.0)]
    p = sweep_figure(rows, 1, tmp_path / "s.svg", xlabel="x")
    assert open(p).read().startswith("<?xml")
    q = trainlog_figure([0, 1, 2], [1.0, 0.5, 0.25], tmp_path / "l.svg")
    assert open(q).read().startswith("<?xml")


def test_comparison_figure_handles_no_pairs(tmp_path):
    p = comparison_figure([("bfs", "openbook", 1, 0.5, 0.0)], tmp_path / "n.svg")
    assert open(p).read().startswith("<?xml")
