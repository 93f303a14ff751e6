import numpy as np
import pytest

from conftest import random_panel, worked_panel
from twostage.core import (
    ExperimentPanel,
    TupleStructure,
    read_panel_csv,
    treated_count,
    validate_panel,
    write_panel_csv,
)


def test_worked_panel_is_valid(worked):
    report = validate_panel(worked)
    assert report.ok
    assert report.violations == ()


def test_tuple_with_two_treated_is_flagged(worked):
    bad = worked.replace(h=[0.5, 0.5, 0.0, 0.0], z=[1, 0, 1, 0, 0, 0, 0, 0])
    report = validate_panel(bad)
    assert not report.ok
    assert any("tuple treated count" in v for v in report.violations)


def test_single_sampled_unit_violates_floor(worked):
    sampled = np.ones(8, bool)
    sampled[3] = False
    report = validate_panel(worked.replace(sampled=sampled))
    assert any("M_g >= 2" in v for v in report.violations)


def test_validate_is_pure(worked):
    a = validate_panel(worked)
    b = validate_panel(worked)
    assert a == b
    np.testing.assert_array_equal(worked.h, [0.5, 0, 0.5, 0])


@pytest.mark.parametrize(
    "changes, fragment",
    [
        ({"h": [0.5, 0.5, 0.5, 0.5]}, "G0=0"),
        ({"h": [0.0, 0.0, 0.0, 0.0], "z": [0] * 8}, "G1=0"),
        ({"h": [0.3, 0.0, 0.5, 0.0]}, "h must be 0 or pi2"),
        ({"z": [1, 0, 1, 0, 1, 0, 0, 0]}, "treated units inside control clusters"),
        ({"z": [1, 1, 0, 0, 1, 0, 0, 0]}, "floor(pi2*n_g)"),
        ({"y": [np.nan, 1, 1, 1, 5, 3, 2, 2]}, "non-finite"),
        ({"cluster_id": ["1", "1", "3", "4"]}, "duplicate"),
    ],
)
def test_violations_are_itemized(worked, changes, fragment):
    report = validate_panel(worked.replace(**changes))
    assert any(fragment in v for v in report.violations), report.violations


def test_non_coprime_tuples_warn_only():
    ts = TupleStructure(tuples=(("a", "b", "c", "d"),), k=4, l=2)
    panel = ExperimentPanel(
        cluster_id=list("abcd"),
        n=[2] * 4,
        h=[0.5, 0.5, 0, 0],
        unit_cluster=np.repeat(np.arange(4), 2),
        y=np.arange(8.0),
        z=[1, 0, 1, 0, 0, 0, 0, 0],
        pi2=0.5,
        tuple_structure=ts,
    )
    report = validate_panel(panel)
    assert report.ok
    assert any("coprime" in w for w in report.warnings)


def test_ceiling_rounding_switch():
    assert treated_count(0.5, 5) == 2
    assert treated_count(0.5, 5, "ceil") == 3
    assert treated_count(1 / 3, 3) == 1
    with pytest.raises(ValueError):
        treated_count(0.5, 4, "nearest")


def test_records_round_trip(worked):
    again = ExperimentPanel.from_records(worked.records(), pi2=0.5, pi1=0.5, tuple_structure=worked.tuple_structure)
    np.testing.assert_array_equal(again.y, worked.y)
    np.testing.assert_array_equal(again.z, worked.z)
    np.testing.assert_array_equal(again.cluster_id, worked.cluster_id)


def test_csv_round_trip(tmp_path):
    panel = random_panel(np.random.default_rng(3), 6)
    panel = panel.replace(
        c=np.random.default_rng(4).random((panel.G, 2)),
        x=np.random.default_rng(5).random((len(panel.y), 3)) / 7,
    )
    write_panel_csv(panel, tmp_path / "clusters.csv", tmp_path / "units.csv")
    back = read_panel_csv(tmp_path / "clusters.csv", tmp_path / "units.csv")
    assert back.pi2 == panel.pi2
    np.testing.assert_array_equal(back.cluster_id, panel.cluster_id)
    np.testing.assert_array_equal(back.unit_id, panel.unit_id)
    np.testing.assert_array_equal(back.s, panel.s)
    np.testing.assert_array_equal(back.n, panel.n)
    np.testing.assert_array_equal(back.z, panel.z)
    np.testing.assert_array_equal(back.sampled, panel.sampled)
    np.testing.assert_allclose(back.y, panel.y, rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.c, panel.c, rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.x, panel.x, rtol=0, atol=1e-12)


def test_csv_tolerates_missing_optional_columns(tmp_path):
    (tmp_path / "c.csv").write_text("cluster_id,n_g,h\na,2,0.5\nb,2,0\n", encoding="utf-8")
    (tmp_path / "u.csv").write_text(
        "cluster_id,unit_id,outcome,z\na,1,1.0,1\na,2,0.0,0\nb,3,0.5,0\nb,4,0.25,0\n", encoding="utf-8"
    )
    panel = read_panel_csv(tmp_path / "c.csv", tmp_path / "u.csv")
    assert panel.pi2 == 0.5
    assert panel.sampled.all()
    assert panel.x.shape == (4, 0)
    assert validate_panel(panel).ok


def test_csv_missing_required_column(tmp_path):
    (tmp_path / "c.csv").write_text("cluster,n_g\na,2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="cluster_id"):
        read_panel_csv(tmp_path / "c.csv")


def test_panel_arrays_are_read_only(worked):
    with pytest.raises(ValueError):
        worked.y[0] = 10.0


def test_tuples_reordered_by_mean_score():
    ts = TupleStructure(tuples=(("c", "d"), ("a", "b")), scores={"a": 0.1, "b": 0.2, "c": 0.9, "d": 0.8})
    assert ts.ordered_tuples() == (("a", "b"), ("c", "d"))
    assert TupleStructure.from_dict(ts.to_dict()) == ts
