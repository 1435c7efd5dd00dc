import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import csv_text
from locprod.errors import PanelDomainError, PanelIntegrityError, PanelParseError, PanelSchemaError
from locprod.ingest import build_lagged_rows, derive_share, load_canonical, load_panel, load_panel_text, write_panel
from locprod.models.config import SimConfig
from locprod.models.panel import PanelSchema
from locprod.simulator import generate_panel

ROWS = [
    "a,1,1.0,2.0,0.5,0.3,0.0,0.0",
    "a,2,1.1,2.1,0.5,0.4,0.0,0.0",
    "b,1,0.9,1.5,0.2,0.1,1.0,0.0",
    "b,2,1.2,1.6,0.3,0.2,1.0,0.0",
    "b,4,1.3,1.7,0.3,0.2,1.0,0.0",
]


def test_load_canonical_columns():
    panel = load_panel_text(csv_text(ROWS))
    assert panel.n_obs == 5
    assert panel.n_firms == 2
    assert panel.n_locations == 2
    assert panel.dim == 2
    assert panel.has_labor
    assert_allclose(panel.v, derive_share(panel.m, panel.y))


def test_lagged_rows_skip_gaps():
    panel = load_panel_text(csv_text(ROWS))
    lagged = build_lagged_rows(panel)
    # b has periods 1, 2, 4: only (2, 1) pairs
    assert len(lagged) == 2
    assert_array_equal(panel.period[lagged.current], [2, 2])
    assert_array_equal(panel.period[lagged.lagged], [1, 1])


def test_lagged_row_count_matches_balanced_panel():
    panel = generate_panel(SimConfig(n=100, T=10, seed=0)).panel
    assert len(build_lagged_rows(panel)) == 900


def test_missing_column_is_named():
    text = csv_text([r.rsplit(",", 1)[0] for r in ROWS], header="firm_id,period,y,k,l,m,latitude")
    with pytest.raises(PanelSchemaError) as err:
        load_panel_text(text)
    assert err.value.details["column"] == "longitude"
    assert err.value.exit_code == 2


def test_optional_labor_and_longitude():
    rows = ["a,1,1.0,2.0,0.3,0.0", "a,2,1.1,2.1,0.4,0.0"]
    schema = PanelSchema(labor=None, longitude=None)
    panel = load_panel_text(csv_text(rows, header="firm_id,period,y,k,m,latitude"), schema)
    assert not panel.has_labor
    assert panel.dim == 1


def test_non_numeric_value_reports_row():
    rows = list(ROWS)
    rows[2] = "b,1,abc,1.5,0.2,0.1,1.0,0.0"
    with pytest.raises(PanelParseError) as err:
        load_panel_text(csv_text(rows))
    assert err.value.details["row"] == 4
    assert err.value.details["column"] == "y"


def test_log_transform_rejects_nonpositive_levels():
    rows = ["a,1,10,20,5,3,0,0", "a,2,11,-1,5,4,0,0"]
    with pytest.raises(PanelDomainError) as err:
        load_panel_text(csv_text(rows), log_transform=True)
    assert err.value.details["column"] == "k"
    assert err.value.details["period"] == 2


def test_duplicate_firm_period_rejected():
    rows = [ROWS[0], ROWS[0]]
    with pytest.raises(PanelIntegrityError):
        load_panel_text(csv_text(rows))


def test_moving_firm_rejected():
    rows = ["a,1,1.0,2.0,0.5,0.3,0.0,0.0", "a,2,1.1,2.1,0.5,0.4,1.0,0.0"]
    with pytest.raises(PanelIntegrityError):
        load_panel_text(csv_text(rows))


def test_price_indices_set_share(tmp_path):
    text = csv_text(
        ["a,1,1.0,2.0,0.5,0.3,0,0,2.0,1.0", "a,2,1.1,2.1,0.5,0.4,0,0,3.0,1.5"],
        header="firm_id,period,y,k,l,m,latitude,longitude,pm,py",
    )
    panel = load_panel_text(text, PanelSchema(price_materials="pm", price_output="py"))
    assert_allclose(panel.price_ratio, np.log(2.0))
    assert_allclose(panel.v, np.log(2.0) + panel.m - panel.y)


def test_price_ratio_must_be_constant_within_period():
    text = csv_text(
        ["a,1,1.0,2.0,0.5,0.3,0,0,0.1", "b,1,1.1,2.1,0.5,0.4,1,0,0.2"],
        header="firm_id,period,y,k,l,m,latitude,longitude,pr",
    )
    with pytest.raises(PanelIntegrityError):
        load_panel_text(text, PanelSchema(price_ratio="pr"))


def test_levels_fixture(micro_csv, micro_schema):
    panel = load_panel(micro_csv, micro_schema, log_transform=True)
    assert panel.n_obs == 120
    assert panel.n_locations == 6
    assert len(build_lagged_rows(panel)) == 96
    assert np.all(np.isfinite(panel.v))


def test_canonical_writer_reloads(tmp_path):
    panel = generate_panel(SimConfig(n=12, T=4, seed=2)).panel
    write_panel(panel, tmp_path)
    again = load_canonical(tmp_path)
    assert (tmp_path / "panel.json").exists()
    assert_array_equal(again.y, panel.y)
    assert_array_equal(again.v, panel.v)
    assert_array_equal(again.coords, panel.coords)
    assert again.l is None
