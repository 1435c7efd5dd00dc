from pathlib import Path

import numpy as np
import pytest

from locprod.models.config import SimConfig
from locprod.models.panel import PanelDataset, PanelSchema
from locprod.simulator import generate_panel

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("LOCPROD_SEED", raising=False)
    monkeypatch.delenv("LOCPROD_WORKERS", raising=False)


@pytest.fixture
def micro_csv() -> Path:
    return DATA_DIR / "micro_panel.csv"


@pytest.fixture
def micro_config() -> Path:
    return DATA_DIR / "micro_config.yaml"


@pytest.fixture
def micro_schema() -> PanelSchema:
    return PanelSchema(
        firm="firm_id", period="year", output="output", capital="capital", labor="labor",
        materials="materials", latitude="lat", longitude="lon",
    )


@pytest.fixture
def small_config() -> SimConfig:
    return SimConfig(n=40, T=5, seed=3)


@pytest.fixture
def small_sim(small_config):
    return generate_panel(small_config)


@pytest.fixture
def small_panel(small_sim) -> PanelDataset:
    return small_sim.panel


@pytest.fixture
def zero_noise_config() -> SimConfig:
    return SimConfig(n=30, T=6, seed=5, sigma_eta=0.0, sigma_zeta=0.0, invariant_truth=True)


@pytest.fixture
def zero_noise_sim(zero_noise_config):
    return generate_panel(zero_noise_config)


def single_location(panel: PanelDataset, value: float = 0.7) -> PanelDataset:
    """Same panel with every firm moved to one location"""
    return PanelDataset.from_arrays(
        firm_id=panel.firm_id,
        period=panel.period,
        y=panel.y,
        k=panel.k,
        l=panel.l,
        m=panel.m,
        coords=np.full(len(panel), value),
        v=panel.v,
        price_ratio=panel.price_ratio,
    )


def csv_text(rows, header="firm_id,period,y,k,l,m,latitude,longitude") -> str:
    return "\n".join([header, *rows]) + "\n"
