"""Ablation grids at the full toy budget; each grid runs every row from scratch. Run with `pytest -m slow`."""
import pytest

from config import DEFAULT_CONFIG_PATH, PROJECT_ROOT, load_config
from trainer import read_grid, run_ablation_grid

pytestmark = pytest.mark.slow

GRIDS = PROJECT_ROOT / "grids"


def grid_table(name, keep=None):
    rows = read_grid(GRIDS / name)
    if keep is not None:
        rows = [(n, r) for n, r in rows if n in keep]
    base = load_config(DEFAULT_CONFIG_PATH)
    table = run_ablation_grid(rows, base.steps, base, progress=False).set_index("name")
    assert (table["status"] == "ok").all()
    return table["AP50_novel_toy"]


def test_component_ordering():
    novel = grid_table("components.csv", keep={"baseline", "neighbors_only", "neighbors_nra"})
    assert novel["neighbors_nra"] > novel["neighbors_only"] > novel["baseline"]


def test_alignment_only_placement_is_best():
    novel = grid_table("placement.csv")
    assert novel["b+e"] >= novel["a+d"]
    assert novel["a+d"] >= max(novel[n] for n in ("b+c", "b+d", "a+c", "a+e"))
