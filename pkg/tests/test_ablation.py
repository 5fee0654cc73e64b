import json

import pytest

from bevda.perception import NetConfig
from bevda.trainer import TrainConfig
from bevda.trainer.ablation import CONTROL, FULL, GRIDS, SOURCE_ONLY, grid_arms, run_ablation


def test_grids_share_the_dat_only_base():
    names = {g: [a.name for a in GRIDS[g]] for g in GRIDS}
    assert names["gating"][-1] == names["transfer"][-1] == "dat-only"
    assert "full" in names["components"] and "all-off" in names["components"]


def test_grid_arms_deduplicates():
    arms = grid_arms(["components", "gating", "transfer"])
    keys = [a.key() for a in arms]
    assert len(keys) == len(set(keys))
    assert [a.name for a in arms].count("dat-only") == 1


def test_unknown_grid():
    with pytest.raises(KeyError):
        grid_arms(["nope"])


def test_component_rows_toggle_families():
    rows = {a.name: a.toggles for a in GRIDS["components"]}
    assert rows["da+kt"].needs_teacher and not rows["da+kt"].ema and not rows["da+kt"].alignment_spaces
    assert rows["ba"].alignment_spaces == ("bev",) and not rows["ba"].needs_teacher
    assert rows["ba+ia"].alignment_spaces == ("bev", "image")
    assert rows["gas-only"].alignment_spaces == ("bev", "image", "voxel")
    assert not rows["all-off"].needs_teacher and not rows["all-off"].alignment_spaces


def test_transfer_rows():
    rows = {a.name: a.toggles for a in GRIDS["transfer"]}
    assert rows["pl"].pseudo_labels and rows["pl"].transfer_spaces == ()
    assert rows["pl+bev"].transfer_spaces == ("bev",)
    assert set(rows["pl+bev+voxel"].transfer_spaces) == {"bev", "voxel"}
    assert set(rows["dat-only"].transfer_spaces) == {"image", "voxel", "bev"}


def test_tiny_run_writes_table(tmp_path):
    cfg = TrainConfig(net=NetConfig(c_img=8, c_depth=8, c_bev=8), pretrain_epochs=1, adapt_epochs=1,
                      batch_size=2, mc_passes=2)
    arms = [SOURCE_ONLY, CONTROL, FULL, CONTROL]
    res = run_ablation(cfg, arms, [0], n_train=2, n_eval=2, out_dir=tmp_path)
    assert res.target_map["all-off"] == [res.target_map["all-off"][0]]
    saved = json.loads((tmp_path / "results.json").read_text())
    assert saved["target_map"] == res.target_map
    table = (tmp_path / "table.md").read_text()
    assert "| full |" in table and "source eval" in table
    assert (tmp_path / "seed_0" / "full" / "checkpoint.pt").exists()
