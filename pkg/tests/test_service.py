import json

import numpy as np
import pytest

from fastar_lab import service
from fastar_lab.ar_engine import FarModel, TrainState
from fastar_lab.exceptions import CheckpointError, RunDirectoryLockedError
from fastar_lab.models import HeadKind


@pytest.mark.parametrize(
    "columns,header",
    [
        (service.LOSS_COLUMNS[HeadKind.SHORTCUT], "step,total,fm,consist,self_consist,grad_norm,lr"),
        (service.LOSS_COLUMNS[HeadKind.FLOW_MATCHING], "step,total,fm,self_consist,grad_norm,lr"),
        (service.LOSS_COLUMNS[HeadKind.CVAE], "step,total,recon,kl,grad_norm,lr"),
        (service.COST_COLUMNS, "arch_id,K,O,kv_cache,backbone_flops,head_flops,head_calls,head_share"),
        (service.ABLATION_COLUMNS, "head_kind,N,energy_distance,mean_error,cov_error,n_samples"),
        (service.CFG_COLUMNS, "cfg_weight,K,N,energy_distance,n_samples"),
        (service.ORACLE_COLUMNS, "pattern,source,N,known_positions,mean_error,cov_error,n_samples"),
        (service.GRADCHECK_COLUMNS, "check,kind,max_rel_error,passed"),
    ],
)
def test_report_headers_are_pinned(columns, header):
    text = service.table_to_csv(service.build_table([], columns))
    assert text.splitlines()[0] == header


def test_csv_round_trip_with_comments(tmp_path):
    rows = [{"cfg_weight": 1.0, "K": 4, "N": 2, "energy_distance": 0.25, "n_samples": 10}]
    table = service.build_table(rows, service.CFG_COLUMNS)
    path = service.write_csv(tmp_path / "reports" / "cfg.csv", table, ["seed 3"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed 3"
    assert lines[1] == ",".join(service.CFG_COLUMNS)
    table = service.read_csv(path)
    assert table.colnames == list(service.CFG_COLUMNS)
    assert table["energy_distance"][0] == pytest.approx(0.25)


def test_loss_rows_fill_missing_losses_with_nan():
    reports = [{"step": 0, "loss": 1.5, "fm": 1.5, "grad_norm": 0.2, "lr": 1e-4}]
    (row,) = service.loss_rows(reports, service.LOSS_COLUMNS[HeadKind.SHORTCUT])
    assert row["total"] == 1.5
    assert row["step"] == 0
    assert np.isnan(row["consist"])


def test_grid_rows_carry_coordinates():
    tokens = np.arange(2 * 4 * 2, dtype=float).reshape(2, 4, 2)
    rows, columns = service.grid_rows(tokens, np.array([0, 1]), width=2)
    assert columns == service.GRID_COLUMNS + ("z0", "z1")
    assert len(rows) == 8
    assert rows[7] == {"sample": 1, "label": 1, "position": 3, "row": 1, "col": 1, "z0": 14.0, "z1": 15.0}


def test_run_directory_is_exclusive(tmp_path):
    with service.run_directory(tmp_path / "run") as path:
        assert (path / service.LOCK_NAME).exists()
        with pytest.raises(RunDirectoryLockedError):
            with service.run_directory(path):
                pass
    assert not (tmp_path / "run" / service.LOCK_NAME).exists()


def test_checkpoint_save_and_resume(config, rng, tmp_path):
    model = FarModel.from_config(config)
    state = TrainState.create(model.init(rng), config.optim)
    state.step = 4
    with pytest.raises(CheckpointError):
        service.latest_checkpoint(tmp_path)
    service.save_checkpoint(tmp_path, TrainState.create(model.init(rng), config.optim), config)
    path = service.save_checkpoint(tmp_path, state, config)
    assert path.name == "step_0000004.fits"
    assert service.latest_checkpoint(tmp_path) == path

    restored, meta = service.load_checkpoint(path, config.optim)
    assert meta["step"] == 4
    assert meta["seed"] == config.seed
    assert meta["ckptid"] == service.checkpoint_id(config.run_id, 4)
    assert meta["headkind"] == "shortcut"
    assert restored.step == 4
    for name, value in state.params.items():
        np.testing.assert_array_equal(restored.params[name], value)


def test_manifest_json(config, tmp_path):
    outputs = ["samples/samples.csv"]
    manifest = service.new_manifest("sample", config, checkpoint_id="tiny-0000003", steps=2, outputs=outputs)
    path = service.write_manifest(tmp_path / "manifest.json", manifest)
    data = json.loads(path.read_text())
    assert data["command"] == "sample"
    assert data["seed"] == config.seed
    assert data["config"]["generation"]["steps"] == 2
    assert data["outputs"] == ["samples/samples.csv"]
