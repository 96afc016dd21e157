import json

import numpy as np
import pytest

from conftest import small_protocol
from vistaocta import __version__
from vistaocta.cli import main
from vistaocta.container import read_array, write_array, write_volume
from vistaocta.phantom import build_phantom
from vistaocta.presets import tube_grid_phantom
from vistaocta.render import enface as enface_op
from vistaocta.volume import PROTOCOLS


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    proto = small_protocol(ny=24, nx=40, nz=160)
    vol, truth = build_phantom(tube_grid_phantom(proto, (0.9,), (1.6,),
                                                 seed=9))
    write_volume(root / "vol.vvol", vol)
    write_array(root / "ids3d.vvol", truth.ids, "ids", proto)
    return root, vol, truth


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_protocol_listing(capsys):
    assert main(["protocols"]) == 0
    out = capsys.readouterr().out
    for name in PROTOCOLS:
        assert name in out
    assert "invalid" not in out


def test_feasibility_report(capsys):
    rc = main(["analyze", "feasibility", "--protocol", "table1-3x3",
               "--alpha-min", "0.3", "--alpha-max", "2.5"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["feasible"] is True
    assert doc["fast_survival"] == pytest.approx(np.exp(-2.5), abs=1e-9)

    rc = main(["analyze", "feasibility", "--alpha-max", "9.0"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["feasible"] is False


def test_missing_input_file_exits_2(tmp_path, capsys):
    rc = main(["octa", "--input", str(tmp_path / "nope.vvol"),
               "--out-unnorm", str(tmp_path / "u.vvol"),
               "--out-norm", str(tmp_path / "n.vvol")])
    assert rc == 2
    assert "missing file" in capsys.readouterr().err


def test_octa_stage_writes_both_stacks(workdir, tmp_path, capsys):
    root, vol, _ = workdir
    u, n = tmp_path / "u.vvol", tmp_path / "n.vvol"
    rc = main(["octa", "--input", str(root / "vol.vvol"),
               "--out-unnorm", str(u), "--out-norm", str(n)])
    assert rc == 0
    arr, header = read_array(n)
    assert header["semantic"] == "octa_norm"
    assert arr.shape == (7,) + vol.protocol.shape()
    assert 0.0 <= arr.min() and arr.max() <= 1.0


def test_layers_stage_writes_a_surface(workdir, tmp_path):
    root, vol, _ = workdir
    out = tmp_path / "rpe.vvol"
    assert main(["layers", "--input", str(root / "vol.vvol"),
                 "--out", str(out)]) == 0
    surf, header = read_array(out)
    assert header["semantic"] == "surface"
    assert surf.shape == vol.protocol.shape()[:2]
    assert surf.min() > 0


def test_vessel_fit_pulse_render_chain(workdir, tmp_path, capsys):
    root, vol, truth = workdir
    proto = vol.protocol

    # the stage chain consumes files only, so prime it with a stack + enface
    u, n = tmp_path / "u.vvol", tmp_path / "n.vvol"
    assert main(["octa", "--input", str(root / "vol.vvol"),
                 "--out-unnorm", str(u), "--out-norm", str(n)]) == 0
    norm, _ = read_array(n)
    unnorm, _ = read_array(u)
    slab = np.zeros(proto.shape(), bool)
    slab[:, :, 35:75] = True     # depth band around the shallow tube
    flow = enface_op(unnorm.mean(axis=0), slab).astype(np.float32)
    write_array(tmp_path / "enface.vvol", flow, "octa_unnorm", proto)

    ids_out = tmp_path / "ids.vvol"
    graph_out = tmp_path / "graph.json"
    assert main(["vessels", "--enface", str(tmp_path / "enface.vvol"),
                 "--out-ids", str(ids_out), "--out-graph",
                 str(graph_out)]) == 0
    id_img, header = read_array(ids_out)
    assert header["semantic"] == "ids"
    assert (id_img > 0).any()
    assert json.loads(graph_out.read_text())["links"]

    fits_csv = tmp_path / "fits.csv"
    assert main(["fit", "--ids", str(root / "ids3d.vvol"), "--norm", str(n),
                 "--out", str(fits_csv)]) == 0
    lines = fits_csv.read_text().strip().split("\n")
    assert lines[0] == "segment_id,n_voxels,alpha,beta,residual_rms,status"
    assert len(lines) == 1 + len(truth.alpha0)

    pulse_csv = tmp_path / "pulse.csv"
    assert main(["pulse", "--norm", str(n), "--ids", str(root / "ids3d.vvol"),
                 "--out", str(pulse_csv)]) == 0
    assert pulse_csv.read_text().startswith("y_center,time_ms,alpha_band")

    amap = np.where(id_img > 0, 1.2, 0.0).astype(np.float32)
    write_array(tmp_path / "alpha.vvol", amap, "alpha", proto)
    png = tmp_path / "vista.png"
    assert main(["render", "--alpha", str(tmp_path / "alpha.vvol"),
                 "--enface", str(tmp_path / "enface.vvol"),
                 "--out", str(png), "--zero-is-undefined"]) == 0
    assert png.exists()
    assert (tmp_path / "vista.png.json").exists()


def test_run_stage_from_a_volume_file(workdir, tmp_path, capsys):
    root, _, _ = workdir
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("slabs: [scp_icp]\n")
    out_dir = tmp_path / "out"
    rc = main(["run", "--input", str(root / "vol.vvol"),
               "--config", str(cfg), "--out", str(out_dir)])
    assert rc == 0
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["input_sha256"]
    assert "vista_scp_icp.png" in manifest["artifacts"]
    assert "dcp" not in "".join(manifest["artifacts"])
    assert "artifacts" in capsys.readouterr().out
