import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from voxgen import fixtures
from voxgen.exemplar import save_obj
from voxgen.pipeline import read_ply_points
from voxgen.service import load_session, main, make_app, replay_session_log

TINY_QUERY = {
    "levels": "2",
    "base_resolution": "8",
    "sample_resolution": "32",
    "T": "50",
    "finer_start": "20",
    "iters_coarsest": "40",
    "iters_finer": "40",
    "iters_upsampler": "30",
    "crop_extent": "8",
    "denoiser_channels": "8",
    "upsampler_channels": "8",
    "seed": "3",
}


def write_demo_mesh(path):
    save_obj(path, fixtures.notched_box())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """CLI workspace: extract + train a tiny exemplar once."""
    root = tmp_path_factory.mktemp("ws")
    mesh_path = root / "box.obj"
    write_demo_mesh(mesh_path)
    cfg = root / "tiny.cfg"
    cfg.write_text(
        "\n".join(f"{k} = {v}" for k, v in TINY_QUERY.items()) + "\n"
    )
    ws = root / "work"
    assert main(["extract", str(mesh_path), "-o", str(ws), "--config", str(cfg)]) == 0
    assert main(["train", str(ws), "--sequential"]) == 0
    return ws


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    """HTTP session on a tiny exemplar, trained through the API."""
    root = tmp_path_factory.mktemp("srv")
    mesh_path = root / "box.obj"
    write_demo_mesh(mesh_path)
    app = make_app(root / "data")
    client = TestClient(app)
    resp = client.post(
        "/sessions", params=dict(TINY_QUERY, format="obj"),
        content=mesh_path.read_bytes(),
    )
    assert resp.status_code == 200, resp.text
    sid = resp.json()["session_id"]
    resp = client.post(f"/sessions/{sid}/train", json={})
    assert resp.status_code == 200
    import time

    for _ in range(600):
        status = client.get(f"/sessions/{sid}/train/status").json()
        if status["state"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert status["state"] == "done", status
    return client, sid, root / "data"


# ---------------------------------------------------------------------------
# CLI


def test_cli_extract_outputs(workspace):
    assert (workspace / "manifest.json").exists()
    assert (workspace / "gt_level1.svg1").exists()
    assert (workspace / "gt_level2.svg1").exists()
    assert (workspace / "run.cfg").exists()


def test_cli_train_level_independent(tmp_path, workspace):
    # training one level without other checkpoints present succeeds
    mesh_path = tmp_path / "m.obj"
    write_demo_mesh(mesh_path)
    cfg = tmp_path / "c.cfg"
    cfg.write_text("\n".join(f"{k} = {v}" for k, v in TINY_QUERY.items()) + "\n")
    ws = tmp_path / "ws2"
    assert main(["extract", str(mesh_path), "-o", str(ws), "--config", str(cfg)]) == 0
    assert main(["train", str(ws), "--level", "2"]) == 0
    assert (ws / "checkpoints" / "denoiser_l2.svckpt").exists()
    assert not (ws / "checkpoints" / "denoiser_l1.svckpt").exists()


def test_cli_sample_deterministic(workspace):
    assert main(["sample", str(workspace), "--seed", "7", "--count", "1"]) == 0
    samples = sorted((workspace / "samples").iterdir())
    assert samples
    sid = samples[0].name
    first = (workspace / "samples" / sid / "level2.ply").read_bytes()
    assert main(["sample", str(workspace), "--seed", "7", "--count", "1"]) == 0
    second = (workspace / "samples" / sid / "level2.ply").read_bytes()
    assert first == second


def test_cli_export(workspace, tmp_path):
    out = tmp_path / "gt.ply"
    code = main(
        ["export", str(workspace / "gt_level2.svg1"), "-o", str(out),
         "--manifest", str(workspace / "manifest.json")]
    )
    assert code == 0
    pts = read_ply_points(out)
    assert len(pts.positions) > 0
    np.testing.assert_allclose(np.linalg.norm(pts.normals, axis=1), 1.0, atol=2e-3)


def test_cli_eval_report(workspace, capsys, tmp_path):
    csv = tmp_path / "pairs.csv"
    assert main(["eval", str(workspace), "--samples", "3", "--resolution", "16",
                 "--csv", str(csv)]) == 0
    out = capsys.readouterr().out
    assert "pairwise_diversity = " in out
    assert "chamfer_mean_voxel_edges = " in out
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "i,j,one_minus_iou"
    assert len(lines) == 1 + 3  # header + C(3,2) pairs


def test_cli_edit(workspace, tmp_path):
    script = tmp_path / "edit.json"
    script.write_text(
        json.dumps(
            [{"op": "copy_paste", "level": 1, "src_min": [0, 0, 0],
              "src_max": [3, 3, 3], "dst_origin": [0, 0, 0]}]
        )
    )
    assert main(["edit", str(workspace), "--script", str(script), "--seed", "5"]) == 0


def test_cli_error_is_machine_parseable(tmp_path, capsys):
    bad = tmp_path / "empty.obj"
    bad.write_text("# nothing\n")
    code = main(["extract", str(bad), "-o", str(tmp_path / "x")])
    assert code != 0
    err = capsys.readouterr().err
    assert err.startswith("error EmptyMesh:")


# ---------------------------------------------------------------------------
# HTTP API


def test_http_session_info(served):
    client, sid, _ = served
    info = client.get(f"/sessions/{sid}").json()
    assert info["trained"] is True
    assert info["levels"] == 2


def test_http_unknown_session_404(served):
    client, _, _ = served
    assert client.get("/sessions/doesnotexist").status_code == 404


def test_http_sample_and_points(served):
    client, sid, _ = served
    resp = client.post(f"/sessions/{sid}/sample", json={"seed": 4})
    assert resp.status_code == 200, resp.text
    sample_id = resp.json()["sample_id"]
    counts = resp.json()["levels"]
    for level in (1, 2):
        ply = client.get(
            f"/sessions/{sid}/levels/{level}/points", params={"sample": sample_id}
        )
        assert ply.status_code == 200
        header = ply.content.split(b"end_header")[0].decode()
        n = int(
            [l for l in header.splitlines() if l.startswith("element vertex")][0]
            .split()[-1]
        )
        assert n == counts[level - 1]  # one point per pruned voxel


def test_http_resize(served):
    client, sid, _ = served
    resp = client.post(
        f"/sessions/{sid}/resize", json={"resolution": [8, 12, 8], "seed": 6}
    )
    assert resp.status_code == 200, resp.text
    info = client.get(f"/sessions/{sid}").json()
    assert resp.json()["sample_id"] in info["samples"]


def test_http_edit_identity_with_replayed_seed(served):
    client, sid, _ = served
    base = client.post(f"/sessions/{sid}/sample", json={"seed": 21}).json()
    eresp = client.post(
        f"/sessions/{sid}/edit",
        json={"level": 1, "src_min": [0, 0, 0], "src_max": [4, 4, 4],
              "dst_origin": [0, 0, 0], "seed": 21, "sample": base["sample_id"]},
    )
    assert eresp.status_code == 200, eresp.text
    edited_id = eresp.json()["sample_id"]
    for level in (1, 2):
        a = client.get(f"/sessions/{sid}/export/{base['sample_id']}/{level}")
        b = client.get(f"/sessions/{sid}/export/{edited_id}/{level}")
        assert a.content == b.content  # identity paste + deterministic resample


def test_http_edit_invalid_box_422(served):
    client, sid, _ = served
    resp = client.post(
        f"/sessions/{sid}/edit",
        json={"level": 1, "src_min": [0, 0, 0], "src_max": [99, 99, 99],
              "dst_origin": [0, 0, 0]},
    )
    assert resp.status_code == 422


def test_http_409_on_concurrent_mutation(served):
    client, sid, data_root = served
    from voxgen.service import load_session

    # grab the live session object and hold its mutation lock
    app_sessions = client.app.state.sessions
    session = app_sessions[sid]
    assert session.lock.acquire(blocking=False)
    try:
        resp = client.post(f"/sessions/{sid}/sample", json={"seed": 91})
        assert resp.status_code == 409
    finally:
        session.lock.release()
    resp = client.post(f"/sessions/{sid}/sample", json={"seed": 91})
    assert resp.status_code == 200


def test_http_idempotent_retry(served):
    client, sid, _ = served
    body = {"seed": 33, "request_id": "req-aaa"}
    first = client.post(f"/sessions/{sid}/sample", json=body).json()
    second = client.post(f"/sessions/{sid}/sample", json=body).json()
    assert first == second


def test_session_save_load_bit_identical_sampling(served):
    client, sid, data_root = served
    resp = client.post(f"/sessions/{sid}/sample", json={"seed": 55}).json()
    restored = load_session(data_root / "sessions" / sid)
    assert restored.models is not None
    from voxgen.pipeline import sample as run_sample

    again = run_sample(restored.models, restored.config, seed=55)
    for ga, gb in zip(restored.samples[resp["sample_id"]], again):
        np.testing.assert_array_equal(ga.coords, gb.coords)
        np.testing.assert_array_equal(
            ga.features.astype(np.float32), gb.features.astype(np.float32)
        )


def test_replay_session_log_reproduces_ids_and_grids(served):
    client, sid, data_root = served
    session_dir = data_root / "sessions" / sid
    produced = replay_session_log(session_dir)
    assert produced  # ops were logged
    restored = load_session(session_dir)
    for sample_id, grids in produced.items():
        recorded = restored.samples[sample_id]
        for ga, gb in zip(grids, recorded):
            np.testing.assert_array_equal(ga.coords, gb.coords)
            np.testing.assert_allclose(
                ga.features.astype(np.float32),
                gb.features.astype(np.float32),
                atol=1e-6,
            )
