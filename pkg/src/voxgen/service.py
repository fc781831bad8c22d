"""Command-line driver and HTTP API.

The CLI wraps extraction, training, sampling, editing, export and
evaluation of a workspace directory. The HTTP API carries the interactive
editing loop for the browser client: sessions hold a pyramid, trained
models and generated samples; every mutation is serialized per session,
idempotent under request-id retry, and appended to a replayable op log.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from . import metrics
from .errors import VoxgenError
from .exemplar import Pyramid, WorldTransform, extract_pyramid, load_mesh
from .grid import SparseGrid, VoxelBox, load_grid, save_grid
from .pipeline import (
    EditCommand,
    RunConfig,
    TrainedLevel,
    apply_edit_script,
    export_points,
    load_models,
    load_pyramid,
    parse_edit_script,
    ply_points_bytes,
    sample,
    save_pyramid,
    save_trained_level,
    train_all,
    write_ply_points,
)

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
SAMPLE_DIR = "samples"


# ---------------------------------------------------------------------------
# workspace helpers shared by CLI and service


def _sample_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _write_sample(directory: Path, sample_id: str, grids, transform, meta: dict):
    out = directory / SAMPLE_DIR / sample_id
    out.mkdir(parents=True, exist_ok=True)
    for gr in grids:
        save_grid(out / f"level{gr.level}.svg1", gr)
        write_ply_points(
            out / f"level{gr.level}.ply", export_points(gr, transform)
        )
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def _load_sample(directory: Path, sample_id: str, config: RunConfig):
    out = directory / SAMPLE_DIR / sample_id
    grids = []
    for level in range(1, config.levels + 1):
        voxel_size = 2.0 / config.base_resolution / 2 ** (level - 1)
        grids.append(load_grid(out / f"level{level}.svg1", voxel_size=(voxel_size,) * 3))
    return grids


# ---------------------------------------------------------------------------
# CLI


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VoxgenError as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="voxgen",
        description="Single-exemplar 3D shape variation engine on sparse voxel grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract a ground-truth pyramid from a mesh")
    p.add_argument("mesh")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train per-level models for a workspace")
    p.add_argument("workspace")
    p.add_argument("--config", default=None)
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--sequential", action="store_true", help="disable parallel levels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate variations")
    p.add_argument("workspace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--resize", default=None, help="X,Y,Z level-1 resolution")
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddim")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="apply an edit script and regenerate")
    p.add_argument("workspace")
    p.add_argument("--script", required=True)
    p.add_argument("--sample", default=None, help="base sample id (default: latest)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("export", help="export a .svg1 grid to a PLY point cloud")
    p.add_argument("grid")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--manifest", default=None, help="pyramid manifest for the transform")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="diversity/fidelity report over generated samples")
    p.add_argument("workspace")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--csv", default=None, help="write the pairwise matrix here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("data_dir")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)
    return parser


def cmd_extract(args) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    mesh = load_mesh(args.mesh)
    pyramid = extract_pyramid(
        mesh,
        num_levels=config.levels,
        base_resolution=config.base_resolution,
        sample_resolution=config.sample_resolution,
        qem=config.qem,
    )
    save_pyramid(args.out, pyramid, config)
    for gr in pyramid.levels:
        print(f"level {gr.level}: {gr.num_voxels} voxels at {gr.resolution}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    workspace = Path(args.workspace)
    pyramid, config = load_pyramid(workspace)
    if args.config:
        config = RunConfig.from_file(args.config)
    levels = [args.level] if args.level else None
    trained = train_all(pyramid, config, levels=levels, parallel=not args.sequential)
    ckpt = workspace / CHECKPOINT_DIR
    for t in trained.values():
        save_trained_level(ckpt, t, config)
        summary = t.log.summary()["denoiser"]
        print(f"level {t.level}: {json.dumps(summary)}")
    return 0


def _parse_resize(raw):
    if raw is None:
        return None
    parts = [int(v) for v in raw.split(",")]
    if len(parts) != 3:
        raise ValueError("--resize expects X,Y,Z")
    return tuple(parts)


def cmd_sample(args) -> int:
    workspace = Path(args.workspace)
    pyramid, config = load_pyramid(workspace)
    models = load_models(workspace / CHECKPOINT_DIR, config)
    resize = _parse_resize(args.resize)
    for k in range(args.count):
        seed = args.seed + k
        grids = sample(models, config, sampler=args.sampler, seed=seed,
                       initial_resolution=resize)
        sid = _sample_id(
            {"op": "sample", "seed": seed, "resize": resize, "sampler": args.sampler}
        )
        _write_sample(
            workspace, sid, grids, pyramid.world_transform,
            {"op": "sample", "seed": seed, "resize": resize, "sampler": args.sampler},
        )
        print(f"sample {sid}: " + ", ".join(str(g.num_voxels) for g in grids))
    return 0


def cmd_edit(args) -> int:
    workspace = Path(args.workspace)
    pyramid, config = load_pyramid(workspace)
    models = load_models(workspace / CHECKPOINT_DIR, config)
    commands = parse_edit_script(Path(args.script).read_text())
    base_id = args.sample
    if base_id is None:
        metas = sorted((workspace / SAMPLE_DIR).glob("*/meta.json"))
        if not metas:
            raise VoxgenError("no samples to edit; run `voxgen sample` first")
        base_id = metas[-1].parent.name
    grids = _load_sample(workspace, base_id, config)
    edited = apply_edit_script(models, config, grids, commands, seed=args.seed)
    sid = _sample_id(
        {"op": "edit", "base": base_id, "seed": args.seed,
         "script": Path(args.script).read_text()}
    )
    _write_sample(
        workspace, sid, edited, pyramid.world_transform,
        {"op": "edit", "base": base_id, "seed": args.seed},
    )
    print(f"sample {sid}")
    return 0


def cmd_export(args) -> int:
    transform = WorldTransform.identity()
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        transform = WorldTransform(
            manifest["world_transform"]["scale"],
            tuple(manifest["world_transform"]["translation"]),
        )
    grid = load_grid(args.grid)
    write_ply_points(args.out, export_points(grid, transform))
    print(f"wrote {args.out} ({grid.num_voxels} points)")
    return 0


def cmd_eval(args) -> int:
    workspace = Path(args.workspace)
    pyramid, config = load_pyramid(workspace)
    models = load_models(workspace / CHECKPOINT_DIR, config)
    finest_gt = pyramid.levels[-1]
    gt_points = finest_gt.world_points()
    occs, chamfers = [], []
    for k in range(args.samples):
        grids = sample(models, config, seed=args.seed + k)
        pts = grids[-1].world_points()
        occs.append(metrics.voxelize_points(pts, args.resolution))
        chamfers.append(metrics.chamfer(pts, gt_points))
    diversity = metrics.pairwise_diversity(occs)
    voxel_edge = max(finest_gt.voxel_size)
    print(f"samples = {args.samples}")
    print(f"occupancy_resolution = {args.resolution}")
    print(f"pairwise_diversity = {diversity:.6f}")
    print(f"chamfer_mean = {float(np.mean(chamfers)):.6f}")
    print(f"chamfer_mean_voxel_edges = {float(np.mean(chamfers)) / voxel_edge:.3f}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("i,j,one_minus_iou\n")
            for i in range(len(occs)):
                for j in range(i + 1, len(occs)):
                    f.write(f"{i},{j},{1.0 - metrics.iou(occs[i], occs[j]):.6f}\n")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    app = make_app(Path(args.data_dir))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# HTTP service


@dataclass
class Session:
    """One exemplar's interactive state; mutations serialize on `lock`."""

    session_id: str
    directory: Path
    pyramid: Pyramid
    config: RunConfig
    models: dict[int, TrainedLevel] | None = None
    samples: dict[str, list[SparseGrid]] = field(default_factory=dict)
    latest_sample: str | None = None
    training: dict = field(default_factory=lambda: {"state": "idle", "levels": {}})
    seed_counter: int = 0
    request_cache: dict[str, dict] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def next_seed(self) -> int:
        seed = self.seed_counter
        self.seed_counter += 1
        return seed

    def log_op(self, record: dict) -> None:
        with open(self.directory / "oplog.jsonl", "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        (self.directory / "state.json").write_text(
            json.dumps({"seed_counter": self.seed_counter,
                        "latest_sample": self.latest_sample})
        )


def make_app(data_root: Path) -> FastAPI:
    data_root = Path(data_root)
    data_root.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="voxgen service")
    sessions: dict[str, Session] = {}

    def get_session(session_id: str) -> Session:
        if session_id not in sessions:
            path = data_root / "sessions" / session_id
            if path.exists():
                sessions[session_id] = load_session(path)
            else:
                raise HTTPException(404, f"unknown session {session_id}")
        return sessions[session_id]

    def mutate(session: Session, request_id: str | None, fn):
        """Serialize mutations; replay cached responses for retried ids."""
        if request_id and request_id in session.request_cache:
            return session.request_cache[request_id]
        if not session.lock.acquire(blocking=False):
            raise HTTPException(409, "another mutation is in progress")
        try:
            if request_id and request_id in session.request_cache:
                return session.request_cache[request_id]
            result = fn()
            if request_id:
                session.request_cache[request_id] = result
            return result
        finally:
            session.lock.release()

    def run_sample_op(session: Session, op: dict) -> dict:
        if session.models is None:
            raise HTTPException(409, "session is not trained yet")
        seed = op.get("seed")
        if seed is None:
            seed = session.next_seed()
        resize = tuple(op["resize"]) if op.get("resize") else None
        sampler = op.get("sampler", "ddim")
        base = op.get("base")
        record = {"op": op["op"], "seed": seed, "resize": resize,
                  "sampler": sampler, "base": base}
        if op["op"] == "edit":
            record["edit"] = op["edit"]
        sid = _sample_id(record)
        if op["op"] in ("sample", "resize"):
            grids = sample(session.models, session.config, sampler=sampler,
                           seed=seed, initial_resolution=resize)
        else:  # edit
            base_grids = session.samples.get(base)
            if base_grids is None:
                raise HTTPException(404, f"unknown sample {base}")
            try:
                cmds = [
                    EditCommand(
                        "copy_paste",
                        level=int(op["edit"]["level"]),
                        src=VoxelBox(
                            tuple(op["edit"]["src_min"]), tuple(op["edit"]["src_max"])
                        ),
                        dst_origin=tuple(op["edit"]["dst_origin"]),
                    )
                ]
                grids = apply_edit_script(
                    session.models, session.config, base_grids, cmds,
                    seed=seed, sampler=sampler,
                )
            except (ValueError, VoxgenError) as exc:
                raise HTTPException(422, str(exc))
        session.samples[sid] = grids
        session.latest_sample = sid
        _write_sample(session.directory, sid, grids,
                      session.pyramid.world_transform, record)
        session.log_op(dict(record, sample_id=sid))
        return {"sample_id": sid, "levels": [g.num_voxels for g in grids]}

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await request.body()
        fmt = request.query_params.get("format", "ply")
        overrides = {
            k: v for k, v in request.query_params.items() if k != "format"
        }
        try:
            config = RunConfig.from_dict(overrides) if overrides else RunConfig()
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        with tempfile.NamedTemporaryFile(suffix=f".{fmt}", delete=False) as tmp:
            tmp.write(body)
            tmp_path = tmp.name
        try:
            mesh = load_mesh(tmp_path)
            pyramid = extract_pyramid(
                mesh,
                num_levels=config.levels,
                base_resolution=config.base_resolution,
                sample_resolution=config.sample_resolution,
                qem=config.qem,
            )
        except VoxgenError as exc:
            raise HTTPException(422, f"{type(exc).__name__}: {exc}")
        session_id = hashlib.sha1(body).hexdigest()[:12]
        directory = data_root / "sessions" / session_id
        directory.mkdir(parents=True, exist_ok=True)
        save_pyramid(directory / "pyramid", pyramid, config)
        session = Session(session_id, directory, pyramid, config)
        sessions[session_id] = session
        return {
            "session_id": session_id,
            "levels": config.levels,
            "resolutions": [g.resolution for g in pyramid.levels],
            "voxels": [g.num_voxels for g in pyramid.levels],
        }

    @app.get("/sessions/{session_id}")
    def session_info(session_id: str):
        s = get_session(session_id)
        return {
            "session_id": s.session_id,
            "levels": s.config.levels,
            "resolutions": [g.resolution for g in s.pyramid.levels],
            "trained": s.models is not None,
            "training": s.training,
            "samples": list(s.samples),
            "latest_sample": s.latest_sample,
        }

    @app.post("/sessions/{session_id}/train")
    async def start_training(session_id: str, request: Request):
        s = get_session(session_id)
        body = await _json_body(request)

        def begin():
            if s.training["state"] == "running":
                return {"state": "running"}
            s.training = {"state": "running", "levels": {}}

            def progress(level, phase, iteration, loss):
                s.training["levels"][str(level)] = {
                    "phase": phase, "iteration": iteration, "loss": float(loss),
                }

            def work():
                try:
                    models = train_all(s.pyramid, s.config, progress=progress)
                    for t in models.values():
                        save_trained_level(
                            s.directory / CHECKPOINT_DIR, t, s.config
                        )
                    s.models = models
                    s.training["state"] = "done"
                except Exception as exc:  # surfaced via status polling
                    log.exception("training failed")
                    s.training["state"] = "failed"
                    s.training["error"] = f"{type(exc).__name__}: {exc}"

            threading.Thread(target=work, daemon=True).start()
            return {"state": "running"}

        return mutate(s, body.get("request_id"), begin)

    @app.get("/sessions/{session_id}/train/status")
    def train_status(session_id: str):
        return get_session(session_id).training

    @app.post("/sessions/{session_id}/sample")
    async def post_sample(session_id: str, request: Request):
        s = get_session(session_id)
        body = await _json_body(request)
        op = {"op": "sample", "seed": body.get("seed"),
              "resize": body.get("resize"), "sampler": body.get("sampler", "ddim")}
        return mutate(s, body.get("request_id"), lambda: run_sample_op(s, op))

    @app.post("/sessions/{session_id}/resize")
    async def post_resize(session_id: str, request: Request):
        s = get_session(session_id)
        body = await _json_body(request)
        if not body.get("resolution"):
            raise HTTPException(422, "resolution required")
        op = {"op": "resize", "seed": body.get("seed"),
              "resize": body["resolution"], "sampler": body.get("sampler", "ddim")}
        return mutate(s, body.get("request_id"), lambda: run_sample_op(s, op))

    @app.post("/sessions/{session_id}/edit")
    async def post_edit(session_id: str, request: Request):
        s = get_session(session_id)
        body = await _json_body(request)
        for key in ("level", "src_min", "src_max", "dst_origin"):
            if key not in body:
                raise HTTPException(422, f"{key} required")
        base = body.get("sample", s.latest_sample)
        if base is None:
            raise HTTPException(409, "no sample to edit")
        op = {"op": "edit", "seed": body.get("seed"), "base": base,
              "sampler": body.get("sampler", "ddim"),
              "edit": {"level": body["level"], "src_min": body["src_min"],
                       "src_max": body["src_max"], "dst_origin": body["dst_origin"]}}
        return mutate(s, body.get("request_id"), lambda: run_sample_op(s, op))

    def _points_response(s: Session, sample_id: str, level: int):
        grids = s.samples.get(sample_id)
        if grids is None:
            raise HTTPException(404, f"unknown sample {sample_id}")
        if not 1 <= level <= len(grids):
            raise HTTPException(404, f"level {level} out of range")
        points = export_points(grids[level - 1], s.pyramid.world_transform)
        return Response(
            content=ply_points_bytes(points), media_type="application/octet-stream"
        )

    @app.get("/sessions/{session_id}/levels/{level}/points")
    def level_points(session_id: str, level: int, sample: str | None = None):
        s = get_session(session_id)
        sid = sample or s.latest_sample
        if sid is None:
            raise HTTPException(404, "no samples yet")
        return _points_response(s, sid, level)

    @app.get("/sessions/{session_id}/export/{sample}/{level}")
    def export_sample(session_id: str, sample: str, level: int):
        return _points_response(get_session(session_id), sample, level)

    app.state.sessions = sessions
    app.state.data_root = data_root
    return app


async def _json_body(request) -> dict:
    raw = await request.body()
    if not raw:
        return {}
    return json.loads(raw)


def load_session(directory: Path) -> Session:
    """Restore a session's full state from disk."""
    directory = Path(directory)
    pyramid, config = load_pyramid(directory / "pyramid")
    session = Session(directory.name, directory, pyramid, config)
    ckpt = directory / CHECKPOINT_DIR
    if (ckpt / "denoiser_l1.svckpt").exists():
        session.models = load_models(ckpt, config)
        session.training = {"state": "done", "levels": {}}
    state_path = directory / "state.json"
    if state_path.exists():
        state = json.loads(state_path.read_text())
        session.seed_counter = state.get("seed_counter", 0)
        session.latest_sample = state.get("latest_sample")
    oplog = directory / "oplog.jsonl"
    if oplog.exists():
        for line in oplog.read_text().splitlines():
            record = json.loads(line)
            sid = record["sample_id"]
            sample_dir = directory / SAMPLE_DIR / sid
            if sample_dir.exists():
                session.samples[sid] = _load_sample(directory, sid, config)
    return session


def replay_session_log(directory: Path) -> dict[str, list[SparseGrid]]:
    """Re-execute a session's op log headlessly.

    Returns {sample_id: grids}; ids and grids must reproduce the recorded
    run exactly (sampling is deterministic given the logged seeds).
    """
    directory = Path(directory)
    pyramid, config = load_pyramid(directory / "pyramid")
    models = load_models(directory / CHECKPOINT_DIR, config)
    produced: dict[str, list[SparseGrid]] = {}
    oplog = directory / "oplog.jsonl"
    if not oplog.exists():
        return produced
    for line in oplog.read_text().splitlines():
        record = json.loads(line)
        expected_id = record.pop("sample_id")
        replay_id = _sample_id(record)
        if replay_id != expected_id:
            raise VoxgenError(
                f"op log replay id mismatch: {replay_id} != {expected_id}"
            )
        if record["op"] in ("sample", "resize"):
            grids = sample(
                models, config, sampler=record["sampler"], seed=record["seed"],
                initial_resolution=tuple(record["resize"]) if record["resize"] else None,
            )
        else:
            base = produced[record["base"]]
            cmds = [
                EditCommand(
                    "copy_paste",
                    level=int(record["edit"]["level"]),
                    src=VoxelBox(
                        tuple(record["edit"]["src_min"]),
                        tuple(record["edit"]["src_max"]),
                    ),
                    dst_origin=tuple(record["edit"]["dst_origin"]),
                )
            ]
            grids = apply_edit_script(
                models, config, base, cmds, seed=record["seed"],
                sampler=record["sampler"],
            )
        produced[expected_id] = grids
    return produced


if __name__ == "__main__":
    sys.exit(main())
