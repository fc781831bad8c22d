"""Training and sampling orchestration, editing entry points, export.

Per level: train the upsampler (levels > 1) on random crops, freeze it,
then train the denoiser on crops of the gamma-blended, flooded grids.
Sampling runs coarse to fine: dense noise at level 1, then
prune / upsample / renoise / denoise per finer level. All randomness flows
through named per-level streams so runs replay exactly.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffuse import ddim_times, ddpm_step, ddim_step, forward_mix, make_schedule, renoise
from .errors import Divergence, EmptyResult, EmptySample, VoxgenError
from .exemplar import Pyramid, WorldTransform
from .grid import (
    COLOR,
    N_CHANNELS,
    NORMAL,
    OFFSET,
    SparseGrid,
    VoxelBox,
    crop,
    flood,
    full_grid,
    load_grid,
    paste,
    prune,
    save_grid,
    subdivide,
)
from .net import (
    ConvContext,
    DenoiserParams,
    UpsamplerParams,
    adam_init,
    adam_step,
    denoiser_forward,
    denoiser_from_tensors,
    denoiser_loss_and_grads,
    init_denoiser,
    init_upsampler,
    load_checkpoint,
    save_checkpoint,
    upsampler_forward,
    upsampler_from_tensors,
    upsampler_loss_and_grads,
)

log = logging.getLogger(__name__)

SNAPSHOT_EVERY = 500  # divergence recovery granularity
MAX_CROP_RETRIES = 1000


@dataclass
class RunConfig:
    """Run configuration; defaults are the desk-scale profile."""

    levels: int = 3
    base_resolution: int = 16
    sample_resolution: int = 256
    T: int = 1000
    finer_start: int = 300  # T[l] for l > 1
    iters_coarsest: int = 20000
    iters_finer: int = 40000
    iters_upsampler: int = 10000
    crop_extent: int = 16
    lr_denoiser: float = 1e-4
    lr_upsampler: float = 5e-4
    dropout_denoiser: float = 0.01
    dropout_upsampler: float = 0.05
    denoiser_channels: int = 128
    upsampler_channels: int = 64
    ddim_stride: int = 10
    seed: int = 0
    qem: bool = True

    def __post_init__(self):
        for name in (
            "levels", "base_resolution", "sample_resolution", "T", "finer_start",
            "crop_extent", "denoiser_channels", "upsampler_channels", "ddim_stride",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def finest_resolution(self) -> int:
        return self.base_resolution * 2 ** (self.levels - 1)

    def iterations(self, level: int) -> int:
        return self.iters_coarsest if level == 1 else self.iters_finer

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            f.write("# voxgen run configuration\n")
            for key, value in asdict(self).items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                f.write(f"{key} = {value}\n")

    @staticmethod
    def from_file(path) -> "RunConfig":
        values = {}
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, raw = line.partition("=")
                values[key.strip()] = raw.strip()
        return RunConfig.from_dict(values)

    @staticmethod
    def from_dict(values: dict) -> "RunConfig":
        kwargs = {}
        defaults = RunConfig()
        for key, raw in values.items():
            if not hasattr(defaults, key):
                raise ValueError(f"unknown config key: {key}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return RunConfig(**kwargs)


@dataclass
class TrainLog:
    upsampler_losses: list[float] = field(default_factory=list)
    denoiser_losses: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        def head_tail(xs):
            if not xs:
                return None
            k = max(1, min(100, len(xs) // 10))
            return {
                "initial": float(np.mean(xs[:k])),
                "final": float(np.mean(xs[-k:])),
                "iterations": len(xs),
            }

        return {
            "upsampler": head_tail(self.upsampler_losses),
            "denoiser": head_tail(self.denoiser_losses),
        }


@dataclass
class TrainedLevel:
    level: int
    denoiser: DenoiserParams
    upsampler: UpsamplerParams | None
    log: TrainLog


def level_rng(seed: int, purpose: int, level: int) -> np.random.Generator:
    """Named, seeded stream: one per (purpose, level)."""
    return np.random.default_rng([seed, purpose, level])


_TRAIN, _SAMPLE = 7, 11  # stream purpose tags


# ---------------------------------------------------------------------------
# training


def _random_box(rng, resolution, extent) -> VoxelBox:
    ext = tuple(min(extent, r) for r in resolution)
    lo = tuple(int(rng.integers(0, r - e + 1)) for r, e in zip(resolution, ext))
    return VoxelBox(lo, tuple(l + e for l, e in zip(lo, ext)))


def _nonempty_crop(rng, grid, extent):
    for _ in range(MAX_CROP_RETRIES):
        box = _random_box(rng, grid.resolution, extent)
        cropped = crop(grid, box)
        if cropped.num_voxels:
            return box, cropped
    raise VoxgenError("could not draw a non-empty crop")


def _train_upsampler(coarse, gt_flooded, config, rng, log_out, level=0, progress=None):
    params = init_upsampler(rng, config.upsampler_channels)
    state = adam_init(params.tensors(), config.lr_upsampler, config.dropout_upsampler)
    coarse_extent = max(config.crop_extent // 2, 1)
    for it in range(config.iters_upsampler):
        box, coarse_crop = _nonempty_crop(rng, coarse, coarse_extent)
        seeds = subdivide(coarse_crop)
        fine_box = VoxelBox(
            tuple(2 * v for v in box.min_corner), tuple(2 * v for v in box.max_corner)
        )
        target = crop(gt_flooded, fine_box)
        ctx = ConvContext(seeds, extents=(3,))
        loss, grads, _, _ = upsampler_loss_and_grads(
            params,
            seeds.features.T.astype(np.float32),
            target.features.T.astype(np.float32),
            ctx,
            train_mode=True,
            dropout=config.dropout_upsampler,
            rng=rng,
        )
        if not np.isfinite(loss):
            raise Divergence("upsampler loss diverged", last_good=params)
        adam_step(state, params.tensors(), grads)
        log_out.append(loss)
        if progress is not None and (it + 1) % SNAPSHOT_EVERY == 0:
            progress(level, "upsampler", it + 1, loss)
    return params


def train_level(
    pyramid: Pyramid, level: int, config: RunConfig, rng=None, progress=None
) -> TrainedLevel:
    """Training of one level: upsampler to its budget first, then denoiser.

    `progress(level, phase, iteration, loss)` is invoked every few hundred
    iterations when supplied (drives the service's status endpoint).
    """
    if not 1 <= level <= config.levels:
        raise ValueError(f"level {level} outside 1..{config.levels}")
    rng = rng if rng is not None else level_rng(config.seed, _TRAIN, level)
    schedule = make_schedule(config.T, config.levels, finer_start=config.finer_start)
    gt = pyramid.level(level)
    tlog = TrainLog()

    if level == 1:
        # the sampler starts from a dense grid, so train on the dense
        # topology with the ground truth flooded onto it
        topo = full_grid(1, gt.resolution, gt.voxel_size)
        gt_flooded = flood(topo, gt)
        upsampler = None
        up_full = None
    else:
        coarse = pyramid.level(level - 1)
        seeds_topo = subdivide(coarse)
        gt_flooded = flood(seeds_topo, gt)
        upsampler = _train_upsampler(
            coarse, gt_flooded, config, rng, tlog.upsampler_losses, level, progress
        )
        up_full = upsampler_forward(upsampler, coarse)  # frozen initial guess

    receptive = 5 if level == 1 else 9
    params = init_denoiser(rng, config.denoiser_channels, receptive)
    state = adam_init(params.tensors(), config.lr_denoiser, config.dropout_denoiser)

    whole = all(config.crop_extent >= r for r in gt_flooded.resolution)
    cached_ctx = ConvContext(gt_flooded) if whole else None
    snapshot = None
    iters = config.iterations(level)
    for it in range(iters):
        t = int(rng.integers(1, config.T + 1))
        if whole:
            gt_crop, up_crop, ctx = gt_flooded, up_full, cached_ctx
        else:
            box, gt_crop = _nonempty_crop(rng, gt_flooded, config.crop_extent)
            up_crop = crop(up_full, box) if up_full is not None else None
            ctx = ConvContext(gt_crop)
        noise = rng.standard_normal((N_CHANNELS, gt_crop.num_voxels))
        noisy = forward_mix(gt_crop, up_crop, t, noise, schedule)
        loss, grads, _, _ = denoiser_loss_and_grads(
            params,
            noisy.features.T.astype(np.float32),
            t,
            gt_crop.features.T.astype(np.float32),
            ctx,
            train_mode=True,
            dropout=config.dropout_denoiser,
            rng=rng,
        )
        if not np.isfinite(loss):
            raise Divergence(
                f"denoiser loss diverged at level {level}, iteration {it}",
                last_good=snapshot,
            )
        adam_step(state, params.tensors(), grads)
        tlog.denoiser_losses.append(loss)
        if (it + 1) % SNAPSHOT_EVERY == 0:
            snapshot = {k: v.copy() for k, v in params.tensors().items()}
            if progress is not None:
                progress(level, "denoiser", it + 1, loss)
    if progress is not None:
        progress(level, "done", iters, tlog.denoiser_losses[-1] if tlog.denoiser_losses else 0.0)
    return TrainedLevel(level, params, upsampler, tlog)


def train_all(
    pyramid: Pyramid,
    config: RunConfig,
    levels=None,
    parallel: bool = True,
    progress=None,
) -> dict[int, TrainedLevel]:
    """Train the requested levels; they are independent given the pyramid."""
    levels = list(levels) if levels is not None else list(range(1, config.levels + 1))
    if parallel and len(levels) > 1:
        with ThreadPoolExecutor(max_workers=len(levels)) as pool:
            results = list(
                pool.map(lambda l: train_level(pyramid, l, config, progress=progress), levels)
            )
    else:
        results = [train_level(pyramid, l, config, progress=progress) for l in levels]
    return {r.level: r for r in results}


# ---------------------------------------------------------------------------
# sampling


def _reverse_diffuse(params, grid, t_start, schedule, sampler, rng, stride):
    ctx = ConvContext(grid)
    if sampler == "ddim":
        for t, t_prev in ddim_times(t_start, stride):
            pred = denoiser_forward(params, grid, t, ctx=ctx)
            grid = ddim_step(pred, grid, t, t_prev, schedule)
    elif sampler == "ddpm":
        for t in range(t_start, 0, -1):
            pred = denoiser_forward(params, grid, t, ctx=ctx)
            noise = (
                rng.standard_normal((N_CHANNELS, grid.num_voxels)) if t > 1 else None
            )
            grid = ddpm_step(pred, grid, t, noise, schedule)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return grid


def _prune_or_raise(grid, level):
    try:
        return prune(grid)
    except EmptyResult as exc:
        raise EmptySample(f"pruning emptied level {level}") from exc


def sample(
    models: dict[int, TrainedLevel],
    config: RunConfig,
    sampler: str = "ddim",
    seed: int = 0,
    initial_resolution=None,
) -> list[SparseGrid]:
    """Coarse-to-fine generation; returns the pruned grid of every level."""
    return resample_below(models, config, [], 0, seed, initial_resolution, sampler)


def resample_below(
    models: dict[int, TrainedLevel],
    config: RunConfig,
    levels_output: list[SparseGrid],
    from_level: int,
    seed: int = 0,
    initial_resolution=None,
    sampler: str = "ddim",
) -> list[SparseGrid]:
    """Keep grids 1..from_level, regenerate from_level+1..L."""
    if from_level > len(levels_output):
        raise ValueError("levels_output incomplete for from_level")
    schedule = make_schedule(config.T, config.levels, finer_start=config.finer_start)
    grids = list(levels_output[:from_level])

    if from_level == 0:
        rng = level_rng(seed, _SAMPLE, 1)
        res = tuple(initial_resolution) if initial_resolution else (config.base_resolution,) * 3
        voxel_size = 2.0 / config.base_resolution
        start = full_grid(1, res, voxel_size)
        noisy = start.with_features(
            rng.standard_normal((N_CHANNELS, start.num_voxels)).astype(np.float32)
        )
        out = _reverse_diffuse(
            models[1].denoiser, noisy, config.T, schedule, sampler, rng,
            config.ddim_stride,
        )
        grids.append(_prune_or_raise(out, 1))

    for level in range(len(grids) + 1, config.levels + 1):
        rng = level_rng(seed, _SAMPLE, level)
        up = upsampler_forward(
            models[level].upsampler, grids[level - 2], max_level=config.levels
        )
        t_start = schedule.per_level_start[level - 1]
        noise = rng.standard_normal((N_CHANNELS, up.num_voxels)).astype(np.float32)
        noisy = renoise(up, t_start, noise, schedule)
        out = _reverse_diffuse(
            models[level].denoiser, noisy, t_start, schedule, sampler, rng,
            config.ddim_stride,
        )
        grids.append(_prune_or_raise(out, level))
    return grids


# ---------------------------------------------------------------------------
# editing


@dataclass(frozen=True)
class EditCommand:
    op: str  # "resize" | "copy_paste" | "freeze"
    level: int = 0
    resolution: tuple[int, int, int] | None = None
    src: VoxelBox | None = None
    dst_origin: tuple[int, int, int] | None = None


def parse_edit_script(text: str) -> list[EditCommand]:
    """JSON list of {op, ...} commands."""
    commands = []
    for item in json.loads(text):
        op = item["op"]
        if op == "resize":
            commands.append(
                EditCommand("resize", resolution=tuple(item["resolution"]))
            )
        elif op == "copy_paste":
            commands.append(
                EditCommand(
                    "copy_paste",
                    level=int(item["level"]),
                    src=VoxelBox(tuple(item["src_min"]), tuple(item["src_max"])),
                    dst_origin=tuple(item["dst_origin"]),
                )
            )
        elif op == "freeze":
            commands.append(EditCommand("freeze", level=int(item["level"])))
        else:
            raise ValueError(f"unknown edit op {op!r}")
    return commands


def apply_edit_script(
    models: dict[int, TrainedLevel],
    config: RunConfig,
    grids: list[SparseGrid],
    commands: list[EditCommand],
    seed: int = 0,
    sampler: str = "ddim",
) -> list[SparseGrid]:
    """Run edits on the pruned per-level outputs, regenerating finer levels.

    Edited grids are not re-noised at their own level; generation resumes
    below the deepest edited level.
    """
    grids = list(grids)
    deepest = 0
    for cmd in commands:
        if cmd.op == "resize":
            grids = sample(
                models, config, sampler, seed, initial_resolution=cmd.resolution
            )
            deepest = 0
        elif cmd.op == "copy_paste":
            if not 1 <= cmd.level <= len(grids):
                raise ValueError(f"edit level {cmd.level} out of range")
            grids[cmd.level - 1] = paste(grids[cmd.level - 1], cmd.src, cmd.dst_origin)
            deepest = max(deepest, cmd.level)
        elif cmd.op == "freeze":
            if not 1 <= cmd.level <= len(grids):
                raise ValueError(f"freeze level {cmd.level} out of range")
            deepest = max(deepest, cmd.level)
    if deepest and deepest < config.levels:
        grids = resample_below(models, config, grids, deepest, seed, sampler=sampler)
    return grids


# ---------------------------------------------------------------------------
# point export


@dataclass
class PointSet:
    positions: np.ndarray  # (N, 3) in the exemplar's original frame
    normals: np.ndarray  # (N, 3) unit
    colors: np.ndarray  # (N, 3) in [0, 1]


def export_points(grid: SparseGrid, world_transform: WorldTransform) -> PointSet:
    """One oriented colored point per active voxel, inverse-normalized.

    Exported features are clamped to the extraction ranges: offsets to the
    voxel cube, colors to [0, 1]; normals are re-normalized.
    """
    offsets = np.clip(grid.features[OFFSET].T.astype(np.float64), -0.5, 0.5)
    vs = np.asarray(grid.voxel_size, dtype=np.float64)
    world = grid.voxel_centers() + offsets * vs
    positions = world_transform.invert(world)
    normals = grid.features[NORMAL].T.astype(np.float64)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    fallback = np.zeros_like(normals)
    fallback[:, 2] = 1.0
    normals = np.where(norms > 1e-12, normals / np.maximum(norms, 1e-12), fallback)
    colors = np.clip(grid.features[COLOR].T.astype(np.float64) / 4.0 + 0.5, 0.0, 1.0)
    return PointSet(positions, normals, colors)


def ply_points_bytes(points: PointSet) -> bytes:
    """Binary little-endian PLY: x y z nx ny nz (f32) red green blue (u8)."""
    n = len(points.positions)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(
        n,
        dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)],
    )
    rec["xyz"] = points.positions
    rec["n"] = points.normals
    rec["rgb"] = np.clip(np.round(points.colors * 255.0), 0, 255).astype(np.uint8)
    return header.encode() + rec.tobytes()


def write_ply_points(path, points: PointSet) -> None:
    with open(path, "wb") as f:
        f.write(ply_points_bytes(points))


def read_ply_points(path) -> PointSet:
    with open(path, "rb") as f:
        data = f.read()
    header_end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:header_end].decode()
    n = int([l for l in header.splitlines() if l.startswith("element vertex")][0].split()[-1])
    rec = np.frombuffer(
        data[header_end:],
        dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)],
        count=n,
    )
    return PointSet(
        rec["xyz"].astype(np.float64),
        rec["n"].astype(np.float64),
        rec["rgb"].astype(np.float64) / 255.0,
    )


# ---------------------------------------------------------------------------
# on-disk layout: pyramid, checkpoints, logs


def save_pyramid(directory, pyramid: Pyramid, config: RunConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for gr in pyramid.levels:
        save_grid(directory / f"gt_level{gr.level}.svg1", gr)
    manifest = {
        "levels": pyramid.num_levels,
        "base_resolution": config.base_resolution,
        "sample_resolution": config.sample_resolution,
        "world_transform": {
            "scale": pyramid.world_transform.scale,
            "translation": list(pyramid.world_transform.translation),
        },
        "voxel_sizes": [list(g.voxel_size) for g in pyramid.levels],
        "files": [f"gt_level{g.level}.svg1" for g in pyramid.levels],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    config.to_file(directory / "run.cfg")


def load_pyramid(directory) -> tuple[Pyramid, RunConfig]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    levels = []
    for name, vs in zip(manifest["files"], manifest["voxel_sizes"]):
        levels.append(load_grid(directory / name, voxel_size=tuple(vs)))
    tf = WorldTransform(
        manifest["world_transform"]["scale"],
        tuple(manifest["world_transform"]["translation"]),
    )
    cfg_path = directory / "run.cfg"
    config = RunConfig.from_file(cfg_path) if cfg_path.exists() else RunConfig()
    return Pyramid(levels, tf), config


def save_trained_level(directory, trained: TrainedLevel, config: RunConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(trained.denoiser.meta(), level=trained.level, seed=config.seed)
    save_checkpoint(
        directory / f"denoiser_l{trained.level}.svckpt",
        trained.denoiser.tensors(),
        meta,
    )
    if trained.upsampler is not None:
        meta = dict(trained.upsampler.meta(), level=trained.level, seed=config.seed)
        save_checkpoint(
            directory / f"upsampler_l{trained.level}.svckpt",
            trained.upsampler.tensors(),
            meta,
        )
    (directory / f"train_log_l{trained.level}.json").write_text(
        json.dumps(
            {
                "summary": trained.log.summary(),
                "upsampler_losses": trained.log.upsampler_losses,
                "denoiser_losses": trained.log.denoiser_losses,
            }
        )
    )


def load_trained_level(directory, level: int) -> TrainedLevel:
    directory = Path(directory)
    tensors, meta = load_checkpoint(directory / f"denoiser_l{level}.svckpt")
    denoiser = denoiser_from_tensors(meta, tensors)
    upsampler = None
    up_path = directory / f"upsampler_l{level}.svckpt"
    if up_path.exists():
        tensors, meta = load_checkpoint(up_path)
        upsampler = upsampler_from_tensors(meta, tensors)
    tlog = TrainLog()
    log_path = directory / f"train_log_l{level}.json"
    if log_path.exists():
        payload = json.loads(log_path.read_text())
        tlog = TrainLog(
            payload.get("upsampler_losses", []), payload.get("denoiser_losses", [])
        )
    return TrainedLevel(level, denoiser, upsampler, tlog)


def load_models(directory, config: RunConfig) -> dict[int, TrainedLevel]:
    return {
        l: load_trained_level(directory, l) for l in range(1, config.levels + 1)
    }
