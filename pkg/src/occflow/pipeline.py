"""Orchestration: configs, two-stage training, checkpoints, inference, ablations.

Stage (a) jointly trains the point encoder, latent encoder, and occupancy
decoder on the multi-task loss.  Stage (b) freezes those and trains the
velocity network on the flow-matching objective over cached latents.
Inference encodes a partial cloud, integrates a Gaussian latent to the data
end of the flow, and extracts a mesh from the decoded occupancy field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import evalkit, flowmatch, geometry, isoext, synthbuild
from .evalkit import EvalConfig
from .flowmatch import SamplerConfig, VelocityModel, euler_sample, fm_loss
from .funcae import LatentEncoder, OccupancyDecoder, stage_a_loss
from .geometry import TriangleMesh
from .isoext import OccupancyField
from .pointenc import PointEncoder
from .synthbuild import DatasetRecord

DEVICE_ENV_VAR = "OCCFLOW_DEVICE"


def get_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV_VAR, "cpu"))


@dataclass
class TrainConfig:
    """Flat training/inference configuration.

    Defaults are the desk profile: every mechanism of the full-scale setup at
    sizes a single machine can train in minutes.  ``TrainConfig.paper()``
    restores the full-scale hyperparameters.
    """

    profile: str = "desk"
    seed: int = 7
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 16
    eta: float = 1000.0
    latent_dim: int = 128
    cond_dim: int = 256
    query_count: int = 1000
    cloud_points: int = 256
    gt_surface_points: int = 1024
    # point encoder
    knn_k: int = 8
    edge_widths: tuple[int, ...] = (32, 64, 96)
    n_centers: int = 32
    attn_layers: int = 2
    attn_heads: int = 4
    coarse_points: int = 128
    # function autoencoder
    latent_hidden: int = 64
    latent_layers: int = 3
    latent_pool: str = "mean"
    signed_values: bool = True
    decoder_hidden: int = 96
    decoder_blocks: int = 3
    decoder_freqs: int = 6
    latent_source: str = "occupancy"
    # velocity network
    dit_depth: int = 4
    dit_hidden: int = 128
    dit_heads: int = 4
    dit_patch_size: int = 8
    # sampling and extraction
    sampler_steps: int = 50
    resolution: int = 64
    mise_initial_res: int = 16
    mise_padding: float = 0.05
    tau: float = 0.5
    # training cadence
    train_query_subsample: int = 512  # queries per step; 0 trains on all
    val_interval: int = 200
    val_subset: int = 8
    # ablation switches
    cd_loss: bool = True
    encoder_cond: bool = True
    decoder_cond: bool = True
    cond_tokens: bool = False

    def __post_init__(self) -> None:
        if self.profile not in ("desk", "paper"):
            raise ValueError("profile must be 'desk' or 'paper'")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.latent_dim % self.dit_patch_size != 0:
            raise ValueError("latent_dim must be divisible by dit_patch_size")
        if self.latent_source not in ("occupancy", "point"):
            raise ValueError("latent_source must be 'occupancy' or 'point'")
        if isinstance(self.edge_widths, list):
            self.edge_widths = tuple(self.edge_widths)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale profile with the published hyperparameters."""
        values = dict(
            profile="paper",
            lr=1e-4,
            batch_size=64,
            eta=1000.0,
            latent_dim=128,
            cond_dim=512,
            query_count=1000,
            cloud_points=2048,
            knn_k=16,
            edge_widths=(64, 128, 256),
            n_centers=128,
            attn_layers=4,
            attn_heads=8,
            coarse_points=256,
            latent_hidden=128,
            decoder_hidden=128,
            dit_depth=12,
            dit_hidden=512,
            dit_heads=16,
            dit_patch_size=1,
            resolution=80,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["edge_widths"] = list(self.edge_widths)
        return doc

    def to_text(self) -> str:
        """Flat ``key = value`` serialization (the config-file format)."""
        lines = []
        for key, value in sorted(self.to_dict().items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "edge_widths" in doc:
            doc["edge_widths"] = tuple(doc["edge_widths"])
        return cls(**doc)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        doc: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"unknown config key: {key}")
            doc[key] = _parse_value(key, value)
        return cls.from_dict(doc)


def _parse_value(key: str, value: str):
    if key == "edge_widths":
        return tuple(int(v) for v in value.split(","))
    if value in ("True", "true"):
        return True
    if value in ("False", "false"):
        return False
    for caster in (int, float):
        try:
            return caster(value)
        except ValueError:
            continue
    return value


STAGE_A_MODULES = ("point_encoder", "latent_encoder", "occ_decoder")
FROZEN_MODULES = ("point_encoder", "latent_encoder")
ARCH_KEYS = (
    "latent_dim", "cond_dim", "knn_k", "edge_widths", "n_centers", "attn_layers",
    "attn_heads", "coarse_points", "latent_hidden", "latent_layers", "latent_pool",
    "signed_values", "decoder_hidden", "decoder_blocks", "decoder_freqs", "dit_depth", "dit_hidden",
    "dit_heads", "dit_patch_size", "latent_source",
)


def build_models(config: TrainConfig, device: torch.device | None = None) -> dict[str, torch.nn.Module]:
    """Instantiate all modules with a seed-deterministic initialization."""
    if config.latent_source == "point":
        raise NotImplementedError("point-latent encoder is not implemented")
    device = device or get_device()
    torch.manual_seed(config.seed)
    models = {
        "point_encoder": PointEncoder(
            cond_dim=config.cond_dim, k=config.knn_k, edge_widths=config.edge_widths,
            n_centers=config.n_centers, attn_layers=config.attn_layers,
            attn_heads=config.attn_heads, coarse_points=config.coarse_points,
        ),
        "latent_encoder": LatentEncoder(
            latent_dim=config.latent_dim, cond_dim=config.cond_dim,
            hidden=config.latent_hidden, layers=config.latent_layers,
            pool=config.latent_pool, signed_values=config.signed_values,
        ),
        "occ_decoder": OccupancyDecoder(
            latent_dim=config.latent_dim, cond_dim=config.cond_dim,
            hidden=config.decoder_hidden, blocks=config.decoder_blocks,
            n_freqs=config.decoder_freqs,
        ),
        "velocity_model": VelocityModel(
            latent_dim=config.latent_dim, cond_dim=config.cond_dim,
            depth=config.dit_depth, hidden=config.dit_hidden,
            heads=config.dit_heads, patch_size=config.dit_patch_size,
        ),
    }
    return {name: module.to(device) for name, module in models.items()}


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers in sorted state-dict order."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: canonical header JSON + raw little-endian parameter blob

_CKPT_MAGIC = b"OCCFLOWCKPT1\n"


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    modules: dict[str, dict[str, torch.Tensor]]
    hashes: dict[str, str] = field(default_factory=dict)
    frozen_hashes: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_models(
        cls,
        config: TrainConfig,
        step: int,
        models: dict[str, torch.nn.Module],
        names: tuple[str, ...],
        frozen_hashes: dict[str, str] | None = None,
    ) -> "Checkpoint":
        modules = {
            name: {k: v.detach().cpu().clone() for k, v in models[name].state_dict().items()}
            for name in names
        }
        hashes = {name: parameter_hash(models[name]) for name in names}
        return cls(config, step, modules, hashes, frozen_hashes or {})

    def save(self, path) -> None:
        entries: dict[str, list[dict]] = {}
        blob = bytearray()
        for name in sorted(self.modules):
            entries[name] = []
            for key in sorted(self.modules[name]):
                tensor = self.modules[name][key]
                arr = np.ascontiguousarray(tensor.numpy())
                arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                raw = arr.tobytes()
                entries[name].append(
                    {
                        "key": key,
                        "shape": list(tensor.shape),
                        "dtype": str(tensor.numpy().dtype),
                        "offset": len(blob),
                        "nbytes": len(raw),
                    }
                )
                blob.extend(raw)
        header = json.dumps(
            {
                "format": 1,
                "step": self.step,
                "config": self.config.to_dict(),
                "hashes": self.hashes,
                "frozen_hashes": self.frozen_hashes,
                "modules": entries,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("ascii")
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(len(header).to_bytes(8, "big"))
            fh.write(header)
            fh.write(bytes(blob))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            header_len = int.from_bytes(fh.read(8), "big")
            header = json.loads(fh.read(header_len).decode("ascii"))
            blob = fh.read()
        modules: dict[str, dict[str, torch.Tensor]] = {}
        for name, entries in header["modules"].items():
            modules[name] = {}
            for ent in entries:
                raw = blob[ent["offset"] : ent["offset"] + ent["nbytes"]]
                arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]).newbyteorder("<"))
                arr = arr.reshape(ent["shape"]).astype(np.dtype(ent["dtype"]), copy=True)
                modules[name][ent["key"]] = torch.from_numpy(arr)
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            step=header["step"],
            modules=modules,
            hashes=header["hashes"],
            frozen_hashes=header["frozen_hashes"],
        )

    def restore(self, models: dict[str, torch.nn.Module]) -> None:
        for name, state in self.modules.items():
            models[name].load_state_dict(state)
            got = parameter_hash(models[name])
            if self.hashes.get(name) and got != self.hashes[name]:
                raise ValueError(f"checksum mismatch restoring module {name}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite-loss checkpoint."""

    def __init__(self, step: int, last_good: Checkpoint | None):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: dict[str, list]


class JsonlLogger:
    """Line-delimited structured training log, optionally echoed to stdout."""

    def __init__(self, path=None, echo: bool = False):
        self.path = Path(path) if path is not None else None
        self.echo = echo
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        line = json.dumps(record, sort_keys=True)
        if self.path is not None:
            with open(self.path, "a", encoding="ascii") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line, flush=True)


class LoadedDataset:
    """Dataset records as resident tensors, standardized for batching."""

    def __init__(self, records: list[DatasetRecord], config: TrainConfig, device: torch.device):
        if not records:
            raise ValueError("dataset is empty")
        self.records = records
        self.device = device
        queries, labels, gt_surface = [], [], []
        self.clouds: list[torch.Tensor] = []  # per record: (V, cloud_points, 3)
        for i, rec in enumerate(records):
            sample = rec.load_sample()
            queries.append(torch.from_numpy(sample.positions.astype(np.float32)))
            labels.append(torch.from_numpy(sample.values.astype(np.float32)))
            mesh = rec.load_mesh()
            surf = geometry.sample_surface_points(
                mesh, config.gt_surface_points, seed=int(np.random.SeedSequence([config.seed, 1000 + i]).generate_state(1)[0])
            )
            gt_surface.append(torch.from_numpy(surf.astype(np.float32)))
            variants = []
            for v in range(len(rec.clouds)):
                pts = synthbuild.read_array(rec.path(rec.clouds[v])).astype(np.float64)
                variants.append(torch.from_numpy(
                    _standardize_cloud(pts, config.cloud_points, seed_parts=[config.seed, i, v]).astype(np.float32)
                ))
            self.clouds.append(torch.stack(variants).to(device))
        self.queries = torch.stack(queries).to(device)
        self.labels = torch.stack(labels).to(device)
        self.gt_surface = torch.stack(gt_surface).to(device)

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: torch.Tensor, gen: torch.Generator | None = None):
        clouds = []
        for i in idx.tolist():
            variants = self.clouds[i]
            v = 0
            if len(variants) > 1 and gen is not None:
                v = int(torch.randint(len(variants), (1,), generator=gen))
            clouds.append(variants[v])
        return (
            torch.stack(clouds),
            self.queries[idx],
            self.labels[idx],
            self.gt_surface[idx],
        )


def _standardize_cloud(points: np.ndarray, count: int, seed_parts: list[int]) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed_parts))
    if len(points) >= count:
        keep = rng.choice(len(points), size=count, replace=False)
    else:
        keep = rng.choice(len(points), size=count, replace=True)
    return points[keep]


def split_records(records: list[DatasetRecord], split: str) -> list[DatasetRecord]:
    out = [r for r in records if r.split == split]
    return out


def _stage_a_forward(models, clouds, queries, labels, gt_surface, config: TrainConfig,
                     query_idx: torch.Tensor | None = None):
    """One joint forward pass.  The latent encoder always sees the full query
    set; ``query_idx`` optionally restricts which queries are decoded and
    scored (per-step subsampling)."""
    cond_feat, coarse = models["point_encoder"](clouds)
    cond = cond_feat.global_feat
    z = models["latent_encoder"](queries, labels, cond if config.encoder_cond else None)
    if query_idx is not None:
        queries, labels = queries[:, query_idx], labels[:, query_idx]
    probs = models["occ_decoder"](queries, z, cond if config.decoder_cond else None)
    eta = config.eta if config.cd_loss else 0.0
    return stage_a_loss(probs, labels, coarse, gt_surface, eta), probs, z, cond


@torch.no_grad()
def query_accuracy(models, data: LoadedDataset, config: TrainConfig, indices: list[int]) -> float:
    """Fraction of stored query labels matched at the 0.5 threshold."""
    was_training = {n: m.training for n, m in models.items()}
    for m in models.values():
        m.eval()
    idx = torch.tensor(indices, dtype=torch.long, device=data.queries.device)
    clouds, queries, labels, gt_surface = data.batch(idx)
    (_, _), probs, _, _ = _stage_a_forward(models, clouds, queries, labels, gt_surface, config)
    acc = ((probs >= 0.5).float() == labels).float().mean().item()
    for n, m in models.items():
        m.train(was_training[n])
    return acc


def train_stage_a(
    records: list[DatasetRecord],
    config: TrainConfig,
    out_dir=None,
    logger: JsonlLogger | None = None,
) -> TrainResult:
    """Jointly optimize point encoder, latent encoder, and occupancy decoder."""
    device = get_device()
    if logger is None:
        logger = JsonlLogger(Path(out_dir) / "train_a.jsonl" if out_dir else None)
    models = build_models(config, device)
    data = LoadedDataset(records, config, device)
    trainables = [models[n] for n in STAGE_A_MODULES]
    for m in trainables:
        m.train()
    params = [p for m in trainables for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=config.lr)
    gen = torch.Generator(device="cpu").manual_seed(config.seed + 1)
    val_idx = list(range(min(config.val_subset, len(data))))
    history: dict[str, list] = {"step": [], "l_occ": [], "l_cd": [], "total": [],
                                "val_step": [], "val_acc": []}
    last_good: Checkpoint | None = None
    n_sub = config.train_query_subsample
    for step in range(1, config.steps + 1):
        idx = torch.randint(len(data), (config.batch_size,), generator=gen)
        clouds, queries, labels, gt_surface = data.batch(idx, gen)
        qidx = None
        if n_sub and n_sub < queries.shape[1]:
            qidx = torch.randperm(queries.shape[1], generator=gen)[:n_sub]
        try:
            (total, comps), _, _, _ = _stage_a_forward(
                models, clouds, queries, labels, gt_surface, config, qidx
            )
        except FloatingPointError as exc:
            raise TrainingDiverged(step, last_good) from exc
        if not torch.isfinite(total):
            raise TrainingDiverged(step, last_good)
        opt.zero_grad()
        total.backward()
        opt.step()
        history["step"].append(step)
        history["l_occ"].append(comps["l_occ"].item())
        history["l_cd"].append(comps["l_cd"].item())
        history["total"].append(total.item())
        if step % config.val_interval == 0 or step == config.steps:
            acc = query_accuracy(models, data, config, val_idx)
            history["val_step"].append(step)
            history["val_acc"].append(acc)
            last_good = Checkpoint.from_models(config, step, models, STAGE_A_MODULES)
            logger.write(event="val", stage="a", step=step, val_acc=acc,
                         l_occ=history["l_occ"][-1], l_cd=history["l_cd"][-1])
    ckpt = Checkpoint.from_models(config, config.steps, models, STAGE_A_MODULES)
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "stage_a.ckpt")
    return TrainResult(ckpt, history)


def _check_arch_compatible(config: TrainConfig, other: TrainConfig) -> None:
    bad = [k for k in ARCH_KEYS if getattr(config, k) != getattr(other, k)]
    if bad:
        raise ValueError(f"config does not match the stage-a checkpoint on: {', '.join(bad)}")


@torch.no_grad()
def _encode_dataset(models, data: LoadedDataset, config: TrainConfig):
    """Frozen cond and z1 for every record and cloud variant."""
    conds, z1s = [], []
    for i in range(len(data)):
        variant_conds, variant_z1s = [], []
        for v in range(len(data.clouds[i])):
            cloud = data.clouds[i][v].unsqueeze(0)
            cond_feat, _ = models["point_encoder"](cloud)
            cond = cond_feat.global_feat
            z1 = models["latent_encoder"](
                data.queries[i : i + 1], data.labels[i : i + 1],
                cond if config.encoder_cond else None,
            )
            variant_conds.append(cond.squeeze(0))
            variant_z1s.append(z1.squeeze(0))
        conds.append(torch.stack(variant_conds))
        z1s.append(torch.stack(variant_z1s))
    return conds, z1s


def train_stage_b(
    records: list[DatasetRecord],
    stage_a: Checkpoint,
    config: TrainConfig | None = None,
    out_dir=None,
    logger: JsonlLogger | None = None,
) -> TrainResult:
    """Train the velocity network on frozen encoder outputs."""
    device = get_device()
    config = config or stage_a.config
    _check_arch_compatible(config, stage_a.config)
    if logger is None:
        logger = JsonlLogger(Path(out_dir) / "train_b.jsonl" if out_dir else None)
    models = build_models(config, device)
    stage_a.restore(models)
    for name in STAGE_A_MODULES:
        models[name].eval()
        models[name].requires_grad_(False)
    frozen_before = {name: parameter_hash(models[name]) for name in FROZEN_MODULES}

    data = LoadedDataset(records, config, device)
    conds, z1s = _encode_dataset(models, data, config)
    vm = models["velocity_model"]
    vm.train()
    opt = torch.optim.Adam(vm.parameters(), lr=config.lr)
    gen = torch.Generator(device="cpu").manual_seed(config.seed + 2)
    history: dict[str, list] = {"step": [], "fm_loss": []}
    last_good: Checkpoint | None = None
    for step in range(1, config.steps + 1):
        idx = torch.randint(len(data), (config.batch_size,), generator=gen)
        z1_batch, cond_batch = [], []
        for i in idx.tolist():
            v = 0
            if len(conds[i]) > 1:
                v = int(torch.randint(len(conds[i]), (1,), generator=gen))
            z1_batch.append(z1s[i][v])
            cond_batch.append(conds[i][v])
        z1 = torch.stack(z1_batch)
        cond = torch.stack(cond_batch)
        try:
            loss = fm_loss(z1, cond, vm, generator=gen)
        except FloatingPointError as exc:
            raise TrainingDiverged(step, last_good) from exc
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["step"].append(step)
        history["fm_loss"].append(loss.item())
        if step % config.val_interval == 0 or step == config.steps:
            last_good = Checkpoint.from_models(
                config, step, models, ("velocity_model",), frozen_hashes=frozen_before
            )
            logger.write(event="val", stage="b", step=step, fm_loss=loss.item())

    frozen_after = {name: parameter_hash(models[name]) for name in FROZEN_MODULES}
    if frozen_after != frozen_before:
        raise RuntimeError("frozen stage-a parameters changed during stage-b training")
    ckpt = Checkpoint.from_models(
        config, config.steps, models, ("velocity_model",), frozen_hashes=frozen_before
    )
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "stage_b.ckpt")
    return TrainResult(ckpt, history)


def check_consistent(stage_a: Checkpoint, stage_b: Checkpoint) -> None:
    """Stage-b checkpoints embed the checksums of the weights they froze."""
    _check_arch_compatible(stage_b.config, stage_a.config)
    for name, expect in stage_b.frozen_hashes.items():
        if stage_a.hashes.get(name) != expect:
            raise ValueError(
                f"stage-a checkpoint does not match the weights stage-b was trained "
                f"against (module {name})"
            )


def decoder_field(
    decoder: OccupancyDecoder,
    z: torch.Tensor,
    cond: torch.Tensor | None,
    tau: float = 0.5,
    batch_size: int = 65536,
) -> OccupancyField:
    """Occupancy field closed over (decoder, latent, condition)."""
    device = next(decoder.parameters()).device

    @torch.no_grad()
    def fn(points: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(points), batch_size):
            chunk = torch.from_numpy(points[s : s + batch_size].astype(np.float32))
            chunk = chunk.unsqueeze(0).to(device)
            probs = decoder(chunk, z, cond)
            out.append(probs.squeeze(0).cpu().numpy().astype(np.float64))
        return np.concatenate(out)

    return OccupancyField(fn, tau=tau)


def _mise_bounds(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    pad = config.mise_padding
    return (np.array([-0.5 - pad] * 3), np.array([0.5 + pad] * 3))


def _encode_cloud(models, cloud: np.ndarray, config: TrainConfig) -> torch.Tensor:
    device = next(models["point_encoder"].parameters()).device
    std = _standardize_cloud(np.asarray(cloud, dtype=np.float64), config.cloud_points,
                             seed_parts=[config.seed, 0, 0])
    pts = torch.from_numpy(std.astype(np.float32)).unsqueeze(0).to(device)
    cond_feat, _ = models["point_encoder"](pts)
    return cond_feat.global_feat


def infer(
    cloud: np.ndarray,
    stage_a: Checkpoint,
    stage_b: Checkpoint,
    config: TrainConfig | None = None,
    z0_seed: int = 0,
    resolution: int | None = None,
) -> TriangleMesh:
    """Complete one partial cloud to a mesh.

    Deterministic given the z0 seed: the same seed, checkpoints, and settings
    reproduce the mesh byte-for-byte.
    """
    check_consistent(stage_a, stage_b)
    config = config or stage_b.config
    models = build_models(config, get_device())
    try:
        stage_a.restore(models)
        stage_b.restore(models)
        for m in models.values():
            m.eval()
        cond = _encode_cloud(models, cloud, config)
    except Exception as exc:
        raise RuntimeError(f"inference failed in stage: point encoding ({exc})") from exc
    try:
        gen = torch.Generator(device="cpu").manual_seed(z0_seed)
        z0 = torch.empty(1, config.latent_dim).normal_(generator=gen).to(cond.device)
        with torch.no_grad():
            z1 = euler_sample(z0, cond, models["velocity_model"], SamplerConfig(config.sampler_steps))
    except Exception as exc:
        raise RuntimeError(f"inference failed in stage: latent sampling ({exc})") from exc
    try:
        field = decoder_field(
            models["occ_decoder"], z1, cond if config.decoder_cond else None, tau=config.tau
        )
        return isoext.mise_extract(
            field, config.mise_initial_res, resolution or config.resolution, _mise_bounds(config)
        )
    except Exception as exc:
        raise RuntimeError(f"inference failed in stage: mesh extraction ({exc})") from exc


@torch.no_grad()
def evaluate_sources(
    records: list[DatasetRecord],
    stage_a: Checkpoint,
    stage_b: Checkpoint | None = None,
    config: TrainConfig | None = None,
    sources: tuple[str, ...] = ("latent", "diffusion"),
    mesh_metrics: bool = False,
    resolution: int | None = None,
    iou_samples: int = 20000,
    seed: int = 0,
) -> dict:
    """Per-record occupancy IoU (and optional mesh metrics) for the two latent
    sources: the autoencoder's encoded latent and the sampled diffusion latent.
    """
    config = config or stage_a.config
    if stage_b is not None:
        check_consistent(stage_a, stage_b)
    elif "diffusion" in sources:
        raise ValueError("diffusion source requires a stage-b checkpoint")
    device = get_device()
    models = build_models(config, device)
    stage_a.restore(models)
    if stage_b is not None:
        stage_b.restore(models)
    for m in models.values():
        m.eval()
    data = LoadedDataset(records, config, device)
    conds, z1s = _encode_dataset(models, data, config)
    out: dict = {src: {"iou": [], "rows": []} for src in sources}
    if mesh_metrics:
        for src in sources:
            out[src].update({"f_score": [], "cd_l1_x1e3": [], "cd_l2_x1e3": []})
    for i, rec in enumerate(records):
        gt_mesh = rec.load_mesh()
        gt_field = isoext.mesh_field(gt_mesh)
        cond = conds[i][0].unsqueeze(0)
        latents: dict[str, torch.Tensor] = {}
        if "latent" in sources:
            latents["latent"] = z1s[i][0].unsqueeze(0)
        if "diffusion" in sources:
            gen = torch.Generator(device="cpu").manual_seed(seed + 17 * i)
            z0 = torch.empty(1, config.latent_dim).normal_(generator=gen).to(device)
            latents["diffusion"] = euler_sample(
                z0, cond, models["velocity_model"], SamplerConfig(config.sampler_steps)
            )
        for src, z in latents.items():
            field = decoder_field(
                models["occ_decoder"], z, cond if config.decoder_cond else None, tau=config.tau
            )
            iou = evalkit.volumetric_iou(field, gt_field, samples=iou_samples, seed=seed)
            out[src]["iou"].append(iou)
            row = {"id": rec.id, "iou": iou}
            if mesh_metrics:
                mesh = isoext.mise_extract(
                    field, config.mise_initial_res, resolution or config.resolution,
                    _mise_bounds(config),
                )
                if mesh.is_empty:
                    row.update({"f_score": 0.0, "cd_l1_x1e3": float("inf"), "cd_l2_x1e3": float("inf")})
                else:
                    metrics = evalkit.compare_meshes(rec.id, mesh, gt_mesh, EvalConfig(seed=seed))
                    row.update({"f_score": metrics.f_score, "cd_l1_x1e3": metrics.cd_l1_x1e3,
                                "cd_l2_x1e3": metrics.cd_l2_x1e3})
                for key in ("f_score", "cd_l1_x1e3", "cd_l2_x1e3"):
                    out[src][key].append(row[key])
            out[src]["rows"].append(row)
    for src in sources:
        out[src]["mean_iou"] = float(np.mean(out[src]["iou"]))
        if mesh_metrics:
            out[src]["mean_f_score"] = float(np.mean(out[src]["f_score"]))
    return out


def run_ablation_matrix(
    records: list[DatasetRecord],
    config: TrainConfig,
    out_dir=None,
    eval_records: list[DatasetRecord] | None = None,
) -> list[dict]:
    """Train and evaluate the {cd_loss} x {encoder_cond} grid (decoder
    conditioning fixed on), reporting both latent sources per cell.  Failures
    are recorded and the matrix continues.
    """
    if not records:
        raise ValueError("dataset is empty")
    eval_records = eval_records or records[: min(4, len(records))]
    rows: list[dict] = []
    for cd in (True, False):
        for enc in (True, False):
            cell_cfg = replace(config, cd_loss=cd, encoder_cond=enc, decoder_cond=True)
            row: dict = {"cd_loss": cd, "encoder_cond": enc, "decoder_cond": True}
            try:
                res_a = train_stage_a(records, cell_cfg)
                res_b = train_stage_b(records, res_a.checkpoint, cell_cfg)
                report = evaluate_sources(
                    eval_records, res_a.checkpoint, res_b.checkpoint, cell_cfg,
                    mesh_metrics=True,
                )
                for src in ("latent", "diffusion"):
                    row[src] = {
                        "mean_iou": report[src]["mean_iou"],
                        "mean_f_score": report[src]["mean_f_score"],
                    }
            except Exception as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation_report.jsonl", "w", encoding="ascii") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows
