"""Joint velocity objective, two-stage freeze schedule and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .conditioning import ConditioningBundle, collate_conditions
from .dataset import Manifest, _latent_mask, clip_conditions, clip_targets, read_manifest
from .denoiser import DenoiserConfig, ModalityConfig, StructuralDenoiser, load_model, save_checkpoint
from .diffusion import MODALITIES, forward_diffuse, v_target
from .scene import ClipRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-5
    batch_size: int = 4
    frames: int = 16  # clip length in stage 2; stage 1 trains on single frames
    modalities: tuple[str, ...] = ("rgb",)
    loss_weights: dict = field(default_factory=lambda: {m: 1.0 for m in MODALITIES})
    seed: int = 0
    steps: int = 100
    checkpoint_every: int = 0  # 0 -> only the final step
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    buckets: tuple[tuple[int, int], ...] | None = None  # allowed (H, W); None -> whatever the data has
    init_from: str | None = None  # weights to start from (e.g. stage 1 result for stage 2)

    def __post_init__(self):
        mods = self.modalities
        if isinstance(mods, str):
            mods = tuple(s.strip() for s in mods.split(",") if s.strip())
        object.__setattr__(self, "modalities", ModalityConfig(tuple(mods)).enabled)
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.buckets is not None:
            object.__setattr__(self, "buckets", tuple(tuple(b) for b in self.buckets))
        weights = {m: 1.0 for m in MODALITIES}
        weights.update({k: float(v) for k, v in dict(self.loss_weights).items()})
        object.__setattr__(self, "loss_weights", weights)
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size < 1 or self.frames < 1 or self.steps < 0:
            raise ValueError("batch size and frames must be positive, steps non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def clip_frames(self) -> int:
        return 1 if self.stage == 1 else self.frames

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


# ------------------------------------------------------------ freeze contract
def temporal_modules(model: StructuralDenoiser) -> list[nn.Module]:
    return [*model.down_temporal, model.mid_temporal, *model.up_temporal]


def trainable_groups(model: StructuralDenoiser, stage: int) -> dict[str, list[nn.Parameter]]:
    """Named parameter groups that the given stage updates.

    Stage 1 trains every spatial parameter; the temporal layers see single
    frames there and are skipped. Stage 2 trains only the camera encoder and
    the temporal layers.
    """
    temporal = [p for mod in temporal_modules(model) for p in mod.parameters()]
    if stage == 2:
        return {"camera_encoder": list(model.camera_encoder.parameters()), "temporal": temporal}
    skip = {id(p) for p in temporal}
    return {"spatial": [p for p in model.parameters() if id(p) not in skip]}


def frozen_groups(model: StructuralDenoiser, stage: int) -> dict[str, list[nn.Parameter]]:
    train = {id(p) for ps in trainable_groups(model, stage).values() for p in ps}
    groups = {
        "trunk": [p for n, p in model.named_parameters()
                  if not n.startswith(("reference_encoder.", "pose_guider.", "camera_encoder."))],
        "reference_encoder": list(model.reference_encoder.parameters()),
        "pose_guider": list(model.pose_guider.parameters()),
        "camera_encoder": list(model.camera_encoder.parameters()),
    }
    return {k: [p for p in ps if id(p) not in train] for k, ps in groups.items()
            if any(id(p) not in train for p in ps)}


def apply_freeze(model: StructuralDenoiser, stage: int) -> list[nn.Parameter]:
    train = [p for ps in trainable_groups(model, stage).values() for p in ps]
    ids = {id(p) for p in train}
    for p in model.parameters():
        p.requires_grad_(id(p) in ids)
    return train


# ----------------------------------------------------------------- batches
@dataclass
class TrainBatch:
    x0: dict[str, torch.Tensor]  # modality -> (B, F, C, h, w)
    cond: ConditioningBundle
    person: torch.Tensor  # (B, F, h, w) 1 on people, latent grid
    clip_ids: list[str]


def build_batch(clips: list[ClipRecord], windows: list[tuple[list[int], int]], model: StructuralDenoiser) -> TrainBatch:
    """Stack ``clips[i]`` restricted to ``windows[i] = (indices, ref_index)``."""
    mods = model.modalities
    items, targets, person = [], [], []
    for clip, (indices, ref) in zip(clips, windows):
        items.append(clip_conditions(clip, indices, ref))
        tgt = clip_targets(clip, indices, model.codec, mods)
        targets.append(tgt)
        size = tgt[mods[0]].shape[-2:]
        person.append(_latent_mask(torch.from_numpy(clip.mask[np.asarray(indices)] > 0), size))
    cond = collate_conditions(items, model.codec, mods, model.config.mask_resample)
    x0 = {m: torch.stack([t[m] for t in targets]) for m in mods}
    return TrainBatch(x0=x0, cond=cond, person=torch.stack(person), clip_ids=[c.clip_id for c in clips])


def sample_windows(clips: list[ClipRecord], frames: int, rng: np.random.Generator) -> list[tuple[list[int], int]]:
    """Random consecutive windows plus a random reference frame from the same clip."""
    out = []
    for clip in clips:
        if clip.frames < frames:
            raise ValueError(f"clip {clip.clip_id} has {clip.frames} frames, {frames} needed")
        start = int(rng.integers(0, clip.frames - frames + 1))
        ref = int(rng.integers(0, clip.frames))
        out.append((list(range(start, start + frames)), ref))
    return out


def choose_bucket(entries: list[dict], rng: np.random.Generator,
                  allowed: tuple[tuple[int, int], ...] | None = None) -> tuple[int, int]:
    """Pick one resolution bucket for the whole batch, uniformly among non-empty buckets."""
    buckets = sorted({(int(e["height"]), int(e["width"])) for e in entries})
    if allowed is not None:
        buckets = [b for b in buckets if b in set(allowed)]
    if not buckets:
        raise ValueError("no clip matches the configured resolution buckets")
    return buckets[int(rng.integers(0, len(buckets)))]


# -------------------------------------------------------------------- loss
def joint_loss(model: StructuralDenoiser, batch: TrainBatch, t: torch.Tensor, noise: dict[str, torch.Tensor],
               weights: dict[str, float] | None = None) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of per-modality squared velocity errors at one shared ``t``.

    Normal errors only count on people and are averaged over those pixels;
    a batch without people contributes a zero normal term. The returned terms
    already include their weights, so they add up to the total.
    """
    mods = model.modalities
    missing = [m for m in mods if m not in batch.x0 or m not in noise]
    if missing:
        raise ValueError(f"batch lacks data for enabled modalities {missing}")
    weights = weights or {}
    sched = model.schedule
    noisy = {m: forward_diffuse(sched, batch.x0[m], t, noise[m]) for m in mods}
    target = {m: v_target(sched, batch.x0[m], noise[m], t) for m in mods}
    pred = model(noisy, t, batch.cond)
    # per-step weight omega(t), one per sample
    t_idx = torch.as_tensor(t).reshape(-1).long().expand(batch.cond.batch)
    omega = torch.as_tensor(sched.loss_weight, dtype=torch.float32)[t_idx - 1].reshape(-1, 1, 1, 1, 1)
    terms = {}
    for m in mods:
        err = omega * (pred[m] - target[m]) ** 2
        if m == "normal":
            mask = batch.person[:, :, None].expand_as(err) > 0
            # where, not multiply: off-person values never reach the sum, even inf/nan
            kept = torch.where(mask, err, torch.zeros_like(err))
            count = mask.sum()
            term = kept.sum() / count if count > 0 else kept.sum()
        else:
            term = err.mean()
        terms[m] = float(weights.get(m, 1.0)) * term
    total = sum(terms.values())
    return total, terms


def draw_noise(model: StructuralDenoiser, batch: TrainBatch, gen: torch.Generator) -> tuple[torch.Tensor, dict]:
    b = batch.cond.batch
    t = torch.randint(1, model.schedule.T + 1, (b,), generator=gen)
    noise = {m: torch.randn(batch.x0[m].shape, generator=gen) for m in model.modalities}
    return t, noise


# -------------------------------------------------------------------- state
@dataclass
class TrainState:
    model: StructuralDenoiser
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    data_rng: np.random.Generator = None
    noise_gen: torch.Generator = None

    @classmethod
    def create(cls, config: TrainConfig, model: StructuralDenoiser | None = None,
               model_config: DenoiserConfig | None = None) -> "TrainState":
        if model is None:
            torch.manual_seed(config.seed)
            model = StructuralDenoiser(model_config, ModalityConfig(config.modalities))
        if model.modalities != config.modalities:
            raise ValueError(f"model has modalities {model.modalities}, config asks for {config.modalities}")
        params = apply_freeze(model, config.stage)
        opt = torch.optim.AdamW(params, lr=config.learning_rate, betas=config.betas,
                                weight_decay=config.weight_decay)
        return cls(model=model, optimizer=opt, config=config, data_rng=np.random.default_rng(config.seed),
                   noise_gen=torch.Generator().manual_seed(config.seed))


def train_step(state: TrainState, batch: TrainBatch) -> dict:
    """One AdamW update on the joint loss; returns per-modality metrics."""
    model = state.model
    model.train()
    t, noise = draw_noise(model, batch, state.noise_gen)
    total, terms = joint_loss(model, batch, t, noise, state.config.loss_weights)
    for m, term in terms.items():
        if not torch.isfinite(term):
            raise FloatingPointError(f"step {state.step + 1}: {m} loss is {float(term.detach())} (clips {batch.clip_ids})")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    record = {"step": state.step, "loss_total": float(total.detach())}
    for m in MODALITIES:
        record[f"loss_{m}"] = float(terms[m].detach()) if m in terms else None
    record["lr"] = state.optimizer.param_groups[0]["lr"]
    return record


# ------------------------------------------------------------- checkpoints
def _optimizer_payload(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"optim.{idx}.{k}"] = v
            else:
                scalars[f"{idx}.{k}"] = v
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def save_train_state(path: str | Path, state: TrainState) -> Path:
    tensors, opt_meta = _optimizer_payload(state.optimizer)
    tensors["rng.torch"] = state.noise_gen.get_state()
    meta = {
        "train_config": state.config.to_json(),
        "step": state.step,
        "optimizer": opt_meta,
        "rng_numpy": state.data_rng.bit_generator.state,
    }
    return save_checkpoint(path, state.model, tensors, meta)


def load_train_state(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    model, meta, rest = load_model(path)
    saved = TrainConfig.from_json(json.loads(meta["train_config"]))
    config = config or saved
    state = TrainState.create(config, model=model)
    state.step = int(json.loads(meta["step"]))
    opt_meta = json.loads(meta["optimizer"])
    if config.stage == saved.stage:
        sd = {"param_groups": opt_meta["param_groups"], "state": {}}
        for key, v in rest.items():
            if key.startswith("optim."):
                _, idx, name = key.split(".", 2)
                sd["state"].setdefault(int(idx), {})[name] = v
        for key, v in opt_meta["scalars"].items():
            idx, name = key.split(".", 1)
            sd["state"].setdefault(int(idx), {})[name] = v
        for g in sd["param_groups"]:
            g["lr"] = config.learning_rate
        state.optimizer.load_state_dict(sd)
        state.data_rng.bit_generator.state = json.loads(meta["rng_numpy"])
        state.noise_gen.set_state(rest["rng.torch"])
    return state


def checkpoint_path(ckpt_dir: str | Path, step: int) -> Path:
    return Path(ckpt_dir) / f"step_{step:06d}.safetensors"


def latest_checkpoint(ckpt_dir: str | Path) -> Path | None:
    found = sorted(Path(ckpt_dir).glob("step_*.safetensors"))
    return found[-1] if found else None


# -------------------------------------------------------------------- loop
class ClipCache:
    """Loads clips on first use and keeps them in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._clips: dict[str, ClipRecord] = {}

    def __getitem__(self, clip_id: str) -> ClipRecord:
        if clip_id not in self._clips:
            self._clips[clip_id] = self.manifest.load(clip_id)
        return self._clips[clip_id]


def next_batch(state: TrainState, manifest: Manifest, cache: ClipCache) -> TrainBatch:
    cfg, rng = state.config, state.data_rng
    bucket = choose_bucket(manifest.clips, rng, cfg.buckets)
    pool = [e["id"] for e in manifest.clips if (int(e["height"]), int(e["width"])) == bucket]
    ids = [pool[i] for i in rng.integers(0, len(pool), size=cfg.batch_size)]
    clips = [cache[i] for i in ids]
    return build_batch(clips, sample_windows(clips, cfg.clip_frames, rng), state.model)


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    checkpoints: list[Path]


def run_training(config: TrainConfig, manifest: str | Path | Manifest, ckpt_dir: str | Path,
                 model_config: DenoiserConfig | None = None, resume: str | Path | None = None) -> TrainResult:
    """Train for ``config.steps`` total steps, writing checkpoints and NDJSON metrics."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    if len(manifest) == 0:
        raise ValueError("manifest lists no clips; nothing to train on")
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = ckpt_dir / "metrics.jsonl"

    if resume is not None:
        state = load_train_state(resume, config)
        kept = []
        if metrics_path.is_file():
            kept = [line for line in metrics_path.read_text().splitlines()
                    if line and json.loads(line)["step"] <= state.step]
        metrics_path.write_text("".join(line + "\n" for line in kept))
    else:
        model = None
        if config.init_from:
            model, _, _ = load_model(config.init_from)
            if model_config is not None and model.config != model_config:
                raise ValueError("init_from checkpoint does not match the requested denoiser config")
        state = TrainState.create(config, model=model, model_config=model_config)
        metrics_path.write_text("")
    (ckpt_dir / "train_config.json").write_text(json.dumps(
        {"train": config.to_json(), "denoiser": state.model.config.to_json()}, indent=1, sort_keys=True))

    cache = ClipCache(manifest)
    records, saved = [], []
    with metrics_path.open("a") as fh:
        while state.step < config.steps:
            batch = next_batch(state, manifest, cache)
            rec = train_step(state, batch)
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            records.append(rec)
            if rec["step"] % 50 == 0 or rec["step"] == 1:
                log.info("step %d loss %.5f", rec["step"], rec["loss_total"])
            every = config.checkpoint_every
            if (every and state.step % every == 0) or state.step == config.steps:
                saved.append(save_train_state(checkpoint_path(ckpt_dir, state.step), state))
    if not saved and state.step == config.steps and config.steps > 0:
        saved.append(save_train_state(checkpoint_path(ckpt_dir, state.step), state))
    return TrainResult(state=state, metrics=records, checkpoints=saved)


@torch.no_grad()
def dataset_loss(model: StructuralDenoiser, clips: list[ClipRecord], frames: int, seed: int = 0,
                 repeats: int = 4) -> dict[str, float]:
    """Mean per-modality loss on fixed windows, steps and noise (for comparing checkpoints)."""
    model.eval()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sums: dict[str, float] = {}
    n = 0
    for _ in range(repeats):
        for clip in clips:
            batch = build_batch([clip], sample_windows([clip], frames, rng), model)
            t, noise = draw_noise(model, batch, gen)
            _, terms = joint_loss(model, batch, t, noise)
            for m, v in terms.items():
                sums[m] = sums.get(m, 0.0) + float(v)
            n += 1
    return {m: v / n for m, v in sums.items()}


def config_from_mapping(payload: dict, **overrides) -> TrainConfig:
    data = {k: v for k, v in payload.items() if k in TrainConfig.__dataclass_fields__}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**data)

