"""Training and inference drivers.

Training is deterministic: every step draws its batch indices, noise and
times from a generator seeded by ``(seed, step)``, so resuming from a
checkpoint at step ``k`` replays exactly the same steps as an uninterrupted
run.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import depth_norm as dn
from .dit import CascadeDiT, ModelConfig
from .exceptions import ConfigError, DataError, NonFiniteLoss
from .flow_matching import SamplerConfig, euler_sample, interpolate, velocity_mse, velocity_target
from .losses import LossWeights, gradient_matching, rtg_loss, total_mde, total_vde
from .semantics import SemanticFeatures, load_encoder
from .validation import check_resolution
from .video import RGTPConfig, StubConsistentEncoder, plan_windows

logger = logging.getLogger(__name__)

CKPT_MAGIC = "PPDCKPT1"
STAGES = ("pretrain", "finetune")
MODES = ("mde", "vde")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    mode: str = "mde"
    batch_size: int = 16
    max_steps: int = 2000
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    alpha: float = 0.5
    beta: float = 1.0
    resolution: Tuple[int, int] = (64, 64)
    clip_length: int = 8
    num_refs: int = 3
    pi: int = 4
    seed: int = 0
    num_blocks: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    coarse_patch: int = 16
    fine_patch: int = 8
    mlp_ratio: float = 4.0
    use_semantics: bool = True
    semantic_dim: int = 64
    prediction: str = "x0"
    t_min: float = 0.05
    encoder: str = "tiny"
    gm_scales: int = 4
    p_lo: float = 2.0
    p_hi: float = 98.0
    epsilon: Optional[float] = None
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("batch_size", "max_steps", "clip_length", "num_refs", "pi", "gm_scales"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.mode == "vde" and self.clip_length <= self.num_refs:
            raise ConfigError("vde training needs clip_length > num_refs")
        LossWeights(self.alpha, self.beta)
        self.model_config()
        self.norm_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_blocks=self.num_blocks, hidden_dim=self.hidden_dim, num_heads=self.num_heads,
            coarse_patch=self.coarse_patch, fine_patch=self.fine_patch, mlp_ratio=self.mlp_ratio,
            use_semantics=self.use_semantics, semantic_dim=self.semantic_dim, prediction=self.prediction,
            t_min=self.t_min,
        )

    def norm_config(self) -> dn.NormConfig:
        if self.mode == "vde":
            eps = 1e-3 if self.epsilon is None else self.epsilon
            return dn.NormConfig(eps, self.p_lo, self.p_hi, "disparity")
        eps = 1.0 if self.epsilon is None else self.epsilon
        return dn.NormConfig(eps, self.p_lo, self.p_hi, "log_depth")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def rgtp(self) -> RGTPConfig:
        return RGTPConfig(self.pi, self.num_refs)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a flat JSON object")
        return cls.from_dict(data)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingData:
    """Normalized training tensors.

    For image data ``images`` is ``(N, 3, H, W)`` and ``x0``/``valid`` are
    ``(N, 1, H, W)``; for clips an extra frame axis follows ``N``.
    ``semantics`` holds one feature map per frame in row-major order.
    """

    images: torch.Tensor
    x0: torch.Tensor
    valid: torch.Tensor
    semantics: Optional[SemanticFeatures]
    stats: List[dn.NormStats]
    ids: List[str]

    @property
    def is_clip(self):
        return self.images.ndim == 5

    def __len__(self):
        return self.images.shape[0]

    def reference_stats(self) -> dn.NormStats:
        return dn.NormStats(float(np.mean([s.d_min for s in self.stats])),
                            float(np.mean([s.d_max for s in self.stats])))


def _to_chw(images):
    arr = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return arr.movedim(-1, -3).contiguous()


def encode_semantics(encoder, images: torch.Tensor, chunk=64):
    """Run a frozen encoder over ``(N, 3, H, W)`` images in chunks."""
    parts = [encoder(images[i:i + chunk]) for i in range(0, images.shape[0], chunk)]
    return SemanticFeatures.cat(parts)


def prepare_images(images, depths, config: TrainConfig, encoder=None, ids=None) -> TrainingData:
    """Normalize ``(N, H, W, 3)`` images and ``(N, H, W)`` depths (0 = invalid) per map."""
    images = np.asarray(images)
    depths = np.asarray(depths, dtype=np.float64)
    if images.ndim != 4 or depths.shape != images.shape[:3]:
        raise DataError(f"expected (N, H, W, 3) images and (N, H, W) depths, got {images.shape}, {depths.shape}")
    if len(images) == 0:
        raise DataError("training data is empty")
    ncfg = config.norm_config()
    xs, stats = [], []
    for d in depths:
        dm = dn.DepthMap(d)
        x, st = dn.normalize_depth(dm, ncfg)
        xs.append(x)
        stats.append(st)
    imgs = _to_chw(images)
    sem = None
    if config.use_semantics:
        encoder = encoder or load_encoder(config.encoder)
        sem = encode_semantics(encoder, imgs)
    valid = np.isfinite(depths) & (depths > 0)
    return TrainingData(
        imgs, torch.as_tensor(np.stack(xs), dtype=torch.float32)[:, None],
        torch.as_tensor(valid)[:, None], sem, stats,
        list(ids) if ids is not None else [str(i) for i in range(len(images))],
    )


def prepare_clips(clips, clip_depths, config: TrainConfig, encoder=None, ids=None) -> TrainingData:
    """Normalize ``(N, T, H, W, 3)`` clips; percentiles are pooled over each clip."""
    clips = np.asarray(clips)
    clip_depths = np.asarray(clip_depths, dtype=np.float64)
    if clips.ndim != 5 or clip_depths.shape != clips.shape[:4]:
        raise DataError(f"expected (N, T, H, W, 3) clips and (N, T, H, W) depths, got {clips.shape}")
    if len(clips) == 0:
        raise DataError("training data is empty")
    ncfg = config.norm_config()
    xs, stats = [], []
    for d in clip_depths:
        x, st = dn.normalize_depth(dn.DepthMap(d), ncfg)
        xs.append(x)
        stats.append(st)
    imgs = _to_chw(clips)
    n, t = imgs.shape[:2]
    sem = None
    if config.use_semantics:
        encoder = encoder or StubConsistentEncoder(load_encoder(config.encoder))
        sem = SemanticFeatures.cat(encoder(imgs[i:i + 1]) for i in range(n))
    valid = np.isfinite(clip_depths) & (clip_depths > 0)
    return TrainingData(
        imgs, torch.as_tensor(np.stack(xs), dtype=torch.float32)[:, :, None],
        torch.as_tensor(valid)[:, :, None], sem, stats,
        list(ids) if ids is not None else [str(i) for i in range(n)],
    )


def data_from_samples(samples, config: TrainConfig, encoder=None) -> TrainingData:
    """Build training tensors from :class:`pxdepth.synth.Sample` objects.

    In ``vde`` finetuning, frames are grouped by clip and cut into
    non-overlapping chunks of ``clip_length`` frames; otherwise every frame
    is an independent image.
    """
    samples = list(samples)
    if not samples:
        raise DataError("dataset is empty")
    res = tuple(config.resolution)
    for s in samples:
        if s.image.shape[:2] != res:
            raise DataError(f"sample {s.id} has resolution {s.image.shape[:2]}, config expects {res}")
    if config.mode == "vde" and config.stage == "finetune":
        by_clip = {}
        for s in samples:
            if s.clip is None:
                raise DataError(f"sample {s.id} is not part of a clip; vde finetuning needs clips")
            by_clip.setdefault(s.clip, []).append(s)
        chunks, ids = [], []
        for name in sorted(by_clip):
            frames = sorted(by_clip[name], key=lambda s: s.frame)
            for start in range(0, len(frames) - config.clip_length + 1, config.clip_length):
                chunks.append(frames[start:start + config.clip_length])
                ids.append(f"{name}@{start}")
        if not chunks:
            raise DataError(f"no clip has at least clip_length={config.clip_length} frames")
        return prepare_clips(
            np.stack([[f.image for f in c] for c in chunks]),
            np.stack([[f.depth for f in c] for c in chunks]), config, encoder, ids,
        )
    return prepare_images(np.stack([s.image for s in samples]), np.stack([s.depth for s in samples]),
                          config, encoder, [s.id for s in samples])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    state_dict: dict
    step: int = 0
    optimizer_state: Optional[dict] = None
    reference_stats: Optional[dn.NormStats] = None
    history: List[dict] = field(default_factory=list)

    def build_model(self, dtype=torch.float32) -> CascadeDiT:
        model = CascadeDiT(self.model_config).to(dtype)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def norm_config(self):
        return self.train_config.norm_config()

    def sidecar(self):
        return {
            "magic": CKPT_MAGIC,
            "step": self.step,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "reference_stats": None if self.reference_stats is None else dataclasses.asdict(self.reference_stats),
        }


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(ckpt: Checkpoint, path):
    """Write ``path`` (tensors, torch format) and ``path.json`` (configs)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": CKPT_MAGIC,
        "step": ckpt.step,
        "state_dict": ckpt.state_dict,
        "optimizer_state": ckpt.optimizer_state,
        "history": json.dumps(ckpt.history),
    }
    torch.save(payload, path)
    sidecar_path(path).write_text(json.dumps(ckpt.sidecar(), indent=2))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    if not side.exists():
        raise DataError(f"checkpoint sidecar not found: {side}")
    try:
        meta = json.loads(side.read_text())
    except ValueError as exc:
        raise DataError(f"malformed checkpoint sidecar {side}: {exc}") from exc
    if meta.get("magic") != CKPT_MAGIC:
        raise DataError(f"{side} is not a {CKPT_MAGIC} checkpoint sidecar")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of exception types for bad files
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("magic") != CKPT_MAGIC:
        raise DataError(f"{path} is not a {CKPT_MAGIC} checkpoint")
    ref = meta.get("reference_stats")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        state_dict=payload["state_dict"],
        step=int(payload["step"]),
        optimizer_state=payload.get("optimizer_state"),
        reference_stats=None if ref is None else dn.NormStats(**ref),
        history=json.loads(payload.get("history") or "[]"),
    )


# ---------------------------------------------------------------------------
# training


def _step_generator(seed, step):
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) % (2**63))


def _batch_semantics(data: TrainingData, idx):
    if data.semantics is None:
        return None
    if data.is_clip:
        t = data.images.shape[1]
        frame_idx = (idx[:, None] * t + torch.arange(t)[None]).reshape(-1)
        return data.semantics[frame_idx]
    return data.semantics[idx]


def compute_losses(model: CascadeDiT, data: TrainingData, idx, config: TrainConfig, gen):
    """Draw noise and times for batch ``idx`` and return ``(total, parts)``."""
    x0 = data.x0[idx]
    valid = data.valid[idx]
    images = data.images[idx]
    sem = _batch_semantics(data, idx)
    b = x0.shape[0]
    x1 = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    t = torch.rand(b, generator=gen, dtype=x0.dtype)
    t_b = t.reshape((b,) + (1,) * (x0.ndim - 1))
    x_t = interpolate(x0, x1, t_b)
    target = velocity_target(x0, x1)
    if data.is_clip:
        v = model.forward_vde(x_t, images, t, sem, config.rgtp())
    else:
        v = model.forward_mde(x_t, images, t, sem)
    mse = velocity_mse(v, target, valid)
    parts = {"mse": mse}
    if config.stage == "pretrain":
        return mse, parts
    x0_hat = x_t - t_b * v
    weights = config.loss_weights()
    if data.is_clip:
        flat = lambda a: a.reshape(-1, *a.shape[-2:])
        gm = gradient_matching(flat(x0_hat), flat(x0), flat(valid), config.gm_scales)
        rtg = rtg_loss(x0_hat[:, :, 0], x0[:, :, 0], config.num_refs, valid[:, :, 0])
        parts.update(gm=gm, rtg=rtg)
        return total_vde(mse, gm, rtg, weights), parts
    gm = gradient_matching(x0_hat, x0, valid, config.gm_scales)
    parts["gm"] = gm
    return total_mde(mse, gm, weights), parts


@torch.no_grad()
def evaluate_velocity_mse(model: CascadeDiT, data: TrainingData, config: TrainConfig, seed=0, repeats=4):
    """Velocity MSE over every sample with fixed noise/time draws (comparable across checkpoints)."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    idx = torch.arange(len(data)).repeat(repeats)
    total, count = 0.0, 0
    for chunk in idx.split(max(1, config.batch_size)):
        eval_cfg = dataclasses.replace(config, stage="pretrain")
        mse, _ = compute_losses(model, data, chunk, eval_cfg, gen)
        total += float(mse) * len(chunk)
        count += len(chunk)
    model.train(was_training)
    return total / count


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def train(config: TrainConfig, data: TrainingData, init: Optional[Checkpoint] = None,
          checkpoint_path=None, stop_after: Optional[int] = None, callback=None) -> Checkpoint:
    """Optimize a model on ``data`` until ``config.max_steps``.

    ``init`` either resumes a run (same stage: optimizer state and step are
    restored) or warm-starts a new stage from its weights (different stage,
    e.g. pretrain -> finetune: step and optimizer restart). ``stop_after``
    ends the run early after that many total steps, which is how partial runs
    for resumption tests are produced.
    """
    if len(data) == 0:
        raise DataError("training data is empty")
    if data.is_clip != (config.mode == "vde" and config.stage == "finetune"):
        raise ConfigError("clip data is used exactly for vde finetuning")
    if config.use_semantics and data.semantics is None:
        raise ConfigError("config enables semantics but the data carries no semantic features")
    torch.manual_seed(config.seed)
    model = CascadeDiT(config.model_config())
    opt = make_optimizer(model, config)
    step = 0
    history = []
    if init is not None:
        model.load_state_dict(init.state_dict)
        if init.train_config.stage == config.stage and init.optimizer_state is not None:
            opt.load_state_dict(init.optimizer_state)
            step = init.step
            history = list(init.history)
    model.train()
    ref_stats = data.reference_stats()
    end = config.max_steps if stop_after is None else min(stop_after, config.max_steps)
    n = len(data)
    while step < end:
        gen = _step_generator(config.seed, step)
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        loss, parts = compute_losses(model, data, idx, config, gen)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step, [data.ids[i] for i in idx.tolist()])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        record = {"step": step, "loss": float(loss.detach())}
        record.update({k: float(v.detach()) for k, v in parts.items()})
        history.append(record)
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d loss %.6f %s", step, record["loss"],
                        " ".join(f"{k}={v:.5f}" for k, v in record.items() if k not in ("step", "loss")))
        if callback is not None:
            callback(step, model, record)
        if checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(_snapshot(model, opt, config, step, ref_stats, history), checkpoint_path)
    ckpt = _snapshot(model, opt, config, step, ref_stats, history)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def _snapshot(model, opt, config, step, ref_stats, history):
    import copy

    return Checkpoint(
        model_config=config.model_config(),
        train_config=dataclasses.replace(config),
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        step=step,
        optimizer_state=copy.deepcopy(opt.state_dict()),
        reference_stats=ref_stats,
        history=list(history),
    )


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    depth: dn.DepthMap
    normalized: np.ndarray


class Predictor:
    """Holds a model and encoder built from a checkpoint for repeated inference."""

    def __init__(self, ckpt: Checkpoint, encoder=None):
        self.ckpt = ckpt
        self.model = ckpt.build_model()
        cfg = ckpt.train_config
        self.encoder = None
        if ckpt.model_config.use_semantics:
            self.encoder = encoder or load_encoder(cfg.encoder)
        self.norm_config = ckpt.norm_config()
        if ckpt.reference_stats is None:
            raise ConfigError("checkpoint lacks reference normalization stats")
        self.stats = ckpt.reference_stats

    def _check_resolution(self, h, w):
        check_resolution(h, w, self.ckpt.model_config.coarse_patch)

    def predict_images(self, images, sampler: SamplerConfig) -> List[Prediction]:
        """``images`` is ``(N, H, W, 3)`` in [0, 1]; one shared sampler seed for the batch."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        self._check_resolution(*images.shape[1:3])
        imgs = _to_chw(images)
        sem = encode_semantics(self.encoder, imgs) if self.encoder is not None else None
        model = self.model

        def field_fn(x, t, cond):
            return model.forward_mde(x, imgs, t, sem)

        x = euler_sample(field_fn, None, sampler, (imgs.shape[0], 1) + tuple(imgs.shape[-2:]))
        out = []
        for xi in x[:, 0].numpy().astype(np.float64):
            out.append(Prediction(dn.denormalize(xi, self.stats, self.norm_config), xi))
        return out

    def predict_clip(self, frames, sampler: SamplerConfig, rgtp: Optional[RGTPConfig] = None,
                     window: Optional[int] = None, shared_noise=False, return_windows=False):
        """Per-frame predictions for a ``(T, H, W, 3)`` clip, processed in overlapping windows."""
        cfg = self.ckpt.train_config
        rgtp = rgtp or cfg.rgtp()
        frames = np.asarray(frames, dtype=np.float32)
        n_frames = frames.shape[0]
        if n_frames < 2:
            raise ConfigError("a clip needs at least two frames")
        self._check_resolution(*frames.shape[1:3])
        window = window or cfg.clip_length
        if rgtp.num_refs >= min(window, n_frames):
            raise ConfigError(f"num_refs={rgtp.num_refs} must be below the window length")
        imgs = _to_chw(frames)
        h, w = imgs.shape[-2:]
        if shared_noise:
            base = torch.randn((1, 1, h, w), generator=torch.Generator().manual_seed(sampler.seed))
            noise = base.expand(n_frames, 1, h, w).clone()
        else:
            noise = torch.stack([
                torch.randn((1, h, w), generator=_step_generator(sampler.seed, k)) for k in range(n_frames)
            ])
        encoder = None
        if self.encoder is not None:
            encoder = StubConsistentEncoder(self.encoder)
        results = [None] * n_frames
        per_window = []
        model = self.model
        for start, stop in plan_windows(n_frames, window, rgtp.num_refs):
            w_imgs = imgs[start:stop][None]
            sem = encoder(w_imgs) if encoder is not None else None

            def field_fn(x, t, cond, w_imgs=w_imgs, sem=sem):
                return model.forward_vde(x, w_imgs, t, sem, rgtp)

            x = euler_sample(field_fn, None, sampler, None, noise=noise[start:stop][None])[0, :, 0]
            x = x.numpy().astype(np.float64)
            per_window.append((start, stop, x))
            for k in range(stop - start):
                if results[start + k] is None:
                    results[start + k] = x[k]
        preds = [Prediction(dn.denormalize(xk, self.stats, self.norm_config), xk) for xk in results]
        if return_windows:
            return preds, per_window
        return preds


def infer(image, checkpoint, sampler: SamplerConfig = SamplerConfig()) -> Prediction:
    """Relative depth for one ``(H, W, 3)`` image."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    return Predictor(ckpt).predict_images(np.asarray(image)[None], sampler)[0]


def infer_video(frames, checkpoint, sampler: SamplerConfig = SamplerConfig(),
                rgtp: Optional[RGTPConfig] = None, shared_noise=False) -> List[Prediction]:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    return Predictor(ckpt).predict_clip(frames, sampler, rgtp, shared_noise=shared_noise)
