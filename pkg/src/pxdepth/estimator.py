"""scikit-learn style estimators wrapping training and inference.

``fit`` runs the progressive schedule: a pretraining stage on the velocity
MSE followed by an optional finetuning stage with the structural losses.
Predictions are relative depth; ``score`` aligns each map to the ground
truth before computing the delta-1 accuracy.
"""
import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import pipeline as P
from .flow_matching import SamplerConfig
from .geometry import align_scale_shift, apply_alignment, absrel, delta1
from .depth_norm import DepthMap
from .validation import check_clips, check_depths, check_images


class _DepthEstimatorBase(BaseEstimator):
    _mode = "mde"

    def _train_config(self, stage, steps, resolution, **extra):
        return P.TrainConfig(
            stage=stage, mode=self._mode, max_steps=max(int(steps), 1), batch_size=self.batch_size,
            learning_rate=self.learning_rate, alpha=self.alpha, resolution=resolution, seed=self.seed,
            num_blocks=self.num_blocks, hidden_dim=self.hidden_dim, num_heads=self.num_heads,
            use_semantics=self.use_semantics, prediction=self.prediction, encoder=self.encoder,
            log_every=0, **extra,
        )

    def _sampler(self, seed=None):
        return SamplerConfig(num_steps=self.num_inference_steps, seed=self.seed if seed is None else seed)

    def _init_checkpoint(self):
        # Warm starts reuse the weights only, so every fit runs its full step budget.
        if self.warm_start and hasattr(self, "checkpoint_"):
            return dataclasses.replace(self.checkpoint_, optimizer_state=None, step=0)
        return None

    def _finish(self, ckpt):
        self.checkpoint_ = ckpt
        self.predictor_ = P.Predictor(ckpt)
        self.n_steps_ = ckpt.step
        return self

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return P.save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path):
        ckpt = P.load_checkpoint(path)
        cfg = ckpt.train_config
        est = cls(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, alpha=cfg.alpha,
                  num_blocks=cfg.num_blocks, hidden_dim=cfg.hidden_dim, num_heads=cfg.num_heads,
                  use_semantics=cfg.use_semantics, prediction=cfg.prediction, encoder=cfg.encoder,
                  seed=cfg.seed)
        return est._finish(ckpt)


class PixelDepthEstimator(_DepthEstimatorBase):
    """Monocular relative depth from RGB images.

    ``fit(X, y)`` takes ``(N, H, W, 3)`` images in [0, 1] (or uint8) and
    ``(N, H, W)`` metric depths with 0 marking invalid pixels.
    """

    _mode = "mde"

    def __init__(self, pretrain_steps=2000, finetune_steps=0, batch_size=16, learning_rate=1e-4,
                 alpha=0.5, num_blocks=4, hidden_dim=64, num_heads=4, use_semantics=True,
                 prediction="x0", encoder="tiny", num_inference_steps=20, seed=0, warm_start=False):
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.num_blocks = num_blocks
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.use_semantics = use_semantics
        self.prediction = prediction
        self.encoder = encoder
        self.num_inference_steps = num_inference_steps
        self.seed = seed
        self.warm_start = warm_start

    def fit(self, X, y):
        X = check_images(X)
        y = check_depths(y, X.shape[:3])
        res = X.shape[1:3]
        ckpt = self._init_checkpoint()
        if self.pretrain_steps > 0:
            cfg = self._train_config("pretrain", self.pretrain_steps, res)
            data = P.prepare_images(X, y, cfg)
            ckpt = P.train(cfg, data, init=ckpt)
        if self.finetune_steps > 0:
            cfg = self._train_config("finetune", self.finetune_steps, res)
            data = P.prepare_images(X, y, cfg)
            ckpt = P.train(cfg, data, init=ckpt)
        if ckpt is None:
            raise ValueError("pretrain_steps and finetune_steps are both zero")
        return self._finish(ckpt)

    def predict(self, X, seed=None):
        """Relative depth ``(N, H, W)``; pixels without a valid inverse are NaN."""
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.checkpoint_.model_config.coarse_patch)
        preds = self.predictor_.predict_images(X, self._sampler(seed))
        return np.stack([np.where(p.depth.valid, p.depth.values, np.nan) for p in preds])

    def score(self, X, y):
        """Mean delta-1 accuracy after per-image scale/shift alignment."""
        pred = self.predict(X)
        y = check_depths(y, pred.shape)
        scores = []
        for p, g in zip(pred, y):
            gt = DepthMap(g)
            s, t = align_scale_shift(np.nan_to_num(p), gt, valid=np.isfinite(p))
            scores.append(delta1(apply_alignment(p, s, t), gt))
        return float(np.mean(scores))

    def absrel(self, X, y):
        pred = self.predict(X)
        y = check_depths(y, pred.shape)
        out = []
        for p, g in zip(pred, y):
            gt = DepthMap(g)
            s, t = align_scale_shift(np.nan_to_num(p), gt, valid=np.isfinite(p))
            out.append(absrel(apply_alignment(p, s, t), gt))
        return float(np.mean(out))


class VideoDepthEstimator(_DepthEstimatorBase):
    """Temporally consistent relative depth for clips.

    ``fit(X, y)`` takes ``(N, T, H, W, 3)`` clips and ``(N, T, H, W)``
    depths. Pretraining treats frames independently; finetuning trains on
    whole clips with reference-guided token propagation and the temporal loss.
    """

    _mode = "vde"

    def __init__(self, pretrain_steps=2000, finetune_steps=200, batch_size=16, learning_rate=1e-4,
                 alpha=0.5, beta=1.0, num_refs=3, pi=4, num_blocks=4, hidden_dim=64, num_heads=4,
                 use_semantics=True, prediction="x0", encoder="tiny", num_inference_steps=20, seed=0,
                 warm_start=False):
        self.pretrain_steps = pretrain_steps
        self.finetune_steps = finetune_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.beta = beta
        self.num_refs = num_refs
        self.pi = pi
        self.num_blocks = num_blocks
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.use_semantics = use_semantics
        self.prediction = prediction
        self.encoder = encoder
        self.num_inference_steps = num_inference_steps
        self.seed = seed
        self.warm_start = warm_start

    def fit(self, X, y):
        X = check_clips(X)
        y = check_depths(y, X.shape[:4])
        n, t, h, w = X.shape[:4]
        extra = dict(beta=self.beta, num_refs=self.num_refs, pi=self.pi, clip_length=t)
        ckpt = self._init_checkpoint()
        if self.pretrain_steps > 0:
            cfg = self._train_config("pretrain", self.pretrain_steps, (h, w), **extra)
            data = P.prepare_images(X.reshape(n * t, h, w, 3), y.reshape(n * t, h, w), cfg)
            ckpt = P.train(cfg, data, init=ckpt)
        if self.finetune_steps > 0:
            cfg = self._train_config("finetune", self.finetune_steps, (h, w), **extra)
            ckpt = P.train(cfg, P.prepare_clips(X, y, cfg), init=ckpt)
        if ckpt is None:
            raise ValueError("pretrain_steps and finetune_steps are both zero")
        return self._finish(ckpt)

    def predict(self, X, seed=None, shared_noise=False):
        """Relative depth ``(N, T, H, W)`` for a clip or a batch of clips."""
        check_is_fitted(self, "checkpoint_")
        X = check_clips(X, self.checkpoint_.model_config.coarse_patch)
        out = []
        for clip in X:
            preds = self.predictor_.predict_clip(clip, self._sampler(seed), shared_noise=shared_noise)
            out.append(np.stack([np.where(p.depth.valid, p.depth.values, np.nan) for p in preds]))
        return np.stack(out)

    def score(self, X, y):
        """Mean delta-1 accuracy with one scale/shift per clip."""
        pred = self.predict(X)
        y = check_depths(y, pred.shape)
        scores = []
        for p, g in zip(pred, y):
            gt = DepthMap(g)
            s, t = align_scale_shift(np.nan_to_num(p), gt, valid=np.isfinite(p), mode="per_video")
            scores.append(delta1(apply_alignment(p, s, t), gt))
        return float(np.mean(scores))
