"""scikit-learn style front end for delayed-scan prediction."""
from __future__ import annotations

import warnings
from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffusion import PairedSample
from .metrics import psnr
from .trainer import TrainConfig, load_checkpoint, predict_images, train
from .validation import check_delays, check_images, check_pair


class DelayedScanDiffusion(BaseEstimator):
    """Conditional diffusion model mapping an early scan and a delay to a delayed scan.

    ``fit(X, y, delays)`` takes early scans ``X`` and delayed scans ``y`` as
    ``(n, H, W)`` arrays in [0, 1] and the delay of each pair in whole
    minutes. ``predict(X, delays)`` draws one delayed-scan sample per input by
    running the full reverse chain.

    Parameters mirror :class:`~delayscan.trainer.TrainConfig`;
    ``random_state`` seeds initialization, data order and noise.
    """

    def __init__(self, T=300, beta_start=1e-4, beta_end=0.02, stages=3, base_channels=32,
                 channel_multipliers=(1, 2, 4), n_res=2, n_trans=2, time_dim=64, heads=4,
                 embed_mode="ec", use_transformer=True, use_delay_time=True, epochs=200, max_steps=0,
                 batch_size=8, learning_rate=1e-4, beta1=0.5, beta2=0.999, adam_eps=1e-8,
                 dtype="float32", random_state=0, checkpoint_dir=None, checkpoint_every=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.stages = stages
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.n_res = n_res
        self.n_trans = n_trans
        self.time_dim = time_dim
        self.heads = heads
        self.embed_mode = embed_mode
        self.use_transformer = use_transformer
        self.use_delay_time = use_delay_time
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.dtype = dtype
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in params.items() if k in names}
        return TrainConfig(seed=int(self.random_state or 0), **kw)

    def fit(self, X, y, delays):
        X, y = check_pair(X, y)
        delays = check_delays(delays, X.shape[0])
        factor = 2 ** (self.stages - 1)
        if X.shape[1] % factor or X.shape[2] % factor:
            raise ValueError(f"image size {X.shape[1:]} must be divisible by {factor} for {self.stages} stages")
        samples = [PairedSample(xe, x0, 0, int(d), id=str(i)) for i, (xe, x0, d) in enumerate(zip(X, y, delays))]
        result = train(samples, self.train_config(), out_dir=self.checkpoint_dir)
        self.model_ = result.model
        self.schedule_ = result.schedule
        self.loss_trace_ = np.array([loss for _, loss in result.loss_trace])
        self.delay_range_ = result.delay_range
        self.image_shape_ = X.shape[1:]
        return self

    @classmethod
    def from_checkpoint(cls, directory) -> "DelayedScanDiffusion":
        ck = load_checkpoint(directory)
        cfg = ck.model.config
        est = cls(stages=cfg.stages, base_channels=cfg.base_channels,
                  channel_multipliers=cfg.channel_multipliers, n_res=cfg.n_res, n_trans=cfg.n_trans,
                  time_dim=cfg.time_dim, heads=cfg.heads, embed_mode=cfg.embed_mode,
                  use_transformer=cfg.use_transformer, use_delay_time=cfg.use_delay_time,
                  T=ck.schedule.T, beta_start=ck.schedule.beta_start, beta_end=ck.schedule.beta_end)
        est.model_ = ck.model
        est.schedule_ = ck.schedule
        est.loss_trace_ = np.array([loss for _, loss in ck.trace])
        est.delay_range_ = ck.delay_range
        est.image_shape_ = ck.image_shape
        return est

    def predict(self, X, delays, random_state=None):
        check_is_fitted(self, ["model_", "schedule_"])
        X = check_images(X)
        delays = check_delays(delays, X.shape[0])
        if X.shape[1:] != tuple(self.image_shape_):
            raise ValueError(f"model was trained on {tuple(self.image_shape_)} images, got {X.shape[1:]}")
        lo, hi = self.delay_range_
        if self.use_delay_time and (delays.min() < lo or delays.max() > hi):
            warnings.warn(f"delays outside the trained range [{lo}, {hi}] minutes", stacklevel=2)
        seed = self.random_state if random_state is None else random_state
        return predict_images(self.model_, self.schedule_, X, delays, int(seed or 0))

    def score(self, X, y, delays, random_state=None) -> float:
        """Mean PSNR (dB, peak 1.0) of predictions against ``y``."""
        y = check_images(y, "y")
        pred = self.predict(X, delays, random_state)
        return float(np.mean([psnr(a, b) for a, b in zip(y, pred)]))
