"""scikit-learn style wrapper around the three-stage trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .blocks import EncoderConfig
from .data import SceneSample
from .metrics import DepthAccumulator, SegAccumulator, build_report
from .model import ModelConfig, forward, predict_arrays
from .train import STAGE_TERMS, StageConfig, TrainConfig, three_stage_train
from .validation import check_images, check_targets


class CINetEstimator(BaseEstimator):
    """Joint depth and segmentation model.

    ``fit(X, y)`` takes images ``X`` shaped ``(n, 3, H, W)`` in [0, 1] and
    targets ``y`` shaped ``(n, 2, H, W)`` holding metric depth (0 = invalid)
    in channel 0 and integer class labels in channel 1. ``predict`` returns
    the same layout.
    """

    def __init__(self, n_classes=6, block="fsm", use_sum=True, use_consistency=True,
                 attention_loss=True, epochs=(30, 20, 20), lrs=(6e-3, 2e-3, 2e-3),
                 batch_size=4, momentum=0.9, weight_decay=5e-4, poly_power=0.9,
                 grad_clip=0.5, clip_mode="tensor", hflip=False,
                 decoder_channels=(64, 48, 32), seed=7, out_dir=None):
        self.n_classes = n_classes
        self.block = block
        self.use_sum = use_sum
        self.use_consistency = use_consistency
        self.attention_loss = attention_loss
        self.epochs = epochs
        self.lrs = lrs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.poly_power = poly_power
        self.grad_clip = grad_clip
        self.clip_mode = clip_mode
        self.hflip = hflip
        self.decoder_channels = decoder_channels
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self, image_size):
        if len(self.epochs) != 3 or len(self.lrs) != 3:
            raise ValueError("epochs and lrs need one entry per stage")
        stages = tuple(
            StageConfig(int(e), float(lr), terms, "poly" if k == 2 else "constant")
            for k, (e, lr, terms) in enumerate(zip(self.epochs, self.lrs, STAGE_TERMS))
        )
        model = ModelConfig(n_classes=self.n_classes, image_size=image_size, encoder=EncoderConfig(),
                            decoder_channels=tuple(self.decoder_channels), block=self.block, use_sum=self.use_sum)
        return TrainConfig(
            seed=self.seed, batch_size=self.batch_size, momentum=self.momentum,
            weight_decay=self.weight_decay, poly_power=self.poly_power, stages=stages,
            block=self.block, use_sum=self.use_sum, use_consistency=self.use_consistency,
            attention_loss=self.attention_loss, hflip=self.hflip, grad_clip=self.grad_clip,
            clip_mode=self.clip_mode, model=model,
        )

    def fit(self, X, y):
        X = check_images(X)
        depth, labels = check_targets(y, len(X), X.shape[-2:], self.n_classes)
        samples = [SceneSample(X[i], depth[i], labels[i], depth[i] > 0) for i in range(len(X))]
        self.config_ = self._train_config(X.shape[-2:])
        self.params_, self.report_ = three_stage_train(self.config_, samples, out_dir=self.out_dir)
        self.n_parameters_ = self.params_.n_parameters()
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before using this estimator")

    def _check_input(self, X):
        self._check_fitted()
        X = check_images(X)
        if X.shape[-2:] != self.config_.model.image_size:
            raise ValueError(f"model was fitted on {self.config_.model.image_size} images, got {X.shape[-2:]}")
        return X

    def predict(self, X):
        """``(n, 2, H, W)``: predicted depth and predicted labels (as floats)."""
        X = self._check_input(X)
        depth, labels = predict_arrays(self.params_, X)
        return np.stack([depth, labels.astype(np.float64)], axis=1)

    def predict_depth(self, X):
        X = self._check_input(X)
        return predict_arrays(self.params_, X)[0]

    def predict_labels(self, X):
        X = self._check_input(X)
        return predict_arrays(self.params_, X)[1]

    def predict_attention(self, X):
        """Learned ``n x N x N`` attention maps."""
        X = self._check_input(X)
        if self.params_.sum is None:
            raise ValueError("this model has no attention module")
        return forward(self.params_, X).attention.data

    def transform(self, X):
        """Encoder features after the attention module, ``n x C_f x H/8 x W/8``."""
        from .context import sum_forward
        from .model import INPUT_SCALE, INPUT_SHIFT, encoder_forward
        from .autograd import Tensor, ops

        X = self._check_input(X)
        feat = encoder_forward(ops.scale(ops.sub(Tensor(X), INPUT_SHIFT), INPUT_SCALE), self.params_.encoder)
        if self.params_.sum is not None:
            feat, _ = sum_forward(feat, self.params_.sum)
        return feat.data

    def evaluate(self, X, y):
        """Full metrics report on ``(X, y)``."""
        X = self._check_input(X)
        depth, labels = check_targets(y, len(X), X.shape[-2:], self.n_classes)
        pred_depth, pred_labels = predict_arrays(self.params_, X)
        d_acc = DepthAccumulator().update(pred_depth, depth, depth > 0)
        s_acc = SegAccumulator(self.n_classes).update(pred_labels, labels)
        return build_report(d_acc, s_acc)

    def score(self, X, y):
        """Mean of delta1 and mIoU (higher is better)."""
        report = self.evaluate(X, y)
        return 0.5 * (report.delta1 + report.mIoU)
