"""Discriminative grasp evaluator and likelihood-fused grasp selection.

The evaluator scores (point cloud, grasp) pairs in [0, 1] with a binary
cross-entropy objective. At selection time its score is fused with the
batch-normalized Grasp Flow log-likelihoods:

    fused = epsilon * score + (1 - epsilon) * zhat,
    zhat  = (logp - mean(logp)) / std(logp) over the candidate batch,

so epsilon = 1 reproduces the evaluator ranking and epsilon = 0 the
likelihood ranking. The shipped default is epsilon = 0.01.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from . import checkpoint
from .errors import ContractError, DataError, NumericError
from .grasps import GRASP_DIM, GraspConfig
from .models import _embedder, run_training
from .numerics import (DTYPE, ContextMLP, check_finite, positional_encoding,
                       seeded_generator)
from .pointcloud import PointCloud, bps_encode, make_basis

DEFAULT_EPSILON = 0.01
EPSILON_GRID = (0.0, 0.01, 0.1, 0.5, 1.0)


class EvaluatorNet(nn.Module):
    def __init__(self, feature_dim: int, event_dim: int = GRASP_DIM,
                 embed_dim: int = 32, hidden: int = 128, pos_bands: int = 4):
        super().__init__()
        self.pos_bands = pos_bands
        enc_dim = (2 * pos_bands + 1) * event_dim
        self.embedder = _embedder(feature_dim, embed_dim)
        self.head = ContextMLP([enc_dim, hidden, hidden, 1],
                               context_dim=embed_dim, activation="relu")

    def logits(self, features, events):
        e = self.embedder(features)
        return self.head(positional_encoding(events, self.pos_bands), e).squeeze(-1)


class GraspEvaluator(BaseEstimator):
    """Feasible-vs-infeasible grasp classifier over (cloud, grasp) pairs."""

    checkpoint_kind = "evaluator"

    def __init__(self, embed_dim=32, hidden=128, pos_bands=4,
                 basis_size=1024, basis_radius=0.15, lr=1e-4, batch_size=64,
                 iterations=4000, weight_decay=1e-4, val_fraction=0.1, seed=0):
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.pos_bands = pos_bands
        self.basis_size = basis_size
        self.basis_radius = basis_radius
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.seed = seed

    def _build_net(self):
        return EvaluatorNet(self.basis_size, GRASP_DIM, self.embed_dim,
                            self.hidden, self.pos_bands)

    def fit(self, clouds: Sequence[PointCloud], grasps: Sequence[np.ndarray],
            labels: Sequence[np.ndarray]):
        """Train on aligned (cloud, grasp rows, 0/1 label rows) triples."""
        if not (len(clouds) == len(grasps) == len(labels)):
            raise ContractError("clouds, grasps and labels must align")
        torch.manual_seed(self.seed)
        self.basis_ = make_basis(self.basis_size, self.basis_radius, self.seed)
        feats = [bps_encode(c, self.basis_) for c in clouds]
        feat_rows, rows = [], []
        for i, (g, lab) in enumerate(zip(grasps, labels)):
            g = np.atleast_2d(np.asarray(g, dtype=np.float64))
            lab = np.asarray(lab, dtype=np.float64).reshape(-1)
            if g.shape[0] != lab.shape[0]:
                raise ContractError("labels must align with grasp rows")
            for row, y in zip(g, lab):
                feat_rows.append(feats[i])
                rows.append(np.concatenate([row, [y]]))
        features = torch.tensor(np.stack(feat_rows), dtype=DTYPE)
        # grasp vector plus the label in the last column, so the shared
        # training loop can shuffle them together
        events = torch.tensor(np.stack(rows), dtype=DTYPE)
        ys = events[:, -1]
        if ys.min() == ys.max():
            raise DataError("evaluator training needs both labels")
        n = features.shape[0]
        perm = torch.randperm(n, generator=seeded_generator(self.seed + 17))
        n_val = max(1, int(round(self.val_fraction * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if ys[train_idx].min() == ys[train_idx].max():
            raise DataError("training split is single-class; need more data")

        self.net_ = self._build_net()
        bce = nn.BCEWithLogitsLoss()

        def loss_fn(net, fb, eb, beta, gen):
            logits = net.logits(fb, eb[:, :GRASP_DIM])
            loss = bce(logits, eb[:, GRASP_DIM])
            if not torch.isfinite(loss):
                raise NumericError("non-finite evaluator loss", term="bce")
            return loss, {"bce": float(loss.detach())}

        result = run_training(
            self.net_, loss_fn, features[train_idx], events[train_idx],
            iterations=self.iterations, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, seed=self.seed,
            beta_start=0.0, beta_end=0.0)
        self.loss_curve_ = result.loss_curve
        self.diverged_ = result.diverged
        self.net_.eval()
        with torch.no_grad():
            logits = self.net_.logits(features[val_idx], events[val_idx, :GRASP_DIM])
            pred = (logits > 0).to(DTYPE)
            self.val_accuracy_ = float((pred == ys[val_idx]).to(DTYPE).mean())
        return self

    def evaluate(self, cloud: PointCloud, grasps) -> np.ndarray:
        """Deterministic per-grasp feasibility scores in [0, 1]."""
        if getattr(self, "net_", None) is None:
            raise ContractError("evaluator is not fitted")
        rows = [g.to_vector() if isinstance(g, GraspConfig) else np.asarray(g)
                for g in grasps]
        g = torch.tensor(np.stack(rows), dtype=DTYPE)
        feat = torch.tensor(bps_encode(cloud, self.basis_), dtype=DTYPE)
        feat = feat.unsqueeze(0).repeat(g.shape[0], 1)
        with torch.no_grad():
            scores = torch.sigmoid(self.net_.logits(feat, g))
        return check_finite(scores, "evaluator scores").numpy()

    def _checkpoint_extras(self):
        return {
            "fitted": getattr(self, "net_", None) is not None,
            "loss_curve": [float(v) for v in getattr(self, "loss_curve_", [])],
            "val_accuracy": float(getattr(self, "val_accuracy_", float("nan"))),
            "diverged": bool(getattr(self, "diverged_", False)),
        }

    def _restore(self, basis, extras, state):
        if basis is None or not extras.get("fitted"):
            raise ContractError("checkpoint does not contain a fitted evaluator")
        torch.manual_seed(self.seed)
        self.basis_ = basis
        self.net_ = self._build_net()
        self.net_.load_state_dict(state, strict=True)
        self.net_.eval()
        self.loss_curve_ = extras.get("loss_curve", [])
        self.val_accuracy_ = extras.get("val_accuracy", float("nan"))
        self.diverged_ = extras.get("diverged", False)


def fuse(scores: np.ndarray, grasp_logps: np.ndarray,
         epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Blend evaluator scores with batch-normalized log-likelihoods."""
    scores = np.asarray(scores, dtype=np.float64)
    logps = np.asarray(grasp_logps, dtype=np.float64)
    if scores.shape != logps.shape or scores.ndim != 1:
        raise ContractError("scores and log-likelihoods must be equal-length vectors")
    if scores.shape[0] < 2:
        raise ContractError("fusion needs a batch of >= 2 candidates")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError("epsilon must be in [0, 1]")
    std = logps.std()
    zhat = logps - logps.mean()
    if std > 1e-12:
        zhat = zhat / std
    return epsilon * scores + (1.0 - epsilon) * zhat


def rank_and_select(grasps: Sequence, fused: np.ndarray, k: int,
                    grasp_logps: Optional[np.ndarray] = None
                    ) -> Tuple[List, np.ndarray]:
    """Top-k by descending fused score; ties broken by higher grasp log-prob,
    then by lower sample index. Returns (selected grasps, their indices)."""
    fused = np.asarray(fused, dtype=np.float64)
    n = len(grasps)
    if fused.shape != (n,):
        raise ContractError("fused scores must align with grasps")
    if not 0 <= k <= n:
        raise ContractError("k must be within [0, len(grasps)]")
    logps = np.zeros(n) if grasp_logps is None else np.asarray(grasp_logps)
    order = sorted(range(n), key=lambda i: (-fused[i], -logps[i], i))
    idx = np.asarray(order[:k], dtype=np.int64)
    return [grasps[i] for i in idx], idx


checkpoint.register_kind("evaluator", GraspEvaluator)
