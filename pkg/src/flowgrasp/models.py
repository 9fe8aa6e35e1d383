"""Generative grasp models and their training loops.

Three samplers share the same interface (fit / sample / score_samples):

* ``LvmGraspSampler`` -- the flow-based deep latent variable model: a BPS
  feature embedder, a Prior Flow p(z|x) over the latent code, a Grasp Flow
  p(g|x,z) over grasp vectors conditioned on the embedding and the latent
  (with a conditional base), and a Gaussian variational inference network
  q(z|x,g). Trained on a beta-weighted evidence lower bound with a single
  reparameterized latent sample.
* ``CnfGraspSampler`` -- one conditional flow on grasps, context = embedded
  point cloud, trained by maximum likelihood.
* ``CvaeGraspSampler`` -- the conditional VAE baseline with an isotropic
  Gaussian decoder and an input-independent N(0, I) prior.

The LVM exposes the two introspection signals: per-grasp log p(g|z*)
(view-level shape uncertainty) and the latent prior score (object-level,
used for novel-object detection).
"""

import copy
import dataclasses
import math
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator

from . import checkpoint
from .errors import ContractError, DataError, NumericError
from .flows import FlowStack
from .grasps import GRASP_DIM, GraspConfig, grasp_from_vector
from .numerics import (DTYPE, ContextMLP, check_finite, make_adamw,
                       positional_encoding, seeded_generator)
from .pointcloud import PointCloud, bps_encode, make_basis


def beta_schedule(iteration: int, total: int,
                  start: float = 1e-7, end: float = 1e-1) -> float:
    """KL weight, linear per iteration from `start` to `end`."""
    if not 0 <= iteration < total:
        raise ContractError("iteration out of range")
    if start > end or start < 0:
        raise ContractError("need 0 <= beta_start <= beta_end")
    if total == 1:
        return end
    return start + (end - start) * iteration / (total - 1)


@dataclasses.dataclass
class GraspSample:
    vector: np.ndarray
    config: GraspConfig
    grasp_logp: float
    prior_logp: Optional[float]
    clamped_joints: int


# --------------------------------------------------------------------------
# networks


def _embedder(feature_dim: int, out_dim: int, hidden: int = 128) -> ContextMLP:
    # 4-layer MLP from the raw BPS feature to the context embedding
    return ContextMLP([feature_dim, 2 * hidden, hidden, hidden, out_dim],
                      activation="relu")


class AnchoredEmbedder(nn.Module):
    """Frozen whitened-PCA projection of the BPS feature plus a trainable
    MLP residual.

    The training objective alone gives the embedder no reason to preserve
    object geometry, and an unconstrained MLP measurably destroys the
    family structure that is present in the raw features. The frozen linear
    anchor (fit on the training view features) keeps the embedding
    geometry-preserving; the residual starts at zero and only learns the
    deviations the likelihood actually needs.
    """

    def __init__(self, feature_dim: int, out_dim: int, hidden: int = 128):
        super().__init__()
        self.anchor = nn.Linear(feature_dim, out_dim).to(DTYPE)
        for p in self.anchor.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            self.anchor.weight.mul_(1.0 / math.sqrt(feature_dim))
            self.anchor.bias.zero_()
        self.residual = _embedder(feature_dim, out_dim, hidden)
        with torch.no_grad():
            last = self.residual.layers[-1]
            last.weight.zero_()
            last.bias.zero_()

    def init_anchor(self, view_features: torch.Tensor) -> None:
        """Fit the frozen anchor as a whitened PCA of the view features."""
        n, out_dim = view_features.shape[0], self.anchor.weight.shape[0]
        if n < 2:
            # single-view training set: keep the random projection anchor
            return
        with torch.no_grad():
            mean = view_features.mean(dim=0)
            centered = view_features - mean
            _, s, vh = torch.linalg.svd(centered, full_matrices=False)
            k = min(out_dim, vh.shape[0])
            scale = math.sqrt(max(n - 1, 1)) / torch.clamp(s[:k], min=1e-8)
            w = torch.zeros_like(self.anchor.weight)
            w[:k] = vh[:k] * scale.unsqueeze(1)
            self.anchor.weight.copy_(w)
            self.anchor.bias.copy_(-w @ mean)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.anchor(features) + self.residual(features)


class LvmNet(nn.Module):
    """Embedder + Prior Flow + Grasp Flow + inference network."""

    def __init__(self, feature_dim: int, event_dim: int = GRASP_DIM,
                 latent_dim: int = 16, blocks: int = 8, hidden: int = 64,
                 pos_bands: int = 4, posterior_floor: float = 0.0,
                 posterior_bound: float = 0.0, familiarity_gamma: float = 0.0):
        super().__init__()
        self.feature_dim = feature_dim
        self.event_dim = event_dim
        self.latent_dim = latent_dim
        self.pos_bands = pos_bands
        self.posterior_floor = posterior_floor
        self.posterior_bound = posterior_bound
        self.familiarity_gamma = familiarity_gamma
        enc_dim = (2 * pos_bands + 1) * event_dim
        self.embedder = AnchoredEmbedder(feature_dim, latent_dim)
        self.prior_flow = FlowStack(latent_dim, context_dim=latent_dim,
                                    blocks=blocks, hidden=hidden)
        self.grasp_flow = FlowStack(event_dim, context_dim=latent_dim,
                                    blocks=blocks, hidden=hidden,
                                    conditional_base=True)
        self.inference = ContextMLP([enc_dim, 128, 128, 2 * latent_dim],
                                    context_dim=latent_dim, activation="tanh")
        # frozen-projection coordinates of the training views; the prior's
        # base std is widened in proportion to a query's distance from them
        self.register_buffer("anchor_points",
                             torch.zeros(0, latent_dim, dtype=DTYPE))
        self.register_buffer("anchor_scale", torch.ones((), dtype=DTYPE))

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        return self.embedder(features)

    def set_familiarity_anchors(self, view_features: torch.Tensor) -> None:
        """Record the training views (in the frozen anchor projection) and a
        reference scale: their median leave-one-out neighbor distance."""
        with torch.no_grad():
            coords = self.embedder.anchor(view_features)
            self.anchor_points = coords
            if coords.shape[0] >= 2:
                dists = torch.cdist(coords, coords)
                dists.fill_diagonal_(float("inf"))
                scale = dists.min(dim=1).values.median()
                self.anchor_scale = torch.clamp(scale, min=1e-8)

    def familiarity_offset(self, features: torch.Tensor):
        """Per-row base log-std offset for the Prior Flow.

        Maximum likelihood leaves the conditional prior's concentration
        off the training manifold arbitrary (there is no data there), so
        familiarity is built in explicitly: the base std grows with the
        distance from the view's frozen-projection coordinates to the
        nearest training view. Training views themselves sit at distance
        zero, so the objective is unaffected.
        """
        if self.familiarity_gamma == 0.0 or self.anchor_points.shape[0] == 0:
            return None
        with torch.no_grad():
            coords = self.embedder.anchor(features)
            d = torch.cdist(coords, self.anchor_points).min(dim=1).values
        return self.familiarity_gamma * d / self.anchor_scale

    def posterior(self, embedding, events):
        enc = positional_encoding(events, self.pos_bands)
        mu, log_delta = self.inference(enc, embedding).chunk(2, dim=1)
        # the floor + soft mean bound cap the posterior's signal-to-noise
        # ratio; without them q(z|x,g) collapses to a deterministic grasp
        # encoder (rescaling mu to defeat a bare floor), which turns the
        # grasp flow into a per-grasp delta that is unusable for density
        # queries under prior-drawn latents
        if self.posterior_bound > 0:
            mu = self.posterior_bound * torch.tanh(mu / self.posterior_bound)
        lo = math.log(self.posterior_floor) if self.posterior_floor > 0 \
            else -7.0
        return mu, torch.clamp(log_delta, lo, 7.0)


def elbo_loss(net: LvmNet, features: torch.Tensor, events: torch.Tensor,
              beta: float, generator: Optional[torch.Generator] = None):
    """Negative beta-ELBO with one reparameterized latent sample per item.

    Returns (loss, terms) where terms holds the mean reconstruction
    log-likelihood and the single-sample KL estimate
    KL = -(entropy of q + log prior density at the sample).
    """
    if beta < 0:
        raise ContractError("beta must be >= 0")
    if features.shape[0] < 1:
        raise ContractError("batch must be non-empty")
    e = net.embed(features)
    mu, log_delta = net.posterior(e, events)
    eps = torch.randn(mu.shape, dtype=DTYPE, generator=generator)
    z = mu + eps * torch.exp(log_delta)
    recon = net.grasp_flow.log_prob(events, z)
    entropy = (0.5 * math.log(2 * math.pi * math.e) + log_delta).sum(dim=1)
    prior_lp = net.prior_flow.log_prob(
        z, e, base_logstd_offset=net.familiarity_offset(features))
    kld = -(entropy + prior_lp)
    loss = -(recon - beta * kld).mean()
    if not torch.isfinite(loss):
        bad = [name for name, t in
               (("recon", recon), ("entropy", entropy), ("prior", prior_lp))
               if not torch.isfinite(t).all()]
        raise NumericError("non-finite ELBO", term=",".join(bad) or "loss")
    return loss, {"recon": float(recon.detach().mean()),
                  "kld": float(kld.detach().mean())}


class CnfNet(nn.Module):
    """Embedder + one conditional flow over grasp vectors."""

    def __init__(self, feature_dim: int, event_dim: int = GRASP_DIM,
                 latent_dim: int = 16, blocks: int = 8, hidden: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.event_dim = event_dim
        self.embedder = _embedder(feature_dim, latent_dim)
        self.flow = FlowStack(event_dim, context_dim=latent_dim, blocks=blocks,
                              hidden=hidden, conditional_base=True)

    def embed(self, features):
        return self.embedder(features)

    def log_prob(self, features, events):
        return self.flow.log_prob(events, self.embed(features))


class CvaeNet(nn.Module):
    """Gaussian encoder/decoder with a standard-normal prior (the baseline)."""

    def __init__(self, feature_dim: int, event_dim: int = GRASP_DIM,
                 latent_dim: int = 16, hidden: int = 128, pos_bands: int = 4,
                 decoder_sigma: float = 0.1):
        super().__init__()
        self.feature_dim = feature_dim
        self.event_dim = event_dim
        self.latent_dim = latent_dim
        self.pos_bands = pos_bands
        self.decoder_sigma = decoder_sigma
        enc_dim = (2 * pos_bands + 1) * event_dim
        self.embedder = _embedder(feature_dim, latent_dim)
        self.encoder = ContextMLP([enc_dim, hidden, hidden, 2 * latent_dim],
                                  context_dim=latent_dim, activation="tanh")
        self.decoder = ContextMLP([latent_dim, hidden, hidden, event_dim],
                                  context_dim=latent_dim, activation="relu")

    def embed(self, features):
        return self.embedder(features)

    def encode(self, embedding, events):
        enc = positional_encoding(events, self.pos_bands)
        mu, log_sigma = self.encoder(enc, embedding).chunk(2, dim=1)
        return mu, torch.clamp(log_sigma, -7.0, 7.0)

    def decode(self, z, embedding):
        return self.decoder(z, embedding)

    def recon_log_prob(self, events, decoded):
        var = self.decoder_sigma ** 2
        return (-0.5 * self.event_dim * math.log(2 * math.pi * var)
                - ((events - decoded) ** 2).sum(dim=1) / (2 * var))


def gaussian_kl_standard(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag(sigma^2)) || N(0, I) ), summed over dimensions."""
    return 0.5 * (mu ** 2 + torch.exp(2 * log_sigma) - 2 * log_sigma - 1.0).sum(dim=1)


def cvae_loss(net: CvaeNet, features, events, beta, generator=None):
    e = net.embed(features)
    mu, log_sigma = net.encode(e, events)
    eps = torch.randn(mu.shape, dtype=DTYPE, generator=generator)
    z = mu + eps * torch.exp(log_sigma)
    recon = net.recon_log_prob(events, net.decode(z, e))
    kld = gaussian_kl_standard(mu, log_sigma)
    loss = (-recon + beta * kld).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite cVAE loss", term="loss")
    return loss, {"recon": float(recon.detach().mean()),
                  "kld": float(kld.detach().mean())}


# --------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class TrainResult:
    loss_curve: List[float]
    term_curves: dict
    diverged: bool


def run_training(net: nn.Module, loss_fn, features: torch.Tensor,
                 events: torch.Tensor, *, iterations: int, batch_size: int,
                 lr: float, weight_decay: float = 1e-4, seed: int = 0,
                 beta_start: float = 1e-7, beta_end: float = 1e-1,
                 noise_sigma: float = 0.0, init_fn=None,
                 param_groups=None) -> TrainResult:
    """Minibatch AdamW loop over (feature, event) records.

    `loss_fn(net, feat_batch, event_batch, beta, generator)` returns
    (scalar loss, term dict). `noise_sigma` adds Gaussian jitter to each
    event batch (density smoothing: without it an exact-likelihood flow
    collapses onto a small training set and its off-manifold log-probs
    become meaningless). Divergence (non-finite loss) aborts and restores
    the last good parameters. Deterministic per seed.
    """
    n = features.shape[0]
    if n < 1:
        raise DataError("empty training set")
    if features.shape[0] != events.shape[0]:
        raise ContractError("features/events record counts differ")
    batch_size = min(batch_size, n)
    gen = seeded_generator(seed)
    opt = make_adamw(param_groups if param_groups is not None
                     else net.parameters(), lr, weight_decay)
    loss_curve: List[float] = []
    term_curves: dict = {}
    diverged = False
    last_good = copy.deepcopy(net.state_dict())
    for it in range(iterations):
        idx = torch.randint(n, (batch_size,), generator=gen)
        fb, eb = features[idx], events[idx]
        if noise_sigma > 0:
            eb = eb + noise_sigma * torch.randn(eb.shape, dtype=DTYPE,
                                                generator=gen)
        if it == 0 and init_fn is not None:
            init_fn(fb, eb, gen)
        beta = beta_schedule(it, iterations, beta_start, beta_end)
        try:
            loss, terms = loss_fn(net, fb, eb, beta, gen)
        except NumericError:
            diverged = True
            net.load_state_dict(last_good)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_curve.append(float(loss.detach()))
        for key, val in terms.items():
            term_curves.setdefault(key, []).append(val)
        if (it + 1) % 100 == 0:
            if any(not torch.isfinite(p).all() for p in net.parameters()):
                diverged = True
                net.load_state_dict(last_good)
                break
            last_good = copy.deepcopy(net.state_dict())
    return TrainResult(loss_curve, term_curves, diverged)


# --------------------------------------------------------------------------
# estimators


class _GraspSamplerBase(BaseEstimator):
    """Shared fit/encode plumbing for the three grasp samplers."""

    checkpoint_kind = None

    def _expand_records(self, clouds, grasps):
        if len(clouds) != len(grasps):
            raise ContractError("clouds and grasps lists must align")
        if len(clouds) == 0:
            raise DataError("empty training set")
        feats = np.stack([bps_encode(c, self.basis_) for c in clouds])
        feat_rows, grasp_rows = [], []
        for i, g in enumerate(grasps):
            g = np.atleast_2d(np.asarray(g, dtype=np.float64))
            if g.shape[1] != GRASP_DIM:
                raise ContractError(f"grasp vectors must have length {GRASP_DIM}")
            for row in g:
                feat_rows.append(feats[i])
                grasp_rows.append(row)
        features = torch.tensor(np.stack(feat_rows), dtype=DTYPE)
        events = torch.tensor(np.stack(grasp_rows), dtype=DTYPE)
        self._view_features_ = torch.tensor(feats, dtype=DTYPE)
        return check_finite(features, "bps features"), check_finite(events, "grasps")

    def fit(self, clouds: Sequence[PointCloud], grasps: Sequence[np.ndarray]):
        """Train on canonical-frame clouds, each with an array of grasp rows."""
        torch.manual_seed(self.seed)
        self.basis_ = make_basis(self.basis_size, self.basis_radius, self.seed)
        self.net_ = self._build_net()
        features, events = self._expand_records(clouds, grasps)
        embedder = getattr(self.net_, "embedder", None)
        if isinstance(embedder, AnchoredEmbedder):
            embedder.init_anchor(self._view_features_)
        if hasattr(self.net_, "set_familiarity_anchors"):
            self.net_.set_familiarity_anchors(self._view_features_)
        result = run_training(
            self.net_, self._loss_fn(), features, events,
            iterations=self.iterations, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, seed=self.seed,
            beta_start=self.beta_start, beta_end=self.beta_end,
            noise_sigma=self.noise_sigma, init_fn=self._init_fn(),
            param_groups=self._param_groups())
        self.loss_curve_ = result.loss_curve
        self.term_curves_ = result.term_curves
        self.diverged_ = result.diverged
        self.net_.eval()
        return self

    def _encode(self, cloud: PointCloud) -> torch.Tensor:
        self._require_fitted()
        feat = bps_encode(cloud, self.basis_)
        return torch.tensor(feat, dtype=DTYPE).unsqueeze(0)

    def _require_fitted(self):
        if getattr(self, "net_", None) is None:
            raise ContractError("model is not fitted")

    def _param_groups(self):
        return None

    def _grasps_to_tensor(self, grasps) -> torch.Tensor:
        rows = [g.to_vector() if isinstance(g, GraspConfig) else np.asarray(g)
                for g in grasps]
        arr = np.stack(rows).astype(np.float64)
        if arr.ndim != 2 or arr.shape[1] != GRASP_DIM:
            raise ContractError(f"grasps must be (n, {GRASP_DIM})")
        return torch.tensor(arr, dtype=DTYPE)

    def _make_samples(self, vectors, grasp_lp, prior_lp=None) -> List[GraspSample]:
        out = []
        for i, row in enumerate(vectors.detach().numpy()):
            config, clamped = grasp_from_vector(row)
            out.append(GraspSample(
                vector=row.copy(), config=config,
                grasp_logp=float(grasp_lp[i]),
                prior_logp=None if prior_lp is None else float(prior_lp[i]),
                clamped_joints=clamped))
        return out

    # checkpoint plumbing ---------------------------------------------------

    def _checkpoint_extras(self):
        return {
            "fitted": getattr(self, "net_", None) is not None,
            "loss_curve": [float(v) for v in getattr(self, "loss_curve_", [])],
            "term_curves": {k: [float(v) for v in vs]
                            for k, vs in getattr(self, "term_curves_", {}).items()},
            "diverged": bool(getattr(self, "diverged_", False)),
        }

    def _restore(self, basis, extras, state):
        if basis is None or not extras.get("fitted"):
            raise ContractError("checkpoint does not contain a fitted model")
        torch.manual_seed(self.seed)
        self.basis_ = basis
        self.net_ = self._build_net()
        # buffers sized at fit time (e.g. familiarity anchors) are rebuilt
        # empty; resize them to the stored shapes before the strict load
        for name, buf in self.net_.named_buffers():
            if name in state and tuple(state[name].shape) != tuple(buf.shape):
                module = self.net_.get_submodule(name.rpartition(".")[0]) \
                    if "." in name else self.net_
                setattr(module, name.rpartition(".")[2],
                        torch.zeros_like(state[name]))
        self.net_.load_state_dict(state, strict=True)
        self.net_.eval()
        self.loss_curve_ = extras.get("loss_curve", [])
        self.term_curves_ = extras.get("term_curves", {})
        self.diverged_ = extras.get("diverged", False)


class LvmGraspSampler(_GraspSamplerBase):
    """FFH-style flow latent variable model over grasps, sklearn-flavored."""

    checkpoint_kind = "lvm"

    def __init__(self, latent_dim=16, blocks=8, hidden=64, pos_bands=4,
                 basis_size=1024, basis_radius=0.15, lr=1e-4, batch_size=64,
                 iterations=20000, beta_start=1e-7, beta_end=1e-1,
                 weight_decay=1e-4, noise_sigma=0.02, posterior_floor=0.3,
                 posterior_bound=2.0, prior_lr_scale=10.0,
                 familiarity_gamma=0.25, seed=0):
        self.latent_dim = latent_dim
        self.blocks = blocks
        self.hidden = hidden
        self.pos_bands = pos_bands
        self.basis_size = basis_size
        self.basis_radius = basis_radius
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.weight_decay = weight_decay
        self.noise_sigma = noise_sigma
        self.posterior_floor = posterior_floor
        self.posterior_bound = posterior_bound
        self.prior_lr_scale = prior_lr_scale
        self.familiarity_gamma = familiarity_gamma
        self.seed = seed

    def _build_net(self):
        return LvmNet(self.basis_size, GRASP_DIM, self.latent_dim,
                      self.blocks, self.hidden, self.pos_bands,
                      posterior_floor=self.posterior_floor,
                      posterior_bound=self.posterior_bound,
                      familiarity_gamma=self.familiarity_gamma)

    def _loss_fn(self):
        return elbo_loss

    def _param_groups(self):
        # The prior-matching term is weighted by beta <= beta_end, so the
        # Prior Flow sees gradients scaled down by up to 1e7 relative to the
        # reconstruction path. A larger learning rate on its parameters
        # compensates without touching the pinned beta schedule.
        if self.prior_lr_scale == 1.0:
            return None
        prior_ids = {id(p) for p in self.net_.prior_flow.parameters()}
        rest = [p for p in self.net_.parameters() if id(p) not in prior_ids]
        return [
            {"params": rest, "lr": self.lr},
            {"params": list(self.net_.prior_flow.parameters()),
             "lr": self.lr * self.prior_lr_scale},
        ]

    def _init_fn(self):
        def init(fb, eb, gen):
            init_lvm_actnorm(self.net_, fb, eb, gen)
        return init

    def sample(self, cloud: PointCloud, n: int = 100, seed: int = 0
               ) -> List[GraspSample]:
        """Ancestral sampling: z* from the Prior Flow, g* from the Grasp Flow.

        Each sample carries log p(g*|z*) (view-level uncertainty) and
        log p(z*|x) (object-level uncertainty).
        """
        xb = self._encode(cloud)
        gen = seeded_generator(seed)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(n, 1)
            off = self.net_.familiarity_offset(xb)
            z, prior_lp = self.net_.prior_flow.sample(
                n, e, gen,
                base_logstd_offset=None if off is None else off.repeat(n))
            g, grasp_lp = self.net_.grasp_flow.sample(n, z, gen)
        return self._make_samples(g, grasp_lp, prior_lp)

    def score_samples(self, cloud: PointCloud, grasps, seed: int = 0,
                      n_latent_draws: int = 16) -> np.ndarray:
        """log p(g|z*) for external grasps; z* is the prior-sample mean."""
        xb = self._encode(cloud)
        g = self._grasps_to_tensor(grasps)
        gen = seeded_generator(seed)
        with torch.no_grad():
            e = self.net_.embed(xb)
            off = self.net_.familiarity_offset(xb)
            z, _ = self.net_.prior_flow.sample(
                n_latent_draws, e.repeat(n_latent_draws, 1), gen,
                base_logstd_offset=None if off is None
                else off.repeat(n_latent_draws))
            z_star = z.mean(dim=0, keepdim=True)
            lp = self.net_.grasp_flow.log_prob(g, z_star.repeat(g.shape[0], 1))
        return lp.numpy()

    def ood_score(self, cloud: PointCloud, seed: int = 0,
                  n_latent_draws: int = 32) -> float:
        """Mean Prior-Flow log-density over its own draws; higher = more
        in-distribution."""
        xb = self._encode(cloud)
        gen = seeded_generator(seed)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(n_latent_draws, 1)
            off = self.net_.familiarity_offset(xb)
            _, lp = self.net_.prior_flow.sample(
                n_latent_draws, e, gen,
                base_logstd_offset=None if off is None
                else off.repeat(n_latent_draws))
        return float(lp.mean())


def init_lvm_actnorm(net: LvmNet, features: torch.Tensor, events: torch.Tensor,
                     generator=None) -> None:
    """Data-dependent actnorm init for both flows from one batch."""
    with torch.no_grad():
        e = net.embed(features)
        mu, log_delta = net.posterior(e, events)
        eps = torch.randn(mu.shape, dtype=DTYPE, generator=generator)
        z = mu + eps * torch.exp(log_delta)
        net.grasp_flow.init_actnorm(events, z)
        net.prior_flow.init_actnorm(z, e)


class CnfGraspSampler(_GraspSamplerBase):
    """Single conditional flow on grasps, context = embedded point cloud."""

    checkpoint_kind = "cnf"

    def __init__(self, latent_dim=16, blocks=8, hidden=64,
                 basis_size=1024, basis_radius=0.15, lr=1e-4, batch_size=64,
                 iterations=20000, beta_start=1e-7, beta_end=1e-1,
                 weight_decay=1e-4, noise_sigma=0.02, seed=0):
        self.latent_dim = latent_dim
        self.blocks = blocks
        self.hidden = hidden
        self.basis_size = basis_size
        self.basis_radius = basis_radius
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.weight_decay = weight_decay
        self.noise_sigma = noise_sigma
        self.seed = seed

    def _build_net(self):
        return CnfNet(self.basis_size, GRASP_DIM, self.latent_dim,
                      self.blocks, self.hidden)

    def _loss_fn(self):
        def nll(net, fb, eb, beta, gen):
            lp = net.log_prob(fb, eb)
            loss = -lp.mean()
            if not torch.isfinite(loss):
                raise NumericError("non-finite flow NLL", term="log_prob")
            return loss, {"recon": float(lp.detach().mean())}
        return nll

    def _init_fn(self):
        def init(fb, eb, gen):
            with torch.no_grad():
                self.net_.flow.init_actnorm(eb, self.net_.embed(fb))
        return init

    def sample(self, cloud: PointCloud, n: int = 100, seed: int = 0
               ) -> List[GraspSample]:
        xb = self._encode(cloud)
        gen = seeded_generator(seed)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(n, 1)
            g, lp = self.net_.flow.sample(n, e, gen)
        return self._make_samples(g, lp)

    def score_samples(self, cloud: PointCloud, grasps, seed: int = 0) -> np.ndarray:
        xb = self._encode(cloud)
        g = self._grasps_to_tensor(grasps)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(g.shape[0], 1)
            lp = self.net_.flow.log_prob(g, e)
        return lp.numpy()


class CvaeGraspSampler(_GraspSamplerBase):
    """cVAE baseline: N(0, I) prior, isotropic Gaussian decoder."""

    checkpoint_kind = "cvae"

    def __init__(self, latent_dim=16, hidden=128, pos_bands=4,
                 decoder_sigma=0.1, basis_size=1024, basis_radius=0.15,
                 lr=1e-4, batch_size=64, iterations=20000, beta_start=1e-7,
                 beta_end=1e-1, weight_decay=1e-4, noise_sigma=0.02, seed=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.pos_bands = pos_bands
        self.decoder_sigma = decoder_sigma
        self.basis_size = basis_size
        self.basis_radius = basis_radius
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.weight_decay = weight_decay
        self.noise_sigma = noise_sigma
        self.seed = seed

    def _build_net(self):
        return CvaeNet(self.basis_size, GRASP_DIM, self.latent_dim,
                       self.hidden, self.pos_bands, self.decoder_sigma)

    def _loss_fn(self):
        return cvae_loss

    def _init_fn(self):
        return None

    def sample(self, cloud: PointCloud, n: int = 100, seed: int = 0
               ) -> List[GraspSample]:
        """Decode z ~ N(0, I); log-probs are not exact for the cVAE and are
        reported as the decoder density at the decoded mean (a proxy)."""
        xb = self._encode(cloud)
        gen = seeded_generator(seed)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(n, 1)
            z = torch.randn(n, self.net_.latent_dim, dtype=DTYPE, generator=gen)
            g = self.net_.decode(z, e)
            lp = self.net_.recon_log_prob(g, g)  # constant; no exact density
        return self._make_samples(g, lp)

    def score_samples(self, cloud: PointCloud, grasps, seed: int = 0) -> np.ndarray:
        """Decoder log-density at the posterior-mean latent (ELBO-style proxy)."""
        xb = self._encode(cloud)
        g = self._grasps_to_tensor(grasps)
        with torch.no_grad():
            e = self.net_.embed(xb).repeat(g.shape[0], 1)
            mu, _ = self.net_.encode(e, g)
            lp = self.net_.recon_log_prob(g, self.net_.decode(mu, e))
        return lp.numpy()


PRESETS = {
    "lvm": (LvmGraspSampler, {}),
    "lvm-light": (LvmGraspSampler, {"blocks": 4}),
    "cnf": (CnfGraspSampler, {}),
    "cvae": (CvaeGraspSampler, {}),
}

checkpoint.register_kind("lvm", LvmGraspSampler)
checkpoint.register_kind("cnf", CnfGraspSampler)
checkpoint.register_kind("cvae", CvaeGraspSampler)
