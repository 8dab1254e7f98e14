"""Predictive-learning perception with spatial attention and online updates.

Per frame the pipeline: encodes the image into a C x 14 x 14 feature grid,
scores the prediction made for this frame against what actually arrived,
turns the per-cell errors into a normalized spatial error map, updates all
parameters by one gradient step, and finally predicts the next grid through
a 3-layer gated recurrent stack fed by an attention-weighted readout of the
current grid.

The cell with the largest prediction error is taken as the location of the
dominant action. Cross-step recurrence is truncated: hidden states and
feature grids cross step boundaries as values, while the prediction itself
stays differentiable into the step where its error is realized (the tape is
kept open until then).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParameterSet, Tensor
from .geometry import FieldOfView, grid_cell_to_bearing, wrap_angle


@dataclass(frozen=True)
class PerceptionConfig:
    image_size: int = 112
    grid: int = 14
    channels: tuple[int, int] = (8, 16)
    hidden_dim: int = 64
    attn_dim: int = 32
    lr: float = 1e-4
    clip: float = 5.0
    adaptive_lr: bool = True
    disable_motion_gate: bool = False   # drop the sigmoid motion factor
    disable_attn_loss: bool = False     # train on the prediction loss alone
    frame_diff_residual: bool = False   # score frame-to-frame change instead of the prediction residual
    frozen: bool = False                # compute losses but never update
    fov: FieldOfView = field(default_factory=lambda: FieldOfView.from_degrees(90.0))
    seed: int = 0


@dataclass(frozen=True)
class FeatureGrid:
    tensor: np.ndarray  # (C, G, G)
    step: int


@dataclass(frozen=True)
class ErrorMap:
    raw: np.ndarray         # (G, G), nonnegative per-cell prediction error
    normalized: np.ndarray  # softmax of raw; a probability map


@dataclass
class PredictorState:
    lstm: list                      # [(h, c), ...] per layer, plain arrays
    prev_grid: np.ndarray | None    # feature grid of the previous frame
    prev_err: ErrorMap | None
    pending: tuple | None           # (graph, f_hat tensor, alpha tensor)
    step: int = 0


@dataclass(frozen=True)
class PerceptOutput:
    loss_global: float
    loss_attn: float
    error_map: ErrorMap
    attention: np.ndarray | None    # alpha computed while predicting forward
    action_cell: tuple[int, int]
    action_bearing: tuple[float, float]


def softmax_map(raw: np.ndarray) -> np.ndarray:
    z = raw - raw.max()
    e = np.exp(z)
    return e / e.sum()


def argmax_cell(raw: np.ndarray) -> tuple[int, int]:
    """Argmax with deterministic ties: a flat map picks the center cell,
    otherwise the first maximum in row-major order wins."""
    if np.all(raw == raw.flat[0]):
        return raw.shape[0] // 2, raw.shape[1] // 2
    i, j = np.unravel_index(int(np.argmax(raw)), raw.shape)
    return int(i), int(j)


def compute_energy(loss_global: float, q: tuple[float, float],
                   c: tuple[float, float]) -> float:
    """Diagnostic energy: perception loss plus squared angular divergence
    between the action location and the camera center. Logged, never
    optimized directly."""
    dp = wrap_angle(q[0] - c[0])
    dt = wrap_angle(q[1] - c[1])
    return float(loss_global) + dp * dp + dt * dt


def upsample_saliency(raw: np.ndarray, image_size: int) -> np.ndarray:
    """Nearest-neighbor upsample of a grid map to frame resolution."""
    f = image_size // raw.shape[0]
    return np.repeat(np.repeat(raw, f, axis=0), f, axis=1)


class PerceptionModel:
    """Owns the parameters, optimizer and step logic for one learner."""

    def __init__(self, cfg: PerceptionConfig = PerceptionConfig()):
        if cfg.image_size % (4 * cfg.grid) != 0:
            raise ValueError("image_size must be divisible by 4*grid "
                             f"(got {cfg.image_size} vs grid {cfg.grid})")
        self.cfg = cfg
        self.params = _init_params(cfg)
        self.opt = ad.OnlineSgd(lr=cfg.lr, clip=cfg.clip, adaptive=cfg.adaptive_lr)

    # -- building blocks ----------------------------------------------------

    def encode(self, image: Tensor) -> Tensor:
        """Two stride-2 sigmoid conv layers, then average-pool to the grid."""
        p = self.params
        h1 = ad.sigmoid(ad.conv2d(image, p["conv1_k"], p["conv1_b"], stride=2))
        h2 = ad.sigmoid(ad.conv2d(h1, p["conv2_k"], p["conv2_b"], stride=2))
        pool = h2.shape[1] // self.cfg.grid
        return ad.avg_pool2d(h2, pool)

    def predict(self, f_t: Tensor, lstm_states: list):
        """Attention-weighted readout of f_t drives the recurrent stack; a
        linear head emits a per-cell channel residual on top of f_t."""
        p = self.params
        c, g, _ = f_t.shape
        f_flat = ad.reshape(f_t, (c, g * g))
        h_top = Tensor(lstm_states[-1][0])
        scores = ad.matmul(p["attn_v"], ad.tanh(ad.add_colvec(
            ad.matmul(p["attn_w_feat"], f_flat),
            ad.matmul(p["attn_w_hid"], h_top))))
        alpha = ad.softmax2d(ad.reshape(scores, (g, g)))
        context = ad.matmul(f_flat, ad.reshape(alpha, (g * g,)))

        x = context
        new_states = []
        for layer in range(3):
            h, cell = self._lstm_cell(layer, x, lstm_states[layer])
            new_states.append((h.data.copy(), cell.data.copy()))
            x = h
        resid = ad.add(ad.matmul(p["head_w"], x), p["head_b"])
        f_hat = ad.add(f_t, ad.reshape(resid, (c, g, g)))
        return f_hat, alpha, new_states

    def _lstm_cell(self, layer: int, x: Tensor, state):
        p = self.params
        hd = self.cfg.hidden_dim
        h_prev, c_prev = Tensor(state[0]), Tensor(state[1])
        z = ad.add(ad.add(ad.matmul(p[f"lstm{layer}_wx"], x),
                          ad.matmul(p[f"lstm{layer}_wh"], h_prev)),
                   p[f"lstm{layer}_b"])
        i = ad.sigmoid(ad.slice1d(z, 0, hd))
        f = ad.sigmoid(ad.slice1d(z, hd, 2 * hd))
        gg = ad.tanh(ad.slice1d(z, 2 * hd, 3 * hd))
        o = ad.sigmoid(ad.slice1d(z, 3 * hd, 4 * hd))
        cell = ad.add(ad.mul(f, c_prev), ad.mul(i, gg))
        h = ad.mul(o, ad.tanh(cell))
        return h, cell

    def loss_global(self, f_hat: Tensor, f_next: Tensor, f_prev: Tensor):
        """Per-cell error = channel L2 of the prediction residual, scaled by a
        sigmoid of the observed frame-to-frame feature change (the motion
        gate). Returns (scalar loss, error map)."""
        if f_hat.shape != f_next.shape or f_next.shape != f_prev.shape:
            raise ValueError(f"feature grid shapes differ: {f_hat.shape} "
                             f"{f_next.shape} {f_prev.shape}")
        if self.cfg.frame_diff_residual:
            r = ad.sub(f_next, f_prev)
        else:
            r = ad.sub(f_hat, f_next)
        n = ad.channel_l2(r)
        if self.cfg.disable_motion_gate:
            e = n
        else:
            gate = ad.sigmoid(ad.channel_mean(ad.sub(f_next, f_prev)))
            e = ad.mul(n, gate)
        loss = ad.tmean(e)
        err = ErrorMap(raw=e.data.copy(), normalized=softmax_map(e.data))
        return loss, err

    def loss_attn(self, alpha: Tensor, prev_err: ErrorMap, f_t) -> Tensor:
        """||alpha - prev|| + ||alpha (.) f - prev (.) f||, maps broadcast over
        channels; prev is the previous step's normalized error map."""
        if not isinstance(f_t, Tensor):
            f_t = Tensor(np.asarray(f_t))
        target = Tensor(prev_err.normalized)
        t1 = ad.l2norm(ad.sub(alpha, target))
        c = f_t.shape[0]
        weighted = ad.mul(ad.expand_channels(alpha, c), f_t)
        target_weighted = ad.mul(ad.expand_channels(target, c), f_t)
        t2 = ad.l2norm(ad.sub(weighted, target_weighted))
        return ad.add(t1, t2)

    # -- per-step driver ------------------------------------------------------

    def initial_state(self) -> PredictorState:
        hd = self.cfg.hidden_dim
        zeros = lambda: (np.zeros(hd), np.zeros(hd))
        return PredictorState(lstm=[zeros(), zeros(), zeros()],
                              prev_grid=None, prev_err=None, pending=None, step=0)

    def perceive_step(self, frame, prev: PredictorState):
        """One full observe -> learn -> localize -> predict cycle.

        The first call has nothing to score, so its losses are zero and the
        error map is uniform; every later call realizes the pending
        prediction's loss, applies one update, then predicts forward.
        """
        g_sz = self.cfg.grid
        image = Tensor(np.asarray(frame.image, dtype=np.float64))

        if prev.pending is None:
            f_t = self.encode(image)
            uniform = np.full((g_sz, g_sz), 1.0 / (g_sz * g_sz))
            err = ErrorMap(raw=np.zeros((g_sz, g_sz)), normalized=uniform)
            loss_g_val, loss_a_val, alpha_val = 0.0, 0.0, None
        else:
            graph, f_hat, alpha_pending = prev.pending
            with graph:
                f_t = self.encode(image)
                loss_g, err = self.loss_global(f_hat, f_t, Tensor(prev.prev_grid))
                if self.cfg.disable_attn_loss:
                    total, loss_a_val = loss_g, 0.0
                else:
                    loss_a = self.loss_attn(alpha_pending, prev.prev_err, prev.prev_grid)
                    total = ad.add(loss_g, loss_a)
                    loss_a_val = loss_a.item()
            loss_g_val = loss_g.item()
            if not self.cfg.frozen:
                ad.backward(graph, total, self.params)
                self.opt.step(self.params, total.item())
            alpha_val = alpha_pending.data.copy()

        cell = argmax_cell(err.raw)
        bearing = grid_cell_to_bearing(cell, (g_sz, g_sz), self.cfg.fov)

        graph2 = Graph()
        with graph2:
            f_hat_next, alpha, new_lstm = self.predict(Tensor(f_t.data), prev.lstm)
        state = PredictorState(lstm=new_lstm, prev_grid=f_t.data.copy(),
                               prev_err=err, pending=(graph2, f_hat_next, alpha),
                               step=prev.step + 1)
        out = PerceptOutput(loss_global=loss_g_val, loss_attn=loss_a_val,
                            error_map=err, attention=alpha_val,
                            action_cell=cell, action_bearing=bearing)
        return out, state

    # -- persistence ----------------------------------------------------------

    def save(self, path: str) -> None:
        ad.save_parameters(self.params, path)

    def load(self, path: str) -> None:
        ad.load_parameters(self.params, path)


def _init_params(cfg: PerceptionConfig) -> ParameterSet:
    rng = np.random.default_rng(cfg.seed)
    p = ParameterSet()
    c1, c2 = cfg.channels
    hd, at, g = cfg.hidden_dim, cfg.attn_dim, cfg.grid

    p.add("conv1_k", rng.normal(0.0, 0.3, (c1, 1, 3, 3)))
    p.add("conv1_b", np.zeros(c1))
    p.add("conv2_k", rng.normal(0.0, 0.15, (c2, c1, 3, 3)))
    p.add("conv2_b", np.zeros(c2))

    p.add("attn_w_feat", rng.normal(0.0, 0.3, (at, c2)))
    p.add("attn_w_hid", rng.normal(0.0, 0.3, (at, hd)))
    p.add("attn_v", rng.normal(0.0, 0.3, at))

    sizes = [c2, hd, hd]
    for layer in range(3):
        fan = sizes[layer]
        p.add(f"lstm{layer}_wx", rng.normal(0.0, 1.0 / math.sqrt(fan), (4 * hd, fan)))
        p.add(f"lstm{layer}_wh", rng.normal(0.0, 1.0 / math.sqrt(hd), (4 * hd, hd)))
        b = np.zeros(4 * hd)
        b[hd:2 * hd] = 1.0  # forget-gate bias
        p.add(f"lstm{layer}_b", b)

    p.add("head_w", rng.normal(0.0, 0.02, (c2 * g * g, hd)))
    p.add("head_b", np.zeros(c2 * g * g))
    return p


def full_chain_loss(model: PerceptionModel, frame_a: np.ndarray,
                    frame_b: np.ndarray, prev_err: ErrorMap):
    """Scalar loss over the untruncated chain encode(A) -> predict -> encode(B)
    -> both losses, for gradient verification."""

    def f(params: ParameterSet) -> Tensor:
        fa = model.encode(Tensor(frame_a))
        zeros = model.initial_state().lstm
        f_hat, alpha, _ = model.predict(fa, zeros)
        fb = model.encode(Tensor(frame_b))
        loss_g, _ = model.loss_global(f_hat, fb, fa)
        loss_a = model.loss_attn(alpha, prev_err, fa)
        return ad.add(loss_g, loss_a)

    return f
