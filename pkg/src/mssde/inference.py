"""Simulator-free amortized variational inference for the latent SDE.

Each trajectory is split into short segments. Within a segment the
variational posterior over the latent path is the marginal law of a linear
SDE, represented directly by its mean/variance curves: cubic Hermite
interpolants through encoder outputs at the observation times. The
reparametrized ELBO needs only those curves, their time derivatives, and the
feedback gain B(t) solving the Lyapunov identity, so no variational SDE
coefficients are ever materialized.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import Dataset
from .dynamics import SdeModel
from .likelihood import PoEParams, poe_loglik
from .optim import Adam, NanGradientError
from .rng import Rng
from .scales import ScaleOps

CHECKPOINT_VERSION = 1


class InferenceError(RuntimeError):
    pass


# -- time segmentation --------------------------------------------------------


@dataclass
class Segment:
    index: int
    cov: np.ndarray     # covered observation indices (anchors)
    owned: np.ndarray   # subset owned by this segment


def segment(times, m: int) -> list[Segment]:
    """Split n_t observation times into ceil(n_t/m) segments.

    The first ceil(n_t/m) - 1 segments chain: each covers m points and
    shares its first anchor with the previous segment (which owns it). The
    final segment covers whatever tail remains.
    """
    if m < 2:
        raise ValueError("segment length m must be >= 2")
    n_t = len(times)
    n_m = -(-n_t // m)
    segs = []
    for k in range(n_m - 1):
        start = k * (m - 1)
        cov = np.arange(start, start + m)
        owned = cov if k == 0 else cov[1:]
        segs.append(Segment(k, cov, owned))
    tail_start = (n_m - 1) * (m - 1) + 1 if n_m > 1 else 0
    cov = np.arange(tail_start, n_t)
    segs.append(Segment(n_m - 1, cov, cov))
    return segs


# -- variational path ---------------------------------------------------------


def hermite_matrices(anchor_times, query_times):
    """Linear maps from anchor values to Catmull-Rom cubic Hermite values
    and time derivatives at the query times. Returns (W_val, W_der)."""
    tau = np.asarray(anchor_times, dtype=float)
    tq = np.atleast_1d(np.asarray(query_times, dtype=float))
    a, nq = len(tau), len(tq)
    wv = np.zeros((nq, a))
    wd = np.zeros((nq, a))
    if a == 1:
        wv[:, 0] = 1.0
        return wv, wd
    # anchor slopes as a linear map D: d = D @ y; centered differences inside,
    # second-order three-point one-sided stencils at the ends
    dmat = np.zeros((a, a))
    if a == 2:
        w = 1.0 / (tau[1] - tau[0])
        dmat[0, 0] = dmat[1, 0] = -w
        dmat[0, 1] = dmat[1, 1] = w
    else:
        h1, h2 = tau[1] - tau[0], tau[2] - tau[1]
        dmat[0, 0] = -(2 * h1 + h2) / (h1 * (h1 + h2))
        dmat[0, 1] = (h1 + h2) / (h1 * h2)
        dmat[0, 2] = -h1 / (h2 * (h1 + h2))
        g1, g2 = tau[-1] - tau[-2], tau[-2] - tau[-3]
        dmat[-1, -1] = (2 * g1 + g2) / (g1 * (g1 + g2))
        dmat[-1, -2] = -(g1 + g2) / (g1 * g2)
        dmat[-1, -3] = g1 / (g2 * (g1 + g2))
        for i in range(1, a - 1):
            w = 1.0 / (tau[i + 1] - tau[i - 1])
            dmat[i, i - 1], dmat[i, i + 1] = -w, w
    iv = np.clip(np.searchsorted(tau, tq, side="right") - 1, 0, a - 2)
    h = tau[iv + 1] - tau[iv]
    u = (tq - tau[iv]) / h
    h00 = 2 * u**3 - 3 * u**2 + 1
    h10 = u**3 - 2 * u**2 + u
    h01 = -2 * u**3 + 3 * u**2
    h11 = u**3 - u**2
    g00 = (6 * u**2 - 6 * u) / h
    g10 = 3 * u**2 - 4 * u + 1
    g01 = (-6 * u**2 + 6 * u) / h
    g11 = 3 * u**2 - 2 * u
    rows = np.arange(nq)
    wv[rows, iv] += h00
    wv[rows, iv + 1] += h01
    wd[rows, iv] += g00
    wd[rows, iv + 1] += g01
    wv += (h10 * h)[:, None] * dmat[iv] + (h11 * h)[:, None] * dmat[iv + 1]
    wd += g10[:, None] * dmat[iv] + g11[:, None] * dmat[iv + 1]
    return wv, wd


class VariationalPath:
    """mu_phi(t), Sigma_phi(t) (diagonal) and their derivatives on a segment.

    Means are interpolated directly; variances through log space so
    positivity holds for every t.
    """

    def __init__(self, times, means, logvars):
        self.times = np.asarray(times, dtype=float)
        self.means = ad._wrap(means)        # [A, n_z]
        self.logvars = ad._wrap(logvars)    # [A, n_z]

    def at(self, t):
        wv, wd = hermite_matrices(self.times, t)
        wv, wd = Tensor(wv), Tensor(wd)
        mu = ad.matmul(wv, self.means)
        mu_dot = ad.matmul(wd, self.means)
        lv = ad.matmul(wv, self.logvars)
        sig = ad.exp(lv)
        sig_dot = sig * ad.matmul(wd, self.logvars)
        return mu, mu_dot, sig, sig_dot


# -- feedback gain ------------------------------------------------------------


def b_diagonal(sig, sig_dot, ell):
    """B(t) for diagonal Sigma and L: B_ii = (ell_i^2 - dSigma_ii/dt) / (2 Sigma_ii)."""
    sig = ad._wrap(sig)
    if np.any(sig.data <= 0):
        raise InferenceError("variational variance must be strictly positive")
    return (ad._wrap(ell) ** 2 - ad._wrap(sig_dot)) / (2.0 * sig)


def b_dense(sigma, sigma_dot, ell_mat):
    """Dense-path gain: vec(B) = (Sigma (+) Sigma)^{-1} vec(L L^T - dSigma/dt),
    with (+) the Kronecker sum and column-stacking vec."""
    s = np.asarray(sigma, dtype=float)
    n = s.shape[0]
    if np.any(np.linalg.eigvalsh(s) <= 0):
        raise InferenceError("Sigma must be positive definite")
    ksum = np.kron(s, np.eye(n)) + np.kron(np.eye(n), s)
    rhs = ell_mat @ ell_mat.T - np.asarray(sigma_dot, dtype=float)
    return np.linalg.solve(ksum, rhs.flatten(order="F")).reshape(n, n, order="F")


def drift_residual(z, t, path: VariationalPath, model) -> Tensor:
    """r(z, t) = mu_dot - B(t)(z - mu) - gamma_theta(z, t), rows batched over t."""
    mu, mu_dot, sig, sig_dot = path.at(t)
    b = b_diagonal(sig, sig_dot, model.dispersion.ell())
    return mu_dot - b * (ad._wrap(z) - mu) - model.drift(z, t)


# -- ELBO ----------------------------------------------------------------------


@dataclass
class SegmentData:
    """Observations of one segment: anchor times, states, ownership mask."""

    times: np.ndarray       # [A]
    y: np.ndarray           # [A, n_y]
    owned: np.ndarray       # [A] bool


def make_segment_data(traj, m: int) -> list[SegmentData]:
    out = []
    for seg in segment(traj.times, m):
        mask = np.isin(seg.cov, seg.owned)
        out.append(SegmentData(traj.times[seg.cov], traj.states[seg.cov], mask))
    return out


class ElboTerms:
    def __init__(self, loglik: Tensor, integral: Tensor):
        self.loglik = loglik
        self.integral = integral
        self.total = loglik - 0.5 * integral


def elbo(segments: list[SegmentData], model: SdeModel, poe: PoEParams,
         rng: Rng, n_quad: int = 64) -> ElboTerms:
    """Reparametrized segment ELBO with a single Monte Carlo draw per node."""
    ops = model.scales
    counts = [len(s.times) for s in segments]
    y_all = np.concatenate([s.y for s in segments], axis=0)
    enc = ops.encode(y_all)
    sig_z = enc.var                                    # [n_z]
    log_sig_z = ad.log(sig_z)

    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    ell = model.dispersion.ell()
    inv_ll = 1.0 / (ell * ell)

    # observation term: one reparametrized draw at every owned observation
    owned_rows = np.concatenate(
        [np.flatnonzero(s.owned) + off for s, off in zip(segments, np.cumsum([0] + counts[:-1]))]
    )
    mu_obs = enc.mean[owned_rows]
    xi = rng.normal((len(owned_rows), ops.n_z))
    z_obs = mu_obs + ad.sqrt(sig_z) * xi
    zeta_obs, eta_obs = z_obs[:, : ops.n_zeta], z_obs[:, ops.n_zeta :]
    loglik = poe_loglik(y_all[owned_rows], zeta_obs, eta_obs, poe, ops).sum()

    # quadrature term, assembled per segment then evaluated in one drift call
    mus, mu_dots, sigs, sig_dots, zs, ts, wrow, seg_of = [], [], [], [], [], [], [], []
    off = 0
    for k, s in enumerate(segments):
        a = len(s.times)
        means_k = enc.mean[off : off + a]
        off += a
        if a < 2:
            continue
        lv = log_sig_z.reshape((1, ops.n_z)) * np.ones((a, 1))
        path = VariationalPath(s.times, means_k, lv)
        t0, t1 = s.times[0], s.times[-1]
        half = 0.5 * (t1 - t0)
        tq = 0.5 * (t0 + t1) + half * nodes
        mu, mu_dot, sig, sig_dot = path.at(tq)
        z = mu + ad.sqrt(sig) * rng.normal((n_quad, ops.n_z))
        mus.append(mu)
        mu_dots.append(mu_dot)
        sigs.append(sig)
        sig_dots.append(sig_dot)
        zs.append(z)
        ts.append(tq)
        wrow.append(weights * half)
        seg_of.append(np.full(n_quad, k))

    if zs:
        z_cat = ad.concat(zs, axis=0)
        gamma = model.drift(z_cat, np.concatenate(ts))
        mu_cat = ad.concat(mus, axis=0)
        mud_cat = ad.concat(mu_dots, axis=0)
        b = b_diagonal(ad.concat(sigs, axis=0), ad.concat(sig_dots, axis=0), ell)
        r = mud_cat - b * (z_cat - mu_cat) - gamma
        norms = (r * r * inv_ll).sum(axis=1)                  # [sum nq]
        integral = (norms * np.concatenate(wrow)).sum()
    else:
        integral = Tensor(np.asarray(0.0))

    terms = ElboTerms(loglik, integral)
    if not np.isfinite(terms.total.data):
        seg_ids = np.concatenate(seg_of) if seg_of else np.array([])
        bad = "unknown"
        if zs:
            with ad.no_grad():
                nf = ~np.isfinite(norms.data)
                if nf.any():
                    bad = int(seg_ids[np.flatnonzero(nf)[0]])
        raise InferenceError(f"non-finite ELBO (segment {bad})")
    return terms


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: dict, meta: dict):
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays["meta"] = np.frombuffer(
        json.dumps({"version": CHECKPOINT_VERSION, **meta}).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path):
    try:
        with np.load(path) as f:
            meta = json.loads(bytes(f["meta"]).decode())
            params = {k[len("param/") :]: f[k] for k in f.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise InferenceError(f"unreadable checkpoint {path}: {e}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise InferenceError(f"unsupported checkpoint version {meta.get('version')}")
    return params, meta


# -- training ------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "n_zeta": 20,
    "n_eta": 2,
    "m": 10,
    "n_quad": 64,
    "steps": 2000,
    "batch": 64,
    "lr": 1e-3,
    "warm_lr": 1e-4,
    "lr_decay_steps": 2000,
    "val_every": 100,
    "q": 2,
    "macro_hidden": (64, 64),
    "micro_hidden": (64, 64),
    "kernel_factor": 4,
    "seed": 0,
}


def build_model(grid, cfg, n_eta, rng):
    d = grid.dim
    n_c_axis = round((cfg["n_zeta"] / grid.n_fields) ** (1.0 / d))
    s = grid.points[0] // n_c_axis
    ops = ScaleOps(grid, s, n_eta, rng, kernel_factor=cfg["kernel_factor"])
    if ops.n_zeta != cfg["n_zeta"]:
        raise InferenceError(
            f"n_zeta={cfg['n_zeta']} incompatible with grid {grid.points} (got {ops.n_zeta})"
        )
    model = SdeModel(
        ops, rng, q=cfg["q"],
        macro_hidden=tuple(cfg["macro_hidden"]), micro_hidden=tuple(cfg["micro_hidden"]),
        t_scale=cfg.get("t_scale", 1.0),
    )
    return model


def _all_params(model, poe):
    params = model.named_parameters()
    params.update(poe.named_parameters("poe."))
    return params


def _quiet_new_drift(model, state):
    """Zero the drift couplings that a curriculum stage adds, so the grown
    model starts from the previous stage's exact dynamics.

    The fresh encoder/decoder weights are left alone (zeroing both sides of
    the codec would kill the gradient for the new dimension); only the macro
    and micro drift networks get silent entry: grown hyperslabs are zeroed,
    and a brand-new micro drift has its output layer zeroed.
    """
    params = model.named_parameters()
    micro_fresh = not any(k.startswith("micro.") for k in state)
    last_lin = max((k for k in params if k.startswith("micro.") and ".lin" in k),
                   default=None, key=lambda k: int(k.split(".lin")[1].split(".")[0]))
    for name, p in params.items():
        if not (name.startswith("macro.") or name.startswith("micro.")):
            continue
        old = state.get(name)
        if old is not None and old.shape != p.data.shape:
            p.data[:] = 0.0
            p.data[tuple(slice(0, s) for s in old.shape)] = old
        elif old is None and micro_fresh and last_lin is not None \
                and name.rsplit(".", 1)[0] == last_lin.rsplit(".", 1)[0]:
            p.data[:] = 0.0


def train(dataset: Dataset, config: dict, log=None):
    """Hierarchical curriculum: implicit-scale stage, then one warm-started
    stage per added microscale dimension. Returns (params, meta) of the best
    validation checkpoint of the final stage."""
    cfg = {**TRAIN_DEFAULTS, **config}
    train_traj = dataset.split("train")
    val_traj = dataset.split("val")
    if not train_traj:
        raise InferenceError("dataset has no training trajectories")
    cfg.setdefault("t_scale", max(t.times[-1] for t in train_traj))

    train_segs = [sd for tr in train_traj for sd in make_segment_data(tr, cfg["m"])]
    val_segs = [sd for tr in val_traj for sd in make_segment_data(tr, cfg["m"])]
    poe_init = 1.0 / dataset.sigma**2 if dataset.sigma > 0 else 1e2

    rng = Rng(cfg["seed"])
    state = cfg.pop("warm_start", None)
    meta = {}
    history = []
    for n_eta in range(cfg.pop("start_eta", 0), cfg["n_eta"] + 1):
        model = build_model(dataset.grid, cfg, n_eta, rng.substream(n_eta))
        poe = PoEParams(dataset.grid.n_y, init=poe_init)
        if state is not None:
            model.load_values(state, grow=True)
            poe.load_values({k[4:]: v for k, v in state.items() if k.startswith("poe.")})
            _quiet_new_drift(model, state)
        lr = cfg["lr"] if n_eta == 0 else cfg["warm_lr"]
        opt = Adam(_all_params(model, poe), lr=lr, decay_interval=cfg["lr_decay_steps"])
        batch_rng = rng.substream(100 + n_eta)
        noise_rng = rng.substream(200 + n_eta)
        best_val, best_state = -np.inf, None
        stage_hist = []
        for step in range(cfg["steps"]):
            idx = batch_rng.integers(0, len(train_segs), min(cfg["batch"], len(train_segs)))
            batch = [train_segs[i] for i in idx]
            try:
                terms = elbo(batch, model, poe, noise_rng, n_quad=cfg["n_quad"])
                loss = -terms.total * (1.0 / len(batch))
                for p in _all_params(model, poe).values():
                    p.zero_grad()
                loss.backward()
                opt.step()
            except (InferenceError, NanGradientError) as e:
                if log:
                    log(f"stage {n_eta}: aborted at step {step}: {e}")
                break
            if (step + 1) % cfg["val_every"] == 0 or step == cfg["steps"] - 1:
                val = _validation_elbo(val_segs or train_segs, model, poe, cfg)
                stage_hist.append({
                    "step": step + 1,
                    "train_elbo": float(terms.total.data),
                    "loglik": float(terms.loglik.data),
                    "kl": 0.5 * float(terms.integral.data),
                    "val_elbo": val,
                    "lr": opt.lr,
                })
                if log:
                    log(f"stage {n_eta} step {step + 1}: train {float(terms.total.data):.3f} val {val:.3f}")
                if val > best_val:
                    best_val = val
                    best_state = {k: v.data.copy() for k, v in _all_params(model, poe).items()}
        if best_state is None:
            best_state = {k: v.data.copy() for k, v in _all_params(model, poe).items()}
        state = best_state
        history.append({"n_eta": n_eta, "best_val_elbo": best_val, "history": stage_hist})

    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
        "stages": history,
        "n_eta": cfg["n_eta"],
    }
    return state, meta


def _validation_elbo(segs, model, poe, cfg):
    with ad.no_grad():
        total = 0.0
        for i in range(0, len(segs), cfg["batch"]):
            t = elbo(segs[i : i + cfg["batch"]], model, poe, Rng(0), n_quad=cfg["n_quad"])
            total += float(t.total.data)
    return total


def restore(dataset_grid, params, meta, n_eta=None):
    """Rebuild a model/poe pair from checkpoint contents."""
    cfg = {**TRAIN_DEFAULTS, **meta["config"]}
    if n_eta is None:
        n_eta = meta["n_eta"]
    model = build_model(dataset_grid, cfg, n_eta, Rng(cfg["seed"]))
    poe = PoEParams(dataset_grid.n_y, init=1.0)
    model.load_values(params)
    poe.load_values({k[4:]: v for k, v in params.items() if k.startswith("poe.")})
    return model, poe, cfg
