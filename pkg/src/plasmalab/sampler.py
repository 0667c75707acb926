"""Metropolis sampling of the Gibbs measure, with burn-in step-size
adaptation, conditioned-disk chains, convergence diagnostics, and
checkpointing.

Each chain owns its state and RNG stream; chains never share mutable
state, so multi-chain runs are embarrassingly parallel.  Proposals are
isotropic Gaussian single-particle displacements (wrapped on the torus),
accepted with probability min(1, exp(-beta * dH)); the proposal scale is
adapted toward a target acceptance rate during burn-in only, preserving
detailed balance during measurement.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .geometry import Domain, PointConfig, wrap
from .hamiltonian import (EnergyModel, InteractionSpec, _metropolis_sweep,
                          total_energy)
from .observables import ObservableSeries

__all__ = [
    "SamplerConfig",
    "ChainState",
    "metropolis_sweep",
    "run_chain",
    "run_parallel_chains",
    "run_conditioned_chain",
    "diagnostics",
    "save_checkpoint",
    "load_checkpoint",
    "sample_poisson_torus",
    "model_hash",
]

_ENERGY_REFRESH_SWEEPS = 10_000


@dataclass(frozen=True)
class SamplerConfig:
    sweeps: int = 2000
    burn_in: int = 500
    thinning: int = 1
    target_acceptance: float = 0.4
    adapt_window: int = 50
    seed: int = 0
    n_chains: int = 1
    sigma0: Optional[float] = None   # default: N^(-1/2) at the support scale

    def __post_init__(self):
        if self.burn_in >= self.sweeps + self.burn_in and self.sweeps <= 0:
            raise ValueError("sweeps must be positive")
        if self.thinning < 1:
            raise ValueError("thinning >= 1")


@dataclass
class ChainState:
    cfg: PointConfig
    energy: float
    rng: np.random.Generator
    sigma: float
    sweep_count: int = 0
    accepted: int = 0
    proposed: int = 0

    def acceptance_rate(self) -> float:
        return self.accepted / max(self.proposed, 1)


def model_hash(model: EnergyModel) -> str:
    return hashlib.sha256(
        json.dumps(model.descriptor(), sort_keys=True).encode()).hexdigest()[:16]


def _default_sigma(model: EnergyModel) -> float:
    if model.interaction.kind == "torus_yukawa":
        scale = model.interaction.torus_side
    else:
        scale = 1.0
    return 0.7 * scale / math.sqrt(model.n)


def init_state(model: EnergyModel, seed_seq, init="uniform", measure=None,
               points: Optional[np.ndarray] = None,
               sigma: Optional[float] = None) -> ChainState:
    """Fresh chain state.  init: "uniform" | "stratified" (needs measure) |
    explicit points array."""
    rng = np.random.default_rng(seed_seq)
    domain = model.domain
    if points is not None:
        pts = np.asarray(points, dtype=float)
    elif init == "stratified" and measure is not None:
        pts = measure.stratified_sample(model.n, rng)
    elif domain.is_torus:
        b = domain.side
        pts = rng.uniform(-b / 2, b / 2, size=(model.n, 2))
    else:
        pts = rng.uniform(-1.0, 1.0, size=(model.n, 2))
    cfg = PointConfig(domain, pts)
    return ChainState(cfg=cfg, energy=total_energy(cfg, model), rng=rng,
                      sigma=sigma or _default_sigma(model))


def metropolis_sweep(state: ChainState, model: EnergyModel) -> ChainState:
    """One sweep: N single-particle proposals, energy cache updated by the
    accepted increments."""
    n = model.n
    normals = state.rng.standard_normal((n, 2))
    uniforms = state.rng.random(n)
    if model.interaction.kind == "coulomb_angle" or not model.prepared().supported:
        acc, de = _python_sweep(state, model, normals, uniforms)
    else:
        p = model.prepared()
        acc, de = _metropolis_sweep(
            state.cfg.points, p.kind, p.ell, p.side, p.offsets, p.table,
            p.table_h, p.pot_kind, p.coeffs, p.exterior, p.cond, float(model.n),
            model.beta, state.sigma, p.is_torus, normals, uniforms)
    state.energy += de
    state.accepted += acc
    state.proposed += n
    state.sweep_count += 1
    if state.sweep_count % _ENERGY_REFRESH_SWEEPS == 0:
        state.energy = total_energy(state.cfg, model)
    return state


def _python_sweep(state, model, normals, uniforms):
    from .hamiltonian import delta_energy
    pos = state.cfg.points
    acc = 0
    de_tot = 0.0
    for j in range(model.n):
        new = wrap(pos[j] + state.sigma * normals[j], state.cfg.domain)
        try:
            de = delta_energy(state.cfg, model, j, new)
        except ValueError:
            continue
        if de <= 0 or (np.isfinite(de) and uniforms[j] < math.exp(-model.beta * de)):
            pos[j] = new
            acc += 1
            de_tot += de
    return acc, de_tot


def run_chain(model: EnergyModel, cfg: SamplerConfig,
              observables: Dict[str, Callable], init="uniform", measure=None,
              points: Optional[np.ndarray] = None, chain_index: int = 0,
              keep_state: bool = False):
    """Run one chain; record every thinned post-burn-in sweep.

    Observables are callables f(points, energy) -> float.  Adaptation of
    the proposal scale stops at the end of burn-in.  Returns a dict of
    ObservableSeries (plus the final ChainState under "_state" when
    keep_state is set).
    """
    seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(chain_index,))
    state = init_state(model, seq, init=init, measure=measure, points=points,
                       sigma=cfg.sigma0)
    window_acc = 0
    window_prop = 0
    for sweep in range(cfg.burn_in):
        a0 = state.accepted
        metropolis_sweep(state, model)
        window_acc += state.accepted - a0
        window_prop += model.n
        if (sweep + 1) % cfg.adapt_window == 0:
            rate = window_acc / window_prop
            state.sigma *= math.exp(0.8 * (rate - cfg.target_acceptance))
            window_acc = window_prop = 0
    state.energy = total_energy(state.cfg, model)

    n_records = cfg.sweeps // cfg.thinning
    values = {name: np.empty(n_records) for name in observables}
    sweeps_at = np.empty(n_records, dtype=np.int64)
    rec = 0
    for sweep in range(cfg.sweeps):
        metropolis_sweep(state, model)
        if (sweep + 1) % cfg.thinning == 0 and rec < n_records:
            for name, f in observables.items():
                values[name][rec] = f(state.cfg.points, state.energy)
            sweeps_at[rec] = state.sweep_count
            rec += 1

    out = {name: ObservableSeries(name=name, values=vals[:rec],
                                  thinning=cfg.thinning,
                                  meta={"seed": cfg.seed, "chain": chain_index,
                                        "burn_in": cfg.burn_in,
                                        "sigma": state.sigma,
                                        "acceptance": state.acceptance_rate(),
                                        "model": model_hash(model)})
           for name, vals in values.items()}
    if keep_state:
        out["_state"] = state
    return out


def _chain_job(args):
    model, cfg, observables, init, measure, chain_index = args
    return run_chain(model, cfg, observables, init=init, measure=measure,
                     chain_index=chain_index)


def run_parallel_chains(model: EnergyModel, cfg: SamplerConfig,
                        observables: Dict[str, Callable], init="uniform",
                        measure=None, n_jobs: int = 1):
    """Independent chains (seed, chain-index) streams; merged per-chain
    series keyed by observable name."""
    jobs = [(model, cfg, observables, init, measure, i)
            for i in range(cfg.n_chains)]
    if n_jobs > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, cfg.n_chains)) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    merged: Dict[str, list] = {name: [] for name in observables}
    for res in results:
        for name in observables:
            merged[name].append(res[name])
    return merged


def run_conditioned_chain(model: EnergyModel, disk_center, disk_radius: float,
                          exterior_snapshot: np.ndarray, cfg: SamplerConfig,
                          observables: Dict[str, Callable],
                          interior_init: Optional[np.ndarray] = None,
                          chain_index: int = 0):
    """Resample the particles inside a disk with the exterior frozen.

    The interior gas is an M-particle gas in the conditional potential
    (which is +inf outside the disk, so boundary-crossing proposals are
    rejected).  Only Coulomb models are meaningful here.
    """
    from .equilibrium import conditional_potential
    exterior = np.atleast_2d(np.asarray(exterior_snapshot, dtype=float))
    W = conditional_potential(model.potential, exterior, disk_center,
                              disk_radius, model.n)
    M = W.m_interior
    # the conditional Hamiltonian is M sum_j W = N sum_j (V - V_o) plus
    # the pair sum over interior particles: an M-particle gas in W
    cond_model = EnergyModel(InteractionSpec("coulomb"), W, beta=model.beta, n=M)
    if interior_init is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                           spawn_key=(chain_index, 7)))
        th = rng.uniform(0, 2 * math.pi, M)
        rr = disk_radius * 0.9 * np.sqrt(rng.uniform(0, 1, M))
        interior_init = np.column_stack([disk_center[0] + rr * np.cos(th),
                                         disk_center[1] + rr * np.sin(th)])
    return run_chain(cond_model, cfg, observables, points=interior_init,
                     chain_index=chain_index, keep_state=True)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def diagnostics(series) -> dict:
    """Integrated autocorrelation time (initial-positive-sequence), ESS,
    and batch-means standard error with floor(sqrt(n)) batches."""
    x = series.values if isinstance(series, ObservableSeries) else np.asarray(series, dtype=float)
    n = len(x)
    mean = float(np.mean(x)) if n else float("nan")
    var = float(np.var(x)) if n else float("nan")
    if n < 8 or var == 0.0 or not np.isfinite(var):
        return {"mean": mean, "tau_int": float("nan"), "ess": float("nan"),
                "stderr": 0.0 if var == 0.0 else float("nan"), "degenerate": True}

    # autocovariance via FFT
    xd = x - mean
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xd, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n].real / n
    rho = acov / acov[0]

    # Geyer: sum pair sums while they stay positive
    tau = 1.0
    k = 1
    while k + 1 < n // 2:
        gamma = rho[k] + rho[k + 1]
        if gamma <= 0:
            break
        tau += 2.0 * gamma
        k += 2
    ess = n / tau

    n_batches = int(math.floor(math.sqrt(n)))
    m_batch = n // n_batches
    bm = x[: n_batches * m_batch].reshape(n_batches, m_batch).mean(axis=1)
    stderr = float(np.std(bm, ddof=1) / math.sqrt(n_batches))
    return {"mean": mean, "tau_int": float(tau), "ess": float(ess),
            "stderr": stderr, "degenerate": False}


def pooled_mean_stderr(series_list) -> tuple:
    """Combine per-chain batch-means errors: mean of chain means, errors
    added in quadrature / n_chains."""
    means = []
    errs = []
    for s in series_list:
        d = diagnostics(s)
        means.append(d["mean"])
        errs.append(d["stderr"])
    k = len(means)
    return float(np.mean(means)), float(np.sqrt(np.sum(np.square(errs))) / k)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PLCK"


def save_checkpoint(path, state: ChainState, model: EnergyModel):
    header = {
        "model": model_hash(model),
        "sweeps": state.sweep_count,
        "sigma": state.sigma,
        "energy": state.energy,
        "n": state.cfg.n,
        "domain": {"kind": state.cfg.domain.kind, "side": state.cfg.domain.side},
        "rng_state": state.rng.bit_generator.state,
        "accepted": state.accepted,
        "proposed": state.proposed,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(state.cfg.points.astype("<f8").tobytes())


def load_checkpoint(path, model: EnergyModel) -> ChainState:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        pts = np.frombuffer(fh.read(), dtype="<f8").reshape(header["n"], 2)
    if header["model"] != model_hash(model):
        raise ValueError("checkpoint belongs to a different model")
    domain = Domain(header["domain"]["kind"], header["domain"]["side"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    cfg = PointConfig(domain, pts.copy())
    return ChainState(cfg=cfg, energy=header["energy"], rng=rng,
                      sigma=header["sigma"], sweep_count=header["sweeps"],
                      accepted=header.get("accepted", 0),
                      proposed=header.get("proposed", 0))


def sample_poisson_torus(rng: np.random.Generator, intensity: float,
                         side: float = 1.0) -> np.ndarray:
    """Homogeneous Poisson point process on the torus: Poisson particle
    number, independent uniform positions."""
    k = rng.poisson(intensity * side**2)
    return rng.uniform(-side / 2, side / 2, size=(k, 2))
