"""Stage-by-stage orchestration of the offline lifetime-value workflow.

Stages form a linear chain; each one writes its record into the work
directory and is skipped on rerun when the record exists and was produced
under the same configuration.

    ingest -> factorize -> build-states -> fit-behavior -> evaluate
           -> improve -> compare -> report
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import estimators as est
from . import factorize as fz
from . import ingest
from . import policies as pol
from . import report as rpt
from . import stats
from .states import TrajectorySet, build_trajectories

_logger = logging.getLogger(__name__)

STAGES = ("ingest", "factorize", "build-states", "fit-behavior", "evaluate", "improve",
          "compare", "report")
POLICY_NAMES = ("behavior", "myopic", "target")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the reason."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    input: str = ""
    workdir: str = "ltv_run"
    delimiter: str = ","
    # filtering
    min_interactions: int = 20
    require_positive: bool = False
    reward_scale: bool = False
    # factorization
    method: str = "svd"
    k: int = 20
    lam: float = 0.1
    folds: int = 10
    cv_methods: str = "als,svd,mean"
    als_iters: int = 30
    # reinforcement learning
    gamma: float | None = None
    epsilon: float | None = None
    alpha: float | None = None
    target_kl: float = 0.5
    beta: float = 1.0
    rho_clip: float | None = None
    behavior_subsample: int = 10_000
    kl_states: int = 5_000
    gamma_grid: str = ""
    # statistics
    resamples: int = 200
    states_per_traj: int = 5
    seed: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls()
        return cfg.updated(values)

    def updated(self, values: dict) -> "RunConfig":
        kinds = {f.name: f for f in fields(self)}
        out = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise KeyError(f"unknown configuration key {key!r}")
            out[key] = _coerce(kinds[key], raw)
        return dataclasses.replace(self, **out)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_mapping(read_config_file(path))

    def fingerprint(self, keys) -> str:
        blob = json.dumps({k: getattr(self, k) for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_seed(self, label: str) -> int:
        """Seed for one stage, derived from the master seed and a stable label."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(label.encode())])
        return int(ss.generate_state(1)[0])

    def grid(self, dataset_gamma) -> list[float]:
        if self.gamma_grid:
            return [float(g) for g in self.gamma_grid.split(",")]
        return rpt.default_gamma_grid(dataset_gamma)


def _coerce(f, raw):
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none", "auto")
                       and "None" in str(f.type)):
        return None
    if not isinstance(raw, str):
        return raw
    t = str(f.type)
    raw = raw.strip()
    if t.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# which configuration keys each stage (and everything upstream) depends on
_STAGE_KEYS = {
    "ingest": ("input", "delimiter", "min_interactions", "require_positive", "reward_scale", "gamma"),
    "factorize": ("method", "k", "lam", "folds", "cv_methods", "als_iters", "seed"),
    "build-states": (),
    "fit-behavior": ("behavior_subsample",),
    "evaluate": ("epsilon", "gamma_grid"),
    "improve": ("alpha", "target_kl", "beta", "kl_states"),
    "compare": ("rho_clip", "resamples", "states_per_traj"),
    "report": (),
}


def _cumulative_keys(stage):
    keys = []
    for s in STAGES:
        keys += _STAGE_KEYS[s]
        if s == stage:
            return keys
    raise KeyError(stage)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


class Workdir:
    """Persisted records of one run."""

    def __init__(self, path):
        self.path = Path(path)

    def file(self, name) -> Path:
        return self.path / name

    def done(self, stage: str, cfg: RunConfig) -> bool:
        marker = self.file(f"stage_{stage}.json")
        if not marker.exists():
            return False
        return json.loads(marker.read_text()).get("fingerprint") == cfg.fingerprint(_cumulative_keys(stage))

    def mark(self, stage: str, cfg: RunConfig) -> None:
        self.file(f"stage_{stage}.json").write_text(
            _dumps({"stage": stage, "fingerprint": cfg.fingerprint(_cumulative_keys(stage))}))

    def require(self, stage: str, *names):
        for name in names:
            if not self.file(name).exists():
                raise PipelineError(stage, f"missing upstream record {name}")

    def write_json(self, name, obj):
        self.file(name).write_text(_dumps(obj))

    def read_json(self, name):
        return json.loads(self.file(name).read_text())

    # typed loaders
    def dataset(self) -> ingest.Dataset:
        meta = self.read_json("dataset.json")
        records = ingest.parse_log(self.file("dataset.csv"))
        ds = ingest.filter_users(records, 1)
        return dataclasses.replace(ds, gamma=meta["gamma"],
                                   reward_scale=tuple(meta["reward_scale"]) if meta["reward_scale"] else None,
                                   filter_counts=meta["filter_counts"])

    def model(self) -> fz.LatentModel:
        return fz.LatentModel.load(self.file("model.npz"))

    def trajectories(self) -> TrajectorySet:
        return TrajectorySet.load(self.file("trajectories.npz"))

    def policy(self, name) -> pol.PolicyParams:
        return pol.PolicyParams.load(self.file(f"policy_{name}.json"))

    def estimate(self, name) -> est.ValueWeights:
        return est.ValueWeights.load(self.file(f"estimate_{name}.json"))


# ---------------------------------------------------------------- stages

def stage_ingest(cfg: RunConfig, wd: Workdir):
    records = ingest.parse_log(cfg.input, cfg.delimiter)
    ds = ingest.filter_users(records, cfg.min_interactions, cfg.require_positive)
    if cfg.reward_scale:
        ds = ingest.scale_rewards(ds)
    ds = ingest.with_gamma(ds, cfg.gamma)
    ingest.write_log([e for log in ds.logs for e in log.events], wd.file("dataset.csv"))
    wd.write_json("dataset.json", {
        "n_users": ds.n_users, "n_items": ds.n_items, "n_samples": ds.n_samples,
        "gamma": ds.gamma, "gamma_estimated": cfg.gamma is None,
        "reward_scale": list(ds.reward_scale) if ds.reward_scale else None,
        "filter_counts": ds.filter_counts,
    })


def stage_factorize(cfg: RunConfig, wd: Workdir):
    wd.require("factorize", "dataset.csv", "dataset.json")
    ds = wd.dataset()
    ratings = fz.SparseRatings.from_dataset(ds)
    seed = cfg.stage_seed("factorize")
    span = 1.0
    if ds.reward_scale:
        span = ds.reward_scale[1] - ds.reward_scale[0] or 1.0
    cv = {}
    for method in [m.strip() for m in cfg.cv_methods.split(",") if m.strip()]:
        res = fz.cross_validate(ratings, method, cfg.k, cfg.lam, cfg.folds, seed,
                                max_iters=cfg.als_iters)
        cv[method] = {"fold_mse": [x * span * span for x in res.fold_mse],
                      "mean": res.mean * span * span, "sd": res.sd * span * span}
    if cfg.method not in ("als", "svd"):
        raise ValueError("the state representation needs method 'als' or 'svd'")
    model = fz.fit(ratings, cfg.method, cfg.k, cfg.lam, seed=seed, max_iters=cfg.als_iters)
    model.save(wd.file("model.npz"))
    wd.write_json("cv.json", {"folds": cfg.folds, "k": cfg.k, "lam": cfg.lam, "seed": seed,
                              "methods": cv})


def stage_build_states(cfg: RunConfig, wd: Workdir):
    wd.require("build-states", "dataset.csv", "model.npz")
    traj = build_trajectories(wd.dataset(), wd.model())
    traj.save(wd.file("trajectories.npz"))


def stage_fit_behavior(cfg: RunConfig, wd: Workdir):
    wd.require("fit-behavior", "trajectories.npz", "model.npz")
    w = pol.fit_behavior_policy(wd.trajectories(), wd.model().V, subsample=cfg.behavior_subsample,
                                seed=cfg.stage_seed("fit-behavior"))
    w.save(wd.file("policy_behavior.json"))


def _gamma(wd) -> float:
    return float(wd.read_json("dataset.json")["gamma"])


def stage_evaluate(cfg: RunConfig, wd: Workdir, kinds=("onpolicy", "q", "mc")):
    """On-policy LSTD, LSTDQ (at the data discount and at 0) and Monte-Carlo."""
    wd.require("evaluate", "trajectories.npz", "model.npz", "dataset.json")
    traj, V, gamma = wd.trajectories(), wd.model().V, _gamma(wd)
    if "onpolicy" in kinds:
        est.lstd(est.state_batch(traj), gamma, cfg.epsilon).save(wd.file("estimate_onpolicy.json"))
    if "q" in kinds:
        qb = est.q_batch(traj, V)
        est.lstdq(qb, gamma, cfg.epsilon).save(wd.file("estimate_q.json"))
        est.lstdq(qb, 0.0, cfg.epsilon).save(wd.file("estimate_q_myopic.json"))
        wd.write_json("gamma_sweep.json", rpt.gamma_sweep(traj, V, cfg.grid(gamma), cfg.epsilon))
    if "mc" in kinds:
        wd.write_json("estimate_mc.json", {"kind": "mc", "gamma": gamma,
                                           "value": est.monte_carlo_value(traj, gamma)})


def _kl_states(cfg, traj):
    rows = np.arange(traj.n_steps)
    if rows.size > cfg.kl_states:
        rng = np.random.default_rng(cfg.stage_seed("kl-states"))
        rows = np.sort(rng.choice(rows, cfg.kl_states, replace=False))
    return traj.states[rows]


def improved_policy(theta_q, wb, states, V, cfg, kind) -> pol.PolicyParams:
    alpha = cfg.alpha
    if alpha is None:
        alpha = pol.choose_alpha(theta_q, wb, states, V, cfg.target_kl)
    p = pol.make_target_policy(theta_q, alpha, kind)
    if cfg.beta != 1.0:
        mixed = pol.mix_policies(p, wb, cfg.beta)
        p = pol.PolicyParams(mixed.w, kind, mixed.meta | {"alpha": alpha})
    p.meta["kl_from_behavior"] = pol.mean_kl(p, wb, states, V)
    return p


def stage_improve(cfg: RunConfig, wd: Workdir):
    """Target (LSTDQ at the data discount) and myopic (discount 0) policies."""
    wd.require("improve", "trajectories.npz", "model.npz", "policy_behavior.json",
               "estimate_q.json", "estimate_q_myopic.json")
    traj, V = wd.trajectories(), wd.model().V
    wb = wd.policy("behavior")
    states = _kl_states(cfg, traj)
    for name, rec in (("target", "q"), ("myopic", "q_myopic")):
        improved_policy(wd.estimate(rec).theta, wb, states, V, cfg, name).save(
            wd.file(f"policy_{name}.json"))
    ranks = {name: rpt.rank_histogram(wd.policy(name), traj, V) for name in POLICY_NAMES}
    wd.write_json("rank_histograms.json", ranks)


def policy_evaluators(cfg: RunConfig, wd: Workdir):
    """Bootstrap evaluators for behavior (on-policy) and target/myopic (off-policy)."""
    traj, V, gamma = wd.trajectories(), wd.model().V, _gamma(wd)
    wb = wd.policy("behavior")
    sb = est.state_batch(traj)
    evals = {"behavior": est.LSTDValueEvaluator(traj, sb, gamma, cfg.epsilon, cfg.states_per_traj)}
    diag = {}
    for name in ("myopic", "target"):
        rho = est.importance_ratios(traj, V, wd.policy(name), wb, cfg.rho_clip)
        evals[name] = est.LSTDValueEvaluator(traj, sb.with_rho(rho), gamma, cfg.epsilon,
                                             cfg.states_per_traj, kind="offpolicy")
        diag[name] = est.rho_diagnostics(rho)
    return traj, evals, diag


def evaluate_offpolicy(cfg: RunConfig, wd: Workdir):
    """Off-policy LSTD estimates of the improved policies (needs ``improve``)."""
    wd.require("evaluate", "trajectories.npz", "model.npz", "dataset.json",
               *(f"policy_{n}.json" for n in POLICY_NAMES))
    _, evals, _ = policy_evaluators(cfg, wd)
    for name in ("myopic", "target"):
        evals[name].fit().save(wd.file(f"estimate_offpolicy_{name}.json"))


def stage_compare(cfg: RunConfig, wd: Workdir):
    wd.require("compare", "trajectories.npz", "model.npz", "dataset.json",
               *(f"policy_{n}.json" for n in POLICY_NAMES))
    traj, evals, diag = policy_evaluators(cfg, wd)
    gamma = _gamma(wd)
    seed = cfg.stage_seed("compare")
    for name in ("myopic", "target"):
        evals[name].fit().save(wd.file(f"estimate_offpolicy_{name}.json"))
    boot = {name: stats.bootstrap_value(traj.n_trajectories, ev, cfg.resamples, seed)
            for name, ev in evals.items()}
    mc = stats.bootstrap_value(traj.n_trajectories, est.MonteCarloEvaluator(traj, gamma),
                               cfg.resamples, seed)
    values = {}
    for name, res in boot.items():
        values[name] = {"mean": res.mean, "half_width": res.half_width, "B": res.B,
                        "estimator": "lstd" if name == "behavior" else "offpolicy_lstd",
                        "resamples": [float(x) for x in res.values]}
        if name in diag:
            values[name]["rho"] = diag[name]
    values["behavior_mc"] = {"mean": mc.mean, "half_width": mc.half_width, "B": mc.B,
                             "estimator": "monte_carlo", "resamples": [float(x) for x in mc.values]}
    pairs = []
    for base, cand in (("behavior", "myopic"), ("myopic", "target"), ("behavior", "target")):
        entry = {"baseline": base, "candidate": cand}
        try:
            t = stats.paired_test(boot[base].values, boot[cand].values).test
            entry.update(p_value=t.p_value, w_plus=t.w_plus, n=t.n, method=t.method)
        except stats.IndistinguishableError:
            entry.update(p_value=None, w_plus=None, n=0, method="indistinguishable")
        pairs.append(entry)
    wd.write_json("compare.json", {"B": cfg.resamples, "seed": seed, "values": values,
                                   "pairs": pairs})


def collect_records(wd: Workdir, cfg: RunConfig | None = None) -> dict:
    records = {}
    sources = {"cv": "cv.json", "compare": "compare.json", "sweep": "gamma_sweep.json",
               "ranks": "rank_histograms.json"}
    for key, name in sources.items():
        if wd.file(name).exists():
            records[key] = wd.read_json(name)
    if wd.file("dataset.json").exists():
        meta = wd.read_json("dataset.json")
        if wd.file("cv.json").exists():
            cv = wd.read_json("cv.json")
            meta = meta | {"k": cv["k"], "folds": cv["folds"], "lam": cv["lam"]}
        if cfg is not None:
            meta = meta | {"method": cfg.method, "seed": cfg.seed,
                           "resamples": cfg.resamples, "target_kl": cfg.target_kl,
                           "beta": cfg.beta}
        for name in POLICY_NAMES[1:]:
            if wd.file(f"policy_{name}.json").exists():
                meta[f"{name}_policy"] = wd.policy(name).meta
        records["meta"] = meta
    return records


def stage_report(cfg: RunConfig, wd: Workdir) -> dict:
    return rpt.emit_report(collect_records(wd, cfg), wd.file("report"))


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "factorize": stage_factorize,
    "build-states": stage_build_states,
    "fit-behavior": stage_fit_behavior,
    "evaluate": stage_evaluate,
    "improve": stage_improve,
    "compare": stage_compare,
    "report": stage_report,
}


def run_stage(stage: str, cfg: RunConfig, force: bool = False):
    wd = Workdir(cfg.workdir)
    wd.path.mkdir(parents=True, exist_ok=True)
    if not force and stage != "report" and wd.done(stage, cfg):
        _logger.info("stage %s up to date, skipping", stage)
        return None
    idx = STAGES.index(stage)
    if idx > 0 and not wd.done(STAGES[idx - 1], cfg):
        raise PipelineError(stage, f"upstream stage {STAGES[idx - 1]!r} has not completed "
                                   "under this configuration")
    try:
        out = STAGE_FUNCS[stage](cfg, wd)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc
    wd.mark(stage, cfg)
    # downstream markers become stale once an upstream stage reruns
    for later in STAGES[idx + 1:]:
        wd.file(f"stage_{later}.json").unlink(missing_ok=True)
    return out


def run_all(cfg: RunConfig) -> dict:
    """Run every stage in order, skipping the ones already up to date."""
    wd = Workdir(cfg.workdir)
    wd.path.mkdir(parents=True, exist_ok=True)
    for stage in STAGES[:-1]:
        if wd.done(stage, cfg):
            _logger.info("stage %s up to date, skipping", stage)
            continue
        run_stage(stage, cfg, force=True)
    return run_stage("report", cfg)
